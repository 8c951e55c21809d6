//! Training loops and the pruning pipeline: Tick, Tock, fine-tune, and the
//! One-Shot / Tick-Only / Tick-Tock schedules built from them.

use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, PruneMode, SubsetPolicy, TrainConfig};
use crate::data::{Dataset, DatasetBundle, Normalization};
use crate::error::{Error, Result};
use crate::gates::{decorate_model, gate_l1, infer_mode, undecorate_model};
use crate::groups::{discover_groups, prune_units};
use crate::importance::{global_rank, magnitude_scores, ImportanceTable, Ranker};
use crate::model::{build_mini_resnet, build_plain_cnn, Architecture, LayerKind, ModelSpec, PlainCnnOptions};
use crate::network::{Mode, Network, ParamRole};
use crate::optim::{one_cycle_lr, Sgd};
use crate::pruner::{apply_prune, cost_report, pruned_spec, select_prune_set, CostReport, SelectionStatus};

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum Schedule {
    Constant(f32),
    OneCycle { low: f32, high: f32, total: usize },
}

impl Schedule {
    pub fn lr(&self, step: usize) -> Result<f32> {
        match *self {
            Schedule::Constant(lr) => Ok(lr),
            Schedule::OneCycle { low, high, total } => one_cycle_lr(step, total, low, high),
        }
    }
}

/// Adds the subgradient of `λ·Σ|φ|` to every updatable gate gradient; the
/// subgradient at `φ = 0` is 0.
pub fn add_sparse_subgradient(net: &mut Network, lambda: f32) {
    if lambda == 0.0 {
        return;
    }
    for p in net.params.values_mut().filter(|p| p.role == ParamRole::Gate && p.updatable) {
        let (value, grad) = (p.value.data().to_vec(), p.grad.data_mut());
        for (g, v) in grad.iter_mut().zip(value) {
            if v > 0.0 {
                *g += lambda;
            } else if v < 0.0 {
                *g -= lambda;
            }
        }
    }
}

fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

pub struct EpochOptions<'a> {
    pub norm: &'a Normalization,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub sparse_lambda: f32,
}

/// One shuffled pass of SGD over `data` in training mode, updating BN running
/// statistics. When `table` is given, gate scores are accumulated from the
/// same backward passes. Returns the mean objective (including any sparse
/// penalty).
pub fn train_epoch(
    net: &mut Network,
    data: &Dataset,
    opts: &EpochOptions,
    opt: &mut Sgd,
    step: &mut usize,
    mut table: Option<&mut ImportanceTable>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0f64;
    for chunk in order.chunks(opts.batch_size) {
        let (x, y) = data.batch(chunk, opts.norm);
        opt.lr = opts.schedule.lr(*step)?;
        let cache = net.forward(&x, &y, Mode::Train)?;
        net.update_running_stats(&cache);
        net.backward(&cache)?;
        if let Some(t) = table.as_deref_mut() {
            t.accumulate_gradients(net)?;
        }
        add_sparse_subgradient(net, opts.sparse_lambda);
        opt.step(&mut net.params);
        *step += 1;
        let penalty = if opts.sparse_lambda > 0.0 {
            opts.sparse_lambda as f64 * gate_l1(net).0
        } else {
            0.0
        };
        total += (cache.loss as f64 + penalty) * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Top-1 accuracy in evaluation mode, iterating samples in order.
pub fn evaluate(net: &Network, data: &Dataset, norm: &Normalization, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk, norm);
        let cache = net.forward(&x, &y, Mode::Eval)?;
        correct += cache.predictions().iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains with a 1-cycle schedule over `epochs`, every parameter updatable.
#[allow(clippy::too_many_arguments)]
pub fn train_cycle(
    net: &mut Network,
    data: &Dataset,
    norm: &Normalization,
    epochs: usize,
    batch_size: usize,
    lr: (f32, f32),
    momentum: f32,
    weight_decay: f32,
    sparse_lambda: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let total = epochs * batch_count(data.len(), batch_size);
    let opts = EpochOptions {
        norm,
        batch_size,
        schedule: Schedule::OneCycle {
            low: lr.0,
            high: lr.1,
            total,
        },
        sparse_lambda,
    };
    let mut opt = Sgd::new(lr.0, momentum, weight_decay)?;
    let mut step = 0;
    (0..epochs)
        .map(|_| train_epoch(net, data, &opts, &mut opt, &mut step, None, rng))
        .collect()
}

pub fn build_model(cfg: &TrainConfig, input_shape: [usize; 3], classes: usize) -> Result<ModelSpec> {
    match cfg.architecture {
        Architecture::Plain => build_plain_cnn(
            &cfg.widths,
            input_shape,
            classes,
            &PlainCnnOptions {
                pool_every: cfg.pool_every,
                batch_norm: cfg.batch_norm,
            },
        ),
        Architecture::Residual => build_mini_resnet(&cfg.widths, &cfg.blocks_per_stage, input_shape, classes),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
}

pub fn train_baseline(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<(Network, BaselineReport)> {
    let spec = build_model(cfg, bundle.train.shape, bundle.classes)?;
    let mut net = Network::new(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let epoch_losses = train_cycle(
        &mut net,
        &bundle.train,
        &bundle.normalization,
        cfg.epochs,
        cfg.batch_size,
        (cfg.lr_low, cfg.lr_high),
        cfg.momentum,
        cfg.weight_decay,
        0.0,
        &mut rng,
    )?;
    for (e, l) in epoch_losses.iter().enumerate() {
        debug!("baseline epoch {}: loss {l:.4}", e + 1);
    }
    let test_accuracy = evaluate(&net, &bundle.test, &bundle.normalization, 256)?;
    info!("baseline test accuracy {test_accuracy:.4}");
    Ok((
        net,
        BaselineReport {
            epoch_losses,
            test_accuracy,
        },
    ))
}

// ---------------------------------------------------------------------------
// Run log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Rank,
    Prune,
    Tick,
    Tock,
    Finetune,
}

impl Phase {
    fn letter(self) -> char {
        match self {
            Phase::Rank => 'r',
            Phase::Prune => 'p',
            Phase::Tick => 't',
            Phase::Tock => 'T',
            Phase::Finetune => 'f',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    /// Training epochs completed so far in this run.
    pub epoch: usize,
    /// Mean training objective of the phase; absent for phases without training.
    pub loss: Option<f64>,
    pub test_accuracy: f64,
    pub alive_filters: usize,
    pub removed_filters: usize,
    pub flops: u64,
    pub params: u64,
    pub mean_abs_phi: f64,
    pub elapsed_ms: u64,
}

pub const RUNLOG_FORMAT: &str = "prunekit-runlog-v1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<PhaseRecord>,
}

impl RunLog {
    pub fn phases(&self) -> Vec<Phase> {
        self.records.iter().map(|r| r.phase).collect()
    }

    /// One header line naming the format, then one JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = format!("{{\"format\":\"{RUNLOG_FORMAT}\"}}\n");
        for r in &self.records {
            out += &(serde_json::to_string(r).expect("serializable record") + "\n");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<RunLog> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header: serde_json::Value = lines
            .next()
            .and_then(|(_, l)| serde_json::from_str(l).ok())
            .ok_or_else(|| Error::Data("run log has no header line".into()))?;
        if header["format"] != RUNLOG_FORMAT {
            return Err(Error::Data(format!("run log format {} is not {RUNLOG_FORMAT}", header["format"])));
        }
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("run log line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(RunLog { records })
    }

    /// Checks the phase sequence against the schedule of `mode`:
    /// one-shot `rank prune finetune`, tick-only `tick+ finetune`,
    /// tick-tock `(tick{T} tock)* tick{0..=T} finetune`.
    pub fn matches_grammar(&self, mode: PruneMode, ticks_per_tock: usize) -> bool {
        let s: String = self.phases().into_iter().map(Phase::letter).collect();
        let Some(body) = s.strip_suffix('f') else {
            return false;
        };
        match mode {
            PruneMode::OneShot => body == "rp",
            PruneMode::TickOnly => !body.is_empty() && body.chars().all(|c| c == 't'),
            PruneMode::TickTock => {
                let block = "t".repeat(ticks_per_tock) + "T";
                let mut rest = body;
                while let Some(r) = rest.strip_prefix(block.as_str()) {
                    rest = r;
                }
                // A Tock follows every T-th Tick unless the target was already met.
                rest.len() <= ticks_per_tock && rest.chars().all(|c| c == 't')
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum RunStatus {
    Complete,
    /// The FLOPs target could not be reached.
    Partial { reason: String },
}

pub struct PipelineOutcome {
    pub mode: PruneMode,
    /// Gates merged; holds only vanilla modules.
    pub network: Network,
    /// The fine-tuned gated model just before merging.
    pub gated: Network,
    pub log: RunLog,
    pub status: RunStatus,
    /// Importance tables in the order they were used for pruning.
    pub tables: Vec<ImportanceTable>,
    pub baseline_cost: CostReport,
    pub final_cost: CostReport,
    pub baseline_accuracy: f64,
    pub finetune_accuracy: f64,
    pub scratch_accuracy: Option<f64>,
}

impl PipelineOutcome {
    pub fn summary_header() -> &'static str {
        "mode,flops_pruned_pct,params_pruned_pct,baseline_accuracy,finetune_accuracy,scratch_accuracy\n"
    }

    pub fn summary_row(&self) -> String {
        format!(
            "{},{:.2},{:.2},{:.4},{:.4},{}\n",
            self.mode,
            self.final_cost.flops_reduction_pct(),
            self.final_cost.params_reduction_pct(),
            self.baseline_accuracy,
            self.finetune_accuracy,
            self.scratch_accuracy.map_or(String::new(), |a| format!("{a:.4}")),
        )
    }
}

/// Number of prunable channels still alive, counting a group channel once.
pub fn alive_channels(spec: &ModelSpec) -> Result<usize> {
    let groups = discover_groups(spec)?;
    let units = prune_units(spec);
    let grouped: usize = groups.iter().map(|g| g.members.len() * g.width).sum();
    let in_groups: usize = groups.iter().map(|g| g.width).sum();
    Ok(units.iter().map(|u| u.width).sum::<usize>() - grouped + in_groups)
}

/// Channels removed by one Tick: `ceil(fraction · alive)`, at least one.
pub fn tick_prune_count(fraction: f64, alive: usize) -> usize {
    ((fraction * alive as f64).ceil() as usize).max(1)
}

fn conv_filters(spec: &ModelSpec) -> usize {
    prune_units(spec).iter().map(|u| u.width).sum()
}

fn mean_abs_phi(net: &Network) -> f64 {
    let (sum, n) = gate_l1(net);
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    bundle: &'a DatasetBundle,
    net: Network,
    rng: ChaCha8Rng,
    log: RunLog,
    tables: Vec<ImportanceTable>,
    epochs: usize,
    start: Instant,
    target_flops: u64,
}

enum PhaseFlags {
    Tick,
    Train,
    Frozen,
}

impl Runner<'_> {
    fn flops(&self) -> Result<u64> {
        Ok(cost_report(&self.net.spec)?.flops)
    }

    fn set_flags(&mut self, flags: PhaseFlags) {
        let gamma_frozen = self.net.decoration.as_ref().is_some_and(|d| d.gamma_frozen);
        let classifier = self
            .net
            .spec
            .layers
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Linear { .. }))
            .map(|l| format!("{}.", l.id))
            .unwrap_or_default();
        let train_beta = self.cfg.tick_train_beta;
        for (name, p) in self.net.params.iter_mut() {
            p.updatable = match flags {
                PhaseFlags::Frozen => false,
                PhaseFlags::Train => !(gamma_frozen && p.role == ParamRole::Gamma),
                PhaseFlags::Tick => {
                    p.role == ParamRole::Gate
                        || name.starts_with(&classifier)
                        || (train_beta && p.role == ParamRole::Beta)
                }
            };
        }
    }

    fn record(&mut self, phase: Phase, loss: Option<f64>, removed: usize) -> Result<()> {
        let cost = cost_report(&self.net.spec)?;
        let test_accuracy = evaluate(&self.net, &self.bundle.test, &self.bundle.normalization, 256)?;
        let rec = PhaseRecord {
            phase,
            epoch: self.epochs,
            loss,
            test_accuracy,
            alive_filters: conv_filters(&self.net.spec),
            removed_filters: removed,
            flops: cost.flops,
            params: cost.params,
            mean_abs_phi: mean_abs_phi(&self.net),
            elapsed_ms: self.start.elapsed().as_millis() as u64,
        };
        info!(
            "{:?}: loss {:?} acc {:.4} filters {} flops {} (-{} filters)",
            phase, loss, test_accuracy, rec.alive_filters, rec.flops, removed
        );
        self.log.records.push(rec);
        Ok(())
    }

    fn tick_data(&self) -> Dataset {
        match self.cfg.tick_subset {
            SubsetPolicy::Full => self.bundle.train.clone(),
            SubsetPolicy::PerClass(n) => self.bundle.train.per_class_subset(n),
        }
    }

    fn finish_table(&self, table: ImportanceTable) -> Result<ImportanceTable> {
        match self.cfg.ranker {
            Ranker::Taylor => Ok(table),
            Ranker::Magnitude => magnitude_scores(&self.net),
        }
    }

    /// Removes the `count` lowest-ranked channels. Returns the number of
    /// filters removed (0 when no legal candidate remains).
    fn prune_lowest(&mut self, table: &ImportanceTable, count: usize) -> Result<usize> {
        let groups = discover_groups(&self.net.spec)?;
        let ranking = global_rank(table, &groups, self.cfg.min_channels)?;
        if ranking.is_empty() {
            return Ok(0);
        }
        let (mask, status) = select_prune_set(&self.net.spec, &ranking, count, self.cfg.min_channels)?;
        if let SelectionStatus::Partial { selected } = status {
            warn!("only {selected} of {count} requested channels could be selected");
        }
        let removed = mask.removed();
        if removed > 0 {
            self.net = apply_prune(&self.net, &mask)?;
        }
        Ok(removed)
    }

    /// The training half of a Tick: one epoch on the subset with only the
    /// gates and the classifier updatable, accumulating Θ.
    fn tick_epoch(&mut self) -> Result<(ImportanceTable, f64)> {
        let data = self.tick_data();
        if data.is_empty() {
            return Err(Error::Config("tick subset is empty".into()));
        }
        self.set_flags(PhaseFlags::Tick);
        let mut table = ImportanceTable::new(&self.net, self.cfg.batch_size);
        let opts = EpochOptions {
            norm: &self.bundle.normalization,
            batch_size: self.cfg.batch_size,
            schedule: Schedule::Constant(self.cfg.tick_lr),
            sparse_lambda: 0.0,
        };
        let mut opt = Sgd::new(self.cfg.tick_lr, self.cfg.momentum, self.cfg.weight_decay)?;
        let mut step = 0;
        let loss = train_epoch(&mut self.net, &data, &opts, &mut opt, &mut step, Some(&mut table), &mut self.rng)?;
        self.epochs += 1;
        Ok((self.finish_table(table)?, loss))
    }

    fn tick(&mut self) -> Result<usize> {
        let (table, loss) = self.tick_epoch()?;
        let count = tick_prune_count(self.cfg.tick_prune_fraction, alive_channels(&self.net.spec)?);
        let removed = self.prune_lowest(&table, count)?;
        self.tables.push(table);
        self.record(Phase::Tick, Some(loss), removed)?;
        Ok(removed)
    }

    fn cycle(&mut self, phase: Phase, epochs: usize, lambda: f32) -> Result<()> {
        self.set_flags(PhaseFlags::Train);
        let losses = if epochs == 0 {
            Vec::new()
        } else {
            train_cycle(
                &mut self.net,
                &self.bundle.train,
                &self.bundle.normalization,
                epochs,
                self.cfg.batch_size,
                (self.cfg.cycle_lr_low, self.cfg.cycle_lr_high),
                self.cfg.momentum,
                self.cfg.weight_decay,
                lambda,
                &mut self.rng,
            )?
        };
        self.epochs += epochs;
        self.record(phase, losses.last().copied(), 0)
    }

    /// Scores every gate once without updating any parameter.
    fn rank_once(&mut self) -> Result<(ImportanceTable, f64)> {
        let data = self.tick_data();
        if data.is_empty() {
            return Err(Error::Config("ranking subset is empty".into()));
        }
        self.set_flags(PhaseFlags::Frozen);
        let mut table = ImportanceTable::new(&self.net, self.cfg.batch_size);
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(self.cfg.batch_size) {
            let (x, y) = data.batch(chunk, &self.bundle.normalization);
            total += table.accumulate_batch(&mut self.net, &x, &y, Mode::Train)? as f64 * chunk.len() as f64;
        }
        Ok((self.finish_table(table)?, total / data.len() as f64))
    }

    /// Prunes the smallest prefix of the ranking that meets the FLOPs target.
    fn one_shot(&mut self) -> Result<Option<String>> {
        let (table, loss) = self.rank_once()?;
        self.record(Phase::Rank, Some(loss), 0)?;
        let groups = discover_groups(&self.net.spec)?;
        let ranking = global_rank(&table, &groups, self.cfg.min_channels)?;
        self.tables.push(table);
        let flops_for = |k: usize| -> Result<(u64, crate::pruner::PruneMask)> {
            if k == 0 {
                return Ok((cost_report(&self.net.spec)?.flops, Default::default()));
            }
            let (mask, _) = select_prune_set(&self.net.spec, &ranking, k, self.cfg.min_channels)?;
            Ok((cost_report(&pruned_spec(&self.net.spec, &mask)?)?.flops, mask))
        };
        // Selection is prefix-greedy, so FLOPs fall monotonically with k.
        let (mut lo, mut hi) = (0usize, ranking.len());
        let (max_flops, max_mask) = flops_for(hi)?;
        let mut partial = None;
        let mask = if max_flops > self.target_flops {
            partial = Some(format!(
                "pruning every legal channel leaves {max_flops} FLOPs, above the target {}",
                self.target_flops
            ));
            max_mask
        } else {
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if flops_for(mid)?.0 <= self.target_flops {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            flops_for(hi)?.1
        };
        let removed = mask.removed();
        if removed > 0 {
            self.net = apply_prune(&self.net, &mask)?;
        }
        self.record(Phase::Prune, None, removed)?;
        Ok(partial)
    }

    fn iterate(&mut self, with_tock: bool) -> Result<Option<String>> {
        let mut ticks = 0;
        let mut since_tock = 0;
        while self.flops()? > self.target_flops {
            if ticks == self.cfg.max_ticks {
                return Ok(Some(format!("stopped after max_ticks = {}", self.cfg.max_ticks)));
            }
            let removed = self.tick()?;
            ticks += 1;
            since_tock += 1;
            if removed == 0 {
                return Ok(Some(format!(
                    "every layer is at the floor of {} channels; FLOPs {} remain above the target {}",
                    self.cfg.min_channels,
                    self.flops()?,
                    self.target_flops
                )));
            }
            if with_tock && since_tock == self.cfg.ticks_per_tock && self.flops()? > self.target_flops {
                let before = mean_abs_phi(&self.net);
                self.cycle(Phase::Tock, self.cfg.tock_epochs, self.cfg.sparse_lambda)?;
                debug!("tock: mean |phi| {before:.5} -> {:.5}", mean_abs_phi(&self.net));
                since_tock = 0;
            }
        }
        Ok(None)
    }
}

/// Runs the configured schedule on a trained baseline. The baseline itself is
/// not modified.
pub fn run(cfg: &PipelineConfig, baseline: &Network, bundle: &DatasetBundle) -> Result<PipelineOutcome> {
    use crate::config::KeyValueConfig;
    cfg.validate()?;
    if baseline.decoration.is_some() {
        return Err(Error::State("baseline must not carry gates".into()));
    }
    let baseline_cost = cost_report(&baseline.spec)?;
    let baseline_accuracy = evaluate(baseline, &bundle.test, &bundle.normalization, 256)?;
    let mut net = baseline.clone();
    let mode = match cfg.decorate {
        Some(m) => m,
        None => infer_mode(&net)?,
    };
    decorate_model(&mut net, mode)?;
    let mut runner = Runner {
        cfg,
        bundle,
        net,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        log: RunLog::default(),
        tables: Vec::new(),
        epochs: 0,
        start: Instant::now(),
        target_flops: (cfg.flops_target * baseline_cost.flops as f64).floor() as u64,
    };
    info!(
        "{} run: baseline {} FLOPs, target {} FLOPs",
        cfg.mode, baseline_cost.flops, runner.target_flops
    );
    let partial = match cfg.mode {
        PruneMode::OneShot => runner.one_shot()?,
        PruneMode::TickOnly => runner.iterate(false)?,
        PruneMode::TickTock => runner.iterate(true)?,
    };
    if let Some(reason) = &partial {
        warn!("partial result: {reason}");
    }
    runner.cycle(Phase::Finetune, cfg.finetune_epochs, 0.0)?;

    let gated = runner.net.clone();
    let mut merged = runner.net;
    undecorate_model(&mut merged)?;
    let finetune_accuracy = evaluate(&merged, &bundle.test, &bundle.normalization, 256)?;
    let final_cost = cost_report(&merged.spec)?.with_baseline(&baseline_cost);

    let scratch_accuracy = if cfg.scratch_epochs > 0 {
        let mut scratch = Network::new(merged.spec.clone(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5c7a_7c11);
        train_cycle(
            &mut scratch,
            &bundle.train,
            &bundle.normalization,
            cfg.scratch_epochs,
            cfg.batch_size,
            (cfg.cycle_lr_low, cfg.cycle_lr_high),
            cfg.momentum,
            cfg.weight_decay,
            0.0,
            &mut rng,
        )?;
        Some(evaluate(&scratch, &bundle.test, &bundle.normalization, 256)?)
    } else {
        None
    };

    Ok(PipelineOutcome {
        mode: cfg.mode,
        network: merged,
        gated,
        log: runner.log,
        status: partial.map_or(RunStatus::Complete, |reason| RunStatus::Partial { reason }),
        tables: runner.tables,
        baseline_cost,
        final_cost,
        baseline_accuracy,
        finetune_accuracy,
        scratch_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sparse_subgradient_signs() {
        let spec = build_plain_cnn(&[3], [1, 4, 4], 2, &PlainCnnOptions::default()).unwrap();
        let mut net = Network::new(spec, 0).unwrap();
        decorate_model(&mut net, crate::gates::DecorateMode::Gbn).unwrap();
        let p = net.param_mut("bn1", "phi").unwrap();
        p.set_value(Tensor::from_vec(&[3], vec![0.5, -0.5, 0.0]).unwrap());
        add_sparse_subgradient(&mut net, 1e-3);
        assert_eq!(net.param("bn1", "phi").unwrap().grad.data(), &[1e-3, -1e-3, 0.0]);
    }

    fn record(phase: Phase) -> PhaseRecord {
        PhaseRecord {
            phase,
            epoch: 0,
            loss: None,
            test_accuracy: 0.0,
            alive_filters: 0,
            removed_filters: 0,
            flops: 0,
            params: 0,
            mean_abs_phi: 0.0,
            elapsed_ms: 0,
        }
    }

    fn log_of(s: &str) -> RunLog {
        RunLog {
            records: s
                .chars()
                .map(|c| {
                    record(match c {
                        'r' => Phase::Rank,
                        'p' => Phase::Prune,
                        't' => Phase::Tick,
                        'T' => Phase::Tock,
                        _ => Phase::Finetune,
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn grammar() {
        assert!(log_of("rpf").matches_grammar(PruneMode::OneShot, 10));
        assert!(!log_of("rppf").matches_grammar(PruneMode::OneShot, 10));
        assert!(log_of("tttf").matches_grammar(PruneMode::TickOnly, 10));
        assert!(!log_of("f").matches_grammar(PruneMode::TickOnly, 10));
        assert!(log_of("ttTttTtf").matches_grammar(PruneMode::TickTock, 2));
        assert!(log_of("ttf").matches_grammar(PruneMode::TickTock, 2));
        assert!(!log_of("tTtf").matches_grammar(PruneMode::TickTock, 2));
        assert!(!log_of("ttTtttf").matches_grammar(PruneMode::TickTock, 2));
    }

    #[test]
    fn run_log_round_trip() {
        let log = log_of("ttTf");
        assert_eq!(RunLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }

    #[test]
    fn tick_count_rounds_up() {
        assert_eq!(tick_prune_count(0.01, 100), 1);
        assert_eq!(tick_prune_count(0.015, 100), 2);
        assert_eq!(tick_prune_count(0.01, 40), 1);
        assert_eq!(tick_prune_count(0.0, 40), 1);
    }

    #[test]
    fn tick_leaves_kernels_and_gamma_untouched() {
        let bundle = crate::data::generate_synthetic(&crate::data::SyntheticConfig {
            train_per_class: 20,
            test_per_class: 5,
            ..Default::default()
        })
        .unwrap();
        let spec = build_mini_resnet(&[4, 8], &[1, 1], [1, 16, 16], 4).unwrap();
        let mut net = Network::new(spec, 3).unwrap();
        decorate_model(&mut net, crate::gates::DecorateMode::Gbn).unwrap();
        let cfg = PipelineConfig {
            tick_train_beta: false,
            ..PipelineConfig::default()
        };
        let frozen = |n: &Network| -> Vec<(String, Vec<u32>)> {
            n.params
                .iter()
                .filter(|(_, p)| matches!(p.role, ParamRole::Weight | ParamRole::Gamma | ParamRole::Beta))
                .filter(|(k, _)| !k.starts_with("fc."))
                .map(|(k, p)| (k.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        let before = frozen(&net);
        let phi_before = net.param("stem.bn", "phi").unwrap().value.clone();
        let fc_before = net.param("fc", "weight").unwrap().value.clone();
        let mut runner = Runner {
            cfg: &cfg,
            bundle: &bundle,
            net,
            rng: ChaCha8Rng::seed_from_u64(0),
            log: RunLog::default(),
            tables: Vec::new(),
            epochs: 0,
            start: Instant::now(),
            target_flops: 0,
        };
        for _ in 0..2 {
            let (table, _) = runner.tick_epoch().unwrap();
            assert!(table.batches_accumulated > 0);
        }
        assert_eq!(frozen(&runner.net), before);
        assert_ne!(runner.net.param("stem.bn", "phi").unwrap().value, phi_before);
        assert_ne!(runner.net.param("fc", "weight").unwrap().value, fc_before);
    }

    #[test]
    fn alive_counts_group_channels_once() {
        let spec = build_mini_resnet(&[4], &[2], [1, 8, 8], 2).unwrap();
        // stem + 2 blocks of 2 convs, all width 4; stem and both conv2 form one group.
        assert_eq!(alive_channels(&spec).unwrap(), 5 * 4 - 3 * 4 + 4);
    }
}
