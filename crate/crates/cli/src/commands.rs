use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use prunekit::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use prunekit::config::{render_pipeline, render_train, KeyValueConfig, PipelineConfig, TrainConfig};
use prunekit::data::{generate_synthetic as synthesize, read_idx, Dataset, DatasetBundle, Provenance, SyntheticConfig};
use prunekit::groups::{discover_groups, group_report};
use prunekit::pipeline::{evaluate, run, train_baseline, RunLog, RunStatus};
use prunekit::pruner::{conv_widths, cost_report};
use prunekit::{Error, LayerKind, ModelSpec, Network};
use serde_json::json;

use crate::{DataArgs, SyntheticArgs};

const TRAIN_REPORT_FORMAT: &str = "prunekit-train-v1";
const SUMMARY_FORMAT: &str = "prunekit-summary-v1";
const EVAL_FORMAT: &str = "prunekit-eval-v1";
const WIDTHS_FORMAT: &str = "prunekit-widths-v1";
const PHASES_FORMAT: &str = "prunekit-phases-v1";

pub enum Failure {
    Usage(String),
    Core(Error),
    /// Outputs were written but the FLOPs target was not reached.
    Partial(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Partial(m) => write!(f, "partial result: {m}"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Partial(_) => 4,
            Failure::Core(e) => match e {
                Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Shape { .. } => 2,
                Error::Numeric(_) | Error::DegenerateGamma { .. } | Error::DegenerateFilter { .. } => 3,
                _ => 1,
            },
        }
    }
}

type Outcome = Result<(), Failure>;

pub struct Context {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Context {
    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, Error> {
        let path = self.out_dir.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf, Error> {
        self.write(name, serde_json::to_string_pretty(value).expect("serializable") + "\n")
    }

    fn path(&self, name: &str) -> Result<PathBuf, Error> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| io_error(&self.out_dir, e))?;
        Ok(self.out_dir.join(name))
    }

    fn load_config<C: KeyValueConfig>(&self) -> Result<C, Error> {
        match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                C::from_text(&text)
            }
            None => Ok(C::default()),
        }
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_data(args: &DataArgs) -> Result<DatasetBundle, Error> {
    match (&args.data, &args.idx) {
        (Some(dir), _) => DatasetBundle::new(
            Dataset::read_pkds(&dir.join("train.pkds"))?,
            Dataset::read_pkds(&dir.join("test.pkds"))?,
            Provenance::Synthetic,
        ),
        (None, Some(files)) => DatasetBundle::new(
            read_idx(&files[0], &files[1])?,
            read_idx(&files[2], &files[3])?,
            Provenance::IdxFile,
        ),
        (None, None) => Err(Error::Argument("either --data or --idx is required".into())),
    }
}

pub fn generate_synthetic(ctx: &Context, args: &SyntheticArgs) -> Outcome {
    if ctx.config.is_some() {
        return Err(Failure::Usage("generate-synthetic takes its settings as flags, not --config".into()));
    }
    let cfg = SyntheticConfig {
        classes: args.classes,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        size: args.size,
        noise: args.noise,
        seed: ctx.seed.unwrap_or(SyntheticConfig::default().seed),
    };
    let bundle = synthesize(&cfg)?;
    bundle.train.write_pkds(&ctx.path("train.pkds")?)?;
    bundle.test.write_pkds(&ctx.path("test.pkds")?)?;
    println!(
        "wrote {} training and {} test images ({} classes, {}x{}) to {}",
        bundle.train.len(),
        bundle.test.len(),
        bundle.classes,
        cfg.size,
        cfg.size,
        ctx.out_dir.display()
    );
    Ok(())
}

pub fn train(ctx: &Context, data: &DataArgs) -> Outcome {
    let mut cfg: TrainConfig = ctx.load_config()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let bundle = load_data(data)?;
    let (net, report) = train_baseline(&bundle, &cfg)?;
    let cost = cost_report(&net.spec)?;
    let metadata = Metadata {
        seed: cfg.seed,
        epoch: cfg.epochs,
        accuracy: Some(report.test_accuracy),
        note: Some("baseline".into()),
        ..Metadata::default()
    };
    save_checkpoint(&ctx.path("baseline.ckpt")?, &net, &metadata)?;
    ctx.write_json(
        "train_report.json",
        &json!({
            "format": TRAIN_REPORT_FORMAT,
            "seed": cfg.seed,
            "epoch_losses": report.epoch_losses,
            "test_accuracy": report.test_accuracy,
            "flops": cost.flops,
            "params": cost.params,
        }),
    )?;
    ctx.write("train.conf", render_train(&cfg))?;
    println!(
        "baseline test accuracy {:.4}, {} FLOPs, {} params",
        report.test_accuracy, cost.flops, cost.params
    );
    Ok(())
}

pub fn prune(ctx: &Context, baseline_path: &Path, data: &DataArgs) -> Outcome {
    let mut cfg: PipelineConfig = ctx.load_config()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let (baseline, _) = load_checkpoint(baseline_path)?;
    if baseline.decoration.is_some() {
        return Err(Error::State("baseline checkpoint is gate-decorated; prune expects a vanilla network".into()).into());
    }
    let bundle = load_data(data)?;
    let out = run(&cfg, &baseline, &bundle)?;

    let metadata = Metadata {
        seed: cfg.seed,
        epoch: out.log.records.last().map_or(0, |r| r.epoch),
        accuracy: Some(out.finetune_accuracy),
        baseline_flops: Some(out.baseline_cost.flops),
        baseline_params: Some(out.baseline_cost.params),
        baseline_accuracy: Some(out.baseline_accuracy),
        baseline_widths: Some(conv_widths(&baseline.spec)),
        note: Some(out.mode.to_string()),
        ..Metadata::default()
    };
    save_checkpoint(&ctx.path("pruned.ckpt")?, &out.network, &metadata)?;
    ctx.write("runlog.jsonl", out.log.to_jsonl())?;
    ctx.write_json("cost.json", &out.final_cost.to_json())?;
    ctx.write("cost.csv", out.final_cost.to_csv())?;
    for (i, table) in out.tables.iter().enumerate() {
        ctx.write(&format!("importance/{:04}.csv", i + 1), table.to_csv())?;
    }
    if let Some(last) = out.tables.last() {
        ctx.write("importance.csv", last.to_csv())?;
    }
    ctx.write_json("groups.json", &group_report(&discover_groups(&baseline.spec)?))?;
    ctx.write("widths.csv", widths_csv(&conv_widths(&baseline.spec), &out.network.spec))?;
    ctx.write("summary.csv", format!("{}{}", prunekit::pipeline::PipelineOutcome::summary_header(), out.summary_row()))?;
    ctx.write("pipeline.conf", render_pipeline(&cfg))?;

    println!(
        "{}: FLOPs {} -> {} ({:.2}% fewer), accuracy {:.4} -> {:.4}",
        out.mode,
        out.baseline_cost.flops,
        out.final_cost.flops,
        out.final_cost.flops_reduction_pct(),
        out.baseline_accuracy,
        out.finetune_accuracy
    );
    match out.status {
        RunStatus::Complete => Ok(()),
        RunStatus::Partial { reason } => {
            warn!("FLOPs target not reached: {reason}");
            Err(Failure::Partial(reason))
        }
    }
}

/// Per-layer channel counts against the baseline, in layer order.
fn widths_csv(baseline: &BTreeMap<String, usize>, spec: &ModelSpec) -> String {
    let mut s = format!("# {WIDTHS_FORMAT}\nlayer,baseline_channels,channels,pruned_pct\n");
    for layer in &spec.layers {
        if let LayerKind::Conv2d { out_channels, .. } = layer.kind {
            let base = baseline.get(&layer.id).copied().unwrap_or(out_channels);
            let pct = if base == 0 {
                0.0
            } else {
                100.0 * (base - out_channels.min(base)) as f64 / base as f64
            };
            s.push_str(&format!("{},{base},{out_channels},{pct:.2}\n", layer.id));
        }
    }
    s
}

fn phases_csv(log: &RunLog) -> String {
    let mut s = format!(
        "# {PHASES_FORMAT}\nstep,phase,epoch,loss,test_accuracy,alive_filters,removed_filters,flops,params,mean_abs_phi\n"
    );
    for (i, r) in log.records.iter().enumerate() {
        let phase = serde_json::to_value(r.phase).expect("serializable");
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{}\n",
            phase.as_str().unwrap_or_default(),
            r.epoch,
            r.loss.map_or(String::new(), |l| l.to_string()),
            r.test_accuracy,
            r.alive_filters,
            r.removed_filters,
            r.flops,
            r.params,
            r.mean_abs_phi
        ));
    }
    s
}

pub fn report(ctx: &Context, checkpoint: Option<&Path>, baseline: Option<&Path>, runlog: Option<&Path>) -> Outcome {
    if ctx.config.is_some() {
        return Err(Failure::Usage("report takes no --config".into()));
    }
    if let Some(path) = checkpoint {
        let (net, meta) = load_checkpoint(path)?;
        let mut cost = cost_report(&net.spec)?;
        let (widths, baseline_accuracy) = match baseline {
            Some(b) => {
                let (base, base_meta) = load_checkpoint(b)?;
                cost = cost.with_baseline(&cost_report(&base.spec)?);
                (conv_widths(&base.spec), base_meta.accuracy)
            }
            None => {
                // Without recorded baseline figures the model is its own reference.
                cost.baseline_flops = Some(meta.baseline_flops.unwrap_or(cost.flops));
                cost.baseline_params = Some(meta.baseline_params.unwrap_or(cost.params));
                let widths = meta.baseline_widths.clone().unwrap_or_else(|| conv_widths(&net.spec));
                (widths, meta.baseline_accuracy.or(meta.accuracy))
            }
        };
        ctx.write_json("cost.json", &cost.to_json())?;
        ctx.write("cost.csv", cost.to_csv())?;
        ctx.write("widths.csv", widths_csv(&widths, &net.spec))?;
        ctx.write_json("groups.json", &group_report(&discover_groups(&net.spec)?))?;
        ctx.write_json(
            "summary.json",
            &json!({
                "format": SUMMARY_FORMAT,
                "flops": cost.flops,
                "params": cost.params,
                "baseline_flops": cost.baseline_flops,
                "baseline_params": cost.baseline_params,
                "flops_reduction_pct": cost.flops_reduction_pct(),
                "params_reduction_pct": cost.params_reduction_pct(),
                "accuracy": meta.accuracy,
                "baseline_accuracy": baseline_accuracy,
                "note": meta.note,
            }),
        )?;
        println!(
            "FLOPs {} ({:.2}% fewer), params {} ({:.2}% fewer)",
            cost.flops,
            cost.flops_reduction_pct(),
            cost.params,
            cost.params_reduction_pct()
        );
    }
    if let Some(path) = runlog {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let log = RunLog::from_jsonl(&text)?;
        ctx.write("phases.csv", phases_csv(&log))?;
        info!("{} phase records", log.records.len());
    }
    Ok(())
}

pub fn eval(ctx: &Context, checkpoint: &Path, data: &DataArgs) -> Outcome {
    if ctx.config.is_some() {
        return Err(Failure::Usage("eval takes no --config".into()));
    }
    let (net, _): (Network, Metadata) = load_checkpoint(checkpoint)?;
    let bundle = load_data(data)?;
    let accuracy = evaluate(&net, &bundle.test, &bundle.normalization, 256)?;
    ctx.write_json(
        "eval.json",
        &json!({
            "format": EVAL_FORMAT,
            "checkpoint": checkpoint.display().to_string(),
            "samples": bundle.test.len(),
            "accuracy": accuracy,
        }),
    )?;
    println!("test accuracy {accuracy:.4} on {} samples", bundle.test.len());
    Ok(())
}
