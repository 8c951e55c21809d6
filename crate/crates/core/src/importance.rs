//! Global filter importance: first-order Taylor scores accumulated from gate
//! gradients, the magnitude baseline, and the brute-force loss-change check.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::PruneGroup;
use crate::network::{param_name, Mode, Network};
use crate::tensor::Tensor;

pub const IMPORTANCE_FORMAT: &str = "prunekit-importance-v1";

/// Largest number of gated channels the brute-force diagnostic accepts.
pub const BRUTE_FORCE_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranker {
    Taylor,
    Magnitude,
}

impl std::fmt::Display for Ranker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ranker::Taylor => "taylor",
            Ranker::Magnitude => "magnitude",
        })
    }
}

impl std::str::FromStr for Ranker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taylor" => Ok(Ranker::Taylor),
            "magnitude" => Ok(Ranker::Magnitude),
            other => Err(Error::Config(format!("unknown ranker `{other}`"))),
        }
    }
}

/// Per-channel scores Θ for every gated module, keyed by module id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub ranker: Ranker,
    pub batch_size: usize,
    pub batches_accumulated: usize,
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl ImportanceTable {
    /// Empty Taylor table covering every gated module of `net`.
    pub fn new(net: &Network, batch_size: usize) -> Self {
        let entries = net
            .gated_layers()
            .into_iter()
            .map(|id| {
                let width = net.param(&id, "phi").map_or(0, |p| p.value.len());
                (id, vec![0.0; width])
            })
            .collect();
        ImportanceTable {
            ranker: Ranker::Taylor,
            batch_size,
            batches_accumulated: 0,
            entries,
        }
    }

    /// Adds `|φ_c · ∂L/∂φ_c|` for the batch whose backward pass just ran.
    pub fn accumulate_gradients(&mut self, net: &Network) -> Result<()> {
        if self.ranker != Ranker::Taylor {
            return Err(Error::State("magnitude tables do not accumulate".into()));
        }
        for (id, theta) in &mut self.entries {
            let p = net
                .param(id, "phi")
                .ok_or_else(|| Error::State(format!("`{id}` has no gate")))?;
            if !p.grad_valid() {
                return Err(Error::State(format!("gate gradient of `{id}` was not computed")));
            }
            if p.value.len() != theta.len() {
                return Err(Error::State(format!(
                    "`{id}` has {} gates, table holds {}",
                    p.value.len(),
                    theta.len()
                )));
            }
            for ((t, phi), g) in theta.iter_mut().zip(p.value.data()).zip(p.grad.data()) {
                *t += (*phi as f64 * *g as f64).abs();
            }
        }
        self.batches_accumulated += 1;
        Ok(())
    }

    /// Forward and backward on one batch, then accumulation. Gate gradients
    /// are observed for the duration of the call.
    pub fn accumulate_batch(&mut self, net: &mut Network, batch: &Tensor, labels: &[usize], mode: Mode) -> Result<f32> {
        let restore = observe_gates(net);
        let result = net.forward(batch, labels, mode).and_then(|cache| {
            net.backward(&cache)?;
            Ok(cache.loss)
        });
        restore_observe(net, restore);
        let loss = result?;
        self.accumulate_gradients(net)?;
        Ok(loss)
    }

    pub fn total_channels(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// Every (module, channel, Θ) in ascending score order with the standard
    /// tie rule.
    pub fn sorted_entries(&self) -> Vec<(&str, usize, f64)> {
        let mut all: Vec<(&str, usize, f64)> = self
            .entries
            .iter()
            .flat_map(|(id, t)| t.iter().enumerate().map(move |(c, v)| (id.as_str(), c, *v)))
            .collect();
        all.sort_by(|a, b| a.2.total_cmp(&b.2).then_with(|| a.0.cmp(b.0)).then(a.1.cmp(&b.1)));
        all
    }

    /// CSV with columns `module_id,channel,theta,rank` after one comment line
    /// carrying the format, ranker and batch bookkeeping. Rank 1 is the least
    /// important channel; Θ is printed with enough digits to round-trip.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# {IMPORTANCE_FORMAT} ranker={} batch_size={} batches={}\nmodule_id,channel,theta,rank\n",
            self.ranker, self.batch_size, self.batches_accumulated
        );
        for (rank, (id, c, v)) in self.sorted_entries().into_iter().enumerate() {
            let _ = writeln!(s, "{id},{c},{v:.17e},{}", rank + 1);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<ImportanceTable> {
        let bad = |m: String| Error::Data(format!("importance table: {m}"));
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| bad("missing format line".into()))?;
        let mut fields = meta.split_whitespace();
        if fields.next() != Some(IMPORTANCE_FORMAT) {
            return Err(bad(format!("expected format {IMPORTANCE_FORMAT}")));
        }
        let mut table = ImportanceTable {
            ranker: Ranker::Taylor,
            batch_size: 0,
            batches_accumulated: 0,
            entries: BTreeMap::new(),
        };
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(format!("bad field `{f}`")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad value `{f}`")));
            match k {
                "ranker" => table.ranker = v.parse()?,
                "batch_size" => table.batch_size = parse(v)?,
                "batches" => table.batches_accumulated = parse(v)?,
                _ => return Err(bad(format!("unknown field `{k}`"))),
            }
        }
        if lines.next() != Some("module_id,channel,theta,rank") {
            return Err(bad("missing column header".into()));
        }
        let mut cells: Vec<(String, usize, f64)> = Vec::new();
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            let row = || bad(format!("row {} malformed", i + 1));
            if parts.len() != 4 {
                return Err(row());
            }
            let c: usize = parts[1].parse().map_err(|_| row())?;
            let theta: f64 = parts[2].parse().map_err(|_| row())?;
            cells.push((parts[0].to_string(), c, theta));
        }
        for (id, c, theta) in cells {
            let v = table.entries.entry(id).or_default();
            if v.len() <= c {
                v.resize(c + 1, f64::NAN);
            }
            v[c] = theta;
        }
        if table.entries.values().flatten().any(|t| t.is_nan()) {
            return Err(bad("missing channels".into()));
        }
        Ok(table)
    }
}

fn observe_gates(net: &mut Network) -> Vec<(String, bool)> {
    net.params
        .iter_mut()
        .filter(|(name, _)| name.ends_with(".phi"))
        .map(|(name, p)| {
            let was = p.observe_grad;
            p.observe_grad = true;
            (name.clone(), was)
        })
        .collect()
}

fn restore_observe(net: &mut Network, saved: Vec<(String, bool)>) {
    for (name, was) in saved {
        if let Some(p) = net.params.get_mut(&name) {
            p.observe_grad = was;
        }
    }
}

/// Θ(c) = |φ_c|.
pub fn magnitude_scores(net: &Network) -> Result<ImportanceTable> {
    let gated = net.gated_layers();
    if gated.is_empty() {
        return Err(Error::State("model carries no gates".into()));
    }
    let entries = gated
        .into_iter()
        .map(|id| {
            let v = net.param(&id, "phi").expect("gated layer has phi").value.data();
            let theta = v.iter().map(|x| x.abs() as f64).collect();
            (id, theta)
        })
        .collect();
    Ok(ImportanceTable {
        ranker: Ranker::Magnitude,
        batch_size: 0,
        batches_accumulated: 0,
        entries,
    })
}

/// A prunable channel: either one channel of a single module or the shared
/// channel of a group (a virtual gate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Group id for grouped channels, module id otherwise.
    pub target: String,
    pub members: Vec<String>,
    pub channel: usize,
    pub score: f64,
}

/// Ascending global ranking. Group channels score the sum of their members;
/// targets already at or below `min_channels` are protected and omitted.
pub fn global_rank(table: &ImportanceTable, groups: &[PruneGroup], min_channels: usize) -> Result<Vec<Candidate>> {
    let mut grouped: BTreeMap<&str, &PruneGroup> = BTreeMap::new();
    for g in groups {
        for m in &g.members {
            let scores = table
                .entries
                .get(m)
                .ok_or_else(|| Error::State(format!("group member `{m}` missing from importance table")))?;
            if scores.len() != g.width {
                return Err(Error::State(format!(
                    "`{m}` has {} scores, {} has width {}",
                    scores.len(),
                    g.id,
                    g.width
                )));
            }
            grouped.insert(m, g);
        }
    }
    let mut out = Vec::new();
    for g in groups {
        if g.width <= min_channels {
            continue;
        }
        for c in 0..g.width {
            let score = g.members.iter().map(|m| table.entries[m][c]).sum();
            out.push(Candidate {
                target: g.id.clone(),
                members: g.members.clone(),
                channel: c,
                score,
            });
        }
    }
    for (id, scores) in &table.entries {
        if grouped.contains_key(id.as_str()) || scores.len() <= min_channels {
            continue;
        }
        out.extend(scores.iter().enumerate().map(|(c, s)| Candidate {
            target: id.clone(),
            members: vec![id.clone()],
            channel: c,
            score: *s,
        }));
    }
    out.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.target.cmp(&b.target))
            .then(a.channel.cmp(&b.channel))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDiagnostic {
    pub module: String,
    pub channel: usize,
    pub theta: f64,
    pub actual: f64,
}

/// Size-weighted mean loss over a fixed sequence of minibatches.
fn slice_loss(net: &Network, batches: &[(Tensor, Vec<usize>)], mode: Mode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (x, y) in batches {
        total += net.loss(x, y, mode)? as f64 * y.len() as f64;
        count += y.len();
    }
    Ok(total / count as f64)
}

/// Compares Θ accumulated over the minibatches of a data slice with the exact
/// loss change `|L(φ) − L(φ with φ_c = 0)|` on the same minibatches, for every
/// gated channel.
pub fn taylor_estimate_vs_actual(net: &mut Network, batches: &[(Tensor, Vec<usize>)], mode: Mode) -> Result<Vec<ChannelDiagnostic>> {
    let gated = net.gated_layers();
    let channels: usize = gated
        .iter()
        .map(|id| net.param(id, "phi").map_or(0, |p| p.value.len()))
        .sum();
    if channels > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            channels,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if channels == 0 {
        return Err(Error::State("model carries no gates".into()));
    }
    if batches.iter().all(|(_, y)| y.is_empty()) {
        return Err(Error::Argument("data slice is empty".into()));
    }
    let mut table = ImportanceTable::new(net, batches[0].1.len());
    for (x, y) in batches {
        table.accumulate_batch(net, x, y, mode)?;
    }
    let base = slice_loss(net, batches, mode)?;

    let mut out = Vec::with_capacity(channels);
    for id in &gated {
        let name = param_name(id, "phi");
        let width = net.params[&name].value.len();
        for c in 0..width {
            let saved = net.params[&name].value.data()[c];
            net.params.get_mut(&name).expect("gate").value.data_mut()[c] = 0.0;
            let loss = slice_loss(net, batches, mode);
            net.params.get_mut(&name).expect("gate").value.data_mut()[c] = saved;
            out.push(ChannelDiagnostic {
                module: id.clone(),
                channel: c,
                theta: table.entries[id][c],
                actual: (base - loss?).abs(),
            });
        }
    }
    Ok(out)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
