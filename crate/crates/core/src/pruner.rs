//! Filter removal: candidate selection, physical rebuild of the network, and
//! FLOPs/parameter accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{discover_groups, prune_units, PruneGroup, PruneUnit};
use crate::importance::Candidate;
use crate::model::{ActShape, LayerKind, ModelSpec};
use crate::network::{param_name, Network, Parameter};

/// Default smallest width a unit or group may be pruned to.
pub const DEFAULT_MIN_CHANNELS: usize = 9;

/// Keep-vectors over the output channels of prunable units. Units absent from
/// the map keep every channel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub keep: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn removed(&self) -> usize {
        self.keep.values().map(|k| k.iter().filter(|v| !**v).count()).sum()
    }

    pub fn is_trivial(&self) -> bool {
        self.removed() == 0
    }

    fn remove(&mut self, unit: &PruneUnit, channel: usize) {
        self.keep.entry(unit.id.clone()).or_insert_with(|| vec![true; unit.width])[channel] = false;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStatus {
    Complete,
    /// Fewer legal candidates than requested.
    Partial { selected: usize },
}

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

/// Marks the `count` lowest-ranked legal candidates for removal. Every member
/// of a group loses the same channel; a target already at `min_channels`
/// yields no further candidates and selection moves on down the ranking.
pub fn select_prune_set(spec: &ModelSpec, ranking: &[Candidate], count: usize, min_channels: usize) -> Result<(PruneMask, SelectionStatus)> {
    if count == 0 {
        return Err(Error::Argument("prune count must be at least 1".into()));
    }
    let units: BTreeMap<String, PruneUnit> = prune_units(spec).into_iter().map(|u| (u.id.clone(), u)).collect();
    let mut remaining: BTreeMap<&str, usize> = BTreeMap::new();
    let mut mask = PruneMask::default();
    let mut selected = 0;
    for cand in ranking {
        if selected == count {
            break;
        }
        let first = units
            .get(&cand.members[0])
            .ok_or_else(|| Error::State(format!("ranking names unknown unit `{}`", cand.members[0])))?;
        let left = remaining.entry(cand.target.as_str()).or_insert(first.width);
        if *left <= min_channels.max(1) {
            continue;
        }
        if mask.keep.get(&first.id).is_some_and(|k| !k[cand.channel]) {
            continue;
        }
        *left -= 1;
        for m in &cand.members {
            mask.remove(&units[m], cand.channel);
        }
        selected += 1;
    }
    let status = if selected == count {
        SelectionStatus::Complete
    } else {
        SelectionStatus::Partial { selected }
    };
    Ok((mask, status))
}

// ---------------------------------------------------------------------------
// Rebuild
// ---------------------------------------------------------------------------

struct Plan {
    spec: ModelSpec,
    /// Output-channel keep-vector of every layer (flat features for flat layers).
    keep: Vec<Vec<bool>>,
}

fn check_mask(spec: &ModelSpec, mask: &PruneMask, units: &[PruneUnit], groups: &[PruneGroup]) -> Result<()> {
    for (id, keep) in &mask.keep {
        let unit = units
            .iter()
            .find(|u| &u.id == id)
            .ok_or_else(|| Error::Mask(format!("`{id}` is not a prunable unit")))?;
        if keep.len() != unit.width {
            return Err(Error::Mask(format!(
                "keep-vector for `{id}` has length {}, width is {}",
                keep.len(),
                unit.width
            )));
        }
        if !keep.iter().any(|k| *k) {
            return Err(Error::Mask(format!("mask removes every channel of `{id}`")));
        }
    }
    for g in groups {
        let all = vec![true; g.width];
        let first = mask.keep.get(&g.members[0]).unwrap_or(&all);
        for m in &g.members[1..] {
            if mask.keep.get(m).unwrap_or(&all) != first {
                return Err(Error::Mask(format!(
                    "members `{}` and `{m}` of {} carry different keep-vectors",
                    g.members[0], g.id
                )));
            }
        }
    }
    let _ = spec;
    Ok(())
}

fn plan(spec: &ModelSpec, mask: &PruneMask) -> Result<Plan> {
    let shapes = spec.validate()?;
    let units = prune_units(spec);
    let groups = discover_groups(spec)?;
    check_mask(spec, mask, &units, &groups)?;
    let unit_by_conv: BTreeMap<&str, &PruneUnit> = units.iter().map(|u| (u.conv.as_str(), u)).collect();
    let inputs = spec.input_indices();

    let mut keep: Vec<Vec<bool>> = Vec::with_capacity(spec.layers.len());
    let mut out = spec.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let k = match &layer.kind {
            LayerKind::Input { channels, .. } => vec![true; *channels],
            LayerKind::Conv2d { out_channels, .. } => {
                let unit = unit_by_conv[layer.id.as_str()];
                mask.keep.get(&unit.id).cloned().unwrap_or_else(|| vec![true; *out_channels])
            }
            LayerKind::BatchNorm { .. }
            | LayerKind::Relu
            | LayerKind::MaxPool { .. }
            | LayerKind::GlobalAvgPool => keep[inputs[i][0]].clone(),
            LayerKind::Flatten => {
                let src = inputs[i][0];
                let plane = shapes[src].height * shapes[src].width;
                keep[src].iter().flat_map(|&k| std::iter::repeat_n(k, plane)).collect()
            }
            LayerKind::Add => {
                let (a, b) = (&keep[inputs[i][0]], &keep[inputs[i][1]]);
                if a != b {
                    return Err(Error::Mask(format!("operands of `{}` would be misaligned", layer.id)));
                }
                a.clone()
            }
            LayerKind::Linear { out_features, .. } => vec![true; *out_features],
        };
        let kept = k.iter().filter(|v| **v).count();
        let in_kept = inputs[i].first().map(|&j| keep[j].iter().filter(|v| **v).count());
        match &mut out.layers[i].kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                *in_channels = in_kept.expect("conv input");
                *out_channels = kept;
            }
            LayerKind::BatchNorm { channels, .. } => *channels = kept,
            LayerKind::Linear { in_features, .. } => *in_features = in_kept.expect("linear input"),
            _ => {}
        }
        keep.push(k);
    }
    out.validate()?;
    Ok(Plan { spec: out, keep })
}

/// Spec of the network after applying `mask`, without touching parameters.
pub fn pruned_spec(spec: &ModelSpec, mask: &PruneMask) -> Result<ModelSpec> {
    Ok(plan(spec, mask)?.spec)
}

fn copy_param(p: &Parameter, value: crate::tensor::Tensor) -> Parameter {
    let mut q = p.clone();
    q.set_value(value);
    q
}

/// Physically removes the masked filters and every downstream input slice
/// that reads them. The input network is left untouched; on error nothing is
/// produced.
pub fn apply_prune(net: &Network, mask: &PruneMask) -> Result<Network> {
    let Plan { spec, keep } = plan(&net.spec, mask)?;
    let inputs = net.spec.input_indices();
    let mut params = net.params.clone();
    let mut buffers = net.buffers.clone();
    for (i, layer) in net.spec.layers.iter().enumerate() {
        let id = layer.id.as_str();
        let own = &keep[i];
        let mut slice = |name: String, axis: usize, k: &[bool]| {
            if let Some(p) = params.get_mut(&name) {
                let v = p.value.select(axis, k);
                *p = copy_param(p, v);
            }
        };
        match &layer.kind {
            LayerKind::Conv2d { .. } => {
                let input_keep = &keep[inputs[i][0]];
                slice(param_name(id, "weight"), 0, own);
                slice(param_name(id, "weight"), 1, input_keep);
                slice(param_name(id, "bias"), 0, own);
                slice(param_name(id, "phi"), 0, own);
            }
            LayerKind::BatchNorm { .. } => {
                for field in ["gamma", "beta", "phi"] {
                    slice(param_name(id, field), 0, own);
                }
                for field in ["running_mean", "running_var"] {
                    if let Some(b) = buffers.get_mut(&param_name(id, field)) {
                        *b = b.select(0, own);
                    }
                }
            }
            LayerKind::Linear { .. } => slice(param_name(id, "weight"), 1, &keep[inputs[i][0]]),
            _ => {}
        }
    }
    Ok(Network {
        spec,
        params,
        buffers,
        decoration: net.decoration.clone(),
    })
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

pub const COST_FORMAT: &str = "prunekit-cost-v1";

pub const FLOPS_CONVENTION: &str = "one multiply-accumulate = 2 FLOPs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub op: String,
    pub out_channels: usize,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub flops: u64,
    pub params: u64,
    pub layers: Vec<LayerCost>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_params: Option<u64>,
}

fn layer_cost(kind: &LayerKind, input: Option<ActShape>, out: ActShape) -> (u64, u64) {
    let elems = out.elements() as u64;
    match *kind {
        LayerKind::Input { .. } | LayerKind::Flatten => (0, 0),
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            bias,
            gated,
            ..
        } => {
            let k2 = (kernel * kernel) as u64;
            let (ci, co) = (in_channels as u64, out_channels as u64);
            let flops = 2 * ci * co * k2 * (out.height * out.width) as u64;
            let params = co * ci * k2 + if bias { co } else { 0 } + if gated { co } else { 0 };
            (flops, params)
        }
        LayerKind::BatchNorm { channels, gated } => (2 * elems, (channels as u64) * if gated { 3 } else { 2 }),
        LayerKind::Relu | LayerKind::Add => (elems, 0),
        LayerKind::MaxPool { kernel, .. } => ((kernel * kernel) as u64 * elems, 0),
        LayerKind::GlobalAvgPool => {
            let s = input.expect("pool input");
            ((s.height * s.width) as u64 * elems, 0)
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let (i, o) = (in_features as u64, out_features as u64);
            (2 * i * o, i * o + o)
        }
    }
}

/// Output channels of every convolution, by layer id.
pub fn conv_widths(spec: &ModelSpec) -> BTreeMap<String, usize> {
    spec.layers
        .iter()
        .filter_map(|l| match l.kind {
            LayerKind::Conv2d { out_channels, .. } => Some((l.id.clone(), out_channels)),
            _ => None,
        })
        .collect()
}

pub fn cost_report(spec: &ModelSpec) -> Result<CostReport> {
    let shapes = spec.validate()?;
    let inputs = spec.input_indices();
    let layers: Vec<LayerCost> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (flops, params) = layer_cost(&l.kind, inputs[i].first().map(|&j| shapes[j]), shapes[i]);
            LayerCost {
                id: l.id.clone(),
                op: l.kind.name().to_string(),
                out_channels: shapes[i].channels,
                flops,
                params,
            }
        })
        .collect();
    Ok(CostReport {
        convention: FLOPS_CONVENTION.to_string(),
        flops: layers.iter().map(|l| l.flops).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
        baseline_flops: None,
        baseline_params: None,
    })
}

impl CostReport {
    pub fn with_baseline(mut self, baseline: &CostReport) -> Self {
        self.baseline_flops = Some(baseline.flops);
        self.baseline_params = Some(baseline.params);
        self
    }

    /// Percentage of baseline FLOPs removed (0 without a baseline).
    pub fn flops_reduction_pct(&self) -> f64 {
        self.baseline_flops
            .map_or(0.0, |b| 100.0 * (b as f64 - self.flops as f64) / b as f64)
    }

    pub fn params_reduction_pct(&self) -> f64 {
        self.baseline_params
            .map_or(0.0, |b| 100.0 * (b as f64 - self.params as f64) / b as f64)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable");
        v["format"] = COST_FORMAT.into();
        v["flops_reduction_pct"] = self.flops_reduction_pct().into();
        v["params_reduction_pct"] = self.params_reduction_pct().into();
        v
    }

    pub fn from_json(v: &serde_json::Value) -> Result<CostReport> {
        if v["format"] != COST_FORMAT {
            return Err(Error::Data(format!("cost report format {} is not {COST_FORMAT}", v["format"])));
        }
        serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("cost report: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {COST_FORMAT}; FLOPs convention: {}\nlayer,op,out_channels,flops,params\n", self.convention);
        for l in &self.layers {
            s.push_str(&format!("{},{},{},{},{}\n", l.id, l.op, l.out_channels, l.flops, l.params));
        }
        s.push_str(&format!("total,,,{},{}\n", self.flops, self.params));
        s
    }
}
