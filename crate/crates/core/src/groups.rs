//! Prunable units and the groups induced by pure shortcut connections.
//!
//! A unit is one convolution together with the BN that normalizes it; its id
//! is the id of the gate-bearing layer (the BN when present, the conv
//! otherwise). Units whose outputs meet at an elementwise add through
//! convolution-free paths must share one pruning pattern and form a group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneUnit {
    pub id: String,
    pub conv: String,
    pub bn: Option<String>,
    pub width: usize,
}

/// Every prunable unit, in network order.
pub fn prune_units(spec: &ModelSpec) -> Vec<PruneUnit> {
    let consumers = spec.consumers();
    spec.layers
        .iter()
        .enumerate()
        .filter_map(|(i, layer)| {
            let LayerKind::Conv2d { out_channels, .. } = layer.kind else {
                return None;
            };
            let bn = match consumers[i].as_slice() {
                [j] if matches!(spec.layers[*j].kind, LayerKind::BatchNorm { .. }) => Some(spec.layers[*j].id.clone()),
                _ => None,
            };
            Some(PruneUnit {
                id: bn.clone().unwrap_or_else(|| layer.id.clone()),
                conv: layer.id.clone(),
                bn,
                width: out_channels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneGroup {
    pub id: String,
    /// Unit ids in network order.
    pub members: Vec<String>,
    pub width: usize,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index becomes the root so results do not depend on call order.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Units reaching layer `index` through channel-preserving layers and adds.
fn producers(spec: &ModelSpec, unit_of: &BTreeMap<usize, usize>, inputs: &[Vec<usize>], index: usize, out: &mut Vec<usize>) -> Result<()> {
    let layer = &spec.layers[index];
    match &layer.kind {
        LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. } => match unit_of.get(&index) {
            Some(&u) => {
                if !out.contains(&u) {
                    out.push(u);
                }
                Ok(())
            }
            None => Err(Error::Structure(format!(
                "`{}` feeds a shortcut but belongs to no prunable unit",
                layer.id
            ))),
        },
        LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool | LayerKind::Flatten => {
            producers(spec, unit_of, inputs, inputs[index][0], out)
        }
        LayerKind::Add => {
            for &j in &inputs[index] {
                producers(spec, unit_of, inputs, j, out)?;
            }
            Ok(())
        }
        LayerKind::Input { .. } => Err(Error::Structure(format!(
            "shortcut through `{}` reaches the network input, whose channels cannot be pruned",
            layer.id
        ))),
        LayerKind::Linear { .. } => Err(Error::Structure(format!("`{}` cannot feed a shortcut", layer.id))),
    }
}

/// Groups of units coupled by shortcut connections. Singletons are omitted.
pub fn discover_groups(spec: &ModelSpec) -> Result<Vec<PruneGroup>> {
    let shapes = spec.validate()?;
    let units = prune_units(spec);
    let inputs = spec.input_indices();
    let mut unit_of = BTreeMap::new();
    for (u, unit) in units.iter().enumerate() {
        unit_of.insert(spec.index_of(&unit.conv).expect("unit conv"), u);
        if let Some(bn) = &unit.bn {
            unit_of.insert(spec.index_of(bn).expect("unit bn"), u);
        }
    }
    let mut sets = DisjointSet::new(units.len());
    let mut coupled = vec![false; units.len()];
    for (i, layer) in spec.layers.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::Add) {
            continue;
        }
        let (a, b) = (shapes[inputs[i][0]], shapes[inputs[i][1]]);
        if a.channels != b.channels {
            return Err(Error::shape(
                &layer.id,
                format!("add operands carry {} and {} channels", a.channels, b.channels),
            ));
        }
        let mut members = Vec::new();
        producers(spec, &unit_of, &inputs, i, &mut members)?;
        for w in members.windows(2) {
            sets.union(w[0], w[1]);
        }
        members.iter().for_each(|&m| coupled[m] = true);
    }

    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for u in (0..units.len()).filter(|&u| coupled[u]) {
        by_root.entry(sets.find(u)).or_default().push(u);
    }
    let mut groups = Vec::new();
    for members in by_root.into_values().filter(|m| m.len() > 1) {
        let width = units[members[0]].width;
        if let Some(&bad) = members.iter().find(|&&m| units[m].width != width) {
            return Err(Error::Structure(format!(
                "group members `{}` and `{}` differ in width",
                units[members[0]].id, units[bad].id
            )));
        }
        groups.push(PruneGroup {
            id: format!("group{}", groups.len() + 1),
            members: members.iter().map(|&m| units[m].id.clone()).collect(),
            width,
        });
    }
    Ok(groups)
}

/// Checks a keep-mask for a group and returns the post-prune width.
pub fn validate_group_mask(group: &PruneGroup, keep: &[bool], min_channels: usize) -> Result<usize> {
    if keep.len() != group.width {
        return Err(Error::Mask(format!(
            "mask of length {} for {} of width {}",
            keep.len(),
            group.id,
            group.width
        )));
    }
    let kept = keep.iter().filter(|k| **k).count();
    if kept < group.width && (kept < min_channels || kept == 0) {
        return Err(Error::FloorViolation {
            group: group.id.clone(),
            kept,
            floor: min_channels,
        });
    }
    Ok(kept)
}

pub const GROUPS_FORMAT: &str = "prunekit-groups-v1";

/// JSON group report: group id → members and width.
pub fn group_report(groups: &[PruneGroup]) -> serde_json::Value {
    serde_json::json!({
        "format": GROUPS_FORMAT,
        "groups": groups.iter().map(|g| serde_json::json!({
            "id": g.id,
            "members": g.members,
            "width": g.width,
        })).collect::<Vec<_>>()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mini_resnet, build_plain_cnn, PlainCnnOptions};

    #[test]
    fn plain_cnn_has_no_groups() {
        let spec = build_plain_cnn(&[8, 16, 16], [1, 8, 8], 2, &PlainCnnOptions::default()).unwrap();
        assert!(discover_groups(&spec).unwrap().is_empty());
    }

    #[test]
    fn single_stage_forms_one_group() {
        let spec = build_mini_resnet(&[8], &[2], [1, 8, 8], 2).unwrap();
        let groups = discover_groups(&spec).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members, vec!["stem.bn", "s1b1.bn2", "s1b2.bn2"]);
        assert_eq!(groups[0].width, 8);
    }

    #[test]
    fn two_stages_form_two_groups_with_projection_member() {
        let spec = build_mini_resnet(&[8, 16], &[2, 2], [1, 8, 8], 2).unwrap();
        let groups = discover_groups(&spec).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, vec!["stem.bn", "s1b1.bn2", "s1b2.bn2"]);
        assert_eq!(groups[1].members, vec!["s2b1.bn2", "s2b1.proj.bn", "s2b2.bn2"]);
        assert_eq!(groups[1].width, 16);
    }

    #[test]
    fn discovery_is_transitive_across_chained_shortcuts() {
        let spec = build_mini_resnet(&[6], &[4], [1, 8, 8], 2).unwrap();
        let groups = discover_groups(&spec).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 5);
    }

    #[test]
    fn group_mask_checks() {
        let g = PruneGroup {
            id: "group1".into(),
            members: vec!["a".into(), "b".into()],
            width: 12,
        };
        assert_eq!(validate_group_mask(&g, &[true; 12], 9).unwrap(), 12);
        let mut keep = [true; 12];
        keep[0] = false;
        keep[1] = false;
        keep[2] = false;
        assert_eq!(validate_group_mask(&g, &keep, 9).unwrap(), 9);
        keep[3] = false;
        assert!(matches!(
            validate_group_mask(&g, &keep, 9),
            Err(Error::FloorViolation { kept: 8, .. })
        ));
        assert!(matches!(validate_group_mask(&g, &[true; 3], 9), Err(Error::Mask(_))));
    }
}
