//! `prunekit-ckpt-v1` checkpoint files.
//!
//! A checkpoint is one file: a version line, a single-line JSON header, and a
//! blob of little-endian `f32` values. The header holds the model spec, the
//! blob manifest (tensor name → offset and shape, both in elements) and run
//! metadata.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::ModelSpec;
use crate::network::{DecorationManifest, Network, ParamRole, Parameter};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "prunekit-ckpt-v1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub epoch: usize,
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub decoration: Option<DecorationManifest>,
    /// FLOPs of the model this one was pruned from, if any.
    #[serde(default)]
    pub baseline_flops: Option<u64>,
    #[serde(default)]
    pub baseline_params: Option<u64>,
    #[serde(default)]
    pub baseline_accuracy: Option<f64>,
    /// Output channels of every conv layer in the baseline, by layer id.
    #[serde(default)]
    pub baseline_widths: Option<std::collections::BTreeMap<String, usize>>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ParamRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updatable: Option<bool>,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    blob_bytes: usize,
    manifest: Vec<ManifestEntry>,
    metadata: Metadata,
}

fn encode(net: &Network, metadata: &Metadata) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, kind, role, updatable, t: &Tensor| {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            kind,
            role,
            updatable,
            offset,
            shape: t.shape().to_vec(),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, p) in &net.params {
        push(name, EntryKind::Param, Some(p.role), Some(p.updatable), &p.value);
    }
    for (name, b) in &net.buffers {
        push(name, EntryKind::Buffer, None, None, b);
    }
    let header = Header {
        spec: net.spec.clone(),
        blob_bytes: blob.len(),
        manifest,
        metadata: Metadata {
            decoration: net.decoration.clone(),
            ..metadata.clone()
        },
    };
    let mut out = format!("{FORMAT_VERSION}\n").into_bytes();
    out.extend(serde_json::to_vec(&header).expect("serializable header"));
    out.push(b'\n');
    out.extend(blob);
    out
}

pub fn save_checkpoint(path: &Path, net: &Network, metadata: &Metadata) -> Result<()> {
    let bytes = encode(net, metadata);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, Metadata)> {
    let (version, rest) = split_line(bytes).ok_or_else(|| CheckpointError::Header("missing version line".into()))?;
    let version = String::from_utf8_lossy(version).into_owned();
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION.into(),
        }
        .into());
    }
    let (header, blob) = split_line(rest).ok_or_else(|| CheckpointError::Header("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if blob.len() < header.blob_bytes {
        return Err(CheckpointError::TruncatedBlob {
            expected: header.blob_bytes,
            found: blob.len(),
        }
        .into());
    }
    if blob.len() > header.blob_bytes || !header.blob_bytes.is_multiple_of(4) {
        return Err(CheckpointError::Manifest(format!(
            "blob holds {} bytes, header declares {}",
            blob.len(),
            header.blob_bytes
        ))
        .into());
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();

    // Entries must tile the blob exactly, in order.
    let mut cursor = 0;
    let mut net = Network {
        spec: header.spec,
        params: Default::default(),
        buffers: Default::default(),
        decoration: header.metadata.decoration.clone(),
    };
    for e in &header.manifest {
        let len: usize = e.shape.iter().product();
        if e.offset != cursor || e.offset + len > floats.len() {
            return Err(CheckpointError::Manifest(format!(
                "entry `{}` at offset {} of length {len} does not continue the blob at {cursor}",
                e.name, e.offset
            ))
            .into());
        }
        let t = Tensor::from_vec(&e.shape, floats[cursor..cursor + len].to_vec())
            .map_err(|err| CheckpointError::Manifest(err.to_string()))?;
        cursor += len;
        match e.kind {
            EntryKind::Param => {
                let role = e
                    .role
                    .ok_or_else(|| CheckpointError::Manifest(format!("parameter `{}` lacks a role", e.name)))?;
                let mut p = Parameter::new(t, role);
                p.updatable = e.updatable.unwrap_or(true);
                net.params.insert(e.name.clone(), p);
            }
            EntryKind::Buffer => {
                net.buffers.insert(e.name.clone(), t);
            }
        }
    }
    if cursor != floats.len() {
        return Err(CheckpointError::Manifest(format!(
            "manifest covers {cursor} of {} values",
            floats.len()
        ))
        .into());
    }
    check_against_spec(&net)?;
    Ok((net, header.metadata))
}

/// Every parameter the model spec implies must be present with the right shape.
fn check_against_spec(net: &Network) -> Result<()> {
    net.spec
        .validate()
        .map_err(|e| CheckpointError::Header(format!("invalid model spec: {e}")))?;
    let reference = Network::new(net.spec.clone(), 0)?;
    let mismatch = |what: &str, name: &str| CheckpointError::Manifest(format!("{what} `{name}`"));
    for (name, p) in &reference.params {
        match net.params.get(name) {
            Some(q) if q.value.shape() == p.value.shape() => {}
            Some(_) => return Err(mismatch("wrong shape for", name).into()),
            None => return Err(mismatch("missing parameter", name).into()),
        }
    }
    for (name, b) in &reference.buffers {
        match net.buffers.get(name) {
            Some(q) if q.shape() == b.shape() => {}
            Some(_) => return Err(mismatch("wrong shape for", name).into()),
            None => return Err(mismatch("missing buffer", name).into()),
        }
    }
    if let Some(extra) = net.params.keys().find(|k| !reference.params.contains_key(*k)) {
        return Err(mismatch("unexpected parameter", extra).into());
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{decorate_model, DecorateMode};
    use crate::model::{build_mini_resnet, build_plain_cnn, PlainCnnOptions};

    fn net() -> Network {
        let spec = build_plain_cnn(&[4, 6], [1, 8, 8], 3, &PlainCnnOptions::default()).unwrap();
        Network::new(spec, 11).unwrap()
    }

    fn checkpoint_error(r: Result<(Network, Metadata)>) -> &'static str {
        match r {
            Err(Error::Checkpoint(e)) => e.code(),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("decode succeeded"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut n = net();
        decorate_model(&mut n, DecorateMode::Gbn).unwrap();
        n.buffers.get_mut("bn1.running_mean").unwrap().data_mut()[0] = 0.123;
        let meta = Metadata {
            seed: 11,
            epoch: 3,
            accuracy: Some(0.5),
            ..Metadata::default()
        };
        let (back, m) = decode_checkpoint(&encode(&n, &meta)).unwrap();
        assert_eq!(back.spec, n.spec);
        assert_eq!(back.buffers, n.buffers);
        assert_eq!(back.decoration, n.decoration);
        for (name, p) in &n.params {
            let q = &back.params[name];
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value), "{name}");
            assert_eq!(p.updatable, q.updatable);
        }
        assert_eq!(m.epoch, 3);
        assert_eq!(m.decoration, n.decoration);
    }

    #[test]
    fn residual_round_trip() {
        let spec = build_mini_resnet(&[4, 8], &[1, 1], [1, 8, 8], 2).unwrap();
        let n = Network::new(spec, 1).unwrap();
        let (back, _) = decode_checkpoint(&encode(&n, &Metadata::default())).unwrap();
        assert_eq!(back.params, n.params);
    }

    #[test]
    fn truncated_blob() {
        let bytes = encode(&net(), &Metadata::default());
        assert_eq!(checkpoint_error(decode_checkpoint(&bytes[..bytes.len() - 1])), "E_TRUNCATED");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&net(), &Metadata::default());
        bytes[15] = b'9';
        assert_eq!(checkpoint_error(decode_checkpoint(&bytes)), "E_VERSION");
    }

    #[test]
    fn manifest_disagreement() {
        let mut bytes = encode(&net(), &Metadata::default());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(checkpoint_error(decode_checkpoint(&bytes)), "E_MANIFEST");

        let bytes = encode(&net(), &Metadata::default());
        let (version, rest) = split_line(&bytes).unwrap();
        let (header, blob) = split_line(rest).unwrap();
        let header = String::from_utf8(header.to_vec()).unwrap().replacen("\"offset\":0", "\"offset\":1", 1);
        let rebuilt = [version, b"\n", header.as_bytes(), b"\n", blob].concat();
        assert_eq!(checkpoint_error(decode_checkpoint(&rebuilt)), "E_MANIFEST");
    }

    #[test]
    fn malformed_header() {
        let bytes = format!("{FORMAT_VERSION}\n{{not json\n").into_bytes();
        assert_eq!(checkpoint_error(decode_checkpoint(&bytes)), "E_HEADER");
    }
}
