//! Binary checkpoints of a sequential run at a task boundary.
//!
//! Layout: the 8-byte magic, a little-endian `u64` manifest length, the JSON
//! manifest, then raw little-endian `f64` blocks in manifest order. The
//! manifest records every block's name and shape, the payload length and its
//! SHA-256, so truncated or altered files are rejected on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flat_optim::{ContinualState, ImportanceMap};
use crate::metrics::AccuracyMatrix;
use crate::model::{MultiHeadClassifier, Topology};
use crate::replay::{Exemplar, ReplayBuffer};
use crate::tensor::{ParameterSet, Tensor};

const MAGIC: &[u8; 8] = b"FLATCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReplayManifest {
    store_ratio: f64,
    replay_every: usize,
    dim: usize,
    labels: Vec<usize>,
    task_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    topology: Topology,
    config_hash: String,
    seed: u64,
    next_task: usize,
    matrix_rows: Vec<Vec<f64>>,
    lambda_max: Vec<f64>,
    gamma: Option<f64>,
    replay: ReplayManifest,
    blocks: Vec<BlockInfo>,
    payload_len: u64,
    payload_sha256: String,
}

/// Run identity stored next to the state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_set(group: &str, set: &ParameterSet, blocks: &mut Vec<BlockInfo>, payload: &mut Vec<u8>) {
    for e in set.iter() {
        blocks.push(BlockInfo {
            group: group.into(),
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
        });
        for v in e.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes `state` into checkpoint bytes.
pub fn encode(state: &ContinualState, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut blocks = Vec::new();
    let mut payload = Vec::new();
    push_set("params", state.model.params(), &mut blocks, &mut payload);
    if let Some(imp) = &state.importance {
        push_set("importance", imp.values(), &mut blocks, &mut payload);
    }
    if let Some(anchor) = &state.anchor {
        push_set("anchor", anchor, &mut blocks, &mut payload);
    }
    let exemplars = state.replay.exemplars();
    let dim = exemplars.first().map_or(0, |e| e.features.len());
    if !exemplars.is_empty() {
        let data: Vec<f64> = exemplars.iter().flat_map(|e| e.features.iter().copied()).collect();
        let mut set = ParameterSet::new();
        set.push("features", Tensor::new(vec![exemplars.len(), dim], data)?)?;
        push_set("replay", &set, &mut blocks, &mut payload);
    }
    let manifest = Manifest {
        topology: state.model.topology().clone(),
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        next_task: state.next_task,
        matrix_rows: state.matrix.rows().to_vec(),
        lambda_max: state.lambda_max.clone(),
        gamma: state.importance.as_ref().map(ImportanceMap::gamma),
        replay: ReplayManifest {
            store_ratio: state.replay.store_ratio(),
            replay_every: state.replay.replay_every(),
            dim,
            labels: exemplars.iter().map(|e| e.label).collect(),
            task_ids: exemplars.iter().map(|e| e.task_id).collect(),
        },
        blocks,
        payload_len: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuilds the state from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<(ContinualState, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if manifest_len > body.len() {
        return Err(corrupt("manifest length exceeds file size"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..manifest_len]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let payload = &body[manifest_len..];
    if payload.len() as u64 != manifest.payload_len {
        return Err(corrupt(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_len
        )));
    }
    let expected: u64 = manifest
        .blocks
        .iter()
        .map(|b| 8 * b.shape.iter().product::<usize>() as u64)
        .sum();
    if expected != manifest.payload_len {
        return Err(corrupt("block shapes do not add up to the payload length"));
    }
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(corrupt("payload hash mismatch"));
    }

    let mut groups: [ParameterSet; 4] = Default::default();
    let mut offset = 0;
    for b in &manifest.blocks {
        let n: usize = b.shape.iter().product();
        let data = payload[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        let slot = match b.group.as_str() {
            "params" => 0,
            "importance" => 1,
            "anchor" => 2,
            "replay" => 3,
            other => return Err(corrupt(format!("unknown block group `{other}`"))),
        };
        groups[slot].push(b.name.clone(), Tensor::new(b.shape.clone(), data)?)?;
    }
    let [params, importance, anchor, replay_set] = groups;

    let model = MultiHeadClassifier::from_parts(manifest.topology, params)?;
    let importance = match manifest.gamma {
        Some(gamma) => Some(ImportanceMap::new(importance, gamma)?),
        None if importance.is_empty() => None,
        None => return Err(corrupt("importance blocks without a decay")),
    };
    let anchor = (!anchor.is_empty()).then_some(anchor);
    let r = &manifest.replay;
    if r.labels.len() != r.task_ids.len() {
        return Err(corrupt("replay labels and task ids differ in length"));
    }
    let exemplars = match replay_set.get("features") {
        None if r.labels.is_empty() => Vec::new(),
        Some(f) if f.shape() == [r.labels.len(), r.dim] => (0..r.labels.len())
            .map(|i| Exemplar {
                features: f.row(i).to_vec(),
                label: r.labels[i],
                task_id: r.task_ids[i],
            })
            .collect(),
        _ => return Err(corrupt("replay features do not match the manifest")),
    };
    let replay = ReplayBuffer::from_exemplars(exemplars, r.store_ratio, r.replay_every)?;
    let state = ContinualState {
        model,
        importance,
        anchor,
        replay,
        matrix: AccuracyMatrix::from_rows(manifest.matrix_rows)?,
        lambda_max: manifest.lambda_max,
        next_task: manifest.next_task,
    };
    Ok((
        state,
        CheckpointMeta {
            config_hash: manifest.config_hash,
            seed: manifest.seed,
        },
    ))
}

pub fn save(path: &Path, state: &ContinualState, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(state, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<(ContinualState, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
