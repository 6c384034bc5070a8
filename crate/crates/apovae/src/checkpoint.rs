//! Checkpoint files.
//!
//! Layout: the 8 bytes `APOVAE01`, a compact JSON header terminated by a
//! single `\n`, then every tensor as row-major little-endian `f64` in the
//! order of the header's manifest. Offsets in the manifest are in bytes from
//! the start of the tensor data.
//!
//! The manifest lists the model parameters first, then the first and second
//! Adam moments of the model optimizer, then those of the dual optimizer.

use std::fs;
use std::path::Path;

use apovae_core::tape::Group;
use apovae_core::trainer::{AdamState, Checkpoint, NamedTensor, RngState, TrainConfig};
use apovae_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"APOVAE01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    vocab: Vec<String>,
    iteration: u64,
    rng: RngState,
    model_opt_steps: u64,
    dual_opt_steps: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    /// Parameter group; absent for optimizer moments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<Group>,
    shape: [usize; 2],
    offset: u64,
}

fn model_group(g: Group) -> bool {
    matches!(g, Group::Decoder | Group::Encoder)
}

fn moment_names(params: &[NamedTensor], keep: fn(Group) -> bool, prefix: &str) -> Vec<String> {
    params.iter().filter(|p| keep(p.group)).map(|p| format!("{prefix}/{}", p.name)).collect()
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Option<Group>, &Matrix)> =
        ckpt.params.iter().map(|p| (p.name.clone(), Some(p.group), &p.value)).collect();
    let dual_group = |g: Group| !model_group(g);
    for (opt, keep, tag) in
        [(&ckpt.model_opt, model_group as fn(Group) -> bool, "model"), (&ckpt.dual_opt, dual_group, "dual")]
    {
        let m_names = moment_names(&ckpt.params, keep, &format!("adam.{tag}.m"));
        let v_names = moment_names(&ckpt.params, keep, &format!("adam.{tag}.v"));
        if m_names.len() != opt.m.len() || v_names.len() != opt.v.len() {
            return Err(Error::Data(format!("{tag} optimizer state does not match the parameters")));
        }
        tensors.extend(m_names.into_iter().zip(&opt.m).map(|(n, t)| (n, None, t)));
        tensors.extend(v_names.into_iter().zip(&opt.v).map(|(n, t)| (n, None, t)));
    }
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, group, t) in &tensors {
        let (r, c) = t.shape();
        entries.push(Entry { name: name.clone(), group: *group, shape: [r, c], offset });
        offset += 8 * t.len() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.clone(),
        iteration: ckpt.iteration,
        rng: ckpt.rng.clone(),
        model_opt_steps: ckpt.model_opt.steps,
        dual_opt_steps: ckpt.dual_opt.steps,
        tensors: entries,
    };
    let json =
        serde_json::to_string(&header).map_err(|e| Error::Data(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for (_, _, t) in &tensors {
        for x in t.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Data(format!("invalid checkpoint: {msg}"));
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing APOVAE01 magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let data = &rest[nl + 1..];
    let mut expected = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected {
            return Err(bad(format!("tensor {} is not at the expected offset", e.name)));
        }
        let [r, c] = e.shape;
        let len = r.checked_mul(c).ok_or_else(|| bad(format!("tensor {} is too large", e.name)))?;
        let start = e.offset as usize;
        let end = start + 8 * len;
        if end > data.len() {
            return Err(bad(format!("tensor {} is truncated", e.name)));
        }
        let values =
            data[start..end].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
        tensors.push((e, Matrix::from_vec(r, c, values)));
        expected = end as u64;
    }
    if expected as usize != data.len() {
        return Err(bad(format!("{} trailing bytes", data.len() - expected as usize)));
    }

    let mut params = Vec::new();
    let mut moments: [Vec<Matrix>; 4] = Default::default();
    for (e, value) in tensors {
        let slot = match (e.group, e.name.split('/').next()) {
            (Some(group), _) => {
                params.push(NamedTensor { name: e.name.clone(), group, value });
                continue;
            }
            (None, Some("adam.model.m")) => 0,
            (None, Some("adam.model.v")) => 1,
            (None, Some("adam.dual.m")) => 2,
            (None, Some("adam.dual.v")) => 3,
            _ => return Err(bad(format!("unknown tensor {}", e.name))),
        };
        moments[slot].push(value);
    }
    let [mm, mv, dm, dv] = moments;
    Ok(Checkpoint {
        config: header.config,
        vocab: header.vocab,
        iteration: header.iteration,
        rng: header.rng,
        params,
        model_opt: AdamState { steps: header.model_opt_steps, m: mm, v: mv },
        dual_opt: AdamState { steps: header.dual_opt_steps, m: dm, v: dv },
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
