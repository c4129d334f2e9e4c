//! Persisted continual-learning state.
//!
//! Layout: magic `ACST`, `u16` version, the canonical payload, then the
//! `u64` FNV-1a digest of the payload. Reals are stored as `f64` so a loaded
//! state predicts exactly like the one that was saved.
//!
//! Payload, in order (lengths are `u32`):
//! config text; visual and textual projections (`rows`, `cols`, entries);
//! prompts (`class`, `len`, entries); anchors (`task`, `class`, method byte,
//! `d`, `K`, then `μ_vis, V_vis, λ_vis, μ_txt, V_txt, λ_txt`); freeze digests
//! (`task`, `u64`); experts (`task`, `d`, `K`, `S_vis, R_vis, S_txt, R_txt`);
//! task order.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::Config;
use super::{Reader, Writer};
use crate::encoder::{FrozenEncoder, Modality};
use crate::error::{Error, Result};
use crate::expert::TaskExpert;
use crate::hash::fnv1a;
use crate::linalg::Matrix;
use crate::pga::{AnchorMethod, AnchorStore, ClassAnchor};
use crate::pipeline::ContinualState;
use crate::sphere::UnitVector;

pub const STATE_MAGIC: &[u8; 4] = b"ACST";
pub const STATE_VERSION: u16 = 1;

fn write_matrix(w: &mut Writer, m: &Matrix<f64>) {
    w.len(m.rows());
    w.len(m.cols());
    w.f64s(m.as_slice());
}

fn read_matrix(r: &mut Reader<'_>) -> Result<Matrix<f64>> {
    let rows = r.u32()? as usize;
    let cols = r.len(8)?;
    if rows.saturating_mul(cols).saturating_mul(8) > r.remaining() {
        return Err(Error::Truncated {
            offset: r.offset(),
            expected: (rows * cols * 8 - r.remaining()) as u64,
        });
    }
    Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)
}

fn read_unit(r: &mut Reader<'_>, d: usize) -> Result<UnitVector<f64>> {
    let at = r.offset();
    UnitVector::from_normalized(r.f64s(d)?).map_err(|e| Error::Format {
        offset: at,
        msg: e.to_string(),
    })
}

/// Canonical payload bytes (everything between the header and the digest).
pub fn encode_payload(state: &ContinualState) -> Vec<u8> {
    let mut w = Writer::default();
    let cfg = state.config.render();
    w.len(cfg.len());
    w.bytes.extend_from_slice(cfg.as_bytes());
    write_matrix(&mut w, state.visual.projection());
    write_matrix(&mut w, state.textual.projection());

    w.len(state.prompts.len());
    for (c, p) in &state.prompts {
        w.u32(*c);
        w.len(p.len());
        w.f64s(p);
    }

    let mut entries = Vec::new();
    for t in state.anchors.tasks() {
        for c in state.anchors.classes_of(t).into_iter().flatten() {
            entries.push((t, state.anchors.get(*c).expect("indexed class")));
        }
    }
    w.len(entries.len());
    for (t, a) in entries {
        w.u32(t);
        w.u32(a.class_id);
        w.u8(match a.method {
            AnchorMethod::Pga => 0,
            AnchorMethod::Pca => 1,
        });
        w.len(a.dim());
        w.len(a.k());
        w.f64s(a.mu_vis.as_slice());
        w.f64s(a.basis_vis.as_slice());
        w.f64s(&a.eigvals_vis);
        w.f64s(a.mu_txt.as_slice());
        w.f64s(a.basis_txt.as_slice());
        w.f64s(&a.eigvals_txt);
    }

    let frozen = state.anchors.frozen_digests();
    w.len(frozen.len());
    for (t, d) in frozen {
        w.u32(*t);
        w.u64(*d);
    }

    w.len(state.experts.len());
    for (t, e) in &state.experts {
        w.u32(*t);
        w.len(e.dim());
        w.len(e.k());
        for m in [&e.s_vis, &e.r_vis, &e.s_txt, &e.r_txt] {
            w.f64s(m.as_slice());
        }
    }

    w.len(state.task_order.len());
    for t in &state.task_order {
        w.u32(*t);
    }
    w.bytes
}

pub fn state_digest(state: &ContinualState) -> u64 {
    fnv1a(&encode_payload(state))
}

pub fn encode_state(state: &ContinualState) -> Vec<u8> {
    let payload = encode_payload(state);
    let mut w = Writer::default();
    w.bytes.extend_from_slice(STATE_MAGIC);
    w.u16(STATE_VERSION);
    w.bytes.extend_from_slice(&payload);
    w.u64(fnv1a(&payload));
    w.bytes
}

pub fn decode_state(bytes: &[u8]) -> Result<ContinualState> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != STATE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic (expected ACST)".into(),
        });
    }
    let version = r.u16()?;
    if version != STATE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: STATE_VERSION,
        });
    }
    if r.remaining() < 8 {
        return Err(Error::Truncated {
            offset: r.offset(),
            expected: (8 - r.remaining()) as u64,
        });
    }
    let payload = &bytes[6..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a(payload);
    if stored != computed {
        return Err(Error::DigestMismatch { stored, computed });
    }
    let state = decode_payload(payload).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format { offset: offset + 6, msg },
        Error::Truncated { offset, expected } => Error::Truncated {
            offset: offset + 6,
            expected,
        },
        e => e,
    })?;
    Ok(state)
}

fn decode_payload(payload: &[u8]) -> Result<ContinualState> {
    let mut r = Reader::new(payload);
    let n = r.len(1)?;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format {
        offset: at,
        msg: "config text is not UTF-8".into(),
    })?;
    let config = Config::parse(text)?;
    let visual = FrozenEncoder::new(read_matrix(&mut r)?, Modality::Visual)?;
    let textual = FrozenEncoder::new(read_matrix(&mut r)?, Modality::Textual)?;

    let mut prompts = BTreeMap::new();
    for _ in 0..r.len(8)? {
        let c = r.u32()?;
        let len = r.len(8)?;
        prompts.insert(c, r.f64s(len)?);
    }

    let mut entries = Vec::new();
    for _ in 0..r.len(17)? {
        let task = r.u32()?;
        let class_id = r.u32()?;
        let method = match r.u8()? {
            0 => AnchorMethod::Pga,
            1 => AnchorMethod::Pca,
            m => return Err(r.format_error(format!("unknown anchor method {m}"))),
        };
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let mu_vis = read_unit(&mut r, d)?;
        let basis_vis = Matrix::from_vec(d, k, r.f64s(d * k)?)?;
        let eigvals_vis = r.f64s(k)?;
        let mu_txt = read_unit(&mut r, d)?;
        let basis_txt = Matrix::from_vec(d, k, r.f64s(d * k)?)?;
        let eigvals_txt = r.f64s(k)?;
        entries.push((
            task,
            ClassAnchor {
                class_id,
                mu_vis,
                basis_vis,
                eigvals_vis,
                mu_txt,
                basis_txt,
                eigvals_txt,
                method,
            },
        ));
    }
    let mut frozen = BTreeMap::new();
    for _ in 0..r.len(12)? {
        let t = r.u32()?;
        frozen.insert(t, r.u64()?);
    }
    let anchors = AnchorStore::from_parts(entries, frozen)?;

    let mut experts = BTreeMap::new();
    for _ in 0..r.len(12)? {
        let task_id = r.u32()?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let s_vis = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
        let r_vis = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
        let s_txt = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
        let r_txt = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
        experts.insert(
            task_id,
            TaskExpert {
                task_id,
                s_vis,
                r_vis,
                s_txt,
                r_txt,
            },
        );
    }
    let task_order = (0..r.len(4)?).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(r.format_error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(ContinualState {
        config,
        visual,
        textual,
        anchors,
        prompts,
        experts,
        task_order,
    })
}

pub fn save_state(path: &Path, state: &ContinualState) -> Result<()> {
    std::fs::write(path, encode_state(state))?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<ContinualState> {
    decode_state(&std::fs::read(path)?)
}
