//! Binary embedding dataset container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AREA"
//! 4       2     format version (u16, currently 1)
//! 6       4     d_in (u32)
//! 10      4     flags (u32; bit 0: captions present)
//! 14      8     record count (u64)
//! 22      ...   records
//! ```
//!
//! Each record is `label: u32`, `task: u32`, `d_in` × `f32` features and, when
//! bit 0 is set, `d_in` × `f32` caption features. Everything is
//! little-endian. Values are widened to `f64` on load.

use std::path::Path;

use super::{Reader, Writer};
use crate::encoder::RawSample;
use crate::error::{Error, Result};
use crate::pipeline::TaskStream;

pub const DATASET_MAGIC: &[u8; 4] = b"AREA";
pub const DATASET_VERSION: u16 = 1;
pub const FLAG_CAPTIONS: u32 = 1;
pub const HEADER_LEN: usize = 22;

/// Serialises samples; either all or none of them must carry captions.
pub fn encode_samples<'a>(samples: impl IntoIterator<Item = &'a RawSample>) -> Result<Vec<u8>> {
    let samples: Vec<&RawSample> = samples.into_iter().collect();
    let d_in = samples.first().map_or(0, |s| s.dim());
    let captions = samples.first().is_some_and(|s| s.caption.is_some());
    let mut w = Writer::default();
    w.bytes.extend_from_slice(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.len(d_in);
    w.u32(if captions { FLAG_CAPTIONS } else { 0 });
    w.u64(samples.len() as u64);
    for s in samples {
        if s.dim() != d_in || s.caption.is_some() != captions {
            return Err(Error::Dimension(
                "dataset samples must share d_in and caption presence".into(),
            ));
        }
        w.u32(s.label);
        w.u32(s.task);
        for &x in &s.features {
            w.f32(x as f32);
        }
        if let Some(c) = &s.caption {
            if c.len() != d_in {
                return Err(Error::Dimension("caption length differs from d_in".into()));
            }
            for &x in c {
                w.f32(x as f32);
            }
        }
    }
    Ok(w.bytes)
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<RawSample>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic (expected AREA)".into(),
        });
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let d_in = r.u32()? as usize;
    let flags_at = r.offset();
    let flags = r.u32()?;
    if flags & !FLAG_CAPTIONS != 0 {
        return Err(Error::Format {
            offset: flags_at,
            msg: format!("unknown flag bits {flags:#x}"),
        });
    }
    let captions = flags & FLAG_CAPTIONS != 0;
    let count = r.u64()?;
    let record = 8 + 4 * d_in * if captions { 2 } else { 1 };
    let declared = (count as u128) * record as u128;
    if declared < r.remaining() as u128 {
        return Err(Error::Format {
            offset: (HEADER_LEN as u128 + declared) as u64,
            msg: format!(
                "{} bytes after the {count} declared records",
                r.remaining() as u128 - declared
            ),
        });
    }
    if d_in == 0 && count > 0 {
        return Err(Error::Format {
            offset: 6,
            msg: "d_in is zero".into(),
        });
    }
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    let widen = |r: &mut Reader<'_>| -> Result<Vec<f64>> {
        (0..d_in).map(|_| r.f32().map(f64::from)).collect()
    };
    for _ in 0..count {
        let label = r.u32()?;
        let task = r.u32()?;
        let features = widen(&mut r)?;
        let caption = if captions { Some(widen(&mut r)?) } else { None };
        out.push(RawSample {
            features,
            label,
            task,
            caption,
        });
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, stream: &TaskStream) -> Result<()> {
    std::fs::write(path, encode_samples(stream.samples())?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TaskStream> {
    let bytes = std::fs::read(path)?;
    TaskStream::from_samples(decode_samples(&bytes)?)
}

/// Rounds every value through `f32`, which is what a save/load cycle does.
pub fn quantize(stream: &TaskStream) -> Result<TaskStream> {
    let round = |v: &[f64]| v.iter().map(|&x| f64::from(x as f32)).collect::<Vec<_>>();
    TaskStream::from_samples(
        stream
            .samples()
            .map(|s| RawSample {
                features: round(&s.features),
                label: s.label,
                task: s.task,
                caption: s.caption.as_deref().map(round),
            })
            .collect(),
    )
}
