//! Binary dataset container.
//!
//! ```text
//! "TLRNDATA" | version u32 | sample_count u32 | T u32 | height u32 | width u32
//!            | has_masks u8 | dtype u8
//! frames: sample-major, T+1 frames each, row-major little-endian values
//! masks (if has_masks): same order, one byte (0 or 1) per pixel
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::SequenceSample;
use crate::error::{AtPath, Error, Result};
use crate::fields::GridImage;
use crate::metrics::BinaryMask;
use crate::real::{Dtype, Real};

pub const DATASET_MAGIC: &[u8; 8] = b"TLRNDATA";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 5 + 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub sample_count: u32,
    pub follow_ups: u32,
    pub height: u32,
    pub width: u32,
    pub has_masks: bool,
    pub dtype: Dtype,
}

impl DatasetHeader {
    fn frame_bytes(&self) -> u64 {
        (self.follow_ups as u64 + 1) * self.height as u64 * self.width as u64 * self.dtype.size() as u64
    }

    fn mask_bytes(&self) -> u64 {
        if self.has_masks {
            (self.follow_ups as u64 + 1) * self.height as u64 * self.width as u64
        } else {
            0
        }
    }

    pub fn payload_len(&self) -> u64 {
        self.sample_count as u64 * (self.frame_bytes() + self.mask_bytes())
    }
}

fn header_of<F: Real>(samples: &[SequenceSample<F>]) -> Result<DatasetHeader> {
    let Some(first) = samples.first() else {
        return Ok(DatasetHeader {
            sample_count: 0,
            follow_ups: 0,
            height: 0,
            width: 0,
            has_masks: false,
            dtype: F::DTYPE,
        });
    };
    let (h, w) = first.dims();
    let t = first.follow_up_count();
    let has_masks = first.masks.is_some();
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != (h, w) || s.follow_up_count() != t || s.masks.is_some() != has_masks {
            return Err(Error::contract(format!(
                "sample {i} differs from sample 0 in size, frame count or mask presence"
            )));
        }
    }
    let narrow = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::contract(format!("{what} {v} exceeds u32")));
    Ok(DatasetHeader {
        sample_count: narrow(samples.len(), "sample count")?,
        follow_ups: narrow(t, "frame count")?,
        height: narrow(h, "height")?,
        width: narrow(w, "width")?,
        has_masks,
        dtype: F::DTYPE,
    })
}

/// Serialises homogeneous samples into `out`.
pub fn write_dataset_to<F: Real>(samples: &[SequenceSample<F>], out: &mut impl Write) -> Result<()> {
    let header = header_of(samples)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + header.payload_len() as usize);
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [
        DATASET_VERSION,
        header.sample_count,
        header.follow_ups,
        header.height,
        header.width,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(header.has_masks as u8);
    buf.push(header.dtype.code());
    for s in samples {
        for f in &s.frames {
            for &v in f.data() {
                v.write_le(&mut buf);
            }
        }
    }
    for s in samples {
        if let Some(masks) = &s.masks {
            for m in masks {
                buf.extend(m.values().iter().map(|&b| b as u8));
            }
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_dataset<F: Real>(samples: &[SequenceSample<F>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    (|| {
        let mut file = fs::File::create(path)?;
        write_dataset_to(samples, &mut file)?;
        file.flush()?;
        Ok::<_, Error>(())
    })()
    .at_path(path)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses a container, converting values to `F` when the stored dtype
/// differs.
pub fn read_dataset_from<F: Real>(input: &mut impl Read) -> Result<(DatasetHeader, Vec<SequenceSample<F>>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("file holds {} bytes, header needs {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(Error::parse(0, "bad magic, not a TLRNDATA container"));
    }
    let version = read_u32(&bytes, 8);
    if version != DATASET_VERSION {
        return Err(Error::parse(8, format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[29]).ok_or_else(|| Error::parse(29, format!("unknown dtype code {}", bytes[29])))?;
    let has_masks = match bytes[28] {
        0 => false,
        1 => true,
        other => return Err(Error::parse(28, format!("has_masks must be 0 or 1, got {other}"))),
    };
    let header = DatasetHeader {
        sample_count: read_u32(&bytes, 12),
        follow_ups: read_u32(&bytes, 16),
        height: read_u32(&bytes, 20),
        width: read_u32(&bytes, 24),
        has_masks,
        dtype,
    };
    if header.sample_count > 0 && (header.height < 2 || header.width < 2) {
        return Err(Error::parse(20, format!("frame size {}x{} is invalid", header.height, header.width)));
    }
    let payload = (bytes.len() - HEADER_LEN) as u64;
    if payload != header.payload_len() {
        return Err(Error::parse(
            bytes.len() as u64,
            format!(
                "header declares {} samples needing {} payload bytes, but the file holds {payload}",
                header.sample_count,
                header.payload_len()
            ),
        ));
    }

    let (h, w) = (header.height as usize, header.width as usize);
    let frames_per = header.follow_ups as usize + 1;
    let size = dtype.size();
    let mut at = HEADER_LEN;
    let mut frame_sets = Vec::with_capacity(header.sample_count as usize);
    for _ in 0..header.sample_count {
        let mut frames = Vec::with_capacity(frames_per);
        for _ in 0..frames_per {
            let start = at;
            let data: Vec<F> = (0..h * w)
                .map(|k| {
                    let off = start + k * size;
                    match dtype {
                        Dtype::F32 => F::of(f32::read_le(&bytes[off..]) as f64),
                        Dtype::F64 => F::of(f64::read_le(&bytes[off..])),
                    }
                })
                .collect();
            at += h * w * size;
            frames.push(GridImage::new(h, w, data).map_err(|e| Error::parse(start as u64, e.to_string()))?);
        }
        frame_sets.push(frames);
    }
    let mut samples = Vec::with_capacity(frame_sets.len());
    for frames in frame_sets {
        let masks = if has_masks {
            let mut masks = Vec::with_capacity(frames_per);
            for _ in 0..frames_per {
                let chunk = &bytes[at..at + h * w];
                if let Some(k) = chunk.iter().position(|&b| b > 1) {
                    return Err(Error::parse((at + k) as u64, format!("mask byte {} is not 0 or 1", chunk[k])));
                }
                masks.push(BinaryMask::from_bools(h, w, chunk.iter().map(|&b| b == 1).collect())?);
                at += h * w;
            }
            Some(masks)
        } else {
            None
        };
        samples.push(SequenceSample::new(frames, masks)?);
    }
    Ok((header, samples))
}

pub fn read_dataset<F: Real>(path: impl AsRef<Path>) -> Result<Vec<SequenceSample<F>>> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).at_path(path)?;
    Ok(read_dataset_from(&mut file).at_path(path)?.1)
}
