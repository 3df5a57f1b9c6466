//! Synthetic image sequences: affine-deformed lemniscates and contracting
//! rings with ground-truth masks, plus the binary dataset container.

mod container;
mod lemniscate;
mod ring;

pub use container::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, DatasetHeader, DATASET_MAGIC, DATASET_VERSION};
pub use lemniscate::{
    lemniscate_contour, make_lemniscate_sequence, rasterize_contour, AffineParams, AffineSchedule,
    LemniscateRanges, LemniscateSpec,
};
pub use ring::{make_ring_sequence, RadiiSchedule, RingRanges};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::GridImage;
use crate::metrics::BinaryMask;
use crate::real::Real;

/// Reference frame `I^0` followed by `T` follow-up frames, with optional
/// per-frame ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample<F> {
    pub frames: Vec<GridImage<F>>,
    pub masks: Option<Vec<BinaryMask>>,
}

impl<F: Real> SequenceSample<F> {
    pub fn new(frames: Vec<GridImage<F>>, masks: Option<Vec<BinaryMask>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::contract("sequence has no frames"));
        }
        let dims = frames[0].dims();
        if let Some(t) = frames.iter().position(|f| f.dims() != dims) {
            return Err(Error::contract(format!(
                "frame {t} is {:?}, frame 0 is {dims:?}",
                frames[t].dims()
            )));
        }
        if let Some(masks) = &masks {
            if masks.len() != frames.len() {
                return Err(Error::contract(format!(
                    "{} masks for {} frames",
                    masks.len(),
                    frames.len()
                )));
            }
            if let Some(t) = masks.iter().position(|m| m.dims() != dims) {
                return Err(Error::contract(format!("mask {t} does not match the frame size")));
            }
        }
        Ok(SequenceSample { frames, masks })
    }

    /// Number of follow-up frames `T`.
    pub fn follow_up_count(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn reference(&self) -> &GridImage<F> {
        &self.frames[0]
    }

    pub fn cast<G: Real>(&self) -> SequenceSample<G> {
        SequenceSample {
            frames: self.frames.iter().map(|f| f.cast()).collect(),
            masks: self.masks.clone(),
        }
    }
}

/// Per-sample seed derived from a dataset seed and the sample index, so that
/// generation order and parallelism never change content.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(index.wrapping_add(0x5151)))
}

/// Sequence family and its generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceKind {
    Lemniscate(LemniscateRanges),
    Ring(RingRanges),
}

impl SequenceKind {
    pub fn name(&self) -> &'static str {
        match self {
            SequenceKind::Lemniscate(_) => "lemniscate",
            SequenceKind::Ring(_) => "ring",
        }
    }
}

/// Everything needed to regenerate a dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub kind: SequenceKind,
    pub image_size: usize,
    pub follow_ups: usize,
    /// Every follow-up frame equals the reference (sanity datasets).
    pub static_frames: bool,
}

impl DataSpec {
    pub fn generate_one(&self, seed: u64) -> Result<SequenceSample<f64>> {
        let mut sample = match &self.kind {
            SequenceKind::Lemniscate(ranges) => {
                let spec = LemniscateSpec::draw(ranges, self.image_size, self.follow_ups, seed)?;
                let schedule = if self.static_frames {
                    AffineSchedule::identity(self.follow_ups)
                } else {
                    AffineSchedule::draw(ranges, self.image_size, self.follow_ups, seed)?
                };
                make_lemniscate_sequence(&spec, &schedule)?
            }
            SequenceKind::Ring(ranges) => {
                let radii = if self.static_frames {
                    RadiiSchedule::draw(ranges, seed)?.frozen()
                } else {
                    RadiiSchedule::draw(ranges, seed)?
                };
                make_ring_sequence(self.image_size, self.follow_ups, &radii, seed)?
            }
        };
        if self.static_frames {
            let reference = sample.frames[0].clone();
            sample.frames.iter_mut().for_each(|f| *f = reference.clone());
            if let Some(masks) = &mut sample.masks {
                let m0 = masks[0].clone();
                masks.iter_mut().for_each(|m| *m = m0.clone());
            }
        }
        Ok(sample)
    }

    /// `count` samples with seeds `derive_seed(seed, i)`.
    pub fn generate<F: Real>(&self, count: usize, seed: u64) -> Result<Vec<SequenceSample<F>>> {
        (0..count)
            .into_par_iter()
            .map(|i| Ok(self.generate_one(derive_seed(seed, i as u64))?.cast::<F>()))
            .collect()
    }
}
