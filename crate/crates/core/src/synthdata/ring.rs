use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, SequenceSample};
use crate::error::{Error, Result};
use crate::fields::GridImage;
use crate::metrics::BinaryMask;

/// Sampling ranges for contracting-ring sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct RingRanges {
    pub outer_radius: (f64, f64),
    pub thickness: (f64, f64),
    /// Final outer radius as a fraction of the initial one.
    pub outer_contraction: (f64, f64),
    /// Final wall thickness as a multiple of the initial one.
    pub wall_thickening: (f64, f64),
    /// Largest offset of the ring centre from the grid centre, in pixels.
    pub centre_jitter: f64,
}

impl RingRanges {
    pub fn for_size(image_size: usize) -> Self {
        let s = image_size as f64;
        let outer_radius = (0.3 * s, 0.37 * s);
        // room left between the largest ring and the grid edge
        let c = image_size / 2;
        let room = c.min(image_size.saturating_sub(1 + c)) as f64 - 1.0 - outer_radius.1;
        RingRanges {
            outer_radius,
            thickness: (0.09 * s, 0.14 * s),
            outer_contraction: (0.7, 0.85),
            wall_thickening: (1.15, 1.45),
            centre_jitter: (0.06 * s).min(room).max(0.0),
        }
    }
}

/// Inner/outer radius at the first and last frame; intermediate frames follow
/// the smooth monotone easing `(1 - cos(π t / T)) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiiSchedule {
    pub inner_start: f64,
    pub outer_start: f64,
    pub inner_end: f64,
    pub outer_end: f64,
    pub centre_offset: (f64, f64),
}

impl RadiiSchedule {
    pub fn constant(inner: f64, outer: f64) -> Self {
        RadiiSchedule {
            inner_start: inner,
            outer_start: outer,
            inner_end: inner,
            outer_end: outer,
            centre_offset: (0.0, 0.0),
        }
    }

    pub fn draw(ranges: &RingRanges, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let mut pick = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let outer_start = pick(ranges.outer_radius);
        let thickness = pick(ranges.thickness);
        let outer_end = outer_start * pick(ranges.outer_contraction);
        let thick_end = thickness * pick(ranges.wall_thickening);
        let jitter = ranges.centre_jitter;
        let centre_offset = (pick((-jitter, jitter)), pick((-jitter, jitter)));
        let s = RadiiSchedule {
            inner_start: outer_start - thickness,
            outer_start,
            inner_end: (outer_end - thick_end).max(1.0),
            outer_end,
            centre_offset,
        };
        s.validate()?;
        Ok(s)
    }

    /// The same schedule without motion (every frame equals the first).
    pub fn frozen(&self) -> Self {
        RadiiSchedule {
            inner_end: self.inner_start,
            outer_end: self.outer_start,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (inner, outer, when) in [
            (self.inner_start, self.outer_start, "first"),
            (self.inner_end, self.outer_end, "last"),
        ] {
            if !(inner >= 0.0 && inner < outer) {
                return Err(Error::contract(format!(
                    "ring radii at the {when} frame need 0 <= inner < outer, got {inner} and {outer}"
                )));
            }
        }
        Ok(())
    }

    pub fn at(&self, t: usize, follow_ups: usize) -> (f64, f64) {
        let f = if follow_ups == 0 {
            0.0
        } else {
            0.5 * (1.0 - (std::f64::consts::PI * t as f64 / follow_ups as f64).cos())
        };
        (
            self.inner_start + f * (self.inner_end - self.inner_start),
            self.outer_start + f * (self.outer_end - self.outer_start),
        )
    }
}

/// Anti-aliased annulus frames (bright ring on dark background) with binary
/// masks of the pixel centres strictly inside each annulus.
pub fn make_ring_sequence(image_size: usize, follow_ups: usize, radii: &RadiiSchedule, _seed: u64) -> Result<SequenceSample<f64>> {
    radii.validate()?;
    if follow_ups == 0 {
        return Err(Error::config("at least one follow-up frame is required"));
    }
    let n = image_size;
    let c = (n / 2) as f64;
    let (cx, cy) = (c + radii.centre_offset.0, c + radii.centre_offset.1);
    let reach = radii.outer_start.max(radii.outer_end) + 1.0;
    if cx - reach < 0.0 || cy - reach < 0.0 || cx + reach > (n - 1) as f64 || cy + reach > (n - 1) as f64 {
        return Err(Error::contract(format!(
            "ring of outer radius {reach:.2} around ({cx:.2}, {cy:.2}) does not fit in {n}x{n}"
        )));
    }
    let mut frames = Vec::with_capacity(follow_ups + 1);
    let mut masks = Vec::with_capacity(follow_ups + 1);
    for t in 0..=follow_ups {
        let (inner, outer) = radii.at(t, follow_ups);
        let mut img = vec![0.0; n * n];
        let mut mask = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let depth = (r - inner).min(outer - r);
                img[y * n + x] = (0.5 + depth).clamp(0.0, 1.0);
                mask[y * n + x] = depth > 0.0;
            }
        }
        frames.push(GridImage::new(n, n, img)?);
        masks.push(BinaryMask::from_bools(n, n, mask)?);
    }
    SequenceSample::new(frames, Some(masks))
}
