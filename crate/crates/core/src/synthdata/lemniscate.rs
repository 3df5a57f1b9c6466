use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, SequenceSample};
use crate::error::{Error, Result};
use crate::fields::{sample_bilinear, BoundaryMode, GridImage};

/// Sampling ranges for lemniscate shapes and their affine motion.
#[derive(Debug, Clone, PartialEq)]
pub struct LemniscateRanges {
    pub a: (f64, f64),
    pub sigma_x: (f64, f64),
    pub sigma_y: (f64, f64),
    pub n_alpha: usize,
    pub scale: (f64, f64),
    pub rotation: (f64, f64),
    pub translation: (f64, f64),
}

impl LemniscateRanges {
    /// Defaults for an `image_size` grid; lengths scale with `image_size / 64`.
    pub fn for_size(image_size: usize) -> Self {
        let s = image_size as f64;
        let k = s / 64.0;
        let sigma = ((0.03 * s).max(0.75), (0.045 * s).max(1.0));
        LemniscateRanges {
            a: (0.2 * s, 0.26 * s),
            sigma_x: sigma,
            sigma_y: sigma,
            n_alpha: 720,
            scale: (0.85, 1.25),
            rotation: (-0.35, 0.35),
            translation: (-6.0 * k, 6.0 * k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64), what: &str| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::config(format!("{what} range [{lo}, {hi}] is invalid")))
            }
        };
        ordered(self.a, "a")?;
        ordered(self.sigma_x, "sigma_x")?;
        ordered(self.sigma_y, "sigma_y")?;
        ordered(self.scale, "scale")?;
        ordered(self.rotation, "rotation")?;
        ordered(self.translation, "translation")?;
        if self.a.0 <= 0.0 || self.sigma_x.0 <= 0.0 || self.sigma_y.0 <= 0.0 || self.scale.0 <= 0.0 {
            return Err(Error::config("a, sigma and scale ranges must be positive"));
        }
        if self.n_alpha < 16 {
            return Err(Error::config("n_alpha must be at least 16"));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// One concrete lemniscate shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LemniscateSpec {
    pub a: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub n_alpha: usize,
    pub image_size: usize,
    pub follow_ups: usize,
    pub seed: u64,
}

impl LemniscateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !(self.sigma_x > 0.0) || !(self.sigma_y > 0.0) {
            return Err(Error::config("lemniscate a and sigma must be positive"));
        }
        if self.n_alpha < 16 {
            return Err(Error::config("n_alpha must be at least 16"));
        }
        if self.follow_ups == 0 {
            return Err(Error::config("at least one follow-up frame is required"));
        }
        Ok(())
    }

    pub fn draw(ranges: &LemniscateRanges, image_size: usize, follow_ups: usize, seed: u64) -> Result<Self> {
        ranges.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LemniscateSpec {
            a: draw(&mut rng, ranges.a),
            sigma_x: draw(&mut rng, ranges.sigma_x),
            sigma_y: draw(&mut rng, ranges.sigma_y),
            n_alpha: ranges.n_alpha,
            image_size,
            follow_ups,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Points of the lemniscate `x = a cos α / (sin²α + 1)`,
/// `y = a sin α cos α / (sin²α + 1)` for `n_alpha` uniform α in `[0, 2π)`.
pub fn lemniscate_contour(a: f64, n_alpha: usize) -> Vec<(f64, f64)> {
    (0..n_alpha)
        .map(|k| {
            let alpha = std::f64::consts::TAU * k as f64 / n_alpha as f64;
            let (s, c) = alpha.sin_cos();
            let d = s * s + 1.0;
            (a * c / d, a * s * c / d)
        })
        .collect()
}

/// Rasterises contour points (relative to the grid centre `(n/2, n/2)`) as
/// `[x ± σx] × [y ± σy]` boxes: covered pixel centres get 1, with a linear
/// falloff to 0 over the next pixel.
pub fn rasterize_contour(points: &[(f64, f64)], sigma_x: f64, sigma_y: f64, image_size: usize) -> Result<GridImage<f64>> {
    if points.is_empty() {
        return Err(Error::contract("contour has no points"));
    }
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(Error::contract("contour thickness must be positive"));
    }
    let n = image_size;
    let centre = (n / 2) as f64;
    let last = (n - 1) as f64;
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x_lo = x_lo.min(centre + x - sigma_x - 1.0);
        x_hi = x_hi.max(centre + x + sigma_x + 1.0);
        y_lo = y_lo.min(centre + y - sigma_y - 1.0);
        y_hi = y_hi.max(centre + y + sigma_y + 1.0);
    }
    if x_lo < 0.0 || y_lo < 0.0 || x_hi > last || y_hi > last {
        return Err(Error::contract(format!(
            "contour with thickness spans x [{x_lo:.2}, {x_hi:.2}], y [{y_lo:.2}, {y_hi:.2}] \
             but the {n}x{n} grid only holds [0, {last}]; reduce a or sigma"
        )));
    }
    let mut data = vec![0.0f64; n * n];
    for &(x, y) in points {
        let (bx, by) = (centre + x, centre + y);
        let x0 = (bx - sigma_x - 1.0).floor().max(0.0) as usize;
        let x1 = ((bx + sigma_x + 1.0).ceil() as usize).min(n - 1);
        let y0 = (by - sigma_y - 1.0).floor().max(0.0) as usize;
        let y1 = ((by + sigma_y + 1.0).ceil() as usize).min(n - 1);
        for py in y0..=y1 {
            let cy = (sigma_y + 1.0 - (py as f64 - by).abs()).clamp(0.0, 1.0);
            if cy == 0.0 {
                continue;
            }
            for px in x0..=x1 {
                let cx = (sigma_x + 1.0 - (px as f64 - bx).abs()).clamp(0.0, 1.0);
                let v = cx.min(cy);
                let cell = &mut data[py * n + px];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    GridImage::new(n, n, data)
}

/// Similarity-plus-anisotropic-scale transform about the grid centre:
/// `p -> c + R(rotation) diag(scale) (p - c) + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale_x: f64,
    pub scale_y: f64,
    pub rotation: f64,
    pub translate_x: f64,
    pub translate_y: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        scale_x: 1.0,
        scale_y: 1.0,
        rotation: 0.0,
        translate_x: 0.0,
        translate_y: 0.0,
    };

    /// The fraction `f` of the way from the identity to `self`.
    pub fn partial(&self, f: f64) -> AffineParams {
        AffineParams {
            scale_x: 1.0 + f * (self.scale_x - 1.0),
            scale_y: 1.0 + f * (self.scale_y - 1.0),
            rotation: f * self.rotation,
            translate_x: f * self.translate_x,
            translate_y: f * self.translate_y,
        }
    }

    /// Preimage of `(x, y)` under the transform centred at `(c, c)`.
    pub fn inverse_apply(&self, c: f64, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - c - self.translate_x, y - c - self.translate_y);
        let (s, co) = self.rotation.sin_cos();
        // R^T
        let (rx, ry) = (co * dx + s * dy, -s * dx + co * dy);
        (c + rx / self.scale_x, c + ry / self.scale_y)
    }
}

/// Per-frame affine parameters; frame `t` applies the fraction `t/T` of the
/// endpoint transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSchedule {
    pub endpoint: AffineParams,
    pub follow_ups: usize,
}

impl AffineSchedule {
    pub fn identity(follow_ups: usize) -> Self {
        AffineSchedule {
            endpoint: AffineParams::IDENTITY,
            follow_ups,
        }
    }

    pub fn translation(follow_ups: usize, tx: f64, ty: f64) -> Self {
        AffineSchedule {
            endpoint: AffineParams {
                translate_x: tx,
                translate_y: ty,
                ..AffineParams::IDENTITY
            },
            follow_ups,
        }
    }

    pub fn draw(ranges: &LemniscateRanges, _image_size: usize, follow_ups: usize, seed: u64) -> Result<Self> {
        ranges.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        Ok(AffineSchedule {
            endpoint: AffineParams {
                scale_x: draw(&mut rng, ranges.scale),
                scale_y: draw(&mut rng, ranges.scale),
                rotation: draw(&mut rng, ranges.rotation),
                translate_x: draw(&mut rng, ranges.translation),
                translate_y: draw(&mut rng, ranges.translation),
            },
            follow_ups,
        })
    }

    pub fn frame(&self, t: usize) -> AffineParams {
        self.endpoint.partial(t as f64 / self.follow_ups as f64)
    }

    /// Largest per-frame change of any parameter (scales, radians, pixels).
    pub fn max_step_delta(&self) -> f64 {
        let e = &self.endpoint;
        [
            e.scale_x - 1.0,
            e.scale_y - 1.0,
            e.rotation,
            e.translate_x,
            e.translate_y,
        ]
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
            / self.follow_ups as f64
    }
}

/// Reference lemniscate plus `T` frames obtained by inverse-warping it with
/// the schedule's per-frame affine maps (bilinear, clamped borders).
pub fn make_lemniscate_sequence(spec: &LemniscateSpec, schedule: &AffineSchedule) -> Result<SequenceSample<f64>> {
    spec.validate()?;
    if schedule.follow_ups != spec.follow_ups {
        return Err(Error::contract(format!(
            "schedule covers {} frames, spec asks for {}",
            schedule.follow_ups, spec.follow_ups
        )));
    }
    let n = spec.image_size;
    let contour = lemniscate_contour(spec.a, spec.n_alpha);
    let reference = rasterize_contour(&contour, spec.sigma_x, spec.sigma_y, n)?;
    let c = (n / 2) as f64;
    let mut frames = Vec::with_capacity(spec.follow_ups + 1);
    frames.push(reference.clone());
    for t in 1..=spec.follow_ups {
        let params = schedule.frame(t);
        let frame = GridImage::from_fn(n, n, |x, y| {
            let (sx, sy) = params.inverse_apply(c, x as f64, y as f64);
            sample_bilinear(reference.data(), n, n, sx, sy, BoundaryMode::Clamp)
        })?;
        frames.push(frame);
    }
    SequenceSample::new(frames, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn point_at(a: f64, alpha: f64) -> (f64, f64) {
        // the contour at n_alpha samples contains alpha = 2πk/n exactly for
        // these angles when n is a multiple of 8
        let n = 64;
        let k = (alpha / std::f64::consts::TAU * n as f64).round() as usize;
        lemniscate_contour(a, n)[k]
    }

    #[test]
    fn contour_special_angles() {
        let a = 10.0;
        let (x, y) = point_at(a, 0.0);
        assert_eq!((x, y), (a, 0.0));
        let (x, y) = point_at(a, FRAC_PI_2);
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12);
        let (x, y) = point_at(a, FRAC_PI_4);
        assert!((x - a * 2f64.sqrt() / 3.0).abs() < 1e-12);
        assert!((y - a / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_point_rasterises_to_block() {
        let img = rasterize_contour(&[(0.0, 0.0)], 1.0, 1.0, 16).unwrap();
        let lit: Vec<(usize, usize)> = (0..16)
            .flat_map(|y| (0..16).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get(x, y) > 0.0)
            .collect();
        assert_eq!(lit.len(), 9);
        for (x, y) in lit {
            assert!((7..=9).contains(&x) && (7..=9).contains(&y));
            assert_eq!(img.get(x, y), 1.0);
        }
    }

    fn bbox_width(img: &GridImage<f64>) -> usize {
        let n = img.width();
        let cols: Vec<usize> = (0..n)
            .filter(|&x| (0..img.height()).any(|y| img.get(x, y) >= 1.0))
            .collect();
        cols.last().unwrap() - cols.first().unwrap()
    }

    #[test]
    fn doubling_a_doubles_extent() {
        let sigma = 1.0;
        for a in [6.0, 8.0, 11.0] {
            let small = rasterize_contour(&lemniscate_contour(a, 720), sigma, sigma, 64).unwrap();
            let large = rasterize_contour(&lemniscate_contour(2.0 * a, 720), sigma, sigma, 64).unwrap();
            // the box thickness adds 2σ to both extents
            let e1 = bbox_width(&small) as f64 - 2.0 * sigma;
            let e2 = bbox_width(&large) as f64 - 2.0 * sigma;
            assert!((e2 - 2.0 * e1).abs() <= 1.0, "a={a}: {e1} -> {e2}");
        }
    }

    #[test]
    fn oversized_contour_is_rejected() {
        let err = rasterize_contour(&lemniscate_contour(20.0, 64), 1.0, 1.0, 32).unwrap_err();
        assert!(err.to_string().contains("reduce a or sigma"));
    }

    #[test]
    fn identity_schedule_repeats_reference() {
        let spec = LemniscateSpec {
            a: 9.0,
            sigma_x: 1.2,
            sigma_y: 0.9,
            n_alpha: 360,
            image_size: 32,
            follow_ups: 4,
            seed: 0,
        };
        let s = make_lemniscate_sequence(&spec, &AffineSchedule::identity(4)).unwrap();
        assert_eq!(s.frames.len(), 5);
        assert!(s.frames.iter().all(|f| *f == s.frames[0]));
    }

    fn centroid(img: &GridImage<f64>) -> (f64, f64) {
        let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = img.get(x, y);
                m += v;
                mx += v * x as f64;
                my += v * y as f64;
            }
        }
        (mx / m, my / m)
    }

    #[test]
    fn translation_schedule_moves_centroid() {
        let t = 6;
        let k = 0.75;
        let spec = LemniscateSpec {
            a: 14.0,
            sigma_x: 1.5,
            sigma_y: 1.5,
            n_alpha: 720,
            image_size: 64,
            follow_ups: t,
            seed: 0,
        };
        let s = make_lemniscate_sequence(&spec, &AffineSchedule::translation(t, k * t as f64, 0.0)).unwrap();
        let c0 = centroid(&s.frames[0]);
        for tau in 1..=t {
            let c = centroid(&s.frames[tau]);
            assert!((c.0 - c0.0 - tau as f64 * k).abs() < 0.5, "frame {tau}: {c:?} vs {c0:?}");
            assert!((c.1 - c0.1).abs() < 0.5);
        }
    }

    #[test]
    fn schedule_steps_are_bounded() {
        let ranges = LemniscateRanges::for_size(64);
        for seed in 0..20 {
            let s = AffineSchedule::draw(&ranges, 64, 11, seed).unwrap();
            assert!(s.max_step_delta() <= 6.0 / 11.0 + 1e-12);
            let p = s.frame(11);
            assert_eq!(p, s.endpoint.partial(1.0));
        }
    }

    #[test]
    fn inverse_apply_inverts_forward_map() {
        let p = AffineParams {
            scale_x: 1.2,
            scale_y: 0.9,
            rotation: 0.3,
            translate_x: 2.0,
            translate_y: -1.0,
        };
        let c = 16.0;
        let (x, y) = (20.0, 9.0);
        let (dx, dy) = ((x - c) * p.scale_x, (y - c) * p.scale_y);
        let (s, co) = p.rotation.sin_cos();
        let fwd = (c + co * dx - s * dy + p.translate_x, c + s * dx + co * dy + p.translate_y);
        let back = p.inverse_apply(c, fwd.0, fwd.1);
        assert!((back.0 - x).abs() < 1e-12 && (back.1 - y).abs() < 1e-12);
    }
}
