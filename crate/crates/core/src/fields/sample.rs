use super::BoundaryMode;
use crate::real::Real;

/// Bilinear stencil of one sampling location: four corner indices, the
/// fractional offsets and whether each coordinate is inside the
/// differentiable range.
#[derive(Debug, Clone, Copy)]
pub struct Tap<F> {
    pub i00: usize,
    pub i10: usize,
    pub i01: usize,
    pub i11: usize,
    pub fx: F,
    pub fy: F,
    /// `d(coordinate used)/d(coordinate requested)`: 0 where clamping froze it.
    pub sx: F,
    pub sy: F,
}

fn locate_axis<F: Real>(coord: F, n: usize, bc: BoundaryMode) -> (usize, usize, F, F) {
    let last = F::of((n - 1) as f64);
    match bc {
        BoundaryMode::Clamp => {
            let (c, s) = if coord < F::zero() {
                (F::zero(), F::zero())
            } else if coord > last {
                (last, F::zero())
            } else {
                (coord, F::one())
            };
            let i0 = c.floor();
            let i0u = i0.to_usize().unwrap_or(0);
            if i0u >= n - 1 {
                (n - 1, n - 1, F::zero(), s)
            } else {
                (i0u, i0u + 1, c - i0, s)
            }
        }
        BoundaryMode::Periodic => {
            let nf = F::of(n as f64);
            let mut c = coord - nf * (coord / nf).floor();
            if c >= nf || c < F::zero() {
                c = F::zero();
            }
            let i0 = c.floor();
            let i0u = i0.to_usize().unwrap_or(0).min(n - 1);
            (i0u, (i0u + 1) % n, c - i0, F::one())
        }
    }
}

impl<F: Real> Tap<F> {
    #[inline]
    pub fn locate(height: usize, width: usize, x: F, y: F, bc: BoundaryMode) -> Self {
        let (x0, x1, fx, sx) = locate_axis(x, width, bc);
        let (y0, y1, fy, sy) = locate_axis(y, height, bc);
        Tap {
            i00: y0 * width + x0,
            i10: y0 * width + x1,
            i01: y1 * width + x0,
            i11: y1 * width + x1,
            fx,
            fy,
            sx,
            sy,
        }
    }

    #[inline]
    pub fn value(&self, data: &[F]) -> F {
        let (a, b, c, d) = (data[self.i00], data[self.i10], data[self.i01], data[self.i11]);
        let top = a + self.fx * (b - a);
        let bot = c + self.fx * (d - c);
        top + self.fy * (bot - top)
    }

    /// Sampled value and its partial derivatives with respect to the
    /// requested `(x, y)` location.
    #[inline]
    pub fn value_and_grad(&self, data: &[F]) -> (F, F, F) {
        let (a, b, c, d) = (data[self.i00], data[self.i10], data[self.i01], data[self.i11]);
        let top = a + self.fx * (b - a);
        let bot = c + self.fx * (d - c);
        let val = top + self.fy * (bot - top);
        let dfx = (b - a) + self.fy * ((d - c) - (b - a));
        let dfy = bot - top;
        (val, dfx * self.sx, dfy * self.sy)
    }

    /// Distributes `g` onto the four corners with the bilinear weights.
    #[inline]
    pub fn scatter(&self, g: F, out: &mut [F]) {
        let one = F::one();
        let (fx, fy) = (self.fx, self.fy);
        out[self.i00] += g * (one - fx) * (one - fy);
        out[self.i10] += g * fx * (one - fy);
        out[self.i01] += g * (one - fx) * fy;
        out[self.i11] += g * fx * fy;
    }
}

/// Bilinear sample of a row-major `height x width` buffer at `(x, y)`.
pub fn sample_bilinear<F: Real>(data: &[F], height: usize, width: usize, x: F, y: F, bc: BoundaryMode) -> F {
    Tap::locate(height, width, x, y, bc).value(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_freezes_outside_range() {
        let data = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(sample_bilinear(&data, 2, 2, -5.0, 0.0, BoundaryMode::Clamp), 0.0);
        assert_eq!(sample_bilinear(&data, 2, 2, 9.0, 9.0, BoundaryMode::Clamp), 3.0);
        let t = Tap::locate(2, 2, -1.0, 0.5, BoundaryMode::Clamp);
        assert_eq!(t.sx, 0.0);
        assert_eq!(t.sy, 1.0);
    }

    #[test]
    fn periodic_wraps() {
        let data = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(sample_bilinear(&data, 3, 3, -1.0, 0.0, BoundaryMode::Periodic), 2.0);
        assert_eq!(sample_bilinear(&data, 3, 3, 3.0, 4.0, BoundaryMode::Periodic), 3.0);
        // halfway between the last column and the wrapped first column
        assert_eq!(sample_bilinear(&data, 3, 3, 2.5, 0.0, BoundaryMode::Periodic), 1.0);
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let data: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
        for bc in [BoundaryMode::Clamp, BoundaryMode::Periodic] {
            let (x, y) = (1.37, 2.81);
            let (_, gx, gy) = Tap::locate(5, 5, x, y, bc).value_and_grad(&data);
            let h = 1e-6;
            let fx = (sample_bilinear(&data, 5, 5, x + h, y, bc) - sample_bilinear(&data, 5, 5, x - h, y, bc)) / (2.0 * h);
            let fy = (sample_bilinear(&data, 5, 5, x, y + h, bc) - sample_bilinear(&data, 5, 5, x, y - h, bc)) / (2.0 * h);
            assert!((gx - fx).abs() < 1e-8);
            assert!((gy - fy).abs() < 1e-8);
        }
    }
}
