use super::DeformationField;
use crate::error::{Error, Result};
use crate::real::Real;

/// Per-pixel Jacobian determinant of a deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMap {
    pub height: usize,
    pub width: usize,
    pub det: Vec<f64>,
}

impl JacobianMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.det[y * self.width + x]
    }

    pub fn negative_count(&self) -> usize {
        self.det.iter().filter(|&&d| d < 0.0).count()
    }

    pub fn negative_fraction(&self) -> f64 {
        self.negative_count() as f64 / self.det.len() as f64
    }
}

/// Derivative of `f` along one axis at index `i` of a line of length `n`
/// sampled with unit spacing: central inside, one-sided at the ends.
#[inline]
fn diff(f: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if i == 0 {
        f(1) - f(0)
    } else if i == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        0.5 * (f(i + 1) - f(i - 1))
    }
}

/// `det(d phi / d p)` with `phi(p) = p + u(p)`, evaluated in 64-bit.
pub fn jacobian_determinant<F: Real>(phi: &DeformationField<F>) -> Result<JacobianMap> {
    let (h, w) = phi.dims();
    if h < 3 || w < 3 {
        return Err(Error::contract(format!(
            "jacobian needs at least a 3x3 grid, got {h}x{w}"
        )));
    }
    let ux = phi.ux();
    let uy = phi.uy();
    let mut det = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let row = y * w;
            let dux_dx = diff(|k| ux[row + k].as_f64(), x, w);
            let duy_dx = diff(|k| uy[row + k].as_f64(), x, w);
            let dux_dy = diff(|k| ux[k * w + x].as_f64(), y, h);
            let duy_dy = diff(|k| uy[k * w + x].as_f64(), y, h);
            det.push((1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx);
        }
    }
    Ok(JacobianMap {
        height: h,
        width: w,
        det,
    })
}

/// Fraction of pixels whose Jacobian determinant is negative (folding).
pub fn neg_jacobian_fraction<F: Real>(phi: &DeformationField<F>) -> Result<f64> {
    Ok(jacobian_determinant(phi)?.negative_fraction())
}
