//! Deformation-field mathematics on regular 2D pixel grids.
//!
//! Coordinates are `(x, y)` with `x` the column and `y` the row; storage is
//! row-major (`index = y * width + x`). A deformation is stored as its
//! displacement `u`, so `phi(p) = p + u(p)` and the zero field is the
//! identity.

mod grad;
mod jacobian;
mod sample;

pub use grad::{
    compose_backward, exp_map_backward, smoothness_energy_grad, warp_image_backward, ExpMapTape,
};
pub use jacobian::{jacobian_determinant, neg_jacobian_fraction, JacobianMap};
pub use sample::{sample_bilinear, Tap};

use crate::error::{Error, Result};
use crate::real::Real;

/// How sampling treats coordinates outside `[0, n - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum BoundaryMode {
    /// Coordinates are clipped to the valid sampling range.
    #[default]
    Clamp,
    /// Coordinates wrap around (torus domain).
    Periodic,
}

impl BoundaryMode {
    pub fn name(self) -> &'static str {
        match self {
            BoundaryMode::Clamp => "clamp",
            BoundaryMode::Periodic => "periodic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clamp" => Some(BoundaryMode::Clamp),
            "periodic" => Some(BoundaryMode::Periodic),
            _ => None,
        }
    }
}

fn check_grid(height: usize, width: usize, what: &str) -> Result<()> {
    if height < 2 || width < 2 {
        return Err(Error::contract(format!(
            "{what} must be at least 2x2, got {height}x{width}"
        )));
    }
    Ok(())
}

fn check_len<F>(data: &[F], height: usize, width: usize, what: &str) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::contract(format!(
            "{what} has {} values, expected {height}x{width} = {}",
            data.len(),
            height * width
        )));
    }
    Ok(())
}

fn check_finite<F: Real>(data: &[F], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} value at index {i}")));
    }
    Ok(())
}

/// Single-channel scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage<F> {
    height: usize,
    width: usize,
    data: Vec<F>,
}

impl<F: Real> GridImage<F> {
    pub fn new(height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        check_grid(height, width, "image")?;
        check_len(&data, height, width, "image")?;
        check_finite(&data, "image")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<F>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: F) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, F::zero())
    }

    /// Builds an image from `f(x, y)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> F) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> F {
        self.data[y * self.width + x]
    }

    pub fn cast<G: Real>(&self) -> GridImage<G> {
        GridImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

macro_rules! vector_field {
    ($(#[$meta:meta])* $name:ident, $a:ident, $b:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<F> {
            height: usize,
            width: usize,
            $a: Vec<F>,
            $b: Vec<F>,
        }

        impl<F: Real> $name<F> {
            pub fn new(height: usize, width: usize, $a: Vec<F>, $b: Vec<F>) -> Result<Self> {
                check_grid(height, width, $what)?;
                check_len(&$a, height, width, concat!($what, " x-component"))?;
                check_len(&$b, height, width, concat!($what, " y-component"))?;
                check_finite(&$a, $what)?;
                check_finite(&$b, $what)?;
                Ok(Self { height, width, $a, $b })
            }

            pub(crate) fn from_raw(height: usize, width: usize, $a: Vec<F>, $b: Vec<F>) -> Self {
                debug_assert_eq!($a.len(), height * width);
                debug_assert_eq!($b.len(), height * width);
                Self { height, width, $a, $b }
            }

            pub fn zeros(height: usize, width: usize) -> Result<Self> {
                Self::new(height, width, vec![F::zero(); height * width], vec![F::zero(); height * width])
            }

            pub fn uniform(height: usize, width: usize, cx: F, cy: F) -> Result<Self> {
                Self::new(height, width, vec![cx; height * width], vec![cy; height * width])
            }

            /// Builds a field from `f(x, y) -> (x-component, y-component)`.
            pub fn from_fn(
                height: usize,
                width: usize,
                mut f: impl FnMut(usize, usize) -> (F, F),
            ) -> Result<Self> {
                let mut a = Vec::with_capacity(height * width);
                let mut b = Vec::with_capacity(height * width);
                for y in 0..height {
                    for x in 0..width {
                        let (p, q) = f(x, y);
                        a.push(p);
                        b.push(q);
                    }
                }
                Self::new(height, width, a, b)
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            pub fn $a(&self) -> &[F] {
                &self.$a
            }

            pub fn $b(&self) -> &[F] {
                &self.$b
            }

            pub fn at(&self, x: usize, y: usize) -> (F, F) {
                let i = y * self.width + x;
                (self.$a[i], self.$b[i])
            }

            pub fn scaled(&self, k: F) -> Self {
                Self {
                    height: self.height,
                    width: self.width,
                    $a: self.$a.iter().map(|&v| v * k).collect(),
                    $b: self.$b.iter().map(|&v| v * k).collect(),
                }
            }

            /// Largest pointwise Euclidean difference between two fields.
            pub fn max_distance(&self, other: &Self) -> Result<F> {
                same_dims(self.dims(), other.dims(), $what)?;
                let mut worst = F::zero();
                for i in 0..self.$a.len() {
                    let dx = self.$a[i] - other.$a[i];
                    let dy = self.$b[i] - other.$b[i];
                    worst = worst.max((dx * dx + dy * dy).sqrt());
                }
                Ok(worst)
            }

            /// Largest pointwise vector magnitude.
            pub fn max_magnitude(&self) -> F {
                self.$a
                    .iter()
                    .zip(&self.$b)
                    .fold(F::zero(), |m, (&p, &q)| m.max((p * p + q * q).sqrt()))
            }

            pub fn cast<G: Real>(&self) -> $name<G> {
                $name {
                    height: self.height,
                    width: self.width,
                    $a: self.$a.iter().map(|v| G::of(v.as_f64())).collect(),
                    $b: self.$b.iter().map(|v| G::of(v.as_f64())).collect(),
                }
            }
        }
    };
}

vector_field!(
    /// Stationary velocity field in pixels per unit time.
    VelocityField, vx, vy, "velocity field"
);

vector_field!(
    /// Dense map `phi(p) = p + u(p)` stored as its displacement `u` in pixels.
    DeformationField, ux, uy, "deformation field"
);

impl<F: Real> DeformationField<F> {
    pub fn identity(height: usize, width: usize) -> Result<Self> {
        Self::zeros(height, width)
    }

    /// Largest displacement magnitude, i.e. distance from the identity map.
    pub fn max_deviation_from_identity(&self) -> F {
        self.max_magnitude()
    }
}

pub(crate) fn same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!(
            "{what}: dimension mismatch {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Resamples `img` at `p + u(p)` for every pixel `p`.
pub fn warp_image<F: Real>(
    img: &GridImage<F>,
    phi: &DeformationField<F>,
    bc: BoundaryMode,
) -> Result<GridImage<F>> {
    same_dims(img.dims(), phi.dims(), "warp_image")?;
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = F::of(x as f64) + phi.ux[i];
            let py = F::of(y as f64) + phi.uy[i];
            out.push(sample_bilinear(&img.data, h, w, px, py, bc));
        }
    }
    Ok(GridImage::from_raw(h, w, out))
}

/// `phi_a ∘ phi_b`: displacement `u_b(p) + u_a(p + u_b(p))`.
pub fn compose<F: Real>(
    phi_a: &DeformationField<F>,
    phi_b: &DeformationField<F>,
    bc: BoundaryMode,
) -> Result<DeformationField<F>> {
    same_dims(phi_a.dims(), phi_b.dims(), "compose")?;
    Ok(compose_raw(phi_a, phi_b, bc))
}

pub(crate) fn compose_raw<F: Real>(
    phi_a: &DeformationField<F>,
    phi_b: &DeformationField<F>,
    bc: BoundaryMode,
) -> DeformationField<F> {
    let (h, w) = phi_a.dims();
    let mut ux = Vec::with_capacity(h * w);
    let mut uy = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = F::of(x as f64) + phi_b.ux[i];
            let py = F::of(y as f64) + phi_b.uy[i];
            let tap = Tap::locate(h, w, px, py, bc);
            ux.push(phi_b.ux[i] + tap.value(&phi_a.ux));
            uy.push(phi_b.uy[i] + tap.value(&phi_a.uy));
        }
    }
    DeformationField::from_raw(h, w, ux, uy)
}

fn check_squarings(num_squarings: usize) -> Result<()> {
    if num_squarings == 0 {
        return Err(Error::config("num_squarings must be at least 1"));
    }
    if num_squarings > 30 {
        return Err(Error::config(format!(
            "num_squarings {num_squarings} is unreasonably large (max 30)"
        )));
    }
    Ok(())
}

/// Group exponential of a stationary velocity field by scaling and squaring:
/// `u <- v / 2^K`, then `u <- u ∘ u` repeated `K` times.
pub fn exp_map<F: Real>(
    v: &VelocityField<F>,
    num_squarings: usize,
    bc: BoundaryMode,
) -> Result<DeformationField<F>> {
    check_squarings(num_squarings)?;
    let scale = F::of((-(num_squarings as f64)).exp2());
    let (h, w) = v.dims();
    let mut u = DeformationField::from_raw(
        h,
        w,
        v.vx.iter().map(|&a| a * scale).collect(),
        v.vy.iter().map(|&a| a * scale).collect(),
    );
    for _ in 0..num_squarings {
        u = compose_raw(&u, &u, bc);
    }
    Ok(u)
}

/// Squared forward-difference gradient energy of `v`, summed over both
/// components and normalised by the pixel count.
pub fn smoothness_energy<F: Real>(v: &VelocityField<F>) -> F {
    let (h, w) = v.dims();
    let mut acc = F::zero();
    for comp in [&v.vx, &v.vy] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = comp[i + 1] - comp[i];
                    acc += d * d;
                }
                if y + 1 < h {
                    let d = comp[i + w] - comp[i];
                    acc += d * d;
                }
            }
        }
    }
    acc / F::of((h * w) as f64)
}
