//! Reverse-mode adjoints of the field operations.
//!
//! Each `*_backward` takes the upstream gradient of a scalar with respect to
//! an operation's output and returns gradients with respect to its inputs.

use super::{compose_raw, same_dims, check_squarings, BoundaryMode, DeformationField, GridImage, Tap, VelocityField};
use crate::error::Result;
use crate::real::Real;

/// Gradients of `compose(phi_a, phi_b)`: `(d/du_a, d/du_b)`, each as
/// `(x-component, y-component)`.
pub type ComposeGrads<F> = ((Vec<F>, Vec<F>), (Vec<F>, Vec<F>));

pub fn compose_backward<F: Real>(
    phi_a: &DeformationField<F>,
    phi_b: &DeformationField<F>,
    bc: BoundaryMode,
    g_ux: &[F],
    g_uy: &[F],
) -> Result<ComposeGrads<F>> {
    same_dims(phi_a.dims(), phi_b.dims(), "compose_backward")?;
    let n = phi_a.ux().len();
    let mut ga = (vec![F::zero(); n], vec![F::zero(); n]);
    let mut gb = (vec![F::zero(); n], vec![F::zero(); n]);
    compose_backward_into(phi_a, phi_b, bc, g_ux, g_uy, &mut ga, &mut gb);
    Ok((ga, gb))
}

fn compose_backward_into<F: Real>(
    phi_a: &DeformationField<F>,
    phi_b: &DeformationField<F>,
    bc: BoundaryMode,
    g_ux: &[F],
    g_uy: &[F],
    ga: &mut (Vec<F>, Vec<F>),
    gb: &mut (Vec<F>, Vec<F>),
) {
    let (h, w) = phi_a.dims();
    let (ax, ay) = (phi_a.ux(), phi_a.uy());
    let (bx, by) = (phi_b.ux(), phi_b.uy());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (gx, gy) = (g_ux[i], g_uy[i]);
            if gx == F::zero() && gy == F::zero() {
                continue;
            }
            let px = F::of(x as f64) + bx[i];
            let py = F::of(y as f64) + by[i];
            let tap = Tap::locate(h, w, px, py, bc);
            let (_, dax_dx, dax_dy) = tap.value_and_grad(ax);
            let (_, day_dx, day_dy) = tap.value_and_grad(ay);
            gb.0[i] += gx + gx * dax_dx + gy * day_dx;
            gb.1[i] += gy + gx * dax_dy + gy * day_dy;
            tap.scatter(gx, &mut ga.0);
            tap.scatter(gy, &mut ga.1);
        }
    }
}

/// Intermediate displacements of one scaling-and-squaring evaluation.
#[derive(Debug, Clone)]
pub struct ExpMapTape<F> {
    /// `u_0 = v / 2^K` through `u_{K-1}`; the output is `u_K`.
    steps: Vec<DeformationField<F>>,
    bc: BoundaryMode,
}

impl<F: Real> ExpMapTape<F> {
    /// Runs the exponential map and keeps what the adjoint needs.
    pub fn forward(
        v: &VelocityField<F>,
        num_squarings: usize,
        bc: BoundaryMode,
    ) -> Result<(DeformationField<F>, Self)> {
        check_squarings(num_squarings)?;
        let scale = F::of((-(num_squarings as f64)).exp2());
        let (h, w) = v.dims();
        let mut u = DeformationField::from_raw(
            h,
            w,
            v.vx().iter().map(|&a| a * scale).collect(),
            v.vy().iter().map(|&a| a * scale).collect(),
        );
        let mut steps = Vec::with_capacity(num_squarings);
        for _ in 0..num_squarings {
            let next = compose_raw(&u, &u, bc);
            steps.push(std::mem::replace(&mut u, next));
        }
        Ok((u, ExpMapTape { steps, bc }))
    }

    pub fn num_squarings(&self) -> usize {
        self.steps.len()
    }
}

/// Gradient with respect to the velocity, given the gradient with respect
/// to the exponential map's output displacement.
pub fn exp_map_backward<F: Real>(tape: &ExpMapTape<F>, g_ux: &[F], g_uy: &[F]) -> (Vec<F>, Vec<F>) {
    let n = g_ux.len();
    let mut g = (g_ux.to_vec(), g_uy.to_vec());
    for u in tape.steps.iter().rev() {
        let mut ga = (vec![F::zero(); n], vec![F::zero(); n]);
        let mut gb = (vec![F::zero(); n], vec![F::zero(); n]);
        compose_backward_into(u, u, tape.bc, &g.0, &g.1, &mut ga, &mut gb);
        for i in 0..n {
            ga.0[i] += gb.0[i];
            ga.1[i] += gb.1[i];
        }
        g = ga;
    }
    let scale = F::of((-(tape.steps.len() as f64)).exp2());
    for v in g.0.iter_mut().chain(g.1.iter_mut()) {
        *v *= scale;
    }
    g
}

/// Gradients of `warp_image(img, phi)`: `(d/d img, d/d u_x, d/d u_y)`.
pub fn warp_image_backward<F: Real>(
    img: &GridImage<F>,
    phi: &DeformationField<F>,
    bc: BoundaryMode,
    g_out: &[F],
) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
    same_dims(img.dims(), phi.dims(), "warp_image_backward")?;
    let (h, w) = img.dims();
    let n = h * w;
    let mut g_img = vec![F::zero(); n];
    let mut g_ux = vec![F::zero(); n];
    let mut g_uy = vec![F::zero(); n];
    let data = img.data();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = g_out[i];
            if g == F::zero() {
                continue;
            }
            let px = F::of(x as f64) + phi.ux()[i];
            let py = F::of(y as f64) + phi.uy()[i];
            let tap = Tap::locate(h, w, px, py, bc);
            let (_, dx, dy) = tap.value_and_grad(data);
            g_ux[i] = g * dx;
            g_uy[i] = g * dy;
            tap.scatter(g, &mut g_img);
        }
    }
    Ok((g_img, g_ux, g_uy))
}

/// Gradient of [`super::smoothness_energy`] with respect to `(v_x, v_y)`.
pub fn smoothness_energy_grad<F: Real>(v: &VelocityField<F>) -> (Vec<F>, Vec<F>) {
    let (h, w) = v.dims();
    let k = F::of(2.0 / (h * w) as f64);
    let grad = |comp: &[F]| {
        let mut g = vec![F::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = k * (comp[i + 1] - comp[i]);
                    g[i + 1] += d;
                    g[i] -= d;
                }
                if y + 1 < h {
                    let d = k * (comp[i + w] - comp[i]);
                    g[i + w] += d;
                    g[i] -= d;
                }
            }
        }
        g
    };
    (grad(v.vx()), grad(v.vy()))
}

#[cfg(test)]
mod tests {
    use super::super::{compose, exp_map, smoothness_energy, warp_image};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-amp..amp)).collect()
    }

    fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        random_vec(rng, n, 1.0)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= 1e-6 * (1.0 + numeric.abs())
    }

    #[test]
    fn warp_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 7);
        for bc in [BoundaryMode::Clamp, BoundaryMode::Periodic] {
            let img = GridImage::new(h, w, random_vec(&mut rng, h * w, 1.0)).unwrap();
            let ux = random_vec(&mut rng, h * w, 1.3);
            let uy = random_vec(&mut rng, h * w, 1.3);
            let phi = DeformationField::new(h, w, ux.clone(), uy.clone()).unwrap();
            let c = weights(&mut rng, h * w);
            let loss = |img: &GridImage<f64>, phi: &DeformationField<f64>| {
                dot(warp_image(img, phi, bc).unwrap().data(), &c)
            };
            let (g_img, g_ux, _) = warp_image_backward(&img, &phi, bc, &c).unwrap();
            let eps = 1e-6;
            for i in [0, 5, 17, 41] {
                let mut up = ux.clone();
                up[i] += eps;
                let mut dn = ux.clone();
                dn[i] -= eps;
                let fd = (loss(&img, &DeformationField::new(h, w, up, uy.clone()).unwrap())
                    - loss(&img, &DeformationField::new(h, w, dn, uy.clone()).unwrap()))
                    / (2.0 * eps);
                assert!(close(g_ux[i], fd), "u_x[{i}] {bc:?}: {} vs {fd}", g_ux[i]);

                let mut d = img.data().to_vec();
                d[i] += eps;
                let plus = loss(&GridImage::new(h, w, d.clone()).unwrap(), &phi);
                d[i] -= 2.0 * eps;
                let minus = loss(&GridImage::new(h, w, d).unwrap(), &phi);
                assert!(close(g_img[i], (plus - minus) / (2.0 * eps)));
            }
        }
    }

    #[test]
    fn compose_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (5, 6);
        let n = h * w;
        for bc in [BoundaryMode::Clamp, BoundaryMode::Periodic] {
            let a = (random_vec(&mut rng, n, 0.9), random_vec(&mut rng, n, 0.9));
            let b = (random_vec(&mut rng, n, 0.9), random_vec(&mut rng, n, 0.9));
            let cx = weights(&mut rng, n);
            let cy = weights(&mut rng, n);
            let loss = |a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)| {
                let fa = DeformationField::new(h, w, a.0.clone(), a.1.clone()).unwrap();
                let fb = DeformationField::new(h, w, b.0.clone(), b.1.clone()).unwrap();
                let out = compose(&fa, &fb, bc).unwrap();
                dot(out.ux(), &cx) + dot(out.uy(), &cy)
            };
            let fa = DeformationField::new(h, w, a.0.clone(), a.1.clone()).unwrap();
            let fb = DeformationField::new(h, w, b.0.clone(), b.1.clone()).unwrap();
            let (ga, gb) = compose_backward(&fa, &fb, bc, &cx, &cy).unwrap();
            let eps = 1e-6;
            for i in [1, 8, 22] {
                let mut up = a.clone();
                up.1[i] += eps;
                let mut dn = a.clone();
                dn.1[i] -= eps;
                let fd = (loss(&up, &b) - loss(&dn, &b)) / (2.0 * eps);
                assert!(close(ga.1[i], fd));
                let mut up = b.clone();
                up.0[i] += eps;
                let mut dn = b.clone();
                dn.0[i] -= eps;
                let fd = (loss(&a, &up) - loss(&a, &dn)) / (2.0 * eps);
                assert!(close(gb.0[i], fd));
            }
        }
    }

    #[test]
    fn exp_map_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (8, 8);
        let n = h * w;
        for bc in [BoundaryMode::Clamp, BoundaryMode::Periodic] {
            let vx = random_vec(&mut rng, n, 1.5);
            let vy = random_vec(&mut rng, n, 1.5);
            let cx = weights(&mut rng, n);
            let cy = weights(&mut rng, n);
            let loss = |vx: &[f64], vy: &[f64]| {
                let v = VelocityField::new(h, w, vx.to_vec(), vy.to_vec()).unwrap();
                let phi = exp_map(&v, 4, bc).unwrap();
                dot(phi.ux(), &cx) + dot(phi.uy(), &cy)
            };
            let v = VelocityField::new(h, w, vx.clone(), vy.clone()).unwrap();
            let (phi, tape) = ExpMapTape::forward(&v, 4, bc).unwrap();
            assert_eq!(phi, exp_map(&v, 4, bc).unwrap());
            let (gx, gy) = exp_map_backward(&tape, &cx, &cy);
            let eps = 1e-6;
            for i in [0, 9, 30, 63] {
                let mut up = vx.clone();
                up[i] += eps;
                let mut dn = vx.clone();
                dn[i] -= eps;
                let fd = (loss(&up, &vy) - loss(&dn, &vy)) / (2.0 * eps);
                assert!(close(gx[i], fd), "vx[{i}] {bc:?}: {} vs {fd}", gx[i]);
                let mut up = vy.clone();
                up[i] += eps;
                let mut dn = vy.clone();
                dn[i] -= eps;
                let fd = (loss(&vx, &up) - loss(&vx, &dn)) / (2.0 * eps);
                assert!(close(gy[i], fd), "vy[{i}] {bc:?}: {} vs {fd}", gy[i]);
            }
        }
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (4, 5);
        let vx = random_vec(&mut rng, h * w, 2.0);
        let vy = random_vec(&mut rng, h * w, 2.0);
        let v = VelocityField::new(h, w, vx.clone(), vy.clone()).unwrap();
        let (gx, _) = smoothness_energy_grad(&v);
        let eps = 1e-6;
        for i in 0..h * w {
            let mut up = vx.clone();
            up[i] += eps;
            let mut dn = vx.clone();
            dn[i] -= eps;
            let fd = (smoothness_energy(&VelocityField::new(h, w, up, vy.clone()).unwrap())
                - smoothness_energy(&VelocityField::new(h, w, dn, vy.clone()).unwrap()))
                / (2.0 * eps);
            assert!(close(gx[i], fd));
        }
    }
}
