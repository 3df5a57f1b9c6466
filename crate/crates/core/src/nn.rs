//! Minimal convolution toolkit: channel-major feature maps, 2D convolution
//! via im2col + GEMM, LeakyReLU, nearest upsampling, and their adjoints.

use crate::error::{Error, Result};
use crate::real::Real;

/// Feature map of shape `(channels, height, width)`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<F> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor3<F> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::contract(format!(
                "tensor data has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Self) -> Self {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor3 {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits off the first `first` channels.
    pub fn split(&self, first: usize) -> (Self, Self) {
        let at = first * self.plane();
        (
            Tensor3 {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..at].to_vec(),
            },
            Tensor3 {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[at..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: F) -> Self {
        Tensor3 {
            data: self.data.iter().map(|&v| v * k).collect(),
            ..*self
        }
    }
}

/// Geometry of one convolution layer. Padding is `kernel / 2` (same-size at
/// stride 1, halving at stride 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        ConvSpec {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            bias,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn bias_len(&self) -> usize {
        if self.bias {
            self.out_channels
        } else {
            0
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (height + 2 * p - self.kernel) / self.stride + 1,
            (width + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col<F: Real>(&self, x: &Tensor3<F>, out_h: usize, out_w: usize) -> Vec<F> {
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride;
        let plane = out_h * out_w;
        let mut cols = vec![F::zero(); x.channels * k * k * plane];
        for c in 0..x.channels {
            let src = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * plane;
                    for oy in 0..out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst = &mut cols[row + oy * out_w..row + (oy + 1) * out_w];
                        let (lo, hi) = valid_columns(out_w, s, kx, p, x.width);
                        if s == 1 {
                            let start = (lo + kx) as isize - p;
                            dst[lo..hi].copy_from_slice(&src_row[start as usize..start as usize + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src_row[((ox * s + kx) as isize - p) as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: Real>(&self, cols: &[F], channels: usize, height: usize, width: usize, out_h: usize, out_w: usize) -> Tensor3<F> {
        let k = self.kernel;
        let p = self.pad() as isize;
        let s = self.stride;
        let plane = out_h * out_w;
        let mut gx = Tensor3::zeros(channels, height, width);
        for c in 0..channels {
            let dst = &mut gx.data[c * height * width..(c + 1) * height * width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * plane;
                    for oy in 0..out_h {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let src = &cols[row + oy * out_w..row + (oy + 1) * out_w];
                        let dst_row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                        let (lo, hi) = valid_columns(out_w, s, kx, p, width);
                        for ox in lo..hi {
                            dst_row[((ox * s + kx) as isize - p) as usize] += src[ox];
                        }
                    }
                }
            }
        }
        gx
    }

    fn check_input<F>(&self, x: &Tensor3<F>) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::contract(format!(
                "conv {}: expected {} input channels, got {}",
                self.name, self.in_channels, x.channels
            )));
        }
        Ok(())
    }

    /// `params` holds the weights (`out x in x k x k`) followed by the bias.
    pub fn forward<F: Real>(&self, params: &[F], x: &Tensor3<F>) -> Result<Tensor3<F>> {
        self.check_input(x)?;
        debug_assert_eq!(params.len(), self.param_len());
        let (oh, ow) = self.output_size(x.height, x.width);
        let plane = oh * ow;
        let inner = self.in_channels * self.kernel * self.kernel;
        let (weight, bias) = params.split_at(self.weight_len());
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        if self.bias {
            for (o, &b) in bias.iter().enumerate() {
                out.data[o * plane..(o + 1) * plane].fill(b);
            }
        }
        let beta = if self.bias { F::one() } else { F::zero() };
        let owned;
        let cols: &[F] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        F::gemm(
            self.out_channels,
            inner,
            plane,
            F::one(),
            weight,
            (inner as isize, 1),
            cols,
            (plane as isize, 1),
            beta,
            &mut out.data,
            (plane as isize, 1),
        );
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to the input `x`.
    pub fn backward<F: Real>(
        &self,
        params: &[F],
        x: &Tensor3<F>,
        grad_out: &Tensor3<F>,
        grad_params: &mut [F],
    ) -> Tensor3<F> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let plane = oh * ow;
        let inner = self.in_channels * self.kernel * self.kernel;
        let weight = &params[..self.weight_len()];
        let (gw, gb) = grad_params.split_at_mut(self.weight_len());
        if self.bias {
            for (o, g) in gb.iter_mut().enumerate() {
                *g += grad_out.data[o * plane..(o + 1) * plane].iter().copied().sum::<F>();
            }
        }
        let owned;
        let cols: &[F] = if self.is_pointwise() {
            &x.data
        } else {
            owned = self.im2col(x, oh, ow);
            &owned
        };
        // dW += dY * cols^T
        F::gemm(
            self.out_channels,
            plane,
            inner,
            F::one(),
            &grad_out.data,
            (plane as isize, 1),
            cols,
            (1, plane as isize),
            F::one(),
            gw,
            (inner as isize, 1),
        );
        // dcols = W^T * dY
        let mut gcols = vec![F::zero(); inner * plane];
        F::gemm(
            inner,
            self.out_channels,
            plane,
            F::one(),
            weight,
            (1, inner as isize),
            &grad_out.data,
            (plane as isize, 1),
            F::zero(),
            &mut gcols,
            (plane as isize, 1),
        );
        if self.is_pointwise() {
            Tensor3 {
                channels: x.channels,
                height: x.height,
                width: x.width,
                data: gcols,
            }
        } else {
            self.col2im(&gcols, x.channels, x.height, x.width, oh, ow)
        }
    }
}

/// Output columns `ox` whose input column `ox * s + kx - p` lies in `0..width`.
fn valid_columns(out_w: usize, s: usize, kx: usize, p: isize, width: usize) -> (usize, usize) {
    let shift = kx as isize - p;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(s) };
    let last = width as isize - 1 - shift;
    let hi = if last < 0 { 0 } else { (last as usize / s + 1).min(out_w) };
    (lo.min(hi), hi)
}

pub fn leaky_relu<F: Real>(x: &mut Tensor3<F>, slope: F) {
    for v in &mut x.data {
        if *v < F::zero() {
            *v *= slope;
        }
    }
}

/// Adjoint of [`leaky_relu`] expressed through its output (sign-preserving
/// for positive slopes).
pub fn leaky_relu_backward<F: Real>(activated: &Tensor3<F>, grad: &mut Tensor3<F>, slope: F) {
    for (g, &y) in grad.data.iter_mut().zip(&activated.data) {
        if y < F::zero() {
            *g *= slope;
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Tensor3<F>) -> Tensor3<F> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor3::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(grad: &Tensor3<F>) -> Tensor3<F> {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = Tensor3::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad.height {
            for x in 0..grad.width {
                dst[(y / 2) * w + x / 2] += src[y * grad.width + x];
            }
        }
    }
    out
}
