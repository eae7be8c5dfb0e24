//! Dense building blocks with explicit backward passes.
//!
//! Feature maps are stored position-major: an `(h * w, c)` matrix whose row
//! `y * w + x` holds the channel vector at `(y, x)`. Convolutions lower to a
//! single matrix product through im2col.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, data: Array2::zeros((height * width, channels)) }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[[y * self.width + x, c]]
    }

    /// Square window of side `side` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, side: usize) -> FeatureMap {
        let c = self.channels();
        let mut out = Array2::zeros((side * side, c));
        for y in 0..side {
            for x in 0..side {
                out.row_mut(y * side + x)
                    .assign(&self.data.row((top + y) * self.width + left + x));
            }
        }
        FeatureMap { height: side, width: side, data: out }
    }

    /// Adjoint of [`FeatureMap::crop`]: scatter a window gradient into a zero map.
    pub fn uncrop(grad: &FeatureMap, top: usize, left: usize, height: usize, width: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(height, width, grad.channels());
        for y in 0..grad.height {
            for x in 0..grad.width {
                out.data
                    .row_mut((top + y) * width + left + x)
                    .assign(&grad.data.row(y * grad.width + x));
            }
        }
        out
    }
}

/// Affine map `x W + b` from `fan_in` to `fan_out`; the weight of a k x k
/// convolution is laid out `(ky, kx, cin)`-major along `fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    /// Gaussian weights with variance `gain / fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when asked.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grad: &mut Linear,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        want_input.then(|| dy.dot(&self.weight.t()))
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the forward activation was clipped.
pub fn relu_backward_inplace(activated: &Array2<f64>, grad: &mut Array2<f64>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Output side of a valid (unpadded) convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    (size >= kernel).then(|| (size - kernel) / stride + 1)
}

/// Lowers a valid convolution's receptive fields to rows of a matrix.
pub fn im2col(input: &FeatureMap, kernel: usize, stride: usize) -> Result<(Array2<f64>, usize, usize)> {
    let (oh, ow) = match (conv_out(input.height, kernel, stride), conv_out(input.width, kernel, stride)) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} input is smaller than a {kernel}x{kernel} kernel",
                input.height, input.width
            )))
        }
    };
    let c = input.channels();
    let src = input.data.as_slice().expect("standard layout");
    let run = kernel * c;
    let mut cols = vec![0.0; oh * ow * kernel * run];
    let row_len = kernel * run;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut cols[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..kernel {
                let start = ((oy * stride + ky) * input.width + ox * stride) * c;
                dst[ky * run..(ky + 1) * run].copy_from_slice(&src[start..start + run]);
            }
        }
    }
    let cols = Array2::from_shape_vec((oh * ow, row_len), cols).expect("im2col shape");
    Ok((cols, oh, ow))
}

/// Adjoint of [`im2col`].
pub fn col2im(
    dcols: &Array2<f64>,
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
) -> FeatureMap {
    let oh = conv_out(height, kernel, stride).unwrap_or(0);
    let ow = conv_out(width, kernel, stride).unwrap_or(0);
    let mut out = vec![0.0; height * width * channels];
    let run = kernel * channels;
    let row_len = kernel * run;
    let src = dcols.as_slice().expect("standard layout");
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &src[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..kernel {
                let start = ((oy * stride + ky) * width + ox * stride) * channels;
                for (d, s) in out[start..start + run].iter_mut().zip(&row[ky * run..(ky + 1) * run]) {
                    *d += s;
                }
            }
        }
    }
    FeatureMap {
        height,
        width,
        data: Array2::from_shape_vec((height * width, channels), out).expect("col2im shape"),
    }
}

/// Depthwise cross-correlation of a template map over a search map:
/// `out[u, v, c] = sum_{i, j} z[i, j, c] * x[u + i, v + j, c]`.
pub fn depthwise_xcorr(template: &FeatureMap, search: &FeatureMap) -> Result<FeatureMap> {
    let c = template.channels();
    if search.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "template has {c} channels, search has {}",
            search.channels()
        )));
    }
    if template.height > search.height || template.width > search.width {
        return Err(Error::ShapeMismatch(format!(
            "template {}x{} larger than search {}x{}",
            template.height, template.width, search.height, search.width
        )));
    }
    let oh = search.height - template.height + 1;
    let ow = search.width - template.width + 1;
    let z = template.data.as_slice().expect("standard layout");
    let x = search.data.as_slice().expect("standard layout");
    let mut out = vec![0.0; oh * ow * c];
    for u in 0..oh {
        for v in 0..ow {
            let acc = &mut out[(u * ow + v) * c..][..c];
            for i in 0..template.height {
                for j in 0..template.width {
                    let zr = &z[(i * template.width + j) * c..][..c];
                    let xr = &x[((u + i) * search.width + v + j) * c..][..c];
                    for ((a, zv), xv) in acc.iter_mut().zip(zr).zip(xr) {
                        *a += zv * xv;
                    }
                }
            }
        }
    }
    Ok(FeatureMap {
        height: oh,
        width: ow,
        data: Array2::from_shape_vec((oh * ow, c), out).expect("xcorr shape"),
    })
}

/// Gradients of [`depthwise_xcorr`] with respect to both inputs.
pub fn depthwise_xcorr_backward(
    template: &FeatureMap,
    search: &FeatureMap,
    dout: &FeatureMap,
) -> (FeatureMap, FeatureMap) {
    let c = template.channels();
    let z = template.data.as_slice().expect("standard layout");
    let x = search.data.as_slice().expect("standard layout");
    let g = dout.data.as_slice().expect("standard layout");
    let mut dz = vec![0.0; z.len()];
    let mut dx = vec![0.0; x.len()];
    for u in 0..dout.height {
        for v in 0..dout.width {
            let gr = &g[(u * dout.width + v) * c..][..c];
            for i in 0..template.height {
                for j in 0..template.width {
                    let zi = (i * template.width + j) * c;
                    let xi = ((u + i) * search.width + v + j) * c;
                    for ch in 0..c {
                        dz[zi + ch] += gr[ch] * x[xi + ch];
                        dx[xi + ch] += gr[ch] * z[zi + ch];
                    }
                }
            }
        }
    }
    let shape = |fm: &FeatureMap, d: Vec<f64>| FeatureMap {
        height: fm.height,
        width: fm.width,
        data: Array2::from_shape_vec((fm.height * fm.width, c), d).expect("xcorr grad shape"),
    };
    (shape(template, dz), shape(search, dx))
}
