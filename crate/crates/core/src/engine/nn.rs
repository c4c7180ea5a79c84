//! Channels-last convolution, group normalization and activations with
//! explicit forward caches and backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A batch of feature maps stored as a `(n·h·w) × channels` matrix, rows
/// in image-major, then row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Array2<f32>,
}

impl Act {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Rows belonging to image `b`.
    pub fn image(&self, b: usize) -> ndarray::ArrayView2<'_, f32> {
        let p = self.pixels();
        self.data.slice(s![b * p..(b + 1) * p, ..])
    }
}

/// Trainable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
    pub velocity: Array2<f32>,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let dim = value.raw_dim();
        Self {
            value,
            grad: Array2::zeros(dim),
            velocity: Array2::zeros(dim),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// `v ← μ·v + g`, `w ← w − lr·v`.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32) {
        self.velocity
            .zip_mut_with(&self.grad, |v, &g| *v = momentum * *v + g);
        self.value.scaled_add(-lr, &self.velocity);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(kernel·kernel·in) × out`, rows ordered (ky, kx, in).
    pub weight: Param,
    /// `1 × out`.
    pub bias: Param,
}

pub struct ConvCache {
    cols: Array2<f32>,
    n: usize,
    h: usize,
    w: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel * in_channels) as f32;
        Self::with_std(
            in_channels,
            out_channels,
            kernel,
            stride,
            (2.0 / fan_in).sqrt(),
            rng,
        )
    }

    pub fn with_std<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let weight =
            Array2::from_shape_simple_fn((kernel * kernel * in_channels, out_channels), || {
                normal.sample(rng)
            });
        Self {
            kernel,
            stride,
            pad: kernel / 2,
            in_channels,
            out_channels,
            weight: Param::new(weight),
            bias: Param::new(Array2::zeros((1, out_channels))),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, x: &Act) -> Array2<f32> {
        let (ho, wo) = self.output_size(x.h, x.w);
        let (k, cin) = (self.kernel, self.in_channels);
        let width = k * k * cin;
        let mut cols = Array2::zeros((x.n * ho * wo, width));
        let src = x.data.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("standard layout");
        for b in 0..x.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * width;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let from = ((b * x.h + iy as usize) * x.w + ix as usize) * cin;
                            let to = row + (ky * k + kx) * cin;
                            dst[to..to + cin].copy_from_slice(&src[from..from + cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f32>, n: usize, h: usize, w: usize) -> Array2<f32> {
        let (ho, wo) = self.output_size(h, w);
        let (k, cin) = (self.kernel, self.in_channels);
        let width = k * k * cin;
        let mut dx = Array2::zeros((n * h * w, cin));
        let src = dcols.as_slice().expect("standard layout");
        let dst = dx.as_slice_mut().expect("standard layout");
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * width;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let to = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let from = row + (ky * k + kx) * cin;
                            for (d, s) in dst[to..to + cin].iter_mut().zip(&src[from..from + cin]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Act) -> (Act, ConvCache) {
        let cols = if self.pointwise() {
            x.data.clone()
        } else {
            self.im2col(x)
        };
        let (ho, wo) = self.output_size(x.h, x.w);
        let mut out = cols.dot(&self.weight.value);
        out += &self.bias.value;
        (
            Act {
                n: x.n,
                h: ho,
                w: wo,
                data: out,
            },
            ConvCache {
                cols,
                n: x.n,
                h: x.h,
                w: x.w,
            },
        )
    }

    /// Forward pass without keeping anything for backward.
    pub fn infer(&self, x: &Act) -> Act {
        let (ho, wo) = self.output_size(x.h, x.w);
        let mut out = if self.pointwise() {
            x.data.dot(&self.weight.value)
        } else {
            self.im2col(x).dot(&self.weight.value)
        };
        out += &self.bias.value;
        Act {
            n: x.n,
            h: ho,
            w: wo,
            data: out,
        }
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache,
        dy: &Array2<f32>,
        need_input: bool,
    ) -> Option<Array2<f32>> {
        general_mat_mul(1.0, &cache.cols.t(), dy, 1.0, &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        if !need_input {
            return None;
        }
        let dcols = dy.dot(&self.weight.value.t());
        Some(if self.pointwise() {
            dcols
        } else {
            self.col2im(&dcols, cache.n, cache.h, cache.w)
        })
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

/// Group normalization with a per-channel affine transform. Statistics are
/// taken per image over all pixels of the channels in a group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f32,
    pub gamma: Param,
    pub beta: Param,
}

pub struct NormCache {
    normalized: Array2<f32>,
    /// `1/σ` per (image, group).
    inv_std: Vec<f32>,
    n: usize,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "groups must divide channels"
        );
        Self {
            groups,
            eps: 1e-5,
            gamma: Param::new(Array2::ones((1, channels))),
            beta: Param::new(Array2::zeros((1, channels))),
        }
    }

    pub fn forward(&self, x: &Act) -> (Act, NormCache) {
        let c = x.channels();
        let cg = c / self.groups;
        let p = x.pixels();
        let mut normalized = x.data.clone();
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        for b in 0..x.n {
            for g in 0..self.groups {
                let mut block = normalized.slice_mut(s![b * p..(b + 1) * p, g * cg..(g + 1) * cg]);
                let count = (p * cg) as f32;
                let mean = block.sum() / count;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / count;
                let is = 1.0 / (var + self.eps).sqrt();
                block.mapv_inplace(|v| (v - mean) * is);
                inv_std.push(is);
            }
        }
        let mut out = &normalized * &self.gamma.value;
        out += &self.beta.value;
        (
            Act {
                n: x.n,
                h: x.h,
                w: x.w,
                data: out,
            },
            NormCache {
                normalized,
                inv_std,
                n: x.n,
            },
        )
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Array2<f32>) -> Array2<f32> {
        self.gamma.grad += &(dy * &cache.normalized)
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let c = dy.ncols();
        let cg = c / self.groups;
        let p = dy.nrows() / cache.n;
        let mut dx = dy * &self.gamma.value;
        for b in 0..cache.n {
            for g in 0..self.groups {
                let rows = b * p..(b + 1) * p;
                let cols = g * cg..(g + 1) * cg;
                let xhat = cache.normalized.slice(s![rows.clone(), cols.clone()]);
                let mut block = dx.slice_mut(s![rows, cols]);
                let count = (p * cg) as f32;
                let mean_d = block.sum() / count;
                let mean_dx = (&block * &xhat).sum() / count;
                let is = cache.inv_std[b * self.groups + g];
                ndarray::Zip::from(&mut block)
                    .and(&xhat)
                    .for_each(|d, &xh| *d = is * (*d - mean_d - xh * mean_dx));
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.gamma.zero_grad();
        self.beta.zero_grad();
    }
}

pub fn leaky_relu(x: &mut Array2<f32>, slope: f32) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
}

/// Multiplies `dy` by the activation slope, using the activation output
/// (sign is preserved by both rectifiers).
pub fn leaky_relu_backward(dy: &mut Array2<f32>, out: &Array2<f32>, slope: f32) {
    dy.zip_mut_with(out, |d, &o| {
        if o <= 0.0 {
            *d *= slope
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_act(n: usize, h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Act {
        Act {
            n,
            h,
            w,
            data: Array2::from_shape_simple_fn((n * h * w, c), || rng.random_range(-1.0..1.0)),
        }
    }

    /// Direct convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d, x: &Act) -> Array2<f32> {
        let (ho, wo) = conv.output_size(x.h, x.w);
        let mut out = Array2::zeros((x.n * ho * wo, conv.out_channels));
        for b in 0..x.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..conv.out_channels {
                        let mut acc = conv.bias.value[[0, co]];
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                for ci in 0..conv.in_channels {
                                    let v =
                                        x.data[[(b * x.h + iy as usize) * x.w + ix as usize, ci]];
                                    acc += v * conv.weight.value
                                        [[(ky * conv.kernel + kx) * conv.in_channels + ci, co]];
                                }
                            }
                        }
                        out[[(b * ho + oy) * wo + ox, co]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv2d::new(2, 3, k, s, &mut rng);
            conv.bias.value.mapv_inplace(|_| 0.3);
            let x = random_act(2, 5, 6, 2, &mut rng);
            let (y, _) = conv.forward(&x);
            let reference = naive_conv(&conv, &x);
            assert_eq!(y.data.dim(), reference.dim());
            for (a, b) in y.data.iter().zip(reference.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
            assert_eq!(conv.infer(&x), y);
        }
    }

    /// Loss = Σ y ⊙ r for a fixed random r; compares analytic and numeric
    /// input gradients.
    fn check_input_grad(
        forward: impl Fn(&Act) -> Array2<f32>,
        backward: impl Fn(&Act, &Array2<f32>) -> Array2<f32>,
        x: &Act,
        r: &Array2<f32>,
    ) {
        let analytic = backward(x, r);
        let h = 1e-2f32;
        for i in 0..x.data.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.data.as_slice_mut().unwrap()[i] += h;
            minus.data.as_slice_mut().unwrap()[i] -= h;
            let fp = (&forward(&plus) * r).sum();
            let fm = (&forward(&minus) * r).sum();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            assert!(
                (a - numeric).abs() < 2e-2 * (1.0 + a.abs()),
                "entry {i}: {a} vs {numeric}"
            );
        }
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, 2, &mut rng);
        let x = random_act(1, 5, 4, 2, &mut rng);
        let (y, _) = conv.forward(&x);
        let r = Array2::from_shape_simple_fn(y.data.raw_dim(), || rng.random_range(-1.0..1.0));
        check_input_grad(
            |x| conv.forward(x).0.data,
            |x, r| {
                let mut c = conv.clone();
                let (_, cache) = c.forward(x);
                c.backward(&cache, r, true).unwrap()
            },
            &x,
            &r,
        );
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 2, 3, 1, &mut rng);
        let x = random_act(2, 3, 3, 2, &mut rng);
        let (y, cache) = conv.forward(&x);
        let r = Array2::from_shape_simple_fn(y.data.raw_dim(), || rng.random_range(-1.0..1.0));
        conv.backward(&cache, &r, false);
        let h = 1e-2f32;
        for i in 0..conv.weight.value.len() {
            let mut p = conv.clone();
            let mut m = conv.clone();
            p.weight.value.as_slice_mut().unwrap()[i] += h;
            m.weight.value.as_slice_mut().unwrap()[i] -= h;
            let numeric = ((&p.forward(&x).0.data * &r).sum() - (&m.forward(&x).0.data * &r).sum())
                / (2.0 * h);
            let a = conv.weight.grad.as_slice().unwrap()[i];
            assert!((a - numeric).abs() < 1e-2 * (1.0 + a.abs()));
        }
        let db = r.sum_axis(Axis(0));
        for (a, b) in conv.bias.grad.iter().zip(db.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn group_norm_normalizes_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gn = GroupNorm::new(4, 2);
        gn.gamma.value.mapv_inplace(|_| 1.3);
        let x = random_act(2, 3, 3, 4, &mut rng);
        let (y, _) = GroupNorm::new(4, 1).forward(&x);
        let block = y.image(0);
        assert!(block.sum().abs() < 1e-4);
        let r = Array2::from_shape_simple_fn(x.data.raw_dim(), || rng.random_range(-1.0..1.0));
        check_input_grad(
            |x| gn.forward(x).0.data,
            |x, r| {
                let mut g = gn.clone();
                let (_, cache) = g.forward(x);
                g.backward(&cache, r)
            },
            &x,
            &r,
        );
    }

    #[test]
    fn sgd_with_momentum() {
        let mut p = Param::new(Array2::from_elem((1, 1), 1.0));
        p.grad.fill(2.0);
        p.sgd_step(0.1, 0.9);
        assert!((p.value[[0, 0]] - 0.8).abs() < 1e-7);
        p.sgd_step(0.1, 0.9);
        // v = 0.9·2 + 2 = 3.8
        assert!((p.value[[0, 0]] - 0.42).abs() < 1e-6);
    }
}
