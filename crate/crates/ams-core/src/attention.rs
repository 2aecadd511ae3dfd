//! Channel and spatial attention blocks.
//!
//! Channel attention squeezes each sample to per-channel descriptors by
//! average- and max-pooling over space, pushes both through a shared
//! two-layer MLP and produces a sigmoid mask over channels. Spatial
//! attention pools over channels (mean and max), convolves the 2-channel
//! map down to one channel and produces a sigmoid mask over positions.
//! Both return `mask * input`; residual composition is the caller's job.

use crate::conv::{conv2d, conv2d_backward};
use crate::error::{CoreError, Result};
use crate::matrix::Mat;
use crate::real::Real;
use crate::tensor::{sigmoid_scalar, Tensor4};

/// Shared-MLP channel attention parameters.
#[derive(Debug, Clone)]
pub struct ChannelAttentionParams<T: Real> {
    /// `(C/r, C)` squeeze weights.
    pub w1: Mat<T>,
    /// `(C, C/r)` expand weights.
    pub w2: Mat<T>,
    pub reduction: usize,
}

impl<T: Real> ChannelAttentionParams<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(CoreError::config(format!(
                "channel attention reduction r={reduction} must divide C={channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelAttentionParams {
            w1: Mat::zeros(hidden, channels),
            w2: Mat::zeros(channels, hidden),
            reduction,
        })
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 || channels % self.reduction != 0 {
            return Err(CoreError::config(format!(
                "channel attention reduction r={} must divide C={channels}",
                self.reduction
            )));
        }
        let hidden = channels / self.reduction;
        if self.w1.rows != hidden
            || self.w1.cols != channels
            || self.w2.rows != channels
            || self.w2.cols != hidden
        {
            return Err(CoreError::shape(
                "channel_attention",
                format!(
                    "weight dims ({}x{}, {}x{}) inconsistent with C={channels}, r={}",
                    self.w1.rows, self.w1.cols, self.w2.rows, self.w2.cols, self.reduction
                ),
            ));
        }
        Ok(())
    }
}

/// Spatial attention parameters: a `(1, 2, k, k)` convolution kernel.
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams<T: Real> {
    pub kernel: Tensor4<T>,
}

impl<T: Real> SpatialAttentionParams<T> {
    pub fn zeros(kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(CoreError::config(format!(
                "spatial attention kernel size {kernel_size} must be odd"
            )));
        }
        Ok(SpatialAttentionParams {
            kernel: Tensor4::zeros([1, 2, kernel_size, kernel_size]),
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [co, ci, kh, kw] = self.kernel.dims();
        if co != 1 || ci != 2 || kh != kw || kh % 2 == 0 {
            return Err(CoreError::shape(
                "spatial_attention",
                format!("kernel dims must be (1, 2, k, k) with odd k, got ({co}, {ci}, {kh}, {kw})"),
            ));
        }
        Ok(())
    }
}

/// Cache for the channel attention backward pass.
#[derive(Debug, Clone)]
pub struct CaCache<T: Real> {
    input: Tensor4<T>,
    /// Per-branch pooled descriptors, `(B, C)` each.
    s_avg: Vec<T>,
    s_max: Vec<T>,
    /// Flat input index of each max-pool winner, per `(b, c)`.
    argmax: Vec<usize>,
    /// Pre-activation hidden layers, `(B, C/r)` each.
    a_avg: Vec<T>,
    a_max: Vec<T>,
    /// Sigmoid mask, `(B, C)`.
    mask: Vec<T>,
}

/// Gradients of channel attention.
#[derive(Debug, Clone)]
pub struct CaGrads<T: Real> {
    pub input: Tensor4<T>,
    pub w1: Mat<T>,
    pub w2: Mat<T>,
}

/// `mask(x) * x` with `mask = sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))`.
pub fn channel_attention<T: Real>(
    x: &Tensor4<T>,
    params: &ChannelAttentionParams<T>,
) -> Result<Tensor4<T>> {
    Ok(channel_attention_with_cache(x, params)?.0)
}

pub fn channel_attention_with_cache<T: Real>(
    x: &Tensor4<T>,
    params: &ChannelAttentionParams<T>,
) -> Result<(Tensor4<T>, CaCache<T>)> {
    let [bn, cn, hn, wn] = x.dims();
    params.validate(cn)?;
    let hidden = cn / params.reduction;
    let plane = hn * wn;
    if plane == 0 {
        return Err(CoreError::shape("channel_attention", "empty spatial extent"));
    }
    let inv_plane = T::one() / T::from_f64(plane as f64);

    let mut s_avg = vec![T::zero(); bn * cn];
    let mut s_max = vec![T::zero(); bn * cn];
    let mut argmax = vec![0usize; bn * cn];
    for b in 0..bn {
        for c in 0..cn {
            let base = x.index(b, c, 0, 0);
            let data = &x.data()[base..base + plane];
            let mut sum = T::zero();
            let mut best = data[0];
            let mut best_i = base;
            for (i, &v) in data.iter().enumerate() {
                sum += v;
                if v > best {
                    best = v;
                    best_i = base + i;
                }
            }
            s_avg[b * cn + c] = sum * inv_plane;
            s_max[b * cn + c] = best;
            argmax[b * cn + c] = best_i;
        }
    }

    // Shared MLP over both descriptors: z = W2 relu(W1 s).
    let mut a_avg = vec![T::zero(); bn * hidden];
    let mut a_max = vec![T::zero(); bn * hidden];
    let mut mask = vec![T::zero(); bn * cn];
    for b in 0..bn {
        let sa = &s_avg[b * cn..(b + 1) * cn];
        let sm = &s_max[b * cn..(b + 1) * cn];
        let aa = &mut a_avg[b * hidden..(b + 1) * hidden];
        let am = &mut a_max[b * hidden..(b + 1) * hidden];
        for j in 0..hidden {
            let row = params.w1.row(j);
            let mut acc_a = T::zero();
            let mut acc_m = T::zero();
            for c in 0..cn {
                acc_a += row[c] * sa[c];
                acc_m += row[c] * sm[c];
            }
            aa[j] = acc_a;
            am[j] = acc_m;
        }
        for c in 0..cn {
            let row = params.w2.row(c);
            let mut z = T::zero();
            for j in 0..hidden {
                z += row[j] * (aa[j].max(T::zero()) + am[j].max(T::zero()));
            }
            mask[b * cn + c] = sigmoid_scalar(z);
        }
    }

    let mut y = Tensor4::zeros(x.dims());
    for b in 0..bn {
        for c in 0..cn {
            let m = mask[b * cn + c];
            let base = x.index(b, c, 0, 0);
            for i in 0..plane {
                y.data_mut()[base + i] = x.data()[base + i] * m;
            }
        }
    }

    Ok((
        y,
        CaCache {
            input: x.clone(),
            s_avg,
            s_max,
            argmax,
            a_avg,
            a_max,
            mask,
        },
    ))
}

pub fn channel_attention_backward<T: Real>(
    params: &ChannelAttentionParams<T>,
    cache: &CaCache<T>,
    grad_out: &Tensor4<T>,
) -> CaGrads<T> {
    let x = &cache.input;
    let [bn, cn, hn, wn] = x.dims();
    let hidden = cn / params.reduction;
    let plane = hn * wn;
    let inv_plane = T::one() / T::from_f64(plane as f64);

    let mut d_input = Tensor4::zeros(x.dims());
    let mut d_w1 = Mat::zeros(hidden, cn);
    let mut d_w2 = Mat::zeros(cn, hidden);

    for b in 0..bn {
        let mask = &cache.mask[b * cn..(b + 1) * cn];
        // dmask and the direct input path.
        let mut d_mask = vec![T::zero(); cn];
        for c in 0..cn {
            let base = x.index(b, c, 0, 0);
            let mut acc = T::zero();
            for i in 0..plane {
                let g = grad_out.data()[base + i];
                acc += g * x.data()[base + i];
                d_input.data_mut()[base + i] += g * mask[c];
            }
            d_mask[c] = acc;
        }
        // dz through the sigmoid.
        let mut d_z = vec![T::zero(); cn];
        for c in 0..cn {
            d_z[c] = d_mask[c] * mask[c] * (T::one() - mask[c]);
        }
        // Shared MLP backward, once per pooled branch.
        let aa = &cache.a_avg[b * hidden..(b + 1) * hidden];
        let am = &cache.a_max[b * hidden..(b + 1) * hidden];
        let sa = &cache.s_avg[b * cn..(b + 1) * cn];
        let sm = &cache.s_max[b * cn..(b + 1) * cn];

        let mut d_h = vec![T::zero(); hidden];
        for c in 0..cn {
            let row = params.w2.row(c);
            for j in 0..hidden {
                d_h[j] += row[j] * d_z[c];
                *d_w2.at_mut(c, j) += d_z[c] * (aa[j].max(T::zero()) + am[j].max(T::zero()));
            }
        }
        let mut d_s_avg = vec![T::zero(); cn];
        let mut d_s_max = vec![T::zero(); cn];
        for j in 0..hidden {
            let da_avg = if aa[j] > T::zero() { d_h[j] } else { T::zero() };
            let da_max = if am[j] > T::zero() { d_h[j] } else { T::zero() };
            let row = params.w1.row(j);
            for c in 0..cn {
                *d_w1.at_mut(j, c) += da_avg * sa[c] + da_max * sm[c];
                d_s_avg[c] += row[c] * da_avg;
                d_s_max[c] += row[c] * da_max;
            }
        }
        // Pooling backward: avg spreads uniformly, max routes to the winner.
        for c in 0..cn {
            let base = x.index(b, c, 0, 0);
            let spread = d_s_avg[c] * inv_plane;
            for i in 0..plane {
                d_input.data_mut()[base + i] += spread;
            }
            d_input.data_mut()[cache.argmax[b * cn + c]] += d_s_max[c];
        }
    }

    CaGrads {
        input: d_input,
        w1: d_w1,
        w2: d_w2,
    }
}

/// Cache for the spatial attention backward pass.
#[derive(Debug, Clone)]
pub struct SaCache<T: Real> {
    input: Tensor4<T>,
    /// 2-channel pooled map `(B, 2, H, W)`: mean over C, max over C.
    pooled: Tensor4<T>,
    /// Winning channel per `(b, h, w)` for the max branch.
    argmax_c: Vec<usize>,
    /// Sigmoid mask `(B, 1, H, W)`.
    mask: Tensor4<T>,
}

/// Gradients of spatial attention.
#[derive(Debug, Clone)]
pub struct SaGrads<T: Real> {
    pub input: Tensor4<T>,
    pub kernel: Tensor4<T>,
}

/// `mask(x) * x` with `mask = sigmoid(conv([mean_C(x); max_C(x)]))`.
pub fn spatial_attention<T: Real>(
    x: &Tensor4<T>,
    params: &SpatialAttentionParams<T>,
) -> Result<Tensor4<T>> {
    Ok(spatial_attention_with_cache(x, params)?.0)
}

pub fn spatial_attention_with_cache<T: Real>(
    x: &Tensor4<T>,
    params: &SpatialAttentionParams<T>,
) -> Result<(Tensor4<T>, SaCache<T>)> {
    params.validate()?;
    let [bn, cn, hn, wn] = x.dims();
    if cn == 0 {
        return Err(CoreError::shape("spatial_attention", "empty channel extent"));
    }
    let inv_c = T::one() / T::from_f64(cn as f64);

    let mut pooled = Tensor4::zeros([bn, 2, hn, wn]);
    let mut argmax_c = vec![0usize; bn * hn * wn];
    for b in 0..bn {
        for h in 0..hn {
            for w in 0..wn {
                let mut sum = T::zero();
                let mut best = x.at(b, 0, h, w);
                let mut best_c = 0usize;
                for c in 0..cn {
                    let v = x.at(b, c, h, w);
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                *pooled.at_mut(b, 0, h, w) = sum * inv_c;
                *pooled.at_mut(b, 1, h, w) = best;
                argmax_c[(b * hn + h) * wn + w] = best_c;
            }
        }
    }

    let conv_out = conv2d(&pooled, &params.kernel)?;
    let mut mask = Tensor4::zeros([bn, 1, hn, wn]);
    for i in 0..conv_out.len() {
        mask.data_mut()[i] = sigmoid_scalar(conv_out.data()[i]);
    }

    let mut y = Tensor4::zeros(x.dims());
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    *y.at_mut(b, c, h, w) = x.at(b, c, h, w) * mask.at(b, 0, h, w);
                }
            }
        }
    }

    Ok((
        y,
        SaCache {
            input: x.clone(),
            pooled,
            argmax_c,
            mask,
        },
    ))
}

pub fn spatial_attention_backward<T: Real>(
    params: &SpatialAttentionParams<T>,
    cache: &SaCache<T>,
    grad_out: &Tensor4<T>,
) -> SaGrads<T> {
    let x = &cache.input;
    let [bn, cn, hn, wn] = x.dims();
    let inv_c = T::one() / T::from_f64(cn as f64);

    let mut d_input = Tensor4::zeros(x.dims());
    let mut d_conv = Tensor4::zeros([bn, 1, hn, wn]);
    for b in 0..bn {
        for h in 0..hn {
            for w in 0..wn {
                let m = cache.mask.at(b, 0, h, w);
                let mut d_mask = T::zero();
                for c in 0..cn {
                    let g = grad_out.at(b, c, h, w);
                    d_mask += g * x.at(b, c, h, w);
                    *d_input.at_mut(b, c, h, w) += g * m;
                }
                *d_conv.at_mut(b, 0, h, w) = d_mask * m * (T::one() - m);
            }
        }
    }

    let (d_pooled, d_kernel) = conv2d_backward(&cache.pooled, &params.kernel, &d_conv);

    for b in 0..bn {
        for h in 0..hn {
            for w in 0..wn {
                let spread = d_pooled.at(b, 0, h, w) * inv_c;
                for c in 0..cn {
                    *d_input.at_mut(b, c, h, w) += spread;
                }
                let win = cache.argmax_c[(b * hn + h) * wn + w];
                *d_input.at_mut(b, win, h, w) += d_pooled.at(b, 1, h, w);
            }
        }
    }

    SaGrads {
        input: d_input,
        kernel: d_kernel,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |b, c, h, w| {
            ((b * 31 + c * 17 + h * 5 + w) as f64 * 0.77).sin()
        })
    }

    #[test]
    fn zero_mlp_weights_halve_the_input() {
        let x = ramp([2, 4, 3, 3]);
        let p = ChannelAttentionParams::zeros(4, 2).unwrap();
        let y = channel_attention(&x, &p).unwrap();
        let half = x.map(|v| v * 0.5);
        assert!(y.max_abs_diff(&half) < 1e-14);
    }

    #[test]
    fn zero_kernel_halves_the_input() {
        let x = ramp([2, 4, 3, 3]);
        let p = SpatialAttentionParams::zeros(3).unwrap();
        let y = spatial_attention(&x, &p).unwrap();
        let half = x.map(|v| v * 0.5);
        assert!(y.max_abs_diff(&half) < 1e-14);
    }

    #[test]
    fn single_channel_closed_form() {
        // Constant plane so avg-pool and max-pool agree: mask = sigmoid(2 w2 w1 s).
        let s = 0.8;
        let x = Tensor4::full([1, 1, 2, 2], s);
        let mut p = ChannelAttentionParams::zeros(1, 1).unwrap();
        *p.w1.at_mut(0, 0) = 0.9;
        *p.w2.at_mut(0, 0) = 1.1;
        let y = channel_attention(&x, &p).unwrap();
        let expect = sigmoid_scalar(2.0 * 1.1 * 0.9 * s) * s;
        assert!((y.data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn masks_keep_outputs_inside_input_magnitude() {
        let x = ramp([2, 6, 4, 4]);
        let mut ca = ChannelAttentionParams::zeros(6, 2).unwrap();
        for (i, v) in ca.w1.data.iter_mut().enumerate() {
            *v = ((i as f64) * 0.37).sin() * 0.5;
        }
        for (i, v) in ca.w2.data.iter_mut().enumerate() {
            *v = ((i as f64) * 0.73).cos() * 0.5;
        }
        let mut sa = SpatialAttentionParams::zeros(3).unwrap();
        for (i, v) in sa.kernel.data_mut().iter_mut().enumerate() {
            *v = ((i as f64) * 1.1).sin() * 0.4;
        }
        for y in [
            channel_attention(&x, &ca).unwrap(),
            spatial_attention(&x, &sa).unwrap(),
        ] {
            for (o, i) in y.data().iter().zip(x.data()) {
                assert!(o.abs() <= i.abs() + 1e-15);
                if *i != 0.0 {
                    assert!(o.signum() == i.signum() || *o == 0.0);
                }
            }
        }
    }

    #[test]
    fn spatial_constant_input_matches_conv_oracle() {
        // Constant input c: pooled map is (c, c) everywhere; interior mask is
        // sigmoid(2c * sum(kernel)) for an averaging kernel.
        let c = 0.6;
        let x = Tensor4::full([1, 3, 5, 5], c);
        let mut p = SpatialAttentionParams::zeros(3).unwrap();
        for v in p.kernel.data_mut().iter_mut() {
            *v = 1.0 / 18.0;
        }
        let y = spatial_attention(&x, &p).unwrap();
        let ksum: f64 = p.kernel.data().iter().sum();
        let expect_interior = sigmoid_scalar(c * ksum) * c;
        assert!((y.at(0, 0, 2, 2) - expect_interior).abs() < 1e-12);
    }

    #[test]
    fn invalid_reduction_rejected() {
        assert!(ChannelAttentionParams::<f64>::zeros(6, 4).is_err());
        assert!(SpatialAttentionParams::<f64>::zeros(4).is_err());
    }
}
