//! Direct 2-D convolution with same padding.

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::Tensor4;

fn check_kernel<T: Real>(op: &'static str, x: &Tensor4<T>, kernel: &Tensor4<T>) -> Result<usize> {
    let [_, c_in, kh, kw] = kernel.dims();
    if c_in != x.channels() {
        return Err(CoreError::shape(
            op,
            format!(
                "kernel expects {} input channels, tensor has {}",
                c_in,
                x.channels()
            ),
        ));
    }
    if kh != kw {
        return Err(CoreError::shape(op, format!("kernel must be square, got {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(CoreError::shape(op, format!("kernel size {kh} must be odd")));
    }
    Ok(kh)
}

/// Convolution with same padding and stride 1. Kernel dims are
/// `(C_out, C_in, k, k)`; output spatial dims equal the input's.
pub fn conv2d<T: Real>(x: &Tensor4<T>, kernel: &Tensor4<T>) -> Result<Tensor4<T>> {
    conv2d_strided(x, kernel, 1)
}

/// Valid output-column range for a kernel column offset: `ow` such that
/// `ow*stride + dw - pad` lands inside `[0, w)`.
#[inline]
fn ow_range(w: usize, w_out: usize, stride: usize, dw: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(dw).div_ceil(stride);
    let hi = if w + pad > dw {
        (((w + pad - dw - 1) / stride) + 1).min(w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Convolution with padding `k/2` and the given stride.
/// Output spatial dims are `(H + 2*(k/2) - k)/stride + 1`.
pub fn conv2d_strided<T: Real>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
) -> Result<Tensor4<T>> {
    let k = check_kernel("conv2d", x, kernel)?;
    if stride == 0 {
        return Err(CoreError::shape("conv2d", "stride must be positive"));
    }
    let [bn, c_in, hn, wn] = x.dims();
    let c_out = kernel.dims()[0];
    let pad = k / 2;
    let h_out = (hn + 2 * pad - k) / stride + 1;
    let w_out = (wn + 2 * pad - k) / stride + 1;
    let mut out = Tensor4::zeros([bn, c_out, h_out, w_out]);

    for b in 0..bn {
        for co in 0..c_out {
            for ci in 0..c_in {
                for dh in 0..k {
                    for dw in 0..k {
                        let kv = kernel.at(co, ci, dh, dw);
                        if kv == T::zero() {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ow_range(wn, w_out, stride, dw, pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in 0..h_out {
                            let ih = (oh * stride + dh) as isize - pad as isize;
                            if ih < 0 || ih >= hn as isize {
                                continue;
                            }
                            let x_base = x.index(b, ci, ih as usize, 0);
                            let o_base = out.index(b, co, oh, 0);
                            let x_row = &x.data()[x_base..x_base + wn];
                            let o_row = &mut out.data_mut()[o_base..o_base + w_out];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * stride + dw - pad;
                                o_row[ow] += kv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_strided`] w.r.t. the input and the kernel.
pub fn conv2d_strided_backward<T: Real>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    stride: usize,
) -> (Tensor4<T>, Tensor4<T>) {
    let [bn, c_in, hn, wn] = x.dims();
    let [c_out, _, k, _] = kernel.dims();
    let [_, _, h_out, w_out] = grad_out.dims();
    let pad = k / 2;

    let mut gx = Tensor4::zeros(x.dims());
    let mut gk = Tensor4::zeros(kernel.dims());

    for b in 0..bn {
        for co in 0..c_out {
            for ci in 0..c_in {
                for dh in 0..k {
                    for dw in 0..k {
                        let kv = kernel.at(co, ci, dh, dw);
                        let mut k_acc = T::zero();
                        let (ow_lo, ow_hi) = ow_range(wn, w_out, stride, dw, pad);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in 0..h_out {
                            let ih = (oh * stride + dh) as isize - pad as isize;
                            if ih < 0 || ih >= hn as isize {
                                continue;
                            }
                            let g_base = grad_out.index(b, co, oh, 0);
                            let x_base = x.index(b, ci, ih as usize, 0);
                            let g_row = &grad_out.data()[g_base..g_base + w_out];
                            let gx_row = &mut gx.data_mut()[x_base..x_base + wn];
                            let x_row = &x.data()[x_base..x_base + wn];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * stride + dw - pad;
                                let g = g_row[ow];
                                gx_row[iw] += g * kv;
                                k_acc += g * x_row[iw];
                            }
                        }
                        *gk.at_mut(co, ci, dh, dw) += k_acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Gradients of [`conv2d`] (stride 1) w.r.t. the input and the kernel.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    conv2d_strided_backward(x, kernel, grad_out, 1)
}
