//! Dense rank-4 tensor `(B, C, H, W)` with explicit per-operation backward
//! functions.
//!
//! There is no autodiff tape: every operation comes as a `forward` /
//! `*_backward` pair, and layers cache whatever activations their backward
//! needs. Backward functions are pure — they return gradient tensors — and
//! [`Tensor4::accumulate_grad`] folds them into a tensor's optional gradient
//! buffer when callers want stateful accumulation.

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Shape of a rank-4 tensor in `(B, C, H, W)` order.
pub type Dims4 = [usize; 4];

/// Dense row-major `(B, C, H, W)` tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T: Real> {
    dims: Dims4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: Dims4) -> Self {
        let len = dims.iter().product();
        Tensor4 {
            dims,
            data: vec![T::zero(); len],
            grad: None,
        }
    }

    pub fn full(dims: Dims4, value: T) -> Self {
        let len = dims.iter().product();
        Tensor4 {
            dims,
            data: vec![value; len],
            grad: None,
        }
    }

    pub fn from_vec(dims: Dims4, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(CoreError::shape(
                "from_vec",
                format!(
                    "data length {} does not match dims {:?} (expected {})",
                    data.len(),
                    dims,
                    expected
                ),
            ));
        }
        Ok(Tensor4 {
            dims,
            data,
            grad: None,
        })
    }

    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut out = Tensor4::zeros(dims);
        let [b_n, c_n, h_n, w_n] = dims;
        let mut i = 0;
        for b in 0..b_n {
            for c in 0..c_n {
                for h in 0..h_n {
                    for w in 0..w_n {
                        out.data[i] = f(b, c, h, w);
                        i += 1;
                    }
                }
            }
        }
        out
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.index(b, c, h, w);
        &mut self.data[i]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Max over `|a - b|` of two same-shape tensors.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff requires equal dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with the given stage name if any stored value is non-finite.
    pub fn check_finite(&self, stage: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CoreError::numerical(
                stage,
                "tensor contains non-finite values",
                None,
            ))
        }
    }

    // --- gradient buffer ---

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn ensure_grad(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().expect("grad just ensured")
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn take_grad(&mut self) -> Option<Tensor4<T>> {
        self.grad.take().map(|g| Tensor4 {
            dims: self.dims,
            data: g,
            grad: None,
        })
    }

    /// Adds `delta` (same shape as `self`) into this tensor's grad buffer.
    pub fn accumulate_grad(&mut self, delta: &Tensor4<T>) {
        assert_eq!(
            self.dims, delta.dims,
            "gradient dims must match tensor dims"
        );
        let g = self.ensure_grad();
        for (dst, src) in g.iter_mut().zip(delta.data.iter()) {
            *dst += *src;
        }
    }
}

/// How operand `b` lines up against operand `a` in a binary op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical dims.
    Same,
    /// `b` has dims `(1, C, 1, 1)`: one value per channel.
    PerChannel,
    /// `b` has dims `(B, 1, H, W)`: one value per spatial position.
    PerPosition,
}

pub(crate) fn classify_broadcast(op: &'static str, a: Dims4, b: Dims4) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b == [1, a[1], 1, 1] {
        Ok(Broadcast::PerChannel)
    } else if b == [a[0], 1, a[2], a[3]] {
        Ok(Broadcast::PerPosition)
    } else {
        Err(CoreError::shape(
            op,
            format!("operands {a:?} and {b:?} are not broadcast-compatible"),
        ))
    }
}

#[inline]
fn broadcast_index(kind: Broadcast, dims: Dims4, b: usize, c: usize, h: usize, w: usize) -> usize {
    match kind {
        Broadcast::Same => ((b * dims[1] + c) * dims[2] + h) * dims[3] + w,
        Broadcast::PerChannel => c,
        Broadcast::PerPosition => (b * dims[2] + h) * dims[3] + w,
    }
}

fn binary<T: Real>(
    op: &'static str,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor4<T>> {
    let kind = classify_broadcast(op, a.dims, b.dims)?;
    let [bn, cn, hn, wn] = a.dims;
    let mut out = Tensor4::zeros(a.dims);
    let mut i = 0;
    for bb in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let j = broadcast_index(kind, a.dims, bb, c, h, w);
                    out.data[i] = f(a.data[i], b.data[j]);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Reduces a full-shape gradient onto operand dims (sums over broadcast axes).
fn reduce_to_operand<T: Real>(grad: &Tensor4<T>, operand_dims: Dims4) -> Tensor4<T> {
    let kind = classify_broadcast("reduce_to_operand", grad.dims, operand_dims)
        .expect("grad was produced against validated operands");
    if kind == Broadcast::Same {
        return grad.clone();
    }
    let [bn, cn, hn, wn] = grad.dims;
    let mut out = Tensor4::zeros(operand_dims);
    let mut i = 0;
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let j = broadcast_index(kind, grad.dims, b, c, h, w);
                    out.data[j] += grad.data[i];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    binary("add", a, b, |x, y| x + y)
}

/// Gradients of `add` w.r.t. both operands.
pub fn add_backward<T: Real>(
    grad_out: &Tensor4<T>,
    a_dims: Dims4,
    b_dims: Dims4,
) -> (Tensor4<T>, Tensor4<T>) {
    debug_assert_eq!(grad_out.dims, a_dims);
    (grad_out.clone(), reduce_to_operand(grad_out, b_dims))
}

pub fn sub<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn sub_backward<T: Real>(
    grad_out: &Tensor4<T>,
    a_dims: Dims4,
    b_dims: Dims4,
) -> (Tensor4<T>, Tensor4<T>) {
    debug_assert_eq!(grad_out.dims, a_dims);
    let neg = grad_out.map(|v| -v);
    (grad_out.clone(), reduce_to_operand(&neg, b_dims))
}

pub fn mul<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn mul_backward<T: Real>(
    grad_out: &Tensor4<T>,
    a: &Tensor4<T>,
    b: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let kind = classify_broadcast("mul_backward", a.dims, b.dims)
        .expect("mul_backward called with the forward operands");
    let [bn, cn, hn, wn] = a.dims;
    let mut ga = Tensor4::zeros(a.dims);
    let mut gb = Tensor4::zeros(b.dims);
    let mut i = 0;
    for bb in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let j = broadcast_index(kind, a.dims, bb, c, h, w);
                    ga.data[i] = grad_out.data[i] * b.data[j];
                    gb.data[j] += grad_out.data[i] * a.data[i];
                    i += 1;
                }
            }
        }
    }
    (ga, gb)
}

pub fn scale<T: Real>(x: &Tensor4<T>, s: T) -> Tensor4<T> {
    x.map(|v| v * s)
}

pub fn scale_backward<T: Real>(grad_out: &Tensor4<T>, s: T) -> Tensor4<T> {
    grad_out.map(|v| v * s)
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    // Split on sign to avoid overflow in exp for large |v|.
    if v >= T::zero() {
        let e = (-v).exp();
        T::one() / (T::one() + e)
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Backward of sigmoid given the forward *output* `y`.
pub fn sigmoid_backward<T: Real>(grad_out: &Tensor4<T>, y: &Tensor4<T>) -> Tensor4<T> {
    debug_assert_eq!(grad_out.dims(), y.dims());
    let mut gx = Tensor4::zeros(y.dims());
    for i in 0..y.len() {
        let s = y.data[i];
        gx.data[i] = grad_out.data[i] * s * (T::one() - s);
    }
    gx
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Backward of relu given the forward *input* `x` (subgradient 0 at 0).
pub fn relu_backward<T: Real>(grad_out: &Tensor4<T>, x: &Tensor4<T>) -> Tensor4<T> {
    debug_assert_eq!(grad_out.dims(), x.dims());
    let mut gx = Tensor4::zeros(x.dims());
    for i in 0..x.len() {
        gx.data[i] = if x.data[i] > T::zero() {
            grad_out.data[i]
        } else {
            T::zero()
        };
    }
    gx
}

/// Axes of a rank-4 tensor selected for reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axes {
    pub b: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    pub const NONE: Axes = Axes {
        b: false,
        c: false,
        h: false,
        w: false,
    };
    pub const ALL: Axes = Axes {
        b: true,
        c: true,
        h: true,
        w: true,
    };
    /// Reduce over H and W.
    pub const SPATIAL: Axes = Axes {
        b: false,
        c: false,
        h: true,
        w: true,
    };
    /// Reduce over C.
    pub const CHANNEL: Axes = Axes {
        b: false,
        c: true,
        h: false,
        w: false,
    };

    pub fn any(self) -> bool {
        self.b || self.c || self.h || self.w
    }

    fn out_dims(self, dims: Dims4) -> Dims4 {
        [
            if self.b { 1 } else { dims[0] },
            if self.c { 1 } else { dims[1] },
            if self.h { 1 } else { dims[2] },
            if self.w { 1 } else { dims[3] },
        ]
    }

    fn reduced_extent(self, dims: Dims4) -> usize {
        let mut n = 1;
        if self.b {
            n *= dims[0];
        }
        if self.c {
            n *= dims[1];
        }
        if self.h {
            n *= dims[2];
        }
        if self.w {
            n *= dims[3];
        }
        n
    }
}

fn reduce_check<T: Real>(op: &'static str, x: &Tensor4<T>, axes: Axes) -> Result<Dims4> {
    if !axes.any() {
        return Err(CoreError::shape(op, "reduction axes must be non-empty"));
    }
    if axes.reduced_extent(x.dims) == 0 {
        return Err(CoreError::shape(
            op,
            format!("empty reduction extent for dims {:?}", x.dims),
        ));
    }
    Ok(axes.out_dims(x.dims))
}

#[inline]
fn reduce_target(axes: Axes, out: &Dims4, b: usize, c: usize, h: usize, w: usize) -> usize {
    let bb = if axes.b { 0 } else { b };
    let cc = if axes.c { 0 } else { c };
    let hh = if axes.h { 0 } else { h };
    let ww = if axes.w { 0 } else { w };
    ((bb * out[1] + cc) * out[2] + hh) * out[3] + ww
}

/// Mean over the selected axes; reduced axes keep extent 1.
pub fn reduce_mean<T: Real>(x: &Tensor4<T>, axes: Axes) -> Result<Tensor4<T>> {
    let out_dims = reduce_check("reduce_mean", x, axes)?;
    let n = T::from_f64(axes.reduced_extent(x.dims) as f64);
    let mut out = Tensor4::zeros(out_dims);
    let [bn, cn, hn, wn] = x.dims;
    let mut i = 0;
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let j = reduce_target(axes, &out_dims, b, c, h, w);
                    out.data[j] += x.data[i];
                    i += 1;
                }
            }
        }
    }
    for v in out.data.iter_mut() {
        *v /= n;
    }
    Ok(out)
}

/// Backward of `reduce_mean`: spreads the gradient uniformly.
pub fn reduce_mean_backward<T: Real>(
    grad_out: &Tensor4<T>,
    in_dims: Dims4,
    axes: Axes,
) -> Tensor4<T> {
    let out_dims = axes.out_dims(in_dims);
    debug_assert_eq!(grad_out.dims, out_dims);
    let inv_n = T::one() / T::from_f64(axes.reduced_extent(in_dims) as f64);
    let mut gx = Tensor4::zeros(in_dims);
    let [bn, cn, hn, wn] = in_dims;
    let mut i = 0;
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let j = reduce_target(axes, &out_dims, b, c, h, w);
                    gx.data[i] = grad_out.data[j] * inv_n;
                    i += 1;
                }
            }
        }
    }
    gx
}

/// Max over the selected axes; reduced axes keep extent 1.
pub fn reduce_max<T: Real>(x: &Tensor4<T>, axes: Axes) -> Result<Tensor4<T>> {
    let out_dims = reduce_check("reduce_max", x, axes)?;
    let mut out = Tensor4::full(out_dims, T::from_f64(f64::NEG_INFINITY));
    let [bn, cn, hn, wn] = x.dims;
    let mut i = 0;
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let j = reduce_target(axes, &out_dims, b, c, h, w);
                    if x.data[i] > out.data[j] {
                        out.data[j] = x.data[i];
                    }
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `reduce_max`: routes the gradient to the first-occurring argmax.
pub fn reduce_max_backward<T: Real>(
    grad_out: &Tensor4<T>,
    x: &Tensor4<T>,
    axes: Axes,
) -> Tensor4<T> {
    let out_dims = axes.out_dims(x.dims);
    debug_assert_eq!(grad_out.dims, out_dims);
    let out_len: usize = out_dims.iter().product();
    // First pass: argmax per output slot in canonical scan order (first wins).
    let mut best_val = vec![T::from_f64(f64::NEG_INFINITY); out_len];
    let mut best_idx = vec![usize::MAX; out_len];
    let [bn, cn, hn, wn] = x.dims;
    let mut i = 0;
    for b in 0..bn {
        for c in 0..cn {
            for h in 0..hn {
                for w in 0..wn {
                    let j = reduce_target(axes, &out_dims, b, c, h, w);
                    if x.data[i] > best_val[j] {
                        best_val[j] = x.data[i];
                        best_idx[j] = i;
                    }
                    i += 1;
                }
            }
        }
    }
    let mut gx = Tensor4::zeros(x.dims);
    for (j, &i) in best_idx.iter().enumerate() {
        if i != usize::MAX {
            gx.data[i] += grad_out.data[j];
        }
    }
    gx
}
