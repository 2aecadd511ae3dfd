//! Instance normalization and per-sample group whitening.
//!
//! Instance normalization standardizes each `(sample, channel)` plane over
//! its spatial positions, which removes per-channel photometric style.
//! Group whitening partitions the channels of one sample into `g` groups,
//! centers each group, and multiplies by the inverse square root of the
//! `g x g` group covariance so the groups become decorrelated with unit
//! variance. Both come with explicit backward passes; the whitening backward
//! differentiates through the Newton–Schulz composition.

use crate::error::{CoreError, Result};
use crate::matrix::{
    eigen_inverse_sqrt, inverse_sqrt_residual, ns_inverse_sqrt, ns_inverse_sqrt_backward, Mat,
    MatrixBatch,
};
use crate::real::Real;
use crate::tensor::{Dims4, Tensor4};

/// Default epsilon added to the standard deviation in instance norm.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Default ridge added to the group covariance.
pub const DEFAULT_EPSILON_W: f64 = 1e-3;
/// Default Newton–Schulz iteration count.
pub const DEFAULT_NS_ITERATIONS: usize = 7;

/// Residual tolerance enforced by the eigendecomposition route.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-8;
/// Residual tolerance enforced by the Newton–Schulz route.
pub const NS_RESIDUAL_TOL: f64 = 5e-2;

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

/// Learnable affine parameters of instance normalization.
#[derive(Debug, Clone)]
pub struct InParams<T: Real> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub epsilon: T,
}

impl<T: Real> InParams<T> {
    /// Identity transform: `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Self {
        InParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            epsilon: T::from_f64(DEFAULT_EPSILON),
        }
    }

    pub fn with_epsilon(mut self, epsilon: T) -> Self {
        self.epsilon = epsilon;
        self
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.gamma.len() != channels || self.beta.len() != channels {
            return Err(CoreError::shape(
                "instance_norm",
                format!(
                    "gamma/beta lengths ({}, {}) must equal channel count {channels}",
                    self.gamma.len(),
                    self.beta.len()
                ),
            ));
        }
        if !(self.epsilon > T::zero()) {
            return Err(CoreError::config(format!(
                "instance norm epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-`(sample, channel)` mean and standard deviation, dims `(B, C)`.
#[derive(Debug, Clone)]
pub struct NormStats<T: Real> {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> NormStats<T> {
    #[inline]
    pub fn mean_at(&self, b: usize, c: usize) -> T {
        self.mean[b * self.channels + c]
    }

    #[inline]
    pub fn std_at(&self, b: usize, c: usize) -> T {
        self.std[b * self.channels + c]
    }
}

/// Activations cached by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct InCache<T: Real> {
    /// Normalized pre-affine values `(x - mean) / (std + eps)`.
    pub normalized: Tensor4<T>,
    pub stats: NormStats<T>,
}

/// Gradients of instance normalization.
#[derive(Debug, Clone)]
pub struct InGrads<T: Real> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// `y = gamma * (x - mean) / (std + eps) + beta` with the biased standard
/// deviation over each channel's spatial positions.
pub fn instance_norm<T: Real>(
    x: &Tensor4<T>,
    params: &InParams<T>,
) -> Result<(Tensor4<T>, NormStats<T>)> {
    let (y, cache) = instance_norm_with_cache(x, params)?;
    Ok((y, cache.stats))
}

/// Forward pass that also returns the cache needed by the backward pass.
pub fn instance_norm_with_cache<T: Real>(
    x: &Tensor4<T>,
    params: &InParams<T>,
) -> Result<(Tensor4<T>, InCache<T>)> {
    let [bn, cn, hn, wn] = x.dims();
    params.validate(cn)?;
    let plane = hn * wn;
    if plane == 0 {
        return Err(CoreError::shape(
            "instance_norm",
            "spatial extent H*W must be at least 1",
        ));
    }
    let inv_n = T::one() / T::from_f64(plane as f64);

    let mut mean = vec![T::zero(); bn * cn];
    let mut std = vec![T::zero(); bn * cn];
    let mut normalized = Tensor4::zeros(x.dims());
    let mut y = Tensor4::zeros(x.dims());

    for b in 0..bn {
        for c in 0..cn {
            let base = x.index(b, c, 0, 0);
            let plane_data = &x.data()[base..base + plane];
            let mut mu = T::zero();
            for &v in plane_data {
                mu += v;
            }
            mu *= inv_n;
            let mut var = T::zero();
            for &v in plane_data {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_n;
            let sigma = var.sqrt();
            mean[b * cn + c] = mu;
            std[b * cn + c] = sigma;

            let denom = sigma + params.epsilon;
            let gamma = params.gamma[c];
            let beta = params.beta[c];
            for (i, &v) in plane_data.iter().enumerate() {
                let u = (v - mu) / denom;
                normalized.data_mut()[base + i] = u;
                y.data_mut()[base + i] = gamma * u + beta;
            }
        }
    }

    Ok((
        y,
        InCache {
            normalized,
            stats: NormStats {
                batch: bn,
                channels: cn,
                mean,
                std,
            },
        },
    ))
}

/// Backward pass of instance normalization.
pub fn instance_norm_backward<T: Real>(
    params: &InParams<T>,
    cache: &InCache<T>,
    grad_out: &Tensor4<T>,
) -> InGrads<T> {
    let dims = cache.normalized.dims();
    let [bn, cn, hn, wn] = dims;
    debug_assert_eq!(grad_out.dims(), dims);
    let plane = hn * wn;
    let n = T::from_f64(plane as f64);

    let mut d_input = Tensor4::zeros(dims);
    let mut d_gamma = vec![T::zero(); cn];
    let mut d_beta = vec![T::zero(); cn];

    for b in 0..bn {
        for c in 0..cn {
            let base = cache.normalized.index(b, c, 0, 0);
            let u = &cache.normalized.data()[base..base + plane];
            let g = &grad_out.data()[base..base + plane];
            let sigma = cache.stats.std_at(b, c);
            let denom = sigma + params.epsilon;
            let gamma = params.gamma[c];

            let mut sum_g = T::zero();
            let mut sum_gu = T::zero();
            for i in 0..plane {
                sum_g += g[i];
                sum_gu += g[i] * u[i];
                d_gamma[c] += g[i] * u[i];
                d_beta[c] += g[i];
            }
            let mean_g = sum_g / n;
            // d x_j = gamma/denom * (g_j - mean(g)) - gamma * u_j * sum(g u) / (n * sigma)
            // The sigma path vanishes for a constant plane (u = 0 there).
            let sigma_term = if sigma > T::zero() {
                gamma / (n * sigma)
            } else {
                T::zero()
            };
            for i in 0..plane {
                d_input.data_mut()[base + i] =
                    gamma / denom * (g[i] - mean_g) - sigma_term * u[i] * sum_gu;
            }
        }
    }

    InGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    }
}

// ---------------------------------------------------------------------------
// Group partition / merge
// ---------------------------------------------------------------------------

/// Row-major `(B, g, c*H*W)` view of a tensor's channel groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupView<T: Real> {
    pub batch: usize,
    pub groups: usize,
    /// Columns per group row: `c * H * W`.
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> GroupView<T> {
    pub fn row(&self, b: usize, j: usize) -> &[T] {
        let start = (b * self.groups + j) * self.cols;
        &self.data[start..start + self.cols]
    }

    pub fn row_mut(&mut self, b: usize, j: usize) -> &mut [T] {
        let start = (b * self.groups + j) * self.cols;
        &mut self.data[start..start + self.cols]
    }
}

fn check_group_count(channels: usize, g: usize) -> Result<usize> {
    if g == 0 || channels % g != 0 {
        return Err(CoreError::config(format!(
            "group count g={g} must divide the channel count C={channels}"
        )));
    }
    Ok(channels / g)
}

/// Reshapes `(B, C, H, W)` into the group view `(B, g, c*H*W)`.
/// Pure re-indexing: with row-major layout the copy is contiguous.
pub fn group_partition<T: Real>(x: &Tensor4<T>, g: usize) -> Result<GroupView<T>> {
    let [bn, cn, hn, wn] = x.dims();
    let per_group = check_group_count(cn, g)?;
    let cols = per_group * hn * wn;
    Ok(GroupView {
        batch: bn,
        groups: g,
        cols,
        data: x.data().to_vec(),
    })
}

/// Exact inverse of [`group_partition`].
pub fn group_merge<T: Real>(view: &GroupView<T>, dims: Dims4) -> Result<Tensor4<T>> {
    let [bn, cn, hn, wn] = dims;
    let per_group = check_group_count(cn, view.groups)?;
    let expected_cols = per_group * hn * wn;
    if view.batch != bn || view.cols != expected_cols {
        return Err(CoreError::shape(
            "group_merge",
            format!(
                "view ({}, {}, {}) is inconsistent with dims {:?} at g={}",
                view.batch, view.groups, view.cols, dims, view.groups
            ),
        ));
    }
    Tensor4::from_vec(dims, view.data.clone())
}

// ---------------------------------------------------------------------------
// Group whitening
// ---------------------------------------------------------------------------

/// How the inverse square root of the group covariance is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhitenMode {
    /// Coupled Newton–Schulz iteration; differentiable, used for training.
    NewtonSchulz,
    /// Exact symmetric eigendecomposition; forward-accuracy oracle and
    /// inference mode. No backward of its own — gradients always flow
    /// through the Newton–Schulz composition.
    EigenExact,
}

/// Configuration of the group whitening operation.
#[derive(Debug, Clone)]
pub struct WhitenConfig {
    pub group_count: usize,
    pub epsilon_w: f64,
    pub ns_iterations: usize,
    pub mode: WhitenMode,
}

impl WhitenConfig {
    pub fn new(group_count: usize) -> Self {
        WhitenConfig {
            group_count,
            epsilon_w: DEFAULT_EPSILON_W,
            ns_iterations: DEFAULT_NS_ITERATIONS,
            mode: WhitenMode::NewtonSchulz,
        }
    }

    pub fn with_mode(mut self, mode: WhitenMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_epsilon(mut self, epsilon_w: f64) -> Self {
        self.epsilon_w = epsilon_w;
        self
    }

    pub fn with_ns_iterations(mut self, iterations: usize) -> Self {
        self.ns_iterations = iterations;
        self
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        check_group_count(channels, self.group_count)?;
        if !(self.epsilon_w > 0.0) {
            return Err(CoreError::config(format!(
                "epsilon_w must be positive, got {}",
                self.epsilon_w
            )));
        }
        if self.ns_iterations == 0 {
            return Err(CoreError::config("ns_iterations must be positive"));
        }
        Ok(())
    }
}

/// Per-sample whitening statistics.
#[derive(Debug, Clone)]
pub struct WhitenStats<T: Real> {
    /// Dims of the group view the statistics were computed on:
    /// `(B, g, c*H*W)`.
    pub group_dims: (usize, usize, usize),
    /// Group means, dims `(B, g)`.
    pub mu_g: Vec<T>,
    /// Ridged group covariances, dims `(B, g, g)`.
    pub sigma_g: MatrixBatch<T>,
    /// Inverse square roots, dims `(B, g, g)`.
    pub inv_sqrt: MatrixBatch<T>,
}

/// Cache for the whitening backward pass.
#[derive(Debug, Clone)]
pub struct GwCache<T: Real> {
    dims: Dims4,
    /// Centered group rows per sample.
    centered: GroupView<T>,
    sigma: MatrixBatch<T>,
    inv_sqrt: MatrixBatch<T>,
}

/// Computes `S^{-1/2}` per slice according to the config's mode, and checks
/// the whitening residual `max |R S R - I|` against the mode's tolerance.
pub fn inverse_sqrt<T: Real>(s: &MatrixBatch<T>, cfg: &WhitenConfig) -> Result<MatrixBatch<T>> {
    let mut out = MatrixBatch::zeros(s.batch(), s.size());
    for i in 0..s.batch() {
        let m = s.mat(i);
        let (r, tol) = match cfg.mode {
            WhitenMode::EigenExact => (eigen_inverse_sqrt(&m)?, EIGEN_RESIDUAL_TOL),
            WhitenMode::NewtonSchulz => {
                (ns_inverse_sqrt(&m, cfg.ns_iterations)?.0, NS_RESIDUAL_TOL)
            }
        };
        let residual = inverse_sqrt_residual(&r, &m);
        if !residual.is_finite() || residual > tol {
            return Err(CoreError::numerical(
                "inverse_sqrt",
                format!(
                    "slice {i} failed to converge (residual {residual:.3e} > {tol:.1e})"
                ),
                Some(residual),
            ));
        }
        out.set_mat(i, &r);
    }
    Ok(out)
}

/// Whitens each sample's channel groups:
/// partition, center rows, `S = X X^T / m + eps I`, multiply by `S^{-1/2}`,
/// merge back. No learnable parameters.
pub fn group_whiten<T: Real>(
    x: &Tensor4<T>,
    cfg: &WhitenConfig,
) -> Result<(Tensor4<T>, WhitenStats<T>)> {
    let (y, _cache, stats) = group_whiten_with_cache(x, cfg)?;
    Ok((y, stats))
}

/// Forward pass that also returns the cache needed by the backward pass.
pub fn group_whiten_with_cache<T: Real>(
    x: &Tensor4<T>,
    cfg: &WhitenConfig,
) -> Result<(Tensor4<T>, GwCache<T>, WhitenStats<T>)> {
    let [bn, cn, _, _] = x.dims();
    cfg.validate(cn)?;
    let g = cfg.group_count;
    let mut view = group_partition(x, g)?;
    let m = view.cols;
    if m < 2 {
        return Err(CoreError::shape(
            "group_whiten",
            format!("group rows need at least 2 columns for a covariance, got {m}"),
        ));
    }
    let inv_m = T::one() / T::from_f64(m as f64);
    let ridge = T::from_f64(cfg.epsilon_w);

    let mut mu_g = vec![T::zero(); bn * g];
    let mut sigma = MatrixBatch::zeros(bn, g);

    // Center rows in place; the original values are not needed afterwards.
    for b in 0..bn {
        for j in 0..g {
            let row = view.row_mut(b, j);
            let mut mu = T::zero();
            for &v in row.iter() {
                mu += v;
            }
            mu *= inv_m;
            for v in row.iter_mut() {
                *v -= mu;
            }
            mu_g[b * g + j] = mu;
        }
        // S = X X^T / m + eps I  (exactly symmetric by construction).
        let mut s = Mat::zeros(g, g);
        for j in 0..g {
            for k in j..g {
                let rj = view.row(b, j);
                let rk = view.row(b, k);
                let mut acc = T::zero();
                for i in 0..m {
                    acc += rj[i] * rk[i];
                }
                acc *= inv_m;
                *s.at_mut(j, k) = acc;
                *s.at_mut(k, j) = acc;
            }
        }
        for j in 0..g {
            *s.at_mut(j, j) += ridge;
        }
        sigma.set_mat(b, &s);
    }

    let inv_sqrt = inverse_sqrt(&sigma, cfg)?;

    // Whitened rows: O = R X per sample.
    let mut out_view = GroupView {
        batch: bn,
        groups: g,
        cols: m,
        data: vec![T::zero(); bn * g * m],
    };
    for b in 0..bn {
        let r = inv_sqrt.mat(b);
        for j in 0..g {
            for k in 0..g {
                let w = r.at(j, k);
                if w == T::zero() {
                    continue;
                }
                let src_start = (b * g + k) * m;
                let src: Vec<T> = view.data[src_start..src_start + m].to_vec();
                let dst = out_view.row_mut(b, j);
                for (d, &s_v) in dst.iter_mut().zip(&src) {
                    *d += w * s_v;
                }
            }
        }
    }

    let y = group_merge(&out_view, x.dims())?;
    let stats = WhitenStats {
        group_dims: (bn, g, m),
        mu_g,
        sigma_g: sigma.clone(),
        inv_sqrt: inv_sqrt.clone(),
    };
    Ok((
        y,
        GwCache {
            dims: x.dims(),
            centered: view,
            sigma,
            inv_sqrt,
        },
        stats,
    ))
}

/// Backward pass of group whitening. Gradients flow through the
/// Newton–Schulz composition (recomputed from the cached covariance), which
/// is exact in `NewtonSchulz` mode and the documented surrogate in
/// `EigenExact` mode.
pub fn group_whiten_backward<T: Real>(
    cache: &GwCache<T>,
    cfg: &WhitenConfig,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let g = cfg.group_count;
    let bn = cache.dims[0];
    let m = cache.centered.cols;
    let inv_m = T::one() / T::from_f64(m as f64);
    let grad_view = group_partition(grad_out, g)?;

    let mut d_input = GroupView {
        batch: bn,
        groups: g,
        cols: m,
        data: vec![T::zero(); bn * g * m],
    };

    for b in 0..bn {
        let r = cache.inv_sqrt.mat(b);
        let sigma = cache.sigma.mat(b);
        // dR = G X^T ; dX = R^T G
        let mut d_r = Mat::zeros(g, g);
        for j in 0..g {
            for k in 0..g {
                let gr = grad_view.row(b, j);
                let xr = cache.centered.row(b, k);
                let mut acc = T::zero();
                for i in 0..m {
                    acc += gr[i] * xr[i];
                }
                *d_r.at_mut(j, k) = acc;
            }
        }
        let mut d_x: Vec<T> = vec![T::zero(); g * m];
        let rt = r.transpose();
        for j in 0..g {
            for k in 0..g {
                let w = rt.at(j, k);
                if w == T::zero() {
                    continue;
                }
                let gr = grad_view.row(b, k);
                for i in 0..m {
                    d_x[j * m + i] += w * gr[i];
                }
            }
        }

        // d Sigma via the Newton–Schulz composition.
        let (_, ns_cache) = ns_inverse_sqrt(&sigma, cfg.ns_iterations)?;
        let d_sigma = ns_inverse_sqrt_backward(&ns_cache, &d_r);

        // Sigma = X X^T / m + eps I  =>  dX += (dSigma + dSigma^T) X / m
        let sym = d_sigma.add(&d_sigma.transpose());
        for j in 0..g {
            for k in 0..g {
                let w = sym.at(j, k) * inv_m;
                if w == T::zero() {
                    continue;
                }
                let xr = cache.centered.row(b, k);
                for i in 0..m {
                    d_x[j * m + i] += w * xr[i];
                }
            }
        }

        // Centering: X = X0 - rowmean  =>  dX0 = dX - rowmean(dX)
        for j in 0..g {
            let mut mean = T::zero();
            for i in 0..m {
                mean += d_x[j * m + i];
            }
            mean *= inv_m;
            let dst = d_input.row_mut(b, j);
            for i in 0..m {
                dst[i] = d_x[j * m + i] - mean;
            }
        }
    }

    group_merge(&d_input, cache.dims)
}
