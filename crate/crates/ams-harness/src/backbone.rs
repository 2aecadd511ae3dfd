//! Toy bottleneck backbone with explicit backward passes.
//!
//! Structure: a 3x3 stem convolution, four stages of one bottleneck residual
//! block each (1x1 reduce, 3x3, 1x1 expand, identity shortcut), stride-2
//! transitions (2x2 average pool + 1x1 width conv) between stages, block
//! insertions after selected stages, global average pooling into the
//! embedding, and a linear identity classifier.
//!
//! Layers cache the activations their backward needs; the trainer runs
//! forward and backward back to back and then reads parameter gradients
//! through [`Model::visit_params`].

use crate::error::{HarnessError, Result};
use crate::rng::{normal, Seeded};
use ams_core::ams::{
    validate_placements, variant_backward, variant_forward_with_cache, AmsCache, AmsParams,
    VariantKind,
};
use ams_core::conv::{conv2d_strided, conv2d_strided_backward};
use ams_core::matrix::Mat;
use ams_core::norm::WhitenConfig;
use ams_core::real::Real;
use ams_core::tensor::Tensor4;
use serde::{Deserialize, Serialize};

/// Mutable view of one named parameter and its gradient.
pub struct ParamView<'a, T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
    /// Whether decoupled weight decay applies (off for gains and biases).
    pub decay: bool,
}

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

struct Conv<T: Real> {
    name: String,
    kernel: Tensor4<T>,
    grad: Tensor4<T>,
    stride: usize,
    cache: Option<Tensor4<T>>,
}

impl<T: Real> Conv<T> {
    fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut Seeded,
        gain: f64,
    ) -> Self {
        let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
        let kernel = Tensor4::from_fn([c_out, c_in, k, k], |_, _, _, _| {
            T::from_f64(std * normal(rng))
        });
        let grad = Tensor4::zeros([c_out, c_in, k, k]);
        Conv {
            name: name.into(),
            kernel,
            grad,
            stride,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = conv2d_strided(x, &self.kernel, self.stride)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| HarnessError::input("conv backward before forward"))?;
        let (gx, gk) = conv2d_strided_backward(x, &self.kernel, grad_out, self.stride);
        for (d, s) in self.grad.data_mut().iter_mut().zip(gk.data()) {
            *d += *s;
        }
        Ok(gx)
    }

    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        let shape = self.kernel.dims().to_vec();
        f(ParamView {
            name: self.name.clone(),
            shape,
            value: self.kernel.data_mut(),
            grad: self.grad.data_mut(),
            decay: true,
        });
    }
}

struct Relu<T: Real> {
    cache: Option<Tensor4<T>>,
}

impl<T: Real> Relu<T> {
    fn new() -> Self {
        Relu { cache: None }
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let y = ams_core::tensor::relu(x);
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Tensor4<T> {
        let x = self.cache.as_ref().expect("relu backward before forward");
        ams_core::tensor::relu_backward(grad_out, x)
    }
}

/// 2x2 average pool with stride 2; spatial dims must be even.
struct AvgPool2<T: Real> {
    in_dims: Option<[usize; 4]>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> AvgPool2<T> {
    fn new() -> Self {
        AvgPool2 {
            in_dims: None,
            _marker: std::marker::PhantomData,
        }
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [b, c, h, w] = x.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(HarnessError::config(format!(
                "average pool needs even spatial dims, got {h}x{w}"
            )));
        }
        self.in_dims = Some(x.dims());
        let quarter = T::from_f64(0.25);
        let mut y = Tensor4::zeros([b, c, h / 2, w / 2]);
        for bi in 0..b {
            for ci in 0..c {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        let s = x.at(bi, ci, 2 * oh, 2 * ow)
                            + x.at(bi, ci, 2 * oh, 2 * ow + 1)
                            + x.at(bi, ci, 2 * oh + 1, 2 * ow)
                            + x.at(bi, ci, 2 * oh + 1, 2 * ow + 1);
                        *y.at_mut(bi, ci, oh, ow) = s * quarter;
                    }
                }
            }
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Tensor4<T> {
        let dims = self.in_dims.expect("pool backward before forward");
        let quarter = T::from_f64(0.25);
        let mut gx = Tensor4::zeros(dims);
        let [b, c, h, w] = dims;
        for bi in 0..b {
            for ci in 0..c {
                for oh in 0..h / 2 {
                    for ow in 0..w / 2 {
                        let g = grad_out.at(bi, ci, oh, ow) * quarter;
                        *gx.at_mut(bi, ci, 2 * oh, 2 * ow) = g;
                        *gx.at_mut(bi, ci, 2 * oh, 2 * ow + 1) = g;
                        *gx.at_mut(bi, ci, 2 * oh + 1, 2 * ow) = g;
                        *gx.at_mut(bi, ci, 2 * oh + 1, 2 * ow + 1) = g;
                    }
                }
            }
        }
        gx
    }
}

/// 1x1 reduce, 3x3, 1x1 expand with an identity shortcut.
struct Bottleneck<T: Real> {
    reduce: Conv<T>,
    mid: Conv<T>,
    expand: Conv<T>,
    relu1: Relu<T>,
    relu2: Relu<T>,
    relu_out: Relu<T>,
}

impl<T: Real> Bottleneck<T> {
    fn new(name: &str, width: usize, rng: &mut Seeded) -> Self {
        let narrow = (width / 4).max(1);
        Bottleneck {
            reduce: Conv::new(format!("{name}.reduce"), width, narrow, 1, 1, rng, 1.0),
            mid: Conv::new(format!("{name}.mid"), narrow, narrow, 3, 1, rng, 1.0),
            // Small expansion init keeps the residual branch near zero at
            // start, which stabilizes the unnormalized baseline.
            expand: Conv::new(format!("{name}.expand"), narrow, width, 1, 1, rng, 0.25),
            relu1: Relu::new(),
            relu2: Relu::new(),
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let a = self.relu1.forward(&self.reduce.forward(x)?);
        let b = self.relu2.forward(&self.mid.forward(&a)?);
        let c = self.expand.forward(&b)?;
        let summed = ams_core::tensor::add(&c, x)?;
        Ok(self.relu_out.forward(&summed))
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g_sum = self.relu_out.backward(grad_out);
        let g_b = self.expand.backward(&g_sum)?;
        let g_mid = self.relu2.backward(&g_b);
        let g_a = self.mid.backward(&g_mid)?;
        let g_red = self.relu1.backward(&g_a);
        let g_main = self.reduce.backward(&g_red)?;
        ams_core::tensor::add(&g_main, &g_sum).map_err(HarnessError::Core)
    }

    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.reduce.visit(f);
        self.mid.visit(f);
        self.expand.visit(f);
    }
}

/// One inserted block: the composite operation plus its gradients.
struct AmsBlock<T: Real> {
    name: String,
    variant: VariantKind,
    params: AmsParams<T>,
    g_gamma: Vec<T>,
    g_beta: Vec<T>,
    g_in_sa: Option<Tensor4<T>>,
    g_in_ca: Option<(Mat<T>, Mat<T>)>,
    g_gw_sa: Option<Tensor4<T>>,
    g_gw_ca: Option<(Mat<T>, Mat<T>)>,
    cache: Option<AmsCache<T>>,
}

impl<T: Real> AmsBlock<T> {
    fn new(
        name: String,
        channels: usize,
        whiten: WhitenConfig,
        variant: VariantKind,
        sa_kernel: usize,
        ca_reduction: usize,
        in_epsilon: f64,
        rng: &mut Seeded,
    ) -> Result<Self> {
        let mut params =
            AmsParams::<T>::for_variant(channels, whiten, &variant, sa_kernel, ca_reduction)?;
        params.in_params.epsilon = T::from_f64(in_epsilon);
        // Gate-style init: the squeeze layer is random, the output layer
        // (w2, spatial kernel) starts at zero, so every mask is exactly 0.5
        // and the block is an exact 1.5x residual at step 0. The output
        // layers receive gradient immediately and drift off zero.
        let mut init_mat = |m: &mut Mat<T>| {
            let std = (1.0 / m.cols as f64).sqrt();
            for v in m.data.iter_mut() {
                *v = T::from_f64(std * normal(rng));
            }
        };
        if let Some(ca) = params.in_ca.as_mut() {
            init_mat(&mut ca.w1);
        }
        if let Some(ca) = params.gw_ca.as_mut() {
            init_mat(&mut ca.w1);
        }

        let g_gamma = vec![T::zero(); channels];
        let g_beta = vec![T::zero(); channels];
        let g_in_sa = params.in_sa.as_ref().map(|p| Tensor4::zeros(p.kernel.dims()));
        let g_in_ca = params
            .in_ca
            .as_ref()
            .map(|p| (Mat::zeros(p.w1.rows, p.w1.cols), Mat::zeros(p.w2.rows, p.w2.cols)));
        let g_gw_sa = params.gw_sa.as_ref().map(|p| Tensor4::zeros(p.kernel.dims()));
        let g_gw_ca = params
            .gw_ca
            .as_ref()
            .map(|p| (Mat::zeros(p.w1.rows, p.w1.cols), Mat::zeros(p.w2.rows, p.w2.cols)));
        Ok(AmsBlock {
            name,
            variant,
            params,
            g_gamma,
            g_beta,
            g_in_sa,
            g_in_ca,
            g_gw_sa,
            g_gw_ca,
            cache: None,
        })
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (y, cache) = variant_forward_with_cache(x, &self.params, &self.variant)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| HarnessError::input("block backward before forward"))?;
        let grads = variant_backward(&self.params, cache, grad_out)?;
        for (d, s) in self.g_gamma.iter_mut().zip(&grads.gamma) {
            *d += *s;
        }
        for (d, s) in self.g_beta.iter_mut().zip(&grads.beta) {
            *d += *s;
        }
        if let (Some(dst), Some(src)) = (self.g_in_sa.as_mut(), grads.in_sa_kernel) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += *s;
            }
        }
        if let (Some((d1, d2)), Some((s1, s2))) = (self.g_in_ca.as_mut(), grads.in_ca_w) {
            for (d, s) in d1.data.iter_mut().zip(&s1.data) {
                *d += *s;
            }
            for (d, s) in d2.data.iter_mut().zip(&s2.data) {
                *d += *s;
            }
        }
        if let (Some(dst), Some(src)) = (self.g_gw_sa.as_mut(), grads.gw_sa_kernel) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += *s;
            }
        }
        if let (Some((d1, d2)), Some((s1, s2))) = (self.g_gw_ca.as_mut(), grads.gw_ca_w) {
            for (d, s) in d1.data.iter_mut().zip(&s1.data) {
                *d += *s;
            }
            for (d, s) in d2.data.iter_mut().zip(&s2.data) {
                *d += *s;
            }
        }
        Ok(grads.input)
    }

    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        let channels = self.params.in_params.gamma.len();
        f(ParamView {
            name: format!("{}.gamma", self.name),
            shape: vec![channels],
            value: &mut self.params.in_params.gamma,
            grad: &mut self.g_gamma,
            decay: false,
        });
        f(ParamView {
            name: format!("{}.beta", self.name),
            shape: vec![channels],
            value: &mut self.params.in_params.beta,
            grad: &mut self.g_beta,
            decay: false,
        });
        if let (Some(p), Some(g)) = (self.params.in_sa.as_mut(), self.g_in_sa.as_mut()) {
            f(ParamView {
                name: format!("{}.in_sa.kernel", self.name),
                shape: p.kernel.dims().to_vec(),
                value: p.kernel.data_mut(),
                grad: g.data_mut(),
                decay: true,
            });
        }
        if let (Some(p), Some((g1, g2))) = (self.params.in_ca.as_mut(), self.g_in_ca.as_mut()) {
            f(ParamView {
                name: format!("{}.in_ca.w1", self.name),
                shape: vec![p.w1.rows, p.w1.cols],
                value: &mut p.w1.data,
                grad: &mut g1.data,
                decay: true,
            });
            f(ParamView {
                name: format!("{}.in_ca.w2", self.name),
                shape: vec![p.w2.rows, p.w2.cols],
                value: &mut p.w2.data,
                grad: &mut g2.data,
                decay: true,
            });
        }
        if let (Some(p), Some(g)) = (self.params.gw_sa.as_mut(), self.g_gw_sa.as_mut()) {
            f(ParamView {
                name: format!("{}.gw_sa.kernel", self.name),
                shape: p.kernel.dims().to_vec(),
                value: p.kernel.data_mut(),
                grad: g.data_mut(),
                decay: true,
            });
        }
        if let (Some(p), Some((g1, g2))) = (self.params.gw_ca.as_mut(), self.g_gw_ca.as_mut()) {
            f(ParamView {
                name: format!("{}.gw_ca.w1", self.name),
                shape: vec![p.w1.rows, p.w1.cols],
                value: &mut p.w1.data,
                grad: &mut g1.data,
                decay: true,
            });
            f(ParamView {
                name: format!("{}.gw_ca.w2", self.name),
                shape: vec![p.w2.rows, p.w2.cols],
                value: &mut p.w2.data,
                grad: &mut g2.data,
                decay: true,
            });
        }
    }
}

struct Linear<T: Real> {
    name: String,
    w: Mat<T>,
    b: Vec<T>,
    g_w: Mat<T>,
    g_b: Vec<T>,
    cache: Option<Mat<T>>,
}

impl<T: Real> Linear<T> {
    fn new(name: impl Into<String>, input: usize, output: usize, rng: &mut Seeded) -> Self {
        let std = (1.0 / input as f64).sqrt();
        let mut w = Mat::zeros(output, input);
        for v in w.data.iter_mut() {
            *v = T::from_f64(std * normal(rng));
        }
        Linear {
            name: name.into(),
            w,
            b: vec![T::zero(); output],
            g_w: Mat::zeros(output, input),
            g_b: vec![T::zero(); output],
            cache: None,
        }
    }

    fn forward(&mut self, x: &Mat<T>) -> Mat<T> {
        let mut y = Mat::zeros(x.rows, self.w.rows);
        for r in 0..x.rows {
            for o in 0..self.w.rows {
                let mut acc = self.b[o];
                let wr = self.w.row(o);
                for (xv, wv) in x.row(r).iter().zip(wr) {
                    acc += *xv * *wv;
                }
                *y.at_mut(r, o) = acc;
            }
        }
        self.cache = Some(x.clone());
        y
    }

    fn backward(&mut self, grad_out: &Mat<T>) -> Mat<T> {
        let x = self.cache.as_ref().expect("linear backward before forward");
        let mut gx = Mat::zeros(x.rows, self.w.cols);
        for r in 0..x.rows {
            for o in 0..self.w.rows {
                let g = grad_out.at(r, o);
                self.g_b[o] += g;
                for c in 0..self.w.cols {
                    *self.g_w.at_mut(o, c) += g * x.at(r, c);
                    *gx.at_mut(r, c) += g * self.w.at(o, c);
                }
            }
        }
        gx
    }

    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            shape: vec![self.w.rows, self.w.cols],
            value: &mut self.w.data,
            grad: &mut self.g_w.data,
            decay: true,
        });
        f(ParamView {
            name: format!("{}.bias", self.name),
            shape: vec![self.b.len()],
            value: &mut self.b,
            grad: &mut self.g_b,
            decay: false,
        });
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

/// Structural configuration of the backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage_widths: Vec<usize>,
    pub placements: Vec<usize>,
    pub variant: VariantKind,
    pub whiten_g: usize,
    pub whiten_epsilon: f64,
    pub ns_iterations: usize,
    pub sa_kernel: usize,
    pub ca_reduction: usize,
    pub in_epsilon: f64,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn whiten_config(&self) -> WhitenConfig {
        WhitenConfig::new(self.whiten_g)
            .with_epsilon(self.whiten_epsilon)
            .with_ns_iterations(self.ns_iterations)
    }
}

struct Stage<T: Real> {
    transition: Option<(AvgPool2<T>, Conv<T>, Relu<T>)>,
    body: Bottleneck<T>,
    block: Option<AmsBlock<T>>,
}

/// The full network: stem, four stages with optional inserted blocks,
/// global average pooling and a linear classifier.
pub struct Model<T: Real> {
    stem: Conv<T>,
    stem_relu: Relu<T>,
    stages: Vec<Stage<T>>,
    classifier: Linear<T>,
    pool_dims: Option<[usize; 4]>,
    warnings: Vec<String>,
    embed_dim: usize,
}

impl<T: Real> Model<T> {
    /// Builds the model; placements are validated against stage widths and
    /// may produce warnings (e.g. a block after the final stage).
    pub fn new(cfg: &ModelConfig, rng: &mut Seeded) -> Result<Self> {
        if cfg.stage_widths.is_empty() {
            return Err(HarnessError::config("at least one stage width required"));
        }
        let effective_g = if cfg.variant.combination.uses_gw() {
            cfg.whiten_g
        } else {
            1
        };
        let warnings = validate_placements(&cfg.stage_widths, &cfg.placements, effective_g)?;

        let stem = Conv::new("stem", 3, cfg.stage_widths[0], 3, 1, rng, 1.0);
        let mut stages = Vec::new();
        for (i, &width) in cfg.stage_widths.iter().enumerate() {
            let transition = if i == 0 {
                None
            } else {
                let conv = Conv::new(
                    format!("stage{}.transition", i + 1),
                    cfg.stage_widths[i - 1],
                    width,
                    1,
                    1,
                    rng,
                    1.0,
                );
                Some((AvgPool2::new(), conv, Relu::new()))
            };
            let body = Bottleneck::new(&format!("stage{}", i + 1), width, rng);
            let block = if cfg.placements.contains(&(i + 1)) {
                Some(AmsBlock::new(
                    format!("stage{}.block", i + 1),
                    width,
                    cfg.whiten_config(),
                    cfg.variant,
                    cfg.sa_kernel,
                    cfg.ca_reduction,
                    cfg.in_epsilon,
                    rng,
                )?)
            } else {
                None
            };
            stages.push(Stage {
                transition,
                body,
                block,
            });
        }
        let embed_dim = *cfg.stage_widths.last().expect("non-empty widths");
        let classifier = Linear::new("classifier", embed_dim, cfg.num_classes, rng);
        Ok(Model {
            stem,
            stem_relu: Relu::new(),
            stages,
            classifier,
            pool_dims: None,
            warnings,
            embed_dim,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Forward pass: returns `(embeddings, logits)`, both `(B, ...)`.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<(Mat<T>, Mat<T>)> {
        let mut f = self.stem_relu.forward(&self.stem.forward(x)?);
        for stage in self.stages.iter_mut() {
            if let Some((pool, conv, relu)) = stage.transition.as_mut() {
                f = relu.forward(&conv.forward(&pool.forward(&f)?)?);
            }
            f = stage.body.forward(&f)?;
            if let Some(block) = stage.block.as_mut() {
                f = block.forward(&f)?;
            }
        }
        // Global average pooling into the embedding.
        let [b, c, h, w] = f.dims();
        self.pool_dims = Some(f.dims());
        let inv = T::one() / T::from_f64((h * w) as f64);
        let mut embed = Mat::zeros(b, c);
        for bi in 0..b {
            for ci in 0..c {
                let base = f.index(bi, ci, 0, 0);
                let mut acc = T::zero();
                for i in 0..h * w {
                    acc += f.data()[base + i];
                }
                *embed.at_mut(bi, ci) = acc * inv;
            }
        }
        let logits = self.classifier.forward(&embed);
        Ok((embed, logits))
    }

    /// Backward pass from the loss gradients: `d_logits` flows through the
    /// classifier; `d_embed` is added directly to the embedding gradient
    /// (the triplet path).
    pub fn backward(&mut self, d_embed: &Mat<T>, d_logits: &Mat<T>) -> Result<()> {
        let mut g_embed = self.classifier.backward(d_logits);
        for (dst, src) in g_embed.data.iter_mut().zip(&d_embed.data) {
            *dst += *src;
        }
        let dims = self
            .pool_dims
            .ok_or_else(|| HarnessError::input("model backward before forward"))?;
        let [b, c, h, w] = dims;
        let inv = T::one() / T::from_f64((h * w) as f64);
        let mut g = Tensor4::zeros(dims);
        for bi in 0..b {
            for ci in 0..c {
                let spread = g_embed.at(bi, ci) * inv;
                let base = g.index(bi, ci, 0, 0);
                for i in 0..h * w {
                    g.data_mut()[base + i] = spread;
                }
            }
        }
        for stage in self.stages.iter_mut().rev() {
            if let Some(block) = stage.block.as_mut() {
                g = block.backward(&g)?;
            }
            g = stage.body.backward(&g)?;
            if let Some((pool, conv, relu)) = stage.transition.as_mut() {
                g = pool.backward(&conv.backward(&relu.backward(&g))?);
            }
        }
        let g = self.stem_relu.backward(&g);
        self.stem.backward(&g)?;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p: ParamView<'_, T>| {
            for v in p.grad.iter_mut() {
                *v = T::zero();
            }
        });
    }

    /// Visits every parameter in a fixed deterministic order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.stem.visit(f);
        for stage in self.stages.iter_mut() {
            if let Some((_, conv, _)) = stage.transition.as_mut() {
                conv.visit(f);
            }
            stage.body.visit(f);
            if let Some(block) = stage.block.as_mut() {
                block.visit(f);
            }
        }
        self.classifier.visit(f);
    }

    /// Gathers `(name, shape, values-as-f64)` for checkpointing.
    pub fn export_params(&mut self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p: ParamView<'_, T>| {
            out.push((
                p.name.clone(),
                p.shape.clone(),
                p.value.iter().map(|v| v.to_f64()).collect(),
            ));
        });
        out
    }

    /// Restores parameters by name; errors on any mismatch.
    pub fn import_params(
        &mut self,
        tensors: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_params(&mut |p: ParamView<'_, T>| {
            match tensors.get(&p.name) {
                Some((shape, values)) if *shape == p.shape && values.len() == p.value.len() => {
                    for (dst, src) in p.value.iter_mut().zip(values) {
                        *dst = T::from_f64(*src);
                    }
                }
                _ => missing.push(p.name.clone()),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::input(format!(
                "checkpoint is missing or mismatches parameters: {}",
                missing.join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ams_core::ams::Combination;

    fn tiny_config(variant: VariantKind) -> ModelConfig {
        ModelConfig {
            stage_widths: vec![8, 16, 16, 16],
            placements: vec![1, 2, 3],
            variant,
            whiten_g: 4,
            whiten_epsilon: 1e-3,
            ns_iterations: 12,
            sa_kernel: 3,
            ca_reduction: 4,
            in_epsilon: 1e-5,
            num_classes: 5,
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_config(VariantKind::canonical());
        let mut model = Model::<f64>::new(&cfg, &mut seeded(3)).unwrap();
        let x = Tensor4::from_fn([2, 3, 16, 8], |b, c, h, w| {
            ((b * 97 + c * 31 + h * 7 + w) as f64 * 0.37).sin()
        });
        let (embed, logits) = model.forward(&x).unwrap();
        assert_eq!((embed.rows, embed.cols), (2, 16));
        assert_eq!((logits.rows, logits.cols), (2, 5));

        let mut model2 = Model::<f64>::new(&cfg, &mut seeded(3)).unwrap();
        let (e2, l2) = model2.forward(&x).unwrap();
        assert_eq!(embed.data, e2.data);
        assert_eq!(logits.data, l2.data);
    }

    #[test]
    fn empty_placements_leave_backbone_bare() {
        let mut cfg = tiny_config(VariantKind::baseline());
        cfg.placements = vec![];
        let mut model = Model::<f64>::new(&cfg, &mut seeded(4)).unwrap();
        assert!(model.stages.iter().all(|s| s.block.is_none()));
        assert!(model.warnings().is_empty());
        let names: Vec<String> = model
            .export_params()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        assert!(names.iter().all(|n| !n.contains("block")));
    }

    #[test]
    fn final_stage_placement_warns() {
        let mut cfg = tiny_config(VariantKind::plain(Combination::InGw));
        cfg.placements = vec![4];
        let model = Model::<f64>::new(&cfg, &mut seeded(5)).unwrap();
        assert_eq!(model.warnings().len(), 1);
        assert!(model.warnings()[0].contains("final stage"));
    }

    #[test]
    fn indivisible_group_count_suggests_alternative() {
        let mut cfg = tiny_config(VariantKind::plain(Combination::InGw));
        cfg.whiten_g = 5;
        let err = match Model::<f64>::new(&cfg, &mut seeded(6)) {
            Err(e) => e,
            Ok(_) => panic!("g=5 on width-8 stages must be rejected"),
        };
        assert!(err.to_string().contains("try g="), "{err}");
    }

    #[test]
    fn backward_accumulates_finite_gradients() {
        let cfg = tiny_config(VariantKind::canonical());
        let mut model = Model::<f64>::new(&cfg, &mut seeded(7)).unwrap();
        let x = Tensor4::from_fn([4, 3, 16, 8], |b, c, h, w| {
            ((b * 13 + c * 5 + h * 3 + w) as f64 * 0.71).sin()
        });
        let (embed, logits) = model.forward(&x).unwrap();
        let d_embed = Mat::from_vec(
            embed.rows,
            embed.cols,
            embed.data.iter().map(|v| v * 0.1).collect(),
        )
        .unwrap();
        let d_logits = Mat::from_vec(
            logits.rows,
            logits.cols,
            logits.data.iter().map(|v| v * 0.05).collect(),
        )
        .unwrap();
        model.zero_grads();
        model.backward(&d_embed, &d_logits).unwrap();
        let mut total = 0.0;
        model.visit_params(&mut |p: ParamView<'_, f64>| {
            for g in p.grad.iter() {
                assert!(g.is_finite());
                total += g.abs();
            }
        });
        assert!(total > 0.0);
    }
}
