//! The attention-aware multi-operation block and its combination variants.
//!
//! The canonical block runs instance normalization with a spatial-attention
//! residual, then group whitening with a channel-attention residual:
//!
//! ```text
//! f_in  = IN(x)            f1 = f_in + SA(f_in)
//! f_gw  = GW(f1)           out = f_gw + CA(f_gw)
//! ```
//!
//! [`variant_forward`] additionally supports swapped, parallel and
//! sum-composed arrangements of the two operations, and any attention
//! selection per stage.

use crate::attention::{
    channel_attention_backward, channel_attention_with_cache, spatial_attention_backward,
    spatial_attention_with_cache, CaCache, ChannelAttentionParams, SaCache,
    SpatialAttentionParams,
};
use crate::error::{CoreError, Result};
use crate::matrix::Mat;
use crate::norm::{
    group_whiten_backward, group_whiten_with_cache, instance_norm_backward,
    instance_norm_with_cache, GwCache, InCache, InParams, WhitenConfig,
};
use crate::real::Real;
use crate::tensor::{add, Tensor4};

/// How the two operations are combined (the block's wiring).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combination {
    /// `GW(IN(x))` — the canonical tandem.
    InGw,
    /// `IN(GW(x))`.
    GwIn,
    /// `IN(x) + GW(x)` in parallel.
    InAndGw,
    /// `IN(x) + GW(IN(x))`.
    InXGw,
    /// `GW(x) + IN(GW(x))`.
    GwXIn,
    /// Instance normalization alone.
    InOnly,
    /// Group whitening alone.
    GwOnly,
    /// Pass-through baseline.
    None,
}

impl Combination {
    pub fn uses_in(self) -> bool {
        !matches!(self, Combination::GwOnly | Combination::None)
    }

    pub fn uses_gw(self) -> bool {
        !matches!(self, Combination::InOnly | Combination::None)
    }

    pub fn name(self) -> &'static str {
        match self {
            Combination::InGw => "IN_GW",
            Combination::GwIn => "GW_IN",
            Combination::InAndGw => "IN_and_GW",
            Combination::InXGw => "IN_XGW",
            Combination::GwXIn => "GW_XIN",
            Combination::InOnly => "IN_only",
            Combination::GwOnly => "GW_only",
            Combination::None => "none",
        }
    }
}

/// Attention applied to one stage's output (residual form).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AttnKind {
    #[default]
    None,
    Sa,
    Ca,
    /// Channel attention first, then spatial attention on its output,
    /// each through the same residual form.
    CaSa,
}

impl AttnKind {
    pub fn needs_sa(self) -> bool {
        matches!(self, AttnKind::Sa | AttnKind::CaSa)
    }

    pub fn needs_ca(self) -> bool {
        matches!(self, AttnKind::Ca | AttnKind::CaSa)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttnKind::None => "none",
            AttnKind::Sa => "sa",
            AttnKind::Ca => "ca",
            AttnKind::CaSa => "casa",
        }
    }
}

/// A block variant: the combination plus per-stage attention selectors.
/// Serializes as its compact name, e.g. `"IN_GW:sa-ca"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VariantKind {
    pub combination: Combination,
    pub attn_in: AttnKind,
    pub attn_gw: AttnKind,
}

impl serde::Serialize for VariantKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> serde::Deserialize<'de> for VariantKind {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(deserializer)?;
        VariantKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl VariantKind {
    pub fn plain(combination: Combination) -> Self {
        VariantKind {
            combination,
            attn_in: AttnKind::None,
            attn_gw: AttnKind::None,
        }
    }

    /// The canonical attention-aware block: tandem IN→GW with spatial
    /// attention on IN and channel attention on GW.
    pub fn canonical() -> Self {
        VariantKind {
            combination: Combination::InGw,
            attn_in: AttnKind::Sa,
            attn_gw: AttnKind::Ca,
        }
    }

    pub fn baseline() -> Self {
        VariantKind::plain(Combination::None)
    }

    /// Attention selectors for stages absent from the combination are inert.
    fn effective_attn_in(&self) -> AttnKind {
        if self.combination.uses_in() {
            self.attn_in
        } else {
            AttnKind::None
        }
    }

    fn effective_attn_gw(&self) -> AttnKind {
        if self.combination.uses_gw() {
            self.attn_gw
        } else {
            AttnKind::None
        }
    }

    pub fn name(&self) -> String {
        let base = self.combination.name().to_string();
        if self.effective_attn_in() == AttnKind::None && self.effective_attn_gw() == AttnKind::None
        {
            base
        } else {
            format!(
                "{base}:{}-{}",
                self.effective_attn_in().name(),
                self.effective_attn_gw().name()
            )
        }
    }

    /// Parses `COMBO` or `COMBO:attn_in-attn_gw`; `AMS` is shorthand for the
    /// canonical block. Combination names are case-insensitive.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("ams") {
            return Ok(VariantKind::canonical());
        }
        let (combo_str, attn_str) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let combination = match combo_str.to_ascii_lowercase().as_str() {
            "in_gw" => Combination::InGw,
            "gw_in" => Combination::GwIn,
            "in_and_gw" => Combination::InAndGw,
            "in_xgw" => Combination::InXGw,
            "gw_xin" => Combination::GwXIn,
            "in_only" => Combination::InOnly,
            "gw_only" => Combination::GwOnly,
            "none" => Combination::None,
            other => {
                return Err(CoreError::input(format!("unknown combination '{other}'")));
            }
        };
        let (attn_in, attn_gw) = match attn_str {
            None => (AttnKind::None, AttnKind::None),
            Some(a) => {
                let (i, g) = a.split_once('-').ok_or_else(|| {
                    CoreError::input(format!("attention spec '{a}' must be 'IN-GW', e.g. 'sa-ca'"))
                })?;
                (parse_attn(i)?, parse_attn(g)?)
            }
        };
        Ok(VariantKind {
            combination,
            attn_in,
            attn_gw,
        })
    }
}

fn parse_attn(s: &str) -> Result<AttnKind> {
    match s.to_ascii_lowercase().as_str() {
        "none" => Ok(AttnKind::None),
        "sa" => Ok(AttnKind::Sa),
        "ca" => Ok(AttnKind::Ca),
        "casa" => Ok(AttnKind::CaSa),
        other => Err(CoreError::input(format!("unknown attention kind '{other}'"))),
    }
}

/// Parameters of one block. Attention parameter slots are populated exactly
/// when a variant's selectors require them; each stage owns its own modules.
#[derive(Debug, Clone)]
pub struct AmsParams<T: Real> {
    pub in_params: InParams<T>,
    pub whiten_cfg: WhitenConfig,
    pub in_sa: Option<SpatialAttentionParams<T>>,
    pub in_ca: Option<ChannelAttentionParams<T>>,
    pub gw_sa: Option<SpatialAttentionParams<T>>,
    pub gw_ca: Option<ChannelAttentionParams<T>>,
}

impl<T: Real> AmsParams<T> {
    /// Zero-initialized parameters sized for `variant` at the given channel
    /// count (attention masks start at 0.5 everywhere).
    pub fn for_variant(
        channels: usize,
        whiten_cfg: WhitenConfig,
        variant: &VariantKind,
        sa_kernel: usize,
        ca_reduction: usize,
    ) -> Result<Self> {
        let mk_sa = || SpatialAttentionParams::zeros(sa_kernel);
        let mk_ca = || ChannelAttentionParams::zeros(channels, ca_reduction);
        Ok(AmsParams {
            in_params: InParams::identity(channels),
            whiten_cfg,
            in_sa: if variant.effective_attn_in().needs_sa() {
                Some(mk_sa()?)
            } else {
                None
            },
            in_ca: if variant.effective_attn_in().needs_ca() {
                Some(mk_ca()?)
            } else {
                None
            },
            gw_sa: if variant.effective_attn_gw().needs_sa() {
                Some(mk_sa()?)
            } else {
                None
            },
            gw_ca: if variant.effective_attn_gw().needs_ca() {
                Some(mk_ca()?)
            } else {
                None
            },
        })
    }

    pub fn validate(&self, channels: usize, variant: &VariantKind) -> Result<()> {
        if variant.combination.uses_gw() {
            self.whiten_cfg.validate(channels)?;
        }
        let need = [
            ("in_sa", variant.effective_attn_in().needs_sa(), self.in_sa.is_some()),
            ("in_ca", variant.effective_attn_in().needs_ca(), self.in_ca.is_some()),
            ("gw_sa", variant.effective_attn_gw().needs_sa(), self.gw_sa.is_some()),
            ("gw_ca", variant.effective_attn_gw().needs_ca(), self.gw_ca.is_some()),
        ];
        for (name, required, present) in need {
            if required != present {
                return Err(CoreError::config(format!(
                    "attention parameters '{name}' {} for variant {}",
                    if required { "missing" } else { "present but unused" },
                    variant.name()
                )));
            }
        }
        if let Some(ca) = &self.in_ca {
            ca.validate(channels)?;
        }
        if let Some(ca) = &self.gw_ca {
            ca.validate(channels)?;
        }
        if let Some(sa) = &self.in_sa {
            sa.validate()?;
        }
        if let Some(sa) = &self.gw_sa {
            sa.validate()?;
        }
        Ok(())
    }
}

/// Which stage an attention wrap belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    In,
    Gw,
}

/// Cache of one residual attention wrap `f -> f + attn(f)`.
#[derive(Debug, Clone)]
enum WrapCache<T: Real> {
    None,
    Sa(SaCache<T>),
    Ca(CaCache<T>),
    /// `t = f + CA(f); out = t + SA(t)`.
    CaSa { ca: CaCache<T>, sa: SaCache<T> },
}

/// Cache of one stage: the operation itself plus its attention wrap.
#[derive(Debug, Clone)]
enum StageCache<T: Real> {
    In(InCache<T>, WrapCache<T>),
    Gw(GwCache<T>, WrapCache<T>),
}

/// All activations needed to run a variant's backward pass.
#[derive(Debug, Clone)]
pub struct AmsCache<T: Real> {
    variant: VariantKind,
    /// Stage caches in forward execution order.
    stages: Vec<StageCache<T>>,
}

/// Gradients of one block. Attention slots mirror the parameter slots.
#[derive(Debug, Clone)]
pub struct AmsGrads<T: Real> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub in_sa_kernel: Option<Tensor4<T>>,
    pub in_ca_w: Option<(Mat<T>, Mat<T>)>,
    pub gw_sa_kernel: Option<Tensor4<T>>,
    pub gw_ca_w: Option<(Mat<T>, Mat<T>)>,
}

impl<T: Real> AmsGrads<T> {
    fn zeros(params: &AmsParams<T>, input_dims: crate::tensor::Dims4) -> Self {
        AmsGrads {
            input: Tensor4::zeros(input_dims),
            gamma: vec![T::zero(); params.in_params.gamma.len()],
            beta: vec![T::zero(); params.in_params.beta.len()],
            in_sa_kernel: params
                .in_sa
                .as_ref()
                .map(|p| Tensor4::zeros(p.kernel.dims())),
            in_ca_w: params
                .in_ca
                .as_ref()
                .map(|p| (Mat::zeros(p.w1.rows, p.w1.cols), Mat::zeros(p.w2.rows, p.w2.cols))),
            gw_sa_kernel: params
                .gw_sa
                .as_ref()
                .map(|p| Tensor4::zeros(p.kernel.dims())),
            gw_ca_w: params
                .gw_ca
                .as_ref()
                .map(|p| (Mat::zeros(p.w1.rows, p.w1.cols), Mat::zeros(p.w2.rows, p.w2.cols))),
        }
    }
}

fn stage_attn<T: Real>(
    params: &AmsParams<T>,
    stage: Stage,
) -> (
    AttnKind,
    Option<&SpatialAttentionParams<T>>,
    Option<&ChannelAttentionParams<T>>,
) {
    match stage {
        Stage::In => {
            let kind = match (&params.in_ca, &params.in_sa) {
                (Some(_), Some(_)) => AttnKind::CaSa,
                (Some(_), None) => AttnKind::Ca,
                (None, Some(_)) => AttnKind::Sa,
                (None, None) => AttnKind::None,
            };
            (kind, params.in_sa.as_ref(), params.in_ca.as_ref())
        }
        Stage::Gw => {
            let kind = match (&params.gw_ca, &params.gw_sa) {
                (Some(_), Some(_)) => AttnKind::CaSa,
                (Some(_), None) => AttnKind::Ca,
                (None, Some(_)) => AttnKind::Sa,
                (None, None) => AttnKind::None,
            };
            (kind, params.gw_sa.as_ref(), params.gw_ca.as_ref())
        }
    }
}

/// Residual attention wrap: `f -> f + attn(f)`.
fn wrap_forward<T: Real>(
    params: &AmsParams<T>,
    stage: Stage,
    f: &Tensor4<T>,
) -> Result<(Tensor4<T>, WrapCache<T>)> {
    let (kind, sa, ca) = stage_attn(params, stage);
    match kind {
        AttnKind::None => Ok((f.clone(), WrapCache::None)),
        AttnKind::Sa => {
            let (a, cache) = spatial_attention_with_cache(f, sa.expect("sa params"))?;
            Ok((add(f, &a)?, WrapCache::Sa(cache)))
        }
        AttnKind::Ca => {
            let (a, cache) = channel_attention_with_cache(f, ca.expect("ca params"))?;
            Ok((add(f, &a)?, WrapCache::Ca(cache)))
        }
        AttnKind::CaSa => {
            let (a, ca_cache) = channel_attention_with_cache(f, ca.expect("ca params"))?;
            let t = add(f, &a)?;
            let (s, sa_cache) = spatial_attention_with_cache(&t, sa.expect("sa params"))?;
            Ok((
                add(&t, &s)?,
                WrapCache::CaSa {
                    ca: ca_cache,
                    sa: sa_cache,
                },
            ))
        }
    }
}

/// Backward of the residual attention wrap; accumulates attention parameter
/// gradients into `grads` and returns the gradient w.r.t. the wrapped input.
fn wrap_backward<T: Real>(
    params: &AmsParams<T>,
    stage: Stage,
    cache: &WrapCache<T>,
    grads: &mut AmsGrads<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let (_, sa, ca) = stage_attn(params, stage);
    let accum_sa = |grads: &mut AmsGrads<T>, k: Tensor4<T>| {
        let slot = match stage {
            Stage::In => &mut grads.in_sa_kernel,
            Stage::Gw => &mut grads.gw_sa_kernel,
        };
        let dst = slot.as_mut().expect("sa grad slot");
        for (d, s) in dst.data_mut().iter_mut().zip(k.data()) {
            *d += *s;
        }
    };
    let accum_ca = |grads: &mut AmsGrads<T>, w1: Mat<T>, w2: Mat<T>| {
        let slot = match stage {
            Stage::In => &mut grads.in_ca_w,
            Stage::Gw => &mut grads.gw_ca_w,
        };
        let (d1, d2) = slot.as_mut().expect("ca grad slot");
        for (d, s) in d1.data.iter_mut().zip(&w1.data) {
            *d += *s;
        }
        for (d, s) in d2.data.iter_mut().zip(&w2.data) {
            *d += *s;
        }
    };
    match cache {
        WrapCache::None => Ok(grad_out.clone()),
        WrapCache::Sa(sa_cache) => {
            let g = spatial_attention_backward(sa.expect("sa params"), sa_cache, grad_out);
            accum_sa(grads, g.kernel);
            add(grad_out, &g.input)
        }
        WrapCache::Ca(ca_cache) => {
            let g = channel_attention_backward(ca.expect("ca params"), ca_cache, grad_out);
            accum_ca(grads, g.w1, g.w2);
            add(grad_out, &g.input)
        }
        WrapCache::CaSa {
            ca: ca_cache,
            sa: sa_cache,
        } => {
            let gs = spatial_attention_backward(sa.expect("sa params"), sa_cache, grad_out);
            accum_sa(grads, gs.kernel);
            let d_t = add(grad_out, &gs.input)?;
            let gc = channel_attention_backward(ca.expect("ca params"), ca_cache, &d_t);
            accum_ca(grads, gc.w1, gc.w2);
            add(&d_t, &gc.input)
        }
    }
}

/// Runs one stage (operation + attention wrap), with finiteness checks that
/// name the failing stage.
fn stage_forward<T: Real>(
    params: &AmsParams<T>,
    stage: Stage,
    x: &Tensor4<T>,
) -> Result<(Tensor4<T>, StageCache<T>)> {
    match stage {
        Stage::In => {
            let (y, cache) = instance_norm_with_cache(x, &params.in_params)?;
            y.check_finite("ams:in")?;
            let (wrapped, wcache) = wrap_forward(params, Stage::In, &y)?;
            wrapped.check_finite("ams:attn_in")?;
            Ok((wrapped, StageCache::In(cache, wcache)))
        }
        Stage::Gw => {
            let (y, cache, _) = group_whiten_with_cache(x, &params.whiten_cfg)?;
            y.check_finite("ams:gw")?;
            let (wrapped, wcache) = wrap_forward(params, Stage::Gw, &y)?;
            wrapped.check_finite("ams:attn_gw")?;
            Ok((wrapped, StageCache::Gw(cache, wcache)))
        }
    }
}

/// Backward of one stage; accumulates parameter gradients and returns the
/// gradient w.r.t. the stage input.
fn stage_backward<T: Real>(
    params: &AmsParams<T>,
    cache: &StageCache<T>,
    grads: &mut AmsGrads<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    match cache {
        StageCache::In(in_cache, wcache) => {
            let d_wrapped = wrap_backward(params, Stage::In, wcache, grads, grad_out)?;
            let g = instance_norm_backward(&params.in_params, in_cache, &d_wrapped);
            for (d, s) in grads.gamma.iter_mut().zip(&g.gamma) {
                *d += *s;
            }
            for (d, s) in grads.beta.iter_mut().zip(&g.beta) {
                *d += *s;
            }
            Ok(g.input)
        }
        StageCache::Gw(gw_cache, wcache) => {
            let d_wrapped = wrap_backward(params, Stage::Gw, wcache, grads, grad_out)?;
            group_whiten_backward(gw_cache, &params.whiten_cfg, &d_wrapped)
        }
    }
}

/// Canonical block forward: tandem IN→GW with SA on IN and CA on GW.
pub fn ams_forward<T: Real>(x: &Tensor4<T>, params: &AmsParams<T>) -> Result<Tensor4<T>> {
    variant_forward(x, params, &VariantKind::canonical())
}

/// Forward pass of any variant.
pub fn variant_forward<T: Real>(
    x: &Tensor4<T>,
    params: &AmsParams<T>,
    variant: &VariantKind,
) -> Result<Tensor4<T>> {
    Ok(variant_forward_with_cache(x, params, variant)?.0)
}

/// Forward pass that also returns the cache for [`variant_backward`].
pub fn variant_forward_with_cache<T: Real>(
    x: &Tensor4<T>,
    params: &AmsParams<T>,
    variant: &VariantKind,
) -> Result<(Tensor4<T>, AmsCache<T>)> {
    params.validate(x.channels(), variant)?;
    let mut stages = Vec::new();
    let out = match variant.combination {
        Combination::None => x.clone(),
        Combination::InOnly => {
            let (y, c) = stage_forward(params, Stage::In, x)?;
            stages.push(c);
            y
        }
        Combination::GwOnly => {
            let (y, c) = stage_forward(params, Stage::Gw, x)?;
            stages.push(c);
            y
        }
        Combination::InGw => {
            let (f1, c1) = stage_forward(params, Stage::In, x)?;
            let (f2, c2) = stage_forward(params, Stage::Gw, &f1)?;
            stages.push(c1);
            stages.push(c2);
            f2
        }
        Combination::GwIn => {
            let (f1, c1) = stage_forward(params, Stage::Gw, x)?;
            let (f2, c2) = stage_forward(params, Stage::In, &f1)?;
            stages.push(c1);
            stages.push(c2);
            f2
        }
        Combination::InAndGw => {
            let (f1, c1) = stage_forward(params, Stage::In, x)?;
            let (f2, c2) = stage_forward(params, Stage::Gw, x)?;
            stages.push(c1);
            stages.push(c2);
            add(&f1, &f2)?
        }
        Combination::InXGw => {
            let (f1, c1) = stage_forward(params, Stage::In, x)?;
            let (f2, c2) = stage_forward(params, Stage::Gw, &f1)?;
            stages.push(c1);
            stages.push(c2);
            add(&f1, &f2)?
        }
        Combination::GwXIn => {
            let (f1, c1) = stage_forward(params, Stage::Gw, x)?;
            let (f2, c2) = stage_forward(params, Stage::In, &f1)?;
            stages.push(c1);
            stages.push(c2);
            add(&f1, &f2)?
        }
    };
    Ok((
        out,
        AmsCache {
            variant: *variant,
            stages,
        },
    ))
}

/// Backward pass of any variant; returns input and parameter gradients.
pub fn variant_backward<T: Real>(
    params: &AmsParams<T>,
    cache: &AmsCache<T>,
    grad_out: &Tensor4<T>,
) -> Result<AmsGrads<T>> {
    let mut grads = AmsGrads::zeros(params, grad_out.dims());
    let d_input = match cache.variant.combination {
        Combination::None => grad_out.clone(),
        Combination::InOnly | Combination::GwOnly => {
            stage_backward(params, &cache.stages[0], &mut grads, grad_out)?
        }
        Combination::InGw | Combination::GwIn => {
            let d_mid = stage_backward(params, &cache.stages[1], &mut grads, grad_out)?;
            stage_backward(params, &cache.stages[0], &mut grads, &d_mid)?
        }
        Combination::InAndGw => {
            let d_a = stage_backward(params, &cache.stages[0], &mut grads, grad_out)?;
            let d_b = stage_backward(params, &cache.stages[1], &mut grads, grad_out)?;
            add(&d_a, &d_b)?
        }
        Combination::InXGw | Combination::GwXIn => {
            // out = f1 + stage2(f1): the first stage's output gradient is the
            // direct term plus the second stage's input gradient.
            let d_via_second = stage_backward(params, &cache.stages[1], &mut grads, grad_out)?;
            let d_f1 = add(grad_out, &d_via_second)?;
            stage_backward(params, &cache.stages[0], &mut grads, &d_f1)?
        }
    };
    grads.input = d_input;
    Ok(grads)
}

/// Validates backbone insertion points for the block.
///
/// `stage_channels` are the output widths of the backbone stages (1-indexed
/// placements). Returns human-readable warnings (e.g. placing a block after
/// the final stage is allowed but flagged).
pub fn validate_placements(
    stage_channels: &[usize],
    placements: &[usize],
    group_count: usize,
) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    for &p in placements {
        if p == 0 || p > stage_channels.len() {
            return Err(CoreError::config(format!(
                "placement {p} out of range 1..={}",
                stage_channels.len()
            )));
        }
        let channels = stage_channels[p - 1];
        if group_count == 0 || channels % group_count != 0 {
            let suggestion = largest_divisor_at_most(channels, group_count.max(1));
            return Err(CoreError::config(format!(
                "stage {p} has {channels} channels, not divisible by g={group_count}; \
                 try g={suggestion}"
            )));
        }
        if p == stage_channels.len() {
            warnings.push(format!(
                "placement {p} targets the final stage; the block is normally \
                 inserted only after earlier stages"
            ));
        }
    }
    Ok(warnings)
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    let mut best = 1;
    let mut d = 1;
    while d <= cap && d <= n {
        if n % d == 0 {
            best = d;
        }
        d += 1;
    }
    best
}
