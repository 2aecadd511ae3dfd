//! Finite-difference gradient checks for every backward pass in the crate.
//!
//! Each check projects the layer output onto fixed pseudo-random weights so
//! the incoming gradient is non-trivial, then compares the analytic input and
//! parameter gradients against central differences in double precision.

use ams_core::ams::{
    variant_backward, variant_forward_with_cache, AmsParams, AttnKind, Combination, VariantKind,
};
use ams_core::attention::{
    channel_attention_backward, channel_attention_with_cache, spatial_attention_backward,
    spatial_attention_with_cache, ChannelAttentionParams, SpatialAttentionParams,
};
use ams_core::conv::{conv2d, conv2d_backward};
use ams_core::gradcheck::{grad_check, DEFAULT_STEP};
use ams_core::loss::{batch_hard_triplet, softmax_cross_entropy, LossConfig};
use ams_core::matrix::Mat;
use ams_core::norm::{
    group_whiten_backward, group_whiten_with_cache, instance_norm_backward,
    instance_norm_with_cache, InParams, WhitenConfig,
};
use ams_core::tensor::{
    add_backward, mul, mul_backward, reduce_max, reduce_max_backward, reduce_mean,
    reduce_mean_backward, relu, relu_backward, scale, scale_backward, sigmoid, sigmoid_backward,
    Axes, Dims4, Tensor4,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, dims: Dims4) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| {
        // Box-Muller transform on two uniforms.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Fixed projection weights matching `dims`.
fn projection(rng: &mut ChaCha8Rng, dims: Dims4) -> Tensor4<f64> {
    randn(rng, dims)
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn elementwise_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let dims = [2, 3, 2, 2];
        let x = randn(&mut rng, dims);
        let w = projection(&mut rng, dims);

        // add (same shape): check gradient w.r.t. the first operand.
        let other = randn(&mut rng, dims);
        let err = grad_check(
            |t| {
                let y = ams_core::tensor::add(t, &other)?;
                let (ga, _) = add_backward(&w, t.dims(), other.dims());
                Ok((dot(&w, &y), ga))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "add: {err}");

        // mul with per-channel broadcast: check both operands.
        let mask = randn(&mut rng, [1, 3, 1, 1]);
        let err = grad_check(
            |t| {
                let y = mul(t, &mask)?;
                let (ga, _) = mul_backward(&w, t, &mask);
                Ok((dot(&w, &y), ga))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "mul/a: {err}");
        let err = grad_check(
            |m| {
                let y = mul(&x, m)?;
                let (_, gb) = mul_backward(&w, &x, m);
                Ok((dot(&w, &y), gb))
            },
            &mask,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "mul/mask: {err}");

        // sigmoid, relu, scale.
        let err = grad_check(
            |t| {
                let y = sigmoid(t);
                Ok((dot(&w, &y), sigmoid_backward(&w, &y)))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "sigmoid: {err}");
        let err = grad_check(
            |t| {
                let y = relu(t);
                Ok((dot(&w, &y), relu_backward(&w, t)))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "relu: {err}");
        let err = grad_check(
            |t| {
                let y = scale(t, 1.7);
                Ok((dot(&w, &y), scale_backward(&w, 1.7)))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "scale: {err}");
    }
}

#[test]
fn reduce_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for axes in [Axes::SPATIAL, Axes::CHANNEL, Axes::ALL] {
        for _ in 0..3 {
            let dims = [2, 3, 2, 3];
            let x = randn(&mut rng, dims);
            let out_dims = reduce_mean(&x, axes).unwrap().dims();
            let w = projection(&mut rng, out_dims);

            let err = grad_check(
                |t| {
                    let y = reduce_mean(t, axes)?;
                    Ok((dot(&w, &y), reduce_mean_backward(&w, t.dims(), axes)))
                },
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "mean {axes:?}: {err}");

            let err = grad_check(
                |t| {
                    let y = reduce_max(t, axes)?;
                    Ok((dot(&w, &y), reduce_max_backward(&w, t, axes)))
                },
                &x,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "max {axes:?}: {err}");
        }
    }
}

#[test]
fn conv_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let x = randn(&mut rng, [2, 3, 4, 5]);
        let kernel = randn(&mut rng, [2, 3, 3, 3]);
        let w = projection(&mut rng, [2, 2, 4, 5]);

        let err = grad_check(
            |t| {
                let y = conv2d(t, &kernel)?;
                let (gx, _) = conv2d_backward(t, &kernel, &w);
                Ok((dot(&w, &y), gx))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "conv/input: {err}");

        let err = grad_check(
            |k| {
                let y = conv2d(&x, k)?;
                let (_, gk) = conv2d_backward(&x, k, &w);
                Ok((dot(&w, &y), gk))
            },
            &kernel,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "conv/kernel: {err}");

        // Scalar sum of the output w.r.t. the kernel.
        let ones = Tensor4::full([2, 2, 4, 5], 1.0);
        let err = grad_check(
            |k| {
                let y = conv2d(&x, k)?;
                let (_, gk) = conv2d_backward(&x, k, &ones);
                Ok((y.data().iter().sum(), gk))
            },
            &kernel,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "conv/kernel-sum: {err}");
    }
}

#[test]
fn instance_norm_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..3 {
        let dims = [2, 3, 3, 4];
        let x = randn(&mut rng, dims);
        let mut params = InParams::identity(3);
        for c in 0..3 {
            params.gamma[c] = 1.0 + 0.2 * rng.gen_range(-1.0..1.0);
            params.beta[c] = 0.3 * rng.gen_range(-1.0..1.0);
        }
        let w = projection(&mut rng, dims);

        // Input gradient.
        let err = grad_check(
            |t| {
                let (y, cache) = instance_norm_with_cache(t, &params)?;
                let grads = instance_norm_backward(&params, &cache, &w);
                Ok((dot(&w, &y), grads.input))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "in/input: {err}");

        // gamma and beta gradients, packed as (1, C, 1, 1) tensors.
        let gamma_t =
            Tensor4::from_vec([1, 3, 1, 1], params.gamma.clone()).unwrap();
        let err = grad_check(
            |gt| {
                let mut p = params.clone();
                p.gamma = gt.data().to_vec();
                let (y, cache) = instance_norm_with_cache(&x, &p)?;
                let grads = instance_norm_backward(&p, &cache, &w);
                Ok((
                    dot(&w, &y),
                    Tensor4::from_vec([1, 3, 1, 1], grads.gamma).unwrap(),
                ))
            },
            &gamma_t,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "in/gamma: {err}");

        let beta_t = Tensor4::from_vec([1, 3, 1, 1], params.beta.clone()).unwrap();
        let err = grad_check(
            |bt| {
                let mut p = params.clone();
                p.beta = bt.data().to_vec();
                let (y, cache) = instance_norm_with_cache(&x, &p)?;
                let grads = instance_norm_backward(&p, &cache, &w);
                Ok((
                    dot(&w, &y),
                    Tensor4::from_vec([1, 3, 1, 1], grads.beta).unwrap(),
                ))
            },
            &beta_t,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "in/beta: {err}");
    }
}

#[test]
fn group_whiten_backward_newton_schulz() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = WhitenConfig::new(4);
    for _ in 0..3 {
        let dims = [2, 8, 3, 3];
        let x = randn(&mut rng, dims);
        let w = projection(&mut rng, dims);
        let err = grad_check(
            |t| {
                let (y, cache, _) = group_whiten_with_cache(t, &cfg)?;
                let gx = group_whiten_backward(&cache, &cfg, &w)?;
                Ok((dot(&w, &y), gx))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "gw/input: {err}");
    }
}

fn random_ca(rng: &mut ChaCha8Rng, channels: usize, r: usize) -> ChannelAttentionParams<f64> {
    let mut p = ChannelAttentionParams::zeros(channels, r).unwrap();
    for v in p.w1.data.iter_mut() {
        *v = 0.5 * rng.gen_range(-1.0..1.0);
    }
    for v in p.w2.data.iter_mut() {
        *v = 0.5 * rng.gen_range(-1.0..1.0);
    }
    p
}

fn random_sa(rng: &mut ChaCha8Rng, k: usize) -> SpatialAttentionParams<f64> {
    let mut p = SpatialAttentionParams::zeros(k).unwrap();
    for v in p.kernel.data_mut().iter_mut() {
        *v = 0.5 * rng.gen_range(-1.0..1.0);
    }
    p
}

#[test]
fn channel_attention_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..3 {
        let dims = [2, 4, 3, 3];
        let x = randn(&mut rng, dims);
        let params = random_ca(&mut rng, 4, 2);
        let w = projection(&mut rng, dims);

        let err = grad_check(
            |t| {
                let (y, cache) = channel_attention_with_cache(t, &params)?;
                let g = channel_attention_backward(&params, &cache, &w);
                Ok((dot(&w, &y), g.input))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "ca/input: {err}");

        let w1_t = Tensor4::from_vec([1, 1, 2, 4], params.w1.data.clone()).unwrap();
        let err = grad_check(
            |wt| {
                let mut p = params.clone();
                p.w1 = Mat::from_vec(2, 4, wt.data().to_vec()).unwrap();
                let (y, cache) = channel_attention_with_cache(&x, &p)?;
                let g = channel_attention_backward(&p, &cache, &w);
                Ok((
                    dot(&w, &y),
                    Tensor4::from_vec([1, 1, 2, 4], g.w1.data).unwrap(),
                ))
            },
            &w1_t,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "ca/w1: {err}");

        let w2_t = Tensor4::from_vec([1, 1, 4, 2], params.w2.data.clone()).unwrap();
        let err = grad_check(
            |wt| {
                let mut p = params.clone();
                p.w2 = Mat::from_vec(4, 2, wt.data().to_vec()).unwrap();
                let (y, cache) = channel_attention_with_cache(&x, &p)?;
                let g = channel_attention_backward(&p, &cache, &w);
                Ok((
                    dot(&w, &y),
                    Tensor4::from_vec([1, 1, 4, 2], g.w2.data).unwrap(),
                ))
            },
            &w2_t,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "ca/w2: {err}");
    }
}

#[test]
fn spatial_attention_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..3 {
        let dims = [2, 4, 4, 4];
        let x = randn(&mut rng, dims);
        let params = random_sa(&mut rng, 3);
        let w = projection(&mut rng, dims);

        let err = grad_check(
            |t| {
                let (y, cache) = spatial_attention_with_cache(t, &params)?;
                let g = spatial_attention_backward(&params, &cache, &w);
                Ok((dot(&w, &y), g.input))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "sa/input: {err}");

        let err = grad_check(
            |k| {
                let mut p = params.clone();
                p.kernel = k.clone();
                let (y, cache) = spatial_attention_with_cache(&x, &p)?;
                let g = spatial_attention_backward(&p, &cache, &w);
                Ok((dot(&w, &y), g.kernel))
            },
            &params.kernel,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "sa/kernel: {err}");
    }
}

fn random_params_for(
    rng: &mut ChaCha8Rng,
    channels: usize,
    variant: &VariantKind,
) -> AmsParams<f64> {
    let mut p = AmsParams::for_variant(channels, WhitenConfig::new(4), variant, 3, 2).unwrap();
    if let Some(sa) = &mut p.in_sa {
        *sa = random_sa(rng, 3);
    }
    if let Some(ca) = &mut p.in_ca {
        *ca = random_ca(rng, channels, 2);
    }
    if let Some(sa) = &mut p.gw_sa {
        *sa = random_sa(rng, 3);
    }
    if let Some(ca) = &mut p.gw_ca {
        *ca = random_ca(rng, channels, 2);
    }
    for c in 0..channels {
        p.in_params.gamma[c] = 1.0 + 0.2 * rng.gen_range(-1.0..1.0);
        p.in_params.beta[c] = 0.2 * rng.gen_range(-1.0..1.0);
    }
    p
}

#[test]
fn every_variant_backward_passes_composite_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let dims = [2, 8, 3, 3];
    let mut variants: Vec<VariantKind> = [
        Combination::None,
        Combination::InOnly,
        Combination::GwOnly,
        Combination::InGw,
        Combination::GwIn,
        Combination::InAndGw,
        Combination::InXGw,
        Combination::GwXIn,
    ]
    .into_iter()
    .map(VariantKind::plain)
    .collect();
    variants.push(VariantKind::canonical());
    variants.push(VariantKind {
        combination: Combination::InAndGw,
        attn_in: AttnKind::CaSa,
        attn_gw: AttnKind::CaSa,
    });

    for variant in &variants {
        let x = randn(&mut rng, dims);
        let params = random_params_for(&mut rng, 8, variant);
        let w = projection(&mut rng, dims);
        let err = grad_check(
            |t| {
                let (y, cache) = variant_forward_with_cache(t, &params, variant)?;
                let grads = variant_backward(&params, &cache, &w)?;
                Ok((dot(&w, &y), grads.input))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-3, "variant {} input: {err}", variant.name());
    }
}

#[test]
fn canonical_block_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let dims = [2, 8, 3, 3];
    let variant = VariantKind::canonical();
    let x = randn(&mut rng, dims);
    let params = random_params_for(&mut rng, 8, &variant);
    let w = projection(&mut rng, dims);

    // gamma of the IN stage.
    let gamma_t = Tensor4::from_vec([1, 8, 1, 1], params.in_params.gamma.clone()).unwrap();
    let err = grad_check(
        |gt| {
            let mut p = params.clone();
            p.in_params.gamma = gt.data().to_vec();
            let (y, cache) = variant_forward_with_cache(&x, &p, &variant)?;
            let grads = variant_backward(&p, &cache, &w)?;
            Ok((
                dot(&w, &y),
                Tensor4::from_vec([1, 8, 1, 1], grads.gamma).unwrap(),
            ))
        },
        &gamma_t,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "ams/gamma: {err}");

    // Spatial attention kernel on the IN stage.
    let kernel = params.in_sa.as_ref().unwrap().kernel.clone();
    let err = grad_check(
        |k| {
            let mut p = params.clone();
            p.in_sa.as_mut().unwrap().kernel = k.clone();
            let (y, cache) = variant_forward_with_cache(&x, &p, &variant)?;
            let grads = variant_backward(&p, &cache, &w)?;
            Ok((dot(&w, &y), grads.in_sa_kernel.unwrap()))
        },
        &kernel,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "ams/in_sa_kernel: {err}");

    // Channel attention weights on the GW stage.
    let w1 = params.gw_ca.as_ref().unwrap().w1.clone();
    let w1_t = Tensor4::from_vec([1, 1, w1.rows, w1.cols], w1.data.clone()).unwrap();
    let err = grad_check(
        |wt| {
            let mut p = params.clone();
            p.gw_ca.as_mut().unwrap().w1 =
                Mat::from_vec(w1.rows, w1.cols, wt.data().to_vec()).unwrap();
            let (y, cache) = variant_forward_with_cache(&x, &p, &variant)?;
            let grads = variant_backward(&p, &cache, &w)?;
            let (g1, _) = grads.gw_ca_w.unwrap();
            Ok((
                dot(&w, &y),
                Tensor4::from_vec([1, 1, w1.rows, w1.cols], g1.data).unwrap(),
            ))
        },
        &w1_t,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-3, "ams/gw_ca_w1: {err}");
}

#[test]
fn cross_entropy_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..3 {
        let n = 4;
        let classes = 5;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let logits_t = randn(&mut rng, [1, 1, n, classes]);
        let err = grad_check(
            |t| {
                let logits = Mat::from_vec(n, classes, t.data().to_vec()).unwrap();
                let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
                Ok((
                    loss,
                    Tensor4::from_vec([1, 1, n, classes], grad.data).unwrap(),
                ))
            },
            &logits_t,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "ce: {err}");
    }
}

#[test]
fn triplet_subgradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = LossConfig::default();
    for _ in 0..3 {
        let n = 8;
        let dim = 4;
        let ids = [0, 0, 0, 0, 1, 1, 1, 1];
        let feats_t = randn(&mut rng, [1, 1, n, dim]);
        let err = grad_check(
            |t| {
                let f = Mat::from_vec(n, dim, t.data().to_vec()).unwrap();
                let (loss, grad) = batch_hard_triplet(&f, &ids, &cfg)?;
                Ok((loss, Tensor4::from_vec([1, 1, n, dim], grad.data).unwrap()))
            },
            &feats_t,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "triplet: {err}");
    }
}

#[test]
fn instance_norm_then_sum_of_squares_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let params = InParams::identity(2);
    let x = randn(&mut rng, [1, 2, 2, 3]);
    let err = grad_check(
        |t| {
            let (y, cache) = instance_norm_with_cache(t, &params)?;
            let value: f64 = y.data().iter().map(|v| v * v).sum();
            let gout = y.map(|v| 2.0 * v);
            let grads = instance_norm_backward(&params, &cache, &gout);
            Ok((value, grads.input))
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "in+sumsq: {err}");
}
