//! Property tests for the structural invariants of the crate.

use ams_core::ams::{variant_forward, AmsParams, Combination, VariantKind};
use ams_core::loss::{batch_hard_triplet, LossConfig};
use ams_core::matrix::Mat;
use ams_core::metrics::retrieval_eval;
use ams_core::norm::{
    group_merge, group_partition, group_whiten, instance_norm, InParams, WhitenConfig, WhitenMode,
};
use ams_core::tensor::{mul, mul_backward, Tensor4};
use proptest::prelude::*;

fn hash_noise(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |b, c, h, w| {
        let mut z = (((b * dims[1] + c) * dims[2] + h) * dims[3] + w) as u64
            + seed.wrapping_mul(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        (z >> 33) as f64 / (1u64 << 30) as f64 - 1.0
    })
}

#[test]
fn every_variant_is_per_sample_independent() {
    let dims = [3, 8, 3, 4];
    let x = hash_noise(dims, 1);
    let mut perturbed = x.clone();
    for c in 0..8 {
        for h in 0..3 {
            for w in 0..4 {
                *perturbed.at_mut(1, c, h, w) += 0.37 * (c + h + w) as f64;
            }
        }
    }
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
    for variant in &variants {
        let params =
            AmsParams::<f64>::for_variant(8, WhitenConfig::new(4), variant, 3, 2).unwrap();
        let y = variant_forward(&x, &params, variant).unwrap();
        let y2 = variant_forward(&perturbed, &params, variant).unwrap();
        for b in [0usize, 2] {
            for c in 0..8 {
                for h in 0..3 {
                    for w in 0..4 {
                        assert_eq!(
                            y.at(b, c, h, w),
                            y2.at(b, c, h, w),
                            "variant {} leaked across samples",
                            variant.name()
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn canonical_tandem_removes_per_channel_style() {
    // GW(IN(x)) is unchanged under per-channel-per-sample affine maps of the
    // input: IN removes the perturbation before the whitening sees it.
    let dims = [2, 8, 4, 4];
    let x = hash_noise(dims, 2);
    let variant = VariantKind::plain(Combination::InGw);
    let mut params =
        AmsParams::<f64>::for_variant(8, WhitenConfig::new(4), &variant, 3, 2).unwrap();
    params.in_params.epsilon = 1e-9;
    let y = variant_forward(&x, &params, &variant).unwrap();

    let mut styled = x.clone();
    for b in 0..2 {
        for c in 0..8 {
            let a = 0.5 + 1.4 * ((b * 8 + c) as f64 * 0.7).sin().abs();
            let d = ((b + c) as f64 * 0.31).cos();
            for h in 0..4 {
                for w in 0..4 {
                    *styled.at_mut(b, c, h, w) = a * x.at(b, c, h, w) + d;
                }
            }
        }
    }
    let y2 = variant_forward(&styled, &params, &variant).unwrap();
    let dev = y.max_abs_diff(&y2);
    assert!(dev < 1e-5, "composite style leak {dev}");
}

#[test]
fn forward_passes_are_deterministic() {
    let dims = [2, 8, 3, 4];
    let x = hash_noise(dims, 3);
    let variant = VariantKind::canonical();
    let params = AmsParams::<f64>::for_variant(8, WhitenConfig::new(4), &variant, 3, 2).unwrap();
    let a = variant_forward(&x, &params, &variant).unwrap();
    let b = variant_forward(&x, &params, &variant).unwrap();
    assert_eq!(a.data(), b.data());
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partition_merge_round_trip(
        b in 1..4usize,
        c in 1..24usize,
        h in 1..5usize,
        w in 1..5usize,
        g_pick in 0..16usize,
        seed in 0..1_000u64,
    ) {
        let ds = divisors(c);
        let g = ds[g_pick % ds.len()];
        let x = Tensor4::from_fn([b, c, h, w], |bi, ci, hi, wi| {
            let t = ((bi * 131 + ci * 31 + hi * 7 + wi) as u64).wrapping_mul(seed + 1);
            (t % 10_000) as f64 * 1e-3 - 5.0
        });
        let view = group_partition(&x, g).unwrap();
        prop_assert_eq!(view.groups, g);
        prop_assert_eq!(view.cols, (c / g) * h * w);
        let back = group_merge(&view, x.dims()).unwrap();
        // Bit-exact round trip.
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn ones_mask_is_identity_with_transparent_backward(
        b in 1..3usize,
        c in 1..6usize,
        h in 1..4usize,
        w in 1..4usize,
        seed in 0..1_000u64,
    ) {
        let x = Tensor4::from_fn([b, c, h, w], |bi, ci, hi, wi| {
            (((bi * 7 + ci * 5 + hi * 3 + wi) as u64).wrapping_mul(seed + 3) % 997) as f64 * 0.01
                - 4.0
        });
        let mask = Tensor4::full([1, c, 1, 1], 1.0);
        let y = mul(&x, &mask).unwrap();
        prop_assert_eq!(y.data(), x.data());
        let gout = x.map(|v| v * 0.5 + 1.0);
        let (gx, _) = mul_backward(&gout, &x, &mask);
        prop_assert_eq!(gx.data(), gout.data());
    }

    #[test]
    fn instance_norm_standardizes_and_ignores_affine_style(
        seed in 0..500u64,
        gain_milli in 500..2_000u64,
        shift_milli in -1_000..1_000i64,
    ) {
        let dims = [2, 3, 4, 4];
        let x = Tensor4::from_fn(dims, |b, c, h, w| {
            let mut z = (((b * 3 + c) * 4 + h) * 4 + w) as u64 + seed.wrapping_mul(0x9e37);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            (z >> 33) as f64 / (1u64 << 30) as f64 - 1.0
        });
        // Small epsilon realizes the epsilon -> 0 style-removal idealization.
        let p = InParams::identity(3).with_epsilon(1e-9);
        let (y, stats) = instance_norm(&x, &p).unwrap();

        // Per-(b, c): output mean ~ 0 and std ~ sigma/(sigma+eps) ~ 1.
        let plane = 16;
        for b in 0..2 {
            for c in 0..3 {
                let mut mean = 0.0;
                for h in 0..4 {
                    for w in 0..4 {
                        mean += y.at(b, c, h, w);
                    }
                }
                mean /= plane as f64;
                prop_assert!(mean.abs() < 1e-6, "mean {mean}");
                let mut var = 0.0;
                for h in 0..4 {
                    for w in 0..4 {
                        var += (y.at(b, c, h, w) - mean).powi(2);
                    }
                }
                let std = (var / plane as f64).sqrt();
                let sigma = stats.std_at(b, c);
                let expect = sigma / (sigma + 1e-9);
                prop_assert!((std - expect).abs() < 1e-6, "std {std} vs {expect}");
            }
        }

        // Per-(b, c) affine perturbation a*x + d leaves the output unchanged.
        let a = gain_milli as f64 * 1e-3;
        let d = shift_milli as f64 * 1e-3;
        let perturbed = x.map(|v| a * v + d);
        let (y2, _) = instance_norm(&perturbed, &p).unwrap();
        prop_assert!(y.max_abs_diff(&y2) < 1e-6, "style leak {}", y.max_abs_diff(&y2));
    }

    #[test]
    fn triplet_loss_is_permutation_invariant(seed in 0..500u64, perm_seed in 0..500u64) {
        let n = 8;
        let dim = 3;
        let ids = [0usize, 0, 1, 1, 2, 2, 3, 3];
        let mut f = Mat::<f64>::zeros(n, dim);
        for (i, v) in f.data.iter_mut().enumerate() {
            let z = (i as u64 + 1).wrapping_mul(seed + 17).wrapping_mul(0x9e3779b97f4a7c15);
            *v = (z >> 40) as f64 / (1u64 << 23) as f64 - 1.0;
        }
        let cfg = LossConfig::default();
        let (base, _) = batch_hard_triplet(&f, &ids, &cfg).unwrap();

        // Apply a pseudo-random permutation.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = ((perm_seed as usize).wrapping_mul(31).wrapping_add(i * 7)) % (i + 1);
            order.swap(i, j);
        }
        let mut f2 = Mat::<f64>::zeros(n, dim);
        let mut ids2 = vec![0usize; n];
        for (new_i, &old_i) in order.iter().enumerate() {
            f2.row_mut(new_i).copy_from_slice(f.row(old_i));
            ids2[new_i] = ids[old_i];
        }
        let (permuted, _) = batch_hard_triplet(&f2, &ids2, &cfg).unwrap();
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn retrieval_is_invariant_under_orthogonal_transforms(
        seed in 0..300u64,
        angle_milli in 0..6_283u64,
    ) {
        let q_n = 4;
        let g_n = 9;
        let dim = 3;
        let value = |i: usize, j: usize| {
            let z = ((i * dim + j) as u64 + 1)
                .wrapping_mul(seed + 29)
                .wrapping_mul(0x2545f4914f6cdd1d);
            (z >> 40) as f64 / (1u64 << 23) as f64 - 1.0
        };
        let mut query = Mat::<f64>::zeros(q_n, dim);
        let mut gallery = Mat::<f64>::zeros(g_n, dim);
        for i in 0..q_n {
            for j in 0..dim {
                *query.at_mut(i, j) = value(i, j);
            }
        }
        for i in 0..g_n {
            for j in 0..dim {
                *gallery.at_mut(i, j) = value(i + 100, j);
            }
        }
        let q_ids = vec![0, 1, 2, 0];
        let g_ids = vec![0, 1, 2, 0, 1, 2, 3, 4, 0];
        let base = retrieval_eval(&query, &q_ids, &gallery, &g_ids).unwrap();

        // Rotate all embeddings by a common Givens rotation in dims (0, 2).
        let theta = angle_milli as f64 * 1e-3;
        let (s, c) = theta.sin_cos();
        let rotate = |m: &Mat<f64>| {
            let mut out = m.clone();
            for i in 0..m.rows {
                let a = m.at(i, 0);
                let b = m.at(i, 2);
                *out.at_mut(i, 0) = c * a - s * b;
                *out.at_mut(i, 2) = s * a + c * b;
            }
            out
        };
        let rotated =
            retrieval_eval(&rotate(&query), &q_ids, &rotate(&gallery), &g_ids).unwrap();
        prop_assert!((base.map - rotated.map).abs() < 1e-9);
        for (a, b) in base.cmc.iter().zip(&rotated.cmc) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for w in rotated.cmc.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn whitening_is_invariant_to_group_mixing(seed in 0..200u64) {
        // Mixing the group rows by an invertible matrix must not change the
        // fact that the output group covariance is the identity.
        let dims = [1, 4, 6, 6];
        let g = 4;
        let x = Tensor4::from_fn(dims, |b, c, h, w| {
            let mut z = (((b * 4 + c) * 6 + h) * 6 + w) as u64 + seed.wrapping_mul(0x85eb);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            (z >> 33) as f64 / (1u64 << 30) as f64 - 1.0
        });
        // Strictly diagonally dominant mixing keeps the problem well
        // conditioned: off-diagonal rows sum to at most 0.2.
        let mut mix = Mat::<f64>::identity(g);
        for r in 0..g {
            for c in 0..g {
                let z = ((r * g + c) as u64 + 3).wrapping_mul(seed + 7).wrapping_mul(0x9e3779b9);
                *mix.at_mut(r, c) += 0.2 / g as f64 * ((z >> 33) as f64 / (1u64 << 30) as f64 - 1.0);
            }
        }
        let view = group_partition(&x, g).unwrap();
        let mut mixed_view = view.clone();
        for j in 0..g {
            for i in 0..view.cols {
                let mut acc = 0.0;
                for k in 0..g {
                    acc += mix.at(j, k) * view.row(0, k)[i];
                }
                mixed_view.row_mut(0, j)[i] = acc;
            }
        }
        let mixed = group_merge(&mixed_view, dims).unwrap();

        let cfg = WhitenConfig::new(g)
            .with_mode(WhitenMode::EigenExact)
            .with_epsilon(1e-8);
        for input in [&x, &mixed] {
            let (y, _) = group_whiten(input, &cfg).unwrap();
            let v = group_partition(&y, g).unwrap();
            let m = v.cols as f64;
            for j in 0..g {
                for k in 0..g {
                    let rj = v.row(0, j);
                    let rk = v.row(0, k);
                    let mj: f64 = rj.iter().sum::<f64>() / m;
                    let mk: f64 = rk.iter().sum::<f64>() / m;
                    let mut cov = 0.0;
                    for i in 0..rj.len() {
                        cov += (rj[i] - mj) * (rk[i] - mk);
                    }
                    cov /= m;
                    let target = if j == k { 1.0 } else { 0.0 };
                    prop_assert!((cov - target).abs() < 1e-6, "cov[{}][{}] = {}", j, k, cov);
                }
            }
        }
    }
}
