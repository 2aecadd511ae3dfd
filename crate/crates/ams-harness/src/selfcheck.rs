//! Runtime self-check battery for the `check` subcommand: gradient checks,
//! normalization and whitening invariants, loss and retrieval oracles, and
//! schedule/optimizer sanity. Prints one line per check; exit 0 iff all pass.

use crate::optim::{lr_at, LrSchedule};
use crate::rng::{normal, seeded, substream};
use ams_core::ams::{variant_backward, variant_forward_with_cache, AmsParams, VariantKind};
use ams_core::gradcheck::{grad_check, DEFAULT_STEP};
use ams_core::loss::{batch_hard_triplet, softmax_cross_entropy, LossConfig};
use ams_core::matrix::{eigen_inverse_sqrt, ns_inverse_sqrt, Mat};
use ams_core::metrics::retrieval_eval;
use ams_core::norm::{
    group_merge, group_partition, group_whiten, group_whiten_backward, group_whiten_with_cache,
    instance_norm, instance_norm_backward, instance_norm_with_cache, InParams, WhitenConfig,
    WhitenMode,
};
use ams_core::tensor::Tensor4;
use rand::Rng;

type CheckFn = fn() -> Result<(), String>;

fn randn_tensor(seed: u64, dims: [usize; 4]) -> Tensor4<f64> {
    let mut rng = seeded(seed);
    Tensor4::from_fn(dims, |_, _, _, _| normal(&mut rng))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check<T>(r: ams_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn expect(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn instance_norm_statistics() -> Result<(), String> {
    let x = randn_tensor(101, [4, 8, 6, 6]);
    let p = InParams::identity(8);
    let (y, stats) = check(instance_norm(&x, &p))?;
    for b in 0..4 {
        for c in 0..8 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for h in 0..6 {
                for w in 0..6 {
                    mean += y.at(b, c, h, w);
                }
            }
            mean /= 36.0;
            for h in 0..6 {
                for w in 0..6 {
                    var += (y.at(b, c, h, w) - mean).powi(2);
                }
            }
            let std = (var / 36.0).sqrt();
            expect(mean.abs() < 1e-6, &format!("mean {mean} at ({b},{c})"))?;
            expect(
                (std - 1.0).abs() < 1e-3,
                &format!("std {std} at ({b},{c}), sigma {}", stats.std_at(b, c)),
            )?;
        }
    }
    Ok(())
}

fn instance_norm_style_removal() -> Result<(), String> {
    let x = randn_tensor(102, [2, 4, 5, 5]);
    let p = InParams::identity(4).with_epsilon(1e-9);
    let (y, _) = check(instance_norm(&x, &p))?;
    let mut rng = seeded(103);
    let mut perturbed = x.clone();
    for b in 0..2 {
        for c in 0..4 {
            let a = rng.gen_range(0.5..2.0);
            let d = rng.gen_range(-1.0..1.0);
            for h in 0..5 {
                for w in 0..5 {
                    *perturbed.at_mut(b, c, h, w) = a * x.at(b, c, h, w) + d;
                }
            }
        }
    }
    let (y2, _) = check(instance_norm(&perturbed, &p))?;
    let dev = y.max_abs_diff(&y2);
    expect(dev < 1e-6, &format!("style leak {dev}"))
}

fn whitening_output_covariance() -> Result<(), String> {
    let x = randn_tensor(104, [2, 16, 6, 6]);
    for (mode, tol) in [(WhitenMode::EigenExact, 1e-2), (WhitenMode::NewtonSchulz, 5e-2)] {
        let cfg = WhitenConfig::new(4).with_mode(mode);
        let (y, _) = check(group_whiten(&x, &cfg))?;
        let v = check(group_partition(&y, 4))?;
        let m = v.cols as f64;
        for b in 0..2 {
            for j in 0..4 {
                for k in 0..4 {
                    let rj = v.row(b, j);
                    let rk = v.row(b, k);
                    let mj: f64 = rj.iter().sum::<f64>() / m;
                    let mk: f64 = rk.iter().sum::<f64>() / m;
                    let mut cov = 0.0;
                    for i in 0..rj.len() {
                        cov += (rj[i] - mj) * (rk[i] - mk);
                    }
                    cov /= m;
                    let target = if j == k { 1.0 } else { 0.0 };
                    expect(
                        (cov - target).abs() < tol,
                        &format!("{mode:?} cov[{b}][{j}][{k}] = {cov}"),
                    )?;
                }
            }
        }
    }
    Ok(())
}

fn inverse_sqrt_route_agreement() -> Result<(), String> {
    let mut rng = seeded(105);
    for _ in 0..20 {
        let n = 4;
        let mut a = Mat::<f64>::zeros(n, n);
        for v in a.data.iter_mut() {
            *v = normal(&mut rng);
        }
        let mut s = a.matmul(&a.transpose());
        for i in 0..n {
            *s.at_mut(i, i) += 0.1;
        }
        let eig = check(eigen_inverse_sqrt(&s))?;
        let (ns, _) = check(ns_inverse_sqrt(&s, 30))?;
        let diff = eig.sub(&ns).max_abs();
        expect(diff < 1e-3, &format!("route difference {diff}"))?;
    }
    Ok(())
}

fn partition_merge_round_trip() -> Result<(), String> {
    let x = randn_tensor(106, [3, 12, 4, 5]);
    for g in [1, 2, 3, 4, 6, 12] {
        let v = check(group_partition(&x, g))?;
        let back = check(group_merge(&v, x.dims()))?;
        expect(back.data() == x.data(), &format!("round trip failed at g={g}"))?;
    }
    Ok(())
}

fn gradient_battery() -> Result<(), String> {
    // Instance norm input gradient.
    let x = randn_tensor(107, [2, 4, 3, 3]);
    let p = InParams::identity(4);
    let w = randn_tensor(108, [2, 4, 3, 3]);
    let err = check(grad_check(
        |t| {
            let (y, cache) = instance_norm_with_cache(t, &p)?;
            let g = instance_norm_backward(&p, &cache, &w);
            Ok((dot(&w, &y), g.input))
        },
        &x,
        DEFAULT_STEP,
    ))?;
    expect(err < 1e-4, &format!("instance norm gradient {err}"))?;

    // Group whitening input gradient (Newton-Schulz route).
    let cfg = WhitenConfig::new(2);
    let x = randn_tensor(109, [2, 4, 3, 3]);
    let w = randn_tensor(110, [2, 4, 3, 3]);
    let err = check(grad_check(
        |t| {
            let (y, cache, _) = group_whiten_with_cache(t, &cfg)?;
            let gx = group_whiten_backward(&cache, &cfg, &w)?;
            Ok((dot(&w, &y), gx))
        },
        &x,
        DEFAULT_STEP,
    ))?;
    expect(err < 1e-4, &format!("group whitening gradient {err}"))?;

    // Full composite block.
    let variant = VariantKind::canonical();
    let mut params = AmsParams::<f64>::for_variant(4, WhitenConfig::new(2), &variant, 3, 2)
        .map_err(|e| e.to_string())?;
    let mut rng = seeded(111);
    if let Some(sa) = params.in_sa.as_mut() {
        for v in sa.kernel.data_mut().iter_mut() {
            *v = 0.4 * normal(&mut rng);
        }
    }
    if let Some(ca) = params.gw_ca.as_mut() {
        for v in ca.w1.data.iter_mut() {
            *v = 0.4 * normal(&mut rng);
        }
        for v in ca.w2.data.iter_mut() {
            *v = 0.4 * normal(&mut rng);
        }
    }
    let x = randn_tensor(112, [2, 4, 3, 3]);
    let w = randn_tensor(113, [2, 4, 3, 3]);
    let err = check(grad_check(
        |t| {
            let (y, cache) = variant_forward_with_cache(t, &params, &variant)?;
            let g = variant_backward(&params, &cache, &w)?;
            Ok((dot(&w, &y), g.input))
        },
        &x,
        DEFAULT_STEP,
    ))?;
    expect(err < 1e-3, &format!("composite block gradient {err}"))?;
    Ok(())
}

fn loss_oracles() -> Result<(), String> {
    // Uniform logits.
    let logits = Mat::<f64>::zeros(3, 7);
    let (loss, _) = check(softmax_cross_entropy(&logits, &[0, 3, 6]))?;
    expect(
        (loss - 7.0f64.ln()).abs() < 1e-10,
        &format!("uniform CE {loss}"),
    )?;

    // Triplet versus exhaustive scan.
    let mut rng = seeded(114);
    for _ in 0..10 {
        let n = 8;
        let dims = 3;
        let mut f = Mat::<f64>::zeros(n, dims);
        for v in f.data.iter_mut() {
            *v = normal(&mut rng);
        }
        let ids = [0, 0, 1, 1, 2, 2, 3, 3];
        let cfg = LossConfig::default();
        let (loss, _) = check(batch_hard_triplet(&f, &ids, &cfg))?;
        let mut oracle = 0.0f64;
        for a in 0..n {
            let mut dp = f64::NEG_INFINITY;
            let mut dn = f64::INFINITY;
            for o in 0..n {
                if o == a {
                    continue;
                }
                let d: f64 = (0..dims)
                    .map(|k| (f.at(a, k) - f.at(o, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if ids[o] == ids[a] {
                    dp = dp.max(d);
                } else {
                    dn = dn.min(d);
                }
            }
            oracle += (dp - dn + cfg.margin).max(0.0);
        }
        expect(loss == oracle, &format!("triplet {loss} vs oracle {oracle}"))?;
    }
    Ok(())
}

fn retrieval_oracle() -> Result<(), String> {
    let mut rng = seeded(115);
    for _ in 0..10 {
        let (q_n, g_n, dim) = (3, 8, 2);
        let mut q = Mat::<f64>::zeros(q_n, dim);
        let mut g = Mat::<f64>::zeros(g_n, dim);
        for v in q.data.iter_mut() {
            *v = normal(&mut rng);
        }
        for v in g.data.iter_mut() {
            *v = normal(&mut rng);
        }
        let q_ids = vec![0, 1, 2];
        let g_ids = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let report = check(retrieval_eval(&q, &q_ids, &g, &g_ids))?;
        // Brute-force AP for query 0.
        for qi in 0..q_n {
            let mut order: Vec<usize> = (0..g_n).collect();
            order.sort_by(|&a, &b| {
                report.dist.at(qi, a)
                    .partial_cmp(&report.dist.at(qi, b))
                    .expect("finite")
                    .then(a.cmp(&b))
            });
            let mut hits = 0;
            let mut ap = 0.0;
            let mut total = 0;
            for (rank0, &gi) in order.iter().enumerate() {
                if g_ids[gi] == q_ids[qi] {
                    hits += 1;
                    total += 1;
                    ap += hits as f64 / (rank0 + 1) as f64;
                }
            }
            let ap = ap / total as f64;
            expect(
                ap == report.per_query_ap[qi],
                &format!("AP mismatch {ap} vs {}", report.per_query_ap[qi]),
            )?;
        }
        for w in report.cmc.windows(2) {
            expect(w[0] <= w[1], "CMC not monotone")?;
        }
    }
    Ok(())
}

fn schedule_sanity() -> Result<(), String> {
    let s = LrSchedule {
        base_lr: 3.5e-4,
        final_lr: 7.7e-7,
        warmup_epochs: 10,
        epochs: 60,
    };
    expect((lr_at(10, &s) - 3.5e-4).abs() < 1e-18, "warmup endpoint")?;
    expect((lr_at(60, &s) - 7.7e-7).abs() < 1e-18, "final lr")?;
    let mut prev = lr_at(10, &s);
    for e in 11..=60 {
        let lr = lr_at(e, &s);
        expect(lr <= prev, &format!("lr increased at {e}"))?;
        prev = lr;
    }
    Ok(())
}

fn whitening_per_sample_independence() -> Result<(), String> {
    let x = randn_tensor(116, [3, 4, 4, 4]);
    let cfg = WhitenConfig::new(2);
    let (y, _) = check(group_whiten(&x, &cfg))?;
    let mut x2 = x.clone();
    let mut rng = substream(117, "perturb");
    for c in 0..4 {
        for h in 0..4 {
            for w in 0..4 {
                *x2.at_mut(1, c, h, w) += normal(&mut rng);
            }
        }
    }
    let (y2, _) = check(group_whiten(&x2, &cfg))?;
    for b in [0usize, 2] {
        for c in 0..4 {
            for h in 0..4 {
                for w in 0..4 {
                    expect(
                        y.at(b, c, h, w) == y2.at(b, c, h, w),
                        "cross-sample leakage in whitening",
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Runs all checks, printing one line per check. Returns the failure count.
pub fn run_all(mut sink: impl std::io::Write) -> usize {
    let checks: &[(&str, CheckFn)] = &[
        ("instance-norm statistics", instance_norm_statistics),
        ("instance-norm style removal", instance_norm_style_removal),
        ("whitening output covariance", whitening_output_covariance),
        ("inverse-sqrt route agreement", inverse_sqrt_route_agreement),
        ("partition/merge round trip", partition_merge_round_trip),
        ("gradient battery", gradient_battery),
        ("loss oracles", loss_oracles),
        ("retrieval oracle", retrieval_oracle),
        ("lr schedule", schedule_sanity),
        ("whitening per-sample independence", whitening_per_sample_independence),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        match f() {
            Ok(()) => {
                let _ = writeln!(sink, "check {name:<36} ok");
            }
            Err(msg) => {
                failures += 1;
                let _ = writeln!(sink, "check {name:<36} FAIL: {msg}");
            }
        }
    }
    failures
}
