//! Leave-one-domain-out retrieval evaluation with repeated random
//! query/gallery splits.

use crate::backbone::Model;
use crate::data::SyntheticDataset;
use crate::error::{HarnessError, Result};
use crate::rng::Seeded;
use ams_core::matrix::Mat;
use ams_core::metrics::{retrieval_eval, RetrievalReport};
use ams_core::real::Real;
use ams_core::tensor::Tensor4;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Evaluation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of repeated random query/gallery splits to average.
    pub splits: usize,
    /// Fraction of each identity's images used as queries.
    pub query_fraction: f64,
    /// CMC ranks reported in summaries.
    pub max_rank: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            splits: 10,
            query_fraction: 0.35,
            max_rank: 10,
            seed: 9090,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub map: f64,
    pub rank1: f64,
}

/// Metrics averaged over repeated splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub splits: Vec<SplitMetrics>,
    pub mean_map: f64,
    pub sd_map: f64,
    pub mean_rank1: f64,
    pub sd_rank1: f64,
    /// Mean CMC over splits, truncated to `max_rank` (or the smallest
    /// gallery if shorter).
    pub mean_cmc: Vec<f64>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Embeds every image of a dataset with the frozen model (global average
/// pooling over the final feature map), in batches.
pub fn embed_dataset<T: Real>(
    model: &mut Model<T>,
    images: &Tensor4<f64>,
) -> Result<Mat<f64>> {
    let [n, c, h, w] = images.dims();
    let plane = c * h * w;
    let dim = model.embed_dim();
    let mut out = Mat::zeros(n, dim);
    let batch = 16usize;
    let mut start = 0;
    while start < n {
        let count = batch.min(n - start);
        let data: Vec<T> = images.data()[start * plane..(start + count) * plane]
            .iter()
            .map(|v| T::from_f64(*v))
            .collect();
        let x = Tensor4::from_vec([count, c, h, w], data).map_err(HarnessError::Core)?;
        let (embed, _) = model.forward(&x)?;
        for i in 0..count {
            for d in 0..dim {
                *out.at_mut(start + i, d) = embed.at(i, d).to_f64();
            }
        }
        start += count;
    }
    Ok(out)
}

/// Draws one query/gallery split: per identity, a `query_fraction` share of
/// its images become queries (always leaving at least one gallery item, so
/// every query id is present in the gallery).
fn split_indices(
    ids: &[usize],
    query_fraction: f64,
    rng: &mut Seeded,
) -> (Vec<usize>, Vec<usize>) {
    let max_id = ids.iter().copied().max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); max_id + 1];
    for (i, &id) in ids.iter().enumerate() {
        members[id].push(i);
    }
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for list in members.iter_mut() {
        if list.is_empty() {
            continue;
        }
        if list.len() == 1 {
            gallery.push(list[0]);
            continue;
        }
        // Shuffle identity members.
        for i in (1..list.len()).rev() {
            let j = rng.gen_range(0..=i);
            list.swap(i, j);
        }
        let nq = ((list.len() as f64 * query_fraction).round() as usize)
            .clamp(1, list.len() - 1);
        queries.extend_from_slice(&list[..nq]);
        gallery.extend_from_slice(&list[nq..]);
    }
    queries.sort_unstable();
    gallery.sort_unstable();
    (queries, gallery)
}

fn gather(embeddings: &Mat<f64>, ids: &[usize], indices: &[usize]) -> (Mat<f64>, Vec<usize>) {
    let mut m = Mat::zeros(indices.len(), embeddings.cols);
    let mut out_ids = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        m.row_mut(row).copy_from_slice(embeddings.row(i));
        out_ids.push(ids[i]);
    }
    (m, out_ids)
}

/// Evaluates embeddings over repeated random splits.
pub fn evaluate_embeddings(
    embeddings: &Mat<f64>,
    ids: &[usize],
    cfg: &EvalConfig,
    rng: &mut Seeded,
) -> Result<EvalSummary> {
    if cfg.splits == 0 {
        return Err(HarnessError::config("eval needs at least one split"));
    }
    let mut split_metrics = Vec::with_capacity(cfg.splits);
    let mut cmc_acc: Vec<f64> = Vec::new();
    let mut cmc_len = usize::MAX;
    for _ in 0..cfg.splits {
        let (q_idx, g_idx) = split_indices(ids, cfg.query_fraction, rng);
        if q_idx.is_empty() {
            return Err(HarnessError::input(
                "no identity has enough images to form a query set",
            ));
        }
        let (q, q_ids) = gather(embeddings, ids, &q_idx);
        let (g, g_ids) = gather(embeddings, ids, &g_idx);
        let report: RetrievalReport =
            retrieval_eval(&q, &q_ids, &g, &g_ids).map_err(HarnessError::Core)?;
        split_metrics.push(SplitMetrics {
            map: report.map,
            rank1: report.rank(1),
        });
        cmc_len = cmc_len.min(report.cmc.len()).min(cfg.max_rank);
        if cmc_acc.len() < report.cmc.len() {
            cmc_acc.resize(report.cmc.len(), 0.0);
        }
        for (acc, v) in cmc_acc.iter_mut().zip(&report.cmc) {
            *acc += v;
        }
    }
    let maps: Vec<f64> = split_metrics.iter().map(|s| s.map).collect();
    let r1s: Vec<f64> = split_metrics.iter().map(|s| s.rank1).collect();
    let (mean_map, sd_map) = mean_sd(&maps);
    let (mean_rank1, sd_rank1) = mean_sd(&r1s);
    let mean_cmc: Vec<f64> = cmc_acc[..cmc_len]
        .iter()
        .map(|v| v / cfg.splits as f64)
        .collect();
    Ok(EvalSummary {
        splits: split_metrics,
        mean_map,
        sd_map,
        mean_rank1,
        sd_rank1,
        mean_cmc,
    })
}

/// Embeds a held-out domain with the frozen model and evaluates retrieval.
pub fn evaluate_model<T: Real>(
    model: &mut Model<T>,
    data: &SyntheticDataset,
    cfg: &EvalConfig,
    rng: &mut Seeded,
) -> Result<EvalSummary> {
    let embeddings = embed_dataset(model, &data.images)?;
    evaluate_embeddings(&embeddings, &data.ids, cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn perfect_embeddings_score_perfectly() {
        // One-hot embeddings by identity: retrieval is exactly separable.
        let ids = vec![0, 0, 1, 1, 2, 2, 2];
        let mut e = Mat::zeros(ids.len(), 3);
        for (i, &id) in ids.iter().enumerate() {
            *e.at_mut(i, id) = 1.0;
        }
        let cfg = EvalConfig {
            splits: 5,
            ..EvalConfig::default()
        };
        let summary = evaluate_embeddings(&e, &ids, &cfg, &mut seeded(4)).unwrap();
        assert_eq!(summary.mean_map, 1.0);
        assert_eq!(summary.mean_rank1, 1.0);
        assert!(summary.mean_cmc.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn singleton_identities_stay_in_the_gallery() {
        let ids = vec![0, 0, 1];
        let mut e = Mat::zeros(3, 2);
        for i in 0..3 {
            *e.at_mut(i, 0) = i as f64;
        }
        let cfg = EvalConfig {
            splits: 3,
            ..EvalConfig::default()
        };
        // Must not error: identity 1 has a single image and is gallery-only.
        evaluate_embeddings(&e, &ids, &cfg, &mut seeded(5)).unwrap();
    }

    #[test]
    fn summary_statistics_are_consistent() {
        let ids = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let mut e = Mat::zeros(9, 4);
        for i in 0..9 {
            for d in 0..4 {
                *e.at_mut(i, d) = ((i * 4 + d) as f64 * 0.77).sin() + if ids[i] == d { 1.5 } else { 0.0 };
            }
        }
        let cfg = EvalConfig {
            splits: 6,
            ..EvalConfig::default()
        };
        let s = evaluate_embeddings(&e, &ids, &cfg, &mut seeded(6)).unwrap();
        assert_eq!(s.splits.len(), 6);
        let expect: f64 = s.splits.iter().map(|m| m.map).sum::<f64>() / 6.0;
        assert!((s.mean_map - expect).abs() < 1e-12);
        assert!(!s.mean_cmc.is_empty());
        for w in s.mean_cmc.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }
}
