//! Retrieval evaluation: mean average precision and the cumulative matching
//! characteristic (rank-k hit rates), with brute-force-verifiable semantics.

use crate::error::{CoreError, Result};
use crate::matrix::Mat;
use serde::Serialize;

/// Result of ranking a gallery against a set of queries.
#[derive(Debug, Clone)]
pub struct RetrievalReport {
    /// Euclidean distances, dims `(Q, G)`.
    pub dist: Mat<f64>,
    /// Average precision per query, in `[0, 1]`.
    pub per_query_ap: Vec<f64>,
    /// Mean of `per_query_ap`.
    pub map: f64,
    /// `cmc[k-1]` = fraction of queries with a correct match in the top k.
    pub cmc: Vec<f64>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    map: f64,
    cmc: &'a [f64],
    per_query_ap: &'a [f64],
}

impl RetrievalReport {
    /// Rank-k hit rate (1-indexed).
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k - 1]
    }

    /// JSON with keys `map`, `cmc`, `per_query_ap`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ReportJson {
            map: self.map,
            cmc: &self.cmc,
            per_query_ap: &self.per_query_ap,
        })
        .expect("report serialization cannot fail")
    }

    /// CSV with one row per rank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}

/// Ranks the gallery per query by ascending Euclidean distance (ties broken
/// by gallery index) and computes AP, mAP and the CMC curve.
///
/// AP is the mean over a query's relevant items of precision at each
/// relevant rank. Every query id must appear in the gallery.
pub fn retrieval_eval(
    query: &Mat<f64>,
    query_ids: &[usize],
    gallery: &Mat<f64>,
    gallery_ids: &[usize],
) -> Result<RetrievalReport> {
    let q_n = query.rows;
    let g_n = gallery.rows;
    if query_ids.len() != q_n || gallery_ids.len() != g_n {
        return Err(CoreError::input(format!(
            "id counts ({}, {}) do not match embedding counts ({q_n}, {g_n})",
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    if query.cols != gallery.cols {
        return Err(CoreError::input(format!(
            "query dim {} != gallery dim {}",
            query.cols, gallery.cols
        )));
    }
    for &id in query_ids {
        if !gallery_ids.contains(&id) {
            return Err(CoreError::input(format!(
                "query id {id} is absent from the gallery"
            )));
        }
    }

    let mut dist = Mat::zeros(q_n, g_n);
    for qi in 0..q_n {
        for gi in 0..g_n {
            let mut acc = 0.0f64;
            for (a, b) in query.row(qi).iter().zip(gallery.row(gi)) {
                acc += (a - b) * (a - b);
            }
            *dist.at_mut(qi, gi) = acc.sqrt();
        }
    }

    let mut per_query_ap = Vec::with_capacity(q_n);
    let mut cmc_hits = vec![0usize; g_n];
    for qi in 0..q_n {
        let mut order: Vec<usize> = (0..g_n).collect();
        order.sort_by(|&a, &b| {
            dist.at(qi, a)
                .partial_cmp(&dist.at(qi, b))
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let mut relevant_seen = 0usize;
        let mut precision_sum = 0.0f64;
        let mut first_hit: Option<usize> = None;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == query_ids[qi] {
                relevant_seen += 1;
                precision_sum += relevant_seen as f64 / (rank0 + 1) as f64;
                if first_hit.is_none() {
                    first_hit = Some(rank0);
                }
            }
        }
        let total_relevant = relevant_seen;
        per_query_ap.push(precision_sum / total_relevant as f64);
        let hit = first_hit.expect("query id verified present in gallery");
        for slot in cmc_hits.iter_mut().skip(hit) {
            *slot += 1;
        }
    }

    let map = per_query_ap.iter().sum::<f64>() / q_n as f64;
    let cmc = cmc_hits
        .iter()
        .map(|&h| h as f64 / q_n as f64)
        .collect();

    Ok(RetrievalReport {
        dist,
        per_query_ap,
        map,
        cmc,
    })
}
