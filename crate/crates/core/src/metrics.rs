//! Retrieval evaluation: mean average precision and CMC rank-k rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gallery indices ordered by ascending Euclidean distance to `query`; equal
/// distances keep gallery order.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Result<Vec<usize>> {
    let (g, c) = gallery.dims2()?;
    if query.len() != c {
        return Err(Error::shape(format!(
            "query of dimension {} against gallery {:?}",
            query.len(),
            gallery.shape()
        )));
    }
    let dist: Vec<f64> = (0..g)
        .map(|j| {
            gallery
                .row(j)
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Precision-at-hit average over the relevant items of a ranked list, or
/// `None` when nothing in the list is relevant.
pub fn average_precision(ranked_ids: &[usize], query_id: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &id) in ranked_ids.iter().enumerate() {
        if id == query_id {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// 1-based rank of the first relevant item.
pub fn first_hit(ranked_ids: &[usize], query_id: usize) -> Option<usize> {
    ranked_ids.iter().position(|&id| id == query_id).map(|p| p + 1)
}

/// Fraction of queries whose first correct match is within rank `k`, for each
/// `k` in `k_values`. Queries without any correct match are skipped.
pub fn cmc(ranked_ids_per_query: &[Vec<usize>], query_ids: &[usize], k_values: &[usize]) -> Vec<f64> {
    let firsts: Vec<usize> = ranked_ids_per_query
        .iter()
        .zip(query_ids)
        .filter_map(|(r, &q)| first_hit(r, q))
        .collect();
    k_values
        .iter()
        .map(|&k| {
            if firsts.is_empty() {
                0.0
            } else {
                firsts.iter().filter(|&&f| f <= k).count() as f64 / firsts.len() as f64
            }
        })
        .collect()
}

/// Metrics document written by the evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    /// In query order; `null` for excluded queries.
    pub per_query_ap: Vec<Option<f64>>,
    pub excluded_queries: usize,
}

/// Query/gallery embeddings with their labels and evaluation results.
#[derive(Clone, Debug)]
pub struct RetrievalRun {
    pub query_emb: Tensor,
    pub gallery_emb: Tensor,
    pub query_ids: Vec<usize>,
    pub gallery_ids: Vec<usize>,
    pub per_query_ap: Vec<Option<f64>>,
    pub map: f64,
    /// `cmc[k - 1]` is the rank-k rate, for `k` up to the gallery size.
    pub cmc: Vec<f64>,
}

impl RetrievalRun {
    /// Evaluates every query against the whole gallery. `exclude[q][g] == true`
    /// removes gallery item `g` from query `q`'s ranking.
    pub fn evaluate(
        query_emb: Tensor,
        query_ids: Vec<usize>,
        gallery_emb: Tensor,
        gallery_ids: Vec<usize>,
        exclude: Option<&[Vec<bool>]>,
    ) -> Result<Self> {
        let (q, _) = query_emb.dims2()?;
        let (g, _) = gallery_emb.dims2()?;
        if query_ids.len() != q || gallery_ids.len() != g {
            return Err(Error::shape(format!(
                "{} query labels for {q} queries, {} gallery labels for {g} items",
                query_ids.len(),
                gallery_ids.len()
            )));
        }
        if let Some(ex) = exclude {
            if ex.len() != q || ex.iter().any(|row| row.len() != g) {
                return Err(Error::shape("exclusion mask must be queries × gallery"));
            }
        }
        let mut ranked_ids = Vec::with_capacity(q);
        for i in 0..q {
            let order = rank_gallery(query_emb.row(i), &gallery_emb)?;
            let ids: Vec<usize> = order
                .into_iter()
                .filter(|&j| exclude.is_none_or(|ex| !ex[i][j]))
                .map(|j| gallery_ids[j])
                .collect();
            ranked_ids.push(ids);
        }
        let per_query_ap: Vec<Option<f64>> = ranked_ids
            .iter()
            .zip(&query_ids)
            .map(|(r, &id)| average_precision(r, id))
            .collect();
        let aps: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
        let map = if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        };
        let ks: Vec<usize> = (1..=g.max(1)).collect();
        let cmc = cmc(&ranked_ids, &query_ids, &ks);
        Ok(Self {
            query_emb,
            gallery_emb,
            query_ids,
            gallery_ids,
            per_query_ap,
            map,
            cmc,
        })
    }

    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            len => self.cmc[k.clamp(1, len) - 1],
        }
    }

    pub fn excluded(&self) -> usize {
        self.per_query_ap.iter().filter(|a| a.is_none()).count()
    }

    pub fn report(&self) -> RetrievalReport {
        RetrievalReport {
            map: self.map,
            rank1: self.rank(1),
            rank5: self.rank(5),
            per_query_ap: self.per_query_ap.clone(),
            excluded_queries: self.excluded(),
        }
    }
}
