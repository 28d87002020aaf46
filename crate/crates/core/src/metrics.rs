//! Retrieval metrics over a query → gallery ranking: Rank-k, mAP, mINP,
//! plus ROC-AUC for score-based detection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Mat64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("query {0} has no relevant gallery item")]
    QueryWithoutRelevant(usize),
    #[error("k must be >= 1")]
    InvalidK,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per query: gallery indices by descending similarity (ties by ascending
/// index) and the relevance mask, stored in ranked order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    order: Vec<Vec<usize>>,
    relevant_ranked: Vec<Vec<bool>>,
}

impl RankingResult {
    /// Ranks every gallery column for every query row of `sim`; an item is
    /// relevant when its identity equals the query's.
    pub fn from_similarity(sim: &Mat64, query_ids: &[usize], gallery_ids: &[usize]) -> Result<Self, MetricsError> {
        if sim.rows() != query_ids.len() || sim.cols() != gallery_ids.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "{}x{} similarities for {} queries and {} gallery items",
                sim.rows(),
                sim.cols(),
                query_ids.len(),
                gallery_ids.len()
            )));
        }
        let mut order = Vec::with_capacity(sim.rows());
        let mut relevant_ranked = Vec::with_capacity(sim.rows());
        for (q, &qid) in query_ids.iter().enumerate() {
            let row = sim.row(q);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            relevant_ranked.push(idx.iter().map(|&g| gallery_ids[g] == qid).collect());
            order.push(idx);
        }
        Ok(Self { order, relevant_ranked })
    }

    /// From explicit rankings; `relevant[q][g]` is indexed by gallery item.
    pub fn from_parts(order: Vec<Vec<usize>>, relevant: &[Vec<bool>]) -> Result<Self, MetricsError> {
        if order.len() != relevant.len() {
            return Err(MetricsError::ShapeMismatch("order/relevance query counts differ".into()));
        }
        let mut relevant_ranked = Vec::with_capacity(order.len());
        for (q, (o, rel)) in order.iter().zip(relevant).enumerate() {
            let mut seen = vec![false; rel.len()];
            if o.len() != rel.len() || o.iter().any(|&g| g >= rel.len() || std::mem::replace(&mut seen[g], true)) {
                return Err(MetricsError::ShapeMismatch(format!("query {q}: order is not a permutation")));
            }
            relevant_ranked.push(o.iter().map(|&g| rel[g]).collect());
        }
        Ok(Self { order, relevant_ranked })
    }

    pub fn n_queries(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self, q: usize) -> &[usize] {
        &self.order[q]
    }

    /// 1-based ranks of the relevant items of query `q`.
    pub fn hit_ranks(&self, q: usize) -> Vec<usize> {
        self.relevant_ranked[q]
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(p, _)| p + 1)
            .collect()
    }

    fn hits_checked(&self, q: usize) -> Result<Vec<usize>, MetricsError> {
        let hits = self.hit_ranks(q);
        if hits.is_empty() {
            return Err(MetricsError::QueryWithoutRelevant(q));
        }
        Ok(hits)
    }
}

/// Percentage of queries with a relevant item in the top `k`.
pub fn rank_k(result: &RankingResult, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    if result.n_queries() == 0 {
        return Err(MetricsError::NoQueries);
    }
    let hits = result
        .relevant_ranked
        .iter()
        .filter(|r| r.iter().take(k).any(|&x| x))
        .count();
    Ok(100.0 * hits as f64 / result.n_queries() as f64)
}

/// Average precision of one query from its 1-based hit ranks.
pub fn average_precision(hit_ranks: &[usize]) -> f64 {
    hit_ranks
        .iter()
        .enumerate()
        .map(|(i, &p)| (i + 1) as f64 / p as f64)
        .sum::<f64>()
        / hit_ranks.len() as f64
}

/// Inverse negative penalty: `|G| / rank of the last relevant item`.
pub fn inverse_negative_penalty(hit_ranks: &[usize]) -> f64 {
    hit_ranks.len() as f64 / *hit_ranks.last().expect("non-empty hits") as f64
}

fn mean_over_queries(result: &RankingResult, f: fn(&[usize]) -> f64) -> Result<f64, MetricsError> {
    if result.n_queries() == 0 {
        return Err(MetricsError::NoQueries);
    }
    let mut total = 0.0;
    for q in 0..result.n_queries() {
        total += f(&result.hits_checked(q)?);
    }
    Ok(100.0 * total / result.n_queries() as f64)
}

pub fn mean_ap(result: &RankingResult) -> Result<f64, MetricsError> {
    mean_over_queries(result, average_precision)
}

pub fn mean_inp(result: &RankingResult) -> Result<f64, MetricsError> {
    mean_over_queries(result, inverse_negative_penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    pub n_queries: usize,
}

pub fn evaluate(result: &RankingResult) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport {
        rank1: rank_k(result, 1)?,
        rank5: rank_k(result, 5)?,
        rank10: rank_k(result, 10)?,
        map: mean_ap(result)?,
        minp: mean_inp(result)?,
        n_queries: result.n_queries(),
    })
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_id: String,
    pub noise: f64,
    pub epoch: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub config_hash: String,
}

impl EvalRow {
    pub fn new(run_id: &str, noise: f64, epoch: usize, report: &EvalReport, config_hash: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            noise,
            epoch,
            r1: report.rank1,
            r5: report.rank5,
            r10: report.rank10,
            map: report.map,
            minp: report.minp,
            config_hash: config_hash.to_string(),
        }
    }
}

/// Probability that a random positive outscores a random negative (ties
/// count one half). `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "one label per score");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}
