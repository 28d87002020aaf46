//! CSV row types. Every row carries the run id and the hash of the config
//! that produced it.

use std::path::Path;

use dura::trainer::{EpochLog, HIST_BINS};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_e: f64,
    pub l_h: f64,
    pub l_tal: f64,
    pub l_triplet: f64,
    pub l_m_i2t: f64,
    pub l_m_t2i: f64,
    pub l_kl_i2t: f64,
    pub l_kl_t2i: f64,
    pub split: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub evidence_auc: Option<f64>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub n_negatives: usize,
}

impl<'a> EpochRow<'a> {
    pub fn new(run_id: &'a str, config_hash: &'a str, l: &EpochLog) -> Self {
        Self {
            run_id,
            config_hash,
            epoch: l.epoch,
            step: l.step,
            lr: l.lr,
            loss: l.loss,
            l_e: l.terms.evidential,
            l_h: l.terms.dsh,
            l_tal: l.terms.tal,
            l_triplet: l.terms.triplet,
            l_m_i2t: l.terms.m_i2t,
            l_m_t2i: l.terms.m_t2i,
            l_kl_i2t: l.terms.kl_i2t,
            l_kl_t2i: l.terms.kl_t2i,
            split: format!("{:?}", l.split_method).to_lowercase(),
            tp: l.confusion.tp,
            fp: l.confusion.fp,
            fn_: l.confusion.fn_,
            tn: l.confusion.tn,
            evidence_auc: l.evidence_auc,
            r1: l.eval.rank1,
            r5: l.eval.rank5,
            r10: l.eval.rank10,
            map: l.eval.map,
            minp: l.eval.minp,
            n_negatives: l.n_negatives,
        }
    }
}

/// The first five columns of every sweep table identify the cell.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub noise: f64,
    pub method: &'a str,
    pub row: &'static str,
    pub epoch: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub noise: f64,
    pub method: &'a str,
    pub epoch: usize,
    pub loss: f64,
    pub r1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub evidence_auc: Option<f64>,
    pub n_negatives: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistRow<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub noise: f64,
    pub method: &'a str,
    pub epoch: usize,
    pub bin: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub clean: u64,
    pub noisy: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRow<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub noise: f64,
    pub method: &'a str,
    pub error: String,
}

/// Evidence histogram bin edges on `[1/e, e]`.
pub fn bin_edges(bin: usize) -> (f64, f64) {
    let lo = (-1f64).exp();
    let w = (1f64.exp() - lo) / HIST_BINS as f64;
    (lo + w * bin as f64, lo + w * (bin + 1) as f64)
}

pub fn hist_rows<'a>(
    run_id: &'a str,
    config_hash: &'a str,
    seed: u64,
    noise: f64,
    method: &'a str,
    l: &EpochLog,
) -> Vec<HistRow<'a>> {
    (0..HIST_BINS)
        .map(|bin| {
            let (bin_lo, bin_hi) = bin_edges(bin);
            HistRow {
                run_id,
                config_hash,
                seed,
                noise,
                method,
                epoch: l.epoch,
                bin,
                bin_lo,
                bin_hi,
                clean: l.evidence_hist_clean[bin],
                noisy: l.evidence_hist_noisy[bin],
            }
        })
        .collect()
}

/// Writes `rows` with a header. With no rows the header is derived from
/// `header` so empty tables still parse.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}
