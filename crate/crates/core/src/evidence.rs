//! Similarity → evidence → subjective-logic opinion.
//!
//! Evidence for a similarity `s` is `exp(tanh(s / τ_e))`, which lies in
//! `(1/e, e)`. A row of evidence values parameterizes a Dirichlet with
//! `α_j = e_j + 1` and strength `L = Σ α_j`; belief masses are `e_j / L` and
//! the leftover uncertainty mass is `N / L`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Mat64;
use crate::special::ln_gamma;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("evidence scale tau_e must lie in (0, 1), got {0}")]
    InvalidScale(f64),
    #[error("similarity {value} at ({row}, {col}) is outside [-1, 1]")]
    InvalidSimilarity { row: usize, col: usize, value: f64 },
    #[error("empty evidence row")]
    EmptyEvidence,
    #[error("evidence must be positive and finite, got {0}")]
    NonPositiveEvidence(f64),
    #[error("Dirichlet parameters must be positive and finite, got {0}")]
    NonPositiveAlpha(f64),
    #[error("point is not on the probability simplex")]
    OffSimplex,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for {len} pairs")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Tolerance on `|S_ij| - 1` before a similarity is rejected.
pub const SIMILARITY_SLACK: f64 = 1e-9;

/// Tolerance used when deciding whether a point lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceConfig {
    pub tau_e: f64,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self { tau_e: 0.015 }
    }
}

impl EvidenceConfig {
    pub fn new(tau_e: f64) -> Result<Self, EvidenceError> {
        let cfg = Self { tau_e };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvidenceError> {
        if self.tau_e > 0.0 && self.tau_e < 1.0 {
            Ok(())
        } else {
            Err(EvidenceError::InvalidScale(self.tau_e))
        }
    }
}

/// `exp(tanh(s / τ))`.
#[inline]
pub fn evidence_of(s: f64, tau_e: f64) -> f64 {
    (s / tau_e).tanh().exp()
}

/// `d/ds exp(tanh(s / τ)) = e · (1 - tanh²(s/τ)) / τ`.
#[inline]
pub fn evidence_slope(s: f64, tau_e: f64) -> f64 {
    let t = (s / tau_e).tanh();
    t.exp() * (1.0 - t * t) / tau_e
}

/// Elementwise evidence of a similarity matrix.
pub fn extract_evidence(s: &Mat64, cfg: &EvidenceConfig) -> Result<Mat64, EvidenceError> {
    cfg.validate()?;
    for i in 0..s.rows() {
        for (j, &v) in s.row(i).iter().enumerate() {
            if !(v.abs() <= 1.0 + SIMILARITY_SLACK) {
                return Err(EvidenceError::InvalidSimilarity {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    Ok(s.map(|v| evidence_of(v, cfg.tau_e)))
}

/// Subjective-logic opinion of one query over `N` candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub alpha: Vec<f64>,
    pub strength: f64,
}

impl Opinion {
    pub fn dirichlet(&self) -> DirichletParams {
        DirichletParams {
            alpha: self.alpha.clone(),
        }
    }
}

pub fn build_opinion(evidence_row: &[f64]) -> Result<Opinion, EvidenceError> {
    if evidence_row.is_empty() {
        return Err(EvidenceError::EmptyEvidence);
    }
    if let Some(&bad) = evidence_row.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(EvidenceError::NonPositiveEvidence(bad));
    }
    let alpha: Vec<f64> = evidence_row.iter().map(|e| e + 1.0).collect();
    let strength: f64 = alpha.iter().sum();
    let belief: Vec<f64> = evidence_row.iter().map(|e| e / strength).collect();
    let n = evidence_row.len() as f64;
    Ok(Opinion {
        belief,
        uncertainty: n / strength,
        alpha,
        strength,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self, EvidenceError> {
        if alpha.is_empty() {
            return Err(EvidenceError::EmptyEvidence);
        }
        if let Some(&bad) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(EvidenceError::NonPositiveAlpha(bad));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn strength(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// `ln B(α) = Σ ln Γ(α_j) - ln Γ(Σ α_j)`.
    pub fn ln_beta(&self) -> f64 {
        self.alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(self.strength())
    }
}

fn on_simplex(p: &[f64]) -> bool {
    p.iter().all(|&x| x >= -SIMPLEX_TOL && x.is_finite())
        && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

/// Log of the Dirichlet density at a point of the simplex.
///
/// Points off the simplex are rejected with [`EvidenceError::OffSimplex`];
/// use [`dirichlet_density`] for the piecewise density that is zero there.
pub fn dirichlet_log_density(p: &[f64], params: &DirichletParams) -> Result<f64, EvidenceError> {
    if p.len() != params.len() {
        return Err(EvidenceError::DimensionMismatch {
            expected: params.len(),
            got: p.len(),
        });
    }
    if !on_simplex(p) {
        return Err(EvidenceError::OffSimplex);
    }
    let mut acc = -params.ln_beta();
    for (&pj, &aj) in p.iter().zip(params.alpha()) {
        if aj != 1.0 {
            // 0^(α-1): +∞ for α < 1, 0 for α > 1
            acc += (aj - 1.0) * pj.max(0.0).ln();
        }
    }
    Ok(acc)
}

/// Dirichlet density; zero for points off the simplex.
pub fn dirichlet_density(p: &[f64], params: &DirichletParams) -> Result<f64, EvidenceError> {
    match dirichlet_log_density(p, params) {
        Ok(l) => Ok(l.exp()),
        Err(EvidenceError::OffSimplex) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Bidirectional matched-pair evidence `(E_i2t[i][i] + E_t2i[i][i]) / 2`.
pub fn pair_evidence_score(e_i2t: &Mat64, e_t2i: &Mat64, i: usize) -> Result<f64, EvidenceError> {
    let n = e_i2t.rows();
    if e_i2t.cols() != n || e_t2i.shape() != (n, n) {
        return Err(EvidenceError::DimensionMismatch {
            expected: n * n,
            got: e_t2i.rows() * e_t2i.cols(),
        });
    }
    if i >= n {
        return Err(EvidenceError::IndexOutOfRange { index: i, len: n });
    }
    Ok(0.5 * (e_i2t[(i, i)] + e_t2i[(i, i)]))
}
