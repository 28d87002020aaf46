//! Loss terms over a batch similarity matrix `S` (rows are images, columns
//! are texts), each returning its value and the analytic gradient `∂L/∂S`.
//!
//! * evidential: Dirichlet mean-squared loss plus a KL pull toward the
//!   uniform Dirichlet, in both retrieval directions;
//! * dynamic softmax hinge (DSH): hinge against a temperature-softened max
//!   over the `n` hardest negatives, with `n` annealed over training steps;
//! * triplet alignment (TAL): hinge of the averaged positive similarity
//!   against a log-sum-exp over every other-identity entry of the row/column;
//! * hardest-negative triplet: the comparison baseline.
//!
//! Hinges use `[x]₊` with zero subgradient at `x = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::{evidence_of, evidence_slope, EvidenceConfig, EvidenceError, DirichletParams};
use crate::numeric::{logsumexp, softmax, top_k_indices, Mat64};
use crate::special::{digamma, ln_gamma, trigamma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("target vector is not one-hot")]
    NotOneHot,
    #[error("Dirichlet parameters must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("similarity matrix must be square and match {labels} labels, got {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, labels: usize },
    #[error("query {0} has no negative in the batch")]
    NoNegatives(usize),
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// Per-batch supervision. Pair `i` couples image `i` with text
/// `pair_index[i]`; both carry `identity[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLabels {
    pair_index: Vec<usize>,
    identity: Vec<usize>,
    treat_as_noisy: Vec<bool>,
    text_identity: Vec<usize>,
    text_noisy: Vec<bool>,
}

impl BatchLabels {
    pub fn new(
        pair_index: Vec<usize>,
        identity: Vec<usize>,
        treat_as_noisy: Vec<bool>,
    ) -> Result<Self, LossError> {
        let k = pair_index.len();
        if identity.len() != k || treat_as_noisy.len() != k {
            return Err(LossError::InvalidLabels(format!(
                "length mismatch: {} pairs, {} identities, {} flags",
                k,
                identity.len(),
                treat_as_noisy.len()
            )));
        }
        let mut seen = vec![false; k];
        for &t in &pair_index {
            if t >= k || seen[t] {
                return Err(LossError::InvalidLabels(
                    "pair_index must be a permutation of 0..K".into(),
                ));
            }
            seen[t] = true;
        }
        let mut text_identity = vec![0; k];
        let mut text_noisy = vec![false; k];
        for i in 0..k {
            text_identity[pair_index[i]] = identity[i];
            text_noisy[pair_index[i]] = treat_as_noisy[i];
        }
        Ok(Self {
            pair_index,
            identity,
            treat_as_noisy,
            text_identity,
            text_noisy,
        })
    }

    /// Image `i` paired with text `i`, nothing flagged.
    pub fn aligned(identity: Vec<usize>) -> Self {
        let k = identity.len();
        Self::new((0..k).collect(), identity, vec![false; k]).expect("identity permutation")
    }

    pub fn with_noisy(mut self, flags: Vec<bool>) -> Result<Self, LossError> {
        if flags.len() != self.len() {
            return Err(LossError::InvalidLabels("flag count".into()));
        }
        self.treat_as_noisy = flags;
        Self::new(self.pair_index, self.identity, self.treat_as_noisy)
    }

    pub fn len(&self) -> usize {
        self.pair_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_index.is_empty()
    }

    pub fn pair_index(&self) -> &[usize] {
        &self.pair_index
    }

    pub fn identity(&self) -> &[usize] {
        &self.identity
    }

    pub fn treat_as_noisy(&self) -> &[bool] {
        &self.treat_as_noisy
    }

    /// One-hot target of image query `i` over the texts.
    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.len()];
        y[self.pair_index[i]] = 1.0;
        y
    }
}

/// Step-annealed count of hardest negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DshSchedule {
    pub batch_size: usize,
    pub eta: f64,
    pub mu: usize,
    pub step: u64,
}

impl DshSchedule {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.mu == 0 || self.mu > self.batch_size {
            return Err(LossError::InvalidConfig(format!(
                "DSH lower bound mu={} must lie in [1, K={}]",
                self.mu, self.batch_size
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(LossError::InvalidConfig(format!("DSH eta={} must be >= 0", self.eta)));
        }
        Ok(())
    }
}

/// `n = max(⌈K - η·step⌉, μ)`, at least 1. Loss functions further clamp
/// it to the number of negatives a query actually has.
pub fn dsh_negative_count(sched: &DshSchedule) -> usize {
    let raw = (sched.batch_size as f64 - sched.eta * sched.step as f64).ceil();
    let n = if raw.is_finite() && raw > 0.0 { raw as usize } else { 0 };
    n.max(sched.mu).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// DSH margin.
    pub gamma: f64,
    /// TAL margin.
    pub margin: f64,
    /// DSH softening temperature.
    pub tau_h: f64,
    /// TAL temperature.
    pub tau_t: f64,
    /// Evidence scale.
    pub tau_e: f64,
    /// KL weight once annealing completes.
    pub lambda2: f64,
    /// Epochs over which λ₂ ramps linearly from 0; 0 disables the ramp.
    pub lambda2_anneal_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            margin: 0.1,
            tau_h: 0.1,
            tau_t: 0.015,
            tau_e: 0.1,
            lambda2: 0.1,
            lambda2_anneal_epochs: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |what: &str, v: f64| Err(LossError::InvalidConfig(format!("{what} = {v}")));
        if !(self.gamma >= 0.0) {
            return bad("gamma", self.gamma);
        }
        if !(self.margin >= 0.0) {
            return bad("margin", self.margin);
        }
        if !(self.tau_h > 0.0) {
            return bad("tau_h", self.tau_h);
        }
        if !(self.tau_t > 0.0) {
            return bad("tau_t", self.tau_t);
        }
        if !(self.lambda2 >= 0.0) {
            return bad("lambda2", self.lambda2);
        }
        EvidenceConfig::new(self.tau_e)?;
        Ok(())
    }

    /// λ₂ in effect at `epoch`: `min(1, epoch / E) · λ₂`.
    pub fn lambda2_at(&self, epoch: usize) -> f64 {
        if self.lambda2_anneal_epochs == 0 {
            self.lambda2
        } else {
            self.lambda2 * (epoch as f64 / self.lambda2_anneal_epochs as f64).min(1.0)
        }
    }

    /// Copy with the annealed λ₂ for `epoch` frozen in.
    pub fn at_epoch(&self, epoch: usize) -> LossConfig {
        LossConfig {
            lambda2: self.lambda2_at(epoch),
            lambda2_anneal_epochs: 0,
            ..*self
        }
    }

    pub fn evidence(&self) -> EvidenceConfig {
        EvidenceConfig { tau_e: self.tau_e }
    }
}

/// Named breakdown of a loss evaluation. KL entries are unweighted means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub evidential: f64,
    pub dsh: f64,
    pub tal: f64,
    pub triplet: f64,
    pub m_i2t: f64,
    pub m_t2i: f64,
    pub kl_i2t: f64,
    pub kl_t2i: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.evidential += o.evidential;
        self.dsh += o.dsh;
        self.tal += o.tal;
        self.triplet += o.triplet;
        self.m_i2t += o.m_i2t;
        self.m_t2i += o.m_t2i;
        self.kl_i2t += o.kl_i2t;
        self.kl_t2i += o.kl_t2i;
    }

    pub fn scaled(&self, f: f64) -> LossTerms {
        LossTerms {
            evidential: self.evidential * f,
            dsh: self.dsh * f,
            tal: self.tal * f,
            triplet: self.triplet * f,
            m_i2t: self.m_i2t * f,
            m_t2i: self.m_t2i * f,
            kl_i2t: self.kl_i2t * f,
            kl_t2i: self.kl_t2i * f,
        }
    }

    pub fn accumulate(&mut self, o: &LossTerms) {
        self.add(o)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_s: Mat64,
    pub per_term: LossTerms,
    /// Smallest `|argument|` over every hinge evaluated (infinite if none);
    /// the loss is non-differentiable where this is 0.
    pub kink_distance: f64,
}

impl LossReport {
    fn zero(k: usize) -> Self {
        Self {
            value: 0.0,
            grad_s: Mat64::zeros(k, k),
            per_term: LossTerms::default(),
            kink_distance: f64::INFINITY,
        }
    }

    fn absorb(&mut self, other: LossReport) {
        self.value += other.value;
        self.grad_s.add_assign(&other.grad_s);
        self.per_term.add(&other.per_term);
        self.kink_distance = self.kink_distance.min(other.kink_distance);
    }
}

fn one_hot_target(y: &[f64]) -> Result<usize, LossError> {
    let mut target = None;
    for (j, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if target.is_some() {
                return Err(LossError::NotOneHot);
            }
            target = Some(j);
        } else if v != 0.0 {
            return Err(LossError::NotOneHot);
        }
    }
    target.ok_or(LossError::NotOneHot)
}

fn check_alpha(alpha: &DirichletParams, y: &[f64]) -> Result<usize, LossError> {
    if alpha.len() != y.len() {
        return Err(LossError::InvalidLabels(format!(
            "alpha has {} entries, target {}",
            alpha.len(),
            y.len()
        )));
    }
    one_hot_target(y)
}

/// Dirichlet mean-squared loss `E‖y - p‖²` for target index `t`, with its
/// gradient with respect to `α`.
fn mse_dirichlet(alpha: &[f64], t: usize) -> (f64, Vec<f64>) {
    let l: f64 = alpha.iter().sum();
    let p: Vec<f64> = alpha.iter().map(|a| a / l).collect();
    let q: f64 = p.iter().map(|x| x * x).sum();
    // bias: Σ (y_j - p_j)² = 1 - 2 p_t + Σ p²; variance: (1 - Σ p²) / (L + 1)
    let value = 1.0 - 2.0 * p[t] + q + (1.0 - q) / (l + 1.0);
    let shrink = 1.0 - 1.0 / (l + 1.0);
    let var_slope = (1.0 - q) / ((l + 1.0) * (l + 1.0));
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let dpt = (if k == t { 1.0 } else { 0.0 } - p[t]) / l;
            -2.0 * dpt + 2.0 * (pk - q) / l * shrink - var_slope
        })
        .collect();
    (value, grad)
}

/// `KL(Dir(α) ‖ Dir(1))` and its gradient in `α`.
fn kl_to_uniform(alpha: &[f64]) -> (f64, Vec<f64>) {
    if alpha.iter().all(|&a| a == 1.0) {
        return (0.0, vec![0.0; alpha.len()]);
    }
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma(s);
    let mut value = ln_gamma(s) - ln_gamma(k);
    let mut excess = 0.0;
    for &a in alpha {
        value += -ln_gamma(a) + (a - 1.0) * (digamma(a) - psi_s);
        excess += a - 1.0;
    }
    let tri_s = trigamma(s);
    let grad = alpha
        .iter()
        .map(|&a| (a - 1.0) * trigamma(a) - tri_s * excess)
        .collect();
    (value.max(0.0), grad)
}

/// KL with the target coordinate of `α` replaced by 1 (`α̃ = y + (1-y)⊙α`).
fn kl_masked(alpha: &[f64], t: usize) -> (f64, Vec<f64>) {
    let mut tilde = alpha.to_vec();
    tilde[t] = 1.0;
    let (v, mut g) = kl_to_uniform(&tilde);
    g[t] = 0.0;
    (v, g)
}

/// Dirichlet mean-squared loss; returns the value and `∂L/∂α`.
pub fn loss_m(alpha: &DirichletParams, y: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    let t = check_alpha(alpha, y)?;
    Ok(mse_dirichlet(alpha.alpha(), t))
}

/// KL of the target-masked Dirichlet to the uniform one; returns the value
/// and `∂L/∂α` (zero in the target coordinate).
pub fn loss_kl(alpha: &DirichletParams, y: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    let t = check_alpha(alpha, y)?;
    Ok(kl_masked(alpha.alpha(), t))
}

fn check_square(s: &Mat64, labels: &BatchLabels) -> Result<usize, LossError> {
    let k = labels.len();
    if s.rows() != k || s.cols() != k || k == 0 {
        return Err(LossError::ShapeMismatch {
            rows: s.rows(),
            cols: s.cols(),
            labels: k,
        });
    }
    Ok(k)
}

/// Bidirectional evidential loss, averaged over the `K` pairs.
///
/// Pairs flagged `treat_as_noisy` get only the KL pull, applied to the full
/// `α` (no trusted target), which drives their evidence toward uniform.
pub fn loss_evidential(s: &Mat64, labels: &BatchLabels, cfg: &LossConfig) -> Result<LossReport, LossError> {
    let k = check_square(s, labels)?;
    let ecfg = cfg.evidence();
    let evidence = crate::evidence::extract_evidence(s, &ecfg)?;
    let slope = s.map(|v| evidence_slope(v, cfg.tau_e));
    let lambda2 = cfg.lambda2;
    let inv_k = 1.0 / k as f64;

    let mut out = LossReport::zero(k);
    let mut alpha = vec![0.0; k];

    // (value of L_m, value of KL, weighted total, ∂total/∂α)
    let query = |alpha: &[f64], target: usize, noisy: bool| -> (f64, f64, f64, Vec<f64>) {
        if noisy {
            let (kl, g) = kl_to_uniform(alpha);
            (0.0, kl, lambda2 * kl, g.into_iter().map(|x| lambda2 * x).collect())
        } else {
            let (m, gm) = mse_dirichlet(alpha, target);
            let (kl, gk) = kl_masked(alpha, target);
            let g = gm.iter().zip(&gk).map(|(a, b)| a + lambda2 * b).collect();
            (m, kl, m + lambda2 * kl, g)
        }
    };

    for i in 0..k {
        let t = labels.pair_index[i];
        let noisy = labels.treat_as_noisy[i];

        // image i → texts
        for (a, e) in alpha.iter_mut().zip(evidence.row(i)) {
            *a = e + 1.0;
        }
        let (m, kl, v, g) = query(&alpha, t, noisy);
        out.per_term.m_i2t += m * inv_k;
        out.per_term.kl_i2t += kl * inv_k;
        out.value += v * inv_k;
        for j in 0..k {
            out.grad_s[(i, j)] += g[j] * slope[(i, j)] * inv_k;
        }

        // text t → images
        for (j, a) in alpha.iter_mut().enumerate() {
            *a = evidence[(j, t)] + 1.0;
        }
        let (m, kl, v, g) = query(&alpha, i, noisy);
        out.per_term.m_t2i += m * inv_k;
        out.per_term.kl_t2i += kl * inv_k;
        out.value += v * inv_k;
        for j in 0..k {
            out.grad_s[(j, t)] += g[j] * slope[(j, t)] * inv_k;
        }
    }
    out.per_term.evidential = out.value;
    Ok(out)
}

/// One hinge `[margin - positive + τ·lse(negatives/τ)]₊`; on activation adds
/// its gradient (scaled by `scale`) into `grad` through the supplied cell
/// addresses. Returns the raw hinge argument.
fn soft_hinge(
    grad: &mut Mat64,
    margin: f64,
    positive: (usize, usize, f64),
    pool: &[(usize, usize)],
    pool_values: &[f64],
    tau: f64,
    scale: f64,
) -> f64 {
    let lse = logsumexp(pool_values, tau).expect("non-empty pool, positive temperature");
    let arg = margin - positive.2 + lse;
    if arg > 0.0 {
        grad[(positive.0, positive.1)] -= scale;
        let w = softmax(pool_values, tau).expect("non-empty pool");
        for (&(r, c), wj) in pool.iter().zip(w) {
            grad[(r, c)] += scale * wj;
        }
    }
    arg
}

/// Dynamic softmax hinge loss over the `n` hardest in-batch negatives.
///
/// Negatives exclude every item sharing the anchor's identity. Pairs flagged
/// noisy are skipped as anchors but stay in the negative pools. The loss is
/// the mean over anchors of the two directional hinges.
pub fn loss_dsh(
    s: &Mat64,
    labels: &BatchLabels,
    sched: &DshSchedule,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    let k = check_square(s, labels)?;
    sched.validate()?;
    let n_base = dsh_negative_count(sched);
    let anchors: Vec<usize> = (0..k).filter(|&i| !labels.treat_as_noisy[i]).collect();
    let mut out = LossReport::zero(k);
    if anchors.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / anchors.len() as f64;

    let mut cells = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    for &i in &anchors {
        let t = labels.pair_index[i];
        let id = labels.identity[i];

        for direction in 0..2 {
            cells.clear();
            values.clear();
            for j in 0..k {
                let (cell, other_id) = if direction == 0 {
                    ((i, j), labels.text_identity[j])
                } else {
                    ((j, t), labels.identity[j])
                };
                if other_id != id {
                    cells.push(cell);
                    values.push(s[cell]);
                }
            }
            if cells.is_empty() {
                return Err(LossError::NoNegatives(i));
            }
            let n = n_base.min(cells.len());
            let hard = top_k_indices(&values, n).expect("1 <= n <= len");
            let pool: Vec<(usize, usize)> = hard.iter().map(|&h| cells[h]).collect();
            let pool_values: Vec<f64> = hard.iter().map(|&h| values[h]).collect();
            let arg = soft_hinge(
                &mut out.grad_s,
                cfg.gamma,
                (i, t, s[(i, t)]),
                &pool,
                &pool_values,
                cfg.tau_h,
                scale,
            );
            out.value += scale * arg.max(0.0);
            out.kink_distance = out.kink_distance.min(arg.abs());
        }
    }
    out.per_term.dsh = out.value;
    Ok(out)
}

/// Triplet alignment loss: the uniform mean of same-identity similarities
/// against a log-sum-exp over the full row (image anchor) and column (text
/// anchor). Noisy pairs are neither anchors nor positives.
pub fn loss_tal(s: &Mat64, labels: &BatchLabels, cfg: &LossConfig) -> Result<LossReport, LossError> {
    let k = check_square(s, labels)?;
    let anchors: Vec<usize> = (0..k).filter(|&i| !labels.treat_as_noisy[i]).collect();
    let mut out = LossReport::zero(k);
    if anchors.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / anchors.len() as f64;
    let tau = cfg.tau_t;

    let mut negatives: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    let mut positives = Vec::with_capacity(k);
    for &i in &anchors {
        let t = labels.pair_index[i];
        let id = labels.identity[i];

        for direction in 0..2 {
            positives.clear();
            negatives.clear();
            for j in 0..k {
                let (cell, other_id, other_noisy) = if direction == 0 {
                    ((i, j), labels.text_identity[j], labels.text_noisy[j])
                } else {
                    ((j, t), labels.identity[j], labels.treat_as_noisy[j])
                };
                if other_id != id {
                    negatives.push(cell);
                } else if !other_noisy {
                    positives.push(cell);
                }
            }
            if negatives.is_empty() {
                return Err(LossError::NoNegatives(i));
            }
            values.clear();
            values.extend(negatives.iter().map(|&c| s[c]));
            let s_pos = positives.iter().map(|&c| s[c]).sum::<f64>() / positives.len() as f64;
            let lse = logsumexp(&values, tau).expect("non-empty negatives");
            let arg = cfg.margin - s_pos + lse;
            out.kink_distance = out.kink_distance.min(arg.abs());
            if arg > 0.0 {
                out.value += scale * arg;
                let per_pos = scale / positives.len() as f64;
                for &c in &positives {
                    out.grad_s[c] -= per_pos;
                }
                let w = softmax(&values, tau).expect("non-empty negatives");
                for (&c, wj) in negatives.iter().zip(w) {
                    out.grad_s[c] += scale * wj;
                }
            }
        }
    }
    out.per_term.tal = out.value;
    Ok(out)
}

/// Hardest-negative triplet ranking loss (baseline):
/// mean over anchors of `[γ - S_pos + max_neg S]₊` in both directions.
pub fn loss_triplet(s: &Mat64, labels: &BatchLabels, cfg: &LossConfig) -> Result<LossReport, LossError> {
    let k = check_square(s, labels)?;
    let anchors: Vec<usize> = (0..k).filter(|&i| !labels.treat_as_noisy[i]).collect();
    let mut out = LossReport::zero(k);
    if anchors.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / anchors.len() as f64;
    for &i in &anchors {
        let t = labels.pair_index[i];
        let id = labels.identity[i];
        for direction in 0..2 {
            let mut hardest: Option<((usize, usize), f64)> = None;
            for j in 0..k {
                let (cell, other_id) = if direction == 0 {
                    ((i, j), labels.text_identity[j])
                } else {
                    ((j, t), labels.identity[j])
                };
                if other_id != id && hardest.is_none_or(|(_, v)| s[cell] > v) {
                    hardest = Some((cell, s[cell]));
                }
            }
            let (cell, neg) = hardest.ok_or(LossError::NoNegatives(i))?;
            let arg = cfg.gamma - s[(i, t)] + neg;
            out.kink_distance = out.kink_distance.min(arg.abs());
            if arg > 0.0 {
                out.value += scale * arg;
                out.grad_s[(i, t)] -= scale;
                out.grad_s[cell] += scale;
            }
        }
    }
    out.per_term.triplet = out.value;
    Ok(out)
}

/// Which loss terms make up a training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossSelection {
    pub evidential: bool,
    pub dsh: bool,
    pub tal: bool,
    pub triplet: bool,
}

impl LossSelection {
    pub const DURA: LossSelection = LossSelection {
        evidential: true,
        dsh: true,
        tal: true,
        triplet: false,
    };

    pub const TRIPLET: LossSelection = LossSelection {
        evidential: false,
        dsh: false,
        tal: false,
        triplet: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.evidential || self.dsh || self.tal || self.triplet)
    }
}

/// Sum of the selected terms.
pub fn loss_selected(
    s: &Mat64,
    labels: &BatchLabels,
    sched: &DshSchedule,
    cfg: &LossConfig,
    terms: LossSelection,
) -> Result<LossReport, LossError> {
    let k = check_square(s, labels)?;
    let mut out = LossReport::zero(k);
    if terms.evidential {
        out.absorb(loss_evidential(s, labels, cfg)?);
    }
    if terms.dsh {
        out.absorb(loss_dsh(s, labels, sched, cfg)?);
    }
    if terms.tal {
        out.absorb(loss_tal(s, labels, cfg)?);
    }
    if terms.triplet {
        out.absorb(loss_triplet(s, labels, cfg)?);
    }
    Ok(out)
}

/// `L_e + L_h + L_TAL`.
pub fn loss_total(
    s: &Mat64,
    labels: &BatchLabels,
    sched: &DshSchedule,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    loss_selected(s, labels, sched, cfg, LossSelection::DURA)
}

/// Matched-pair evidence of a batch: `exp(tanh(S_ii/τ_e))` for each `i`
/// (both retrieval directions share the diagonal entry).
pub fn diagonal_evidence(s: &Mat64, cfg: &LossConfig) -> Vec<f64> {
    (0..s.rows().min(s.cols()))
        .map(|i| evidence_of(s[(i, i)], cfg.tau_e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{check_gradient, Rng};
    use approx::assert_abs_diff_eq;

    fn sched(k: usize, n: usize) -> DshSchedule {
        // η = 0 keeps n = K; μ then acts as a floor only
        DshSchedule {
            batch_size: k,
            eta: (k - n) as f64,
            mu: n,
            step: 1,
        }
    }

    fn random_s(rng: &mut Rng, k: usize) -> Mat64 {
        let data = (0..k * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Mat64::from_vec(k, k, data).unwrap()
    }

    #[test]
    fn negative_count_examples() {
        let mut s = DshSchedule { batch_size: 64, eta: 0.5, mu: 8, step: 0 };
        assert_eq!(dsh_negative_count(&s), 64);
        s.step = 120;
        assert_eq!(dsh_negative_count(&s), 8);
        s.eta = 0.0;
        s.step = 1_000_000;
        assert_eq!(dsh_negative_count(&s), 64);
        s.eta = 0.3;
        s.step = 10;
        assert_eq!(dsh_negative_count(&s), 61);
    }

    #[test]
    fn loss_m_closed_form_examples() {
        let a = DirichletParams::new(vec![1.0, 1.0]).unwrap();
        let (v, _) = loss_m(&a, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v, 2.0 / 3.0, epsilon = 1e-15);
        let a = DirichletParams::new(vec![2.0, 1.0]).unwrap();
        let (v, _) = loss_m(&a, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v, 2.0 * (1.0 / 9.0 + 1.0 / 18.0), epsilon = 1e-15);
        assert!(matches!(loss_m(&a, &[0.5, 0.5]), Err(LossError::NotOneHot)));
        assert!(matches!(loss_m(&a, &[0.0, 0.0]), Err(LossError::NotOneHot)));
    }

    #[test]
    fn loss_m_matches_the_printed_sum() {
        let alpha = [1.3, 2.9, 1.05, 3.7];
        let l: f64 = alpha.iter().sum();
        let y = [0.0, 0.0, 1.0, 0.0];
        let printed: f64 = (0..4)
            .map(|j| (y[j] - alpha[j] / l).powi(2) + alpha[j] * (l - alpha[j]) / (l * l * (l + 1.0)))
            .sum();
        let (v, _) = loss_m(&DirichletParams::new(alpha.to_vec()).unwrap(), &y).unwrap();
        assert_abs_diff_eq!(v, printed, epsilon = 1e-15);
    }

    #[test]
    fn loss_m_symmetric_in_non_targets() {
        let a = DirichletParams::new(vec![1.7; 5]).unwrap();
        let v0 = loss_m(&a, &[0.0, 1.0, 0.0, 0.0, 0.0]).unwrap().0;
        let v1 = loss_m(&a, &[0.0, 0.0, 0.0, 1.0, 0.0]).unwrap().0;
        assert_abs_diff_eq!(v0, v1, epsilon = 1e-15);
    }

    #[test]
    fn kl_examples() {
        let a = DirichletParams::new(vec![2.4, 1.0, 1.0]).unwrap();
        let (v, g) = loss_kl(&a, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-15));

        let a = DirichletParams::new(vec![7.0, 2.0]).unwrap();
        let (v, _) = loss_kl(&a, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln() - 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.193_147, epsilon = 1e-6);
    }

    #[test]
    fn dirichlet_term_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        for &k in &[1usize, 2, 3, 7] {
            for _ in 0..5 {
                let alpha: Vec<f64> = (0..k).map(|_| rng.uniform_range(1.2, 4.0)).collect();
                let t = rng.below(k);
                let x = Mat64::from_vec(1, k, alpha.clone()).unwrap();
                for f in [mse_dirichlet, kl_masked] {
                    let (_, g) = f(&alpha, t);
                    let g = Mat64::from_vec(1, k, g).unwrap();
                    let err = check_gradient(|m| f(m.row(0), t).0, &x, &g, 1e-6).unwrap();
                    assert!(err < 1e-5, "k={k} err={err}");
                }
                let (_, g) = kl_to_uniform(&alpha);
                let g = Mat64::from_vec(1, k, g).unwrap();
                let err = check_gradient(|m| kl_to_uniform(m.row(0)).0, &x, &g, 1e-6).unwrap();
                assert!(err < 1e-5 || k == 1, "k={k} err={err}");
            }
        }
    }

    #[test]
    fn evidential_single_pair() {
        let cfg = LossConfig::default();
        for &s in &[-0.4, 0.0, 0.01, 0.9] {
            let sm = Mat64::filled(1, 1, s);
            let labels = BatchLabels::aligned(vec![0]);
            let r = loss_evidential(&sm, &labels, &cfg).unwrap();
            let a = DirichletParams::new(vec![evidence_of(s, cfg.tau_e) + 1.0]).unwrap();
            let (m, _) = loss_m(&a, &[1.0]).unwrap();
            assert_abs_diff_eq!(r.value, 2.0 * m, epsilon = 1e-15);
            assert_eq!(r.per_term.kl_i2t, 0.0);
        }
    }

    #[test]
    fn evidential_prefers_the_correct_permutation() {
        let k = 4;
        let labels = BatchLabels::aligned((0..k).collect());
        let cfg = LossConfig::default();
        let diag = Mat64::from_vec(k, k, (0..k * k).map(|x| if x % (k + 1) == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        let anti = Mat64::from_vec(k, k, (0..k * k).map(|x| if x / k + x % k == k - 1 { 1.0 } else { -1.0 }).collect()).unwrap();
        let good = loss_evidential(&diag, &labels, &cfg).unwrap().value;
        let bad = loss_evidential(&anti, &labels, &cfg).unwrap().value;
        assert!(good < bad, "{good} vs {bad}");
    }

    #[test]
    fn dsh_worked_examples() {
        // anchor row: positive 0.6, negatives 0.55 and 0.30
        let mut s = Mat64::filled(3, 3, -1.0);
        s[(0, 0)] = 0.6;
        s[(0, 1)] = 0.55;
        s[(0, 2)] = 0.30;
        let labels = BatchLabels::new(vec![0, 1, 2], vec![0, 1, 2], vec![false, true, true]).unwrap();
        let cfg = LossConfig { gamma: 0.2, tau_h: 0.01, ..LossConfig::default() };
        let r = loss_dsh(&s, &labels, &sched(3, 1), &cfg).unwrap();
        // column direction: negatives -1, -1 → hinge 0.2 - 0.6 - 1 < 0
        assert_abs_diff_eq!(r.value, 0.15, epsilon = 1e-12);

        let cfg = LossConfig { gamma: 0.2, tau_h: 0.1, ..LossConfig::default() };
        let r = loss_dsh(&s, &labels, &sched(3, 2), &cfg).unwrap();
        let lse = 0.55 + 0.1 * (1.0 + (-2.5f64).exp()).ln();
        assert_abs_diff_eq!(r.value, 0.2 - 0.6 + lse, epsilon = 1e-12);
        assert_abs_diff_eq!(r.value, 0.15789, epsilon = 1e-5);

        s[(0, 0)] = 1.0;
        let cfg = LossConfig { gamma: 0.2, tau_h: 0.01, ..LossConfig::default() };
        let r = loss_dsh(&s, &labels, &sched(3, 1), &cfg).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_s.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn dsh_needs_negatives() {
        let s = Mat64::filled(2, 2, 0.1);
        let labels = BatchLabels::aligned(vec![3, 3]);
        assert!(matches!(
            loss_dsh(&s, &labels, &sched(2, 1), &LossConfig::default()),
            Err(LossError::NoNegatives(0))
        ));
    }

    #[test]
    fn tal_worked_examples() {
        let mut s = Mat64::filled(3, 3, 0.2);
        s[(0, 0)] = 0.9;
        s[(0, 1)] = 0.85;
        let labels = BatchLabels::new(vec![0, 1, 2], vec![0, 1, 2], vec![false, true, true]).unwrap();
        let cfg = LossConfig { margin: 0.1, tau_t: 1e-3, ..LossConfig::default() };
        let r = loss_tal(&s, &labels, &cfg).unwrap();
        // row: 0.1 - 0.9 + lse(0.85, 0.2) ≈ 0.05; column: 0.1 - 0.9 + ~0.2 < 0
        assert_abs_diff_eq!(r.value, 0.05, epsilon = 1e-6);

        let c = 0.37;
        let k = 5;
        let s = Mat64::filled(k, k, c);
        let labels = BatchLabels::aligned((0..k).collect());
        let cfg = LossConfig { margin: 0.1, tau_t: 0.05, ..LossConfig::default() };
        let r = loss_tal(&s, &labels, &cfg).unwrap();
        assert_abs_diff_eq!(r.value, 2.0 * (0.1 + 0.05 * ((k - 1) as f64).ln()), epsilon = 1e-12);

        let labels = BatchLabels::aligned(vec![4; 3]);
        assert!(matches!(loss_tal(&Mat64::filled(3, 3, c), &labels, &cfg), Err(LossError::NoNegatives(0))));
    }

    #[test]
    fn tal_averages_same_identity_positives() {
        let mut s = Mat64::filled(3, 3, 0.0);
        s[(0, 0)] = 0.8;
        s[(0, 1)] = 0.4;
        s[(2, 1)] = 0.3;
        let labels = BatchLabels::aligned(vec![5, 5, 6]);
        let cfg = LossConfig { margin: 0.1, tau_t: 0.5, ..LossConfig::default() };
        let r = loss_tal(&s, &labels, &cfg).unwrap();
        let hinge = |pos: f64, negs: &[f64]| (0.1 - pos + logsumexp(negs, 0.5).unwrap()).max(0.0);
        let row0 = hinge(0.6, &[0.0]);
        let col0 = hinge(0.4, &[0.0]);
        let row1 = hinge(0.0, &[0.0]);
        let col1 = hinge(0.2, &[0.3]);
        let row2 = hinge(0.0, &[0.0, 0.3]);
        let col2 = hinge(0.0, &[0.0, 0.0]);
        let expected = (row0 + col0 + row1 + col1 + row2 + col2) / 3.0;
        assert_abs_diff_eq!(r.value, expected, epsilon = 1e-12);
        assert!(row1 > 0.0 && col1 > 0.0 && row0 == 0.0);
    }

    #[test]
    fn triplet_matches_dsh_limit() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let k = 8;
            let s = random_s(&mut rng, k);
            let labels = BatchLabels::aligned((0..k).map(|i| i % 6).collect());
            let cfg = LossConfig { tau_h: 1e-4, ..LossConfig::default() };
            let t = loss_triplet(&s, &labels, &cfg).unwrap().value;
            let d = loss_dsh(&s, &labels, &sched(k, 1), &cfg).unwrap().value;
            assert!((t - d).abs() < 1e-3, "{t} vs {d}");
        }
    }

    /// Central differences against every analytic `∂L/∂S`. Batches near a
    /// hinge kink, or with a nonzero gradient entry below what a step of
    /// 1e-6 can resolve in f64, are redrawn.
    #[test]
    fn all_gradients_match_finite_differences() {
        let mut rng = Rng::new(23);
        let cfg = LossConfig {
            tau_e: 0.5,
            tau_h: 0.5,
            tau_t: 0.5,
            lambda2: 0.7,
            ..LossConfig::default()
        };
        let k = 8;
        let mut checked = 0;
        for trial in 0..40 {
            let s = random_s(&mut rng, k);
            let ids: Vec<usize> = (0..k).map(|i| (i * 3 + trial) % 5).collect();
            let mut flags = vec![false; k];
            flags[trial % k] = trial % 2 == 0;
            let labels = BatchLabels::new((0..k).rev().collect(), ids, flags).unwrap();
            let sc = sched(k, 3);
            type LossFn = fn(&Mat64, &BatchLabels, &DshSchedule, &LossConfig) -> Result<LossReport, LossError>;
            let fns: [(&str, LossFn); 5] = [
                ("evidential", |s, l, _, c| loss_evidential(s, l, c)),
                ("dsh", loss_dsh),
                ("tal", |s, l, _, c| loss_tal(s, l, c)),
                ("triplet", |s, l, _, c| loss_triplet(s, l, c)),
                ("total", loss_total),
            ];
            for (name, f) in fns {
                let r = f(&s, &labels, &sc, &cfg).unwrap();
                let tiny = r.grad_s.as_slice().iter().any(|&g| g != 0.0 && g.abs() < 1e-4);
                if r.kink_distance < 1e-4 || tiny {
                    continue;
                }
                checked += 1;
                let err = check_gradient(|m| f(m, &labels, &sc, &cfg).unwrap().value, &s, &r.grad_s, 1e-6).unwrap();
                assert!(err < 1e-5, "{name} trial {trial}: {err}");
            }
        }
        assert!(checked >= 60, "only {checked} usable batches");
    }

    #[test]
    fn total_is_the_sum_of_terms() {
        let mut rng = Rng::new(31);
        let k = 6;
        let s = random_s(&mut rng, k);
        let labels = BatchLabels::aligned(vec![0, 1, 2, 0, 1, 3]);
        let cfg = LossConfig::default();
        let sc = sched(k, 2);
        let e = loss_evidential(&s, &labels, &cfg).unwrap();
        let h = loss_dsh(&s, &labels, &sc, &cfg).unwrap();
        let t = loss_tal(&s, &labels, &cfg).unwrap();
        let total = loss_total(&s, &labels, &sc, &cfg).unwrap();
        assert_abs_diff_eq!(total.value, e.value + h.value + t.value, epsilon = 1e-12);
        let mut g = e.grad_s.clone();
        g.add_assign(&h.grad_s);
        g.add_assign(&t.grad_s);
        assert!(total.grad_s.max_abs_diff(&g) <= 1e-12);
        assert_eq!(total.per_term.dsh, h.value);
        assert_eq!(total.per_term.tal, t.value);
        assert_eq!(total.per_term.evidential, e.value);
    }

    #[test]
    fn all_noisy_batch_leaves_only_kl() {
        let k = 4;
        let s = Mat64::identity(k);
        let labels = BatchLabels::aligned((0..k).collect()).with_noisy(vec![true; k]).unwrap();
        let cfg = LossConfig::default();
        let r = loss_total(&s, &labels, &sched(k, 1), &cfg).unwrap();
        assert_eq!(r.per_term.dsh, 0.0);
        assert_eq!(r.per_term.tal, 0.0);
        assert_eq!(r.per_term.m_i2t, 0.0);
        assert!(r.per_term.kl_i2t > 0.0);
    }

    #[test]
    fn lambda2_anneals_linearly() {
        let cfg = LossConfig { lambda2: 2.0, lambda2_anneal_epochs: 10, ..LossConfig::default() };
        assert_eq!(cfg.lambda2_at(0), 0.0);
        assert_eq!(cfg.lambda2_at(5), 1.0);
        assert_eq!(cfg.lambda2_at(10), 2.0);
        assert_eq!(cfg.lambda2_at(25), 2.0);
        assert_eq!(cfg.at_epoch(5).lambda2_at(99), 1.0);
    }
}
