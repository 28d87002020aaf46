//! Key feature selector: refines a set of local token features plus a
//! global feature into one embedding.
//!
//! ```text
//! u_m = t_m + W2·tanh(W1·t_m + b1) + b2          token MLP (residual)
//! s   = mean_m u_m                               squeeze
//! g   = σ(Ws2·tanh(Ws1·s + bs1) + bs2)           channel gate
//! c_m = u_m ⊙ g + (Wfc·global + bfc)             recalibrated tokens + FC
//! out = per-channel mean of the k largest c_m    Max-K pooling
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{top_k_indices, Mat64, NumericError, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KfsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("k = {k} outside [1, {m}]")]
    KOutOfRange { k: usize, m: usize },
    #[error("tape does not match the parameters or upstream gradient")]
    StaleTape,
    #[error("invalid KFS configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite token features")]
    NonFinite,
}

impl From<NumericError> for KfsError {
    fn from(e: NumericError) -> Self {
        match e {
            NumericError::KOutOfRange { k, len } => KfsError::KOutOfRange { k, m: len },
            other => KfsError::ShapeMismatch(other.to_string()),
        }
    }
}

/// Local tokens (`M × d`) and the global feature of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSet {
    pub tokens: Mat64,
    pub global: Vec<f64>,
}

impl TokenSet {
    pub fn new(tokens: Mat64, global: Vec<f64>) -> Result<Self, KfsError> {
        if tokens.rows() == 0 || tokens.cols() != global.len() {
            return Err(KfsError::ShapeMismatch(format!(
                "{}x{} tokens with a {}-dim global",
                tokens.rows(),
                tokens.cols(),
                global.len()
            )));
        }
        if !tokens.is_finite() || global.iter().any(|v| !v.is_finite()) {
            return Err(KfsError::NonFinite);
        }
        Ok(Self { tokens, global })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfsConfig {
    /// MLP hidden width; 0 means "same as the feature dimension".
    pub hidden: usize,
    /// SE reduction ratio `r`.
    pub reduction: usize,
    /// Fraction of tokens averaged by Max-K pooling.
    pub k_ratio: f64,
}

impl Default for KfsConfig {
    fn default() -> Self {
        Self {
            hidden: 0,
            reduction: 4,
            k_ratio: 0.5,
        }
    }
}

impl KfsConfig {
    pub fn validate(&self) -> Result<(), KfsError> {
        if self.reduction == 0 {
            return Err(KfsError::InvalidConfig("reduction must be >= 1".into()));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(KfsError::InvalidConfig(format!(
                "k_ratio {} outside (0, 1]",
                self.k_ratio
            )));
        }
        Ok(())
    }
}

/// All trainable KFS weights. Matrices are stored `out × in`; biases are
/// `1 × n` so every tensor shares one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfsParams {
    pub k_ratio: f64,
    pub w1: Mat64,
    pub b1: Mat64,
    pub w2: Mat64,
    pub b2: Mat64,
    pub ws1: Mat64,
    pub bs1: Mat64,
    pub ws2: Mat64,
    pub bs2: Mat64,
    pub wfc: Mat64,
    pub bfc: Mat64,
}

pub const KFS_TENSOR_NAMES: [&str; 10] =
    ["w1", "b1", "w2", "b2", "ws1", "bs1", "ws2", "bs2", "wfc", "bfc"];

fn uniform_fill(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Mat64 {
    let data = (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Mat64::from_vec(rows, cols, data).expect("sized buffer")
}

impl KfsParams {
    /// Fan-in scaled uniform init. The residual branch starts small and the
    /// FC map starts near identity.
    pub fn init(dim: usize, cfg: &KfsConfig, rng: &Rng) -> Result<Self, KfsError> {
        cfg.validate()?;
        if dim == 0 {
            return Err(KfsError::InvalidConfig("feature dimension must be >= 1".into()));
        }
        let h = if cfg.hidden == 0 { dim } else { cfg.hidden };
        let r = (dim / cfg.reduction).max(1);
        let b_in = 1.0 / (dim as f64).sqrt();
        let b_h = 1.0 / (h as f64).sqrt();
        let b_r = 1.0 / (r as f64).sqrt();

        let w1 = uniform_fill(&mut rng.split("kfs/w1"), h, dim, b_in);
        let b1 = uniform_fill(&mut rng.split("kfs/b1"), 1, h, b_in);
        let w2 = uniform_fill(&mut rng.split("kfs/w2"), dim, h, 0.1 * b_h);
        let ws1 = uniform_fill(&mut rng.split("kfs/ws1"), r, dim, b_in);
        let bs1 = uniform_fill(&mut rng.split("kfs/bs1"), 1, r, b_in);
        let ws2 = uniform_fill(&mut rng.split("kfs/ws2"), dim, r, b_r);
        let mut wfc = uniform_fill(&mut rng.split("kfs/wfc"), dim, dim, 0.1 * b_in);
        for i in 0..dim {
            wfc[(i, i)] += 1.0;
        }
        let bfc = uniform_fill(&mut rng.split("kfs/bfc"), 1, dim, 0.01);
        Ok(Self {
            k_ratio: cfg.k_ratio,
            w1,
            b1,
            w2,
            b2: Mat64::zeros(1, dim),
            ws1,
            bs1,
            ws2,
            bs2: Mat64::zeros(1, dim),
            wfc,
            bfc,
        })
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn se_hidden(&self) -> usize {
        self.ws1.rows()
    }

    /// Pooled token count for `m` tokens: `⌈k_ratio·m⌉` within `[1, m]`.
    pub fn k_for(&self, m: usize) -> usize {
        ((self.k_ratio * m as f64).ceil() as usize).clamp(1, m.max(1))
    }

    pub fn tensors(&self) -> [&Mat64; 10] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.ws1, &self.bs1, &self.ws2, &self.bs2,
            &self.wfc, &self.bfc,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat64; 10] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ws1,
            &mut self.bs1,
            &mut self.ws2,
            &mut self.bs2,
            &mut self.wfc,
            &mut self.bfc,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.scale(0.0);
        }
        z
    }

    fn check_shapes(&self) -> Result<(), KfsError> {
        let (d, h, r) = (self.dim(), self.hidden(), self.se_hidden());
        let expect = [(h, d), (1, h), (d, h), (1, d), (r, d), (1, r), (d, r), (1, d), (d, d), (1, d)];
        for ((name, t), shape) in KFS_TENSOR_NAMES.iter().zip(self.tensors()).zip(expect) {
            if t.shape() != shape {
                return Err(KfsError::ShapeMismatch(format!(
                    "{name} is {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(w: &Mat64, b: &Mat64, x: &[f64]) -> Vec<f64> {
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b.as_slice()) {
        *yi += bi;
    }
    y
}

/// Per-channel mean of the `k` largest entries across rows. Ties go to the
/// lower row index.
pub fn max_k_pool(tokens: &Mat64, k: usize) -> Result<Vec<f64>, KfsError> {
    Ok(max_k_select(tokens, k)?.0)
}

fn max_k_select(tokens: &Mat64, k: usize) -> Result<(Vec<f64>, Vec<Vec<usize>>), KfsError> {
    let m = tokens.rows();
    if k == 0 || k > m {
        return Err(KfsError::KOutOfRange { k, m });
    }
    let mut pooled = Vec::with_capacity(tokens.cols());
    let mut chosen = Vec::with_capacity(tokens.cols());
    for c in 0..tokens.cols() {
        let col = tokens.column(c);
        let idx = top_k_indices(&col, k)?;
        pooled.push(idx.iter().map(|&i| col[i]).sum::<f64>() / k as f64);
        chosen.push(idx);
    }
    Ok((pooled, chosen))
}

/// Squeeze-excitation pass over a token matrix: `(squeeze, hidden, gate)`.
fn se_gate(u: &Mat64, params: &KfsParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = u.rows() as f64;
    let mut s = vec![0.0; u.cols()];
    for i in 0..u.rows() {
        for (sj, v) in s.iter_mut().zip(u.row(i)) {
            *sj += v;
        }
    }
    for sj in &mut s {
        *sj /= m;
    }
    let z: Vec<f64> = affine(&params.ws1, &params.bs1, &s).into_iter().map(f64::tanh).collect();
    let g: Vec<f64> = affine(&params.ws2, &params.bs2, &z).into_iter().map(sigmoid).collect();
    (s, z, g)
}

/// Scales every token channel-wise by the SE gate computed from the tokens.
pub fn se_recalibrate(tokens: &Mat64, params: &KfsParams) -> Result<Mat64, KfsError> {
    params.check_shapes()?;
    if tokens.cols() != params.dim() || tokens.rows() == 0 {
        return Err(KfsError::ShapeMismatch(format!(
            "tokens {}x{}, parameters expect d={}",
            tokens.rows(),
            tokens.cols(),
            params.dim()
        )));
    }
    let (_, _, g) = se_gate(tokens, params);
    let mut out = tokens.clone();
    for i in 0..out.rows() {
        for (v, gj) in out.row_mut(i).iter_mut().zip(&g) {
            *v *= gj;
        }
    }
    Ok(out)
}

/// Intermediate activations kept for [`kfs_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct KfsTape {
    input: TokenSet,
    hidden: Mat64,
    u: Mat64,
    squeeze: Vec<f64>,
    se_hidden: Vec<f64>,
    gate: Vec<f64>,
    selected: Vec<Vec<usize>>,
    k: usize,
}

impl KfsTape {
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }

    /// Token indices pooled for each channel.
    pub fn selected(&self) -> &[Vec<usize>] {
        &self.selected
    }
}

pub fn kfs_forward(input: &TokenSet, params: &KfsParams) -> Result<(Vec<f64>, KfsTape), KfsError> {
    params.check_shapes()?;
    let d = params.dim();
    if input.dim() != d || input.is_empty() {
        return Err(KfsError::ShapeMismatch(format!(
            "token set of dimension {}, parameters expect {d}",
            input.dim()
        )));
    }
    let m = input.len();
    let h = params.hidden();

    let mut hidden = Mat64::zeros(m, h);
    let mut u = Mat64::zeros(m, d);
    for i in 0..m {
        let t = input.tokens.row(i);
        let a = affine(&params.w1, &params.b1, t);
        let hd: Vec<f64> = a.into_iter().map(f64::tanh).collect();
        let branch = affine(&params.w2, &params.b2, &hd);
        for (j, (uj, bj)) in u.row_mut(i).iter_mut().zip(branch).enumerate() {
            *uj = t[j] + bj;
        }
        hidden.row_mut(i).copy_from_slice(&hd);
    }

    let (squeeze, se_hidden, gate) = se_gate(&u, params);
    let fc = affine(&params.wfc, &params.bfc, &input.global);
    let mut combined = u.clone();
    for i in 0..m {
        for ((c, g), f) in combined.row_mut(i).iter_mut().zip(&gate).zip(&fc) {
            *c = *c * g + f;
        }
    }
    let k = params.k_for(m);
    let (refined, selected) = max_k_select(&combined, k)?;
    Ok((
        refined,
        KfsTape {
            input: input.clone(),
            hidden,
            u,
            squeeze,
            se_hidden,
            gate,
            selected,
            k,
        },
    ))
}

/// Gradients of a scalar with respect to the KFS parameters and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct KfsGrad {
    pub params: KfsParams,
    pub tokens: Mat64,
    pub global: Vec<f64>,
}

pub fn kfs_backward(tape: &KfsTape, params: &KfsParams, upstream: &[f64]) -> Result<KfsGrad, KfsError> {
    let d = params.dim();
    let m = tape.input.len();
    if params.check_shapes().is_err()
        || tape.input.dim() != d
        || upstream.len() != d
        || tape.hidden.cols() != params.hidden()
        || tape.se_hidden.len() != params.se_hidden()
        || tape.selected.len() != d
    {
        return Err(KfsError::StaleTape);
    }
    let mut grads = params.zeros_like();

    // Max-K: 1/k to each selected token per channel
    let mut dc = Mat64::zeros(m, d);
    for (c, idx) in tape.selected.iter().enumerate() {
        let share = upstream[c] / tape.k as f64;
        for &i in idx {
            dc[(i, c)] += share;
        }
    }

    // FC branch is broadcast to every token
    let mut dfc = vec![0.0; d];
    for i in 0..m {
        for (a, b) in dfc.iter_mut().zip(dc.row(i)) {
            *a += b;
        }
    }
    grads.wfc.add_outer(&dfc, &tape.input.global, 1.0);
    grads.bfc.row_mut(0).copy_from_slice(&dfc);
    let dglobal = params.wfc.matvec_t(&dfc);

    // v = u ⊙ g
    let mut du = Mat64::zeros(m, d);
    let mut dg = vec![0.0; d];
    for i in 0..m {
        for j in 0..d {
            du[(i, j)] = dc[(i, j)] * tape.gate[j];
            dg[j] += dc[(i, j)] * tape.u[(i, j)];
        }
    }
    let dpre2: Vec<f64> = dg.iter().zip(&tape.gate).map(|(a, g)| a * g * (1.0 - g)).collect();
    grads.ws2.add_outer(&dpre2, &tape.se_hidden, 1.0);
    grads.bs2.row_mut(0).copy_from_slice(&dpre2);
    let dz = params.ws2.matvec_t(&dpre2);
    let dpre1: Vec<f64> = dz.iter().zip(&tape.se_hidden).map(|(a, z)| a * (1.0 - z * z)).collect();
    grads.ws1.add_outer(&dpre1, &tape.squeeze, 1.0);
    grads.bs1.row_mut(0).copy_from_slice(&dpre1);
    let ds = params.ws1.matvec_t(&dpre1);
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        for (a, b) in du.row_mut(i).iter_mut().zip(&ds) {
            *a += b * inv_m;
        }
    }

    // u = t + W2·tanh(W1·t + b1) + b2
    let mut dtokens = du.clone();
    for i in 0..m {
        let dui = du.row(i);
        let hd = tape.hidden.row(i);
        grads.w2.add_outer(dui, hd, 1.0);
        for (a, b) in grads.b2.row_mut(0).iter_mut().zip(dui) {
            *a += b;
        }
        let dh = params.w2.matvec_t(dui);
        let da: Vec<f64> = dh.iter().zip(hd).map(|(a, h)| a * (1.0 - h * h)).collect();
        grads.w1.add_outer(&da, tape.input.tokens.row(i), 1.0);
        for (a, b) in grads.b1.row_mut(0).iter_mut().zip(&da) {
            *a += b;
        }
        let dt = params.w1.matvec_t(&da);
        for (a, b) in dtokens.row_mut(i).iter_mut().zip(dt) {
            *a += b;
        }
    }

    Ok(KfsGrad {
        params: grads,
        tokens: dtokens,
        global: dglobal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::check_gradient;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::numeric::Rng;

    fn random_mat(rng: &mut Rng, r: usize, c: usize) -> Mat64 {
        Mat64::from_vec(r, c, (0..r * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn random_params(rng: &mut Rng, d: usize, h: usize, r: usize, k_ratio: f64) -> KfsParams {
        KfsParams {
            k_ratio,
            w1: random_mat(rng, h, d),
            b1: random_mat(rng, 1, h),
            w2: random_mat(rng, d, h),
            b2: random_mat(rng, 1, d),
            ws1: random_mat(rng, r, d),
            bs1: random_mat(rng, 1, r),
            ws2: random_mat(rng, d, r),
            bs2: random_mat(rng, 1, d),
            wfc: random_mat(rng, d, d),
            bfc: random_mat(rng, 1, d),
        }
    }

    fn random_input(rng: &mut Rng, m: usize, d: usize) -> TokenSet {
        TokenSet::new(random_mat(rng, m, d), random_mat(rng, 1, d).into_vec()).unwrap()
    }

    /// Straight-line recomputation with explicit loops.
    fn reference_forward(input: &TokenSet, p: &KfsParams) -> Vec<f64> {
        let (m, d, h, r) = (input.len(), p.dim(), p.hidden(), p.se_hidden());
        let mut u = vec![vec![0.0; d]; m];
        for i in 0..m {
            let mut hid = vec![0.0; h];
            for a in 0..h {
                let mut acc = p.b1[(0, a)];
                for j in 0..d {
                    acc += p.w1[(a, j)] * input.tokens[(i, j)];
                }
                hid[a] = acc.tanh();
            }
            for j in 0..d {
                let mut acc = p.b2[(0, j)];
                for a in 0..h {
                    acc += p.w2[(j, a)] * hid[a];
                }
                u[i][j] = input.tokens[(i, j)] + acc;
            }
        }
        let s: Vec<f64> = (0..d).map(|j| u.iter().map(|row| row[j]).sum::<f64>() / m as f64).collect();
        let z: Vec<f64> = (0..r)
            .map(|a| (p.bs1[(0, a)] + (0..d).map(|j| p.ws1[(a, j)] * s[j]).sum::<f64>()).tanh())
            .collect();
        let g: Vec<f64> = (0..d)
            .map(|j| {
                let x = p.bs2[(0, j)] + (0..r).map(|a| p.ws2[(j, a)] * z[a]).sum::<f64>();
                1.0 / (1.0 + (-x).exp())
            })
            .collect();
        let f: Vec<f64> = (0..d)
            .map(|j| p.bfc[(0, j)] + (0..d).map(|l| p.wfc[(j, l)] * input.global[l]).sum::<f64>())
            .collect();
        let k = p.k_for(m);
        (0..d)
            .map(|j| {
                let mut col: Vec<f64> = (0..m).map(|i| u[i][j] * g[j] + f[j]).collect();
                col.sort_by(|a, b| b.partial_cmp(a).unwrap());
                col[..k].iter().sum::<f64>() / k as f64
            })
            .collect()
    }

    #[test]
    fn max_k_pool_examples() {
        let col = Mat64::from_vec(4, 1, vec![0.9, 0.1, 0.5, 0.3]).unwrap();
        assert_abs_diff_eq!(max_k_pool(&col, 2).unwrap()[0], 0.7, epsilon = 1e-15);
        let mut rng = Rng::new(1);
        let t = random_mat(&mut rng, 5, 3);
        let mean = max_k_pool(&t, 5).unwrap();
        let max = max_k_pool(&t, 1).unwrap();
        for c in 0..3 {
            let col = t.column(c);
            assert_abs_diff_eq!(mean[c], col.iter().sum::<f64>() / 5.0, epsilon = 1e-15);
            assert_eq!(max[c], col.iter().cloned().fold(f64::MIN, f64::max));
        }
        assert!(matches!(max_k_pool(&t, 0), Err(KfsError::KOutOfRange { .. })));
        assert!(matches!(max_k_pool(&t, 6), Err(KfsError::KOutOfRange { .. })));
    }

    #[test]
    fn saturated_gate_is_identity() {
        let mut rng = Rng::new(2);
        let mut p = random_params(&mut rng, 3, 3, 1, 0.5);
        p.bs2 = Mat64::filled(1, 3, 20.0);
        p.ws2.scale(0.0);
        let t = random_mat(&mut rng, 4, 3);
        let out = se_recalibrate(&t, &p).unwrap();
        assert!(out.max_abs_diff(&t) < 1e-8);
    }

    #[test]
    fn single_token_squeeze_is_the_token() {
        let mut rng = Rng::new(3);
        let p = random_params(&mut rng, 3, 2, 1, 1.0);
        let t = random_mat(&mut rng, 1, 3);
        let (s, _, _) = se_gate(&t, &p);
        assert_eq!(s, t.row(0).to_vec());
    }

    #[test]
    fn se_matches_reference() {
        let mut rng = Rng::new(4);
        let p = random_params(&mut rng, 3, 3, 2, 1.0);
        let t = random_mat(&mut rng, 4, 3);
        let out = se_recalibrate(&t, &p).unwrap();
        let s: Vec<f64> = (0..3).map(|j| (0..4).map(|i| t[(i, j)]).sum::<f64>() / 4.0).collect();
        let z: Vec<f64> = (0..2)
            .map(|a| (p.bs1[(0, a)] + (0..3).map(|j| p.ws1[(a, j)] * s[j]).sum::<f64>()).tanh())
            .collect();
        for j in 0..3 {
            let x = p.bs2[(0, j)] + (0..2).map(|a| p.ws2[(j, a)] * z[a]).sum::<f64>();
            let g = 1.0 / (1.0 + (-x).exp());
            for i in 0..4 {
                assert_abs_diff_eq!(out[(i, j)], t[(i, j)] * g, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn degenerate_configuration_is_token_mean() {
        let mut rng = Rng::new(5);
        let d = 3;
        let mut p = random_params(&mut rng, d, 4, 1, 1.0);
        p.w2.scale(0.0);
        p.b2.scale(0.0);
        p.ws2.scale(0.0);
        p.bs2 = Mat64::filled(1, d, 40.0);
        p.wfc.scale(0.0);
        p.bfc.scale(0.0);
        let input = random_input(&mut rng, 6, d);
        let (out, _) = kfs_forward(&input, &p).unwrap();
        for c in 0..d {
            let mean = input.tokens.column(c).iter().sum::<f64>() / 6.0;
            assert_abs_diff_eq!(out[c], mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_tokens_pool_to_the_transformed_token() {
        let mut rng = Rng::new(6);
        let d = 4;
        let p = random_params(&mut rng, d, 3, 1, 0.5);
        let row: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let one = TokenSet::new(Mat64::from_rows(&[row.clone()]).unwrap(), row.clone()).unwrap();
        let many = TokenSet::new(Mat64::from_rows(&vec![row.clone(); 5]).unwrap(), row).unwrap();
        let (a, _) = kfs_forward(&one, &p).unwrap();
        let (b, _) = kfs_forward(&many, &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = Rng::new(7);
        for trial in 0..20 {
            let (m, d, h, r) = (1 + trial % 6, 2 + trial % 4, 1 + trial % 5, 1 + trial % 2);
            let p = random_params(&mut rng, d, h, r, [0.25, 0.5, 1.0][trial % 3]);
            let input = random_input(&mut rng, m, d);
            let (out, _) = kfs_forward(&input, &p).unwrap();
            let reference = reference_forward(&input, &p);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    fn objective(input: &TokenSet, p: &KfsParams, w: &[f64]) -> f64 {
        kfs_forward(input, p).unwrap().0.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let (m, d, h) = (4, 3, 5);
        let mut checked = 0;
        while checked < 10 {
            let p = random_params(&mut rng, d, h, 1, 0.5);
            let input = random_input(&mut rng, m, d);
            let w: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let (_, tape) = kfs_forward(&input, &p).unwrap();
            let g = kfs_backward(&tape, &p, &w).unwrap();
            if g.params.tensors().iter().any(|t| t.as_slice().iter().any(|&v| v != 0.0 && v.abs() < 1e-4)) {
                continue;
            }
            checked += 1;
            for (ti, name) in KFS_TENSOR_NAMES.iter().enumerate() {
                let err = check_gradient(
                    |x| {
                        let mut q = p.clone();
                        *q.tensors_mut()[ti] = x.clone();
                        objective(&input, &q, &w)
                    },
                    p.tensors()[ti],
                    g.params.tensors()[ti],
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "{name}: {err}");
            }
            let err = check_gradient(
                |x| objective(&TokenSet::new(x.clone(), input.global.clone()).unwrap(), &p, &w),
                &input.tokens,
                &g.tokens,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "tokens: {err}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(9);
        let p = random_params(&mut rng, 3, 4, 1, 0.5);
        let input = random_input(&mut rng, 4, 3);
        let (_, tape) = kfs_forward(&input, &p).unwrap();
        let g = kfs_backward(&tape, &p, &[0.0; 3]).unwrap();
        assert!(g.params.tensors().iter().all(|t| t.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn k_one_routes_to_the_argmax_only() {
        let mut rng = Rng::new(10);
        let d = 3;
        let mut p = random_params(&mut rng, d, 4, 1, 0.01);
        // no MLP/SE mixing across channels: gradient reaches only routed tokens
        p.w1.scale(0.0);
        p.ws1.scale(0.0);
        let input = random_input(&mut rng, 5, d);
        let (_, tape) = kfs_forward(&input, &p).unwrap();
        assert!(tape.selected().iter().all(|s| s.len() == 1));
        let g = kfs_backward(&tape, &p, &[1.0, 0.0, 0.0]).unwrap();
        let winner = tape.selected()[0][0];
        for i in 0..5 {
            let touched = g.tokens.row(i).iter().any(|&v| v != 0.0);
            assert_eq!(touched, i == winner, "token {i}");
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = Rng::new(11);
        let p = random_params(&mut rng, 3, 4, 1, 0.5);
        let input = random_input(&mut rng, 4, 3);
        let (_, tape) = kfs_forward(&input, &p).unwrap();
        let other = random_params(&mut rng, 3, 2, 1, 0.5);
        assert_eq!(kfs_backward(&tape, &other, &[1.0; 3]), Err(KfsError::StaleTape));
        assert_eq!(kfs_backward(&tape, &p, &[1.0; 4]), Err(KfsError::StaleTape));
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let rng = Rng::new(12);
        let a = KfsParams::init(8, &KfsConfig::default(), &rng).unwrap();
        let b = KfsParams::init(8, &KfsConfig::default(), &rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.se_hidden(), 2);
        assert_eq!(a.k_for(4), 2);
        assert_eq!(a.k_for(5), 3);
        assert_eq!(a.k_for(1), 1);
        let small = KfsParams::init(3, &KfsConfig::default(), &rng).unwrap();
        assert_eq!(small.se_hidden(), 1);
    }

    proptest! {
        #[test]
        fn pooling_is_permutation_invariant(
            vals in prop::collection::vec(-1.0f64..1.0, 24),
            k in 1usize..=6,
            seed in any::<u64>(),
        ) {
            let t = Mat64::from_vec(6, 4, vals).unwrap();
            let mut order: Vec<usize> = (0..6).collect();
            Rng::new(seed).shuffle(&mut order);
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| t.row(i).to_vec()).collect();
            let shuffled = Mat64::from_rows(&rows).unwrap();
            let a = max_k_pool(&t, k).unwrap();
            let b = max_k_pool(&shuffled, k).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }

        #[test]
        fn raising_a_selected_value_never_lowers_the_pool(
            vals in prop::collection::vec(-1.0f64..1.0, 6),
            k in 1usize..=6,
            bump in 0.0f64..1.0,
        ) {
            let t = Mat64::from_vec(6, 1, vals).unwrap();
            let idx = top_k_indices(&t.column(0), k).unwrap();
            let mut raised = t.clone();
            raised[(idx[0], 0)] += bump;
            prop_assert!(max_k_pool(&raised, k).unwrap()[0] >= max_k_pool(&t, k).unwrap()[0]);
        }
    }
}
