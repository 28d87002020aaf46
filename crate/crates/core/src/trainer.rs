//! Dual linear encoders (optionally followed by KFS) trained on the
//! synthetic pairs with analytic gradients chained through cosine
//! similarity, Adam, and a warmup + cosine learning-rate schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split_clean_noisy, DataError, NoisyPairedDataset, PairSet, SplitMethod};
use crate::evidence::evidence_of;
use crate::kfs::{kfs_backward, kfs_forward, KfsConfig, KfsError, KfsParams, KfsTape, TokenSet};
use crate::losses::{
    dsh_negative_count, loss_selected, BatchLabels, DshSchedule, LossConfig, LossError,
    LossSelection, LossTerms,
};
use crate::metrics::{evaluate, roc_auc, EvalReport, MetricsError, RankingResult};
use crate::numeric::{dot, Mat64, Rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence { epoch: usize, step: u64, reason: String },
    #[error("dataset does not fit the model: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Kfs(#[from] KfsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which loss terms and whether the KFS stage are active. The clean/noisy
/// split runs exactly when the evidential term is on. Serialized as its
/// [`Method::name`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Method {
    pub triplet: bool,
    pub tal: bool,
    pub dsh: bool,
    pub evidential: bool,
    pub kfs: bool,
}

impl Method {
    pub const DURA: Method = Method {
        triplet: false,
        tal: true,
        dsh: true,
        evidential: true,
        kfs: true,
    };

    pub const TRIPLET: Method = Method {
        triplet: true,
        tal: false,
        dsh: false,
        evidential: false,
        kfs: false,
    };

    pub fn losses(&self) -> LossSelection {
        LossSelection {
            evidential: self.evidential,
            dsh: self.dsh,
            tal: self.tal,
            triplet: self.triplet,
        }
    }

    /// Canonical name: `dura`, `triplet`, or a `+`-joined component list
    /// such as `tal+kfs+ev`.
    pub fn name(&self) -> String {
        if *self == Self::DURA {
            return "dura".into();
        }
        if *self == Self::TRIPLET {
            return "triplet".into();
        }
        let mut parts = Vec::new();
        if self.triplet {
            parts.push("triplet");
        }
        if self.tal {
            parts.push("tal");
        }
        if self.kfs {
            parts.push("kfs");
        }
        if self.evidential {
            parts.push("ev");
        }
        if self.dsh {
            parts.push("dsh");
        }
        parts.join("+")
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dura" | "full" => return Some(Self::DURA),
            "triplet" | "baseline" | "triplet-baseline" => return Some(Self::TRIPLET),
            _ => {}
        }
        let mut m = Method {
            triplet: false,
            tal: false,
            dsh: false,
            evidential: false,
            kfs: false,
        };
        for part in s.split('+') {
            let flag = match part.trim().to_ascii_lowercase().as_str() {
                "triplet" => &mut m.triplet,
                "tal" => &mut m.tal,
                "dsh" | "lh" => &mut m.dsh,
                "ev" | "le" | "evidential" => &mut m.evidential,
                "kfs" => &mut m.kfs,
                _ => return None,
            };
            *flag = true;
        }
        (!m.losses().is_empty()).then_some(m)
    }

    /// The eight-row component stack of the ablation table, labeled.
    pub fn ablation_preset() -> Vec<(&'static str, Method)> {
        let tal = |kfs, evidential, dsh| Method {
            triplet: false,
            tal: true,
            dsh,
            evidential,
            kfs,
        };
        vec![
            ("Baseline", Self::TRIPLET),
            ("+TAL", tal(false, false, false)),
            ("+TAL+Lh", tal(false, false, true)),
            ("+TAL+Le", tal(false, true, false)),
            ("+TAL+KFS", tal(true, false, false)),
            ("+TAL+KFS+Le", tal(true, true, false)),
            ("+TAL+KFS+Lh", tal(true, false, true)),
            ("+TAL+KFS+Le+Lh", Self::DURA),
        ]
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Method::parse(&s).ok_or_else(|| format!("unknown method {s:?}"))
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name()
    }
}

impl Default for Method {
    fn default() -> Self {
        Self::DURA
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dsh_eta: f64,
    pub dsh_mu: usize,
    pub split_warmup_epochs: usize,
    pub loss: LossConfig,
    pub kfs: KfsConfig,
    pub method: Method,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            embed_dim: 32,
            base_lr: 1e-3,
            warmup_epochs: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dsh_eta: 0.05,
            dsh_mu: 8,
            split_warmup_epochs: 5,
            loss: LossConfig::default(),
            kfs: KfsConfig::default(),
            method: Method::DURA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 4 {
            return bad(format!("batch_size {} must be >= 4", self.batch_size));
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim {} must be >= 2", self.embed_dim));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and >= 0", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if self.method.losses().is_empty() {
            return bad("method enables no loss term".into());
        }
        self.loss.validate()?;
        self.kfs.validate()?;
        self.schedule(0).validate()?;
        Ok(())
    }

    pub fn schedule(&self, step: u64) -> DshSchedule {
        DshSchedule {
            batch_size: self.batch_size,
            eta: self.dsh_eta,
            mu: self.dsh_mu,
            step,
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: u64) -> Self {
        Self {
            base_lr: cfg.base_lr,
            warmup_steps: cfg.warmup_epochs as u64 * steps_per_epoch,
            total_steps: cfg.epochs as u64 * steps_per_epoch,
        }
    }
}

pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.base_lr;
    }
    let t = (step - s.warmup_steps).min(span) as f64 / span as f64;
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Projections are stored `d_in × d_emb` and applied as `x = Aᵀa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub a: Mat64,
    pub b: Mat64,
    pub kfs_image: Option<KfsParams>,
    pub kfs_text: Option<KfsParams>,
}

impl EncoderParams {
    pub fn init(d_in: usize, cfg: &TrainConfig, rng: &Rng) -> Result<Self, TrainError> {
        let scale = 1.0 / (d_in as f64).sqrt();
        let proj = |label: &str| {
            let mut r = rng.split(label);
            let data = (0..d_in * cfg.embed_dim).map(|_| scale * r.normal()).collect();
            Mat64::from_vec(d_in, cfg.embed_dim, data).expect("sized buffer")
        };
        let (kfs_image, kfs_text) = if cfg.method.kfs {
            (
                Some(KfsParams::init(cfg.embed_dim, &cfg.kfs, &rng.split("kfs-image"))?),
                Some(KfsParams::init(cfg.embed_dim, &cfg.kfs, &rng.split("kfs-text"))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            a: proj("proj-image"),
            b: proj("proj-text"),
            kfs_image,
            kfs_text,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    pub fn d_emb(&self) -> usize {
        self.a.cols()
    }

    pub fn tensors(&self) -> Vec<&Mat64> {
        let mut v = vec![&self.a, &self.b];
        for k in [&self.kfs_image, &self.kfs_text].into_iter().flatten() {
            v.extend(k.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat64> {
        let mut v = vec![&mut self.a, &mut self.b];
        for k in [&mut self.kfs_image, &mut self.kfs_text].into_iter().flatten() {
            v.extend(k.tensors_mut());
        }
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.scale(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn side(&self, text: bool) -> (&Mat64, Option<&KfsParams>) {
        if text {
            (&self.b, self.kfs_text.as_ref())
        } else {
            (&self.a, self.kfs_image.as_ref())
        }
    }
}

#[derive(Debug, Clone)]
struct Unit {
    hat: Vec<f64>,
    norm: f64,
}

fn unit(v: Vec<f64>) -> Option<Unit> {
    let norm = dot(&v, &v).sqrt();
    if !(norm > 1e-30) || !norm.is_finite() {
        return None;
    }
    let hat = v.into_iter().map(|x| x / norm).collect();
    Some(Unit { hat, norm })
}

/// `∂/∂x` of a loss given `∂/∂x̂`, for `x̂ = x/‖x‖`.
fn unit_backward(u: &Unit, d_hat: &[f64]) -> Vec<f64> {
    let proj = dot(&u.hat, d_hat);
    d_hat
        .iter()
        .zip(&u.hat)
        .map(|(g, h)| (g - h * proj) / u.norm)
        .collect()
}

#[derive(Debug, Clone)]
enum ItemTape {
    Linear,
    Kfs {
        tokens: Vec<Unit>,
        global: Unit,
        tape: Box<KfsTape>,
    },
}

#[derive(Debug, Clone)]
struct Embedded {
    out: Unit,
    tape: ItemTape,
}

fn collapse() -> TrainError {
    TrainError::Divergence {
        epoch: 0,
        step: 0,
        reason: "an embedding collapsed to zero".into(),
    }
}

fn embed(proj: &Mat64, kfs: Option<&KfsParams>, item: &TokenSet) -> Result<Embedded, TrainError> {
    if item.global.len() != proj.rows() {
        return Err(TrainError::ShapeMismatch(format!(
            "features have dimension {}, encoder expects {}",
            item.global.len(),
            proj.rows()
        )));
    }
    match kfs {
        None => {
            let out = unit(proj.project(&item.global)).ok_or_else(collapse)?;
            Ok(Embedded {
                out,
                tape: ItemTape::Linear,
            })
        }
        Some(p) => {
            let m = item.tokens.rows();
            let d = proj.cols();
            let mut tokens = Vec::with_capacity(m);
            let mut stacked = Mat64::zeros(m, d);
            for i in 0..m {
                let u = unit(proj.project(item.tokens.row(i))).ok_or_else(collapse)?;
                stacked.row_mut(i).copy_from_slice(&u.hat);
                tokens.push(u);
            }
            let global = unit(proj.project(&item.global)).ok_or_else(collapse)?;
            let input = TokenSet {
                tokens: stacked,
                global: global.hat.clone(),
            };
            let (refined, tape) = kfs_forward(&input, p)?;
            let out = unit(refined).ok_or_else(collapse)?;
            Ok(Embedded {
                out,
                tape: ItemTape::Kfs {
                    tokens,
                    global,
                    tape: Box::new(tape),
                },
            })
        }
    }
}

/// Accumulates the gradient of one item's embedding into `grads`.
fn embed_backward(
    kfs: Option<&KfsParams>,
    item: &TokenSet,
    e: &Embedded,
    d_out_hat: &[f64],
    g_proj: &mut Mat64,
    g_kfs: Option<&mut KfsParams>,
) -> Result<(), TrainError> {
    let d_out = unit_backward(&e.out, d_out_hat);
    match (&e.tape, kfs, g_kfs) {
        (ItemTape::Linear, _, _) => {
            g_proj.add_outer(&item.global, &d_out, 1.0);
        }
        (ItemTape::Kfs { tokens, global, tape }, Some(p), Some(gk)) => {
            let g = kfs_backward(tape, p, &d_out)?;
            for (dst, src) in gk.tensors_mut().into_iter().zip(g.params.tensors()) {
                dst.add_assign(src);
            }
            for (i, u) in tokens.iter().enumerate() {
                let d_tok = unit_backward(u, g.tokens.row(i));
                g_proj.add_outer(item.tokens.row(i), &d_tok, 1.0);
            }
            let d_glob = unit_backward(global, &g.global);
            g_proj.add_outer(&item.global, &d_glob, 1.0);
        }
        _ => return Err(TrainError::ShapeMismatch("KFS tape without KFS parameters".into())),
    }
    Ok(())
}

/// Retained activations of [`forward_batch`].
#[derive(Debug, Clone)]
pub struct BatchTape {
    images: Vec<Embedded>,
    texts: Vec<Embedded>,
}

impl BatchTape {
    pub fn image_embeddings(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(|e| e.out.hat.clone()).collect()
    }

    pub fn text_embeddings(&self) -> Vec<Vec<f64>> {
        self.texts.iter().map(|e| e.out.hat.clone()).collect()
    }
}

fn cosine_from(xs: &[Embedded], ys: &[Embedded]) -> Mat64 {
    let mut s = Mat64::zeros(xs.len(), ys.len());
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            s[(i, j)] = dot(&x.out.hat, &y.out.hat);
        }
    }
    s
}

/// Embeds images and texts and returns their cosine similarity matrix
/// (images are rows).
pub fn forward_batch(
    params: &EncoderParams,
    images: &[&TokenSet],
    texts: &[&TokenSet],
) -> Result<(Mat64, BatchTape), TrainError> {
    if images.is_empty() || texts.is_empty() {
        return Err(TrainError::ShapeMismatch("empty batch".into()));
    }
    let (a, ka) = params.side(false);
    let (b, kb) = params.side(true);
    let xs = images.iter().map(|it| embed(a, ka, it)).collect::<Result<Vec<_>, _>>()?;
    let ys = texts.iter().map(|it| embed(b, kb, it)).collect::<Result<Vec<_>, _>>()?;
    let s = cosine_from(&xs, &ys);
    Ok((s, BatchTape { images: xs, texts: ys }))
}

/// Gradient of a loss with respect to every encoder parameter, given
/// `∂L/∂S` for the batch produced by [`forward_batch`].
pub fn backward_batch(
    params: &EncoderParams,
    tape: &BatchTape,
    images: &[&TokenSet],
    texts: &[&TokenSet],
    grad_s: &Mat64,
) -> Result<EncoderParams, TrainError> {
    if grad_s.shape() != (tape.images.len(), tape.texts.len())
        || images.len() != tape.images.len()
        || texts.len() != tape.texts.len()
    {
        return Err(TrainError::ShapeMismatch("gradient does not match the batch".into()));
    }
    let mut grads = params.zeros_like();
    let d = params.d_emb();
    let EncoderParams {
        a: ga,
        b: gb,
        kfs_image: gki,
        kfs_text: gkt,
    } = &mut grads;

    for (i, (x, item)) in tape.images.iter().zip(images).enumerate() {
        // ∂L/∂x̂_i = Σ_j G_ij ŷ_j
        let mut dx = vec![0.0; d];
        for (j, y) in tape.texts.iter().enumerate() {
            let g = grad_s[(i, j)];
            dx.iter_mut().zip(&y.out.hat).for_each(|(a, b)| *a += g * b);
        }
        embed_backward(params.kfs_image.as_ref(), item, x, &dx, ga, gki.as_mut())?;
    }
    for (j, (y, item)) in tape.texts.iter().zip(texts).enumerate() {
        let mut dy = vec![0.0; d];
        for (i, x) in tape.images.iter().enumerate() {
            let g = grad_s[(i, j)];
            dy.iter_mut().zip(&x.out.hat).for_each(|(a, b)| *a += g * b);
        }
        embed_backward(params.kfs_text.as_ref(), item, y, &dy, gb, gkt.as_mut())?;
    }
    Ok(grads)
}

/// Unit embeddings of every image and text of a pair set.
pub fn embed_all(params: &EncoderParams, set: &PairSet) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    let (a, ka) = params.side(false);
    let (b, kb) = params.side(true);
    let xs = set
        .images
        .iter()
        .map(|it| embed(a, ka, it).map(|e| e.out.hat))
        .collect::<Result<Vec<_>, _>>()?;
    let ys = set
        .texts
        .iter()
        .map(|it| embed(b, kb, it).map(|e| e.out.hat))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((xs, ys))
}

/// Text → image retrieval metrics on a (clean) pair set.
pub fn evaluate_retrieval(params: &EncoderParams, set: &PairSet) -> Result<EvalReport, TrainError> {
    let (xs, ys) = embed_all(params, set)?;
    let mut sim = Mat64::zeros(ys.len(), xs.len());
    for (q, y) in ys.iter().enumerate() {
        for (g, x) in xs.iter().enumerate() {
            sim[(q, g)] = dot(y, x);
        }
    }
    let ranking = RankingResult::from_similarity(&sim, &set.text_identity, &set.image_identity)?;
    Ok(evaluate(&ranking)?)
}

/// Matched-pair evidence `exp(tanh(S_ii/τ_e))` for every training pair.
/// Both retrieval directions read the same diagonal entry, so their mean
/// equals either one.
pub fn pair_evidence(params: &EncoderParams, set: &PairSet, tau_e: f64) -> Result<Vec<f64>, TrainError> {
    let (xs, ys) = embed_all(params, set)?;
    Ok(set
        .pairs
        .iter()
        .map(|p| evidence_of(dot(&xs[p.image], &ys[p.text]).clamp(-1.0, 1.0), tau_e))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Mat64>,
    pub v: Vec<Mat64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let z: Vec<Mat64> = params
            .tensors()
            .iter()
            .map(|t| Mat64::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

pub const HIST_BINS: usize = 20;

/// Counts of evidence values over `HIST_BINS` equal bins on `[1/e, e]`.
pub fn evidence_histogram(values: impl Iterator<Item = f64>) -> Vec<u64> {
    let lo = (-1f64).exp();
    let hi = 1f64.exp();
    let mut h = vec![0u64; HIST_BINS];
    for v in values {
        let b = (((v - lo) / (hi - lo)) * HIST_BINS as f64).floor();
        h[(b.max(0.0) as usize).min(HIST_BINS - 1)] += 1;
    }
    h
}

/// Split outcome against the ground truth; "positive" means flagged noisy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_flags(flagged: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&f, &t) in flagged.iter().zip(truth) {
            match (f, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub terms: LossTerms,
    pub split_method: SplitMethod,
    /// Flags produced at the end of this epoch (used by the next one).
    pub confusion: Confusion,
    /// AUC of low evidence as a detector of mismatched pairs.
    pub evidence_auc: Option<f64>,
    pub evidence_hist_clean: Vec<u64>,
    pub evidence_hist_noisy: Vec<u64>,
    pub eval: EvalReport,
    pub n_negatives: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub n_pairs: usize,
    pub params: EncoderParams,
    pub adam: AdamState,
    pub rng: Rng,
    pub epoch: usize,
    pub step: u64,
    pub noisy_flags: Vec<bool>,
    pub logs: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let s = serde_json::to_string(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let s = std::fs::read_to_string(path)?;
        let cp: Checkpoint = serde_json::from_str(&s).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", cp.version)));
        }
        Ok(cp)
    }
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    params: EncoderParams,
    adam: AdamState,
    rng: Rng,
    epoch: usize,
    step: u64,
    noisy_flags: Vec<bool>,
    logs: Vec<EpochLog>,
    lr: LrSchedule,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, ds: &NoisyPairedDataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        let n = ds.train.len();
        if n < cfg.batch_size {
            return Err(TrainError::InvalidConfig(format!(
                "{n} training pairs cannot fill a batch of {}",
                cfg.batch_size
            )));
        }
        let d_in = ds.config.feature_dim;
        let root = Rng::new(cfg.seed);
        let params = EncoderParams::init(d_in, &cfg, &root.split("init"))?;
        let adam = AdamState::new(&params);
        let lr = LrSchedule::new(&cfg, (n / cfg.batch_size) as u64);
        Ok(Self {
            rng: root.split("shuffle"),
            cfg,
            params,
            adam,
            epoch: 0,
            step: 0,
            noisy_flags: vec![false; n],
            logs: Vec::new(),
            lr,
        })
    }

    pub fn from_checkpoint(cp: Checkpoint, ds: &NoisyPairedDataset) -> Result<Self, TrainError> {
        cp.config.validate()?;
        let n = ds.train.len();
        if cp.n_pairs != n || cp.noisy_flags.len() != n || cp.params.d_in() != ds.config.feature_dim {
            return Err(TrainError::ShapeMismatch("checkpoint was trained on a different dataset shape".into()));
        }
        let lr = LrSchedule::new(&cp.config, (n / cp.config.batch_size) as u64);
        Ok(Self {
            cfg: cp.config,
            params: cp.params,
            adam: cp.adam,
            rng: cp.rng,
            epoch: cp.epoch,
            step: cp.step,
            noisy_flags: cp.noisy_flags,
            logs: cp.logs,
            lr,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            n_pairs: self.noisy_flags.len(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            step: self.step,
            noisy_flags: self.noisy_flags.clone(),
            logs: self.logs.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn logs(&self) -> &[EpochLog] {
        &self.logs
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn noisy_flags(&self) -> &[bool] {
        &self.noisy_flags
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn diverged(&self, reason: impl Into<String>) -> TrainError {
        TrainError::Divergence {
            epoch: self.epoch,
            step: self.step,
            reason: reason.into(),
        }
    }

    /// One pass over shuffled full batches, then the evidence pass, split
    /// refresh, and held-out evaluation. On error the state is left at the
    /// last completed update.
    pub fn run_epoch(&mut self, ds: &NoisyPairedDataset) -> Result<&EpochLog, TrainError> {
        let k = self.cfg.batch_size;
        let train = &ds.train;
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let loss_cfg = self.cfg.loss.at_epoch(self.epoch);
        let selection = self.cfg.method.losses();

        let mut loss_sum = 0.0;
        let mut terms = LossTerms::default();
        let mut n_steps = 0usize;
        for chunk in order.chunks_exact(k) {
            let images: Vec<&TokenSet> = chunk.iter().map(|&p| &train.images[train.pairs[p].image]).collect();
            let texts: Vec<&TokenSet> = chunk.iter().map(|&p| &train.texts[train.pairs[p].text]).collect();
            let labels = BatchLabels::new(
                (0..k).collect(),
                chunk.iter().map(|&p| train.pairs[p].identity).collect(),
                chunk.iter().map(|&p| self.noisy_flags[p]).collect(),
            )?;

            let (s, tape) = forward_batch(&self.params, &images, &texts).map_err(|e| match e {
                TrainError::Divergence { reason, .. } => self.diverged(reason),
                other => other,
            })?;
            let report = loss_selected(&s, &labels, &self.cfg.schedule(self.step), &loss_cfg, selection)?;
            if !report.value.is_finite() || !report.grad_s.is_finite() {
                return Err(self.diverged("non-finite loss"));
            }
            let grads = backward_batch(&self.params, &tape, &images, &texts, &report.grad_s)?;
            if !grads.is_finite() {
                return Err(self.diverged("non-finite gradient"));
            }
            let mut next = self.params.clone();
            let mut adam = self.adam.clone();
            adam.step(&mut next, &grads, lr_at(self.step + 1, &self.lr), &self.cfg);
            if !next.is_finite() {
                return Err(self.diverged("non-finite parameters"));
            }
            self.params = next;
            self.adam = adam;
            self.step += 1;

            loss_sum += report.value;
            terms.accumulate(&report.per_term);
            n_steps += 1;
        }
        let inv = 1.0 / n_steps.max(1) as f64;

        let truth = train.mismatch_flags();
        let evidence = pair_evidence(&self.params, train, loss_cfg.tau_e)?;
        let neg_evidence: Vec<f64> = evidence.iter().map(|e| -e).collect();
        let evidence_auc = roc_auc(&neg_evidence, &truth);
        let evidence_hist_clean = evidence_histogram(evidence.iter().zip(&truth).filter(|(_, &t)| !t).map(|(e, _)| *e));
        let evidence_hist_noisy = evidence_histogram(evidence.iter().zip(&truth).filter(|(_, &t)| t).map(|(e, _)| *e));

        let warmup_done = self.cfg.method.evidential && self.epoch + 1 >= self.cfg.split_warmup_epochs;
        let split = split_clean_noisy(
            &evidence,
            warmup_done,
            &Rng::new(self.cfg.seed).split_indexed("split", self.epoch as u64),
        )?;
        self.noisy_flags = split.noisy_flags();

        let eval = evaluate_retrieval(&self.params, &ds.test)?;
        self.logs.push(EpochLog {
            epoch: self.epoch,
            step: self.step,
            lr: lr_at(self.step, &self.lr),
            loss: loss_sum * inv,
            terms: terms.scaled(inv),
            split_method: split.method,
            confusion: Confusion::from_flags(&self.noisy_flags, &truth),
            evidence_auc,
            evidence_hist_clean,
            evidence_hist_noisy,
            eval,
            n_negatives: dsh_negative_count(&self.cfg.schedule(self.step)),
        });
        self.epoch += 1;
        Ok(self.logs.last().expect("just pushed"))
    }

    pub fn run_to_end(&mut self, ds: &NoisyPairedDataset) -> Result<(), TrainError> {
        while !self.is_done() {
            self.run_epoch(ds)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (EncoderParams, Vec<EpochLog>) {
        (self.params, self.logs)
    }
}

/// Trains for `cfg.epochs` epochs from a fresh initialization.
pub fn train(cfg: &TrainConfig, ds: &NoisyPairedDataset) -> Result<(EncoderParams, Vec<EpochLog>), TrainError> {
    let mut t = Trainer::new(cfg.clone(), ds)?;
    t.run_to_end(ds)?;
    Ok(t.into_parts())
}

/// Epoch with the highest Rank-1 (earliest on ties) and the final epoch.
pub fn best_and_last(logs: &[EpochLog]) -> Option<(&EpochLog, &EpochLog)> {
    let last = logs.last()?;
    let best = logs
        .iter()
        .fold(&logs[0], |b, l| if l.eval.rank1 > b.eval.rank1 { l } else { b });
    Some((best, last))
}
