//! Synthetic identity-clustered image/text pairs, mismatch injection, and
//! the evidence-based clean/noisy split.
//!
//! Each identity owns a unit centroid inside a random `signal_dim`
//! subspace of the feature space. An item (image or caption) draws its own
//! appearance `f = c + σ_within·ξ`; its local tokens are `f + σ_token·ξ_m`
//! and its global feature is `f + σ_global·ξ_g`. Jitter `ξ` is isotropic
//! over all `feature_dim` axes with unit expected norm.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kfs::TokenSet;
use crate::numeric::{dot, l2_normalize, Mat64, Rng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("placed {placed} of {requested} centroids before the retry budget ran out; lower the margin or raise signal_dim")]
    InfeasibleMargin { placed: usize, requested: usize },
    #[error("cannot mismatch {selected} selected pairs")]
    DerangementInfeasible { selected: usize },
    #[error("no scores to split")]
    EmptyScores,
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub test_identities: usize,
    pub test_images_per_identity: usize,
    pub test_captions_per_image: usize,
    pub feature_dim: usize,
    pub signal_dim: usize,
    pub token_count: usize,
    pub intra_identity_spread: f64,
    pub global_spread: f64,
    pub token_spread: f64,
    /// Centroid pairs satisfy `cos ≤ 1 - margin`.
    pub inter_identity_margin: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_identities: 200,
            images_per_identity: 5,
            captions_per_image: 2,
            test_identities: 100,
            test_images_per_identity: 2,
            test_captions_per_image: 1,
            feature_dim: 64,
            signal_dim: 16,
            token_count: 8,
            intra_identity_spread: 1.0,
            global_spread: 1.0,
            token_spread: 1.0,
            inter_identity_margin: 0.4,
            noise_rate: 0.2,
            seed: 0,
        }
    }
}

const CENTROID_RETRIES: usize = 10_000;

impl GenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.n_identities < 2 {
            return bad("n_identities must be >= 2".into());
        }
        if self.images_per_identity == 0 || self.captions_per_image == 0 {
            return bad("images_per_identity and captions_per_image must be >= 1".into());
        }
        if self.test_identities > 0 && (self.test_images_per_identity == 0 || self.test_captions_per_image == 0) {
            return bad("test set needs at least one image and caption per identity".into());
        }
        if self.feature_dim == 0 || self.token_count == 0 {
            return bad("feature_dim and token_count must be >= 1".into());
        }
        if self.signal_dim < 2 || self.signal_dim > self.feature_dim {
            return bad(format!(
                "signal_dim {} must lie in [2, feature_dim={}]",
                self.signal_dim, self.feature_dim
            ));
        }
        for (name, v) in [
            ("intra_identity_spread", self.intra_identity_spread),
            ("global_spread", self.global_spread),
            ("token_spread", self.token_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if !(self.inter_identity_margin >= 0.0 && self.inter_identity_margin <= 2.0) {
            return bad(format!("inter_identity_margin = {} outside [0, 2]", self.inter_identity_margin));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate < 1.0) {
            return bad(format!("noise_rate = {} outside [0, 1)", self.noise_rate));
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.n_identities * self.images_per_identity * self.captions_per_image
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub image: usize,
    pub text: usize,
    /// Identity of the caption; the pair's label.
    pub identity: usize,
    /// Identity of the (possibly shuffled) image.
    pub image_label: usize,
    pub is_mismatched: bool,
}

/// Images, captions, and the pairs that couple them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub images: Vec<TokenSet>,
    pub image_identity: Vec<usize>,
    pub texts: Vec<TokenSet>,
    pub text_identity: Vec<usize>,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn mismatch_flags(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.is_mismatched).collect()
    }

    pub fn n_mismatched(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_mismatched).count()
    }

    /// Mean cosine of matched global features minus the mean over every
    /// image/text combination with different identities.
    pub fn separation_gap(&self) -> f64 {
        let unit = |f: &TokenSet| l2_normalize(&f.global).unwrap_or_else(|_| vec![0.0; f.global.len()]);
        let imgs: Vec<Vec<f64>> = self.images.iter().map(unit).collect();
        let txts: Vec<Vec<f64>> = self.texts.iter().map(unit).collect();

        let clean: Vec<&Pair> = self.pairs.iter().filter(|p| !p.is_mismatched).collect();
        let matched = clean.iter().map(|p| dot(&imgs[p.image], &txts[p.text])).sum::<f64>()
            / clean.len().max(1) as f64;

        // Σ_{id(i) ≠ id(t)} x̂_i·ŷ_t = (Σx̂)·(Σŷ) − Σ_id (Σ_{i∈id} x̂)·(Σ_{t∈id} ŷ)
        let d = imgs.first().map_or(0, Vec::len);
        let n_ids = self.image_identity.iter().chain(&self.text_identity).max().map_or(0, |m| m + 1);
        let mut img_sum = vec![vec![0.0; d]; n_ids];
        let mut txt_sum = vec![vec![0.0; d]; n_ids];
        let mut img_count = vec![0usize; n_ids];
        let mut txt_count = vec![0usize; n_ids];
        for (x, &id) in imgs.iter().zip(&self.image_identity) {
            img_count[id] += 1;
            img_sum[id].iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
        for (y, &id) in txts.iter().zip(&self.text_identity) {
            txt_count[id] += 1;
            txt_sum[id].iter_mut().zip(y).for_each(|(a, b)| *a += b);
        }
        let total_i: Vec<f64> = (0..d).map(|j| img_sum.iter().map(|s| s[j]).sum()).collect();
        let total_t: Vec<f64> = (0..d).map(|j| txt_sum.iter().map(|s| s[j]).sum()).collect();
        let mut cross = dot(&total_i, &total_t);
        let mut n_cross = (imgs.len() * txts.len()) as f64;
        for id in 0..n_ids {
            cross -= dot(&img_sum[id], &txt_sum[id]);
            n_cross -= (img_count[id] * txt_count[id]) as f64;
        }
        matched - cross / n_cross.max(1.0)
    }
}

/// Training pairs (possibly corrupted) plus a clean held-out set over
/// disjoint identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyPairedDataset {
    pub config: GenConfig,
    pub train: PairSet,
    pub test: PairSet,
    /// Realized fraction of mismatched training pairs.
    pub rho: f64,
}

fn jitter(rng: &mut Rng, base: &[f64], spread: f64) -> Vec<f64> {
    let scale = spread / (base.len() as f64).sqrt();
    base.iter().map(|b| b + scale * rng.normal()).collect()
}

fn item(rng: &mut Rng, centroid: &[f64], cfg: &GenConfig) -> TokenSet {
    let f = jitter(rng, centroid, cfg.intra_identity_spread);
    let mut tokens = Mat64::zeros(cfg.token_count, cfg.feature_dim);
    for m in 0..cfg.token_count {
        let t = jitter(rng, &f, cfg.token_spread);
        tokens.row_mut(m).copy_from_slice(&t);
    }
    let global = jitter(rng, &f, cfg.global_spread);
    TokenSet { tokens, global }
}

/// `feature_dim × signal_dim` matrix with orthonormal columns.
fn signal_basis(rng: &mut Rng, d: usize, s: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(s);
    while cols.len() < s {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let p = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        if let Ok(u) = l2_normalize(&v) {
            cols.push(u);
        }
    }
    cols
}

fn place_centroids(rng: &mut Rng, cfg: &GenConfig, count: usize) -> Result<Vec<Vec<f64>>, DataError> {
    let basis = signal_basis(&mut rng.split("basis"), cfg.feature_dim, cfg.signal_dim);
    let mut draw = rng.split("centroids");
    let max_cos = 1.0 - cfg.inter_identity_margin;
    let mut latent: Vec<Vec<f64>> = Vec::with_capacity(count);
    while latent.len() < count {
        let mut placed = false;
        for _ in 0..CENTROID_RETRIES {
            let v: Vec<f64> = (0..cfg.signal_dim).map(|_| draw.normal()).collect();
            let Ok(u) = l2_normalize(&v) else { continue };
            if latent.iter().all(|c| dot(c, &u) <= max_cos) {
                latent.push(u);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::InfeasibleMargin {
                placed: latent.len(),
                requested: count,
            });
        }
    }
    Ok(latent
        .iter()
        .map(|z| {
            let mut x = vec![0.0; cfg.feature_dim];
            for (zk, col) in z.iter().zip(&basis) {
                x.iter_mut().zip(col).for_each(|(a, b)| *a += zk * b);
            }
            x
        })
        .collect())
}

fn build_split(
    rng: &Rng,
    cfg: &GenConfig,
    centroids: &[Vec<f64>],
    first_identity: usize,
    images_per: usize,
    captions_per: usize,
) -> PairSet {
    let mut set = PairSet {
        images: Vec::new(),
        image_identity: Vec::new(),
        texts: Vec::new(),
        text_identity: Vec::new(),
        pairs: Vec::new(),
    };
    for (offset, c) in centroids.iter().enumerate() {
        let id = first_identity + offset;
        for _ in 0..images_per {
            let image = set.images.len();
            let mut r = rng.split_indexed("image", image as u64);
            set.images.push(item(&mut r, c, cfg));
            set.image_identity.push(id);
            for _ in 0..captions_per {
                let text = set.texts.len();
                let mut r = rng.split_indexed("text", text as u64);
                set.texts.push(item(&mut r, c, cfg));
                set.text_identity.push(id);
                set.pairs.push(Pair {
                    image,
                    text,
                    identity: id,
                    image_label: id,
                    is_mismatched: false,
                });
            }
        }
    }
    set
}

/// Generates the clean sets, then corrupts `noise_rate` of the training
/// pairs with [`inject_noise`]. Identities `0..C` are training, `C..` test.
pub fn generate(cfg: &GenConfig) -> Result<NoisyPairedDataset, DataError> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let centroids = place_centroids(&mut root.split("geometry"), cfg, cfg.n_identities + cfg.test_identities)?;
    let (train_c, test_c) = centroids.split_at(cfg.n_identities);
    let train = build_split(
        &root.split("train"),
        cfg,
        train_c,
        0,
        cfg.images_per_identity,
        cfg.captions_per_image,
    );
    let test = build_split(
        &root.split("test"),
        cfg,
        test_c,
        cfg.n_identities,
        cfg.test_images_per_identity,
        cfg.test_captions_per_image,
    );
    let clean = NoisyPairedDataset {
        config: cfg.clone(),
        train,
        test,
        rho: 0.0,
    };
    inject_noise(clean, cfg.noise_rate, &mut root.split("noise"))
}

const SHUFFLE_ROUNDS: usize = 64;
const SELECTION_ROUNDS: usize = 64;

/// Identity-avoiding permutation of `selected` pairs' images, or `None`.
fn derange(rng: &mut Rng, set: &PairSet, selected: &[usize]) -> Option<Vec<usize>> {
    let n = selected.len();
    let text_id: Vec<usize> = selected.iter().map(|&p| set.pairs[p].identity).collect();
    let img_id = |img: usize| set.image_identity[img];
    for _ in 0..SHUFFLE_ROUNDS {
        let mut images: Vec<usize> = selected.iter().map(|&p| set.pairs[p].image).collect();
        rng.shuffle(&mut images);
        let mut ok = true;
        for j in 0..n {
            if img_id(images[j]) != text_id[j] {
                continue;
            }
            // swap with a random partner that fixes j without breaking it
            let start = rng.below(n);
            let partner = (0..n).map(|o| (start + o) % n).find(|&k| {
                img_id(images[k]) != text_id[j] && img_id(images[j]) != text_id[k]
            });
            match partner {
                Some(k) => images.swap(j, k),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Some(images);
        }
    }
    None
}

/// Mismatches exactly `⌊rho·N⌋` uniformly chosen training pairs by
/// permuting their images among themselves so that no selected pair keeps
/// an image of its caption's identity.
pub fn inject_noise(
    mut ds: NoisyPairedDataset,
    rho: f64,
    rng: &mut Rng,
) -> Result<NoisyPairedDataset, DataError> {
    if !(rho >= 0.0 && rho < 1.0) {
        return Err(DataError::InvalidConfig(format!("noise rate {rho} outside [0, 1)")));
    }
    let n = ds.train.len();
    let count = (rho * n as f64).floor() as usize;
    if count == 0 {
        ds.rho = ds.train.n_mismatched() as f64 / n.max(1) as f64;
        return Ok(ds);
    }
    if count < 2 {
        return Err(DataError::DerangementInfeasible { selected: count });
    }
    for _ in 0..SELECTION_ROUNDS {
        let mut selected = rng.sample_indices(n, count);
        selected.sort_unstable();
        if let Some(images) = derange(rng, &ds.train, &selected) {
            for (&p, img) in selected.iter().zip(images) {
                let pair = &mut ds.train.pairs[p];
                pair.image = img;
                pair.image_label = ds.train.image_identity[img];
                pair.is_mismatched = pair.image_label != pair.identity;
            }
            ds.rho = ds.train.n_mismatched() as f64 / n as f64;
            return Ok(ds);
        }
    }
    Err(DataError::DerangementInfeasible { selected: count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMethod {
    /// Before warmup ends every pair is clean.
    Warmup,
    Gmm,
    MedianFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub clean_indices: Vec<usize>,
    pub noisy_indices: Vec<usize>,
    pub scores: Vec<f64>,
    /// Posterior of the higher-mean component per pair (1 for warmup,
    /// 0/1 for the median fallback).
    pub clean_posterior: Vec<f64>,
    pub method: SplitMethod,
    /// Fitted `(weight, mean, variance)` of the low and high components on
    /// the normalized scale.
    pub components: Option<[(f64, f64, f64); 2]>,
}

impl SplitResult {
    pub fn noisy_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.scores.len()];
        for &i in &self.noisy_indices {
            flags[i] = true;
        }
        flags
    }
}

pub const GMM_ITERATIONS: usize = 50;
const VARIANCE_FLOOR: f64 = 1e-6;
const MIN_WEIGHT: f64 = 0.05;
const MIN_SEPARATION: f64 = 0.05;

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// k-means++ seeding on sorted data so the result ignores input order.
fn kmeans_pp(sorted: &[f64], rng: &mut Rng) -> (f64, f64) {
    let first = sorted[rng.below(sorted.len())];
    let d2: Vec<f64> = sorted.iter().map(|x| (x - first).powi(2)).collect();
    let total: f64 = d2.iter().sum();
    let second = if total <= 0.0 {
        first
    } else {
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = sorted[sorted.len() - 1];
        for (x, w) in sorted.iter().zip(&d2) {
            acc += w;
            if acc > target {
                pick = *x;
                break;
            }
        }
        pick
    };
    (first.min(second), first.max(second))
}

/// Two-component 1-D Gaussian mixture fitted by EM; returns
/// `[(w, μ, σ²); 2]` sorted by mean.
fn fit_gmm(x: &[f64], rng: &mut Rng) -> [(f64, f64, f64); 2] {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (m0, m1) = kmeans_pp(&sorted, rng);
    let var0 = {
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / sorted.len() as f64).max(VARIANCE_FLOOR)
    };
    let mut comp = [(0.5, m0, var0), (0.5, m1, var0)];
    let n = sorted.len() as f64;
    let mut resp = vec![0.0; sorted.len()];
    for _ in 0..GMM_ITERATIONS {
        for (r, &v) in resp.iter_mut().zip(&sorted) {
            let a = comp[0].0 * normal_pdf(v, comp[0].1, comp[0].2);
            let b = comp[1].0 * normal_pdf(v, comp[1].1, comp[1].2);
            *r = if a + b > 0.0 {
                b / (a + b)
            } else if (v - comp[1].1).abs() < (v - comp[0].1).abs() {
                1.0
            } else {
                0.0
            };
        }
        let n1: f64 = resp.iter().sum();
        let n0 = n - n1;
        if n0 <= 0.0 || n1 <= 0.0 {
            comp = [(n0 / n, comp[0].1, comp[0].2), (n1 / n, comp[1].1, comp[1].2)];
            break;
        }
        let mu1 = resp.iter().zip(&sorted).map(|(r, v)| r * v).sum::<f64>() / n1;
        let mu0 = resp.iter().zip(&sorted).map(|(r, v)| (1.0 - r) * v).sum::<f64>() / n0;
        let v1 = resp.iter().zip(&sorted).map(|(r, v)| r * (v - mu1).powi(2)).sum::<f64>() / n1;
        let v0 = resp.iter().zip(&sorted).map(|(r, v)| (1.0 - r) * (v - mu0).powi(2)).sum::<f64>() / n0;
        comp = [
            (n0 / n, mu0, v0.max(VARIANCE_FLOOR)),
            (n1 / n, mu1, v1.max(VARIANCE_FLOOR)),
        ];
    }
    if comp[0].1 > comp[1].1 {
        comp.swap(0, 1);
    }
    comp
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Splits pairs by matched-pair evidence: higher evidence means clean.
pub fn split_clean_noisy(scores: &[f64], warmup_done: bool, rng: &Rng) -> Result<SplitResult, DataError> {
    if scores.is_empty() {
        return Err(DataError::EmptyScores);
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(DataError::NonFiniteScore { index });
    }
    let n = scores.len();
    if !warmup_done {
        return Ok(SplitResult {
            clean_indices: (0..n).collect(),
            noisy_indices: Vec::new(),
            scores: scores.to_vec(),
            clean_posterior: vec![1.0; n],
            method: SplitMethod::Warmup,
            components: None,
        });
    }

    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let fitted = if range > 0.0 {
        let x: Vec<f64> = scores.iter().map(|s| (s - lo) / range).collect();
        let comp = fit_gmm(&x, &mut rng.split("gmm"));
        let degenerate = comp[0].0 < MIN_WEIGHT
            || comp[1].0 < MIN_WEIGHT
            || (comp[1].1 - comp[0].1).abs() < MIN_SEPARATION;
        (!degenerate).then(|| {
            let post: Vec<f64> = x
                .iter()
                .map(|&v| {
                    let a = comp[0].0 * normal_pdf(v, comp[0].1, comp[0].2);
                    let b = comp[1].0 * normal_pdf(v, comp[1].1, comp[1].2);
                    if a + b > 0.0 {
                        b / (a + b)
                    } else if v >= 0.5 * (comp[0].1 + comp[1].1) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            (post, comp)
        })
    } else {
        None
    };

    let (clean_posterior, method, components) = match fitted {
        Some((post, comp)) => (post, SplitMethod::Gmm, Some(comp)),
        None => {
            let m = median(scores);
            let post = scores.iter().map(|&s| if s >= m { 1.0 } else { 0.0 }).collect();
            (post, SplitMethod::MedianFallback, None)
        }
    };
    let (clean_indices, noisy_indices) = (0..n).partition(|&i| clean_posterior[i] >= 0.5);
    Ok(SplitResult {
        clean_indices,
        noisy_indices,
        scores: scores.to_vec(),
        clean_posterior,
        method,
        components,
    })
}

pub const DATASET_MAGIC: [u8; 8] = *b"DURADS\0\0";
pub const DATASET_VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: usize) -> std::io::Result<()> {
        self.0.write_all(&(v as u64).to_le_bytes())
    }
    fn raw_u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_bits().to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> std::io::Result<()> {
        v.iter().try_for_each(|&x| self.f64(x))
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| DataError::Format(format!("truncated file ({e})")))?;
        Ok(b)
    }
    fn raw_u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<usize, DataError> {
        usize::try_from(self.raw_u64()?).map_err(|_| DataError::Format("count overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_bits(self.raw_u64()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_config<W: Write>(w: &mut Writer<W>, c: &GenConfig) -> std::io::Result<()> {
    for v in [
        c.n_identities,
        c.images_per_identity,
        c.captions_per_image,
        c.test_identities,
        c.test_images_per_identity,
        c.test_captions_per_image,
        c.feature_dim,
        c.signal_dim,
        c.token_count,
    ] {
        w.u64(v)?;
    }
    for v in [
        c.intra_identity_spread,
        c.global_spread,
        c.token_spread,
        c.inter_identity_margin,
        c.noise_rate,
    ] {
        w.f64(v)?;
    }
    w.raw_u64(c.seed)
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<GenConfig, DataError> {
    Ok(GenConfig {
        n_identities: r.u64()?,
        images_per_identity: r.u64()?,
        captions_per_image: r.u64()?,
        test_identities: r.u64()?,
        test_images_per_identity: r.u64()?,
        test_captions_per_image: r.u64()?,
        feature_dim: r.u64()?,
        signal_dim: r.u64()?,
        token_count: r.u64()?,
        intra_identity_spread: r.f64()?,
        global_spread: r.f64()?,
        token_spread: r.f64()?,
        inter_identity_margin: r.f64()?,
        noise_rate: r.f64()?,
        seed: r.raw_u64()?,
    })
}

fn write_items<W: Write>(w: &mut Writer<W>, items: &[TokenSet], ids: &[usize]) -> std::io::Result<()> {
    w.u64(items.len())?;
    for (it, &id) in items.iter().zip(ids) {
        w.u64(id)?;
        w.f64s(&it.global)?;
        w.f64s(it.tokens.as_slice())?;
    }
    Ok(())
}

fn read_items<R: Read>(r: &mut Reader<R>, d: usize, m: usize) -> Result<(Vec<TokenSet>, Vec<usize>), DataError> {
    let n = r.u64()?;
    let mut items = Vec::with_capacity(n.min(1 << 20));
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        ids.push(r.u64()?);
        let global = r.f64s(d)?;
        let tokens = Mat64::from_vec(m, d, r.f64s(m * d)?).map_err(|e| DataError::Format(e.to_string()))?;
        items.push(TokenSet { tokens, global });
    }
    Ok((items, ids))
}

fn write_set<W: Write>(w: &mut Writer<W>, s: &PairSet) -> std::io::Result<()> {
    write_items(w, &s.images, &s.image_identity)?;
    write_items(w, &s.texts, &s.text_identity)?;
    w.u64(s.pairs.len())?;
    for p in &s.pairs {
        w.u64(p.image)?;
        w.u64(p.text)?;
        w.u64(p.identity)?;
        w.u64(p.image_label)?;
        w.0.write_all(&[u8::from(p.is_mismatched)])?;
    }
    Ok(())
}

fn read_set<R: Read>(r: &mut Reader<R>, d: usize, m: usize) -> Result<PairSet, DataError> {
    let (images, image_identity) = read_items(r, d, m)?;
    let (texts, text_identity) = read_items(r, d, m)?;
    let n = r.u64()?;
    let mut pairs = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let pair = Pair {
            image: r.u64()?,
            text: r.u64()?,
            identity: r.u64()?,
            image_label: r.u64()?,
            is_mismatched: match r.bytes::<1>()?[0] {
                0 => false,
                1 => true,
                b => return Err(DataError::Format(format!("bad flag byte {b}"))),
            },
        };
        if pair.image >= images.len() || pair.text >= texts.len() {
            return Err(DataError::Format("pair refers to a missing item".into()));
        }
        pairs.push(pair);
    }
    Ok(PairSet {
        images,
        image_identity,
        texts,
        text_identity,
        pairs,
    })
}

/// Writes the binary dataset format described in `docs/dataset-format.md`.
pub fn write_dataset<W: Write>(ds: &NoisyPairedDataset, out: W) -> Result<(), DataError> {
    let mut w = Writer(out);
    w.0.write_all(&DATASET_MAGIC)?;
    w.0.write_all(&DATASET_VERSION.to_le_bytes())?;
    write_config(&mut w, &ds.config)?;
    w.f64(ds.rho)?;
    write_set(&mut w, &ds.train)?;
    write_set(&mut w, &ds.test)?;
    w.0.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<NoisyPairedDataset, DataError> {
    let mut r = Reader(input);
    if r.bytes::<8>()? != DATASET_MAGIC {
        return Err(DataError::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let config = read_config(&mut r)?;
    let rho = r.f64()?;
    let (d, m) = (config.feature_dim, config.token_count);
    let train = read_set(&mut r, d, m)?;
    let test = read_set(&mut r, d, m)?;
    let mut trailing = [0u8; 1];
    if r.0.read(&mut trailing)? != 0 {
        return Err(DataError::Format("trailing bytes after dataset".into()));
    }
    Ok(NoisyPairedDataset {
        config,
        train,
        test,
        rho,
    })
}

pub fn save_dataset(ds: &NoisyPairedDataset, path: &Path) -> Result<(), DataError> {
    let f = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(f))
}

pub fn load_dataset(path: &Path) -> Result<NoisyPairedDataset, DataError> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}
