use std::path::{Path, PathBuf};

use dura::data::GenConfig;
use dura::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub noise: Vec<f64>,
    /// Method names, or `ablation` for the eight-row component stack.
    pub methods: Vec<String>,
    /// Each seed sets both the data and the training seed of its cells.
    /// Empty means the single seed pair from `[data]` and `[train]`.
    pub seeds: Vec<u64>,
    /// Worker threads for sweep cells; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            noise: vec![0.0, 0.2, 0.5],
            methods: vec!["dura".into(), "triplet".into()],
            seeds: Vec::new(),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Defaults to `<verb>-<first 12 hex digits of the config hash>`.
    pub run_id: Option<String>,
    pub out_dir: PathBuf,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            out_dir: PathBuf::from("runs"),
            data: GenConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub noise: Option<Vec<f64>>,
    pub methods: Option<Vec<String>>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text, &p.display().to_string())
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.data.seed = seed;
            self.train.seed = seed;
            self.sweep.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(noise) = &o.noise {
            let first = *noise
                .first()
                .ok_or_else(|| CliError::Config("--noise needs at least one value".into()))?;
            self.data.noise_rate = first;
            self.sweep.noise = noise.clone();
        }
        if let Some(methods) = &o.methods {
            let first = methods
                .first()
                .ok_or_else(|| CliError::Config("--methods needs at least one value".into()))?;
            if let Some(m) = Method::parse(first) {
                self.train.method = m;
            }
            self.sweep.methods = methods.clone();
        }
        if let Some(t) = o.threads {
            self.sweep.threads = t;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sweep.noise.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(CliError::Config("sweep noise rates must lie in [0, 1)".into()));
        }
        self.sweep_methods()?;
        Ok(())
    }

    /// Labeled methods of the sweep, with `ablation` expanded in place.
    pub fn sweep_methods(&self) -> Result<Vec<(String, Method)>, CliError> {
        let mut out = Vec::new();
        for name in &self.sweep.methods {
            if name.eq_ignore_ascii_case("ablation") {
                out.extend(Method::ablation_preset().into_iter().map(|(l, m)| (l.to_string(), m)));
            } else {
                let m = Method::parse(name).ok_or_else(|| CliError::Config(format!("unknown method {name:?}")))?;
                out.push((m.name(), m));
            }
        }
        if out.is_empty() {
            return Err(CliError::Config("no methods to run".into()));
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Hash of everything that affects results. The run id and output
    /// directory are excluded so a rerun elsewhere keeps its identity.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.run_id = None;
        keyed.out_dir = PathBuf::new();
        config_hash(&keyed)
    }

    pub fn run_id(&self, verb: &str) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{verb}-{}", &self.hash()[..12]))
    }
}

/// SHA-256 of the TOML rendering of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let text = toml::to_string(cfg).expect("config is always serializable");
    hex::encode(Sha256::digest(text.as_bytes()))
}
