use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use mixalign::corpus::DomainSpec;
use mixalign::digest::sha256_hex;
use mixalign::mixopt::Temperature;
use mixalign::recipes::{EstimationSchedule, Method, TrainSettings};
use mixalign::tinylm::ModelConfig;

use crate::fail::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub schedule: ScheduleSection,
    pub target: TargetSection,
    #[serde(default)]
    pub methods: Vec<MethodEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub train_bytes: usize,
    pub eval_texts_per_domain: usize,
    pub eval_chunk_bytes: usize,
    pub eval_seed: u64,
    pub domains: Vec<DomainEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    pub order: usize,
    pub transition_seed: u64,
    pub alphabet_size: u32,
    pub skew: f64,
    /// Seed of the sampling stream.
    pub seed: u64,
}

impl DomainEntry {
    pub fn spec(&self) -> DomainSpec {
        DomainSpec {
            name: self.name.clone(),
            order: self.order,
            transition_seed: self.transition_seed,
            alphabet_size: self.alphabet_size,
            skew: self.skew,
        }
    }
}

/// Either explicit estimation steps or a dense-then-sparse pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_until: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    /// Target init seed is `init_seed_offset + seed`.
    pub init_seed_offset: u64,
    /// Target data seed is `data_seed_offset + seed`.
    pub data_seed_offset: u64,
    pub boost: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: Method,
    #[serde(default = "default_tau")]
    pub tau: TauSpec,
}

fn default_tau() -> TauSpec {
    TauSpec::Spread(1.0)
}

/// A temperature given directly, or as a multiple of the LLD spread of the
/// base model (written `"0.1s"`, `"1s"`, ...).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauSpec {
    Absolute(Temperature),
    Spread(f64),
}

impl TauSpec {
    pub fn resolve(&self, spread: f64) -> CliResult<Temperature> {
        match *self {
            TauSpec::Absolute(t) => Ok(t),
            TauSpec::Spread(m) => Ok(Temperature::finite(m * spread)?),
        }
    }
}

impl fmt::Display for TauSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauSpec::Absolute(t) => write!(f, "{t}"),
            TauSpec::Spread(m) => write!(f, "{m}s"),
        }
    }
}

impl FromStr for TauSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        let s = s.trim();
        if let Some(m) = s.strip_suffix('s') {
            let m: f64 = m
                .parse()
                .map_err(|_| CliError::Config(format!("bad spread multiple {s:?}")))?;
            if !(m.is_finite() && m > 0.0) {
                return Err(CliError::Config(format!("spread multiple must be positive, got {s:?}")));
            }
            return Ok(TauSpec::Spread(m));
        }
        Ok(TauSpec::Absolute(s.parse()?))
    }
}

impl Serialize for TauSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TauSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Temperature::finite(x)
                .map(TauSpec::Absolute)
                .map_err(serde::de::Error::custom),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file, then applies `MIXALIGN_SEED`.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Ok(v) = std::env::var("MIXALIGN_SEED") {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("MIXALIGN_SEED is not an integer: {v:?}")))?;
            cfg.seeds = vec![seed];
        }
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            if path == "." {
                CliError::Config(msg)
            } else {
                CliError::Config(format!("at `{path}`: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("`seeds` must list at least one seed".into()));
        }
        if self.corpus.domains.len() < 2 {
            return Err(CliError::Config("`corpus.domains` needs at least two domains".into()));
        }
        for d in &self.corpus.domains {
            d.spec().validate()?;
            if d.alphabet_size as usize > self.model.vocab {
                return Err(CliError::Config(format!(
                    "domain {:?} uses {} symbols but `model.vocab` is {}",
                    d.name, d.alphabet_size, self.model.vocab
                )));
            }
        }
        for name in self.target.boost.keys() {
            if !self.corpus.domains.iter().any(|d| &d.name == name) {
                return Err(CliError::Config(format!("`target.boost` names unknown domain {name:?}")));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        self.schedule(self.train.total_steps)?;
        Ok(())
    }

    /// Digest of the effective config (after the seed override).
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn schedule(&self, total_steps: u64) -> CliResult<EstimationSchedule> {
        let s = &self.schedule;
        match (&s.steps, s.dense_until, s.stride) {
            (Some(steps), None, None) => {
                let kept = steps.iter().copied().filter(|&t| t < total_steps).collect();
                Ok(EstimationSchedule::new(kept, total_steps)?)
            }
            (None, Some(d), Some(k)) => Ok(EstimationSchedule::dense_then_sparse(total_steps, d.min(total_steps), k)?),
            _ => Err(CliError::Config(
                "`schedule` takes either `steps` or both `dense_until` and `stride`".into(),
            )),
        }
    }

    pub fn target_settings(&self) -> TrainSettings {
        match self.target.steps {
            Some(n) => TrainSettings {
                total_steps: n,
                warmup_steps: self.train.warmup_steps.min(n),
                ..self.train.clone()
            },
            None => self.train.clone(),
        }
    }

    pub fn tau_for(&self, method: Method) -> TauSpec {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .map(|m| m.tau)
            .unwrap_or_else(default_tau)
    }
}
