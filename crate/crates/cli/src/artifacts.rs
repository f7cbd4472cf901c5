//! On-disk layout under the config's output directory and the helpers that
//! read and write it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mixalign::corpus::{
    build_eval_corpus, generate_domain, CorpusManifest, DomainCorpus, EvalCorpus, EvalManifest,
};
use mixalign::llspace::{DomainLLVector, TextLLMatrix};
use mixalign::mixopt::{DomainWeights, Temperature, WeightTrajectory};
use mixalign::recipes::{EstimateRule, Method, RunConfig, Target};
use mixalign::tinylm::{read_checkpoint, ModelCheckpoint};

use crate::config::ExperimentConfig;
use crate::fail::{CliError, CliResult};

pub fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("corpus")
}

pub fn target_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join("targets").join(format!("seed-{seed}"))
}

/// Refuses to replace an existing file unless `force` is set.
pub fn guard(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::WouldOverwrite(path.display().to_string()));
    }
    Ok(())
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{} is not a valid {what}: {e}", path.display())))
}

/// Records the config digest and seeds in an SVG comment.
pub fn stamp_svg(svg: &str, digests: &[String], seeds: &[u64]) -> String {
    let (head, rest) = svg.split_once('\n').unwrap_or((svg, ""));
    format!(
        "{head}\n<!-- config_digest: {} seeds: {seeds:?} -->\n{rest}",
        digests.join(",")
    )
}

pub fn write_svg(path: &Path, svg: &str, digests: &[String], seeds: &[u64]) -> CliResult<()> {
    write_bytes(path, stamp_svg(svg, digests, seeds).as_bytes())
}

/// Generates the domains and evaluation corpus described by the config.
pub fn generate(cfg: &ExperimentConfig) -> CliResult<(Vec<DomainCorpus>, EvalCorpus)> {
    let corpora = cfg
        .corpus
        .domains
        .iter()
        .map(|d| generate_domain(&d.spec(), cfg.corpus.train_bytes, cfg.train.window_length, d.seed))
        .collect::<mixalign::Result<Vec<_>>>()?;
    let eval = build_eval_corpus(
        &corpora,
        cfg.corpus.eval_texts_per_domain,
        cfg.corpus.eval_chunk_bytes,
        cfg.corpus.eval_seed,
    )?;
    Ok((corpora, eval))
}

/// Loads the corpus written by `gen-corpus`.
pub fn load_corpus(cfg: &ExperimentConfig) -> CliResult<(Vec<DomainCorpus>, EvalCorpus)> {
    let dir = corpus_dir(cfg);
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CliError::Config(format!(
            "{} not found; run `gen-corpus` first",
            manifest_path.display()
        )));
    }
    let manifest: CorpusManifest = read_json(&manifest_path, "corpus manifest")?;
    let names: Vec<&str> = manifest.domains.iter().map(|d| d.name.as_str()).collect();
    let wanted: Vec<&str> = cfg.corpus.domains.iter().map(|d| d.name.as_str()).collect();
    if names != wanted {
        return Err(CliError::Config(format!(
            "corpus on disk has domains {names:?}, config names {wanted:?}; rerun `gen-corpus --force`"
        )));
    }
    let corpora = manifest.load_domains(&dir)?;
    let eval_manifest: EvalManifest = read_json(&dir.join("eval.json"), "eval manifest")?;
    let eval = eval_manifest.resolve(&corpora)?;
    Ok((corpora, eval))
}

pub fn load_checkpoint(path: &Path) -> CliResult<ModelCheckpoint> {
    read_checkpoint(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// A target given as a checkpoint (`.mxk`) or an LL table (`.csv`).
pub fn load_target(path: &Path, table_id: Option<&str>, eval: &EvalCorpus) -> CliResult<Target> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext == "csv" {
        let file = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let table = TextLLMatrix::read_csv(file)?;
        let id = match table_id {
            Some(id) => id.to_string(),
            None if table.m() == 1 => table.models()[0].clone(),
            None => {
                return Err(CliError::Config(format!(
                    "{} holds {} models; pick one with --target-id",
                    path.display(),
                    table.m()
                )))
            }
        };
        return Ok(Target::from_table(&table, &id, eval)?);
    }
    let model = load_checkpoint(path)?;
    let id = table_id
        .map(str::to_string)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "target".into());
    Ok(Target::Model { id, model })
}

/// `truth.json` written by `train-target`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRecord {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub seed: u64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub truth: DomainWeights,
    pub target_ll: DomainLLVector,
    pub params_digest: String,
}

/// `weights.json` written by `estimate`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsRecord {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub seed: u64,
    pub method: Method,
    pub rule: Option<EstimateRule>,
    pub tau: Temperature,
    pub tau_spec: String,
    pub target_id: String,
    pub eval_digest: String,
    pub pi_star: DomainWeights,
    pub trajectory: WeightTrajectory,
}

/// `run.json`: the resolved configuration of a training run, checked on
/// `--resume`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub run: RunConfig,
    pub target_id: String,
    pub eval_digest: String,
    pub base_digest: String,
    pub first_pass: Option<WeightTrajectory>,
}

/// Wall time of a run, kept apart from the byte-stable report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub run_id: String,
    pub wallclock_seconds: f64,
}
