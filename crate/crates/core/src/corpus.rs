//! Synthetic multi-domain byte corpora.
//!
//! Every domain is a seeded Markov chain over a byte alphabet whose
//! transition rows are Dirichlet draws. A domain's generated stream is split
//! into a training prefix and a held-out suffix; evaluation texts are cut
//! only from the suffix, so no evaluation byte is ever seen in training.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::digest::DigestBuilder;
use crate::error::{config, contract, Error, Result};
use crate::mixopt::DomainWeights;
use crate::rng::{derived, seeded, Rng};

/// Fraction of each generated stream reserved as held-out material.
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;

/// Default evaluation chunk length in bytes.
pub const DEFAULT_CHUNK_BYTES: usize = 1024;

const CORPUS_MAGIC: &[u8; 4] = b"MXC1";
const MAX_CONTEXTS: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Markov order; 0 means i.i.d. draws from a single row.
    pub order: usize,
    pub transition_seed: u64,
    /// Tokens are bytes in `0..alphabet_size`.
    pub alphabet_size: u32,
    /// Dirichlet concentration of each transition row. Small values give
    /// peaked rows, large values near-uniform ones.
    pub skew: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.alphabet_size) {
            return config(format!(
                "domain {:?}: alphabet_size must be in 2..=256, got {}",
                self.name, self.alphabet_size
            ));
        }
        if !(self.skew.is_finite() && self.skew > 0.0) {
            return config(format!(
                "domain {:?}: skew must be a positive finite number, got {}",
                self.name, self.skew
            ));
        }
        if self.context_count().is_none() {
            return config(format!(
                "domain {:?}: alphabet_size^order exceeds {MAX_CONTEXTS} contexts",
                self.name
            ));
        }
        Ok(())
    }

    fn context_count(&self) -> Option<u64> {
        let mut n: u64 = 1;
        for _ in 0..self.order {
            n = n.checked_mul(self.alphabet_size as u64)?;
            if n > MAX_CONTEXTS {
                return None;
            }
        }
        Some(n)
    }

    /// Transition probabilities for one context, generated from the
    /// transition seed alone.
    pub fn transition_row(&self, context: u64) -> Vec<f64> {
        let mut rng = derived(self.transition_seed, "transition-row", context);
        let a = self.alphabet_size as usize;
        // Gamma(s) = Gamma(s + 1) * U^(1/s); the log form keeps tiny
        // concentrations from underflowing to an all-zero row.
        let gamma = Gamma::new(self.skew + 1.0, 1.0).expect("validated skew");
        let logs: Vec<f64> = (0..a)
            .map(|_| {
                let g: f64 = gamma.sample(&mut rng);
                let u: f64 = 1.0 - rng.random::<f64>();
                g.ln() + u.ln() / self.skew
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut row: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        row
    }

    /// The full transition matrix, one row per context in base-`alphabet`
    /// order (oldest token most significant).
    pub fn transition_matrix(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let n = self.context_count().unwrap();
        Ok((0..n).map(|c| self.transition_row(c)).collect())
    }
}

/// One domain's generated stream. `tokens[..train_len]` is training
/// material, the rest is held out.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCorpus {
    pub spec: DomainSpec,
    pub seed: u64,
    pub tokens: Vec<u8>,
    pub train_len: usize,
}

impl DomainCorpus {
    pub fn train_tokens(&self) -> &[u8] {
        &self.tokens[..self.train_len]
    }

    pub fn heldout_tokens(&self) -> &[u8] {
        &self.tokens[self.train_len..]
    }

    pub fn byte_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

struct RowCache<'a> {
    spec: &'a DomainSpec,
    rows: HashMap<u64, Vec<f64>>,
}

impl<'a> RowCache<'a> {
    fn cumulative(&mut self, ctx: u64) -> &[f64] {
        let spec = self.spec;
        self.rows.entry(ctx).or_insert_with(|| {
            let mut row = spec.transition_row(ctx);
            let mut acc = 0.0;
            for p in row.iter_mut() {
                acc += *p;
                *p = acc;
            }
            row
        })
    }
}

fn draw(cumulative: &[f64], u: f64) -> usize {
    let total = *cumulative.last().unwrap();
    let target = u * total;
    let i = cumulative.partition_point(|&c| c <= target);
    i.min(cumulative.len() - 1)
}

/// Generates `train_bytes` of training material plus a held-out suffix
/// making up [`DEFAULT_HOLDOUT_FRACTION`] of the stream.
pub fn generate_domain(
    spec: &DomainSpec,
    train_bytes: usize,
    min_train_bytes: usize,
    rng_seed: u64,
) -> Result<DomainCorpus> {
    let f = DEFAULT_HOLDOUT_FRACTION;
    let heldout = ((train_bytes as f64) * f / (1.0 - f)).ceil() as usize;
    generate_domain_with_holdout(spec, train_bytes, heldout, min_train_bytes, rng_seed)
}

pub fn generate_domain_with_holdout(
    spec: &DomainSpec,
    train_bytes: usize,
    heldout_bytes: usize,
    min_train_bytes: usize,
    rng_seed: u64,
) -> Result<DomainCorpus> {
    spec.validate()?;
    let minimum = min_train_bytes.max(1);
    if train_bytes < minimum {
        return config(format!(
            "domain {:?}: train_bytes {} is below the minimum of {} (one training window)",
            spec.name, train_bytes, minimum
        ));
    }
    let total = train_bytes + heldout_bytes;
    let a = spec.alphabet_size as u64;
    let contexts = spec.context_count().unwrap();
    let mut rng = derived(rng_seed, &spec.name, 0);
    let mut cache = RowCache {
        spec,
        rows: HashMap::new(),
    };
    let mut ctx: u64 = rng.random_range(0..contexts);
    let mut tokens = Vec::with_capacity(total);
    for _ in 0..total {
        let u: f64 = rng.random();
        let tok = draw(cache.cumulative(ctx), u) as u64;
        tokens.push(tok as u8);
        if spec.order > 0 {
            ctx = (ctx * a + tok) % contexts;
        }
    }
    Ok(DomainCorpus {
        spec: spec.clone(),
        seed: rng_seed,
        tokens,
        train_len: train_bytes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalText {
    pub domain: usize,
    /// Byte offset of the text inside its domain stream.
    pub offset: u64,
    pub tokens: Vec<u8>,
}

impl EvalText {
    pub fn byte_length(&self) -> usize {
        self.tokens.len()
    }
}

/// The evaluation corpus, partitioned by domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCorpus {
    pub labels: Vec<String>,
    pub texts: Vec<EvalText>,
    pub per_domain_counts: Vec<usize>,
    pub per_domain_mean_tokens: Vec<f64>,
    digest: String,
}

impl EvalCorpus {
    /// Builds a corpus from explicit texts; lengths may vary.
    pub fn from_texts(labels: Vec<String>, texts: Vec<EvalText>) -> Result<Self> {
        let k = labels.len();
        if k == 0 {
            return contract("evaluation corpus needs at least one domain");
        }
        let mut counts = vec![0usize; k];
        let mut tokens = vec![0usize; k];
        for (i, t) in texts.iter().enumerate() {
            if t.domain >= k {
                return contract(format!("text {i} has domain {} but K = {k}", t.domain));
            }
            if t.tokens.is_empty() {
                return contract(format!("text {i} is empty"));
            }
            counts[t.domain] += 1;
            tokens[t.domain] += t.tokens.len();
        }
        if let Some(k0) = counts.iter().position(|&c| c == 0) {
            return contract(format!("domain {:?} has no evaluation texts", labels[k0]));
        }
        let mean = counts
            .iter()
            .zip(&tokens)
            .map(|(&c, &t)| t as f64 / c as f64)
            .collect();
        let mut d = DigestBuilder::new();
        for l in &labels {
            d.str(l);
        }
        for t in &texts {
            d.u64(t.domain as u64).u64(t.offset).bytes(&t.tokens);
        }
        Ok(Self {
            labels,
            texts,
            per_domain_counts: counts,
            per_domain_mean_tokens: mean,
            digest: d.finish(),
        })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn n(&self) -> usize {
        self.texts.len()
    }

    /// Content digest; two corpora with equal texts share it.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn mean_byte_length(&self) -> f64 {
        let total: usize = self.texts.iter().map(|t| t.byte_length()).sum();
        total as f64 / self.n() as f64
    }

    pub fn text_id(&self, i: usize) -> String {
        let t = &self.texts[i];
        format!("{}:{}", self.labels[t.domain], t.offset)
    }

    pub fn token_slices(&self) -> Vec<&[u8]> {
        self.texts.iter().map(|t| t.tokens.as_slice()).collect()
    }
}

/// Cuts `texts_per_domain` chunks of exactly `chunk_bytes` from each
/// domain's held-out suffix. Chunk slots are chosen at random without
/// replacement; a trailing partial slot is never used.
pub fn build_eval_corpus(
    domains: &[DomainCorpus],
    texts_per_domain: usize,
    chunk_bytes: usize,
    rng_seed: u64,
) -> Result<EvalCorpus> {
    if texts_per_domain == 0 {
        return config("texts_per_domain must be at least 1");
    }
    if chunk_bytes == 0 {
        return config("chunk_bytes must be at least 1");
    }
    let mut rng = seeded(rng_seed);
    let mut texts = Vec::new();
    for (k, dom) in domains.iter().enumerate() {
        let held = dom.heldout_tokens();
        let slots = held.len() / chunk_bytes;
        if slots < texts_per_domain {
            let need = texts_per_domain * chunk_bytes;
            return config(format!(
                "domain {:?}: held-out material is {} bytes, {} short of the {} needed",
                dom.name(),
                held.len(),
                need - held.len(),
                need
            ));
        }
        let mut chosen = index::sample(&mut rng, slots, texts_per_domain).into_vec();
        chosen.sort_unstable();
        for slot in chosen {
            let start = slot * chunk_bytes;
            texts.push(EvalText {
                domain: k,
                offset: (dom.train_len + start) as u64,
                tokens: held[start..start + chunk_bytes].to_vec(),
            });
        }
    }
    EvalCorpus::from_texts(domains.iter().map(|d| d.spec.name.clone()).collect(), texts)
}

/// Draws a domain index with probability equal to its weight. Consumes
/// exactly one `f64` from the stream.
pub fn sample_domain(weights: &DomainWeights, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let values = weights.values();
    for (k, &w) in values.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // Rounding left the cumulative sum a hair under 1.
    values.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Fixed-length windows from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub domain_index: usize,
    pub window_length: usize,
    pub sequences: Vec<Vec<u8>>,
}

impl TokenBatch {
    pub fn new(domain_index: usize, sequences: Vec<Vec<u8>>) -> Result<Self> {
        let window_length = sequences.first().map(|s| s.len()).unwrap_or(0);
        if window_length == 0 || sequences.iter().any(|s| s.len() != window_length) {
            return contract("batch windows must be nonempty and of equal length");
        }
        Ok(Self {
            domain_index,
            window_length,
            sequences,
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.window_length * self.sequences.len()
    }
}

/// Draws `windows` contiguous windows at uniform positions of the
/// training region.
pub fn sample_batch(
    corpus: &DomainCorpus,
    domain_index: usize,
    window_length: usize,
    windows: usize,
    rng: &mut Rng,
) -> Result<TokenBatch> {
    let train = corpus.train_tokens();
    if window_length == 0 || windows == 0 {
        return contract("window_length and windows must be positive");
    }
    if window_length > train.len() {
        return contract(format!(
            "window_length {} exceeds the {} training bytes of domain {:?}",
            window_length,
            train.len(),
            corpus.name()
        ));
    }
    let last = train.len() - window_length;
    let sequences = (0..windows)
        .map(|_| {
            let start = rng.random_range(0..=last);
            train[start..start + window_length].to_vec()
        })
        .collect();
    Ok(TokenBatch {
        domain_index,
        window_length,
        sequences,
    })
}

// ---------------------------------------------------------------------------
// Files

pub fn write_corpus_file(path: &Path, corpus: &DomainCorpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&corpus.spec.alphabet_size.to_le_bytes())?;
    w.write_all(&(corpus.tokens.len() as u64).to_le_bytes())?;
    w.write_all(&corpus.tokens)?;
    w.flush()?;
    Ok(())
}

/// Reads the token stream of a corpus file, returning `(alphabet_size, tokens)`.
pub fn read_corpus_file(path: &Path) -> Result<(u32, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::Format(format!("{}: bad corpus magic", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let alphabet = u32::from_le_bytes(b4);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut tokens = vec![0u8; n];
    r.read_exact(&mut tokens)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after declared token count",
            path.display(),
            rest.len()
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as u32 >= alphabet) {
        return Err(Error::Format(format!(
            "{}: token {t} outside alphabet of size {alphabet}",
            path.display()
        )));
    }
    Ok((alphabet, tokens))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifestEntry {
    pub name: String,
    pub spec: DomainSpec,
    pub seed: u64,
    pub byte_count: usize,
    pub train_bytes: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub config_digest: String,
    pub domains: Vec<CorpusManifestEntry>,
}

impl CorpusManifest {
    /// Loads every domain file listed, relative to `dir`.
    pub fn load_domains(&self, dir: &Path) -> Result<Vec<DomainCorpus>> {
        self.domains
            .iter()
            .map(|e| {
                let (alphabet, tokens) = read_corpus_file(&dir.join(&e.file))?;
                if alphabet != e.spec.alphabet_size || tokens.len() != e.byte_count {
                    return Err(Error::Format(format!(
                        "{}: file disagrees with manifest entry",
                        e.file
                    )));
                }
                Ok(DomainCorpus {
                    spec: e.spec.clone(),
                    seed: e.seed,
                    tokens,
                    train_len: e.train_bytes,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifestEntry {
    pub domain: String,
    pub offset: u64,
    pub byte_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub digest: String,
    pub labels: Vec<String>,
    pub texts: Vec<EvalManifestEntry>,
}

impl EvalManifest {
    pub fn from_corpus(eval: &EvalCorpus) -> Self {
        Self {
            digest: eval.digest().to_string(),
            labels: eval.labels.clone(),
            texts: eval
                .texts
                .iter()
                .map(|t| EvalManifestEntry {
                    domain: eval.labels[t.domain].clone(),
                    offset: t.offset,
                    byte_length: t.byte_length(),
                })
                .collect(),
        }
    }

    /// Rebuilds the corpus from the domain streams it references and checks
    /// the recorded digest.
    pub fn resolve(&self, domains: &[DomainCorpus]) -> Result<EvalCorpus> {
        let mut texts = Vec::with_capacity(self.texts.len());
        for (i, e) in self.texts.iter().enumerate() {
            let k = self
                .labels
                .iter()
                .position(|l| *l == e.domain)
                .ok_or_else(|| Error::Format(format!("eval text {i}: unknown domain {:?}", e.domain)))?;
            let dom = domains
                .iter()
                .find(|d| d.spec.name == e.domain)
                .ok_or_else(|| Error::Format(format!("eval text {i}: domain {:?} not loaded", e.domain)))?;
            let start = e.offset as usize;
            let end = start + e.byte_length;
            if start < dom.train_len || end > dom.tokens.len() {
                return Err(Error::Format(format!(
                    "eval text {i}: bytes {start}..{end} fall outside the held-out region"
                )));
            }
            texts.push(EvalText {
                domain: k,
                offset: e.offset,
                tokens: dom.tokens[start..end].to_vec(),
            });
        }
        let eval = EvalCorpus::from_texts(self.labels.clone(), texts)?;
        if eval.digest() != self.digest {
            return Err(Error::Format("eval manifest digest does not match its texts".into()));
        }
        Ok(eval)
    }
}
