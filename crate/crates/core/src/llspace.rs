//! Log-likelihood space: per-text and per-domain LL vectors, double-centering,
//! the squared-distance KL estimate and a 2-D projection for model maps.
//!
//! Centered rows are only comparable within one centering, so callers build
//! a single [`TextLLMatrix`] over every model they want to compare.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalCorpus;
use crate::digest::DigestBuilder;
use crate::error::{contract, Error, Result};
use crate::tinylm::TextScore;

/// Mean log-likelihood per domain of one model on one evaluation corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainLLVector {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    /// Token-normalized (nats per token) rather than nats per text.
    pub normalized: bool,
    pub source_model: String,
    pub eval_digest: String,
}

impl DomainLLVector {
    pub fn k(&self) -> usize {
        self.values.len()
    }
}

/// Per-domain mean LL. Normalized values divide a domain's total LL by its
/// total token count; unnormalized values average the per-text totals.
pub fn domain_ll_vector(
    scores: &[TextScore],
    eval: &EvalCorpus,
    normalize: bool,
    source_model: &str,
) -> Result<DomainLLVector> {
    if scores.len() != eval.n() {
        let missing = scores.len().min(eval.n());
        return contract(format!(
            "{} text scores for {} evaluation texts (first unmatched text: {})",
            scores.len(),
            eval.n(),
            if missing < eval.n() { eval.text_id(missing) } else { "<none>".into() }
        ));
    }
    let k = eval.k();
    let mut ll = vec![0.0; k];
    let mut denom = vec![0.0; k];
    for (i, (s, t)) in scores.iter().zip(&eval.texts).enumerate() {
        if !s.total_ll.is_finite() {
            return contract(format!("score of {} is not finite", eval.text_id(i)));
        }
        ll[t.domain] += s.total_ll;
        denom[t.domain] += if normalize { s.token_count as f64 } else { 1.0 };
    }
    let values = ll.iter().zip(&denom).map(|(l, d)| l / d).collect();
    Ok(DomainLLVector {
        labels: eval.labels.clone(),
        values,
        normalized: normalize,
        source_model: source_model.to_string(),
        eval_digest: eval.digest().to_string(),
    })
}

/// Metadata of one column of a [`TextLLMatrix`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInfo {
    pub id: String,
    pub domain: String,
    pub token_count: usize,
    pub byte_count: usize,
}

/// Nats-per-text log-likelihoods of `M` models on `N` texts, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TextLLMatrix {
    models: Vec<String>,
    texts: Vec<TextInfo>,
    ll: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    model_id: String,
    text_id: String,
    domain: String,
    total_ll_nats: f64,
    token_count: usize,
    byte_count: usize,
}

impl TextLLMatrix {
    pub fn new(texts: Vec<TextInfo>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, t) in texts.iter().enumerate() {
            if seen.insert(t.id.clone(), i).is_some() {
                return contract(format!("duplicate text id {:?}", t.id));
            }
        }
        Ok(Self {
            models: Vec::new(),
            texts,
            ll: Vec::new(),
        })
    }

    pub fn for_eval(eval: &EvalCorpus) -> Result<Self> {
        Self::new(
            eval.texts
                .iter()
                .enumerate()
                .map(|(i, t)| TextInfo {
                    id: eval.text_id(i),
                    domain: eval.labels[t.domain].clone(),
                    token_count: t.tokens.len(),
                    byte_count: t.byte_length(),
                })
                .collect(),
        )
    }

    pub fn push_row(&mut self, model_id: &str, row: &[f64]) -> Result<()> {
        if row.len() != self.texts.len() {
            return contract(format!(
                "row for {model_id:?} has {} entries, expected {}",
                row.len(),
                self.texts.len()
            ));
        }
        if self.models.iter().any(|m| m == model_id) {
            return contract(format!("duplicate model id {model_id:?}"));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return contract(format!(
                "non-finite LL for {model_id:?} on {:?}",
                self.texts[j].id
            ));
        }
        self.models.push(model_id.to_string());
        self.ll.extend_from_slice(row);
        Ok(())
    }

    pub fn push_scores(&mut self, model_id: &str, scores: &[TextScore]) -> Result<()> {
        let row: Vec<f64> = scores.iter().map(|s| s.total_ll).collect();
        self.push_row(model_id, &row)
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn texts(&self) -> &[TextInfo] {
        &self.texts
    }

    pub fn m(&self) -> usize {
        self.models.len()
    }

    pub fn n(&self) -> usize {
        self.texts.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.ll[i * self.n()..(i + 1) * self.n()]
    }

    pub fn values(&self) -> &[f64] {
        &self.ll
    }

    pub fn model_index(&self, id: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::Contract(format!("unknown model id {id:?}")))
    }

    pub fn mean_byte_length(&self) -> f64 {
        self.texts.iter().map(|t| t.byte_count as f64).sum::<f64>() / self.n() as f64
    }

    pub fn digest(&self) -> String {
        let mut d = DigestBuilder::new();
        for m in &self.models {
            d.str(m);
        }
        for t in &self.texts {
            d.str(&t.id).str(&t.domain).u64(t.token_count as u64).u64(t.byte_count as u64);
        }
        for v in &self.ll {
            d.f64(*v);
        }
        d.finish()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for (i, m) in self.models.iter().enumerate() {
            for (t, v) in self.texts.iter().zip(self.row(i)) {
                out.serialize(CsvRow {
                    model_id: m.clone(),
                    text_id: t.id.clone(),
                    domain: t.domain.clone(),
                    total_ll_nats: *v,
                    token_count: t.token_count,
                    byte_count: t.byte_count,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a long-format LL table. Models and texts keep their order of
    /// first appearance; every (model, text) pair must occur exactly once.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut models: Vec<String> = Vec::new();
        let mut model_idx: HashMap<String, usize> = HashMap::new();
        let mut texts: Vec<TextInfo> = Vec::new();
        let mut text_idx: HashMap<String, usize> = HashMap::new();
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: CsvRow = row?;
            let mi = *model_idx.entry(row.model_id.clone()).or_insert_with(|| {
                models.push(row.model_id.clone());
                models.len() - 1
            });
            let info = TextInfo {
                id: row.text_id.clone(),
                domain: row.domain,
                token_count: row.token_count,
                byte_count: row.byte_count,
            };
            let ti = match text_idx.get(&row.text_id) {
                Some(&ti) => {
                    if texts[ti] != info {
                        return contract(format!("inconsistent metadata for text {:?}", row.text_id));
                    }
                    ti
                }
                None => {
                    texts.push(info);
                    text_idx.insert(row.text_id.clone(), texts.len() - 1);
                    texts.len() - 1
                }
            };
            if !row.total_ll_nats.is_finite() {
                return contract(format!("non-finite LL for {:?} on {:?}", row.model_id, row.text_id));
            }
            if cells.insert((mi, ti), row.total_ll_nats).is_some() {
                return contract(format!("duplicate entry for {:?} on {:?}", row.model_id, row.text_id));
            }
        }
        let mut matrix = Self::new(texts)?;
        for (mi, m) in models.iter().enumerate() {
            let row = (0..matrix.n())
                .map(|ti| {
                    cells.get(&(mi, ti)).copied().ok_or_else(|| {
                        Error::Contract(format!("missing entry for {m:?} on {:?}", matrix.texts[ti].id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            matrix.push_row(m, &row)?;
        }
        Ok(matrix)
    }
}

/// Double-centered LL matrix; row `i` is model `i`'s position in LL space.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredMatrix {
    pub models: Vec<String>,
    pub m: usize,
    pub n: usize,
    pub q: Vec<f64>,
    pub mean_byte_length: f64,
    pub provenance: String,
}

impl CenteredMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.n..(i + 1) * self.n]
    }

    pub fn index(&self, id: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::Contract(format!("unknown model id {id:?}")))
    }

    /// Euclidean distance between two rows.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.row(i), self.row(j)).sqrt()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Q_ij = L_ij - rowmean_i - colmean_j + grandmean` on a raw row-major grid.
pub fn center_values(m: usize, n: usize, l: &[f64]) -> Vec<f64> {
    let row_mean: Vec<f64> = (0..m)
        .map(|i| l[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let col_mean: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| l[i * n + j]).sum::<f64>() / m as f64)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / m as f64;
    let mut q = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            q.push(l[i * n + j] - row_mean[i] - col_mean[j] + grand);
        }
    }
    q
}

pub fn double_center(l: &TextLLMatrix) -> Result<CenteredMatrix> {
    let (m, n) = (l.m(), l.n());
    if m < 2 || n < 2 {
        return contract(format!("double-centering needs at least 2 models and 2 texts, got {m} x {n}"));
    }
    Ok(CenteredMatrix {
        models: l.models.clone(),
        m,
        n,
        q: center_values(m, n, &l.ll),
        mean_byte_length: l.mean_byte_length(),
        provenance: l.digest(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlUnits {
    NatsPerText,
    BitsPerByte,
}

/// `‖q_i - q_j‖² / (2N)` nats per text, or that value per byte in bits.
pub fn kl_estimate(q: &CenteredMatrix, i: &str, j: &str, units: KlUnits) -> Result<f64> {
    let (a, b) = (q.index(i)?, q.index(j)?);
    Ok(kl_estimate_rows(q, a, b, units))
}

pub fn kl_estimate_rows(q: &CenteredMatrix, i: usize, j: usize, units: KlUnits) -> f64 {
    let nats = sq_dist(q.row(i), q.row(j)) / (2.0 * q.n as f64);
    match units {
        KlUnits::NatsPerText => nats,
        KlUnits::BitsPerByte => nats / q.mean_byte_length * std::f64::consts::LOG2_E,
    }
}

/// Two-dimensional coordinates of every model for a model map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub models: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    /// Variance captured by each axis (eigenvalues of the row Gram).
    pub axis_variance: [f64; 2],
    /// Set when `Q` has rank below 2 and only the first axis is meaningful.
    pub degraded: bool,
}

/// Top-two principal coordinates of the rows of `Q / √N`. Each axis is
/// oriented so its largest-magnitude text loading is positive.
pub fn pca_project(q: &CenteredMatrix) -> Result<Projection> {
    let (m, n) = (q.m, q.n);
    if m < 3 {
        return contract(format!("a model map needs at least 3 models, got {m}"));
    }
    let x = DMatrix::from_row_slice(m, n, &q.q) / (n as f64).sqrt();
    let gram = &x * x.transpose();
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut coords = vec![[0.0; 2]; m];
    let mut axis_variance = [0.0; 2];
    let mut degraded = false;
    for (axis, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol {
            degraded = true;
            continue;
        }
        let u = eig.eigenvectors.column(idx);
        let loading = x.transpose() * u;
        let mut pivot = 0;
        for (t, v) in loading.iter().enumerate() {
            if v.abs() > loading[pivot].abs() {
                pivot = t;
            }
        }
        let sign = if loading[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, c) in coords.iter_mut().enumerate() {
            c[axis] = sign * u[i] * lambda.sqrt();
        }
        axis_variance[axis] = lambda;
    }
    Ok(Projection {
        models: q.models.clone(),
        coords,
        axis_variance,
        degraded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub ll: DomainLLVector,
    pub text_ll: Option<Vec<f64>>,
}

/// Checkpoints of one training run, in step order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub run_id: String,
    pub checkpoints: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(run_id: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            checkpoints: Vec::new(),
        }
    }

    pub fn push(&mut self, point: TrajectoryPoint) -> Result<()> {
        if let Some(last) = self.checkpoints.last() {
            if point.step <= last.step {
                return contract(format!(
                    "trajectory {:?}: step {} does not follow {}",
                    self.run_id, point.step, last.step
                ));
            }
        }
        self.checkpoints.push(point);
        Ok(())
    }

    /// Row id of the checkpoint at `step` in a shared [`TextLLMatrix`].
    pub fn model_id(&self, step: u64) -> String {
        format!("{}@{step}", self.run_id)
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }

    /// Adds every checkpoint that carries text LLs as a row of `matrix`.
    pub fn append_rows(&self, matrix: &mut TextLLMatrix) -> Result<()> {
        for c in &self.checkpoints {
            match &c.text_ll {
                Some(row) => matrix.push_row(&self.model_id(c.step), row)?,
                None => {
                    return contract(format!(
                        "checkpoint {} of {:?} has no text-level LLs",
                        c.step, self.run_id
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Mean distance between matched checkpoints of runs sharing a mixture
/// (`intra`) and of runs with different mixtures (`inter`).
pub fn trajectory_separation(
    a1: &Trajectory,
    a2: &Trajectory,
    b1: &Trajectory,
    b2: &Trajectory,
    q: &CenteredMatrix,
) -> Result<(f64, f64)> {
    let steps = a1.steps();
    for t in [a2, b1, b2] {
        if t.steps() != steps {
            return contract(format!(
                "trajectories {:?} and {:?} record different steps",
                a1.run_id, t.run_id
            ));
        }
    }
    if steps.is_empty() {
        return contract("empty trajectories");
    }
    let dist = |x: &Trajectory, y: &Trajectory, s: u64| -> Result<f64> {
        Ok(q.distance(q.index(&x.model_id(s))?, q.index(&y.model_id(s))?))
    };
    let (mut intra, mut inter) = (0.0, 0.0);
    for &s in &steps {
        intra += (dist(a1, a2, s)? + dist(b1, b2, s)?) / 2.0;
        inter += (dist(a1, b1, s)? + dist(a1, b2, s)? + dist(a2, b1, s)? + dist(a2, b2, s)?) / 4.0;
    }
    let n = steps.len() as f64;
    Ok((intra / n, inter / n))
}
