//! Training pipelines: the target-referencing first pass that estimates
//! domain weights, the fixed-weight second pass, and the baselines they are
//! compared against (uniform, iterative and adjusted LLD, distillation).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{sample_batch, sample_domain, DomainCorpus, EvalCorpus};
use crate::digest::DigestBuilder;
use crate::error::{config, contract, Error, Result};
use crate::llspace::{
    domain_ll_vector, double_center, kl_estimate_rows, DomainLLVector, KlUnits, TextLLMatrix, Trajectory,
    TrajectoryPoint,
};
use crate::mixopt::{
    adjusted_lld_weights, aggregate_geometric, gram_matrix, kl_simplex, lld, raw_lld_weights, DomainWeights,
    Temperature, WeightTrajectory,
};
use crate::rng::{derived, Rng, RngSnapshot};
use crate::tinylm::{distill_grad, init_model, AdamWParams, LossKind, LrSchedule, ModelCheckpoint, ModelConfig};

/// The steps `T` at which domain weights are (re-)estimated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSchedule {
    pub steps: Vec<u64>,
    pub total_steps: u64,
}

impl EstimationSchedule {
    pub fn new(steps: Vec<u64>, total_steps: u64) -> Result<Self> {
        let s = Self { steps, total_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.first() != Some(&0) {
            return config("estimation schedule must start at step 0");
        }
        if self.steps.windows(2).any(|w| w[0] >= w[1]) {
            return config("estimation steps must be strictly increasing");
        }
        if let Some(&last) = self.steps.last() {
            if last >= self.total_steps {
                return config(format!(
                    "estimation step {last} is not below total_steps {}",
                    self.total_steps
                ));
            }
        }
        Ok(())
    }

    /// `{0}` ∪ powers of two up to `dense_until` ∪ multiples of `stride`
    /// beyond it, all below `total_steps`.
    pub fn dense_then_sparse(total_steps: u64, dense_until: u64, stride: u64) -> Result<Self> {
        if stride == 0 {
            return config("schedule stride must be positive");
        }
        let mut steps = vec![0];
        let mut p = 1;
        while p <= dense_until && p < total_steps {
            steps.push(p);
            p *= 2;
        }
        let mut s = (dense_until / stride + 1) * stride;
        while s < total_steps {
            steps.push(s);
            s += stride;
        }
        Self::new(steps, total_steps)
    }

    pub fn contains(&self, step: u64) -> bool {
        self.steps.binary_search(&step).is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uniform,
    IterativeLld,
    AdjustedLld,
    AggregatedLld,
    DistillKl,
    DistillKlCe,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Uniform,
        Method::IterativeLld,
        Method::AdjustedLld,
        Method::AggregatedLld,
        Method::DistillKl,
        Method::DistillKlCe,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Uniform => "uniform",
            Method::IterativeLld => "iterative_lld",
            Method::AdjustedLld => "adjusted_lld",
            Method::AggregatedLld => "aggregated_lld",
            Method::DistillKl => "distill_kl",
            Method::DistillKlCe => "distill_kl_ce",
        }
    }

    pub fn is_distill(&self) -> bool {
        matches!(self, Method::DistillKl | Method::DistillKlCe)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('-', "_");
        let alias = match norm.as_str() {
            "iterative" => "iterative_lld",
            "adjusted" => "adjusted_lld",
            "aggregated" => "aggregated_lld",
            other => other,
        };
        Method::ALL
            .iter()
            .find(|m| m.as_str() == alias)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Which weight rule an estimation step applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateRule {
    Raw,
    Adjusted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Everything about a training run except the weights and the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adamw: AdamWParams,
    pub batch_windows: usize,
    pub window_length: usize,
    pub checkpoint_every: u64,
    /// Token-normalize domain LL vectors.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Initial ridge for the adjusted rule (escalated automatically).
    #[serde(default)]
    pub ridge: f64,
}

fn default_true() -> bool {
    true
}

impl TrainSettings {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr_schedule().validate()?;
        if self.batch_windows == 0 || self.window_length == 0 {
            return config("batch_windows and window_length must be positive");
        }
        if self.checkpoint_every == 0 {
            return config("checkpoint_every must be positive");
        }
        Ok(())
    }

    /// Steps whose post-update state is recorded: every multiple of
    /// `checkpoint_every` plus the final step.
    pub fn is_checkpoint(&self, step: u64) -> bool {
        step.is_multiple_of(self.checkpoint_every) || step == self.total_steps
    }
}

/// How the training mixture is chosen.
#[derive(Clone, Debug)]
pub enum WeightPolicy<'a> {
    Fixed(DomainWeights),
    Estimate {
        rule: EstimateRule,
        tau: Temperature,
        target: &'a DomainLLVector,
        schedule: &'a EstimationSchedule,
    },
}

#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    LogLikelihood,
    Distill {
        teacher: &'a ModelCheckpoint,
        kind: LossKind,
    },
}

/// Mutable state of a run; everything needed to resume it bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelCheckpoint,
    pub weights: DomainWeights,
    pub weight_trajectory: WeightTrajectory,
    pub trajectory: Trajectory,
}

/// The parts of a [`TrainState`] that are not in the model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSidecar {
    pub weights: DomainWeights,
    pub weight_trajectory: WeightTrajectory,
    pub trajectory: Trajectory,
}

impl TrainState {
    /// Fresh state at the base model. The data stream is keyed by `seed`
    /// alone, so runs that differ only in their weights draw the same
    /// uniforms.
    pub fn start(base: &ModelCheckpoint, initial: DomainWeights, seed: u64, run_id: &str) -> Self {
        let mut model = base.clone();
        model.rng_state = RngSnapshot::capture(&derived(seed, "data", 0));
        Self {
            model,
            weights: initial,
            weight_trajectory: WeightTrajectory::default(),
            trajectory: Trajectory::new(run_id),
        }
    }

    pub fn sidecar(&self) -> StateSidecar {
        StateSidecar {
            weights: self.weights.clone(),
            weight_trajectory: self.weight_trajectory.clone(),
            trajectory: self.trajectory.clone(),
        }
    }

    pub fn from_parts(model: ModelCheckpoint, sidecar: StateSidecar) -> Self {
        Self {
            model,
            weights: sidecar.weights,
            weight_trajectory: sidecar.weight_trajectory,
            trajectory: sidecar.trajectory,
        }
    }
}

/// A training run's fixed inputs.
pub struct TrainJob<'a> {
    pub corpora: &'a [DomainCorpus],
    pub eval: &'a EvalCorpus,
    pub settings: &'a TrainSettings,
    pub policy: WeightPolicy<'a>,
    pub objective: Objective<'a>,
}

fn evaluate(model: &ModelCheckpoint, eval: &EvalCorpus, normalize: bool, id: &str) -> Result<(DomainLLVector, Vec<f64>)> {
    let scores = model.score_texts(&eval.token_slices())?;
    let ll = domain_ll_vector(&scores, eval, normalize, id)?;
    Ok((ll, scores.iter().map(|s| s.total_ll).collect()))
}

impl TrainJob<'_> {
    fn check(&self, state: &TrainState) -> Result<()> {
        self.settings.validate()?;
        if self.corpora.len() != self.eval.k() {
            return contract(format!(
                "{} training corpora for {} evaluation domains",
                self.corpora.len(),
                self.eval.k()
            ));
        }
        for (c, label) in self.corpora.iter().zip(&self.eval.labels) {
            if c.name() != label {
                return contract(format!("corpus {:?} does not match evaluation domain {label:?}", c.name()));
            }
        }
        if state.weights.labels() != self.eval.labels.as_slice() {
            return contract("weight labels do not match the evaluation domains");
        }
        if let WeightPolicy::Estimate { target, schedule, .. } = &self.policy {
            if target.eval_digest != self.eval.digest() {
                return contract("target LL vector was computed on a different evaluation corpus");
            }
            if target.normalized != self.settings.normalize {
                return contract("target LL vector normalization differs from the run's");
            }
            if schedule.total_steps != self.settings.total_steps {
                return contract(format!(
                    "estimation schedule covers {} steps, the run has {}",
                    schedule.total_steps, self.settings.total_steps
                ));
            }
        }
        if let Objective::Distill { teacher, .. } = &self.objective {
            if teacher.config.vocab != state.model.config.vocab {
                return Err(Error::Precondition(format!(
                    "distillation needs the target to share the base model's tokenizer (vocab {} vs {})",
                    teacher.config.vocab, state.model.config.vocab
                )));
            }
        }
        Ok(())
    }

    /// Trains from `state.model.step` to `total_steps`. `on_checkpoint` sees
    /// the state after every recorded checkpoint, with the RNG snapshot
    /// current, so a run can be persisted and resumed from there.
    pub fn run(&self, state: &mut TrainState, on_checkpoint: &mut dyn FnMut(&TrainState) -> Result<()>) -> Result<()> {
        self.check(state)?;
        let s = self.settings;
        let schedule = s.lr_schedule();
        let normalize = s.normalize;
        let mut rng: Rng = state.model.rng_state.restore();
        let mut cached: Option<(u64, DomainLLVector)> = None;

        let record = |state: &mut TrainState, rng: &Rng| -> Result<DomainLLVector> {
            let step = state.model.step;
            let id = state.trajectory.model_id(step);
            let (ll, row) = evaluate(&state.model, self.eval, normalize, &id)?;
            state.model.rng_state = RngSnapshot::capture(rng);
            state.trajectory.push(TrajectoryPoint {
                step,
                ll: ll.clone(),
                text_ll: Some(row),
            })?;
            Ok(ll)
        };

        if state.trajectory.checkpoints.is_empty() {
            let ll = record(state, &rng)?;
            cached = Some((state.model.step, ll));
            on_checkpoint(state)?;
        }

        while state.model.step < s.total_steps {
            let t = state.model.step;
            if let WeightPolicy::Estimate { rule, tau, target, schedule: est } = &self.policy {
                if est.contains(t) {
                    let current = match cached.take() {
                        Some((step, ll)) if step == t => ll,
                        _ => {
                            let id = state.trajectory.model_id(t);
                            evaluate(&state.model, self.eval, normalize, &id)?.0
                        }
                    };
                    let diff = lld(target, &current)?;
                    let weights = match rule {
                        EstimateRule::Raw => raw_lld_weights(&diff, *tau)?,
                        EstimateRule::Adjusted => {
                            let gram = gram_matrix(&state.model, self.eval, normalize)?.scaled_to_unit_diagonal();
                            adjusted_lld_weights(&diff, &gram, *tau, s.ridge)?.weights
                        }
                    };
                    state.weight_trajectory.push(t, weights.clone())?;
                    state.weights = weights;
                }
            }
            cached = None;

            let k = sample_domain(&state.weights, &mut rng);
            let batch = sample_batch(&self.corpora[k], k, s.window_length, s.batch_windows, &mut rng)?;
            let lr = schedule.lr_at(t)?;
            match self.objective {
                Objective::LogLikelihood => {
                    let (grad, _) = state.model.grad_log_prob(&batch)?;
                    match s.optimizer {
                        OptimizerKind::Sgd => state.model.sgd_step(&grad, lr)?,
                        OptimizerKind::Adamw => {
                            let loss_grad: Vec<f64> = grad.iter().map(|g| -g).collect();
                            state.model.adamw_step(&loss_grad, lr, &s.adamw)?
                        }
                    }
                }
                Objective::Distill { teacher, kind } => {
                    let (grad, _) = distill_grad(&state.model, teacher, &batch, kind)?;
                    match s.optimizer {
                        OptimizerKind::Sgd => {
                            let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
                            state.model.sgd_step(&ascent, lr)?
                        }
                        OptimizerKind::Adamw => state.model.adamw_step(&grad, lr, &s.adamw)?,
                    }
                }
            }

            if s.is_checkpoint(state.model.step) {
                let ll = record(state, &rng)?;
                cached = Some((state.model.step, ll));
                on_checkpoint(state)?;
            }
        }
        state.model.rng_state = RngSnapshot::capture(&rng);
        Ok(())
    }
}

fn no_hook(_: &TrainState) -> Result<()> {
    Ok(())
}

/// Output of the target-referencing first pass.
#[derive(Clone, Debug)]
pub struct FirstPass {
    pub weights: WeightTrajectory,
    pub pi_star: DomainWeights,
    pub state: TrainState,
}

/// Trains the base while re-estimating weights at every step of
/// `schedule` (carrying them forward in between), then aggregates the
/// estimates by their normalized geometric mean.
#[allow(clippy::too_many_arguments)]
pub fn first_pass(
    base: &ModelCheckpoint,
    target_ll: &DomainLLVector,
    corpora: &[DomainCorpus],
    eval: &EvalCorpus,
    schedule: &EstimationSchedule,
    tau: Temperature,
    rule: EstimateRule,
    settings: &TrainSettings,
    seed: u64,
    run_id: &str,
) -> Result<FirstPass> {
    let job = TrainJob {
        corpora,
        eval,
        settings,
        policy: WeightPolicy::Estimate {
            rule,
            tau,
            target: target_ll,
            schedule,
        },
        objective: Objective::LogLikelihood,
    };
    let mut state = TrainState::start(base, DomainWeights::uniform(eval.labels.clone()), seed, run_id);
    job.run(&mut state, &mut no_hook)?;
    let pi_star = aggregate_geometric(&state.weight_trajectory)?;
    Ok(FirstPass {
        weights: state.weight_trajectory.clone(),
        pi_star,
        state,
    })
}

/// Trains the base with fixed weights. The target is not an input.
pub fn second_pass(
    base: &ModelCheckpoint,
    pi_star: &DomainWeights,
    corpora: &[DomainCorpus],
    eval: &EvalCorpus,
    settings: &TrainSettings,
    seed: u64,
    run_id: &str,
) -> Result<TrainState> {
    let job = TrainJob {
        corpora,
        eval,
        settings,
        policy: WeightPolicy::Fixed(pi_star.clone()),
        objective: Objective::LogLikelihood,
    };
    let mut state = TrainState::start(base, pi_star.clone(), seed, run_id);
    job.run(&mut state, &mut no_hook)?;
    Ok(state)
}

/// `base_k · boost_k`, renormalized. Domains absent from `boost` keep factor 1.
pub fn boosted_mixture(base: &DomainWeights, boost: &BTreeMap<String, f64>) -> Result<DomainWeights> {
    for (label, f) in boost {
        if !base.labels().contains(label) {
            return contract(format!("boost names unknown domain {label:?}"));
        }
        if !(*f >= 0.0 && f.is_finite()) {
            return contract(format!("boost factor for {label:?} must be finite and non-negative"));
        }
    }
    let masses: Vec<f64> = base
        .labels()
        .iter()
        .zip(base.values())
        .map(|(l, v)| v * boost.get(l).copied().unwrap_or(1.0))
        .collect();
    DomainWeights::from_masses(base.labels().to_vec(), &masses)
}

/// Trains a fresh model on the boosted mixture and returns it with the
/// exact mixture it saw.
#[allow(clippy::too_many_arguments)]
pub fn make_skewed_target(
    model_config: &ModelConfig,
    init_seed: u64,
    base_mixture: &DomainWeights,
    boost: &BTreeMap<String, f64>,
    corpora: &[DomainCorpus],
    eval: &EvalCorpus,
    settings: &TrainSettings,
    data_seed: u64,
) -> Result<(ModelCheckpoint, DomainWeights)> {
    let truth = boosted_mixture(base_mixture, boost)?;
    let init = init_model(model_config, init_seed)?;
    let state = second_pass(&init, &truth, corpora, eval, settings, data_seed, "target")?;
    Ok((state.model, truth))
}

/// `(KL(π*, truth), KL(uniform, truth))`.
pub fn ground_truth_recovery(pi_star: &DomainWeights, truth: &DomainWeights) -> Result<(f64, f64)> {
    let uniform = DomainWeights::uniform(truth.labels().to_vec());
    Ok((kl_simplex(pi_star, truth)?, kl_simplex(&uniform, truth)?))
}

/// What the runs are aligned to.
#[derive(Clone, Debug)]
pub enum Target {
    /// A model sharing the base's vocabulary: exact LLs, distillation allowed.
    Model { id: String, model: ModelCheckpoint },
    /// Imported per-text LLs aligned with the evaluation corpus.
    Table { id: String, text_ll: Vec<f64> },
    /// Only domain-level means are known.
    DomainMeans(DomainLLVector),
}

impl Target {
    /// Pulls `model_id`'s row out of an imported table, matched to the
    /// evaluation corpus by text id.
    pub fn from_table(table: &TextLLMatrix, model_id: &str, eval: &EvalCorpus) -> Result<Self> {
        let row = table.row(table.model_index(model_id)?);
        let index: BTreeMap<&str, usize> = table.texts().iter().enumerate().map(|(j, t)| (t.id.as_str(), j)).collect();
        let text_ll = (0..eval.n())
            .map(|i| {
                let id = eval.text_id(i);
                let j = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::Contract(format!("LL table has no entry for evaluation text {id}")))?;
                let info = &table.texts()[*j];
                if info.token_count != eval.texts[i].tokens.len() {
                    return contract(format!("LL table token count for {id} disagrees with the corpus"));
                }
                Ok(row[*j])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Target::Table {
            id: model_id.to_string(),
            text_ll,
        })
    }

    pub fn id(&self) -> &str {
        match self {
            Target::Model { id, .. } | Target::Table { id, .. } => id,
            Target::DomainMeans(v) => &v.source_model,
        }
    }

    /// The target's per-text LLs on `eval`, when known.
    pub fn text_row(&self, eval: &EvalCorpus) -> Result<Option<Vec<f64>>> {
        match self {
            Target::Model { model, .. } => {
                let scores = model.score_texts(&eval.token_slices())?;
                Ok(Some(scores.iter().map(|s| s.total_ll).collect()))
            }
            Target::Table { text_ll, .. } => {
                if text_ll.len() != eval.n() {
                    return contract("target table row does not cover the evaluation corpus");
                }
                Ok(Some(text_ll.clone()))
            }
            Target::DomainMeans(_) => Ok(None),
        }
    }

    pub fn domain_ll(&self, eval: &EvalCorpus, normalize: bool) -> Result<DomainLLVector> {
        match self {
            Target::DomainMeans(v) => {
                if v.eval_digest != eval.digest() || v.normalized != normalize || v.labels != eval.labels {
                    return contract("target domain means do not match the evaluation corpus or normalization");
                }
                Ok(v.clone())
            }
            _ => {
                let row = self.text_row(eval)?.expect("row-level target");
                let scores: Vec<_> = row
                    .iter()
                    .zip(&eval.texts)
                    .map(|(&total_ll, t)| crate::tinylm::TextScore {
                        total_ll,
                        token_count: t.tokens.len(),
                    })
                    .collect();
                domain_ll_vector(&scores, eval, normalize, self.id())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMetric {
    /// Double-centering KL estimate to the target, bits per byte.
    KlBitsPerByte,
    /// L2 distance of domain LL vectors; used when only domain means of
    /// the target are known.
    DomainL2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub method: Method,
    pub tau: Temperature,
    pub schedule: EstimationSchedule,
    pub train: TrainSettings,
    pub seed: u64,
    #[serde(default)]
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub method: Method,
    pub tau: Temperature,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub eval_digest: String,
    pub target_id: String,
    pub metric: CurveMetric,
    pub final_kl: f64,
    pub kl_curve: Vec<(u64, f64)>,
    pub weight_trajectory: WeightTrajectory,
    pub pi_star: Option<DomainWeights>,
    pub trajectory: Trajectory,
    pub target_ll: DomainLLVector,
    pub target_text_ll: Option<Vec<f64>>,
    pub final_params_digest: String,
    /// Seconds of wall time. Kept out of the JSON report so reports stay
    /// byte-identical across reruns.
    #[serde(skip)]
    pub wallclock_seconds: f64,
}

pub fn params_digest(model: &ModelCheckpoint) -> String {
    let mut d = DigestBuilder::new();
    d.str(&model.config_hash).u64(model.step);
    for p in &model.params {
        d.f64(*p);
    }
    d.finish()
}

/// Distance of every checkpoint of `trajectory` to the target. With a
/// text-level target row the checkpoints and the target are centered
/// jointly and the KL estimate is reported in bits per byte.
pub fn kl_curve(
    trajectory: &Trajectory,
    target_ll: &DomainLLVector,
    target_row: Option<&[f64]>,
    eval: &EvalCorpus,
) -> Result<(CurveMetric, Vec<(u64, f64)>)> {
    match target_row {
        Some(row) => {
            let mut m = TextLLMatrix::for_eval(eval)?;
            m.push_row("__target__", row)?;
            trajectory.append_rows(&mut m)?;
            let q = double_center(&m)?;
            let curve = trajectory
                .checkpoints
                .iter()
                .enumerate()
                .map(|(i, c)| (c.step, kl_estimate_rows(&q, 0, i + 1, KlUnits::BitsPerByte)))
                .collect();
            Ok((CurveMetric::KlBitsPerByte, curve))
        }
        None => {
            let curve = trajectory
                .checkpoints
                .iter()
                .map(|c| {
                    let d: f64 = c
                        .ll
                        .values
                        .iter()
                        .zip(&target_ll.values)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (c.step, d.sqrt())
                })
                .collect();
            Ok((CurveMetric::DomainL2, curve))
        }
    }
}

/// Runs one method end to end. `first_pass_weights` lets the aggregated
/// method reuse an iterative run's trajectory instead of repeating it.
pub fn run_method(
    cfg: &RunConfig,
    base: &ModelCheckpoint,
    target: &Target,
    corpora: &[DomainCorpus],
    eval: &EvalCorpus,
    first_pass_weights: Option<&WeightTrajectory>,
) -> Result<RunReport> {
    run_method_with_hook(cfg, base, target, corpora, eval, first_pass_weights, None, &mut no_hook)
}

/// [`run_method`] with an optional resumed state and a checkpoint hook.
#[allow(clippy::too_many_arguments)]
pub fn run_method_with_hook(
    cfg: &RunConfig,
    base: &ModelCheckpoint,
    target: &Target,
    corpora: &[DomainCorpus],
    eval: &EvalCorpus,
    first_pass_weights: Option<&WeightTrajectory>,
    resume: Option<TrainState>,
    hook: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<RunReport> {
    let started = std::time::Instant::now();
    cfg.schedule.validate()?;
    let s = &cfg.train;
    let labels = eval.labels.clone();
    let uniform = DomainWeights::uniform(labels.clone());
    if cfg.method.is_distill() && !matches!(target, Target::Model { .. }) {
        return Err(Error::Precondition(format!(
            "{} needs the target model itself so that base and target share the same tokenizer; \
             an imported LL table is not enough",
            cfg.method
        )));
    }
    let target_ll = target.domain_ll(eval, s.normalize)?;
    let target_row = target.text_row(eval)?;

    let mut pi_star = None;
    let mut weights_from_pass = None;
    let (policy, objective, initial) = match cfg.method {
        Method::Uniform => (WeightPolicy::Fixed(uniform.clone()), Objective::LogLikelihood, uniform.clone()),
        Method::IterativeLld | Method::AdjustedLld => {
            let rule = if cfg.method == Method::IterativeLld { EstimateRule::Raw } else { EstimateRule::Adjusted };
            (
                WeightPolicy::Estimate {
                    rule,
                    tau: cfg.tau,
                    target: &target_ll,
                    schedule: &cfg.schedule,
                },
                Objective::LogLikelihood,
                uniform.clone(),
            )
        }
        Method::AggregatedLld => {
            let traj = match first_pass_weights {
                Some(t) => t.clone(),
                None => {
                    first_pass(
                        base,
                        &target_ll,
                        corpora,
                        eval,
                        &cfg.schedule,
                        cfg.tau,
                        EstimateRule::Raw,
                        s,
                        cfg.seed,
                        &format!("{}-first-pass", cfg.run_id),
                    )?
                    .weights
                }
            };
            let agg = aggregate_geometric(&traj)?;
            pi_star = Some(agg.clone());
            weights_from_pass = Some(traj);
            (WeightPolicy::Fixed(agg.clone()), Objective::LogLikelihood, agg)
        }
        Method::DistillKl | Method::DistillKlCe => {
            let Target::Model { model, .. } = target else { unreachable!() };
            let kind = if cfg.method == Method::DistillKl { LossKind::DistillKl } else { LossKind::DistillKlPlusCe };
            (
                WeightPolicy::Fixed(uniform.clone()),
                Objective::Distill { teacher: model, kind },
                uniform.clone(),
            )
        }
    };

    let job = TrainJob {
        corpora,
        eval,
        settings: s,
        policy,
        objective,
    };
    let mut state = resume.unwrap_or_else(|| TrainState::start(base, initial, cfg.seed, &cfg.run_id));
    job.run(&mut state, hook)?;

    let (metric, curve) = kl_curve(&state.trajectory, &target_ll, target_row.as_deref(), eval)?;
    let weight_trajectory = match weights_from_pass {
        Some(t) => t,
        None if matches!(cfg.method, Method::IterativeLld | Method::AdjustedLld) => state.weight_trajectory.clone(),
        None => {
            let mut t = WeightTrajectory::default();
            t.push(0, state.weights.clone())?;
            t
        }
    };
    Ok(RunReport {
        run_id: cfg.run_id.clone(),
        method: cfg.method,
        tau: cfg.tau,
        seed: cfg.seed,
        seeds: vec![cfg.seed],
        config_digest: cfg.config_digest.clone(),
        eval_digest: eval.digest().to_string(),
        target_id: target.id().to_string(),
        metric,
        final_kl: curve.last().map(|c| c.1).unwrap_or(f64::NAN),
        kl_curve: curve,
        weight_trajectory,
        pi_star,
        final_params_digest: params_digest(&state.model),
        trajectory: state.trajectory,
        target_ll,
        target_text_ll: target_row,
        wallclock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One row per report: `run_id,method,tau,seed,final_kl_bits_per_byte`.
pub fn write_summary_csv<W: Write>(reports: &[RunReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run_id", "method", "tau", "seed", "final_kl_bits_per_byte"])?;
    for r in reports {
        out.write_record([
            r.run_id.clone(),
            r.method.to_string(),
            r.tau.to_string(),
            r.seed.to_string(),
            format!("{}", r.final_kl),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_eval_corpus, generate_domain, DomainSpec};

    fn tiny_setup() -> (Vec<DomainCorpus>, EvalCorpus, ModelConfig, TrainSettings) {
        let corpora: Vec<DomainCorpus> = (0..3)
            .map(|k| {
                let spec = DomainSpec {
                    name: format!("d{k}"),
                    order: 1,
                    transition_seed: 100 + k as u64,
                    alphabet_size: 8,
                    skew: 0.5,
                };
                generate_domain(&spec, 4000, 16, 7 + k as u64).unwrap()
            })
            .collect();
        let eval = build_eval_corpus(&corpora, 4, 16, 3).unwrap();
        let cfg = ModelConfig {
            vocab: 8,
            layers: 1,
            heads: 2,
            embed_dim: 8,
            context_length: 16,
        };
        let settings = TrainSettings {
            total_steps: 12,
            warmup_steps: 2,
            lr_max: 1e-2,
            lr_min: 1e-3,
            optimizer: OptimizerKind::Adamw,
            adamw: AdamWParams::default(),
            batch_windows: 2,
            window_length: 16,
            checkpoint_every: 4,
            normalize: true,
            ridge: 0.0,
        };
        (corpora, eval, cfg, settings)
    }

    #[test]
    fn schedule_shapes() {
        let s = EstimationSchedule::dense_then_sparse(2000, 512, 200).unwrap();
        assert_eq!(
            s.steps,
            vec![0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 600, 800, 1000, 1200, 1400, 1600, 1800]
        );
        assert!(EstimationSchedule::new(vec![1, 2], 10).is_err());
        assert!(EstimationSchedule::new(vec![0, 10], 10).is_err());
        assert!(EstimationSchedule::new(vec![0, 3, 3], 10).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert_eq!("aggregated".parse::<Method>().unwrap(), Method::AggregatedLld);
        assert!("best".parse::<Method>().is_err());
    }

    #[test]
    fn boosted_mixture_example() {
        let base = DomainWeights::uniform(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        let boost = BTreeMap::from([("a".to_string(), 2.0)]);
        let t = boosted_mixture(&base, &boost).unwrap();
        let expect = [0.4, 0.2, 0.2, 0.2];
        for (v, e) in t.values().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
        assert_eq!(boosted_mixture(&base, &BTreeMap::new()).unwrap(), base);
        assert!(boosted_mixture(&base, &BTreeMap::from([("z".to_string(), 2.0)])).is_err());
    }

    #[test]
    fn recovery_of_truth_is_zero() {
        let t = DomainWeights::new(vec!["a".into(), "b".into()], vec![0.3, 0.7]).unwrap();
        let (est, unif) = ground_truth_recovery(&t, &t).unwrap();
        assert_eq!(est, 0.0);
        assert!(unif > 0.0);
    }

    #[test]
    fn self_target_gives_uniform_weights() {
        let (corpora, eval, cfg, settings) = tiny_setup();
        let base = init_model(&cfg, 1).unwrap();
        let scores = base.score_texts(&eval.token_slices()).unwrap();
        let own = domain_ll_vector(&scores, &eval, true, "base").unwrap();
        let schedule = EstimationSchedule::new(vec![0], settings.total_steps).unwrap();
        let fp = first_pass(
            &base,
            &own,
            &corpora,
            &eval,
            &schedule,
            Temperature::Finite(0.1),
            EstimateRule::Raw,
            &settings,
            5,
            "self",
        )
        .unwrap();
        assert_eq!(fp.weights.len(), 1);
        assert!(fp.weights.entries[0].1.is_uniform());
        assert!(fp.pi_star.is_uniform());
    }

    #[test]
    fn singleton_schedule_aggregates_to_its_estimate() {
        let (corpora, eval, cfg, settings) = tiny_setup();
        let base = init_model(&cfg, 1).unwrap();
        let target = Target::Model {
            id: "t".into(),
            model: init_model(&cfg, 2).unwrap(),
        };
        let tll = target.domain_ll(&eval, true).unwrap();
        let schedule = EstimationSchedule::new(vec![0], settings.total_steps).unwrap();
        let fp = first_pass(&base, &tll, &corpora, &eval, &schedule, Temperature::Finite(0.05), EstimateRule::Raw, &settings, 5, "x")
            .unwrap();
        for (a, b) in fp.pi_star.values().iter().zip(fp.weights.entries[0].1.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn second_pass_checkpoints_and_determinism() {
        let (corpora, eval, cfg, mut settings) = tiny_setup();
        let base = init_model(&cfg, 1).unwrap();
        let u = DomainWeights::uniform(eval.labels.clone());
        let a = second_pass(&base, &u, &corpora, &eval, &settings, 9, "a").unwrap();
        let b = second_pass(&base, &u, &corpora, &eval, &settings, 9, "a").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.steps(), vec![0, 4, 8, 12]);
        settings.checkpoint_every = settings.total_steps;
        let c = second_pass(&base, &u, &corpora, &eval, &settings, 9, "a").unwrap();
        assert_eq!(c.trajectory.steps(), vec![0, 12]);
        assert_eq!(c.model.params, a.model.params);
    }

    #[test]
    fn resume_is_bit_exact() {
        let (corpora, eval, cfg, settings) = tiny_setup();
        let base = init_model(&cfg, 1).unwrap();
        let target = init_model(&cfg, 2).unwrap();
        let scores = target.score_texts(&eval.token_slices()).unwrap();
        let tll = domain_ll_vector(&scores, &eval, true, "t").unwrap();
        let schedule = EstimationSchedule::new(vec![0, 2, 5, 9], settings.total_steps).unwrap();
        let job = TrainJob {
            corpora: &corpora,
            eval: &eval,
            settings: &settings,
            policy: WeightPolicy::Estimate {
                rule: EstimateRule::Adjusted,
                tau: Temperature::Finite(0.05),
                target: &tll,
                schedule: &schedule,
            },
            objective: Objective::LogLikelihood,
        };
        let start = TrainState::start(&base, DomainWeights::uniform(eval.labels.clone()), 4, "r");
        let mut full = start.clone();
        let mut saved = Vec::new();
        job.run(&mut full, &mut |s| {
            saved.push(s.clone());
            Ok(())
        })
        .unwrap();
        let mid = saved.iter().find(|s| s.model.step == 4).unwrap().clone();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        crate::tinylm::write_checkpoint(&path, &mid.model).unwrap();
        let sidecar: StateSidecar = serde_json::from_str(&serde_json::to_string(&mid.sidecar()).unwrap()).unwrap();
        let mut resumed = TrainState::from_parts(crate::tinylm::read_checkpoint(&path).unwrap(), sidecar);
        job.run(&mut resumed, &mut no_hook).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn distillation_needs_a_model_target() {
        let (corpora, eval, cfg, settings) = tiny_setup();
        let base = init_model(&cfg, 1).unwrap();
        let t = init_model(&cfg, 2).unwrap();
        let row: Vec<f64> = t.score_texts(&eval.token_slices()).unwrap().iter().map(|s| s.total_ll).collect();
        let target = Target::Table { id: "t".into(), text_ll: row };
        let rc = RunConfig {
            run_id: "d".into(),
            method: Method::DistillKl,
            tau: Temperature::Finite(1.0),
            schedule: EstimationSchedule::new(vec![0], settings.total_steps).unwrap(),
            train: settings,
            seed: 1,
            config_digest: String::new(),
        };
        let err = run_method(&rc, &base, &target, &corpora, &eval, None).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert!(err.to_string().contains("tokenizer"));
    }

    #[test]
    fn uniform_and_infinite_temperature_agree_bitwise() {
        let (corpora, eval, cfg, settings) = tiny_setup();
        let base = init_model(&cfg, 1).unwrap();
        let target = Target::Model {
            id: "t".into(),
            model: init_model(&cfg, 2).unwrap(),
        };
        let mk = |method, tau| RunConfig {
            run_id: "r".into(),
            method,
            tau,
            schedule: EstimationSchedule::new(vec![0, 3, 6], settings.total_steps).unwrap(),
            train: settings.clone(),
            seed: 3,
            config_digest: String::new(),
        };
        let u = run_method(&mk(Method::Uniform, Temperature::Finite(1.0)), &base, &target, &corpora, &eval, None).unwrap();
        let i = run_method(&mk(Method::AggregatedLld, Temperature::Infinite), &base, &target, &corpora, &eval, None).unwrap();
        assert!(i.pi_star.as_ref().unwrap().is_uniform());
        assert_eq!(u.final_params_digest, i.final_params_digest);
        assert_eq!(u.kl_curve, i.kl_curve);
        assert_eq!(u.kl_curve.len(), u.trajectory.checkpoints.len());
        assert_eq!(u.final_kl, u.kl_curve.last().unwrap().1);

        let mut buf = Vec::new();
        write_summary_csv(&[u], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("run_id,method,tau,seed,final_kl_bits_per_byte\n"));
    }
}
