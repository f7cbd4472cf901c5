//! Property and oracle suites behind the `verify` subcommand.
//!
//! Each check builds its own random instances from a seed and compares a
//! library routine against an independent computation (grid search, finite
//! perturbation, direct evaluation of the objective).

use rand::Rng as _;
use serde::Serialize;

use crate::corpus::{build_eval_corpus, generate_domain, DomainSpec, EvalCorpus};
use crate::error::Result;
use crate::llspace::{center_values, domain_ll_vector};
use crate::mixopt::{
    aggregate_geometric, brute_force_simplex_opt, domain_jacobian, gram_from_columns,
    kl_divergence, mirror_descent_step, predicted_ll_delta, solve_regularized, DomainWeights,
    Optimize, Temperature, TildeWeights, WeightTrajectory,
};
use crate::rng::{derived, Rng};
use crate::tinylm::{init_model, ModelCheckpoint, ModelConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("d{i}")).collect()
}

/// A strictly positive random point on the simplex.
pub fn random_simplex(rng: &mut Rng, k: usize) -> DomainWeights {
    let masses: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    DomainWeights::from_masses(labels(k), &masses).unwrap()
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max_π π̃ᵀπ − τ KL(π‖prior)`: closed form vs grid search on K = 3.
/// Returns the largest L∞ gap over `instances` draws.
pub fn closed_form_gap(instances: usize, grid_step: f64, seed: u64) -> Result<f64> {
    let mut rng = derived(seed, "closed-form", 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let prior = random_simplex(&mut rng, 3);
        let tilde: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tau = rng.random_range(0.2..2.0);
        let closed = solve_regularized(&TildeWeights(tilde.clone()), Temperature::finite(tau)?, &prior)?;
        let grid = brute_force_simplex_opt(3, grid_step, Optimize::Max, |p| {
            let lin: f64 = p.iter().zip(&tilde).map(|(a, b)| a * b).sum();
            lin - tau * kl_divergence(p, prior.values()).unwrap_or(f64::INFINITY)
        })?;
        worst = worst.max(linf(closed.values(), &grid));
    }
    Ok(worst)
}

/// Largest gap between the closed form and one mirror-descent step.
pub fn mirror_descent_gap(instances: usize, k: usize, seed: u64) -> Result<f64> {
    let mut rng = derived(seed, "mirror-descent", 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let prior = random_simplex(&mut rng, k);
        let tilde = TildeWeights((0..k).map(|_| rng.random_range(-3.0..3.0)).collect());
        let tau = Temperature::finite(rng.random_range(0.05..5.0))?;
        let a = solve_regularized(&tilde, tau, &prior)?;
        let b = mirror_descent_step(&prior, &tilde, tau)?;
        worst = worst.max(linf(a.values(), b.values()));
    }
    Ok(worst)
}

/// Geometric aggregate vs the grid minimizer of `Σ_t KL(π‖π^(t))`.
pub fn aggregation_gap(instances: usize, grid_step: f64, seed: u64) -> Result<f64> {
    let mut rng = derived(seed, "aggregation", 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let len = rng.random_range(2..8);
        let mut traj = WeightTrajectory::default();
        for t in 0..len {
            traj.push(t as u64 * 10, random_simplex(&mut rng, 3))?;
        }
        let geo = aggregate_geometric(&traj)?;
        let grid = brute_force_simplex_opt(3, grid_step, Optimize::Min, |p| {
            traj.entries
                .iter()
                .map(|(_, w)| kl_divergence(p, w.values()).unwrap_or(f64::INFINITY))
                .sum()
        })?;
        worst = worst.max(linf(geo.values(), &grid));
    }
    Ok(worst)
}

/// Double-centering identities on random matrices: worst row/column sum
/// relative to the matrix scale, and worst change of `Q` under per-row and
/// per-column offsets.
pub fn centering_gaps(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = derived(seed, "centering", 0);
    let mut sums = 0.0f64;
    let mut offsets = 0.0f64;
    for _ in 0..instances {
        let m = rng.random_range(2..7);
        let n = rng.random_range(2..30);
        let scale = 10f64.powf(rng.random_range(-1.0..3.0));
        let l: Vec<f64> = (0..m * n).map(|_| -scale * rng.random::<f64>()).collect();
        let q = center_values(m, n, &l);
        for i in 0..m {
            let s: f64 = q[i * n..(i + 1) * n].iter().sum();
            sums = sums.max(s.abs() / scale);
        }
        for j in 0..n {
            let s: f64 = (0..m).map(|i| q[i * n + j]).sum();
            sums = sums.max(s.abs() / scale);
        }
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(-50.0..50.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let shifted: Vec<f64> = l
            .iter()
            .enumerate()
            .map(|(idx, x)| x + a[idx / n] + b[idx % n])
            .collect();
        let q2 = center_values(m, n, &shifted);
        offsets = offsets.max(linf(&q, &q2) / scale);
    }
    (sums, offsets)
}

/// One point of the first-order check.
#[derive(Clone, Debug, Serialize)]
pub struct FirstOrderPoint {
    pub eta: f64,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub rel_err: f64,
}

/// A model of at most ~1.1k parameters and a 3-domain evaluation corpus
/// small enough for exact full-batch gradients.
pub fn small_setting(seed: u64) -> Result<(ModelCheckpoint, EvalCorpus)> {
    let cfg = ModelConfig {
        vocab: 8,
        layers: 1,
        heads: 2,
        embed_dim: 8,
        context_length: 8,
    };
    let corpora = (0..3)
        .map(|i| {
            let spec = DomainSpec {
                name: format!("d{i}"),
                order: 1,
                transition_seed: seed * 31 + i,
                alphabet_size: 8,
                skew: 0.3,
            };
            generate_domain(&spec, 4096, 16, seed + 100 + i)
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = build_eval_corpus(&corpora, 6, 16, seed)?;
    Ok((init_model(&cfg, seed)?, eval))
}

/// Takes one full-batch SGD ascent step `Δθ = η Σ_k π_k ∇ℓ_k` for each `η`
/// and compares the realised change of the domain LL vector against
/// `η · JᵀJ · π`.
pub fn first_order_check(
    model: &ModelCheckpoint,
    eval: &EvalCorpus,
    pi: &DomainWeights,
    etas: &[f64],
) -> Result<Vec<FirstOrderPoint>> {
    let cols = domain_jacobian(model, eval, true)?;
    let gram = gram_from_columns(&cols, model.step, true);
    let ll = |m: &ModelCheckpoint| -> Result<Vec<f64>> {
        let scores = m.score_texts(&eval.token_slices())?;
        Ok(domain_ll_vector(&scores, eval, true, "")?.values)
    };
    let before = ll(model)?;
    let direction: Vec<f64> = (0..model.param_count())
        .map(|p| cols.iter().zip(pi.values()).map(|(c, w)| w * c[p]).sum())
        .collect();
    etas.iter()
        .map(|&eta| {
            let mut stepped = model.clone();
            stepped.sgd_step(&direction, eta)?;
            let actual: Vec<f64> = ll(&stepped)?.iter().zip(&before).map(|(a, b)| a - b).collect();
            let predicted = predicted_ll_delta(&gram, pi, eta)?;
            let num: f64 = actual.iter().zip(&predicted).map(|(a, p)| (a - p) * (a - p)).sum();
            let den: f64 = predicted.iter().map(|p| p * p).sum();
            Ok(FirstOrderPoint {
                eta,
                rel_err: (num / den).sqrt(),
                actual,
                predicted,
            })
        })
        .collect()
}

/// Runs every suite. `quick` shrinks instance counts for smoke runs.
pub fn run_all(seed: u64, quick: bool) -> Result<Vec<CheckResult>> {
    let scale = if quick { 10 } else { 1 };
    let mut out = Vec::new();

    let n = 200 / scale;
    let gap = closed_form_gap(n, 0.001, seed)?;
    out.push(CheckResult::new(
        "closed_form_vs_grid",
        gap <= 0.002,
        format!("{n} K=3 instances, max L-inf gap {gap:.2e} (limit 2e-3)"),
    ));

    let n = 1000 / scale;
    let gap = mirror_descent_gap(n, 5, seed)?;
    out.push(CheckResult::new(
        "mirror_descent_equivalence",
        gap <= 1e-12,
        format!("{n} K=5 instances, max gap {gap:.2e} (limit 1e-12)"),
    ));

    let n = 100 / scale;
    let gap = aggregation_gap(n, 0.001, seed)?;
    out.push(CheckResult::new(
        "geometric_aggregation_vs_grid",
        gap <= 0.002,
        format!("{n} trajectory sets, max L-inf gap {gap:.2e} (limit 2e-3)"),
    ));

    let n = 100 / scale;
    let (sums, offsets) = centering_gaps(n, seed);
    out.push(CheckResult::new(
        "double_centering",
        sums < 1e-9 && offsets < 1e-9,
        format!("{n} matrices, row/col sums {sums:.2e}, offset change {offsets:.2e} (relative to scale)"),
    ));

    let (model, eval) = small_setting(seed)?;
    let mut rng = derived(seed, "first-order", 0);
    let pi = random_simplex(&mut rng, eval.k());
    let points = first_order_check(&model, &eval, &pi, &[1e-2, 1e-3, 1e-4])?;
    let ratios: Vec<f64> = points.windows(2).map(|w| w[0].rel_err / w[1].rel_err).collect();
    out.push(CheckResult::new(
        "first_order_dynamics",
        ratios.iter().all(|&r| r >= 5.0),
        format!(
            "P = {}, rel err {} , decade ratios {:?}",
            model.param_count(),
            points
                .iter()
                .map(|p| format!("{:.1e}@{:.0e}", p.rel_err, p.eta))
                .collect::<Vec<_>>()
                .join(" "),
            ratios.iter().map(|r| (r * 10.0).round() / 10.0).collect::<Vec<_>>()
        ),
    ));
    Ok(out)
}
