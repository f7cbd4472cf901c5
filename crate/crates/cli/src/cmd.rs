use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mixalign::corpus::{write_corpus_file, CorpusManifest, CorpusManifestEntry, EvalCorpus, EvalManifest};
use mixalign::digest::sha256_hex;
use mixalign::llspace::{domain_ll_vector, double_center, pca_project, DomainLLVector, TextLLMatrix};
use mixalign::mixopt::{gram_matrix, lld, DomainWeights, WeightTrajectory};
use mixalign::plot;
use mixalign::recipes::{
    first_pass, make_skewed_target, params_digest, run_method_with_hook, write_summary_csv, EstimateRule, Method,
    RunConfig, RunReport, StateSidecar, TrainState,
};
use mixalign::tinylm::{init_model, write_checkpoint, ModelCheckpoint};

use crate::artifacts::*;
use crate::config::{ExperimentConfig, TauSpec};
use crate::fail::{CliError, CliResult};
use crate::PlotKind;

fn pick_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn base_model(cfg: &ExperimentConfig, path: Option<&Path>, seed: u64) -> CliResult<ModelCheckpoint> {
    let base = match path {
        Some(p) => load_checkpoint(p)?,
        None => init_model(&cfg.model, seed)?,
    };
    if base.config != cfg.model {
        return Err(CliError::Config("base checkpoint does not match the config's `model` section".into()));
    }
    Ok(base)
}

fn default_target(cfg: &ExperimentConfig, seed: u64, path: Option<PathBuf>) -> CliResult<PathBuf> {
    let p = path.unwrap_or_else(|| target_dir(cfg, seed).join("target.mxk"));
    if !p.exists() {
        return Err(CliError::Config(format!(
            "target {} not found; run `train-target` or pass --target",
            p.display()
        )));
    }
    Ok(p)
}

fn domain_ll(model: &ModelCheckpoint, eval: &EvalCorpus, normalize: bool, id: &str) -> CliResult<DomainLLVector> {
    let scores = model.score_texts(&eval.token_slices())?;
    Ok(domain_ll_vector(&scores, eval, normalize, id)?)
}

/// LLD spread of the base against the target: the unit of `"<x>s"` temperatures.
fn lld_spread(base: &ModelCheckpoint, target_ll: &DomainLLVector, eval: &EvalCorpus) -> CliResult<f64> {
    let base_ll = domain_ll(base, eval, target_ll.normalized, "base")?;
    Ok(lld(target_ll, &base_ll)?.spread())
}

pub fn gen_corpus(config: &Path, force: bool) -> CliResult<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = corpus_dir(&cfg);
    let manifest_path = dir.join("manifest.json");
    guard(&manifest_path, force)?;
    let (corpora, eval) = generate(&cfg)?;
    fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    for (c, d) in corpora.iter().zip(&cfg.corpus.domains) {
        let file = format!("{}.mxc", d.name);
        write_corpus_file(&dir.join(&file), c)?;
        entries.push(CorpusManifestEntry {
            name: d.name.clone(),
            spec: d.spec(),
            seed: d.seed,
            byte_count: c.byte_count(),
            train_bytes: c.train_len,
            file,
        });
    }
    let manifest = CorpusManifest {
        config_digest: cfg.digest(),
        domains: entries,
    };
    write_json(&dir.join("eval.json"), &EvalManifest::from_corpus(&eval))?;
    write_json(&manifest_path, &manifest)?;
    let digest = sha256_hex(&fs::read(&manifest_path)?);
    println!(
        "wrote {} domains and {} evaluation texts to {}",
        corpora.len(),
        eval.n(),
        dir.display()
    );
    println!("manifest digest {digest}");
    Ok(())
}

pub fn train_target(config: &Path, seed: Option<u64>, force: bool) -> CliResult<()> {
    let cfg = ExperimentConfig::load(config)?;
    let (corpora, eval) = load_corpus(&cfg)?;
    let seeds = match seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    for s in seeds {
        let dir = target_dir(&cfg, s);
        let ckpt = dir.join("target.mxk");
        guard(&ckpt, force)?;
        let init_seed = cfg.target.init_seed_offset + s;
        let data_seed = cfg.target.data_seed_offset + s;
        let (model, truth) = make_skewed_target(
            &cfg.model,
            init_seed,
            &DomainWeights::uniform(eval.labels.clone()),
            &cfg.target.boost,
            &corpora,
            &eval,
            &cfg.target_settings(),
            data_seed,
        )?;
        fs::create_dir_all(&dir)?;
        write_checkpoint(&ckpt, &model)?;
        let record = TargetRecord {
            config_digest: cfg.digest(),
            seeds: cfg.seeds.clone(),
            seed: s,
            init_seed,
            data_seed,
            target_ll: domain_ll(&model, &eval, cfg.train.normalize, "target")?,
            truth,
            params_digest: params_digest(&model),
        };
        write_json(&dir.join("truth.json"), &record)?;
        println!("seed {s}: target {} (truth {:?})", ckpt.display(), record.truth.values());
    }
    Ok(())
}

pub struct EstimateArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub base: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub target_id: Option<String>,
    pub method: String,
    pub tau: Option<TauSpec>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

pub fn estimate(a: EstimateArgs) -> CliResult<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let seed = pick_seed(&cfg, a.seed);
    let method: Method = a.method.parse()?;
    let rule = match method {
        Method::Uniform => None,
        Method::AggregatedLld | Method::IterativeLld => Some(EstimateRule::Raw),
        Method::AdjustedLld => Some(EstimateRule::Adjusted),
        _ => return Err(CliError::Config(format!("{method} does not estimate weights"))),
    };
    let tau_spec = a.tau.unwrap_or_else(|| cfg.tau_for(Method::AggregatedLld));
    let out = a.out.unwrap_or_else(|| {
        cfg.output_dir
            .join("estimates")
            .join(format!("{method}-tau{tau_spec}-seed{seed}"))
    });
    let weights_path = out.join("weights.json");
    guard(&weights_path, a.force)?;

    let (corpora, eval) = load_corpus(&cfg)?;
    let base = base_model(&cfg, a.base.as_deref(), seed)?;
    let target_path = default_target(&cfg, seed, a.target)?;
    let target = load_target(&target_path, a.target_id.as_deref(), &eval)?;
    let target_ll = target.domain_ll(&eval, cfg.train.normalize)?;
    let tau = tau_spec.resolve(lld_spread(&base, &target_ll, &eval)?)?;

    let (pi_star, trajectory, recorded) = match rule {
        None => {
            let u = DomainWeights::uniform(eval.labels.clone());
            let mut t = WeightTrajectory::default();
            t.push(0, u.clone())?;
            (u, t, Method::Uniform)
        }
        Some(rule) => {
            let schedule = cfg.schedule(cfg.train.total_steps)?;
            let fp = first_pass(&base, &target_ll, &corpora, &eval, &schedule, tau, rule, &cfg.train, seed, "first-pass")?;
            (fp.pi_star, fp.weights, Method::AggregatedLld)
        }
    };
    let record = WeightsRecord {
        config_digest: cfg.digest(),
        seeds: cfg.seeds.clone(),
        seed,
        method: recorded,
        rule,
        tau,
        tau_spec: tau_spec.to_string(),
        target_id: target.id().to_string(),
        eval_digest: eval.digest().to_string(),
        pi_star: pi_star.clone(),
        trajectory: trajectory.clone(),
    };
    write_json(&out.join("trajectory.json"), &trajectory)?;
    let mut bars = vec![
        ("estimated".to_string(), pi_star.clone()),
        ("uniform".to_string(), DomainWeights::uniform(eval.labels.clone())),
    ];
    let truth_path = target_path.with_file_name("truth.json");
    if truth_path.exists() {
        let truth: TargetRecord = read_json(&truth_path, "target record")?;
        if truth.truth.labels() == pi_star.labels() {
            bars.push(("ground truth".to_string(), truth.truth));
        }
    }
    write_svg(&out.join("weights.svg"), &plot::weight_bars(&bars)?, &[cfg.digest()], &cfg.seeds)?;
    write_json(&weights_path, &record)?;
    println!("pi* = {:?} (tau {tau})", pi_star.values());
    println!("argmax {}", pi_star.labels()[pi_star.argmax()]);
    println!("wrote {}", weights_path.display());
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub weights: Option<PathBuf>,
    pub steps: Option<u64>,
    pub tau: Option<TauSpec>,
    pub base: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub target_id: Option<String>,
    pub run_id: Option<String>,
    pub resume: bool,
    pub force: bool,
    pub stop_after: Option<u64>,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let seed = pick_seed(&cfg, a.seed);
    let mut settings = cfg.train.clone();
    if let Some(n) = a.steps {
        settings.total_steps = n;
        settings.warmup_steps = settings.warmup_steps.min(n);
    }
    settings.validate()?;
    let schedule = cfg.schedule(settings.total_steps)?;

    let weights: Option<WeightsRecord> = match &a.weights {
        Some(p) => Some(read_json(p, "weights file")?),
        None => None,
    };
    let method = match (&weights, &a.method) {
        (Some(w), _) => w.method,
        (None, Some(m)) => m.parse()?,
        (None, None) => return Err(CliError::Config("pass --method or --weights".into())),
    };

    let (corpora, eval) = load_corpus(&cfg)?;
    let base = base_model(&cfg, a.base.as_deref(), seed)?;
    let target_path = default_target(&cfg, seed, a.target)?;
    let target = load_target(&target_path, a.target_id.as_deref(), &eval)?;
    if method.is_distill() && !matches!(target, mixalign::recipes::Target::Model { .. }) {
        // Raised before any other work so the exit code is the documented one.
        return Err(CliError::Precondition(format!(
            "{method} needs the target model itself so that base and target share the same tokenizer; \
             {} is an LL table",
            target_path.display()
        )));
    }

    let (tau, tau_label) = match &weights {
        Some(w) => {
            if w.eval_digest != eval.digest() {
                return Err(CliError::Config("weights were estimated on a different evaluation corpus".into()));
            }
            (w.tau, w.tau_spec.clone())
        }
        None => {
            let spec = a.tau.unwrap_or_else(|| cfg.tau_for(method));
            let target_ll = target.domain_ll(&eval, settings.normalize)?;
            (spec.resolve(lld_spread(&base, &target_ll, &eval)?)?, spec.to_string())
        }
    };
    let run_id = a.run_id.unwrap_or_else(|| format!("{method}-tau{tau_label}-seed{seed}"));
    let dir = cfg.output_dir.join("runs").join(&run_id);
    let report_path = dir.join("report.json");
    let ckpt_path = dir.join("checkpoint.mxk");
    let state_path = dir.join("state.json");
    let record_path = dir.join("run.json");
    guard(&report_path, a.force)?;
    if !a.resume {
        guard(&ckpt_path, a.force)?;
    }

    let run = RunConfig {
        run_id: run_id.clone(),
        method,
        tau,
        schedule: schedule.clone(),
        train: settings.clone(),
        seed,
        config_digest: cfg.digest(),
    };
    let mut record = RunRecord {
        run: run.clone(),
        target_id: target.id().to_string(),
        eval_digest: eval.digest().to_string(),
        base_digest: params_digest(&base),
        first_pass: weights.as_ref().map(|w| w.trajectory.clone()),
    };

    let resume = if a.resume {
        let saved: RunRecord = read_json(&record_path, "run record")?;
        let comparable = RunRecord {
            first_pass: saved.first_pass.clone(),
            ..record.clone()
        };
        if saved != comparable || (record.first_pass.is_some() && record.first_pass != saved.first_pass) {
            return Err(CliError::Config(format!(
                "{} was started with different settings; rerun without --resume (and with --force)",
                run_id
            )));
        }
        record = saved;
        let model = load_checkpoint(&ckpt_path)?;
        let sidecar: StateSidecar = read_json(&state_path, "training state")?;
        println!("resuming {run_id} from step {}", model.step);
        Some(TrainState::from_parts(model, sidecar))
    } else {
        if method == Method::AggregatedLld && record.first_pass.is_none() {
            let target_ll = target.domain_ll(&eval, settings.normalize)?;
            let fp = first_pass(
                &base,
                &target_ll,
                &corpora,
                &eval,
                &schedule,
                tau,
                EstimateRule::Raw,
                &settings,
                seed,
                &format!("{run_id}-first-pass"),
            )?;
            record.first_pass = Some(fp.weights);
        }
        write_json(&record_path, &record)?;
        None
    };

    let stop_after = a.stop_after;
    let mut hook = |state: &TrainState| -> mixalign::Result<()> {
        let tmp = ckpt_path.with_extension("tmp");
        write_checkpoint(&tmp, &state.model)?;
        fs::rename(&tmp, &ckpt_path)?;
        write_json(&state_path, &state.sidecar()).map_err(|e| std::io::Error::other(e.to_string()))?;
        if stop_after == Some(state.model.step) {
            return Err(std::io::Error::other(format!("stopped after step {}", state.model.step)).into());
        }
        Ok(())
    };
    let mut report = run_method_with_hook(
        &run,
        &base,
        &target,
        &corpora,
        &eval,
        record.first_pass.as_ref(),
        resume,
        &mut hook,
    )?;
    report.seeds = cfg.seeds.clone();
    if let (Some(w), Some(p)) = (&weights, &report.pi_star) {
        if w.pi_star != *p {
            return Err(CliError::Other("aggregated weights differ from the weights file".into()));
        }
    }
    write_json(&report_path, &report)?;
    write_json(
        &dir.join("timing.json"),
        &Timing {
            run_id: run_id.clone(),
            wallclock_seconds: report.wallclock_seconds,
        },
    )?;
    println!("{run_id}: final KL {:.6} ({:?})", report.final_kl, report.metric);
    println!("wrote {}", report_path.display());
    Ok(())
}

fn load_reports(paths: &[PathBuf]) -> CliResult<Vec<RunReport>> {
    paths.iter().map(|p| read_json(p, "run report")).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pairs `(a, b, strict)` meaning "a should not exceed b" (strictly below
/// when `strict`).
const EXPECTED: [(Method, Method, bool); 6] = [
    (Method::AdjustedLld, Method::IterativeLld, false),
    (Method::IterativeLld, Method::Uniform, false),
    (Method::AggregatedLld, Method::Uniform, true),
    (Method::DistillKlCe, Method::DistillKl, false),
    (Method::DistillKl, Method::AggregatedLld, true),
    (Method::DistillKl, Method::Uniform, true),
];

/// The verdict lines for a set of reports.
pub fn verdict(reports: &[RunReport]) -> Vec<String> {
    let first = &reports[0];
    if reports.iter().all(|r| r.kl_curve == first.kl_curve) {
        return vec!["verdict: tie".into(), "expected ordering: n/a".into()];
    }
    let mut by_method: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    for r in reports {
        by_method.entry(r.method).or_default().push(r.final_kl);
    }
    let mut med: Vec<(Method, f64)> = by_method.into_iter().map(|(m, v)| (m, median(v))).collect();
    med.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut line = String::from("verdict:");
    for (i, (m, v)) in med.iter().enumerate() {
        if i > 0 {
            line.push_str(if *v == med[i - 1].1 { " =" } else { " <" });
        }
        line.push_str(&format!(" {m} ({v:.6})"));
    }
    let get = |m: Method| med.iter().find(|x| x.0 == m).map(|x| x.1);
    let mut checked = 0;
    let mut broken = Vec::new();
    for (a, b, strict) in EXPECTED {
        if let (Some(x), Some(y)) = (get(a), get(b)) {
            checked += 1;
            let ok = if strict { x < y } else { x <= y };
            if !ok {
                broken.push(format!("{a} ({x:.6}) vs {b} ({y:.6})"));
            }
        }
    }
    let status = match (checked, broken.is_empty()) {
        (0, _) => "expected ordering: n/a".to_string(),
        (_, true) => format!("expected ordering: PASS ({checked} relations)"),
        (_, false) => format!("expected ordering: FAIL ({})", broken.join("; ")),
    };
    vec![line, status]
}

fn digests_and_seeds(reports: &[RunReport]) -> (Vec<String>, Vec<u64>) {
    let mut digests: Vec<String> = reports.iter().map(|r| r.config_digest.clone()).collect();
    digests.sort();
    digests.dedup();
    let mut seeds: Vec<u64> = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    (digests, seeds)
}

pub fn compare(paths: &[PathBuf], out: &Path, force: bool) -> CliResult<()> {
    let reports = load_reports(paths)?;
    let first = &reports[0];
    for (r, p) in reports.iter().zip(paths) {
        if r.eval_digest != first.eval_digest {
            return Err(CliError::Config(format!(
                "{} was evaluated on a different corpus ({} vs {})",
                p.display(),
                r.eval_digest,
                first.eval_digest
            )));
        }
        if r.target_id != first.target_id || r.metric != first.metric {
            return Err(CliError::Config(format!("{} measures a different target or metric", p.display())));
        }
    }
    let csv_path = out.join("summary.csv");
    guard(&csv_path, force)?;
    fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    write_summary_csv(&reports, &mut csv)?;
    write_bytes(&csv_path, &csv)?;
    let (digests, seeds) = digests_and_seeds(&reports);
    let series: Vec<(String, Vec<(u64, f64)>)> = reports.iter().map(|r| (r.run_id.clone(), r.kl_curve.clone())).collect();
    let ylabel = match first.metric {
        mixalign::recipes::CurveMetric::KlBitsPerByte => "KL to target (bits/byte)",
        mixalign::recipes::CurveMetric::DomainL2 => "domain LL distance to target",
    };
    write_svg(&out.join("kl_curves.svg"), &plot::kl_curves(&series, ylabel)?, &digests, &seeds)?;
    let lines = verdict(&reports);
    write_bytes(&out.join("verdict.txt"), format!("{}\n", lines.join("\n")).as_bytes())?;
    for l in &lines {
        println!("{l}");
    }
    Ok(())
}

fn mismatch(kind: PlotKind, p: &Path, want: &str) -> CliError {
    CliError::Config(format!("{kind:?} expects {want}; {} is not one", p.display()))
}

/// A weight trajectory from a weights file, a trajectory file or a report.
fn trajectory_input(kind: PlotKind, p: &Path) -> CliResult<(WeightTrajectory, Vec<String>, Vec<u64>)> {
    if let Ok(w) = read_json::<WeightsRecord>(p, "weights file") {
        return Ok((w.trajectory, vec![w.config_digest], w.seeds));
    }
    if let Ok(r) = read_json::<RunReport>(p, "run report") {
        return Ok((r.weight_trajectory, vec![r.config_digest], r.seeds));
    }
    if let Ok(t) = read_json::<WeightTrajectory>(p, "weight trajectory") {
        return Ok((t, Vec::new(), Vec::new()));
    }
    Err(mismatch(kind, p, "a weights file, trajectory or run report"))
}

pub fn plot(
    kind: PlotKind,
    inputs: &[PathBuf],
    output: &Path,
    config: Option<&Path>,
    ridge: f64,
    force: bool,
) -> CliResult<()> {
    guard(output, force)?;
    let cfg = config.map(ExperimentConfig::load).transpose()?;
    let need_cfg = || {
        cfg.as_ref()
            .ok_or_else(|| CliError::Config(format!("{kind:?} needs --config to load the evaluation corpus")))
    };
    let (svg, digests, seeds) = match kind {
        PlotKind::KlCurve => {
            let reports = inputs
                .iter()
                .map(|p| read_json::<RunReport>(p, "run report").map_err(|_| mismatch(kind, p, "run reports")))
                .collect::<CliResult<Vec<_>>>()?;
            let series: Vec<_> = reports.iter().map(|r| (r.run_id.clone(), r.kl_curve.clone())).collect();
            let (d, s) = digests_and_seeds(&reports);
            (plot::kl_curves(&series, "distance to target")?, d, s)
        }
        PlotKind::WeightBars => {
            let mut named: Vec<(String, DomainWeights)> = Vec::new();
            let mut digests = Vec::new();
            let mut seeds = Vec::new();
            for p in inputs {
                let stem = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                if let Ok(w) = read_json::<WeightsRecord>(p, "weights file") {
                    named.push((stem, w.pi_star));
                    digests.push(w.config_digest);
                    seeds.extend(w.seeds);
                } else if let Ok(r) = read_json::<RunReport>(p, "run report") {
                    let w = match &r.pi_star {
                        Some(w) => w.clone(),
                        None => r.weight_trajectory.entries.last().map(|e| e.1.clone()).ok_or_else(|| mismatch(kind, p, "a report with weights"))?,
                    };
                    named.push((r.run_id.clone(), w));
                    digests.push(r.config_digest);
                    seeds.extend(r.seeds);
                } else if let Ok(t) = read_json::<TargetRecord>(p, "target record") {
                    named.push(("ground truth".into(), t.truth));
                    digests.push(t.config_digest);
                    seeds.extend(t.seeds);
                } else {
                    return Err(mismatch(kind, p, "weights files, run reports or target records"));
                }
            }
            digests.sort();
            digests.dedup();
            seeds.sort_unstable();
            seeds.dedup();
            (plot::weight_bars(&named)?, digests, seeds)
        }
        PlotKind::JsdHeatmap => {
            let [p] = inputs else {
                return Err(CliError::Config("jsd_heatmap takes exactly one input".into()));
            };
            let (traj, d, s) = trajectory_input(kind, p)?;
            (plot::jsd_heatmap(&traj)?, d, s)
        }
        PlotKind::GramHeatmap => {
            let cfg = need_cfg()?;
            let [p] = inputs else {
                return Err(CliError::Config("gram_heatmap takes exactly one checkpoint".into()));
            };
            let model = load_checkpoint(p).map_err(|_| mismatch(kind, p, "a model checkpoint"))?;
            let (_, eval) = load_corpus(cfg)?;
            let gram = gram_matrix(&model, &eval, cfg.train.normalize)?;
            (plot::gram_heatmap(&gram, &eval.labels, ridge)?, vec![cfg.digest()], cfg.seeds.clone())
        }
        PlotKind::ModelMap => {
            let cfg = need_cfg()?;
            let (_, eval) = load_corpus(cfg)?;
            let reports = inputs
                .iter()
                .map(|p| read_json::<RunReport>(p, "run report").map_err(|_| mismatch(kind, p, "run reports")))
                .collect::<CliResult<Vec<_>>>()?;
            let mut m = TextLLMatrix::for_eval(&eval)?;
            if let Some(row) = &reports[0].target_text_ll {
                m.push_row("target", row)?;
            }
            for r in &reports {
                if r.eval_digest != eval.digest() {
                    return Err(CliError::Config(format!("{} used a different evaluation corpus", r.run_id)));
                }
                r.trajectory.append_rows(&mut m)?;
            }
            let proj = pca_project(&double_center(&m)?)?;
            write_bytes(&output.with_extension("csv"), plot::model_map_csv(&proj).as_bytes())?;
            let (d, s) = digests_and_seeds(&reports);
            let svg = plot::model_map(&proj, |id| id.split('@').next().unwrap_or(id).to_string())?;
            (svg, d, s)
        }
    };
    write_svg(output, &svg, &digests, &seeds)?;
    println!("wrote {}", output.display());
    Ok(())
}

pub fn verify(seed: u64, quick: bool) -> CliResult<()> {
    let results = mixalign::verify::run_all(seed, quick)?;
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(CliError::Other(format!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}
