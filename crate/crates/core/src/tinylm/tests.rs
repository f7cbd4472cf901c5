use super::*;
use crate::rng::seeded;
use rand::Rng as _;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab: 8,
        layers: 1,
        heads: 2,
        embed_dim: 8,
        context_length: 8,
    }
}

/// A tiny model with jittered parameters, so biases and norm gains are not
/// all sitting at their symmetric init values.
fn jittered_model(cfg: &ModelConfig, seed: u64) -> ModelCheckpoint {
    let mut m = init_model(cfg, seed).unwrap();
    let mut rng = seeded(seed ^ 0x5eed);
    for p in &mut m.params {
        *p += 0.05 * (rng.random::<f64>() - 0.5);
    }
    m
}

fn random_tokens(rng: &mut crate::rng::Rng, n: usize, vocab: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..vocab) as u8).collect()
}

fn closed_form_params(v: usize, l: usize, d: usize, c: usize) -> usize {
    v * d + c * d + d + l * (12 * d * d + 13 * d) + 2 * d + d * v + v
}

#[test]
fn init_is_deterministic_and_seed_dependent() {
    let cfg = tiny();
    let a = init_model(&cfg, 3).unwrap();
    let b = init_model(&cfg, 3).unwrap();
    let c = init_model(&cfg, 4).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert_eq!(a.step, 0);
}

#[test]
fn parameter_count_matches_shapes() {
    let cfg = ModelConfig {
        vocab: 256,
        layers: 2,
        heads: 2,
        embed_dim: 32,
        context_length: 128,
    };
    let m = init_model(&cfg, 0).unwrap();
    assert_eq!(m.param_count(), closed_form_params(256, 2, 32, 128));
    assert_eq!(m.param_count(), 46_240);
    assert_eq!(tiny().param_count(), closed_form_params(8, 1, 8, 8));
}

#[test]
fn zeroed_head_scores_uniformly() {
    let cfg = ModelConfig {
        context_length: 16,
        ..ModelConfig::default()
    };
    let mut m = init_model(&cfg, 1).unwrap();
    let lay = m.layout();
    m.params[lay.head_w..lay.head_b + lay.vocab].fill(0.0);
    let text: Vec<u8> = (0..40u32).map(|i| (i * 37 % 256) as u8).collect();
    let s = m.log_prob(&text).unwrap();
    assert_eq!(s.token_count, 40);
    let expect = -40.0 * 256f64.ln();
    assert!((s.total_ll - expect).abs() < 1e-10 * expect.abs());
}

#[test]
fn two_token_example() {
    let cfg = ModelConfig {
        vocab: 2,
        layers: 1,
        heads: 1,
        embed_dim: 4,
        context_length: 4,
    };
    let mut m = init_model(&cfg, 2).unwrap();
    let lay = m.layout();
    m.params[lay.head_w..lay.head_b].fill(0.0);
    m.params[lay.head_b] = 2.0;
    m.params[lay.head_b + 1] = 0.0;
    let s = m.log_prob(&[0, 0, 0]).unwrap();
    let e2 = 2f64.exp();
    let expect = 3.0 * (e2 / (e2 + 1.0)).ln();
    assert!((s.total_ll - expect).abs() < 1e-14);
    assert!((s.total_ll - (-0.380_784)).abs() < 1e-6);
}

#[test]
fn out_of_vocab_token_is_rejected() {
    let m = init_model(&tiny(), 0).unwrap();
    assert!(matches!(m.log_prob(&[1, 9]), Err(Error::Contract(_))));
}

#[test]
fn windows_are_additive() {
    let m = jittered_model(&tiny(), 5);
    let mut rng = seeded(1);
    let text = random_tokens(&mut rng, 21, 8);
    let whole = m.log_prob(&text).unwrap();
    let parts: f64 = text.chunks(8).map(|w| m.log_prob(w).unwrap().total_ll).sum();
    assert!((whole.total_ll - parts).abs() < 1e-12);
    assert!(whole.total_ll < 0.0);
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(FD_FLOOR))
        .fold(0.0, f64::max)
}

/// Components below this magnitude are compared absolutely. Central
/// differences at h = 1e-4 carry O(h²) truncation error that swamps the
/// relative error of near-zero components.
const FD_FLOOR: f64 = 1e-3;

fn central_difference(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn fd_batch() -> TokenBatch {
    let mut rng = seeded(77);
    TokenBatch::new(1, (0..2).map(|_| random_tokens(&mut rng, 8, 8)).collect()).unwrap()
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    let m = jittered_model(&tiny(), 9);
    assert!(m.param_count() <= 2000);
    let batch = fd_batch();
    let (grad, mean) = m.grad_log_prob(&batch).unwrap();
    let mean_ll = |p: &[f64]| {
        let mut c = m.clone();
        c.params = p.to_vec();
        let total: f64 = batch.sequences.iter().map(|s| c.log_prob(s).unwrap().total_ll).sum();
        total / batch.total_tokens() as f64
    };
    assert!((mean - mean_ll(&m.params)).abs() < 1e-12);
    let numeric = central_difference(&m.params, 1e-4, mean_ll);
    let err = max_rel_err(&grad, &numeric);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn distill_gradients_match_finite_differences() {
    let student = jittered_model(&tiny(), 21);
    let teacher = jittered_model(&tiny(), 22);
    let batch = fd_batch();
    for kind in [LossKind::DistillKl, LossKind::DistillKlPlusCe] {
        let (grad, loss) = distill_grad(&student, &teacher, &batch, kind).unwrap();
        assert!(loss.kl > 0.0);
        let numeric = central_difference(&student.params, 1e-4, |p| {
            let mut s = student.clone();
            s.params = p.to_vec();
            distill_loss(&s, &teacher, &batch, kind).unwrap()
        });
        let err = max_rel_err(&grad, &numeric);
        assert!(err < 1e-4, "{kind:?}: max relative error {err}");
    }
}

#[test]
fn distillation_contracts() {
    let m = jittered_model(&tiny(), 4);
    let batch = fd_batch();
    let (grad, loss) = distill_grad(&m, &m, &batch, LossKind::DistillKl).unwrap();
    assert!(loss.kl.abs() < 1e-15);
    assert!(grad.iter().all(|g| g.abs() < 1e-15));

    let other = ModelConfig { vocab: 9, ..tiny() };
    let teacher = init_model(&other, 1).unwrap();
    assert!(matches!(
        distill_grad(&m, &teacher, &batch, LossKind::DistillKl),
        Err(Error::Contract(_))
    ));

    let mut rng = seeded(8);
    let teacher = jittered_model(&tiny(), 5);
    for _ in 0..5 {
        let b = TokenBatch::new(0, vec![random_tokens(&mut rng, 8, 8)]).unwrap();
        assert!(distill_loss(&m, &teacher, &b, LossKind::DistillKl).unwrap() >= 0.0);
    }
}

#[test]
fn duplicated_batch_gives_same_gradient() {
    let m = jittered_model(&tiny(), 13);
    let batch = fd_batch();
    let doubled: Vec<Vec<u8>> = batch
        .sequences
        .iter()
        .flat_map(|s| [s.clone(), s.clone()])
        .collect();
    let (g1, v1) = m.grad_log_prob(&batch).unwrap();
    let (g2, v2) = m.grad_log_prob(&TokenBatch::new(1, doubled).unwrap()).unwrap();
    assert!((v1 - v2).abs() < 1e-13);
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn zeroed_head_kills_upstream_gradient() {
    let mut m = jittered_model(&tiny(), 14);
    let lay = m.layout();
    m.params[lay.head_w..lay.head_b].fill(0.0);
    let (grad, _) = m.grad_log_prob(&fd_batch()).unwrap();
    assert!(grad[..lay.head_w].iter().all(|&g| g == 0.0));
    assert!(grad[lay.head_b..].iter().any(|&g| g != 0.0));
}

#[test]
fn sgd_step_is_exact_ascent() {
    let mut m = jittered_model(&tiny(), 3);
    let before = m.clone();
    let (grad, _) = m.grad_log_prob(&fd_batch()).unwrap();
    m.sgd_step(&grad, 0.0).unwrap();
    assert_eq!(m.params, before.params);
    assert_eq!(m.step, 1);
    let eta = 0.125;
    m.sgd_step(&grad, eta).unwrap();
    for ((a, b), g) in m.params.iter().zip(&before.params).zip(&grad) {
        assert_eq!(*a, b + eta * g);
    }
    assert!(m.sgd_step(&grad[1..], 0.1).is_err());
}

#[test]
fn adamw_first_step_and_decay_mask() {
    let hp = AdamWParams::default();
    assert_eq!((hp.beta1, hp.beta2, hp.eps, hp.weight_decay), (0.9, 0.95, 1e-8, 0.1));
    let mut m = jittered_model(&tiny(), 6);
    let before = m.params.clone();
    let lay = m.layout();
    let grad = vec![0.5; m.param_count()];
    let lr = 1e-2;
    m.adamw_step(&grad, lr, &hp).unwrap();
    // First bias-corrected step moves each parameter by lr * g/|g| (+ decay).
    let w = lay.wte;
    let expect = before[w] - lr * (0.5 / (0.5 + hp.eps) + hp.weight_decay * before[w]);
    assert!((m.params[w] - expect).abs() < 1e-15);
    let b = lay.head_b;
    let expect = before[b] - lr * (0.5 / (0.5 + hp.eps));
    assert!((m.params[b] - expect).abs() < 1e-15);
    assert!(matches!(m.opt_state, OptState::AdamW { t: 1, .. }));
}

#[test]
fn lr_schedule_boundaries() {
    let s = LrSchedule {
        warmup_steps: 100,
        total_steps: 1100,
        lr_max: 1e-3,
        lr_min: 1e-4,
    };
    assert_eq!(s.lr_at(100).unwrap(), 1e-3);
    assert!((s.lr_at(1100).unwrap() - 1e-4).abs() < 1e-18);
    assert!((s.lr_at(600).unwrap() - 5.5e-4).abs() < 1e-15);
    assert!(s.lr_at(0).unwrap() > 0.0);
    assert!(s.lr_at(1101).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mxk");
    let mut m = jittered_model(&tiny(), 31);
    let (grad, _) = m.grad_log_prob(&fd_batch()).unwrap();
    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
    m.adamw_step(&neg, 1e-3, &AdamWParams::default()).unwrap();
    write_checkpoint(&path, &m).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, m);

    let sgd = init_model(&tiny(), 1).unwrap();
    write_checkpoint(&path, &sgd).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), sgd);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_checkpoint(&path).is_err());
}
