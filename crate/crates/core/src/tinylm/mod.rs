//! A small decoder-only transformer over byte tokens with exact
//! log-likelihoods, analytic gradients, SGD/AdamW and distillation losses.
//!
//! All arithmetic is `f64`. Texts longer than the context are scored as
//! consecutive non-overlapping windows, each restarting from BOS.

mod config;
mod io;
mod net;
mod optim;

pub use config::{Layout, ModelConfig};
pub use io::{read_checkpoint, write_checkpoint};
pub use optim::{AdamWParams, LrSchedule, OptState};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenBatch;
use crate::error::{contract, Error, Result};
use crate::parallel::fold_chunks;
use crate::rng::{derived, RngSnapshot};

/// Parameters, optimizer state and data-stream position of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub step: u64,
    pub opt_state: OptState,
    pub rng_state: RngSnapshot,
    pub config_hash: String,
}

/// Log-likelihood of one text in nats, with the number of scored tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextScore {
    pub total_ll: f64,
    pub token_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    DistillKl,
    DistillKlPlusCe,
}

/// Mean per-token loss values of a distillation batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillLoss {
    pub kl: f64,
    pub ce: f64,
}

/// Builds a freshly initialized model. Matrices are N(0, 0.02), residual
/// output projections are scaled by 1/sqrt(2 * layers), biases are zero and
/// norm gains one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    config.validate()?;
    let lay = Layout::new(config);
    let mut params = vec![0.0; lay.total];
    let mut rng = derived(seed, "init", 0);
    let normal = Normal::new(0.0, 0.02).unwrap();
    let residual_scale = 1.0 / (2.0 * config.layers.max(1) as f64).sqrt();
    let d = lay.d;
    let mut fill = |params: &mut [f64], at: usize, n: usize, scale: f64| {
        for v in &mut params[at..at + n] {
            *v = normal.sample(&mut rng) * scale;
        }
    };
    fill(&mut params, lay.wte, lay.vocab * d, 1.0);
    fill(&mut params, lay.wpe, lay.context * d, 0.5);
    fill(&mut params, lay.bos, d, 1.0);
    for b in &lay.blocks {
        fill(&mut params, b.qkv_w, 3 * d * d, 1.0);
        fill(&mut params, b.proj_w, d * d, residual_scale);
        fill(&mut params, b.fc_w, 4 * d * d, 1.0);
        fill(&mut params, b.out_w, 4 * d * d, residual_scale);
        params[b.ln1_g..b.ln1_g + d].fill(1.0);
        params[b.ln2_g..b.ln2_g + d].fill(1.0);
    }
    params[lay.lnf_g..lay.lnf_g + d].fill(1.0);
    fill(&mut params, lay.head_w, d * lay.vocab, 1.0);
    Ok(ModelCheckpoint {
        config: config.clone(),
        params,
        step: 0,
        opt_state: OptState::Sgd,
        rng_state: RngSnapshot::capture(&derived(seed, "data", 0)),
        config_hash: config.hash(),
    })
}

impl ModelCheckpoint {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_tokens(&self, text: &[u8]) -> Result<()> {
        if let Some(&t) = text.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Contract(format!(
                "token {t} is outside the model vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn windows<'a>(&self, text: &'a [u8]) -> impl Iterator<Item = &'a [u8]> {
        text.chunks(self.config.context_length)
    }

    fn numerical(&self, domain: Option<usize>, what: &str) -> Error {
        Error::Numerical {
            step: self.step,
            domain,
            message: format!("non-finite {what}"),
        }
    }

    /// Sum of next-token log-probabilities of `text` in nats.
    pub fn log_prob(&self, text: &[u8]) -> Result<TextScore> {
        self.check_tokens(text)?;
        let lay = self.layout();
        let mut total = 0.0;
        let mut row = vec![0.0; lay.vocab];
        for w in self.windows(text) {
            let f = net::forward(&lay, self.config.heads, &self.params, w);
            for (t, &tok) in w.iter().enumerate() {
                net::log_softmax(&f.logits[t * lay.vocab..(t + 1) * lay.vocab], &mut row);
                total += row[tok as usize];
            }
        }
        if !total.is_finite() {
            return Err(self.numerical(None, "log-likelihood"));
        }
        Ok(TextScore {
            total_ll: total,
            token_count: text.len(),
        })
    }

    /// Scores many texts; the result is in input order.
    pub fn score_texts(&self, texts: &[&[u8]]) -> Result<Vec<TextScore>> {
        crate::parallel::map_ordered(texts, |t| self.log_prob(t))
            .into_iter()
            .collect()
    }

    /// Gradient of `sum_i weight_i * log p(text_i)` and that objective's value.
    pub fn grad_weighted_log_prob(&self, texts: &[(&[u8], f64)]) -> Result<(Vec<f64>, f64)> {
        self.grad_weighted_inner(texts, None)
    }

    fn grad_weighted_inner(
        &self,
        texts: &[(&[u8], f64)],
        domain: Option<usize>,
    ) -> Result<(Vec<f64>, f64)> {
        for (t, _) in texts {
            self.check_tokens(t)?;
        }
        let lay = self.layout();
        let heads = self.config.heads;
        let v = lay.vocab;
        let windows: Vec<(&[u8], f64)> = texts
            .iter()
            .flat_map(|&(t, w)| self.windows(t).map(move |win| (win, w)))
            .collect();
        let partial = fold_chunks(
            &windows,
            || (vec![0.0; lay.total], 0.0),
            |(grad, value), &(win, weight)| {
                let f = net::forward(&lay, heads, &self.params, win);
                let mut dlogits = vec![0.0; win.len() * v];
                let mut row = vec![0.0; v];
                for (t, &tok) in win.iter().enumerate() {
                    net::log_softmax(&f.logits[t * v..(t + 1) * v], &mut row);
                    *value += weight * row[tok as usize];
                    let d = &mut dlogits[t * v..(t + 1) * v];
                    for (di, &lp) in d.iter_mut().zip(&row) {
                        *di = -weight * lp.exp();
                    }
                    d[tok as usize] += weight;
                }
                net::backward(&lay, heads, &self.params, &f, &dlogits, grad);
            },
        );
        let (grad, value) = reduce(partial, lay.total);
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(self.numerical(domain, "gradient"));
        }
        Ok((grad, value))
    }

    /// Gradient of the per-token mean log-likelihood of a batch, and that mean.
    pub fn grad_log_prob(&self, batch: &TokenBatch) -> Result<(Vec<f64>, f64)> {
        let w = 1.0 / batch.total_tokens() as f64;
        let items: Vec<(&[u8], f64)> = batch.sequences.iter().map(|s| (s.as_slice(), w)).collect();
        self.grad_weighted_inner(&items, Some(batch.domain_index))
    }
}

fn reduce(partial: Vec<(Vec<f64>, f64)>, p: usize) -> (Vec<f64>, f64) {
    let mut grad = vec![0.0; p];
    let mut value = 0.0;
    for (g, v) in partial {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        value += v;
    }
    (grad, value)
}

/// Gradient (for descent) of the per-token mean distillation loss
/// `KL(teacher || student)`, optionally plus the data cross-entropy.
pub fn distill_grad(
    student: &ModelCheckpoint,
    teacher: &ModelCheckpoint,
    batch: &TokenBatch,
    loss: LossKind,
) -> Result<(Vec<f64>, DistillLoss)> {
    if student.config.vocab != teacher.config.vocab {
        return contract(format!(
            "distillation needs a shared vocabulary: student has {}, teacher has {}",
            student.config.vocab, teacher.config.vocab
        ));
    }
    if loss == LossKind::CrossEntropy {
        return contract("distill_grad called with the plain cross-entropy loss");
    }
    let with_ce = loss == LossKind::DistillKlPlusCe;
    for s in &batch.sequences {
        student.check_tokens(s)?;
    }
    let lay = student.layout();
    let t_lay = teacher.layout();
    let v = lay.vocab;
    let scale = 1.0 / batch.total_tokens() as f64;
    let windows: Vec<&[u8]> = batch
        .sequences
        .iter()
        .flat_map(|s| student.windows(s))
        .collect();
    let partial = fold_chunks(
        &windows,
        || (vec![0.0; lay.total], 0.0, 0.0),
        |(grad, kl, ce), win| {
            let sf = net::forward(&lay, student.config.heads, &student.params, win);
            let mut dlogits = vec![0.0; win.len() * v];
            let mut s_row = vec![0.0; v];
            let mut t_row = vec![0.0; v];
            // Teacher windows follow the teacher's own context length.
            let mut t_logits = Vec::with_capacity(win.len() * v);
            for tw in win.chunks(teacher.config.context_length) {
                let tf = net::forward(&t_lay, teacher.config.heads, &teacher.params, tw);
                t_logits.extend_from_slice(&tf.logits);
            }
            for (t, &tok) in win.iter().enumerate() {
                net::log_softmax(&sf.logits[t * v..(t + 1) * v], &mut s_row);
                net::log_softmax(&t_logits[t * v..(t + 1) * v], &mut t_row);
                let d = &mut dlogits[t * v..(t + 1) * v];
                let mut kl_t = 0.0;
                for i in 0..v {
                    let pt = t_row[i].exp();
                    let ps = s_row[i].exp();
                    if pt > 0.0 {
                        kl_t += pt * (t_row[i] - s_row[i]);
                    }
                    d[i] = scale * (ps - pt);
                }
                *kl += scale * kl_t;
                *ce -= scale * s_row[tok as usize];
                if with_ce {
                    for (di, &lp) in d.iter_mut().zip(&s_row) {
                        *di += scale * lp.exp();
                    }
                    d[tok as usize] -= scale;
                }
            }
            net::backward(&lay, student.config.heads, &student.params, &sf, &dlogits, grad);
        },
    );
    let mut grad = vec![0.0; lay.total];
    let (mut kl, mut ce) = (0.0, 0.0);
    for (g, k, c) in partial {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        kl += k;
        ce += c;
    }
    if !kl.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(student.numerical(Some(batch.domain_index), "distillation gradient"));
    }
    Ok((grad, DistillLoss { kl, ce }))
}

/// Value of the distillation loss alone, for finite-difference checks.
pub fn distill_loss(
    student: &ModelCheckpoint,
    teacher: &ModelCheckpoint,
    batch: &TokenBatch,
    loss: LossKind,
) -> Result<f64> {
    let (_, l) = distill_grad(student, teacher, batch, loss)?;
    Ok(match loss {
        LossKind::DistillKlPlusCe => l.kl + l.ce,
        _ => l.kl,
    })
}

#[cfg(test)]
mod tests;
