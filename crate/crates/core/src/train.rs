//! Pretraining loop: AdamW with linear warmup and cosine decay.
//!
//! Deliberately independent of the per-position optimizer in [`crate::hso`].

use hso_tensor::{Float, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{FlatConfig, KvConfig};
use crate::error::{contract, Error, Result};
use crate::model::{forward_batch, ModelConfig, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Held-out loss cadence in steps; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seq_len: 64,
            steps: 500,
            learning_rate: 3e-3,
            warmup_steps: 50,
            min_lr_ratio: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be at least 1".into()));
        }
        if self.seq_len > model.max_context {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_context {}",
                self.seq_len, model.max_context
            )));
        }
        if !(0.0..).contains(&self.learning_rate) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..).contains(&self.weight_decay) || !(0.0..).contains(&self.grad_clip) {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

impl FlatConfig for TrainConfig {
    const KEYS: &'static [&'static str] = &[
        "batch_size",
        "seq_len",
        "steps",
        "learning_rate",
        "warmup_steps",
        "min_lr_ratio",
        "weight_decay",
        "grad_clip",
        "beta1",
        "beta2",
        "seed",
        "eval_every",
    ];

    fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let d = Self::default();
        Ok(Self {
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            seq_len: kv.get_or("seq_len", d.seq_len)?,
            steps: kv.get_or("steps", d.steps)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            warmup_steps: kv.get_or("warmup_steps", d.warmup_steps)?,
            min_lr_ratio: kv.get_or("min_lr_ratio", d.min_lr_ratio)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            grad_clip: kv.get_or("grad_clip", d.grad_clip)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            seed: kv.get_or("seed", d.seed)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
        })
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("batch_size", self.batch_size);
        kv.set("seq_len", self.seq_len);
        kv.set("steps", self.steps);
        kv.set("learning_rate", self.learning_rate);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("min_lr_ratio", self.min_lr_ratio);
        kv.set("weight_decay", self.weight_decay);
        kv.set("grad_clip", self.grad_clip);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    /// Final weights, or the last finite ones when training diverged.
    pub params: Parameters<F>,
    pub log: Vec<StepLog>,
    pub diverged_at: Option<usize>,
}

fn batch_loss<F: Float>(
    params: &Parameters<F>,
    corpus: &[usize],
    offsets: &[usize],
    seq_len: usize,
    with_grad: bool,
) -> Result<(F, Vec<Tensor<F>>)> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, with_grad);
    let seqs: Vec<&[usize]> = offsets.iter().map(|&o| &corpus[o..o + seq_len]).collect();
    let targets: Vec<usize> = offsets
        .iter()
        .flat_map(|&o| corpus[o + 1..o + seq_len + 1].iter().copied())
        .collect();
    let logits = forward_batch(&mut tape, &pv, params.config(), &seqs)?;
    let per_token = tape.cross_entropy(logits, &targets)?;
    let loss = tape.mean(per_token);
    let value = tape.value(loss).item();
    let grads = if with_grad {
        tape.backward(loss, pv.all())?
    } else {
        Vec::new()
    };
    Ok((value, grads))
}

/// Trains fresh weights on `corpus`. The last 5% of the corpus is held out
/// when `eval_every` is set.
pub fn train<F: Float>(
    corpus: &[usize],
    model: ModelConfig,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome<F>> {
    config.validate(&model)?;
    if config.seq_len < model.max_context {
        log::warn!(
            "seq_len {} is below max_context {}; later positions stay at their initial embeddings",
            config.seq_len,
            model.max_context
        );
    }
    let span = config.seq_len + 1;
    if corpus.len() < 10 * config.seq_len {
        return Err(contract(format!(
            "corpus of {} tokens; training needs at least {}",
            corpus.len(),
            10 * config.seq_len
        )));
    }
    if let Some(&t) = corpus.iter().find(|&&t| t >= model.vocab_size) {
        return Err(contract(format!("token {t} outside vocabulary of {}", model.vocab_size)));
    }
    let (train_part, held_out) = if config.eval_every > 0 {
        let cut = corpus.len() - (corpus.len() / 20).max(span);
        (&corpus[..cut], &corpus[cut..])
    } else {
        (corpus, &corpus[..0])
    };
    if train_part.len() < span {
        return Err(contract("training split shorter than one sequence"));
    }
    let eval_offsets: Vec<usize> = (0..held_out.len().saturating_sub(span) + 1)
        .step_by(span)
        .take(16)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Parameters::<F>::init(model, config.seed)?;
    let mut m: Vec<Tensor<F>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut v = m.clone();
    let mut log = Vec::with_capacity(config.steps);
    let (b1, b2) = (F::c(config.beta1), F::c(config.beta2));
    let eps = F::c(1e-8);

    for step in 0..config.steps {
        let offsets: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..=train_part.len() - span))
            .collect();
        let (loss, mut grads) = batch_loss(&params, train_part, &offsets, config.seq_len, true)?;
        if !loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
            log::warn!("training diverged at step {step}");
            return Ok(TrainOutcome {
                params,
                log,
                diverged_at: Some(step),
            });
        }
        if config.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|&x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > config.grad_clip {
                let s = F::c(config.grad_clip / norm);
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }

        let lr = config.lr_at(step);
        let t = (step + 1) as i32;
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        let (lr_f, wd) = (F::c(lr), F::c(lr * config.weight_decay));
        let mut next = params.clone();
        for (i, p) in next.tensors_mut().iter_mut().enumerate() {
            let decay = p.shape().len() == 2;
            let g = grads[i].data();
            let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                mi[j] = b1 * mi[j] + (F::one() - b1) * g[j];
                vi[j] = b2 * vi[j] + (F::one() - b2) * g[j] * g[j];
                if decay {
                    *x -= wd * *x;
                }
                *x -= lr_f * (mi[j] / bc1) / ((vi[j] / bc2).sqrt() + eps);
            }
        }
        if !next.all_finite() {
            log::warn!("training diverged at step {step}");
            return Ok(TrainOutcome {
                params,
                log,
                diverged_at: Some(step),
            });
        }
        params = next;

        let eval_loss = if config.eval_every > 0 && (step + 1) % config.eval_every == 0 {
            Some(batch_loss(&params, held_out, &eval_offsets, config.seq_len, false)?.0.as_f64())
        } else {
            None
        };
        let entry = StepLog {
            step,
            lr,
            loss: loss.as_f64(),
            eval_loss,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        log,
        diverged_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 8,
            max_context: 16,
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig {
            steps: 100,
            warmup_steps: 10,
            learning_rate: 1.0,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((c.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(99) - 0.1).abs() < 1e-3);
        assert!(c.lr_at(50) < c.lr_at(20));
    }

    #[test]
    fn config_checks() {
        let m = model();
        assert!(TrainConfig { seq_len: 17, ..TrainConfig::default() }.validate(&m).is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate(&m).is_err());
        let c = TrainConfig { seq_len: 8, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn short_corpus_is_rejected() {
        let c = TrainConfig { seq_len: 8, ..TrainConfig::default() };
        let r = train::<f32>(&[1; 79], model(), &c, |_| {});
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn huge_rate_reports_divergence() {
        let c = TrainConfig {
            seq_len: 8,
            steps: 50,
            warmup_steps: 0,
            learning_rate: 1e30,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let corpus: Vec<usize> = (0..200).map(|i| (i * 3) % 8).collect();
        let out = train::<f32>(&corpus, model(), &c, |_| {}).unwrap();
        assert!(out.diverged_at.is_some());
        assert!(out.params.all_finite());
    }
}
