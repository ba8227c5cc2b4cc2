//! Dynamic evaluation: per-window gradient steps on the model weights.
//!
//! After each update the cached keys/values were produced by weights that no
//! longer exist, so by default the whole retained prefix is re-encoded under
//! the new weights before the next window.
//!
//! The variants that take one step on an entire prompt or several steps on
//! it are reachable by setting `window_size` to the prompt length and
//! `steps_per_window` above one.

use hso_tensor::{Float, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{get_bool, FlatConfig, KvConfig};
use crate::error::{contract, Error, Result};
use crate::hso::{scored_losses, window_targets, OptimizerKind, WindowReport};
use crate::model::{f_h, f_p, forward_plain, CacheStack, HiddenOptions, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub learning_rate: f64,
    pub window_size: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps_per_window: usize,
    pub recompute_cache: bool,
    pub reset_between_examples: bool,
}

impl Default for DeConfig {
    /// Few-shot settings: η = 1e-4, an update every 10 tokens.
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            window_size: 10,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps_per_window: 1,
            recompute_cache: true,
            reset_between_examples: true,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.steps_per_window == 0 {
            return Err(Error::Config("steps_per_window must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

impl FlatConfig for DeConfig {
    const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "window_size",
        "optimizer",
        "beta1",
        "beta2",
        "epsilon",
        "steps_per_window",
        "recompute_cache",
        "reset_between_examples",
    ];

    fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let d = Self::default();
        let cfg = Self {
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            window_size: kv.get_or("window_size", d.window_size)?,
            optimizer: kv.get_or("optimizer", d.optimizer)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            epsilon: kv.get_or("epsilon", d.epsilon)?,
            steps_per_window: kv.get_or("steps_per_window", d.steps_per_window)?,
            recompute_cache: get_bool(kv, "recompute_cache", d.recompute_cache)?,
            reset_between_examples: get_bool(kv, "reset_between_examples", d.reset_between_examples)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("window_size", self.window_size);
        kv.set("optimizer", self.optimizer);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("epsilon", self.epsilon);
        kv.set("steps_per_window", self.steps_per_window);
        kv.set("recompute_cache", self.recompute_cache);
        kv.set("reset_between_examples", self.reset_between_examples);
        kv
    }
}

/// Adam moments for every parameter tensor plus one global step count.
#[derive(Clone, Debug)]
pub struct ParameterOptimizerState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Float> ParameterOptimizerState<F> {
    pub fn new(params: &Parameters<F>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn element_count(&self) -> usize {
        self.m.iter().chain(&self.v).map(Tensor::len).sum()
    }
}

/// A bit-exact copy of the weights.
#[derive(Clone, Debug)]
pub struct ParamSnapshot<F> {
    params: Parameters<F>,
}

impl<F: Float> ParamSnapshot<F> {
    pub fn element_count(&self) -> usize {
        self.params.count()
    }

    pub fn size_bytes(&self) -> usize {
        self.params.count() * F::WIDTH
    }
}

pub fn snapshot_params<F: Float>(params: &Parameters<F>) -> ParamSnapshot<F> {
    ParamSnapshot {
        params: params.clone(),
    }
}

pub fn restore_params<F: Float>(snapshot: &ParamSnapshot<F>) -> Parameters<F> {
    snapshot.params.clone()
}

/// Auxiliary scalars a DE stream holds: snapshot, m and v.
pub fn de_aux_elements<F: Float>(params: &Parameters<F>) -> usize {
    3 * params.count()
}

/// One dynamic-evaluation stream: private weights, their optimizer state,
/// the cache, and the tokens the cache encodes.
#[derive(Clone, Debug)]
pub struct DeStream<F> {
    pub params: Parameters<F>,
    pub opt: ParameterOptimizerState<F>,
    pub cache: CacheStack<F>,
    pub prefix: Vec<usize>,
}

impl<F: Float> DeStream<F> {
    pub fn new(params: Parameters<F>, max_context: usize) -> Result<Self> {
        let layers = CacheStack::new(params.config()).layers().to_vec();
        let cache = CacheStack::from_layers(layers, max_context)?;
        Ok(Self {
            opt: ParameterOptimizerState::new(&params),
            params,
            cache,
            prefix: Vec::new(),
        })
    }

    /// Empties the cache; weights and optimizer state carry over.
    pub fn reset_cache(&mut self) {
        self.cache.reset();
        self.prefix.clear();
    }

    pub fn evict_front(&mut self, count: usize) -> Result<()> {
        self.cache.evict_front(count)?;
        self.prefix.drain(..count);
        Ok(())
    }
}

/// Adam (or SGD) step on every parameter tensor. Zero steps are skipped so
/// a zero learning rate leaves the weights bit-identical.
fn parameter_update<F: Float>(
    params: &mut Parameters<F>,
    grads: &[Tensor<F>],
    opt: &mut ParameterOptimizerState<F>,
    config: &DeConfig,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let lr = F::c(config.learning_rate);
    let (b1, b2, eps) = (F::c(config.beta1), F::c(config.beta2), F::c(config.epsilon));
    let bc1 = F::one() - b1.powi(t);
    let bc2 = F::one() - b2.powi(t);
    for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
        let p = p.data_mut();
        let g = g.data();
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for j in 0..p.len() {
            let step = match config.optimizer {
                OptimizerKind::Sgd => lr * g[j],
                OptimizerKind::Adam => {
                    m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                    v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                    lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps)
                }
            };
            if step != F::zero() {
                p[j] -= step;
            }
        }
    }
}

/// Losses and weight gradients of a window over `cache`.
fn weight_gradients<F: Float>(
    params: &Parameters<F>,
    cache: &CacheStack<F>,
    tokens: &[usize],
    targets: &[usize],
) -> Result<(Vec<F>, Vec<Tensor<F>>)> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let pass = f_h(&mut tape, &pv, params.config(), tokens, cache, HiddenOptions::default())?;
    let logits = f_p(&mut tape, &pv, pass.top)?;
    let per_token = scored_losses(&mut tape, logits, targets)?;
    let losses = tape.value(per_token).data().to_vec();
    let total = tape.sum(per_token);
    let grads = tape.backward(total, pv.all())?;
    Ok((losses, grads))
}

fn rebuild_cache<F: Float>(
    params: &Parameters<F>,
    tokens: &[usize],
    like: &CacheStack<F>,
) -> Result<CacheStack<F>> {
    let layers = CacheStack::new(params.config()).layers().to_vec();
    let mut cache = CacheStack::from_layers(layers, like.max_context())?;
    if !tokens.is_empty() {
        let (_, states) = forward_plain(params, tokens, &cache)?;
        cache.append(&states)?;
    }
    cache.set_base_offset(like.base_offset());
    Ok(cache)
}

/// One DE window. Losses are reported from the weights before the update.
/// On a non-finite loss, gradient or weight the stream is left unchanged
/// and [`Error::NonFinite`] is returned.
pub fn de_window_step<F: Float>(
    stream: &mut DeStream<F>,
    tokens: &[usize],
    next_token: Option<usize>,
    config: &DeConfig,
) -> Result<WindowReport> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(contract("empty window"));
    }
    if stream.prefix.len() != stream.cache.len() {
        return Err(contract("stream prefix and cache disagree"));
    }
    let targets = window_targets(tokens, next_token);
    if targets.is_empty() {
        let (_, states) = forward_plain(&stream.params, tokens, &stream.cache)?;
        stream.cache.append(&states)?;
        stream.prefix.extend_from_slice(tokens);
        return Ok(WindowReport {
            token_losses: Vec::new(),
            tokens_scored: 0,
            reported_before_update: true,
            backward_passes: 0,
        });
    }

    let mut params = stream.params.clone();
    let mut opt = stream.opt.clone();
    let mut cache = stream.cache.clone();
    let mut report = None;
    for _ in 0..config.steps_per_window {
        let (losses, grads) = weight_gradients(&params, &cache, tokens, &targets)?;
        if !losses.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFinite("loss"));
        }
        if !grads.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite("gradient"));
        }
        report.get_or_insert_with(|| WindowReport {
            token_losses: losses.iter().map(|l| l.as_f64()).collect(),
            tokens_scored: targets.len(),
            reported_before_update: true,
            backward_passes: config.steps_per_window,
        });
        let before = params.clone();
        parameter_update(&mut params, &grads, &mut opt, config);
        if !params.all_finite() {
            return Err(Error::NonFinite("parameter"));
        }
        if config.recompute_cache && !params.bit_eq(&before) {
            cache = rebuild_cache(&params, &stream.prefix, &cache)?;
        }
    }

    let (_, states) = forward_plain(&params, tokens, &cache)?;
    cache.append(&states)?;
    stream.params = params;
    stream.opt = opt;
    stream.cache = cache;
    stream.prefix.extend_from_slice(tokens);
    Ok(report.expect("at least one step"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_context: 32,
        }
    }

    #[test]
    fn defaults_and_round_trip() {
        let c = DeConfig::default();
        assert_eq!((c.learning_rate, c.window_size), (1e-4, 10));
        assert!(c.recompute_cache && c.reset_between_examples);
        let s = DeConfig {
            optimizer: OptimizerKind::Sgd,
            recompute_cache: false,
            ..c
        };
        assert_eq!(DeConfig::from_kv(&s.to_kv()).unwrap(), s);
        assert!(DeConfig::parse("window_size = 0").is_err());
        assert!(DeConfig::parse("learning_rate = -0.1").is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let p = Parameters::<f32>::init(cfg(), 1).unwrap();
        let snap = snapshot_params(&p);
        assert_eq!(snap.size_bytes(), p.count() * 4);
        let mut stream = DeStream::new(p.clone(), 32).unwrap();
        let c = DeConfig {
            learning_rate: 0.01,
            ..DeConfig::default()
        };
        de_window_step(&mut stream, &[1, 2, 3, 4], Some(5), &c).unwrap();
        assert!(!stream.params.bit_eq(&p));
        let r1 = restore_params(&snap);
        let r2 = restore_params(&snap);
        assert!(r1.bit_eq(&p) && r2.bit_eq(&p));
    }

    #[test]
    fn zero_rate_matches_plain_append() {
        let p = Parameters::<f64>::init(cfg(), 2).unwrap();
        let mut stream = DeStream::new(p.clone(), 32).unwrap();
        let c = DeConfig {
            learning_rate: 0.0,
            ..DeConfig::default()
        };
        let mut plain = CacheStack::new(&cfg());
        for (w, next) in [(&[1usize, 2, 3][..], Some(4)), (&[4, 5, 6], None)] {
            let r = de_window_step(&mut stream, w, next, &c).unwrap();
            let b = crate::hso::plain_window_step(&p, &mut plain, w, next).unwrap();
            assert_eq!(r.token_losses, b.token_losses);
        }
        assert!(stream.cache.bit_eq(&plain));
        assert!(stream.params.bit_eq(&p));
        assert_eq!(stream.prefix, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn recompute_rebuilds_prefix_states() {
        let p = Parameters::<f64>::init(cfg(), 3).unwrap();
        let c = DeConfig {
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            ..DeConfig::default()
        };
        let mut stream = DeStream::new(p.clone(), 32).unwrap();
        de_window_step(&mut stream, &[1, 2, 3], Some(4), &c).unwrap();
        de_window_step(&mut stream, &[4, 5, 6], Some(7), &c).unwrap();
        let fresh = rebuild_cache(&stream.params, &[1, 2, 3], &stream.cache).unwrap();
        assert!(stream.cache.layers()[0].slice_rows(0..3).bit_eq(&fresh.layers()[0]));
        let stale = rebuild_cache(&p, &[1, 2, 3], &stream.cache).unwrap();
        assert!(!stale.layers()[0].bit_eq(&fresh.layers()[0]));
        assert_eq!(stream.cache.len(), 6);
    }
}
