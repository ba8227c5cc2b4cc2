//! Hidden-state optimization.
//!
//! Each window of `k` tokens is run forward over the cached keys/values,
//! its per-token losses are recorded from that pass, and only then are the
//! cached and new states moved along the gradient of the summed window loss.
//! The updated new states join the cache, so later windows attend to states
//! that have been tuned toward predicting text they have already seen.
//!
//! Adam moments are kept per cached position and per layer, with one step
//! counter per window block: states created in different windows have seen
//! different numbers of updates and need their own bias correction. The
//! moment buffers share the cache layout and are evicted with it.

use std::collections::VecDeque;

use hso_tensor::{Float, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::config::{get_bool, FlatConfig, KvConfig};
use crate::error::{contract, Error, Result};
use crate::model::{
    f_h, f_p, window_loss, CacheStack, HiddenOptions, LayerCache, Parameters,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

/// Which states a window update may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateScope {
    CachedAndPresent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsoConfig {
    pub window_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub steps_per_window: usize,
    /// Only the newest window's states are updated.
    pub present_only: bool,
    pub update_scope: UpdateScope,
}

impl Default for HsoConfig {
    /// Language-model evaluation settings: k = 25, η = 0.003, β = (0.65, 0.9).
    fn default() -> Self {
        Self {
            window_size: 25,
            learning_rate: 0.003,
            optimizer: OptimizerKind::Adam,
            beta1: 0.65,
            beta2: 0.9,
            adam_epsilon: 1e-8,
            steps_per_window: 1,
            present_only: false,
            update_scope: UpdateScope::CachedAndPresent,
        }
    }
}

impl HsoConfig {
    /// Few-shot classification settings: k = 10, η = 0.01.
    pub fn few_shot() -> Self {
        Self {
            window_size: 10,
            learning_rate: 0.01,
            ..Self::default()
        }
    }

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
        if self.adam_epsilon.is_nan() || self.adam_epsilon < 0.0 {
            return Err(Error::Config("adam_epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

impl FlatConfig for HsoConfig {
    const KEYS: &'static [&'static str] = &[
        "window_size",
        "learning_rate",
        "optimizer",
        "beta1",
        "beta2",
        "adam_epsilon",
        "steps_per_window",
        "present_only",
        "update_scope",
    ];

    fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let d = Self::default();
        if let Some(scope) = kv.raw("update_scope") {
            if scope != "cached_and_present" {
                return Err(Error::Config(format!("unknown update_scope {scope:?}")));
            }
        }
        let cfg = Self {
            window_size: kv.get_or("window_size", d.window_size)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            optimizer: kv.get_or("optimizer", d.optimizer)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            adam_epsilon: kv.get_or("adam_epsilon", d.adam_epsilon)?,
            steps_per_window: kv.get_or("steps_per_window", d.steps_per_window)?,
            present_only: get_bool(kv, "present_only", d.present_only)?,
            update_scope: UpdateScope::CachedAndPresent,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("window_size", self.window_size);
        kv.set("learning_rate", self.learning_rate);
        kv.set("optimizer", self.optimizer);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_epsilon", self.adam_epsilon);
        kv.set("steps_per_window", self.steps_per_window);
        kv.set("present_only", self.present_only);
        kv.set("update_scope", "cached_and_present");
        kv
    }
}

/// Positions created by one window, sharing one update counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MomentBlock {
    pub len: usize,
    pub steps: u64,
}

/// Per-position Adam moments laid out like the cache they track.
#[derive(Clone, Debug)]
pub struct MomentStore<F> {
    first: Vec<LayerCache<F>>,
    second: Vec<LayerCache<F>>,
    blocks: VecDeque<MomentBlock>,
}

impl<F: Float> MomentStore<F> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            first: (0..n_layers).map(|_| LayerCache::empty(d_model)).collect(),
            second: (0..n_layers).map(|_| LayerCache::empty(d_model)).collect(),
            blocks: VecDeque::new(),
        }
    }

    pub fn for_cache(cache: &CacheStack<F>) -> Self {
        let d = cache.layers().first().map_or(0, |l| l.keys.cols());
        let mut store = Self::new(cache.layers().len(), d);
        if !cache.is_empty() {
            store.push_block(cache.len());
        }
        store
    }

    pub fn positions(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    pub fn blocks(&self) -> impl ExactSizeIterator<Item = &MomentBlock> {
        self.blocks.iter()
    }

    pub fn first_moments(&self) -> &[LayerCache<F>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[LayerCache<F>] {
        &self.second
    }

    /// Scalars held by both moment buffers.
    pub fn element_count(&self) -> usize {
        self.first
            .iter()
            .chain(&self.second)
            .map(|l| l.keys.len() + l.values.len())
            .sum()
    }

    /// Registers zeroed moments for `len` new positions with no updates yet.
    pub fn push_block(&mut self, len: usize) {
        if len == 0 {
            return;
        }
        for layer in self.first.iter_mut().chain(self.second.iter_mut()) {
            let d = layer.keys.cols();
            *layer = LayerCache {
                keys: hso_tensor::Tensor::vstack(&[&layer.keys, &hso_tensor::Tensor::zeros(vec![len, d])])
                    .expect("matching width"),
                values: hso_tensor::Tensor::vstack(&[&layer.values, &hso_tensor::Tensor::zeros(vec![len, d])])
                    .expect("matching width"),
            };
        }
        self.blocks.push_back(MomentBlock { len, steps: 0 });
    }

    /// Drops the oldest `count` positions; blocks split by the cut keep
    /// their counters.
    pub fn evict_front(&mut self, count: usize) -> Result<()> {
        let total = self.positions();
        if count > total {
            return Err(contract(format!("cannot evict {count} of {total} moment positions")));
        }
        if count == 0 {
            return Ok(());
        }
        for layer in self.first.iter_mut().chain(self.second.iter_mut()) {
            *layer = layer.slice_rows(count..total);
        }
        let mut left = count;
        while left > 0 {
            let front = self.blocks.front_mut().expect("positions remain");
            if front.len <= left {
                left -= front.len;
                self.blocks.pop_front();
            } else {
                front.len -= left;
                left = 0;
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        let total = self.positions();
        self.evict_front(total).expect("evicting everything is in range");
    }

    /// Step counter of every position, oldest first.
    pub fn position_steps(&self) -> Vec<u64> {
        self.blocks
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.steps, b.len))
            .collect()
    }
}

/// Losses of one window, computed before any of its updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    /// Natural-log loss of each scored position, in window order.
    pub token_losses: Vec<f64>,
    pub tokens_scored: usize,
    pub reported_before_update: bool,
    pub backward_passes: usize,
}

impl WindowReport {
    pub fn loss_sum(&self) -> f64 {
        self.token_losses.iter().sum()
    }
}

/// Gradients of a window loss: `cached` covers every pre-window position,
/// `present` the window's own positions. Concatenated along positions they
/// mirror the cache after the window is appended.
#[derive(Clone, Debug)]
pub struct GradientBlock<F> {
    pub cached: Vec<LayerCache<F>>,
    pub present: Vec<LayerCache<F>>,
}

impl<F: Float> GradientBlock<F> {
    pub fn cached_len(&self) -> usize {
        self.cached.first().map_or(0, LayerCache::len)
    }

    pub fn present_len(&self) -> usize {
        self.present.first().map_or(0, LayerCache::len)
    }

    /// `[g_cached; g_present]` per layer.
    pub fn concatenated(&self) -> Vec<LayerCache<F>> {
        self.cached
            .iter()
            .zip(&self.present)
            .map(|(c, p)| LayerCache {
                keys: hso_tensor::Tensor::vstack(&[&c.keys, &p.keys]).expect("matching width"),
                values: hso_tensor::Tensor::vstack(&[&c.values, &p.values]).expect("matching width"),
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.cached
            .iter()
            .chain(&self.present)
            .all(|l| l.keys.all_finite() && l.values.all_finite())
    }
}

/// Result of one forward/backward pass over a window.
#[derive(Clone, Debug)]
pub struct WindowGradients<F> {
    /// Loss of each scored position.
    pub losses: Vec<F>,
    pub grads: GradientBlock<F>,
    /// The window's keys/values as used in the pass.
    pub present: Vec<LayerCache<F>>,
}

/// Training targets of a window: each position predicts the next token,
/// the last one predicts `next_token` when there is one.
pub fn window_targets(tokens: &[usize], next_token: Option<usize>) -> Vec<usize> {
    tokens[1..].iter().copied().chain(next_token).collect()
}

/// Per-position losses for the first `targets.len()` rows of `logits`.
pub(crate) fn scored_losses<F: Float>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[usize],
) -> Result<Var> {
    let (rows, cols) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    let scored = if targets.len() < rows {
        tape.slice(logits, 0..targets.len(), 0..cols)?
    } else {
        logits
    };
    let (per_token, _) = window_loss(tape, scored, targets)?;
    Ok(per_token)
}

/// Forward over `tokens` with `cache`, then backward of the summed loss
/// into every cached and new key/value state.
///
/// Without `present_override` the new states are computed from the cache,
/// so cached-state gradients include the paths through them. With it, the
/// given states are used as independent inputs.
pub fn window_gradients<F: Float>(
    params: &Parameters<F>,
    cache: &CacheStack<F>,
    tokens: &[usize],
    targets: &[usize],
    present_override: Option<&[LayerCache<F>]>,
) -> Result<WindowGradients<F>> {
    let present_override: Option<Vec<Option<LayerCache<F>>>> =
        present_override.map(|ov| ov.iter().cloned().map(Some).collect());
    let present_override = present_override.as_deref();
    if targets.is_empty() || targets.len() > tokens.len() {
        return Err(contract(format!(
            "{} targets for a window of {}",
            targets.len(),
            tokens.len()
        )));
    }
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let pass = f_h(
        &mut tape,
        &pv,
        params.config(),
        tokens,
        cache,
        HiddenOptions {
            track_cache_grads: true,
            present_override,
        },
    )?;
    let logits = f_p(&mut tape, &pv, pass.top)?;
    let per_token = scored_losses(&mut tape, logits, targets)?;
    let losses = tape.value(per_token).data().to_vec();
    let total = tape.sum(per_token);

    let mut wrt = Vec::with_capacity(4 * pass.cached.len());
    for (&(ck, cv), &(pk, pvv)) in pass.cached.iter().zip(&pass.present) {
        wrt.extend([ck, cv, pk, pvv]);
    }
    let g = tape.backward(total, &wrt)?;
    let mut cached = Vec::with_capacity(pass.cached.len());
    let mut present = Vec::with_capacity(pass.cached.len());
    for chunk in g.chunks_exact(4) {
        cached.push(LayerCache {
            keys: chunk[0].clone(),
            values: chunk[1].clone(),
        });
        present.push(LayerCache {
            keys: chunk[2].clone(),
            values: chunk[3].clone(),
        });
    }
    Ok(WindowGradients {
        losses,
        grads: GradientBlock { cached, present },
        present: pass.present_states(&tape),
    })
}

/// Applies one SGD or per-block Adam step to `states`.
///
/// `states` and `moments` cover the same positions, which must equal the
/// cached plus present positions of `grads`. With `present_only`, positions
/// before the present block are left untouched and their counters do not
/// advance. Every block that is updated advances its counter by one.
pub fn optimizer_update<F: Float>(
    states: &mut [LayerCache<F>],
    grads: &GradientBlock<F>,
    moments: &mut MomentStore<F>,
    config: &HsoConfig,
) -> Result<()> {
    let total = grads.cached_len() + grads.present_len();
    let positions = states.first().map_or(0, LayerCache::len);
    if positions != total || moments.positions() != total {
        return Err(contract(format!(
            "update over {positions} states with {total} gradients and {} moment positions",
            moments.positions()
        )));
    }
    if states.len() != grads.cached.len() {
        return Err(contract("layer count mismatch between states and gradients"));
    }
    let start = if config.present_only {
        grads.cached_len()
    } else {
        0
    };
    let full = grads.concatenated();
    let d = states.first().map_or(0, |l| l.keys.cols());
    let lr = F::c(config.learning_rate);
    let b1 = F::c(config.beta1);
    let b2 = F::c(config.beta2);
    let eps = F::c(config.adam_epsilon);

    // Per-position step counters before this update.
    let steps = moments.position_steps();
    let MomentStore { first, second, .. } = moments;

    for (l, layer) in states.iter_mut().enumerate() {
        let (m1, m2) = (&mut first[l], &mut second[l]);
        let pairs = [
            (&mut layer.keys, &full[l].keys, &mut m1.keys, &mut m2.keys),
            (&mut layer.values, &full[l].values, &mut m1.values, &mut m2.values),
        ];
        for (state, grad, m, v) in pairs {
            let state = state.data_mut();
            let grad = grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for (p, &step) in steps.iter().enumerate().take(total).skip(start) {
                let span = p * d..(p + 1) * d;
                let t = step as i32 + 1;
                let bc1 = F::one() - b1.powi(t);
                let bc2 = F::one() - b2.powi(t);
                for i in span {
                    let g = grad[i];
                    let step = match config.optimizer {
                        OptimizerKind::Sgd => lr * g,
                        OptimizerKind::Adam => {
                            m[i] = b1 * m[i] + (F::one() - b1) * g;
                            v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                            let m_hat = m[i] / bc1;
                            let v_hat = v[i] / bc2;
                            lr * m_hat / (v_hat.sqrt() + eps)
                        }
                    };
                    if step != F::zero() {
                        state[i] -= step;
                    }
                }
            }
        }
    }

    let mut offset = 0;
    for block in moments.blocks.iter_mut() {
        if offset + block.len > start {
            block.steps += 1;
        }
        offset += block.len;
    }
    Ok(())
}

fn split_layers<F: Float>(layers: &[LayerCache<F>], at: usize) -> (Vec<LayerCache<F>>, Vec<LayerCache<F>>) {
    let total = layers.first().map_or(0, LayerCache::len);
    (
        layers.iter().map(|l| l.slice_rows(0..at)).collect(),
        layers.iter().map(|l| l.slice_rows(at..total)).collect(),
    )
}

fn concat_layers<F: Float>(a: &[LayerCache<F>], b: &[LayerCache<F>]) -> Vec<LayerCache<F>> {
    GradientBlock {
        cached: a.to_vec(),
        present: b.to_vec(),
    }
    .concatenated()
}

/// One HSO window.
///
/// On success the window's (updated) states are appended to `cache` and a
/// new moment block is registered. If any loss or gradient is non-finite,
/// returns [`Error::NonFinite`] and leaves `cache` and `moments` exactly as
/// they were.
pub fn hso_window_step<F: Float>(
    params: &Parameters<F>,
    cache: &mut CacheStack<F>,
    moments: &mut MomentStore<F>,
    tokens: &[usize],
    next_token: Option<usize>,
    config: &HsoConfig,
) -> Result<WindowReport> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(contract("empty window"));
    }
    if cache.len() + tokens.len() > cache.max_context() {
        return Err(Error::ContextOverflow {
            needed: cache.len() + tokens.len(),
            max: cache.max_context(),
        });
    }
    if moments.positions() != cache.len() {
        return Err(contract(format!(
            "moment store tracks {} positions, cache holds {}",
            moments.positions(),
            cache.len()
        )));
    }
    let targets = window_targets(tokens, next_token);
    if targets.is_empty() {
        // A lone final token has nothing to predict: plain append.
        let (_, states) = crate::model::forward_plain(params, tokens, cache)?;
        cache.append(&states)?;
        moments.push_block(tokens.len());
        return Ok(WindowReport {
            token_losses: Vec::new(),
            tokens_scored: 0,
            reported_before_update: true,
            backward_passes: 0,
        });
    }

    let cached_len = cache.len();
    let first = window_gradients(params, cache, tokens, &targets, None)?;
    let report = WindowReport {
        token_losses: first.losses.iter().map(|l| l.as_f64()).collect(),
        tokens_scored: targets.len(),
        reported_before_update: true,
        backward_passes: config.steps_per_window,
    };

    let mut states = concat_layers(cache.layers(), &first.present);
    let mut working = moments.clone();
    working.push_block(tokens.len());
    let mut pass = first;
    for step in 0..config.steps_per_window {
        if step > 0 {
            let (old, new) = split_layers(&states, cached_len);
            let view = CacheStack::from_layers(old, cache.max_context())?;
            pass = window_gradients(params, &view, tokens, &targets, Some(&new))?;
        }
        if !pass.losses.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFinite("loss"));
        }
        if !pass.grads.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        optimizer_update(&mut states, &pass.grads, &mut working, config)?;
    }
    if !states
        .iter()
        .all(|l| l.keys.all_finite() && l.values.all_finite())
    {
        return Err(Error::NonFinite("state"));
    }

    let (old, new) = split_layers(&states, cached_len);
    let base = cache.base_offset();
    let mut next = CacheStack::from_layers(old, cache.max_context())?;
    next.append(&new)?;
    *cache = rebase(next, base);
    *moments = working;
    Ok(report)
}

fn rebase<F: Float>(mut cache: CacheStack<F>, base_offset: usize) -> CacheStack<F> {
    cache.set_base_offset(base_offset);
    cache
}

/// Drops the oldest `count` positions from the cache and its moments.
pub fn evict_and_translate<F: Float>(
    cache: &mut CacheStack<F>,
    moments: &mut MomentStore<F>,
    count: usize,
) -> Result<()> {
    if count > cache.len() || moments.positions() != cache.len() {
        return Err(contract(format!(
            "cannot evict {count} positions from a cache of {} with {} moment positions",
            cache.len(),
            moments.positions()
        )));
    }
    cache.evict_front(count)?;
    moments.evict_front(count)?;
    Ok(())
}

/// A window with no update: the reference that HSO reports must match.
pub fn plain_window_step<F: Float>(
    params: &Parameters<F>,
    cache: &mut CacheStack<F>,
    tokens: &[usize],
    next_token: Option<usize>,
) -> Result<WindowReport> {
    let targets = window_targets(tokens, next_token);
    let (losses, states) = plain_window_losses(params, cache, tokens, &targets)?;
    cache.append(&states)?;
    Ok(WindowReport {
        token_losses: losses.iter().map(|l| l.as_f64()).collect(),
        tokens_scored: targets.len(),
        reported_before_update: true,
        backward_passes: 0,
    })
}

/// Per-token losses of a plain forward, plus the window's states.
pub fn plain_window_losses<F: Float>(
    params: &Parameters<F>,
    cache: &CacheStack<F>,
    tokens: &[usize],
    targets: &[usize],
) -> Result<(Vec<F>, Vec<LayerCache<F>>)> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let pass = f_h(
        &mut tape,
        &pv,
        params.config(),
        tokens,
        cache,
        HiddenOptions::default(),
    )?;
    let states = pass.present_states(&tape);
    if targets.is_empty() {
        return Ok((Vec::new(), states));
    }
    let logits = f_p(&mut tape, &pv, pass.top)?;
    let per_token = scored_losses(&mut tape, logits, targets)?;
    Ok((tape.value(per_token).data().to_vec(), states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use hso_tensor::Tensor;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 13,
            max_context: 16,
        }
    }

    #[test]
    fn defaults_match_language_model_settings() {
        let c = HsoConfig::default();
        assert_eq!(c.window_size, 25);
        assert_eq!(c.learning_rate, 0.003);
        assert_eq!((c.beta1, c.beta2), (0.65, 0.9));
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.steps_per_window, 1);
        assert!(!c.present_only);
        let f = HsoConfig::few_shot();
        assert_eq!((f.window_size, f.learning_rate), (10, 0.01));
    }

    #[test]
    fn config_round_trips_and_validates() {
        let c = HsoConfig {
            optimizer: OptimizerKind::Sgd,
            present_only: true,
            ..HsoConfig::default()
        };
        assert_eq!(HsoConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert_eq!(HsoConfig::parse("").unwrap(), HsoConfig::default());
        assert!(HsoConfig::parse("window_size = 0").is_err());
        assert!(HsoConfig::parse("learning_rate = -1").is_err());
        assert!(HsoConfig::parse("beta1 = 1.0").is_err());
        assert!(HsoConfig::parse("optimizer = lion").is_err());
        assert!(HsoConfig::parse("update_scope = cached").is_err());
    }

    #[test]
    fn moment_store_eviction_splits_blocks() {
        let mut m = MomentStore::<f64>::new(2, 4);
        m.push_block(3);
        m.push_block(5);
        m.blocks.back_mut().unwrap().steps = 2;
        m.evict_front(4).unwrap();
        assert_eq!(m.positions(), 4);
        assert_eq!(m.position_steps(), vec![2, 2, 2, 2]);
        assert_eq!(m.element_count(), 2 * 4 * 2 * 2 * 4);
        assert!(m.evict_front(5).is_err());
        m.reset();
        assert_eq!(m.positions(), 0);
        assert_eq!(m.blocks().len(), 0);
    }

    #[test]
    fn zero_gradient_leaves_states_unchanged() {
        let mut states = vec![LayerCache {
            keys: Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap(),
            values: Tensor::from_rows(&[vec![0.5, 3.0]]).unwrap(),
        }];
        let before = states.clone();
        let grads = GradientBlock {
            cached: vec![LayerCache::<f64>::empty(2)],
            present: vec![LayerCache::zeros(1, 2)],
        };
        let mut moments = MomentStore::new(1, 2);
        moments.push_block(1);
        optimizer_update(&mut states, &grads, &mut moments, &HsoConfig::default()).unwrap();
        assert!(states[0].bit_eq(&before[0]));
        assert_eq!(moments.position_steps(), vec![1]);
    }

    #[test]
    fn update_requires_matching_moments() {
        let mut states = vec![LayerCache::<f64>::zeros(2, 2)];
        let grads = GradientBlock {
            cached: vec![LayerCache::zeros(1, 2)],
            present: vec![LayerCache::zeros(1, 2)],
        };
        let mut moments = MomentStore::new(1, 2);
        moments.push_block(1);
        assert!(matches!(
            optimizer_update(&mut states, &grads, &mut moments, &HsoConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn first_adam_step_is_sign_descent() {
        let g = [0.3, -2.0, 1e-3, -0.07];
        let mut states = vec![LayerCache {
            keys: Tensor::from_rows(&[g.to_vec()]).unwrap().map(|_| 0.0),
            values: Tensor::zeros(vec![1, 4]),
        }];
        let grads = GradientBlock {
            cached: vec![LayerCache::<f64>::empty(4)],
            present: vec![LayerCache {
                keys: Tensor::from_rows(&[g.to_vec()]).unwrap(),
                values: Tensor::from_rows(&[g.to_vec()]).unwrap(),
            }],
        };
        let mut moments = MomentStore::new(1, 4);
        moments.push_block(1);
        let config = HsoConfig {
            learning_rate: 0.01,
            ..HsoConfig::default()
        };
        optimizer_update(&mut states, &grads, &mut moments, &config).unwrap();
        for (s, g) in states[0].keys.data().iter().zip(g) {
            let expected = -0.01 * g.signum();
            assert!((s - expected).abs() < 1e-7, "{s} vs {expected}");
        }
    }

    #[test]
    fn step_with_overflowing_window_is_rejected() {
        let c = cfg();
        let p = Parameters::<f64>::init(c, 0).unwrap();
        let mut cache = CacheStack::new(&c);
        let mut m = MomentStore::for_cache(&cache);
        let tokens = vec![1; 17];
        assert!(matches!(
            hso_window_step(&p, &mut cache, &mut m, &tokens, None, &HsoConfig::default()),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(matches!(
            hso_window_step(&p, &mut cache, &mut m, &[], None, &HsoConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lone_final_token_is_appended_without_update() {
        let c = cfg();
        let p = Parameters::<f64>::init(c, 0).unwrap();
        let mut cache = CacheStack::new(&c);
        let mut m = MomentStore::for_cache(&cache);
        let r = hso_window_step(&p, &mut cache, &mut m, &[4], None, &HsoConfig::default()).unwrap();
        assert_eq!(r.tokens_scored, 0);
        assert_eq!(r.backward_passes, 0);
        assert_eq!(cache.len(), 1);
        assert_eq!(m.position_steps(), vec![0]);
    }

    #[test]
    fn evict_and_translate_keeps_survivors() {
        let c = cfg();
        let p = Parameters::<f64>::init(c, 0).unwrap();
        let mut cache = CacheStack::new(&c);
        let mut m = MomentStore::for_cache(&cache);
        let conf = HsoConfig {
            window_size: 4,
            ..HsoConfig::default()
        };
        hso_window_step(&p, &mut cache, &mut m, &[1, 2, 3, 4], Some(5), &conf).unwrap();
        hso_window_step(&p, &mut cache, &mut m, &[5, 6, 7, 8], Some(9), &conf).unwrap();
        let (c0, m0) = (cache.clone(), m.clone());
        evict_and_translate(&mut cache, &mut m, 0).unwrap();
        assert!(cache.bit_eq(&c0));
        evict_and_translate(&mut cache, &mut m, 3).unwrap();
        assert_eq!(m.positions(), cache.len());
        assert_eq!(m.position_steps(), vec![2, 1, 1, 1, 1]);
        for (a, b) in m.first_moments().iter().zip(m0.first_moments()) {
            assert!(a.bit_eq(&b.slice_rows(3..8)));
        }
        for (a, b) in cache.layers().iter().zip(c0.layers()) {
            assert!(a.bit_eq(&b.slice_rows(3..8)));
        }
        assert!(evict_and_translate(&mut cache, &mut m, 6).is_err());
        evict_and_translate(&mut cache, &mut m, 5).unwrap();
        assert_eq!((cache.len(), m.positions()), (0, 0));
    }
}
