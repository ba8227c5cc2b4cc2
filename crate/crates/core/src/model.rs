//! Decoder-only transformer with an explicit key/value cache.
//!
//! The forward pass is split the way hidden-state optimization needs it:
//! [`f_h`] maps new tokens plus the cached per-layer keys/values to the new
//! positions' keys/values and top-layer states, and [`f_p`] maps top-layer
//! states to logits. Learned absolute positions are indexed by in-cache
//! position, so evicting the oldest entries keeps indices in range.

use std::ops::Range;
use std::sync::Arc;

use hso_tensor::{Float, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{FlatConfig, KvConfig};
use crate::error::{contract, Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            max_context: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_context < 2 {
            return Err(Error::Config("max_context must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Scalars held per cached position across all layers (keys and values).
    pub fn state_elements_per_position(&self) -> usize {
        self.n_layers * 2 * self.d_model
    }
}

impl FlatConfig for ModelConfig {
    const KEYS: &'static [&'static str] = &[
        "n_layers",
        "d_model",
        "n_heads",
        "d_ff",
        "vocab_size",
        "max_context",
    ];

    fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(Self::KEYS)?;
        let d = Self::default();
        let cfg = Self {
            n_layers: kv.get_or("n_layers", d.n_layers)?,
            d_model: kv.get_or("d_model", d.d_model)?,
            n_heads: kv.get_or("n_heads", d.n_heads)?,
            d_ff: kv.get_or("d_ff", d.d_ff)?,
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            max_context: kv.get_or("max_context", d.max_context)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("n_layers", self.n_layers);
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("d_ff", self.d_ff);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_context", self.max_context);
        kv
    }
}

/// Position of each tensor inside a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum BlockSlot {
    Ln1Gain,
    Ln1Bias,
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    OutWeight,
    OutBias,
    Ln2Gain,
    Ln2Bias,
    FcWeight,
    FcBias,
    ProjWeight,
    ProjBias,
}

const BLOCK_NAMES: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.wfc", "mlp.bfc", "mlp.wproj", "mlp.bproj",
];
const PER_BLOCK: usize = BLOCK_NAMES.len();
const WTE: usize = 0;
const WPE: usize = 1;
const FIRST_BLOCK: usize = 2;

fn block_index(layer: usize, slot: BlockSlot) -> usize {
    FIRST_BLOCK + layer * PER_BLOCK + slot as usize
}

/// Model weights. The output projection is tied to the token embedding.
#[derive(Clone, Debug)]
pub struct Parameters<F> {
    config: ModelConfig,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Parameters<F> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by 1/√(2·layers), zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let mut normal = |shape: Vec<usize>, s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| F::c(dist.sample(&mut rng))).collect())
                .expect("shape matches")
        };
        let (d, f) = (config.d_model, config.d_ff);
        let mut tensors = vec![
            normal(vec![config.vocab_size, d], std),
            normal(vec![config.max_context, d], std / 2.0),
        ];
        for _ in 0..config.n_layers {
            tensors.push(Tensor::full(vec![d], F::one()));
            tensors.push(Tensor::zeros(vec![d]));
            for _ in 0..3 {
                tensors.push(normal(vec![d, d], std));
                tensors.push(Tensor::zeros(vec![d]));
            }
            tensors.push(normal(vec![d, d], resid_std));
            tensors.push(Tensor::zeros(vec![d]));
            tensors.push(Tensor::full(vec![d], F::one()));
            tensors.push(Tensor::zeros(vec![d]));
            tensors.push(normal(vec![d, f], std));
            tensors.push(Tensor::zeros(vec![f]));
            tensors.push(normal(vec![f, d], resid_std));
            tensors.push(Tensor::zeros(vec![d]));
        }
        tensors.push(Tensor::full(vec![d], F::one()));
        tensors.push(Tensor::zeros(vec![d]));
        Ok(Self { config, tensors })
    }

    /// Builds parameters from tensors in [`Parameters::names`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let expected = Self::shapes(&config);
        if tensors.len() != expected.len() {
            return Err(contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((t, shape), name) in tensors.iter().zip(&expected).zip(Self::names(&config)) {
            if t.shape() != shape.as_slice() {
                return Err(contract(format!(
                    "parameter {name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["wte".to_string(), "wpe".to_string()];
        for l in 0..config.n_layers {
            names.extend(BLOCK_NAMES.iter().map(|n| format!("h{l}.{n}")));
        }
        names.push("ln_f.g".into());
        names.push("ln_f.b".into());
        names
    }

    pub fn shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let (d, f) = (config.d_model, config.d_ff);
        let mut shapes = vec![vec![config.vocab_size, d], vec![config.max_context, d]];
        for _ in 0..config.n_layers {
            shapes.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        shapes
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<F>> {
        self.tensors
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn block(&self, layer: usize, slot: BlockSlot) -> &Tensor<F> {
        &self.tensors[block_index(layer, slot)]
    }

    pub fn block_mut(&mut self, layer: usize, slot: BlockSlot) -> &mut Tensor<F> {
        &mut self.tensors[block_index(layer, slot)]
    }

    pub fn cast<G: Float>(&self) -> Parameters<G> {
        Parameters {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<F>, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Tape handles for every parameter, in [`Parameters::names`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn wte(&self) -> Var {
        self.vars[WTE]
    }

    fn wpe(&self) -> Var {
        self.vars[WPE]
    }

    fn block(&self, layer: usize, slot: BlockSlot) -> Var {
        self.vars[block_index(layer, slot)]
    }

    fn ln_f(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Cached keys and values of one layer, `[positions × d_model]` each.
#[derive(Clone, Debug)]
pub struct LayerCache<F> {
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
}

impl<F: Float> LayerCache<F> {
    pub fn empty(d_model: usize) -> Self {
        Self {
            keys: Tensor::zeros(vec![0, d_model]),
            values: Tensor::zeros(vec![0, d_model]),
        }
    }

    pub fn zeros(positions: usize, d_model: usize) -> Self {
        Self {
            keys: Tensor::zeros(vec![positions, d_model]),
            values: Tensor::zeros(vec![positions, d_model]),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        if self.keys.shape() != self.values.shape() || self.keys.shape().len() != 2 {
            return Err(contract(format!(
                "layer cache keys {:?} and values {:?} disagree",
                self.keys.shape(),
                self.values.shape()
            )));
        }
        Ok(())
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        Self {
            keys: self.keys.slice_rows(range.start, range.end),
            values: self.values.slice_rows(range.start, range.end),
        }
    }

    fn concat(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            keys: Tensor::vstack(&[&self.keys, &other.keys])?,
            values: Tensor::vstack(&[&self.values, &other.values])?,
        })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.keys.bit_eq(&other.keys) && self.values.bit_eq(&other.values)
    }
}

/// Per-layer caches for every retained position of one stream.
#[derive(Clone, Debug)]
pub struct CacheStack<F> {
    layers: Vec<LayerCache<F>>,
    base_offset: usize,
    max_context: usize,
}

impl<F: Float> CacheStack<F> {
    /// Builds a cache from explicit per-layer states.
    pub fn from_layers(layers: Vec<LayerCache<F>>, max_context: usize) -> Result<Self> {
        let len = layers.first().map_or(0, LayerCache::len);
        for l in &layers {
            l.check()?;
            if l.len() != len {
                return Err(contract("layers disagree on cached position count"));
            }
        }
        if len > max_context {
            return Err(Error::ContextOverflow {
                needed: len,
                max: max_context,
            });
        }
        Ok(Self {
            layers,
            base_offset: 0,
            max_context,
        })
    }

    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.n_layers)
                .map(|_| LayerCache::empty(config.d_model))
                .collect(),
            base_offset: 0,
            max_context: config.max_context,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    /// Absolute stream index of the first cached position.
    pub fn base_offset(&self) -> usize {
        self.base_offset
    }

    /// Tokens consumed by this stream so far.
    pub fn consumed(&self) -> usize {
        self.base_offset + self.len()
    }

    pub fn layers(&self) -> &[LayerCache<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerCache<F>] {
        &mut self.layers
    }

    pub(crate) fn set_base_offset(&mut self, base_offset: usize) {
        self.base_offset = base_offset;
    }

    /// Appends states for `w` new positions (one [`LayerCache`] per layer).
    pub fn append(&mut self, new_states: &[LayerCache<F>]) -> Result<()> {
        if new_states.len() != self.layers.len() {
            return Err(contract(format!(
                "{} layers of new states for a {}-layer cache",
                new_states.len(),
                self.layers.len()
            )));
        }
        let w = new_states.first().map_or(0, LayerCache::len);
        for s in new_states {
            s.check()?;
            if s.len() != w {
                return Err(contract("new states disagree on position count"));
            }
        }
        if self.len() + w > self.max_context {
            return Err(Error::ContextOverflow {
                needed: self.len() + w,
                max: self.max_context,
            });
        }
        for (layer, s) in self.layers.iter_mut().zip(new_states) {
            *layer = layer.concat(s)?;
        }
        Ok(())
    }

    /// Empties the cache; the next call behaves as on a fresh stream.
    pub fn reset(&mut self) {
        self.base_offset += self.len();
        for layer in &mut self.layers {
            *layer = LayerCache::empty(layer.keys.cols());
        }
    }

    /// Drops the oldest `count` positions.
    pub fn evict_front(&mut self, count: usize) -> Result<()> {
        let len = self.len();
        if count > len {
            return Err(contract(format!("cannot evict {count} of {len} positions")));
        }
        if count == 0 {
            return Ok(());
        }
        for layer in &mut self.layers {
            *layer = layer.slice_rows(count..len);
        }
        self.base_offset += count;
        Ok(())
    }

    /// The last `w` positions of every layer.
    pub fn tail(&self, w: usize) -> Vec<LayerCache<F>> {
        let len = self.len();
        self.layers
            .iter()
            .map(|l| l.slice_rows(len - w..len))
            .collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.base_offset == other.base_offset
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Options for [`f_h`].
#[derive(Clone, Copy, Debug, Default)]
pub struct HiddenOptions<'a, F> {
    /// Register cached keys/values as differentiable leaves. The new
    /// positions' keys/values then also carry gradients, as total
    /// derivatives through everything downstream of them.
    pub track_cache_grads: bool,
    /// Per layer, keys/values to use for the new positions instead of
    /// computing them, `[w × d_model]` each. Overridden states are inputs:
    /// nothing upstream flows into them.
    pub present_override: Option<&'a [Option<LayerCache<F>>]>,
}

/// Tape handles produced by [`f_h`].
#[derive(Clone, Debug)]
pub struct HiddenPass {
    /// Per layer, the (keys, values) leaves of the pre-existing cache.
    pub cached: Vec<(Var, Var)>,
    /// Per layer, the (keys, values) of the new positions.
    pub present: Vec<(Var, Var)>,
    /// Top-layer residual states of the new positions, `[w × d_model]`.
    pub top: Var,
}

impl HiddenPass {
    /// Values of the new positions' states.
    pub fn present_states<F: Float>(&self, tape: &Tape<F>) -> Vec<LayerCache<F>> {
        self.present
            .iter()
            .map(|&(k, v)| LayerCache {
                keys: tape.value(k).clone(),
                values: tape.value(v).clone(),
            })
            .collect()
    }
}

fn causal_mask(new: usize, cached: usize) -> Arc<[bool]> {
    let total = cached + new;
    (0..new)
        .flat_map(|i| (0..total).map(move |j| j > cached + i))
        .collect()
}

fn linear<F: Float>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w, false)?;
    Ok(tape.add(y, b)?)
}

/// Multi-head attention of `q` (`[w × d]`) over `keys`/`values` (`[s × d]`).
fn attend<F: Float>(
    tape: &mut Tape<F>,
    q: Var,
    keys: Var,
    values: Var,
    mask: &Arc<[bool]>,
    n_heads: usize,
) -> Result<Var> {
    let w = tape.shape(q)[0];
    let s = tape.shape(keys)[0];
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = F::one() / F::c(dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = tape.slice(q, 0..w, cols.clone())?;
        let kh = tape.slice(keys, 0..s, cols.clone())?;
        let vh = tape.slice(values, 0..s, cols)?;
        let scores = tape.matmul(qh, kh, true)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.masked_fill(scores, Arc::clone(mask), F::neg_infinity())?;
        let probs = tape.softmax(scores);
        heads.push(tape.matmul(probs, vh, false)?);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    Ok(tape.concat(&heads, 1)?)
}

fn mlp<F: Float>(tape: &mut Tape<F>, pv: &ParamVars, layer: usize, x: Var) -> Result<Var> {
    use BlockSlot::*;
    let eps = F::c(LN_EPS);
    let h = tape.layer_norm(x, pv.block(layer, Ln2Gain), pv.block(layer, Ln2Bias), eps)?;
    let h = linear(tape, h, pv.block(layer, FcWeight), pv.block(layer, FcBias))?;
    let h = tape.gelu(h);
    let h = linear(tape, h, pv.block(layer, ProjWeight), pv.block(layer, ProjBias))?;
    Ok(tape.add(x, h)?)
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(contract("empty token sequence"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(contract(format!(
            "token id {t} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Computes keys/values and top-layer states for `tokens` given `cache`.
///
/// New position `i` sits at in-cache index `cache.len() + i` and attends to
/// every cached position and to new positions `≤ i`.
pub fn f_h<F: Float>(
    tape: &mut Tape<F>,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
    cache: &CacheStack<F>,
    opts: HiddenOptions<'_, F>,
) -> Result<HiddenPass> {
    use BlockSlot::*;
    check_tokens(config, tokens)?;
    let w = tokens.len();
    let cached_len = cache.len();
    if cached_len + w > config.max_context {
        return Err(Error::ContextOverflow {
            needed: cached_len + w,
            max: config.max_context,
        });
    }
    if let Some(ov) = opts.present_override {
        if ov.len() != config.n_layers
            || ov.iter().flatten().any(|l| {
                l.keys.shape() != [w, config.d_model] || l.values.shape() != [w, config.d_model]
            })
        {
            return Err(contract("present override does not match window shape"));
        }
    }

    let positions: Vec<usize> = (cached_len..cached_len + w).collect();
    let tok = tape.embedding(pv.wte(), tokens)?;
    let pos = tape.embedding(pv.wpe(), &positions)?;
    let mut x = tape.add(tok, pos)?;
    if opts.track_cache_grads {
        // Re-rooted so the new positions' states carry gradients even in
        // layers no cached state feeds.
        x = tape.leaf(tape.value(x).clone(), true);
    }
    let mask = causal_mask(w, cached_len);
    let eps = F::c(LN_EPS);

    let mut cached = Vec::with_capacity(config.n_layers);
    let mut present = Vec::with_capacity(config.n_layers);
    for (l, layer_cache) in cache.layers().iter().enumerate() {
        let ck = tape.leaf(layer_cache.keys.clone(), opts.track_cache_grads);
        let cv = tape.leaf(layer_cache.values.clone(), opts.track_cache_grads);

        let h = tape.layer_norm(x, pv.block(l, Ln1Gain), pv.block(l, Ln1Bias), eps)?;
        let q = linear(tape, h, pv.block(l, QueryWeight), pv.block(l, QueryBias))?;
        let (k, v) = match opts.present_override.and_then(|ov| ov[l].as_ref()) {
            Some(ov) => (
                tape.leaf(ov.keys.clone(), opts.track_cache_grads),
                tape.leaf(ov.values.clone(), opts.track_cache_grads),
            ),
            None => (
                linear(tape, h, pv.block(l, KeyWeight), pv.block(l, KeyBias))?,
                linear(tape, h, pv.block(l, ValueWeight), pv.block(l, ValueBias))?,
            ),
        };
        let keys = tape.concat(&[ck, k], 0)?;
        let values = tape.concat(&[cv, v], 0)?;
        let a = attend(tape, q, keys, values, &mask, config.n_heads)?;
        let a = linear(tape, a, pv.block(l, OutWeight), pv.block(l, OutBias))?;
        x = tape.add(x, a)?;
        x = mlp(tape, pv, l, x)?;

        cached.push((ck, cv));
        present.push((k, v));
    }
    Ok(HiddenPass {
        cached,
        present,
        top: x,
    })
}

/// Logits `[w × vocab]` from top-layer states via the final layer norm and
/// the tied embedding.
pub fn f_p<F: Float>(tape: &mut Tape<F>, pv: &ParamVars, top: Var) -> Result<Var> {
    let (g, b) = pv.ln_f();
    let h = tape.layer_norm(top, g, b, F::c(LN_EPS))?;
    Ok(tape.matmul(h, pv.wte(), true)?)
}

/// Per-token cross entropy and its mean. Row `i` of `logits` predicts
/// `targets[i]`.
pub fn window_loss<F: Float>(tape: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<(Var, Var)> {
    let rows = tape.shape(logits)[0];
    if rows != targets.len() {
        return Err(contract(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let per_token = tape.cross_entropy(logits, targets)?;
    let mean = tape.mean(per_token);
    Ok((per_token, mean))
}

/// Forward over independent cache-free sequences stacked along rows;
/// returns logits for every position. Used for pretraining.
pub fn forward_batch<F: Float>(
    tape: &mut Tape<F>,
    pv: &ParamVars,
    config: &ModelConfig,
    seqs: &[&[usize]],
) -> Result<Var> {
    use BlockSlot::*;
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    for s in seqs {
        check_tokens(config, s)?;
        if s.len() > config.max_context {
            return Err(Error::ContextOverflow {
                needed: s.len(),
                max: config.max_context,
            });
        }
        spans.push(tokens.len()..tokens.len() + s.len());
        tokens.extend_from_slice(s);
        positions.extend(0..s.len());
    }
    let tok = tape.embedding(pv.wte(), &tokens)?;
    let pos = tape.embedding(pv.wpe(), &positions)?;
    let mut x = tape.add(tok, pos)?;
    let eps = F::c(LN_EPS);
    let d = config.d_model;
    let mut masks: std::collections::HashMap<usize, Arc<[bool]>> = Default::default();

    for l in 0..config.n_layers {
        let h = tape.layer_norm(x, pv.block(l, Ln1Gain), pv.block(l, Ln1Bias), eps)?;
        let q = linear(tape, h, pv.block(l, QueryWeight), pv.block(l, QueryBias))?;
        let k = linear(tape, h, pv.block(l, KeyWeight), pv.block(l, KeyBias))?;
        let v = linear(tape, h, pv.block(l, ValueWeight), pv.block(l, ValueBias))?;
        let mut outs = Vec::with_capacity(spans.len());
        for span in &spans {
            let mask = masks
                .entry(span.len())
                .or_insert_with(|| causal_mask(span.len(), 0))
                .clone();
            let qs = tape.slice(q, span.clone(), 0..d)?;
            let ks = tape.slice(k, span.clone(), 0..d)?;
            let vs = tape.slice(v, span.clone(), 0..d)?;
            outs.push(attend(tape, qs, ks, vs, &mask, config.n_heads)?);
        }
        let a = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 0)?
        };
        let a = linear(tape, a, pv.block(l, OutWeight), pv.block(l, OutBias))?;
        x = tape.add(x, a)?;
        x = mlp(tape, pv, l, x)?;
    }
    f_p(tape, pv, x)
}

/// Plain (no-gradient) forward of `tokens` over `cache`, returning logits
/// and the new positions' states. Does not modify `cache`.
pub fn forward_plain<F: Float>(
    params: &Parameters<F>,
    tokens: &[usize],
    cache: &CacheStack<F>,
) -> Result<(Tensor<F>, Vec<LayerCache<F>>)> {
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
    let logits = f_p(&mut tape, &pv, pass.top)?;
    Ok((tape.value(logits).clone(), pass.present_states(&tape)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_context: 12,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { max_context: 1, ..tiny() }.validate().is_err());
        assert!(ModelConfig { n_layers: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = tiny();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::parse("d_model = 9\nn_heads = 2").is_err());
        assert!(ModelConfig::parse("depth = 2").is_err());
    }

    #[test]
    fn parameter_shapes_and_names_agree() {
        let p = Parameters::<f32>::init(tiny(), 0).unwrap();
        assert_eq!(p.tensors().len(), Parameters::<f32>::names(&tiny()).len());
        let rebuilt = Parameters::from_tensors(tiny(), p.tensors().to_vec()).unwrap();
        assert!(rebuilt.bit_eq(&p));
        let mut bad = p.tensors().to_vec();
        bad.pop();
        assert!(Parameters::from_tensors(tiny(), bad).is_err());
    }

    #[test]
    fn append_grows_and_preserves() {
        let cfg = tiny();
        let mut cache = CacheStack::<f64>::new(&cfg);
        let five: Vec<_> = (0..2).map(|_| LayerCache::zeros(5, 8)).collect();
        cache.append(&five).unwrap();
        let before = cache.clone();
        let p = Parameters::<f64>::init(cfg, 1).unwrap();
        let (_, states) = forward_plain(&p, &[1, 2, 3], &cache).unwrap();
        cache.append(&states).unwrap();
        assert_eq!(cache.len(), 8);
        for (a, b) in cache.layers().iter().zip(before.layers()) {
            assert!(a.slice_rows(0..5).bit_eq(b));
        }
        for (a, b) in cache.tail(3).iter().zip(&states) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn append_overflow_is_an_error() {
        let cfg = tiny();
        let mut cache = CacheStack::<f32>::new(&cfg);
        let big: Vec<_> = (0..2).map(|_| LayerCache::zeros(13, 8)).collect();
        assert!(matches!(cache.append(&big), Err(Error::ContextOverflow { .. })));
        let p = Parameters::<f32>::init(cfg, 1).unwrap();
        assert!(matches!(
            forward_plain(&p, &[0; 13], &cache),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn reset_is_idempotent_and_advances_offset() {
        let cfg = tiny();
        let p = Parameters::<f32>::init(cfg, 2).unwrap();
        let mut cache = CacheStack::new(&cfg);
        let (_, s) = forward_plain(&p, &[1, 2, 3, 4], &cache).unwrap();
        cache.append(&s).unwrap();
        cache.reset();
        assert_eq!(cache.len(), 0);
        assert_eq!(cache.base_offset(), 4);
        let once = cache.clone();
        cache.reset();
        assert!(cache.bit_eq(&once));
    }

    #[test]
    fn evict_front_keeps_survivors() {
        let cfg = tiny();
        let p = Parameters::<f64>::init(cfg, 3).unwrap();
        let mut cache = CacheStack::new(&cfg);
        let (_, s) = forward_plain(&p, &[1, 2, 3, 4, 5], &cache).unwrap();
        cache.append(&s).unwrap();
        let before = cache.clone();
        cache.evict_front(0).unwrap();
        assert!(cache.bit_eq(&before));
        cache.evict_front(2).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.base_offset(), 2);
        assert_eq!(cache.consumed(), 5);
        for (a, b) in cache.layers().iter().zip(before.layers()) {
            assert!(a.bit_eq(&b.slice_rows(2..5)));
        }
        assert!(cache.evict_front(4).is_err());
    }

    #[test]
    fn bad_tokens_are_rejected() {
        let cfg = tiny();
        let p = Parameters::<f32>::init(cfg, 0).unwrap();
        let cache = CacheStack::new(&cfg);
        assert!(matches!(forward_plain(&p, &[], &cache), Err(Error::Contract(_))));
        assert!(matches!(forward_plain(&p, &[11], &cache), Err(Error::Contract(_))));
    }

    #[test]
    fn window_loss_length_mismatch() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 4]));
        assert!(window_loss(&mut tape, logits, &[0, 1]).is_err());
        let (per, mean) = window_loss(&mut tape, logits, &[0, 1, 3]).unwrap();
        for &l in tape.value(per).data() {
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
        assert!((tape.value(mean).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_vanishing_loss() {
        let mut tape = Tape::<f64>::new();
        let mut row = vec![0.0; 5];
        row[2] = 30.0;
        let logits = tape.constant(Tensor::new(vec![1, 5], row).unwrap());
        let (per, _) = window_loss(&mut tape, logits, &[2]).unwrap();
        assert!(tape.value(per).item() < 1e-9);
    }
}
