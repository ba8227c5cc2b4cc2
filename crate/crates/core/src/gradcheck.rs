//! Gradient-check suites run by `hso gradcheck`: every tape primitive, the
//! window-loss gradients HSO uses, the weight gradients dynamic evaluation
//! uses, and the per-position Adam update against a scalar reference.

use std::sync::Arc;

use hso_tensor::gradcheck::max_relative_error;
use hso_tensor::{finite_diff_gradient, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hso::{
    optimizer_update, plain_window_losses, window_gradients, window_targets, GradientBlock,
    HsoConfig, MomentStore,
};
use crate::model::{f_h, f_p, CacheStack, HiddenOptions, LayerCache, ModelConfig, Parameters};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const ADAM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn suite(name: &str, errors: &[f64], tolerance: f64) -> SuiteResult {
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    SuiteResult {
        name: name.into(),
        checks: errors.len(),
        max_error,
        tolerance,
        passed: !errors.is_empty() && errors.iter().all(|e| *e < tolerance),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
        .expect("shape matches")
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// Largest relative error of `sum(op(inputs) ⊙ w)` gradients over all inputs.
fn op_error(inputs: Vec<Tensor<f64>>, op: &OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone(), true)).collect();
    let out = op(&mut probe, &vars);
    let weights = random(rng, probe.shape(out), 1.0);
    let loss_of = |tape: &mut Tape<f64>, vars: &[Var]| {
        let out = op(tape, vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).expect("same shape");
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = loss_of(&mut tape, &vars);
    let analytic = tape.backward(loss, &vars).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_gradient(
            |xi| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, inp)| t.leaf(if j == i { xi.clone() } else { inp.clone() }, true))
                    .collect();
                let l = loss_of(&mut t, &vs);
                t.value(l).item()
            },
            x,
            EPS,
        );
        worst = worst.max(max_relative_error(&analytic[i], &numeric));
    }
    worst
}

/// Every tape primitive on `instances` random inputs.
pub fn primitives(seed: u64, instances: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    for _ in 0..instances {
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..5));
        let mask: Arc<[bool]> = (0..m * n).map(|i| i % n == n - 1 && i > 0).collect();
        let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let ids: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let cases: Vec<(Vec<Vec<usize>>, OpFn)> = vec![
            (vec![vec![m, k], vec![k, n]], Box::new(|t, v| t.matmul(v[0], v[1], false).unwrap())),
            (vec![vec![m, k], vec![n, k]], Box::new(|t, v| t.matmul(v[0], v[1], true).unwrap())),
            (vec![vec![m, n], vec![m, n]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
            (vec![vec![m, n], vec![n]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
            (vec![vec![m, n], vec![m, n]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
            (vec![vec![m, n]], Box::new(|t, v| t.scale(v[0], 0.7))),
            (vec![vec![m, n]], Box::new(|t, v| t.softmax(v[0]))),
            (
                vec![vec![m, n], vec![n], vec![n]],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
            ),
            (vec![vec![m, n]], Box::new(|t, v| t.gelu(v[0]))),
            (
                vec![vec![n, k]],
                Box::new(move |t, v| t.embedding(v[0], &ids).unwrap()),
            ),
            (
                vec![vec![m, n]],
                Box::new(move |t, v| t.slice(v[0], 0..m, 1..n).unwrap()),
            ),
            (
                vec![vec![m, n], vec![m, k]],
                Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
            ),
            (
                vec![vec![m, n], vec![k, n]],
                Box::new(|t, v| t.concat(&[v[0], v[1]], 0).unwrap()),
            ),
            (
                vec![vec![m, n]],
                Box::new(move |t, v| {
                    let f = t.masked_fill(v[0], Arc::clone(&mask), -1e9).unwrap();
                    t.softmax(f)
                }),
            ),
            (
                vec![vec![m, n]],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets).unwrap()),
            ),
        ];
        for (shapes, op) in cases {
            let inputs = shapes.iter().map(|s| random(&mut rng, s, 1.5)).collect();
            errors.push(op_error(inputs, &op, &mut rng));
        }
    }
    suite("primitives", &errors, TOLERANCE)
}

/// The configuration of the cache-gradient suite.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 64,
        max_context: 16,
    }
}

/// A random instance: weights, a filled cache, a window and its targets.
pub struct WindowInstance {
    pub params: Parameters<f64>,
    pub cache: CacheStack<f64>,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Weights are scaled up from the usual init so gradients are not tiny.
pub fn window_instance(config: ModelConfig, seed: u64, cached: usize, k: usize) -> Result<WindowInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::<f64>::init(config, seed)?;
    for t in params.tensors_mut() {
        if t.shape().len() == 2 {
            *t = t.map(|x| x * 10.0);
        }
    }
    let mut cache = CacheStack::new(&config);
    let layers: Vec<LayerCache<f64>> = (0..config.n_layers)
        .map(|_| LayerCache {
            keys: random(&mut rng, &[cached, config.d_model], 1.0),
            values: random(&mut rng, &[cached, config.d_model], 1.0),
        })
        .collect();
    cache.append(&layers)?;
    let tokens: Vec<usize> = (0..k).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let next = rng.gen_range(0..config.vocab_size);
    let targets = window_targets(&tokens, Some(next));
    Ok(WindowInstance {
        params,
        cache,
        tokens,
        targets,
    })
}

fn window_loss_sum(
    params: &Parameters<f64>,
    cache: &CacheStack<f64>,
    tokens: &[usize],
    targets: &[usize],
    present: Option<&[Option<LayerCache<f64>>]>,
) -> f64 {
    match present {
        None => plain_window_losses(params, cache, tokens, targets)
            .expect("valid instance")
            .0
            .iter()
            .sum(),
        Some(ov) => {
            let mut tape = Tape::new();
            let pv = params.register(&mut tape, false);
            let pass = f_h(
                &mut tape,
                &pv,
                params.config(),
                tokens,
                cache,
                HiddenOptions {
                    track_cache_grads: false,
                    present_override: Some(ov),
                },
            )
            .expect("valid instance");
            let logits = f_p(&mut tape, &pv, pass.top).expect("valid instance");
            let per = tape.cross_entropy(logits, targets).expect("valid targets");
            tape.value(per).data().iter().sum()
        }
    }
}

/// Largest relative errors of (cached, present) gradients on one instance.
pub fn window_gradient_errors(inst: &WindowInstance) -> Result<(f64, f64)> {
    let WindowInstance {
        params,
        cache,
        tokens,
        targets,
    } = inst;
    let analytic = window_gradients(params, cache, tokens, targets, None)?;
    let mut cached_err: f64 = 0.0;
    for (l, layer) in cache.layers().iter().enumerate() {
        for values in [false, true] {
            let x = if values { &layer.values } else { &layer.keys };
            let numeric = finite_diff_gradient(
                |xi| {
                    let mut c = cache.clone();
                    let target = &mut c.layers_mut()[l];
                    *(if values { &mut target.values } else { &mut target.keys }) = xi.clone();
                    window_loss_sum(params, &c, tokens, targets, None)
                },
                x,
                EPS,
            );
            let g = &analytic.grads.cached[l];
            cached_err = cached_err.max(max_relative_error(if values { &g.values } else { &g.keys }, &numeric));
        }
    }
    let mut present_err: f64 = 0.0;
    for l in 0..params.config().n_layers {
        for values in [false, true] {
            let state = &analytic.present[l];
            let x = if values { &state.values } else { &state.keys };
            let numeric = finite_diff_gradient(
                |xi| {
                    let mut ov: Vec<Option<LayerCache<f64>>> = vec![None; params.config().n_layers];
                    let mut s = state.clone();
                    *(if values { &mut s.values } else { &mut s.keys }) = xi.clone();
                    ov[l] = Some(s);
                    window_loss_sum(params, cache, tokens, targets, Some(&ov))
                },
                x,
                EPS,
            );
            let g = &analytic.grads.present[l];
            present_err = present_err.max(max_relative_error(if values { &g.values } else { &g.keys }, &numeric));
        }
    }
    Ok((cached_err, present_err))
}

/// Window-loss gradients with respect to cached and new states.
pub fn hidden_states(seed: u64, instances: usize) -> Result<Vec<SuiteResult>> {
    let (mut cached, mut present) = (Vec::new(), Vec::new());
    for i in 0..instances {
        let inst = window_instance(small_model(), seed.wrapping_add(i as u64), 6, 5)?;
        let (c, p) = window_gradient_errors(&inst)?;
        cached.push(c);
        present.push(p);
    }
    Ok(vec![
        suite("cached_states", &cached, TOLERANCE),
        suite("present_states", &present, TOLERANCE),
    ])
}

/// Weight gradients of the window loss on a sample of entries per tensor.
pub fn parameters(seed: u64, instances: usize) -> Result<SuiteResult> {
    let config = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 11,
        max_context: 12,
    };
    let mut errors = Vec::new();
    for i in 0..instances {
        let inst = window_instance(config, seed.wrapping_add(i as u64), 3, 4)?;
        let mut tape = Tape::new();
        let pv = inst.params.register(&mut tape, true);
        let pass = f_h(&mut tape, &pv, &config, &inst.tokens, &inst.cache, HiddenOptions::default())?;
        let logits = f_p(&mut tape, &pv, pass.top)?;
        let per = tape.cross_entropy(logits, &inst.targets)?;
        let loss = tape.sum(per);
        let grads = tape.backward(loss, pv.all())?;
        for (j, g) in grads.iter().enumerate() {
            let numeric = finite_diff_gradient(
                |xj| {
                    let mut p = inst.params.clone();
                    p.tensors_mut()[j] = xj.clone();
                    window_loss_sum(&p, &inst.cache, &inst.tokens, &inst.targets, None)
                },
                &inst.params.tensors()[j],
                EPS,
            );
            errors.push(max_relative_error(g, &numeric));
        }
    }
    Ok(suite("parameters", &errors, TOLERANCE))
}

/// Reference Adam on one scalar with its own step count.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub u: u64,
}

impl ScalarAdam {
    pub fn step(&mut self, x: f64, g: f64, config: &HsoConfig) -> f64 {
        let (b1, b2) = (config.beta1, config.beta2);
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        self.u += 1;
        let m_hat = self.m / (1.0 - b1.powi(self.u as i32));
        let v_hat = self.v / (1.0 - b2.powi(self.u as i32));
        x - config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon)
    }
}

/// The per-position update against [`ScalarAdam`], over blocks created at
/// different windows.
pub fn adam(seed: u64, instances: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = HsoConfig::default();
    let (layers, d) = (2, 3);
    let mut errors = Vec::new();
    for _ in 0..instances {
        let mut states: Vec<LayerCache<f64>> = Vec::new();
        let mut moments = MomentStore::new(layers, d);
        let mut reference: Vec<ScalarAdam> = Vec::new();
        let mut flat_len = 0;
        for window in 0..4 {
            let w = rng.gen_range(1..4);
            let cached = states.first().map_or(0, LayerCache::len);
            let fresh: Vec<LayerCache<f64>> = (0..layers)
                .map(|_| LayerCache {
                    keys: random(&mut rng, &[w, d], 1.0),
                    values: random(&mut rng, &[w, d], 1.0),
                })
                .collect();
            let grads = GradientBlock {
                cached: (0..layers)
                    .map(|_| LayerCache {
                        keys: random(&mut rng, &[cached, d], 2.0),
                        values: random(&mut rng, &[cached, d], 2.0),
                    })
                    .collect(),
                present: (0..layers)
                    .map(|_| LayerCache {
                        keys: random(&mut rng, &[w, d], 2.0),
                        values: random(&mut rng, &[w, d], 2.0),
                    })
                    .collect(),
            };
            states = if window == 0 {
                fresh
            } else {
                states
                    .iter()
                    .zip(&fresh)
                    .map(|(s, f)| LayerCache {
                        keys: Tensor::vstack(&[&s.keys, &f.keys]).expect("width"),
                        values: Tensor::vstack(&[&s.values, &f.values]).expect("width"),
                    })
                    .collect()
            };
            moments.push_block(w);
            flat_len += layers * 2 * w * d;
            reference.resize(flat_len, ScalarAdam::default());

            let flat = |s: &[LayerCache<f64>]| -> Vec<f64> {
                s.iter()
                    .flat_map(|l| l.keys.data().iter().chain(l.values.data()).copied())
                    .collect::<Vec<_>>()
            };
            let before = flat(&states);
            let g = flat(&grads.concatenated());
            optimizer_update(&mut states, &grads, &mut moments, &config).expect("consistent shapes");
            let after = flat(&states);
            // Reference entries are keyed by flat index into the current
            // layout, which shifts as blocks are appended; re-key by
            // (layer, kind, position, column).
            let positions = states[0].len();
            let mut next_ref = vec![ScalarAdam::default(); flat_len];
            for l in 0..layers {
                for kind in 0..2 {
                    for p in 0..positions {
                        for c in 0..d {
                            let now = ((l * 2 + kind) * positions + p) * d + c;
                            let old_positions = positions - w;
                            let prev = if p < old_positions {
                                reference[((l * 2 + kind) * old_positions + p) * d + c]
                            } else {
                                ScalarAdam::default()
                            };
                            let mut r = prev;
                            let expected = r.step(before[now], g[now], &config);
                            errors.push((after[now] - expected).abs());
                            next_ref[now] = r;
                        }
                    }
                }
            }
            reference = next_ref;
        }
    }
    suite("adam", &errors, ADAM_TOLERANCE)
}

/// Every suite with the instance counts the CLI uses.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = vec![primitives(seed, 10)];
    out.extend(hidden_states(seed, 3)?);
    out.push(parameters(seed, 2)?);
    out.push(adam(seed, 5));
    Ok(out)
}
