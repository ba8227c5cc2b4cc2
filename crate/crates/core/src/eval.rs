//! Corpus perplexity under plain, HSO or dynamic-evaluation streams, and a
//! cost benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use hso_tensor::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamic_eval::{de_aux_elements, de_window_step, DeConfig, DeStream};
use crate::error::{contract, Error, Result};
use crate::hso::{
    evict_and_translate, hso_window_step, plain_window_step, HsoConfig, MomentStore, WindowReport,
};
use crate::model::{CacheStack, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    /// Non-overlapping contexts: once the cache is full it is emptied.
    ResetAtMax,
    /// Evict the oldest positions to make room for each window.
    Slide,
}

impl std::str::FromStr for ContextPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reset_at_max" => Ok(Self::ResetAtMax),
            "slide" => Ok(Self::Slide),
            _ => Err(Error::Config(format!("unknown context policy {s:?}"))),
        }
    }
}

impl std::fmt::Display for ContextPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ResetAtMax => "reset_at_max",
            Self::Slide => "slide",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub context_policy: ContextPolicy,
    /// Caps the context below the model's own limit.
    pub max_context: Option<usize>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            context_policy: ContextPolicy::ResetAtMax,
            max_context: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MethodConfig {
    Baseline { window_size: usize },
    Hso(HsoConfig),
    De(DeConfig),
}

impl MethodConfig {
    pub fn baseline() -> Self {
        Self::Baseline { window_size: 25 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline { .. } => "baseline",
            Self::Hso(_) => "hso",
            Self::De(_) => "de",
        }
    }

    pub fn window_size(&self) -> usize {
        match self {
            Self::Baseline { window_size } => *window_size,
            Self::Hso(c) => c.window_size,
            Self::De(c) => c.window_size,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Baseline { window_size: 0 } => {
                Err(Error::Config("window_size must be at least 1".into()))
            }
            Self::Baseline { .. } => Ok(()),
            Self::Hso(c) => c.validate(),
            Self::De(c) => c.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Scored tokens.
    pub total_tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    pub nan_events: usize,
    pub wall_time: f64,
    pub backward_passes: usize,
    pub stream_starts: usize,
    pub windows: usize,
    pub peak_aux_elements: usize,
}

impl EvalReport {
    /// Token-weighted merge of shard reports.
    pub fn merge(parts: &[EvalReport]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| contract("no reports to merge"))?;
        let total: usize = parts.iter().map(|r| r.total_tokens).sum();
        let nll_sum: f64 = parts
            .iter()
            .map(|r| r.mean_nll * r.total_tokens as f64)
            .sum();
        let mean_nll = if total == 0 { 0.0 } else { nll_sum / total as f64 };
        Ok(Self {
            method: first.method.clone(),
            total_tokens: total,
            mean_nll,
            perplexity: mean_nll.exp(),
            nan_events: parts.iter().map(|r| r.nan_events).sum(),
            wall_time: parts.iter().map(|r| r.wall_time).sum(),
            backward_passes: parts.iter().map(|r| r.backward_passes).sum(),
            stream_starts: parts.iter().map(|r| r.stream_starts).sum(),
            windows: parts.iter().map(|r| r.windows).sum(),
            peak_aux_elements: parts.iter().map(|r| r.peak_aux_elements).max().unwrap_or(0),
        })
    }

    /// Equality of every field except wall time.
    pub fn same_result(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other && self.mean_nll.to_bits() == other.mean_nll.to_bits()
    }
}

/// One evaluated window, for the optional debug dump.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    pub index: usize,
    /// Corpus index of the window's first token.
    pub start: usize,
    pub len: usize,
    pub tokens_scored: usize,
    pub loss_sum: f64,
    pub nan_event: bool,
}

pub fn windows_csv(records: &[WindowRecord]) -> String {
    let mut out = String::from("index,start,len,tokens_scored,loss_sum,nan_event\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.index, r.start, r.len, r.tokens_scored, r.loss_sum, r.nan_event
        );
    }
    out
}

enum Stream<F> {
    Plain(CacheStack<F>),
    Hso {
        cache: CacheStack<F>,
        moments: MomentStore<F>,
    },
    De(Box<DeStream<F>>),
}

impl<F: Float> Stream<F> {
    fn new(params: &Parameters<F>, method: &MethodConfig, max_context: usize) -> Result<Self> {
        let empty = || {
            let layers = CacheStack::new(params.config()).layers().to_vec();
            CacheStack::from_layers(layers, max_context)
        };
        Ok(match method {
            MethodConfig::Baseline { .. } => Self::Plain(empty()?),
            MethodConfig::Hso(_) => {
                let cache = empty()?;
                let moments = MomentStore::for_cache(&cache);
                Self::Hso { cache, moments }
            }
            MethodConfig::De(_) => Self::De(Box::new(DeStream::new(params.clone(), max_context)?)),
        })
    }

    fn cache(&self) -> &CacheStack<F> {
        match self {
            Self::Plain(c) => c,
            Self::Hso { cache, .. } => cache,
            Self::De(s) => &s.cache,
        }
    }

    fn reset(&mut self) {
        match self {
            Self::Plain(c) => c.reset(),
            Self::Hso { cache, moments } => {
                cache.reset();
                moments.reset();
            }
            Self::De(s) => s.reset_cache(),
        }
    }

    fn evict(&mut self, count: usize) -> Result<()> {
        match self {
            Self::Plain(c) => c.evict_front(count),
            Self::Hso { cache, moments } => evict_and_translate(cache, moments, count),
            Self::De(s) => s.evict_front(count),
        }
    }

    fn aux_elements(&self) -> usize {
        match self {
            Self::Plain(_) => 0,
            Self::Hso { moments, .. } => moments.element_count(),
            Self::De(s) => de_aux_elements(&s.params),
        }
    }

    /// Runs one window; a non-finite update falls back to a plain step.
    fn step(
        &mut self,
        params: &Parameters<F>,
        method: &MethodConfig,
        tokens: &[usize],
        next: Option<usize>,
    ) -> Result<(WindowReport, bool)> {
        let outcome = match (self, method) {
            (Self::Plain(cache), _) => return Ok((plain_window_step(params, cache, tokens, next)?, false)),
            (Self::Hso { cache, moments }, MethodConfig::Hso(cfg)) => {
                match hso_window_step(params, cache, moments, tokens, next, cfg) {
                    Err(Error::NonFinite(what)) => {
                        log::warn!("non-finite {what} in HSO window; keeping states unmodified");
                        let r = plain_window_step(params, cache, tokens, next)?;
                        moments.push_block(tokens.len());
                        (r, true)
                    }
                    other => (other?, false),
                }
            }
            (Self::De(stream), MethodConfig::De(cfg)) => {
                match de_window_step(stream, tokens, next, cfg) {
                    Err(Error::NonFinite(what)) => {
                        log::warn!("non-finite {what} in DE window; keeping weights unmodified");
                        let r = plain_window_step(&stream.params, &mut stream.cache, tokens, next)?;
                        stream.prefix.extend_from_slice(tokens);
                        (r, true)
                    }
                    other => (other?, false),
                }
            }
            _ => return Err(contract("stream does not match method")),
        };
        Ok(outcome)
    }
}

/// Per-window trace of an evaluation.
pub struct Evaluation {
    pub report: EvalReport,
    pub windows: Vec<WindowRecord>,
}

/// Scores `corpus` window by window.
///
/// Every window's losses come from its pre-update pass. A token is scored
/// when the position before it sits in the same context, so with
/// [`ContextPolicy::ResetAtMax`] the first token of each fresh context is
/// unscored and `total_tokens = corpus.len() − stream_starts`.
pub fn evaluate<F: Float>(
    corpus: &[usize],
    params: &Parameters<F>,
    protocol: &EvalProtocol,
    method: &MethodConfig,
) -> Result<EvalReport> {
    evaluate_traced(corpus, params, protocol, method).map(|e| e.report)
}

pub fn evaluate_traced<F: Float>(
    corpus: &[usize],
    params: &Parameters<F>,
    protocol: &EvalProtocol,
    method: &MethodConfig,
) -> Result<Evaluation> {
    if corpus.len() < 2 {
        return Err(contract(format!(
            "corpus of {} tokens; at least 2 are needed",
            corpus.len()
        )));
    }
    method.validate()?;
    let model_max = params.config().max_context;
    let max_context = protocol.max_context.unwrap_or(model_max);
    if max_context < 2 || max_context > model_max {
        return Err(Error::Config(format!(
            "max_context {max_context} outside [2, {model_max}]"
        )));
    }
    let k = method.window_size();
    let started = Instant::now();
    let mut stream = Stream::new(params, method, max_context)?;
    let mut records = Vec::new();
    let (mut nll, mut scored, mut nan_events, mut passes, mut starts, mut peak) = (0.0, 0, 0, 0, 0, 0);

    let mut pos = 0;
    while pos < corpus.len() {
        let remaining = corpus.len() - pos;
        let w = match protocol.context_policy {
            ContextPolicy::ResetAtMax => {
                if stream.cache().len() == max_context {
                    stream.reset();
                }
                k.min(remaining).min(max_context - stream.cache().len())
            }
            ContextPolicy::Slide => {
                let w = k.min(remaining).min(max_context);
                let overflow = (stream.cache().len() + w).saturating_sub(max_context);
                stream.evict(overflow)?;
                w
            }
        };
        if stream.cache().is_empty() {
            starts += 1;
        }
        let fills = stream.cache().len() + w == max_context;
        let next = match protocol.context_policy {
            ContextPolicy::ResetAtMax if fills => None,
            _ => corpus.get(pos + w).copied(),
        };
        let tokens = &corpus[pos..pos + w];
        let (report, nan) = stream.step(params, method, tokens, next)?;
        nan_events += usize::from(nan);
        passes += if nan { 0 } else { report.backward_passes };
        scored += report.tokens_scored;
        let loss_sum = report.loss_sum();
        nll += loss_sum;
        peak = peak.max(stream.aux_elements());
        records.push(WindowRecord {
            index: records.len(),
            start: pos,
            len: w,
            tokens_scored: report.tokens_scored,
            loss_sum,
            nan_event: nan,
        });
        pos += w;
    }

    let mean_nll = if scored == 0 { 0.0 } else { nll / scored as f64 };
    Ok(Evaluation {
        report: EvalReport {
            method: method.name().to_string(),
            total_tokens: scored,
            mean_nll,
            perplexity: mean_nll.exp(),
            nan_events,
            wall_time: started.elapsed().as_secs_f64(),
            backward_passes: passes,
            stream_starts: starts,
            windows: records.len(),
            peak_aux_elements: peak,
        },
        windows: records,
    })
}

/// Splits `corpus` into `shards` contiguous pieces evaluated as independent
/// streams on up to `threads` threads, then merges the reports.
pub fn evaluate_sharded<F: Float>(
    corpus: &[usize],
    params: &Parameters<F>,
    protocol: &EvalProtocol,
    method: &MethodConfig,
    shards: usize,
    threads: usize,
) -> Result<EvalReport> {
    let len = corpus.len().div_ceil(shards.max(1)).max(2);
    let mut pieces: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < corpus.len() {
        // A one-token tail joins the previous shard.
        let end = if corpus.len() - start < len + 2 {
            corpus.len()
        } else {
            start + len
        };
        pieces.push(&corpus[start..end]);
        start = end;
    }
    let threads = threads.max(1);
    let mut reports = Vec::with_capacity(pieces.len());
    for batch in pieces.chunks(threads) {
        let results: Vec<Result<EvalReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|piece| s.spawn(move || evaluate(piece, params, protocol, method)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        });
        for r in results {
            reports.push(r?);
        }
    }
    EvalReport::merge(&reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    /// Predicted tokens; the input holds one more.
    pub input_length: usize,
    pub wall_time: f64,
    pub peak_aux_elements: usize,
    pub backward_passes: usize,
}

/// Times each method on seeded random inputs of each length. An input of
/// length `n` predicts `n` tokens, so it feeds `n + 1`; lengths must leave
/// room for that in the model context.
pub fn bench<F: Float>(
    params: &Parameters<F>,
    methods: &[MethodConfig],
    input_lengths: &[usize],
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = params.config().vocab_size;
    let mut rows = Vec::new();
    for &n in input_lengths {
        if n == 0 || n + 1 > params.config().max_context {
            return Err(Error::Config(format!(
                "bench length {n} does not fit a context of {}",
                params.config().max_context
            )));
        }
        let input: Vec<usize> = (0..=n).map(|_| rng.gen_range(0..vocab)).collect();
        for method in methods {
            let r = evaluate(&input, params, &EvalProtocol::default(), method)?;
            rows.push(BenchRow {
                method: r.method,
                input_length: n,
                wall_time: r.wall_time,
                peak_aux_elements: r.peak_aux_elements,
                backward_passes: r.backward_passes,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,input_length,wall_time,peak_aux_elements,backward_passes\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{}",
            r.method, r.input_length, r.wall_time, r.peak_aux_elements, r.backward_passes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> Parameters<f64> {
        Parameters::init(
            ModelConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                vocab_size: 12,
                max_context: 10,
            },
            5,
        )
        .unwrap()
    }

    fn corpus(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + 3) % 12).collect()
    }

    #[test]
    fn short_corpus_is_rejected() {
        let p = params();
        let r = evaluate(&[1], &p, &EvalProtocol::default(), &MethodConfig::baseline());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn two_tokens_score_one() {
        let p = params();
        let e = evaluate_traced(&[3, 4], &p, &EvalProtocol::default(), &MethodConfig::baseline()).unwrap();
        assert_eq!(e.report.total_tokens, 1);
        assert_eq!(e.report.mean_nll, e.windows[0].loss_sum);
        assert_eq!(e.report.perplexity, e.report.mean_nll.exp());
    }

    #[test]
    fn reset_accounting() {
        let p = params();
        for n in [2, 9, 10, 11, 23, 40] {
            for k in [1, 3, 4, 25] {
                let m = MethodConfig::Baseline { window_size: k };
                let r = evaluate(&corpus(n), &p, &EvalProtocol::default(), &m).unwrap();
                assert_eq!(r.total_tokens + r.stream_starts, n, "n={n} k={k}");
                assert_eq!(r.stream_starts, n.div_ceil(10));
            }
        }
    }

    #[test]
    fn slide_scores_every_token_but_the_first() {
        let p = params();
        let protocol = EvalProtocol {
            context_policy: ContextPolicy::Slide,
            ..EvalProtocol::default()
        };
        let m = MethodConfig::Hso(HsoConfig {
            window_size: 4,
            ..HsoConfig::default()
        });
        let r = evaluate(&corpus(31), &p, &protocol, &m).unwrap();
        assert_eq!(r.total_tokens, 30);
        assert_eq!(r.stream_starts, 1);
        assert_eq!(r.backward_passes, 8);
        assert_eq!(r.peak_aux_elements, 2 * 10 * 2 * 8);
    }

    #[test]
    fn merge_weights_by_tokens() {
        let base = EvalReport {
            method: "hso".into(),
            total_tokens: 1,
            mean_nll: 1.0,
            perplexity: 1f64.exp(),
            nan_events: 0,
            wall_time: 0.5,
            backward_passes: 1,
            stream_starts: 1,
            windows: 1,
            peak_aux_elements: 4,
        };
        let other = EvalReport {
            total_tokens: 3,
            mean_nll: 2.0,
            peak_aux_elements: 9,
            ..base.clone()
        };
        let m = EvalReport::merge(&[base, other]).unwrap();
        assert_eq!(m.total_tokens, 4);
        assert!((m.mean_nll - 1.75).abs() < 1e-15);
        assert_eq!(m.peak_aux_elements, 9);
        assert_eq!(m.perplexity, m.mean_nll.exp());
    }

    #[test]
    fn sharded_single_shard_equals_plain() {
        let p = params();
        let c = corpus(35);
        let m = MethodConfig::baseline();
        let a = evaluate(&c, &p, &EvalProtocol::default(), &m).unwrap();
        let b = evaluate_sharded(&c, &p, &EvalProtocol::default(), &m, 1, 4).unwrap();
        assert!(a.same_result(&b));
        let s = evaluate_sharded(&c, &p, &EvalProtocol::default(), &m, 3, 2).unwrap();
        assert_eq!(s.total_tokens + s.stream_starts, 35);
    }

    #[test]
    fn bench_rejects_oversized_inputs() {
        let p = params();
        assert!(bench(&p, &[MethodConfig::baseline()], &[10], 0).is_err());
        let rows = bench(&p, &[MethodConfig::baseline()], &[9], 0).unwrap();
        assert_eq!(rows[0].backward_passes, 0);
        assert_eq!(rows[0].peak_aux_elements, 0);
        assert!(bench_csv(&rows).starts_with("method,"));
    }
}
