//! Prompt-based few-shot classification.
//!
//! Each test example gets its own class-balanced prompt of labeled
//! demonstrations followed by the query, rendered up to the label slot.
//! Every class label is then scored by the log-likelihood of its tokens
//! continuing the prompt. Update-based methods adapt on the prompt only;
//! the label tokens are never part of an update window.

use std::fmt::Write as _;

use hso_tensor::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamic_eval::{de_window_step, restore_params, snapshot_params, DeConfig, DeStream};
use crate::error::{Error, Result};
use crate::hso::{hso_window_step, plain_window_losses, plain_window_step, HsoConfig, MomentStore};
use crate::model::{CacheStack, Parameters};
use crate::tokenizer::Tokenizer;

const TEXT_SLOT: &str = "{text}";
const LABEL_SLOT: &str = "{label}";

fn default_separator() -> String {
    "\n\n".into()
}

fn default_max_example_tokens() -> usize {
    35
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: Vec<String>,
    /// Example format with one `{text}` slot followed by one `{label}` slot.
    pub template: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default = "default_max_example_tokens")]
    pub max_example_tokens: usize,
}

impl TaskSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("task spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Full validation, including the two-class minimum.
    pub fn validate(&self) -> Result<()> {
        self.validate_format()?;
        if self.classes.len() < 2 {
            return Err(Error::Parse("a task needs at least two classes".into()));
        }
        Ok(())
    }

    /// Template and label checks only.
    pub fn validate_format(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Parse("task has no classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Parse(format!("class {i} has an empty label")));
            }
            if self.classes[..i].contains(c) {
                return Err(Error::Parse(format!("duplicate class {c:?}")));
            }
        }
        let (text, label) = (
            self.template.matches(TEXT_SLOT).count(),
            self.template.matches(LABEL_SLOT).count(),
        );
        if text != 1 || label != 1 {
            return Err(Error::Parse(
                "template needs exactly one {text} and one {label} slot".into(),
            ));
        }
        if self.template.find(TEXT_SLOT) > self.template.find(LABEL_SLOT) {
            return Err(Error::Parse("{text} must precede {label} in the template".into()));
        }
        if self.max_example_tokens == 0 {
            return Err(Error::Parse("max_example_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// Template pieces: before `{text}`, between the slots, after `{label}`.
    fn parts(&self) -> (&str, &str, &str) {
        let (pre, rest) = self.template.split_once(TEXT_SLOT).expect("validated template");
        let (mid, post) = rest.split_once(LABEL_SLOT).expect("validated template");
        (pre, mid, post)
    }

    pub fn label_tokens(&self, tok: &dyn Tokenizer) -> Result<Vec<Vec<usize>>> {
        self.classes
            .iter()
            .map(|c| {
                let t = tok.encode_str(c);
                if t.is_empty() {
                    Err(Error::Parse(format!("label {c:?} encodes to no tokens")))
                } else {
                    Ok(t)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub label: usize,
    pub text: String,
}

/// Parses `label<TAB>text` lines. Blank lines are skipped.
pub fn parse_tsv(text: &str, task: &TaskSpec) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::Parse(format!("line {}: expected label<TAB>text", i + 1)))?;
        let label = task
            .classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Parse(format!("line {}: unknown label {label:?}", i + 1)))?;
        out.push(LabeledText {
            label,
            text: body.to_string(),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    /// Demonstrations per prompt.
    pub shots: usize,
    pub seed: u64,
}

/// Prompt tokens up to the query's label slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    /// Pool indices of the demonstrations, in prompt order.
    pub demos: Vec<usize>,
}

impl Prompt {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for &t in &self.tokens {
            h.update((t as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Builds a class-balanced prompt.
///
/// Each class gets `shots / classes` demonstrations; the remaining
/// `shots % classes` go to distinct classes chosen at random. Only pool
/// texts within `max_example_tokens` are eligible, and `exclude` (the query's
/// own pool index, if any) is never drawn. Demonstrations are shuffled after
/// sampling. Query texts are cut to `max_example_tokens`.
pub fn build_prompt(
    task: &TaskSpec,
    tok: &dyn Tokenizer,
    pool: &[LabeledText],
    spec: PromptSpec,
    query_text: &str,
    exclude: Option<usize>,
) -> Result<Prompt> {
    task.validate_format()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = task.classes.len();
    let mut counts = vec![spec.shots / c; c];
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    for &class in order.iter().take(spec.shots % c) {
        counts[class] += 1;
    }

    let encoded: Vec<Vec<usize>> = pool.iter().map(|e| tok.encode_str(&e.text)).collect();
    let mut demos = Vec::with_capacity(spec.shots);
    for (class, &count) in counts.iter().enumerate() {
        let eligible: Vec<usize> = (0..pool.len())
            .filter(|&i| {
                pool[i].label == class
                    && Some(i) != exclude
                    && encoded[i].len() <= task.max_example_tokens
            })
            .collect();
        if eligible.len() < count {
            return Err(Error::InsufficientPool(format!(
                "class {:?} needs {count} examples within {} tokens, pool has {}",
                task.classes[class],
                task.max_example_tokens,
                eligible.len()
            )));
        }
        demos.extend(eligible.choose_multiple(&mut rng, count).copied());
    }
    demos.shuffle(&mut rng);

    let (pre, mid, post) = task.parts();
    let (pre, mid, post, sep) = (
        tok.encode_str(pre),
        tok.encode_str(mid),
        tok.encode_str(post),
        tok.encode_str(&task.separator),
    );
    let mut tokens = Vec::new();
    for &i in &demos {
        tokens.extend_from_slice(&pre);
        tokens.extend_from_slice(&encoded[i]);
        tokens.extend_from_slice(&mid);
        tokens.extend(tok.encode_str(&task.classes[pool[i].label]));
        tokens.extend_from_slice(&post);
        tokens.extend_from_slice(&sep);
    }
    let mut query = tok.encode_str(query_text);
    query.truncate(task.max_example_tokens);
    tokens.extend_from_slice(&pre);
    tokens.extend(query);
    tokens.extend_from_slice(&mid);
    if tokens.is_empty() {
        return Err(Error::Parse("prompt encodes to no tokens".into()));
    }
    Ok(Prompt { tokens, demos })
}

#[derive(Clone, Debug, PartialEq)]
pub enum FewShotMethod {
    /// Plain forward over the prompt in windows of `window_size`.
    Baseline { window_size: usize },
    Hso(HsoConfig),
    De(DeConfig),
}

impl FewShotMethod {
    /// `baseline`, `hso`, `hso2` or `de` with the few-shot defaults.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "baseline" => Self::Baseline { window_size: 10 },
            "hso" => Self::Hso(HsoConfig::few_shot()),
            "hso2" => Self::Hso(HsoConfig {
                steps_per_window: 2,
                ..HsoConfig::few_shot()
            }),
            "de" => Self::De(DeConfig::default()),
            _ => return Err(Error::Config(format!("unknown method {name:?}"))),
        })
    }
}

/// Log-likelihood of each label continuing the prompt.
///
/// The prompt's last token is fed during scoring rather than in an update
/// window: it predicts the first label token. With DE the weights are
/// adapted in place and restored afterwards when `reset_between_examples`
/// is set.
pub fn classify<F: Float>(
    params: &mut Parameters<F>,
    prompt: &[usize],
    labels: &[Vec<usize>],
    method: &FewShotMethod,
) -> Result<Vec<f64>> {
    let n = prompt.len();
    let max_label = labels.iter().map(Vec::len).max().unwrap_or(0);
    if n == 0 || max_label == 0 {
        return Err(crate::error::contract("empty prompt or label"));
    }
    let t = params.config().max_context;
    if n - 1 + max_label > t {
        return Err(Error::ContextOverflow {
            needed: n - 1 + max_label,
            max: t,
        });
    }
    let body = &prompt[..n - 1];
    let windows = |k: usize| {
        (0..body.len()).step_by(k).map(move |s| {
            let e = (s + k).min(body.len());
            (&body[s..e], Some(prompt[e]))
        })
    };

    let score = |p: &Parameters<F>, cache: &CacheStack<F>| -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|label| {
                let mut input = vec![prompt[n - 1]];
                input.extend_from_slice(&label[..label.len() - 1]);
                let (losses, _) = plain_window_losses(p, cache, &input, label)?;
                Ok(-losses.iter().map(|l| l.as_f64()).sum::<f64>())
            })
            .collect()
    };

    match method {
        FewShotMethod::Baseline { window_size } => {
            let mut cache = CacheStack::new(params.config());
            for (w, next) in windows((*window_size).max(1)) {
                plain_window_step(params, &mut cache, w, next)?;
            }
            score(params, &cache)
        }
        FewShotMethod::Hso(cfg) => {
            let mut cache = CacheStack::new(params.config());
            let mut moments = MomentStore::for_cache(&cache);
            for (w, next) in windows(cfg.window_size) {
                match hso_window_step(params, &mut cache, &mut moments, w, next, cfg) {
                    Err(Error::NonFinite(_)) => {
                        plain_window_step(params, &mut cache, w, next)?;
                        moments.push_block(w.len());
                    }
                    r => {
                        r?;
                    }
                }
            }
            score(params, &cache)
        }
        FewShotMethod::De(cfg) => {
            let snapshot = snapshot_params(params);
            let mut stream = DeStream::new(params.clone(), t)?;
            for (w, next) in windows(cfg.window_size) {
                match de_window_step(&mut stream, w, next, cfg) {
                    Err(Error::NonFinite(_)) => {
                        plain_window_step(&stream.params, &mut stream.cache, w, next)?;
                        stream.prefix.extend_from_slice(w);
                    }
                    r => {
                        r?;
                    }
                }
            }
            let scores = score(&stream.params, &stream.cache);
            *params = if cfg.reset_between_examples {
                restore_params(&snapshot)
            } else {
                stream.params
            };
            scores
        }
    }
}

/// Highest score wins; ties go to the earliest class.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub example: usize,
    pub shots: usize,
    pub method: String,
    pub gold: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
    pub prompt_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub method: String,
    pub shots: usize,
    pub accuracy: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotTable {
    pub cells: Vec<AccuracyCell>,
    pub episodes: Vec<EpisodeResult>,
}

impl FewShotTable {
    pub fn accuracy(&self, method: &str, shots: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.shots == shots)
            .map(|c| c.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,shots,accuracy,episodes\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{:.6},{}", c.method, c.shots, c.accuracy, c.episodes);
        }
        out
    }

    /// True when every method saw the same prompt for each example.
    pub fn prompts_shared(&self) -> bool {
        self.episodes.iter().all(|e| {
            self.episodes
                .iter()
                .filter(|o| o.example == e.example && o.shots == e.shots)
                .all(|o| o.prompt_hash == e.prompt_hash)
        })
    }
}

/// Seed for the prompt of one (shots, example) pair.
pub fn prompt_seed(seed: u64, shots: usize, example: usize) -> u64 {
    let mut z = seed
        ^ (shots as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (example as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct FewShotRun<'a> {
    pub task: &'a TaskSpec,
    pub tokenizer: &'a dyn Tokenizer,
    /// Demonstration pool; `None` draws from the test set, leaving out the
    /// query itself.
    pub pool: Option<&'a [LabeledText]>,
    pub test: &'a [LabeledText],
    pub methods: &'a [(String, FewShotMethod)],
    pub shots: &'a [usize],
    pub seed: u64,
    pub threads: usize,
}

/// Accuracy for every (method, shots) pair. One prompt is built per
/// (shots, example) and shared by all methods.
pub fn run_eval<F: Float>(params: &Parameters<F>, run: &FewShotRun<'_>) -> Result<FewShotTable> {
    run.task.validate_format()?;
    let labels = run.task.label_tokens(run.tokenizer)?;
    let pool = run.pool.unwrap_or(run.test);
    let exclude_self = run.pool.is_none();

    let episode = |params: &mut Parameters<F>, example: usize| -> Result<Vec<EpisodeResult>> {
        let item = &run.test[example];
        let mut out = Vec::new();
        for &shots in run.shots {
            let prompt = build_prompt(
                run.task,
                run.tokenizer,
                pool,
                PromptSpec {
                    shots,
                    seed: prompt_seed(run.seed, shots, example),
                },
                &item.text,
                exclude_self.then_some(example),
            )?;
            let hash = prompt.hash();
            for (name, method) in run.methods {
                let scores = classify(params, &prompt.tokens, &labels, method)?;
                out.push(EpisodeResult {
                    example,
                    shots,
                    method: name.clone(),
                    gold: item.label,
                    predicted: argmax(&scores),
                    scores,
                    prompt_hash: hash.clone(),
                });
            }
        }
        Ok(out)
    };

    let threads = run.threads.max(1).min(run.test.len().max(1));
    let chunk = run.test.len().div_ceil(threads).max(1);
    let ranges: Vec<_> = (0..run.test.len())
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(run.test.len()))
        .collect();
    let results: Vec<Result<Vec<EpisodeResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|range| {
                let episode = &episode;
                s.spawn(move || {
                    let mut local = params.clone();
                    let mut all = Vec::new();
                    for i in range {
                        all.extend(episode(&mut local, i)?);
                    }
                    Ok(all)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("episode thread panicked"))
            .collect()
    });
    let mut episodes = Vec::new();
    for r in results {
        episodes.extend(r?);
    }

    let mut cells = Vec::new();
    for (name, _) in run.methods {
        for &shots in run.shots {
            let mine: Vec<_> = episodes
                .iter()
                .filter(|e| &e.method == name && e.shots == shots)
                .collect();
            let correct = mine.iter().filter(|e| e.predicted == e.gold).count();
            cells.push(AccuracyCell {
                method: name.clone(),
                shots,
                accuracy: if mine.is_empty() {
                    0.0
                } else {
                    correct as f64 / mine.len() as f64
                },
                episodes: mine.len(),
            });
        }
    }
    Ok(FewShotTable { cells, episodes })
}
