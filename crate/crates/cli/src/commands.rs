use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use hso_core::checkpoint::{self, Checkpoint};
use hso_core::config::{FlatConfig, KvConfig};
use hso_core::dynamic_eval::DeConfig;
use hso_core::eval::{self, ContextPolicy, EvalProtocol, MethodConfig};
use hso_core::fewshot::{self, FewShotMethod, FewShotRun, TaskSpec};
use hso_core::gradcheck;
use hso_core::hso::HsoConfig;
use hso_core::manifest::{atomic_write, sha256_hex, RunManifest, VERSION};
use hso_core::model::{ModelConfig, Parameters};
use hso_core::tokenizer::{self, ByteTokenizer, CharVocab, Tokenizer};
use hso_core::train::{self, TrainConfig};
use hso_tensor::Float;
use serde_json::{json, Value};

use crate::failure::{at, Failure};
use crate::{
    BenchArgs, Cli, Command, EvalArgs, FewshotArgs, GradcheckArgs, Precision, RerunArgs,
    TokenizerKind, TrainArgs,
};

type Outcome<T = ()> = Result<T, Failure>;

/// Where config values and input digests come from.
pub struct Context {
    env: bool,
    /// Resolved config recorded by an earlier run; replaces files and environment.
    preset: Option<BTreeMap<String, String>>,
    expected: Option<RunManifest>,
}

impl Context {
    pub fn live() -> Self {
        Self { env: true, preset: None, expected: None }
    }

    fn replay(manifest: RunManifest) -> Self {
        Self { env: false, preset: Some(manifest.config.clone()), expected: Some(manifest) }
    }

    /// Layers `base`, the file at `path` and `HSO_*` variables, and records
    /// the result under `<flag>.` in the manifest.
    fn resolve<C: FlatConfig>(
        &self,
        manifest: &mut RunManifest,
        flag: &str,
        path: Option<&Path>,
        base: C,
    ) -> Outcome<C> {
        let kv = if let Some(preset) = &self.preset {
            let prefix = format!("{flag}.");
            let mut kv = KvConfig::new();
            for (k, v) in preset {
                if let Some(key) = k.strip_prefix(&prefix) {
                    kv.set(key, v);
                }
            }
            kv.check_keys(C::KEYS)?;
            kv
        } else {
            let mut kv = base.to_kv();
            if let Some(p) = path {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
                let file = KvConfig::parse(&text)
                    .and_then(|f| f.check_keys(C::KEYS).map(|()| f))
                    .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                for (k, v) in file.entries() {
                    kv.set(k, v);
                }
            }
            if self.env {
                kv = kv.with_env_overrides(C::KEYS, |name| std::env::var(name).ok());
            }
            kv
        };
        let config = C::from_kv(&kv)?;
        *manifest = std::mem::take(manifest).with_config(&format!("{flag}."), &config.to_kv());
        Ok(config)
    }

    /// Reads an input file and records its digest, refusing to replay a run
    /// whose inputs have changed.
    fn input(&self, manifest: &mut RunManifest, name: &str, path: &Path) -> Outcome<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
        let digest = sha256_hex(&bytes);
        if let Some(expected) = &self.expected {
            let recorded = if name == "checkpoint" {
                expected.checkpoint_sha256.as_ref()
            } else {
                expected.inputs_sha256.get(name)
            };
            if recorded != Some(&digest) {
                return Err(Failure::Input(format!(
                    "{}: {name} differs from the one the report was made from",
                    path.display()
                )));
            }
        }
        if name == "checkpoint" {
            manifest.checkpoint_sha256 = Some(digest);
        } else {
            manifest.inputs_sha256.insert(name.into(), digest);
        }
        Ok(bytes)
    }

    fn checkpoint(&self, manifest: &mut RunManifest, path: &Path) -> Outcome<Checkpoint> {
        let bytes = self.input(manifest, "checkpoint", path)?;
        checkpoint::decode(&bytes).map_err(at(path))
    }
}

struct BaselineConfig {
    window_size: usize,
}

impl FlatConfig for BaselineConfig {
    const KEYS: &'static [&'static str] = &["window_size"];

    fn from_kv(kv: &KvConfig) -> hso_core::Result<Self> {
        kv.check_keys(Self::KEYS)?;
        Ok(Self { window_size: kv.get_or("window_size", 25)? })
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("window_size", self.window_size);
        kv
    }
}

pub fn run(cli: Cli, argv: Vec<String>, ctx: &Context) -> Outcome {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Train(a) => match cli.precision.unwrap_or(Precision::F32) {
            Precision::F32 => train_cmd::<f32>(a, argv, ctx),
            Precision::F64 => train_cmd::<f64>(a, argv, ctx),
        },
        Command::Eval(a) => {
            let mut m = manifest("eval", a.seed, argv);
            let ck = ctx.checkpoint(&mut m, &a.checkpoint)?;
            match precision(cli.precision, &ck) {
                Precision::F32 => eval_cmd(ck.params::<f32>(), &ck, a, m, ctx, threads),
                Precision::F64 => eval_cmd(ck.params::<f64>(), &ck, a, m, ctx, threads),
            }
        }
        Command::Fewshot(a) => {
            let mut m = manifest("fewshot", a.seed, argv);
            let ck = ctx.checkpoint(&mut m, &a.checkpoint)?;
            match precision(cli.precision, &ck) {
                Precision::F32 => fewshot_cmd(ck.params::<f32>(), &ck, a, m, ctx, threads),
                Precision::F64 => fewshot_cmd(ck.params::<f64>(), &ck, a, m, ctx, threads),
            }
        }
        Command::Bench(a) => {
            let mut m = manifest("bench", a.seed, argv);
            let ck = ctx.checkpoint(&mut m, &a.checkpoint)?;
            match precision(cli.precision, &ck) {
                Precision::F32 => bench_cmd(ck.params::<f32>(), a, m, ctx),
                Precision::F64 => bench_cmd(ck.params::<f64>(), a, m, ctx),
            }
        }
        Command::Gradcheck(a) => gradcheck_cmd(a, manifest("gradcheck", 0, argv)),
        Command::Rerun(a) => rerun_cmd(a),
    }
}

fn manifest(subcommand: &str, seed: u64, argv: Vec<String>) -> RunManifest {
    let mut m = RunManifest::new(subcommand, seed);
    m.argv = argv;
    m
}

fn precision(requested: Option<Precision>, ck: &Checkpoint) -> Precision {
    requested.unwrap_or(if ck.dtype() == f64::DTYPE { Precision::F64 } else { Precision::F32 })
}

fn write_json(path: &Path, mut value: Value, manifest: &RunManifest) -> Outcome {
    if let Value::Object(map) = &mut value {
        map.insert("manifest".into(), json!(manifest));
    }
    let text = serde_json::to_string_pretty(&value).map_err(|e| Failure::Runtime(e.to_string()))?;
    atomic_write(path, format!("{text}\n").as_bytes()).map_err(|e| Failure::io(path, e))
}

const CSV_MANIFEST: &str = "# manifest ";

fn write_csv(path: &Path, csv: &str, manifest: &RunManifest) -> Outcome {
    let header = serde_json::to_string(manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
    atomic_write(path, format!("{CSV_MANIFEST}{header}\n{csv}").as_bytes())
        .map_err(|e| Failure::io(path, e))
}

fn train_cmd<F: Float>(a: TrainArgs, argv: Vec<String>, ctx: &Context) -> Outcome {
    let mut m = manifest("train", 0, argv);
    let bytes = ctx.input(&mut m, "corpus", &a.corpus)?;
    let tok: Box<dyn Tokenizer> = match a.tokenizer {
        TokenizerKind::Byte => Box::new(ByteTokenizer),
        TokenizerKind::Char => {
            let text = std::str::from_utf8(&bytes).map_err(|e| {
                Failure::Input(format!("{}: not UTF-8: {e}", a.corpus.display()))
            })?;
            Box::new(CharVocab::from_text(text))
        }
    };
    let base = ModelConfig { vocab_size: tok.vocab_size(), ..ModelConfig::default() };
    let model = ctx.resolve(&mut m, "model-config", a.model_config.as_deref(), base)?;
    if model.vocab_size != tok.vocab_size() {
        return Err(Failure::Config(format!(
            "vocab_size {} does not match the {} tokenizer's {}",
            model.vocab_size,
            tok.descriptor().split(':').next().unwrap_or("byte"),
            tok.vocab_size()
        )));
    }
    let mut base = TrainConfig::default();
    if let Some(seed) = a.seed {
        base.seed = seed;
    }
    let config = ctx.resolve(&mut m, "train-config", a.train_config.as_deref(), base)?;
    m.seed = config.seed;
    let corpus = tok.encode(&bytes);

    let started = Instant::now();
    let outcome = train::train::<F>(&corpus, model, &config, |s| {
        if s.step % 25 == 0 || s.eval_loss.is_some() {
            log::info!("step {} lr {:.2e} loss {:.4}", s.step, s.lr, s.loss);
        }
    })?;
    checkpoint::save(&a.out, &outcome.params, &tok.descriptor()).map_err(at(&a.out))?;
    let summary = json!({
        "steps": outcome.log.len(),
        "final_loss": outcome.log.last().map(|s| s.loss),
        "diverged_at": outcome.diverged_at,
        "parameters": outcome.params.count(),
        "wall_time": started.elapsed().as_secs_f64(),
        "checkpoint": a.out.display().to_string(),
    });
    println!("{summary}");
    if let Some(report) = &a.report {
        let mut body = summary.clone();
        body["log"] = json!(outcome.log);
        write_json(report, body, &m)?;
    }
    match outcome.diverged_at {
        Some(step) => Err(Failure::Diverged(format!(
            "training diverged at step {step}; last finite weights saved"
        ))),
        None => Ok(()),
    }
}

fn hso_base(
    m: &mut RunManifest,
    ctx: &Context,
    flag: &str,
    path: Option<&Path>,
    base: HsoConfig,
) -> Outcome<HsoConfig> {
    let c = ctx.resolve(m, flag, path, base)?;
    c.validate()?;
    Ok(c)
}

fn de_base(m: &mut RunManifest, ctx: &Context, flag: &str, path: Option<&Path>) -> Outcome<DeConfig> {
    let c = ctx.resolve(m, flag, path, DeConfig::default())?;
    c.validate()?;
    Ok(c)
}

fn eval_cmd<F: Float>(
    params: Parameters<F>,
    ck: &Checkpoint,
    a: EvalArgs,
    mut m: RunManifest,
    ctx: &Context,
    threads: usize,
) -> Outcome {
    let tok = tokenizer::from_descriptor(&ck.tokenizer).map_err(at(&a.checkpoint))?;
    let corpus = tok.encode(&ctx.input(&mut m, "corpus", &a.corpus)?);
    let method = match a.method.as_str() {
        "baseline" => {
            let c = ctx.resolve(&mut m, "config", a.config.as_deref(), BaselineConfig { window_size: 25 })?;
            MethodConfig::Baseline { window_size: c.window_size }
        }
        "hso" => MethodConfig::Hso(hso_base(&mut m, ctx, "config", a.config.as_deref(), HsoConfig::default())?),
        "de" => MethodConfig::De(de_base(&mut m, ctx, "config", a.config.as_deref())?),
        other => return Err(Failure::Usage(format!("unknown method {other:?}; expected baseline, hso or de"))),
    };
    let policy: ContextPolicy = a.policy.parse()?;
    let protocol = EvalProtocol { context_policy: policy, max_context: a.max_context, seed: a.seed };
    m.config.insert("protocol.context_policy".into(), policy.to_string());
    m.config.insert("protocol.max_context".into(), a.max_context.map_or("model".into(), |c| c.to_string()));
    m.config.insert("protocol.shards".into(), a.shards.to_string());

    let report = if a.shards > 1 {
        if a.windows_csv.is_some() {
            return Err(Failure::Usage("--windows-csv needs a single shard".into()));
        }
        eval::evaluate_sharded(&corpus, &params, &protocol, &method, a.shards, threads)?
    } else {
        let traced = eval::evaluate_traced(&corpus, &params, &protocol, &method)?;
        if let Some(path) = &a.windows_csv {
            atomic_write(path, eval::windows_csv(&traced.windows).as_bytes())
                .map_err(|e| Failure::io(path, e))?;
        }
        traced.report
    };
    log::info!("{} perplexity {:.4} over {} tokens", report.method, report.perplexity, report.total_tokens);
    write_json(&a.out, json!(report), &m)
}

fn fewshot_methods(
    names: &[String],
    m: &mut RunManifest,
    ctx: &Context,
    hso_path: Option<&Path>,
    de_path: Option<&Path>,
) -> Outcome<Vec<(String, FewShotMethod)>> {
    let mut hso = None;
    let mut de = None;
    let mut out = Vec::new();
    for name in names {
        let method = match (name.as_str(), FewShotMethod::from_name(name)) {
            (_, Err(_)) => {
                return Err(Failure::Usage(format!(
                    "unknown method {name:?}; expected baseline, hso, hso2 or de"
                )))
            }
            ("hso" | "hso2", Ok(_)) => {
                if hso.is_none() {
                    hso = Some(hso_base(m, ctx, "hso-config", hso_path, HsoConfig::few_shot())?);
                }
                let mut config = hso.clone().expect("resolved above");
                if name == "hso2" {
                    config.steps_per_window = 2;
                }
                FewShotMethod::Hso(config)
            }
            ("de", Ok(_)) => {
                if de.is_none() {
                    de = Some(de_base(m, ctx, "de-config", de_path)?);
                }
                FewShotMethod::De(de.clone().expect("resolved above"))
            }
            (_, Ok(method)) => method,
        };
        out.push((name.clone(), method));
    }
    Ok(out)
}

fn fewshot_cmd<F: Float>(
    params: Parameters<F>,
    ck: &Checkpoint,
    a: FewshotArgs,
    mut m: RunManifest,
    ctx: &Context,
    threads: usize,
) -> Outcome {
    let tok = tokenizer::from_descriptor(&ck.tokenizer).map_err(at(&a.checkpoint))?;
    let task_text = utf8(&a.task, ctx.input(&mut m, "task", &a.task)?)?;
    let task = TaskSpec::from_json(&task_text).map_err(at(&a.task))?;
    let test_text = utf8(&a.test, ctx.input(&mut m, "test", &a.test)?)?;
    let test = fewshot::parse_tsv(&test_text, &task).map_err(at(&a.test))?;
    let pool = match &a.pool {
        Some(p) => {
            let text = utf8(p, ctx.input(&mut m, "pool", p)?)?;
            Some(fewshot::parse_tsv(&text, &task).map_err(at(p))?)
        }
        None => None,
    };
    let methods = fewshot_methods(&a.methods, &mut m, ctx, a.hso_config.as_deref(), a.de_config.as_deref())?;
    let run = FewShotRun {
        task: &task,
        tokenizer: tok.as_ref(),
        pool: pool.as_deref(),
        test: &test,
        methods: &methods,
        shots: &a.shots,
        seed: a.seed,
        threads,
    };
    let table = fewshot::run_eval(&params, &run)?;
    for c in &table.cells {
        log::info!("{} {}-shot accuracy {:.4}", c.method, c.shots, c.accuracy);
    }
    if let Some(path) = &a.episodes {
        write_json(path, json!({ "episodes": table.episodes }), &m)?;
    }
    write_csv(&a.out, &table.to_csv(), &m)
}

fn utf8(path: &Path, bytes: Vec<u8>) -> Outcome<String> {
    String::from_utf8(bytes).map_err(|e| Failure::Input(format!("{}: not UTF-8: {e}", path.display())))
}

fn bench_cmd<F: Float>(params: Parameters<F>, a: BenchArgs, mut m: RunManifest, ctx: &Context) -> Outcome {
    let mut methods = Vec::new();
    for name in &a.methods {
        methods.push(match name.as_str() {
            "baseline" => MethodConfig::baseline(),
            "hso" => MethodConfig::Hso(hso_base(&mut m, ctx, "hso-config", a.hso_config.as_deref(), HsoConfig::default())?),
            "de" => MethodConfig::De(de_base(&mut m, ctx, "de-config", a.de_config.as_deref())?),
            other => return Err(Failure::Usage(format!("unknown method {other:?}; expected baseline, hso or de"))),
        });
    }
    let rows = eval::bench(&params, &methods, &a.lengths, a.seed)?;
    write_csv(&a.out, &eval::bench_csv(&rows), &m)
}

fn gradcheck_cmd(a: GradcheckArgs, mut m: RunManifest) -> Outcome {
    m.seed = a.seed;
    let suites = gradcheck::run_all(a.seed)?;
    for s in &suites {
        println!(
            "{} {} checks={} max_error={:.3e} tolerance={:.0e}",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.checks,
            s.max_error,
            s.tolerance
        );
    }
    if let Some(path) = &a.out {
        write_json(path, json!({ "suites": suites }), &m)?;
    }
    match suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect::<Vec<_>>() {
        failed if failed.is_empty() => Ok(()),
        failed => Err(Failure::Check(format!("failed suites: {}", failed.join(", ")))),
    }
}

/// Flags whose values are side outputs; a rerun drops them.
const SIDE_OUTPUTS: &[&str] = &["--report", "--episodes", "--windows-csv"];

fn read_manifest(path: &Path) -> Outcome<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    let bad = |e: String| Failure::Input(format!("{}: {e}", path.display()));
    let value: Value = match text.strip_prefix(CSV_MANIFEST) {
        Some(rest) => {
            let line = rest.lines().next().unwrap_or_default();
            serde_json::from_str(line).map_err(|e| bad(e.to_string()))?
        }
        None => {
            let report: Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            report.get("manifest").cloned().ok_or_else(|| bad("no manifest".into()))?
        }
    };
    serde_json::from_value(value).map_err(|e| bad(format!("manifest: {e}")))
}

fn rewrite_argv(argv: &[String], out: &Path) -> Vec<String> {
    let mut rewritten = Vec::with_capacity(argv.len());
    let mut args = argv.iter();
    while let Some(arg) = args.next() {
        let (flag, inline) = match arg.split_once('=') {
            Some((f, v)) if f.starts_with("--") => (f, Some(v)),
            _ => (arg.as_str(), None),
        };
        if flag == "--out" || SIDE_OUTPUTS.contains(&flag) {
            if inline.is_none() {
                args.next();
            }
            if flag == "--out" {
                rewritten.push("--out".into());
                rewritten.push(out.display().to_string());
            }
            continue;
        }
        rewritten.push(arg.clone());
    }
    rewritten
}

fn rerun_cmd(a: RerunArgs) -> Outcome {
    let recorded = read_manifest(&a.report)?;
    if recorded.subcommand == "rerun" {
        return Err(Failure::Input("a rerun report cannot name another rerun".into()));
    }
    if recorded.version != VERSION {
        log::warn!("report written by version {}, running {VERSION}", recorded.version);
    }
    let argv = rewrite_argv(&recorded.argv, &a.out);
    let cli = Cli::try_parse_from(std::iter::once("hso".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Failure::Input(format!("{}: recorded arguments: {e}", a.report.display())))?;
    let name = match &cli.command {
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Fewshot(_) => "fewshot",
        Command::Bench(_) => "bench",
        Command::Gradcheck(_) => "gradcheck",
        Command::Rerun(_) => "rerun",
    };
    if name != recorded.subcommand {
        return Err(Failure::Input(format!(
            "manifest names {} but its arguments run {name}",
            recorded.subcommand
        )));
    }
    run(cli, argv, &Context::replay(recorded))
}
