use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use levt_core::data::{corrupt, make_synthetic_corpus, write_lines, TextCorpus};
use levt_core::decode::{
    decode_batch, iteration_stats, write_trace, DecodeConfig, IterationStats, OracleHints,
};
use levt_core::metrics::{corpus_bleu, exact_match};
use levt_core::model::checkpoint::{read_manifest, CheckpointMeta, ModelKind};
use levt_core::model::{ArTeacher, EarlyExit, LevT, ModelConfig, SharingMode};
use levt_core::train::{prepare_targets, train_teacher, ExpertKind, TrainEvent, Trainer};
use levt_core::vocab::{TokenSeq, Vocab, UNK};
use levt_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{ModelFamily, RunConfig, TaskKind, SEED_ENV};
use crate::error::{CliError, CliResult};
use crate::oracle_check::oracle_check;

#[derive(Debug, Parser)]
#[command(
    name = "levt",
    version,
    about = "Train, decode and evaluate edit-based sequence models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train a model from a corpus.
    Train(TrainArgs),
    /// Decode an input file with a checkpoint.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Compare the edit oracles with brute-force search.
    OracleTest(OracleArgs),
    /// Latency and quality across early-exit settings.
    Bench(BenchArgs),
    /// Write a synthetic corpus.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus prefix: reads `<prefix>.src`, `.tgt` and, to refine, `.init`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation corpus prefix; enables best-checkpoint selection.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Falls back to the LEVT_SEED environment variable.
    #[arg(long)]
    pub seed: Option<u64>,
    /// generate or refine.
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// levt or autoregressive.
    #[arg(long)]
    pub family: Option<ModelFamily>,
    /// Model preset (desk, base) applied before other model flags.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Backbone sharing: all, plh_tok, ins_del or none.
    #[arg(long)]
    pub sharing: Option<SharingMode>,
    /// Deletion and placeholder head depths, e.g. `1-2`.
    #[arg(long)]
    pub early_exit: Option<EarlyExit>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate, reached after the warmup steps.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Deletion inputs are always the initial sequence.
    #[arg(long)]
    pub dae: bool,
    /// oracle or distill.
    #[arg(long)]
    pub expert: Option<String>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Teacher beam width for distilled targets.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Where distilled targets are cached between runs.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sources for conditional models, initial sequences otherwise.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Initial sequences; switches to refinement.
    #[arg(long)]
    pub init_file: Option<PathBuf>,
    #[arg(long)]
    pub ref_file: Option<PathBuf>,
    /// none, deletion or deletion+placeholder; needs --ref-file.
    #[arg(long, default_value = "none")]
    pub oracle_hints: OracleHints,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 10)]
    pub max_iter: usize,
    #[arg(long)]
    pub early_exit: Option<EarlyExit>,
    /// JSON-lines record of every decoding pass.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Beam width for autoregressive checkpoints.
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Map unknown input tokens to <unk> instead of failing.
    #[arg(long)]
    pub allow_unk: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 5)]
    pub max_len: usize,
    #[arg(long, default_value_t = 3)]
    pub alphabet: usize,
    /// Run against a deliberately broken distance to check the detector.
    #[arg(long)]
    pub mutate: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub init_file: Option<PathBuf>,
    /// Comma-separated early-exit pairs; every pair when omitted.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<EarlyExit>,
    #[arg(long, default_value_t = 10)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Only the first N inputs.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub allow_unk: bool,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// copy, reverse, sort or toy-translate.
    #[arg(long)]
    pub task: levt_core::data::SynthTask,
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub valid: usize,
    #[arg(long, default_value_t = 1000)]
    pub test: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write `.init` files of corrupted targets.
    #[arg(long)]
    pub refine: bool,
    #[arg(long, default_value_t = 0.2)]
    pub drop: f64,
    #[arg(long, default_value_t = 0.1)]
    pub insert: f64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::OracleTest(a) => cmd_oracle_test(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::GenSynth(a) => cmd_gen_synth(&a),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serialisable report"));
}

/// Lines of a text file; unlike corpus files these may be empty.
fn read_text_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Encodes with the model vocabulary; unknown tokens are an artifact
/// mismatch unless explicitly allowed.
fn encode_lines(vocab: &Vocab, lines: &[String], allow_unk: bool, path: &Path) -> CliResult<Vec<TokenSeq>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = vocab.encode(l)?;
            if !allow_unk && s.interior().contains(&UNK) && !l.split_whitespace().any(|t| t == "<unk>") {
                let unknown: Vec<&str> = l.split_whitespace().filter(|t| vocab.id(t).is_none()).collect();
                return Err(CliError::incompatible(format!(
                    "{}:{}: tokens {unknown:?} are not in the model vocabulary",
                    path.display(),
                    i + 1
                )));
            }
            Ok(s)
        })
        .collect()
}

pub fn resolve_train_config(a: &TrainArgs) -> CliResult<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.preset {
        let keep = c.model.clone();
        c.model = ModelConfig {
            conditional: keep.conditional,
            ..ModelConfig::preset(p)?
        };
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.train.clone().map(Some), c.data.train);
    set!(a.valid.clone().map(Some), c.data.valid);
    set!(a.out_dir.clone().map(Some), c.out_dir);
    set!(a.seed.map(Some), c.seed);
    set!(a.task, c.task);
    set!(a.family, c.family);
    set!(a.d_model, c.model.d_model);
    if let Some(d) = a.d_model {
        c.model.d_hidden = 4 * d;
    }
    set!(a.layers, c.model.n_layers);
    set!(a.k_max, c.model.k_max);
    set!(a.sharing, c.model.sharing);
    set!(a.early_exit.map(Some), c.model.early_exit);
    set!(a.steps, c.train.steps);
    set!(a.batch_size, c.train.batch_size);
    set!(a.lr, c.train.optim.peak_lr);
    set!(a.warmup, c.train.optim.warmup_steps);
    set!(a.log_every, c.train.log_every);
    set!(a.eval_every, c.train.eval_every);
    set!(a.alpha, c.train.rollin.alpha);
    set!(a.beta, c.train.rollin.beta);
    if a.dae {
        c.train.rollin.dae_mode = true;
    }
    if let Some(e) = &a.expert {
        c.expert.kind = match e.as_str() {
            "oracle" => ExpertKind::Oracle,
            "distill" => ExpertKind::Distill,
            other => {
                return Err(CliError::usage(format!(
                    "unknown expert {other:?} (oracle, distill)"
                )))
            }
        };
    }
    set!(a.teacher.clone().map(Some), c.expert.teacher);
    set!(a.beam, c.expert.beam);
    set!(a.cache_dir.clone().map(Some), c.expert.cache_dir);
    c.resolve_seed()?;
    c.validate()?;
    Ok(c)
}

struct TrainLog {
    file: BufWriter<File>,
}

impl TrainLog {
    fn write(&mut self, record: &serde_json::Value) -> CliResult<()> {
        let line = record.to_string();
        log::info!("{line}");
        writeln!(self.file, "{line}")
            .map_err(|e| CliError::failure(format!("cannot write training log: {e}")))
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_train_config(a)?;
    let train_prefix = cfg.data.train.as_ref().expect("validated");
    let mut train_text = TextCorpus::load(train_prefix)?;
    let mut valid_text = cfg.data.valid.as_ref().map(|p| TextCorpus::load(p)).transpose()?;
    if cfg.task == TaskKind::Generate {
        train_text.inits = None;
        if let Some(v) = valid_text.as_mut() {
            v.inits = None;
        }
    }
    if train_text.is_empty() {
        return Err(CliError::usage(format!(
            "training corpus {} is empty",
            train_prefix.display()
        )));
    }
    let vocab = match (&cfg.expert.kind, &cfg.expert.teacher) {
        (ExpertKind::Distill, Some(t)) => Vocab::from_surfaces(read_manifest(t)?.vocab)?,
        _ => Vocab::build(train_text.all_lines(), cfg.data.vocab_min_count)?,
    };
    let train_pairs = train_text.encode(&vocab)?;
    let valid_pairs = valid_text.as_ref().map(|v| v.encode(&vocab)).transpose()?;

    let out_dir = cfg.out_dir.clone().expect("validated");
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out_dir.display())))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())
        .map_err(|e| CliError::failure(format!("cannot write config: {e}")))?;
    let log_path = out_dir.join("train.log");
    let mut log = TrainLog {
        file: BufWriter::new(
            File::create(&log_path).map_err(|e| CliError::failure(format!("{}: {e}", log_path.display())))?,
        ),
    };
    log.write(&json!({
        "event": "start",
        "family": cfg.family,
        "train_pairs": train_pairs.len(),
        "valid_pairs": valid_pairs.as_ref().map_or(0, Vec::len),
        "vocab_size": vocab.len(),
        "seed": cfg.train.seed,
    }))?;

    match cfg.family {
        ModelFamily::Autoregressive => {
            let mut teacher = ArTeacher::new(&cfg.model, vocab, cfg.train.seed)?;
            let mut pending = Ok(());
            train_teacher(&mut teacher, &train_pairs, &cfg.train, &mut |l| {
                if pending.is_ok() {
                    pending = log.write(&json!({"event": "train", "log": l}));
                }
            })?;
            pending?;
            let mut metrics = Vec::new();
            if let Some(v) = &valid_pairs {
                let n = v.len().min(cfg.train.eval_size.max(1));
                let sources: Vec<TokenSeq> = v[..n].iter().map(|p| p.source.clone()).collect();
                let max_len = sources.iter().map(|s| 2 * s.len() + 10).max().unwrap_or(10);
                let hyps = teacher.beam_decode(&sources, cfg.expert.beam, max_len)?;
                let h: Vec<String> = hyps.iter().map(|s| teacher.vocab.decode(s)).collect();
                let r: Vec<String> = v[..n].iter().map(|p| teacher.vocab.decode(&p.target)).collect();
                let values = BTreeMap::from([
                    ("exact_match".to_owned(), exact_match(&h, &r)),
                    ("bleu".to_owned(), corpus_bleu(&h, &r).bleu),
                ]);
                log.write(&json!({"event": "eval", "step": cfg.train.steps, "metrics": values}))?;
                metrics.push(levt_core::model::checkpoint::MetricPoint {
                    step: cfg.train.steps,
                    values,
                });
            }
            let last = out_dir.join("last.ckpt");
            teacher.save(
                &last,
                &CheckpointMeta {
                    step: cfg.train.steps,
                    metrics,
                },
            )?;
            log.write(&json!({"event": "done", "last": last}))?;
        }
        ModelFamily::Levt => {
            let train_pairs = prepare_targets(&train_pairs, &cfg.expert)?;
            let model = LevT::new(&cfg.model, vocab, cfg.train.seed)?;
            let mut trainer = Trainer::new(model, &cfg.train)?;
            let mut pending = Ok(());
            let result = trainer.run(&train_pairs, valid_pairs.as_deref(), &mut |e| {
                if pending.is_err() {
                    return;
                }
                pending = match e {
                    TrainEvent::Log(l) => log.write(&json!({"event": "train", "log": l})),
                    TrainEvent::Eval(step, s) => {
                        log.write(&json!({"event": "eval", "step": step, "metrics": s}))
                    }
                };
            });
            pending?;
            let meta = CheckpointMeta {
                step: trainer.step_count(),
                metrics: trainer.history().to_vec(),
            };
            if let Err(e @ Error::Diverged { .. }) = result {
                let dump = out_dir.join("diverged.ckpt");
                trainer.model().save(&dump, &meta)?;
                log.write(&json!({"event": "diverged", "detail": e.to_string(), "dump": dump}))?;
                return Err(e.into());
            }
            result?;
            let last = out_dir.join("last.ckpt");
            trainer.model().save(&last, &meta)?;
            let mut done = json!({"event": "done", "last": last, "step": meta.step});
            if let Some((em, best)) = trainer.best() {
                let path = out_dir.join("best.ckpt");
                best.save(&path, &meta)?;
                done["best"] = json!(path);
                done["best_exact_match"] = json!(em);
            }
            log.write(&done)?;
        }
    }
    Ok(())
}

fn decode_config(
    max_iter: usize,
    gamma: f64,
    early_exit: Option<EarlyExit>,
    hints: OracleHints,
) -> CliResult<DecodeConfig> {
    let cfg = DecodeConfig {
        max_iter,
        gamma,
        early_exit,
        oracle_hints: hints,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Aligned sources, initial sequences and references for a decoding run.
struct DecodeInputs {
    sources: Option<Vec<TokenSeq>>,
    inits: Vec<TokenSeq>,
    references: Option<Vec<TokenSeq>>,
}

fn load_decode_inputs(
    model: &LevT,
    input: &Path,
    init_file: Option<&Path>,
    ref_file: Option<&Path>,
    allow_unk: bool,
) -> CliResult<DecodeInputs> {
    let lines = read_text_lines(input)?;
    let encoded = encode_lines(&model.vocab, &lines, allow_unk, input)?;
    let (sources, mut inits) = if model.config().conditional {
        (Some(encoded), vec![TokenSeq::empty(); lines.len()])
    } else {
        if init_file.is_some() {
            return Err(CliError::usage(
                "unconditional models read initial sequences from --input",
            ));
        }
        (None, encoded)
    };
    if let Some(p) = init_file {
        let l = read_text_lines(p)?;
        if l.len() != lines.len() {
            return Err(CliError::usage(format!(
                "{} has {} lines, input has {}",
                p.display(),
                l.len(),
                lines.len()
            )));
        }
        inits = encode_lines(&model.vocab, &l, allow_unk, p)?;
    }
    let references = match ref_file {
        Some(p) => {
            let l = read_text_lines(p)?;
            if l.len() != lines.len() {
                return Err(CliError::usage(format!(
                    "{} has {} lines, input has {}",
                    p.display(),
                    l.len(),
                    lines.len()
                )));
            }
            Some(encode_lines(&model.vocab, &l, true, p)?)
        }
        None => None,
    };
    Ok(DecodeInputs {
        sources,
        inits,
        references,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))
}

fn cmd_decode(a: &DecodeArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.checkpoint)?;
    if manifest.kind == ModelKind::Autoregressive {
        if a.trace.is_some() || a.init_file.is_some() || a.oracle_hints != OracleHints::None {
            return Err(CliError::usage(
                "autoregressive checkpoints support plain beam decoding only",
            ));
        }
        let (teacher, _) = ArTeacher::load(&a.checkpoint)?;
        let lines = read_text_lines(&a.input)?;
        let sources = encode_lines(&teacher.vocab, &lines, a.allow_unk, &a.input)?;
        let max_len = sources.iter().map(|s| 2 * s.len() + 10).max().unwrap_or(10);
        let hyps = teacher.beam_decode(&sources, a.beam, max_len)?;
        let out: Vec<String> = hyps.iter().map(|s| teacher.vocab.decode(s)).collect();
        write_lines(&a.output, &out)?;
        print_json(&json!({"sequences": out.len()}));
        return Ok(());
    }
    let (model, _) = LevT::load(&a.checkpoint)?;
    if a.oracle_hints != OracleHints::None && a.ref_file.is_none() {
        return Err(CliError::usage("--oracle-hints needs --ref-file"));
    }
    let cfg = decode_config(a.max_iter, a.gamma, a.early_exit, a.oracle_hints)?;
    let inputs = load_decode_inputs(
        &model,
        &a.input,
        a.init_file.as_deref(),
        a.ref_file.as_deref(),
        a.allow_unk,
    )?;
    let mut output = create(&a.output)?;
    let mut trace = a.trace.as_deref().map(create).transpose()?;
    let mut outcomes = Vec::with_capacity(inputs.inits.len());
    for start in (0..inputs.inits.len()).step_by(64) {
        let end = (start + 64).min(inputs.inits.len());
        let src = inputs.sources.as_ref().map(|s| &s[start..end]);
        let refs = inputs.references.as_ref().map(|r| &r[start..end]);
        outcomes.extend(decode_batch(&model, src, &inputs.inits[start..end], refs, &cfg)?);
    }
    let io = |e: std::io::Error| CliError::failure(format!("write failed: {e}"));
    for (i, o) in outcomes.iter().enumerate() {
        writeln!(output, "{}", model.vocab.decode(&o.output)).map_err(io)?;
        if let Some(t) = trace.as_mut() {
            write_trace(t, i, &o.trace, &model.vocab)?;
        }
    }
    output.flush().map_err(io)?;
    if let Some(t) = trace.as_mut() {
        t.flush().map_err(io)?;
    }
    let stats = IterationStats::from_outcomes(&outcomes, &[]);
    print_json(&json!({
        "sequences": stats.count,
        "mean_iterations": stats.mean_iterations,
        "reasons": stats.reasons,
    }));
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub lines: usize,
    pub bleu: f64,
    pub exact_match: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<IterationStats>,
}

pub fn eval_files(hyp: &Path, reference: &Path) -> CliResult<EvalReport> {
    let h = read_text_lines(hyp)?;
    let r = read_text_lines(reference)?;
    if h.len() != r.len() {
        return Err(CliError::usage(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        )));
    }
    let b = corpus_bleu(&h, &r);
    Ok(EvalReport {
        lines: h.len(),
        bleu: b.bleu,
        exact_match: exact_match(&h, &r),
        precisions: b.precisions,
        brevity_penalty: b.brevity_penalty,
        iterations: None,
    })
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    print_json(&eval_files(&a.hyp, &a.reference)?);
    Ok(())
}

fn cmd_oracle_test(a: &OracleArgs) -> CliResult<()> {
    let report = oracle_check(a.max_len, a.alphabet, a.mutate)?;
    print_json(&report);
    if report.passed {
        Ok(())
    } else {
        Err(CliError::failure(format!(
            "{} distance and {} deletion mismatches over {} pairs",
            report.distance_mismatches, report.deletion_mismatches, report.pairs
        )))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub early_exit: String,
    pub bleu: f64,
    pub exact_match: f64,
    pub mean_latency_ms: f64,
    pub mean_iterations: f64,
}

pub fn bench_rows(model: &LevT, a: &BenchArgs) -> CliResult<Vec<BenchRow>> {
    let mut inputs = load_decode_inputs(model, &a.input, a.init_file.as_deref(), None, a.allow_unk)?;
    let refs = read_text_lines(&a.reference)?;
    if refs.len() != inputs.inits.len() {
        return Err(CliError::usage("reference and input line counts differ"));
    }
    let n = a.limit.unwrap_or(refs.len()).min(refs.len());
    inputs.inits.truncate(n);
    if let Some(s) = inputs.sources.as_mut() {
        s.truncate(n);
    }
    let layers = model.config().n_layers;
    let grid: Vec<EarlyExit> = if a.grid.is_empty() {
        (1..=layers)
            .flat_map(|del| (1..=layers).map(move |plh| EarlyExit { del, plh }))
            .collect()
    } else {
        a.grid.clone()
    };
    let mut rows = Vec::new();
    for e in grid {
        let cfg = decode_config(a.max_iter, a.gamma, Some(e), OracleHints::None)?;
        let (outcomes, stats) = iteration_stats(model, inputs.sources.as_deref(), &inputs.inits, &cfg)?;
        let hyps: Vec<String> = outcomes.iter().map(|o| model.vocab.decode(&o.output)).collect();
        rows.push(BenchRow {
            early_exit: e.to_string(),
            bleu: corpus_bleu(&hyps, &refs[..n]).bleu,
            exact_match: exact_match(&hyps, &refs[..n]),
            mean_latency_ms: stats.mean_latency_ms,
            mean_iterations: stats.mean_iterations,
        });
    }
    Ok(rows)
}

fn cmd_bench(a: &BenchArgs) -> CliResult<()> {
    let (model, _) = LevT::load(&a.checkpoint)?;
    let rows = bench_rows(&model, a)?;
    println!("early_exit\tbleu\texact_match\tmean_latency_ms\tmean_iterations");
    for r in rows {
        println!(
            "{}\t{:.2}\t{:.4}\t{:.3}\t{:.3}",
            r.early_exit, r.bleu, r.exact_match, r.mean_latency_ms, r.mean_iterations
        );
    }
    Ok(())
}

fn seed_or_env(seed: Option<u64>) -> CliResult<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Err(CliError::usage(format!(
            "no seed: pass --seed or export {SEED_ENV}"
        ))),
    }
}

pub fn cmd_gen_synth(a: &GenSynthArgs) -> CliResult<()> {
    let seed = seed_or_env(a.seed)?;
    if a.min_len == 0 || a.min_len > a.max_len {
        return Err(CliError::usage("lengths must satisfy 1 <= min_len <= max_len"));
    }
    let total = a.train + a.valid + a.test;
    let pairs = make_synthetic_corpus(a.task, a.vocab_size, a.min_len..=a.max_len, total, seed)?;
    let mut corpus = TextCorpus::from_pairs(&pairs);
    if a.refine {
        let vocab = Vocab::build(corpus.all_lines(), 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
        let mut inits = Vec::with_capacity(total);
        for t in &corpus.targets {
            let target = vocab.encode(t)?;
            // Corpus lines may not be empty, so redraw a fully dropped one.
            let init = loop {
                let c = corrupt(&target, a.drop, a.insert, &vocab, &mut rng);
                if !c.is_empty() {
                    break c;
                }
            };
            inits.push(vocab.decode(&init));
        }
        corpus.inits = Some(inits);
    }
    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let mut start = 0;
    let mut written = BTreeMap::new();
    for (name, n) in [("train", a.train), ("valid", a.valid), ("test", a.test)] {
        let slice = |v: &[String]| v[start..start + n].to_vec();
        let part = TextCorpus {
            sources: slice(&corpus.sources),
            targets: slice(&corpus.targets),
            inits: corpus.inits.as_deref().map(slice),
        };
        let prefix = a.out_dir.join(name);
        part.save(&prefix)?;
        written.insert(name, prefix);
        start += n;
    }
    print_json(&json!({"task": format!("{:?}", a.task), "seed": seed, "files": written}));
    Ok(())
}

#[cfg(test)]
mod tests {
    use levt_core::data::with_extension;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("c");
        write_lines(&with_extension(&prefix, "src"), &["a b"]).unwrap();
        write_lines(&with_extension(&prefix, "tgt"), &["a b"]).unwrap();
        let cfg_path = dir.path().join("run.toml");
        fs::write(
            &cfg_path,
            format!(
                "seed = 4\nout_dir = \"{}\"\n[data]\ntrain = \"{}\"\n[train]\nsteps = 7\nbatch_size = 3\n",
                dir.path().join("out").display(),
                prefix.display()
            ),
        )
        .unwrap();
        let args = TrainArgs {
            config: Some(cfg_path),
            steps: Some(11),
            ..TrainArgs::default()
        };
        let c = resolve_train_config(&args).unwrap();
        assert_eq!(c.train.steps, 11);
        assert_eq!(c.train.batch_size, 3);
        assert_eq!(c.train.seed, 4);
    }
}
