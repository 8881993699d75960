//! Imitation training of the edit policies and the teacher.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use levt_tensor::graph::softmax_in_place;
use levt_tensor::{adam_step, AdamConfig, AdamState, Dropout, Gradients, Graph, Scalar, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Batcher, Pair};
use crate::decode::{decode_batch, DecodeConfig};
use crate::edit::{
    apply_deletion, apply_fill, apply_placeholders, oracle_deletion, oracle_insertion, random_deletion,
    TokenFill,
};
use crate::error::{io_err, Error, Result};
use crate::metrics::{corpus_bleu, exact_match};
use crate::model::checkpoint::MetricPoint;
use crate::model::levt::id_slices;
use crate::model::{ArTeacher, Context, Head, LevT, LevTNet};
use crate::vocab::{TokenId, TokenSeq, BOS, EOS, PAD, PLH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollInConfig {
    /// Probability that the deletion input is the initial sequence.
    pub alpha: f64,
    /// Probability that the insertion input is the initial sequence reduced
    /// by oracle deletion (otherwise the target with random word drops).
    pub beta: f64,
    /// Never feed model-made fills to the deletion policy; same as alpha = 1.
    pub dae_mode: bool,
    /// Softmax temperature for sampled fills. Above 1 so that a confident
    /// model still shows its deletion policy some wrong tokens.
    pub fill_temperature: f64,
}

impl Default for RollInConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            dae_mode: false,
            fill_temperature: 2.0,
        }
    }
}

impl RollInConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.fill_temperature.is_nan() || self.fill_temperature <= 0.0 {
            return Err(Error::Config("fill temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.dae_mode {
            1.0
        } else {
            self.alpha
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            peak_lr: a.peak_lr,
            warmup_steps: a.warmup_steps,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            max_grad_norm: a.max_grad_norm,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    #[default]
    Oracle,
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub kind: ExpertKind,
    pub teacher: Option<PathBuf>,
    pub beam: usize,
    /// Where distilled targets are cached; no caching when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            kind: ExpertKind::Oracle,
            teacher: None,
            beam: 4,
            cache_dir: None,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ExpertKind::Distill && self.teacher.is_none() {
            return Err(Error::Config("distillation needs a teacher checkpoint".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between log records; each record averages the steps since the
    /// previous one.
    pub log_every: u64,
    /// Steps between validations; the last step is always validated, so 0
    /// validates only at the end.
    pub eval_every: u64,
    /// Validation examples used per evaluation.
    pub eval_size: usize,
    pub optim: OptimConfig,
    pub rollin: RollInConfig,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: crate::data::DEFAULT_BATCH_SIZE,
            seed: 0,
            log_every: 100,
            eval_every: 1000,
            eval_size: 200,
            optim: OptimConfig::default(),
            rollin: RollInConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if self.optim.peak_lr.is_nan() || self.optim.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        self.rollin.validate()?;
        self.decode.validate()
    }
}

/// Insertion roll-in: the initial sequence cut down to its longest common
/// subsequence with the target when `u < beta`, otherwise the target with
/// random word drops. Returns the state and whether the first branch ran.
pub fn rollin_insertion<R: Rng + ?Sized>(
    y0: &TokenSeq,
    target: &TokenSeq,
    beta: f64,
    rng: &mut R,
) -> Result<(TokenSeq, bool)> {
    if rng.random::<f64>() < beta {
        Ok((apply_deletion(y0, &oracle_deletion(y0, target))?, true))
    } else {
        Ok((apply_deletion(target, &random_deletion(target, rng))?, false))
    }
}

fn fill_forbidden(id: usize) -> bool {
    matches!(id as TokenId, PAD | BOS | EOS | PLH)
}

/// Samples one token per row of `logits` (a `rows × |V|` buffer) at the given
/// temperature, never choosing structural ids.
pub fn sample_fill<R: Rng + ?Sized>(
    logits: &[f32],
    vocab_size: usize,
    temperature: f64,
    rng: &mut R,
) -> TokenFill {
    TokenFill(
        logits
            .chunks(vocab_size)
            .map(|row| {
                let mut p: Vec<f64> = row.iter().map(|&x| x as f64 / temperature).collect();
                for (i, x) in p.iter_mut().enumerate() {
                    if fill_forbidden(i) {
                        *x = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(&mut p);
                WeightedIndex::new(&p)
                    .expect("some content token has mass")
                    .sample(rng) as TokenId
            })
            .collect(),
    )
}

/// Deletion roll-in: the initial sequence when `v < alpha`, otherwise
/// `y_tok` (the insertion state with oracle placeholders) filled by sampling
/// the model's token head, whose logits for `y_tok`'s placeholders are given.
pub fn rollin_deletion<R: Rng + ?Sized>(
    y0: &TokenSeq,
    y_tok: &TokenSeq,
    token_logits: &[f32],
    vocab_size: usize,
    rollin: &RollInConfig,
    rng: &mut R,
) -> Result<TokenSeq> {
    if rng.random::<f64>() < rollin.effective_alpha() {
        return Ok(y0.clone());
    }
    let fill = sample_fill(token_logits, vocab_size, rollin.fill_temperature, rng);
    apply_fill(y_tok, &fill)
}

/// Oracle targets for the insertion heads of a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InsertionTargets {
    pub y_ins: Vec<TokenSeq>,
    /// Placeholder counts for every slot of every `y_ins`, concatenated.
    pub plh: Vec<usize>,
    /// `y_ins` with the oracle placeholders inserted.
    pub y_tok: Vec<TokenSeq>,
    /// Tokens for every placeholder of every `y_tok`, concatenated.
    pub tok: Vec<usize>,
    /// Oracle tokens dropped because a gap exceeded `k_max`.
    pub clipped: usize,
}

impl InsertionTargets {
    pub fn build(y_ins: Vec<TokenSeq>, targets: &[TokenSeq], k_max: usize) -> Result<Self> {
        let mut out = Self::default();
        for (y, t) in y_ins.into_iter().zip(targets) {
            let o = oracle_insertion(&y, t, k_max)?;
            out.plh.extend(&o.plan.0);
            out.tok.extend(o.fill.0.iter().map(|&x| x as usize));
            out.y_tok.push(apply_placeholders(&y, &o.plan, k_max)?);
            out.clipped += o.clipped;
            out.y_ins.push(y);
        }
        Ok(out)
    }
}

/// Mean NLL of the oracle placeholder counts and of the oracle tokens.
/// Also returns the token logits so the caller can sample fills from them.
pub fn insertion_losses<S: Scalar>(
    net: &LevTNet,
    g: &mut Graph<'_, S>,
    ctx: Option<&Context>,
    targets: &InsertionTargets,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Var, Var)> {
    let smoothing = net.config.label_smoothing;
    let early = net.config.early_exit();
    let ins = id_slices(&targets.y_ins);
    let h = net.head_states(g, Head::Placeholder, &ins, ctx, early.plh, dropout)?;
    let plh_logits = net.placeholder_logits(g, h, &ins)?;
    let l_plh = g.cross_entropy(plh_logits, &targets.plh, smoothing)?;
    let tok = id_slices(&targets.y_tok);
    let h = net.head_states(g, Head::Token, &tok, ctx, net.config.n_layers, dropout)?;
    let tok_logits = net.token_logits(g, h, &tok)?;
    let l_tok = g.cross_entropy(tok_logits, &targets.tok, smoothing)?;
    Ok((l_plh, l_tok, tok_logits))
}

/// Mean NLL of the oracle deletion mask over interior positions of `y_del`.
pub fn deletion_loss<S: Scalar>(
    net: &LevTNet,
    g: &mut Graph<'_, S>,
    ctx: Option<&Context>,
    y_del: &[TokenSeq],
    targets: &[TokenSeq],
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let mut gold = Vec::new();
    for (y, t) in y_del.iter().zip(targets) {
        let mask = oracle_deletion(y, t);
        gold.extend(mask.0[1..mask.0.len() - 1].iter().map(|&d| d as usize));
    }
    let ids = id_slices(y_del);
    let h = net.head_states(g, Head::Deletion, &ids, ctx, net.config.early_exit().del, dropout)?;
    let logits = net.deletion_logits(g, h, &ids)?;
    Ok(g.cross_entropy(logits, &gold, net.config.label_smoothing)?)
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub plh: Var,
    pub tok: Var,
    pub del: Var,
    pub total: Var,
}

/// The three imitation losses for fixed roll-in states. `y_ins` must be
/// subsequences of the targets.
pub fn training_losses<S: Scalar>(
    net: &LevTNet,
    g: &mut Graph<'_, S>,
    sources: Option<&[TokenSeq]>,
    y_ins: &[TokenSeq],
    y_del: &[TokenSeq],
    targets: &[TokenSeq],
) -> Result<Losses> {
    let mut dropout = Dropout::off();
    let ctx = match sources {
        Some(s) => Some(net.encode(g, &id_slices(s), &mut dropout)?),
        None => None,
    };
    let ins = InsertionTargets::build(y_ins.to_vec(), targets, net.config.k_max)?;
    let (plh, tok, _) = insertion_losses(net, g, ctx.as_ref(), &ins, &mut dropout)?;
    let del = deletion_loss(net, g, ctx.as_ref(), y_del, targets, &mut dropout)?;
    let partial = g.add(plh, tok)?;
    let total = g.add(partial, del)?;
    Ok(Losses { plh, tok, del, total })
}

/// Losses and optimiser statistics of one update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub l_del: f64,
    pub l_plh: f64,
    pub l_tok: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Cumulative count of updates whose gradient norm was clipped.
    pub clip_events: u64,
    /// Cumulative count of oracle tokens dropped by the `k_max` cap.
    pub oracle_clipped: u64,
}

impl StepLog {
    fn mean(records: &[StepLog]) -> StepLog {
        let n = records.len().max(1) as f64;
        let last = records.last().cloned().unwrap_or_default();
        let avg = |f: fn(&StepLog) -> f64| records.iter().map(f).sum::<f64>() / n;
        StepLog {
            loss: avg(|r| r.loss),
            l_del: avg(|r| r.l_del),
            l_plh: avg(|r| r.l_plh),
            l_tok: avg(|r| r.l_tok),
            grad_norm: avg(|r| r.grad_norm),
            ..last
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalSummary {
    pub exact_match: f64,
    pub bleu: f64,
    pub mean_iterations: f64,
}

/// Decodes `pairs` (from their initial sequences) and scores the outputs.
pub fn evaluate(model: &LevT, pairs: &[Pair], cfg: &DecodeConfig) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Ok(EvalSummary::default());
    }
    let mut hyps = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    let mut iters = 0usize;
    for chunk in pairs.chunks(64) {
        let sources: Vec<TokenSeq> = chunk.iter().map(|p| p.source.clone()).collect();
        let inits: Vec<TokenSeq> = chunk.iter().map(Pair::initial).collect();
        let srcs = model.config().conditional.then_some(sources.as_slice());
        for (o, p) in decode_batch(model, srcs, &inits, None, cfg)?
            .into_iter()
            .zip(chunk)
        {
            iters += o.trace.iteration_count;
            hyps.push(model.vocab.decode(&o.output));
            refs.push(model.vocab.decode(&p.target));
        }
    }
    Ok(EvalSummary {
        exact_match: exact_match(&hyps, &refs),
        bleu: corpus_bleu(&hyps, &refs).bleu,
        mean_iterations: iters as f64 / pairs.len() as f64,
    })
}

/// Owns the model and optimiser state of one training run.
pub struct Trainer {
    model: LevT,
    best: Option<(f64, LevT)>,
    adam: AdamState<f32>,
    adam_cfg: AdamConfig,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    clip_events: u64,
    oracle_clipped: u64,
    history: Vec<MetricPoint>,
}

impl Trainer {
    pub fn new(model: LevT, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            best: None,
            adam,
            adam_cfg: cfg.optim.adam(),
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0d0),
            clip_events: 0,
            oracle_clipped: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &LevT {
        &self.model
    }

    pub fn into_model(self) -> LevT {
        self.model
    }

    /// The best validated model so far and its exact-match rate.
    pub fn best(&self) -> Option<(f64, &LevT)> {
        self.best.as_ref().map(|(m, l)| (*m, l))
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step()
    }

    pub fn history(&self) -> &[MetricPoint] {
        &self.history
    }

    /// One update on `batch`, whose targets are already the expert's.
    pub fn step(&mut self, batch: &[&Pair]) -> Result<StepLog> {
        let net = &self.model.net;
        let k_max = net.config.k_max;
        let mut y_ins = Vec::with_capacity(batch.len());
        let targets: Vec<TokenSeq> = batch.iter().map(|p| p.target.clone()).collect();
        for p in batch {
            y_ins.push(rollin_insertion(&p.initial(), &p.target, self.cfg.rollin.beta, &mut self.rng)?.0);
        }
        let ins = InsertionTargets::build(y_ins, &targets, k_max)?;
        self.oracle_clipped += ins.clipped as u64;
        if ins.clipped > 0 {
            log::debug!(
                "{} oracle insertions exceeded k_max = {k_max} and were dropped",
                ins.clipped
            );
        }

        let mut g = Graph::with_params(&self.model.params);
        let mut dropout = Dropout {
            p: net.config.dropout,
            rng: Some(&mut self.dropout_rng as &mut dyn RngCore),
        };
        let ctx = if net.config.conditional {
            let sources: Vec<TokenSeq> = batch.iter().map(|p| p.source.clone()).collect();
            Some(net.encode(&mut g, &id_slices(&sources), &mut dropout)?)
        } else {
            None
        };
        let (l_plh, l_tok, tok_logits) = insertion_losses(net, &mut g, ctx.as_ref(), &ins, &mut dropout)?;

        let v = net.vocab_size;
        let logits = g.value(tok_logits).data();
        let mut y_del = Vec::with_capacity(batch.len());
        let mut row = 0;
        for (p, y_tok) in batch.iter().zip(&ins.y_tok) {
            let n = y_tok.placeholder_count();
            let rows = &logits[row * v..(row + n) * v];
            row += n;
            y_del.push(rollin_deletion(
                &p.initial(),
                y_tok,
                rows,
                v,
                &self.cfg.rollin,
                &mut self.rng,
            )?);
        }
        let l_del = deletion_loss(net, &mut g, ctx.as_ref(), &y_del, &targets, &mut dropout)?;
        let partial = g.add(l_plh, l_tok)?;
        let total = g.add(partial, l_del)?;

        let item = |x: Var| g.value(x).item() as f64;
        let mut log = StepLog {
            loss: item(total),
            l_del: item(l_del),
            l_plh: item(l_plh),
            l_tok: item(l_tok),
            ..StepLog::default()
        };
        let step = self.adam.step() + 1;
        if !log.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {}", log.loss),
            });
        }
        let mut grads = Gradients::new();
        g.backward_into(total, &mut grads)?;
        drop(g);
        if !grads.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        log.grad_norm = grads.global_norm() as f64;
        if self.adam_cfg.max_grad_norm.is_some_and(|m| log.grad_norm > m) {
            self.clip_events += 1;
        }
        log.lr = adam_step(&mut self.model.params, &grads, &mut self.adam, &self.adam_cfg);
        log.step = self.adam.step();
        log.clip_events = self.clip_events;
        log.oracle_clipped = self.oracle_clipped;
        Ok(log)
    }

    /// Validates on `valid` and keeps the model if it is at least as good as
    /// the best so far; ties go to the later, longer-trained model.
    pub fn validate(&mut self, valid: &[Pair]) -> Result<EvalSummary> {
        let n = valid.len().min(self.cfg.eval_size.max(1));
        let summary = evaluate(&self.model, &valid[..n], &self.cfg.decode)?;
        self.history.push(MetricPoint {
            step: self.adam.step(),
            values: [
                ("exact_match".to_owned(), summary.exact_match),
                ("bleu".to_owned(), summary.bleu),
                ("mean_iterations".to_owned(), summary.mean_iterations),
            ]
            .into(),
        });
        if self.best.as_ref().is_none_or(|(m, _)| summary.exact_match >= *m) {
            self.best = Some((summary.exact_match, self.model.clone()));
        }
        Ok(summary)
    }

    /// Runs the configured number of steps over `train`, logging averaged
    /// records every `log_every` steps and validating every `eval_every`
    /// steps and after the last one.
    pub fn run(
        &mut self,
        train: &[Pair],
        valid: Option<&[Pair]>,
        sink: &mut dyn FnMut(TrainEvent<'_>),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Usage("training corpus is empty".into()));
        }
        let mut batcher = Batcher::new(train.len(), self.cfg.batch_size, self.cfg.seed ^ 0xba7c);
        let mut window = Vec::new();
        for s in 1..=self.cfg.steps {
            let batch: Vec<&Pair> = batcher.next_batch().into_iter().map(|i| &train[i]).collect();
            window.push(self.step(&batch)?);
            if s % self.cfg.log_every == 0 || s == self.cfg.steps {
                sink(TrainEvent::Log(&StepLog::mean(&window)));
                window.clear();
            }
            if let Some(v) = valid {
                let due = self.cfg.eval_every > 0 && s % self.cfg.eval_every == 0;
                if due || s == self.cfg.steps {
                    let summary = self.validate(v)?;
                    sink(TrainEvent::Eval(s, &summary));
                }
            }
        }
        Ok(())
    }
}

pub enum TrainEvent<'a> {
    Log(&'a StepLog),
    Eval(u64, &'a EvalSummary),
}

/// Teacher-forced training of the left-to-right model.
pub fn train_teacher(
    teacher: &mut ArTeacher,
    train: &[Pair],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&StepLog),
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    let adam_cfg = cfg.optim.adam();
    let mut adam = AdamState::new(&teacher.params);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, cfg.seed ^ 0xba7c);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0d0);
    let mut clip_events = 0;
    let mut window = Vec::new();
    for s in 1..=cfg.steps {
        let idx = batcher.next_batch();
        let sources: Vec<TokenSeq> = idx.iter().map(|&i| train[i].source.clone()).collect();
        let targets: Vec<TokenSeq> = idx.iter().map(|&i| train[i].target.clone()).collect();
        let mut g = Graph::with_params(&teacher.params);
        let mut dropout = Dropout {
            p: teacher.net.config.dropout,
            rng: Some(&mut dropout_rng as &mut dyn RngCore),
        };
        let loss = teacher.net.loss(&mut g, &sources, &targets, &mut dropout)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: s,
                detail: format!("loss {value}"),
            });
        }
        let grads = g.backward(loss)?;
        drop(g);
        let grad_norm = grads.global_norm() as f64;
        if adam_cfg.max_grad_norm.is_some_and(|m| grad_norm > m) {
            clip_events += 1;
        }
        let lr = adam_step(&mut teacher.params, &grads, &mut adam, &adam_cfg);
        window.push(StepLog {
            step: s,
            loss: value,
            l_tok: value,
            lr,
            grad_norm,
            clip_events,
            ..StepLog::default()
        });
        if s % cfg.log_every == 0 || s == cfg.steps {
            sink(&StepLog::mean(&window));
            window.clear();
        }
    }
    Ok(())
}

/// Beam-search targets from a teacher, one per source, decoding each
/// distinct source once. With a cache directory, results are stored under
/// a key derived from the teacher checksum, the beam size and the sources.
pub fn distill_targets(
    teacher: &ArTeacher,
    teacher_checksum: &str,
    sources: &[TokenSeq],
    beam: usize,
    cache_dir: Option<&Path>,
) -> Result<Vec<TokenSeq>> {
    let mut hasher = Sha256::new();
    hasher.update(teacher_checksum.as_bytes());
    hasher.update(beam.to_le_bytes());
    for s in sources {
        for t in s.ids() {
            hasher.update(t.to_le_bytes());
        }
    }
    let key = hex::encode(hasher.finalize());
    let cache_path = cache_dir.map(|d| d.join(format!("distill-{}.json", &key[..16])));
    if let Some(path) = cache_path.as_ref().filter(|p| p.exists()) {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cached: Vec<TokenSeq> = serde_json::from_str(&text)?;
        if cached.len() == sources.len() {
            return Ok(cached);
        }
        log::warn!("ignoring distillation cache {} with wrong length", path.display());
    }

    let mut unique: Vec<TokenSeq> = Vec::new();
    let mut index: HashMap<&TokenSeq, usize> = HashMap::new();
    for s in sources {
        index.entry(s).or_insert_with(|| {
            unique.push(s.clone());
            unique.len() - 1
        });
    }
    let max_len = unique.iter().map(|s| 2 * s.len() + 10).max().unwrap_or(10);
    let decoded = teacher.beam_decode(&unique, beam, max_len)?;
    let out: Vec<TokenSeq> = sources.iter().map(|s| decoded[index[s]].clone()).collect();

    if let Some(path) = cache_path {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, serde_json::to_vec(&out)?).map_err(io_err(&path))?;
    }
    Ok(out)
}

/// The expert's targets for `pairs`: the references themselves for the
/// oracle expert, teacher beam outputs for distillation.
pub fn prepare_targets(pairs: &[Pair], expert: &ExpertConfig) -> Result<Vec<Pair>> {
    expert.validate()?;
    match expert.kind {
        ExpertKind::Oracle => Ok(pairs.to_vec()),
        ExpertKind::Distill => {
            let path = expert.teacher.as_ref().expect("validated");
            if !path.exists() {
                return Err(Error::Config(format!(
                    "teacher checkpoint {} not found",
                    path.display()
                )));
            }
            let (teacher, _) = ArTeacher::load(path)?;
            let checksum = crate::model::checkpoint::file_checksum(path)?;
            let sources: Vec<TokenSeq> = pairs.iter().map(|p| p.source.clone()).collect();
            let targets = distill_targets(
                &teacher,
                &checksum,
                &sources,
                expert.beam,
                expert.cache_dir.as_deref(),
            )?;
            Ok(pairs
                .iter()
                .zip(targets)
                .map(|(p, t)| Pair {
                    target: t,
                    ..p.clone()
                })
                .collect())
        }
    }
}
