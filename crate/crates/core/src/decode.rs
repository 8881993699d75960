//! Iterative decoding: delete, insert placeholders, fill, until the sequence
//! stops changing or the iteration budget runs out.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::edit::{
    apply_deletion, apply_fill, apply_placeholders, oracle_deletion, oracle_insertion, DeletionMask,
    PlaceholderPlan, TokenFill,
};
use crate::error::{Error, Result};
use crate::model::{EarlyExit, EditPolicy, HeadScores};
use crate::vocab::{TokenId, TokenSeq, Vocab, BOS, EOS, PAD, PLH};

pub const MAX_GAMMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleHints {
    #[default]
    None,
    Deletion,
    DeletionPlaceholder,
}

impl FromStr for OracleHints {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "deletion" => Ok(Self::Deletion),
            "deletion+placeholder" | "deletion_placeholder" => Ok(Self::DeletionPlaceholder),
            other => Err(Error::Config(format!(
                "unknown oracle hints {other:?} (none, deletion, deletion+placeholder)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_iter: usize,
    /// Subtracted from the score of "insert nothing" in every slot.
    pub gamma: f64,
    /// Overrides the model's early-exit depths.
    pub early_exit: Option<EarlyExit>,
    pub oracle_hints: OracleHints,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_iter: 10,
            gamma: 0.0,
            early_exit: None,
            oracle_hints: OracleHints::None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(0.0..=MAX_GAMMA).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, {MAX_GAMMA}]",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Nothing deleted and nothing inserted.
    FixedPoint,
    /// The post-deletion sequence repeated the previous iteration's.
    Loop,
    Timeout,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FixedPoint => "fixed_point",
            Self::Loop => "loop",
            Self::Timeout => "timeout",
        })
    }
}

/// One pass of the decoding loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub input: TokenSeq,
    pub deletion: DeletionMask,
    pub placeholders: PlaceholderPlan,
    pub fill: TokenFill,
    /// Placeholders dropped to respect the length limit.
    pub truncated: usize,
    /// False for the pass that detected a loop: its deletion is not applied.
    pub committed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub initial: TokenSeq,
    pub iterations: Vec<IterationRecord>,
    pub reason: Termination,
    pub iteration_count: usize,
}

impl DecodeTrace {
    /// Re-applies every committed edit to the initial sequence.
    pub fn replay(&self) -> Result<TokenSeq> {
        let mut y = self.initial.clone();
        for r in self.iterations.iter().filter(|r| r.committed) {
            let k_max = r.placeholders.0.iter().copied().max().unwrap_or(0);
            let deleted = apply_deletion(&y, &r.deletion)?;
            let with_plh = apply_placeholders(&deleted, &r.placeholders, k_max)?;
            y = apply_fill(&with_plh, &r.fill)?;
        }
        Ok(y)
    }

    /// Every intermediate state, each a well-formed sequence by construction.
    pub fn states(&self) -> Result<Vec<TokenSeq>> {
        let mut out = vec![self.initial.clone()];
        let mut y = self.initial.clone();
        for r in self.iterations.iter().filter(|r| r.committed) {
            let k_max = r.placeholders.0.iter().copied().max().unwrap_or(0);
            let deleted = apply_deletion(&y, &r.deletion)?;
            let with_plh = apply_placeholders(&deleted, &r.placeholders, k_max)?;
            y = apply_fill(&with_plh, &r.fill)?;
            out.extend([deleted, with_plh, y.clone()]);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutcome {
    pub output: TokenSeq,
    pub trace: DecodeTrace,
}

/// Lowest index among the maxima.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Placeholder count chosen for one slot after lowering class 0 by `gamma`.
pub fn choose_placeholders(row: &[f32], gamma: f64) -> usize {
    let mut best = 0;
    let mut best_score = row[0] as f64 - gamma;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x as f64 > best_score {
            best = i;
            best_score = x as f64;
        }
    }
    best
}

/// Ids the token head may not place.
fn fill_forbidden(id: usize) -> bool {
    matches!(id as TokenId, PAD | BOS | EOS | PLH)
}

fn choose_token(row: &[f32]) -> TokenId {
    let mut best: Option<usize> = None;
    for (i, &x) in row.iter().enumerate() {
        if fill_forbidden(i) {
            continue;
        }
        if best.is_none_or(|b| x > row[b]) {
            best = Some(i);
        }
    }
    best.expect("vocabulary has content tokens") as TokenId
}

/// Drops placeholders from the rightmost slots until the filled sequence fits
/// in `n_max`. Returns the number removed.
fn truncate_plan(plan: &mut PlaceholderPlan, len: usize, n_max: usize) -> usize {
    let mut excess = (len + plan.total()).saturating_sub(n_max);
    let removed = excess;
    for c in plan.0.iter_mut().rev() {
        if excess == 0 {
            break;
        }
        let take = (*c).min(excess);
        *c -= take;
        excess -= take;
    }
    removed
}

struct Session {
    y: TokenSeq,
    previous: Option<TokenSeq>,
    t: usize,
    trace: Vec<IterationRecord>,
    reason: Option<Termination>,
}

/// Decodes a batch. `inits[i]` is the starting sequence (empty for
/// generation); `sources`, when given, are aligned with `inits`;
/// `references` are only consulted for oracle hints.
///
/// Finished sequences are frozen while the rest continue.
pub fn decode_batch<P: EditPolicy>(
    policy: &P,
    sources: Option<&[TokenSeq]>,
    inits: &[TokenSeq],
    references: Option<&[TokenSeq]>,
    cfg: &DecodeConfig,
) -> Result<Vec<DecodeOutcome>> {
    cfg.validate()?;
    if let Some(s) = sources {
        if s.len() != inits.len() {
            return Err(Error::Usage(format!(
                "{} sources for {} initial sequences",
                s.len(),
                inits.len()
            )));
        }
    }
    let hints = cfg.oracle_hints;
    if hints != OracleHints::None {
        match references {
            Some(r) if r.len() == inits.len() => {}
            Some(_) => return Err(Error::Usage("reference count differs from input count".into())),
            None => return Err(Error::Usage("oracle hints require reference sequences".into())),
        }
    }
    let limits = policy.limits();
    let early = cfg.early_exit.unwrap_or(limits.early_exit);
    if !(1..=limits.n_layers).contains(&early.del) || !(1..=limits.n_layers).contains(&early.plh) {
        return Err(Error::Config(format!(
            "early exit {early} outside 1..={} layers",
            limits.n_layers
        )));
    }
    for y in inits {
        if y.len() > limits.n_max {
            return Err(Error::Length {
                len: y.len(),
                max: limits.n_max,
            });
        }
        if let Some(bad) = y.ids().iter().find(|&&t| t as usize >= limits.vocab_size) {
            return Err(Error::Config(format!("token id {bad} outside model vocabulary")));
        }
    }
    let ctx = policy.prepare(sources)?;
    let mut sessions: Vec<Session> = inits
        .iter()
        .map(|y| Session {
            y: y.clone(),
            previous: None,
            t: 0,
            trace: Vec::new(),
            reason: None,
        })
        .collect();

    loop {
        let active: Vec<usize> = (0..sessions.len())
            .filter(|&i| sessions[i].reason.is_none())
            .collect();
        if active.is_empty() {
            break;
        }

        // Deletion; empty sequences skip it.
        let to_delete: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| !sessions[i].y.is_empty())
            .collect();
        let mut masks: BTreeMap<usize, DeletionMask> = active
            .iter()
            .map(|&i| (i, DeletionMask::keep_all(sessions[i].y.len())))
            .collect();
        if hints != OracleHints::None {
            let refs = references.expect("checked above");
            for &i in &to_delete {
                masks.insert(i, oracle_deletion(&sessions[i].y, &refs[i]));
            }
        } else if !to_delete.is_empty() {
            let ys: Vec<TokenSeq> = to_delete.iter().map(|&i| sessions[i].y.clone()).collect();
            let scores = policy.deletion_scores(&ctx, &to_delete, &ys, early.del)?;
            for (k, &i) in to_delete.iter().enumerate() {
                masks.insert(i, deletion_mask(&scores, k));
            }
        }

        let mut deleted: BTreeMap<usize, TokenSeq> = BTreeMap::new();
        let mut inserting = Vec::new();
        for &i in &active {
            let s = &mut sessions[i];
            let mask = masks.remove(&i).expect("mask for every active sequence");
            let y_del = apply_deletion(&s.y, &mask)?;
            if s.t > 0 && s.previous.as_ref() == Some(&y_del) {
                s.trace.push(IterationRecord {
                    input: s.y.clone(),
                    deletion: mask,
                    placeholders: PlaceholderPlan::none(0),
                    fill: TokenFill(Vec::new()),
                    truncated: 0,
                    committed: false,
                });
                s.reason = Some(Termination::Loop);
                continue;
            }
            s.previous = Some(y_del.clone());
            s.trace.push(IterationRecord {
                input: s.y.clone(),
                deletion: mask,
                placeholders: PlaceholderPlan::none(y_del.len() - 1),
                fill: TokenFill(Vec::new()),
                truncated: 0,
                committed: true,
            });
            deleted.insert(i, y_del);
            inserting.push(i);
        }
        if inserting.is_empty() {
            continue;
        }

        // Placeholder insertion.
        let mut plans: BTreeMap<usize, PlaceholderPlan> = BTreeMap::new();
        if hints == OracleHints::DeletionPlaceholder {
            let refs = references.expect("checked above");
            for &i in &inserting {
                let o = oracle_insertion(&deleted[&i], &refs[i], limits.k_max)?;
                plans.insert(i, o.plan);
            }
        } else {
            let ys: Vec<TokenSeq> = inserting.iter().map(|&i| deleted[&i].clone()).collect();
            let scores = policy.placeholder_scores(&ctx, &inserting, &ys, early.plh)?;
            for (k, &i) in inserting.iter().enumerate() {
                let plan = PlaceholderPlan(
                    scores
                        .rows_of(k)
                        .map(|row| choose_placeholders(row, cfg.gamma))
                        .collect(),
                );
                plans.insert(i, plan);
            }
        }

        let mut filling = Vec::new();
        let mut with_plh: BTreeMap<usize, TokenSeq> = BTreeMap::new();
        for &i in &inserting {
            let s = &mut sessions[i];
            let y_del = &deleted[&i];
            let mut plan = plans.remove(&i).expect("plan for every inserting sequence");
            let truncated = truncate_plan(&mut plan, y_del.len(), limits.n_max);
            if truncated > 0 {
                log::warn!(
                    "dropped {truncated} placeholders to stay within {} tokens",
                    limits.n_max
                );
            }
            let nothing_deleted = y_del.len() == s.y.len();
            let record = s.trace.last_mut().expect("record pushed above");
            record.truncated = truncated;
            if plan.total() == 0 {
                record.placeholders = plan;
                if nothing_deleted {
                    s.reason = Some(Termination::FixedPoint);
                    continue;
                }
                s.y = y_del.clone();
                s.t += 1;
                if s.t >= cfg.max_iter {
                    s.reason = Some(Termination::Timeout);
                }
                continue;
            }
            let y2 = apply_placeholders(y_del, &plan, limits.k_max)?;
            record.placeholders = plan;
            with_plh.insert(i, y2);
            filling.push(i);
        }
        if filling.is_empty() {
            continue;
        }

        // Token fill.
        let ys: Vec<TokenSeq> = filling.iter().map(|&i| with_plh[&i].clone()).collect();
        let scores = policy.token_scores(&ctx, &filling, &ys)?;
        for (k, &i) in filling.iter().enumerate() {
            let fill = TokenFill(scores.rows_of(k).map(choose_token).collect());
            let s = &mut sessions[i];
            s.y = apply_fill(&ys[k], &fill)?;
            s.trace.last_mut().expect("record").fill = fill;
            s.t += 1;
            if s.t >= cfg.max_iter {
                s.reason = Some(Termination::Timeout);
            }
        }
    }

    Ok(sessions
        .into_iter()
        .zip(inits)
        .map(|(s, init)| DecodeOutcome {
            output: s.y,
            trace: DecodeTrace {
                initial: init.clone(),
                iterations: s.trace,
                reason: s.reason.expect("every session terminates"),
                iteration_count: s.t.max(1),
            },
        })
        .collect())
}

fn deletion_mask(scores: &HeadScores, seq: usize) -> DeletionMask {
    let mut bits = vec![false];
    bits.extend(scores.rows_of(seq).map(|row| argmax(row) == 1));
    bits.push(false);
    DeletionMask(bits)
}

fn single<P: EditPolicy>(
    policy: &P,
    source: Option<&TokenSeq>,
    y0: &TokenSeq,
    reference: Option<&TokenSeq>,
    cfg: &DecodeConfig,
) -> Result<(TokenSeq, DecodeTrace)> {
    let sources = source.map(std::slice::from_ref);
    let refs = reference.map(std::slice::from_ref);
    let out = decode_batch(policy, sources, std::slice::from_ref(y0), refs, cfg)?
        .pop()
        .expect("one outcome");
    Ok((out.output, out.trace))
}

/// Decodes one sequence; an empty `y0` means generation.
pub fn decode<P: EditPolicy>(
    policy: &P,
    source: Option<&TokenSeq>,
    y0: &TokenSeq,
    cfg: &DecodeConfig,
) -> Result<(TokenSeq, DecodeTrace)> {
    let cfg = DecodeConfig {
        oracle_hints: OracleHints::None,
        ..cfg.clone()
    };
    single(policy, source, y0, None, &cfg)
}

/// Refines a nonempty initial sequence; deletion runs first.
pub fn refine<P: EditPolicy>(
    policy: &P,
    source: Option<&TokenSeq>,
    y_init: &TokenSeq,
    cfg: &DecodeConfig,
) -> Result<(TokenSeq, DecodeTrace)> {
    if y_init.is_empty() {
        return Err(Error::Usage(
            "refinement needs a nonempty initial sequence".into(),
        ));
    }
    decode(policy, source, y_init, cfg)
}

/// Decodes with oracle deletions and optionally oracle placeholder counts.
pub fn decode_with_oracle<P: EditPolicy>(
    policy: &P,
    source: Option<&TokenSeq>,
    y0: &TokenSeq,
    reference: Option<&TokenSeq>,
    cfg: &DecodeConfig,
) -> Result<(TokenSeq, DecodeTrace)> {
    single(policy, source, y0, reference, cfg)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationStats {
    pub count: usize,
    pub mean_iterations: f64,
    pub median_iterations: f64,
    pub p90_iterations: f64,
    /// Iteration count → number of sequences.
    pub histogram: BTreeMap<usize, usize>,
    /// Output interior length → (sequences, mean iterations).
    pub per_length: BTreeMap<usize, (usize, f64)>,
    pub reasons: BTreeMap<String, usize>,
    pub timeout_fraction: f64,
    /// Mean wall-clock milliseconds per sequence, decoded one at a time.
    pub mean_latency_ms: f64,
}

fn percentile(sorted: &[usize], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx] as f64
}

impl IterationStats {
    /// Aggregates finished decodes; latencies are per sequence.
    pub fn from_outcomes(outcomes: &[DecodeOutcome], latencies_ms: &[f64]) -> Self {
        let mut stats = Self {
            count: outcomes.len(),
            ..Self::default()
        };
        if outcomes.is_empty() {
            return stats;
        }
        let mut iters: Vec<usize> = Vec::with_capacity(outcomes.len());
        let mut by_len: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for o in outcomes {
            let n = o.trace.iteration_count;
            iters.push(n);
            *stats.histogram.entry(n).or_default() += 1;
            let e = by_len.entry(o.output.len() - 2).or_default();
            e.0 += 1;
            e.1 += n;
            *stats.reasons.entry(o.trace.reason.to_string()).or_default() += 1;
        }
        stats.mean_iterations = iters.iter().sum::<usize>() as f64 / iters.len() as f64;
        iters.sort_unstable();
        stats.median_iterations = percentile(&iters, 0.5);
        stats.p90_iterations = percentile(&iters, 0.9);
        stats.per_length = by_len
            .into_iter()
            .map(|(l, (c, total))| (l, (c, total as f64 / c as f64)))
            .collect();
        stats.timeout_fraction =
            stats.reasons.get("timeout").copied().unwrap_or(0) as f64 / outcomes.len() as f64;
        if !latencies_ms.is_empty() {
            stats.mean_latency_ms = latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64;
        }
        stats
    }

    /// Plot-ready text: one `length count mean_iterations` row per length.
    pub fn per_length_table(&self) -> String {
        let mut s = String::from("length\tcount\tmean_iterations\n");
        for (l, (c, m)) in &self.per_length {
            s.push_str(&format!("{l}\t{c}\t{m:.3}\n"));
        }
        s
    }
}

/// Decodes every input one at a time, timing each, and aggregates iteration
/// counts.
pub fn iteration_stats<P: EditPolicy>(
    policy: &P,
    sources: Option<&[TokenSeq]>,
    inits: &[TokenSeq],
    cfg: &DecodeConfig,
) -> Result<(Vec<DecodeOutcome>, IterationStats)> {
    let mut outcomes = Vec::with_capacity(inits.len());
    let mut latencies = Vec::with_capacity(inits.len());
    for (i, y0) in inits.iter().enumerate() {
        let src = sources.map(|s| std::slice::from_ref(&s[i]));
        let start = Instant::now();
        let mut out = decode_batch(policy, src, std::slice::from_ref(y0), None, cfg)?;
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
        outcomes.push(out.pop().expect("one outcome"));
    }
    let stats = IterationStats::from_outcomes(&outcomes, &latencies);
    Ok((outcomes, stats))
}

/// Writes a trace as JSON lines: one record per pass, then a summary line.
pub fn write_trace<W: Write>(w: &mut W, seq_index: usize, trace: &DecodeTrace, vocab: &Vocab) -> Result<()> {
    let surfaces = |s: &TokenSeq| -> Vec<String> {
        s.interior()
            .iter()
            .map(|&t| vocab.surface(t).to_owned())
            .collect()
    };
    let mut y = trace.initial.clone();
    for (k, r) in trace.iterations.iter().enumerate() {
        let deleted: Vec<_> = r
            .input
            .interior()
            .iter()
            .zip(&r.deletion.0[1..])
            .map(|(&t, &d)| json!({"token": vocab.surface(t), "deleted": d}))
            .collect();
        let mut record = json!({
            "seq": seq_index,
            "iteration": k + 1,
            "committed": r.committed,
            "input": surfaces(&r.input),
            "deletion": deleted,
        });
        if r.committed {
            let k_max = r.placeholders.0.iter().copied().max().unwrap_or(0);
            let after_del = apply_deletion(&y, &r.deletion)?;
            let with_plh = apply_placeholders(&after_del, &r.placeholders, k_max)?;
            y = apply_fill(&with_plh, &r.fill)?;
            let mut fills = r.fill.0.iter();
            let output: Vec<_> = with_plh
                .interior()
                .iter()
                .map(|&t| match t {
                    PLH => json!({"token": vocab.surface(*fills.next().expect("fill per placeholder")), "inserted": true}),
                    t => json!({"token": vocab.surface(t), "inserted": false}),
                })
                .collect();
            record["placeholders"] = json!(r.placeholders.0);
            record["truncated"] = json!(r.truncated);
            record["output"] = json!(output);
        }
        serde_json::to_writer(&mut *w, &record)?;
        writeln!(w).map_err(|e| Error::Io {
            path: "<trace>".into(),
            source: e,
        })?;
    }
    let summary = json!({
        "seq": seq_index,
        "reason": trace.reason,
        "iterations": trace.iteration_count,
        "output": surfaces(&y),
    });
    serde_json::to_writer(&mut *w, &summary)?;
    writeln!(w).map_err(|e| Error::Io {
        path: "<trace>".into(),
        source: e,
    })?;
    Ok(())
}
