//! Exhaustive agreement between the dynamic-programming expert and
//! brute-force search on small alphabets.

use std::time::Instant;

use levt_core::edit::reference::EditGraph;
use levt_core::edit::{apply_deletion, lev_distance, oracle_deletion};
use levt_core::vocab::{TokenId, TokenSeq};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const MAX_EXHAUSTIVE_LEN: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub max_len: usize,
    pub alphabet_size: usize,
    pub pairs: usize,
    pub distance_mismatches: usize,
    pub deletion_mismatches: usize,
    pub mutated: bool,
    pub elapsed_ms: f64,
    pub passed: bool,
}

/// Distance with a deliberate off-by-one in the table fill: the last token
/// of `a` is never matched. Used to show that the check detects faults.
fn mutant_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len().saturating_sub(1)).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                t[i + 1][j + 1] + 1
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    a.len() + b.len() - 2 * t[0][0]
}

/// Checks every ordered pair of interiors up to `max_len` over an
/// `alphabet_size`-symbol alphabet.
pub fn oracle_check(max_len: usize, alphabet_size: usize, mutate: bool) -> CliResult<OracleReport> {
    if max_len > MAX_EXHAUSTIVE_LEN {
        return Err(CliError::usage(format!(
            "max_len {max_len} exceeds {MAX_EXHAUSTIVE_LEN}"
        )));
    }
    if alphabet_size == 0 {
        return Err(CliError::usage("alphabet must have at least one symbol"));
    }
    let start = Instant::now();
    let graph = EditGraph::new(alphabet_size, max_len);
    let seqs: Vec<TokenSeq> = graph
        .strings()
        .iter()
        .map(|s| TokenSeq::from_interior(s))
        .collect::<Result<_, _>>()?;
    let mut report = OracleReport {
        max_len,
        alphabet_size,
        pairs: 0,
        distance_mismatches: 0,
        deletion_mismatches: 0,
        mutated: mutate,
        elapsed_ms: 0.0,
        passed: false,
    };
    for a in &seqs {
        for b in &seqs {
            report.pairs += 1;
            let dp = if mutate {
                mutant_distance(a.interior(), b.interior())
            } else {
                lev_distance(a, b)
            };
            if dp != graph.seq_distance(a, b) {
                report.distance_mismatches += 1;
            }
            let kept = apply_deletion(a, &oracle_deletion(a, b))?;
            if graph.seq_distance(&kept, b) != graph.best_deletion_distance(a.interior(), b.interior()) {
                report.deletion_mismatches += 1;
            }
        }
    }
    report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    report.passed = report.distance_mismatches == 0 && report.deletion_mismatches == 0;
    Ok(report)
}
