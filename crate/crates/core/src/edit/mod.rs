//! The edit environment and its expert.
//!
//! Edits are pure functions of a sequence and an action. The expert computes
//! optimal actions under the insertion/deletion-only Levenshtein distance
//! using an LCS table over sequence interiors.

pub mod reference;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq, BOS, EOS, PAD, PLH};

/// Per-position delete flags; sentinel positions must be `false`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionMask(pub Vec<bool>);

impl DeletionMask {
    pub fn keep_all(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn deletes(&self) -> usize {
        self.0.iter().filter(|d| **d).count()
    }
}

/// Placeholder counts for each slot between consecutive positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderPlan(pub Vec<usize>);

impl PlaceholderPlan {
    pub fn none(slots: usize) -> Self {
        Self(vec![0; slots])
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// Tokens for the placeholders of a sequence, left to right.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFill(pub Vec<TokenId>);

pub fn apply_deletion(y: &TokenSeq, mask: &DeletionMask) -> Result<TokenSeq> {
    let d = &mask.0;
    if d.len() != y.len() {
        return Err(Error::Contract(format!(
            "deletion mask has {} entries for a sequence of {}",
            d.len(),
            y.len()
        )));
    }
    if d[0] || d[d.len() - 1] {
        return Err(Error::Contract("deletion mask touches a sentinel".into()));
    }
    let ids = y
        .ids()
        .iter()
        .zip(d)
        .filter(|(_, del)| !**del)
        .map(|(t, _)| *t)
        .collect();
    TokenSeq::new(ids)
}

pub fn apply_placeholders(y: &TokenSeq, plan: &PlaceholderPlan, k_max: usize) -> Result<TokenSeq> {
    let p = &plan.0;
    if p.len() + 1 != y.len() {
        return Err(Error::Contract(format!(
            "placeholder plan has {} slots for a sequence of {}",
            p.len(),
            y.len()
        )));
    }
    if let Some(bad) = p.iter().find(|&&c| c > k_max) {
        return Err(Error::Contract(format!(
            "placeholder count {} exceeds K_max = {}",
            bad, k_max
        )));
    }
    let mut ids = Vec::with_capacity(y.len() + plan.total());
    for (i, &t) in y.ids().iter().enumerate() {
        ids.push(t);
        if let Some(&c) = p.get(i) {
            ids.extend(std::iter::repeat_n(PLH, c));
        }
    }
    TokenSeq::new(ids)
}

pub fn apply_fill(y: &TokenSeq, fill: &TokenFill) -> Result<TokenSeq> {
    let slots = y.placeholder_count();
    if slots != fill.0.len() {
        return Err(Error::Contract(format!(
            "{} fill tokens for {} placeholders",
            fill.0.len(),
            slots
        )));
    }
    if let Some(bad) = fill.0.iter().find(|&&t| matches!(t, PAD | BOS | EOS | PLH)) {
        return Err(Error::Contract(format!("fill uses reserved id {bad}")));
    }
    let mut next = fill.0.iter();
    let ids = y
        .ids()
        .iter()
        .map(|&t| {
            if t == PLH {
                *next.next().expect("counted")
            } else {
                t
            }
        })
        .collect();
    TokenSeq::new(ids)
}

/// Suffix LCS table: `table[i][j]` = LCS length of `a[i..]` and `b[j..]`.
fn lcs_table(a: &[TokenId], b: &[TokenId]) -> Vec<Vec<u32>> {
    let mut t = vec![vec![0u32; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                t[i + 1][j + 1] + 1
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    lcs_table(a, b)[0][0] as usize
}

/// Minimal number of single-token insertions and deletions turning the
/// interior of `a` into the interior of `b`.
pub fn lev_distance(a: &TokenSeq, b: &TokenSeq) -> usize {
    let (x, y) = (a.interior(), b.interior());
    x.len() + y.len() - 2 * lcs_len(x, y)
}

/// Deletes every token of `y` outside one LCS alignment against `target`.
///
/// Among optimal alignments the one keeping the earliest positions of `y`
/// is chosen.
pub fn oracle_deletion(y: &TokenSeq, target: &TokenSeq) -> DeletionMask {
    let (a, b) = (y.interior(), target.interior());
    let t = lcs_table(a, b);
    let mut delete = vec![true; a.len()];
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] == b[j] {
            delete[i] = false;
            i += 1;
            j += 1;
        } else if t[i][j + 1] == t[i][j] {
            // a[i] can still be matched further along b
            j += 1;
        } else {
            i += 1;
        }
    }
    let mut mask = Vec::with_capacity(y.len());
    mask.push(false);
    mask.extend(delete);
    mask.push(false);
    DeletionMask(mask)
}

/// Expert insertion actions for a sequence whose interior is a subsequence
/// of the target's.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionOracle {
    pub plan: PlaceholderPlan,
    pub fill: TokenFill,
    /// Tokens dropped because a gap exceeded `K_max`.
    pub clipped: usize,
}

/// Placeholder counts and fill tokens that rebuild `target` from `y`.
///
/// `y` is embedded into `target` at the leftmost possible positions. Gaps
/// longer than `k_max` are cut to their first `k_max` tokens and the rest
/// is counted in [`InsertionOracle::clipped`].
pub fn oracle_insertion(y: &TokenSeq, target: &TokenSeq, k_max: usize) -> Result<InsertionOracle> {
    let (a, b) = (y.interior(), target.interior());
    let mut gaps: Vec<&[TokenId]> = Vec::with_capacity(a.len() + 1);
    let mut j = 0;
    for &tok in a {
        let start = j;
        while j < b.len() && b[j] != tok {
            j += 1;
        }
        if j == b.len() {
            return Err(Error::Contract(
                "oracle insertion needs a subsequence of the target".into(),
            ));
        }
        gaps.push(&b[start..j]);
        j += 1;
    }
    gaps.push(&b[j..]);
    let mut plan = Vec::with_capacity(gaps.len());
    let mut fill = Vec::new();
    let mut clipped = 0;
    for gap in gaps {
        let take = gap.len().min(k_max);
        clipped += gap.len() - take;
        plan.push(take);
        fill.extend_from_slice(&gap[..take]);
    }
    if clipped > 0 {
        debug!("oracle gap exceeds K_max = {k_max}; {clipped} target tokens clipped");
    }
    Ok(InsertionOracle {
        plan: PlaceholderPlan(plan),
        fill: TokenFill(fill),
        clipped,
    })
}

/// Random word dropping: draws a rate `q ~ U[0,1]` and deletes each interior
/// token independently with probability `q`.
pub fn random_deletion<R: Rng + ?Sized>(y: &TokenSeq, rng: &mut R) -> DeletionMask {
    let q: f64 = rng.random();
    random_deletion_with_rate(y, q, rng)
}

pub fn random_deletion_with_rate<R: Rng + ?Sized>(y: &TokenSeq, rate: f64, rng: &mut R) -> DeletionMask {
    let n = y.len();
    DeletionMask(
        (0..n)
            .map(|i| i != 0 && i != n - 1 && rng.random::<f64>() < rate)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::BOS as S;
    use crate::vocab::EOS as E;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: TokenId = 5;
    const B: TokenId = 6;
    const C: TokenId = 7;
    const D: TokenId = 8;

    fn seq(ids: &[TokenId]) -> TokenSeq {
        TokenSeq::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn deletion_examples() {
        let y = seq(&[S, A, B, E]);
        let out = apply_deletion(&y, &DeletionMask(vec![false, false, true, false])).unwrap();
        assert_eq!(out, seq(&[S, A, E]));
        assert_eq!(apply_deletion(&y, &DeletionMask::keep_all(4)).unwrap(), y);
        let all = apply_deletion(&y, &DeletionMask(vec![false, true, true, false])).unwrap();
        assert_eq!(all, TokenSeq::empty());
    }

    #[test]
    fn deletion_of_a_sentinel_is_a_contract_violation() {
        let y = seq(&[S, A, E]);
        assert!(matches!(
            apply_deletion(&y, &DeletionMask(vec![true, false, false])),
            Err(Error::Contract(_))
        ));
        assert!(apply_deletion(&y, &DeletionMask(vec![false, false])).is_err());
    }

    #[test]
    fn placeholder_examples() {
        let y = seq(&[S, A, E]);
        assert_eq!(apply_placeholders(&y, &PlaceholderPlan::none(2), 8).unwrap(), y);
        let out = apply_placeholders(&TokenSeq::empty(), &PlaceholderPlan(vec![3]), 8).unwrap();
        assert_eq!(out, seq(&[S, PLH, PLH, PLH, E]));
        let out = apply_placeholders(&y, &PlaceholderPlan(vec![2, 1]), 8).unwrap();
        assert_eq!(out.len(), y.len() + 3);
        assert!(matches!(
            apply_placeholders(&y, &PlaceholderPlan(vec![9, 0]), 8),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fill_examples() {
        let y = seq(&[S, A, E]);
        assert_eq!(apply_fill(&y, &TokenFill(vec![])).unwrap(), y);
        assert_eq!(
            apply_fill(&seq(&[S, PLH, E]), &TokenFill(vec![A])).unwrap(),
            seq(&[S, A, E])
        );
        assert_eq!(
            apply_fill(&seq(&[S, PLH, C, PLH, E]), &TokenFill(vec![A, B])).unwrap(),
            seq(&[S, A, C, B, E])
        );
        assert!(matches!(
            apply_fill(&seq(&[S, PLH, E]), &TokenFill(vec![A, B])),
            Err(Error::Contract(_))
        ));
        assert!(apply_fill(&seq(&[S, PLH, E]), &TokenFill(vec![EOS])).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(lev_distance(&seq(&[S, A, B, E]), &seq(&[S, A, B, E])), 0);
        assert_eq!(lev_distance(&TokenSeq::empty(), &seq(&[S, A, B, C, E])), 3);
        // "a b" -> "b a": one deletion plus one insertion
        assert_eq!(lev_distance(&seq(&[S, A, B, E]), &seq(&[S, B, A, E])), 2);
    }

    #[test]
    fn oracle_deletion_examples() {
        let m = oracle_deletion(&seq(&[S, A, B, C, E]), &seq(&[S, A, C, E]));
        assert_eq!(m.0, vec![false, false, true, false, false]);
        let y = seq(&[S, A, B, E]);
        assert_eq!(oracle_deletion(&y, &y), DeletionMask::keep_all(4));
    }

    #[test]
    fn oracle_deletion_keeps_leftmost_on_ties() {
        // y = a a, target = a: both positions could be kept; the first wins
        let m = oracle_deletion(&seq(&[S, A, A, E]), &seq(&[S, A, E]));
        assert_eq!(m.0, vec![false, false, true, false]);
        // y = a b, target = b a: keeping either token is optimal
        let m = oracle_deletion(&seq(&[S, A, B, E]), &seq(&[S, B, A, E]));
        assert_eq!(m.0, vec![false, false, true, false]);
    }

    #[test]
    fn oracle_insertion_examples() {
        let o = oracle_insertion(&seq(&[S, A, C, E]), &seq(&[S, A, B, C, D, E]), 8).unwrap();
        assert_eq!(o.plan.0, vec![0, 1, 1]);
        assert_eq!(o.fill.0, vec![B, D]);
        assert_eq!(o.clipped, 0);

        let y = seq(&[S, A, B, E]);
        let o = oracle_insertion(&y, &y, 8).unwrap();
        assert_eq!(o.plan, PlaceholderPlan::none(3));
        assert!(o.fill.0.is_empty());
    }

    #[test]
    fn oracle_insertion_rejects_non_subsequence() {
        assert!(matches!(
            oracle_insertion(&seq(&[S, B, A, E]), &seq(&[S, A, B, E]), 8),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn oracle_insertion_clips_long_gaps() {
        let target = seq(&[S, A, B, C, D, A, B, E]);
        let o = oracle_insertion(&TokenSeq::empty(), &target, 4).unwrap();
        assert_eq!(o.plan.0, vec![4]);
        assert_eq!(o.fill.0, vec![A, B, C, D]);
        assert_eq!(o.clipped, 2);
    }

    #[test]
    fn random_deletion_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_deletion(&TokenSeq::empty(), &mut rng);
        assert_eq!(m, DeletionMask::keep_all(2));
        let y = seq(&[S, A, B, C, E]);
        assert_eq!(
            random_deletion_with_rate(&y, 0.0, &mut rng),
            DeletionMask::keep_all(5)
        );
        let all = random_deletion_with_rate(&y, 1.0, &mut rng);
        assert_eq!(all.0, vec![false, true, true, true, false]);
    }
}
