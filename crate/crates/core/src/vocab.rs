//! Vocabulary, sentinel-wrapped token sequences and whitespace tokenisation.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const PLH: TokenId = 4;
pub const NUM_RESERVED: usize = 5;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED_SURFACES: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>", "<PLH>"];

/// Hard cap on sequence length, sentinels included.
pub const DEFAULT_MAX_LEN: usize = 256;

/// Token ids wrapped in begin/end sentinels.
///
/// The interior never contains `BOS`, `EOS` or `PAD`; it may contain `PLH`
/// while a sequence is mid-edit.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(Error::Sequence(format!("expected <s> ... </s>, got {:?}", ids)));
        }
        if ids.len() > DEFAULT_MAX_LEN {
            return Err(Error::Length {
                len: ids.len(),
                max: DEFAULT_MAX_LEN,
            });
        }
        if let Some(bad) = ids[1..ids.len() - 1]
            .iter()
            .find(|&&t| t == BOS || t == EOS || t == PAD)
        {
            return Err(Error::Sequence(format!(
                "reserved id {} inside sequence {:?}",
                bad, ids
            )));
        }
        Ok(Self(ids))
    }

    /// `[<s>, </s>]`
    pub fn empty() -> Self {
        Self(vec![BOS, EOS])
    }

    pub fn from_interior(interior: &[TokenId]) -> Result<Self> {
        let mut ids = Vec::with_capacity(interior.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(interior);
        ids.push(EOS);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn interior(&self) -> &[TokenId] {
        &self.0[1..self.0.len() - 1]
    }

    /// Number of positions, sentinels included.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// True for `[<s>, </s>]`.
    pub fn is_empty(&self) -> bool {
        self.0.len() == 2
    }

    pub fn placeholder_count(&self) -> usize {
        self.0.iter().filter(|&&t| t == PLH).count()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl fmt::Debug for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenSeq{:?}", self.0)
    }
}

impl TryFrom<Vec<TokenId>> for TokenSeq {
    type Error = Error;

    fn try_from(ids: Vec<TokenId>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<TokenSeq> for Vec<TokenId> {
    fn from(s: TokenSeq) -> Self {
        s.0
    }
}

/// Surface ↔ id bijection. Ids `0..NUM_RESERVED` are the reserved symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Whitespace tokens occurring at least `min_count` times, ordered by
    /// descending count and then lexicographically.
    pub fn build<'a, I>(lines: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_line = false;
        for line in lines {
            seen_line = true;
            for tok in line.split_whitespace() {
                if RESERVED_SURFACES.contains(&tok) {
                    return Err(Error::Vocab(format!("corpus contains reserved symbol {tok}")));
                }
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_line {
            return Err(Error::Usage(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_surfaces(
            RESERVED_SURFACES
                .iter()
                .copied()
                .chain(entries.into_iter().map(|(s, _)| s))
                .map(str::to_owned)
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its id-ordered surface list.
    pub fn from_surfaces(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.len() < NUM_RESERVED
            || surfaces[..NUM_RESERVED]
                .iter()
                .zip(RESERVED_SURFACES)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Vocab("reserved symbols missing or out of order".into()));
        }
        let mut index = HashMap::with_capacity(surfaces.len());
        for (i, s) in surfaces.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid surface form {s:?}")));
            }
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::Vocab(format!("duplicate surface form {s:?}")));
            }
        }
        Ok(Self { surfaces, index })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.len() == NUM_RESERVED
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        self.surfaces
            .get(id as usize)
            .map_or(RESERVED_SURFACES[UNK as usize], String::as_str)
    }

    /// Ids a model may emit as content tokens.
    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        NUM_RESERVED as TokenId..self.surfaces.len() as TokenId
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = vec![BOS];
        for tok in text.split_whitespace() {
            if RESERVED_SURFACES.contains(&tok) {
                return Err(Error::Vocab(format!("input contains reserved symbol {tok}")));
            }
            ids.push(self.id(tok).unwrap_or(UNK));
        }
        ids.push(EOS);
        TokenSeq::new(ids)
    }

    /// Interior surfaces joined by single spaces; placeholders render as
    /// `<PLH>`.
    pub fn decode(&self, seq: &TokenSeq) -> String {
        let mut out = String::new();
        for (i, &t) in seq.interior().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.surface(t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_orders_by_count_then_lexicographically() {
        let v = Vocab::build(["a a b"], 1).unwrap();
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));

        let v = Vocab::build(["zz yy zz yy xx zz yy"], 1).unwrap();
        assert_eq!(v.id("yy"), Some(5));
        assert_eq!(v.id("zz"), Some(6));
        assert_eq!(v.id("xx"), Some(7));
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let v = Vocab::build(["a a b"], 2).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 1);
        assert_eq!(v.encode("b a").unwrap().ids(), &[BOS, UNK, 5, EOS]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            Vocab::build(std::iter::empty(), 1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn encode_wraps_and_decode_strips() {
        let v = Vocab::build(["x y z"], 1).unwrap();
        assert_eq!(v.encode("").unwrap(), TokenSeq::empty());
        let s = v.encode("z x").unwrap();
        assert_eq!(v.decode(&s), "z x");
        let with_plh = TokenSeq::new(vec![BOS, PLH, 5, EOS]).unwrap();
        assert_eq!(v.decode(&with_plh), "<PLH> x");
    }

    #[test]
    fn reserved_surfaces_are_rejected_in_text() {
        let v = Vocab::build(["x"], 1).unwrap();
        for s in RESERVED_SURFACES {
            assert!(v.encode(&format!("x {s}")).is_err());
        }
    }

    #[test]
    fn sequence_invariants() {
        assert!(TokenSeq::new(vec![BOS]).is_err());
        assert!(TokenSeq::new(vec![5, EOS]).is_err());
        assert!(TokenSeq::new(vec![BOS, EOS, EOS]).is_err());
        assert!(TokenSeq::new(vec![BOS, PAD, EOS]).is_err());
        assert!(TokenSeq::new(vec![BOS, PLH, UNK, EOS]).is_ok());
        let long = vec![7; DEFAULT_MAX_LEN - 1];
        assert!(matches!(
            TokenSeq::from_interior(&long),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn vocab_round_trips_through_surface_list() {
        let v = Vocab::build(["b a c a"], 1).unwrap();
        let w = Vocab::from_surfaces(v.surfaces().to_vec()).unwrap();
        assert_eq!(v, w);
        let mut bad = v.surfaces().to_vec();
        bad.swap(0, 1);
        assert!(Vocab::from_surfaces(bad).is_err());
    }
}
