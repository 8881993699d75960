//! Network configuration, the edit-policy network, the autoregressive
//! teacher and the checkpoint container.

pub mod checkpoint;
pub mod levt;
pub mod teacher;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenSeq, DEFAULT_MAX_LEN};

pub use levt::{Context, LevT, LevTNet};
pub use teacher::{ArNet, ArTeacher};

/// Which decoder backbone each head reads from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One backbone for all three heads.
    #[default]
    All,
    /// Placeholder and token heads share; deletion has its own.
    PlhTok,
    /// Deletion and token heads share; placeholder has its own.
    InsDel,
    /// Three separate backbones.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Deletion,
    Placeholder,
    Token,
}

impl SharingMode {
    pub fn backbones(self) -> usize {
        match self {
            Self::All => 1,
            Self::PlhTok | Self::InsDel => 2,
            Self::None => 3,
        }
    }

    pub fn backbone(self, head: Head) -> usize {
        match (self, head) {
            (Self::All, _) => 0,
            (Self::PlhTok, Head::Deletion) => 1,
            (Self::PlhTok, _) => 0,
            (Self::InsDel, Head::Placeholder) => 1,
            (Self::InsDel, _) => 0,
            (Self::None, Head::Deletion) => 0,
            (Self::None, Head::Placeholder) => 1,
            (Self::None, Head::Token) => 2,
        }
    }
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "plh_tok" => Ok(Self::PlhTok),
            "ins_del" => Ok(Self::InsDel),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown sharing mode {other:?}"))),
        }
    }
}

/// Number of decoder blocks run before the deletion and placeholder heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EarlyExit {
    pub del: usize,
    pub plh: usize,
}

impl FromStr for EarlyExit {
    type Err = Error;

    /// Parses `"m-n"` into deletion depth `m` and placeholder depth `n`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("early exit must look like 6-6, got {s:?}"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        Ok(Self {
            del: a.trim().parse().map_err(|_| bad())?,
            plh: b.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for EarlyExit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.del, self.plh)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub k_max: usize,
    pub n_max: usize,
    pub sharing: SharingMode,
    /// Full depth when absent.
    pub early_exit: Option<EarlyExit>,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub conditional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_hidden: 256,
            n_heads: 4,
            n_layers: 2,
            k_max: 16,
            n_max: DEFAULT_MAX_LEN,
            sharing: SharingMode::All,
            early_exit: None,
            dropout: 0.0,
            label_smoothing: 0.0,
            conditional: true,
        }
    }
}

impl ModelConfig {
    /// Named configurations: `desk` (the default) and `base`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "base" => Ok(Self {
                d_model: 512,
                d_hidden: 2048,
                n_heads: 8,
                n_layers: 6,
                k_max: 64,
                dropout: 0.3,
                label_smoothing: 0.1,
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn early_exit(&self) -> EarlyExit {
        self.early_exit.unwrap_or(EarlyExit {
            del: self.n_layers,
            plh: self.n_layers,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_hidden == 0 || self.n_layers == 0 {
            return fail("model dimensions and depth must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.k_max == 0 {
            return fail("k_max must be at least 1".into());
        }
        if !(2..=DEFAULT_MAX_LEN).contains(&self.n_max) {
            return fail(format!("n_max must lie in 2..={DEFAULT_MAX_LEN}"));
        }
        let e = self.early_exit();
        if !(1..=self.n_layers).contains(&e.del) || !(1..=self.n_layers).contains(&e.plh) {
            return fail(format!("early exit {e} outside 1..={} layers", self.n_layers));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }
}

/// Per-sequence rows of log-probabilities produced by one head.
///
/// Sequence `i` owns rows `offsets[i]..offsets[i + 1]`, each `width` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadScores {
    pub width: usize,
    pub data: Vec<f32>,
    pub offsets: Vec<usize>,
}

impl HeadScores {
    pub fn from_rows(width: usize, seqs: &[Vec<Vec<f32>>]) -> Self {
        let mut data = Vec::new();
        let mut offsets = vec![0];
        for rows in seqs {
            for r in rows {
                assert_eq!(r.len(), width, "row width");
                data.extend_from_slice(r);
            }
            offsets.push(offsets.last().unwrap() + rows.len());
        }
        Self { width, data, offsets }
    }

    pub fn num_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows_of(&self, seq: usize) -> impl ExactSizeIterator<Item = &[f32]> {
        let (a, b) = (self.offsets[seq], self.offsets[seq + 1]);
        (a..b).map(move |r| &self.data[r * self.width..(r + 1) * self.width])
    }
}

/// Structural limits a decoder needs from a policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyLimits {
    pub k_max: usize,
    pub n_max: usize,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub early_exit: EarlyExit,
}

/// The three edit heads as seen by the decoder.
///
/// `sources[i]` indexes the prepared context of sequence `ys[i]`; `depth`
/// is the number of decoder blocks run before the deletion and placeholder
/// heads. The token head always reads the last block.
pub trait EditPolicy {
    type Context;

    fn limits(&self) -> PolicyLimits;

    /// Encodes sources once per decoding session.
    fn prepare(&self, sources: Option<&[TokenSeq]>) -> Result<Self::Context>;

    /// One `[keep, delete]` row per interior position.
    fn deletion_scores(
        &self,
        ctx: &Self::Context,
        sources: &[usize],
        ys: &[TokenSeq],
        depth: usize,
    ) -> Result<HeadScores>;

    /// One row over `0..=k_max` per adjacent pair.
    fn placeholder_scores(
        &self,
        ctx: &Self::Context,
        sources: &[usize],
        ys: &[TokenSeq],
        depth: usize,
    ) -> Result<HeadScores>;

    /// One vocabulary row per placeholder, left to right.
    fn token_scores(&self, ctx: &Self::Context, sources: &[usize], ys: &[TokenSeq]) -> Result<HeadScores>;
}
