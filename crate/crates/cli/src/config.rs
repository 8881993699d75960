//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use levt_core::data::with_extension;
use levt_core::model::ModelConfig;
use levt_core::train::{ExpertConfig, ExpertKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "LEVT_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Generate,
    Refine,
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "generate" => Ok(Self::Generate),
            "refine" => Ok(Self::Refine),
            other => Err(format!("unknown task {other:?} (generate, refine)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// The edit-based model.
    #[default]
    Levt,
    /// Left-to-right teacher for distillation.
    Autoregressive,
}

impl FromStr for ModelFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "levt" => Ok(Self::Levt),
            "autoregressive" | "ar" => Ok(Self::Autoregressive),
            other => Err(format!("unknown model family {other:?} (levt, autoregressive)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus prefix: `<train>.src`, `<train>.tgt` and, for refinement,
    /// `<train>.init`.
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub vocab_min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            vocab_min_count: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub family: ModelFamily,
    /// Falls back to `LEVT_SEED`; a run without either is rejected.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub expert: ExpertConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    /// Fills the seed from the environment when unset.
    pub fn resolve_seed(&mut self) -> CliResult<u64> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                let s = v
                    .parse()
                    .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an integer")))?;
                self.seed = Some(s);
            }
        }
        let seed = self.seed.ok_or_else(|| {
            CliError::usage(format!("no seed: set `seed`, pass --seed or export {SEED_ENV}"))
        })?;
        self.train.seed = seed;
        Ok(seed)
    }

    /// Checks values and that every referenced file exists.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.expert.validate()?;
        if self.out_dir.is_none() {
            return Err(CliError::usage(
                "no output directory: set `out_dir` or pass --out-dir",
            ));
        }
        let train = self
            .data
            .train
            .as_ref()
            .ok_or_else(|| CliError::usage("no training corpus: set data.train or pass --train"))?;
        let mut required = vec![train];
        required.extend(&self.data.valid);
        for prefix in required {
            let mut exts = vec!["src", "tgt"];
            if self.task == TaskKind::Refine {
                exts.push("init");
            }
            for ext in exts {
                let p = with_extension(prefix, ext);
                if !p.is_file() {
                    return Err(CliError::usage(format!("corpus file {} not found", p.display())));
                }
            }
        }
        if self.expert.kind == ExpertKind::Distill {
            if self.family == ModelFamily::Autoregressive {
                return Err(CliError::usage("the teacher itself cannot be distilled"));
            }
            let t = self.expert.teacher.as_ref().expect("validated by expert config");
            if !t.is_file() {
                return Err(CliError::usage(format!(
                    "teacher checkpoint {} not found",
                    t.display()
                )));
            }
        }
        if self.family == ModelFamily::Autoregressive && !self.model.conditional {
            return Err(CliError::usage(
                "the autoregressive teacher needs a source encoder",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.seed = Some(3);
        c.model.d_model = 32;
        c.train.rollin.dae_mode = true;
        c.data.train = Some("x/train".into());
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn nested_sections_parse() {
        let c: RunConfig = toml::from_str(
            r#"
            task = "refine"
            seed = 9
            [model]
            d_model = 32
            sharing = "none"
            [train]
            steps = 10
            [train.rollin]
            alpha = 0.3
            [expert]
            kind = "oracle"
            "#,
        )
        .unwrap();
        assert_eq!(c.task, TaskKind::Refine);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.rollin.alpha, 0.3);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
