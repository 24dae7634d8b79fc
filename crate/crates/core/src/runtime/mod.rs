//! Run configuration and the generate / train / infer / audit / eval drivers.

mod audit;
mod eval;
mod infer;
mod plot;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use audit::{audit, AuditOptions, AuditReport, AuditRow};
pub use eval::{declutter, evaluate, AlwaysFailPolicy, AttemptLog, DeclutterRun, EvalConfig, EvalReport, ModelPolicy, OraclePolicy, Policy, Proposal, SeedSummary, StopReason};
pub use infer::{infer, match_rotated, nms, InferConfig, InferenceResult, SelectedGrasp, Timing};
pub use plot::{plot_eval, plot_losses};
pub use train::{load_split, train, validate, EpochRecord, StepRecord, TrainConfig, TrainData, TrainOutcome};

use crate::error::{Error, Result};
use crate::grasp::{DecoderConfig, GraspModel, ModelKind};
use crate::scene::GenerateConfig;
use crate::tensor::checkpoint::{config_digest, load_checkpoint, save_checkpoint};
use crate::tensor::{DType, ParamStore, Scalar};
use crate::triplane::{EncoderConfig, SideMode};

/// Encoder family selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Steerable XY branch with a reflection-invariant side branch.
    Strict,
    /// Steerable XY branch with a conventional side branch.
    Mixed,
    /// Plain CNNs throughout.
    Conventional,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Mode::Strict),
            "mixed" => Ok(Mode::Mixed),
            "conventional" => Ok(Mode::Conventional),
            _ => Err(Error::Config(format!("unknown mode `{s}` (strict, mixed or conventional)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Strict => "strict",
            Mode::Mixed => "mixed",
            Mode::Conventional => "conventional",
        })
    }
}

impl Mode {
    pub fn of(cfg: &EncoderConfig) -> Mode {
        match (cfg.equivariant, cfg.side_mode) {
            (false, _) => Mode::Conventional,
            (true, SideMode::ReflectionInvariant) => Mode::Strict,
            (true, SideMode::Mixed) => Mode::Mixed,
        }
    }

    /// Switches the encoder family, keeping sizes.
    pub fn apply(self, cfg: &mut EncoderConfig) {
        let base = match self {
            Mode::Strict => EncoderConfig::strict(),
            Mode::Mixed => EncoderConfig::default(),
            Mode::Conventional => EncoderConfig::conventional(),
        };
        cfg.equivariant = base.equivariant;
        cfg.side_mode = base.side_mode;
        cfg.side_dcn = base.side_dcn;
        cfg.dscn = base.dscn;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub dtype: DType,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub data: GenerateConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::EquiGiga,
            dtype: DType::F32,
            seed: 0,
            encoder: EncoderConfig::strict(),
            decoder: DecoderConfig::default(),
            data: GenerateConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        if self.encoder.grid != self.data.grid {
            return Err(Error::Config(format!(
                "encoder grid {} differs from data grid {}",
                self.encoder.grid, self.data.grid
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mode(&self) -> Mode {
        Mode::of(&self.encoder)
    }

    /// Sets the grid of both the encoder and the data generator.
    pub fn set_grid(&mut self, grid: usize) {
        self.encoder.grid = grid;
        self.data.grid = grid;
    }
}

/// Fresh model and parameters, initialised from `cfg.seed`.
pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<(GraspModel, ParamStore<T>)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = GraspModel::new(&mut store, cfg.model, &cfg.encoder, &cfg.decoder, &mut rng)?;
    Ok((model, store))
}

/// Stores parameters together with the full configuration text.
pub fn save_model<T: Scalar>(path: &Path, cfg: &RunConfig, store: &ParamStore<T>) -> Result<()> {
    save_checkpoint(path, &cfg.to_toml()?, store)
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(RunConfig, GraspModel, ParamStore<T>)> {
    let ckpt = load_checkpoint(path)?;
    let cfg = RunConfig::from_toml(&ckpt.config_text)?;
    let (model, mut store) = build_model::<T>(&cfg)?;
    ckpt.restore(&mut store, &config_digest(&ckpt.config_text), false)?;
    Ok((cfg, model, store))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
