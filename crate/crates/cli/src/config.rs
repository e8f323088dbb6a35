//! Run configuration file.
//!
//! A TOML document with a top-level `seed` and `out_dir` and the sections
//! `[data]`, `[resolution]`, `[synth]`, `[model]` and `[train]`. Every key is
//! optional and falls back to its default; unknown keys are rejected. See the
//! README for the full key list.

use std::path::{Path, PathBuf};

use adgcrnn_core::cell::Variant;
use adgcrnn_core::dataset::ResolutionConfig;
use adgcrnn_core::seq2seq::ModelConfig;
use adgcrnn_core::synth::SynthConfig;
use adgcrnn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "ADGCRNN_OUT_DIR";
/// Worker threads for evaluation (default 1).
pub const THREADS_ENV: &str = "ADGCRNN_THREADS";

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub resolution: ResolutionSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataSection::default(),
            resolution: ResolutionSection::default(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset bundle read by `train`, `eval` and `predict`.
    pub bundle: Option<PathBuf>,
    /// Raw value matrix for `ingest`.
    pub values: Option<PathBuf>,
    /// Edge list for `ingest` (and optionally `synth`).
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolutionSection {
    pub steps_per_day: usize,
    pub history: usize,
    pub horizon: usize,
    pub step_minutes: u32,
}

impl Default for ResolutionSection {
    fn default() -> Self {
        let r = ResolutionConfig::default();
        ResolutionSection {
            steps_per_day: r.steps_per_day,
            history: r.history,
            horizon: r.horizon,
            step_minutes: 5,
        }
    }
}

impl ResolutionSection {
    pub fn to_core(&self) -> ResolutionConfig {
        ResolutionConfig {
            steps_per_day: self.steps_per_day,
            history: self.history,
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub alpha: f64,
    pub noise_std: f64,
    pub base_min: f64,
    pub base_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub regime_switch: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            n_nodes: 8,
            n_steps: 6 * 7 * s.steps_per_day,
            alpha: s.alpha,
            noise_std: s.noise_std,
            base_min: s.base_range.0,
            base_max: s.base_range.1,
            amplitude_min: s.amplitude_range.0,
            amplitude_max: s.amplitude_range.1,
            regime_switch: s.regime_switch,
        }
    }
}

impl SynthSection {
    pub fn to_core(&self, steps_per_day: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            steps_per_day,
            alpha: self.alpha,
            noise_std: self.noise_std,
            base_range: (self.base_min, self.base_max),
            amplitude_range: (self.amplitude_min, self.amplitude_max),
            regime_switch: self.regime_switch,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub c_out: usize,
    pub hidden: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub diffusion_steps: usize,
    #[serde(with = "variant_text")]
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::from_core(&ModelConfig::reference(1))
    }
}

impl ModelSection {
    pub fn from_core(m: &ModelConfig) -> Self {
        ModelSection {
            c_out: m.c_out,
            hidden: m.hidden,
            head_dim: m.head_dim,
            heads: m.heads,
            diffusion_steps: m.diffusion_steps,
            variant: m.variant,
        }
    }

    pub fn to_core(&self, n_nodes: usize, history: usize, horizon: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            history,
            horizon,
            c_out: self.c_out,
            hidden: self.hidden,
            head_dim: self.head_dim,
            heads: self.heads,
            diffusion_steps: self.diffusion_steps,
            variant: self.variant,
        }
    }
}

mod variant_text {
    use adgcrnn_core::cell::Variant;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Variant, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Variant, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub tau: f64,
    pub patience: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            clip_norm: t.clip_norm,
            tau: t.tau,
            patience: t.patience,
            eval_batch_size: t.eval_batch_size,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            tau: self.tau,
            seed,
            patience: self.patience,
            eval_batch_size: self.eval_batch_size,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Format {
            path: origin.into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::read(path))?;
        Self::parse(&text, path)
    }

    /// Checks every section without touching any data.
    pub fn validate(&self) -> Result<()> {
        let resolution = self.resolution.to_core();
        resolution.validate()?;
        self.model
            .to_core(1, resolution.history, resolution.horizon)
            .validate()?;
        self.train.to_core(self.seed).validate()?;
        let s = &self.synth;
        if !(0.0..1.0).contains(&s.alpha) {
            return Err(CliError::Invalid(format!(
                "synth.alpha must lie in [0, 1), got {}",
                s.alpha
            )));
        }
        if s.noise_std < 0.0 || s.base_min > s.base_max || s.amplitude_min > s.amplitude_max {
            return Err(CliError::Invalid(
                "synth ranges must be ordered and noise_std non-negative".into(),
            ));
        }
        if s.n_nodes == 0 {
            return Err(CliError::Invalid("synth.n_nodes must be positive".into()));
        }
        Ok(())
    }

    /// `flag`, else the environment override, else the configured value.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.into();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(p) if !p.is_empty() => p.into(),
            _ => self.out_dir.clone(),
        }
    }
}

/// Evaluation worker count from the environment.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Invalid(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg = RunConfig::parse("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let m = cfg.model;
        assert_eq!(
            (m.c_out, m.hidden, m.head_dim, m.heads, m.diffusion_steps),
            (3, 32, 16, 3, 3)
        );
        assert_eq!(m.variant, Variant::Full);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("[model]\nhiden = 4\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("hiden"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[model]\nvariant = \"dyn\"\n",
            "[model]\nc_out = 4\n",
            "[train]\ntau = 0.5\n",
        ] {
            assert!(RunConfig::parse(text, Path::new("x.toml")).is_err(), "{text}");
        }
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.model.variant = Variant::DynamicWeights;
        cfg.synth.regime_switch = true;
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text, Path::new("x.toml")).unwrap(), cfg);
    }
}
