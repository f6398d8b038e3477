//! Pipeline configuration: one JSON file, overridable from the command line.

use std::path::{Path, PathBuf};

use instyle_core::matcher::{MatchConfig, MatchOrder, DEFAULT_SHORTLIST};
use instyle_core::styler::{DEFAULT_NOISE_SIGMA, DEFAULT_RIDGE_LAMBDA, DEFAULT_THRESHOLD};
use instyle_core::synth::{self, SynthConfig};
use instyle_core::trainer::{
    ScheduleMode, SgdConfig, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM, DEFAULT_QUEUE_CAPACITY, DEFAULT_TEMPERATURE,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylePaths {
    pub tag: String,
    pub queries: PathBuf,
    pub test_texts: PathBuf,
}

/// Locations of an existing data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub pool: PathBuf,
    pub test_clips: PathBuf,
    pub truth: PathBuf,
    pub styles: Vec<StylePaths>,
}

impl DataPaths {
    /// The layout written by `synth`; style tags come from the truth header.
    pub fn from_dir(dir: &Path) -> Result<Self, CliError> {
        let truth = dir.join(synth::TRUTH_FILE);
        require_file(&truth)?;
        let (header, _) = synth::read_truth(&truth).map_err(|e| CliError::stage("load", e))?;
        Ok(Self {
            pool: dir.join(synth::POOL_FILE),
            test_clips: dir.join(synth::TEST_CLIPS_FILE),
            truth,
            styles: header
                .styles
                .into_iter()
                .map(|tag| StylePaths {
                    queries: dir.join(synth::queries_file(&tag)),
                    test_texts: dir.join(synth::test_texts_file(&tag)),
                    tag,
                })
                .collect(),
        })
    }

    pub fn check_exist(&self) -> Result<(), CliError> {
        for path in [&self.pool, &self.test_clips, &self.truth] {
            require_file(path)?;
        }
        for style in &self.styles {
            require_file(&style.queries)?;
            require_file(&style.test_texts)?;
        }
        Ok(())
    }
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Existing data set to use instead of generating one.
    pub data: Option<DataPaths>,
    pub synth: SynthConfig,
    pub threshold: f64,
    pub ridge_lambda: f64,
    pub noise_sigma: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Schedule used by the `train` stage; the pipeline runs both.
    pub schedule: ScheduleMode,
    pub queue_capacity: usize,
    pub match_order: MatchOrder,
    pub shortlist: usize,
    pub seed: u64,
    /// Accepted for reproducible experiment records; every stage is
    /// deterministic regardless.
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("instyle-out"),
            data: None,
            synth: SynthConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            ridge_lambda: DEFAULT_RIDGE_LAMBDA,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            temperature: DEFAULT_TEMPERATURE,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            epochs: DEFAULT_EPOCHS,
            schedule: ScheduleMode::InStyle,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            match_order: MatchOrder::IdOrder,
            shortlist: DEFAULT_SHORTLIST,
            seed: 7,
            deterministic: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        require_file(path)?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Usage(msg));
        if !(self.threshold > -1.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must be in (-1, 1)", self.threshold));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be non-negative",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.shortlist == 0 {
            return bad("shortlist must be positive".into());
        }
        if !(self.ridge_lambda >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("ridge_lambda and noise_sigma must be non-negative".into());
        }
        if self.data.is_none() {
            self.synth_config()
                .validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    /// Generator settings with the run seed applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            order: self.match_order,
            shortlist: self.shortlist,
        }
    }

    pub fn train_config(&self, mode: ScheduleMode) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            mode,
            seed: self.seed,
            sgd: SgdConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                queue_capacity: self.queue_capacity,
            },
        }
    }
}

/// Seed for style `index`'s caption noise.
pub fn style_seed(seed: u64, index: usize) -> u64 {
    seed ^ ((index as u64 + 1) << 40)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"threshold": 0.3, "synth": {"n_styles": 1}}"#).unwrap();
        assert_eq!(cfg.threshold, 0.3);
        assert_eq!(cfg.synth.n_styles, 1);
        assert_eq!(cfg.synth.pool_size, 8192);
        assert_eq!(cfg.temperature, 0.05);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"treshold": 0.3}"#).is_err());
    }

    #[test]
    fn validation() {
        for cfg in [
            PipelineConfig {
                threshold: 1.0,
                ..Default::default()
            },
            PipelineConfig {
                batch_size: 1,
                ..Default::default()
            },
            PipelineConfig {
                temperature: 0.0,
                ..Default::default()
            },
            PipelineConfig {
                synth: SynthConfig {
                    held_out_fraction: 1.5,
                    ..Default::default()
                },
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
        }
    }

    #[test]
    fn run_seed_drives_generation() {
        let cfg = PipelineConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(cfg.synth_config().seed, 11);
        assert_ne!(style_seed(11, 0), style_seed(11, 1));
    }
}
