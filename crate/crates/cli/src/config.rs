//! Run configuration: built-in defaults, overlaid by an optional JSON file,
//! overlaid by command-line flags.

use std::path::{Path, PathBuf};

use iars_core::contour::ContourConfig;
use iars_core::data::synth::SyntheticGenConfig;
use iars_core::model::{ArchConfig, VariantFlags};
use iars_core::training::{FocalLossParams, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Master seed. Copied into `train.seed` and `synth.seed`, and used for
    /// weight initialisation.
    pub seed: u64,
    /// Worker threads for per-image work.
    pub jobs: usize,
    /// Network variant, `m1` to `m4`.
    pub variant: String,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub focal: FocalLossParams,
    pub contour: ContourConfig,
    pub synth: SyntheticGenConfig,
    /// Dataset manifest (or the directory holding `manifest.jsonl`).
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let seed = 7;
        CliConfig {
            seed,
            jobs: 1,
            variant: "m4".into(),
            arch: ArchConfig::desk(48, 64, 4, 0.125),
            train: TrainConfig {
                seed,
                ..Default::default()
            },
            focal: FocalLossParams::default(),
            contour: ContourConfig::default(),
            synth: SyntheticGenConfig {
                seed,
                ..Default::default()
            },
            data: None,
            checkpoint: None,
        }
    }
}

impl CliConfig {
    pub fn flags(&self) -> Result<VariantFlags, CliError> {
        self.variant.parse().map_err(|e| CliError::Usage(format!("{e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: iars_core::error::Error| CliError::Usage(e.to_string());
        self.flags()?;
        if self.jobs == 0 {
            return Err(CliError::Usage("jobs must be at least 1".into()));
        }
        self.arch.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.focal.validate().map_err(usage)?;
        self.contour.validate().map_err(usage)?;
        self.synth.validate().map_err(usage)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub variant: Option<String>,
    pub width_factor: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    /// `Some(None)` switches class weighting off.
    pub alpha: Option<Option<f64>>,
    pub gamma: Option<f64>,
    pub harmonics: Option<usize>,
    pub shrinkage: Option<f64>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub synth_count: Option<usize>,
    pub synth_height: Option<usize>,
    pub synth_width: Option<usize>,
}

/// Parses `text` as a config file, reporting syntax errors with their
/// line and column.
pub fn parse_config(text: &str, origin: &Path) -> Result<CliConfig, CliError> {
    serde_json::from_str(text).map_err(|e| {
        CliError::Usage(format!(
            "{}: line {}, column {}: {e}",
            origin.display(),
            e.line(),
            e.column()
        ))
    })
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<CliConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_config(&text, p)?
        }
        None => CliConfig::default(),
    };
    apply(&mut cfg, overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn apply(cfg: &mut CliConfig, o: &Overrides) {
    macro_rules! set {
        ($src:expr => $($dst:expr),+) => {
            if let Some(v) = $src.clone() {
                $($dst = v.clone();)+
            }
        };
    }
    set!(o.seed => cfg.seed);
    set!(o.jobs => cfg.jobs);
    set!(o.variant => cfg.variant);
    set!(o.width_factor => cfg.arch.width_factor);
    set!(o.epochs => cfg.train.epochs);
    set!(o.batch_size => cfg.train.batch_size);
    set!(o.lr => cfg.train.optimizer.learning_rate);
    set!(o.alpha => cfg.focal.alpha);
    set!(o.gamma => cfg.focal.gamma);
    set!(o.harmonics => cfg.contour.harmonics);
    set!(o.shrinkage => cfg.contour.shrinkage);
    set!(o.synth_count => cfg.synth.count);
    set!(o.synth_height => cfg.synth.height);
    set!(o.synth_width => cfg.synth.width);
    if o.data.is_some() {
        cfg.data = o.data.clone();
    }
    if o.checkpoint.is_some() {
        cfg.checkpoint = o.checkpoint.clone();
    }
    cfg.variant = cfg.variant.to_ascii_lowercase();
    cfg.train.seed = cfg.seed;
    cfg.synth.seed = cfg.seed;
}
