use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metatrans::synth::GeneratorSpec;

use crate::error::{usage, CliResult};

/// Run configuration file (TOML). Every field is optional; command-line
/// flags override the file, and the file overrides built-in defaults.
///
/// ```toml
/// seed = 3
/// out = "runs/full"
/// data = "data/bench"
/// preset = "desk"
/// variant = "full"
/// epochs = 60
/// lambda1 = 0.05
/// grid = [0.0, 0.01, 0.05]
///
/// [generator]          # full synthetic spec for `generate`
/// d = 32
/// T = 16
/// # ...
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub preset: Option<String>,
    pub variant: Option<String>,
    pub classes: Option<usize>,
    pub epochs: Option<usize>,
    pub lambda1: Option<f64>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub pseudo_start_epoch: Option<usize>,
    pub pseudo_threshold: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub checkpoint: Option<PathBuf>,
    pub theorem: Option<String>,
    pub oracle: Option<String>,
    pub samples: Option<usize>,
    pub frame: Option<usize>,
    pub generator: Option<GeneratorSpec>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| usage(format!("config {}: {}", path.display(), e.message())))?;
        if let Some(spec) = &cfg.generator {
            spec.validate().map_err(|e| usage(format!("config {}: generator: {e}", path.display())))?;
        }
        Ok(cfg)
    }
}

/// `a` when given, else `b`.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Parses `0,0.01,0.05` into a λ grid.
pub fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| {
            let x: f64 = v.trim().parse().map_err(|_| usage(format!("grid value `{v}` is not a number")))?;
            if x.is_finite() && x >= 0.0 {
                Ok(x)
            } else {
                Err(usage(format!("grid value `{v}` must be finite and non-negative")))
            }
        })
        .collect()
}
