//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`sampler.steps`). Lines starting with `#` and blank lines
//! are ignored. Unknown or repeated keys are errors. Every key has a default,
//! possibly empty (meaning "unset"), and the fully resolved table is what gets
//! echoed next to each run's outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "seed",
        "0",
        "seed for every random draw (noises, subsets, probes)",
    ),
    ("dataset.path", "", "image directory or tensor file"),
    ("dataset.limit", "", "keep at most this many images"),
    (
        "dataset.shuffle_seed",
        "",
        "shuffle before applying the limit",
    ),
    (
        "dataset.synthetic",
        "",
        "use N synthetic images instead of dataset.path",
    ),
    (
        "dataset.synthetic_shape",
        "8x8x3",
        "HxWxC of synthetic images",
    ),
    ("schedule.kind", "vp", "vp, ve or subvp"),
    ("schedule.beta_min", "0.1", ""),
    ("schedule.beta_max", "20", ""),
    ("schedule.sigma_min", "0.01", ""),
    ("schedule.sigma_max", "50", ""),
    ("schedule.t_min", "0.001", ""),
    ("schedule.t_max", "1", ""),
    (
        "sampler.method",
        "heun2",
        "euler, heun2, expint1, expint2 or expint3",
    ),
    ("sampler.steps", "64", ""),
    ("sampler.grid", "uniform", "uniform or logsnr"),
    ("sampler.n", "10000", "number of samples"),
    (
        "sampler.noise_path",
        "",
        "tensor file of start states used as-is",
    ),
    (
        "sampler.model_id",
        "",
        "sample set name (default: method-steps)",
    ),
    (
        "sampler.png_grid",
        "false",
        "also write a PNG contact sheet",
    ),
    ("metrics.backend", "pixel", "pixel, patch or external"),
    (
        "metrics.tau",
        "",
        "similarity threshold (default per backend)",
    ),
    ("metrics.patch", "8", ""),
    ("metrics.stride", "4", ""),
    (
        "metrics.embeddings",
        "",
        "(N, D) tensor file for the external backend",
    ),
    ("metrics.embedding_ids", "", "one id per embedding row"),
    ("metrics.metric", "rp", "rp or mae"),
    ("metrics.mae_threshold", "15", "8-bit MAE threshold"),
    ("experiment.grid", "100", "hyperplane cells per axis"),
    ("experiment.alpha_lo", "-0.1", ""),
    ("experiment.alpha_hi", "1.1", ""),
    ("experiment.beta_lo", "-0.1", ""),
    ("experiment.beta_hi", "1.1", ""),
    (
        "experiment.anchors",
        "0,1,2",
        "noise ids of the three hyperplane anchors",
    ),
    ("experiment.sizes", "64,128,256,512", "sweep dataset sizes"),
    (
        "experiment.samplers",
        "euler:512,heun2:64",
        "sweep samplers as method:steps",
    ),
    ("experiment.n_samples", "100", "sweep samples per sampler"),
    (
        "inverse.mask",
        "easy",
        "easy, hard or a PGM path (white = observed)",
    ),
    (
        "inverse.target",
        "0",
        "dataset index of the image to reconstruct",
    ),
    ("inverse.noise_id", "0", "noise id of the start state"),
    ("inverse.n_dps", "34", ""),
    ("inverse.xi", "1", "step size, one value or one per step"),
    ("inverse.method", "expint3", ""),
    ("inverse.grid", "uniform", ""),
    ("inverse.nfe_budget", "100", ""),
    (
        "inverse.noise_level",
        "0",
        "measurement noise standard deviation",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                )));
            };
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(CliError::Config(format!(
                    "line {}: key {key:?} given twice",
                    n + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match KEYS.iter().find(|(k, _, _)| *k == key) {
            Some((k, _, _)) => {
                self.values.insert(k, value.to_owned());
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a config key"))
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Err(CliError::Config(format!("{key} is required")));
        }
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.is_set(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Config(format!("{key}: {s:?}: {e}")))
            })
            .collect()
    }

    /// The resolved table in key order, one `key = value` per line.
    pub fn render(&self) -> String {
        self.values.iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }
}
