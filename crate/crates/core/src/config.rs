//! The run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;
use crate::error::Error;
use crate::inference::LookupTable;
use crate::privacy::PrivacyConfig;
use crate::seeds::substream_seed;
use crate::server::ServerConfig;
use crate::synthetic::WorldConfig;

/// Which flags raise a detection alarm when a method has both channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmRule {
    /// Any client's `Z̃_c` or `Z̃_a`.
    #[default]
    Either,
    /// Any client's `Z̃_a`; `Z̃_c` only feeds the diagnosis.
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Percentile of nominal `d²_c` used as `τ_c`.
    pub q_c: f64,
    pub q_a: f64,
    pub lookup: LookupTable,
    pub alarm: AlarmRule,
    /// Leading calibration steps dropped while the filters settle.
    pub burn_in: usize,
    /// A client is an episode's root when more than this share of the
    /// episode's steps name it root.
    pub vote_fraction: f64,
    /// Steps after each episode excluded from nominal run lengths.
    pub guard: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            q_c: 95.0,
            q_a: 95.0,
            lookup: LookupTable::default(),
            alarm: AlarmRule::default(),
            burn_in: 100,
            vote_fraction: 0.5,
            guard: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train_steps: usize,
    pub calib_steps: usize,
    pub test_steps: usize,
    /// Passes over the training split.
    pub epochs: usize,
    /// Independent seeds per sweep point.
    pub repeats: usize,
    /// Upper bound on concurrent runs in a sweep; zero means all cores.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_steps: 2000,
            calib_steps: 2000,
            test_steps: 40_000,
            epochs: 10,
            repeats: 1,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub client: ClientConfig,
    pub server: ServerConfig,
    pub privacy: PrivacyConfig,
    pub inference: InferenceConfig,
    pub experiment: ExperimentConfig,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    /// Parses `text`, then applies `section.key=value` overrides, each value
    /// read as a TOML literal (bare words fall back to strings).
    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self, Error> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one part");
            let mut node = &mut table;
            for p in parents {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
            }
            node.insert(last.to_string(), value);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The world config with its seed drawn from the master seed.
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: substream_seed(self.seed, "world", 0),
            ..self.world.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.world.validate()?;
        let inf = &self.inference;
        for q in [inf.q_c, inf.q_a] {
            if !(q > 0.0 && q <= 100.0) {
                return Err(Error::Config(format!("percentile {q} outside (0, 100]")));
            }
        }
        if !(0.0..1.0).contains(&inf.vote_fraction) {
            return Err(Error::Config("vote_fraction must lie in [0, 1)".into()));
        }
        for (name, v) in [
            ("client.eta_local", self.client.eta_local),
            ("client.eta_server", self.client.eta_server),
            ("server.eta", self.server.eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        for (name, v) in [("client.p0", self.client.p0), ("client.q", self.client.q), ("client.r", self.client.r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if self.experiment.epochs == 0 {
            return Err(Error::Config("experiment.epochs must be at least 1".into()));
        }
        Ok(())
    }
}
