//! Run configuration: a flat key=value file with command-line overrides
//! of the same keys. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::model::{AblationMode, HyperConfig};
use crate::optim::AdamConfig;
use crate::protocol::{PartitionScheme, TrainSettings, TransportKind};
use crate::tensor::Activation;
use crate::verify::{GammaOrder, VerifyConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {detail}")]
    BadValue { key: String, detail: String },
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed line {line} in {path}: expected key=value")]
    Malformed { path: PathBuf, line: usize },
    #[error("missing required key '{0}'")]
    Missing(String),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // Model hyperparameters.
    pub alpha: f64,
    pub d_n: usize,
    pub d_t: usize,
    pub h_dim: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub d_phi: usize,
    pub d_psi: usize,
    pub activation: Activation,
    pub mode: AblationMode,
    // Federation.
    pub clients: usize,
    pub global_rounds: usize,
    pub local_rounds: usize,
    pub batch: usize,
    pub seed: u64,
    pub transport: TransportKind,
    pub timeout_secs: u64,
    pub partition_scheme: PartitionScheme,
    // Optimizer.
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    // Paths.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub name: String,
    // Synthetic data generation.
    pub synth_nodes: usize,
    pub synth_steps: usize,
    pub synth_features: usize,
    pub synth_steps_per_day: usize,
    pub synth_noise: f64,
    // Verification knobs.
    pub verify_tolerance: Option<f64>,
    pub inject_gamma_bug: bool,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.3,
            d_n: 64,
            d_t: 64,
            h_dim: 64,
            t_in: 4,
            t_out: 4,
            d_phi: 4,
            d_psi: 4,
            activation: Activation::Relu,
            mode: AblationMode::Full,
            clients: 4,
            global_rounds: 30,
            local_rounds: 5,
            batch: 16,
            seed: 0,
            transport: TransportKind::Memory,
            timeout_secs: 300,
            partition_scheme: PartitionScheme::ContiguousEqual,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_decay: 0.3,
            lr_milestones: vec![5, 20, 40, 70, 90],
            manifest: None,
            out_dir: PathBuf::from("out"),
            name: "synth".into(),
            synth_nodes: 16,
            synth_steps: 2000,
            synth_features: 2,
            synth_steps_per_day: 24,
            synth_noise: 0.05,
            verify_tolerance: None,
            inject_gamma_bug: false,
            trace: false,
        }
    }
}

impl RunConfig {
    pub fn hyper(&self) -> HyperConfig {
        HyperConfig {
            alpha: self.alpha,
            d_n: self.d_n,
            d_t: self.d_t,
            h_dim: self.h_dim,
            t_in: self.t_in,
            t_out: self.t_out,
            d_phi: self.d_phi,
            d_psi: self.d_psi,
            activation: self.activation,
            mode: self.mode,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decay_factor: self.lr_decay,
            milestones: self.lr_milestones.clone(),
            ..AdamConfig::default()
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            hyper: self.hyper(),
            adam: self.adam(),
            global_rounds: self.global_rounds,
            local_rounds: self.local_rounds,
            batch: self.batch,
            seed: self.seed,
            timeout: Duration::from_secs(self.timeout_secs),
            trace: self.trace,
        }
    }

    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            seed: self.seed,
            tolerance_override: self.verify_tolerance,
            gamma_order: if self.inject_gamma_bug {
                GammaOrder::LMajor
            } else {
                GammaOrder::KMajor
            },
        }
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |detail: String| ConfigError::BadValue {
            key: key.to_string(),
            detail,
        };
        macro_rules! parse {
            ($slot:expr) => {
                $slot = value.parse().map_err(|e| bad(format!("{e}")))?
            };
        }
        match key {
            "alpha" => parse!(self.alpha),
            "d_n" => parse!(self.d_n),
            "d_t" => parse!(self.d_t),
            "h_dim" => parse!(self.h_dim),
            "t_in" => parse!(self.t_in),
            "t_out" => parse!(self.t_out),
            "d_phi" => parse!(self.d_phi),
            "d_psi" => parse!(self.d_psi),
            "activation" => {
                self.activation =
                    Activation::from_name(value).map_err(|e| bad(e.to_string()))?
            }
            "mode" => self.mode = AblationMode::from_name(value).map_err(|e| bad(e.to_string()))?,
            "clients" => parse!(self.clients),
            "global_rounds" => parse!(self.global_rounds),
            "local_rounds" => parse!(self.local_rounds),
            "batch" => parse!(self.batch),
            "seed" => parse!(self.seed),
            "transport" => {
                self.transport = match value {
                    "memory" => TransportKind::Memory,
                    "tcp" => TransportKind::Tcp,
                    other => return Err(bad(format!("unknown transport '{other}'"))),
                }
            }
            "timeout_secs" => parse!(self.timeout_secs),
            "partition_scheme" => {
                self.partition_scheme = match value {
                    "contiguous-equal" => PartitionScheme::ContiguousEqual,
                    "contiguous-skewed" => PartitionScheme::ContiguousSkewed(2),
                    other => return Err(bad(format!("unknown scheme '{other}'"))),
                }
            }
            "partition_skew" => {
                let skew: u32 = value.parse().map_err(|e| bad(format!("{e}")))?;
                self.partition_scheme = PartitionScheme::ContiguousSkewed(skew);
            }
            "lr" => parse!(self.lr),
            "weight_decay" => parse!(self.weight_decay),
            "lr_decay" => parse!(self.lr_decay),
            "lr_milestones" => {
                self.lr_milestones = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(format!("{e}")))?
            }
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "name" => self.name = value.to_string(),
            "synth_nodes" => parse!(self.synth_nodes),
            "synth_steps" => parse!(self.synth_steps),
            "synth_features" => parse!(self.synth_features),
            "synth_steps_per_day" => parse!(self.synth_steps_per_day),
            "synth_noise" => parse!(self.synth_noise),
            "verify_tolerance" => {
                self.verify_tolerance =
                    Some(value.parse().map_err(|e| bad(format!("{e}")))?)
            }
            "inject_gamma_bug" => parse!(self.inject_gamma_bug),
            "trace" => parse!(self.trace),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Read a flat key=value file.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Parse `--key=value` arguments; `--config=path` loads a file first,
    /// later assignments override earlier ones.
    pub fn from_args(args: &[String]) -> Result<RunConfig, ConfigError> {
        let mut assignments: Vec<(String, String)> = Vec::new();
        let mut cfg = RunConfig::default();
        for arg in args {
            let stripped = arg.strip_prefix("--").ok_or_else(|| ConfigError::BadValue {
                key: arg.clone(),
                detail: "expected --key=value".into(),
            })?;
            let (k, v) = stripped.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: arg.clone(),
                detail: "expected --key=value".into(),
            })?;
            if k == "config" {
                cfg = RunConfig::load(Path::new(v))?;
            } else {
                assignments.push((k.to_string(), v.to_string()));
            }
        }
        for (k, v) in assignments {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Render as a key=value map (for echoing into checkpoints).
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("alpha".into(), self.alpha.to_string());
        m.insert("d_n".into(), self.d_n.to_string());
        m.insert("d_t".into(), self.d_t.to_string());
        m.insert("h_dim".into(), self.h_dim.to_string());
        m.insert("t_in".into(), self.t_in.to_string());
        m.insert("t_out".into(), self.t_out.to_string());
        m.insert("d_phi".into(), self.d_phi.to_string());
        m.insert("d_psi".into(), self.d_psi.to_string());
        m.insert("activation".into(), self.activation.name().into());
        m.insert("mode".into(), self.mode.name().into());
        m.insert("clients".into(), self.clients.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("batch".into(), self.batch.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_match_reference_configuration() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.alpha, 0.3);
        assert_eq!(cfg.d_n, 64);
        assert_eq!(cfg.d_t, 64);
        assert_eq!(cfg.batch, 16);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.lr_decay, 0.3);
        assert_eq!(cfg.lr_milestones, vec![5, 20, 40, 70, 90]);
        assert_eq!(cfg.clients, 4);
        assert_eq!(cfg.d_phi, 4);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.set("bogus", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            cfg.set("alpha", "not-a-number"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# comment\nclients=8\nseed=5\nmode=no_gnea").unwrap();
        drop(f);

        let args = vec![
            format!("--config={}", path.display()),
            "--seed=9".to_string(),
            "--transport=tcp".to_string(),
        ];
        let cfg = RunConfig::from_args(&args).unwrap();
        assert_eq!(cfg.clients, 8);
        assert_eq!(cfg.seed, 9, "override wins");
        assert_eq!(cfg.transport, TransportKind::Tcp);
        assert_eq!(cfg.mode, AblationMode::NoGnea);

        let bad = RunConfig::from_args(&["--nope=1".to_string()]);
        assert!(matches!(bad, Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn milestones_parse() {
        let mut cfg = RunConfig::default();
        cfg.set("lr_milestones", "2,4,8").unwrap();
        assert_eq!(cfg.lr_milestones, vec![2, 4, 8]);
    }
}
