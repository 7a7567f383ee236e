//! Run configuration: a TOML document with explicit keys, strict about
//! unknown fields, with every default materialized so an echoed config
//! fully describes the run.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{NhoError, Result};
use crate::model::ProblemSpec;
use crate::network::{init_network, NetworkParams, NetworkSpec, OutputMap};
use crate::problems::{default_s0, make_problem, BenchmarkId};
use crate::simulator::{InitialStateSampler, TimeGrid};
use crate::trainer::{Optimizer, TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: String,
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Grid steps; absent means 50 per unit horizon.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "default_gamma0")]
    pub gamma0: f64,
    #[serde(default = "default_k0")]
    pub k0: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_lambda_lyap")]
    pub lambda_lyap: f64,
    /// Mode; absent means ergodic for stationary benchmarks, finite
    /// horizon otherwise.
    #[serde(default)]
    pub mode: Option<TrainMode>,
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    /// Global-norm gradient clip; 0 disables.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_checkpoint_cadence")]
    pub checkpoint_cadence: usize,
    #[serde(default = "default_progress_cadence")]
    pub progress_cadence: usize,
    #[serde(default = "one_u64")]
    pub init_seed: u64,
    #[serde(default = "two_u64")]
    pub noise_seed: u64,
    /// Initial state; absent means the benchmark default.
    #[serde(default)]
    pub s0: Option<Vec<f64>>,
    /// Gaussian-cloud std around s0; 0 means a point mass.
    #[serde(default)]
    pub s0_cloud_std: f64,
    /// Hidden widths for both networks; absent means two layers of
    /// max(64, 2d).
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_ergodic_horizon")]
    pub ergodic_horizon: f64,
    /// Worker threads for increment sampling; outputs are bitwise
    /// independent of this value.
    #[serde(default = "one_usize")]
    pub workers: usize,
}

fn one_usize() -> usize {
    1
}

fn default_batch() -> usize {
    256
}
fn default_iterations() -> usize {
    20_000
}
fn default_optimizer() -> Optimizer {
    Optimizer::AdaptiveMoment
}
fn default_gamma0() -> f64 {
    1e-3
}
fn default_k0() -> f64 {
    1000.0
}
fn default_lambda_lyap() -> f64 {
    0.1
}
fn default_burn_in() -> f64 {
    0.2
}
fn default_clip() -> f64 {
    10.0
}
fn default_checkpoint_cadence() -> usize {
    500
}
fn default_progress_cadence() -> usize {
    100
}
fn one_u64() -> u64 {
    1
}
fn two_u64() -> u64 {
    2
}
fn default_ergodic_horizon() -> f64 {
    10.0
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty train section has defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_batch")]
    pub batch: usize,
    #[serde(default)]
    pub steps: Option<usize>,
    /// 1-based slice axis.
    #[serde(default = "one")]
    pub slice_axis: usize,
    #[serde(default = "default_slice_lo")]
    pub slice_lo: f64,
    #[serde(default = "default_slice_hi")]
    pub slice_hi: f64,
    #[serde(default = "default_slice_points")]
    pub slice_points: usize,
    /// 1-based coordinate for the expected-path table.
    #[serde(default = "one")]
    pub path_coordinate: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

fn default_eval_batch() -> usize {
    10_000
}
fn default_slice_lo() -> f64 {
    -3.0
}
fn default_slice_hi() -> f64 {
    3.0
}
fn default_slice_points() -> usize {
    101
}
fn default_eval_seed() -> u64 {
    0x45564145 // disjoint from the small training seed space
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("empty eval section has defaults")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| NhoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        // fails early on unknown benchmark names
        self.benchmark_id()?;
        if self.eval.slice_axis == 0 || self.eval.path_coordinate == 0 {
            return Err(NhoError::Config("slice_axis and path_coordinate are 1-based".into()));
        }
        Ok(())
    }

    pub fn benchmark_id(&self) -> Result<BenchmarkId> {
        BenchmarkId::parse(&self.benchmark, self.d, self.train.ergodic_horizon)
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        make_problem(&self.benchmark_id()?)
    }

    /// Fill every absent optional with its concrete default so the echo
    /// is self-describing.
    pub fn materialize(&self) -> Result<RunConfig> {
        let spec = self.problem()?;
        let mut out = self.clone();
        out.train.steps = Some(
            self.train
                .steps
                .unwrap_or_else(|| TimeGrid::default_steps(spec.horizon())),
        );
        out.train.mode = Some(self.mode());
        out.train.s0 = Some(self.s0_vector()?);
        out.train.hidden = Some(self.hidden_widths());
        out.eval.steps = Some(
            self.eval
                .steps
                .unwrap_or_else(|| TimeGrid::default_steps(spec.horizon())),
        );
        Ok(out)
    }

    pub fn mode(&self) -> TrainMode {
        self.train.mode.unwrap_or(
            if matches!(self.benchmark_id(), Ok(BenchmarkId::ErgodicOu { .. })) {
                TrainMode::Ergodic
            } else {
                TrainMode::FiniteHorizon
            },
        )
    }

    pub fn s0_vector(&self) -> Result<Vec<f64>> {
        let id = self.benchmark_id()?;
        match &self.train.s0 {
            Some(v) => {
                let d = make_problem(&id)?.d();
                if v.len() != d {
                    return Err(NhoError::Config(format!(
                        "s0 has {} components, problem dimension is {d}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
            None => Ok(default_s0(&id).to_vec()),
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.train
            .hidden
            .clone()
            .unwrap_or_else(|| vec![64.max(2 * self.d); 2])
    }

    pub fn s0_sampler(&self) -> Result<InitialStateSampler> {
        let center = Array1::from(self.s0_vector()?);
        Ok(if self.train.s0_cloud_std > 0.0 {
            InitialStateSampler::Cloud {
                center,
                std: self.train.s0_cloud_std,
            }
        } else {
            InitialStateSampler::Point(center)
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let spec = self.problem()?;
        Ok(TrainConfig {
            steps: self
                .train
                .steps
                .unwrap_or_else(|| TimeGrid::default_steps(spec.horizon())),
            batch: self.train.batch,
            iterations: self.train.iterations,
            optimizer: self.train.optimizer,
            gamma0: self.train.gamma0,
            k0: self.train.k0,
            lambda: self.train.lambda,
            lambda_lyap: self.train.lambda_lyap,
            noise_seed: self.train.noise_seed,
            mode: self.mode(),
            burn_in_fraction: self.train.burn_in_fraction,
            clip_norm: if self.train.clip_norm > 0.0 {
                Some(self.train.clip_norm)
            } else {
                None
            },
            checkpoint_cadence: self.train.checkpoint_cadence,
            progress_cadence: self.train.progress_cadence,
            s0: self.s0_sampler()?,
            out_dir: self.out_dir.clone(),
            workers: self.train.workers.max(1),
        })
    }

    /// Freshly initialized (control, field) networks per the config.
    pub fn init_networks(&self) -> Result<(NetworkParams, NetworkParams)> {
        let spec = self.problem()?;
        let time_input = !spec.stationary();
        let hidden = self.hidden_widths();
        let control = init_network(
            &NetworkSpec {
                state_dim: spec.d(),
                time_input,
                hidden_widths: hidden.clone(),
                output_dim: spec.m(),
                output_map: OutputMap::BoxBounded,
            },
            self.train.init_seed,
        )?;
        let field = init_network(
            &NetworkSpec {
                state_dim: spec.d(),
                time_input,
                hidden_widths: hidden,
                output_dim: spec.d(),
                output_map: OutputMap::Identity,
            },
            self.train.init_seed.wrapping_add(1),
        )?;
        Ok((control, field))
    }

    /// Write the fully materialized config next to the run artifacts.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let full = self.materialize()?;
        let text = toml::to_string_pretty(&full).map_err(|e| NhoError::Config(e.to_string()))?;
        std::fs::write(dir.join("config-echo.toml"), text)?;
        Ok(())
    }
}

/// Apply `key.path=value` overrides to a TOML document before parsing.
/// Values are parsed as TOML scalars (numbers, booleans, arrays) with a
/// string fallback.
pub fn apply_overrides(text: &str, sets: &[String]) -> Result<String> {
    let mut doc: toml::Value = toml::from_str(text).map_err(|e| NhoError::Config(e.to_string()))?;
    for set in sets {
        let (path, raw) = set
            .split_once('=')
            .ok_or_else(|| NhoError::Config(format!("override '{set}' is not key=value")))?;
        let value: toml::Value = match format!("x = {raw}").parse::<toml::Table>() {
            Ok(t) => t["x"].clone(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let parts: Vec<&str> = path.split('.').collect();
        let mut node = &mut doc;
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| NhoError::Config(format!("override path '{path}' hits a non-table")))?;
            node = table
                .entry(part.to_string())
                .or_insert(toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| NhoError::Config(format!("override path '{path}' hits a non-table")))?;
        table.insert(parts[parts.len() - 1].to_string(), value);
    }
    toml::to_string(&doc).map_err(|e| NhoError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse("benchmark = \"p1-terminal-log\"\nd = 10\n").unwrap();
        assert_eq!(cfg.train.batch, 256);
        assert_eq!(cfg.train.iterations, 20_000);
        let full = cfg.materialize().unwrap();
        assert_eq!(full.train.steps, Some(50));
        assert_eq!(full.train.hidden, Some(vec![64, 64]));
        assert_eq!(full.train.mode, Some(TrainMode::FiniteHorizon));
        assert_eq!(full.train.s0, Some(vec![0.0; 10]));
    }

    #[test]
    fn misspelled_key_is_rejected_by_name() {
        let err = RunConfig::parse("benchmark = \"p1-terminal-log\"\nbatchh = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batchh"), "message should name the key: {msg}");
    }

    #[test]
    fn missing_benchmark_is_an_error_naming_the_key() {
        let err = RunConfig::parse("d = 4\n").unwrap_err();
        assert!(err.to_string().contains("benchmark"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse("benchmark = \"p2-double-well\"\nd = 3\n").unwrap();
        cfg.echo(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config-echo.toml")).unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg.materialize().unwrap());
        // echoing the echo is a fixed point
        assert_eq!(back.materialize().unwrap(), back);
    }

    #[test]
    fn overrides_take_effect_and_parse_types() {
        let base = "benchmark = \"p1-terminal-log\"\nd = 2\n";
        let text = apply_overrides(
            base,
            &[
                "train.batch=64".to_string(),
                "train.gamma0=5e-4".to_string(),
                "train.optimizer=\"plain-sgd\"".to_string(),
                "eval.slice_points=11".to_string(),
            ],
        )
        .unwrap();
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.train.batch, 64);
        assert_eq!(cfg.train.gamma0, 5e-4);
        assert_eq!(cfg.train.optimizer, Optimizer::PlainSgd);
        assert_eq!(cfg.eval.slice_points, 11);
    }

    #[test]
    fn bad_override_syntax_is_an_error() {
        let base = "benchmark = \"p1-terminal-log\"\n";
        assert!(apply_overrides(base, &["no-equals".to_string()]).is_err());
    }

    #[test]
    fn unknown_benchmark_rejected_at_parse() {
        let err = RunConfig::parse("benchmark = \"p9-nope\"\n").unwrap_err();
        assert!(matches!(err, NhoError::UnknownBenchmark(_)));
    }

    #[test]
    fn ergodic_benchmark_defaults_to_ergodic_mode() {
        let cfg = RunConfig::parse("benchmark = \"ergodic-ou\"\n").unwrap();
        assert_eq!(cfg.mode(), TrainMode::Ergodic);
        let spec = cfg.problem().unwrap();
        assert!(spec.stationary());
        assert_eq!(spec.horizon(), 10.0);
        // and the networks drop the time input
        let (c, f) = cfg.init_networks().unwrap();
        assert!(!c.spec.time_input);
        assert!(!f.spec.time_input);
    }

    #[test]
    fn s0_dimension_mismatch_is_caught() {
        let cfg = RunConfig::parse(
            "benchmark = \"p1-terminal-log\"\nd = 3\n[train]\ns0 = [1.0, 2.0]\n",
        )
        .unwrap();
        assert!(cfg.s0_vector().is_err());
    }

    #[test]
    fn cloud_std_selects_the_cloud_sampler() {
        let cfg = RunConfig::parse(
            "benchmark = \"p1-terminal-log\"\nd = 2\n[train]\ns0_cloud_std = 0.1\n",
        )
        .unwrap();
        assert!(matches!(
            cfg.s0_sampler().unwrap(),
            InitialStateSampler::Cloud { .. }
        ));
    }
}
