//! Stochastic-gradient training loop: rollout, loss, backward pass, and a
//! parameter update with a Robbins-Monro step-size schedule. Plain SGD
//! matches the convergence theory; an adaptive-moment optimizer is the
//! practical default.

use ndarray::Array2;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{NhoError, Result};
use crate::losses::{ergodic_objective, finite_horizon_objective, LossReport};
use crate::model::ProblemSpec;
use crate::network::{NetworkDump, NetworkParams};
use crate::simulator::{rollout, InitialStateSampler, NoiseStream, RolloutOptions, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainSgd,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    FiniteHorizon,
    Ergodic,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub iterations: usize,
    pub optimizer: Optimizer,
    /// Schedule gamma_k = gamma0 / (1 + k / k0).
    pub gamma0: f64,
    pub k0: f64,
    pub lambda: f64,
    pub lambda_lyap: f64,
    pub noise_seed: u64,
    pub mode: TrainMode,
    pub burn_in_fraction: f64,
    /// Global-norm gradient clip; None disables (theorem-mechanics runs).
    pub clip_norm: Option<f64>,
    pub checkpoint_cadence: usize,
    /// Progress line every this many iterations (0 = silent).
    pub progress_cadence: usize,
    pub s0: InitialStateSampler,
    /// Output directory for history/checkpoints; None keeps everything in
    /// memory.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for increment sampling; results are bitwise
    /// independent of this value.
    pub workers: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.iterations == 0 {
            return Err(NhoError::Config("steps, batch and iterations must be >= 1".into()));
        }
        if !(self.gamma0 > 0.0) || !(self.k0 > 0.0) {
            return Err(NhoError::Config("gamma0 and k0 must be > 0".into()));
        }
        if self.lambda < 0.0 || self.lambda_lyap < 0.0 {
            return Err(NhoError::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(NhoError::Config("burn-in fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// gamma_k = gamma0 / (1 + k/k0): divergent sum, convergent sum of
/// squares.
pub fn lr_schedule(k: usize, gamma0: f64, k0: f64) -> f64 {
    gamma0 / (1.0 + k as f64 / k0)
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// In-place parameter update. `params` and `grads` are parallel slices of
/// equally-shaped arrays.
pub fn optimizer_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut OptimizerState,
    gamma: f64,
    optimizer: Optimizer,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NhoError::shape(
            "optimizer step",
            params.len().to_string(),
            grads.len().to_string(),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NhoError::NonFiniteGradient(format!(
                "parameter block {i} at optimizer step {}",
                state.step
            )));
        }
    }
    match optimizer {
        Optimizer::PlainSgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                **p -= &(g * gamma);
            }
        }
        Optimizer::AdaptiveMoment => {
            if state.m.is_empty() {
                state.m = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
                state.v = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
            }
            let t = (state.step + 1) as i32;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                m.zip_mut_with(g, |mi, &gi| *mi = BETA1 * *mi + (1.0 - BETA1) * gi);
                v.zip_mut_with(g, |vi, &gi| *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi);
                ndarray::Zip::from(&mut **p)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|pi, &mi, &vi| {
                        let mh = mi / bc1;
                        let vh = vi / bc2;
                        *pi -= gamma * mh / (vh.sqrt() + ADAM_EPS);
                    });
            }
        }
    }
    state.step += 1;
    Ok(())
}

/// Scale gradients so their global Euclidean norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

pub struct TrainResult {
    pub control: NetworkParams,
    pub field: NetworkParams,
    pub history: Vec<LossReport>,
}

fn write_checkpoint(dir: &Path, control: &NetworkParams, field: &NetworkParams, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cj = serde_json::to_string_pretty(&NetworkDump::from_params(control, seed))
        .map_err(|e| NhoError::Checkpoint(e.to_string()))?;
    let fj = serde_json::to_string_pretty(&NetworkDump::from_params(field, seed))
        .map_err(|e| NhoError::Checkpoint(e.to_string()))?;
    fs::write(dir.join("control.json"), cj)?;
    fs::write(dir.join("field.json"), fj)?;
    Ok(())
}

/// One full training run. Deterministic given the initial parameters and
/// the noise seed. History lines go to `<out_dir>/history.tsv`; the
/// latest checkpoint to `<out_dir>/control.json` and `field.json`. On a
/// rollout blow-up the last written checkpoint is preserved and the error
/// propagated.
pub fn train(
    config: &TrainConfig,
    spec: &ProblemSpec,
    mut control: NetworkParams,
    mut field: NetworkParams,
) -> Result<TrainResult> {
    config.validate()?;
    let grid = TimeGrid::uniform(spec.horizon(), config.steps)?;
    let noise = NoiseStream::new(config.noise_seed);
    let mut state = OptimizerState::new();
    let mut history = Vec::with_capacity(config.iterations);

    let mut history_file = match &config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("history.tsv"))?)
        }
        None => None,
    };

    for k in 0..config.iterations {
        let mut tape = Tape::new();
        let cn = control.register(&mut tape);
        let fnet = field.register(&mut tape);
        // fresh initial states and increments every iteration
        let s0 = config
            .s0
            .sample(config.batch, config.noise_seed.wrapping_add(k as u64));
        let mut opts = RolloutOptions::new(config.batch);
        opts.path_offset = (k * config.batch) as u64;
        opts.workers = config.workers.max(1);
        let batch = rollout(&mut tape, &cn, &fnet, spec, &grid, &s0, &noise, &opts)?;
        let nodes = match config.mode {
            TrainMode::FiniteHorizon => {
                finite_horizon_objective(&mut tape, &batch, spec, config.lambda)?
            }
            TrainMode::Ergodic => ergodic_objective(
                &mut tape,
                &batch,
                spec,
                config.lambda_lyap,
                config.burn_in_fraction,
            )?,
        };
        let report = nodes.report(&tape);

        let mut param_nodes = cn.param_nodes();
        param_nodes.extend(fnet.param_nodes());
        let mut grads = tape.grad(nodes.total, &param_nodes)?;
        if let Some(max) = config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        let gamma = lr_schedule(k, config.gamma0, config.k0);
        {
            let mut targets: Vec<&mut Array2<f64>> = control
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.w, &mut l.b])
                .chain(field.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]))
                .collect();
            optimizer_step(&mut targets, &grads, &mut state, gamma, config.optimizer)?;
        }

        if let Some(fh) = history_file.as_mut() {
            writeln!(fh, "{}", report.line(k, gamma))?;
        }
        if config.progress_cadence > 0 && k % config.progress_cadence == 0 {
            eprintln!(
                "iter {k}: total {:.6e} terminal {:.6e} lr {:.3e}",
                report.total, report.terminal, gamma
            );
        }
        history.push(report);

        if let Some(dir) = &config.out_dir {
            let last = k + 1 == config.iterations;
            if last || (config.checkpoint_cadence > 0 && (k + 1) % config.checkpoint_cadence == 0) {
                write_checkpoint(dir, &control, &field, config.noise_seed)?;
            }
        }
    }

    Ok(TrainResult {
        control,
        field,
        history,
    })
}
