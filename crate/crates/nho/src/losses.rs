//! Training objectives, computed from a rolled-out trajectory batch as
//! differentiable scalars on the tape.
//!
//! Finite-horizon mode: terminal mismatch E||p_T - grad G(S_T)||^2 plus an
//! optional gradient regularizer lambda * int E||grad_s Phi||_F^2 dt.
//! Ergodic mode: variance of the Hamiltonian along paths plus a Lyapunov
//! drift regularizer. Time integrals use left-endpoint Riemann sums on the
//! simulation grid.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::model::ProblemSpec;
use crate::simulator::TrajectoryBatch;

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub terminal: f64,
    pub grad_reg: f64,
    pub ergodic: f64,
    pub lyapunov: f64,
    pub total: f64,
    pub lambda: f64,
    pub lambda_lyap: f64,
}

impl LossReport {
    pub fn line(&self, iteration: usize, lr: f64) -> String {
        format!(
            "{iteration}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}",
            self.terminal, self.grad_reg, self.ergodic, self.lyapunov, self.total, lr
        )
    }
}

/// Tape nodes of the assembled objective. `total` is the training scalar;
/// component nodes are kept for reporting.
#[derive(Debug)]
pub struct LossNodes {
    pub terminal: Option<NodeId>,
    pub grad_reg: Option<NodeId>,
    pub ergodic: Option<NodeId>,
    pub lyapunov: Option<NodeId>,
    pub total: NodeId,
    pub lambda: f64,
    pub lambda_lyap: f64,
}

impl LossNodes {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let get = |n: Option<NodeId>| n.map(|id| tape.scalar(id)).unwrap_or(0.0);
        LossReport {
            terminal: get(self.terminal),
            grad_reg: get(self.grad_reg),
            ergodic: get(self.ergodic),
            lyapunov: get(self.lyapunov),
            total: tape.scalar(self.total),
            lambda: self.lambda,
            lambda_lyap: self.lambda_lyap,
        }
    }
}

/// Batch mean of ||p_T - grad G(S_T)||^2.
pub fn terminal_loss(tape: &mut Tape, batch: &TrajectoryBatch, spec: &ProblemSpec) -> NodeId {
    let s_t = *batch.s_nodes.last().unwrap();
    let p_t = *batch.p_nodes.last().unwrap();
    let target = spec.grad_terminal_tape(tape, s_t);
    let resid = tape.sub(p_t, target);
    let norms = tape.row_squared_norm(resid);
    tape.mean(norms)
}

/// Batch-mean squared Frobenius norm of grad_s Phi at one recorded step.
fn frobenius_mean(tape: &mut Tape, jac_cols: &[NodeId]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &col in jac_cols {
        let sq = tape.row_squared_norm(col);
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq),
        });
    }
    let per_path = acc.expect("at least one Jacobian column");
    tape.mean(per_path)
}

/// Left-endpoint quadrature of lambda * E||grad_s Phi(t, S_t)||_F^2 over
/// the grid (without the lambda factor; the caller applies it so lambda=0
/// can skip the node entirely).
pub fn gradient_regularizer(tape: &mut Tape, batch: &TrajectoryBatch) -> NodeId {
    let mut total: Option<NodeId> = None;
    for (i, step) in batch.step_nodes.iter().enumerate() {
        let f = frobenius_mean(tape, &step.jac_cols);
        let dt = batch.grid.dt(i);
        total = Some(match total {
            None => tape.scale(f, dt),
            Some(t) => tape.add_scaled(t, f, dt),
        });
    }
    total.expect("non-empty grid")
}

/// Steps excluded from ergodic statistics (default: first 20%).
pub fn burn_in_steps(steps: usize, fraction: f64) -> usize {
    ((steps as f64 * fraction).floor() as usize).min(steps.saturating_sub(1))
}

/// Eq.-8 objective: batch mean over paths of the time-average of
/// (H(S_t) - path time-mean of H)^2, burn-in excluded. Requires a
/// stationary rollout (Hamiltonian nodes recorded).
pub fn ergodic_loss(tape: &mut Tape, batch: &TrajectoryBatch, burn_in: usize) -> NodeId {
    assert!(
        !batch.h_nodes.is_empty(),
        "ergodic loss needs a stationary rollout with recorded Hamiltonians"
    );
    let steps = batch.h_nodes.len();
    assert!(burn_in < steps, "burn-in swallows the whole horizon");
    let total_time: f64 = (burn_in..steps).map(|i| batch.grid.dt(i)).sum();

    // path time-mean of H (B x 1)
    let mut mean_h: Option<NodeId> = None;
    for i in burn_in..steps {
        let w = batch.grid.dt(i) / total_time;
        mean_h = Some(match mean_h {
            None => tape.scale(batch.h_nodes[i], w),
            Some(m) => tape.add_scaled(m, batch.h_nodes[i], w),
        });
    }
    let mean_h = mean_h.unwrap();

    // time-average of squared deviation, same weights
    let mut var: Option<NodeId> = None;
    for i in burn_in..steps {
        let dev = tape.sub(batch.h_nodes[i], mean_h);
        let sq = tape.mul(dev, dev);
        let w = batch.grid.dt(i) / total_time;
        var = Some(match var {
            None => tape.scale(sq, w),
            Some(v) => tape.add_scaled(v, sq, w),
        });
    }
    let var = var.unwrap();
    tape.mean(var)
}

/// Eq.-9 drift term: time-and-batch average of (L_S U)(S_t) for
/// U(s) = ||s||^2, which is 2 s^T mu + Tr(sigma C sigma^T). May be
/// negative; negative values certify inward drift.
pub fn lyapunov_regularizer(
    tape: &mut Tape,
    batch: &TrajectoryBatch,
    spec: &ProblemSpec,
    burn_in: usize,
) -> NodeId {
    let steps = batch.step_nodes.len();
    assert!(burn_in < steps);
    let total_time: f64 = (burn_in..steps).map(|i| batch.grid.dt(i)).sum();
    let mut acc: Option<NodeId> = None;
    for i in burn_in..steps {
        let t = batch.grid.time(i);
        let sigma = spec.diffusion(t);
        let c = spec.c_matrix(t);
        let trace = sigma.dot(&c).dot(&sigma.t()).diag().sum();
        let s = batch.s_nodes[i];
        let mu = batch.step_nodes[i].b_s;
        let prod = tape.mul(s, mu);
        let inner = tape.row_sum(prod);
        let drift2 = tape.scale(inner, 2.0);
        let tr_node = tape.constant_scalar(trace);
        let full = tape.add(drift2, tr_node);
        let w = batch.grid.dt(i) / total_time;
        acc = Some(match acc {
            None => tape.scale(full, w),
            Some(a) => tape.add_scaled(a, full, w),
        });
    }
    let acc = acc.unwrap();
    tape.mean(acc)
}

/// Eq. 6 / Eq. 7: terminal mismatch plus optional gradient regularizer.
/// With lambda = 0 the returned total is the terminal-loss node itself, so
/// the two objectives agree exactly.
pub fn finite_horizon_objective(
    tape: &mut Tape,
    batch: &TrajectoryBatch,
    spec: &ProblemSpec,
    lambda: f64,
) -> Result<LossNodes> {
    let terminal = terminal_loss(tape, batch, spec);
    let (grad_reg, total) = if lambda == 0.0 {
        (None, terminal)
    } else {
        let reg = gradient_regularizer(tape, batch);
        (Some(reg), tape.add_scaled(terminal, reg, lambda))
    };
    Ok(LossNodes {
        terminal: Some(terminal),
        grad_reg,
        ergodic: None,
        lyapunov: None,
        total,
        lambda,
        lambda_lyap: 0.0,
    })
}

/// Eq. 8 / Eq. 9: Hamiltonian variance plus weighted Lyapunov drift.
pub fn ergodic_objective(
    tape: &mut Tape,
    batch: &TrajectoryBatch,
    spec: &ProblemSpec,
    lambda_lyap: f64,
    burn_in_fraction: f64,
) -> Result<LossNodes> {
    let burn = burn_in_steps(batch.step_nodes.len(), burn_in_fraction);
    let ergodic = ergodic_loss(tape, batch, burn);
    let (lyap, total) = if lambda_lyap == 0.0 {
        (None, ergodic)
    } else {
        let l = lyapunov_regularizer(tape, batch, spec, burn);
        (Some(l), tape.add_scaled(ergodic, l, lambda_lyap))
    };
    Ok(LossNodes {
        terminal: None,
        grad_reg: None,
        ergodic: Some(ergodic),
        lyapunov: lyap,
        total,
        lambda: 0.0,
        lambda_lyap,
    })
}
