//! Problem definition contract and operator coefficient assembly: the
//! Hamiltonian, its state-gradient, the q-field, and the generator action
//! on test functions.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{NhoError, Result};
use crate::network::{
    control_forward, input_jacobian, ControlBounds, NetworkParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sense {
    Maximize,
    Minimize,
}

/// A control problem in its natural sign convention. Implementations
/// provide the coefficients, payoffs and their closed-form state
/// derivatives, both as plain point evaluations and as batched tape
/// expressions for the differentiable rollout.
///
/// The diffusion is assumed not to depend on state or control (true for
/// every benchmark here); its state derivative enters only through the
/// contraction Tr((grad_s sigma)^T q), which defaults to zero.
pub trait ProblemDef: Send + Sync {
    fn d(&self) -> usize;
    fn d_m(&self) -> usize;
    fn m(&self) -> usize;
    fn horizon(&self) -> f64;
    fn sense(&self) -> Sense;
    fn bounds(&self) -> ControlBounds;
    /// Whether the problem is posed for stationary (time-free) networks.
    fn stationary(&self) -> bool {
        false
    }

    /// Quadratic-variation density C(t), d_M x d_M symmetric PSD.
    fn c_matrix(&self, _t: f64) -> Array2<f64> {
        Array2::eye(self.d_m())
    }

    fn drift(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64>;
    /// Constant-in-state diffusion matrix, d x d_M.
    fn diffusion(&self, t: f64) -> Array2<f64>;
    fn running(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> f64;
    fn terminal(&self, s: &Array1<f64>) -> f64;
    fn grad_terminal(&self, s: &Array1<f64>) -> Array1<f64>;
    /// grad_s mu, d x d (entry (i,j) = d mu_i / d s_j).
    fn drift_jac(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> Array2<f64>;
    fn running_grad_s(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64>;
    /// Componentwise Tr((grad_s sigma)^T q); zero for state-independent sigma.
    fn sigma_contraction(&self, _t: f64, _s: &Array1<f64>, _a: &Array1<f64>, _q: &Array2<f64>) -> Array1<f64> {
        Array1::zeros(self.d())
    }

    // batched tape expressions; s is B x d, a is B x m, p is B x d
    fn drift_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId) -> NodeId;
    /// Running payoff per path, B x 1.
    fn running_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId) -> NodeId;
    fn grad_terminal_tape(&self, tape: &mut Tape, s: NodeId) -> NodeId;
    /// (grad_s mu)^T p, B x d.
    fn drift_jac_t_apply_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId, p: NodeId) -> NodeId;
    fn running_grad_s_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId) -> NodeId;
}

/// A problem converted to the maximization convention the PMP machinery
/// uses throughout: minimization problems have their payoffs (and payoff
/// derivatives) negated at construction, and [`ProblemSpec::restore_sense`]
/// maps reported values back.
pub struct ProblemSpec {
    def: Box<dyn ProblemDef>,
    bounds: ControlBounds,
}

impl ProblemSpec {
    pub fn new(def: Box<dyn ProblemDef>) -> Result<Self> {
        let bounds = def.bounds();
        bounds.validate()?;
        let c = def.c_matrix(0.0);
        check_symmetric(&c, 1e-12)?;
        Ok(ProblemSpec { def, bounds })
    }

    pub fn d(&self) -> usize {
        self.def.d()
    }
    pub fn d_m(&self) -> usize {
        self.def.d_m()
    }
    pub fn m(&self) -> usize {
        self.def.m()
    }
    pub fn horizon(&self) -> f64 {
        self.def.horizon()
    }
    pub fn sense(&self) -> Sense {
        self.def.sense()
    }
    pub fn stationary(&self) -> bool {
        self.def.stationary()
    }
    pub fn bounds(&self) -> &ControlBounds {
        &self.bounds
    }
    pub fn c_matrix(&self, t: f64) -> Array2<f64> {
        self.def.c_matrix(t)
    }
    pub fn diffusion(&self, t: f64) -> Array2<f64> {
        self.def.diffusion(t)
    }

    fn sign(&self) -> f64 {
        match self.def.sense() {
            Sense::Maximize => 1.0,
            Sense::Minimize => -1.0,
        }
    }

    /// Map a value computed in the internal maximization convention back
    /// to the problem's original sense.
    pub fn restore_sense(&self, v: f64) -> f64 {
        self.sign() * v
    }

    pub fn drift(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
        self.def.drift(t, s, a)
    }

    pub fn running(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> f64 {
        self.sign() * self.def.running(t, s, a)
    }

    pub fn terminal(&self, s: &Array1<f64>) -> f64 {
        self.sign() * self.def.terminal(s)
    }

    pub fn grad_terminal(&self, s: &Array1<f64>) -> Array1<f64> {
        self.def.grad_terminal(s) * self.sign()
    }

    pub fn drift_jac(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> Array2<f64> {
        self.def.drift_jac(t, s, a)
    }

    pub fn running_grad_s(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
        self.def.running_grad_s(t, s, a) * self.sign()
    }

    pub fn sigma_contraction(&self, t: f64, s: &Array1<f64>, a: &Array1<f64>, q: &Array2<f64>) -> Array1<f64> {
        self.def.sigma_contraction(t, s, a, q)
    }

    pub fn drift_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId) -> NodeId {
        self.def.drift_tape(tape, t, s, a)
    }

    pub fn running_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId) -> NodeId {
        let r = self.def.running_tape(tape, t, s, a);
        if self.sign() < 0.0 {
            tape.neg(r)
        } else {
            r
        }
    }

    pub fn grad_terminal_tape(&self, tape: &mut Tape, s: NodeId) -> NodeId {
        let g = self.def.grad_terminal_tape(tape, s);
        if self.sign() < 0.0 {
            tape.neg(g)
        } else {
            g
        }
    }

    pub fn drift_jac_t_apply_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId, p: NodeId) -> NodeId {
        self.def.drift_jac_t_apply_tape(tape, t, s, a, p)
    }

    pub fn running_grad_s_tape(&self, tape: &mut Tape, t: f64, s: NodeId, a: NodeId) -> NodeId {
        let g = self.def.running_grad_s_tape(tape, t, s, a);
        if self.sign() < 0.0 {
            tape.neg(g)
        } else {
            g
        }
    }

    /// Batched plain drift via the pointwise callable.
    pub fn drift_batch(&self, t: f64, s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((s.nrows(), self.d()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let sv = s.row(i).to_owned();
            let av = a.row(i).to_owned();
            row.assign(&self.drift(t, &sv, &av));
        }
        out
    }

    /// Batched plain running payoff (maximization convention).
    pub fn running_batch(&self, t: f64, s: &Array2<f64>, a: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter((0..s.nrows()).map(|i| {
            let sv = s.row(i).to_owned();
            let av = a.row(i).to_owned();
            self.running(t, &sv, &av)
        }))
    }
}

pub fn check_symmetric(c: &Array2<f64>, tol: f64) -> Result<()> {
    let mut max_dev = 0.0_f64;
    for i in 0..c.nrows() {
        for j in (i + 1)..c.ncols() {
            max_dev = max_dev.max((c[[i, j]] - c[[j, i]]).abs());
        }
    }
    if max_dev > tol {
        Err(NhoError::NotSymmetric { tol, max_dev })
    } else {
        Ok(())
    }
}

/// The trainable pair: feedback control (omega) and decoupling field (xi).
#[derive(Debug, Clone)]
pub struct Networks {
    pub control: NetworkParams,
    pub field: NetworkParams,
}

/// Drift and diffusion blocks of the extended-state generator at a point.
#[derive(Debug, Clone)]
pub struct NhoCoefficients {
    pub b_s: Array1<f64>,
    pub b_p: Array1<f64>,
    pub sigma_block: Array2<f64>,
    pub q_block: Array2<f64>,
}

impl NhoCoefficients {
    /// The stacked 2d x d_M diffusion coefficient.
    pub fn sigma_stacked(&self) -> Array2<f64> {
        let (d, dm) = self.sigma_block.dim();
        let mut out = Array2::zeros((2 * d, dm));
        out.slice_mut(s![..d, ..]).assign(&self.sigma_block);
        out.slice_mut(s![d.., ..]).assign(&self.q_block);
        out
    }

    /// D = Sigma C Sigma^T, 2d x 2d.
    pub fn diffusion_matrix(&self, c: &Array2<f64>) -> Array2<f64> {
        let sig = self.sigma_stacked();
        sig.dot(c).dot(&sig.t())
    }
}

fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(NhoError::shape(context, expected.to_string(), actual.to_string()));
    }
    Ok(())
}

/// H(t,s,alpha,p,q) = mu^T p + Tr(sigma^T q) + f.
pub fn hamiltonian(
    spec: &ProblemSpec,
    t: f64,
    s: &Array1<f64>,
    a: &Array1<f64>,
    p: &Array1<f64>,
    q: &Array2<f64>,
) -> Result<f64> {
    check_len("hamiltonian state", spec.d(), s.len())?;
    check_len("hamiltonian control", spec.m(), a.len())?;
    check_len("hamiltonian adjoint", spec.d(), p.len())?;
    if q.dim() != (spec.d(), spec.d_m()) {
        return Err(NhoError::shape(
            "hamiltonian q",
            format!("{}x{}", spec.d(), spec.d_m()),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    let mu = spec.drift(t, s, a);
    let sigma = spec.diffusion(t);
    let trace = sigma.iter().zip(q.iter()).map(|(x, y)| x * y).sum::<f64>();
    Ok(mu.dot(p) + trace + spec.running(t, s, a))
}

/// grad_s H = (grad_s mu)^T p + Tr((grad_s sigma)^T q) + grad_s f.
pub fn grad_s_hamiltonian(
    spec: &ProblemSpec,
    t: f64,
    s: &Array1<f64>,
    a: &Array1<f64>,
    p: &Array1<f64>,
    q: &Array2<f64>,
) -> Result<Array1<f64>> {
    check_len("grad_s_hamiltonian state", spec.d(), s.len())?;
    check_len("grad_s_hamiltonian adjoint", spec.d(), p.len())?;
    let jac = spec.drift_jac(t, s, a);
    Ok(jac.t().dot(p) + spec.sigma_contraction(t, s, a, q) + spec.running_grad_s(t, s, a))
}

/// q_Psi(t,s) = (grad_s Phi_xi) sigma(t, s, alpha_omega).
pub fn q_field(psi: &Networks, spec: &ProblemSpec, t: f64, s: &Array1<f64>) -> Result<Array2<f64>> {
    let t_scaled = scaled_time(spec, t);
    let jac = input_jacobian(&psi.field, t_scaled, s)?;
    Ok(jac.dot(&spec.diffusion(t)))
}

pub fn scaled_time(spec: &ProblemSpec, t: f64) -> f64 {
    if spec.horizon() > 0.0 {
        t / spec.horizon()
    } else {
        0.0
    }
}

/// All four coefficient blocks at (t, s).
pub fn nho_coefficients(psi: &Networks, spec: &ProblemSpec, t: f64, s: &Array1<f64>) -> Result<NhoCoefficients> {
    let t_scaled = scaled_time(spec, t);
    let alpha = control_forward(&psi.control, spec.bounds(), t_scaled, s)?;
    let p = psi.field.forward(t_scaled, s)?;
    let q = q_field(psi, spec, t, s)?;
    let b_s = spec.drift(t, s, &alpha);
    let b_p = -grad_s_hamiltonian(spec, t, s, &alpha, &p, &q)?;
    Ok(NhoCoefficients {
        b_s,
        b_p,
        sigma_block: spec.diffusion(t),
        q_block: q,
    })
}

/// A C^2 test function with its derivative callables, for probing the
/// generator.
pub struct TestFunction {
    pub value: Box<dyn Fn(&Array1<f64>) -> f64>,
    pub grad: Box<dyn Fn(&Array1<f64>) -> Array1<f64>>,
    pub hess: Box<dyn Fn(&Array1<f64>) -> Array2<f64>>,
}

impl TestFunction {
    /// g(x) = ||x||^2.
    pub fn squared_norm(n: usize) -> Self {
        TestFunction {
            value: Box::new(|x| x.dot(x)),
            grad: Box::new(|x| x * 2.0),
            hess: Box::new(move |_| Array2::from_diag_elem(n, 2.0)),
        }
    }

    /// g(x) = v^T x.
    pub fn linear(v: Array1<f64>) -> Self {
        let v2 = v.clone();
        let n = v.len();
        TestFunction {
            value: Box::new(move |x| v.dot(x)),
            grad: Box::new(move |_| v2.clone()),
            hess: Box::new(move |_| Array2::zeros((n, n))),
        }
    }

    pub fn constant(c: f64, n: usize) -> Self {
        TestFunction {
            value: Box::new(move |_| c),
            grad: Box::new(move |_| Array1::zeros(n)),
            hess: Box::new(move |_| Array2::zeros((n, n))),
        }
    }
}

/// Generator action (L_Psi g)(t, x) = grad g^T b + 1/2 Tr(D grad^2 g), with
/// the coefficients evaluated at the s-component of x only.
pub fn nho_apply(psi: &Networks, spec: &ProblemSpec, t: f64, x: &Array1<f64>, g: &TestFunction) -> Result<f64> {
    let d = spec.d();
    check_len("nho_apply extended state", 2 * d, x.len())?;
    let s = x.slice(s![..d]).to_owned();
    let coef = nho_coefficients(psi, spec, t, &s)?;
    let mut b = Array1::zeros(2 * d);
    b.slice_mut(s![..d]).assign(&coef.b_s);
    b.slice_mut(s![d..]).assign(&coef.b_p);
    let dmat = coef.diffusion_matrix(&spec.c_matrix(t));
    let grad = (g.grad)(x);
    let hess = (g.hess)(x);
    let trace = dmat
        .axis_iter(Axis(0))
        .zip(hess.axis_iter(Axis(1)))
        .map(|(dr, hc)| dr.dot(&hc))
        .sum::<f64>();
    Ok(grad.dot(&b) + 0.5 * trace)
}

// Batched tape-side assembly used by the simulator ------------------------

/// Per-step tape nodes of the parameterized system at one grid time.
#[derive(Debug)]
pub struct StepNodes {
    /// alpha_omega(t, S), B x m.
    pub alpha: NodeId,
    /// Phi_xi(t, S), B x d.
    pub p_field: NodeId,
    /// Columns of grad_s Phi (d of them, each B x d).
    pub jac_cols: Vec<NodeId>,
    /// Columns of q_Psi (d_M of them, each B x d).
    pub q_cols: Vec<NodeId>,
    /// Drift of the state block, B x d.
    pub b_s: NodeId,
    /// Drift of the adjoint block, B x d.
    pub b_p: NodeId,
}

/// Evaluate control, field, Jacobian, q-field and both drift blocks on the
/// tape at one grid time. `s` is the current state node (B x d).
pub fn step_nodes(
    tape: &mut Tape,
    control: &crate::network::TapeNet,
    field: &crate::network::TapeNet,
    spec: &ProblemSpec,
    t: f64,
    s: NodeId,
) -> Result<StepNodes> {
    let t_scaled = scaled_time(spec, t);
    let alpha = control.forward(tape, t_scaled, s, Some(spec.bounds()));
    let raw_field = field.forward_raw(tape, t_scaled, s);
    let jac_cols = crate::network::input_jacobian_columns(tape, raw_field, s)?;
    let sigma = spec.diffusion(t);
    let d_m = spec.d_m();
    // q column k = sum_j sigma[j,k] * J column j
    let mut q_cols = Vec::with_capacity(d_m);
    for k in 0..d_m {
        let mut acc: Option<NodeId> = None;
        for (j, &jc) in jac_cols.iter().enumerate() {
            let w = sigma[[j, k]];
            if w == 0.0 {
                continue;
            }
            acc = Some(match acc {
                None => tape.scale(jc, w),
                Some(a) => tape.add_scaled(a, jc, w),
            });
        }
        let col = match acc {
            Some(a) => a,
            None => {
                let sh = tape.shape(s);
                tape.zeros(sh)
            }
        };
        q_cols.push(col);
    }
    let b_s = spec.drift_tape(tape, t, s, alpha);
    let jac_apply = spec.drift_jac_t_apply_tape(tape, t, s, alpha, raw_field);
    let f_grad = spec.running_grad_s_tape(tape, t, s, alpha);
    let grad_h = tape.add(jac_apply, f_grad);
    let b_p = tape.neg(grad_h);
    Ok(StepNodes {
        alpha,
        p_field: raw_field,
        jac_cols,
        q_cols,
        b_s,
        b_p,
    })
}

/// Batched Hamiltonian H_Psi = mu^T p + Tr(sigma^T q) + f on the tape,
/// B x 1. Used by the ergodic objective.
pub fn hamiltonian_tape(
    tape: &mut Tape,
    spec: &ProblemSpec,
    t: f64,
    s: NodeId,
    nodes: &StepNodes,
) -> NodeId {
    let mu_p = tape.mul(nodes.b_s, nodes.p_field);
    let mut h = tape.row_sum(mu_p);
    let sigma = spec.diffusion(t);
    for (k, &qc) in nodes.q_cols.iter().enumerate() {
        let col = sigma.column(k).to_owned().insert_axis(Axis(0));
        let cn = tape.constant(col);
        let prod = tape.mul(qc, cn);
        let rs = tape.row_sum(prod);
        h = tape.add(h, rs);
    }
    let f = spec.running_tape(tape, t, s, nodes.alpha);
    tape.add(h, f)
}
