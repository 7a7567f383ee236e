//! Batched Euler-Maruyama simulation of the extended state (S, p-tilde),
//! recorded on the autodiff tape so losses differentiate through the whole
//! rollout. Noise is counter-based: the increment for a given (seed, path,
//! step) is the same regardless of evaluation order or thread count.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;

use crate::autodiff::{NodeId, Tape};
use crate::error::{NhoError, Result};
use crate::model::{check_symmetric, hamiltonian_tape, step_nodes, ProblemSpec, StepNodes};
use crate::network::TapeNet;

// --- Time grid -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(NhoError::Config(format!(
                "time grid needs horizon > 0 and steps >= 1, got T={horizon}, N={steps}"
            )));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        // land exactly on T despite rounding
        times[steps] = horizon;
        Ok(TimeGrid { times })
    }

    /// Default resolution: 50 steps per unit of time (50 for T=1, 25 for
    /// T=0.5), at least one step.
    pub fn default_steps(horizon: f64) -> usize {
        ((50.0 * horizon).round() as usize).max(1)
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

// --- Counter-based noise -------------------------------------------------

/// Stateless normal generator keyed by (master seed, path, step).
#[derive(Debug, Clone, Copy)]
pub struct NoiseStream {
    pub master_seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl NoiseStream {
    pub fn new(master_seed: u64) -> Self {
        NoiseStream { master_seed }
    }

    fn key(&self, path: u64, step: u64) -> u64 {
        splitmix64(splitmix64(splitmix64(self.master_seed) ^ path) ^ step)
    }

    /// Standard normals for one (path, step) cell.
    pub fn normals(&self, path: u64, step: u64, n: usize) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key(path, step));
        Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
    }
}

// --- PSD square root -----------------------------------------------------

/// Symmetric eigendecomposition by cyclic Jacobi rotations; returns
/// (eigenvalues, eigenvectors as columns).
pub fn symmetric_eigen(c: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = c.nrows();
    let mut a = c.clone();
    let mut v = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + c.iter().map(|x| x * x).sum::<f64>().sqrt()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = cos * akp - sin * akq;
                    a[[k, q]] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = cos * apk - sin * aqk;
                    a[[q, k]] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = cos * vkp - sin * vkq;
                    v[[k, q]] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    (a.diag().to_owned(), v)
}

/// C^{1/2} for symmetric PSD C; negative eigenvalues from roundoff are
/// clipped to zero. Errors if C is not symmetric within 1e-12.
pub fn matrix_sqrt_psd(c: &Array2<f64>) -> Result<Array2<f64>> {
    check_symmetric(c, 1e-12)?;
    let (vals, vecs) = symmetric_eigen(c);
    let sq = vals.mapv(|l| l.max(0.0).sqrt());
    let scaled = &vecs * &sq.view().insert_axis(Axis(0));
    Ok(scaled.dot(&vecs.t()))
}

/// One martingale increment sqrt(dt) C^{1/2} eps from pre-drawn normals.
pub fn increment_from_eps(c_sqrt: &Array2<f64>, dt: f64, eps: &Array1<f64>) -> Array1<f64> {
    c_sqrt.dot(eps) * dt.sqrt()
}

/// Increments for all (path, step) cells: one B x d_M matrix per grid
/// step. Path generation is embarrassingly parallel; `workers` > 1 uses a
/// dedicated thread pool, and the output is bitwise independent of the
/// worker count because each cell is keyed by (path, step).
pub fn sample_increments(
    c_of_t: &dyn Fn(f64) -> Array2<f64>,
    grid: &TimeGrid,
    batch: usize,
    d_m: usize,
    noise: &NoiseStream,
    path_offset: u64,
    workers: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut sqrts = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        sqrts.push(matrix_sqrt_psd(&c_of_t(grid.time(i)))?);
    }
    let fill_path = |b: usize, out: &mut [f64]| {
        let path = path_offset + b as u64;
        for (i, chunk) in out.chunks_mut(d_m).enumerate() {
            let eps = noise.normals(path, i as u64, d_m);
            let inc = increment_from_eps(&sqrts[i], grid.dt(i), &eps);
            chunk.copy_from_slice(inc.as_slice().unwrap());
        }
    };
    // rows: per path, all steps concatenated
    let mut flat = vec![0.0; batch * grid.steps() * d_m];
    let row_len = grid.steps() * d_m;
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| NhoError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            flat.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(b, row)| fill_path(b, row));
        });
    } else {
        for (b, row) in flat.chunks_mut(row_len).enumerate() {
            fill_path(b, row);
        }
    }
    let mut out = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let mut m = Array2::zeros((batch, d_m));
        for b in 0..batch {
            let base = b * row_len + i * d_m;
            m.row_mut(b)
                .assign(&ndarray::ArrayView1::from(&flat[base..base + d_m]));
        }
        out.push(m);
    }
    Ok(out)
}

// --- Initial states ------------------------------------------------------

#[derive(Debug, Clone)]
pub enum InitialStateSampler {
    /// Point mass at s_0.
    Point(Array1<f64>),
    /// Gaussian cloud around s_0 for a richer initial distribution.
    Cloud { center: Array1<f64>, std: f64 },
}

impl InitialStateSampler {
    pub fn dim(&self) -> usize {
        match self {
            InitialStateSampler::Point(c) => c.len(),
            InitialStateSampler::Cloud { center, .. } => center.len(),
        }
    }

    pub fn sample(&self, batch: usize, seed: u64) -> Array2<f64> {
        match self {
            InitialStateSampler::Point(c) => {
                let mut out = Array2::zeros((batch, c.len()));
                for mut row in out.axis_iter_mut(Axis(0)) {
                    row.assign(c);
                }
                out
            }
            InitialStateSampler::Cloud { center, std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xC10D));
                let mut out = Array2::zeros((batch, center.len()));
                for mut row in out.axis_iter_mut(Axis(0)) {
                    for (x, &c) in row.iter_mut().zip(center.iter()) {
                        let z: f64 = rng.sample(StandardNormal);
                        *x = c + std * z;
                    }
                }
                out
            }
        }
    }
}

// --- Rollout -------------------------------------------------------------

/// One simulated batch, recorded on the tape.
#[derive(Debug)]
pub struct TrajectoryBatch {
    pub grid: TimeGrid,
    pub batch: usize,
    /// State nodes S_{t_i}, length steps+1, each B x d.
    pub s_nodes: Vec<NodeId>,
    /// Adjoint nodes p-tilde_{t_i}, length steps+1, each B x d.
    pub p_nodes: Vec<NodeId>,
    /// Per-step network/coefficient nodes at t_0 .. t_{N-1}.
    pub step_nodes: Vec<StepNodes>,
    /// Batched Hamiltonian H_Psi at t_0 .. t_{N-1} (B x 1), present for
    /// stationary problems only.
    pub h_nodes: Vec<NodeId>,
    /// Recorded martingale increments, one B x d_M matrix per step.
    pub increments: Vec<Array2<f64>>,
}

pub struct RolloutOptions {
    pub batch: usize,
    pub path_offset: u64,
    pub workers: usize,
    /// Diagnostic switch: replace q_Psi with zeros so no gradient flows
    /// through the field Jacobian.
    pub ablate_q: bool,
}

impl RolloutOptions {
    pub fn new(batch: usize) -> Self {
        RolloutOptions {
            batch,
            path_offset: 0,
            workers: 1,
            ablate_q: false,
        }
    }
}

fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

fn first_bad_path(a: &Array2<f64>) -> usize {
    a.axis_iter(Axis(0))
        .position(|row| row.iter().any(|v| !v.is_finite()))
        .unwrap_or(0)
}

/// Differentiable Euler-Maruyama rollout of the extended state under the
/// NHO coefficients: S advances with the problem drift and diffusion,
/// p-tilde with minus the Hamiltonian gradient and the q-field, starting
/// from p-tilde_0 = Phi_xi(t_0, S_0).
pub fn rollout(
    tape: &mut Tape,
    control: &TapeNet,
    field: &TapeNet,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    s0: &Array2<f64>,
    noise: &NoiseStream,
    opts: &RolloutOptions,
) -> Result<TrajectoryBatch> {
    let d = spec.d();
    let d_m = spec.d_m();
    let batch = opts.batch;
    if s0.dim() != (batch, d) {
        return Err(NhoError::shape(
            "rollout initial states",
            format!("{}x{}", batch, d),
            format!("{}x{}", s0.nrows(), s0.ncols()),
        ));
    }
    let increments = sample_increments(
        &|t| spec.c_matrix(t),
        grid,
        batch,
        d_m,
        noise,
        opts.path_offset,
        opts.workers,
    )?;

    let mut s_nodes = Vec::with_capacity(grid.steps() + 1);
    let mut p_nodes = Vec::with_capacity(grid.steps() + 1);
    let mut steps = Vec::with_capacity(grid.steps());
    let mut h_nodes = Vec::new();

    let mut s = tape.constant(s0.clone());
    s_nodes.push(s);
    let mut p: Option<NodeId> = None;

    for i in 0..grid.steps() {
        let t = grid.time(i);
        let dt = grid.dt(i);
        let mut nodes = step_nodes(tape, control, field, spec, t, s)?;
        if opts.ablate_q {
            nodes.q_cols = (0..d_m)
                .map(|_| tape.zeros((batch, d)))
                .collect();
        }
        let p_cur = match p {
            Some(id) => id,
            None => nodes.p_field, // p-tilde_0 = Phi_xi(t_0, S_0), same node
        };
        if p.is_none() {
            p_nodes.push(p_cur);
        }
        if spec.stationary() {
            let h = hamiltonian_tape(tape, spec, t, s, &nodes);
            h_nodes.push(h);
        }

        // S_{i+1} = S_i + b_s dt + sigma dM  (noise enters as a constant)
        let sigma = spec.diffusion(t);
        let s_noise = increments[i].dot(&sigma.t());
        let s_drifted = tape.add_scaled(s, nodes.b_s, dt);
        let s_noise_node = tape.constant(s_noise);
        let s_next = tape.add(s_drifted, s_noise_node);

        // p_{i+1} = p_i + b_p dt + sum_k q_col_k * dM_k
        let mut p_next = tape.add_scaled(p_cur, nodes.b_p, dt);
        for (k, &qc) in nodes.q_cols.iter().enumerate() {
            let dm_col = increments[i]
                .column(k)
                .to_owned()
                .insert_axis(Axis(1));
            let dm_node = tape.constant(dm_col);
            let scaled = tape.mul(qc, dm_node);
            p_next = tape.add(p_next, scaled);
        }

        let sv = tape.value(s_next);
        if !all_finite(sv) {
            let path = opts.path_offset as usize + first_bad_path(sv);
            return Err(NhoError::NonFinite { step: i + 1, path });
        }
        let pv = tape.value(p_next);
        if !all_finite(pv) {
            let path = opts.path_offset as usize + first_bad_path(pv);
            return Err(NhoError::NonFinite { step: i + 1, path });
        }

        steps.push(nodes);
        s_nodes.push(s_next);
        p_nodes.push(p_next);
        s = s_next;
        p = Some(p_next);
    }

    Ok(TrajectoryBatch {
        grid: grid.clone(),
        batch,
        s_nodes,
        p_nodes,
        step_nodes: steps,
        h_nodes,
        increments,
    })
}

/// Debug dump: one record per (path, grid point) with t, S and p-tilde,
/// tab-delimited.
pub fn write_trajectory(w: &mut dyn Write, tape: &Tape, batch: &TrajectoryBatch) -> Result<()> {
    for b in 0..batch.batch {
        for (i, &t) in batch.grid.times().iter().enumerate() {
            let s = tape.value(batch.s_nodes[i]);
            let p = tape.value(batch.p_nodes[i]);
            write!(w, "{b}\t{t}")?;
            for v in s.row(b).iter() {
                write!(w, "\t{v}")?;
            }
            for v in p.row(b).iter() {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ProblemDef, Sense};
    use crate::network::{
        init_network, ControlBounds, NetworkParams, NetworkSpec, OutputMap,
    };
    use ndarray::arr1;
    use ndarray::arr2;

    fn zero_params(spec: NetworkSpec) -> NetworkParams {
        let mut p = init_network(&spec, 0).unwrap();
        for layer in &mut p.layers {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        p
    }

    /// Minimal problem with configurable drift style for simulator tests.
    struct LinearToy {
        d: usize,
        /// drift = rate * s + alpha
        rate: f64,
        sigma: f64,
    }

    impl ProblemDef for LinearToy {
        fn d(&self) -> usize {
            self.d
        }
        fn d_m(&self) -> usize {
            self.d
        }
        fn m(&self) -> usize {
            self.d
        }
        fn horizon(&self) -> f64 {
            1.0
        }
        fn sense(&self) -> Sense {
            Sense::Maximize
        }
        fn bounds(&self) -> ControlBounds {
            ControlBounds::uniform(self.d, -1.0, 1.0)
        }
        fn drift(&self, _t: f64, s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
            s * self.rate + a
        }
        fn diffusion(&self, _t: f64) -> Array2<f64> {
            Array2::eye(self.d) * self.sigma
        }
        fn running(&self, _t: f64, _s: &Array1<f64>, _a: &Array1<f64>) -> f64 {
            0.0
        }
        fn terminal(&self, _s: &Array1<f64>) -> f64 {
            0.0
        }
        fn grad_terminal(&self, _s: &Array1<f64>) -> Array1<f64> {
            Array1::zeros(self.d)
        }
        fn drift_jac(&self, _t: f64, _s: &Array1<f64>, _a: &Array1<f64>) -> Array2<f64> {
            Array2::eye(self.d) * self.rate
        }
        fn running_grad_s(&self, _t: f64, _s: &Array1<f64>, _a: &Array1<f64>) -> Array1<f64> {
            Array1::zeros(self.d)
        }
        fn drift_tape(&self, tape: &mut Tape, _t: f64, s: NodeId, a: NodeId) -> NodeId {
            tape.add_scaled(a, s, self.rate)
        }
        fn running_tape(&self, tape: &mut Tape, _t: f64, s: NodeId, _a: NodeId) -> NodeId {
            let n = tape.row_squared_norm(s);
            tape.scale(n, 0.0)
        }
        fn grad_terminal_tape(&self, tape: &mut Tape, s: NodeId) -> NodeId {
            let sh = tape.shape(s);
            tape.zeros(sh)
        }
        fn drift_jac_t_apply_tape(&self, tape: &mut Tape, _t: f64, _s: NodeId, _a: NodeId, p: NodeId) -> NodeId {
            tape.scale(p, self.rate)
        }
        fn running_grad_s_tape(&self, tape: &mut Tape, _t: f64, s: NodeId, _a: NodeId) -> NodeId {
            let sh = tape.shape(s);
            tape.zeros(sh)
        }
    }

    fn toy_nets(d: usize) -> (NetworkParams, NetworkParams) {
        let cspec = NetworkSpec {
            state_dim: d,
            time_input: true,
            hidden_widths: vec![],
            output_dim: d,
            output_map: OutputMap::BoxBounded,
        };
        let fspec = NetworkSpec {
            state_dim: d,
            time_input: true,
            hidden_widths: vec![],
            output_dim: d,
            output_map: OutputMap::Identity,
        };
        (zero_params(cspec), zero_params(fspec))
    }

    fn run_rollout(
        spec: &ProblemSpec,
        grid: &TimeGrid,
        s0: &Array2<f64>,
        seed: u64,
        batch: usize,
    ) -> (Tape, TrajectoryBatch) {
        let (c, f) = toy_nets(spec.d());
        let mut tape = Tape::new();
        let cn = c.register_frozen(&mut tape);
        let fnet = f.register_frozen(&mut tape);
        let traj = rollout(
            &mut tape,
            &cn,
            &fnet,
            spec,
            grid,
            s0,
            &NoiseStream::new(seed),
            &RolloutOptions::new(batch),
        )
        .unwrap();
        (tape, traj)
    }

    #[test]
    fn grid_defaults_and_invariants() {
        assert_eq!(TimeGrid::default_steps(1.0), 50);
        assert_eq!(TimeGrid::default_steps(0.5), 25);
        let g = TimeGrid::uniform(0.5, 25).unwrap();
        assert_eq!(g.steps(), 25);
        assert_eq!(g.horizon(), 0.5);
        let total: f64 = (0..g.steps()).map(|i| g.dt(i)).sum();
        assert!((total - 0.5).abs() < 1e-15);
        for i in 0..g.steps() {
            assert!(g.dt(i) > 0.0);
        }
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::uniform(0.0, 10).is_err());
    }

    #[test]
    fn zero_dt_gives_zero_increment() {
        let c_sqrt = Array2::eye(3);
        let eps = arr1(&[0.7, -1.2, 0.4]);
        let inc = increment_from_eps(&c_sqrt, 0.0, &eps);
        assert!(inc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrix_sqrt_diagonal_and_random_psd() {
        let s = matrix_sqrt_psd(&Array2::from_diag(&arr1(&[4.0, 1.0]))).unwrap();
        assert!((s[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((s[[1, 1]] - 1.0).abs() < 1e-12);
        assert!(s[[0, 1]].abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = Array2::from_shape_simple_fn((4, 4), || rng.gen_range(-1.0..1.0));
        let c = b.dot(&b.t());
        let r = matrix_sqrt_psd(&c).unwrap();
        let back = r.dot(&r);
        for (x, y) in back.iter().zip(c.iter()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn matrix_sqrt_clips_tiny_negative_eigenvalues() {
        let c = arr2(&[[1.0, 0.0], [0.0, -1e-15]]);
        let r = matrix_sqrt_psd(&c).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((r[[0, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(r[[1, 1]], 0.0);
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let c = arr2(&[[1.0, 0.5], [0.2, 1.0]]);
        let err = matrix_sqrt_psd(&c).unwrap_err();
        assert!(matches!(err, NhoError::NotSymmetric { .. }));
    }

    #[test]
    fn increment_variance_statistical_oracle_identity() {
        // C = I, dt = 0.01, 10^6 samples: per-component variance within
        // [0.0097, 0.0103]; cross-covariance within 3 SE of 0
        let grid = TimeGrid::uniform(0.01, 1).unwrap();
        let n = 1_000_000;
        let incs = sample_increments(
            &|_| Array2::eye(2),
            &grid,
            n,
            2,
            &NoiseStream::new(7),
            0,
            1,
        )
        .unwrap();
        let m = &incs[0];
        for j in 0..2 {
            let col = m.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            assert!((0.0097..=0.0103).contains(&var), "var {var}");
        }
        let c0 = m.column(0);
        let c1 = m.column(1);
        let cov = c0
            .iter()
            .zip(c1.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        // SE of sample covariance of independent N(0, 0.01) pairs
        let se = 0.01 / (n as f64).sqrt();
        assert!(cov.abs() <= 3.0 * se, "cov {cov}, se {se}");
    }

    #[test]
    fn increment_variance_statistical_oracle_diag() {
        let grid = TimeGrid::uniform(0.01, 1).unwrap();
        let n = 1_000_000;
        let incs = sample_increments(
            &|_| Array2::from_diag(&arr1(&[4.0, 1.0])),
            &grid,
            n,
            2,
            &NoiseStream::new(8),
            0,
            1,
        )
        .unwrap();
        let m = &incs[0];
        let expect = [0.04, 0.01];
        for j in 0..2 {
            let col = m.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            // variance of squared normals: SE = expect * sqrt(2/n)
            let se = expect[j] * (2.0 / n as f64).sqrt();
            assert!((var - expect[j]).abs() <= 3.0 * se, "var {var} vs {}", expect[j]);
        }
    }

    #[test]
    fn increments_are_worker_count_invariant() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let a = sample_increments(&|_| Array2::eye(3), &grid, 64, 3, &NoiseStream::new(3), 5, 1)
            .unwrap();
        let b = sample_increments(&|_| Array2::eye(3), &grid, 64, 3, &NoiseStream::new(3), 5, 8)
            .unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn constant_networks_zero_coefficients_keep_paths_constant() {
        // drift = 0*s + alpha with alpha = center of [-1,1] = 0; sigma = 0
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 2,
            rate: 0.0,
            sigma: 0.0,
        }))
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let s0 = Array2::from_shape_fn((4, 2), |(b, j)| (b + j) as f64 * 0.3);
        let (tape, traj) = run_rollout(&spec, &grid, &s0, 0, 4);
        for &id in &traj.s_nodes {
            assert_eq!(tape.value(id), &s0);
        }
        let p0 = tape.value(traj.p_nodes[0]).clone();
        for &id in &traj.p_nodes {
            assert_eq!(tape.value(id), &p0);
        }
    }

    #[test]
    fn euler_matches_exponential_decay() {
        // dS = -S dt, sigma = 0, N = 1000: S_T = s0 e^{-1} within 2e-3 rel
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 1,
            rate: -1.0,
            sigma: 0.0,
        }))
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 1000).unwrap();
        let s0 = Array2::from_elem((1, 1), 2.0);
        let (tape, traj) = run_rollout(&spec, &grid, &s0, 0, 1);
        let s_t = tape.value(*traj.s_nodes.last().unwrap())[[0, 0]];
        let exact = 2.0 * (-1.0_f64).exp();
        assert!(
            ((s_t - exact) / exact).abs() <= 2e-3,
            "{s_t} vs {exact}"
        );
    }

    #[test]
    fn halving_dt_roughly_halves_euler_error() {
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 1,
            rate: -1.0,
            sigma: 0.0,
        }))
        .unwrap();
        let exact = 2.0 * (-1.0_f64).exp();
        let err_for = |n: usize| {
            let grid = TimeGrid::uniform(1.0, n).unwrap();
            let s0 = Array2::from_elem((1, 1), 2.0);
            let (tape, traj) = run_rollout(&spec, &grid, &s0, 0, 1);
            (tape.value(*traj.s_nodes.last().unwrap())[[0, 0]] - exact).abs()
        };
        let ratio = err_for(250) / err_for(500);
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn p_tilde_initialization_is_bitwise_forward_call() {
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 3,
            rate: -0.5,
            sigma: 0.4,
        }))
        .unwrap();
        // random field net rather than zeros
        let fspec = NetworkSpec {
            state_dim: 3,
            time_input: true,
            hidden_widths: vec![8],
            output_dim: 3,
            output_map: OutputMap::Identity,
        };
        let field = init_network(&fspec, 42).unwrap();
        let (control, _) = toy_nets(3);
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s0 = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let cn = control.register_frozen(&mut tape);
        let fnet = field.register_frozen(&mut tape);
        let traj = rollout(
            &mut tape,
            &cn,
            &fnet,
            &spec,
            &grid,
            &s0,
            &NoiseStream::new(1),
            &RolloutOptions::new(6),
        )
        .unwrap();
        let p0 = tape.value(traj.p_nodes[0]);
        let direct = field.forward_batch(0.0, &s0).unwrap();
        assert_eq!(p0, &direct);
    }

    #[test]
    fn martingale_property_with_zero_drift() {
        // b forced to 0 via rate 0 and centered bounds; sigma = 1
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 1,
            rate: 0.0,
            sigma: 1.0,
        }))
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let n = 100_000;
        let s0 = Array2::from_elem((n, 1), 0.7);
        let (tape, traj) = run_rollout(&spec, &grid, &s0, 99, n);
        let s_t = tape.value(*traj.s_nodes.last().unwrap());
        let mean = s_t.sum() / n as f64;
        // Var(S_T) = T = 1, so SE = 1/sqrt(n)
        let se = 1.0 / (n as f64).sqrt();
        assert!((mean - 0.7).abs() <= 3.0 * se, "mean {mean}");
    }

    #[test]
    fn blow_up_aborts_with_location() {
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 1,
            rate: 1e200,
            sigma: 0.0,
        }))
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let (c, f) = toy_nets(1);
        let mut tape = Tape::new();
        let cn = c.register_frozen(&mut tape);
        let fnet = f.register_frozen(&mut tape);
        let s0 = Array2::from_elem((2, 1), 1.0);
        let err = rollout(
            &mut tape,
            &cn,
            &fnet,
            &spec,
            &grid,
            &s0,
            &NoiseStream::new(0),
            &RolloutOptions::new(2),
        )
        .unwrap_err();
        match err {
            NhoError::NonFinite { step, .. } => assert!(step >= 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn point_and_cloud_samplers() {
        let c = arr1(&[1.0, -2.0]);
        let p = InitialStateSampler::Point(c.clone()).sample(5, 0);
        for row in p.axis_iter(Axis(0)) {
            assert_eq!(row.to_owned(), c);
        }
        let cloud = InitialStateSampler::Cloud {
            center: c.clone(),
            std: 0.1,
        };
        let sample = cloud.sample(20_000, 4);
        for j in 0..2 {
            let col = sample.column(j);
            let mean = col.sum() / 20_000.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 19_999.0;
            assert!((mean - c[j]).abs() < 0.005, "mean {mean}");
            assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
        }
        // same seed, same draw
        assert_eq!(cloud.sample(8, 4), cloud.sample(8, 4));
    }

    #[test]
    fn trajectory_dump_has_expected_shape() {
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 2,
            rate: -0.1,
            sigma: 0.2,
        }))
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 3).unwrap();
        let s0 = Array2::zeros((2, 2));
        let (tape, traj) = run_rollout(&spec, &grid, &s0, 5, 2);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &tape, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2 * 4); // paths x grid points
        assert_eq!(lines[0].split('\t').count(), 2 + 2 + 2); // id, t, S, p
    }

    #[test]
    fn rollout_is_reproducible_bitwise() {
        let spec = ProblemSpec::new(Box::new(LinearToy {
            d: 2,
            rate: -0.3,
            sigma: 0.5,
        }))
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let s0 = Array2::from_elem((4, 2), 0.2);
        let (tape_a, ta) = run_rollout(&spec, &grid, &s0, 123, 4);
        let (tape_b, tb) = run_rollout(&spec, &grid, &s0, 123, 4);
        for (&x, &y) in ta.s_nodes.iter().zip(tb.s_nodes.iter()) {
            assert_eq!(tape_a.value(x), tape_b.value(y));
        }
    }
}
