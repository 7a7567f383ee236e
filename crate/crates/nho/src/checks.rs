//! Named self-checks: fast, deterministic property tests of the numerical
//! core, runnable from the command line (`nho check`). Each check returns
//! a short detail string on success and a diagnostic on failure.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::losses::finite_horizon_objective;
use crate::model::{nho_apply, nho_coefficients, Networks, TestFunction};
use crate::network::{
    apply_box_bound, init_network, input_jacobian, ControlBounds, NetworkParams, NetworkSpec,
    OutputMap,
};
use crate::problems::{make_problem, BenchmarkId};
use crate::simulator::{
    matrix_sqrt_psd, sample_increments, symmetric_eigen, NoiseStream, RolloutOptions, TimeGrid,
};
use crate::trainer::lr_schedule;

/// A check either passes with a detail line or fails with a diagnostic.
pub type CheckResult = std::result::Result<String, String>;

pub struct CheckOutcome {
    pub name: &'static str,
    pub result: CheckResult,
}

type CheckFn = fn() -> CheckResult;

pub fn all_checks() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("gradient-finite-difference", check_gradient_fd),
        ("jacobian-finite-difference", check_jacobian_fd),
        ("second-order-gradients", check_second_order_fd),
        ("box-bound-interior", check_box_interior),
        ("increment-covariance", check_increment_covariance),
        ("field-diffusion-rank", check_field_diffusion_rank),
        ("generator-quadratic", check_generator_quadratic),
        ("adjoint-init-contract", check_adjoint_init),
        ("lambda-zero-identity", check_lambda_zero_identity),
        ("worker-invariance", check_worker_invariance),
        ("learning-rate-schedule", check_lr_schedule),
    ]
}

/// Run every check whose name contains `filter` (all when absent).
pub fn run_checks(filter: Option<&str>) -> Vec<CheckOutcome> {
    all_checks()
        .into_iter()
        .filter(|(name, _)| filter.map_or(true, |f| name.contains(f)))
        .map(|(name, f)| CheckOutcome { name, result: f() })
        .collect()
}

fn random_net(rng: &mut ChaCha8Rng) -> NetworkParams {
    let spec = NetworkSpec {
        state_dim: rng.gen_range(1..=4),
        time_input: rng.gen_bool(0.5),
        hidden_widths: (0..rng.gen_range(1..=2))
            .map(|_| rng.gen_range(3..=8))
            .collect(),
        output_dim: rng.gen_range(1..=3),
        output_map: OutputMap::Identity,
    };
    init_network(&spec, rng.gen()).expect("valid random spec")
}

fn random_point(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.gen_range(-1.5..1.5)))
}

/// Scalar loss used for the finite-difference probes: sum of squares of
/// the network output at a fixed input.
fn plain_loss(net: &NetworkParams, t: f64, s: &Array1<f64>) -> f64 {
    let out = net.forward(t, s).expect("forward");
    out.dot(&out)
}

fn check_gradient_fd() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let net = random_net(&mut rng);
        let t = rng.gen_range(0.0..1.0);
        let s = random_point(&mut rng, net.spec.state_dim);

        let mut tape = Tape::new();
        let tn = net.register(&mut tape);
        let s_node = tape.constant(s.clone().insert_axis(ndarray::Axis(0)));
        let out = tn.forward(&mut tape, t, s_node, None);
        let loss = tape.squared_norm(out);
        let params = tn.param_nodes();
        let grads = tape.grad(loss, &params).map_err(|e| e.to_string())?;

        // central finite differences over every weight and bias scalar
        let h = 1e-6;
        let mut gi = 0;
        for li in 0..net.layers.len() {
            for which in 0..2 {
                let g = &grads[gi];
                gi += 1;
                let shape = g.dim();
                for r in 0..shape.0 {
                    for c in 0..shape.1 {
                        let mut plus = net.clone();
                        let mut minus = net.clone();
                        {
                            let (p, m) = (&mut plus.layers[li], &mut minus.layers[li]);
                            if which == 0 {
                                p.w[(r, c)] += h;
                                m.w[(r, c)] -= h;
                            } else {
                                p.b[(r, c)] += h;
                                m.b[(r, c)] -= h;
                            }
                        }
                        let fd = (plain_loss(&plus, t, &s) - plain_loss(&minus, t, &s)) / (2.0 * h);
                        let denom = fd.abs().max(1.0);
                        worst = worst.max((g[(r, c)] - fd).abs() / denom);
                    }
                }
            }
        }
    }
    if worst < 1e-4 {
        Ok(format!("max relative gradient error {worst:.2e} over 100 random networks"))
    } else {
        Err(format!("gradient mismatch vs finite differences: {worst:.2e} > 1e-4"))
    }
}

fn check_jacobian_fd() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1AC0B);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let net = random_net(&mut rng);
        let d = net.spec.state_dim;
        let t = rng.gen_range(0.0..1.0);
        let s = random_point(&mut rng, d);
        let jac = input_jacobian(&net, t, &s).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for j in 0..d {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[j] += h;
            sm[j] -= h;
            let fp = net.forward(t, &sp).map_err(|e| e.to_string())?;
            let fm = net.forward(t, &sm).map_err(|e| e.to_string())?;
            for i in 0..net.spec.output_dim {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                worst = worst.max((jac[(i, j)] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    if worst < 1e-4 {
        Ok(format!("max relative Jacobian error {worst:.2e} over 100 random networks"))
    } else {
        Err(format!("Jacobian mismatch vs finite differences: {worst:.2e} > 1e-4"))
    }
}

/// Differentiate through the Jacobian itself: the loss is the squared
/// Frobenius norm of the input Jacobian, and its parameter gradient is
/// compared against finite differences of the plainly recomputed loss.
fn check_second_order_fd() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EC02D);
    let jac_loss = |net: &NetworkParams, t: f64, s: &Array1<f64>| -> f64 {
        let j = input_jacobian(net, t, s).expect("jacobian");
        j.iter().map(|v| v * v).sum()
    };
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let net = random_net(&mut rng);
        let d = net.spec.state_dim;
        let t = rng.gen_range(0.0..1.0);
        let s = random_point(&mut rng, d);

        let mut tape = Tape::new();
        let tn = net.register(&mut tape);
        let s_node = tape.constant(s.clone().insert_axis(ndarray::Axis(0)));
        let out = tn.forward_raw(&mut tape, t, s_node);
        let mut loss = None;
        for j in 0..d {
            let mut seed = Array2::zeros((1, d));
            seed[(0, j)] = 1.0;
            let seed_node = tape.constant(seed);
            let col = tape.jvp(out, s_node, seed_node).map_err(|e| e.to_string())?;
            let sq = tape.squared_norm(col);
            loss = Some(match loss {
                None => sq,
                Some(acc) => tape.add(acc, sq),
            });
        }
        let loss = loss.expect("d >= 1");
        let params = tn.param_nodes();
        let grads = tape.grad(loss, &params).map_err(|e| e.to_string())?;

        let h = 1e-5;
        let mut gi = 0;
        for li in 0..net.layers.len() {
            for which in 0..2 {
                let g = &grads[gi];
                gi += 1;
                let shape = g.dim();
                for r in 0..shape.0 {
                    for c in 0..shape.1 {
                        let mut plus = net.clone();
                        let mut minus = net.clone();
                        {
                            let (p, m) = (&mut plus.layers[li], &mut minus.layers[li]);
                            if which == 0 {
                                p.w[(r, c)] += h;
                                m.w[(r, c)] -= h;
                            } else {
                                p.b[(r, c)] += h;
                                m.b[(r, c)] -= h;
                            }
                        }
                        let fd = (jac_loss(&plus, t, &s) - jac_loss(&minus, t, &s)) / (2.0 * h);
                        worst = worst.max((g[(r, c)] - fd).abs() / fd.abs().max(1.0));
                    }
                }
            }
        }
    }
    if worst < 1e-3 {
        Ok(format!("max relative second-order error {worst:.2e} over 20 random networks"))
    } else {
        Err(format!("second-order mismatch vs finite differences: {worst:.2e} > 1e-3"))
    }
}

fn check_box_interior() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0C5);
    let bounds = ControlBounds::uniform(3, -2.0, 5.0);
    for trial in 0..10_000 {
        let scale = 10f64.powi(rng.gen_range(-3..=300));
        let raw = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-1.0..1.0) * scale);
        let out = apply_box_bound(&raw, &bounds);
        for j in 0..3 {
            let v = out[(0, j)];
            if !(v > bounds.lower[j] && v < bounds.upper[j]) {
                return Err(format!(
                    "trial {trial}: output {v} not strictly inside ({}, {})",
                    bounds.lower[j], bounds.upper[j]
                ));
            }
        }
    }
    Ok("10000 draws (including saturating inputs) stayed strictly inside the box".into())
}

fn covariance_deviation(c: &Array2<f64>, draws: usize, seed: u64) -> Result<f64, String> {
    let d = c.nrows();
    let dt = 0.01;
    let grid = TimeGrid::uniform(dt, 1).map_err(|e| e.to_string())?;
    let noise = NoiseStream::new(seed);
    let cc = c.clone();
    let incs = sample_increments(&move |_| cc.clone(), &grid, draws, d, &noise, 0, 1)
        .map_err(|e| e.to_string())?;
    let m = &incs[0];
    let mut worst = 0.0_f64;
    for i in 0..d {
        for j in 0..d {
            let mean: f64 = (0..draws).map(|b| m[(b, i)] * m[(b, j)]).sum::<f64>() / draws as f64;
            let target = c[(i, j)] * dt;
            // SE of a product-moment estimate; for Gaussians
            // Var(Z_i Z_j) = C_ii C_jj + C_ij^2 (times dt^2).
            let var = (c[(i, i)] * c[(j, j)] + c[(i, j)] * c[(i, j)]) * dt * dt;
            let se = (var / draws as f64).sqrt();
            worst = worst.max((mean - target).abs() / se);
        }
    }
    Ok(worst)
}

fn check_increment_covariance() -> CheckResult {
    let draws = 200_000;
    let id2 = Array2::<f64>::eye(2);
    let diag = Array2::from_diag(&Array1::from(vec![4.0, 1.0]));
    let w1 = covariance_deviation(&id2, draws, 11)?;
    let w2 = covariance_deviation(&diag, draws, 12)?;
    let worst = w1.max(w2);
    if worst < 3.0 {
        Ok(format!("max covariance deviation {worst:.2} standard errors ({draws} draws)"))
    } else {
        Err(format!("covariance off by {worst:.2} standard errors (limit 3)"))
    }
}

/// The extended-state diffusion D = Sigma C Sigma^T is 2d x 2d but has
/// rank at most d_M by construction.
fn check_field_diffusion_rank() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
    let spec = make_problem(&BenchmarkId::P2DoubleWell { d: 3 }).map_err(|e| e.to_string())?;
    let d = spec.d();
    let d_m = spec.d_m();
    let hidden = vec![6usize, 6];
    for trial in 0..100 {
        let psi = Networks {
            control: init_network(
                &NetworkSpec {
                    state_dim: d,
                    time_input: true,
                    hidden_widths: hidden.clone(),
                    output_dim: spec.m(),
                    output_map: OutputMap::BoxBounded,
                },
                rng.gen(),
            )
            .map_err(|e| e.to_string())?,
            field: init_network(
                &NetworkSpec {
                    state_dim: d,
                    time_input: true,
                    hidden_widths: hidden.clone(),
                    output_dim: d,
                    output_map: OutputMap::Identity,
                },
                rng.gen(),
            )
            .map_err(|e| e.to_string())?,
        };
        let t = rng.gen_range(0.0..spec.horizon());
        let s = random_point(&mut rng, d);
        let coef = nho_coefficients(&psi, &spec, t, &s).map_err(|e| e.to_string())?;
        let dmat = coef.diffusion_matrix(&spec.c_matrix(t));
        let (eigs, _) = symmetric_eigen(&dmat);
        let max = eigs.iter().cloned().fold(0.0_f64, f64::max);
        let rank = eigs.iter().filter(|&&e| e > 1e-10 * max.max(1.0)).count();
        if rank > d_m {
            return Err(format!("trial {trial}: numerical rank {rank} exceeds d_M = {d_m}"));
        }
    }
    Ok("rank(D) <= d_M on 100 random network draws".into())
}

/// One-step Monte Carlo estimate of the generator on a quadratic test
/// function vs the closed-form nho_apply, within 3 standard errors plus
/// the O(h) Euler bias.
fn check_generator_quadratic() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6E17);
    let spec = make_problem(&BenchmarkId::P2DoubleWell { d: 2 }).map_err(|e| e.to_string())?;
    let d = spec.d();
    let hidden = vec![5usize];
    let psi = Networks {
        control: init_network(
            &NetworkSpec {
                state_dim: d,
                time_input: true,
                hidden_widths: hidden.clone(),
                output_dim: spec.m(),
                output_map: OutputMap::BoxBounded,
            },
            7,
        )
        .map_err(|e| e.to_string())?,
        field: init_network(
            &NetworkSpec {
                state_dim: d,
                time_input: true,
                hidden_widths: hidden,
                output_dim: d,
                output_map: OutputMap::Identity,
            },
            8,
        )
        .map_err(|e| e.to_string())?,
    };
    let t = 0.2;
    let s = random_point(&mut rng, d);
    let coef = nho_coefficients(&psi, &spec, t, &s).map_err(|e| e.to_string())?;
    let mut x = Array1::zeros(2 * d);
    for i in 0..d {
        x[i] = s[i];
        x[d + i] = rng.gen_range(-0.5..0.5);
    }
    let g = TestFunction::squared_norm(2 * d);
    let exact = nho_apply(&psi, &spec, t, &x, &g).map_err(|e| e.to_string())?;

    let h = 1e-3_f64;
    let sigma = coef.sigma_stacked();
    let c_sqrt = matrix_sqrt_psd(&spec.c_matrix(t)).map_err(|e| e.to_string())?;
    let mut b = Array1::zeros(2 * d);
    for i in 0..d {
        b[i] = coef.b_s[i];
        b[d + i] = coef.b_p[i];
    }
    let n = 100_000usize;
    let noise = NoiseStream::new(0x6E17);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let g0 = (g.value)(&x);
    for path in 0..n {
        let eps = noise.normals(path as u64, 0, spec.d_m());
        let dm = c_sqrt.dot(&eps) * h.sqrt();
        let x1 = &x + &(&b * h) + sigma.dot(&dm);
        let v = ((g.value)(&x1) - g0) / h;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
    let bias = 0.5 * h * b.dot(&b) * 2.0; // 1/2 h b^T Hess b for g = ||x||^2
    let dev = (mean - exact).abs();
    if dev <= 3.0 * se + bias + 1e-9 {
        Ok(format!(
            "generator deviation {dev:.3e} within 3 SE ({:.3e}) + Euler bias ({bias:.1e})",
            3.0 * se
        ))
    } else {
        Err(format!(
            "generator MC {mean:.6} vs nho_apply {exact:.6}: deviation {dev:.3e} exceeds 3 SE {:.3e} + bias {bias:.1e}",
            3.0 * se
        ))
    }
}

/// p-tilde_0 must be exactly the field network evaluated at (t_0, S_0).
fn check_adjoint_init() -> CheckResult {
    let spec = make_problem(&BenchmarkId::P1TerminalLog { d: 3 }).map_err(|e| e.to_string())?;
    let d = spec.d();
    let hidden = vec![8usize];
    let control = init_network(
        &NetworkSpec {
            state_dim: d,
            time_input: true,
            hidden_widths: hidden.clone(),
            output_dim: spec.m(),
            output_map: OutputMap::BoxBounded,
        },
        21,
    )
    .map_err(|e| e.to_string())?;
    let field = init_network(
        &NetworkSpec {
            state_dim: d,
            time_input: true,
            hidden_widths: hidden,
            output_dim: d,
            output_map: OutputMap::Identity,
        },
        22,
    )
    .map_err(|e| e.to_string())?;
    let grid = TimeGrid::uniform(spec.horizon(), 10).map_err(|e| e.to_string())?;
    let batch = 16;
    let s0 = Array2::from_shape_fn((batch, d), |(i, j)| 0.1 * i as f64 - 0.2 * j as f64);
    let noise = NoiseStream::new(77);
    let mut tape = Tape::new();
    let cn = control.register(&mut tape);
    let fnet = field.register(&mut tape);
    let traj = crate::simulator::rollout(
        &mut tape,
        &cn,
        &fnet,
        &spec,
        &grid,
        &s0,
        &noise,
        &RolloutOptions::new(batch),
    )
    .map_err(|e| e.to_string())?;
    let p0 = tape.value(traj.p_nodes[0]);
    let direct = field.forward_batch(0.0, &s0).map_err(|e| e.to_string())?;
    if p0 == &direct {
        Ok("p-tilde_0 is bitwise equal to Phi_xi(0, S_0)".into())
    } else {
        Err("p-tilde_0 differs from the direct field evaluation".into())
    }
}

fn check_lambda_zero_identity() -> CheckResult {
    let spec = make_problem(&BenchmarkId::P1TerminalLog { d: 2 }).map_err(|e| e.to_string())?;
    let d = spec.d();
    let hidden = vec![6usize];
    let control = init_network(
        &NetworkSpec {
            state_dim: d,
            time_input: true,
            hidden_widths: hidden.clone(),
            output_dim: spec.m(),
            output_map: OutputMap::BoxBounded,
        },
        31,
    )
    .map_err(|e| e.to_string())?;
    let field = init_network(
        &NetworkSpec {
            state_dim: d,
            time_input: true,
            hidden_widths: hidden,
            output_dim: d,
            output_map: OutputMap::Identity,
        },
        32,
    )
    .map_err(|e| e.to_string())?;
    let grid = TimeGrid::uniform(spec.horizon(), 8).map_err(|e| e.to_string())?;
    let batch = 8;
    let s0 = Array2::zeros((batch, d));
    let noise = NoiseStream::new(5);
    let mut tape = Tape::new();
    let cn = control.register(&mut tape);
    let fnet = field.register(&mut tape);
    let traj = crate::simulator::rollout(
        &mut tape,
        &cn,
        &fnet,
        &spec,
        &grid,
        &s0,
        &noise,
        &RolloutOptions::new(batch),
    )
    .map_err(|e| e.to_string())?;
    let nodes = finite_horizon_objective(&mut tape, &traj, &spec, 0.0).map_err(|e| e.to_string())?;
    if nodes.total == nodes.terminal.expect("finite-horizon loss has a terminal node") {
        Ok("with lambda = 0 the total objective is the terminal-loss node itself".into())
    } else {
        Err("lambda = 0 objective is not identical to the terminal loss".into())
    }
}

fn check_worker_invariance() -> CheckResult {
    let grid = TimeGrid::uniform(1.0, 20).map_err(|e| e.to_string())?;
    let noise = NoiseStream::new(99);
    let c = Array2::from_diag(&Array1::from(vec![2.0, 0.5, 1.0]));
    let make = |workers: usize| {
        let cc = c.clone();
        sample_increments(&move |_| cc.clone(), &grid, 64, 3, &noise, 7, workers)
    };
    let one = make(1).map_err(|e| e.to_string())?;
    for &w in &[2usize, 3, 5] {
        let many = make(w).map_err(|e| e.to_string())?;
        if one != many {
            return Err(format!("increments differ between 1 and {w} workers"));
        }
    }
    Ok("increments are bitwise identical for 1, 2, 3 and 5 workers".into())
}

fn check_lr_schedule() -> CheckResult {
    let gamma0 = 0.05;
    let k0 = 100.0;
    if (lr_schedule(0, gamma0, k0) - gamma0).abs() > 0.0 {
        return Err("schedule does not start at gamma0".into());
    }
    let mut prev = f64::INFINITY;
    for k in 0..10_000 {
        let g = lr_schedule(k, gamma0, k0);
        if !(g > 0.0) || g > prev {
            return Err(format!("schedule not positive and decreasing at k = {k}"));
        }
        prev = g;
    }
    // sum diverges (harmonic tail), sum of squares converges: check the
    // partial sums behave accordingly on a long prefix.
    let sum: f64 = (0..1_000_000).map(|k| lr_schedule(k, gamma0, k0)).sum();
    let sumsq: f64 = (0..1_000_000).map(|k| lr_schedule(k, gamma0, k0).powi(2)).sum();
    if sum < 5.0 * gamma0 * k0 {
        return Err(format!("schedule sum {sum:.3} grows too slowly for divergence"));
    }
    if sumsq > 2.0 * gamma0 * gamma0 * k0 {
        return Err(format!("schedule square-sum {sumsq:.3e} too large for convergence"));
    }
    Ok("gamma_k is positive, decreasing, with divergent sum and convergent square-sum".into())
}
