//! Post-training evaluation: Monte-Carlo value estimates under the
//! learned control, value/control slices for figure reproduction, and
//! expected-path statistics. Everything here is plain (non-differentiable)
//! simulation; evaluation seeds should be disjoint from training seeds.

use ndarray::{Array1, Array2, Axis};
use std::io::Write;

use crate::error::{NhoError, Result};
use crate::model::{scaled_time, Networks, ProblemSpec};
use crate::network::control_forward_batch;
use crate::simulator::{matrix_sqrt_psd, NoiseStream, TimeGrid};

/// One-dimensional slice specification: vary `axis` over [lo, hi] with
/// the other coordinates pinned at `fixed`.
#[derive(Debug, Clone)]
pub struct SliceRequest {
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub fixed: Array1<f64>,
    pub t: f64,
}

impl SliceRequest {
    /// Figure default: 101 points over [-3, 3] on the first coordinate.
    pub fn default_for(spec: &ProblemSpec) -> Self {
        SliceRequest {
            axis: 0,
            lo: -3.0,
            hi: 3.0,
            points: 101,
            fixed: Array1::zeros(spec.d()),
            t: 0.0,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.axis >= d {
            return Err(NhoError::Config(format!("slice axis {} out of range", self.axis)));
        }
        if !(self.lo < self.hi) || self.points < 2 {
            return Err(NhoError::Config("slice needs lo < hi and points >= 2".into()));
        }
        Ok(())
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.points)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64)
            .collect()
    }
}

/// Simulate the state under the learned feedback control from the rows of
/// `s0`, accumulating the left-endpoint quadrature of the running payoff
/// plus the terminal payoff per path (in the internal maximization sense).
/// `on_step` observes the state matrix at every grid index including 0 and
/// N. Aborts on non-finite states.
pub fn simulate_controlled(
    psi: &Networks,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    s0: &Array2<f64>,
    noise: &NoiseStream,
    path_offset: u64,
    mut on_step: Option<&mut dyn FnMut(usize, &Array2<f64>)>,
) -> Result<Array1<f64>> {
    let d = spec.d();
    let d_m = spec.d_m();
    let batch = s0.nrows();
    let mut s = s0.clone();
    let mut value = Array1::<f64>::zeros(batch);
    if let Some(cb) = on_step.as_deref_mut() {
        cb(0, &s);
    }
    for i in 0..grid.steps() {
        let t = grid.time(i);
        let dt = grid.dt(i);
        let alpha = control_forward_batch(&psi.control, spec.bounds(), scaled_time(spec, t), &s)?;
        // running payoff, left endpoint
        for (b, (srow, arow)) in s.axis_iter(Axis(0)).zip(alpha.axis_iter(Axis(0))).enumerate() {
            value[b] += dt * spec.running(t, &srow.to_owned(), &arow.to_owned());
        }
        // drift
        let drift = spec.drift_batch(t, &s, &alpha);
        // diffusion increment
        let sigma = spec.diffusion(t);
        let c_sqrt = matrix_sqrt_psd(&spec.c_matrix(t))?;
        let mut dm = Array2::<f64>::zeros((batch, d_m));
        for b in 0..batch {
            let eps = noise.normals(path_offset + b as u64, i as u64, d_m);
            let inc = c_sqrt.dot(&eps) * dt.sqrt();
            dm.row_mut(b).assign(&inc);
        }
        s = &s + &(&drift * dt) + dm.dot(&sigma.t());
        for (b, row) in s.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(NhoError::NonFinite {
                    step: i + 1,
                    path: path_offset as usize + b,
                });
            }
        }
        if let Some(cb) = on_step.as_deref_mut() {
            cb(i + 1, &s);
        }
    }
    for (b, row) in s.axis_iter(Axis(0)).enumerate() {
        value[b] += spec.terminal(&row.to_owned());
    }
    let _ = d;
    Ok(value)
}

/// Monte-Carlo estimate of the control objective from `s0`, with standard
/// error. The sign convention of the original problem is restored, so
/// minimization problems report costs.
pub fn estimate_value(
    psi: &Networks,
    spec: &ProblemSpec,
    s0: &Array1<f64>,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let grid = TimeGrid::uniform(spec.horizon(), steps)?;
    let mut s0_batch = Array2::zeros((batch, spec.d()));
    for mut row in s0_batch.axis_iter_mut(Axis(0)) {
        row.assign(s0);
    }
    let values = simulate_controlled(psi, spec, &grid, &s0_batch, &NoiseStream::new(seed), 0, None)?;
    let n = batch as f64;
    let mean = values.sum() / n;
    let var = if batch > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((spec.restore_sense(mean), (var / n).sqrt()))
}

/// One row of a value/control slice table.
#[derive(Debug, Clone)]
pub struct SliceRow {
    pub coordinate: f64,
    pub value: f64,
    pub value_se: f64,
    pub value_ref: Option<f64>,
    pub alpha1: f64,
    pub alpha1_ref: Option<f64>,
}

/// Value and first-control-component slice along one axis. All slice
/// points share one big simulation batch so the work is a handful of
/// matrix products per time step. Optional oracles fill the reference
/// columns.
#[allow(clippy::type_complexity)]
pub fn value_slice(
    psi: &Networks,
    spec: &ProblemSpec,
    req: &SliceRequest,
    steps: usize,
    batch_per_point: usize,
    seed: u64,
    value_oracle: Option<&dyn Fn(f64, &Array1<f64>) -> f64>,
    control_oracle: Option<&dyn Fn(f64, &Array1<f64>) -> f64>,
) -> Result<Vec<SliceRow>> {
    req.validate(spec.d())?;
    let coords = req.coordinates();
    let grid = TimeGrid::uniform(spec.horizon(), steps)?;
    let total = coords.len() * batch_per_point;
    let mut s0 = Array2::zeros((total, spec.d()));
    for (pi, &c) in coords.iter().enumerate() {
        for b in 0..batch_per_point {
            let mut row = s0.row_mut(pi * batch_per_point + b);
            row.assign(&req.fixed);
            row[req.axis] = c;
        }
    }
    let values = simulate_controlled(psi, spec, &grid, &s0, &NoiseStream::new(seed), 0, None)?;

    let mut rows = Vec::with_capacity(coords.len());
    for (pi, &c) in coords.iter().enumerate() {
        let chunk = values.slice(ndarray::s![pi * batch_per_point..(pi + 1) * batch_per_point]);
        let n = batch_per_point as f64;
        let mean = chunk.sum() / n;
        let var = if batch_per_point > 1 {
            chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let mut point = req.fixed.clone();
        point[req.axis] = c;
        let alpha = crate::network::control_forward(
            &psi.control,
            spec.bounds(),
            scaled_time(spec, req.t),
            &point,
        )?;
        rows.push(SliceRow {
            coordinate: c,
            value: spec.restore_sense(mean),
            value_se: (var / n).sqrt(),
            value_ref: value_oracle.map(|f| f(req.t, &point)),
            alpha1: alpha[0],
            alpha1_ref: control_oracle.map(|f| f(req.t, &point)),
        });
    }
    Ok(rows)
}

pub fn write_slice(w: &mut dyn Write, rows: &[SliceRow]) -> Result<()> {
    writeln!(w, "coordinate\tvalue\tvalue_se\tvalue_ref\talpha1\talpha1_ref")?;
    for r in rows {
        let vr = r.value_ref.map(|v| v.to_string()).unwrap_or_default();
        let ar = r.alpha1_ref.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{}\t{}\t{}\t{vr}\t{}\t{ar}",
            r.coordinate, r.value, r.value_se, r.alpha1
        )?;
    }
    Ok(())
}

/// Per-grid-time (mean, std) of one state coordinate over a simulated
/// batch started at the point mass `s0`.
pub fn expected_path(
    psi: &Networks,
    spec: &ProblemSpec,
    s0: &Array1<f64>,
    coordinate: usize,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    if coordinate >= spec.d() {
        return Err(NhoError::Config(format!("coordinate {coordinate} out of range")));
    }
    let grid = TimeGrid::uniform(spec.horizon(), steps)?;
    let mut s0_batch = Array2::zeros((batch, spec.d()));
    for mut row in s0_batch.axis_iter_mut(Axis(0)) {
        row.assign(s0);
    }
    let mut stats: Vec<(f64, f64, f64)> = Vec::with_capacity(steps + 1);
    let times: Vec<f64> = grid.times().to_vec();
    {
        let mut record = |i: usize, s: &Array2<f64>| {
            let col = s.column(coordinate);
            let n = batch as f64;
            let mean = col.sum() / n;
            let var = if batch > 1 {
                col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            stats.push((times[i], mean, var.sqrt()));
        };
        simulate_controlled(
            psi,
            spec,
            &grid,
            &s0_batch,
            &NoiseStream::new(seed),
            0,
            Some(&mut record),
        )?;
    }
    Ok(stats)
}

pub fn write_path(w: &mut dyn Write, stats: &[(f64, f64, f64)]) -> Result<()> {
    writeln!(w, "t\tmean\tstd")?;
    for (t, m, s) in stats {
        writeln!(w, "{t}\t{m}\t{s}")?;
    }
    Ok(())
}
