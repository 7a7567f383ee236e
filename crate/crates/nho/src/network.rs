//! MLP definitions for the feedback-control network and the decoupling
//! field network, with Glorot initialization, a box-bounded output map for
//! controls, and input-Jacobians assembled on the autodiff tape.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{NhoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMap {
    Identity,
    BoxBounded,
}

/// Architecture of one MLP. Hidden activations are tanh throughout; the
/// approximation guarantees need a smooth non-polynomial activation, so
/// the activation is not configurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub state_dim: usize,
    /// Whether time is concatenated as an extra input feature (scaled to
    /// [0,1]). Stationary networks set this to false.
    pub time_input: bool,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub output_map: OutputMap,
}

impl NetworkSpec {
    pub fn input_dim(&self) -> usize {
        self.state_dim + usize::from(self.time_input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.output_dim == 0 || self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(NhoError::Config("network widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer (in, out) dimension pairs, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim();
        for &h in &self.hidden_widths {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// One affine layer; weights are stored (in, out) so a batched forward is
/// `x.dot(w) + b`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array2<f64>, // 1 x out
}

#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

/// Componentwise box K: the control set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBounds {
    pub fn uniform(m: usize, lo: f64, hi: f64) -> Self {
        ControlBounds {
            lower: vec![lo; m],
            upper: vec![hi; m],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len()
            || self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u))
        {
            return Err(NhoError::Config("control bounds require lower < upper".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Array1<f64> {
        Array1::from_iter(self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)))
    }

    pub fn half_width(&self) -> Array1<f64> {
        Array1::from_iter(self.upper.iter().zip(&self.lower).map(|(u, l)| 0.5 * (u - l)))
    }
}

/// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
/// Deterministic in the seed.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit));
            Layer {
                w,
                b: Array2::zeros((1, fan_out)),
            }
        })
        .collect();
    Ok(NetworkParams { spec: spec.clone(), layers })
}

impl NetworkParams {
    fn check_state(&self, s_len: usize) -> Result<()> {
        if s_len != self.spec.state_dim {
            return Err(NhoError::shape(
                "network forward state",
                self.spec.state_dim.to_string(),
                s_len.to_string(),
            ));
        }
        Ok(())
    }

    /// Plain batched forward. `s` is B x d; `t_scaled` is t/T in [0,1]
    /// (ignored for stationary networks). Applies the configured output map.
    pub fn forward_batch(&self, t_scaled: f64, s: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_state(s.ncols())?;
        let mut x = if self.spec.time_input {
            let b = s.nrows();
            let mut u = Array2::zeros((b, 1 + s.ncols()));
            u.column_mut(0).fill(t_scaled);
            u.slice_mut(ndarray::s![.., 1..]).assign(s);
            u
        } else {
            s.clone()
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = x.dot(&layer.w) + &layer.b;
            if i < last {
                x.mapv_inplace(f64::tanh);
            }
        }
        Ok(x)
    }

    /// Single-point forward; `s` is a d-vector, output an m-vector.
    pub fn forward(&self, t_scaled: f64, s: &Array1<f64>) -> Result<Array1<f64>> {
        let sb = s.view().insert_axis(ndarray::Axis(0)).to_owned();
        Ok(self.forward_batch(t_scaled, &sb)?.row(0).to_owned())
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Shrink factor keeping the box map strictly interior even when tanh
/// saturates to exactly +-1.0 in floating point.
pub(crate) const BOX_MARGIN: f64 = 1.0 - 1e-15;

/// Output map: center + half_width * tanh(raw), strictly inside K for all
/// finite inputs.
pub fn apply_box_bound(raw: &Array2<f64>, bounds: &ControlBounds) -> Array2<f64> {
    let center = bounds.center();
    let half = bounds.half_width();
    let mut out = raw.mapv(f64::tanh);
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = center[j] + half[j] * BOX_MARGIN * *v;
        }
    }
    out
}

/// Batched control evaluation: alpha in K.
pub fn control_forward_batch(
    omega: &NetworkParams,
    bounds: &ControlBounds,
    t_scaled: f64,
    s: &Array2<f64>,
) -> Result<Array2<f64>> {
    let raw = omega.forward_batch(t_scaled, s)?;
    Ok(apply_box_bound(&raw, bounds))
}

pub fn control_forward(
    omega: &NetworkParams,
    bounds: &ControlBounds,
    t_scaled: f64,
    s: &Array1<f64>,
) -> Result<Array1<f64>> {
    let sb = s.view().insert_axis(ndarray::Axis(0)).to_owned();
    Ok(control_forward_batch(omega, bounds, t_scaled, &sb)?.row(0).to_owned())
}

/// Parameter nodes of one network on a tape.
pub struct TapeNet {
    pub spec: NetworkSpec,
    /// (weight node, bias node) per layer.
    pub layers: Vec<(NodeId, NodeId)>,
}

impl NetworkParams {
    /// Register all layers as trainable leaves on the tape.
    pub fn register(&self, tape: &mut Tape) -> TapeNet {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect();
        TapeNet {
            spec: self.spec.clone(),
            layers,
        }
    }

    /// Register all layers as constants (no gradient tracked).
    pub fn register_frozen(&self, tape: &mut Tape) -> TapeNet {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.constant(l.w.clone()), tape.constant(l.b.clone())))
            .collect();
        TapeNet {
            spec: self.spec.clone(),
            layers,
        }
    }
}

impl TapeNet {
    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Batched forward on the tape without the output map; `s` is a B x d
    /// node. Returns the raw output node (B x out).
    pub fn forward_raw(&self, tape: &mut Tape, t_scaled: f64, s: NodeId) -> NodeId {
        let mut x = if self.spec.time_input {
            let b = tape.shape(s).0;
            let t_col = tape.constant(Array2::from_elem((b, 1), t_scaled));
            tape.concat_cols(t_col, s)
        } else {
            s
        };
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(x, w);
            x = tape.add(z, b);
            if i < last {
                x = tape.tanh(x);
            }
        }
        x
    }

    /// Forward with the output map applied.
    pub fn forward(&self, tape: &mut Tape, t_scaled: f64, s: NodeId, bounds: Option<&ControlBounds>) -> NodeId {
        let raw = self.forward_raw(tape, t_scaled, s);
        match (self.spec.output_map, bounds) {
            (OutputMap::Identity, _) => raw,
            (OutputMap::BoxBounded, Some(b)) => {
                let m = self.spec.output_dim;
                let center = tape.constant(b.center().insert_axis(ndarray::Axis(0)).into_shape((1, m)).unwrap());
                let half = tape.constant(
                    (b.half_width() * BOX_MARGIN)
                        .insert_axis(ndarray::Axis(0))
                        .into_shape((1, m))
                        .unwrap(),
                );
                let th = tape.tanh(raw);
                let scaled = tape.mul(th, half);
                // center broadcast over the batch
                let sh = tape.shape(scaled);
                let zero = tape.zeros(sh);
                let centered = tape.add(zero, center);
                tape.add(scaled, centered)
            }
            (OutputMap::BoxBounded, None) => panic!("box-bounded output map requires bounds"),
        }
    }
}

/// State-input Jacobian columns of a network output already on the tape:
/// column j is d(out)/d(s_j) as a B x out node. Tangents are recorded as
/// ordinary primitives, so gradients through the Jacobian see the full
/// parameter dependence.
pub fn input_jacobian_columns(
    tape: &mut Tape,
    out: NodeId,
    s: NodeId,
) -> Result<Vec<NodeId>> {
    let (b, d) = tape.shape(s);
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let mut seed = Array2::zeros((b, d));
        seed.column_mut(j).fill(1.0);
        let seed = tape.constant(seed);
        cols.push(tape.jvp(out, s, seed)?);
    }
    Ok(cols)
}

/// Input-Jacobian of the network at one point: out x d matrix of partial
/// derivatives with respect to the state (not time).
pub fn input_jacobian(params: &NetworkParams, t_scaled: f64, s: &Array1<f64>) -> Result<Array2<f64>> {
    params.check_state(s.len())?;
    let mut tape = Tape::new();
    let net = params.register_frozen(&mut tape);
    let sv = s.view().insert_axis(ndarray::Axis(0)).to_owned();
    let s_node = tape.param(sv);
    let out = net.forward_raw(&mut tape, t_scaled, s_node);
    let cols = input_jacobian_columns(&mut tape, out, s_node)?;
    let m = params.spec.output_dim;
    let d = s.len();
    let mut jac = Array2::zeros((m, d));
    for (j, &c) in cols.iter().enumerate() {
        jac.column_mut(j).assign(&tape.value(c).row(0));
    }
    Ok(jac)
}

// --- checkpoint format -------------------------------------------------

/// Serialized form of one network. JSON floats round-trip bit-exactly
/// (shortest representation, at most 17 significant digits).
#[derive(Debug, Serialize, Deserialize)]
pub struct NetworkDump {
    pub spec: NetworkSpec,
    pub seed: u64,
    /// Row-major weight matrices and bias vectors, layer by layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkDump {
    pub fn from_params(params: &NetworkParams, seed: u64) -> Self {
        NetworkDump {
            spec: params.spec.clone(),
            seed,
            weights: params
                .layers
                .iter()
                .map(|l| l.w.iter().copied().collect())
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| l.b.iter().copied().collect())
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<NetworkParams> {
        self.spec.validate()?;
        let dims = self.spec.layer_dims();
        if dims.len() != self.weights.len() || dims.len() != self.biases.len() {
            return Err(NhoError::Checkpoint("layer count mismatch".into()));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for ((fan_in, fan_out), (wf, bf)) in dims.into_iter().zip(self.weights.iter().zip(&self.biases)) {
            let w = Array2::from_shape_vec((fan_in, fan_out), wf.clone())
                .map_err(|e| NhoError::Checkpoint(format!("weight shape: {e}")))?;
            if bf.len() != fan_out {
                return Err(NhoError::Checkpoint("bias length mismatch".into()));
            }
            let b = Array2::from_shape_vec((1, fan_out), bf.clone()).unwrap();
            layers.push(Layer { w, b });
        }
        Ok(NetworkParams {
            spec: self.spec.clone(),
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use proptest::prelude::*;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            state_dim: 3,
            time_input: true,
            hidden_widths: vec![8, 8],
            output_dim: 2,
            output_map: OutputMap::Identity,
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let spec = small_spec();
        let a = init_network(&spec, 7).unwrap();
        let b = init_network(&spec, 7).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
        let c = init_network(&spec, 8).unwrap();
        assert_ne!(a.layers[0].w, c.layers[0].w);
    }

    #[test]
    fn empty_hidden_widths_gives_single_affine_layer() {
        let spec = NetworkSpec {
            state_dim: 4,
            time_input: false,
            hidden_widths: vec![],
            output_dim: 2,
            output_map: OutputMap::Identity,
        };
        let params = init_network(&spec, 1).unwrap();
        assert_eq!(params.layers.len(), 1);
        assert_eq!(params.layers[0].w.dim(), (4, 2));
        // forward is exactly W^T s + b
        let s = arr1(&[1.0, -2.0, 0.5, 3.0]);
        let out = params.forward(0.0, &s).unwrap();
        let expect = s
            .view()
            .insert_axis(ndarray::Axis(0))
            .dot(&params.layers[0].w);
        assert_eq!(out, expect.row(0));
    }

    #[test]
    fn glorot_sample_mean_near_zero() {
        // one wide layer, ~1e5 draws; uniform(-a,a) has mean 0 and
        // sd a/sqrt(3), so the sample mean should be within 3 sigma of 0
        let spec = NetworkSpec {
            state_dim: 316,
            time_input: false,
            hidden_widths: vec![],
            output_dim: 316,
            output_map: OutputMap::Identity,
        };
        let params = init_network(&spec, 123).unwrap();
        let w = &params.layers[0].w;
        let n = w.len() as f64;
        let limit = (6.0_f64 / (316.0 + 316.0)).sqrt();
        let sd_mean = limit / (3.0_f64).sqrt() / n.sqrt();
        let mean = w.sum() / n;
        assert!(mean.abs() < 3.0 * sd_mean, "mean {mean} vs 3 sigma {}", 3.0 * sd_mean);
    }

    #[test]
    fn zero_params_forward_is_zero() {
        let spec = small_spec();
        let mut params = init_network(&spec, 0).unwrap();
        for l in &mut params.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let out = params.forward(0.3, &arr1(&[1.0, 2.0, 3.0])).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_reference_reimplementation() {
        let spec = small_spec();
        let params = init_network(&spec, 99).unwrap();
        let t = 0.42;
        let s = arr1(&[0.5, -1.3, 2.1]);
        let out = params.forward(t, &s).unwrap();

        // straight-line re-implementation of the same arithmetic
        let mut x = vec![t, 0.5, -1.3, 2.1];
        for (i, l) in params.layers.iter().enumerate() {
            let (fan_in, fan_out) = l.w.dim();
            let mut y = vec![0.0; fan_out];
            for j in 0..fan_out {
                let mut acc = l.b[[0, j]];
                for k in 0..fan_in {
                    acc += x[k] * l.w[[k, j]];
                }
                y[j] = if i < params.layers.len() - 1 { acc.tanh() } else { acc };
            }
            x = y;
        }
        for (a, b) in out.iter().zip(&x) {
            // matmul accumulation order may differ from the scalar loop
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn control_raw_zero_maps_to_box_center() {
        let bounds = ControlBounds {
            lower: vec![-1.0, 0.0],
            upper: vec![3.0, 5.0],
        };
        let raw = Array2::zeros((1, 2));
        let out = apply_box_bound(&raw, &bounds);
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[0, 1]], 2.5);
    }

    #[test]
    fn control_saturates_inside_bounds() {
        let bounds = ControlBounds::uniform(1, -2.0, 4.0);
        let raw = Array2::from_elem((1, 1), 50.0);
        let out = apply_box_bound(&raw, &bounds);
        assert!(out[[0, 0]] < 4.0 && out[[0, 0]] > 3.999, "got {}", out[[0, 0]]);
    }

    #[test]
    fn control_direct_substitution() {
        // bounds [-5,5], raw 1.0 -> 5*tanh(1)
        let bounds = ControlBounds::uniform(1, -5.0, 5.0);
        let raw = Array2::from_elem((1, 1), 1.0);
        let out = apply_box_bound(&raw, &bounds);
        let expect = 5.0 * 1.0_f64.tanh();
        assert!((out[[0, 0]] - expect).abs() < 1e-13);
        assert!((expect - 3.8079).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn control_output_strictly_inside_box(raw in proptest::collection::vec(-1e6_f64..1e6, 3)) {
            let bounds = ControlBounds {
                lower: vec![-5.0, 0.0, 2.0],
                upper: vec![5.0, 1.0, 7.0],
            };
            let r = Array2::from_shape_vec((1, 3), raw).unwrap();
            let out = apply_box_bound(&r, &bounds);
            for j in 0..3 {
                prop_assert!(out[[0, j]] > bounds.lower[j]);
                prop_assert!(out[[0, j]] < bounds.upper[j]);
            }
        }
    }

    #[test]
    fn jacobian_of_linear_network() {
        // Phi(t,s) = M s + c t: jacobian wrt s is exactly M
        let spec = NetworkSpec {
            state_dim: 2,
            time_input: true,
            hidden_widths: vec![],
            output_dim: 2,
            output_map: OutputMap::Identity,
        };
        let mut params = init_network(&spec, 0).unwrap();
        // rows of w: [t, s1, s2]
        params.layers[0].w = ndarray::arr2(&[[0.3, -0.4], [1.0, 2.0], [3.0, 4.0]]);
        let jac = input_jacobian(&params, 0.7, &arr1(&[0.1, 0.2])).unwrap();
        assert_eq!(jac, ndarray::arr2(&[[1.0, 3.0], [2.0, 4.0]]));
    }

    #[test]
    fn jacobian_of_constant_network_is_zero() {
        let spec = small_spec();
        let mut params = init_network(&spec, 3).unwrap();
        for l in &mut params.layers {
            l.w.fill(0.0);
        }
        params.layers.last_mut().unwrap().b.fill(2.5);
        let jac = input_jacobian(&params, 0.1, &arr1(&[1.0, 2.0, 3.0])).unwrap();
        assert!(jac.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_matches_finite_differences_random_nets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let spec = NetworkSpec {
                state_dim: 3,
                time_input: trial % 2 == 0,
                hidden_widths: vec![6, 5],
                output_dim: 3,
                output_map: OutputMap::Identity,
            };
            let params = init_network(&spec, trial).unwrap();
            let t = rng.gen_range(0.0..1.0);
            let s: Array1<f64> = Array1::from_shape_simple_fn(3, || rng.gen_range(-1.5..1.5));
            let jac = input_jacobian(&params, t, &s).unwrap();
            let h = 1e-5;
            for j in 0..3 {
                let mut sp = s.clone();
                sp[j] += h;
                let mut sm = s.clone();
                sm[j] -= h;
                let up = params.forward(t, &sp).unwrap();
                let lo = params.forward(t, &sm).unwrap();
                for i in 0..3 {
                    let fd = (up[i] - lo[i]) / (2.0 * h);
                    let rel = (jac[[i, j]] - fd).abs() / fd.abs().max(1e-7);
                    assert!(rel <= 1e-4, "trial {trial} jac[{i},{j}]={} fd={fd}", jac[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let spec = small_spec();
        let params = init_network(&spec, 31415).unwrap();
        let dump = NetworkDump::from_params(&params, 31415);
        let text = serde_json::to_string_pretty(&dump).unwrap();
        let back: NetworkDump = serde_json::from_str(&text).unwrap();
        let restored = back.to_params().unwrap();
        for (a, b) in params.layers.iter().zip(&restored.layers) {
            assert!(a.w.iter().zip(b.w.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.b.iter().zip(b.b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
