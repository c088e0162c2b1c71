//! Fully connected tanh network with gated residual blocks.
//!
//! Layout: a lift layer `4 -> width`, optional extra plain hidden layers,
//! then `n_blocks` residual blocks separated by single plain layers, then a
//! linear head `width -> 2` producing `(u, v)`. Each block computes
//!
//! ```text
//! h1 = tanh(W1 x + b1)
//! h2 = tanh(W2 h1 + b2)
//! x' = (1 - alpha) h2 + alpha x,    alpha = sigmoid(alpha_t)
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Arith, DiffFn, Tape, Var};
use crate::error::{Error, Result};
use crate::mesh::{Point, TriMesh};

pub const INPUT_DIM: usize = 4;
pub const OUTPUT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub width: usize,
    pub n_blocks: usize,
    /// Layers outside the blocks, counting the lift and the head.
    pub n_plain_layers: usize,
    pub seed: u64,
    #[serde(default = "default_alpha_t")]
    pub alpha_t_init: f64,
}

/// Initial gate logit; `alpha = 0.5` blends block output and input equally.
fn default_alpha_t() -> f64 {
    0.0
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_depth(15, 3, 10, 0)
    }
}

impl NetworkConfig {
    /// Config with `depth` total layers of which `2 * n_blocks` sit inside
    /// blocks.
    pub fn with_depth(width: usize, n_blocks: usize, depth: usize, seed: u64) -> Self {
        Self {
            width,
            n_blocks,
            n_plain_layers: depth.saturating_sub(2 * n_blocks),
            seed,
            alpha_t_init: default_alpha_t(),
        }
    }

    pub fn total_layers(&self) -> usize {
        self.n_plain_layers + 2 * self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidConfig("network width must be >= 1".into()));
        }
        // Lift, head and one separator between consecutive blocks.
        let min_plain = 2 + self.n_blocks.saturating_sub(1);
        if self.n_plain_layers < min_plain {
            return Err(Error::InvalidConfig(format!(
                "{} blocks need at least {min_plain} plain layers, got {}",
                self.n_blocks, self.n_plain_layers
            )));
        }
        if !self.alpha_t_init.is_finite() {
            return Err(Error::InvalidConfig("alpha_t_init must be finite".into()));
        }
        Ok(())
    }

    /// Plain hidden layers placed between the lift and the first block.
    fn extra_plain(&self) -> usize {
        self.n_plain_layers - 2 - self.n_blocks.saturating_sub(1)
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let w = self.width;
        let hidden = w * w + w;
        (INPUT_DIM * w + w)
            + (self.n_plain_layers - 2) * hidden
            + 2 * self.n_blocks * hidden
            + self.n_blocks
            + (w * OUTPUT_DIM + OUTPUT_DIM)
    }
}

/// Affine map from mesh coordinates and time into the network's input box:
/// each spatial axis onto `[-1, 1]` by the bounding box, time onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
    pub t_span: f64,
}

impl InputScaling {
    pub fn for_mesh(mesh: &TriMesh, t_span: f64) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let mut center = [0.0; 3];
        let mut half_extent = [1.0; 3];
        for a in 0..3 {
            center[a] = 0.5 * (lo[a] + hi[a]);
            let h = 0.5 * (hi[a] - lo[a]);
            if h > 0.0 {
                half_extent[a] = h;
            }
        }
        Self {
            center,
            half_extent,
            t_span: if t_span > 0.0 { t_span } else { 1.0 },
        }
    }

    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            half_extent: [1.0; 3],
            t_span: 1.0,
        }
    }

    pub fn apply(&self, p: &Point, t: f64) -> [f64; 4] {
        [
            (p.x - self.center[0]) / self.half_extent[0],
            (p.y - self.center[1]) / self.half_extent[1],
            (p.z - self.center[2]) / self.half_extent[2],
            t / self.t_span,
        ]
    }

    /// `4 x n` input matrix for the given points.
    pub fn inputs<'a>(&self, points: impl ExactSizeIterator<Item = (&'a Point, f64)>) -> DMatrix<f64> {
        let n = points.len();
        let mut m = DMatrix::zeros(INPUT_DIM, n);
        for (c, (p, t)) in points.enumerate() {
            let x = self.apply(p, t);
            for r in 0..INPUT_DIM {
                m[(r, c)] = x[r];
            }
        }
        m
    }

    /// `d(normalized input) / d(raw input)` per axis.
    pub fn input_factors(&self) -> [f64; 4] {
        [
            1.0 / self.half_extent[0],
            1.0 / self.half_extent[1],
            1.0 / self.half_extent[2],
            1.0 / self.t_span,
        ]
    }
}

/// Weight and bias of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    config: NetworkConfig,
    scaling: InputScaling,
    /// Evaluation order: lift, extras, (block, block, separator)*, head.
    layers: Vec<Dense>,
    alpha_t: Vec<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Dense {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Dense {
        w: DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound)),
        b: DMatrix::zeros(rows, 1),
    }
}

impl NetworkParams {
    /// Glorot-uniform weights, zero biases, every gate at `alpha_t_init`.
    pub fn init(config: &NetworkConfig, scaling: InputScaling) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = config.width;
        let hidden_count = config.total_layers() - 2;
        let mut layers = vec![glorot(w, INPUT_DIM, &mut rng)];
        for _ in 0..hidden_count {
            layers.push(glorot(w, w, &mut rng));
        }
        layers.push(glorot(OUTPUT_DIM, w, &mut rng));
        Ok(Self {
            config: *config,
            scaling,
            layers,
            alpha_t: vec![config.alpha_t_init; config.n_blocks],
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn alpha_t(&self) -> &[f64] {
        &self.alpha_t
    }

    pub fn alpha_t_mut(&mut self) -> &mut [f64] {
        &mut self.alpha_t
    }

    /// Gate values `sigmoid(alpha_t)`.
    pub fn alphas(&self) -> Vec<f64> {
        self.alpha_t.iter().map(|&a| sigmoid(a)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + self.alpha_t.len()
    }

    /// Every trainable tensor as a flat slice, in [`BoundNetwork::parameters`]
    /// order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        for a in &mut self.alpha_t {
            out.push(std::slice::from_mut(a));
        }
        out
    }

    /// Records the parameters on `tape` as leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNetwork<'t> {
        self.bind_with_gates(tape, None)
    }

    /// Like [`bind`](Self::bind), but `Some(a)` fixes every gate to `a`,
    /// bypassing the sigmoid.
    pub fn bind_with_gates<'t>(&self, tape: &'t Tape, gate_override: Option<f64>) -> BoundNetwork<'t> {
        let layers: Vec<(Var<'t>, Var<'t>)> = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect();
        let alpha_t: Vec<Var<'t>> = self.alpha_t.iter().map(|&a| tape.scalar(a)).collect();
        let gates = alpha_t
            .iter()
            .map(|&a| {
                let alpha = match gate_override {
                    Some(g) => tape.scalar(g),
                    None => a.sigmoid(),
                };
                (alpha, alpha.scale(-1.0).add_scalar(1.0))
            })
            .collect();
        BoundNetwork {
            config: self.config,
            layers,
            alpha_t,
            gates,
        }
    }

    /// Network outputs (`2 x n`) for normalized inputs (`4 x n`).
    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let tape = Tape::new();
        let net = self.bind(&tape);
        let out = net.call(tape.leaf(inputs.clone()))?;
        let value = out.value().clone();
        Ok(value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.into_params()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Parameters recorded on a tape, ready for differentiable evaluation.
#[derive(Debug, Clone)]
pub struct BoundNetwork<'t> {
    config: NetworkConfig,
    layers: Vec<(Var<'t>, Var<'t>)>,
    alpha_t: Vec<Var<'t>>,
    /// `(alpha, 1 - alpha)` per block.
    gates: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundNetwork<'t> {
    /// Leaves in [`NetworkParams::tensors_mut`] order.
    pub fn parameters(&self) -> Vec<Var<'t>> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(self.alpha_t.iter().copied())
            .collect()
    }
}

impl<'t> DiffFn<'t> for BoundNetwork<'t> {
    fn call<A: Arith<'t>>(&self, x: A) -> Result<A> {
        let mut layers = self.layers.iter();
        let mut dense = |h: &A| -> Result<A> {
            let (w, b) = layers.next().expect("layer count fixed by config");
            h.affine_param(*w, *b)
        };
        let mut h = dense(&x)?.tanh();
        for _ in 0..self.config.extra_plain() {
            h = dense(&h)?.tanh();
        }
        for (k, &(alpha, keep)) in self.gates.iter().enumerate() {
            if k > 0 {
                h = dense(&h)?.tanh();
            }
            let h1 = dense(&h)?.tanh();
            let h2 = dense(&h1)?.tanh();
            h = h2.scalar_mul_param(keep)?.add(&h.scalar_mul_param(alpha)?)?;
        }
        dense(&h)
    }
}

const CHECKPOINT_FORMAT: &str = "ecgi-network";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: NetworkConfig,
    scaling: InputScaling,
    layers: Vec<LayerRecord>,
    alpha_t: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    /// Row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&NetworkParams> for Checkpoint {
    fn from(p: &NetworkParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: p.config,
            scaling: p.scaling,
            layers: p
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.transpose().as_slice().to_vec(),
                    bias: l.b.as_slice().to_vec(),
                })
                .collect(),
            alpha_t: p.alpha_t.clone(),
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<NetworkParams> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()?;
        let expected = NetworkParams::init(&self.config, self.scaling)?;
        if self.layers.len() != expected.layers.len() || self.alpha_t.len() != expected.alpha_t.len() {
            return Err(Error::InvalidConfig(
                "checkpoint layer count does not match config".into(),
            ));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (rec, want) in self.layers.into_iter().zip(&expected.layers) {
            if (rec.rows, rec.cols) != want.w.shape()
                || rec.weights.len() != rec.rows * rec.cols
                || rec.bias.len() != rec.rows
            {
                return Err(Error::InvalidConfig(
                    "checkpoint layer shape does not match config".into(),
                ));
            }
            layers.push(Dense {
                w: DMatrix::from_row_slice(rec.rows, rec.cols, &rec.weights),
                b: DMatrix::from_column_slice(rec.rows, 1, &rec.bias),
            });
        }
        Ok(NetworkParams {
            config: self.config,
            scaling: self.scaling,
            layers,
            alpha_t: self.alpha_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::input_directional_derivative;
    use crate::mesh::icosphere;

    fn inputs(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(INPUT_DIM, n, |r, c| ((r * 7 + c * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn paper_layouts_count_layers() {
        for (depth, blocks) in [(4, 0), (4, 1), (7, 0), (7, 2), (10, 0), (10, 3)] {
            let c = NetworkConfig::with_depth(15, blocks, depth, 0);
            c.validate().unwrap();
            assert_eq!(c.total_layers(), depth);
            let p = NetworkParams::init(&c, InputScaling::identity()).unwrap();
            assert_eq!(p.layers().len(), depth);
        }
        assert!(NetworkConfig::with_depth(15, 3, 6, 0).validate().is_err());
    }

    #[test]
    fn parameter_count_by_enumeration() {
        let c = NetworkConfig::with_depth(15, 3, 10, 0);
        let p = NetworkParams::init(&c, InputScaling::identity()).unwrap();
        // lift 4*15+15, six block layers and two separators at 15*15+15,
        // head 15*2+2, three gates.
        let closed_form = 75 + 8 * 240 + 32 + 3;
        assert_eq!(closed_form, 2030);
        assert_eq!(p.parameter_count(), closed_form);
        assert_eq!(c.parameter_count(), closed_form);
        let tape = Tape::new();
        let enumerated: usize = p
            .bind(&tape)
            .parameters()
            .iter()
            .map(|v| v.shape().0 * v.shape().1)
            .sum();
        assert_eq!(enumerated, closed_form);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = NetworkConfig::with_depth(15, 2, 7, 42);
        let a = NetworkParams::init(&c, InputScaling::identity()).unwrap();
        assert_eq!(a, NetworkParams::init(&c, InputScaling::identity()).unwrap());
        let other = NetworkConfig { seed: 43, ..c };
        assert_ne!(a, NetworkParams::init(&other, InputScaling::identity()).unwrap());
        for l in a.layers() {
            let bound = (6.0 / (l.w.nrows() + l.w.ncols()) as f64).sqrt();
            assert!(l.w.amax() <= bound);
            assert!(l.b.iter().all(|&b| b == 0.0));
        }
        assert!(a.alphas().iter().all(|&x| x == 0.5));
        let skip = NetworkConfig { alpha_t_init: 2.0, ..c };
        let z = NetworkParams::init(&skip, InputScaling::identity()).unwrap();
        assert!(z.alphas().iter().all(|&x| (x - 0.8807970779778823).abs() < 1e-15));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let c = NetworkConfig::with_depth(6, 2, 7, 1);
        let mut p = NetworkParams::init(&c, InputScaling::identity()).unwrap();
        for l in p.layers_mut() {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        for g in [-3.0, 0.0, 5.0] {
            p.alpha_t_mut().fill(g);
            assert_eq!(p.predict(&inputs(5)).unwrap(), DMatrix::zeros(2, 5));
        }
    }

    #[test]
    fn saturated_gate_is_pure_skip() {
        let c = NetworkConfig {
            alpha_t_init: 30.0,
            ..NetworkConfig::with_depth(5, 1, 4, 3)
        };
        let p = NetworkParams::init(&c, InputScaling::identity()).unwrap();
        let x = inputs(6);
        // Without the block: head(tanh(lift x)).
        let (lift, head) = (&p.layers()[0], &p.layers()[3]);
        let mut h = &lift.w * &x;
        for mut col in h.column_iter_mut() {
            col += lift.b.column(0);
        }
        let h = h.map(f64::tanh);
        let mut expected = &head.w * h;
        for mut col in expected.column_iter_mut() {
            col += head.b.column(0);
        }
        assert!((p.predict(&x).unwrap() - expected).abs().max() < 1e-9);
    }

    #[test]
    fn unit_gates_bypass_block_weights() {
        let c = NetworkConfig::with_depth(6, 2, 7, 5);
        let mut p = NetworkParams::init(&c, InputScaling::identity()).unwrap();
        let x = inputs(4);
        let eval = |p: &NetworkParams| {
            let tape = Tape::new();
            let out = p.bind_with_gates(&tape, Some(1.0)).call(tape.leaf(x.clone())).unwrap();
            let v = out.value().clone();
            v
        };
        let before = eval(&p);
        // Block layers: indices 1,2 (first block) and 4,5 (second block).
        for k in [1, 2, 4, 5] {
            p.layers_mut()[k].w.fill(0.0);
            p.layers_mut()[k].b.fill(0.0);
        }
        assert_eq!(eval(&p), before);
    }

    #[test]
    fn time_derivative_matches_finite_differences() {
        let c = NetworkConfig::with_depth(8, 2, 7, 9);
        let p = NetworkParams::init(&c, InputScaling::identity()).unwrap();
        let x = inputs(5);
        let tape = Tape::new();
        let net = p.bind(&tape);
        let d = input_directional_derivative(&net, tape.leaf(x.clone()), &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let h = 1e-5;
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.row_mut(3).add_scalar_mut(h);
        minus.row_mut(3).add_scalar_mut(-h);
        let fd = (p.predict(&plus).unwrap() - p.predict(&minus).unwrap()) / (2.0 * h);
        for (a, f) in d.value().iter().zip(fd.iter()) {
            assert!((a - f).abs() <= 1e-5 * f.abs().max(1e-2), "{a} vs {f}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mesh = icosphere(1, 3.0).unwrap();
        let c = NetworkConfig::with_depth(7, 1, 5, 11);
        let mut p = NetworkParams::init(&c, InputScaling::for_mesh(&mesh, 4.975)).unwrap();
        p.alpha_t_mut()[0] = 1.234567890123;
        p.layers_mut()[1].b[(2, 0)] = -1e-300;
        let back = NetworkParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        p.save(&path).unwrap();
        assert_eq!(NetworkParams::load(&path).unwrap(), p);
    }

    #[test]
    fn checkpoint_rejects_mismatched_layers() {
        let c = NetworkConfig::with_depth(4, 0, 3, 0);
        let p = NetworkParams::init(&c, InputScaling::identity()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        v["config"]["width"] = 5.into();
        assert!(NetworkParams::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        v["version"] = 9.into();
        assert!(NetworkParams::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn scaling_maps_mesh_into_unit_box() {
        let mesh = icosphere(2, 5.0).unwrap();
        let s = InputScaling::for_mesh(&mesh, 2.0);
        for p in mesh.vertices() {
            let x = s.apply(p, 2.0);
            assert!(x[..3].iter().all(|c| (-1.0 - 1e-12..=1.0 + 1e-12).contains(c)));
            assert_eq!(x[3], 1.0);
        }
        assert_eq!(s.input_factors()[3], 0.5);
    }
}
