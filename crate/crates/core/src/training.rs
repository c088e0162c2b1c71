//! Physics-informed training of the residual network.
//!
//! The loss is `L = L_D + lambda * L_EP`. `L_D` is the mean squared misfit
//! of `R u_hat` against the torso observations over a batch of time samples.
//! `L_EP` is the mean of the squared Aliev-Panfilov residuals at collocation
//! points. With the numerical backend, the spatial Laplacian and the time
//! derivative are formed from network samples on the node x time lattice,
//! so every collocation point couples to its 1-ring and its temporal stencil.

use std::rc::Rc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apsim::ApParams;
use crate::autodiff::{DiffFn, Dual, Tape, Var};
use crate::error::{Error, Result};
use crate::field::SpatioTemporalField;
use crate::forward::{Observation, TransferModel};
use crate::mesh::{build_adjacency, vertex_normals, Adjacency, Point, TriMesh};
use crate::network::{BoundNetwork, InputScaling, NetworkConfig, NetworkParams, INPUT_DIM};
use crate::ops::{laplacian_matrix, stencil_for, LaplacianOperator, TemporalGrid};
use crate::sparse::CsrMatrix;

/// How the derivatives inside the EP residuals are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Mesh Laplacian and five-point temporal stencils on lattice samples.
    Nd,
    /// Exact derivatives of the network with respect to its inputs.
    Ad,
    /// Mesh Laplacian, exact time derivative.
    NdSpatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the EP loss.
    pub lambda: f64,
    /// Size of the collocation set.
    pub n_collocation: usize,
    /// Collocation points used per iteration, drawn from the set; `None`
    /// uses the whole set every iteration.
    pub ep_batch: Option<usize>,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Time samples per data-loss batch (all nodes are used at each).
    pub data_batch: usize,
    pub backend: Backend,
    /// Penalize the normal derivative at the surface; defaults to on for the
    /// AD backend only.
    pub include_rb: Option<bool>,
    /// Redraw the collocation set every iteration.
    pub resample_collocation: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            n_collocation: 5000,
            ep_batch: None,
            iterations: 20000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            data_batch: 32,
            backend: Backend::Nd,
            include_rb: None,
            resample_collocation: false,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn include_rb(&self) -> bool {
        self.include_rb.unwrap_or(self.backend == Backend::Ad)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if self.n_collocation == 0 || self.ep_batch == Some(0) {
            return bad("collocation counts must be >= 1");
        }
        if self.iterations == 0 || self.data_batch == 0 || self.log_every == 0 {
            return bad("iterations, data_batch and log_every must be >= 1");
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("invalid Adam hyperparameters");
        }
        Ok(())
    }
}

/// Everything a training run reads: geometry, operators, forward model and
/// observations.
#[derive(Debug, Clone)]
pub struct Problem {
    mesh: TriMesh,
    adj: Adjacency,
    lap: LaplacianOperator,
    normals: Vec<Point>,
    ap: ApParams,
    tm: TransferModel,
    obs: Observation,
    scaling: InputScaling,
    /// Normalized inputs of every lattice point; column `i + V k`.
    lattice: DMatrix<f64>,
}

impl Problem {
    pub fn new(mesh: TriMesh, tm: TransferModel, obs: Observation, ap: ApParams) -> Result<Self> {
        ap.validate()?;
        let adj = build_adjacency(&mesh)?;
        let lap = laplacian_matrix(&adj);
        let normals = vertex_normals(&mesh)?;
        if tm.n_nodes() != mesh.vertex_count() || obs.values().nrows() != tm.n_sensors() {
            return Err(Error::Dimension(format!(
                "mesh has {} vertices, transfer is {}x{}, observation has {} rows",
                mesh.vertex_count(),
                tm.n_sensors(),
                tm.n_nodes(),
                obs.values().nrows()
            )));
        }
        let grid = *obs.grid();
        let scaling = InputScaling::for_mesh(&mesh, grid.duration());
        let v = mesh.vertex_count();
        let verts = mesh.vertices();
        let lattice = scaling.inputs((0..v * grid.samples()).map(|c| (&verts[c % v], grid.time(c / v))));
        Ok(Self {
            mesh,
            adj,
            lap,
            normals,
            ap,
            tm,
            obs,
            scaling,
            lattice,
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adj
    }

    pub fn laplacian(&self) -> &LaplacianOperator {
        &self.lap
    }

    pub fn ap(&self) -> &ApParams {
        &self.ap
    }

    pub fn transfer(&self) -> &TransferModel {
        &self.tm
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    pub fn grid(&self) -> &TemporalGrid {
        self.obs.grid()
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    pub fn nodes(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn times(&self) -> usize {
        self.grid().samples()
    }

    pub fn lattice_size(&self) -> usize {
        self.nodes() * self.times()
    }

    /// Flat lattice index of node `i` at time sample `k`.
    pub fn lattice_index(&self, i: usize, k: usize) -> usize {
        i + self.nodes() * k
    }

    /// Normalized inputs (`4 x n`) for flat lattice indices.
    pub fn inputs_for(&self, points: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(INPUT_DIM, points.len(), |r, c| self.lattice[(r, points[c])])
    }

    /// Normalized inputs for the whole lattice.
    pub fn lattice_inputs(&self) -> &DMatrix<f64> {
        &self.lattice
    }
}

/// Anything that yields `(u, v)` rows (`2 x n`) at lattice points.
pub trait FieldModel<'t> {
    fn lattice_values(&self, tape: &'t Tape, problem: &Problem, points: &[usize]) -> Result<Var<'t>>;
}

impl<'t> FieldModel<'t> for BoundNetwork<'t> {
    fn lattice_values(&self, tape: &'t Tape, problem: &Problem, points: &[usize]) -> Result<Var<'t>> {
        self.call(tape.leaf(problem.inputs_for(points)))
    }
}

/// Field lookup standing in for a network (tests and oracles).
#[derive(Debug, Clone)]
pub struct TableModel {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl<'t> FieldModel<'t> for TableModel {
    fn lattice_values(&self, tape: &'t Tape, problem: &Problem, points: &[usize]) -> Result<Var<'t>> {
        let n = problem.nodes();
        Ok(tape.leaf(DMatrix::from_fn(2, points.len(), |r, c| {
            let (i, k) = (points[c] % n, points[c] / n);
            if r == 0 {
                self.u[(i, k)]
            } else {
                self.v[(i, k)]
            }
        })))
    }
}

/// Residuals at the collocation points, each `1 x N_c`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSet<'t> {
    pub r_u: Var<'t>,
    pub r_v: Var<'t>,
    pub r_b: Option<Var<'t>>,
}

impl ResidualSet<'_> {
    pub fn rms_u(&self) -> f64 {
        rms(&self.r_u.value())
    }

    pub fn rms_v(&self) -> f64 {
        rms(&self.r_v.value())
    }
}

fn rms(m: &DMatrix<f64>) -> f64 {
    (m.iter().map(|x| x * x).sum::<f64>() / m.len() as f64).sqrt()
}

/// `r_u` and `r_v` from the field values and their derivatives.
pub fn ap_residuals<'t>(
    u: Var<'t>,
    v: Var<'t>,
    u_t: Var<'t>,
    v_t: Var<'t>,
    lap_u: Var<'t>,
    p: &ApParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let one_minus_u = u.scale(-1.0).add_scalar(1.0);
    let reaction = u.mul(one_minus_u)?.mul(u.add_scalar(-p.a))?.scale(p.k);
    let r_u = u_t.sub(lap_u.scale(p.diffusion))?.sub(reaction)?.add(u.mul(v)?)?;
    let xi = v.div(u.add_scalar(p.mu2))?.scale(p.mu1).add_scalar(p.e0);
    let recovery = v.scale(-1.0).sub(u.mul(u.add_scalar(-p.a - 1.0))?.scale(p.k))?;
    let r_v = v_t.sub(xi.mul(recovery)?)?;
    Ok((r_u, r_v))
}

/// `(1/N_c) sum(r_u^2 + r_v^2 [+ r_b^2])`.
pub fn ep_loss<'t>(res: &ResidualSet<'t>) -> Result<Var<'t>> {
    let mut loss = res.r_u.square().mean().add(res.r_v.square().mean())?;
    if let Some(rb) = res.r_b {
        loss = loss.add(rb.square().mean())?;
    }
    Ok(loss)
}

/// Sparse maps from lattice samples to the quantities each collocation
/// point needs.
#[derive(Debug, Clone)]
pub struct NdPlan {
    /// Lattice points to evaluate, in column order after `prefix` columns
    /// reserved for the caller.
    points: Vec<usize>,
    prefix: usize,
    center: Rc<CsrMatrix>,
    dt: Option<Rc<CsrMatrix>>,
    lap: Rc<CsrMatrix>,
}

impl NdPlan {
    /// Builds the plan for `colloc` (pairs of node, time index).
    ///
    /// Columns `0..prefix` of the evaluated outputs belong to the caller;
    /// the plan's own points follow. With `temporal = false` only the
    /// spatial closure is gathered.
    pub fn new(problem: &Problem, colloc: &[(usize, usize)], prefix: usize, temporal: bool) -> Self {
        let (n, t) = (problem.nodes(), problem.times());
        let mut slot = vec![usize::MAX; n * t];
        let mut points = Vec::new();
        let mut col = |i: usize, k: usize, points: &mut Vec<usize>| -> usize {
            let flat = i + n * k;
            if slot[flat] == usize::MAX {
                slot[flat] = prefix + points.len();
                points.push(flat);
            }
            slot[flat]
        };
        let denom = 12.0 * problem.grid().step();
        let (mut c_trip, mut d_trip, mut l_trip) = (Vec::new(), Vec::new(), Vec::new());
        let lap = problem.laplacian().matrix();
        for (row, &(i, k)) in colloc.iter().enumerate() {
            c_trip.push((row, col(i, k, &mut points), 1.0));
            for (j, w) in lap.row(i) {
                l_trip.push((row, col(j, k, &mut points), w));
            }
            if temporal {
                let (start, w) = stencil_for(k, t);
                for (s, c) in w.iter().enumerate() {
                    if *c != 0.0 {
                        d_trip.push((row, col(i, start + s, &mut points), c / denom));
                    }
                }
            }
        }
        let cols = prefix + points.len();
        let m = colloc.len();
        Self {
            center: Rc::new(CsrMatrix::from_triplets(m, cols, &c_trip)),
            dt: temporal.then(|| Rc::new(CsrMatrix::from_triplets(m, cols, &d_trip))),
            lap: Rc::new(CsrMatrix::from_triplets(m, cols, &l_trip)),
            points,
            prefix,
        }
    }

    /// Lattice points the plan reads (flat indices).
    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn prefix(&self) -> usize {
        self.prefix
    }
}

/// Values at the collocation points gathered from a plan's outputs.
struct Gathered<'t> {
    u: Var<'t>,
    v: Var<'t>,
    u_t: Option<Var<'t>>,
    v_t: Option<Var<'t>>,
    lap_u: Var<'t>,
}

fn gather<'t>(u_all: Var<'t>, v_all: Var<'t>, plan: &NdPlan) -> Result<Gathered<'t>> {
    Ok(Gathered {
        u: u_all.sparse_cols(&plan.center)?,
        v: v_all.sparse_cols(&plan.center)?,
        u_t: plan.dt.as_ref().map(|d| u_all.sparse_cols(d)).transpose()?,
        v_t: plan.dt.as_ref().map(|d| v_all.sparse_cols(d)).transpose()?,
        lap_u: u_all.sparse_cols(&plan.lap)?,
    })
}

/// EP residuals with mesh-Laplacian and stencil derivatives of `model`.
pub fn ep_residuals_nd<'t, M: FieldModel<'t>>(
    model: &M,
    tape: &'t Tape,
    problem: &Problem,
    colloc: &[(usize, usize)],
) -> Result<ResidualSet<'t>> {
    let plan = NdPlan::new(problem, colloc, 0, true);
    let out = model.lattice_values(tape, problem, plan.points())?;
    let g = gather(out.row(0)?, out.row(1)?, &plan)?;
    let (r_u, r_v) = ap_residuals(
        g.u,
        g.v,
        g.u_t.expect("temporal plan"),
        g.v_t.expect("temporal plan"),
        g.lap_u,
        problem.ap(),
    )?;
    Ok(ResidualSet { r_u, r_v, r_b: None })
}

/// Exact input derivatives of a network-like function at collocation points.
struct AdDerivatives<'t> {
    u: Var<'t>,
    v: Var<'t>,
    u_t: Var<'t>,
    v_t: Var<'t>,
}

fn unit(axis: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(INPUT_DIM, cols, |r, _| if r == axis { scale } else { 0.0 })
}

/// Values and physical time derivatives by one forward-mode pass.
fn ad_time<'t, F: DiffFn<'t>>(f: &F, x: Var<'t>, scaling: &InputScaling) -> Result<AdDerivatives<'t>> {
    let tape = x.tape();
    let ft = scaling.input_factors()[3];
    let out = f.call(Dual {
        value: x,
        tangent: tape.leaf(unit(3, x.shape().1, ft)),
    })?;
    Ok(AdDerivatives {
        u: out.value.row(0)?,
        v: out.value.row(1)?,
        u_t: out.tangent.row(0)?,
        v_t: out.tangent.row(1)?,
    })
}

/// Euclidean Laplacian of the `u` output in physical coordinates.
fn ad_laplacian<'t, F: DiffFn<'t>>(f: &F, x: Var<'t>, scaling: &InputScaling) -> Result<Var<'t>> {
    let tape = x.tape();
    let cols = x.shape().1;
    let factors = scaling.input_factors();
    let mut total: Option<Var<'t>> = None;
    for (axis, &fa) in factors.iter().enumerate().take(3) {
        let e = tape.leaf(unit(axis, cols, fa));
        let lifted = Dual {
            value: Dual { value: x, tangent: e },
            tangent: Dual {
                value: e,
                tangent: tape.leaf(DMatrix::zeros(INPUT_DIM, cols)),
            },
        };
        let second = f.call(lifted)?.tangent.tangent.row(0)?;
        total = Some(match total {
            None => second,
            Some(t) => t.add(second)?,
        });
    }
    Ok(total.expect("three axes"))
}

/// `n . grad u` at the given nodes, in physical coordinates.
fn ad_normal_derivative<'t, F: DiffFn<'t>>(f: &F, x: Var<'t>, problem: &Problem, nodes: &[usize]) -> Result<Var<'t>> {
    let factors = problem.scaling().input_factors();
    let dir = DMatrix::from_fn(INPUT_DIM, nodes.len(), |r, c| {
        if r < 3 {
            problem.normals[nodes[c]][r] * factors[r]
        } else {
            0.0
        }
    });
    let out = f.call(Dual {
        value: x,
        tangent: x.tape().leaf(dir),
    })?;
    out.tangent.row(0)
}

/// EP residuals with exact network derivatives: time derivative, the
/// Euclidean Laplacian over `(x, y, z)`, and optionally `n . grad u`.
pub fn ep_residuals_ad<'t, F: DiffFn<'t>>(
    f: &F,
    tape: &'t Tape,
    problem: &Problem,
    colloc: &[(usize, usize)],
    include_rb: bool,
) -> Result<ResidualSet<'t>> {
    let flat: Vec<usize> = colloc.iter().map(|&(i, k)| problem.lattice_index(i, k)).collect();
    let x = tape.leaf(problem.inputs_for(&flat));
    let d = ad_time(f, x, problem.scaling())?;
    let lap_u = ad_laplacian(f, x, problem.scaling())?;
    let (r_u, r_v) = ap_residuals(d.u, d.v, d.u_t, d.v_t, lap_u, problem.ap())?;
    let r_b = if include_rb {
        let nodes: Vec<usize> = colloc.iter().map(|&(i, _)| i).collect();
        Some(ad_normal_derivative(f, x, problem, &nodes)?)
    } else {
        None
    };
    Ok(ResidualSet { r_u, r_v, r_b })
}

/// Physical time derivatives of both network outputs at lattice points,
/// exact (forward mode) and by the temporal stencils: `(ad, nd)`, each
/// `2 x n` with rows `(u_t, v_t)`.
pub fn time_derivatives(
    params: &NetworkParams,
    problem: &Problem,
    points: &[(usize, usize)],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let tape = Tape::new();
    let net = params.bind(&tape);
    let plan = NdPlan::new(problem, points, 0, true);
    let out = net.lattice_values(&tape, problem, plan.points())?;
    let g = gather(out.row(0)?, out.row(1)?, &plan)?;
    let flat: Vec<usize> = points.iter().map(|&(i, k)| problem.lattice_index(i, k)).collect();
    let d = ad_time(&net, tape.leaf(problem.inputs_for(&flat)), problem.scaling())?;
    let stack = |a: Var<'_>, b: Var<'_>| {
        let (a, b) = (a.value().clone(), b.value().clone());
        DMatrix::from_fn(2, a.ncols(), |r, c| if r == 0 { a[(0, c)] } else { b[(0, c)] })
    };
    let nd = stack(g.u_t.expect("temporal plan"), g.v_t.expect("temporal plan"));
    Ok((stack(d.u_t, d.v_t), nd))
}

/// Lattice indices of every node at the given time samples, node-fastest.
fn data_points(problem: &Problem, times: &[usize]) -> Vec<usize> {
    times
        .iter()
        .flat_map(|&k| (0..problem.nodes()).map(move |i| (i, k)))
        .map(|(i, k)| problem.lattice_index(i, k))
        .collect()
}

/// Mean squared misfit of `R U` against the observations at `times`, with
/// `u_data` holding `u` at [`data_points`] order.
fn data_loss_from<'t>(u_data: Var<'t>, problem: &Problem, times: &[usize]) -> Result<Var<'t>> {
    let tape = u_data.tape();
    let u = u_data.reshape(problem.nodes(), times.len())?;
    let r = tape.leaf(problem.transfer().matrix().clone());
    let y = tape.leaf(problem.observation().values().select_columns(times.iter()));
    Ok(r.matmul(u)?.sub(y)?.square().mean())
}

/// `L_D` of `model` over the time samples `times`.
pub fn data_loss<'t, M: FieldModel<'t>>(
    model: &M,
    tape: &'t Tape,
    problem: &Problem,
    times: &[usize],
) -> Result<Var<'t>> {
    if let Some(&k) = times.iter().find(|&&k| k >= problem.times()) {
        return Err(Error::Dimension(format!("time index {k} outside the grid")));
    }
    let out = model.lattice_values(tape, problem, &data_points(problem, times))?;
    data_loss_from(out.row(0)?, problem, times)
}

/// Terms of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub data: Var<'t>,
    pub ep: Option<Var<'t>>,
}

/// Assembles `L_D + lambda L_EP` for one iteration with a single network
/// evaluation over the data batch and the ND closure.
pub fn assemble_loss<'t>(
    net: &BoundNetwork<'t>,
    tape: &'t Tape,
    problem: &Problem,
    cfg: &TrainConfig,
    times: &[usize],
    colloc: Option<&[(usize, usize)]>,
) -> Result<LossTerms<'t>> {
    let data_pts = data_points(problem, times);
    let prefix = data_pts.len();
    let plan = match (colloc, cfg.backend) {
        (Some(c), Backend::Nd) => Some(NdPlan::new(problem, c, prefix, true)),
        (Some(c), Backend::NdSpatial) => Some(NdPlan::new(problem, c, prefix, false)),
        _ => None,
    };
    let mut pts = data_pts;
    if let Some(p) = &plan {
        pts.extend_from_slice(p.points());
    }
    let out = net.lattice_values(tape, problem, &pts)?;
    let u_all = out.row(0)?;
    let data = {
        let select = Rc::new(CsrMatrix::from_triplets(
            prefix,
            pts.len(),
            &(0..prefix).map(|c| (c, c, 1.0)).collect::<Vec<_>>(),
        ));
        data_loss_from(u_all.sparse_cols(&select)?, problem, times)?
    };
    let Some(colloc) = colloc else {
        return Ok(LossTerms {
            total: data,
            data,
            ep: None,
        });
    };

    let res = match cfg.backend {
        Backend::Nd => {
            let g = gather(u_all, out.row(1)?, plan.as_ref().expect("nd plan"))?;
            let (r_u, r_v) = ap_residuals(
                g.u,
                g.v,
                g.u_t.expect("temporal"),
                g.v_t.expect("temporal"),
                g.lap_u,
                problem.ap(),
            )?;
            ResidualSet { r_u, r_v, r_b: None }
        }
        Backend::NdSpatial => {
            let g = gather(u_all, out.row(1)?, plan.as_ref().expect("spatial plan"))?;
            let flat: Vec<usize> = colloc.iter().map(|&(i, k)| problem.lattice_index(i, k)).collect();
            let x = tape.leaf(problem.inputs_for(&flat));
            let d = ad_time(net, x, problem.scaling())?;
            let (r_u, r_v) = ap_residuals(d.u, d.v, d.u_t, d.v_t, g.lap_u, problem.ap())?;
            ResidualSet { r_u, r_v, r_b: None }
        }
        Backend::Ad => ep_residuals_ad(net, tape, problem, colloc, false)?,
    };
    let res = if cfg.include_rb() {
        let flat: Vec<usize> = colloc.iter().map(|&(i, k)| problem.lattice_index(i, k)).collect();
        let nodes: Vec<usize> = colloc.iter().map(|&(i, _)| i).collect();
        let x = tape.leaf(problem.inputs_for(&flat));
        ResidualSet {
            r_b: Some(ad_normal_derivative(net, x, problem, &nodes)?),
            ..res
        }
    } else {
        res
    };
    let ep = ep_loss(&res)?;
    Ok(LossTerms {
        total: data.add(ep.scale(cfg.lambda))?,
        data,
        ep: Some(ep),
    })
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[DMatrix<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (x, &gj)) in p.iter_mut().zip(g.iter()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub total: f64,
    pub data: f64,
    pub ep: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    /// Set when the run covered the bad-initialization window.
    pub bad_init: Option<bool>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "iter,total,data,ep,seconds";

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.3}\n",
                r.iteration, r.total, r.data, r.ep, r.seconds
            ));
        }
        out
    }
}

/// Iterations inspected by [`detect_bad_init`].
pub const BAD_INIT_WINDOW: usize = 300;
/// Total-loss level that marks a bad initialization.
pub const BAD_INIT_THRESHOLD: f64 = 1.5;

/// True iff a logged total loss within the first 300 iterations exceeds 1.5.
pub fn detect_bad_init(records: &[HistoryRecord]) -> Result<bool> {
    let last = records.iter().map(|r| r.iteration).max();
    match last {
        Some(it) if it + 1 >= BAD_INIT_WINDOW => Ok(records
            .iter()
            .any(|r| r.iteration < BAD_INIT_WINDOW && r.total > BAD_INIT_THRESHOLD)),
        _ => Err(Error::InsufficientHistory {
            needed: BAD_INIT_WINDOW,
            got: last.map_or(0, |it| it + 1),
        }),
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: TrainHistory,
}

fn draw_collocation(rng: &mut ChaCha8Rng, problem: &Problem, count: usize) -> Vec<(usize, usize)> {
    let size = problem.lattice_size();
    let n = problem.nodes();
    let flat: Vec<usize> = if count <= size {
        sample(rng, size, count).into_iter().collect()
    } else {
        (0..count).map(|_| rng.random_range(0..size)).collect()
    };
    flat.into_iter().map(|f| (f % n, f / n)).collect()
}

/// Runs Adam on `L_D + lambda L_EP` from a fresh initialization.
///
/// The collocation set is drawn once from `cfg.seed` (unless resampling is
/// requested). The history logs every iteration inside the bad-init window,
/// then every `log_every` iterations and the final one. With `lambda = 0`
/// the EP loss is only evaluated at logged iterations.
pub fn train(cfg: &TrainConfig, net_cfg: &NetworkConfig, problem: &Problem) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = NetworkParams::init(net_cfg, *problem.scaling())?;
    train_from(cfg, params, problem)
}

/// Like [`train`], starting from given parameters.
pub fn train_from(cfg: &TrainConfig, params: NetworkParams, problem: &Problem) -> Result<TrainOutcome> {
    train_observed(cfg, params, problem, &mut |_, _| {})
}

/// Like [`train_from`], calling `observer` after every logged iteration with
/// the record and the parameters before that iteration's update.
pub fn train_observed(
    cfg: &TrainConfig,
    mut params: NetworkParams,
    problem: &Problem,
    observer: &mut dyn FnMut(&HistoryRecord, &NetworkParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.data_batch > problem.times() {
        return Err(Error::InvalidConfig(format!(
            "data batch {} exceeds {} time samples",
            cfg.data_batch,
            problem.times()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut colloc = draw_collocation(&mut rng, problem, cfg.n_collocation);
    let sizes: Vec<usize> = params.tensors_mut().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let mut history = TrainHistory::default();
    let start = Instant::now();

    for it in 0..cfg.iterations {
        let last = it + 1 == cfg.iterations;
        let logged = it < BAD_INIT_WINDOW || it % cfg.log_every == 0 || last;
        if cfg.resample_collocation && it > 0 {
            colloc = draw_collocation(&mut rng, problem, cfg.n_collocation);
        }
        let times: Vec<usize> = sample(&mut rng, problem.times(), cfg.data_batch).into_iter().collect();
        let batch: Vec<(usize, usize)> = match cfg.ep_batch {
            Some(b) if b < colloc.len() => sample(&mut rng, colloc.len(), b)
                .into_iter()
                .map(|j| colloc[j])
                .collect(),
            _ => colloc.clone(),
        };
        let use_ep = cfg.lambda > 0.0 || logged;

        let tape = Tape::new();
        let net = params.bind(&tape);
        let terms = assemble_loss(&net, &tape, problem, cfg, &times, use_ep.then_some(&batch[..]))?;
        let total = terms.total.scalar_value();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        if logged {
            let record = HistoryRecord {
                iteration: it,
                total,
                data: terms.data.scalar_value(),
                ep: terms.ep.map_or(f64::NAN, |e| e.scalar_value()),
                seconds: start.elapsed().as_secs_f64(),
            };
            observer(&record, &params);
            history.records.push(record);
        }
        let grads = tape.backward(terms.total)?;
        let g: Vec<DMatrix<f64>> = net.parameters().iter().map(|&p| grads.get(p)).collect();
        drop(net);
        adam.step(params.tensors_mut(), &g);
    }
    history.bad_init = detect_bad_init(&history.records).ok();
    Ok(TrainOutcome { params, history })
}

/// Network prediction of `(u, v)` over the whole lattice.
pub fn predict_fields(params: &NetworkParams, problem: &Problem) -> Result<(SpatioTemporalField, SpatioTemporalField)> {
    let out = params.predict(problem.lattice_inputs())?;
    let (n, t) = (problem.nodes(), problem.times());
    let u = DMatrix::from_fn(n, t, |i, k| out[(0, i + n * k)]);
    let v = DMatrix::from_fn(n, t, |i, k| out[(1, i + n * k)]);
    Ok((
        SpatioTemporalField::new(u, *problem.grid())?,
        SpatioTemporalField::new(v, *problem.grid())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Arith;
    use crate::mesh::{icosphere, regular_tetrahedron};
    use rand::Rng;

    fn transfer_2x4() -> TransferModel {
        TransferModel::new(DMatrix::from_row_slice(2, 4, &[1.0, 0.5, 0.2, 0.1, 0.3, 0.2, 1.0, 0.4])).unwrap()
    }

    fn tetra_problem(edge: f64, step: f64, samples: usize, seed: u64) -> Problem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TemporalGrid::new(step, samples).unwrap();
        let y = DMatrix::from_fn(2, samples, |_, _| rng.random_range(0.0..1.0));
        let obs = Observation::new(y, grid, 0.0, seed).unwrap();
        Problem::new(regular_tetrahedron(edge), transfer_2x4(), obs, ApParams::default()).unwrap()
    }

    fn table(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..0.9))
    }

    fn all_points(p: &Problem) -> Vec<(usize, usize)> {
        (0..p.times())
            .flat_map(|k| (0..p.nodes()).map(move |i| (i, k)))
            .collect()
    }

    #[test]
    fn zero_field_has_zero_residuals() {
        let p = tetra_problem(1.0, 0.1, 6, 0);
        let model = TableModel {
            u: DMatrix::zeros(4, 6),
            v: DMatrix::zeros(4, 6),
        };
        let tape = Tape::new();
        let r = ep_residuals_nd(&model, &tape, &p, &all_points(&p)).unwrap();
        assert!(r.r_u.value().iter().all(|x| *x == 0.0));
        assert!(r.r_v.value().iter().all(|x| *x == 0.0));
        assert_eq!(ep_loss(&r).unwrap().scalar_value(), 0.0);
    }

    #[test]
    fn tetrahedron_hand_residual() {
        let (edge, tau) = (1.0, 0.1);
        let p = tetra_problem(edge, tau, 5, 0);
        let u = DMatrix::from_row_slice(
            4,
            5,
            &[
                0.10, 0.20, 0.35, 0.50, 0.60, //
                0.00, 0.10, 0.20, 0.30, 0.40, //
                0.05, 0.05, 0.40, 0.10, 0.00, //
                0.20, 0.30, 0.10, 0.00, 0.10,
            ],
        );
        let v = DMatrix::from_fn(4, 5, |i, k| 0.01 * (i + k) as f64);
        let model = TableModel { u, v };
        let tape = Tape::new();
        let r = ep_residuals_nd(&model, &tape, &p, &[(0, 2)]).unwrap();

        // Node 0 at t index 2: each neighbor at distance 1, ring radius 1,
        // three neighbors.
        let lap = 4.0 / 3.0 * ((0.20 - 0.35) + (0.40 - 0.35) + (0.10 - 0.35));
        let ut = (0.10 - 8.0 * 0.20 + 8.0 * 0.50 - 0.60) / (12.0 * tau);
        let (uc, vc) = (0.35, 0.02);
        let expected_u = ut - 10.0 * lap - 8.0 * uc * (1.0 - uc) * (uc - 0.1) + uc * vc;
        let vt = (0.00 - 8.0 * 0.01 + 8.0 * 0.03 - 0.04) / (12.0 * tau);
        let xi = 0.002 + 0.3 * vc / (uc + 0.3);
        let expected_v = vt - xi * (-vc - 8.0 * uc * (uc - 1.1));
        assert!(
            (r.r_u.scalar_value() - expected_u).abs() < 1e-12,
            "{}",
            r.r_u.scalar_value()
        );
        assert!((r.r_v.scalar_value() - expected_v).abs() < 1e-12);
    }

    #[test]
    fn boundary_points_use_one_sided_stencils() {
        let p = tetra_problem(1.0, 0.1, 6, 0);
        let plan = NdPlan::new(&p, &[(1, 0), (2, 5)], 0, true);
        let dt = plan.dt.as_ref().unwrap();
        let t_of = |c: usize| plan.points()[c] / p.nodes();
        let mut row0: Vec<(usize, f64)> = dt.row(0).map(|(c, w)| (t_of(c), w * 1.2)).collect();
        row0.sort_by_key(|x| x.0);
        for (got, want) in row0.iter().zip(crate::ops::stencils::FIRST) {
            assert!((got.1 - want).abs() < 1e-12);
        }
        let mut row1: Vec<(usize, f64)> = dt.row(1).map(|(c, w)| (t_of(c), w * 1.2)).collect();
        row1.sort_by_key(|x| x.0);
        assert_eq!(row1.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn simulated_fields_beat_permuted_fields() {
        use crate::apsim::{simulate, StimulusSpec};
        let mesh = icosphere(1, 1.0).unwrap();
        let adj = build_adjacency(&mesh).unwrap();
        let lap = laplacian_matrix(&adj);
        let grid = TemporalGrid::new(0.005, 400).unwrap();
        let (u, v) = simulate(&lap, &ApParams::default(), &StimulusSpec::new(0, 20), &grid).unwrap();
        let tm = TransferModel::new(DMatrix::from_fn(10, 42, |i, j| 1.0 / (1.0 + (i + j) as f64))).unwrap();
        let obs = Observation::new(DMatrix::zeros(10, 400), grid, 0.0, 0).unwrap();
        let p = Problem::new(mesh, tm, obs, ApParams::default()).unwrap();
        let pts = all_points(&p);
        let tape = Tape::new();
        let truth = TableModel {
            u: u.values().clone(),
            v: v.values().clone(),
        };
        let base = ep_residuals_nd(&truth, &tape, &p, &pts).unwrap().rms_u();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut perm: Vec<usize> = (0..400).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = TableModel {
            u: u.permute_time(&perm).values().clone(),
            v: v.permute_time(&perm).values().clone(),
        };
        let permuted = ep_residuals_nd(&shuffled, &tape, &p, &pts).unwrap().rms_u();
        assert!(permuted > 10.0 * base, "{base} vs {permuted}");
    }

    /// `u = sum of squared normalized spatial inputs`, `v = 0`.
    struct Paraboloid;

    impl<'t> DiffFn<'t> for Paraboloid {
        fn call<A: Arith<'t>>(&self, x: A) -> Result<A> {
            let tape = x.tape();
            let w = tape.leaf(DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
            x.square().affine_param(w, tape.leaf(DMatrix::zeros(2, 1)))
        }
    }

    /// `u = c t` in physical time, `v = 0`.
    struct Ramp {
        c: f64,
        t_span: f64,
    }

    impl<'t> DiffFn<'t> for Ramp {
        fn call<A: Arith<'t>>(&self, x: A) -> Result<A> {
            let tape = x.tape();
            let w = tape.leaf(DMatrix::from_row_slice(
                2,
                4,
                &[0.0, 0.0, 0.0, self.c * self.t_span, 0.0, 0.0, 0.0, 0.0],
            ));
            x.affine_param(w, tape.leaf(DMatrix::zeros(2, 1)))
        }
    }

    #[test]
    fn ad_laplacian_of_paraboloid_is_six() {
        // Edge 2 sqrt 2 puts the vertices at (+-1, +-1, +-1): unit half extents.
        let p = tetra_problem(2.0 * 2f64.sqrt(), 0.1, 5, 0);
        let tape = Tape::new();
        let pts = all_points(&p);
        let flat: Vec<usize> = pts.iter().map(|&(i, k)| p.lattice_index(i, k)).collect();
        let x = tape.leaf(p.inputs_for(&flat));
        let lap = ad_laplacian(&Paraboloid, x, p.scaling()).unwrap();
        assert!(lap.value().iter().all(|l| (l - 6.0).abs() < 1e-12));
    }

    #[test]
    fn ad_ramp_has_constant_time_derivative() {
        let p = tetra_problem(1.0, 0.1, 7, 0);
        let ramp = Ramp {
            c: 0.7,
            t_span: p.grid().duration(),
        };
        let tape = Tape::new();
        let pts = all_points(&p);
        let flat: Vec<usize> = pts.iter().map(|&(i, k)| p.lattice_index(i, k)).collect();
        let x = tape.leaf(p.inputs_for(&flat));
        let d = ad_time(&ramp, x, p.scaling()).unwrap();
        assert!(d.u_t.value().iter().all(|g| (g - 0.7).abs() < 1e-12));
        assert!(d.v_t.value().iter().all(|g| *g == 0.0));
        let lap = ad_laplacian(&ramp, x, p.scaling()).unwrap();
        assert!(lap.value().iter().all(|g| *g == 0.0));
        for (c, &(_, k)) in pts.iter().enumerate() {
            assert!((d.u.value()[c] - 0.7 * p.grid().time(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_derivative_of_paraboloid() {
        // grad u = 2 x for unit half extents; n = x / |x| at the vertices.
        let p = tetra_problem(2.0 * 2f64.sqrt(), 0.1, 5, 0);
        let tape = Tape::new();
        let pts = [(0, 0), (1, 2), (3, 4)];
        let flat: Vec<usize> = pts.iter().map(|&(i, k)| p.lattice_index(i, k)).collect();
        let x = tape.leaf(p.inputs_for(&flat));
        let nodes: Vec<usize> = pts.iter().map(|&(i, _)| i).collect();
        let rb = ad_normal_derivative(&Paraboloid, x, &p, &nodes).unwrap();
        for g in rb.value().iter() {
            assert!((g - 2.0 * 3f64.sqrt()).abs() < 1e-9, "{g}");
        }
    }

    #[test]
    fn ad_and_nd_time_derivatives_agree() {
        let grid_steps = 101;
        let mesh = icosphere(0, 1.0).unwrap();
        let grid = TemporalGrid::new(0.01, grid_steps).unwrap();
        let tm = TransferModel::new(DMatrix::from_fn(3, 12, |i, j| 1.0 + (i * j) as f64)).unwrap();
        let obs = Observation::new(DMatrix::zeros(3, grid_steps), grid, 0.0, 0).unwrap();
        let p = Problem::new(mesh, tm, obs, ApParams::default()).unwrap();
        let params = NetworkParams::init(&NetworkConfig::with_depth(8, 2, 7, 11), *p.scaling()).unwrap();
        let tape = Tape::new();
        let net = params.bind(&tape);
        let pts: Vec<(usize, usize)> = [0, 1, 2, 50, 99, 100]
            .into_iter()
            .flat_map(|k| (0..12).map(move |i| (i, k)))
            .collect();
        let plan = NdPlan::new(&p, &pts, 0, true);
        let out = net.lattice_values(&tape, &p, plan.points()).unwrap();
        let g = gather(out.row(0).unwrap(), out.row(1).unwrap(), &plan).unwrap();
        let flat: Vec<usize> = pts.iter().map(|&(i, k)| p.lattice_index(i, k)).collect();
        let d = ad_time(&net, tape.leaf(p.inputs_for(&flat)), p.scaling()).unwrap();
        let nd = g.u_t.unwrap().value().clone();
        let ad = d.u_t.value().clone();
        assert!(ad.amax() > 0.05);
        assert!((nd - ad).amax() < 1e-6);
    }

    #[test]
    fn ep_loss_examples() {
        let tape = Tape::new();
        let one = |a: f64| tape.leaf(DMatrix::from_element(1, 1, a));
        let single = ResidualSet {
            r_u: one(3.0),
            r_v: one(4.0),
            r_b: Some(one(0.0)),
        };
        assert_eq!(ep_loss(&single).unwrap().scalar_value(), 25.0);
        let pair = ResidualSet {
            r_u: tape.leaf(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            r_v: tape.leaf(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])),
            r_b: Some(tape.leaf(DMatrix::zeros(1, 2))),
        };
        assert_eq!(ep_loss(&pair).unwrap().scalar_value(), 1.0);
    }

    #[test]
    fn data_loss_examples() {
        let p = tetra_problem(1.0, 0.1, 6, 1);
        let tape = Tape::new();
        // Least-norm u reproducing y exactly.
        let r = p.transfer().matrix();
        let pinv = r.transpose() * (r * r.transpose()).try_inverse().unwrap();
        let u = &pinv * p.observation().values();
        let exact = TableModel {
            u,
            v: DMatrix::zeros(4, 6),
        };
        let l = data_loss(&exact, &tape, &p, &[0, 3, 5]).unwrap().scalar_value();
        assert!(l < 1e-24, "{l}");

        let u = table(4, 6, 9);
        let model = TableModel {
            u: u.clone(),
            v: DMatrix::zeros(4, 6),
        };
        let times = [1, 4];
        let got = data_loss(&model, &tape, &p, &times).unwrap().scalar_value();
        let mut acc = 0.0;
        for &k in &times {
            for m in 0..2 {
                let mut yhat = 0.0;
                for i in 0..4 {
                    yhat += r[(m, i)] * u[(i, k)];
                }
                acc += (p.observation().values()[(m, k)] - yhat).powi(2);
            }
        }
        assert!((got - acc / 4.0).abs() < 1e-12);
        assert!(data_loss(&model, &tape, &p, &[6]).is_err());
    }

    #[test]
    fn identity_transfer_offset_gives_c_squared() {
        let mesh = icosphere(0, 1.0).unwrap();
        let grid = TemporalGrid::new(0.1, 5).unwrap();
        let r = DMatrix::from_fn(11, 12, |i, j| if i == j { 1.0 } else { 0.0 });
        let y = table(11, 5, 2);
        let obs = Observation::new(y.clone(), grid, 0.0, 0).unwrap();
        let p = Problem::new(mesh, TransferModel::new(r).unwrap(), obs, ApParams::default()).unwrap();
        let u = DMatrix::from_fn(12, 5, |i, k| if i < 11 { y[(i, k)] + 0.3 } else { 0.0 });
        let model = TableModel {
            u,
            v: DMatrix::zeros(12, 5),
        };
        let tape = Tape::new();
        let l = data_loss(&model, &tape, &p, &[0, 2, 4]).unwrap().scalar_value();
        assert!((l - 0.09).abs() < 1e-12);
    }

    fn mini_setup(seed: u64, backend: Backend) -> (Problem, NetworkParams, TrainConfig) {
        let p = tetra_problem(1.5, 0.1, 6, seed);
        let net = NetworkConfig {
            width: 4,
            n_blocks: 1,
            n_plain_layers: 2,
            seed,
            alpha_t_init: 0.5,
        };
        let params = NetworkParams::init(&net, *p.scaling()).unwrap();
        let cfg = TrainConfig {
            lambda: 0.3,
            n_collocation: 8,
            data_batch: 3,
            backend,
            seed,
            ..TrainConfig::default()
        };
        (p, params, cfg)
    }

    fn loss_at(
        params: &NetworkParams,
        p: &Problem,
        cfg: &TrainConfig,
        times: &[usize],
        colloc: &[(usize, usize)],
    ) -> f64 {
        let tape = Tape::new();
        let net = params.bind(&tape);
        assemble_loss(&net, &tape, p, cfg, times, Some(colloc))
            .unwrap()
            .total
            .scalar_value()
    }

    fn check_gradients(backend: Backend, seed: u64) {
        let (p, mut params, cfg) = mini_setup(seed, backend);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colloc = draw_collocation(&mut rng, &p, 8);
        let times = [0, 2, 5];
        let tape = Tape::new();
        let net = params.bind(&tape);
        let terms = assemble_loss(&net, &tape, &p, &cfg, &times, Some(&colloc)).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        let analytic: Vec<DMatrix<f64>> = net.parameters().iter().map(|&v| grads.get(v)).collect();
        drop(net);
        let h = 1e-6;
        for (t, grad) in analytic.iter().enumerate() {
            for j in 0..grad.len() {
                let orig = params.tensors_mut()[t][j];
                params.tensors_mut()[t][j] = orig + h;
                let up = loss_at(&params, &p, &cfg, &times, &colloc);
                params.tensors_mut()[t][j] = orig - h;
                let down = loss_at(&params, &p, &cfg, &times, &colloc);
                params.tensors_mut()[t][j] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grad.as_slice()[j];
                assert!(
                    (g - fd).abs() <= (1e-4 * fd.abs()).max(1e-7),
                    "{backend:?} tensor {t} entry {j}: {g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        check_gradients(Backend::Nd, 1);
        check_gradients(Backend::NdSpatial, 2);
        check_gradients(Backend::Ad, 3);
    }

    #[test]
    fn nd_plan_stays_on_lattice() {
        let (p, _, _) = mini_setup(0, Backend::Nd);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let colloc = draw_collocation(&mut rng, &p, 20);
        let plan = NdPlan::new(&p, &colloc, 7, true);
        assert!(plan.points().iter().all(|&f| f < p.lattice_size()));
        assert_eq!(plan.center.cols(), 7 + plan.points().len());
        let mut seen = plan.points().to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), plan.points().len());
    }

    #[test]
    fn collocation_is_uniform_without_replacement() {
        let (p, _, _) = mini_setup(0, Backend::Nd);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = draw_collocation(&mut rng, &p, 24);
        c.sort_unstable();
        c.dedup();
        assert_eq!(c.len(), 24);
        assert!(c.iter().all(|&(i, k)| i < 4 && k < 6));
    }

    #[test]
    fn history_totals_are_assembled_and_runs_are_deterministic() {
        let (p, params, mut cfg) = mini_setup(5, Backend::Nd);
        cfg.iterations = 320;
        cfg.log_every = 50;
        let a = train_from(&cfg, params.clone(), &p).unwrap();
        let b = train_from(&cfg, params, &p).unwrap();
        let strip = |h: &TrainHistory| -> Vec<(usize, u64, u64, u64)> {
            h.records
                .iter()
                .map(|r| (r.iteration, r.total.to_bits(), r.data.to_bits(), r.ep.to_bits()))
                .collect()
        };
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.params, b.params);
        for r in &a.history.records {
            assert!((r.total - (r.data + cfg.lambda * r.ep)).abs() <= 1e-12 * r.total.abs().max(1.0));
        }
        let its: Vec<usize> = a.history.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its[..300], (0..300).collect::<Vec<_>>()[..]);
        assert_eq!(&its[300..], &[300, 319]);
        assert!(a.history.bad_init.is_some());
        let csv = a.history.to_csv_string();
        assert!(csv.starts_with("iter,total,data,ep,seconds\n0,"));
        assert_eq!(csv.lines().count(), 1 + its.len());
    }

    #[test]
    fn data_only_training_reduces_data_loss() {
        let (p, params, mut cfg) = mini_setup(6, Backend::Nd);
        cfg.lambda = 0.0;
        cfg.iterations = 400;
        cfg.learning_rate = 1e-2;
        let out = train_from(&cfg, params, &p).unwrap();
        let first = out.history.records.first().unwrap();
        let last = out.history.records.last().unwrap();
        assert!(last.data < 0.5 * first.data, "{} -> {}", first.data, last.data);
        assert_eq!(first.total, first.data);
    }

    #[test]
    fn config_validation() {
        let p = tetra_problem(1.0, 0.1, 6, 0);
        let net = NetworkConfig::with_depth(4, 1, 4, 0);
        for bad in [
            TrainConfig {
                lambda: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                n_collocation: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                data_batch: 7,
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&bad, &net, &p).is_err());
        }
        assert!(!TrainConfig::default().include_rb());
        let ad = TrainConfig {
            backend: Backend::Ad,
            ..TrainConfig::default()
        };
        assert!(ad.include_rb());
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration() {
        let (p, mut params, mut cfg) = mini_setup(7, Backend::Nd);
        params.layers_mut()[0].b[0] = f64::NAN;
        cfg.iterations = 3;
        match train_from(&cfg, params, &p) {
            Err(Error::NonFiniteLoss { iteration }) => assert_eq!(iteration, 0),
            other => panic!("{other:?}"),
        }
    }

    fn rec(iteration: usize, total: f64) -> HistoryRecord {
        HistoryRecord {
            iteration,
            total,
            data: total,
            ep: 0.0,
            seconds: 0.0,
        }
    }

    #[test]
    fn bad_init_window_rule() {
        let flat: Vec<HistoryRecord> = (0..500).map(|i| rec(i, 0.2)).collect();
        assert!(!detect_bad_init(&flat).unwrap());
        let mut early = flat.clone();
        early[10].total = 2.0;
        assert!(detect_bad_init(&early).unwrap());
        let mut late = flat.clone();
        late[400].total = 2.0;
        assert!(!detect_bad_init(&late).unwrap());
        assert!(matches!(
            detect_bad_init(&flat[..100]),
            Err(Error::InsufficientHistory { needed: 300, got: 100 })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&cfg, &[2]);
        let mut x = [1.0, -1.0];
        adam.step(vec![&mut x[..]], &[DMatrix::from_row_slice(2, 1, &[3.0, -0.5])]);
        assert!((x[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((x[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}
