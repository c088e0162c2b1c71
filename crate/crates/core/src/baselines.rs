//! Classical regularized inverse solvers.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SpatioTemporalField;
use crate::forward::{Observation, TransferModel};
use crate::ops::LaplacianOperator;

/// Regularization operator for [`tikhonov`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TikhonovOrder {
    /// Identity (solution magnitude).
    Zero,
    /// Edge incidence (differences across mesh edges).
    One,
    /// Mesh Laplacian.
    Two,
}

impl TikhonovOrder {
    pub fn from_index(order: u8) -> Result<Self> {
        match order {
            0 => Ok(Self::Zero),
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(Error::InvalidConfig(format!(
                "Tikhonov order must be 0, 1 or 2, got {order}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TikhonovConfig {
    pub lambda: f64,
    pub order: TikhonovOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreConfig {
    pub lambda_s: f64,
    pub lambda_t: f64,
}

/// Dense regularization operator `Gamma` for the given order.
pub fn regularization_operator(order: TikhonovOrder, lap: &LaplacianOperator) -> DMatrix<f64> {
    let v = lap.size();
    match order {
        TikhonovOrder::Zero => DMatrix::identity(v, v),
        TikhonovOrder::One => {
            let edges: Vec<(usize, usize)> = (0..v)
                .flat_map(|i| {
                    lap.matrix()
                        .row(i)
                        .filter(move |&(j, _)| j > i)
                        .map(move |(j, _)| (i, j))
                })
                .collect();
            let mut g = DMatrix::zeros(edges.len(), v);
            for (e, &(i, j)) in edges.iter().enumerate() {
                g[(e, i)] = -1.0;
                g[(e, j)] = 1.0;
            }
            g
        }
        TikhonovOrder::Two => lap.to_dense(),
    }
}

fn check_dims(tm: &TransferModel, obs: &Observation, lap: &LaplacianOperator) -> Result<()> {
    if obs.values().nrows() != tm.n_sensors() || lap.size() != tm.n_nodes() {
        return Err(Error::Dimension(format!(
            "transfer {}x{}, observation {} sensors, Laplacian {} nodes",
            tm.n_sensors(),
            tm.n_nodes(),
            obs.values().nrows(),
            lap.size()
        )));
    }
    Ok(())
}

fn spd_factor(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a).ok_or_else(|| Error::SingularSystem("normal matrix is not positive definite".into()))
}

/// Solves `A x = b` with one step of iterative refinement.
fn refined_solve(a: &DMatrix<f64>, chol: &Cholesky<f64, Dyn>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = chol.solve(b);
    let r = b - a * &x;
    x += chol.solve(&r);
    x
}

/// Per-column Tikhonov solution `(R^T R + lambda^2 G^T G)^{-1} R^T y_t`.
pub fn tikhonov(
    tm: &TransferModel,
    obs: &Observation,
    cfg: &TikhonovConfig,
    lap: &LaplacianOperator,
) -> Result<SpatioTemporalField> {
    check_dims(tm, obs, lap)?;
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be > 0, got {}", cfg.lambda)));
    }
    let r = tm.matrix();
    let g = regularization_operator(cfg.order, lap);
    let a = r.tr_mul(r) + g.tr_mul(&g) * cfg.lambda.powi(2);
    let chol = spd_factor(a.clone())?;
    let rhs = r.tr_mul(obs.values());
    let u = refined_solve(&a, &chol, &rhs);
    SpatioTemporalField::new(u, *obs.grid())
}

/// Gradient of the Tikhonov objective at `u`, divided by `|R^T Y|`.
pub fn tikhonov_relative_gradient(
    tm: &TransferModel,
    obs: &Observation,
    cfg: &TikhonovConfig,
    lap: &LaplacianOperator,
    u: &DMatrix<f64>,
) -> f64 {
    let r = tm.matrix();
    let g = regularization_operator(cfg.order, lap);
    let grad = (r.tr_mul(&(r * u - obs.values())) + g.tr_mul(&(&g * u)) * cfg.lambda.powi(2)) * 2.0;
    grad.norm() / (r.tr_mul(obs.values())).norm()
}

/// `(T+1) x (T+1)` matrix `D^T D` of the first-difference operator.
fn difference_gram(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for k in 0..n.saturating_sub(1) {
        p[(k, k)] += 1.0;
        p[(k + 1, k + 1)] += 1.0;
        p[(k, k + 1)] -= 1.0;
        p[(k + 1, k)] -= 1.0;
    }
    p
}

/// `U P` for the path-graph Laplacian `P = D^T D`, applied along rows.
fn apply_difference_gram(u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = u.ncols();
    let mut out = DMatrix::zeros(u.nrows(), n);
    for k in 0..n.saturating_sub(1) {
        let d = u.column(k + 1) - u.column(k);
        let mut c = out.column_mut(k);
        c -= &d;
        let mut c = out.column_mut(k + 1);
        c += &d;
    }
    out
}

/// `X -> (K X + X P)^{-1}` for symmetric `K`, `P` via their eigenbases.
struct SylvesterInverse {
    q: DMatrix<f64>,
    s: DMatrix<f64>,
    denom: DMatrix<f64>,
}

impl SylvesterInverse {
    fn new(k: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<Self> {
        let ek = k.clone().symmetric_eigen();
        let ep = p.clone().symmetric_eigen();
        let denom = DMatrix::from_fn(k.nrows(), p.nrows(), |i, j| ek.eigenvalues[i] + ep.eigenvalues[j]);
        let scale = denom.amax();
        if denom.iter().any(|d| !(*d > scale * 1e-14)) {
            return Err(Error::SingularSystem("STRE normal equations".into()));
        }
        Ok(Self {
            q: ek.eigenvectors,
            s: ep.eigenvectors,
            denom,
        })
    }

    fn solve(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.q.tr_mul(x) * &self.s;
        &self.q * y.component_div(&self.denom) * self.s.transpose()
    }
}

/// Iteration cap for the STRE conjugate-gradient solve.
pub const STRE_MAX_ITERATIONS: usize = 5000;
/// Relative residual at which the STRE solve stops.
pub const STRE_TOLERANCE: f64 = 1e-8;

/// Minimizes `|Y - R U|^2 + ls^2 |L U|^2 + lt^2 |U D^T|^2` over all columns
/// jointly.
///
/// The normal equations `K U + lt^2 U P = R^T Y` with `K = R^T R + ls^2 L^T L`
/// are solved by preconditioned conjugate gradients. The preconditioner
/// inverts the Sylvester operator in the joint eigenbasis of `K` and `P`.
pub fn stre(
    tm: &TransferModel,
    obs: &Observation,
    cfg: &StreConfig,
    lap: &LaplacianOperator,
) -> Result<SpatioTemporalField> {
    check_dims(tm, obs, lap)?;
    if !(cfg.lambda_s > 0.0 && cfg.lambda_t > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "STRE weights must be positive, got {cfg:?}"
        )));
    }
    let r = tm.matrix();
    let l = lap.to_dense();
    let lt2 = cfg.lambda_t.powi(2);
    let k = r.tr_mul(r) + l.tr_mul(&l) * cfg.lambda_s.powi(2);
    let pre = SylvesterInverse::new(&k, &(difference_gram(obs.times()) * lt2))?;
    let apply = |u: &DMatrix<f64>| &k * u + apply_difference_gram(u) * lt2;

    let b = r.tr_mul(obs.values());
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return SpatioTemporalField::new(DMatrix::zeros(b.nrows(), b.ncols()), *obs.grid());
    }
    let mut x = pre.solve(&b);
    let mut res = &b - apply(&x);
    let mut z = pre.solve(&res);
    let mut p = z.clone();
    let mut rz = res.dot(&z);
    for _ in 0..STRE_MAX_ITERATIONS {
        if res.norm() <= STRE_TOLERANCE * b_norm {
            return SpatioTemporalField::new(x, *obs.grid());
        }
        let ap = apply(&p);
        let step = rz / p.dot(&ap);
        x += &p * step;
        res -= &ap * step;
        z = pre.solve(&res);
        let rz_next = res.dot(&z);
        p = &z + &p * (rz_next / rz);
        rz = rz_next;
    }
    if res.norm() <= STRE_TOLERANCE * b_norm {
        return SpatioTemporalField::new(x, *obs.grid());
    }
    Err(Error::NotConverged {
        iterations: STRE_MAX_ITERATIONS,
        residual: res.norm() / b_norm,
    })
}

/// Gradient of the STRE objective at `u`, divided by `|R^T Y|`.
pub fn stre_relative_gradient(
    tm: &TransferModel,
    obs: &Observation,
    cfg: &StreConfig,
    lap: &LaplacianOperator,
    u: &DMatrix<f64>,
) -> f64 {
    let r = tm.matrix();
    let l = lap.to_dense();
    let grad = (r.tr_mul(&(r * u - obs.values()))
        + l.tr_mul(&(&l * u)) * cfg.lambda_s.powi(2)
        + apply_difference_gram(u) * cfg.lambda_t.powi(2))
        * 2.0;
    grad.norm() / r.tr_mul(obs.values()).norm()
}

/// Dense direct solve of the vectorized STRE normal equations.
///
/// Builds the full `(V (T+1))^2` Kronecker system; only for tiny problems.
pub fn stre_dense(
    tm: &TransferModel,
    obs: &Observation,
    cfg: &StreConfig,
    lap: &LaplacianOperator,
) -> Result<DMatrix<f64>> {
    check_dims(tm, obs, lap)?;
    let r = tm.matrix();
    let l = lap.to_dense();
    let (v, n) = (tm.n_nodes(), obs.times());
    let k = r.tr_mul(r) + l.tr_mul(&l) * cfg.lambda_s.powi(2);
    let p = difference_gram(n) * cfg.lambda_t.powi(2);
    // Column-major vec: index(i, t) = i + t v.
    let eye_t = DMatrix::<f64>::identity(n, n);
    let eye_v = DMatrix::<f64>::identity(v, v);
    let a = eye_t.kronecker(&k) + p.kronecker(&eye_v);
    let b = r.tr_mul(obs.values());
    let rhs = DMatrix::from_column_slice(v * n, 1, b.as_slice());
    let x = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("dense STRE system".into()))?;
    Ok(DMatrix::from_column_slice(v, n, x.as_slice()))
}
