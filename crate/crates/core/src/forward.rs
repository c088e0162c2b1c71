//! Body-heart observation model `y = R u + noise`.

use std::path::Path;

use nalgebra::{DMatrix, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{matrix_from_csv, matrix_to_csv, SpatioTemporalField};
use crate::mesh::{fmt_sig9, Point, TriMesh};
use crate::ops::TemporalGrid;

/// Linear map from heart-node potentials to torso-sensor potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferModel {
    matrix: DMatrix<f64>,
    sensors: Option<Vec<Point>>,
}

impl TransferModel {
    /// Wraps an `M x V` matrix. Requires `M < V`, finite entries and no
    /// all-zero rows.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (m, v) = matrix.shape();
        if m == 0 || m >= v {
            return Err(Error::Dimension(format!(
                "transfer matrix must have fewer sensors than heart nodes, got {m}x{v}"
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::Dimension("transfer matrix has non-finite entries".into()));
        }
        if let Some(r) = (0..m).find(|&r| matrix.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::Dimension(format!("transfer matrix row {r} is all zero")));
        }
        Ok(Self { matrix, sensors: None })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sensors(&self) -> Option<&[Point]> {
        self.sensors.as_deref()
    }

    pub fn n_sensors(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.ncols()
    }

    /// Ratio of the largest to the `M`-th singular value.
    pub fn condition_ratio(&self) -> f64 {
        let sv = self.matrix.singular_values();
        let max = sv.max();
        let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for r in 0..self.matrix.nrows() {
            let row: Vec<String> = self.matrix.row(r).iter().map(|&x| fmt_sig9(x)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Quasi-uniform points on the unit sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Point> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            Point::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect()
}

/// Synthetic inverse-square transfer matrix from sensors on a sphere around
/// the heart.
///
/// Sensors form a randomly rotated Fibonacci lattice at
/// `torso_radius_factor` times the heart's bounding radius;
/// `R_ij = c / |p_i - q_j|^2` with `c` scaling the largest row sum to 1.
pub fn synth_transfer(heart: &TriMesh, n_sensors: usize, torso_radius_factor: f64, seed: u64) -> Result<TransferModel> {
    let v = heart.vertex_count();
    if n_sensors == 0 || n_sensors >= v {
        return Err(Error::InvalidConfig(format!(
            "need 0 < sensors < heart vertices ({v}), got {n_sensors}"
        )));
    }
    if !(torso_radius_factor > 1.0) {
        return Err(Error::InvalidConfig(format!(
            "torso radius factor must exceed 1, got {torso_radius_factor}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = loop {
        let a = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if a.norm() > 1e-3 && a.norm() <= 1.0 {
            break Unit::new_normalize(a);
        }
    };
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let rot = Rotation3::from_axis_angle(&axis, angle);
    let center = heart.centroid();
    let radius = torso_radius_factor * heart.bounding_radius();
    let sensors: Vec<Point> = fibonacci_sphere(n_sensors)
        .into_iter()
        .map(|p| center + rot * p * radius)
        .collect();

    let mut m = DMatrix::zeros(n_sensors, v);
    for (i, s) in sensors.iter().enumerate() {
        for (j, q) in heart.vertices().iter().enumerate() {
            let d2 = (s - q).norm_squared();
            if d2.sqrt() < 1e-9 {
                return Err(Error::SensorCoincident { sensor: i, vertex: j });
            }
            m[(i, j)] = 1.0 / d2;
        }
    }
    let max_row = (0..n_sensors).map(|i| m.row(i).sum()).fold(0.0, f64::max);
    m /= max_row;
    let mut tm = TransferModel::new(m)?;
    tm.sensors = Some(sensors);
    Ok(tm)
}

/// Reads a headerless CSV with one sensor per row.
pub fn load_transfer(path: impl AsRef<Path>) -> Result<TransferModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transfer(&text)
}

pub fn parse_transfer(text: &str) -> Result<TransferModel> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::Csv {
                    line: idx + 1,
                    message: format!("expected {c} fields, found {}", fields.len()),
                })
            }
            _ => {}
        }
        for f in fields {
            data.push(f.trim().parse::<f64>().map_err(|e| Error::Csv {
                line: idx + 1,
                message: format!("bad number {f:?}: {e}"),
            })?);
        }
        rows += 1;
    }
    let cols = cols.ok_or(Error::Csv {
        line: 1,
        message: "empty transfer file".into(),
    })?;
    TransferModel::new(DMatrix::from_row_slice(rows, cols, &data))
}

/// Noisy torso observations over time.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: DMatrix<f64>,
    grid: TemporalGrid,
    noise_std: f64,
    seed: u64,
}

impl Observation {
    pub fn new(values: DMatrix<f64>, grid: TemporalGrid, noise_std: f64, seed: u64) -> Result<Self> {
        if values.ncols() != grid.samples() {
            return Err(Error::Dimension(format!(
                "observation has {} columns, grid has {} samples",
                values.ncols(),
                grid.samples()
            )));
        }
        Ok(Self {
            values,
            grid,
            noise_std,
            seed,
        })
    }

    /// `M x (T+1)` observed potentials.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn grid(&self) -> &TemporalGrid {
        &self.grid
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn times(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_csv_string(&self) -> String {
        matrix_to_csv(&self.values)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, step: f64, noise_std: f64, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let values = matrix_from_csv(&text)?;
        let grid = TemporalGrid::new(step, values.ncols())?;
        Self::new(values, grid, noise_std, seed)
    }
}

/// `y = R u + e`, `e ~ N(0, noise_std^2)` i.i.d. per entry from `seed`.
pub fn observe(tm: &TransferModel, u: &SpatioTemporalField, noise_std: f64, seed: u64) -> Result<Observation> {
    if tm.n_nodes() != u.nodes() {
        return Err(Error::Dimension(format!(
            "transfer matrix expects {} nodes, field has {}",
            tm.n_nodes(),
            u.nodes()
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise std must be >= 0, got {noise_std}")));
    }
    let mut y = tm.matrix() * u.values();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in y.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    Observation::new(y, *u.grid(), noise_std, seed)
}
