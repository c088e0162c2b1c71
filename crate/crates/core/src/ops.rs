//! Discrete differential operators: the mesh spatial Laplacian and the
//! five-point fourth-order temporal derivative.
//!
//! The mesh Laplacian at vertex `i` interpolates a virtual ring of values at
//! distance `r_i` (the mean edge length) along every incident edge and
//! compares their mean with `u_i`, like the regular-grid stencil
//! `4/d^2 * (mean - u0)`. Folding the interpolation into the weights gives
//!
//! ```text
//! L u_i = 4 / (r_i n_i) * sum_j (u_j - u_i) / d_ij
//! ```
//!
//! which is assembled once into a sparse matrix.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::Adjacency;
use crate::sparse::CsrMatrix;

/// Assembled mesh Laplacian (units of 1/length^2).
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianOperator {
    matrix: CsrMatrix,
}

impl LaplacianOperator {
    #[cfg(test)]
    pub(crate) fn from_matrix(matrix: CsrMatrix) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(u)
    }

    /// Applies the operator to every column of a node-by-time matrix.
    pub fn apply_columns(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        self.matrix.mul_dense(u)
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.matrix.get(i, i)
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        (0..self.size()).map(|i| self.diagonal(i).abs()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }
}

pub fn laplacian_matrix(adj: &Adjacency) -> LaplacianOperator {
    let n = adj.len();
    let mut trip = Vec::new();
    for i in 0..n {
        let scale = 4.0 / (adj.ring_radius(i) * adj.degree(i) as f64);
        let mut diag = 0.0;
        for (&j, &d) in adj.neighbors(i).iter().zip(adj.lengths(i)) {
            trip.push((i, j, scale / d));
            diag -= scale / d;
        }
        trip.push((i, i, diag));
    }
    LaplacianOperator {
        matrix: CsrMatrix::from_triplets(n, n, &trip),
    }
}

/// `4/d^2 * (mean(neighbors) - u0)` on a square grid with spacing `d`.
pub fn regular_grid_laplacian_check(d: f64, u0: f64, neighbors: [f64; 4]) -> f64 {
    assert!(d > 0.0, "grid spacing must be positive");
    let mean = neighbors.iter().sum::<f64>() / 4.0;
    4.0 / (d * d) * (mean - u0)
}

/// Minimum number of samples the five-point stencils need.
pub const MIN_SAMPLES: usize = 5;

/// Uniform time axis: `samples` points spaced by `step`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemporalGrid {
    step: f64,
    samples: usize,
}

impl TemporalGrid {
    pub fn new(step: f64, samples: usize) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidConfig(format!("time step must be positive, got {step}")));
        }
        if samples < MIN_SAMPLES {
            return Err(Error::TooFewSamples {
                len: samples,
                min: MIN_SAMPLES,
            });
        }
        Ok(Self { step, samples })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Time of sample `k`, starting at zero.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    /// Length of the covered interval.
    pub fn duration(&self) -> f64 {
        (self.samples - 1) as f64 * self.step
    }
}

/// Numerators of the five-point first-derivative formulas; divide by `12 tau`.
pub mod stencils {
    pub const INTERIOR: [f64; 5] = [1.0, -8.0, 0.0, 8.0, -1.0];
    pub const FIRST: [f64; 5] = [-25.0, 48.0, -36.0, 16.0, -3.0];
    pub const SECOND: [f64; 5] = [-3.0, -10.0, 18.0, -6.0, 1.0];
    pub const PENULTIMATE: [f64; 5] = [-1.0, 6.0, -18.0, 10.0, 3.0];
    pub const LAST: [f64; 5] = [3.0, -16.0, 36.0, -48.0, 25.0];
}

/// Stencil for sample `index` of a series of length `len`: the index of the
/// first of the five samples it reads, and the numerators.
pub fn stencil_for(index: usize, len: usize) -> (usize, &'static [f64; 5]) {
    assert!(len >= MIN_SAMPLES && index < len);
    match index {
        0 => (0, &stencils::FIRST),
        1 => (0, &stencils::SECOND),
        i if i == len - 1 => (len - 5, &stencils::LAST),
        i if i == len - 2 => (len - 5, &stencils::PENULTIMATE),
        i => (i - 2, &stencils::INTERIOR),
    }
}

/// Fourth-order first derivative of a uniformly sampled series.
pub fn temporal_derivative(series: &[f64], grid: &TemporalGrid) -> Result<Vec<f64>> {
    if series.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            len: series.len(),
            min: MIN_SAMPLES,
        });
    }
    if series.len() != grid.samples() {
        return Err(Error::Dimension(format!(
            "series has {} samples, grid has {}",
            series.len(),
            grid.samples()
        )));
    }
    let denom = 12.0 * grid.step();
    Ok((0..series.len())
        .map(|k| {
            let (start, w) = stencil_for(k, series.len());
            w.iter().zip(&series[start..start + 5]).map(|(c, u)| c * u).sum::<f64>() / denom
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_adjacency, icosphere, regular_tetrahedron, Point, TriMesh};
    use nalgebra::DVector;
    use proptest::prelude::*;

    /// Interpolates the ring values explicitly and compares their mean with
    /// `u_i`, independently of the assembled matrix.
    fn brute_force_laplacian(adj: &Adjacency, u: &[f64]) -> Vec<f64> {
        (0..adj.len())
            .map(|i| {
                let r = adj.ring_radius(i);
                let ring: Vec<f64> = adj
                    .neighbors(i)
                    .iter()
                    .zip(adj.lengths(i))
                    .map(|(&j, &d)| u[i] + r / d * (u[j] - u[i]))
                    .collect();
                let mean = ring.iter().sum::<f64>() / ring.len() as f64;
                4.0 / (r * r) * (mean - u[i])
            })
            .collect()
    }

    /// Finite-difference weights from a Vandermonde solve: first derivative
    /// at offset 0 using samples at the given integer offsets.
    fn vandermonde_weights(offsets: [f64; 5]) -> [f64; 5] {
        let a = DMatrix::from_fn(5, 5, |m, k| offsets[k].powi(m as i32));
        let mut rhs = DVector::zeros(5);
        rhs[1] = 1.0;
        let w = a.lu().solve(&rhs).unwrap();
        [w[0], w[1], w[2], w[3], w[4]]
    }

    #[test]
    fn hard_coded_stencils_match_vandermonde() {
        let cases = [
            ([0.0, 1.0, 2.0, 3.0, 4.0], stencils::FIRST),
            ([-1.0, 0.0, 1.0, 2.0, 3.0], stencils::SECOND),
            ([-2.0, -1.0, 0.0, 1.0, 2.0], stencils::INTERIOR),
            ([-3.0, -2.0, -1.0, 0.0, 1.0], stencils::PENULTIMATE),
            ([-4.0, -3.0, -2.0, -1.0, 0.0], stencils::LAST),
        ];
        for (offs, numer) in cases {
            let w = vandermonde_weights(offs);
            for k in 0..5 {
                assert!((w[k] * 12.0 - numer[k]).abs() < 1e-9, "{offs:?}");
            }
        }
    }

    #[test]
    fn tetrahedron_laplacian() {
        let adj = build_adjacency(&regular_tetrahedron(1.0)).unwrap();
        let lap = laplacian_matrix(&adj);
        let u = [1.0, 0.0, 0.0, 0.0];
        let out = lap.apply(&u);
        assert!((out[0] + 4.0).abs() < 1e-12);
        for &o in &out[1..] {
            assert!((o - 4.0 / 3.0).abs() < 1e-12);
        }
        let brute = brute_force_laplacian(&adj, &u);
        for (a, b) in out.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entries_follow_closed_form() {
        let adj = build_adjacency(&icosphere(1, 1.3).unwrap()).unwrap();
        let lap = laplacian_matrix(&adj);
        for i in 0..adj.len() {
            let (r, n) = (adj.ring_radius(i), adj.degree(i) as f64);
            let mut diag = 0.0;
            for (&j, &d) in adj.neighbors(i).iter().zip(adj.lengths(i)) {
                assert!((lap.matrix().get(i, j) - 4.0 / (r * n * d)).abs() < 1e-12);
                diag += 1.0 / d;
            }
            assert!((lap.diagonal(i) + 4.0 / (r * n) * diag).abs() < 1e-12);
            assert_eq!(lap.matrix().row(i).count(), adj.degree(i) + 1);
        }
    }

    #[test]
    fn matrix_matches_pointwise_on_random_fields() {
        use rand::{Rng, SeedableRng};
        let adj = build_adjacency(&icosphere(1, 1.0).unwrap()).unwrap();
        let lap = laplacian_matrix(&adj);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u: Vec<f64> = (0..adj.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            for (a, b) in lap.apply(&u).iter().zip(brute_force_laplacian(&adj, &u)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_zero_and_support_is_symmetric() {
        for s in 0..=3 {
            let adj = build_adjacency(&icosphere(s, 1.0).unwrap()).unwrap();
            let lap = laplacian_matrix(&adj);
            let m = lap.matrix();
            for i in 0..adj.len() {
                let sum: f64 = m.row(i).map(|(_, v)| v).sum();
                assert!(sum.abs() < 1e-10);
                for (j, _) in m.row(i) {
                    assert!(m.row(j).any(|(k, _)| k == i));
                }
            }
            let ones = vec![2.5; adj.len()];
            assert!(lap.apply(&ones).iter().all(|v| v.abs() < 1e-10));
        }
    }

    fn z_discrepancy(s: u32) -> (f64, f64) {
        // On the unit sphere z is a degree-1 harmonic: surface Laplacian = -2z.
        let mesh = icosphere(s, 1.0).unwrap();
        let lap = laplacian_matrix(&build_adjacency(&mesh).unwrap());
        let z: Vec<f64> = mesh.vertices().iter().map(|p| p.z).collect();
        let out = lap.apply(&z);
        let se: f64 = out.iter().zip(&z).map(|(l, z)| (l + 2.0 * z).powi(2)).sum();
        let rayleigh = out.iter().zip(&z).map(|(l, z)| l * z).sum::<f64>() / z.iter().map(|z| z * z).sum::<f64>();
        ((se / z.len() as f64).sqrt(), rayleigh)
    }

    #[test]
    fn sphere_harmonic_energy_is_exact() {
        for s in 1..=4 {
            let (_, rayleigh) = z_discrepancy(s);
            assert!((rayleigh + 2.0).abs() < 1e-9, "s={s}: {rayleigh}");
        }
    }

    #[test]
    fn pointwise_error_reflects_ring_asymmetry() {
        // s=1 rings are symmetric enough for exactness. Finer icospheres have
        // lopsided 1-rings whose first-order term does not cancel, so the
        // pointwise error grows as the edges shrink.
        let errs: Vec<f64> = (1..=3).map(|s| z_discrepancy(s).0).collect();
        assert!(errs[0] < 1e-12, "{errs:?}");
        assert!(errs[1] > 0.1 && errs[2] > errs[1], "{errs:?}");
    }

    /// Regular triangular lattice of `(2n+1)^2` vertices with spacing `h`,
    /// centered on vertex index `center`.
    fn hex_patch(n: usize, h: f64) -> (TriMesh, usize) {
        let side = 2 * n + 1;
        let mut verts = Vec::new();
        for j in 0..side {
            for i in 0..side {
                let (x, y) = (i as f64 - n as f64, j as f64 - n as f64);
                verts.push(Point::new((x + 0.5 * y) * h, y * 3f64.sqrt() / 2.0 * h, 0.0));
            }
        }
        let idx = |i: usize, j: usize| j * side + i;
        let mut faces = Vec::new();
        for j in 0..side - 1 {
            for i in 0..side - 1 {
                faces.push([idx(i, j), idx(i + 1, j), idx(i, j + 1)]);
                faces.push([idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
        (TriMesh::new(verts, faces).unwrap(), idx(n, n))
    }

    #[test]
    fn converges_on_refined_regular_lattice() {
        let f = |p: &Point| (p.x + 0.3).sin() * (0.7 * p.y - 0.2).cos();
        let exact = {
            let p = Point::zeros();
            -(1.0 + 0.49) * f(&p)
        };
        let errs: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&h| {
                let (mesh, c) = hex_patch(3, h);
                let adj = build_adjacency(&mesh).unwrap();
                assert_eq!(adj.degree(c), 6);
                let u: Vec<f64> = mesh.vertices().iter().map(f).collect();
                (laplacian_matrix(&adj).apply(&u)[c] - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.0..5.0).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn regular_grid_examples() {
        assert_eq!(regular_grid_laplacian_check(0.5, 2.0, [2.0; 4]), 0.0);
        assert_eq!(regular_grid_laplacian_check(1.0, 0.0, [1.0; 4]), 4.0);
        let (a, h, k) = (0.3, 0.11, -0.7);
        assert!(regular_grid_laplacian_check(0.2, a, [a + h, a - h, a + k, a - k]).abs() < 1e-12);
    }

    #[test]
    fn linear_series_exact() {
        let grid = TemporalGrid::new(1.0, 9).unwrap();
        let u: Vec<f64> = (0..9).map(|t| t as f64).collect();
        for d in temporal_derivative(&u, &grid).unwrap() {
            assert!((d - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn quadratic_hand_values() {
        let grid = TemporalGrid::new(1.0, 5).unwrap();
        let u: Vec<f64> = (0..5).map(|t| (t * t) as f64).collect();
        let d = temporal_derivative(&u, &grid).unwrap();
        assert_eq!(d[2], 4.0);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn quartic_exact() {
        let tau = 0.1;
        let grid = TemporalGrid::new(tau, 11).unwrap();
        let u: Vec<f64> = (0..11).map(|k| (k as f64 * tau).powi(4)).collect();
        let d = temporal_derivative(&u, &grid).unwrap();
        for (k, dk) in d.iter().enumerate() {
            let exact = 4.0 * (k as f64 * tau).powi(3);
            assert!((dk - exact).abs() <= 1e-9 * exact.abs().max(1e-3), "k={k}");
        }
    }

    #[test]
    fn short_series_rejected() {
        assert!(matches!(TemporalGrid::new(1.0, 4), Err(Error::TooFewSamples { .. })));
        let grid = TemporalGrid::new(1.0, 5).unwrap();
        assert!(temporal_derivative(&[0.0; 4], &grid).is_err());
    }

    #[test]
    fn fourth_order_convergence_on_sine() {
        let max_err = |n: usize| {
            let tau = 2.0 * std::f64::consts::PI / n as f64;
            let grid = TemporalGrid::new(tau, n + 1).unwrap();
            let u: Vec<f64> = (0..=n).map(|k| (k as f64 * tau).sin()).collect();
            let d = temporal_derivative(&u, &grid).unwrap();
            (2..=n - 2)
                .map(|k| (d[k] - (k as f64 * tau).cos()).abs())
                .fold(0.0, f64::max)
        };
        let errs: Vec<f64> = [16, 32, 64, 128].iter().map(|&n| max_err(n)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
        }
    }

    proptest! {
        #[test]
        fn stencils_exact_on_quartics(
            c in prop::array::uniform5(-1.0f64..1.0),
            tau in 0.01f64..0.5,
            len in 5usize..20,
        ) {
            let p = |t: f64| c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * c[4])));
            let dp = |t: f64| c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * 4.0 * c[4]));
            let grid = TemporalGrid::new(tau, len).unwrap();
            let u: Vec<f64> = (0..len).map(|k| p(k as f64 * tau)).collect();
            let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs())) / tau;
            let d = temporal_derivative(&u, &grid).unwrap();
            for (k, dk) in d.iter().enumerate() {
                let exact = dp(k as f64 * tau);
                prop_assert!((dk - exact).abs() <= 1e-9 * exact.abs().max(scale).max(1.0));
            }
        }
    }
}
