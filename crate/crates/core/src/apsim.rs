//! Forward Aliev-Panfilov simulation on a surface mesh.
//!
//! ```text
//! du/dt = D L u + k u (u - a)(1 - u) - u v
//! dv/dt = (e0 + mu1 v / (u + mu2)) (-v - k u (u - a - 1))
//! ```
//!
//! integrated with explicit Euler from rest, excited by a point stimulus.
//! The surfaces used here are closed, so the zero-flux boundary condition
//! has no boundary to act on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SpatioTemporalField;
use crate::ops::{LaplacianOperator, TemporalGrid};

/// Model constants. All must be strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApParams {
    /// Excitability threshold.
    pub a: f64,
    /// Diffusion coefficient.
    pub diffusion: f64,
    /// Repolarization constant.
    pub k: f64,
    pub e0: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl Default for ApParams {
    fn default() -> Self {
        Self {
            a: 0.1,
            diffusion: 10.0,
            k: 8.0,
            e0: 0.002,
            mu1: 0.3,
            mu2: 0.3,
        }
    }
}

impl ApParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.diffusion, self.k, self.e0, self.mu1, self.mu2];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "Aliev-Panfilov parameters must be positive: {self:?}"
            )))
        }
    }

    /// Recovery coupling `e0 + mu1 v / (u + mu2)`.
    pub fn xi(&self, u: f64, v: f64) -> f64 {
        self.e0 + self.mu1 * v / (u + self.mu2)
    }
}

/// Reaction part of both equations: `(du_reaction, dv)`.
///
/// Panics if `u <= -mu2`, where the recovery coupling is singular.
pub fn reaction_terms(u: f64, v: f64, p: &ApParams) -> (f64, f64) {
    assert!(u > -p.mu2, "u = {u} reaches the recovery singularity at -mu2");
    let du = p.k * u * (u - p.a) * (1.0 - u) - u * v;
    let dv = p.xi(u, v) * (-v - p.k * u * (u - p.a - 1.0));
    (du, dv)
}

/// Point stimulus added to one vertex for the first `duration_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusSpec {
    pub vertex: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    pub duration_steps: usize,
}

fn default_amplitude() -> f64 {
    1.0
}

impl StimulusSpec {
    pub fn new(vertex: usize, duration_steps: usize) -> Self {
        Self {
            vertex,
            amplitude: 1.0,
            duration_steps,
        }
    }
}

/// Integrates `(u, v)` on the grid `grid` (step = Euler dt).
///
/// Column 0 is the resting initial state; the stimulus raises the seed
/// vertex after each of the first `duration_steps` updates, capped at 1.
pub fn simulate(
    lap: &LaplacianOperator,
    params: &ApParams,
    stim: &StimulusSpec,
    grid: &TemporalGrid,
) -> Result<(SpatioTemporalField, SpatioTemporalField)> {
    params.validate()?;
    let n = lap.size();
    if stim.vertex >= n {
        return Err(Error::InvalidConfig(format!(
            "stimulus vertex {} out of range for {n} vertices",
            stim.vertex
        )));
    }
    if stim.duration_steps == 0 {
        return Err(Error::InvalidConfig("stimulus duration must be >= 1 step".into()));
    }
    let dt = grid.step();
    let factor = dt * params.diffusion * lap.max_abs_diagonal();
    if factor >= 1.0 {
        return Err(Error::Unstable { factor });
    }

    let steps = grid.samples();
    let mut u_hist = DMatrix::zeros(n, steps);
    let mut v_hist = DMatrix::zeros(n, steps);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for step in 1..steps {
        let lu = lap.apply(&u);
        for i in 0..n {
            let (du, dv) = reaction_or_blowup(u[i], v[i], params).ok_or(Error::BlowUp {
                step,
                vertex: i,
                u: u[i],
                v: v[i],
            })?;
            u[i] += dt * (params.diffusion * lu[i] + du);
            v[i] += dt * dv;
        }
        if step <= stim.duration_steps {
            let s = &mut u[stim.vertex];
            *s = (*s + stim.amplitude).min(1.0);
        }
        for i in 0..n {
            if !(u[i].is_finite() && v[i].is_finite()) {
                return Err(Error::BlowUp {
                    step,
                    vertex: i,
                    u: u[i],
                    v: v[i],
                });
            }
        }
        u_hist.set_column(step, &DVector::from_column_slice(&u));
        v_hist.set_column(step, &DVector::from_column_slice(&v));
    }
    Ok((
        SpatioTemporalField::new(u_hist, *grid)?,
        SpatioTemporalField::new(v_hist, *grid)?,
    ))
}

fn reaction_or_blowup(u: f64, v: f64, p: &ApParams) -> Option<(f64, f64)> {
    (u > -p.mu2 && u.is_finite() && v.is_finite()).then(|| reaction_terms(u, v, p))
}

/// Keeps every `stride`-th column, scaling the time step accordingly.
pub fn downsample(field: &SpatioTemporalField, stride: usize) -> Result<SpatioTemporalField> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    let keep: Vec<usize> = (0..field.times()).step_by(stride).collect();
    let grid = TemporalGrid::new(field.grid().step() * stride as f64, keep.len())?;
    let values = field.values().select_columns(keep.iter());
    SpatioTemporalField::new(values, grid)
}

/// First sample index at which each node exceeds `threshold`.
pub fn activation_times(u: &SpatioTemporalField, threshold: f64) -> Vec<Option<usize>> {
    (0..u.nodes())
        .map(|i| (0..u.times()).find(|&k| u.get(i, k) > threshold))
        .collect()
}
