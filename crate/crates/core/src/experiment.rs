//! Desk-scale reconstruction experiments shared by the CLI and the
//! acceptance suite: a simulated heart, a synthetic torso, and a runner for
//! every reconstruction method.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::apsim::{downsample, simulate, ApParams, StimulusSpec};
use crate::baselines::{stre, tikhonov, StreConfig, TikhonovConfig, TikhonovOrder};
use crate::error::{Error, Result};
use crate::field::SpatioTemporalField;
use crate::forward::{observe, synth_transfer, Observation, TransferModel};
use crate::mesh::{build_adjacency, icosphere, TriMesh};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::{NetworkConfig, NetworkParams};
use crate::ops::{laplacian_matrix, LaplacianOperator, TemporalGrid};
use crate::training::{predict_fields, train, Backend, Problem, TrainConfig, TrainHistory};

/// Geometry, simulation and sensor setup of the desk problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub subdivisions: u32,
    pub radius: f64,
    /// Explicit Euler step of the simulator.
    pub sim_dt: f64,
    /// Simulator samples, including the resting initial state.
    pub sim_steps: usize,
    /// Keep every `stride`-th simulator sample.
    pub stride: usize,
    pub stimulus: StimulusSpec,
    pub ap: ApParams,
    pub n_sensors: usize,
    pub torso_factor: f64,
    pub transfer_seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            subdivisions: 2,
            radius: 5.0,
            sim_dt: 0.005,
            sim_steps: 996,
            stride: 5,
            stimulus: StimulusSpec::new(0, 200),
            ap: ApParams::default(),
            n_sensors: 64,
            torso_factor: 2.0,
            transfer_seed: 7,
        }
    }
}

/// Simulated ground truth plus the forward model.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: DeskConfig,
    pub mesh: TriMesh,
    pub lap: LaplacianOperator,
    pub u_true: SpatioTemporalField,
    pub v_true: SpatioTemporalField,
    pub tm: TransferModel,
}

impl Scenario {
    pub fn build(config: &DeskConfig) -> Result<Self> {
        let mesh = icosphere(config.subdivisions, config.radius)?;
        let tm = synth_transfer(&mesh, config.n_sensors, config.torso_factor, config.transfer_seed)?;
        Self::with_transfer(config, mesh, tm)
    }

    /// Simulates on `mesh` and pairs the result with a given transfer model.
    pub fn with_transfer(config: &DeskConfig, mesh: TriMesh, tm: TransferModel) -> Result<Self> {
        let lap = laplacian_matrix(&build_adjacency(&mesh)?);
        let grid = TemporalGrid::new(config.sim_dt, config.sim_steps)?;
        let (u, v) = simulate(&lap, &config.ap, &config.stimulus, &grid)?;
        Ok(Self {
            config: *config,
            u_true: downsample(&u, config.stride)?,
            v_true: downsample(&v, config.stride)?,
            mesh,
            lap,
            tm,
        })
    }

    pub fn grid(&self) -> &TemporalGrid {
        self.u_true.grid()
    }

    pub fn observe(&self, noise_std: f64, seed: u64) -> Result<Observation> {
        observe(&self.tm, &self.u_true, noise_std, seed)
    }

    pub fn problem(&self, obs: &Observation) -> Result<Problem> {
        Problem::new(self.mesh.clone(), self.tm.clone(), obs.clone(), self.config.ap)
    }
}

/// Reconstruction methods compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tikh0,
    Tikh1,
    Tikh2,
    Stre,
    /// Network with physics residuals from exact derivatives.
    EpdlAd,
    /// Network with the mesh Laplacian and exact time derivatives.
    EandNdSpatial,
    /// Network with the mesh Laplacian and temporal stencils.
    EandNd,
    /// Network fitted to the data alone (`lambda = 0`).
    DataOnly,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Tikh0,
        Method::Tikh1,
        Method::Tikh2,
        Method::Stre,
        Method::EpdlAd,
        Method::EandNdSpatial,
        Method::EandNd,
        Method::DataOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tikh0 => "tikh0",
            Method::Tikh1 => "tikh1",
            Method::Tikh2 => "tikh2",
            Method::Stre => "stre",
            Method::EpdlAd => "epdl-ad",
            Method::EandNdSpatial => "eand-nd-spatial",
            Method::EandNd => "eand-nd",
            Method::DataOnly => "data-only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{name}'")))
    }

    pub fn is_network(self) -> bool {
        matches!(
            self,
            Method::EpdlAd | Method::EandNdSpatial | Method::EandNd | Method::DataOnly
        )
    }
}

/// Hyperparameters of every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    /// Tikhonov weights for orders 0, 1 and 2.
    pub tikh_lambda: [f64; 3],
    pub stre: StreConfig,
    pub train: TrainConfig,
    pub network: NetworkConfig,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            tikh_lambda: [1e-2, 1e-2, 1e-3],
            stre: StreConfig {
                lambda_s: 1e-3,
                lambda_t: 1e-2,
            },
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub estimate: DMatrix<f64>,
    pub metrics: MetricsReport,
    pub history: Option<TrainHistory>,
    pub params: Option<NetworkParams>,
}

/// Reconstructs `u` from `obs` with `method`; network runs use `seed` for
/// both the initialization and the training RNG.
pub fn run_method(
    method: Method,
    scenario: &Scenario,
    obs: &Observation,
    settings: &MethodSettings,
    seed: u64,
) -> Result<MethodOutcome> {
    let tikh = |order: TikhonovOrder, i: usize| {
        tikhonov(
            &scenario.tm,
            obs,
            &TikhonovConfig {
                lambda: settings.tikh_lambda[i],
                order,
            },
            &scenario.lap,
        )
    };
    let (estimate, history, params) = match method {
        Method::Tikh0 => (tikh(TikhonovOrder::Zero, 0)?.into_values(), None, None),
        Method::Tikh1 => (tikh(TikhonovOrder::One, 1)?.into_values(), None, None),
        Method::Tikh2 => (tikh(TikhonovOrder::Two, 2)?.into_values(), None, None),
        Method::Stre => (
            stre(&scenario.tm, obs, &settings.stre, &scenario.lap)?.into_values(),
            None,
            None,
        ),
        _ => {
            let mut cfg = settings.train;
            cfg.seed = seed;
            match method {
                Method::EpdlAd => cfg.backend = Backend::Ad,
                Method::EandNdSpatial => cfg.backend = Backend::NdSpatial,
                Method::EandNd => cfg.backend = Backend::Nd,
                _ => cfg.lambda = 0.0,
            }
            let net = NetworkConfig {
                seed,
                ..settings.network
            };
            let problem = scenario.problem(obs)?;
            let out = train(&cfg, &net, &problem)?;
            let (u, _) = predict_fields(&out.params, &problem)?;
            (u.into_values(), Some(out.history), Some(out.params))
        }
    };
    Ok(MethodOutcome {
        method,
        metrics: evaluate(scenario.u_true.values(), &estimate)?,
        estimate,
        history,
        params,
    })
}

/// Log-spaced candidate weights `10^lo ..= 10^hi`, `per_decade` per decade.
pub fn log_grid(lo: i32, hi: i32, per_decade: usize) -> Vec<f64> {
    let n = (hi - lo) as usize * per_decade;
    (0..=n)
        .map(|j| 10f64.powf(lo as f64 + j as f64 / per_decade as f64))
        .collect()
}

/// Picks the classical-method weights minimizing RE on a held-out
/// observation (a noise realization not used for evaluation).
pub fn tune_baselines(scenario: &Scenario, held_out: &Observation, base: &MethodSettings) -> Result<MethodSettings> {
    let mut out = *base;
    let grid = log_grid(-6, 1, 4);
    let truth = scenario.u_true.values();
    for (i, order) in [TikhonovOrder::Zero, TikhonovOrder::One, TikhonovOrder::Two]
        .into_iter()
        .enumerate()
    {
        out.tikh_lambda[i] = argmin(&grid, |&lambda| {
            let u = tikhonov(&scenario.tm, held_out, &TikhonovConfig { lambda, order }, &scenario.lap)?;
            Ok(evaluate(truth, u.values())?.re)
        })?;
    }
    let coarse = log_grid(-5, 0, 2);
    let mut best = (f64::INFINITY, base.stre);
    for &lambda_s in &coarse {
        for &lambda_t in &coarse {
            let cfg = StreConfig { lambda_s, lambda_t };
            let re = evaluate(truth, stre(&scenario.tm, held_out, &cfg, &scenario.lap)?.values())?.re;
            if re < best.0 {
                best = (re, cfg);
            }
        }
    }
    out.stre = best.1;
    Ok(out)
}

fn argmin(grid: &[f64], mut f: impl FnMut(&f64) -> Result<f64>) -> Result<f64> {
    let mut best = (f64::INFINITY, grid[0]);
    for x in grid {
        let y = f(x)?;
        if y < best.0 {
            best = (y, *x);
        }
    }
    Ok(best.1)
}

/// Median of a nonempty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seed of the `i`-th run derived from a base seed.
pub fn run_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64 * 1_000_003)
}
