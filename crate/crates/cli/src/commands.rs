//! The `simulate`, `reconstruct`, `sweep` and `compare` subcommands.
//!
//! Seeds: observation noise at noise level `l` uses `run_seed(base, 1000 + l)`,
//! the held-out realization used to tune the classical weights uses
//! `run_seed(base, 2000 + l)`, and network run `r` uses `run_seed(base, r)`.
//! Sweep repeat `r` additionally redraws the noise with
//! `run_seed(noise_seed, r)`, so repeat 0 sees the saved observation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ecgi_core::experiment::{run_method, run_seed, tune_baselines, Method, MethodSettings, Scenario};
use ecgi_core::forward::{load_transfer, synth_transfer};
use ecgi_core::mesh::{build_adjacency, icosphere, load_off, save_off};
use ecgi_core::ops::laplacian_matrix;
use ecgi_core::training::detect_bad_init;
use ecgi_core::{MetricsReport, NetworkConfig, Observation, SpatioTemporalField};
use serde::{Deserialize, Serialize};

use crate::config::{BaselineWeights, ExperimentConfig};
use crate::stats::{Summary, SUMMARY_COLUMNS};

pub const MANIFEST: &str = "manifest.json";
pub const RECON_DIR: &str = "recon";

pub fn obs_seed(base: u64, level: usize) -> u64 {
    run_seed(base, 1000 + level)
}

pub fn held_out_seed(base: u64, level: usize) -> u64 {
    run_seed(base, 2000 + level)
}

/// Shared state of one invocation.
pub struct Session {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

impl Session {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationEntry {
    pub sigma: f64,
    pub seed: u64,
    pub file: String,
}

/// Written by `simulate`; everything later commands need to rebuild the
/// problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateManifest {
    pub config: ExperimentConfig,
    pub time_step: f64,
    pub samples: usize,
    pub nodes: usize,
    pub sensors: usize,
    pub mesh: String,
    pub u: String,
    pub v: String,
    pub transfer: String,
    pub observations: Vec<ObservationEntry>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create directory {}", path.display()))
}

fn obs_file(sigma: f64) -> String {
    format!("obs_sigma_{sigma}.csv")
}

pub fn simulate(ctx: &Session) -> Result<SimulateManifest> {
    let cfg = &ctx.config;
    create_dir(&ctx.out)?;
    let mesh = match &cfg.mesh_off {
        Some(path) => load_off(path)?,
        None => icosphere(cfg.scenario.subdivisions, cfg.scenario.radius)?,
    };
    let s = &cfg.scenario;
    let tm = synth_transfer(&mesh, s.n_sensors, s.torso_factor, s.transfer_seed)?;
    ctx.log(format!(
        "simulating {} nodes for {} steps",
        mesh.vertex_count(),
        s.sim_steps
    ));
    let scenario = Scenario::with_transfer(s, mesh, tm)?;

    let manifest_base = |observations| SimulateManifest {
        config: cfg.clone(),
        time_step: scenario.grid().step(),
        samples: scenario.grid().samples(),
        nodes: scenario.mesh.vertex_count(),
        sensors: scenario.tm.n_sensors(),
        mesh: "mesh.off".into(),
        u: "u.csv".into(),
        v: "v.csv".into(),
        transfer: "transfer.csv".into(),
        observations,
    };
    let mut observations = Vec::new();
    for (l, &sigma) in cfg.noise_levels.iter().enumerate() {
        let seed = obs_seed(cfg.base_seed, l);
        let file = obs_file(sigma);
        scenario.observe(sigma, seed)?.save_csv(ctx.out.join(&file))?;
        observations.push(ObservationEntry { sigma, seed, file });
    }
    let manifest = manifest_base(observations);
    save_off(&scenario.mesh, ctx.out.join(&manifest.mesh))?;
    scenario.u_true.save_csv(ctx.out.join(&manifest.u))?;
    scenario.v_true.save_csv(ctx.out.join(&manifest.v))?;
    scenario.tm.save(ctx.out.join(&manifest.transfer))?;
    write(&ctx.out.join(MANIFEST), &serde_json::to_string_pretty(&manifest)?)?;
    ctx.log(format!("wrote simulation to {}", ctx.out.display()));
    Ok(manifest)
}

/// Simulation outputs loaded back from disk.
pub struct Loaded {
    pub manifest: SimulateManifest,
    pub scenario: Scenario,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        bail!("missing input {} (run `ecgi simulate` first)", path.display())
    }
}

pub fn load_simulation(out: &Path) -> Result<Loaded> {
    let path = require(out.join(MANIFEST))?;
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let manifest: SimulateManifest =
        serde_json::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))?;
    let mesh = load_off(require(out.join(&manifest.mesh))?)?;
    let u_true = SpatioTemporalField::load_csv(require(out.join(&manifest.u))?, manifest.time_step)?;
    let v_true = SpatioTemporalField::load_csv(require(out.join(&manifest.v))?, manifest.time_step)?;
    let tm = load_transfer(require(out.join(&manifest.transfer))?)?;
    let lap = laplacian_matrix(&build_adjacency(&mesh)?);
    let scenario = Scenario {
        config: manifest.config.scenario,
        mesh,
        lap,
        u_true,
        v_true,
        tm,
    };
    Ok(Loaded { manifest, scenario })
}

impl Loaded {
    /// Saved observation at noise level `sigma`.
    pub fn observation(&self, out: &Path, sigma: f64) -> Result<(Observation, u64)> {
        let entry = self
            .manifest
            .observations
            .iter()
            .find(|e| e.sigma == sigma)
            .ok_or_else(|| anyhow!("missing input: no observation with sigma {sigma} in {}", MANIFEST))?;
        let path = require(out.join(&entry.file))?;
        let obs = Observation::load_csv(path, self.manifest.time_step, sigma, entry.seed)?;
        Ok((obs, entry.seed))
    }

    fn noise_level(&self, sigma: f64) -> usize {
        self.manifest
            .observations
            .iter()
            .position(|e| e.sigma == sigma)
            .unwrap_or(0)
    }
}

/// Classical weights at one noise level: fixed from the config or tuned.
fn baseline_weights(ctx: &Session, loaded: &Loaded, sigma: f64) -> Result<BaselineWeights> {
    if let Some(w) = ctx.config.baselines {
        return Ok(w);
    }
    let seed = held_out_seed(ctx.config.base_seed, loaded.noise_level(sigma));
    let held_out = loaded.scenario.observe(sigma, seed)?;
    let tuned = tune_baselines(&loaded.scenario, &held_out, &MethodSettings::default())?;
    ctx.log(format!(
        "sigma {sigma}: tuned tikhonov {:?}, stre ({}, {})",
        tuned.tikh_lambda, tuned.stre.lambda_s, tuned.stre.lambda_t
    ));
    Ok(BaselineWeights {
        tikh_lambda: tuned.tikh_lambda,
        stre: tuned.stre,
    })
}

/// One finished run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub method: Method,
    pub sigma: f64,
    pub run: usize,
    /// Network seed; `None` for the deterministic classical methods.
    pub seed: Option<u64>,
    pub noise_seed: u64,
    pub metrics: MetricsReport,
    pub bad_init: Option<bool>,
    pub dir: Option<String>,
}

pub const RUN_COLUMNS: &str = "label,method,sigma,run,seed,noise_seed,re,cc,mse,n,bad_init";

impl RunRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.method.name(),
            self.sigma,
            self.run,
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.noise_seed,
            self.metrics.re,
            self.metrics.cc,
            self.metrics.mse,
            self.metrics.n,
            self.bad_init.map(|b| b.to_string()).unwrap_or_default()
        )
    }
}

/// Number of runs of `method`: classical methods are deterministic given
/// the observation and run once.
fn runs_of(method: Method, repeats: usize) -> usize {
    if method.is_network() {
        repeats
    } else {
        1
    }
}

struct Cell<'a> {
    method: Method,
    sigma: f64,
    run: usize,
    obs: &'a Observation,
    settings: &'a MethodSettings,
}

fn run_cell(ctx: &Session, loaded: &Loaded, label: &str, cell: Cell, out_dir: Option<&Path>) -> Result<RunRecord> {
    let seed = run_seed(ctx.config.base_seed, cell.run);
    ctx.log(format!(
        "{label} {} sigma {} run {}",
        cell.method.name(),
        cell.sigma,
        cell.run
    ));
    let outcome = run_method(cell.method, &loaded.scenario, cell.obs, cell.settings, seed)
        .with_context(|| format!("{} at sigma {} run {}", cell.method.name(), cell.sigma, cell.run))?;
    let bad_init = match &outcome.history {
        Some(h) => detect_bad_init(&h.records).ok(),
        None => None,
    };
    let dir = match out_dir {
        Some(dir) => {
            create_dir(dir)?;
            let field = SpatioTemporalField::new(outcome.estimate.clone(), *loaded.scenario.grid())?;
            field.save_csv(dir.join("u.csv"))?;
            write(
                &dir.join("metrics.csv"),
                &format!("{}\n{}\n", MetricsReport::CSV_HEADER, outcome.metrics.csv_row()),
            )?;
            if let Some(h) = &outcome.history {
                write(&dir.join("history.csv"), &h.to_csv_string())?;
            }
            Some(dir.strip_prefix(&ctx.out).unwrap_or(dir).display().to_string())
        }
        None => None,
    };
    Ok(RunRecord {
        label: label.to_owned(),
        method: cell.method,
        sigma: cell.sigma,
        run: cell.run,
        seed: cell.method.is_network().then_some(seed),
        noise_seed: cell.obs.seed(),
        metrics: outcome.metrics,
        bad_init,
        dir,
    })
}

fn runs_csv(records: &[RunRecord]) -> String {
    let mut s = format!("{RUN_COLUMNS}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

fn first_network(cfg: &ExperimentConfig) -> Result<NetworkConfig> {
    cfg.networks
        .first()
        .copied()
        .ok_or_else(|| anyhow!("config lists no network"))
}

pub fn reconstruct(ctx: &Session) -> Result<Vec<RunRecord>> {
    let cfg = &ctx.config;
    let loaded = load_simulation(&ctx.out)?;
    let network = if cfg.methods.iter().any(|m| m.is_network()) {
        first_network(cfg)?
    } else {
        NetworkConfig::default()
    };
    let mut records = Vec::new();
    let mut weights = Vec::new();
    for &sigma in &cfg.noise_levels {
        let (obs, _) = loaded.observation(&ctx.out, sigma)?;
        let w = if cfg.methods.iter().any(|m| !m.is_network()) {
            baseline_weights(ctx, &loaded, sigma)?
        } else {
            BaselineWeights {
                tikh_lambda: MethodSettings::default().tikh_lambda,
                stre: MethodSettings::default().stre,
            }
        };
        weights.push(serde_json::json!({ "sigma": sigma, "weights": w }));
        let settings = cfg.settings(network, w);
        for &method in &cfg.methods {
            for run in 0..runs_of(method, cfg.repeats) {
                let dir = ctx
                    .out
                    .join(RECON_DIR)
                    .join(method.name())
                    .join(format!("sigma_{sigma}"))
                    .join(format!("run_{run}"));
                let cell = Cell {
                    method,
                    sigma,
                    run,
                    obs: &obs,
                    settings: &settings,
                };
                records.push(run_cell(ctx, &loaded, "reconstruct", cell, Some(&dir))?);
            }
        }
    }
    let recon = ctx.out.join(RECON_DIR);
    create_dir(&recon)?;
    write(&recon.join("metrics.csv"), &runs_csv(&records))?;
    let run_seeds: Vec<u64> = (0..cfg.repeats).map(|r| run_seed(cfg.base_seed, r)).collect();
    let manifest = serde_json::json!({
        "config": cfg,
        "run_seeds": run_seeds,
        "baseline_weights": weights,
        "runs": records,
    });
    write(
        &ctx.out.join("reconstruct_manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Lambda,
    Noise,
    Network,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Noise => "noise",
            Axis::Network => "network",
        }
    }
}

/// Network method swept along the lambda and network axes.
fn swept_network_method(cfg: &ExperimentConfig) -> Result<Method> {
    if cfg.methods.contains(&Method::EandNd) {
        return Ok(Method::EandNd);
    }
    cfg.methods
        .iter()
        .copied()
        .find(|m| m.is_network() && *m != Method::DataOnly)
        .ok_or_else(|| anyhow!("sweep needs a physics-constrained network method in `methods`"))
}

fn network_label(net: &NetworkConfig) -> String {
    format!(
        "w{}-b{}-p{}-a{}",
        net.width, net.n_blocks, net.n_plain_layers, net.alpha_t_init
    )
}

/// Summary rows of a sweep, one per (axis value, method, sigma).
pub struct SweepResult {
    pub summary_csv: String,
    pub runs: Vec<RunRecord>,
}

pub fn sweep(ctx: &Session, axis: Axis) -> Result<SweepResult> {
    let cfg = &ctx.config;
    let loaded = match load_simulation(&ctx.out) {
        Ok(l) => l,
        Err(_) => {
            ctx.log("no simulation found; simulating first");
            simulate(ctx)?;
            load_simulation(&ctx.out)?
        }
    };
    // (label, method, sigma, settings)
    let mut configs: Vec<(String, Method, f64, MethodSettings)> = Vec::new();
    let sigma0 = cfg.noise_levels[0];
    match axis {
        Axis::Lambda => {
            let method = swept_network_method(cfg)?;
            let base = cfg.settings(first_network(cfg)?, baseline_weights_default());
            for &lambda in &cfg.lambdas {
                let mut s = base;
                s.train.lambda = lambda;
                configs.push((lambda.to_string(), method, sigma0, s));
            }
        }
        Axis::Network => {
            let method = swept_network_method(cfg)?;
            for net in &cfg.networks {
                let s = cfg.settings(*net, baseline_weights_default());
                configs.push((network_label(net), method, sigma0, s));
            }
        }
        Axis::Noise => {
            let network = if cfg.methods.iter().any(|m| m.is_network()) {
                first_network(cfg)?
            } else {
                NetworkConfig::default()
            };
            for &sigma in &cfg.noise_levels {
                let w = if cfg.methods.iter().any(|m| !m.is_network()) {
                    baseline_weights(ctx, &loaded, sigma)?
                } else {
                    baseline_weights_default()
                };
                for &method in &cfg.methods {
                    configs.push((sigma.to_string(), method, sigma, cfg.settings(network, w)));
                }
            }
        }
    }
    if configs.is_empty() {
        bail!("empty result set: the {} axis has no values in the config", axis.name());
    }

    let mut runs = Vec::new();
    let mut summary = format!("axis,value,method,sigma,{SUMMARY_COLUMNS}\n");
    for (label, method, sigma, settings) in &configs {
        let (saved, saved_seed) = loaded.observation(&ctx.out, *sigma)?;
        let mut group = Vec::new();
        for run in 0..cfg.repeats {
            let obs = if run == 0 {
                saved.clone()
            } else {
                loaded.scenario.observe(*sigma, run_seed(saved_seed, run))?
            };
            let cell = Cell {
                method: *method,
                sigma: *sigma,
                run,
                obs: &obs,
                settings,
            };
            group.push(run_cell(ctx, &loaded, label, cell, None)?);
        }
        let metrics: Vec<MetricsReport> = group.iter().map(|r| r.metrics).collect();
        let bad: Vec<Option<bool>> = group.iter().map(|r| r.bad_init).collect();
        let _ = writeln!(
            summary,
            "{},{label},{},{sigma},{}",
            axis.name(),
            method.name(),
            Summary::of(&metrics, &bad).csv_fields()
        );
        runs.extend(group);
    }
    write(&ctx.out.join(format!("sweep_{}.csv", axis.name())), &summary)?;
    write(
        &ctx.out.join(format!("sweep_{}_runs.csv", axis.name())),
        &runs_csv(&runs),
    )?;
    Ok(SweepResult {
        summary_csv: summary,
        runs,
    })
}

fn baseline_weights_default() -> BaselineWeights {
    let d = MethodSettings::default();
    BaselineWeights {
        tikh_lambda: d.tikh_lambda,
        stre: d.stre,
    }
}

/// One row of a runs CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub label: String,
    pub method: String,
    pub sigma: f64,
    pub metrics: MetricsReport,
    pub bad_init: Option<bool>,
}

/// Parses a runs CSV written by `reconstruct` or `sweep`.
pub fn parse_runs(text: &str) -> Result<Vec<RunRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h == RUN_COLUMNS => {}
        _ => bail!("expected header {RUN_COLUMNS}"),
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                bail!("malformed run row: {line}");
            }
            let num = |s: &str| s.parse::<f64>().with_context(|| format!("bad number '{s}' in: {line}"));
            let metrics = MetricsReport {
                re: num(f[6])?,
                cc: num(f[7])?,
                mse: num(f[8])?,
                n: f[9].parse().with_context(|| format!("bad count in: {line}"))?,
                skipped_constant_nodes: 0,
            };
            let bad = match f[10] {
                "" => None,
                b => Some(b == "true"),
            };
            Ok(RunRow {
                label: f[0].to_owned(),
                method: f[1].to_owned(),
                sigma: num(f[2])?,
                metrics,
                bad_init: bad,
            })
        })
        .collect()
}

/// Aggregates the reconstruct metrics per (method, sigma).
pub fn compare(ctx: &Session) -> Result<String> {
    let path = require(ctx.out.join(RECON_DIR).join("metrics.csv"))?;
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let rows = parse_runs(&text)?;
    if rows.is_empty() {
        bail!("empty result set in {}", path.display());
    }
    let mut groups: BTreeMap<(String, u64), Vec<RunRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.method.clone(), row.sigma.to_bits()))
            .or_default()
            .push(row);
    }
    let mut table: Vec<(f64, String, Summary)> = groups
        .into_iter()
        .map(|((method, bits), g)| {
            let m: Vec<MetricsReport> = g.iter().map(|r| r.metrics).collect();
            let b: Vec<Option<bool>> = g.iter().map(|r| r.bad_init).collect();
            (f64::from_bits(bits), method, Summary::of(&m, &b))
        })
        .collect();
    table.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.re.0.total_cmp(&b.2.re.0)));
    let mut csv = format!("method,sigma,{SUMMARY_COLUMNS}\n");
    for (sigma, method, s) in &table {
        let _ = writeln!(csv, "{method},{sigma},{}", s.csv_fields());
    }
    write(&ctx.out.join("comparison.csv"), &csv)?;
    if !ctx.quiet {
        println!(
            "{:<16} {:>8} {:>5} {:>12} {:>12} {:>10}",
            "method", "sigma", "runs", "RE", "CC", "MSE"
        );
        for (sigma, method, s) in &table {
            println!(
                "{:<16} {:>8} {:>5} {:>6.4}±{:<5.4} {:>6.4}±{:<5.4} {:>10.3e}",
                method, sigma, s.runs, s.re.0, s.re.1, s.cc.0, s.cc.1, s.mse.0
            );
        }
    }
    Ok(csv)
}
