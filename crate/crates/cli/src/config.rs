//! Experiment configuration read from JSON.

use std::path::{Path, PathBuf};

use ecgi_core::baselines::StreConfig;
use ecgi_core::experiment::{DeskConfig, Method, MethodSettings};
use ecgi_core::network::NetworkConfig;
use ecgi_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Fixed classical-method weights; when absent they are tuned on a held-out
/// noise realization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineWeights {
    pub tikh_lambda: [f64; 3],
    pub stre: StreConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: DeskConfig,
    /// Heart surface read from an OFF file instead of an icosphere.
    pub mesh_off: Option<PathBuf>,
    pub noise_levels: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// The first entry is used by `reconstruct` and the lambda/noise sweeps.
    pub networks: Vec<NetworkConfig>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub baselines: Option<BaselineWeights>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: DeskConfig::default(),
            mesh_off: None,
            noise_levels: vec![0.01, 0.05, 0.1],
            lambdas: vec![0.05, 0.1, 0.3, 0.5, 0.7],
            networks: vec![NetworkConfig::default()],
            methods: vec![
                Method::Tikh0,
                Method::Tikh1,
                Method::Tikh2,
                Method::Stre,
                Method::EpdlAd,
                Method::EandNdSpatial,
                Method::EandNd,
            ],
            repeats: 5,
            base_seed: 0,
            output_dir: PathBuf::from("ecgi-out"),
            train: TrainConfig::default(),
            baselines: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.methods.is_empty() {
            return Err("config lists no methods".into());
        }
        if self.repeats == 0 {
            return Err("repeats must be at least 1".into());
        }
        if self.noise_levels.is_empty() {
            return Err("config lists no noise levels".into());
        }
        if let Some(s) = self.noise_levels.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(format!("noise level {s} must be finite and non-negative"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(format!("lambda {l} must be finite and non-negative"));
        }
        if self.networks.is_empty() && self.methods.iter().any(|m| m.is_network()) {
            return Err("network methods requested but no network configs given".into());
        }
        for net in &self.networks {
            net.validate().map_err(|e| e.to_string())?;
        }
        self.train.validate().map_err(|e| e.to_string())
    }

    /// Method settings for one network config with the given classical weights.
    pub fn settings(&self, network: NetworkConfig, weights: BaselineWeights) -> MethodSettings {
        MethodSettings {
            tikh_lambda: weights.tikh_lambda,
            stre: weights.stre,
            train: self.train,
            network,
        }
    }
}
