//! Single-file run configuration: machine, controller, training, scenario
//! and output settings, with named presets and a content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adp::{default_mu_c, default_sigma_c, operating_point_measure, BellmanSdp, TailFingerprint};
use crate::augment::ControllerParams;
use crate::error::{Error, Result};
use crate::fixed::FixedProfile;
use crate::model::PerUnitParams;
use crate::mpc::MAX_HORIZON;
use crate::sim::{ControllerVariant, Scenario};

pub const PRESETS: [&str; 5] = [
    "table2-n1",
    "table2-n2",
    "table2-dmpc-n1",
    "table2-dmpc-n2",
    "fig6-steps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Adp,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub policy: PolicyKind,
    pub horizon: usize,
    /// Switching penalty of the baseline controller.
    pub lambda_u: f64,
}

/// State measure weighting the SDP objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureConfig {
    /// Unit covariance on the continuous coordinates.
    Identity,
    /// Centered on the rated-current orbit with the given spreads.
    OperatingPoint { spread: f64, filter_spread: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    /// Bellman iterations used with `--ci`.
    pub ci_iterations: usize,
    pub measure: MeasureConfig,
    /// Random states for the post-training inequality check.
    pub spot_check_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration_periods: usize,
    pub warmup_periods: usize,
    pub initial_torque: f64,
    /// `[seconds after warmup, torque]` pairs.
    pub torque_steps: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NumericProfile {
    Float,
    Fixed,
}

impl std::str::FromStr for NumericProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(NumericProfile::Float),
            "fixed" => Ok(NumericProfile::Fixed),
            _ => Err(Error::Config(format!("unknown profile `{s}`, expected float or fixed"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub profile: NumericProfile,
    pub seed: u64,
    /// Not part of the fingerprint.
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub machine: PerUnitParams,
    pub controller: ControllerParams,
    pub mpc: MpcConfig,
    pub training: TrainingConfig,
    pub scenario: ScenarioConfig,
    pub run: RunSettings,
    pub fixed: FixedProfile,
}

/// Tuned so that both controllers switch at roughly 300 to 330 Hz.
const ADP_DELTA_N1: f64 = 5.0;
const ADP_DELTA_N2: f64 = 7.0;
const DMPC_LAMBDA_N1: f64 = 0.0017;
const DMPC_LAMBDA_N2: f64 = 0.005;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            machine: PerUnitParams::default(),
            controller: ControllerParams {
                delta: ADP_DELTA_N1,
                ..ControllerParams::default()
            },
            mpc: MpcConfig {
                policy: PolicyKind::Adp,
                horizon: 1,
                lambda_u: DMPC_LAMBDA_N1,
            },
            training: TrainingConfig {
                iterations: 50,
                ci_iterations: 5,
                measure: MeasureConfig::OperatingPoint {
                    spread: 0.02,
                    filter_spread: 0.1,
                },
                spot_check_samples: 2000,
            },
            scenario: ScenarioConfig {
                name: "table2-n1".into(),
                duration_periods: 24,
                warmup_periods: 4,
                initial_torque: 1.0,
                torque_steps: Vec::new(),
            },
            run: RunSettings {
                profile: NumericProfile::Float,
                seed: 1,
                output_dir: "out".into(),
            },
            fixed: FixedProfile::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        c.scenario.name = name.into();
        match name {
            "table2-n1" => {}
            "table2-n2" => {
                c.mpc.horizon = 2;
                c.controller.delta = ADP_DELTA_N2;
            }
            "table2-dmpc-n1" => c.mpc.policy = PolicyKind::Baseline,
            "table2-dmpc-n2" => {
                c.mpc.policy = PolicyKind::Baseline;
                c.mpc.horizon = 2;
                c.mpc.lambda_u = DMPC_LAMBDA_N2;
            }
            "fig6-steps" => {
                c.scenario.duration_periods = 6;
                c.scenario.torque_steps = vec![[0.010, 0.0], [0.020, 1.0]];
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}`, expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.machine.validate().map_err(cfg)?;
        self.controller.validate().map_err(cfg)?;
        self.fixed.validate().map_err(cfg)?;
        if self.mpc.horizon == 0 || self.mpc.horizon > MAX_HORIZON {
            return Err(Error::Config(format!("horizon must be in 1..={MAX_HORIZON}")));
        }
        if !(self.mpc.lambda_u >= 0.0 && self.mpc.lambda_u.is_finite()) {
            return Err(Error::Config("lambda_u must be finite and non-negative".into()));
        }
        if self.training.iterations == 0 || self.training.ci_iterations == 0 {
            return Err(Error::Config("Bellman iterations must be positive".into()));
        }
        if let MeasureConfig::OperatingPoint { spread, filter_spread } = self.training.measure {
            if !(spread > 0.0 && filter_spread > 0.0 && spread.is_finite() && filter_spread.is_finite()) {
                return Err(Error::Config("measure spreads must be positive".into()));
            }
        }
        if self.run.profile == NumericProfile::Fixed && self.mpc.policy == PolicyKind::Baseline {
            return Err(Error::Config(
                "the fixed-point profile supports the ADP controller only".into(),
            ));
        }
        for s in &self.scenario.torque_steps {
            if s[1].abs() > self.controller.max_torque {
                return Err(Error::Config(format!("torque step {} exceeds max_torque", s[1])));
            }
        }
        if self.scenario.initial_torque.abs() > self.controller.max_torque {
            return Err(Error::Config("initial torque exceeds max_torque".into()));
        }
        self.scenario().validate(&self.machine).map_err(cfg)
    }

    /// SHA-256 of the canonical serialization, output directory excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.run.output_dir.clear();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn variant(&self) -> ControllerVariant {
        match self.mpc.policy {
            PolicyKind::Adp => ControllerVariant::Adp {
                horizon: self.mpc.horizon,
            },
            PolicyKind::Baseline => ControllerVariant::Baseline {
                horizon: self.mpc.horizon,
                lambda_u: self.mpc.lambda_u,
            },
        }
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            name: self.scenario.name.clone(),
            duration_periods: self.scenario.duration_periods,
            warmup_periods: self.scenario.warmup_periods,
            initial_torque: self.scenario.initial_torque,
            torque_steps: self.scenario.torque_steps.iter().map(|s| (s[0], s[1])).collect(),
            variant: self.variant(),
            fixed_point: (self.run.profile == NumericProfile::Fixed).then_some(self.fixed),
        }
    }

    pub fn bellman_sdp(&self, ci: bool) -> BellmanSdp {
        let iterations = if ci {
            self.training.ci_iterations
        } else {
            self.training.iterations
        };
        let mut sdp = BellmanSdp::new(iterations, self.controller.gamma);
        let (mu, sigma) = match self.training.measure {
            MeasureConfig::Identity => (default_mu_c(), default_sigma_c()),
            MeasureConfig::OperatingPoint { spread, filter_spread } => {
                operating_point_measure(&self.machine, self.controller.ref_amplitude, spread, filter_spread)
            }
        };
        sdp.mu_c = mu;
        sdp.sigma_c = sigma;
        sdp
    }

    pub fn tail_fingerprint(&self) -> TailFingerprint {
        TailFingerprint::new(&self.machine, &self.controller)
    }
}
