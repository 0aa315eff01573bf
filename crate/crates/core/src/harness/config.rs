use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelKind, ModelSpec};
use crate::error::{Error, Result};
use crate::filters::{FilterKind, Integration, IntegrationScheme, MeanUpdateMode};
use crate::loc_inflate::{
    AdaptiveInflationConfig, InflationState, LocalizationConfig, Topology,
};
use crate::obs::{ObsErrorModel, ObsOperator, Parity};
use crate::pseudo_time::{build_schedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    /// Every state variable.
    #[default]
    Full,
    /// Every other gridpoint, starting at the configured parity.
    EveryOther,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Model steps between observations (one assimilation cycle).
    pub interval: usize,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub parity: Parity,
    /// Diagonal of `R`, the same for every observation.
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub members: usize,
    #[serde(default = "default_integration")]
    pub integration: Integration,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub mean_mode: MeanUpdateMode,
}

fn default_integration() -> Integration {
    Integration::Dsi
}

fn default_schedule() -> ScheduleKind {
    ScheduleKind::Uniform
}

fn default_steps() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationSection {
    /// Localization radius `λ` in gridpoints.
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum InflationConfig {
    Fixed { delta: f64 },
    Adaptive(AdaptiveInflationConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitCenter {
    /// Perturb the (spun-up) truth.
    Truth,
    /// Perturb the model's rest state: the origin for L63, `x_j = F` for L96.
    SteadyState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    /// Leading cycles excluded from the summary statistics.
    #[serde(default = "default_spinup")]
    pub spinup: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Model steps taken by the nature run before the first cycle.
    #[serde(default = "default_nature_spinup")]
    pub nature_spinup_steps: usize,
    #[serde(default = "default_init")]
    pub init: InitCenter,
    /// Variance of the independent Gaussian noise added to every variable of
    /// every initial member.
    pub init_variance: f64,
    /// The run stops once more than this fraction of `cycles` has failed.
    #[serde(default = "default_abort")]
    pub abort_failure_fraction: f64,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_cycles() -> usize {
    20_000
}

fn default_spinup() -> usize {
    1_000
}

fn default_seed() -> u64 {
    1
}

fn default_nature_spinup() -> usize {
    5_000
}

fn default_init() -> InitCenter {
    InitCenter::Truth
}

fn default_abort() -> f64 {
    0.05
}

fn default_parallel() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub observations: ObservationConfig,
    pub filter: FilterConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationSection>,
    pub inflation: InflationConfig,
    pub run: RunConfig,
}

/// Objects built from a validated config.
pub(crate) struct Resolved {
    pub operator: Arc<ObsOperator>,
    pub errors: Arc<ObsErrorModel>,
    pub scheme: IntegrationScheme,
    pub localization: Option<LocalizationConfig>,
    pub inflation: InflationState,
}

impl ExperimentConfig {
    /// L63 with observations of all three variables every `interval` steps,
    /// `R = 2I`, `M = 3` and a fixed inflation.
    pub fn lorenz63(interval: usize, kind: FilterKind, delta: f64) -> Self {
        Self {
            model: ModelSpec::lorenz63(),
            observations: ObservationConfig {
                interval,
                network: Network::Full,
                parity: Parity::Odd,
                variance: 2.0,
            },
            filter: FilterConfig {
                kind,
                members: 3,
                integration: Integration::Dsi,
                schedule: ScheduleKind::Uniform,
                steps: 5,
                mean_mode: MeanUpdateMode::PerStep,
            },
            localization: None,
            inflation: InflationConfig::Fixed { delta },
            run: RunConfig {
                cycles: default_cycles(),
                spinup: default_spinup(),
                seed: default_seed(),
                nature_spinup_steps: default_nature_spinup(),
                init: InitCenter::Truth,
                init_variance: 2.0,
                abort_failure_fraction: default_abort(),
                parallel: false,
            },
        }
    }

    /// Localized L96 benchmark: 40 variables, every other gridpoint observed
    /// every 2 steps with `R = I`, `λ = 4`, adaptive inflation, 4 DSI steps.
    pub fn lorenz96(kind: FilterKind, members: usize) -> Self {
        Self {
            model: ModelSpec::lorenz96(),
            observations: ObservationConfig {
                interval: 2,
                network: Network::EveryOther,
                parity: Parity::Odd,
                variance: 1.0,
            },
            filter: FilterConfig {
                kind,
                members,
                integration: Integration::Dsi,
                schedule: ScheduleKind::Uniform,
                steps: 4,
                mean_mode: MeanUpdateMode::PerStep,
            },
            localization: Some(LocalizationSection { radius: 4.0 }),
            inflation: InflationConfig::Adaptive(AdaptiveInflationConfig::default()),
            run: RunConfig {
                cycles: default_cycles(),
                spinup: default_spinup(),
                seed: default_seed(),
                nature_spinup_steps: 2_000,
                init: InitCenter::Truth,
                init_variance: 1.0,
                abort_failure_fraction: default_abort(),
                parallel: true,
            },
        }
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Reads and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_toml_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    pub(crate) fn resolve(&self) -> Result<Resolved> {
        let invalid = |msg: String| Err(Error::InvalidParameter(msg));
        self.model.validate()?;
        let n = self.model.state_dim();
        let obs = &self.observations;
        if obs.interval == 0 {
            return invalid("observation interval must be at least one model step".into());
        }
        if !(obs.variance > 0.0 && obs.variance.is_finite()) {
            return invalid(format!("observation variance must be positive, got {}", obs.variance));
        }
        if self.filter.members < 2 {
            return invalid(format!("ensemble needs at least 2 members, got {}", self.filter.members));
        }
        let run = &self.run;
        if run.cycles <= run.spinup {
            return invalid(format!(
                "cycle count ({}) must exceed the spin-up discard ({})",
                run.cycles, run.spinup
            ));
        }
        if !(run.init_variance >= 0.0 && run.init_variance.is_finite()) {
            return invalid("initial ensemble variance must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&run.abort_failure_fraction) {
            return invalid("abort failure fraction must lie in [0, 1]".into());
        }
        if self.filter.kind == FilterKind::KfReference {
            return Err(Error::Unsupported {
                kind: "filter kind",
                detail: "the Kalman-filter reference does not cycle an ensemble".into(),
            });
        }
        let schedule = build_schedule(self.filter.schedule, self.filter.steps)?;
        let operator = match obs.network {
            Network::Full => ObsOperator::identity(n),
            Network::EveryOther => ObsOperator::every_other(n, obs.parity),
        };
        let errors = ObsErrorModel::uniform(operator.n_obs(), obs.variance)?;
        let localization = match self.localization {
            None => None,
            Some(sec) => {
                if !matches!(self.model.kind, ModelKind::L96 { .. }) {
                    return Err(Error::Unsupported {
                        kind: "localization",
                        detail: "localization needs the Lorenz-96 ring".into(),
                    });
                }
                if !matches!(
                    self.filter.kind,
                    FilterKind::Letkf | FilterKind::Etkbf | FilterKind::Detkbf
                ) {
                    return Err(Error::Unsupported {
                        kind: "localization",
                        detail: format!("{} has no localized form", self.filter.kind),
                    });
                }
                Some(LocalizationConfig::new(sec.radius, Topology::Ring(n))?)
            }
        };
        let inflation = match self.inflation {
            InflationConfig::Fixed { delta } => InflationState::fixed(n, delta)?,
            InflationConfig::Adaptive(cfg) => {
                if localization.is_none() {
                    return Err(Error::Unsupported {
                        kind: "inflation",
                        detail: "adaptive inflation is estimated per gridpoint and needs localization"
                            .into(),
                    });
                }
                InflationState::adaptive(n, cfg)?
            }
        };
        Ok(Resolved {
            operator: Arc::new(operator),
            errors: Arc::new(errors),
            scheme: IntegrationScheme {
                method: self.filter.integration,
                schedule,
            },
            localization,
            inflation,
        })
    }
}
