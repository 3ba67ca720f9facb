//! Experiment configuration. Every table rejects unknown keys.

use graze::collision_ops::{KernelParams, WeightSet};
use graze::mild_solver::{InflowDatum, InitialData, SolverConfig, SpatialProfile};
use graze::phase_topology::BoundaryCondition;
use graze::Vec3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown domain {0:?}")]
    DomainUnknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Classify,
    Membership,
    ExitTime,
    Cycle,
    Solve,
    Formation,
    Propagation,
    ContinuityScan,
    ConstantsFit,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Classify,
        Experiment::Membership,
        Experiment::ExitTime,
        Experiment::Cycle,
        Experiment::Solve,
        Experiment::Formation,
        Experiment::Propagation,
        Experiment::ContinuityScan,
        Experiment::ConstantsFit,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Classify => "classify",
            Experiment::Membership => "membership",
            Experiment::ExitTime => "exit_time",
            Experiment::Cycle => "cycle",
            Experiment::Solve => "solve",
            Experiment::Formation => "formation",
            Experiment::Propagation => "propagation",
            Experiment::ContinuityScan => "continuity_scan",
            Experiment::ConstantsFit => "constants_fit",
        }
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;

    /// Accepts both `continuity_scan` and `continuity-scan`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == norm)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown experiment {s:?}")))
    }
}

/// Random phase-space samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub samples: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub t_max: f64,
    /// Fraction of samples placed on the boundary with a tangential
    /// velocity.
    pub tangential_fraction: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { samples: 100, speed_min: 0.3, speed_max: 3.0, t_max: 2.0, tangential_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleSection {
    pub t: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
    pub k_max: usize,
}

impl Default for CycleSection {
    fn default() -> Self {
        CycleSection { t: 5.0, x: [0.0; 3], v: [1.0, 0.0, 0.0], k_max: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    /// CSV with header `t,x1,x2,x3,v1,v2,v3`; random queries are drawn when
    /// unset.
    pub queries: Option<PathBuf>,
    pub random: usize,
    pub t_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection { queries: None, random: 20, t_max: 0.5, speed_min: 0.3, speed_max: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantsSection {
    /// A `constants.json` from an earlier run; fitted when unset.
    pub file: Option<PathBuf>,
    /// Queries for the fit of `C′`.
    pub queries: usize,
    /// Solver used for the `C′` fit; the coarse preset when unset.
    pub solver: Option<SolverConfig>,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        ConstantsSection { file: None, queries: 40, solver: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormationSection {
    pub graph_radius: f64,
    pub amplitude: f64,
    pub speed: Option<f64>,
    pub deltas_rel: Vec<f64>,
    pub probes_per_delta: usize,
    pub safety: f64,
}

impl Default for FormationSection {
    fn default() -> Self {
        let d = graze::jump_lab::FormationSpec::default();
        FormationSection {
            graph_radius: d.graph_radius,
            amplitude: d.amplitude,
            speed: d.speed,
            deltas_rel: d.deltas_rel,
            probes_per_delta: d.probes_per_delta,
            safety: d.safety,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationSection {
    pub samples: usize,
    pub collisionless: bool,
    pub span: f64,
    pub deltas_rel: Vec<f64>,
    pub probes_per_delta: usize,
}

impl Default for PropagationSection {
    fn default() -> Self {
        let d = graze::jump_lab::PropagationSpec::default();
        PropagationSection {
            samples: d.samples,
            collisionless: d.collisionless,
            span: d.span,
            deltas_rel: d.deltas_rel,
            probes_per_delta: d.probes_per_delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuitySection {
    pub count: usize,
    pub t_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Restrict centers to `t < t_b(x, v)`.
    pub before_exit_only: bool,
    pub deltas: Vec<f64>,
    pub probes_per_delta: usize,
    pub budget_rel: f64,
    pub min_slope: f64,
    pub min_r2: f64,
    /// Solver for the scan; the coarse preset when unset.
    pub solver: Option<SolverConfig>,
}

impl Default for ContinuitySection {
    fn default() -> Self {
        let d = graze::jump_lab::ContinuitySpec::default();
        ContinuitySection {
            count: 20,
            t_max: 1.0,
            speed_min: 0.3,
            speed_max: 2.0,
            before_exit_only: false,
            deltas: d.deltas,
            probes_per_delta: d.probes_per_delta,
            budget_rel: d.budget_rel,
            min_slope: d.min_slope,
            min_r2: d.min_r2,
            solver: None,
        }
    }
}

/// Data for `solve` and `continuity_scan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub initial: InitialData,
    pub inflow: InflowDatum,
}

impl Default for DataSection {
    fn default() -> Self {
        let profile = SpatialProfile::Gaussian { center: Vec3::new(0.1, 0.0, 0.0), width: 0.5 };
        DataSection {
            initial: InitialData::Equilibrium { amplitude: 1e-2, profile: profile.clone() },
            inflow: InflowDatum::Maxwellian { amplitude: 1e-2, profile },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain_name: String,
    pub bc: BoundaryCondition,
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub kernel: KernelParams,
    pub weights: WeightSet,
    pub solver: SolverConfig,
    pub data: DataSection,
    pub classify: SampleSection,
    pub membership: SampleSection,
    pub exit_time: SampleSection,
    pub cycle: CycleSection,
    pub solve: SolveSection,
    pub constants: ConstantsSection,
    pub formation: FormationSection,
    pub propagation: PropagationSection,
    pub continuity: ContinuitySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain_name: "peanut".into(),
            bc: BoundaryCondition::Inflow,
            experiment: Experiment::Classify,
            seed: 0,
            output_dir: PathBuf::from("out"),
            kernel: KernelParams::default(),
            weights: WeightSet::default(),
            solver: SolverConfig::default(),
            data: DataSection::default(),
            classify: SampleSection::default(),
            membership: SampleSection::default(),
            exit_time: SampleSection::default(),
            cycle: CycleSection::default(),
            solve: SolveSection::default(),
            constants: ConstantsSection::default(),
            formation: FormationSection::default(),
            propagation: PropagationSection::default(),
            continuity: ContinuitySection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        graze::geometry::builtin_domain(&self.domain_name)
            .map_err(|_| ConfigError::DomainUnknown(self.domain_name.clone()))?;
        KernelParams::new(self.kernel.gamma_exp, self.kernel.q0_const)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.weights.rho > 0.0 && self.weights.beta >= 0.0) {
            return Err(ConfigError::Invalid("weights need rho > 0 and beta >= 0".into()));
        }
        self.solver.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, s) in
            [("classify", &self.classify), ("membership", &self.membership), ("exit_time", &self.exit_time)]
        {
            if !(s.speed_min > 0.0 && s.speed_max > s.speed_min) {
                return Err(ConfigError::Invalid(format!("{name}: need 0 < speed_min < speed_max")));
            }
            if !(0.0..=1.0).contains(&s.tangential_fraction) {
                return Err(ConfigError::Invalid(format!("{name}: tangential_fraction must lie in [0, 1]")));
            }
        }
        let c = &self.continuity;
        if !(c.speed_min > 0.0 && c.speed_max > c.speed_min && c.t_max > 0.0) {
            return Err(ConfigError::Invalid("continuity: need 0 < speed_min < speed_max and t_max > 0".into()));
        }
        Ok(())
    }
}
