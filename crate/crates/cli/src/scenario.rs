//! Scenario configuration schema and its failure taxonomy.
//!
//! One JSON file drives every subcommand. Sections are optional so a single
//! config can serve several stages; each command names the sections it
//! cannot run without. Unknown keys are rejected everywhere, and parse
//! errors keep serde's line/column position.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use ppsim::control::ControllerSpec;
use ppsim::demand::{DemandConfig, DemandModel};
use ppsim::engine::{DynamicsParams, RunSpec};
use ppsim::market::{AllocationMode, Deltas, MarketScenario, WageBand};
use ppsim::netgrid::{build_grid, Network};
use ppsim::optimize::{
    axis, fixed_cycle_grid, max_pressure_grid, priority_grid, Candidate, Objective,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Failure classes, one per nonzero process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: the config does not parse or does not validate.
    ConfigInvalid(String),
    /// Exit 3: a file from an earlier stage is needed and absent.
    MissingDependency(String),
    /// Exit 4: filesystem or artifact-content trouble.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::MissingDependency(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::ConfigInvalid(m) => write!(f, "config invalid: {m}"),
            CliError::MissingDependency(m) => write!(f, "missing dependency: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub network: Option<NetworkSection>,
    #[serde(default)]
    pub demand: Option<DemandSection>,
    #[serde(default)]
    pub controller: Option<ControllerSpec>,
    #[serde(default)]
    pub dynamics: Option<DynamicsParams>,
    #[serde(default)]
    pub run: Option<RunSpec>,
    #[serde(default)]
    pub market: Option<MarketSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub optimize: Option<OptimizeSection>,
    #[serde(default)]
    pub city: Option<CitySection>,
    #[serde(default)]
    pub fundamental: Option<FundamentalSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub rows: u32,
    pub cols: u32,
    pub link_length_m: f64,
    pub lanes: u32,
    pub speed_limit_m_s: f64,
}

impl NetworkSection {
    pub fn build(&self) -> Result<Network, CliError> {
        build_grid(self.rows, self.cols, self.link_length_m, self.lanes, self.speed_limit_m_s)
            .map_err(|e| CliError::ConfigInvalid(format!("network: {e}")))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    pub arrivals: DemandModel,
    #[serde(default)]
    pub entitlement_share: f64,
    pub duration_s: f64,
}

impl DemandSection {
    pub fn to_config(&self, seed: u64) -> DemandConfig {
        DemandConfig {
            model: self.arrivals.clone(),
            entitlement_share: self.entitlement_share,
            duration_s: self.duration_s,
            seed,
        }
    }
}

fn default_minimum_wage() -> f64 {
    15.0
}

fn default_mode() -> AllocationMode {
    AllocationMode::Market
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    /// Inline wage bands; alternative to `wage_table_csv`.
    #[serde(default)]
    pub wage_table: Option<Vec<WageBand>>,
    #[serde(default)]
    pub wage_table_csv: Option<PathBuf>,
    pub p_urgency: f64,
    #[serde(default = "default_minimum_wage")]
    pub minimum_wage: f64,
    pub population: usize,
    #[serde(default = "default_mode")]
    pub mode: AllocationMode,
    #[serde(default)]
    pub retention_fraction: f64,
    #[serde(default)]
    pub population_seed: u64,
    /// Target entitled share for a standalone `market` run.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Control threshold the deltas are looked up at.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Delay levels to price against, given directly.
    #[serde(default)]
    pub deltas: Option<Deltas>,
    /// Alternative to `deltas`: look them up in a sweep artifact.
    #[serde(default)]
    pub sweep_csv: Option<PathBuf>,
    #[serde(default)]
    pub flow_veh_h: Option<f64>,
    /// Route lengths consumers draw from; defaults to the network's routes.
    #[serde(default)]
    pub route_km: Option<Vec<f64>>,
}

impl MarketSection {
    /// Wage bands from whichever source the config used.
    pub fn resolve_wage_table(&self) -> Result<Vec<WageBand>, CliError> {
        match (&self.wage_table, &self.wage_table_csv) {
            (Some(t), None) => Ok(t.clone()),
            (None, Some(path)) => crate::io::read_wage_table(path),
            (Some(_), Some(_)) => Err(CliError::ConfigInvalid(
                "market: give either `wage_table` or `wage_table_csv`, not both".into(),
            )),
            (None, None) => Err(CliError::ConfigInvalid(
                "market: one of `wage_table` or `wage_table_csv` is required".into(),
            )),
        }
    }

    pub fn scenario(&self, p_urgency: f64) -> Result<MarketScenario, CliError> {
        let scenario = MarketScenario {
            wage_table: self.resolve_wage_table()?,
            p_urgency,
            minimum_wage: self.minimum_wage,
            population: self.population,
        };
        scenario
            .validate()
            .map_err(|e| CliError::ConfigInvalid(format!("market: {e}")))?;
        Ok(scenario)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: SweepGrid,
    /// Fixed per-entrance inflows the grid is evaluated at.
    pub flows: Vec<f64>,
}

fn default_step() -> u32 {
    1
}

fn default_t_trans() -> u32 {
    3
}

fn default_t_max() -> u32 {
    120
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepGrid {
    FixedCycle {
        t_f1: (u32, u32),
        t_f2: (u32, u32),
        #[serde(default = "default_step")]
        step: u32,
        #[serde(default = "default_t_trans")]
        t_trans: u32,
        #[serde(default = "default_true")]
        chessboard_offsets: bool,
    },
    MaxPressure {
        t_min: (u32, u32),
        t_auc: (u32, u32),
        #[serde(default = "default_step")]
        step: u32,
        #[serde(default = "default_t_max")]
        t_max: u32,
        #[serde(default = "default_t_trans")]
        t_trans: u32,
    },
    Priority {
        /// Entitled shares; omit to use 0.0, 0.1, ..., 1.0.
        #[serde(default)]
        gammas: Option<Vec<f64>>,
        #[serde(default)]
        taus: Option<Vec<f64>>,
        t_min: u32,
        t_auc: u32,
        #[serde(default = "default_t_max")]
        t_max: u32,
        #[serde(default = "default_t_trans")]
        t_trans: u32,
    },
}

impl SweepGrid {
    pub fn candidates(&self) -> Result<Vec<Candidate>, CliError> {
        let out = match self {
            SweepGrid::FixedCycle { t_f1, t_f2, step, t_trans, chessboard_offsets } => {
                fixed_cycle_grid(*t_f1, *t_f2, *step, *t_trans, *chessboard_offsets)
            }
            SweepGrid::MaxPressure { t_min, t_auc, step, t_max, t_trans } => {
                max_pressure_grid(*t_min, *t_auc, *step, *t_max, *t_trans)
            }
            SweepGrid::Priority { gammas, taus, t_min, t_auc, t_max, t_trans } => {
                let default_axis = || axis(0.0, 1.0, 0.1);
                let g = gammas.clone().unwrap_or_else(default_axis);
                let t = taus.clone().unwrap_or_else(default_axis);
                priority_grid(&g, &t, *t_min, *t_auc, *t_max, *t_trans)
            }
        };
        if out.is_empty() {
            return Err(CliError::ConfigInvalid("sweep: grid is empty".into()));
        }
        for c in &out {
            c.controller
                .validate()
                .map_err(|e| CliError::ConfigInvalid(format!("sweep: {e}")))?;
        }
        Ok(out)
    }
}

fn default_objective() -> Objective {
    Objective::TotalTravelTime
}

fn default_budget() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizeSection {
    /// Pick the best controller timing from a finished sweep.
    Timing {
        sweep_csv: PathBuf,
        #[serde(default = "default_objective")]
        objective: Objective,
    },
    /// Pick (gamma, tau) from a priority sweep, constrained against the
    /// no-prioritization reference.
    Priority {
        sweep_csv: PathBuf,
        flow_veh_h: f64,
        #[serde(default = "default_budget")]
        efficiency_budget: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityCase {
    pub name: String,
    pub p_urgency: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitySection {
    pub sweep_csv: PathBuf,
    pub optimum_json: PathBuf,
    pub trips_per_day: f64,
    pub intersections: u32,
    /// Fraction of the day's trips in each of the 24 hours.
    pub hourly_share: Vec<f64>,
    /// Network inflow each hour maps to when picking a delay response.
    pub hourly_flow_veh_h: Vec<f64>,
    #[serde(default)]
    pub retention_fraction: f64,
    pub scenarios: Vec<CityCase>,
}

fn default_interval() -> u32 {
    300
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundamentalSection {
    pub controllers: Vec<ControllerSpec>,
    #[serde(default = "default_interval")]
    pub interval_s: u32,
}

/// Parses and cross-validates a config file. Parse errors carry serde's
/// line/column; semantic errors name the offending section.
pub fn load_config(path: &Path) -> Result<(ScenarioConfig, Vec<u8>), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ScenarioConfig = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", path.display())))?;
    validate(&cfg)?;
    Ok((cfg, bytes))
}

fn validate(cfg: &ScenarioConfig) -> Result<(), CliError> {
    if cfg.version != SCHEMA_VERSION {
        return Err(CliError::ConfigInvalid(format!(
            "version {} not supported, expected {SCHEMA_VERSION}",
            cfg.version
        )));
    }
    if let Some(d) = &cfg.demand {
        d.arrivals
            .validate()
            .map_err(|e| CliError::ConfigInvalid(format!("demand: {e}")))?;
        if !(0.0..=1.0).contains(&d.entitlement_share) {
            return Err(CliError::ConfigInvalid(format!(
                "demand: entitlement_share must be in [0, 1], got {}",
                d.entitlement_share
            )));
        }
        if !(d.duration_s > 0.0) {
            return Err(CliError::ConfigInvalid("demand: duration_s must be positive".into()));
        }
    }
    if let Some(c) = &cfg.controller {
        c.validate().map_err(|e| CliError::ConfigInvalid(format!("controller: {e}")))?;
    }
    if let Some(r) = &cfg.run {
        if r.record_s == 0 {
            return Err(CliError::ConfigInvalid("run: record_s must be positive".into()));
        }
    }
    if let Some(s) = &cfg.sweep {
        if s.flows.is_empty() || s.flows.iter().any(|f| !(*f >= 0.0)) {
            return Err(CliError::ConfigInvalid(
                "sweep: flows must be a non-empty list of nonnegative rates".into(),
            ));
        }
    }
    if let Some(c) = &cfg.city {
        if c.hourly_share.len() != 24 || c.hourly_flow_veh_h.len() != 24 {
            return Err(CliError::ConfigInvalid(
                "city: hourly_share and hourly_flow_veh_h need exactly 24 entries".into(),
            ));
        }
        let total: f64 = c.hourly_share.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(CliError::ConfigInvalid(format!(
                "city: hourly_share sums to {total}, expected 1"
            )));
        }
        if c.scenarios.is_empty() {
            return Err(CliError::ConfigInvalid("city: at least one scenario is required".into()));
        }
    }
    if let Some(f) = &cfg.fundamental {
        if f.controllers.is_empty() {
            return Err(CliError::ConfigInvalid(
                "fundamental: at least one controller is required".into(),
            ));
        }
        if f.interval_s == 0 {
            return Err(CliError::ConfigInvalid("fundamental: interval_s must be positive".into()));
        }
        for c in &f.controllers {
            c.validate().map_err(|e| CliError::ConfigInvalid(format!("fundamental: {e}")))?;
        }
    }
    Ok(())
}

/// The section a command cannot run without, or a config-invalid error
/// naming it.
pub fn require<'a, T>(section: &'a Option<T>, name: &str, command: &str) -> Result<&'a T, CliError> {
    section.as_ref().ok_or_else(|| {
        CliError::ConfigInvalid(format!("missing `{name}` section required by `{command}`"))
    })
}
