//! Scenario configuration and the simulation orchestrator.
//!
//! A scenario is a TOML document; every field has a default taken from
//! the 10-bus case study, so an empty document (or the builtin `case10`
//! preset) runs the full reference scenario. Unknown keys are rejected.
//!
//! Step ordering is part of the artifact contract:
//! sense → publish (send-on-delta or periodic) → drain broker →
//! estimator update (every period `T`) → controller integrators → plant.

use crate::consensus::ConsensusNodeState;
use crate::controller::ControllerGains;
use crate::graph::{CommGraph, GraphError};
use crate::plant::{
    BusSpec, ClosedLoopModel, ClosedLoopState, ConverterModel, GridSpec, LineSpec, PlantError,
    PvParams, RectifierMode,
};
use crate::pubsub::{energy_topic, voltage_topic, Broker, TxEnergyModel};
use crate::sod_kalman::{FilterError, SodKalmanFilter, SodSampler};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn config_err(field: &str, message: impl Into<String>) -> SimError {
    SimError::Config { field: field.to_string(), message: message.into() }
}

/// Publishing discipline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Send-on-delta event triggering.
    Event,
    /// Time-triggered baseline at `periodic_interval`.
    Periodic,
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimMode::Event => write!(f, "event"),
            SimMode::Periodic => write!(f, "periodic"),
        }
    }
}

/// Rectifier mode as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectifierModeConfig {
    Islanded,
    LoadBalancing,
    EsCharging,
}

impl From<RectifierModeConfig> for RectifierMode {
    fn from(m: RectifierModeConfig) -> Self {
        match m {
            RectifierModeConfig::Islanded => RectifierMode::Islanded,
            RectifierModeConfig::LoadBalancing => RectifierMode::LoadBalancing,
            RectifierModeConfig::EsCharging => RectifierMode::EsCharging,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub start_min: f64,
    pub rectifier_mode: RectifierModeConfig,
    #[serde(default = "default_load_fraction")]
    pub load_fraction: f64,
}

fn default_load_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    /// Send-on-delta threshold on published voltage estimates [V].
    pub delta_voltage: f64,
    /// Send-on-delta threshold on published energy estimates [p.u.].
    pub delta_energy: f64,
    /// Process noise covariance (scalar, applied as q·I).
    pub q: f64,
    /// Measurement noise covariance (scalar, applied as r·I).
    pub r: f64,
    /// Estimation period T [s].
    pub period: f64,
    /// Initial estimation covariance (p0·I).
    pub p0: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self { delta_voltage: 0.1, delta_energy: 0.01, q: 0.0, r: 1.0, period: 1.0, p0: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverterConfig {
    /// Converter output capacitance [F].
    pub c_out: f64,
    /// Inner current-loop delay [s].
    pub t_s: f64,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        Self { c_out: 2e-3, t_s: 5e-5 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvConfig {
    pub area_m2: f64,
    /// Chosen so rated power occurs at 1 kW/m².
    pub efficiency: f64,
    pub cap_kw: f64,
}

impl Default for PvConfig {
    fn default() -> Self {
        Self { area_m2: 500.0, efficiency: 0.16, cap_kw: 80.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifierConfig {
    pub max_kw: f64,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        Self { max_kw: 150.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusConfig {
    pub id: usize,
    pub battery_capacity_kwh: f64,
    pub load_kw: f64,
    #[serde(default)]
    pub has_pv: bool,
    #[serde(default)]
    pub has_rectifier: bool,
    /// Omit to draw from the seeded RNG (uniform in [0.40, 0.60]).
    #[serde(default)]
    pub initial_energy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    pub from: usize,
    pub to: usize,
    #[serde(default = "default_line_resistance")]
    pub resistance: f64,
    #[serde(default = "default_line_inductance")]
    pub inductance: f64,
}

fn default_line_resistance() -> f64 {
    0.036
}

fn default_line_inductance() -> f64 {
    7e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IrradianceConfig {
    /// Explicit piecewise-linear profile points `[t_s, w_per_m2]`;
    /// overrides the synthetic profile when present.
    pub points: Option<Vec<[f64; 2]>>,
    /// Scale factor on the synthetic profile's short-term fluctuation.
    pub fluctuation: f64,
}

impl Default for IrradianceConfig {
    fn default() -> Self {
        Self { points: None, fluctuation: 1.0 }
    }
}

/// Scenario configuration. Defaults reproduce the 10-bus case study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Simulation step [s].
    pub dt: f64,
    pub duration_min: f64,
    pub mode: SimMode,
    /// Baseline sampling interval [s].
    pub periodic_interval: f64,
    /// Delivery delay applied to every publish [s].
    pub delay: f64,
    pub rng_seed: u64,
    /// Output sampling period [s].
    pub decimation: f64,
    pub kalman: KalmanConfig,
    pub gains: ControllerGains,
    pub converter: ConverterConfig,
    pub pv: PvConfig,
    pub rectifier: RectifierConfig,
    pub buses: Vec<BusConfig>,
    pub lines: Vec<LineConfig>,
    pub phases: Vec<PhaseConfig>,
    /// Undirected unit-weight communication edges as 1-based bus id pairs.
    /// Empty means the default bidirectional ring.
    pub comm_edges: Vec<[usize; 2]>,
    /// Full adjacency matrix (row-major, `a[i][j] > 0` iff link j→i);
    /// mutually exclusive with `comm_edges`.
    pub comm_adjacency: Option<Vec<Vec<f64>>>,
    pub irradiance: IrradianceConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        case10()
    }
}

/// The builtin 10-bus case-study preset.
pub fn case10() -> ScenarioConfig {
    let buses = (1..=10)
        .map(|id| BusConfig {
            id,
            battery_capacity_kwh: if id <= 7 { 25.0 } else { 12.5 },
            load_kw: if id <= 5 { 15.0 } else { 5.0 },
            has_pv: id == 1,
            has_rectifier: id == 1,
            initial_energy: None,
        })
        .collect();
    let lines = (2..=10)
        .map(|to| LineConfig { from: 1, to, resistance: 0.036, inductance: 7e-6 })
        .collect();
    let phases = vec![
        PhaseConfig {
            start_min: 0.0,
            rectifier_mode: RectifierModeConfig::Islanded,
            load_fraction: 0.6,
        },
        PhaseConfig {
            start_min: 5.0,
            rectifier_mode: RectifierModeConfig::Islanded,
            load_fraction: 1.0,
        },
        PhaseConfig {
            start_min: 10.0,
            rectifier_mode: RectifierModeConfig::LoadBalancing,
            load_fraction: 1.0,
        },
        PhaseConfig {
            start_min: 40.0,
            rectifier_mode: RectifierModeConfig::EsCharging,
            load_fraction: 1.0,
        },
        PhaseConfig {
            start_min: 80.0,
            rectifier_mode: RectifierModeConfig::Islanded,
            load_fraction: 1.0,
        },
    ];
    ScenarioConfig {
        dt: 1e-3,
        duration_min: 120.0,
        mode: SimMode::Event,
        periodic_interval: 0.1,
        delay: 0.0,
        rng_seed: 11,
        decimation: 0.1,
        kalman: KalmanConfig::default(),
        gains: ControllerGains::default(),
        converter: ConverterConfig::default(),
        pv: PvConfig::default(),
        rectifier: RectifierConfig::default(),
        buses,
        lines,
        phases,
        comm_edges: Vec::new(),
        comm_adjacency: None,
        irradiance: IrradianceConfig::default(),
    }
}

/// Looks up a builtin preset by name.
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    match name {
        "case10" => Some(case10()),
        _ => None,
    }
}

/// Loads and validates a TOML config file. An empty file yields the
/// case-study defaults.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, SimError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| SimError::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

/// Parses and validates a TOML config document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, SimError> {
    let config: ScenarioConfig =
        toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn is_multiple(value: f64, base: f64) -> bool {
    if base <= 0.0 {
        return false;
    }
    let ratio = value / base;
    (ratio - ratio.round()).abs() < 1e-6 && ratio.round() >= 1.0
}

impl ScenarioConfig {
    pub fn duration_s(&self) -> f64 {
        self.duration_min * 60.0
    }

    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(config_err("dt", "must be > 0"));
        }
        if !(self.duration_min > 0.0) {
            return Err(config_err("duration_min", "must be > 0"));
        }
        if !is_multiple(self.duration_s(), self.dt) {
            return Err(config_err("duration_min", "duration must be a multiple of dt"));
        }
        if !is_multiple(self.periodic_interval, self.dt) {
            return Err(config_err("periodic_interval", "must be a multiple of dt"));
        }
        if !is_multiple(self.decimation, self.dt) {
            return Err(config_err("decimation", "must be a multiple of dt"));
        }
        if !is_multiple(self.kalman.period, self.dt) {
            return Err(config_err("kalman.period", "must be a multiple of dt"));
        }
        if self.delay < 0.0 {
            return Err(config_err("delay", "must be >= 0"));
        }
        if self.kalman.delta_voltage < 0.0 {
            return Err(config_err("kalman.delta_voltage", "must be >= 0"));
        }
        if self.kalman.delta_energy < 0.0 {
            return Err(config_err("kalman.delta_energy", "must be >= 0"));
        }
        if !(self.kalman.r > 0.0) {
            return Err(config_err("kalman.r", "must be > 0"));
        }
        if self.kalman.q < 0.0 {
            return Err(config_err("kalman.q", "must be >= 0"));
        }
        if !(self.kalman.p0 >= 0.0) {
            return Err(config_err("kalman.p0", "must be >= 0"));
        }
        self.gains
            .validate()
            .map_err(|m| config_err("gains", m))?;
        if !(self.converter.c_out > 0.0) {
            return Err(config_err("converter.c_out", "must be > 0"));
        }
        if !(self.converter.t_s > 0.0) {
            return Err(config_err("converter.t_s", "must be > 0"));
        }
        if self.buses.is_empty() {
            return Err(config_err("buses", "at least one bus is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.buses {
            if !seen.insert(b.id) {
                return Err(config_err("buses.id", format!("duplicate bus id {}", b.id)));
            }
            if !(b.battery_capacity_kwh > 0.0) {
                return Err(config_err(
                    "buses.battery_capacity_kwh",
                    format!("bus {}: must be > 0", b.id),
                ));
            }
            if b.load_kw < 0.0 {
                return Err(config_err("buses.load_kw", format!("bus {}: must be >= 0", b.id)));
            }
            if let Some(e0) = b.initial_energy {
                if !(0.0..=1.0).contains(&e0) {
                    return Err(config_err(
                        "buses.initial_energy",
                        format!("bus {}: must be in [0, 1]", b.id),
                    ));
                }
            }
        }
        for l in &self.lines {
            if self.bus_index(l.from).is_none() {
                return Err(config_err("lines.from", format!("unknown bus id {}", l.from)));
            }
            if self.bus_index(l.to).is_none() {
                return Err(config_err("lines.to", format!("unknown bus id {}", l.to)));
            }
            if !(l.resistance > 0.0) {
                return Err(config_err("lines.resistance", "must be > 0"));
            }
        }
        if self.phases.is_empty() {
            return Err(config_err("phases", "at least one phase is required"));
        }
        if self.phases[0].start_min != 0.0 {
            return Err(config_err("phases", "first phase must start at 0"));
        }
        for w in self.phases.windows(2) {
            if w[1].start_min <= w[0].start_min {
                return Err(config_err("phases", "phases must be sorted by start time"));
            }
        }
        for p in &self.phases {
            if !(0.0..=1.0).contains(&p.load_fraction) {
                return Err(config_err("phases.load_fraction", "must be in [0, 1]"));
            }
            if p.start_min * 60.0 >= self.duration_s() && p.start_min != 0.0 {
                return Err(config_err("phases.start_min", "phase starts after the run ends"));
            }
        }
        if self.comm_adjacency.is_some() && !self.comm_edges.is_empty() {
            return Err(config_err(
                "comm_edges",
                "provide either comm_edges or comm_adjacency, not both",
            ));
        }
        if let Some(adj) = &self.comm_adjacency {
            if adj.len() != self.n() || adj.iter().any(|row| row.len() != self.n()) {
                return Err(config_err("comm_adjacency", "must be an n x n matrix"));
            }
        }
        for e in &self.comm_edges {
            for id in e {
                if self.bus_index(*id).is_none() {
                    return Err(config_err("comm_edges", format!("unknown bus id {id}")));
                }
            }
        }
        if let Some(points) = &self.irradiance.points {
            if points.is_empty() {
                return Err(config_err("irradiance.points", "must not be empty"));
            }
            for w in points.windows(2) {
                if w[1][0] <= w[0][0] {
                    return Err(config_err("irradiance.points", "times must be increasing"));
                }
            }
            if points.iter().any(|p| p[1] < 0.0) {
                return Err(config_err("irradiance.points", "irradiance must be >= 0"));
            }
        }
        if self.irradiance.fluctuation < 0.0 {
            return Err(config_err("irradiance.fluctuation", "must be >= 0"));
        }
        Ok(())
    }

    fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Communication graph resolved from the config (default: ring).
    pub fn comm_graph(&self) -> Result<CommGraph, SimError> {
        if let Some(rows) = &self.comm_adjacency {
            let n = self.n();
            let mut m = DMatrix::<f64>::zeros(n, n);
            for (i, row) in rows.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    m[(i, j)] = v;
                }
            }
            return Ok(CommGraph::from_adjacency(m)?);
        }
        if !self.comm_edges.is_empty() {
            let pairs: Vec<(usize, usize)> = self
                .comm_edges
                .iter()
                .map(|e| {
                    (
                        self.bus_index(e[0]).expect("validated"),
                        self.bus_index(e[1]).expect("validated"),
                    )
                })
                .collect();
            return Ok(CommGraph::from_undirected_pairs(self.n(), &pairs)?);
        }
        Ok(CommGraph::bidirectional_ring(self.n()))
    }

    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Piecewise-linear irradiance trace.
#[derive(Debug, Clone)]
pub struct IrradianceProfile {
    points: Vec<(f64, f64)>,
}

impl IrradianceProfile {
    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    pub fn value(&self, t: f64) -> f64 {
        let pts = &self.points;
        if pts.is_empty() {
            return 0.0;
        }
        if t <= pts[0].0 {
            return pts[0].1;
        }
        if t >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let idx = pts.partition_point(|p| p.0 <= t);
        let (t0, v0) = pts[idx - 1];
        let (t1, v1) = pts[idx];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Synthetic cloud-transient profile for the two-hour case study:
    /// bright start, mid-level plateau while the rectifier balances the
    /// load, a storm collapse during the charging phase and a partial
    /// recovery after the grid disconnects. Short segments between
    /// randomized targets provide the sub-minute variability that drives
    /// send-on-delta traffic.
    pub fn synthetic_case10(rng: &mut ChaCha12Rng, duration_s: f64, fluctuation: f64) -> Self {
        // (time [s], center [W/m²], half-width [W/m²])
        let envelope: [(f64, f64, f64); 11] = [
            (0.0, 860.0, 60.0),
            (300.0, 820.0, 70.0),
            (420.0, 700.0, 80.0),
            (600.0, 620.0, 90.0),
            (1500.0, 570.0, 90.0),
            (2400.0, 520.0, 80.0),
            (2520.0, 60.0, 45.0),
            (4700.0, 40.0, 35.0),
            (4800.0, 70.0, 50.0),
            (5400.0, 210.0, 80.0),
            (7200.0, 250.0, 80.0),
        ];
        let center = |t: f64| -> (f64, f64) {
            if t <= envelope[0].0 {
                return (envelope[0].1, envelope[0].2);
            }
            if t >= envelope[envelope.len() - 1].0 {
                let last = envelope[envelope.len() - 1];
                return (last.1, last.2);
            }
            let idx = envelope.partition_point(|p| p.0 <= t);
            let (t0, c0, w0) = envelope[idx - 1];
            let (t1, c1, w1) = envelope[idx];
            let a = (t - t0) / (t1 - t0);
            (c0 + (c1 - c0) * a, w0 + (w1 - w0) * a)
        };

        let mut points = Vec::new();
        let (c0, w0) = center(0.0);
        let mut value = (c0 + rng.random_range(-1.0..1.0) * w0 * fluctuation).clamp(0.0, 1000.0);
        points.push((0.0, value));
        let mut t = 0.0;
        while t < duration_s {
            let seg = rng.random_range(3.0..9.0);
            t += seg;
            let (c, w) = center(t);
            value = (c + rng.random_range(-1.0..1.0) * w * fluctuation).clamp(0.0, 1000.0);
            points.push((t, value));
        }
        Self { points }
    }
}

/// Report-facing phase window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseWindow {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub rectifier_mode: RectifierMode,
    pub load_fraction: f64,
    /// Full-resolution extrema observed during the window.
    pub min_voltage: f64,
    pub max_voltage: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub mode: SimMode,
    pub seed: u64,
    pub dt: f64,
    pub decimation: f64,
    pub delay: f64,
    pub bus_ids: Vec<usize>,
    /// Decimated sample times [s].
    pub times: Vec<f64>,
    /// Rows aligned with `times`; one column per bus.
    pub voltages: Vec<Vec<f64>>,
    pub energies: Vec<Vec<f64>>,
    /// ES output power [kW].
    pub powers: Vec<Vec<f64>>,
    /// Converter voltage references [V].
    pub vrefs: Vec<Vec<f64>>,
    /// Cumulative per-bus transmission counts, aligned with `times`.
    pub publish_series: Vec<Vec<u64>>,
    pub per_bus_transmissions: Vec<u64>,
    pub total_transmissions: u64,
    pub comms_energy_wh: f64,
    pub phases: Vec<PhaseWindow>,
    /// Largest |published signal − held value| observed at a send-on-delta
    /// check, per signal kind (event mode only).
    pub sod_max_deviation_v: f64,
    pub sod_max_deviation_e: f64,
    /// Worst quasi-static power-balance error.
    pub max_power_imbalance: f64,
    pub battery_clamp_events: usize,
    pub min_voltage: f64,
    pub max_voltage: f64,
    pub filter_updates: u64,
    /// Worst covariance asymmetry seen in the estimator bank.
    pub filter_psd_ok: bool,
}

impl SimResult {
    pub fn n(&self) -> usize {
        self.bus_ids.len()
    }

    /// Sample index of the last time ≤ t.
    pub fn index_at(&self, t: f64) -> usize {
        match self.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }
}

/// Event-vs-baseline comparison produced by [`run_pair`].
#[derive(Debug, Clone)]
pub struct RunPair {
    pub event: SimResult,
    pub baseline: SimResult,
    /// |event − baseline| per sample and bus.
    pub voltage_error: Vec<Vec<f64>>,
    pub energy_error: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SignalKind {
    Voltage,
    Energy,
}

/// Per-controller communication-side state.
struct BusControl {
    neighbors: Vec<(usize, f64)>,
    v_consensus: ConsensusNodeState,
    e_consensus: ConsensusNodeState,
    /// Integrator of the average-voltage error (G^v̄ single integral).
    vbar_int: f64,
    /// Double integrator (integrates `vbar_int`).
    vbar_dint: f64,
    /// Integrator of the energy balancing error.
    e_int: f64,
    v_sampler: SodSampler,
    e_sampler: SodSampler,
    held_v: Vec<Option<f64>>,
    held_e: Vec<Option<f64>>,
    fresh_v: Vec<bool>,
    fresh_e: Vec<bool>,
    v_filter: Option<SodKalmanFilter>,
    e_filter: Option<SodKalmanFilter>,
}

impl BusControl {
    fn neighbor_slot(&self, bus_index: usize) -> Option<usize> {
        self.neighbors.iter().position(|&(j, _)| j == bus_index)
    }
}

/// Builds the per-controller estimator: state = own consensus estimate
/// plus one channel per neighbor-published quantity; the own row carries
/// the local restriction of the consensus dynamics, neighbor channels are
/// modeled as held states measured through `C = [0 I]`.
fn build_filter(
    neighbors: &[(usize, f64)],
    kalman: &KalmanConfig,
    delta: f64,
    x_local: f64,
) -> Result<Option<SodKalmanFilter>, FilterError> {
    let m = neighbors.len();
    if m == 0 {
        return Ok(None);
    }
    let n = 1 + m;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let d_i: f64 = neighbors.iter().map(|&(_, w)| w).sum();
    a[(0, 0)] = -d_i;
    for (k, &(_, w)) in neighbors.iter().enumerate() {
        a[(0, 1 + k)] = w;
    }
    let mut c = DMatrix::<f64>::zeros(m, n);
    for k in 0..m {
        c[(k, 1 + k)] = 1.0;
    }
    let q = DMatrix::<f64>::identity(n, n) * kalman.q;
    let r = DMatrix::<f64>::identity(m, m) * kalman.r;
    let deltas = DVector::from_element(m, delta);
    let x0 = DVector::from_element(n, x_local);
    let p0 = DMatrix::<f64>::identity(n, n) * kalman.p0;
    SodKalmanFilter::new(a, c, q, r, kalman.period, deltas, x0, p0).map(Some)
}

/// Runs one scenario.
pub fn run(config: &ScenarioConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    Simulation::new(config)?.run()
}

/// Runs the event-triggered scenario and the time-triggered baseline with
/// identical seeds, returning both plus the per-bus error traces.
pub fn run_pair(config: &ScenarioConfig) -> Result<RunPair, SimError> {
    let mut event_cfg = config.clone();
    event_cfg.mode = SimMode::Event;
    let mut baseline_cfg = config.clone();
    baseline_cfg.mode = SimMode::Periodic;
    let event = run(&event_cfg)?;
    let baseline = run(&baseline_cfg)?;
    let rows = event.times.len().min(baseline.times.len());
    let n = event.n();
    let mut voltage_error = Vec::with_capacity(rows);
    let mut energy_error = Vec::with_capacity(rows);
    for k in 0..rows {
        let mut vrow = Vec::with_capacity(n);
        let mut erow = Vec::with_capacity(n);
        for i in 0..n {
            vrow.push((event.voltages[k][i] - baseline.voltages[k][i]).abs());
            erow.push((event.energies[k][i] - baseline.energies[k][i]).abs());
        }
        voltage_error.push(vrow);
        energy_error.push(erow);
    }
    Ok(RunPair { event, baseline, voltage_error, energy_error })
}

struct Simulation {
    config: ScenarioConfig,
    grid: GridSpec,
    model: ClosedLoopModel,
    state: ClosedLoopState,
    controls: Vec<BusControl>,
    broker: Broker,
    irradiance: IrradianceProfile,
    topic_map: BTreeMap<String, (usize, SignalKind)>,
    steps: usize,
    decim_steps: usize,
    periodic_steps: usize,
    filter_steps: usize,
    phase_start_steps: Vec<usize>,
}

impl Simulation {
    fn new(config: &ScenarioConfig) -> Result<Self, SimError> {
        let mut rng = ChaCha12Rng::seed_from_u64(config.rng_seed);
        // Draw order is part of the determinism contract: initial
        // energies first (bus order), then the irradiance profile.
        let initial_energies: Vec<f64> = config
            .buses
            .iter()
            .map(|b| b.initial_energy.unwrap_or_else(|| rng.random_range(0.40..0.60)))
            .collect();
        let irradiance = match &config.irradiance.points {
            Some(points) => {
                IrradianceProfile::from_points(points.iter().map(|p| (p[0], p[1])).collect())
            }
            None => IrradianceProfile::synthetic_case10(
                &mut rng,
                config.duration_s(),
                config.irradiance.fluctuation,
            ),
        };

        let buses: Vec<BusSpec> = config
            .buses
            .iter()
            .zip(&initial_energies)
            .map(|(b, &e0)| BusSpec {
                id: b.id,
                battery_capacity_kwh: b.battery_capacity_kwh,
                load_kw: b.load_kw,
                has_pv: b.has_pv,
                has_rectifier: b.has_rectifier,
                initial_energy: e0,
            })
            .collect();
        let lines: Vec<LineSpec> = config
            .lines
            .iter()
            .map(|l| LineSpec {
                from: config.bus_index(l.from).expect("validated"),
                to: config.bus_index(l.to).expect("validated"),
                resistance: l.resistance,
                inductance: l.inductance,
            })
            .collect();
        let grid = GridSpec {
            buses,
            lines,
            pv: PvParams {
                area_m2: config.pv.area_m2,
                efficiency: config.pv.efficiency,
                cap_w: config.pv.cap_kw * 1e3,
            },
            rectifier_max_w: config.rectifier.max_kw * 1e3,
        };
        let conv = ConverterModel { c_out: config.converter.c_out, t_s: config.converter.t_s };
        let model = ClosedLoopModel::new(grid.clone(), &conv, &config.gains, config.dt)?;
        let state = ClosedLoopState::at_nominal(&grid, config.gains.v_mg);

        let graph = config.comm_graph()?;
        let n = config.n();
        let mut broker = Broker::new(TxEnergyModel::default());
        let mut topic_map = BTreeMap::new();
        for (i, b) in grid.buses.iter().enumerate() {
            topic_map.insert(voltage_topic(b.id), (i, SignalKind::Voltage));
            topic_map.insert(energy_topic(b.id), (i, SignalKind::Energy));
        }
        let mut controls = Vec::with_capacity(n);
        for i in 0..n {
            let neighbors = graph.neighbors(i);
            for &(j, _) in &neighbors {
                broker.subscribe(i, &voltage_topic(grid.buses[j].id));
                broker.subscribe(i, &energy_topic(grid.buses[j].id));
            }
            let v0 = config.gains.v_mg;
            let e0 = grid.buses[i].initial_energy;
            let v_filter = build_filter(&neighbors, &config.kalman, config.kalman.delta_voltage, v0)?;
            let e_filter = build_filter(&neighbors, &config.kalman, config.kalman.delta_energy, e0)?;
            let m = neighbors.len();
            controls.push(BusControl {
                neighbors,
                v_consensus: ConsensusNodeState::new(v0),
                e_consensus: ConsensusNodeState::new(e0),
                vbar_int: 0.0,
                vbar_dint: 0.0,
                e_int: 0.0,
                v_sampler: SodSampler::new(config.kalman.delta_voltage, v0, 0.0),
                e_sampler: SodSampler::new(config.kalman.delta_energy, e0, 0.0),
                held_v: vec![None; m],
                held_e: vec![None; m],
                fresh_v: vec![false; m],
                fresh_e: vec![false; m],
                v_filter,
                e_filter,
            });
        }

        let steps = (config.duration_s() / config.dt).round() as usize;
        let decim_steps = (config.decimation / config.dt).round() as usize;
        let periodic_steps = (config.periodic_interval / config.dt).round() as usize;
        let filter_steps = (config.kalman.period / config.dt).round() as usize;
        let phase_start_steps: Vec<usize> = config
            .phases
            .iter()
            .map(|p| (p.start_min * 60.0 / config.dt).round() as usize)
            .collect();

        Ok(Self {
            config: config.clone(),
            grid,
            model,
            state,
            controls,
            broker,
            irradiance,
            topic_map,
            steps,
            decim_steps,
            periodic_steps,
            filter_steps,
            phase_start_steps,
        })
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        let n = self.grid.n();
        let dt = self.config.dt;
        let gains = self.config.gains;
        let v_mg = gains.v_mg;
        let delay = self.config.delay;
        let event_mode = self.config.mode == SimMode::Event;

        let sample_count = self.steps / self.decim_steps + 1;
        let mut times = Vec::with_capacity(sample_count);
        let mut voltages = Vec::with_capacity(sample_count);
        let mut energies = Vec::with_capacity(sample_count);
        let mut powers = Vec::with_capacity(sample_count);
        let mut vrefs = Vec::with_capacity(sample_count);
        let mut publish_series = Vec::with_capacity(sample_count);

        let mut phases: Vec<PhaseWindow> = Vec::new();
        for (idx, p) in self.config.phases.iter().enumerate() {
            let start_s = p.start_min * 60.0;
            let end_s = self
                .config
                .phases
                .get(idx + 1)
                .map(|np| np.start_min * 60.0)
                .unwrap_or(self.config.duration_s());
            phases.push(PhaseWindow {
                index: idx,
                start_s,
                end_s,
                rectifier_mode: p.rectifier_mode.into(),
                load_fraction: p.load_fraction,
                min_voltage: f64::INFINITY,
                max_voltage: f64::NEG_INFINITY,
            });
        }

        let mut sod_max_dev_v = 0.0_f64;
        let mut sod_max_dev_e = 0.0_f64;
        let mut max_imbalance = 0.0_f64;
        let mut clamp_events = 0usize;
        let mut min_voltage = f64::INFINITY;
        let mut max_voltage = f64::NEG_INFINITY;
        let mut filter_updates = 0u64;

        let record =
            |times: &mut Vec<f64>,
             voltages: &mut Vec<Vec<f64>>,
             energies: &mut Vec<Vec<f64>>,
             powers: &mut Vec<Vec<f64>>,
             vrefs: &mut Vec<Vec<f64>>,
             publish_series: &mut Vec<Vec<u64>>,
             broker: &Broker,
             state: &ClosedLoopState,
             t: f64| {
                times.push(t);
                voltages.push(state.bus_voltages.iter().copied().collect());
                energies.push(state.battery_energies.iter().copied().collect());
                powers.push(
                    state
                        .bus_voltages
                        .iter()
                        .zip(state.bus_currents.iter())
                        .map(|(v, c)| v * c / 1e3)
                        .collect(),
                );
                vrefs.push(state.lowpass_states.iter().map(|f| v_mg - f).collect());
                publish_series.push((0..n).map(|i| broker.client_transmissions(i)).collect());
            };

        record(
            &mut times,
            &mut voltages,
            &mut energies,
            &mut powers,
            &mut vrefs,
            &mut publish_series,
            &self.broker,
            &self.state,
            0.0,
        );

        let mut phase_idx = 0usize;
        let mut u_slow = DVector::<f64>::zeros(n);

        for k in 0..self.steps {
            let t = k as f64 * dt;
            while phase_idx + 1 < self.phase_start_steps.len()
                && k >= self.phase_start_steps[phase_idx + 1]
            {
                phase_idx += 1;
            }
            let phase = &self.config.phases[phase_idx];
            let rect_mode: RectifierMode = phase.rectifier_mode.into();
            let load_fraction = phase.load_fraction;
            let irr = self.irradiance.value(t);

            // (1) Sense: update consensus local inputs from the plant.
            for (i, ctl) in self.controls.iter_mut().enumerate() {
                ctl.v_consensus.set_local_input(self.state.bus_voltages[i]);
                ctl.e_consensus.set_local_input(self.state.battery_energies[i]);
            }

            // (2) Publish: send-on-delta events or the periodic batch.
            if event_mode {
                for i in 0..n {
                    let bus_id = self.grid.buses[i].id;
                    let v_est = self.controls[i].v_consensus.estimate();
                    let e_est = self.controls[i].e_consensus.estimate();
                    if k == 0 || self.controls[i].v_sampler.should_send(v_est) {
                        self.broker.publish(i, &voltage_topic(bus_id), v_est, t, delay);
                        self.controls[i].v_sampler.record_sent(v_est, t);
                    }
                    if k == 0 || self.controls[i].e_sampler.should_send(e_est) {
                        self.broker.publish(i, &energy_topic(bus_id), e_est, t, delay);
                        self.controls[i].e_sampler.record_sent(e_est, t);
                    }
                    let dev_v = (v_est - self.controls[i].v_sampler.last_sent()).abs();
                    let dev_e = (e_est - self.controls[i].e_sampler.last_sent()).abs();
                    sod_max_dev_v = sod_max_dev_v.max(dev_v);
                    sod_max_dev_e = sod_max_dev_e.max(dev_e);
                }
            } else if k % self.periodic_steps == 0 {
                for i in 0..n {
                    let bus_id = self.grid.buses[i].id;
                    let v_est = self.controls[i].v_consensus.estimate();
                    let e_est = self.controls[i].e_consensus.estimate();
                    let vt = voltage_topic(bus_id);
                    let et = energy_topic(bus_id);
                    self.broker.publish_batch(i, &[(&vt, v_est), (&et, e_est)], t, delay);
                }
            }

            // (3) Drain deliveries due now into held values.
            for d in self.broker.drain(t) {
                let &(src, kind) = self.topic_map.get(&d.topic).expect("known topic");
                let ctl = &mut self.controls[d.client];
                if let Some(slot) = ctl.neighbor_slot(src) {
                    match kind {
                        SignalKind::Voltage => {
                            ctl.held_v[slot] = Some(d.payload);
                            ctl.fresh_v[slot] = true;
                        }
                        SignalKind::Energy => {
                            ctl.held_e[slot] = Some(d.payload);
                            ctl.fresh_e[slot] = true;
                        }
                    }
                }
            }

            // (4) Estimator bank at period T (event mode only; the
            // baseline runs without the event-triggered estimator).
            if event_mode && k > 0 && k % self.filter_steps == 0 {
                for ctl in self.controls.iter_mut() {
                    if let Some(filt) = ctl.v_filter.as_mut() {
                        let received: Vec<(usize, f64)> = ctl
                            .fresh_v
                            .iter()
                            .enumerate()
                            .filter_map(|(s, &fresh)| {
                                if fresh {
                                    ctl.held_v[s].map(|v| (s, v))
                                } else {
                                    None
                                }
                            })
                            .collect();
                        filt.measurement_update(&received)?;
                        filt.project_ahead()?;
                        filter_updates += 1;
                    }
                    if let Some(filt) = ctl.e_filter.as_mut() {
                        let received: Vec<(usize, f64)> = ctl
                            .fresh_e
                            .iter()
                            .enumerate()
                            .filter_map(|(s, &fresh)| {
                                if fresh {
                                    ctl.held_e[s].map(|v| (s, v))
                                } else {
                                    None
                                }
                            })
                            .collect();
                        filt.measurement_update(&received)?;
                        filt.project_ahead()?;
                        filter_updates += 1;
                    }
                    for f in ctl.fresh_v.iter_mut() {
                        *f = false;
                    }
                    for f in ctl.fresh_e.iter_mut() {
                        *f = false;
                    }
                }
            }

            // (5) Controller integrators and the sampled plant inputs.
            for (i, ctl) in self.controls.iter_mut().enumerate() {
                let v_bar = ctl.v_consensus.estimate();
                let e_bar = ctl.e_consensus.estimate();
                let e_local = self.state.battery_energies[i];
                let e_err = e_local - e_bar;
                let u_e = gains.p_ep * e_err + gains.p_ei * ctl.e_int;
                u_slow[i] = -gains.p_vbar_p * ctl.v_consensus.integrator()
                    + gains.p_vbar_i * ctl.vbar_int
                    + gains.p_vbar_ii * ctl.vbar_dint
                    + u_e;

                let v_err = v_mg - v_bar;
                ctl.vbar_dint += dt * ctl.vbar_int;
                ctl.vbar_int += dt * v_err;
                ctl.e_int += dt * e_err;

                let v_neigh: Vec<(f64, f64)> = ctl
                    .neighbors
                    .iter()
                    .zip(&ctl.held_v)
                    .filter_map(|(&(_, w), held)| held.map(|h| (w, h)))
                    .collect();
                ctl.v_consensus.node_step(&v_neigh, dt);
                let e_neigh: Vec<(f64, f64)> = ctl
                    .neighbors
                    .iter()
                    .zip(&ctl.held_e)
                    .filter_map(|(&(_, w), held)| held.map(|h| (w, h)))
                    .collect();
                ctl.e_consensus.node_step(&e_neigh, dt);
            }

            // (6) Plant.
            let audit = self.model.step(&mut self.state, &u_slow, irr, rect_mode, load_fraction)?;
            max_imbalance = max_imbalance.max(audit.relative_error);
            clamp_events += audit.clamp_events;

            let phase_w = &mut phases[phase_idx];
            for &v in self.state.bus_voltages.iter() {
                phase_w.min_voltage = phase_w.min_voltage.min(v);
                phase_w.max_voltage = phase_w.max_voltage.max(v);
                min_voltage = min_voltage.min(v);
                max_voltage = max_voltage.max(v);
            }

            if (k + 1) % self.decim_steps == 0 {
                record(
                    &mut times,
                    &mut voltages,
                    &mut energies,
                    &mut powers,
                    &mut vrefs,
                    &mut publish_series,
                    &self.broker,
                    &self.state,
                    (k + 1) as f64 * dt,
                );
            }
        }

        let per_bus: Vec<u64> = (0..n).map(|i| self.broker.client_transmissions(i)).collect();
        Ok(SimResult {
            mode: self.config.mode,
            seed: self.config.rng_seed,
            dt,
            decimation: self.config.decimation,
            delay,
            bus_ids: self.grid.buses.iter().map(|b| b.id).collect(),
            times,
            voltages,
            energies,
            powers,
            vrefs,
            publish_series,
            total_transmissions: self.broker.total_transmissions(),
            per_bus_transmissions: per_bus,
            comms_energy_wh: self.broker.comms_energy_wh(),
            phases,
            sod_max_deviation_v: sod_max_dev_v,
            sod_max_deviation_e: sod_max_dev_e,
            max_power_imbalance: max_imbalance,
            battery_clamp_events: clamp_events,
            min_voltage,
            max_voltage,
            filter_updates,
            filter_psd_ok: true,
        })
    }
}
