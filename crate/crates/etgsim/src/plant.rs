//! Electrical model of the DC microgrid: converter voltage loops, bus
//! admittance network, constant-power loads, PV and rectifier injections,
//! and first-order battery energy dynamics.
//!
//! Two steppers are provided, both exact zero-order-hold discretizations
//! of the underlying linear ODEs (the per-step matrices come from one
//! matrix exponential computed at build time):
//!
//! * [`NetworkModel`] advances the converter loops against externally
//!   supplied voltage references held over the step.
//! * [`ClosedLoopModel`] additionally realizes the droop law, its low-pass
//!   filter and the proportional part of the average-voltage regulator
//!   inside the continuous block, taking only the slow sampled controller
//!   signals as inputs. The high droop loop gain makes this split
//!   necessary: computing the droop reference from sampled voltages at the
//!   millisecond step is unstable, while the underlying continuous loop is
//!   well damped.

use crate::controller::ControllerGains;
use crate::linalg::zoh_discretize;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("protection trip: bus {bus} at {voltage:.1} V (t = {time:.3} s)")]
    ProtectionTrip { bus: usize, voltage: f64, time: f64 },
    #[error("line references bus {index} but the grid has {n} buses")]
    LineOutOfRange { index: usize, n: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Per-bus static description.
#[derive(Debug, Clone, PartialEq)]
pub struct BusSpec {
    pub id: usize,
    pub battery_capacity_kwh: f64,
    pub load_kw: f64,
    pub has_pv: bool,
    pub has_rectifier: bool,
    /// Initial per-unit battery energy.
    pub initial_energy: f64,
}

/// DC line between two buses.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    pub resistance: f64,
    /// Kept for completeness; the algebraic network solve neglects it
    /// (L/R is well below the simulation step).
    pub inductance: f64,
}

/// Averaged DC-DC converter model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConverterModel {
    /// Output capacitance [F].
    pub c_out: f64,
    /// Switching-period delay of the inner current loop [s].
    pub t_s: f64,
}

/// PV array parameters shared by every PV-equipped bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvParams {
    pub area_m2: f64,
    pub efficiency: f64,
    pub cap_w: f64,
}

/// Grid-tie rectifier operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectifierMode {
    Islanded,
    LoadBalancing,
    EsCharging,
}

/// Static description of the whole microgrid.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
    pub pv: PvParams,
    pub rectifier_max_w: f64,
}

impl GridSpec {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let n = self.n();
        for b in &self.buses {
            if !(b.battery_capacity_kwh > 0.0) {
                return Err(PlantError::InvalidSpec(format!(
                    "bus {}: battery_capacity_kwh must be > 0",
                    b.id
                )));
            }
            if b.load_kw < 0.0 {
                return Err(PlantError::InvalidSpec(format!(
                    "bus {}: load_kw must be >= 0",
                    b.id
                )));
            }
            if !(0.0..=1.0).contains(&b.initial_energy) {
                return Err(PlantError::InvalidSpec(format!(
                    "bus {}: initial_energy must be in [0, 1]",
                    b.id
                )));
            }
        }
        for l in &self.lines {
            if l.from >= n {
                return Err(PlantError::LineOutOfRange { index: l.from, n });
            }
            if l.to >= n {
                return Err(PlantError::LineOutOfRange { index: l.to, n });
            }
            if !(l.resistance > 0.0) {
                return Err(PlantError::InvalidSpec(format!(
                    "line {}-{}: resistance must be > 0",
                    l.from, l.to
                )));
            }
        }
        Ok(())
    }

    pub fn total_load_w(&self, load_fraction: f64) -> f64 {
        self.buses.iter().map(|b| b.load_kw * 1e3 * load_fraction).sum()
    }

    pub fn total_pv_w(&self, irradiance: f64) -> f64 {
        self.buses
            .iter()
            .filter(|b| b.has_pv)
            .map(|_| pv_power(irradiance, &self.pv))
            .sum()
    }
}

/// PV output power [W]: capped MPPT abstraction `min(η·A·G, cap)`.
pub fn pv_power(irradiance: f64, pv: &PvParams) -> f64 {
    (pv.efficiency * pv.area_m2 * irradiance).min(pv.cap_w).max(0.0)
}

/// Rectifier injection [W] for a given operating mode.
pub fn rectifier_power(
    mode: RectifierMode,
    total_load_w: f64,
    total_pv_w: f64,
    max_w: f64,
) -> f64 {
    match mode {
        RectifierMode::Islanded => 0.0,
        RectifierMode::LoadBalancing => (total_load_w - total_pv_w).clamp(0.0, max_w),
        RectifierMode::EsCharging => max_w,
    }
}

/// Standard nodal admittance assembly from line conductances; duplicate
/// lines between the same pair sum.
pub fn build_admittance(n: usize, lines: &[LineSpec]) -> Result<DMatrix<f64>, PlantError> {
    let mut y = DMatrix::<f64>::zeros(n, n);
    for l in lines {
        if l.from >= n {
            return Err(PlantError::LineOutOfRange { index: l.from, n });
        }
        if l.to >= n {
            return Err(PlantError::LineOutOfRange { index: l.to, n });
        }
        let g = 1.0 / l.resistance;
        y[(l.from, l.from)] += g;
        y[(l.to, l.to)] += g;
        y[(l.from, l.to)] -= g;
        y[(l.to, l.from)] -= g;
    }
    Ok(y)
}

/// One step of the first-order battery energy model
/// `ė = −v·i / e_max`, clamped to `[0, 1]`. Returns the new level and
/// whether the clamp engaged.
pub fn battery_step(e: f64, v: f64, i: f64, e_max_kwh: f64, dt: f64) -> (f64, bool) {
    let e_new = e - dt * v * i / (e_max_kwh * JOULES_PER_KWH);
    let clamped = e_new.clamp(0.0, 1.0);
    (clamped, clamped != e_new)
}

/// Per-bus current injections [A] from PV, rectifier and constant-power
/// loads: `i = (p_pv + p_rect − p_load) / v`.
pub fn injections(
    voltages: &DVector<f64>,
    spec: &GridSpec,
    load_fraction: f64,
    irradiance: f64,
    mode: RectifierMode,
    v_mg: f64,
    time: f64,
) -> Result<DVector<f64>, PlantError> {
    let n = spec.n();
    if voltages.len() != n {
        return Err(PlantError::Dimension(format!(
            "{} voltages for {n} buses",
            voltages.len()
        )));
    }
    for (i, &v) in voltages.iter().enumerate() {
        if v < 0.5 * v_mg {
            return Err(PlantError::ProtectionTrip { bus: i, voltage: v, time });
        }
    }
    let total_load = spec.total_load_w(load_fraction);
    let total_pv = spec.total_pv_w(irradiance);
    let rect_total = rectifier_power(mode, total_load, total_pv, spec.rectifier_max_w);
    let rect_buses = spec.buses.iter().filter(|b| b.has_rectifier).count().max(1);
    let mut inj = DVector::<f64>::zeros(n);
    for (i, b) in spec.buses.iter().enumerate() {
        let mut p = -b.load_kw * 1e3 * load_fraction;
        if b.has_pv {
            p += pv_power(irradiance, &spec.pv);
        }
        if b.has_rectifier {
            p += rect_total / rect_buses as f64;
        }
        inj[i] = p / voltages[i];
    }
    Ok(inj)
}

/// Electrical state advanced by [`NetworkModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    /// Voltage-PI integrator per bus (converter inner state).
    pub pi_integrators: DVector<f64>,
    /// Converter output currents [A].
    pub bus_currents: DVector<f64>,
    /// Bus voltages [V].
    pub bus_voltages: DVector<f64>,
    /// Battery per-unit energies.
    pub battery_energies: DVector<f64>,
    pub time: f64,
}

impl PlantState {
    pub fn at_nominal(spec: &GridSpec, v_mg: f64) -> Self {
        let n = spec.n();
        Self {
            pi_integrators: DVector::zeros(n),
            bus_currents: DVector::zeros(n),
            bus_voltages: DVector::from_element(n, v_mg),
            battery_energies: DVector::from_iterator(
                n,
                spec.buses.iter().map(|b| b.initial_energy),
            ),
            time: 0.0,
        }
    }
}

/// Single-bus closed voltage loop (PI + current lag + output capacitor)
/// discretized exactly; inputs are the voltage reference and the net
/// external current drawn from the bus node.
#[derive(Debug, Clone)]
pub struct ConverterLoop {
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
}

/// States of one [`ConverterLoop`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConverterInnerState {
    pub pi_integrator: f64,
    pub current: f64,
    pub voltage: f64,
}

impl ConverterLoop {
    pub fn new(conv: &ConverterModel, gains: &ControllerGains, dt: f64) -> Self {
        // States [g, c, v]; inputs [v_ref, i_ext].
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0,
                0.0,
                -1.0,
                gains.p_vi / conv.t_s,
                -1.0 / conv.t_s,
                -gains.p_vp / conv.t_s,
                0.0,
                1.0 / conv.c_out,
                0.0,
            ],
        );
        let b = DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 0.0, gains.p_vp / conv.t_s, 0.0, 0.0, 1.0 / conv.c_out],
        );
        let (phi, gamma) = zoh_discretize(&a, &b, dt);
        Self { phi, gamma }
    }

    pub fn step(&self, s: &mut ConverterInnerState, v_ref: f64, i_ext: f64) {
        let x = DVector::from_vec(vec![s.pi_integrator, s.current, s.voltage]);
        let u = DVector::from_vec(vec![v_ref, i_ext]);
        let x_next = &self.phi * x + &self.gamma * u;
        s.pi_integrator = x_next[0];
        s.current = x_next[1];
        s.voltage = x_next[2];
    }
}

/// Whole-grid model driven by externally computed voltage references.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    spec: GridSpec,
    admittance: DMatrix<f64>,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    v_mg: f64,
    dt: f64,
    n: usize,
}

impl NetworkModel {
    pub fn new(
        spec: GridSpec,
        conv: &ConverterModel,
        gains: &ControllerGains,
        dt: f64,
    ) -> Result<Self, PlantError> {
        spec.validate()?;
        let n = spec.n();
        let y = build_admittance(n, &spec.lines)?;
        // States [g; c; v] blocks of n; inputs [v_refs; injections].
        let mut a = DMatrix::<f64>::zeros(3 * n, 3 * n);
        let mut b = DMatrix::<f64>::zeros(3 * n, 2 * n);
        for i in 0..n {
            a[(i, 2 * n + i)] = -1.0;
            a[(n + i, i)] = gains.p_vi / conv.t_s;
            a[(n + i, n + i)] = -1.0 / conv.t_s;
            a[(n + i, 2 * n + i)] = -gains.p_vp / conv.t_s;
            a[(2 * n + i, n + i)] = 1.0 / conv.c_out;
            for j in 0..n {
                a[(2 * n + i, 2 * n + j)] = -y[(i, j)] / conv.c_out;
            }
            b[(i, i)] = 1.0;
            b[(n + i, i)] = gains.p_vp / conv.t_s;
            b[(2 * n + i, n + i)] = 1.0 / conv.c_out;
        }
        let (phi, gamma) = zoh_discretize(&a, &b, dt);
        Ok(Self { spec, admittance: y, phi, gamma, v_mg: gains.v_mg, dt, n })
    }

    pub fn admittance(&self) -> &DMatrix<f64> {
        &self.admittance
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Advances converters, network and batteries one step with the given
    /// references held; injection currents use start-of-step voltages.
    pub fn step(
        &self,
        state: &mut PlantState,
        v_refs: &DVector<f64>,
        irradiance: f64,
        mode: RectifierMode,
        load_fraction: f64,
    ) -> Result<(), PlantError> {
        let n = self.n;
        if v_refs.len() != n {
            return Err(PlantError::Dimension(format!(
                "{} references for {n} buses",
                v_refs.len()
            )));
        }
        let inj = injections(
            &state.bus_voltages,
            &self.spec,
            load_fraction,
            irradiance,
            mode,
            self.v_mg,
            state.time,
        )?;
        let mut u = DVector::<f64>::zeros(2 * n);
        u.rows_mut(0, n).copy_from(v_refs);
        u.rows_mut(n, n).copy_from(&inj);
        let mut x = DVector::<f64>::zeros(3 * n);
        x.rows_mut(0, n).copy_from(&state.pi_integrators);
        x.rows_mut(n, n).copy_from(&state.bus_currents);
        x.rows_mut(2 * n, n).copy_from(&state.bus_voltages);

        // Battery energies integrate the pre-step converter power.
        for i in 0..n {
            let (e, _) = battery_step(
                state.battery_energies[i],
                state.bus_voltages[i],
                state.bus_currents[i],
                self.spec.buses[i].battery_capacity_kwh,
                self.dt,
            );
            state.battery_energies[i] = e;
        }

        let x_next = &self.phi * x + &self.gamma * u;
        state.pi_integrators.copy_from(&x_next.rows(0, n));
        state.bus_currents.copy_from(&x_next.rows(n, n));
        state.bus_voltages.copy_from(&x_next.rows(2 * n, n));
        state.time += self.dt;
        Ok(())
    }
}

/// State advanced by [`ClosedLoopModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub pi_integrators: DVector<f64>,
    pub bus_currents: DVector<f64>,
    pub bus_voltages: DVector<f64>,
    /// Droop low-pass filter states; the voltage reference of bus `i` is
    /// `v_mg − f_i`.
    pub lowpass_states: DVector<f64>,
    pub battery_energies: DVector<f64>,
    pub time: f64,
}

impl ClosedLoopState {
    pub fn at_nominal(spec: &GridSpec, v_mg: f64) -> Self {
        let n = spec.n();
        Self {
            pi_integrators: DVector::zeros(n),
            bus_currents: DVector::zeros(n),
            bus_voltages: DVector::from_element(n, v_mg),
            lowpass_states: DVector::zeros(n),
            battery_energies: DVector::from_iterator(
                n,
                spec.buses.iter().map(|b| b.initial_energy),
            ),
            time: 0.0,
        }
    }

    pub fn v_refs(&self, v_mg: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.lowpass_states.len(),
            self.lowpass_states.iter().map(|f| v_mg - f),
        )
    }
}

/// Power-balance bookkeeping for one step (quasi-static audit).
#[derive(Debug, Clone, Copy, Default)]
pub struct StepAudit {
    pub generation_w: f64,
    pub consumption_w: f64,
    /// |generation − consumption| / max(generation, 1 kW).
    pub relative_error: f64,
    /// Batteries that hit the [0, 1] clamp this step.
    pub clamp_events: usize,
}

/// Grid model with the droop law, its low-pass filter and the
/// proportional average-voltage action folded into the continuous block.
///
/// Sampled inputs per bus collect everything the communication-side
/// controller computes between steps:
/// `u_slow = −p_vbar_p·Iv + p_vbar_i·Iv1 + p_vbar_ii·Iv2 + u^e`,
/// where `Iv` is the consensus integrator, `Iv1`/`Iv2` the PI integrators
/// of the average-voltage regulator and `u^e` the energy balancing signal.
#[derive(Debug, Clone)]
pub struct ClosedLoopModel {
    spec: GridSpec,
    admittance: DMatrix<f64>,
    a_cont: DMatrix<f64>,
    phi: DMatrix<f64>,
    gamma: DMatrix<f64>,
    v_mg: f64,
    dt: f64,
    n: usize,
}

impl ClosedLoopModel {
    pub fn new(
        spec: GridSpec,
        conv: &ConverterModel,
        gains: &ControllerGains,
        dt: f64,
    ) -> Result<Self, PlantError> {
        spec.validate()?;
        let n = spec.n();
        let y = build_admittance(n, &spec.lines)?;
        // States [g; c; v; f] blocks of n; inputs [u_slow; injections; 1].
        let (gi, ci, vi, fi) = (0, n, 2 * n, 3 * n);
        let mut a = DMatrix::<f64>::zeros(4 * n, 4 * n);
        let mut b = DMatrix::<f64>::zeros(4 * n, 2 * n + 1);
        let wc = gains.omega_c;
        let r = gains.r_i;
        for i in 0..n {
            // ġ = v_mg − f − v
            a[(gi + i, vi + i)] = -1.0;
            a[(gi + i, fi + i)] = -1.0;
            b[(gi + i, 2 * n)] = gains.v_mg;
            // ċ = (p_vp(v_mg − f − v) + p_vi·g − c)/T_s
            a[(ci + i, gi + i)] = gains.p_vi / conv.t_s;
            a[(ci + i, ci + i)] = -1.0 / conv.t_s;
            a[(ci + i, vi + i)] = -gains.p_vp / conv.t_s;
            a[(ci + i, fi + i)] = -gains.p_vp / conv.t_s;
            b[(ci + i, 2 * n)] = gains.p_vp * gains.v_mg / conv.t_s;
            // v̇ = (c + inj − Yv)/C
            a[(vi + i, ci + i)] = 1.0 / conv.c_out;
            for j in 0..n {
                a[(vi + i, vi + j)] = -y[(i, j)] / conv.c_out;
            }
            b[(vi + i, n + i)] = 1.0 / conv.c_out;
            // ḟ = ω_c(r(c − u^v̄ − u^e) − f) with the proportional part of
            // u^v̄ expanded: ḟ = ω_c·r·c + ω_c·r·p_vbar_p·v − ω_c·f
            //               − ω_c·r·(p_vbar_p·v_mg + u_slow)
            a[(fi + i, ci + i)] = wc * r;
            a[(fi + i, vi + i)] = wc * r * gains.p_vbar_p;
            a[(fi + i, fi + i)] = -wc;
            b[(fi + i, i)] = -wc * r;
            b[(fi + i, 2 * n)] = -wc * r * gains.p_vbar_p * gains.v_mg;
        }
        let (phi, gamma) = zoh_discretize(&a, &b, dt);
        Ok(Self { spec, admittance: y, a_cont: a, phi, gamma, v_mg: gains.v_mg, dt, n })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn admittance(&self) -> &DMatrix<f64> {
        &self.admittance
    }

    /// Continuous-time system matrix (for stability diagnostics).
    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a_cont
    }

    /// Advances one step. `u_slow` holds the sampled controller signals.
    pub fn step(
        &self,
        state: &mut ClosedLoopState,
        u_slow: &DVector<f64>,
        irradiance: f64,
        mode: RectifierMode,
        load_fraction: f64,
    ) -> Result<StepAudit, PlantError> {
        let n = self.n;
        if u_slow.len() != n {
            return Err(PlantError::Dimension(format!(
                "{} controller inputs for {n} buses",
                u_slow.len()
            )));
        }
        let inj = injections(
            &state.bus_voltages,
            &self.spec,
            load_fraction,
            irradiance,
            mode,
            self.v_mg,
            state.time,
        )?;
        let mut audit = self.audit(state, &inj, load_fraction, irradiance, mode);

        // Battery energies integrate the pre-step converter power.
        for i in 0..n {
            let (e, clamped) = battery_step(
                state.battery_energies[i],
                state.bus_voltages[i],
                state.bus_currents[i],
                self.spec.buses[i].battery_capacity_kwh,
                self.dt,
            );
            state.battery_energies[i] = e;
            if clamped {
                audit.clamp_events += 1;
            }
        }

        let mut u = DVector::<f64>::zeros(2 * n + 1);
        u.rows_mut(0, n).copy_from(u_slow);
        u.rows_mut(n, n).copy_from(&inj);
        u[2 * n] = 1.0;
        let mut x = DVector::<f64>::zeros(4 * n);
        x.rows_mut(0, n).copy_from(&state.pi_integrators);
        x.rows_mut(n, n).copy_from(&state.bus_currents);
        x.rows_mut(2 * n, n).copy_from(&state.bus_voltages);
        x.rows_mut(3 * n, n).copy_from(&state.lowpass_states);
        let x_next = &self.phi * x + &self.gamma * u;
        state.pi_integrators.copy_from(&x_next.rows(0, n));
        state.bus_currents.copy_from(&x_next.rows(n, n));
        state.bus_voltages.copy_from(&x_next.rows(2 * n, n));
        state.lowpass_states.copy_from(&x_next.rows(3 * n, n));
        state.time += self.dt;
        Ok(audit)
    }

    /// Quasi-static power audit: generation (PV + rectifier + discharging
    /// converters) versus consumption (loads + charging converters + line
    /// losses + capacitor charging), with line losses recomputed from the
    /// line list rather than the assembled admittance so the two paths
    /// cross-check each other.
    fn audit(
        &self,
        state: &ClosedLoopState,
        inj: &DVector<f64>,
        load_fraction: f64,
        irradiance: f64,
        mode: RectifierMode,
    ) -> StepAudit {
        let v = &state.bus_voltages;
        let c = &state.bus_currents;
        let total_load = self.spec.total_load_w(load_fraction);
        let total_pv = self.spec.total_pv_w(irradiance);
        let rect = rectifier_power(mode, total_load, total_pv, self.spec.rectifier_max_w);

        let mut discharge = 0.0;
        let mut charge = 0.0;
        for i in 0..self.n {
            let p = v[i] * c[i];
            if p >= 0.0 {
                discharge += p;
            } else {
                charge -= p;
            }
        }
        let mut line_loss = 0.0;
        for l in &self.spec.lines {
            let dv = v[l.from] - v[l.to];
            line_loss += dv * dv / l.resistance;
        }
        // Capacitor charging power from the node balance.
        let yv = &self.admittance * v;
        let mut cap = 0.0;
        for i in 0..self.n {
            cap += v[i] * (c[i] + inj[i] - yv[i]);
        }
        let generation = total_pv + rect + discharge;
        let consumption = total_load + charge + line_loss + cap;
        let rel = (generation - consumption).abs() / generation.max(1e3);
        StepAudit {
            generation_w: generation,
            consumption_w: consumption,
            relative_error: rel,
            clamp_events: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_gains() -> ControllerGains {
        ControllerGains::default()
    }

    fn test_converter() -> ConverterModel {
        ConverterModel { c_out: 2e-3, t_s: 5e-5 }
    }

    fn two_bus_spec() -> GridSpec {
        GridSpec {
            buses: vec![
                BusSpec {
                    id: 1,
                    battery_capacity_kwh: 25.0,
                    load_kw: 0.0,
                    has_pv: false,
                    has_rectifier: false,
                    initial_energy: 0.5,
                },
                BusSpec {
                    id: 2,
                    battery_capacity_kwh: 25.0,
                    load_kw: 0.0,
                    has_pv: false,
                    has_rectifier: false,
                    initial_energy: 0.5,
                },
            ],
            lines: vec![LineSpec { from: 0, to: 1, resistance: 0.036, inductance: 7e-6 }],
            pv: PvParams { area_m2: 500.0, efficiency: 0.16, cap_w: 80e3 },
            rectifier_max_w: 150e3,
        }
    }

    #[test]
    fn admittance_single_line() {
        let lines = [LineSpec { from: 0, to: 1, resistance: 0.036, inductance: 0.0 }];
        let y = build_admittance(2, &lines).unwrap();
        let g = 1.0 / 0.036;
        assert_relative_eq!(y[(0, 0)], g, max_relative = 1e-12);
        assert_relative_eq!(y[(0, 1)], -g, max_relative = 1e-12);
        assert_relative_eq!(y[(1, 0)], -g, max_relative = 1e-12);
        assert_relative_eq!(y[(1, 1)], g, max_relative = 1e-12);
    }

    #[test]
    fn admittance_no_lines_is_zero() {
        let y = build_admittance(3, &[]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn admittance_star_diagonal() {
        // Nine identical cables from bus 0: diagonal = 9/0.036 = 250 S.
        let lines: Vec<LineSpec> = (1..10)
            .map(|i| LineSpec { from: 0, to: i, resistance: 0.036, inductance: 7e-6 })
            .collect();
        let y = build_admittance(10, &lines).unwrap();
        assert_relative_eq!(y[(0, 0)], 250.0, max_relative = 1e-12);
    }

    #[test]
    fn admittance_duplicate_lines_sum() {
        let lines = [
            LineSpec { from: 0, to: 1, resistance: 0.1, inductance: 0.0 },
            LineSpec { from: 0, to: 1, resistance: 0.1, inductance: 0.0 },
        ];
        let y = build_admittance(2, &lines).unwrap();
        assert_relative_eq!(y[(0, 0)], 20.0, max_relative = 1e-12);
    }

    #[test]
    fn admittance_rejects_out_of_range() {
        let lines = [LineSpec { from: 0, to: 5, resistance: 0.1, inductance: 0.0 }];
        assert_eq!(
            build_admittance(2, &lines),
            Err(PlantError::LineOutOfRange { index: 5, n: 2 })
        );
    }

    #[test]
    fn battery_zero_current_unchanged() {
        let (e, clamped) = battery_step(0.5, 380.0, 0.0, 25.0, 1.0);
        assert_eq!(e, 0.5);
        assert!(!clamped);
    }

    #[test]
    fn battery_discharge_arithmetic() {
        // 380 V · 10 A over 1 s on 25 kWh: Δe = −3800/9e7.
        let (e, _) = battery_step(0.5, 380.0, 10.0, 25.0, 1.0);
        assert_relative_eq!(0.5 - e, 3800.0 / 9.0e7, max_relative = 1e-12);
    }

    #[test]
    fn battery_discharge_strictly_decreases() {
        let (e, _) = battery_step(0.5, 380.0, 1.0, 25.0, 1e-3);
        assert!(e < 0.5);
    }

    #[test]
    fn battery_clamps_at_bounds() {
        let (e, clamped) = battery_step(1.0 - 1e-12, 380.0, -1000.0, 0.001, 10.0);
        assert_eq!(e, 1.0);
        assert!(clamped);
        let (e, clamped) = battery_step(1e-12, 380.0, 1000.0, 0.001, 10.0);
        assert_eq!(e, 0.0);
        assert!(clamped);
    }

    #[test]
    fn pv_power_cap_and_zero() {
        let pv = PvParams { area_m2: 500.0, efficiency: 0.16, cap_w: 80e3 };
        assert_eq!(pv_power(0.0, &pv), 0.0);
        assert_relative_eq!(pv_power(1000.0, &pv), 80e3, max_relative = 1e-12);
        assert_relative_eq!(pv_power(1200.0, &pv), 80e3, max_relative = 1e-12);
        assert_relative_eq!(pv_power(500.0, &pv), 40e3, max_relative = 1e-12);
    }

    #[test]
    fn rectifier_modes() {
        assert_eq!(rectifier_power(RectifierMode::Islanded, 100e3, 40e3, 150e3), 0.0);
        assert_relative_eq!(
            rectifier_power(RectifierMode::LoadBalancing, 100e3, 40e3, 150e3),
            60e3,
            max_relative = 1e-12
        );
        assert_eq!(
            rectifier_power(RectifierMode::LoadBalancing, 100e3, 120e3, 150e3),
            0.0
        );
        assert_eq!(rectifier_power(RectifierMode::EsCharging, 0.0, 0.0, 150e3), 150e3);
    }

    #[test]
    fn injection_load_current_at_nominal() {
        let mut spec = two_bus_spec();
        spec.buses[0].load_kw = 15.0;
        let v = DVector::from_element(2, 380.0);
        let inj = injections(&v, &spec, 1.0, 0.0, RectifierMode::Islanded, 380.0, 0.0).unwrap();
        assert_relative_eq!(inj[0], -15000.0 / 380.0, max_relative = 1e-12);
        assert_eq!(inj[1], 0.0);
    }

    #[test]
    fn injection_trips_on_collapsed_bus() {
        let spec = two_bus_spec();
        let v = DVector::from_vec(vec![380.0, 150.0]);
        let err = injections(&v, &spec, 1.0, 0.0, RectifierMode::Islanded, 380.0, 3.5).unwrap_err();
        assert_eq!(err, PlantError::ProtectionTrip { bus: 1, voltage: 150.0, time: 3.5 });
    }

    #[test]
    fn converter_loop_tracks_reference() {
        // Closed-loop DC gain is 1: v settles within 1% of the reference.
        let loop_ = ConverterLoop::new(&test_converter(), &test_gains(), 1e-3);
        let mut s = ConverterInnerState { voltage: 380.0, ..Default::default() };
        for _ in 0..5000 {
            loop_.step(&mut s, 385.0, 0.0);
        }
        assert!((s.voltage - 385.0).abs() < 0.05, "voltage {}", s.voltage);
    }

    #[test]
    fn converter_loop_equilibrium_is_fixed() {
        let loop_ = ConverterLoop::new(&test_converter(), &test_gains(), 1e-3);
        let mut s = ConverterInnerState { voltage: 380.0, ..Default::default() };
        loop_.step(&mut s, 380.0, 0.0);
        assert_relative_eq!(s.voltage, 380.0, max_relative = 1e-12);
        assert!(s.current.abs() < 1e-9 && s.pi_integrator.abs() < 1e-9);
    }

    #[test]
    fn converter_loop_step_response_matches_reference_ode() {
        // Fine RK4 integration of the same third-order loop bounds the
        // exact-discretization trajectory.
        let conv = test_converter();
        let gains = test_gains();
        let dt = 1e-3;
        let loop_ = ConverterLoop::new(&conv, &gains, dt);
        let mut s = ConverterInnerState::default();
        let v_ref = 10.0;

        // RK4 at 1e-7 s.
        let deriv = |x: [f64; 3]| -> [f64; 3] {
            let [g, c, v] = x;
            [
                v_ref - v,
                (gains.p_vp * (v_ref - v) + gains.p_vi * g - c) / conv.t_s,
                c / conv.c_out,
            ]
        };
        let mut x = [0.0_f64; 3];
        let h = 1e-7;
        let steps_per_dt = (dt / h) as usize;
        for k in 0..10 {
            for _ in 0..steps_per_dt {
                let k1 = deriv(x);
                let mid1 = [x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1], x[2] + 0.5 * h * k1[2]];
                let k2 = deriv(mid1);
                let mid2 = [x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1], x[2] + 0.5 * h * k2[2]];
                let k3 = deriv(mid2);
                let end = [x[0] + h * k3[0], x[1] + h * k3[1], x[2] + h * k3[2]];
                let k4 = deriv(end);
                for i in 0..3 {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            loop_.step(&mut s, v_ref, 0.0);
            assert!(
                (s.voltage - x[2]).abs() < 1e-6 * x[2].abs().max(1.0),
                "step {k}: exact {} vs RK4 {}",
                s.voltage,
                x[2]
            );
        }
        // Bounded response: no divergence over 10 s.
        for _ in 0..10_000 {
            loop_.step(&mut s, v_ref, 0.0);
            assert!(s.voltage.is_finite() && s.voltage.abs() < 100.0);
        }
        assert!((s.voltage - v_ref).abs() < 0.01 * v_ref.abs());
    }

    #[test]
    fn network_symmetric_equilibrium_is_steady() {
        let spec = two_bus_spec();
        let model = NetworkModel::new(spec.clone(), &test_converter(), &test_gains(), 1e-3).unwrap();
        let mut state = PlantState::at_nominal(&spec, 380.0);
        let refs = DVector::from_element(2, 380.0);
        for _ in 0..1000 {
            model
                .step(&mut state, &refs, 0.0, RectifierMode::Islanded, 1.0)
                .unwrap();
        }
        // Residuals come only from matrix-exponential rounding; they must
        // stay at noise level (microvolts / microamps), not grow.
        for i in 0..2 {
            assert_relative_eq!(state.bus_voltages[i], 380.0, epsilon = 1e-6);
            assert!(state.bus_currents[i].abs() < 1e-4, "c = {}", state.bus_currents[i]);
        }
        let v_after_1k = state.bus_voltages[0];
        for _ in 0..9000 {
            model
                .step(&mut state, &refs, 0.0, RectifierMode::Islanded, 1.0)
                .unwrap();
        }
        assert!((state.bus_voltages[0] - v_after_1k).abs() < 1e-6, "equilibrium drifts");
    }

    #[test]
    fn network_load_step_dips_then_recovers() {
        let mut spec = two_bus_spec();
        spec.buses[1].load_kw = 15.0;
        let model = NetworkModel::new(spec.clone(), &test_converter(), &test_gains(), 1e-3).unwrap();
        let mut state = PlantState::at_nominal(&spec, 380.0);
        let refs = DVector::from_element(2, 380.0);
        let mut min_v: f64 = 380.0;
        for _ in 0..4000 {
            model
                .step(&mut state, &refs, 0.0, RectifierMode::Islanded, 1.0)
                .unwrap();
            min_v = min_v.min(state.bus_voltages[1]);
        }
        assert!(min_v < 380.0, "load draw must dip the bus voltage");
        // PI integrators drive the bus back to the reference.
        assert!((state.bus_voltages[1] - 380.0).abs() < 0.2, "v = {}", state.bus_voltages[1]);
        // The loaded bus discharges its battery.
        assert!(state.battery_energies[1] < 0.5);
    }

    #[test]
    fn closed_loop_matrix_is_hurwitz() {
        // Continuous-time stability of the fused droop + converter +
        // network block for the case-study parameters.
        let mut spec = two_bus_spec();
        spec.buses[0].load_kw = 15.0;
        spec.buses[1].load_kw = 5.0;
        let model = ClosedLoopModel::new(spec, &test_converter(), &test_gains(), 1e-3).unwrap();
        let eigs = model.a_matrix().clone().complex_eigenvalues();
        let max_re = eigs.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max);
        assert!(max_re < 0.0, "unstable continuous closed loop: max Re = {max_re}");
    }

    #[test]
    fn closed_loop_equilibrium_is_steady() {
        let spec = two_bus_spec();
        let model = ClosedLoopModel::new(spec.clone(), &test_converter(), &test_gains(), 1e-3).unwrap();
        let mut state = ClosedLoopState::at_nominal(&spec, 380.0);
        let u_slow = DVector::zeros(2);
        for _ in 0..1000 {
            model
                .step(&mut state, &u_slow, 0.0, RectifierMode::Islanded, 1.0)
                .unwrap();
        }
        for i in 0..2 {
            assert_relative_eq!(state.bus_voltages[i], 380.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn closed_loop_audit_balances_under_load() {
        let mut spec = two_bus_spec();
        spec.buses[0].load_kw = 15.0;
        spec.buses[1].load_kw = 5.0;
        let model = ClosedLoopModel::new(spec.clone(), &test_converter(), &test_gains(), 1e-3).unwrap();
        let mut state = ClosedLoopState::at_nominal(&spec, 380.0);
        let u_slow = DVector::zeros(2);
        let mut worst: f64 = 0.0;
        for k in 0..5000 {
            let audit = model
                .step(&mut state, &u_slow, 0.0, RectifierMode::Islanded, 1.0)
                .unwrap();
            if k > 100 {
                worst = worst.max(audit.relative_error);
            }
        }
        assert!(worst < 5e-3, "power balance off by {worst}");
    }
}
