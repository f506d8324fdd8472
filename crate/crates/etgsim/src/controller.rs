//! Per-bus distributed secondary controller: improved droop law with an
//! average-voltage stabilization signal and a per-unit energy balancing
//! signal.
//!
//! Signal chain per step: the energy PI shifts the droop current by
//! `u^e = G^e (e_i − ē_i)`, the average-voltage PI (with double integral)
//! produces `u^v̄ = G^v̄ (v^mg − v̄_i)`, the droop law low-pass filters
//! `r_i (i_i − u^v̄ − u^e)` into the voltage reference, and the voltage PI
//! turns the reference error into the converter current reference.
//! All blocks advance by forward Euler; outputs use the integrator values
//! from before the step.

use serde::{Deserialize, Serialize};

/// Controller gains; defaults follow the 380 V case study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerGains {
    /// Virtual droop resistance [Ω].
    pub r_i: f64,
    /// Low-pass cutoff of the droop filter [rad/s].
    pub omega_c: f64,
    /// Voltage PI (current reference) gains.
    pub p_vp: f64,
    pub p_vi: f64,
    /// Energy balancing PI gains.
    pub p_ep: f64,
    pub p_ei: f64,
    /// Average-voltage regulation gains (proportional, integral, double
    /// integral).
    pub p_vbar_p: f64,
    pub p_vbar_i: f64,
    pub p_vbar_ii: f64,
    /// Microgrid reference voltage [V].
    pub v_mg: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            r_i: 0.2533,
            omega_c: 100.0,
            p_vp: 10.0,
            p_vi: 10.0,
            p_ep: 5000.0,
            p_ei: 50.0,
            p_vbar_p: 500.0,
            p_vbar_i: 10.0,
            p_vbar_ii: 0.1,
            v_mg: 380.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_i > 0.0) {
            return Err(format!("gains.r_i must be > 0, got {}", self.r_i));
        }
        if !(self.omega_c > 0.0) {
            return Err(format!("gains.omega_c must be > 0, got {}", self.omega_c));
        }
        if !(self.v_mg > 0.0) {
            return Err(format!("gains.v_mg must be > 0, got {}", self.v_mg));
        }
        Ok(())
    }
}

/// Integrator and filter states of one controller; all start at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ControllerState {
    /// Droop low-pass filter state.
    pub lowpass_state: f64,
    /// Integrator of the energy balancing error.
    pub e_integrator: f64,
    /// Integrator of the average-voltage error.
    pub vbar_integrator: f64,
    /// Double integrator (integrates `vbar_integrator`).
    pub vbar_double_integrator: f64,
    /// Integrator of the reference-voltage error.
    pub v_integrator: f64,
    /// Last computed voltage reference [V].
    pub last_v_ref: f64,
}

/// Local measurements consumed by one controller step.
#[derive(Debug, Clone, Copy)]
pub struct LocalMeasurements {
    /// Bus voltage [V].
    pub v_i: f64,
    /// ES output current [A].
    pub i_i: f64,
    /// Battery per-unit energy level.
    pub e_i: f64,
}

/// Average estimates delivered by the consensus / estimation pipeline.
/// Held (last received) values are permitted.
#[derive(Debug, Clone, Copy)]
pub struct AverageEstimates {
    pub v_bar: f64,
    pub e_bar: f64,
}

/// Output of one composite controller step.
#[derive(Debug, Clone, Copy)]
pub struct ControllerOutput {
    /// Voltage reference for the converter loop [V].
    pub v_ref: f64,
    /// Converter current reference [A].
    pub i_ref: f64,
}

/// Per-bus controller: gains plus integrator states.
#[derive(Debug, Clone)]
pub struct EsController {
    pub gains: ControllerGains,
    pub state: ControllerState,
}

impl EsController {
    pub fn new(gains: ControllerGains) -> Self {
        let state = ControllerState { last_v_ref: gains.v_mg, ..Default::default() };
        Self { gains, state }
    }

    /// Energy balancing signal `u^e = p_ep (e_i − ē_i) + p_ei ∫(e_i − ē_i)`.
    pub fn energy_balance_signal(&mut self, e_i: f64, e_bar_i: f64, dt: f64) -> f64 {
        let err = e_i - e_bar_i;
        let u = self.gains.p_ep * err + self.gains.p_ei * self.state.e_integrator;
        self.state.e_integrator += dt * err;
        u
    }

    /// Average-voltage regulation signal
    /// `u^v̄ = p (v^mg − v̄) + p_i ∫err + p_ii ∬err`; the double integrator
    /// integrates the single integrator.
    pub fn voltage_regulation_signal(&mut self, v_bar_i: f64, dt: f64) -> f64 {
        let err = self.gains.v_mg - v_bar_i;
        let u = self.gains.p_vbar_p * err
            + self.gains.p_vbar_i * self.state.vbar_integrator
            + self.gains.p_vbar_ii * self.state.vbar_double_integrator;
        self.state.vbar_double_integrator += dt * self.state.vbar_integrator;
        self.state.vbar_integrator += dt * err;
        u
    }

    /// Droop reference `v* = v^mg − LPF(r_i (i_i − u^v̄ − u^e))`.
    pub fn droop_reference(&mut self, i_i: f64, u_vbar: f64, u_e: f64, dt: f64) -> f64 {
        let input = self.gains.r_i * (i_i - u_vbar - u_e);
        self.state.lowpass_state += dt * self.gains.omega_c * (input - self.state.lowpass_state);
        let v_ref = self.gains.v_mg - self.state.lowpass_state;
        self.state.last_v_ref = v_ref;
        v_ref
    }

    /// Converter current reference `i* = p_vp (v* − v_i) + p_vi ∫(v* − v_i)`.
    pub fn current_reference(&mut self, v_ref: f64, v_i: f64, dt: f64) -> f64 {
        let err = v_ref - v_i;
        let i = self.gains.p_vp * err + self.gains.p_vi * self.state.v_integrator;
        self.state.v_integrator += dt * err;
        i
    }

    /// Composite step chaining energy balance → voltage regulation →
    /// droop reference → current reference.
    pub fn controller_step(
        &mut self,
        local: LocalMeasurements,
        estimates: AverageEstimates,
        dt: f64,
    ) -> ControllerOutput {
        let u_e = self.energy_balance_signal(local.e_i, estimates.e_bar, dt);
        let u_vbar = self.voltage_regulation_signal(estimates.v_bar, dt);
        let v_ref = self.droop_reference(local.i_i, u_vbar, u_e, dt);
        let i_ref = self.current_reference(v_ref, local.v_i, dt);
        ControllerOutput { v_ref, i_ref }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn controller() -> EsController {
        EsController::new(ControllerGains::default())
    }

    #[test]
    fn energy_signal_zero_error_zero_integrator() {
        let mut c = controller();
        let u = c.energy_balance_signal(0.5, 0.5, 1e-3);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn energy_signal_proportional_term() {
        let mut c = controller();
        let u = c.energy_balance_signal(0.51, 0.50, 1e-6);
        assert_relative_eq!(u, 50.0, max_relative = 1e-12);
    }

    #[test]
    fn energy_signal_integrates_constant_error() {
        let mut c = controller();
        let dt = 1e-3;
        let mut u = 0.0;
        for _ in 0..2000 {
            u = c.energy_balance_signal(0.51, 0.50, dt);
        }
        // After 2 s: 5000*0.01 + 50*0.01*2 = 51 (Euler lags by one step).
        assert_relative_eq!(u, 51.0, epsilon = 1e-2);
    }

    #[test]
    fn voltage_regulation_zero_at_reference() {
        let mut c = controller();
        assert_eq!(c.voltage_regulation_signal(380.0, 1e-3), 0.0);
    }

    #[test]
    fn voltage_regulation_proportional_term() {
        let mut c = controller();
        let u = c.voltage_regulation_signal(379.0, 1e-6);
        assert_relative_eq!(u, 500.0, max_relative = 1e-12);
    }

    #[test]
    fn voltage_regulation_double_integral_closed_form() {
        // err = 1 V for 10 s: u = 500 + 10·10 + 0.1·(10²/2) = 605.
        let mut c = controller();
        let dt = 1e-4;
        let mut u = 0.0;
        for _ in 0..100_000 {
            u = c.voltage_regulation_signal(379.0, dt);
        }
        assert_relative_eq!(u, 605.0, epsilon = 0.05);
    }

    #[test]
    fn droop_zero_net_current_gives_reference() {
        let mut c = controller();
        let v = c.droop_reference(30.0, 10.0, 20.0, 1e-3);
        assert_relative_eq!(v, 380.0, max_relative = 1e-12);
    }

    #[test]
    fn droop_dc_steady_state() {
        // LPF DC gain is 1: v* = 380 − 0.2533·10 = 377.467.
        let mut c = controller();
        let mut v = 0.0;
        for _ in 0..100_000 {
            v = c.droop_reference(10.0, 0.0, 0.0, 1e-3);
        }
        assert_relative_eq!(v, 377.467, epsilon = 1e-6);
    }

    #[test]
    fn droop_filter_first_order_time_constant() {
        // ω_c = 100 rad/s: 63.2% of the final value after 10 ms.
        let mut c = controller();
        let dt = 1e-5;
        let steps = (0.010 / dt) as usize;
        for _ in 0..steps {
            c.droop_reference(10.0, 0.0, 0.0, dt);
        }
        let target = 0.2533 * 10.0;
        let frac = c.state.lowpass_state / target;
        assert_relative_eq!(frac, 1.0 - (-1.0f64).exp(), epsilon = 1e-3);
    }

    #[test]
    fn droop_sign_more_current_lowers_reference() {
        let mut a = controller();
        let mut b = controller();
        let mut va = 0.0;
        let mut vb = 0.0;
        for _ in 0..50_000 {
            va = a.droop_reference(10.0, 0.0, 0.0, 1e-3);
            vb = b.droop_reference(12.0, 0.0, 0.0, 1e-3);
        }
        assert!(vb < va);
    }

    #[test]
    fn current_reference_zero_error() {
        let mut c = controller();
        assert_eq!(c.current_reference(380.0, 380.0, 1e-3), 0.0);
    }

    #[test]
    fn current_reference_proportional() {
        let mut c = controller();
        let i = c.current_reference(381.0, 380.0, 1e-6);
        assert_relative_eq!(i, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn current_reference_integrates() {
        // 1 V error held 5 s: 10 + 10·5 = 60 A.
        let mut c = controller();
        let dt = 1e-3;
        let mut i = 0.0;
        for _ in 0..5000 {
            i = c.current_reference(381.0, 380.0, dt);
        }
        assert_relative_eq!(i, 60.0, epsilon = 0.02);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let mut c = controller();
        let before = c.state;
        let out = c.controller_step(
            LocalMeasurements { v_i: 380.0, i_i: 0.0, e_i: 0.5 },
            AverageEstimates { v_bar: 380.0, e_bar: 0.5 },
            1e-3,
        );
        assert_relative_eq!(out.v_ref, 380.0, max_relative = 1e-12);
        assert_relative_eq!(out.i_ref, 0.0, max_relative = 1e-12);
        let after = c.state;
        assert!((after.lowpass_state - before.lowpass_state).abs() < 1e-12);
        assert!((after.e_integrator - before.e_integrator).abs() < 1e-12);
        assert!((after.vbar_integrator - before.vbar_integrator).abs() < 1e-12);
        assert!((after.v_integrator - before.v_integrator).abs() < 1e-12);
    }

    #[test]
    fn excess_energy_raises_reference() {
        // ē_i < e_i ⇒ u^e > 0 ⇒ v* rises above the plain-droop value.
        let mut with_balance = controller();
        let mut plain = controller();
        let mut v_bal = 0.0;
        let mut v_plain = 0.0;
        for _ in 0..20_000 {
            let out = with_balance.controller_step(
                LocalMeasurements { v_i: 380.0, i_i: 10.0, e_i: 0.55 },
                AverageEstimates { v_bar: 380.0, e_bar: 0.50 },
                1e-3,
            );
            v_bal = out.v_ref;
            let out = plain.controller_step(
                LocalMeasurements { v_i: 380.0, i_i: 10.0, e_i: 0.50 },
                AverageEstimates { v_bar: 380.0, e_bar: 0.50 },
                1e-3,
            );
            v_plain = out.v_ref;
        }
        assert!(v_bal > v_plain, "expected export push: {v_bal} <= {v_plain}");
    }

    #[test]
    fn low_average_voltage_raises_reference() {
        // v̄_i < v^mg ⇒ u^v̄ > 0 ⇒ v* increases.
        let mut low = controller();
        let mut nominal = controller();
        let mut v_low = 0.0;
        let mut v_nom = 0.0;
        for _ in 0..2000 {
            v_low = {
                let u_v = low.voltage_regulation_signal(379.5, 1e-3);
                low.droop_reference(5.0, u_v, 0.0, 1e-3)
            };
            v_nom = {
                let u_v = nominal.voltage_regulation_signal(380.0, 1e-3);
                nominal.droop_reference(5.0, u_v, 0.0, 1e-3)
            };
        }
        assert!(v_low > v_nom);
    }

    #[test]
    fn lpf_dc_gain_is_unity() {
        let mut c = controller();
        let dt = 1e-3;
        // Constant input for ≥ 10/ω_c seconds.
        let steps = (10.0 / 100.0 / dt) as usize * 10;
        for _ in 0..steps {
            c.droop_reference(4.0, 0.0, 0.0, dt);
        }
        let input = 0.2533 * 4.0;
        assert!((c.state.lowpass_state - input).abs() / input < 1e-3);
    }

    #[test]
    fn persistent_vbar_error_grows_superlinearly() {
        // The double integrator makes u^v̄ grow super-linearly over 100 s.
        let mut c = controller();
        let dt = 1e-3;
        let steps_half = 50_000;
        let mut u_mid = 0.0;
        for _ in 0..steps_half {
            u_mid = c.voltage_regulation_signal(379.0, dt);
        }
        let mut u_end = 0.0;
        for _ in 0..steps_half {
            u_end = c.voltage_regulation_signal(379.0, dt);
        }
        let first_half = u_mid - 500.0;
        let second_half = u_end - u_mid;
        assert!(
            second_half > 1.3 * first_half,
            "growth not super-linear: {first_half} then {second_half}"
        );
        // The quadratic contribution after 100 s is p_vbar_ii·t²/2 = 500 on
        // top of what the PI terms alone would produce.
        let pi_only = 500.0 + 10.0 * 100.0;
        assert_relative_eq!(u_end - pi_only, 500.0, max_relative = 0.05);
    }
}
