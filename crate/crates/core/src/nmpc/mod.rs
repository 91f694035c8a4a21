//! Nonlinear model predictive control of glucose by multiple shooting and SQP.
//!
//! Each solve optimises either the insulin pair (basal, bolus) or the
//! glucagon rate over a 6 h horizon of 72 five-minute intervals. The
//! objective integrates an asymmetric glucose penalty along the RK4 grid and
//! adds per-interval input penalties.

mod qp;
mod sqp;
mod transcription;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ctrl::CtrlInputs;

pub use qp::{solve_box_qp, BoxQpResult};
pub use sqp::{
    kkt_residual, sqp_solve, OcpSolution, SolveStatus, SqpOptions, SqpTraceRow, WarmStart,
};
pub use transcription::{transcribe, IntervalLinearization, Nlp, ObjectiveGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Insulin,
    Glucagon,
}

impl Mode {
    /// Decision variables per interval: (basal, bolus) or (glucagon).
    pub fn input_count(self) -> usize {
        match self {
            Mode::Insulin => 2,
            Mode::Glucagon => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Insulin => "insulin",
            Mode::Glucagon => "glucagon",
        }
    }
}

pub const DEFAULT_HORIZON_INTERVALS: usize = 72;
pub const DEFAULT_SETPOINT: f64 = 6.0;
pub const DEFAULT_Z_MIN: f64 = 4.5;
pub const DEFAULT_Z_MAX: f64 = 10.0;
pub const HYPO_WEIGHT: f64 = 1e6;
pub const HYPER_WEIGHT_INSULIN: f64 = 50.0;

/// One optimal control problem instance.
///
/// Bounds are stored flat, interval-major: `lower[k * nu + i]` for decision
/// variable `i` of interval `k`, with `nu = mode.input_count()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSpec {
    pub mode: Mode,
    pub intervals: usize,
    /// Control interval [min].
    pub interval: f64,
    /// RK4 steps per interval.
    pub substeps: usize,
    pub setpoint: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub weight_setpoint: f64,
    pub weight_hypo: f64,
    pub weight_hyper: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Nominal basal rate per interval [mU/min].
    pub nominal_basal: Vec<f64>,
    /// Forecast meal rate per interval [mmol/min].
    pub meal_forecast: Vec<f64>,
}

impl OcpSpec {
    /// Default horizon for `mode`; basal in `[0, 2 nominal]`, bolus and
    /// glucagon pinned at zero until the caller widens them.
    pub fn new(mode: Mode, nominal_basal: f64) -> Self {
        let n = DEFAULT_HORIZON_INTERVALS;
        let nu = mode.input_count();
        let lower = vec![0.0; n * nu];
        let mut upper = vec![0.0; n * nu];
        if mode == Mode::Insulin {
            for k in 0..n {
                upper[k * nu] = 2.0 * nominal_basal;
            }
        }
        Self {
            mode,
            intervals: n,
            interval: 5.0,
            substeps: 2,
            setpoint: DEFAULT_SETPOINT,
            z_min: DEFAULT_Z_MIN,
            z_max: DEFAULT_Z_MAX,
            weight_setpoint: 1.0,
            weight_hypo: HYPO_WEIGHT,
            weight_hyper: match mode {
                Mode::Insulin => HYPER_WEIGHT_INSULIN,
                Mode::Glucagon => 0.0,
            },
            lower,
            upper,
            nominal_basal: vec![nominal_basal; n],
            meal_forecast: vec![0.0; n],
        }
    }

    pub fn horizon(&self) -> f64 {
        self.intervals as f64 * self.interval
    }

    pub fn input_count(&self) -> usize {
        self.mode.input_count()
    }

    pub fn decision_len(&self) -> usize {
        self.intervals * self.input_count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.decision_len();
        if self.intervals == 0 || self.substeps == 0 || !(self.interval > 0.0) {
            return Err(Error::InvalidParameter("empty horizon".into()));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::InvalidParameter(format!(
                "bounds must have {n} entries"
            )));
        }
        if self.nominal_basal.len() != self.intervals || self.meal_forecast.len() != self.intervals
        {
            return Err(Error::InvalidParameter(
                "per-interval vectors must match the horizon".into(),
            ));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(Error::InvalidParameter(format!(
                    "bound {i} is empty or non-finite"
                )));
            }
        }
        Ok(())
    }

    /// Sets the bounds of decision variable `var` on every interval.
    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        let nu = self.input_count();
        for k in 0..self.intervals {
            self.lower[k * nu + var] = lower;
            self.upper[k * nu + var] = upper;
        }
    }

    /// Model inputs on interval `k` given the interval's decision slice.
    pub fn inputs_at(&self, k: usize, u: &[f64]) -> CtrlInputs {
        let meal = self.meal_forecast[k];
        match self.mode {
            Mode::Insulin => CtrlInputs {
                uba: u[0],
                ubo: u[1],
                ug: 0.0,
                meal,
            },
            Mode::Glucagon => CtrlInputs {
                uba: 0.0,
                ubo: 0.0,
                ug: u[0],
                meal,
            },
        }
    }

    /// Column of the model input vector driven by each decision variable.
    pub(crate) fn input_columns(&self) -> &'static [usize] {
        match self.mode {
            Mode::Insulin => &[0, 1],
            Mode::Glucagon => &[2],
        }
    }

    /// Clips a decision vector into the bounds.
    pub fn clip(&self, u: &mut [f64]) {
        for ((v, l), h) in u.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Cold start: nominal basal without bolus, or no glucagon.
    pub fn cold_start(&self) -> Vec<f64> {
        let nu = self.input_count();
        let mut u = vec![0.0; self.decision_len()];
        if self.mode == Mode::Insulin {
            for k in 0..self.intervals {
                u[k * nu] = self.nominal_basal[k];
            }
        }
        self.clip(&mut u);
        u
    }
}

/// Glucose penalty: setpoint tracking plus one-sided hypo and hyper terms.
pub fn penalty_z(z: f64, spec: &OcpSpec) -> f64 {
    penalty_z_terms(z, spec).0
}

/// Penalty with its first and (piecewise) second derivative.
pub(crate) fn penalty_z_terms(z: f64, spec: &OcpSpec) -> (f64, f64, f64) {
    let dev = z - spec.setpoint;
    let mut value = 0.5 * spec.weight_setpoint * dev * dev;
    let mut d1 = spec.weight_setpoint * dev;
    let mut d2 = spec.weight_setpoint;
    let low = z - spec.z_min;
    if low < 0.0 {
        value += 0.5 * spec.weight_hypo * low * low;
        d1 += spec.weight_hypo * low;
        d2 += spec.weight_hypo;
    }
    let high = z - spec.z_max;
    if high > 0.0 {
        value += 0.5 * spec.weight_hyper * high * high;
        d1 += spec.weight_hyper * high;
        d2 += spec.weight_hyper;
    }
    (value, d1, d2)
}

/// Input penalty of interval `k`: squared basal deviation plus bolus
/// (nonnegative, so its 1-norm is the plain value), or squared glucagon.
pub fn penalty_u(u: &[f64], k: usize, spec: &OcpSpec) -> f64 {
    match spec.mode {
        Mode::Insulin => {
            let dev = u[0] - spec.nominal_basal[k];
            dev * dev + u[1].abs()
        }
        Mode::Glucagon => u[0] * u[0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_z_values() {
        let ins = OcpSpec::new(Mode::Insulin, 10.0);
        let glu = OcpSpec::new(Mode::Glucagon, 10.0);
        assert_eq!(penalty_z(6.0, &ins), 0.0);
        assert_eq!(penalty_z(3.0, &ins), 4.5 + 1.125e6);
        assert_eq!(penalty_z(12.0, &glu), 18.0);
        assert_eq!(penalty_z(12.0, &ins), 18.0 + 100.0);
    }

    #[test]
    fn penalty_z_continuity_at_kinks() {
        let spec = OcpSpec::new(Mode::Insulin, 10.0);
        for edge in [spec.z_min, spec.z_max] {
            let left = penalty_z(edge - 1e-13, &spec);
            let right = penalty_z(edge + 1e-13, &spec);
            assert!((left - right).abs() < 1e-12);
            assert!((penalty_z(edge, &spec) - 0.5 * (edge - 6.0f64).powi(2)).abs() < 1e-15);
        }
    }

    #[test]
    fn one_sided_derivatives_match_differences() {
        let spec = OcpSpec::new(Mode::Insulin, 10.0);
        for edge in [spec.z_min, spec.z_max] {
            for side in [-1.0, 1.0] {
                let z = edge + side * 1e-3;
                let h = 1e-7;
                let fd = (penalty_z(z + h, &spec) - penalty_z(z - h, &spec)) / (2.0 * h);
                let (_, d1, _) = penalty_z_terms(z, &spec);
                assert!(
                    (fd - d1).abs() <= 1e-6 * d1.abs().max(1.0),
                    "{edge} {side}: {fd} vs {d1}"
                );
            }
        }
    }

    #[test]
    fn penalty_u_values() {
        let ins = OcpSpec::new(Mode::Insulin, 10.0);
        assert_eq!(penalty_u(&[10.0, 0.0], 0, &ins), 0.0);
        assert_eq!(penalty_u(&[10.0, 3.0], 0, &ins), 3.0);
        let glu = OcpSpec::new(Mode::Glucagon, 10.0);
        assert_eq!(penalty_u(&[2.0], 0, &glu), 4.0);
    }

    #[test]
    fn default_spec_is_consistent() {
        let spec = OcpSpec::new(Mode::Insulin, 10.0);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.horizon(), 360.0);
        assert_eq!(spec.upper[0], 20.0);
        assert_eq!(spec.upper[1], 0.0);
        let mut bad = spec.clone();
        bad.lower[3] = 1.0;
        assert!(bad.validate().is_err());
    }
}
