//! Dosing heuristics around the optimiser: hormone switching, bolus and
//! glucagon allowances, exercise handling, insulin-sensitivity guarding,
//! pump quantization and the open-loop fallback.
//!
//! Units: insulin rates in mU/min, glucagon rates in ug/min, glucose in
//! mmol/L, time in minutes. ISF is given in (mmol/L)/U and ICR in g/U.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::cdekf::{FilterBelief, FilterHook};
use crate::model_ctrl::{idx, CtrlParams};
use crate::nmpc::{Mode, OcpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DosingConfig {
    /// Control interval [min].
    pub interval: f64,
    pub glucagon_threshold: f64,
    pub insulin_threshold: f64,
    pub exercise_glucagon_threshold: f64,
    pub exercise_insulin_threshold: f64,
    pub setpoint: f64,
    pub exercise_setpoint: f64,
    /// Glucose above which correction boluses are allowed [mmol/L].
    pub correction_threshold: f64,
    /// Post-meal window for forced insulin, meal boluses and SI freezing [min].
    pub meal_window: f64,
    pub bolus_allowance: f64,
    pub epsilon: f64,
    pub bolus_window: usize,
    pub glucagon_window: usize,
    /// Glucagon allowed per window [ug].
    pub glucagon_cap: f64,
    /// Glucagon given when exercise starts below the exercise threshold [ug].
    pub exercise_glucagon: f64,
    pub fallback_basal_threshold: f64,
    /// Fallback glucagon amount [ug].
    pub fallback_glucagon: f64,
    /// Pump resolutions: basal [U/h], bolus [U], glucagon [ug/h].
    pub basal_resolution: f64,
    pub bolus_resolution: f64,
    pub glucagon_resolution: f64,
    /// Half-width of the logSI clipping band.
    pub log_si_band: f64,
}

impl Default for DosingConfig {
    fn default() -> Self {
        Self {
            interval: 5.0,
            glucagon_threshold: 4.5,
            insulin_threshold: 5.0,
            exercise_glucagon_threshold: 7.0,
            exercise_insulin_threshold: 7.5,
            setpoint: 6.0,
            exercise_setpoint: 7.0,
            correction_threshold: 10.0,
            meal_window: 60.0,
            bolus_allowance: 1.15,
            epsilon: 1e-3,
            bolus_window: 11,
            glucagon_window: 23,
            glucagon_cap: 300.0,
            exercise_glucagon: 100.0,
            fallback_basal_threshold: 8.0,
            fallback_glucagon: 15.0,
            basal_resolution: 0.01,
            bolus_resolution: 0.1,
            glucagon_resolution: 0.01,
            log_si_band: 1.0,
        }
    }
}

/// Patient-specific dosing factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DosingFactors {
    /// Nominal basal rate [mU/min].
    pub nominal_basal: f64,
    /// Insulin sensitivity factor [(mmol/L)/U].
    pub isf: f64,
    /// Insulin-to-carbohydrate ratio [g/U].
    pub icr: f64,
}

/// One interval's pump command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PumpCommand {
    /// Basal rate [mU/min].
    pub uba: f64,
    /// Bolus rate over one interval [mU/min].
    pub ubo: f64,
    /// Glucagon rate [ug/min].
    pub ug: f64,
    pub quantized: bool,
}

impl PumpCommand {
    pub fn is_exclusive(&self) -> bool {
        !(self.ug > 0.0 && (self.uba > 0.0 || self.ubo > 0.0))
    }
}

/// Upper bounds for one interval's command (lower bounds are zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandBounds {
    pub uba: f64,
    pub ubo: f64,
    pub ug: f64,
}

impl CommandBounds {
    /// Bounds for what the pump may actually deliver: allowances floored at
    /// `epsilon` only keep the optimiser's box open and are dropped to zero.
    pub fn deliverable(&self, config: &DosingConfig) -> Self {
        let cut = |v: f64| if v <= config.epsilon { 0.0 } else { v };
        Self {
            uba: self.uba,
            ubo: cut(self.ubo),
            ug: cut(self.ug),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExerciseEvent {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosingState {
    pub mode: Mode,
    /// Delivered bolus rates of the most recent intervals, newest last.
    bolus_history: VecDeque<f64>,
    /// Delivered glucagon rates of the most recent intervals, newest last.
    glucagon_history: VecDeque<f64>,
    /// Time [min] and size [g] of the last announced meal.
    pub last_meal: Option<(f64, f64)>,
    pub exercise_active: bool,
    /// Correction allowance carried over while a meal is recent [mU/min].
    pub correction_carry: f64,
    /// Identified initial logSI, centre of the clipping band.
    pub log_si_reference: f64,
}

impl DosingState {
    pub fn new(config: &DosingConfig, log_si_reference: f64) -> Self {
        Self {
            mode: Mode::Insulin,
            bolus_history: core::iter::repeat_n(0.0, config.bolus_window).collect(),
            glucagon_history: core::iter::repeat_n(0.0, config.glucagon_window).collect(),
            last_meal: None,
            exercise_active: false,
            correction_carry: 0.0,
            log_si_reference,
        }
    }

    pub fn bolus_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.bolus_history.iter().copied()
    }

    pub fn glucagon_history(&self) -> impl Iterator<Item = f64> + '_ {
        self.glucagon_history.iter().copied()
    }

    fn meal_recent(&self, t: f64, config: &DosingConfig) -> bool {
        self.last_meal
            .is_some_and(|(tm, _)| t >= tm && t - tm < config.meal_window)
    }

    /// Registers an announced meal: the bolus history restarts.
    pub fn announce_meal(&mut self, t: f64, grams: f64) {
        self.last_meal = Some((t, grams));
        self.bolus_history.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Hormone for the coming interval, with hysteresis between the two
    /// thresholds and forced insulin shortly after a meal.
    pub fn switch_mode(&mut self, g: f64, t: f64, config: &DosingConfig) -> Mode {
        let (low, high) = if self.exercise_active {
            (config.exercise_glucagon_threshold, config.exercise_insulin_threshold)
        } else {
            (config.glucagon_threshold, config.insulin_threshold)
        };
        self.mode = if self.meal_recent(t, config) {
            Mode::Insulin
        } else if g < low {
            Mode::Glucagon
        } else if g > high {
            Mode::Insulin
        } else {
            self.mode
        };
        self.mode
    }

    /// Largest bolus rate allowed in the coming interval [mU/min].
    pub fn bolus_bound(&mut self, g: f64, t: f64, factors: &DosingFactors, config: &DosingConfig) -> f64 {
        let ts = config.interval;
        let announced_now = self.last_meal.is_some_and(|(tm, _)| (t - tm).abs() < 1e-9);
        let recent = self.meal_recent(t, config);
        if announced_now || !recent {
            let units = (g - config.correction_threshold) / factors.isf;
            self.correction_carry = (units * 1000.0 / ts).max(0.0);
        }
        let meal = match self.last_meal {
            Some((_, grams)) if recent => (config.bolus_allowance * grams / factors.icr * 1000.0 / ts).max(0.0),
            _ => 0.0,
        };
        let history: f64 = self.bolus_history.iter().sum();
        (self.correction_carry + meal - history).max(config.epsilon)
    }

    /// Glucagon still allowed in the current window [ug].
    pub fn glucagon_available(&self, config: &DosingConfig) -> f64 {
        let given: f64 = self.glucagon_history.iter().sum::<f64>() * config.interval;
        (config.glucagon_cap - given).max(0.0)
    }

    /// Largest glucagon rate allowed in the coming interval [ug/min].
    pub fn glucagon_bound(&self, config: &DosingConfig) -> f64 {
        (self.glucagon_available(config) / config.interval).max(config.epsilon)
    }

    /// Applies exercise start or end; returns the rate [ug/min] of the
    /// glucagon bolus to give in the coming interval, if any.
    pub fn exercise_adjust(
        &mut self,
        spec: &mut OcpSpec,
        g: f64,
        event: Option<ExerciseEvent>,
        config: &DosingConfig,
    ) -> Option<f64> {
        let mut bolus = None;
        match event {
            Some(ExerciseEvent::Start) => {
                self.exercise_active = true;
                if g < config.exercise_glucagon_threshold {
                    let amount = config.exercise_glucagon.min(self.glucagon_available(config));
                    if amount > 0.0 {
                        bolus = Some(amount / config.interval);
                    }
                }
            }
            Some(ExerciseEvent::End) => self.exercise_active = false,
            None => {}
        }
        spec.setpoint = self.setpoint(config);
        bolus
    }

    pub fn setpoint(&self, config: &DosingConfig) -> f64 {
        if self.exercise_active {
            config.exercise_setpoint
        } else {
            config.setpoint
        }
    }

    /// Records the command actually delivered in the interval just planned.
    pub fn record_delivery(&mut self, cmd: &PumpCommand) {
        self.bolus_history.pop_front();
        self.bolus_history.push_back(cmd.ubo.max(0.0));
        self.glucagon_history.pop_front();
        self.glucagon_history.push_back(cmd.ug.max(0.0));
    }

    /// Bounds of the coming interval for the current mode.
    pub fn bounds(&mut self, g: f64, t: f64, factors: &DosingFactors, config: &DosingConfig) -> CommandBounds {
        let ubo = self.bolus_bound(g, t, factors, config);
        let ug = self.glucagon_bound(config);
        match self.mode {
            Mode::Insulin => CommandBounds {
                uba: basal_bound(factors.nominal_basal).1,
                ubo,
                ug: 0.0,
            },
            Mode::Glucagon => CommandBounds { uba: 0.0, ubo: 0.0, ug },
        }
    }
}

/// Basal bounds: zero to twice the nominal rate.
pub fn basal_bound(nominal: f64) -> (f64, f64) {
    (0.0, 2.0 * nominal.max(0.0))
}

/// Writes the interval-0 bounds into `spec`. Later intervals keep the basal
/// range; their bolus is limited to `epsilon` since the allowance is spent
/// in the interval it is granted for, while glucagon keeps the full bound.
pub fn apply_bounds(spec: &mut OcpSpec, bounds: &CommandBounds, nominal_basal: f64, config: &DosingConfig) {
    match spec.mode {
        Mode::Insulin => {
            let (lo, hi) = basal_bound(nominal_basal);
            spec.set_bounds(0, lo, hi);
            spec.set_bounds(1, 0.0, config.epsilon);
            spec.upper[1] = bounds.ubo;
        }
        Mode::Glucagon => spec.set_bounds(0, 0.0, bounds.ug),
    }
    spec.nominal_basal.iter_mut().for_each(|v| *v = nominal_basal);
}

fn round_to_grid(value: f64, resolution: f64, bound: f64) -> f64 {
    if !(value > 0.0) {
        return 0.0;
    }
    // the nudge keeps decimal ties such as 0.25 / 0.1 on the away-from-zero side
    let nudge = 1.0 + 1e-12;
    let mut steps = (value / resolution * nudge).round();
    if steps * resolution > bound {
        steps = (bound / resolution * nudge).floor();
    }
    (steps * resolution).max(0.0)
}

/// Rounds to the pump resolutions (nearest, ties away from zero) and keeps
/// the result within `bounds` by rounding down where needed.
pub fn quantize(cmd: &PumpCommand, bounds: &CommandBounds, config: &DosingConfig) -> PumpCommand {
    let ts = config.interval;
    // basal U/h, bolus U per interval, glucagon ug/h
    let basal = round_to_grid(cmd.uba * 0.06, config.basal_resolution, bounds.uba * 0.06);
    let bolus = round_to_grid(cmd.ubo * ts / 1000.0, config.bolus_resolution, bounds.ubo * ts / 1000.0);
    let glucagon = round_to_grid(cmd.ug * 60.0, config.glucagon_resolution, bounds.ug * 60.0);
    PumpCommand {
        uba: basal / 0.06,
        ubo: bolus * 1000.0 / ts,
        ug: glucagon / 60.0,
        quantized: true,
    }
}

/// Open-loop rule used when the optimiser fails.
pub fn fallback(g: f64, nominal_basal: f64, state: &DosingState, config: &DosingConfig) -> PumpCommand {
    let uba = if g <= config.fallback_basal_threshold { 0.0 } else { nominal_basal };
    let ug = if g < config.glucagon_threshold {
        config.fallback_glucagon.min(state.glucagon_available(config)) / config.interval
    } else {
        0.0
    };
    PumpCommand {
        uba,
        ubo: 0.0,
        ug,
        quantized: false,
    }
}

/// Insulin-sensitivity guard for the filter: freezes logSI diffusion after
/// meals, decorrelates logSI at announcements and clips it to a band around
/// the identified initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct SiGuard {
    pub reference: f64,
    pub band: f64,
    /// Identified diffusion coefficient.
    pub sigma_si: f64,
    pub meal_window: f64,
    pub interval: f64,
    /// Announcement times [min].
    pub meals: Vec<f64>,
}

impl SiGuard {
    pub fn new(reference: f64, sigma_si: f64, config: &DosingConfig) -> Self {
        Self {
            reference,
            band: config.log_si_band,
            sigma_si,
            meal_window: config.meal_window,
            interval: config.interval,
            meals: Vec::new(),
        }
    }

    /// Diffusion coefficient for the prediction starting at `t`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        let recent = self.meals.iter().any(|&tm| t >= tm && t - tm < self.meal_window);
        if recent {
            0.0
        } else {
            self.sigma_si
        }
    }

    pub fn on_meal(&mut self, t: f64, belief: &mut FilterBelief) {
        self.meals.push(t);
        belief.decorrelate(idx::LOG_SI);
    }

    pub fn clip(&self, belief: &mut FilterBelief) {
        let v = &mut belief.mean[idx::LOG_SI];
        *v = v.clamp(self.reference - self.band, self.reference + self.band);
    }
}

impl FilterHook for SiGuard {
    fn before_predict(&mut self, k: usize, params: &mut CtrlParams) {
        params.sigma_si = self.sigma_at(k as f64 * self.interval);
    }

    fn before_update(&mut self, k: usize, belief: &mut FilterBelief) {
        let t = k as f64 * self.interval;
        if self.meals.iter().any(|&tm| (tm - t).abs() < 1e-9) {
            belief.decorrelate(idx::LOG_SI);
        }
    }

    fn after_update(&mut self, _k: usize, belief: &mut FilterBelief) {
        self.clip(belief);
    }
}
