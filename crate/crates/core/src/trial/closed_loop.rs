use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::cgm::{CgmConfig, CgmNoise};
use super::cohort::VirtualPatient;
use super::scenario::advance_plant;
use super::stats::{tir_stats, GlycemicBands, TirStats};
use super::{derive_seed, Protocol};
use crate::cdekf::{default_initial_covariance, predict, update, FilterBelief, FilterConfig};
use crate::dosing::{
    apply_bounds, fallback, quantize, CommandBounds, DosingConfig, DosingState, PumpCommand,
    SiGuard,
};
use crate::error::{Error, Result};
use crate::model_ctrl::{idx, CtrlInputs, CtrlParams, CtrlState, IdentifiedSubset};
use crate::model_sim::{equilibrium_state, plasma_glucose, SimInputs, SimState, SimVector};
use crate::nmpc::{sqp_solve, transcribe, Mode, OcpSpec, SolveStatus, SqpOptions, WarmStart};
use crate::units::{meal_rate, SAMPLE_TIME};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub dosing: DosingConfig,
    pub cgm: CgmConfig,
    /// Plant Euler steps per sampling interval.
    pub plant_steps: usize,
    /// Diffusion on the plant's accessible glucose mass; zero disables it.
    pub plant_sigma: f64,
    /// Plasma glucose of the resting start [mmol/L].
    pub initial_glucose: f64,
    pub horizon_intervals: usize,
    pub prediction_substeps: usize,
    pub sqp: SqpOptions,
    pub filter: FilterConfig,
    pub bands: GlycemicBands,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            dosing: DosingConfig::default(),
            cgm: CgmConfig::default(),
            plant_steps: 10,
            plant_sigma: 0.0,
            initial_glucose: 6.0,
            horizon_intervals: crate::nmpc::DEFAULT_HORIZON_INTERVALS,
            prediction_substeps: 2,
            sqp: SqpOptions::default(),
            filter: FilterConfig::default(),
            bands: GlycemicBands::default(),
        }
    }
}

/// Control model used inside the loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSetup {
    pub params: CtrlParams,
    /// Reference insulin sensitivity for the filter start and its clipping band.
    pub log_si: f64,
}

impl ControllerSetup {
    pub fn from_identified(theta: &IdentifiedSubset, fixed: &CtrlParams) -> Self {
        Self {
            params: theta.apply(fixed),
            log_si: theta.initial.log_si,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandSource {
    Optimizer,
    Fallback,
    ExerciseBolus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalLog {
    /// Start of the interval [min].
    pub t: f64,
    /// True plasma glucose [mmol/L].
    pub g: f64,
    pub cgm: f64,
    /// Filtered plasma glucose.
    pub g_hat: f64,
    pub log_si_hat: f64,
    pub mode: Mode,
    /// Delivered rates.
    pub uba: f64,
    pub ubo: f64,
    pub ug: f64,
    /// Command before quantization.
    pub requested: PumpCommand,
    /// Bounds the delivered command had to respect.
    pub bounds: CommandBounds,
    pub source: CommandSource,
    pub status: Option<SolveStatus>,
    pub iterations: usize,
    pub kkt: f64,
    pub meal_g: f64,
    pub heart_rate: f64,
}

impl IntervalLog {
    pub fn command(&self) -> PumpCommand {
        PumpCommand {
            uba: self.uba,
            ubo: self.ubo,
            ug: self.ug,
            quantized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub patient: usize,
    pub valid: bool,
    pub error: Option<String>,
    pub intervals: Vec<IntervalLog>,
    pub stats: TirStats,
}

struct Loop<'a> {
    patient: &'a VirtualPatient,
    setup: &'a ControllerSetup,
    protocol: &'a Protocol,
    config: &'a TrialConfig,
    dosing: DosingState,
    guard: SiGuard,
    belief: Option<FilterBelief>,
    warm: Option<WarmStart>,
    plant: SimVector,
    cgm: CgmNoise,
    plant_rng: ChaCha8Rng,
}

impl Loop<'_> {
    fn step(&mut self, k: usize) -> Result<IntervalLog> {
        let cfg = &self.config.dosing;
        let params = &self.setup.params;
        let ub = self.patient.nominal_basal;
        let t = k as f64 * SAMPLE_TIME;
        let sim = &self.patient.sim;
        let state = SimState::from_vector(&self.plant);
        let g_true = plasma_glucose(&state, sim);
        let y = self.cgm.sample(state.gi);

        let mut belief = match self.belief.take() {
            Some(b) => b,
            None => {
                let x0 = CtrlState::basal(params, ub, y, self.setup.log_si);
                FilterBelief::new(&x0, default_initial_covariance(), t)
            }
        };
        let meal = self.protocol.meal_in(t, SAMPLE_TIME);
        let announced = meal.filter(|m| m.1).map_or(0.0, |m| m.0);
        if announced > 0.0 {
            self.dosing.announce_meal(t, announced);
            self.guard.on_meal(t, &mut belief);
        }
        belief = update(&belief, y, params)?.0;
        self.guard.clip(&mut belief);
        let g_hat = belief.mean[idx::G];

        let mut spec = OcpSpec::new(Mode::Insulin, ub);
        let exercise = self.protocol.exercise_event_in(t, SAMPLE_TIME);
        let exercise_bolus = self.dosing.exercise_adjust(&mut spec, g_hat, exercise, cfg);
        let mode = self.dosing.switch_mode(g_hat, t, cfg);
        let mut bounds = self.dosing.bounds(g_hat, t, &self.patient.factors(), cfg);

        let (requested, source, status, iterations, kkt, logged_mode) = if let Some(rate) = exercise_bolus {
            bounds = CommandBounds { uba: 0.0, ubo: 0.0, ug: rate };
            self.warm = None;
            let cmd = PumpCommand { ug: rate, ..PumpCommand::default() };
            (cmd, CommandSource::ExerciseBolus, None, 0, 0.0, Mode::Glucagon)
        } else {
            let setpoint = spec.setpoint;
            spec = OcpSpec::new(mode, ub);
            spec.setpoint = setpoint;
            let n = self.config.horizon_intervals;
            if n != spec.intervals {
                let nu = mode.input_count();
                spec.intervals = n;
                spec.lower = alloc::vec![0.0; n * nu];
                spec.upper = alloc::vec![0.0; n * nu];
                spec.nominal_basal = alloc::vec![ub; n];
                spec.meal_forecast = alloc::vec![0.0; n];
            }
            spec.substeps = self.config.prediction_substeps;
            apply_bounds(&mut spec, &bounds, ub, cfg);
            spec.meal_forecast[0] = meal_rate(announced, SAMPLE_TIME);
            let solved = transcribe(&spec, &belief.state(), params)
                .and_then(|nlp| sqp_solve(&nlp, self.warm.as_ref(), &self.config.sqp).map(|s| (nlp, s)));
            match solved {
                Ok((nlp, sol)) => {
                    let u = sol.first();
                    let cmd = match mode {
                        Mode::Insulin => PumpCommand { uba: u[0], ubo: u[1], ..PumpCommand::default() },
                        Mode::Glucagon => PumpCommand { ug: u[0], ..PumpCommand::default() },
                    };
                    self.warm = WarmStart::shift(&nlp, &sol).ok();
                    (cmd, CommandSource::Optimizer, Some(sol.status), sol.iterations, sol.kkt, mode)
                }
                Err(_) => {
                    self.warm = None;
                    let cmd = fallback(g_hat, ub, &self.dosing, cfg);
                    (cmd, CommandSource::Fallback, None, 0, f64::NAN, mode)
                }
            }
        };

        let limits = bounds.deliverable(cfg);
        let delivered = quantize(&requested, &limits, cfg);
        self.dosing.record_delivery(&delivered);

        let all_meals = meal.map_or(0.0, |m| m.0);
        let heart_rate = sim.hr_0 + self.protocol.exercise_intensity(t);
        let inputs = SimInputs {
            uba: delivered.uba,
            ubo: delivered.ubo,
            ug: delivered.ug,
            meal: meal_rate(all_meals, SAMPLE_TIME),
            hr: heart_rate,
        };
        let protocol = self.protocol;
        self.plant = advance_plant(
            &self.plant,
            &inputs,
            |s| sim.hr_0 + protocol.exercise_intensity(s),
            sim,
            t,
            self.config.plant_steps,
            self.config.plant_sigma,
            &mut self.plant_rng,
        )?;

        let mut step_params = *params;
        step_params.sigma_si = self.guard.sigma_at(t);
        let ctrl_inputs = CtrlInputs {
            uba: delivered.uba,
            ubo: delivered.ubo,
            ug: delivered.ug,
            meal: meal_rate(announced, SAMPLE_TIME),
        };
        self.belief = Some(predict(&belief, &ctrl_inputs, &step_params, SAMPLE_TIME, &self.config.filter)?);

        Ok(IntervalLog {
            t,
            g: g_true,
            cgm: y,
            g_hat,
            log_si_hat: belief.mean[idx::LOG_SI],
            mode: logged_mode,
            uba: delivered.uba,
            ubo: delivered.ubo,
            ug: delivered.ug,
            requested,
            bounds: limits,
            source,
            status,
            iterations,
            kkt,
            meal_g: all_meals,
            heart_rate,
        })
    }
}

/// Runs `protocol` with the patient's plant in closed loop with the filter,
/// the optimiser and the dosing heuristics. A plant or filter failure ends
/// the run early and marks the record invalid.
pub fn run_closed_loop(
    patient: &VirtualPatient,
    setup: &ControllerSetup,
    protocol: &Protocol,
    config: &TrialConfig,
) -> Result<TrialRecord> {
    patient.validate()?;
    setup.params.validate()?;
    protocol.validate()?;
    if config.plant_steps == 0 || config.horizon_intervals == 0 {
        return Err(Error::InvalidParameter("plant steps and horizon must be >= 1".into()));
    }
    let sim = &patient.sim;
    let start_basal = if (config.initial_glucose - 6.0).abs() < 1e-12 {
        patient.nominal_basal
    } else {
        crate::model_sim::basal_for_glucose(sim, config.initial_glucose)?
    };
    let mut lp = Loop {
        patient,
        setup,
        protocol,
        config,
        dosing: DosingState::new(&config.dosing, setup.log_si),
        guard: SiGuard::new(setup.log_si, setup.params.sigma_si, &config.dosing),
        belief: None,
        warm: None,
        plant: equilibrium_state(sim, start_basal, config.initial_glucose).to_vector(),
        cgm: CgmNoise::new(config.cgm, derive_seed(patient.seed, 10)),
        plant_rng: ChaCha8Rng::seed_from_u64(derive_seed(patient.seed, 11)),
    };

    let n = (protocol.duration / SAMPLE_TIME).round() as usize;
    let mut intervals = Vec::with_capacity(n);
    let mut error = None;
    for k in 0..n {
        match lp.step(k) {
            Ok(log) => intervals.push(log),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
    }
    let mut record = TrialRecord {
        patient: patient.id,
        valid: error.is_none(),
        error,
        intervals,
        stats: TirStats::default(),
    };
    record.stats = tir_stats(&record, &config.bands);
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{generate_cohort, CohortConfig, Event};

    fn nominal_patient() -> VirtualPatient {
        let cfg = CohortConfig {
            sigma: 0.0,
            ..CohortConfig::default()
        };
        generate_cohort(1, 3, &cfg).unwrap().remove(0)
    }

    /// Control model mapped from the plant, at rest at 6 mmol/L on the
    /// patient's basal rate.
    fn matched_setup(p: &VirtualPatient) -> ControllerSetup {
        let params = CtrlParams::population(&p.sim);
        let ip = p.nominal_basal / params.c_i;
        let log_si = ((params.egp / 6.0 - params.gezi) / ip).ln();
        ControllerSetup { params, log_si }
    }

    fn noiseless() -> TrialConfig {
        let mut cfg = TrialConfig::default();
        cfg.cgm.sd = 0.0;
        cfg
    }

    #[test]
    fn quiet_day_holds_the_setpoint_without_boluses() {
        let p = nominal_patient();
        let rec = run_closed_loop(&p, &matched_setup(&p), &Protocol::quiet(1440.0), &noiseless()).unwrap();
        assert!(rec.valid);
        assert_eq!(rec.intervals.len(), 288);
        for l in &rec.intervals {
            assert!((l.g - 6.0).abs() <= 0.3, "t = {}: G = {}", l.t, l.g);
            assert_eq!(l.ubo, 0.0, "bolus at t = {}", l.t);
            assert_eq!(l.ug, 0.0);
        }
        assert!((rec.stats.normoglycemia() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn announced_dinner_gets_a_capped_meal_bolus() {
        let p = nominal_patient();
        let protocol = Protocol {
            duration: 360.0,
            events: alloc::vec![Event::Meal {
                t: 60.0,
                grams: 75.0,
                announced: true
            }],
        };
        let cfg = noiseless();
        let rec = run_closed_loop(&p, &matched_setup(&p), &protocol, &cfg).unwrap();
        let at_meal = &rec.intervals[12];
        assert_eq!(at_meal.meal_g, 75.0);
        assert!(at_meal.ubo > 0.0);
        assert!(rec.intervals[..12].iter().all(|l| l.ubo == 0.0));
        // the allowance is 1.15 x grams / ICR; the delivered bolus is the
        // requested one rounded to the pump grid
        let allowance = 1.15 * 75.0 / p.icr * 1000.0 / SAMPLE_TIME;
        let step = cfg.dosing.bolus_resolution * 1000.0 / SAMPLE_TIME;
        assert!((at_meal.bounds.ubo - allowance).abs() < 1e-9 * allowance);
        assert!(at_meal.ubo <= at_meal.bounds.ubo);
        assert!((at_meal.ubo - at_meal.requested.ubo).abs() <= 0.5 * step + 1e-9);
        // later in the window only the unspent allowance remains
        let mut spent = 0.0;
        for l in &rec.intervals[12..23] {
            let left = allowance - spent;
            let expected = if left > cfg.dosing.epsilon { left } else { 0.0 };
            assert!((l.bounds.ubo - expected).abs() < 1e-9 * allowance, "t = {}: {}", l.t, l.bounds.ubo);
            spent += l.ubo;
        }
    }

    #[test]
    fn exercise_from_normoglycemia_gives_one_glucagon_bolus() {
        let p = nominal_patient();
        let protocol = Protocol {
            duration: 240.0,
            events: alloc::vec![Event::Exercise {
                t: 60.0,
                end: 105.0,
                intensity: 50.0
            }],
        };
        let rec = run_closed_loop(&p, &matched_setup(&p), &protocol, &noiseless()).unwrap();
        let boluses: Vec<_> = rec
            .intervals
            .iter()
            .filter(|l| l.source == CommandSource::ExerciseBolus)
            .collect();
        assert_eq!(boluses.len(), 1);
        assert_eq!(boluses[0].t, 60.0);
        assert!((boluses[0].ug * SAMPLE_TIME - 100.0).abs() < 1e-9);
        assert_eq!(boluses[0].ubo + boluses[0].uba, 0.0);
        assert!(rec.intervals.iter().all(|l| l.g > 3.9));
    }

    #[test]
    fn filter_failure_marks_the_record_invalid() {
        let p = nominal_patient();
        let mut cfg = noiseless();
        cfg.filter.trace_cap = 1e-30;
        let rec = run_closed_loop(&p, &matched_setup(&p), &Protocol::quiet(60.0), &cfg).unwrap();
        assert!(!rec.valid);
        assert!(rec.error.is_some());
        assert!(rec.intervals.len() < 12);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let p = nominal_patient();
        let protocol = Protocol {
            duration: 300.0,
            events: alloc::vec![Event::Meal {
                t: 30.0,
                grams: 50.0,
                announced: true
            }],
        };
        let cfg = TrialConfig::default();
        let a = run_closed_loop(&p, &matched_setup(&p), &protocol, &cfg).unwrap();
        let b = run_closed_loop(&p, &matched_setup(&p), &protocol, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn commands_respect_bounds_and_exclusivity() {
        let p = nominal_patient();
        let rec = run_closed_loop(&p, &matched_setup(&p), &Protocol::default_trial(), &TrialConfig::default()).unwrap();
        assert!(rec.valid);
        for l in &rec.intervals {
            assert!(l.uba <= l.bounds.uba + 1e-12 && l.ubo <= l.bounds.ubo + 1e-12 && l.ug <= l.bounds.ug + 1e-12);
            assert!(l.ug == 0.0 || l.uba + l.ubo == 0.0, "t = {}", l.t);
        }
        let total: f64 = rec.stats.bands.iter().sum();
        assert!((total - 100.0).abs() < 1e-9);
    }
}
