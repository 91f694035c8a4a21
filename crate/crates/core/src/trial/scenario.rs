use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::cgm::{CgmConfig, CgmNoise};
use super::cohort::VirtualPatient;
use super::{derive_seed, Event, Protocol};
use crate::error::{Error, Result};
use crate::model_sim::{
    equilibrium_state, plasma_glucose, sim_diffusion, sim_vector_field, SimInputs, SimParams,
    SimState, SimVector,
};
use crate::numerics::{em_step, euler_step, wiener_increment};
use crate::sysid::IdDataset;
use crate::units::{meal_rate, units_to_mu_per_min, SAMPLE_TIME};

/// Open-loop experiment used to collect identification data: announced
/// meals with ratio boluses and a basal rate that changes every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentificationScenario {
    /// [min]
    pub duration: f64,
    /// (time [min], carbohydrate [g])
    pub meals: Vec<(f64, f64)>,
    /// Length of a constant-basal block [min].
    pub basal_block: f64,
    /// Basal range as fractions of the nominal rate.
    pub basal_low: f64,
    pub basal_high: f64,
    pub initial_glucose: f64,
    pub plant_steps: usize,
    /// Diffusion on the accessible glucose mass [mmol/sqrt(min)].
    pub plant_sigma: f64,
    pub cgm: CgmConfig,
}

impl Default for IdentificationScenario {
    fn default() -> Self {
        Self {
            duration: 2160.0,
            meals: vec![(60.0, 75.0), (840.0, 50.0), (1140.0, 75.0), (1320.0, 15.0), (1500.0, 75.0)],
            basal_block: 120.0,
            basal_low: 0.7,
            basal_high: 1.3,
            initial_glucose: 6.0,
            plant_steps: 10,
            plant_sigma: 0.0,
            cgm: CgmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    pub dataset: IdDataset,
    /// Plasma glucose at each sample [mmol/L].
    pub true_g: Vec<f64>,
}

/// Advances the plant over one sampling interval with inputs held except
/// for the heart rate, which follows `hr(t)` at every sub-step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance_plant<R: RngCore>(
    x: &SimVector,
    inputs: &SimInputs,
    hr: impl Fn(f64) -> f64,
    params: &SimParams,
    t0: f64,
    steps: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<SimVector> {
    let h = SAMPLE_TIME / steps as f64;
    let diffusion = sim_diffusion(sigma);
    let mut x = *x;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let u = SimInputs { hr: hr(t), ..*inputs };
        x = if sigma > 0.0 {
            let dw = wiener_increment::<1, _>(rng, h);
            em_step(sim_vector_field(&u, params), &diffusion, t, &x, h, &dw)?
        } else {
            euler_step(sim_vector_field(&u, params), t, &x, h)?
        };
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("plant state is not finite"));
    }
    Ok(x)
}

fn unit_uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Simulates the scenario on the patient's plant and records CGM and inputs.
pub fn generate_identification_data(
    patient: &VirtualPatient,
    scenario: &IdentificationScenario,
    seed: u64,
) -> Result<ScenarioRecord> {
    patient.validate()?;
    if scenario.plant_steps == 0 || !(scenario.duration >= SAMPLE_TIME) {
        return Err(Error::InvalidParameter("empty identification scenario".into()));
    }
    let protocol = Protocol {
        duration: scenario.duration,
        events: scenario
            .meals
            .iter()
            .map(|&(t, grams)| Event::Meal {
                t,
                grams,
                announced: true,
            })
            .collect(),
    };
    protocol.validate()?;

    let sim = &patient.sim;
    let ub = patient.nominal_basal;
    let n = (scenario.duration / SAMPLE_TIME).round() as usize;
    let mut basal_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut plant_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut cgm = CgmNoise::new(scenario.cgm, derive_seed(seed, 2));

    let start_insulin = if (scenario.initial_glucose - 6.0).abs() < 1e-12 {
        ub
    } else {
        crate::model_sim::basal_for_glucose(sim, scenario.initial_glucose)?
    };
    let mut x: SimVector = equilibrium_state(sim, start_insulin, scenario.initial_glucose).to_vector();

    let mut data = IdDataset::default();
    let mut true_g = Vec::with_capacity(n);
    let mut basal = ub;
    for k in 0..n {
        let t = k as f64 * SAMPLE_TIME;
        if k > 0 && (t % scenario.basal_block).abs() < 1e-9 {
            let f = scenario.basal_low + (scenario.basal_high - scenario.basal_low) * unit_uniform(&mut basal_rng);
            basal = f * ub;
        }
        let state = SimState::from_vector(&x);
        true_g.push(plasma_glucose(&state, sim));
        let grams = protocol.meal_in(t, SAMPLE_TIME).map_or(0.0, |(g, _)| g);
        let bolus = if grams > 0.0 {
            units_to_mu_per_min(grams / patient.icr, SAMPLE_TIME)
        } else {
            0.0
        };
        data.t.push(t);
        data.cgm.push(cgm.sample(state.gi));
        data.uba.push(basal);
        data.ubo.push(bolus);
        data.ug.push(0.0);
        data.meal_g.push(grams);

        let inputs = SimInputs {
            uba: basal,
            ubo: bolus,
            ug: 0.0,
            meal: meal_rate(grams, SAMPLE_TIME),
            hr: sim.hr_0,
        };
        x = advance_plant(
            &x,
            &inputs,
            |_| sim.hr_0,
            sim,
            t,
            scenario.plant_steps,
            scenario.plant_sigma,
            &mut plant_rng,
        )?;
    }
    Ok(ScenarioRecord { dataset: data, true_g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{generate_cohort, CohortConfig};

    fn nominal_patient() -> VirtualPatient {
        let cfg = CohortConfig {
            sigma: 0.0,
            ..CohortConfig::default()
        };
        generate_cohort(1, 0, &cfg).unwrap().remove(0)
    }

    #[test]
    fn dataset_shape_and_validity() {
        let p = nominal_patient();
        let rec = generate_identification_data(&p, &IdentificationScenario::default(), 4).unwrap();
        let d = &rec.dataset;
        assert_eq!(d.len(), 432);
        assert!(d.validate().is_ok());
        assert_eq!(d.meal_g.iter().filter(|g| **g > 0.0).count(), 5);
        assert_eq!(d.meal_g[12], 75.0);
        assert!(d.ubo[12] > 0.0 && d.ubo[13] == 0.0);
        for &u in &d.uba {
            assert!(u >= 0.7 * p.nominal_basal - 1e-12 && u <= 1.3 * p.nominal_basal + 1e-12);
        }
        // a meal must raise glucose well above the fasting level
        let peak = rec.true_g[12..60].iter().cloned().fold(0.0, f64::max);
        assert!(peak > 7.0, "peak {peak}");
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let p = nominal_patient();
        let a = generate_identification_data(&p, &IdentificationScenario::default(), 8).unwrap();
        let b = generate_identification_data(&p, &IdentificationScenario::default(), 8).unwrap();
        assert_eq!(a, b);
    }
}
