use alloc::vec::Vec;

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::dosing::DosingFactors;
use crate::error::{Error, Result};
use super::scenario::advance_plant;
use crate::model_sim::{
    basal_for_glucose, equilibrium_state, plasma_glucose, SimInputs, SimParams, SimState,
};
use crate::units::{meal_rate, units_to_mu_per_min, SAMPLE_TIME};

/// How each patient's insulin-to-carbohydrate ratio is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum IcrRule {
    /// `ICR = numerator / TDI`, with the total daily insulin taken as the
    /// daily basal divided by `basal_fraction`.
    TotalDailyInsulin { numerator: f64, basal_fraction: f64 },
    /// Titration on the plant: a `grams` meal with a mealtime bolus starting
    /// from rest; the ratio comes from the bolus that minimises the squared
    /// glucose deviation from the start over `hours`, reduced if needed so
    /// that the bolus scaled by `allowance` never takes glucose below `floor`.
    MealChallenge {
        grams: f64,
        hours: f64,
        floor: f64,
        allowance: f64,
    },
}

impl Default for IcrRule {
    fn default() -> Self {
        IcrRule::MealChallenge {
            grams: 50.0,
            hours: 6.0,
            floor: 4.5,
            allowance: 1.0,
        }
    }
}

impl IcrRule {
    /// Ratio [g/U] for a patient resting at `glucose` on `nominal_basal` [mU/min].
    pub fn icr(&self, sim: &SimParams, nominal_basal: f64, glucose: f64) -> Result<f64> {
        match *self {
            IcrRule::TotalDailyInsulin {
                numerator,
                basal_fraction,
            } => {
                let daily_basal = nominal_basal * 1440.0 / 1000.0;
                Ok(numerator * basal_fraction / daily_basal)
            }
            IcrRule::MealChallenge {
                grams,
                hours,
                floor,
                allowance,
            } => {
                let bolus = titrate_bolus(sim, nominal_basal, glucose, grams, hours, floor, allowance)?;
                Ok(grams / bolus)
            }
        }
    }
}

/// Glucose response to a meal with bolus `units` given in the first interval:
/// (sum of squared deviations from `glucose`, minimum glucose).
fn meal_challenge(
    sim: &SimParams,
    basal: f64,
    glucose: f64,
    grams: f64,
    hours: f64,
    units: f64,
) -> Result<(f64, f64)> {
    let mut x = equilibrium_state(sim, basal, glucose).to_vector();
    let intervals = (hours * 60.0 / SAMPLE_TIME).round() as usize;
    let (mut cost, mut lowest) = (0.0, f64::INFINITY);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..intervals {
        let first = k == 0;
        let inputs = SimInputs {
            uba: basal,
            ubo: if first { units_to_mu_per_min(units, SAMPLE_TIME) } else { 0.0 },
            ug: 0.0,
            meal: if first { meal_rate(grams, SAMPLE_TIME) } else { 0.0 },
            hr: sim.hr_0,
        };
        let t = k as f64 * SAMPLE_TIME;
        x = advance_plant(&x, &inputs, |_| sim.hr_0, sim, t, 10, 0.0, &mut rng)?;
        let g = plasma_glucose(&SimState::from_vector(&x), sim);
        cost += (g - glucose) * (g - glucose);
        lowest = lowest.min(g);
    }
    Ok((cost, lowest))
}

fn titrate_bolus(
    sim: &SimParams,
    basal: f64,
    glucose: f64,
    grams: f64,
    hours: f64,
    floor: f64,
    allowance: f64,
) -> Result<f64> {
    let eval = |u: f64| meal_challenge(sim, basal, glucose, grams, hours, u);
    // bracket: grow until the response undershoots the floor
    let mut hi = 1.0;
    while eval(hi)?.1 >= floor {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Numerical("meal challenge never reaches the floor"));
        }
    }
    // largest safe bolus; the minimum glucose falls monotonically with the dose
    let (mut lo_safe, mut hi_safe) = (0.0, hi);
    for _ in 0..40 {
        let mid = 0.5 * (lo_safe + hi_safe);
        if eval(mid)?.1 >= floor {
            lo_safe = mid;
        } else {
            hi_safe = mid;
        }
    }
    // golden-section search for the least-squares bolus inside [0, safe]
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.0, lo_safe / allowance);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (eval(c)?.0, eval(d)?.0);
    for _ in 0..40 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c)?.0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d)?.0;
        }
    }
    let bolus = 0.5 * (a + b);
    if bolus > 1e-3 {
        Ok(bolus)
    } else {
        Err(Error::Numerical("meal challenge gives no admissible bolus"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    /// Log-normal spread applied to every positive constant except the Hill
    /// exponent.
    pub sigma: f64,
    /// Equilibrium glucose at the nominal basal [mmol/L].
    pub target_glucose: f64,
    /// [(mmol/L)/U]
    pub isf: f64,
    pub icr_rule: IcrRule,
    /// Draws allowed per patient before giving up.
    pub max_attempts: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            target_glucose: 6.0,
            isf: 2.0,
            icr_rule: IcrRule::default(),
            max_attempts: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPatient {
    pub id: usize,
    pub sim: SimParams,
    /// [mU/min]
    pub nominal_basal: f64,
    /// [(mmol/L)/U]
    pub isf: f64,
    /// [g/U]
    pub icr: f64,
    /// Seed for this patient's sensor noise and identification experiment.
    pub seed: u64,
}

impl VirtualPatient {
    pub fn factors(&self) -> DosingFactors {
        DosingFactors {
            nominal_basal: self.nominal_basal,
            isf: self.isf,
            icr: self.icr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.nominal_basal) && ok(self.isf) && ok(self.icr)) {
            return Err(Error::InvalidParameter(alloc::format!(
                "patient {}: basal, ISF and ICR must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

fn perturb(nominal: &SimParams, sigma: f64, rng: &mut ChaCha8Rng) -> SimParams {
    let mut values = [0.0; 28];
    for (slot, (name, v)) in values.iter_mut().zip(nominal.fields()) {
        let z: f64 = StandardNormal.sample(rng);
        *slot = if name == "n" { v } else { v * (sigma * z).exp() };
    }
    let mut p = SimParams::from_values(&values);
    p.a_g = p.a_g.min(1.0);
    p
}

/// Draws `n` patients around the nominal parameter set. Draws whose resting
/// equilibrium cannot reach the target glucose are discarded and redrawn
/// from the same stream.
pub fn generate_cohort(n: usize, seed: u64, config: &CohortConfig) -> Result<Vec<VirtualPatient>> {
    if n == 0 {
        return Err(Error::InvalidParameter("cohort size must be >= 1".into()));
    }
    let nominal = SimParams::nominal();
    (0..n)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * id as u64));
            for _ in 0..config.max_attempts {
                let sim = perturb(&nominal, config.sigma, &mut rng);
                if sim.validate().is_err() {
                    continue;
                }
                let Ok(basal) = basal_for_glucose(&sim, config.target_glucose) else {
                    continue;
                };
                if !(basal.is_finite() && basal > 0.0) {
                    continue;
                }
                let Ok(icr) = config.icr_rule.icr(&sim, basal, config.target_glucose) else {
                    continue;
                };
                return Ok(VirtualPatient {
                    id,
                    sim,
                    nominal_basal: basal,
                    isf: config.isf,
                    icr,
                    seed: derive_seed(seed, 2 * id as u64 + 1),
                });
            }
            Err(Error::InvalidParameter(alloc::format!(
                "patient {id}: no admissible draw in {} attempts",
                config.max_attempts
            )))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_sim::{equilibrium_state, plasma_glucose, sim_derivative, SimInputs};

    #[test]
    fn fixed_seed_reproduces_the_cohort() {
        let a = generate_cohort(5, 11, &CohortConfig::default()).unwrap();
        let b = generate_cohort(5, 11, &CohortConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(5, 12, &CohortConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spread_gives_nominal_copies() {
        let cfg = CohortConfig {
            sigma: 0.0,
            ..CohortConfig::default()
        };
        let cohort = generate_cohort(3, 1, &cfg).unwrap();
        for p in &cohort {
            assert_eq!(p.sim, SimParams::nominal());
            assert_eq!(p.nominal_basal, cohort[0].nominal_basal);
        }
    }

    #[test]
    fn every_patient_rests_at_the_target() {
        for p in generate_cohort(20, 5, &CohortConfig::default()).unwrap() {
            assert!(p.validate().is_ok());
            // independent oracle: integrate the resting plant until it settles
            let mut x = equilibrium_state(&p.sim, p.nominal_basal, 6.0);
            let u = SimInputs {
                uba: p.nominal_basal,
                ..SimInputs::resting(&p.sim)
            };
            let d = sim_derivative(&x, &u, &p.sim, 0.0).unwrap().to_vector();
            assert!(d.amax() < 1e-9, "patient {} drifts: {d}", p.id);
            for _ in 0..20_000 {
                let d = sim_derivative(&x, &u, &p.sim, 0.0).unwrap();
                let mut v = x.to_vector();
                v += d.to_vector() * 0.5;
                x = crate::model_sim::SimState::from_vector(&v);
            }
            assert!((plasma_glucose(&x, &p.sim) - 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn icr_rule_matches_hand_value() {
        // 0.9 U/h basal: 21.6 U/day, TDI 43.2 U, ICR = 500 / 43.2
        let rule = IcrRule::TotalDailyInsulin {
            numerator: 500.0,
            basal_fraction: 0.5,
        };
        let icr = rule.icr(&SimParams::nominal(), 15.0, 6.0).unwrap();
        assert!((icr - 500.0 / 43.2).abs() < 1e-12);
    }
}
