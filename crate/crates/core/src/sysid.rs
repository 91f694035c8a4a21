//! Maximum-likelihood identification of the control model from CGM and
//! dosing records.
//!
//! The likelihood is the prediction-error decomposition produced by the
//! CD-EKF: with innovations `e_k` and variances `R_e,k` over `N+1` samples,
//!
//! `V = (N+1)/2 ln(2 pi) + 1/2 sum_k [ ln R_e,k + e_k^2 / R_e,k ]`.
//!
//! `estimate` minimises `V` over log-transformed kinetic parameters, the two
//! diffusion coefficients and the initial glucose, interstitial glucose and
//! log insulin sensitivity, using Nelder-Mead with seeded restarts.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cdekf::{default_initial_covariance, predict, update, FilterConfig, InnovationRecord};
use crate::error::{Error, Result};
use crate::model_ctrl::{
    ctrl_diffusion, ctrl_vector_field, CtrlInputs, CtrlMatrix, CtrlParams, CtrlState,
    IdentifiedSubset,
};
use crate::numerics::{em_step, wiener_increment, IntegratorSpec, Method};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::units::{meal_rate, SAMPLE_TIME};

/// Minimum record length (12 h of 5-min samples).
pub const MIN_SAMPLES: usize = 144;

/// Value returned by [`nll`] when the filter fails, so the optimiser retreats.
pub const NLL_SENTINEL: f64 = 1e10;

/// A CGM and dosing record on a uniform 5-min grid. Inputs at index `k` are
/// held over `[t_k, t_{k+1})`; meals are announced carbohydrate grams.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IdDataset {
    pub t: Vec<f64>,
    pub cgm: Vec<f64>,
    pub uba: Vec<f64>,
    pub ubo: Vec<f64>,
    pub ug: Vec<f64>,
    pub meal_g: Vec<f64>,
}

impl IdDataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        let columns = [
            ("cgm", &self.cgm),
            ("uba", &self.uba),
            ("ubo", &self.ubo),
            ("ug", &self.ug),
            ("meal_g", &self.meal_g),
        ];
        for (name, col) in columns {
            if col.len() != n {
                return Err(Error::Dataset(format!(
                    "column {name} has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        if n < MIN_SAMPLES {
            return Err(Error::Dataset(format!(
                "{n} samples, at least {MIN_SAMPLES} required"
            )));
        }
        for (k, w) in self.t.windows(2).enumerate() {
            if ((w[1] - w[0]) - SAMPLE_TIME).abs() > 1e-9 {
                return Err(Error::Dataset(format!(
                    "gap or jitter in time grid at row {}",
                    k + 1
                )));
            }
        }
        for (name, col) in columns {
            if let Some(k) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!(
                    "missing or non-finite {name} at row {k}"
                )));
            }
        }
        for (name, col) in &columns[1..] {
            if let Some(k) = col.iter().position(|v| *v < 0.0) {
                return Err(Error::Dataset(format!("negative {name} at row {k}")));
            }
        }
        Ok(())
    }

    /// Zero-order-hold control-model inputs, meals as one-interval pulses.
    pub fn inputs(&self) -> Vec<CtrlInputs> {
        (0..self.len())
            .map(|k| CtrlInputs {
                uba: self.uba[k],
                ubo: self.ubo[k],
                ug: self.ug[k],
                meal: meal_rate(self.meal_g[k], SAMPLE_TIME),
            })
            .collect()
    }
}

/// Negative log-likelihood of a scalar innovation sequence.
pub fn negative_log_likelihood(records: &[InnovationRecord]) -> f64 {
    let n = records.len() as f64;
    let sum: f64 = records
        .iter()
        .map(|r| r.variance.ln() + r.innovation * r.innovation / r.variance)
        .sum();
    0.5 * n * (2.0 * PI).ln() + 0.5 * sum
}

fn filtered_nll(
    params: &CtrlParams,
    x0: &CtrlState,
    p0: &CtrlMatrix,
    ys: &[f64],
    inputs: &[CtrlInputs],
    config: &FilterConfig,
) -> Result<f64> {
    let mut belief = crate::cdekf::FilterBelief::new(x0, *p0, 0.0);
    let mut acc = 0.0;
    for (k, &y) in ys.iter().enumerate() {
        if k > 0 {
            belief = predict(&belief, &inputs[k - 1], params, SAMPLE_TIME, config)?;
        }
        let (post, rec) = update(&belief, y, params)?;
        acc += rec.variance.ln() + rec.innovation * rec.innovation / rec.variance;
        belief = post;
    }
    Ok(0.5 * ys.len() as f64 * (2.0 * PI).ln() + 0.5 * acc)
}

/// Negative log-likelihood of `data` for the identified values `theta` on top
/// of `fixed`; [`NLL_SENTINEL`] if the filter fails or the value is not finite.
pub fn nll(
    theta: &IdentifiedSubset,
    data: &IdDataset,
    fixed: &CtrlParams,
    config: &FilterConfig,
) -> f64 {
    let params = theta.apply(fixed);
    if params.validate().is_err() {
        return NLL_SENTINEL;
    }
    let inputs = data.inputs();
    match filtered_nll(
        &params,
        &theta.initial,
        &default_initial_covariance(),
        &data.cgm,
        &inputs,
        config,
    ) {
        Ok(v) if v.is_finite() => v.min(NLL_SENTINEL),
        _ => NLL_SENTINEL,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta: IdentifiedSubset,
    pub nll: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateOptions {
    pub simplex: NelderMeadOptions,
    pub restarts: usize,
    /// Log-space half-width of restart perturbations.
    pub perturbation: f64,
    pub seed: u64,
    pub filter: FilterConfig,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            simplex: NelderMeadOptions::default(),
            restarts: 5,
            perturbation: 1.3f64.ln(),
            seed: 0,
            filter: FilterConfig::default(),
        }
    }
}

const N_THETA: usize = 9;

fn encode(theta: &IdentifiedSubset) -> [f64; N_THETA] {
    [
        theta.k_m.ln(),
        theta.tau_d.ln(),
        theta.v_g.ln(),
        theta.egp.ln(),
        theta.sigma_g.ln(),
        theta.sigma_si.ln(),
        theta.initial.g.ln(),
        theta.initial.gi.ln(),
        theta.initial.log_si,
    ]
}

fn decode(z: &[f64], fixed: &CtrlParams, basal: f64) -> IdentifiedSubset {
    let mut initial = CtrlState::basal(fixed, basal, z[6].exp(), z[8]);
    initial.gi = z[7].exp();
    IdentifiedSubset {
        k_m: z[0].exp(),
        tau_d: z[1].exp(),
        v_g: z[2].exp(),
        egp: z[3].exp(),
        sigma_g: z[4].exp(),
        sigma_si: z[5].exp(),
        initial,
    }
}

fn check_init(theta: &IdentifiedSubset) -> Result<()> {
    let positive = [
        theta.k_m,
        theta.tau_d,
        theta.v_g,
        theta.egp,
        theta.sigma_g,
        theta.sigma_si,
        theta.initial.g,
        theta.initial.gi,
    ];
    if positive.iter().all(|v| v.is_finite() && *v > 0.0) && theta.initial.log_si.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "initial guess must be strictly positive".into(),
        ))
    }
}

/// Maximum-likelihood estimate of the identified subset.
///
/// The insulin chain of the initial state sits at the steady state of the
/// first basal rate; meal and glucagon compartments start empty.
pub fn estimate(
    data: &IdDataset,
    fixed: &CtrlParams,
    init: &IdentifiedSubset,
    options: &EstimateOptions,
) -> Result<EstimationResult> {
    data.validate()?;
    check_init(init)?;
    let basal = data.uba[0];
    let inputs = data.inputs();
    let p0 = default_initial_covariance();
    let objective = |z: &[f64]| {
        let theta = decode(z, fixed, basal);
        let params = theta.apply(fixed);
        if params.validate().is_err() {
            return NLL_SENTINEL;
        }
        match filtered_nll(
            &params,
            &theta.initial,
            &p0,
            &data.cgm,
            &inputs,
            &options.filter,
        ) {
            Ok(v) if v.is_finite() => v.min(NLL_SENTINEL),
            _ => NLL_SENTINEL,
        }
    };

    let start = encode(init);
    let mut best = nelder_mead(objective, &start, &options.simplex);
    let mut iterations = best.iterations;
    let mut evaluations = best.evaluations;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.restarts {
        let perturbed: Vec<f64> = best
            .x
            .iter()
            .map(|v| v + options.perturbation * (2.0 * unit_uniform(&mut rng) - 1.0))
            .collect();
        let run = nelder_mead(objective, &perturbed, &options.simplex);
        iterations += run.iterations;
        evaluations += run.evaluations;
        if run.value < best.value {
            best = run;
        }
    }

    if !(best.value < NLL_SENTINEL) {
        return Err(Error::Estimation(format!(
            "no start produced a finite likelihood ({evaluations} evaluations)"
        )));
    }
    Ok(EstimationResult {
        theta: decode(&best.x, fixed, basal).canonical(),
        nll: best.value,
        iterations,
        evaluations,
        converged: best.converged,
    })
}

/// Population start for [`estimate`]: kinetic constants from `fixed`, glucose
/// at the first CGM reading and the insulin sensitivity that makes the first
/// basal rate hold that glucose.
pub fn initial_guess(fixed: &CtrlParams, data: &IdDataset) -> Result<IdentifiedSubset> {
    data.validate()?;
    let g0 = data.cgm[0].max(1.0);
    let basal = data.uba[0];
    let ip = basal / fixed.c_i;
    let demand = fixed.egp / g0 - fixed.gezi;
    if !(ip > 0.0 && demand > 0.0) {
        return Err(Error::Estimation(format!(
            "no positive insulin sensitivity balances glucose {g0} at basal {basal}"
        )));
    }
    let initial = CtrlState::basal(fixed, basal, g0, (demand / ip).ln());
    Ok(IdentifiedSubset::from_params(fixed, initial))
}

/// Noise-free RK4 simulation of the control model over the record's inputs;
/// returns the predicted CGM (interstitial glucose) at each sample.
pub fn simulate_ctrl(params: &CtrlParams, x0: &CtrlState, data: &IdDataset, substeps: usize) -> Result<Vec<f64>> {
    let spec = IntegratorSpec::new(Method::ExplicitRk4, SAMPLE_TIME, substeps)?;
    let mut x = x0.to_vector();
    let inputs = data.inputs();
    let mut out = Vec::with_capacity(inputs.len());
    for (k, u) in inputs.iter().enumerate() {
        out.push(x[crate::model_ctrl::idx::GI]);
        x = spec.integrate(ctrl_vector_field(u, params), k as f64 * SAMPLE_TIME, &x)?;
    }
    Ok(out)
}

fn unit_uniform<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Simulates the control model itself as an SDE (Euler-Maruyama with
/// `substeps` per sample) and samples GI with white Gaussian noise of
/// variance `params.r`. Used for self-consistency studies.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_dataset(
    params: &CtrlParams,
    x0: &CtrlState,
    uba: &[f64],
    ubo: &[f64],
    meal_g: &[f64],
    substeps: usize,
    seed: u64,
) -> Result<(IdDataset, Vec<CtrlState>)> {
    let n = uba.len();
    if ubo.len() != n || meal_g.len() != n {
        return Err(Error::Dataset("input columns differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = ctrl_diffusion(params);
    let h = SAMPLE_TIME / substeps as f64;
    let sd = params.r.sqrt();
    let mut x = x0.to_vector();
    let mut data = IdDataset::default();
    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * SAMPLE_TIME;
        let noise: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        data.t.push(t);
        data.cgm.push(x[crate::model_ctrl::idx::GI] + sd * noise);
        data.uba.push(uba[k]);
        data.ubo.push(ubo[k]);
        data.ug.push(0.0);
        data.meal_g.push(meal_g[k]);
        states.push(CtrlState::from_vector(&x));
        let u = CtrlInputs {
            uba: uba[k],
            ubo: ubo[k],
            ug: 0.0,
            meal: meal_rate(meal_g[k], SAMPLE_TIME),
        };
        for s in 0..substeps {
            let dw = wiener_increment(&mut rng, h);
            x = em_step(
                ctrl_vector_field(&u, params),
                &sigma,
                t + s as f64 * h,
                &x,
                h,
                &dw,
            )?;
        }
    }
    Ok((data, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_sim::SimParams;

    #[test]
    fn single_perfect_prediction() {
        let v = negative_log_likelihood(&[InnovationRecord {
            innovation: 0.0,
            variance: 1.0,
            prediction: 5.0,
        }]);
        assert!((v - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((v - 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn doubling_variance_adds_half_log_two_per_sample() {
        let recs: Vec<_> = (0..7)
            .map(|k| InnovationRecord {
                innovation: 0.0,
                variance: 0.3 + k as f64,
                prediction: 0.0,
            })
            .collect();
        let doubled: Vec<_> = recs
            .iter()
            .map(|r| InnovationRecord {
                variance: 2.0 * r.variance,
                ..*r
            })
            .collect();
        let diff = negative_log_likelihood(&doubled) - negative_log_likelihood(&recs);
        assert!((diff - 7.0 * 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    fn toy_dataset(n: usize) -> (IdDataset, CtrlParams, IdentifiedSubset) {
        let fixed = CtrlParams::population(&SimParams::nominal());
        let ip = 8.0 / fixed.c_i;
        let log_si = ((fixed.egp / 6.0 - fixed.gezi) / ip).ln();
        let x0 = CtrlState::basal(&fixed, 8.0, 6.0, log_si);
        let mut meal = alloc::vec![0.0; n];
        meal[20] = 60.0;
        let mut ubo = alloc::vec![0.0; n];
        ubo[20] = 1000.0;
        let (data, _) =
            synthesize_dataset(&fixed, &x0, &alloc::vec![8.0; n], &ubo, &meal, 10, 3).unwrap();
        (data, fixed, IdentifiedSubset::from_params(&fixed, x0))
    }

    #[test]
    fn nll_is_deterministic_and_ignores_metadata() {
        let (data, fixed, theta) = toy_dataset(150);
        let a = nll(&theta, &data, &fixed, &FilterConfig::default());
        let b = nll(&theta, &data, &fixed, &FilterConfig::default());
        assert_eq!(a.to_bits(), b.to_bits());
        // shifting the clock is metadata only
        let mut shifted = data.clone();
        shifted.t.iter_mut().for_each(|t| *t += 600.0);
        assert_eq!(
            a.to_bits(),
            nll(&theta, &shifted, &fixed, &FilterConfig::default()).to_bits()
        );
    }

    #[test]
    fn dataset_validation() {
        let (data, _, _) = toy_dataset(150);
        assert!(data.validate().is_ok());
        let mut short = data.clone();
        short.t.truncate(100);
        assert!(short.validate().is_err());
        let mut gap = data.clone();
        gap.t[50] += 5.0;
        assert!(gap.validate().is_err());
        let mut missing = data.clone();
        missing.cgm[10] = f64::NAN;
        assert!(missing.validate().is_err());
        let mut ragged = data;
        ragged.ubo.pop();
        assert!(ragged.validate().is_err());
    }

    #[test]
    fn diverging_filter_returns_sentinel() {
        let (data, fixed, mut theta) = toy_dataset(150);
        theta.sigma_g = 1e6;
        assert_eq!(
            nll(&theta, &data, &fixed, &FilterConfig::default()),
            NLL_SENTINEL
        );
    }
}
