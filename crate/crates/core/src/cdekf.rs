//! Continuous-discrete extended Kalman filter over the control model.
//!
//! Between samples the mean follows the drift and the covariance the
//! linearised Lyapunov equation `P' = A P + P A^T + sigma sigma^T`, both
//! integrated jointly with fixed-step RK4 so `A` is re-evaluated at every
//! stage along the mean trajectory. Measurements are scalar CGM readings of GI.

use alloc::vec::Vec;

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ctrl::{
    ctrl_diffusion, drift_jacobian, drift_vector, idx, CtrlInputs, CtrlMatrix, CtrlParams,
    CtrlState, CtrlVector, CTRL_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterBelief {
    pub mean: CtrlVector,
    pub cov: CtrlMatrix,
    /// [min]
    pub t: f64,
}

impl FilterBelief {
    pub fn new(mean: &CtrlState, cov: CtrlMatrix, t: f64) -> Self {
        Self {
            mean: mean.to_vector(),
            cov,
            t,
        }
    }

    pub fn state(&self) -> CtrlState {
        CtrlState::from_vector(&self.mean)
    }

    /// Zeroes the variance of `component` and all its covariances.
    pub fn decorrelate(&mut self, component: usize) {
        self.cov.row_mut(component).fill(0.0);
        self.cov.column_mut(component).fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnovationRecord {
    /// `y_k - yhat_{k|k-1}` [mmol/L]
    pub innovation: f64,
    /// Innovation variance [(mmol/L)^2].
    pub variance: f64,
    /// One-step prediction [mmol/L].
    pub prediction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Target RK4 step for the time update [min].
    pub step: f64,
    /// Covariance trace above which the filter is declared divergent.
    pub trace_cap: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            step: 2.5,
            trace_cap: 1e8,
        }
    }
}

/// Default initial covariance.
///
/// (1 mmol/L)^2 on G and GI, (0.2)^2 on logSI, (0.1)^2 on the insulin,
/// meal and glucagon compartments, and (1e-3 /min)^2 on the insulin effect
/// whose natural scale is three orders of magnitude below the others.
pub fn default_initial_covariance() -> CtrlMatrix {
    let mut p = CtrlMatrix::zeros();
    for i in [idx::ISC, idx::IP, idx::D1, idx::D2, idx::Q1G, idx::Q2G] {
        p[(i, i)] = 0.01;
    }
    p[(idx::IEFF, idx::IEFF)] = 1e-6;
    p[(idx::G, idx::G)] = 1.0;
    p[(idx::GI, idx::GI)] = 1.0;
    p[(idx::LOG_SI, idx::LOG_SI)] = 0.04;
    p
}

fn symmetrize(p: &mut CtrlMatrix) {
    for i in 0..CTRL_DIM {
        for j in (i + 1)..CTRL_DIM {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

fn joint_rhs(
    x: &CtrlVector,
    p: &CtrlMatrix,
    u: &CtrlInputs,
    params: &CtrlParams,
    q: &CtrlMatrix,
    stage: usize,
) -> Result<(CtrlVector, CtrlMatrix)> {
    let dx = drift_vector(x, u, params);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration { stage });
    }
    let ap = drift_jacobian(x, params) * p;
    Ok((dx, ap + ap.transpose() + q))
}

/// Time update over `dt` minutes with inputs held constant.
pub fn predict(
    belief: &FilterBelief,
    inputs: &CtrlInputs,
    params: &CtrlParams,
    dt: f64,
    config: &FilterConfig,
) -> Result<FilterBelief> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(
            "prediction horizon must be > 0".into(),
        ));
    }
    let steps = ((dt / config.step).round() as usize).max(1);
    let h = dt / steps as f64;
    let sigma = ctrl_diffusion(params);
    let q = sigma * sigma.transpose();

    let mut x = belief.mean;
    let mut p = belief.cov;
    for _ in 0..steps {
        let (k1x, k1p) = joint_rhs(&x, &p, inputs, params, &q, 1)?;
        let (k2x, k2p) = joint_rhs(
            &(x + k1x * (0.5 * h)),
            &(p + k1p * (0.5 * h)),
            inputs,
            params,
            &q,
            2,
        )?;
        let (k3x, k3p) = joint_rhs(
            &(x + k2x * (0.5 * h)),
            &(p + k2p * (0.5 * h)),
            inputs,
            params,
            &q,
            3,
        )?;
        let (k4x, k4p) = joint_rhs(&(x + k3x * h), &(p + k3p * h), inputs, params, &q, 4)?;
        x += (k1x + (k2x + k3x) * 2.0 + k4x) * (h / 6.0);
        p += (k1p + (k2p + k3p) * 2.0 + k4p) * (h / 6.0);
    }
    symmetrize(&mut p);
    let trace = p.trace();
    if !(trace.is_finite() && trace <= config.trace_cap) {
        return Err(Error::FilterDivergence { trace });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite predicted mean"));
    }
    Ok(FilterBelief {
        mean: x,
        cov: p,
        t: belief.t + dt,
    })
}

/// Measurement update with a CGM reading `y` of GI.
pub fn update(
    belief: &FilterBelief,
    y: f64,
    params: &CtrlParams,
) -> Result<(FilterBelief, InnovationRecord)> {
    let gi = idx::GI;
    let prediction = belief.mean[gi];
    let variance = belief.cov[(gi, gi)] + params.r;
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Numerical("innovation variance is not positive"));
    }
    let innovation = y - prediction;
    let pc = belief.cov.column(gi).into_owned();
    let gain = pc / variance;
    let mean = belief.mean + gain * innovation;

    // Joseph form (I - K C) P (I - K C)^T + K R K^T keeps P positive semidefinite.
    let mut ikc = CtrlMatrix::identity();
    for i in 0..CTRL_DIM {
        ikc[(i, gi)] -= gain[i];
    }
    let mut cov = ikc * belief.cov * ikc.transpose() + gain * gain.transpose() * params.r;
    symmetrize(&mut cov);
    Ok((
        FilterBelief {
            mean,
            cov,
            t: belief.t,
        },
        InnovationRecord {
            innovation,
            variance,
            prediction,
        },
    ))
}

/// Closed-loop adjustments applied around the filter steps.
pub trait FilterHook {
    /// Before the time update over `[t_k, t_{k+1})`; may rewrite diffusion parameters.
    fn before_predict(&mut self, _k: usize, _params: &mut CtrlParams) {}
    /// Before the measurement update at sample `k`.
    fn before_update(&mut self, _k: usize, _belief: &mut FilterBelief) {}
    /// After the measurement update at sample `k`.
    fn after_update(&mut self, _k: usize, _belief: &mut FilterBelief) {}
}

/// Open-loop filtering without adjustments.
pub struct NoHooks;

impl FilterHook for NoHooks {}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterPass {
    pub innovations: Vec<InnovationRecord>,
    /// Filtered means at every sample.
    pub filtered: Vec<CtrlVector>,
    pub final_belief: FilterBelief,
}

/// Runs update/predict alternately over a record sampled every `interval`
/// minutes; `inputs[k]` is held over `[t_k, t_{k+1})`.
#[allow(clippy::too_many_arguments)]
pub fn filter_pass<H: FilterHook>(
    ys: &[f64],
    inputs: &[CtrlInputs],
    params: &CtrlParams,
    x0: &CtrlState,
    p0: &CtrlMatrix,
    interval: f64,
    config: &FilterConfig,
    hooks: &mut H,
) -> Result<FilterPass> {
    if ys.is_empty() || inputs.len() + 1 < ys.len() {
        return Err(Error::Dataset(
            "measurement and input sequences are misaligned".into(),
        ));
    }
    let mut belief = FilterBelief::new(x0, *p0, 0.0);
    let mut innovations = Vec::with_capacity(ys.len());
    let mut filtered = Vec::with_capacity(ys.len());
    let mut step_params = *params;
    for (k, &y) in ys.iter().enumerate() {
        if k > 0 {
            step_params = *params;
            hooks.before_predict(k - 1, &mut step_params);
            belief = predict(&belief, &inputs[k - 1], &step_params, interval, config)
                .map_err(|e| e.at_sample(k))?;
        }
        hooks.before_update(k, &mut belief);
        let (post, record) = update(&belief, y, &step_params).map_err(|e| e.at_sample(k))?;
        belief = post;
        hooks.after_update(k, &mut belief);
        innovations.push(record);
        filtered.push(belief.mean);
    }
    Ok(FilterPass {
        innovations,
        filtered,
        final_belief: belief,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ctrl::ctrl_vector_field;
    use crate::model_sim::SimParams;
    use crate::numerics::rk4_step;

    fn params() -> CtrlParams {
        CtrlParams::population(&SimParams::nominal())
    }

    fn equilibrium(p: &CtrlParams, uba: f64) -> CtrlState {
        let ip = uba / p.c_i;
        let log_si = ((p.egp / 6.0 - p.gezi) / ip).ln();
        CtrlState::basal(p, uba, 6.0, log_si)
    }

    #[test]
    fn zero_drift_zero_diffusion_keeps_belief() {
        let mut p = params();
        p.sigma_g = 0.0;
        p.sigma_si = 0.0;
        let s = CtrlState::default();
        // with everything empty only EGP drives G; remove it
        p.egp = 0.0;
        let b = FilterBelief::new(&s, CtrlMatrix::zeros(), 0.0);
        let next = predict(
            &b,
            &CtrlInputs::default(),
            &p,
            5.0,
            &FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(next.mean, b.mean);
        assert_eq!(next.cov, b.cov);
        assert_eq!(next.t, 5.0);
    }

    #[test]
    fn mean_matches_plain_rk4_without_diffusion() {
        let mut p = params();
        p.sigma_g = 0.0;
        p.sigma_si = 0.0;
        let s = CtrlState {
            g: 9.0,
            gi: 8.0,
            d1: 200.0,
            log_si: -7.0,
            ip: 5.0,
            ..CtrlState::default()
        };
        let u = CtrlInputs {
            uba: 6.0,
            meal: 10.0,
            ..CtrlInputs::default()
        };
        let b = FilterBelief::new(&s, default_initial_covariance(), 0.0);
        let next = predict(&b, &u, &p, 5.0, &FilterConfig::default()).unwrap();
        let mut x = s.to_vector();
        for i in 0..2 {
            x = rk4_step(ctrl_vector_field(&u, &p), 2.5 * i as f64, &x, 2.5).unwrap();
        }
        assert_eq!(next.mean, x);
    }

    #[test]
    fn scalar_update_by_hand() {
        let p = CtrlParams { r: 1.0, ..params() };
        let mut cov = CtrlMatrix::zeros();
        cov[(idx::GI, idx::GI)] = 1.0;
        let b = FilterBelief::new(&CtrlState::default(), cov, 0.0);
        let (post, rec) = update(&b, 2.0, &p).unwrap();
        assert_eq!(rec.innovation, 2.0);
        assert_eq!(rec.variance, 2.0);
        assert_eq!(post.mean[idx::GI], 1.0);
        assert_eq!(post.cov[(idx::GI, idx::GI)], 0.5);
    }

    #[test]
    fn uninformative_and_perfect_priors() {
        let p = CtrlParams {
            r: 1e12,
            ..params()
        };
        let s = CtrlState {
            g: 7.0,
            gi: 6.5,
            ..CtrlState::default()
        };
        let b = FilterBelief::new(&s, default_initial_covariance(), 0.0);
        let (post, _) = update(&b, 12.0, &p).unwrap();
        assert!((post.mean - b.mean).amax() < 1e-6);

        let b0 = FilterBelief::new(&s, CtrlMatrix::zeros(), 0.0);
        let (post0, rec) = update(&b0, 12.0, &params()).unwrap();
        assert_eq!(post0.mean, b0.mean);
        assert_eq!(rec.variance, params().r);
    }

    #[test]
    fn nonpositive_innovation_variance_is_an_error() {
        let p = CtrlParams { r: 0.0, ..params() };
        let b = FilterBelief::new(&CtrlState::default(), CtrlMatrix::zeros(), 0.0);
        assert!(matches!(update(&b, 1.0, &p), Err(Error::Numerical(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let p = params();
        let b = FilterBelief::new(
            &CtrlState::default(),
            default_initial_covariance() * 1e9,
            0.0,
        );
        assert!(matches!(
            predict(
                &b,
                &CtrlInputs::default(),
                &p,
                5.0,
                &FilterConfig::default()
            ),
            Err(Error::FilterDivergence { .. })
        ));
    }

    #[test]
    fn matched_equilibrium_gives_zero_innovations() {
        let mut p = params();
        p.sigma_g = 0.0;
        p.sigma_si = 0.0;
        let uba = 8.0;
        let x0 = equilibrium(&p, uba);
        let ys = [6.0; 20];
        let inputs = [CtrlInputs {
            uba,
            ..CtrlInputs::default()
        }; 19];
        let pass = filter_pass(
            &ys,
            &inputs,
            &p,
            &x0,
            &default_initial_covariance(),
            5.0,
            &FilterConfig::default(),
            &mut NoHooks,
        )
        .unwrap();
        for rec in &pass.innovations {
            assert!(rec.innovation.abs() < 1e-9);
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let p = params();
        let s = equilibrium(&p, 8.0);
        let mut b = FilterBelief::new(&s, default_initial_covariance(), 0.0);
        let u = CtrlInputs {
            uba: 8.0,
            meal: 30.0,
            ..CtrlInputs::default()
        };
        for k in 0..100 {
            b = predict(&b, &u, &p, 5.0, &FilterConfig::default()).unwrap();
            b = update(&b, 6.0 + 0.01 * k as f64, &p).unwrap().0;
            assert_eq!(b.cov, b.cov.transpose());
            let eig = b.cov.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-8 * b.cov.trace());
        }
    }
}
