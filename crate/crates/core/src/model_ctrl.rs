//! Stochastic control model: an MVP-type glucose-insulin core with meal,
//! glucagon and CGM-lag subsystems.
//!
//! State order: `[ISC, IP, IEFF, G, logSI, D1, D2, Q1G, Q2G, GI]`.

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_sim::SimParams;
use crate::numerics::{Matrix, Vector};

pub const CTRL_DIM: usize = 10;
pub const CTRL_NOISE_DIM: usize = 2;
/// Number of entries in [`CtrlInputs::to_vector`].
pub const CTRL_INPUT_DIM: usize = 4;

pub type CtrlVector = Vector<CTRL_DIM>;
pub type CtrlMatrix = Matrix<CTRL_DIM, CTRL_DIM>;

pub mod idx {
    pub const ISC: usize = 0;
    pub const IP: usize = 1;
    pub const IEFF: usize = 2;
    pub const G: usize = 3;
    pub const LOG_SI: usize = 4;
    pub const D1: usize = 5;
    pub const D2: usize = 6;
    pub const Q1G: usize = 7;
    pub const Q2G: usize = 8;
    pub const GI: usize = 9;
}

pub const CTRL_COMPONENTS: [&str; CTRL_DIM] = [
    "ISC", "IP", "IEFF", "G", "logSI", "D1", "D2", "Q1G", "Q2G", "GI",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CtrlState {
    pub isc: f64,
    pub ip: f64,
    pub ieff: f64,
    pub g: f64,
    pub log_si: f64,
    pub d1: f64,
    pub d2: f64,
    pub q1g: f64,
    pub q2g: f64,
    pub gi: f64,
}

impl CtrlState {
    pub fn to_vector(&self) -> CtrlVector {
        CtrlVector::from([
            self.isc,
            self.ip,
            self.ieff,
            self.g,
            self.log_si,
            self.d1,
            self.d2,
            self.q1g,
            self.q2g,
            self.gi,
        ])
    }

    pub fn from_vector(v: &CtrlVector) -> Self {
        Self {
            isc: v[0],
            ip: v[1],
            ieff: v[2],
            g: v[3],
            log_si: v[4],
            d1: v[5],
            d2: v[6],
            q1g: v[7],
            q2g: v[8],
            gi: v[9],
        }
    }

    /// Insulin chain at the steady state of a constant basal `uba`, glucose
    /// and its interstitial copy at `g`, empty meal and glucagon depots.
    pub fn basal(params: &CtrlParams, uba: f64, g: f64, log_si: f64) -> Self {
        let ip = uba / params.c_i;
        Self {
            isc: ip,
            ip,
            ieff: log_si.exp() * ip,
            g,
            log_si,
            gi: g,
            ..Self::default()
        }
    }
}

/// Control-model constants. `k2` and `p2` are tied to `k1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtrlParams {
    /// Inverse insulin absorption time constant [1/min].
    pub k_1: f64,
    /// Insulin clearance [L/min].
    #[serde(rename = "C_I")]
    pub c_i: f64,
    /// Glucose effectiveness at zero insulin [1/min].
    #[serde(rename = "GEZI")]
    pub gezi: f64,
    /// Endogenous glucose production [(mmol/L)/min].
    #[serde(rename = "EGP")]
    pub egp: f64,
    /// Glucagon gain [(mmol/L)/(µg min)].
    #[serde(rename = "K_Glu")]
    pub k_glu: f64,
    /// Gut-to-plasma rate [1/min].
    pub k_m: f64,
    #[serde(rename = "V_G")]
    pub v_g: f64,
    #[serde(rename = "A_G")]
    pub a_g: f64,
    #[serde(rename = "tau_D")]
    pub tau_d: f64,
    #[serde(rename = "tau_Glu")]
    pub tau_glu: f64,
    #[serde(rename = "tau_IG")]
    pub tau_ig: f64,
    #[serde(rename = "sigma_G")]
    pub sigma_g: f64,
    #[serde(rename = "sigma_SI")]
    pub sigma_si: f64,
    /// CGM measurement-noise variance [(mmol/L)^2].
    #[serde(rename = "R")]
    pub r: f64,
}

/// Default fixed CGM noise variance, (0.25 mmol/L)^2.
pub const DEFAULT_MEASUREMENT_VARIANCE: f64 = 0.0625;

impl CtrlParams {
    pub fn k_2(&self) -> f64 {
        self.k_1
    }

    pub fn p_2(&self) -> f64 {
        self.k_1
    }

    /// Population prior derived from a (nominal) plant parameter set.
    ///
    /// Insulin kinetics, meal bioavailability, glucagon and CGM-lag constants
    /// are read off the plant; the glucose core gets a generic effectiveness
    /// and an EGP that matches the plant's unsuppressed production.
    pub fn population(sim: &SimParams) -> Self {
        Self {
            k_1: 1.0 / sim.tau_s,
            c_i: sim.v_i * sim.k_e,
            gezi: 1.0e-3,
            egp: sim.egp_0 / sim.v_g,
            k_glu: sim.k_glu,
            k_m: 1.0 / sim.tau_d,
            v_g: sim.v_g,
            a_g: sim.a_g,
            tau_d: sim.tau_d,
            tau_glu: sim.tau_glu,
            tau_ig: sim.tau_ig,
            sigma_g: 0.05,
            sigma_si: 0.01,
            r: DEFAULT_MEASUREMENT_VARIANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_1", self.k_1),
            ("C_I", self.c_i),
            ("k_m", self.k_m),
            ("V_G", self.v_g),
            ("A_G", self.a_g),
            ("tau_D", self.tau_d),
            ("tau_Glu", self.tau_glu),
            ("tau_IG", self.tau_ig),
            ("R", self.r),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(alloc::format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        let nonneg = [
            ("GEZI", self.gezi),
            ("EGP", self.egp),
            ("K_Glu", self.k_glu),
            ("sigma_G", self.sigma_g),
            ("sigma_SI", self.sigma_si),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(alloc::format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Inputs of the control model over one zero-order-hold interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CtrlInputs {
    /// [mU/min]
    pub uba: f64,
    /// [mU/min]
    pub ubo: f64,
    /// [µg/min]
    pub ug: f64,
    /// Meal carbohydrate rate [mmol/min].
    pub meal: f64,
}

impl CtrlInputs {
    pub fn to_vector(&self) -> Vector<CTRL_INPUT_DIM> {
        Vector::<CTRL_INPUT_DIM>::new(self.uba, self.ubo, self.ug, self.meal)
    }
}

/// Parameters estimated from data; everything else in [`CtrlParams`] is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedSubset {
    pub k_m: f64,
    #[serde(rename = "tau_D")]
    pub tau_d: f64,
    #[serde(rename = "V_G")]
    pub v_g: f64,
    #[serde(rename = "EGP")]
    pub egp: f64,
    #[serde(rename = "sigma_G")]
    pub sigma_g: f64,
    #[serde(rename = "sigma_SI")]
    pub sigma_si: f64,
    pub initial: CtrlState,
}

impl IdentifiedSubset {
    pub fn from_params(params: &CtrlParams, initial: CtrlState) -> Self {
        Self {
            k_m: params.k_m,
            tau_d: params.tau_d,
            v_g: params.v_g,
            egp: params.egp,
            sigma_g: params.sigma_g,
            sigma_si: params.sigma_si,
            initial,
        }
    }

    /// The meal response from an empty gut depends on `k_m` and `1/tau_d` only
    /// through their sum and product, so the two are interchangeable. This
    /// picks the representative with `k_m <= 1/tau_d`.
    pub fn canonical(self) -> Self {
        if self.k_m * self.tau_d > 1.0 {
            Self {
                k_m: 1.0 / self.tau_d,
                tau_d: 1.0 / self.k_m,
                ..self
            }
        } else {
            self
        }
    }

    /// Overlays the identified values on `fixed`.
    pub fn apply(&self, fixed: &CtrlParams) -> CtrlParams {
        CtrlParams {
            k_m: self.k_m,
            tau_d: self.tau_d,
            v_g: self.v_g,
            egp: self.egp,
            sigma_g: self.sigma_g,
            sigma_si: self.sigma_si,
            ..*fixed
        }
    }
}

fn check_finite(v: &CtrlVector) -> Result<()> {
    match v.iter().position(|c| !c.is_finite()) {
        Some(i) => Err(Error::ModelEvaluation {
            component: CTRL_COMPONENTS[i],
        }),
        None => Ok(()),
    }
}

/// Deterministic drift on the state vector.
#[inline]
pub fn drift_vector(x: &CtrlVector, u: &CtrlInputs, p: &CtrlParams) -> CtrlVector {
    use idx::*;
    let k1 = p.k_1;
    let si = x[LOG_SI].exp();
    let ra = p.k_m * x[D2] / p.v_g;
    CtrlVector::from([
        k1 * ((u.uba + u.ubo) / p.c_i - x[ISC]),
        p.k_2() * (x[ISC] - x[IP]),
        p.p_2() * (si * x[IP] - x[IEFF]),
        -(p.gezi + x[IEFF]) * x[G] + p.egp + ra + p.k_glu * x[Q2G],
        0.0,
        p.a_g * u.meal - x[D1] / p.tau_d,
        x[D1] / p.tau_d - p.k_m * x[D2],
        u.ug - x[Q1G] / p.tau_glu,
        (x[Q1G] - x[Q2G]) / p.tau_glu,
        (x[G] - x[GI]) / p.tau_ig,
    ])
}

pub fn ctrl_drift(
    state: &CtrlState,
    inputs: &CtrlInputs,
    params: &CtrlParams,
) -> Result<CtrlState> {
    let v = drift_vector(&state.to_vector(), inputs, params);
    check_finite(&v)?;
    Ok(CtrlState::from_vector(&v))
}

/// Vector-form drift for the integrators.
pub fn ctrl_vector_field<'a>(
    inputs: &'a CtrlInputs,
    params: &'a CtrlParams,
) -> impl FnMut(f64, &CtrlVector) -> Result<CtrlVector> + 'a {
    move |_t, x| {
        let v = drift_vector(x, inputs, params);
        check_finite(&v)?;
        Ok(v)
    }
}

/// Analytic state Jacobian of the drift.
pub fn drift_jacobian(x: &CtrlVector, p: &CtrlParams) -> CtrlMatrix {
    use idx::*;
    let k1 = p.k_1;
    let si = x[LOG_SI].exp();
    let mut a = CtrlMatrix::zeros();
    a[(ISC, ISC)] = -k1;
    a[(IP, ISC)] = p.k_2();
    a[(IP, IP)] = -p.k_2();
    a[(IEFF, IP)] = p.p_2() * si;
    a[(IEFF, IEFF)] = -p.p_2();
    a[(IEFF, LOG_SI)] = p.p_2() * si * x[IP];
    a[(G, IEFF)] = -x[G];
    a[(G, G)] = -(p.gezi + x[IEFF]);
    a[(G, D2)] = p.k_m / p.v_g;
    a[(G, Q2G)] = p.k_glu;
    a[(D1, D1)] = -1.0 / p.tau_d;
    a[(D2, D1)] = 1.0 / p.tau_d;
    a[(D2, D2)] = -p.k_m;
    a[(Q1G, Q1G)] = -1.0 / p.tau_glu;
    a[(Q2G, Q1G)] = 1.0 / p.tau_glu;
    a[(Q2G, Q2G)] = -1.0 / p.tau_glu;
    a[(GI, G)] = 1.0 / p.tau_ig;
    a[(GI, GI)] = -1.0 / p.tau_ig;
    a
}

/// Input Jacobian of the drift, columns ordered as [`CtrlInputs::to_vector`].
/// The drift is affine in the inputs, so this is state independent.
pub fn input_jacobian(p: &CtrlParams) -> Matrix<CTRL_DIM, CTRL_INPUT_DIM> {
    use idx::*;
    let mut b = Matrix::<CTRL_DIM, CTRL_INPUT_DIM>::zeros();
    b[(ISC, 0)] = p.k_1 / p.c_i;
    b[(ISC, 1)] = p.k_1 / p.c_i;
    b[(Q1G, 2)] = 1.0;
    b[(D1, 3)] = p.a_g;
    b
}

/// Diffusion matrix: `sigma_G` drives G, `sigma_SI` drives logSI.
pub fn ctrl_diffusion(params: &CtrlParams) -> Matrix<CTRL_DIM, CTRL_NOISE_DIM> {
    let mut m = Matrix::<CTRL_DIM, CTRL_NOISE_DIM>::zeros();
    m[(idx::G, 0)] = params.sigma_g;
    m[(idx::LOG_SI, 1)] = params.sigma_si;
    m
}

pub fn ctrl_output(state: &CtrlState) -> f64 {
    state.gi
}

/// Output row selecting GI.
pub fn output_jacobian() -> Matrix<1, CTRL_DIM> {
    let mut c = Matrix::<1, CTRL_DIM>::zeros();
    c[(0, idx::GI)] = 1.0;
    c
}
