//! Extended Hovorka patient model used as the virtual plant.
//!
//! The state is the 16-vector
//! `[S1, S2, I, x1, x2, x3, D1, D2, Q1G, Q2G, E1, TE, E2, Q1, Q2, GI]`:
//! a two-compartment subcutaneous insulin chain, plasma insulin, three
//! insulin actions, a two-compartment gut, a two-compartment glucagon depot,
//! the heart-rate driven exercise states, two glucose pools and the
//! interstitial glucose seen by the CGM.

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const SIM_DIM: usize = 16;
pub type SimVector = Vector<SIM_DIM>;

/// Lower bound applied to `TE` when it divides `E2`.
pub const TE_FLOOR: f64 = 1e-3;

/// Hypoglycaemic threshold of the non-insulin dependent flux [mmol/L].
pub const F01_THRESHOLD: f64 = 4.5;
/// Renal threshold [mmol/L].
pub const RENAL_THRESHOLD: f64 = 9.0;
/// Renal clearance rate [1/min].
pub const RENAL_RATE: f64 = 0.003;

/// Component names in state order.
pub const SIM_COMPONENTS: [&str; SIM_DIM] = [
    "S1", "S2", "I", "x1", "x2", "x3", "D1", "D2", "Q1G", "Q2G", "E1", "TE", "E2", "Q1", "Q2", "GI",
];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimState {
    pub s1: f64,
    pub s2: f64,
    pub insulin: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub d1: f64,
    pub d2: f64,
    pub q1g: f64,
    pub q2g: f64,
    pub e1: f64,
    pub te: f64,
    pub e2: f64,
    pub q1: f64,
    pub q2: f64,
    pub gi: f64,
}

impl SimState {
    pub fn to_vector(&self) -> SimVector {
        SimVector::from([
            self.s1,
            self.s2,
            self.insulin,
            self.x1,
            self.x2,
            self.x3,
            self.d1,
            self.d2,
            self.q1g,
            self.q2g,
            self.e1,
            self.te,
            self.e2,
            self.q1,
            self.q2,
            self.gi,
        ])
    }

    pub fn from_vector(v: &SimVector) -> Self {
        Self {
            s1: v[0],
            s2: v[1],
            insulin: v[2],
            x1: v[3],
            x2: v[4],
            x3: v[5],
            d1: v[6],
            d2: v[7],
            q1g: v[8],
            q2g: v[9],
            e1: v[10],
            te: v[11],
            e2: v[12],
            q1: v[13],
            q2: v[14],
            gi: v[15],
        }
    }
}

/// Patient constants, keyed in config files by their conventional symbols.
///
/// Rates are absolute (already multiplied by body weight where the
/// literature reports per-kg values). `egp_0` is a flux [mmol/min] and
/// `k_glu` is read as (mmol/L)/(µg min).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    #[serde(rename = "tau_S")]
    pub tau_s: f64,
    #[serde(rename = "V_I")]
    pub v_i: f64,
    #[serde(rename = "k_e")]
    pub k_e: f64,
    pub k_b1: f64,
    pub k_b2: f64,
    pub k_b3: f64,
    pub k_a1: f64,
    pub k_a2: f64,
    pub k_a3: f64,
    #[serde(rename = "A_G")]
    pub a_g: f64,
    #[serde(rename = "tau_D")]
    pub tau_d: f64,
    #[serde(rename = "tau_Glu")]
    pub tau_glu: f64,
    #[serde(rename = "HR_0")]
    pub hr_0: f64,
    #[serde(rename = "tau_HR")]
    pub tau_hr: f64,
    pub c_1: f64,
    pub c_2: f64,
    pub tau_ex: f64,
    pub tau_in: f64,
    pub a: f64,
    pub n: f64,
    pub k_12: f64,
    #[serde(rename = "F_01")]
    pub f_01: f64,
    #[serde(rename = "V_G")]
    pub v_g: f64,
    #[serde(rename = "EGP_0")]
    pub egp_0: f64,
    #[serde(rename = "K_Glu")]
    pub k_glu: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "tau_IG")]
    pub tau_ig: f64,
}

/// Reference body weight for the nominal parameter set [kg].
pub const NOMINAL_BODY_WEIGHT: f64 = 70.0;

impl SimParams {
    /// Population-mean glucoregulatory constants for a 70 kg adult, extended
    /// with glucagon, exercise and CGM-lag constants.
    pub fn nominal() -> Self {
        let bw = NOMINAL_BODY_WEIGHT;
        let (k_a1, k_a2, k_a3) = (0.006, 0.06, 0.03);
        // insulin sensitivities of transport, disposal and EGP [(L/mU)/min]
        let (s_it, s_id, s_ie) = (51.2e-4, 8.2e-4, 520e-4);
        Self {
            tau_s: 55.0,
            v_i: 0.12 * bw,
            k_e: 0.138,
            k_b1: s_it * k_a1,
            k_b2: s_id * k_a2,
            k_b3: s_ie * k_a3,
            k_a1,
            k_a2,
            k_a3,
            a_g: 0.8,
            tau_d: 40.0,
            tau_glu: 19.0,
            hr_0: 60.0,
            tau_hr: 5.0,
            c_1: 500.0,
            c_2: 100.0,
            tau_ex: 200.0,
            tau_in: 1.0,
            a: 0.77,
            n: 3.0,
            k_12: 0.066,
            f_01: 0.0097 * bw,
            v_g: 0.16 * bw,
            egp_0: 0.0161 * bw,
            k_glu: 2.0e-3,
            alpha: 1.79,
            beta: 0.78,
            tau_ig: 10.0,
        }
    }

    /// Named view used for validation and log-normal perturbation.
    pub fn fields(&self) -> [(&'static str, f64); 28] {
        [
            ("tau_S", self.tau_s),
            ("V_I", self.v_i),
            ("k_e", self.k_e),
            ("k_b1", self.k_b1),
            ("k_b2", self.k_b2),
            ("k_b3", self.k_b3),
            ("k_a1", self.k_a1),
            ("k_a2", self.k_a2),
            ("k_a3", self.k_a3),
            ("A_G", self.a_g),
            ("tau_D", self.tau_d),
            ("tau_Glu", self.tau_glu),
            ("HR_0", self.hr_0),
            ("tau_HR", self.tau_hr),
            ("c_1", self.c_1),
            ("c_2", self.c_2),
            ("tau_ex", self.tau_ex),
            ("tau_in", self.tau_in),
            ("a", self.a),
            ("n", self.n),
            ("k_12", self.k_12),
            ("F_01", self.f_01),
            ("V_G", self.v_g),
            ("EGP_0", self.egp_0),
            ("K_Glu", self.k_glu),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tau_IG", self.tau_ig),
        ]
    }

    /// Rebuilds a parameter set from values in [`SimParams::fields`] order.
    pub fn from_values(v: &[f64; 28]) -> Self {
        Self {
            tau_s: v[0],
            v_i: v[1],
            k_e: v[2],
            k_b1: v[3],
            k_b2: v[4],
            k_b3: v[5],
            k_a1: v[6],
            k_a2: v[7],
            k_a3: v[8],
            a_g: v[9],
            tau_d: v[10],
            tau_glu: v[11],
            hr_0: v[12],
            tau_hr: v[13],
            c_1: v[14],
            c_2: v[15],
            tau_ex: v[16],
            tau_in: v[17],
            a: v[18],
            n: v[19],
            k_12: v[20],
            f_01: v[21],
            v_g: v[22],
            egp_0: v[23],
            k_glu: v[24],
            alpha: v[25],
            beta: v[26],
            tau_ig: v[27],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.fields() {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParameter(alloc::format!(
                    "{name} must be finite and > 0, got {value}"
                )));
            }
        }
        if self.a_g > 1.0 {
            return Err(Error::InvalidParameter("A_G must lie in (0, 1]".into()));
        }
        if self.n < 1.0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        Ok(())
    }

    /// Resting fixed point of the exercise characteristic time.
    pub fn resting_te(&self) -> f64 {
        self.c_2
    }
}

/// Exogenous inputs held over an integration step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimInputs {
    /// Basal insulin [mU/min].
    pub uba: f64,
    /// Bolus insulin [mU/min].
    pub ubo: f64,
    /// Glucagon [µg/min].
    pub ug: f64,
    /// Meal carbohydrate rate [mmol/min].
    pub meal: f64,
    /// Heart rate [BPM].
    pub hr: f64,
}

impl SimInputs {
    pub fn resting(params: &SimParams) -> Self {
        Self {
            hr: params.hr_0,
            ..Self::default()
        }
    }

    pub fn insulin(&self) -> f64 {
        self.uba + self.ubo
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlucoseFluxes {
    /// Endogenous glucose production [mmol/min].
    pub egp: f64,
    /// Glucagon-driven production [mmol/min].
    pub qg: f64,
    pub qe21: f64,
    pub qe22: f64,
    pub qe1: f64,
    /// Corrected non-insulin dependent flux [mmol/min].
    pub f01c: f64,
    /// Renal clearance [mmol/min].
    pub fr: f64,
    /// Plasma glucose [mmol/L].
    pub g: f64,
}

pub fn plasma_glucose(state: &SimState, params: &SimParams) -> f64 {
    state.q1 / params.v_g
}

pub fn glucose_fluxes(state: &SimState, params: &SimParams) -> GlucoseFluxes {
    let g = plasma_glucose(state, params);
    let e2_sq = state.e2 * state.e2;
    let f01c = if g >= F01_THRESHOLD {
        params.f_01
    } else {
        params.f_01 * g / F01_THRESHOLD
    };
    let fr = if g >= RENAL_THRESHOLD {
        RENAL_RATE * (g - RENAL_THRESHOLD) * params.v_g
    } else {
        0.0
    };
    GlucoseFluxes {
        egp: params.egp_0 * (1.0 - state.x3),
        qg: params.k_glu * params.v_g * state.q2g,
        qe21: params.alpha * e2_sq * state.x1 * state.q1,
        qe22: params.alpha * e2_sq * state.x2 * state.q2,
        qe1: params.beta * state.e1 / params.hr_0,
        f01c,
        fr,
        g,
    }
}

/// Hill-type activation of the short-term exercise effect, in `[0, 1)`.
///
/// Negative `E1` (heart rate below rest) gives no activation.
pub fn exercise_response(e1: f64, params: &SimParams) -> f64 {
    let r = (e1.max(0.0) / (params.a * params.hr_0)).powf(params.n);
    r / (1.0 + r)
}

pub fn sim_output(state: &SimState) -> f64 {
    state.gi
}

/// Right-hand side of the plant. `_t` is accepted for interface symmetry; the
/// model is autonomous given its inputs.
pub fn sim_derivative(
    state: &SimState,
    inputs: &SimInputs,
    params: &SimParams,
    _t: f64,
) -> Result<SimState> {
    let fl = glucose_fluxes(state, params);
    let f_e1 = exercise_response(state.e1, params);
    let te = state.te.max(TE_FLOOR);
    let tau_s = params.tau_s;

    let rate = SimState {
        s1: inputs.insulin() - state.s1 / tau_s,
        s2: (state.s1 - state.s2) / tau_s,
        insulin: state.s2 / (params.v_i * tau_s) - params.k_e * state.insulin,
        x1: params.k_b1 * state.insulin - params.k_a1 * state.x1,
        x2: params.k_b2 * state.insulin - params.k_a2 * state.x2,
        x3: params.k_b3 * state.insulin - params.k_a3 * state.x3,
        d1: params.a_g * inputs.meal - state.d1 / params.tau_d,
        d2: (state.d1 - state.d2) / params.tau_d,
        q1g: inputs.ug - state.q1g / params.tau_glu,
        q2g: (state.q1g - state.q2g) / params.tau_glu,
        e1: (inputs.hr - params.hr_0 - state.e1) / params.tau_hr,
        te: (params.c_1 * f_e1 + params.c_2 - state.te) / params.tau_ex,
        e2: -(f_e1 / params.tau_in + 1.0 / te) * state.e2 + f_e1 * te / (params.c_1 + params.c_2),
        q1: state.d2 / params.tau_d - fl.f01c - fl.fr - state.x1 * state.q1
            + params.k_12 * state.q2
            + fl.egp
            + fl.qg
            - fl.qe21,
        q2: state.x1 * state.q1 - params.k_12 * state.q2 - state.x2 * state.q2 + fl.qe21
            - fl.qe22
            - fl.qe1,
        gi: (fl.g - state.gi) / params.tau_ig,
    };
    let v = rate.to_vector();
    if let Some(i) = v.iter().position(|c| !c.is_finite()) {
        return Err(Error::ModelEvaluation {
            component: SIM_COMPONENTS[i],
        });
    }
    Ok(rate)
}

/// Vector-form right-hand side for the integrators.
pub fn sim_vector_field<'a>(
    inputs: &'a SimInputs,
    params: &'a SimParams,
) -> impl FnMut(f64, &SimVector) -> Result<SimVector> + 'a {
    move |t, x| sim_derivative(&SimState::from_vector(x), inputs, params, t).map(|r| r.to_vector())
}

/// Plant diffusion: optional additive noise on the accessible glucose mass.
pub fn sim_diffusion(sigma_q1: f64) -> Matrix<SIM_DIM, 1> {
    let mut m = Matrix::<SIM_DIM, 1>::zeros();
    m[(13, 0)] = sigma_q1;
    m
}

/// Net glucose balance of `Q1` at rest with no meal and no glucagon, for a
/// steady plasma insulin `insulin` and glucose `g`.
fn resting_q1_balance(params: &SimParams, insulin: f64, g: f64) -> f64 {
    let q1 = g * params.v_g;
    let x1 = params.k_b1 / params.k_a1 * insulin;
    let x2 = params.k_b2 / params.k_a2 * insulin;
    let x3 = params.k_b3 / params.k_a3 * insulin;
    let q2 = x1 * q1 / (params.k_12 + x2);
    let state = SimState {
        q1,
        x3,
        ..SimState::default()
    };
    let fl = glucose_fluxes(&state, params);
    -fl.f01c - fl.fr - x1 * q1 + params.k_12 * q2 + fl.egp
}

/// Steady plasma insulin [mU/L] that holds plasma glucose at `g` at rest.
///
/// The balance is strictly decreasing in insulin, so a bracketing bisection is
/// exact to machine precision.
pub fn steady_insulin_for_glucose(params: &SimParams, g: f64) -> Result<f64> {
    params.validate()?;
    if resting_q1_balance(params, 0.0, g) <= 0.0 {
        return Err(Error::InvalidParameter(alloc::format!(
            "glucose {g} mmol/L is not reachable without insulin"
        )));
    }
    let mut hi = 1.0;
    while resting_q1_balance(params, hi, g) > 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Numerical("steady insulin bracket failed"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if resting_q1_balance(params, mid, g) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Basal insulin infusion [mU/min] whose resting equilibrium sits at `g`.
pub fn basal_for_glucose(params: &SimParams, g: f64) -> Result<f64> {
    let insulin = steady_insulin_for_glucose(params, g)?;
    Ok(insulin * params.v_i * params.k_e)
}

/// Resting equilibrium for a constant insulin infusion `u_i` [mU/min] and the
/// plasma glucose `g` that balances it.
pub fn equilibrium_state(params: &SimParams, u_i: f64, g: f64) -> SimState {
    let insulin = u_i / (params.v_i * params.k_e);
    let x1 = params.k_b1 / params.k_a1 * insulin;
    let x2 = params.k_b2 / params.k_a2 * insulin;
    let x3 = params.k_b3 / params.k_a3 * insulin;
    let q1 = g * params.v_g;
    SimState {
        s1: u_i * params.tau_s,
        s2: u_i * params.tau_s,
        insulin,
        x1,
        x2,
        x3,
        te: params.resting_te(),
        q1,
        q2: x1 * q1 / (params.k_12 + x2),
        gi: g,
        ..SimState::default()
    }
}
