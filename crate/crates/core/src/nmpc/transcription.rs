//! Multiple-shooting transcription with exact RK4 sensitivities.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model_ctrl::{
    drift_jacobian, drift_vector, idx, input_jacobian, CtrlMatrix, CtrlParams, CtrlState,
    CtrlVector, CTRL_DIM,
};
use crate::numerics::Matrix;

use super::{penalty_u, penalty_z_terms, OcpSpec};

/// Input sensitivity block; only the first `nu` columns are used.
pub type InputBlock = Matrix<CTRL_DIM, 2>;

/// The transcribed NLP. Variables are the flat decision vector (interval
/// major) and the shooting nodes `s_1 .. s_N`; `s_0` is the fixed initial
/// state. Defects are `c_k = s_{k+1} - Phi(s_k, u_k)`.
#[derive(Debug, Clone)]
pub struct Nlp {
    pub spec: OcpSpec,
    pub params: CtrlParams,
    pub x0: CtrlVector,
    input_map: InputBlock,
}

/// First-order data of one shooting interval.
#[derive(Debug, Clone)]
pub struct IntervalLinearization {
    /// `Phi(s_k, u_k)`.
    pub end: CtrlVector,
    pub a: CtrlMatrix,
    pub b: InputBlock,
    /// Output at the end of each RK4 substep.
    pub z: Vec<f64>,
    /// Output sensitivities to the interval's start state and inputs.
    pub dz_ds: Vec<CtrlVector>,
    pub dz_du: Vec<[f64; 2]>,
    /// Glucose integral plus input penalty of this interval.
    pub cost: f64,
}

/// Objective gradient with respect to inputs and nodes `s_1 .. s_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub du: Vec<f64>,
    pub ds: Vec<CtrlVector>,
}

pub fn transcribe(spec: &OcpSpec, x0: &CtrlState, params: &CtrlParams) -> Result<Nlp> {
    spec.validate()?;
    params.validate()?;
    let x0 = x0.to_vector();
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("initial state is not finite".into()));
    }
    let full = input_jacobian(params);
    let mut input_map = InputBlock::zeros();
    for (j, &col) in spec.input_columns().iter().enumerate() {
        input_map.set_column(j, &full.column(col));
    }
    Ok(Nlp {
        spec: spec.clone(),
        params: *params,
        x0,
        input_map,
    })
}

impl Nlp {
    pub fn intervals(&self) -> usize {
        self.spec.intervals
    }

    pub fn input_count(&self) -> usize {
        self.spec.input_count()
    }

    pub fn variable_count(&self) -> usize {
        self.spec.decision_len() + self.spec.intervals * CTRL_DIM
    }

    pub fn defect_count(&self) -> usize {
        self.spec.intervals * CTRL_DIM
    }

    pub(crate) fn step_size(&self) -> f64 {
        self.spec.interval / self.spec.substeps as f64
    }

    fn slice<'a>(&self, u: &'a [f64], k: usize) -> &'a [f64] {
        let nu = self.input_count();
        &u[k * nu..(k + 1) * nu]
    }

    /// Start state of interval `k`.
    pub fn start(&self, k: usize, nodes: &[CtrlVector]) -> CtrlVector {
        if k == 0 {
            self.x0
        } else {
            nodes[k - 1]
        }
    }

    /// Propagates interval `k` and accumulates its cost.
    pub fn propagate(&self, k: usize, s: &CtrlVector, u: &[f64]) -> Result<(CtrlVector, f64)> {
        let uk = self.slice(u, k);
        let inputs = self.spec.inputs_at(k, uk);
        let h = self.step_size();
        let mut x = *s;
        let mut cost = penalty_u(uk, k, &self.spec);
        for _ in 0..self.spec.substeps {
            let k1 = drift_vector(&x, &inputs, &self.params);
            let k2 = drift_vector(&(x + k1 * (0.5 * h)), &inputs, &self.params);
            let k3 = drift_vector(&(x + k2 * (0.5 * h)), &inputs, &self.params);
            let k4 = drift_vector(&(x + k3 * h), &inputs, &self.params);
            x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            cost += h * penalty_z_terms(x[idx::GI], &self.spec).0;
        }
        if !(cost.is_finite() && x.iter().all(|v| v.is_finite())) {
            return Err(Error::Solver("non-finite prediction".into()));
        }
        Ok((x, cost))
    }

    /// Propagation of interval `k` with exact sensitivities of the RK4 map.
    pub fn linearize(&self, k: usize, s: &CtrlVector, u: &[f64]) -> Result<IntervalLinearization> {
        let uk = self.slice(u, k);
        let inputs = self.spec.inputs_at(k, uk);
        let h = self.step_size();
        let p = &self.params;
        let bm = &self.input_map;
        let eye = CtrlMatrix::identity();

        let mut x = *s;
        let mut sx = eye;
        let mut su = InputBlock::zeros();
        let m = self.spec.substeps;
        let mut lin = IntervalLinearization {
            end: x,
            a: eye,
            b: su,
            z: Vec::with_capacity(m),
            dz_ds: Vec::with_capacity(m),
            dz_du: Vec::with_capacity(m),
            cost: penalty_u(uk, k, &self.spec),
        };
        for _ in 0..m {
            // stage derivatives with respect to the substep start and inputs
            let k1 = drift_vector(&x, &inputs, p);
            let j1 = drift_jacobian(&x, p);
            let (d1x, d1u) = (j1, *bm);

            let x2 = x + k1 * (0.5 * h);
            let k2 = drift_vector(&x2, &inputs, p);
            let j2 = drift_jacobian(&x2, p);
            let d2x = j2 * (eye + d1x * (0.5 * h));
            let d2u = j2 * (d1u * (0.5 * h)) + bm;

            let x3 = x + k2 * (0.5 * h);
            let k3 = drift_vector(&x3, &inputs, p);
            let j3 = drift_jacobian(&x3, p);
            let d3x = j3 * (eye + d2x * (0.5 * h));
            let d3u = j3 * (d2u * (0.5 * h)) + bm;

            let x4 = x + k3 * h;
            let k4 = drift_vector(&x4, &inputs, p);
            let j4 = drift_jacobian(&x4, p);
            let d4x = j4 * (eye + d3x * h);
            let d4u = j4 * (d3u * h) + bm;

            let step_x = eye + (d1x + (d2x + d3x) * 2.0 + d4x) * (h / 6.0);
            let step_u = (d1u + (d2u + d3u) * 2.0 + d4u) * (h / 6.0);
            x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            sx = step_x * sx;
            su = step_x * su + step_u;

            let z = x[idx::GI];
            lin.cost += h * penalty_z_terms(z, &self.spec).0;
            lin.z.push(z);
            lin.dz_ds.push(sx.row(idx::GI).transpose());
            lin.dz_du.push([su[(idx::GI, 0)], su[(idx::GI, 1)]]);
        }
        if !(lin.cost.is_finite() && x.iter().all(|v| v.is_finite())) {
            return Err(Error::Solver("non-finite prediction".into()));
        }
        lin.end = x;
        lin.a = sx;
        lin.b = su;
        Ok(lin)
    }

    /// Single-shooting rollout: the nodes that zero every defect for `u`.
    pub fn rollout(&self, u: &[f64]) -> Result<Vec<CtrlVector>> {
        let mut nodes = Vec::with_capacity(self.intervals());
        let mut s = self.x0;
        for k in 0..self.intervals() {
            s = self.propagate(k, &s, u)?.0;
            nodes.push(s);
        }
        Ok(nodes)
    }

    /// Objective value and defects at `(u, nodes)`.
    pub fn evaluate(&self, u: &[f64], nodes: &[CtrlVector]) -> Result<(f64, Vec<CtrlVector>)> {
        let mut total = 0.0;
        let mut defects = Vec::with_capacity(self.intervals());
        for k in 0..self.intervals() {
            let (end, cost) = self.propagate(k, &self.start(k, nodes), u)?;
            total += cost;
            defects.push(nodes[k] - end);
        }
        Ok((total, defects))
    }

    pub fn objective(&self, u: &[f64], nodes: &[CtrlVector]) -> Result<f64> {
        Ok(self.evaluate(u, nodes)?.0)
    }

    /// Input-penalty gradient and curvature of decision variable `i` on
    /// interval `k`.
    pub(crate) fn input_penalty_derivatives(&self, k: usize, i: usize, value: f64) -> (f64, f64) {
        match (self.spec.mode, i) {
            (super::Mode::Insulin, 0) => (2.0 * (value - self.spec.nominal_basal[k]), 2.0),
            (super::Mode::Insulin, _) => (1.0, 0.0),
            (super::Mode::Glucagon, _) => (2.0 * value, 2.0),
        }
    }

    /// Exact objective gradient; the bolus term is differentiated on its
    /// nonnegative branch.
    pub fn objective_gradient(&self, u: &[f64], nodes: &[CtrlVector]) -> Result<ObjectiveGradient> {
        let n = self.intervals();
        let nu = self.input_count();
        let h = self.step_size();
        let mut du = alloc::vec![0.0; u.len()];
        let mut ds = alloc::vec![CtrlVector::zeros(); n];
        for k in 0..n {
            let lin = self.linearize(k, &self.start(k, nodes), u)?;
            for i in 0..nu {
                du[k * nu + i] = self.input_penalty_derivatives(k, i, u[k * nu + i]).0;
            }
            for j in 0..lin.z.len() {
                let d1 = penalty_z_terms(lin.z[j], &self.spec).1;
                for i in 0..nu {
                    du[k * nu + i] += h * d1 * lin.dz_du[j][i];
                }
                if k > 0 {
                    ds[k - 1] += lin.dz_ds[j] * (h * d1);
                }
            }
        }
        Ok(ObjectiveGradient { du, ds })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Mode, OcpSpec};
    use super::*;
    use crate::model_sim::SimParams;
    use crate::numerics::{fd_jacobian, Vector, FD_SCALE};

    pub(crate) fn setup(mode: Mode) -> (OcpSpec, CtrlParams, CtrlState) {
        let params = CtrlParams::population(&SimParams::nominal());
        let basal = 10.0;
        let log_si = ((params.egp / 6.0 - params.gezi) / (basal / params.c_i)).ln();
        let mut x0 = CtrlState::basal(&params, basal, 9.0, log_si);
        x0.gi = 8.5;
        x0.d1 = 5.0;
        let mut spec = OcpSpec::new(mode, basal);
        spec.intervals = 6;
        spec.lower.truncate(6 * mode.input_count());
        spec.upper.truncate(6 * mode.input_count());
        spec.nominal_basal.truncate(6);
        spec.meal_forecast.truncate(6);
        if mode == Mode::Insulin {
            spec.set_bounds(1, 0.0, 500.0);
        } else {
            spec.set_bounds(0, 0.0, 50.0);
        }
        (spec, params, x0)
    }

    fn interior(nlp: &Nlp) -> (Vec<f64>, Vec<CtrlVector>) {
        let nu = nlp.input_count();
        let mut u = nlp.spec.cold_start();
        for k in 0..nlp.intervals() {
            u[k * nu] += 0.3 + 0.1 * k as f64;
            if nu == 2 {
                u[k * nu + 1] = 20.0 + k as f64;
            }
        }
        let mut nodes = nlp.rollout(&u).unwrap();
        for (k, s) in nodes.iter_mut().enumerate() {
            s[idx::G] += 0.05 * k as f64;
            s[idx::IEFF] *= 1.01;
        }
        (u, nodes)
    }

    #[test]
    fn counts() {
        let (spec, params, x0) = setup(Mode::Insulin);
        let nlp = transcribe(&spec, &x0, &params).unwrap();
        assert_eq!(nlp.variable_count(), 6 * 2 + 6 * 10);
        assert_eq!(nlp.defect_count(), 60);
        let full = transcribe(&OcpSpec::new(Mode::Glucagon, 10.0), &x0, &params).unwrap();
        assert_eq!(full.variable_count(), 72 + 720);
    }

    #[test]
    fn rollout_closes_defects_and_matches_single_shooting() {
        let (spec, params, x0) = setup(Mode::Insulin);
        let nlp = transcribe(&spec, &x0, &params).unwrap();
        let u = nlp.spec.cold_start();
        let nodes = nlp.rollout(&u).unwrap();
        let (_, defects) = nlp.evaluate(&u, &nodes).unwrap();
        assert!(defects.iter().all(|d| d.iter().all(|v| *v == 0.0)));
        let mut x = x0.to_vector();
        let h = nlp.step_size();
        for k in 0..spec.intervals {
            let inputs = spec.inputs_at(k, &u[2 * k..2 * k + 2]);
            for _ in 0..spec.substeps {
                x = crate::numerics::rk4_step(
                    crate::model_ctrl::ctrl_vector_field(&inputs, &params),
                    0.0,
                    &x,
                    h,
                )
                .unwrap();
            }
            assert_eq!(x, nodes[k]);
        }
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        for mode in [Mode::Insulin, Mode::Glucagon] {
            let (spec, params, x0) = setup(mode);
            let nlp = transcribe(&spec, &x0, &params).unwrap();
            let (u, nodes) = interior(&nlp);
            let nu = nlp.input_count();
            for k in [0, 3] {
                let s = nlp.start(k, &nodes);
                let lin = nlp.linearize(k, &s, &u).unwrap();
                let fa: Matrix<10, 10> = fd_jacobian(
                    |_, x: &CtrlVector| nlp.propagate(k, x, &u).unwrap().0,
                    0.0,
                    &s,
                    FD_SCALE,
                );
                for (a, b) in lin.a.iter().zip(fa.iter()) {
                    assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "A {a} vs {b}");
                }
                let uk = Vector::<2>::from_fn(|i, _| if i < nu { u[k * nu + i] } else { 0.0 });
                let fb: Matrix<10, 2> = fd_jacobian(
                    |_, v: &Vector<2>| {
                        let mut uu = u.clone();
                        uu[k * nu..(k + 1) * nu].copy_from_slice(&v.as_slice()[..nu]);
                        nlp.propagate(k, &s, &uu).unwrap().0
                    },
                    0.0,
                    &uk,
                    FD_SCALE,
                );
                for i in 0..nu {
                    for r in 0..10 {
                        let (a, b) = (lin.b[(r, i)], fb[(r, i)]);
                        assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-6), "B {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for mode in [Mode::Insulin, Mode::Glucagon] {
            let (spec, params, x0) = setup(mode);
            let nlp = transcribe(&spec, &x0, &params).unwrap();
            let (u, nodes) = interior(&nlp);
            let grad = nlp.objective_gradient(&u, &nodes).unwrap();
            for i in 0..u.len() {
                let step = 1e-6 * u[i].abs().max(1.0);
                let mut up = u.clone();
                up[i] += step;
                let mut um = u.clone();
                um[i] -= step;
                let fd = (nlp.objective(&up, &nodes).unwrap()
                    - nlp.objective(&um, &nodes).unwrap())
                    / (2.0 * step);
                assert!(
                    (fd - grad.du[i]).abs() <= 1e-4 * fd.abs().max(1e-2),
                    "du[{i}] {fd} vs {}",
                    grad.du[i]
                );
            }
            for k in 0..nodes.len() {
                for c in 0..10 {
                    let step = 1e-6 * nodes[k][c].abs().max(1.0);
                    let mut np = nodes.clone();
                    np[k][c] += step;
                    let mut nm = nodes.clone();
                    nm[k][c] -= step;
                    let fd = (nlp.objective(&u, &np).unwrap() - nlp.objective(&u, &nm).unwrap())
                        / (2.0 * step);
                    let g = grad.ds[k][c];
                    assert!(
                        (fd - g).abs() <= 1e-4 * fd.abs().max(1e-2),
                        "ds[{k}][{c}] {fd} vs {g}"
                    );
                }
            }
        }
    }
}
