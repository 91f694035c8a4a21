//! Gauss-Newton SQP on the condensed multiple-shooting problem.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::model_ctrl::{CtrlVector, CTRL_DIM};

use super::qp::solve_box_qp;
use super::transcription::{IntervalLinearization, Nlp};
use super::{penalty_z_terms, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SqpOptions {
    pub max_iterations: usize,
    /// Stationarity and feasibility tolerance.
    pub kkt_tolerance: f64,
    pub armijo: f64,
    pub min_step: f64,
    /// Relative diagonal shift added to the condensed Hessian.
    pub regularization: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            kkt_tolerance: 1e-6,
            armijo: 1e-4,
            min_step: 1e-10,
            regularization: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    IterationLimit,
    /// The line search could not improve the merit function further.
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpTraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub kkt: f64,
    pub infeasibility: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub mode: Mode,
    /// Flat decision vector, interval major.
    pub inputs: Vec<f64>,
    /// Shooting nodes `s_1 .. s_N`.
    pub nodes: Vec<CtrlVector>,
    pub objective: f64,
    pub kkt: f64,
    pub infeasibility: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub trace: Vec<SqpTraceRow>,
}

impl OcpSolution {
    /// Decision variables of the first interval.
    pub fn first(&self) -> &[f64] {
        &self.inputs[..self.mode.input_count()]
    }
}

/// Initial guess for [`sqp_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub mode: Mode,
    pub inputs: Vec<f64>,
    /// Shooting nodes; a rollout of `inputs` is used when absent.
    pub nodes: Option<Vec<CtrlVector>>,
}

impl WarmStart {
    /// Shifts `solution` (computed on `nlp`) by one interval, duplicating the
    /// last input and propagating the last node.
    pub fn shift(nlp: &Nlp, solution: &OcpSolution) -> Result<Self> {
        let nu = nlp.input_count();
        let n = nlp.intervals();
        let mut inputs = solution.inputs[nu..].to_vec();
        inputs.extend_from_slice(&solution.inputs[(n - 1) * nu..]);
        let mut nodes = solution.nodes[1..].to_vec();
        let last = nlp.propagate(n - 1, &solution.nodes[n - 1], &inputs)?.0;
        nodes.push(last);
        Ok(Self {
            mode: solution.mode,
            inputs,
            nodes: Some(nodes),
        })
    }
}

struct Iterate {
    lins: Vec<IntervalLinearization>,
    objective: f64,
    defects: Vec<CtrlVector>,
}

fn linearize_all(nlp: &Nlp, u: &[f64], nodes: &[CtrlVector]) -> Result<Iterate> {
    let n = nlp.intervals();
    let mut lins = Vec::with_capacity(n);
    let mut objective = 0.0;
    let mut defects = Vec::with_capacity(n);
    for k in 0..n {
        let lin = nlp.linearize(k, &nlp.start(k, nodes), u)?;
        objective += lin.cost;
        defects.push(nodes[k] - lin.end);
        lins.push(lin);
    }
    Ok(Iterate {
        lins,
        objective,
        defects,
    })
}

fn l1(defects: &[CtrlVector]) -> f64 {
    defects.iter().map(|d| d.abs().sum()).sum()
}

fn linf(defects: &[CtrlVector]) -> f64 {
    defects.iter().map(|d| d.amax()).fold(0.0, f64::max)
}

/// Objective gradient with respect to the interval start states `s_1 ..
/// s_{N-1}` (index `k` holds the gradient for `s_k`, entry 0 unused) and
/// inputs, optionally evaluated on the quadratic model after a step.
fn gradients(
    nlp: &Nlp,
    it: &Iterate,
    u: &[f64],
    step: Option<(&[f64], &[CtrlVector])>,
) -> (Vec<CtrlVector>, Vec<f64>) {
    let n = nlp.intervals();
    let nu = nlp.input_count();
    let h = nlp.step_size();
    let mut gs = vec![CtrlVector::zeros(); n];
    let mut gu = vec![0.0; u.len()];
    for k in 0..n {
        let lin = &it.lins[k];
        for i in 0..nu {
            let (d1, d2) = nlp.input_penalty_derivatives(k, i, u[k * nu + i]);
            gu[k * nu + i] = d1 + step.map_or(0.0, |(du, _)| d2 * du[k * nu + i]);
        }
        for j in 0..lin.z.len() {
            let (_, d1, d2) = penalty_z_terms(lin.z[j], &nlp.spec);
            let slope = match step {
                Some((du, ds)) => {
                    let start = if k == 0 {
                        CtrlVector::zeros()
                    } else {
                        ds[k - 1]
                    };
                    let dz = lin.dz_ds[j].dot(&start)
                        + (0..nu)
                            .map(|i| lin.dz_du[j][i] * du[k * nu + i])
                            .sum::<f64>();
                    d1 + d2 * dz
                }
                None => d1,
            };
            for i in 0..nu {
                gu[k * nu + i] += h * slope * lin.dz_du[j][i];
            }
            gs[k] += lin.dz_ds[j] * (h * slope);
        }
    }
    (gs, gu)
}

/// Defect multipliers by the backward adjoint recursion
/// `lambda_{k-1} = dphi/ds_k + A_k' lambda_k`, `lambda_{N-1} = 0`.
fn adjoint(it: &Iterate, gs: &[CtrlVector]) -> Vec<CtrlVector> {
    let n = it.lins.len();
    let mut lambda = vec![CtrlVector::zeros(); n];
    for k in (1..n).rev() {
        lambda[k - 1] = gs[k] + it.lins[k].a.transpose() * lambda[k];
    }
    lambda
}

fn reduced_gradient(nlp: &Nlp, it: &Iterate, gu: &[f64], lambda: &[CtrlVector]) -> Vec<f64> {
    let nu = nlp.input_count();
    let mut r = gu.to_vec();
    for (k, lin) in it.lins.iter().enumerate() {
        for i in 0..nu {
            r[k * nu + i] += lin.b.column(i).dot(&lambda[k]);
        }
    }
    r
}

fn projected_residual(nlp: &Nlp, u: &[f64], grad: &[f64]) -> f64 {
    let spec = &nlp.spec;
    u.iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (x, g))| ((x - g).clamp(spec.lower[i], spec.upper[i]) - x).abs())
        .fold(0.0, f64::max)
}

/// Projected reduced-gradient norm and defect norm at `(u, nodes)`.
pub fn kkt_residual(nlp: &Nlp, u: &[f64], nodes: &[CtrlVector]) -> Result<(f64, f64)> {
    let it = linearize_all(nlp, u, nodes)?;
    let (gs, gu) = gradients(nlp, &it, u, None);
    let lambda = adjoint(&it, &gs);
    let rg = reduced_gradient(nlp, &it, &gu, &lambda);
    Ok((projected_residual(nlp, u, &rg), linf(&it.defects)))
}

/// Condensed Gauss-Newton QP in the input step.
fn condensed_qp(
    nlp: &Nlp,
    it: &Iterate,
    u: &[f64],
    regularization: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = nlp.intervals();
    let nu = nlp.input_count();
    let nd = n * nu;
    let h = nlp.step_size();
    let mut hess = DMatrix::<f64>::zeros(nd, nd);
    let mut grad = DVector::<f64>::zeros(nd);
    // state step s_k = a + G du, G nonzero only in the first k*nu columns
    let mut a = CtrlVector::zeros();
    let mut gmat = DMatrix::<f64>::zeros(CTRL_DIM, nd);
    let mut row = vec![0.0; nd];
    for k in 0..n {
        let lin = &it.lins[k];
        let width = (k + 1) * nu;
        for j in 0..lin.z.len() {
            let (_, d1, d2) = penalty_z_terms(lin.z[j], &nlp.spec);
            let ds = &lin.dz_ds[j];
            for (c, r) in row.iter_mut().enumerate().take(k * nu) {
                *r = (0..CTRL_DIM).map(|q| ds[q] * gmat[(q, c)]).sum();
            }
            for i in 0..nu {
                row[k * nu + i] = lin.dz_du[j][i];
            }
            let offset = ds.dot(&a);
            let slope = h * (d1 + d2 * offset);
            let curv = h * d2;
            for c in 0..width {
                grad[c] += slope * row[c];
                let rc = curv * row[c];
                if rc != 0.0 {
                    for r in c..width {
                        hess[(r, c)] += rc * row[r];
                    }
                }
            }
        }
        for i in 0..nu {
            let (d1, d2) = nlp.input_penalty_derivatives(k, i, u[k * nu + i]);
            grad[k * nu + i] += d1;
            hess[(k * nu + i, k * nu + i)] += d2;
        }
        // advance the condensing recursion
        a = lin.a * a - it.defects[k];
        if k * nu > 0 {
            let prev = gmat.columns(0, k * nu).into_owned();
            let next = lin.a * prev;
            gmat.columns_mut(0, k * nu).copy_from(&next);
        }
        for i in 0..nu {
            gmat.set_column(k * nu + i, &lin.b.column(i));
        }
    }
    for c in 0..nd {
        for r in c + 1..nd {
            hess[(c, r)] = hess[(r, c)];
        }
    }
    let scale = hess.diagonal().iter().fold(1.0f64, |m, v| m.max(*v));
    for i in 0..nd {
        hess[(i, i)] += regularization * scale;
    }
    (hess, grad)
}

fn state_step(it: &Iterate, nu: usize, du: &[f64]) -> Vec<CtrlVector> {
    let mut ds = Vec::with_capacity(it.lins.len());
    let mut s = CtrlVector::zeros();
    for (k, lin) in it.lins.iter().enumerate() {
        let mut next = lin.a * s - it.defects[k];
        for i in 0..nu {
            next += lin.b.column(i) * du[k * nu + i];
        }
        ds.push(next);
        s = next;
    }
    ds
}

/// Solves the transcribed problem from `warm` (or the cold start).
///
/// Iterates until the projected reduced gradient and the defects are below
/// the tolerance. Returns the last accepted iterate with its status when the
/// iteration cap is reached or the line search stalls; errors only when the
/// problem cannot be evaluated or a QP fails.
pub fn sqp_solve(nlp: &Nlp, warm: Option<&WarmStart>, options: &SqpOptions) -> Result<OcpSolution> {
    let spec = &nlp.spec;
    let nu = nlp.input_count();
    let nd = spec.decision_len();
    let n = nlp.intervals();

    let usable = warm.filter(|w| w.mode == spec.mode && w.inputs.len() == nd);
    let mut u = match usable {
        Some(w) => w.inputs.clone(),
        None => spec.cold_start(),
    };
    spec.clip(&mut u);
    let mut nodes = match usable.and_then(|w| w.nodes.as_ref()) {
        Some(s) if s.len() == n && s.iter().all(|v| v.iter().all(|c| c.is_finite())) => s.clone(),
        _ => nlp.rollout(&u)?,
    };

    let mut mu = 0.0f64;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut step_len = 0.0;
    let status;
    let mut it = linearize_all(nlp, &u, &nodes)?;
    loop {
        let (gs, gu) = gradients(nlp, &it, &u, None);
        let lambda = adjoint(&it, &gs);
        let rg = reduced_gradient(nlp, &it, &gu, &lambda);
        let infeasibility = linf(&it.defects);
        let kkt = projected_residual(nlp, &u, &rg).max(infeasibility);
        if !(it.objective.is_finite() && kkt.is_finite()) {
            return Err(Error::Solver("non-finite objective or KKT residual".into()));
        }
        trace.push(SqpTraceRow {
            iteration: iterations,
            objective: it.objective,
            kkt,
            infeasibility,
            step: step_len,
        });
        if kkt < options.kkt_tolerance {
            status = SolveStatus::Converged;
            break;
        }
        if iterations >= options.max_iterations {
            status = SolveStatus::IterationLimit;
            break;
        }

        let (hess, grad) = condensed_qp(nlp, &it, &u, options.regularization);
        let lower = DVector::from_fn(nd, |i, _| spec.lower[i] - u[i]);
        let upper = DVector::from_fn(nd, |i, _| spec.upper[i] - u[i]);
        let qp = solve_box_qp(&hess, &grad, &lower, &upper, None)?;
        let du: Vec<f64> = qp.x.iter().copied().collect();
        let ds = state_step(&it, nu, &du);

        // penalty parameter from the QP's defect multipliers
        let (gs_model, _) = gradients(nlp, &it, &u, Some((&du, &ds)));
        let lambda_model = adjoint(&it, &gs_model);
        let lmax = lambda_model.iter().map(|l| l.amax()).fold(0.0, f64::max);
        mu = mu.max(1.5 * lmax + 1e-8);

        let violation = l1(&it.defects);
        let merit0 = it.objective + mu * violation;
        let slope = gu.iter().zip(&du).map(|(g, d)| g * d).sum::<f64>()
            + (1..n).map(|k| gs[k].dot(&ds[k - 1])).sum::<f64>()
            - mu * violation;

        let mut alpha = 1.0;
        let accepted = loop {
            let mut ut: Vec<f64> = u.iter().zip(&du).map(|(x, d)| x + alpha * d).collect();
            spec.clip(&mut ut);
            let bound = merit0 + options.armijo * alpha * slope.min(0.0);
            let linear: Vec<CtrlVector> =
                nodes.iter().zip(&ds).map(|(s, d)| s + d * alpha).collect();
            let mut best: Option<(f64, Vec<CtrlVector>)> = None;
            if let Ok((obj, defects)) = nlp.evaluate(&ut, &linear) {
                best = Some((obj + mu * l1(&defects), linear));
            }
            // second-order correction: re-propagate the nodes, closing the
            // defects the linearised step leaves behind
            if let Ok(rolled) = nlp.rollout(&ut) {
                if let Ok(obj) = nlp.objective(&ut, &rolled) {
                    if best.as_ref().is_none_or(|(m, _)| obj < *m) {
                        best = Some((obj, rolled));
                    }
                }
            }
            if let Some((merit, nt)) = best {
                if merit <= bound {
                    break Some((ut, nt));
                }
            }
            alpha *= 0.5;
            if alpha < options.min_step {
                break None;
            }
        };
        match accepted {
            Some((ut, nt)) => {
                u = ut;
                nodes = nt;
                iterations += 1;
                step_len = alpha;
                it = linearize_all(nlp, &u, &nodes)?;
            }
            None => {
                status = SolveStatus::Stalled;
                break;
            }
        }
    }

    let last = trace.last().copied().unwrap_or(SqpTraceRow {
        iteration: 0,
        objective: it.objective,
        kkt: f64::INFINITY,
        infeasibility: 0.0,
        step: 0.0,
    });
    Ok(OcpSolution {
        mode: spec.mode,
        inputs: u,
        nodes,
        objective: last.objective,
        kkt: last.kkt,
        infeasibility: last.infeasibility,
        iterations,
        status,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{penalty_z, transcribe, Mode, OcpSpec};
    use super::*;
    use crate::model_ctrl::{CtrlParams, CtrlState};
    use crate::model_sim::SimParams;

    fn basal_state(params: &CtrlParams, basal: f64, g: f64) -> CtrlState {
        let log_si = ((params.egp / 6.0 - params.gezi) / (basal / params.c_i)).ln();
        CtrlState::basal(params, basal, g, log_si)
    }

    fn insulin_spec(basal: f64, bolus_max: f64) -> OcpSpec {
        let mut spec = OcpSpec::new(Mode::Insulin, basal);
        spec.upper[1] = bolus_max;
        for k in 1..spec.intervals {
            spec.upper[2 * k + 1] = 1e-3;
        }
        spec
    }

    #[test]
    fn steady_state_keeps_nominal_basal() {
        let params = CtrlParams::population(&SimParams::nominal());
        let x0 = basal_state(&params, 10.0, 6.0);
        let spec = insulin_spec(10.0, 100.0);
        let nlp = transcribe(&spec, &x0, &params).unwrap();
        let sol = sqp_solve(&nlp, None, &SqpOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        for k in 0..spec.intervals {
            assert!((sol.inputs[2 * k] - 10.0).abs() < 1e-6);
            assert!(sol.inputs[2 * k + 1].abs() < 1e-9);
        }
        assert!(sol.objective < 1e-12);
    }

    #[test]
    fn hyperglycemia_raises_first_interval_insulin() {
        let params = CtrlParams::population(&SimParams::nominal());
        let spec = insulin_spec(10.0, 400.0);
        let base = sqp_solve(
            &transcribe(&spec, &basal_state(&params, 10.0, 6.0), &params).unwrap(),
            None,
            &SqpOptions::default(),
        )
        .unwrap();
        let mut hyper = basal_state(&params, 10.0, 6.0);
        hyper.g = 14.0;
        hyper.gi = 14.0;
        let nlp = transcribe(&spec, &hyper, &params).unwrap();
        let sol = sqp_solve(&nlp, None, &SqpOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged, "{:?}", sol.trace.last());
        assert!(sol.first()[0] + sol.first()[1] > base.first()[0] + base.first()[1]);
        for (i, v) in sol.inputs.iter().enumerate() {
            assert!(*v >= spec.lower[i] - 1e-8 && *v <= spec.upper[i] + 1e-8);
        }
    }

    #[test]
    fn warm_restart_from_optimum_is_immediate() {
        let params = CtrlParams::population(&SimParams::nominal());
        let mut x0 = basal_state(&params, 10.0, 6.0);
        x0.g = 11.0;
        x0.gi = 10.5;
        let spec = insulin_spec(10.0, 300.0);
        let nlp = transcribe(&spec, &x0, &params).unwrap();
        let sol = sqp_solve(&nlp, None, &SqpOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        let warm = WarmStart {
            mode: Mode::Insulin,
            inputs: sol.inputs.clone(),
            nodes: Some(sol.nodes.clone()),
        };
        let again = sqp_solve(&nlp, Some(&warm), &SqpOptions::default()).unwrap();
        assert!(again.iterations <= 2);
        assert!((again.objective - sol.objective).abs() <= 1e-8 * sol.objective.abs().max(1.0));
    }

    #[test]
    fn shifted_solution_closes_next_defects() {
        let params = CtrlParams::population(&SimParams::nominal());
        let mut x0 = basal_state(&params, 10.0, 6.0);
        x0.g = 9.0;
        let spec = insulin_spec(10.0, 0.0);
        let nlp = transcribe(&spec, &x0, &params).unwrap();
        let sol = sqp_solve(&nlp, None, &SqpOptions::default()).unwrap();
        let warm = WarmStart::shift(&nlp, &sol).unwrap();
        // the realised state equals the prediction
        let next_x0 = crate::model_ctrl::CtrlState::from_vector(&sol.nodes[0]);
        let next = transcribe(&spec, &next_x0, &params).unwrap();
        let (_, defects) = next
            .evaluate(&warm.inputs, warm.nodes.as_ref().unwrap())
            .unwrap();
        assert!(linf(&defects) <= 1e-6 + sol.infeasibility * 2.0);
    }

    #[test]
    fn single_interval_matches_grid_search() {
        let params = CtrlParams::population(&SimParams::nominal());
        let mut x0 = basal_state(&params, 10.0, 6.0);
        x0.g = 3.8;
        x0.gi = 4.0;
        let mut spec = OcpSpec::new(Mode::Glucagon, 10.0);
        spec.intervals = 1;
        spec.lower = vec![0.0];
        spec.upper = vec![60.0];
        spec.nominal_basal = vec![10.0];
        spec.meal_forecast = vec![0.0];
        let nlp = transcribe(&spec, &x0, &params).unwrap();
        let sol = sqp_solve(&nlp, None, &SqpOptions::default()).unwrap();
        let cost = |v: f64| {
            let u = [v];
            let nodes = nlp.rollout(&u).unwrap();
            nlp.objective(&u, &nodes).unwrap()
        };
        let mut best = (f64::INFINITY, 0.0);
        let m = 60000;
        for i in 0..=m {
            let v = 60.0 * i as f64 / m as f64;
            let c = cost(v);
            if c < best.0 {
                best = (c, v);
            }
        }
        assert!(
            (sol.inputs[0] - best.1).abs() < 1e-3,
            "{} vs {}",
            sol.inputs[0],
            best.1
        );
        assert!(sol.objective <= best.0 + 1e-9);
        let _ = penalty_z(4.0, &spec);
    }
}
