//! Fixed-step integrators and finite-difference utilities.
//!
//! All routines operate on statically sized `nalgebra` vectors so the hot loops
//! of the filter and the shooting solver stay allocation free.

use nalgebra::{SMatrix, SVector};
// libm float methods under no_std; std shadows them in test builds
#[allow(unused_imports)]
use num_traits::Float;
use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector<const N: usize> = SVector<f64, N>;
pub type Matrix<const R: usize, const C: usize> = SMatrix<f64, R, C>;

/// Default relative perturbation for central differences.
pub const FD_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExplicitRk4,
    ExplicitEuler,
}

/// Fixed-step integration of one control interval in `steps` equal sub-steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub method: Method,
    /// Control-interval length [min].
    pub interval: f64,
    pub steps: usize,
}

impl IntegratorSpec {
    pub fn new(method: Method, interval: f64, steps: usize) -> Result<Self> {
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(Error::InvalidParameter(
                "integrator interval must be > 0".into(),
            ));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter(
                "integrator steps must be >= 1".into(),
            ));
        }
        Ok(Self {
            method,
            interval,
            steps,
        })
    }

    /// RK4 with two 2.5-min steps per 5-min interval (prediction default).
    pub fn prediction_default() -> Self {
        Self {
            method: Method::ExplicitRk4,
            interval: 5.0,
            steps: 2,
        }
    }

    /// Euler(-Maruyama) with 0.5-min steps (plant default).
    pub fn plant_default() -> Self {
        Self {
            method: Method::ExplicitEuler,
            interval: 5.0,
            steps: 10,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.interval / self.steps as f64
    }

    /// Integrates `f` deterministically over one interval starting at `t0`.
    pub fn integrate<const N: usize, F>(
        &self,
        mut f: F,
        t0: f64,
        x0: &Vector<N>,
    ) -> Result<Vector<N>>
    where
        F: FnMut(f64, &Vector<N>) -> Result<Vector<N>>,
    {
        let h = self.step_size();
        let mut x = *x0;
        for i in 0..self.steps {
            let t = t0 + i as f64 * h;
            x = match self.method {
                Method::ExplicitRk4 => rk4_step(&mut f, t, &x, h)?,
                Method::ExplicitEuler => euler_step(&mut f, t, &x, h)?,
            };
        }
        Ok(x)
    }
}

fn check_stage<const N: usize>(k: &Vector<N>, stage: usize) -> Result<()> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration { stage })
    }
}

/// Classical four-stage Runge-Kutta step.
pub fn rk4_step<const N: usize, F>(mut f: F, t: f64, x: &Vector<N>, h: f64) -> Result<Vector<N>>
where
    F: FnMut(f64, &Vector<N>) -> Result<Vector<N>>,
{
    let k1 = f(t, x)?;
    check_stage(&k1, 1)?;
    let k2 = f(t + 0.5 * h, &(x + k1 * (0.5 * h)))?;
    check_stage(&k2, 2)?;
    let k3 = f(t + 0.5 * h, &(x + k2 * (0.5 * h)))?;
    check_stage(&k3, 3)?;
    let k4 = f(t + h, &(x + k3 * h))?;
    check_stage(&k4, 4)?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

pub fn euler_step<const N: usize, F>(mut f: F, t: f64, x: &Vector<N>, h: f64) -> Result<Vector<N>>
where
    F: FnMut(f64, &Vector<N>) -> Result<Vector<N>>,
{
    let k = f(t, x)?;
    check_stage(&k, 1)?;
    Ok(x + k * h)
}

/// Euler-Maruyama step `x + f(t, x) h + sigma dw`; `dw ~ N(0, h I)` is caller supplied.
pub fn em_step<const N: usize, const W: usize, F>(
    drift: F,
    diffusion: &Matrix<N, W>,
    t: f64,
    x: &Vector<N>,
    h: f64,
    dw: &Vector<W>,
) -> Result<Vector<N>>
where
    F: FnMut(f64, &Vector<N>) -> Result<Vector<N>>,
{
    let det = euler_step(drift, t, x, h)?;
    Ok(det + diffusion * dw)
}

/// Draws a Wiener increment with covariance `h I`.
pub fn wiener_increment<const W: usize, R: RngCore + ?Sized>(rng: &mut R, h: f64) -> Vector<W> {
    let sd = h.sqrt();
    Vector::<W>::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * sd
    })
}

/// Central-difference Jacobian with per-coordinate step `scale * max(1, |x_i|)`.
pub fn fd_jacobian<const N: usize, const M: usize, F>(
    mut f: F,
    t: f64,
    x: &Vector<N>,
    scale: f64,
) -> Matrix<M, N>
where
    F: FnMut(f64, &Vector<N>) -> Vector<M>,
{
    let mut jac = Matrix::<M, N>::zeros();
    let mut xp = *x;
    for i in 0..N {
        let delta = scale * x[i].abs().max(1.0);
        let xi = x[i];
        xp[i] = xi + delta;
        let fp = f(t, &xp);
        xp[i] = xi - delta;
        let fm = f(t, &xp);
        xp[i] = xi;
        jac.set_column(i, &((fp - fm) / (2.0 * delta)));
    }
    jac
}
