use dualap_core::cdekf::{
    default_initial_covariance, filter_pass, predict, FilterBelief, FilterConfig, NoHooks,
};
use dualap_core::model_ctrl::{idx, CtrlInputs, CtrlMatrix, CtrlParams, CtrlState};
use dualap_core::model_sim::SimParams;
use dualap_core::sysid::{simulate_ctrl, synthesize_dataset};

fn params() -> CtrlParams {
    CtrlParams::population(&SimParams::nominal())
}

fn rest(p: &CtrlParams, basal: f64) -> CtrlState {
    let log_si = ((p.egp / 6.0 - p.gezi) / (basal / p.c_i)).ln();
    CtrlState::basal(p, basal, 6.0, log_si)
}

/// Without insulin the glucose row is the scalar linear SDE
/// `dG = (egp - gezi G) dt + sigma dW`, whose variance has a closed form.
#[test]
fn glucose_variance_matches_the_scalar_lyapunov_solution() {
    for (a, sigma, p0, dt) in [(0.01, 0.3, 1.5, 60.0), (0.002, 0.1, 0.0, 30.0), (0.02, 0.5, 4.0, 5.0)] {
        let mut p = params();
        p.gezi = a;
        p.sigma_g = sigma;
        p.sigma_si = 0.0;
        let mut cov = CtrlMatrix::zeros();
        cov[(idx::G, idx::G)] = p0;
        let start = CtrlState {
            g: 9.0,
            gi: 9.0,
            ..CtrlState::default()
        };
        let out = predict(
            &FilterBelief::new(&start, cov, 0.0),
            &CtrlInputs::default(),
            &p,
            dt,
            &FilterConfig::default(),
        )
        .unwrap();
        let decay = (-2.0 * a * dt).exp();
        let exact = decay * p0 + sigma * sigma * (1.0 - decay) / (2.0 * a);
        let got = out.cov[(idx::G, idx::G)];
        assert!(((got - exact) / exact).abs() < 1e-6, "a = {a}: {got} vs {exact}");
    }
}

#[test]
fn glucose_above_the_estimate_gives_a_small_positive_first_innovation() {
    let p = params();
    let x0 = rest(&p, 10.0);
    let mut truth = x0;
    truth.g += 1.0;
    let n = 150;
    let quiet = CtrlParams {
        sigma_g: 0.0,
        sigma_si: 0.0,
        r: 0.0,
        ..p
    };
    let (data, _) = synthesize_dataset(&quiet, &truth, &vec![10.0; n], &vec![0.0; n], &vec![0.0; n], 10, 1).unwrap();
    let pass = filter_pass(
        &data.cgm[..2],
        &data.inputs()[..1],
        &p,
        &x0,
        &default_initial_covariance(),
        5.0,
        &FilterConfig::default(),
        &mut NoHooks,
    )
    .unwrap();
    // the sensor agrees at first; the rise then reaches it only through the interstitial lag
    assert_eq!(pass.innovations[0].innovation, 0.0);
    let first = pass.innovations[1].innovation;
    assert!(first > 0.0 && first < 1.0, "{first}");
}

#[test]
fn matched_noise_free_data_drives_innovations_to_zero() {
    let p = CtrlParams {
        sigma_g: 0.0,
        sigma_si: 0.0,
        ..params()
    };
    let x0 = rest(&p, 10.0);
    let n = 288;
    let mut meals = vec![0.0; n];
    let mut ubo = vec![0.0; n];
    meals[30] = 60.0;
    ubo[30] = 1000.0;
    let (mut data, _) = synthesize_dataset(&p, &x0, &vec![10.0; n], &ubo, &meals, 10, 2).unwrap();
    data.cgm = simulate_ctrl(&p, &x0, &data, 10).unwrap();
    let mut start = x0;
    start.g += 0.8;
    start.gi += 0.5;
    let pass = filter_pass(
        &data.cgm,
        &data.inputs(),
        &p,
        &start,
        &default_initial_covariance(),
        5.0,
        &FilterConfig::default(),
        &mut NoHooks,
    )
    .unwrap();
    let tail = pass.innovations[n - 72..].iter().map(|r| r.innovation.abs()).fold(0.0, f64::max);
    assert!(tail < 0.05, "{tail}");
}
