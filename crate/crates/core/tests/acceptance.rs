//! Acceptance suite: one test per release criterion, each printing a
//! `criterion N: PASS/FAIL` line (visible with `cargo test --test acceptance
//! -- --nocapture`). Tolerances are pinned here, not configurable.

use dobsim::analysis::{
    check_gain_bound, compute_metrics, fast_dynamics_residual, quasi_steady_eta,
    quasi_steady_residual, sector_check, SectorSample,
};
use dobsim::controller::SmoothSaturation;
use dobsim::plant::satellite::{default_feedback_gain, satellite_plant, SatelliteParams};
use dobsim::plant::{FeedbackFn, GainFn, NominalModel, NormalFormPlant, RelativeDegree};
use dobsim::poly;
use dobsim::simulator::{simulate_closed_loop, simulate_nominal, sweep_tau, SimConfig};
use dobsim::synthesis::{
    design_gains, ChannelDesign, ControllerParams, FrequencyGrid, GainVector, SectorDisk,
};
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

const X0: [f64; 4] = [1.0, -2.0, 0.0, -0.8];

fn reference_setup(tau: f64) -> (NormalFormPlant, NominalModel, ControllerParams) {
    let p = SatelliteParams::reference();
    let (plant, nominal) = satellite_plant(&p, default_feedback_gain()).unwrap();
    let params = reference_controller(tau);
    (plant, nominal, params)
}

fn reference_controller(tau: f64) -> ControllerParams {
    ControllerParams::new(
        GainVector::uniform(vec![15.0, 8.0], 2).unwrap(),
        RelativeDegree::new(vec![2, 2]).unwrap(),
        tau,
        SmoothSaturation::uniform(25.0, 4, 1.0).unwrap(),
        SmoothSaturation::uniform(100.0, 2, 1.0).unwrap(),
    )
    .unwrap()
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// In-region sample boxes for the verification criteria: states where the
/// estimate saturation is the identity and the gain matrices are far from
/// singular.
fn sample_state(rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_vec(vec![
        rng.random_range(-1.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    ])
}

#[test]
fn criterion_01_nominal_convergence() {
    let (plant, nominal, _) = reference_setup(1e-3);
    let mut cfg = SimConfig::new(10.0, 1e-3, 1e-3, 0, 4);
    cfg.x0 = DVector::from_vec(X0.to_vec());
    let traj = simulate_nominal(&plant, &nominal, &cfg).unwrap();
    assert!(traj.aborted.is_none());

    let x0_norm = DVector::from_vec(X0.to_vec()).norm();
    let xf = traj.x_at(traj.len() - 1).norm();
    let converged = xf <= 0.01 * x0_norm;

    // Independent linear oracle: with Ur = Gbar^{-1}(-F - K x) the nominal
    // chain is exactly xdot = (A - B K) x, block-diagonal with distinct real
    // poles {-1, -3} and {-3, -5}; closed-form modal solution per channel.
    let modal = |l1: f64, l2: f64, x0: f64, v0: f64, t: f64| {
        let alpha = (v0 - l2 * x0) / (l1 - l2);
        let beta = x0 - alpha;
        (
            alpha * (l1 * t).exp() + beta * (l2 * t).exp(),
            alpha * l1 * (l1 * t).exp() + beta * l2 * (l2 * t).exp(),
        )
    };
    let mut max_err = 0.0_f64;
    for i in 0..traj.len() {
        let t = traj.time(i);
        let x = traj.x_at(i);
        let (p1, v1) = modal(-1.0, -3.0, X0[0], X0[1], t);
        let (p2, v2) = modal(-3.0, -5.0, X0[2], X0[3], t);
        for (got, want) in [
            (x[0], p1),
            (x[1], v1),
            (x[2], p2),
            (x[3], v2),
        ] {
            max_err = max_err.max((got - want).abs());
        }
    }
    let oracle_ok = max_err < 1e-6;
    report(
        "01 nominal convergence",
        converged && oracle_ok,
        &format!(
            "|xbar(10)| = {xf:.3e} (bound {:.3e}); max modal-solution error {max_err:.3e} (bound 1e-6)",
            0.01 * x0_norm
        ),
    );
}

#[test]
fn criterion_02_gain_design() {
    let disk = SectorDisk::new(0.001).unwrap();
    let channels = vec![
        ChannelDesign {
            inner: vec![8.0],
            a1: Some(15.0),
            bracket: (1e-3, 1e3),
        };
        2
    ];
    let (_, reports) = design_gains(&channels, &disk, &FrequencyGrid::default(), 0.95).unwrap();
    let certified = reports
        .iter()
        .all(|r| r.nyquist.pass && r.spr.pass && r.spr.min_re > 0.0);

    let mut roots = poly::companion_roots(&[15.0, 8.0]);
    roots.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
    let roots_ok = (roots[0].re + 5.0).abs() < 1e-9
        && (roots[1].re + 3.0).abs() < 1e-9
        && roots[0].im.abs() < 1e-9
        && roots[1].im.abs() < 1e-9;

    report(
        "02 gain design",
        certified && roots_ok,
        &format!(
            "a = [15, 8] certified on both channels at mu = 0.001 (SPR margins {:.4}, {:.4}); closed roots {:?}",
            reports[0].spr.min_re,
            reports[1].spr.min_re,
            roots.iter().map(|r| r.re).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_03_quasi_steady_states() {
    let (plant, nominal, _) = reference_setup(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0B1);
    let z = DVector::zeros(0);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let x = sample_state(&mut rng);
        let t = rng.random_range(0.0..0.5);
        let eta1 = quasi_steady_eta(&z, &x, &z, t, &plant, &nominal).unwrap();
        let res = quasi_steady_residual(&z, &x, &z, t, &plant, &nominal, &eta1).unwrap();
        worst = worst.max(res);
    }
    let residual_ok = worst < 1e-10;

    // Zero-uncertainty collapse: eta1* = -F exactly.
    let p0 = SatelliteParams::reference_without_uncertainty();
    let (plant0, nominal0) = satellite_plant(&p0, default_feedback_gain()).unwrap();
    let mut collapse_worst = 0.0_f64;
    for _ in 0..100 {
        let x = sample_state(&mut rng);
        let t = rng.random_range(0.0..0.5);
        let eta1 = quasi_steady_eta(&z, &x, &z, t, &plant0, &nominal0).unwrap();
        collapse_worst = collapse_worst.max((eta1 + plant0.f(&z, &x)).norm());
    }
    let collapse_ok = collapse_worst <= 1e-12;

    report(
        "03 quasi-steady states",
        residual_ok && collapse_ok,
        &format!(
            "worst steady-state residual {worst:.3e} (bound 1e-10) over 100 seeded states; \
             zero-uncertainty collapse error {collapse_worst:.3e} (bound 1e-12)"
        ),
    );
}

#[test]
fn criterion_04_sector_property() {
    let (plant, nominal, params) = reference_setup(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0B2);
    let z = DVector::zeros(0);

    // 100 states x 100 times; the gain bound is measured over exactly this
    // grid, then the sector is checked at the same points.
    let states: Vec<(DVector<f64>, DVector<f64>)> = (0..100)
        .map(|_| (z.clone(), sample_state(&mut rng)))
        .collect();
    let times: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..0.5)).collect();
    let bound = check_gain_bound(&plant, &nominal, &states, &times).unwrap();

    let mut samples = Vec::with_capacity(states.len() * times.len());
    for (zs, xs) in &states {
        for &t in &times {
            samples.push(SectorSample {
                z: zs.clone(),
                x: xs.clone(),
                zbar: zs.clone(),
                t,
                zeta: DVector::from_fn(2, |_, _| rng.random_range(-10.0..10.0)),
            });
        }
    }
    let out = sector_check(&samples, &plant, &nominal, params.big_phi(), bound.max_norm).unwrap();
    report(
        "04 sector property",
        out.max_form <= 1e-12,
        &format!(
            "max quadratic form {:.3e} (bound 1e-12) over {} samples at measured mu = {:.4}",
            out.max_form, out.samples, bound.max_norm
        ),
    );
}

#[test]
fn criterion_05_fast_dynamics_residuals() {
    // Order measurement in the layer-decay window [3 tau, 6 tau]: past it
    // the residuals sit at the rounding floor (itself asserted tiny).
    let tau = 1e-3;
    let (plant, nominal, params) = reference_setup(tau);
    let run = |steps_per_tau: f64| {
        let mut cfg = SimConfig::new(0.05, tau / steps_per_tau, tau, 0, 4);
        cfg.x0 = DVector::from_vec(X0.to_vec());
        let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        assert!(traj.aborted.is_none());
        fast_dynamics_residual(&traj, &plant, &nominal, &params).unwrap()
    };
    let res_h = run(40.0);
    let res_h2 = run(80.0);
    let (xi_h, eta_h) = res_h.max_in(3.0 * tau, 6.0 * tau);
    let (xi_h2, eta_h2) = res_h2.max_in(3.0 * tau, 6.0 * tau);
    let xi_order = (xi_h / xi_h2).log2();
    let eta_order = (eta_h / eta_h2).log2();
    let (xi_tail, eta_tail) = res_h.max_after(0.02);
    let pass = xi_order >= 1.8 && eta_order >= 1.8 && xi_tail < 1e-9 && eta_tail < 1e-4;
    report(
        "05 fast-dynamics residuals",
        pass,
        &format!(
            "halving orders: xi {xi_order:.2}, eta {eta_order:.2} (bound 1.8); \
             settled-window residuals xi {xi_tail:.2e}, eta {eta_tail:.2e}"
        ),
    );
}

#[test]
fn criterion_06_practical_stability() {
    let tau = 1e-3;
    let (plant, nominal, params) = reference_setup(tau);
    let mut cfg = SimConfig::new(20.0, tau / 20.0, tau, 0, 4);
    cfg.x0 = DVector::from_vec(X0.to_vec());
    cfg.record_stride = 50;
    let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
    assert!(traj.aborted.is_none());
    let m = compute_metrics(&traj, None, 14.0, 0.05).unwrap();
    report(
        "06 practical stability",
        m.ultimate_bound <= 0.05,
        &format!(
            "sup |x| over [14, 20] s = {:.3e} (bound 5e-2) under full uncertainty at tau = 1e-3",
            m.ultimate_bound
        ),
    );
}

#[test]
fn criterion_07_performance_recovery() {
    let tau_list = [1e-1, 1e-2, 1e-3];
    let (plant, nominal, params) = reference_setup(1e-3);
    let mut cfg = SimConfig::new(20.0, 1e-3 / 20.0, 1e-3, 0, 4);
    cfg.x0 = DVector::from_vec(X0.to_vec());
    let report_data = sweep_tau(&plant, &nominal, &params, &cfg, &tau_list, 0.7, 0.05).unwrap();

    let clean = report_data
        .entries
        .iter()
        .all(|e| e.error.is_none() && !e.aborted);
    assert!(clean, "all sweep runs must complete");

    let recovery: Vec<f64> = report_data
        .entries
        .iter()
        .map(|e| e.metrics.as_ref().unwrap().recovery_error.unwrap())
        .collect();
    let recovery_monotone = recovery.windows(2).all(|w| w[1] <= w[0]);

    // Tail fast-variable errors scale at most linearly with tau: each
    // ten-fold tau reduction must reduce the tails at least ten-fold up to a
    // constant slack of 3.
    let xi: Vec<f64> = report_data.entries.iter().map(|e| e.xi_tail.unwrap()).collect();
    let eta: Vec<f64> = report_data
        .entries
        .iter()
        .map(|e| e.eta1_tail_err.unwrap())
        .collect();
    let linear_or_better = |s: &[f64]| {
        s.windows(2).enumerate().all(|(k, w)| {
            let tau_ratio = tau_list[k + 1] / tau_list[k];
            w[1] <= 3.0 * w[0] * tau_ratio
        })
    };
    let xi_ok = linear_or_better(&xi);
    let eta_ok = linear_or_better(&eta);
    let c_xi = xi
        .iter()
        .zip(tau_list.iter())
        .map(|(s, t)| s / t)
        .fold(0.0_f64, f64::max);
    let c_eta = eta
        .iter()
        .zip(tau_list.iter())
        .map(|(s, t)| s / t)
        .fold(0.0_f64, f64::max);

    report(
        "07 performance recovery",
        recovery_monotone && xi_ok && eta_ok,
        &format!(
            "recovery sup|x - xbar| over tau {tau_list:?}: {recovery:?} (non-increasing); \
             xi tails {xi:?} and eta tails {eta:?} within C*tau (C_xi = {c_xi:.2e}, C_eta = {c_eta:.2e})"
        ),
    );
}

#[test]
fn criterion_08_control_effort_comparison() {
    let tau = 1e-3;
    let p = SatelliteParams::reference();
    let (plant, nominal, params) = reference_setup(tau);
    let mut cfg = SimConfig::new(20.0, tau / 20.0, tau, 0, 4);
    cfg.x0 = DVector::from_vec(X0.to_vec());
    cfg.record_stride = 50;

    let traj_nl = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
    assert!(traj_nl.aborted.is_none());
    let m_nl = compute_metrics(&traj_nl, None, 14.0, 0.05).unwrap();

    // Constant nominal gain diag(1/m, 1/m) with the same feedback targets.
    let m_true = p.m_true;
    let gbar_c: GainFn = Arc::new(move |_z, _x, _t| {
        nalgebra::DMatrix::from_row_slice(2, 2, &[1.0 / m_true, 0.0, 0.0, 1.0 / m_true])
    });
    let k_fb = default_feedback_gain();
    let plant_f = plant.clone();
    let ur_c: FeedbackFn = Arc::new(move |z, x, _t| (-plant_f.f(z, x) - &k_fb * x) * m_true);
    let nominal_c = NominalModel::sharing(&plant, gbar_c, ur_c);
    let traj_c = simulate_closed_loop(&plant, &nominal_c, &params, &cfg).unwrap();
    assert!(traj_c.aborted.is_none());
    let m_c = compute_metrics(&traj_c, None, 14.0, 0.05).unwrap();

    report(
        "08 control effort comparison",
        m_nl.effort_l1 < m_c.effort_l1,
        &format!(
            "integral |u| dt: nonlinear nominal gain {:.3} < constant nominal gain {:.3}",
            m_nl.effort_l1, m_c.effort_l1
        ),
    );
}

#[test]
fn criterion_09_gain_bound_audit() {
    let (plant, nominal, _) = reference_setup(1e-3);
    let z = DVector::zeros(0);
    let mut states = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let x11 = -1.0 + 3.0 * i as f64 / 4.0;
            let x22 = -2.0 + 4.0 * j as f64 / 4.0;
            states.push((z.clone(), DVector::from_vec(vec![x11, 0.0, 0.0, x22])));
        }
    }
    let times: Vec<f64> = (0..9).map(|k| 0.5 * k as f64 / 8.0).collect();
    let out = check_gain_bound(&plant, &nominal, &states, &times).unwrap();
    // Closed-form floor: the unknown rotation alone contributes
    // 2 sin(pi/10) ~ 0.618 at matched masses; the design mu is 0.001.
    let design_mu = 0.001;
    let pass = out.max_norm >= 0.61 && out.max_norm > design_mu;
    report(
        "09 gain-bound audit",
        pass,
        &format!(
            "grid max |I - G Gbar^-1| = {:.3} (floor 0.61) at x = {:?}, t = {:.3}; \
             exceeds design mu = {design_mu} — mismatch flagged",
            out.max_norm,
            out.at_x.as_slice(),
            out.at_time
        ),
    );
}

#[test]
fn criterion_10_determinism_and_order() {
    let tau = 1e-3;
    let (plant, nominal, params) = reference_setup(tau);

    // Byte-identical CSVs from identical configurations.
    let mut cfg = SimConfig::new(1.0, tau / 20.0, tau, 0, 4);
    cfg.x0 = DVector::from_vec(X0.to_vec());
    cfg.record_stride = 10;
    let a = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
    let b = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
    let deterministic = a.to_csv_string() == b.to_csv_string();

    // RK4 self-convergence on the closed loop. The initial condition is
    // scaled down so the full observer peaking transient stays inside the
    // saturation identity regions: the dynamics are then smooth while the
    // fast boundary layer is genuinely excited, and the error is measured
    // where its truncation is alive. The step is coarse relative to the
    // layer (tau / 8) so truncation dominates the rounding floor.
    let x0 = DVector::from_vec(X0.to_vec()) * 3e-7;
    let t_end = 0.01;
    let run = |h: f64| {
        let mut c = SimConfig::new(t_end, h, tau, 0, 4);
        c.x0 = x0.clone();
        // record endpoints only
        c.record_stride = (t_end / h + 0.5) as usize;
        c.allow_coarse_step = true;
        let t = simulate_closed_loop(&plant, &nominal, &params, &c).unwrap();
        assert!(t.aborted.is_none());
        assert!((t.time(t.len() - 1) - t_end).abs() < 1e-9);
        t.x_at(t.len() - 1)
    };
    let h = tau / 8.0;
    let x_h = run(h);
    let x_h2 = run(h / 2.0);
    let x_ref = run(h / 16.0);
    let e1 = (&x_h - &x_ref).norm();
    let e2 = (&x_h2 - &x_ref).norm();
    let order = (e1 / e2).log2();
    let order_ok = (3.3..=4.5).contains(&order);

    report(
        "10 determinism and integrator order",
        deterministic && order_ok,
        &format!(
            "replay byte-identical: {deterministic}; RK4 self-convergence order {order:.2} \
             (errors {e1:.3e} -> {e2:.3e}, window [3.3, 4.5])"
        ),
    );
}
