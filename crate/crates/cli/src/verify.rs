//! Verification subcommand: seeded numerical checks of the analytical
//! structure — quasi-steady residuals, the sector property at the measured
//! gain ratio, the gain-bound audit against the design `mu`, and the
//! finite-difference order of the fast-dynamics residuals.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dobsim::analysis::{
    check_gain_bound, fast_dynamics_residual, quasi_steady_eta, quasi_steady_residual,
    sector_check, SectorSample,
};
use dobsim::plant::satellite::satellite_plant;
use dobsim::simulator::{simulate_closed_loop, SimConfig};

use crate::runspec::{MuMode, RunSpec};
use crate::{region_samples, say, write_file, Cli, CliError};

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
    lines: Vec<(String, String)>,
}

pub(crate) fn cmd_verify(cli: &Cli, spec: &RunSpec) -> Result<(), CliError> {
    let (plant, nominal, sat_params) = spec.build_plant()?;
    let ctrl = spec.build_controller(cli.tau)?;
    let v = &spec.verify;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = DVector::<f64>::zeros(0);
    let mut checks: Vec<Check> = Vec::new();

    // Quasi-steady residual over seeded in-region states.
    {
        let states = region_samples(&v.region_lo, &v.region_hi, v.quasi_steady_samples, &mut rng)?;
        let mut worst = 0.0_f64;
        for x in &states {
            let t = rng.random_range(0.0..v.time_range);
            let eta1 = quasi_steady_eta(&z, x, &z, t, &plant, &nominal)?;
            let res = quasi_steady_residual(&z, x, &z, t, &plant, &nominal, &eta1)?;
            worst = worst.max(res);
        }
        checks.push(Check {
            name: "quasi_steady",
            pass: worst < v.quasi_steady_tol,
            detail: format!(
                "worst residual {worst:.3e} over {} states (tol {:.1e})",
                v.quasi_steady_samples, v.quasi_steady_tol
            ),
            lines: vec![
                ("worst_residual".into(), format!("{worst}")),
                ("tolerance".into(), format!("{}", v.quasi_steady_tol)),
                ("samples".into(), format!("{}", v.quasi_steady_samples)),
            ],
        });
    }

    // Uncertainty-free collapse: the quasi-steady value reduces to -F.
    {
        let mut p0 = sat_params.clone();
        p0.m_true = p0.m_nominal;
        p0.theta_unknown = Arc::new(|_| 0.0);
        let (plant0, nominal0) = satellite_plant(&p0, spec.build_feedback_gain()?)?;
        let states = region_samples(&v.region_lo, &v.region_hi, v.quasi_steady_samples, &mut rng)?;
        let mut worst = 0.0_f64;
        for x in &states {
            let t = rng.random_range(0.0..v.time_range);
            let eta1 = quasi_steady_eta(&z, x, &z, t, &plant0, &nominal0)?;
            worst = worst.max((eta1 + plant0.f(&z, x)).norm());
        }
        checks.push(Check {
            name: "zero_uncertainty_collapse",
            pass: worst <= v.collapse_tol,
            detail: format!("worst collapse error {worst:.3e} (tol {:.1e})", v.collapse_tol),
            lines: vec![
                ("worst_error".into(), format!("{worst}")),
                ("tolerance".into(), format!("{}", v.collapse_tol)),
            ],
        });
    }

    // Sector property at the measured gain ratio over the same sample grid.
    {
        let xs = region_samples(&v.region_lo, &v.region_hi, v.sector_states, &mut rng)?;
        let times: Vec<f64> = (0..v.sector_times)
            .map(|_| rng.random_range(0.0..v.time_range))
            .collect();
        let state_pairs: Vec<(DVector<f64>, DVector<f64>)> =
            xs.iter().map(|x| (z.clone(), x.clone())).collect();
        let bound = check_gain_bound(&plant, &nominal, &state_pairs, &times)?;
        let mut samples = Vec::with_capacity(xs.len() * times.len());
        for x in &xs {
            for &t in &times {
                samples.push(SectorSample {
                    z: z.clone(),
                    x: x.clone(),
                    zbar: z.clone(),
                    t,
                    zeta: DVector::from_fn(2, |_, _| {
                        rng.random_range(-v.zeta_range..v.zeta_range)
                    }),
                });
            }
        }
        let out = sector_check(&samples, &plant, &nominal, ctrl.big_phi(), bound.max_norm)?;
        checks.push(Check {
            name: "sector",
            pass: out.max_form <= v.sector_tol,
            detail: format!(
                "max quadratic form {:.3e} over {} samples at measured mu {:.4} (tol {:.1e})",
                out.max_form, out.samples, bound.max_norm, v.sector_tol
            ),
            lines: vec![
                ("max_form".into(), format!("{}", out.max_form)),
                ("measured_mu".into(), format!("{}", bound.max_norm)),
                ("samples".into(), format!("{}", out.samples)),
                ("tolerance".into(), format!("{}", v.sector_tol)),
            ],
        });
    }

    // Gain-bound audit against the design mu.
    {
        let n = v.gain_grid_points.max(2);
        let dims = v.region_lo.len();
        let mut states = Vec::new();
        let mut idx = vec![0usize; dims];
        'outer: loop {
            let x = DVector::from_fn(dims, |d, _| {
                v.region_lo[d] + (v.region_hi[d] - v.region_lo[d]) * idx[d] as f64 / (n - 1) as f64
            });
            states.push((z.clone(), x));
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == dims {
                    break 'outer;
                }
            }
        }
        let times: Vec<f64> = (0..v.gain_time_points)
            .map(|k| v.time_range * k as f64 / (v.gain_time_points.max(2) - 1) as f64)
            .collect();
        let audit = check_gain_bound(&plant, &nominal, &states, &times)?;
        let mismatch = audit.max_norm > spec.synthesis.mu;
        let pass = match v.mu_mode {
            MuMode::ReportOnly => true,
            MuMode::Enforce => !mismatch,
        };
        let mode = match v.mu_mode {
            MuMode::ReportOnly => "report-only",
            MuMode::Enforce => "enforce",
        };
        checks.push(Check {
            name: "gain_bound",
            pass,
            detail: format!(
                "grid max |I - G Gbar^-1| = {:.4} vs design mu = {}; mismatch {} ({mode})",
                audit.max_norm,
                spec.synthesis.mu,
                if mismatch { "FLAGGED" } else { "none" }
            ),
            lines: vec![
                ("max_norm".into(), format!("{}", audit.max_norm)),
                ("design_mu".into(), format!("{}", spec.synthesis.mu)),
                ("mismatch_flagged".into(), format!("{mismatch}")),
                ("mode".into(), mode.into()),
                ("argmax_x".into(), format!("{:?}", audit.at_x.as_slice())),
                ("argmax_t".into(), format!("{}", audit.at_time)),
            ],
        });
    }

    // Fast-dynamics residual order under step halving.
    {
        let f = &v.fast;
        let params_fast = ctrl.with_tau(f.tau)?;
        let run = |steps_per_tau: f64| -> Result<_, CliError> {
            let mut cfg = SimConfig::new(f.t_end, f.tau / steps_per_tau, f.tau, 0, 4);
            cfg.x0 = DVector::from_vec(spec.sim.x0.clone());
            let traj = simulate_closed_loop(&plant, &nominal, &params_fast, &cfg)?;
            if traj.aborted.is_some() {
                return Err(CliError::Numerical(
                    "fast-check simulation diverged".into(),
                ));
            }
            Ok(fast_dynamics_residual(&traj, &plant, &nominal, &params_fast)?)
        };
        let res_h = run(f.steps_per_tau)?;
        let res_h2 = run(2.0 * f.steps_per_tau)?;
        let (lo, hi) = (f.window_lo * f.tau, f.window_hi * f.tau);
        let (xi_h, eta_h) = res_h.max_in(lo, hi);
        let (xi_h2, eta_h2) = res_h2.max_in(lo, hi);
        let xi_order = (xi_h / xi_h2).log2();
        let eta_order = (eta_h / eta_h2).log2();

        let mut csv = String::from("t,xi_residual,eta_residual\n");
        for (k, &t) in res_h.times.iter().enumerate() {
            csv.push_str(&format!("{t},{},{}\n", res_h.xi[k], res_h.eta[k]));
        }
        write_file(&cli.out.join("residuals.csv"), &csv)?;
        checks.push(Check {
            name: "fast_dynamics",
            pass: xi_order >= f.min_order && eta_order >= f.min_order,
            detail: format!(
                "step-halving orders xi {xi_order:.2}, eta {eta_order:.2} (min {})",
                f.min_order
            ),
            lines: vec![
                ("xi_order".into(), format!("{xi_order}")),
                ("eta_order".into(), format!("{eta_order}")),
                ("xi_residual".into(), format!("{xi_h}")),
                ("eta_residual".into(), format!("{eta_h}")),
                ("min_order".into(), format!("{}", f.min_order)),
                ("window_lo_tau".into(), format!("{}", f.window_lo)),
                ("window_hi_tau".into(), format!("{}", f.window_hi)),
            ],
        });
    }

    // Report.
    let mut text = String::from("schema = dobsim.verify.v1\n");
    text.push_str(&format!("seed = {}\n", spec.seed));
    let mut all_pass = true;
    for c in &checks {
        all_pass &= c.pass;
        text.push_str(&format!("check.{}.pass = {}\n", c.name, c.pass));
        for (k, val) in &c.lines {
            text.push_str(&format!("check.{}.{} = {}\n", c.name, k, val));
        }
        say(cli, &format!("{}: {} — {}", c.name, if c.pass { "pass" } else { "FAIL" }, c.detail));
    }
    text.push_str(&format!("pass = {all_pass}\n"));
    let path = cli.out.join("verify.txt");
    write_file(&path, &text)?;
    say(cli, &format!("wrote {}", path.display()));

    if !all_pass {
        let failing: Vec<&str> = checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name)
            .collect();
        return Err(CliError::Verification(format!(
            "checks failed: {}",
            failing.join(", ")
        )));
    }
    Ok(())
}
