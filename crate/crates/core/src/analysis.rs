//! Numerical verification of the fast/slow structure of the closed loop:
//! scaled observer coordinates, disturbance coordinates reconstructed by
//! finite differences, quasi-steady states, the sector property of the
//! uncertainty map, the gain-ratio bound, and trajectory metrics.
//!
//! Reconstruction is deliberately finite-difference based: the higher
//! derivatives involved are not available to the controller at runtime, and
//! dense recorded trajectories verify the fast dynamics at a documented
//! `O(h^2)` accuracy.
//!
//! Everything here evaluates pure functions over immutable trajectories;
//! sample loops may run concurrently.

use nalgebra::{DMatrix, DVector};

use crate::controller::SmoothSaturation;
use crate::error::{Error, Result};
use crate::plant::{NominalModel, NormalFormPlant, RelativeDegree};
use crate::simulator::Trajectory;
use crate::synthesis::{assemble_filter_matrices, ControllerParams};

/// Fast coordinates at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FastCoords {
    pub xi: DVector<f64>,
    pub eta: DVector<f64>,
    pub tau: f64,
}

impl FastCoords {
    pub fn new(xi: DVector<f64>, eta: DVector<f64>, tau: f64, nu: &RelativeDegree) -> Result<Self> {
        if xi.len() != nu.total() || eta.len() != nu.total() {
            return Err(Error::Dimension(format!(
                "fast coordinates must have length {}, got xi {} eta {}",
                nu.total(),
                xi.len(),
                eta.len()
            )));
        }
        Ok(Self { xi, eta, tau })
    }
}

/// Scaled observer error `xi_{ij} = (q_{ij} - x_{ij}) / tau^{nu_i - j}`,
/// i.e. `xi = Delta^{-1} (q - x)` with
/// `Delta_i = diag(tau^{nu_i-1}, ..., tau, 1)`.
pub fn xi_from_states(
    q: &DVector<f64>,
    x: &DVector<f64>,
    tau: f64,
    nu: &RelativeDegree,
) -> Result<DVector<f64>> {
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
    }
    let total = nu.total();
    if q.len() != total || x.len() != total {
        return Err(Error::Dimension(format!(
            "q and x must have length {total}, got {} and {}",
            q.len(),
            x.len()
        )));
    }
    let mut xi = DVector::<f64>::zeros(total);
    for i in 0..nu.channels() {
        let nu_i = nu.degrees()[i];
        let blk = nu.block(i);
        for j in 0..nu_i {
            let scale = tau.powi((nu_i - 1 - j) as i32);
            xi[blk.start + j] = (q[blk.start + j] - x[blk.start + j]) / scale;
        }
    }
    Ok(xi)
}

/// Exact reconstruction of the leading disturbance coordinates
/// `eta_{[1]} = w - F(zbar, phi(q))` from a recorded sample; the recorded
/// disturbance signal satisfies this identity by construction of the filter.
pub fn eta1_from_sample(
    traj: &Trajectory,
    i: usize,
    params: &ControllerParams,
    nominal: &NominalModel,
) -> DVector<f64> {
    let xq = params.phi().apply(&traj.q_at(i));
    traj.w_at(i) - nominal.f(&traj.zbar_at(i), &xq)
}

/// Finite-difference reconstruction of the disturbance coordinates over a
/// densely recorded trajectory.
#[derive(Debug, Clone)]
pub struct EtaSeries {
    /// Index of the first reconstructed sample in the source trajectory
    /// (stencil boundary samples are dropped).
    pub first_index: usize,
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

/// Reconstructs `eta_{ij} = tau^{j-1} (d^{j-1} p_{i1} - d^j q_{i nu_i})`
/// with iterated central differences (`O(h^2)` per differentiation order).
/// Requires `record_stride = 1` and `step <= tau / 20`.
pub fn eta_from_trajectory(traj: &Trajectory, tau: f64, nu: &RelativeDegree) -> Result<EtaSeries> {
    let max_order = *nu.degrees().iter().max().expect("nonempty degrees");
    if traj.record_stride != 1 {
        return Err(Error::InsufficientSampling {
            order: max_order,
            detail: format!(
                "derivative reconstruction needs record_stride = 1, got {}",
                traj.record_stride
            ),
        });
    }
    if traj.step > tau / 20.0 * (1.0 + 1e-9) {
        return Err(Error::InsufficientSampling {
            order: max_order,
            detail: format!("step {} exceeds tau/20 = {}", traj.step, tau / 20.0),
        });
    }
    let n = traj.len();
    if n < 2 * max_order + 3 {
        return Err(Error::InsufficientSampling {
            order: max_order,
            detail: format!("{n} samples cannot support the stencil"),
        });
    }
    let h = traj.step;
    let total = nu.total();
    let first = max_order;
    let last = n - 1 - max_order; // inclusive

    let mut values = vec![DVector::<f64>::zeros(total); last - first + 1];
    for i in 0..nu.channels() {
        let nu_i = nu.degrees()[i];
        let blk = nu.block(i);
        let p1 = traj.p_scalar_series(blk.start);
        let qlast = traj.q_scalar_series(blk.end - 1);
        let dp = iterated_central(&p1, h, nu_i - 1);
        let dq = iterated_central(&qlast, h, nu_i);
        for (out_idx, s) in (first..=last).enumerate() {
            for j in 1..=nu_i {
                let val = tau.powi(j as i32 - 1) * (dp[j - 1][s] - dq[j][s]);
                values[out_idx][blk.start + j - 1] = val;
            }
        }
    }
    let times = traj.times()[first..=last].to_vec();
    Ok(EtaSeries {
        first_index: first,
        times,
        values,
    })
}

/// Iterated central differences: `out[k][i]` is the k-th derivative,
/// valid for `i` in `[k, n-1-k]`.
fn iterated_central(series: &[f64], h: f64, max_order: usize) -> Vec<Vec<f64>> {
    let n = series.len();
    let mut out = Vec::with_capacity(max_order + 1);
    out.push(series.to_vec());
    for k in 1..=max_order {
        let prev = &out[k - 1];
        let mut d = vec![0.0; n];
        for i in k..n - k {
            d[i] = (prev[i + 1] - prev[i - 1]) / (2.0 * h);
        }
        out.push(d);
    }
    out
}

/// Per-sample residual norms of the fast dynamics
/// `tau xidot = A_xi xi - tau B Theta_xi` and
/// `tau etadot = A eta + B Theta_eta`.
#[derive(Debug, Clone)]
pub struct ResidualSeries {
    pub first_index: usize,
    pub times: Vec<f64>,
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
}

impl ResidualSeries {
    /// Maximum residuals over samples with `t >= t_min`.
    pub fn max_after(&self, t_min: f64) -> (f64, f64) {
        self.max_in(t_min, f64::INFINITY)
    }

    /// Maximum residuals over samples with `t_lo <= t < t_hi`.
    ///
    /// Step-halving order measurements belong in the layer-decay window
    /// (a few tau after the peaking transient): once the fast content has
    /// fully died out the residuals sit at the rounding floor, below which
    /// no truncation-order scaling is observable.
    pub fn max_in(&self, t_lo: f64, t_hi: f64) -> (f64, f64) {
        let mut mx = 0.0_f64;
        let mut me = 0.0_f64;
        for (k, &t) in self.times.iter().enumerate() {
            if t >= t_lo && t < t_hi {
                mx = mx.max(self.xi[k]);
                me = me.max(self.eta[k]);
            }
        }
        (mx, me)
    }
}

/// Evaluates the fast-dynamics residuals along a dense trajectory.
///
/// `xi` is reconstructed exactly from recorded states; `eta` and both time
/// derivatives come from central differences. The forcing terms are
/// evaluated from the recorded states and control: the recorded `u` equals
/// the control expression of the fast dynamics evaluated at `q = x + Delta
/// xi`, and the recorded `w` equals `eta_{[1]} + F(zbar, phi(q))`, so no
/// derivative enters the right-hand sides.
pub fn fast_dynamics_residual(
    traj: &Trajectory,
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    params: &ControllerParams,
) -> Result<ResidualSeries> {
    let nu = plant.relative_degree();
    let tau = params.tau();
    let eta = eta_from_trajectory(traj, tau, nu)?;
    let n = traj.len();
    let r = eta.first_index;
    let total = nu.total();
    let m = nu.channels();
    let h = traj.step;

    // xi on the full range, exactly.
    let mut xi_all = Vec::with_capacity(n);
    for i in 0..n {
        xi_all.push(xi_from_states(&traj.q_at(i), &traj.x_at(i), tau, nu)?);
    }

    let (a_xi, _, _) = assemble_filter_matrices(params.gains(), nu, 1.0)?;
    let structure = plant.structure();

    let first = r + 1;
    let last = n - 2 - r;
    if first > last {
        return Err(Error::InsufficientSampling {
            order: 1,
            detail: "trajectory too short for residual stencils".into(),
        });
    }

    let mut out = ResidualSeries {
        first_index: first,
        times: Vec::with_capacity(last - first + 1),
        xi: Vec::with_capacity(last - first + 1),
        eta: Vec::with_capacity(last - first + 1),
    };

    for s in first..=last {
        let t = traj.time(s);
        let z = traj.z_at(s);
        let x = traj.x_at(s);
        let zbar = traj.zbar_at(s);
        let q = traj.q_at(s);
        let u = traj.u_at(s);
        let xq = params.phi().apply(&q);

        let xi_dot = (&xi_all[s + 1] - &xi_all[s - 1]) / (2.0 * h);
        let eta_here = &eta.values[s - r];
        let eta_dot = (&eta.values[s + 1 - r] - &eta.values[s - 1 - r]) / (2.0 * h);

        let g = plant.gain(&z, &x, t)?;
        let gbar = nominal.gain(&zbar, &xq, t)?;
        let f_zx = plant.f(&z, &x);

        // Theta_xi = F(z, x) + G u, with u the recorded control.
        let theta_xi = &f_zx + &g * &u;
        let mut b_theta_xi = DVector::<f64>::zeros(total);
        for i in 0..m {
            b_theta_xi[nu.block(i).end - 1] = theta_xi[i];
        }
        let res_xi = (&xi_dot * tau) - (&a_xi * &xi_all[s] - b_theta_xi * tau);

        // Theta_eta_i = -a_i . eta_i + a_{i1} ( -F_i(z, x) + ((Gbar - G) u)_i ).
        let mismatch = (&gbar - &g) * &u;
        let mut b_theta_eta = DVector::<f64>::zeros(total);
        for i in 0..m {
            let blk = nu.block(i);
            let a = params.gains().channel(i);
            let mut acc = 0.0;
            for (j, aj) in a.iter().enumerate() {
                acc -= aj * eta_here[blk.start + j];
            }
            acc += a[0] * (-f_zx[i] + mismatch[i]);
            b_theta_eta[blk.end - 1] = acc;
        }
        let mut a_eta = &structure.a * eta_here;
        a_eta += b_theta_eta;
        let res_eta = (&eta_dot * tau) - a_eta;

        out.times.push(t);
        out.xi.push(res_xi.norm());
        out.eta.push(res_eta.norm());
    }
    Ok(out)
}

/// Quasi-steady value of the leading disturbance coordinates:
///
/// ```text
/// eta1* = -F(zbar, x) + Gbar G^{-1} [ F(zbar, x) - F(z, x)
///                                     + (Gbar - G) Ur(zbar, x) ]
/// ```
pub fn quasi_steady_eta(
    z: &DVector<f64>,
    x: &DVector<f64>,
    zbar: &DVector<f64>,
    t: f64,
    plant: &NormalFormPlant,
    nominal: &NominalModel,
) -> Result<DVector<f64>> {
    let f_bar = nominal.f(zbar, x);
    let f_z = plant.f(z, x);
    let g = plant.gain(z, x, t)?;
    let g_inv = plant.gain_inverse(z, x, t)?;
    let gbar = nominal.gain(zbar, x, t)?;
    let ur = nominal.ur(zbar, x, t)?;
    let bracket = &f_bar - &f_z + (&gbar - &g) * ur;
    Ok(-f_bar + gbar * (g_inv * bracket))
}

/// Residual of the steady-state relation that defines `eta1*`:
///
/// ```text
/// 0 = F(z, x) - F(zbar, x) + G Gbar^{-1} (eta1* + F(zbar, x))
///     - (Gbar - G) Ur(zbar, x)
/// ```
///
/// An independent route: the quasi-steady value is computed with `G^{-1}`,
/// the residual with `Gbar^{-1}`.
pub fn quasi_steady_residual(
    z: &DVector<f64>,
    x: &DVector<f64>,
    zbar: &DVector<f64>,
    t: f64,
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    eta1_star: &DVector<f64>,
) -> Result<f64> {
    let f_bar = nominal.f(zbar, x);
    let f_z = plant.f(z, x);
    let g = plant.gain(z, x, t)?;
    let gbar = nominal.gain(zbar, x, t)?;
    let gbar_inv = nominal.gain_inverse(zbar, x, t)?;
    let ur = nominal.ur(zbar, x, t)?;
    let res = &f_z - &f_bar + &g * (gbar_inv * (eta1_star + &f_bar)) - (gbar - g) * ur;
    Ok(res.norm())
}

/// One sample for the sector verification.
#[derive(Debug, Clone)]
pub struct SectorSample {
    pub z: DVector<f64>,
    pub x: DVector<f64>,
    pub zbar: DVector<f64>,
    pub t: f64,
    pub zeta: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectorOutcome {
    /// Maximum of `(Psi - (1-mu) zeta)^T (Psi - (1+mu) zeta)` over samples;
    /// the sector claim is that this stays `<= 0` up to rounding slack.
    pub max_form: f64,
    pub worst_index: usize,
    pub samples: usize,
}

/// Evaluates the uncertainty map
///
/// ```text
/// Psi(zeta) = zeta - [I - G Gbar^{-1}] { Phi(zeta + eta1* + F) - Phi(eta1* + F) }
/// ```
///
/// at each sample and returns the worst sector quadratic form for the band
/// `[1-mu, 1+mu]`. Samples are assumed to lie where the state-estimate
/// saturation is the identity.
pub fn sector_check(
    samples: &[SectorSample],
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    big_phi: &SmoothSaturation,
    mu: f64,
) -> Result<SectorOutcome> {
    if samples.is_empty() {
        return Err(Error::Precondition("sector check needs samples".into()));
    }
    let m = plant.relative_degree().channels();
    let eye = DMatrix::<f64>::identity(m, m);
    let mut max_form = f64::NEG_INFINITY;
    let mut worst = 0;
    for (idx, s) in samples.iter().enumerate() {
        let eta1_star = quasi_steady_eta(&s.z, &s.x, &s.zbar, s.t, plant, nominal)?;
        let f_bar = nominal.f(&s.zbar, &s.x);
        let g = plant.gain(&s.z, &s.x, s.t)?;
        let gbar_inv = nominal.gain_inverse(&s.zbar, &s.x, s.t)?;
        let bracket = &eye - g * gbar_inv;
        let base = eta1_star + f_bar;
        let diff = big_phi.apply(&(&s.zeta + &base)) - big_phi.apply(&base);
        let psi = &s.zeta - bracket * diff;
        let lo = &psi - &s.zeta * (1.0 - mu);
        let hi = &psi - &s.zeta * (1.0 + mu);
        let form = lo.dot(&hi);
        if form > max_form {
            max_form = form;
            worst = idx;
        }
    }
    Ok(SectorOutcome {
        max_form,
        worst_index: worst,
        samples: samples.len(),
    })
}

/// Grid maximum of the gain mismatch ratio `|I - G(z,x,t) Gbar^{-1}(z,x,t)|`
/// (spectral norm) with its arg-max point.
#[derive(Debug, Clone)]
pub struct GainBoundOutcome {
    pub max_norm: f64,
    pub at_z: DVector<f64>,
    pub at_x: DVector<f64>,
    pub at_time: f64,
}

pub fn check_gain_bound(
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    states: &[(DVector<f64>, DVector<f64>)],
    times: &[f64],
) -> Result<GainBoundOutcome> {
    if states.is_empty() || times.is_empty() {
        return Err(Error::Precondition(
            "gain-bound check needs states and times".into(),
        ));
    }
    let m = plant.relative_degree().channels();
    let eye = DMatrix::<f64>::identity(m, m);
    let mut best: Option<GainBoundOutcome> = None;
    for (z, x) in states {
        for &t in times {
            let g = plant.gain(z, x, t)?;
            // The bound evaluates the nominal gain at the same (z, x).
            let gbar_inv = nominal.gain_inverse(z, x, t)?;
            let norm = (&eye - g * gbar_inv).singular_values().max();
            if best.as_ref().is_none_or(|b| norm > b.max_norm) {
                best = Some(GainBoundOutcome {
                    max_norm: norm,
                    at_z: z.clone(),
                    at_x: x.clone(),
                    at_time: t,
                });
            }
        }
    }
    Ok(best.expect("nonempty grids"))
}

/// Trajectory metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Supremum of the chain-state norm over the tail window `[t_ss, t_end]`.
    pub ultimate_bound: f64,
    /// Supremum of `|x - xbar|` against the nominal reference, when given.
    pub recovery_error: Option<f64>,
    /// Trapezoidal `integral |u| dt`.
    pub effort_l1: f64,
    /// Trapezoidal `integral |u|^2 dt`.
    pub effort_l2: f64,
    pub settled: bool,
    pub t_ss: f64,
}

/// Computes metrics over a recorded run; the nominal reference must share
/// the exact time grid.
pub fn compute_metrics(
    traj: &Trajectory,
    nominal_traj: Option<&Trajectory>,
    t_ss: f64,
    settle_threshold: f64,
) -> Result<Metrics> {
    if traj.is_empty() {
        return Err(Error::Invalid("empty trajectory".into()));
    }
    let mut ultimate = 0.0_f64;
    let mut any_tail = false;
    for i in 0..traj.len() {
        if traj.time(i) >= t_ss {
            ultimate = ultimate.max(traj.x_at(i).norm());
            any_tail = true;
        }
    }
    if !any_tail {
        // Short or truncated run: fall back to the full-range supremum.
        for i in 0..traj.len() {
            ultimate = ultimate.max(traj.x_at(i).norm());
        }
    }

    let recovery_error = match nominal_traj {
        None => None,
        Some(nom) => {
            if nom.len() != traj.len() {
                return Err(Error::MisalignedGrids(format!(
                    "{} vs {} samples",
                    traj.len(),
                    nom.len()
                )));
            }
            let mut sup = 0.0_f64;
            for i in 0..traj.len() {
                let dt = (traj.time(i) - nom.time(i)).abs();
                if dt > 1e-9 * (1.0 + traj.time(i).abs()) {
                    return Err(Error::MisalignedGrids(format!(
                        "sample {i}: t = {} vs {}",
                        traj.time(i),
                        nom.time(i)
                    )));
                }
                sup = sup.max((traj.x_at(i) - nom.x_at(i)).norm());
            }
            Some(sup)
        }
    };

    let mut effort_l1 = 0.0;
    let mut effort_l2 = 0.0;
    for i in 0..traj.len().saturating_sub(1) {
        let dt = traj.time(i + 1) - traj.time(i);
        let a = traj.u_at(i).norm();
        let b = traj.u_at(i + 1).norm();
        effort_l1 += 0.5 * (a + b) * dt;
        effort_l2 += 0.5 * (a * a + b * b) * dt;
    }

    Ok(Metrics {
        ultimate_bound: ultimate,
        recovery_error,
        effort_l1,
        effort_l2,
        settled: ultimate <= settle_threshold,
        t_ss,
    })
}
