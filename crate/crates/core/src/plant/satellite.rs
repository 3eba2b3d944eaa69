//! Planar point-mass satellite example: two thrusters acting through an
//! uncertain rotation, written in tracking coordinates around a circular
//! reference orbit.
//!
//! States: `x11 = r - r*`, `x12 = rdot`, `x21 = r* (psi - omega* t)`,
//! `x22 = r* (psidot - omega*)`, with relative degree `[2; 2]` and no
//! internal dynamics. The thruster frame is rotated by
//! `theta(t) = theta_known(t) + theta_unknown(t)`; only `theta_known` enters
//! the nominal gain.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{DynamicsFn, FeedbackFn, GainFn, NominalModel, NormalFormPlant, RelativeDegree};
use crate::error::{Error, Result};
use crate::synthesis::state_feedback_from_poles;

/// Scalar angle trajectory `t -> rad`.
pub type AngleFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Physical and uncertainty parameters of the satellite example.
#[derive(Clone)]
pub struct SatelliteParams {
    /// True mass (kg), unknown to the controller.
    pub m_true: f64,
    /// Nominal mass (kg) used by the nominal gain.
    pub m_nominal: f64,
    /// Field constant; a circular orbit of radius `r_star` at rate
    /// `omega_star` requires `k = r_star^3 omega_star^2`.
    pub k: f64,
    /// Reference orbit radius (m).
    pub r_star: f64,
    /// Reference orbit rate (rad/s).
    pub omega_star: f64,
    /// Known part of the thruster-frame rotation.
    pub theta_known: AngleFn,
    /// Unknown part of the thruster-frame rotation.
    pub theta_unknown: AngleFn,
    /// Bound on `|theta_unknown(t)|`.
    pub c_theta_bound: f64,
}

impl SatelliteParams {
    /// Reference parameter set: `m = 1.2`, `mbar = 1`, `k = 5`, `r* = 1.5`,
    /// `omega* = sqrt(k / r*^3)`, `theta_known = (pi/2) sin(pi t)`,
    /// `theta_unknown = (pi/5) sin(4 pi t)`.
    pub fn reference() -> Self {
        let k = 5.0;
        let r_star = 1.5;
        Self {
            m_true: 1.2,
            m_nominal: 1.0,
            k,
            r_star,
            omega_star: (k / r_star.powi(3)).sqrt(),
            theta_known: Arc::new(|t| std::f64::consts::FRAC_PI_2 * (std::f64::consts::PI * t).sin()),
            theta_unknown: Arc::new(|t| {
                (std::f64::consts::PI / 5.0) * (4.0 * std::f64::consts::PI * t).sin()
            }),
            c_theta_bound: std::f64::consts::PI / 5.0,
        }
    }

    /// Same parameters with the uncertainty removed: true mass equals the
    /// nominal mass and the unknown rotation is zero.
    pub fn reference_without_uncertainty() -> Self {
        let mut p = Self::reference();
        p.m_true = p.m_nominal;
        p.theta_unknown = Arc::new(|_| 0.0);
        p
    }

    /// Checks positivity, the orbit identity `k = r*^3 omega*^2` (relative
    /// tolerance `1e-12`), and the unknown-angle bound on sampled times.
    pub fn validate(&self) -> Result<()> {
        if self.m_true <= 0.0 || self.m_nominal <= 0.0 || self.k <= 0.0 || self.r_star <= 0.0 {
            return Err(Error::Invalid(
                "satellite masses, field constant, and radius must be positive".into(),
            ));
        }
        let ident = self.r_star.powi(3) * self.omega_star * self.omega_star;
        if (ident - self.k).abs() > 1e-12 * self.k.abs() {
            return Err(Error::Invalid(format!(
                "orbit identity violated: r*^3 omega*^2 = {ident}, k = {}",
                self.k
            )));
        }
        for i in 0..=1000 {
            let t = i as f64 * 0.01;
            let th = (self.theta_unknown)(t);
            if th.abs() > self.c_theta_bound + 1e-12 {
                return Err(Error::Invalid(format!(
                    "theta_unknown({t}) = {th} exceeds bound {}",
                    self.c_theta_bound
                )));
            }
        }
        Ok(())
    }
}

/// Planar rotation matrix `[cos, sin; -sin, cos]`.
pub fn rotation(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, s, -s, c])
}

fn diag_gain(m: f64, r_star: f64, rad: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0 / m, 0.0, 0.0, r_star / (m * rad)])
}

/// Builds the satellite plant and its nominal model.
///
/// `k_fb` is the state feedback gain of the nominal control
/// `Ur = Gbar^{-1} (-F(x) - K x)`; see [`default_feedback_gain`] for the
/// standard pole-placement choice. The gain evaluators go non-finite when
/// `x11 + r* <= 0` (thruster geometry singular), which the evaluation guards
/// turn into errors.
pub fn satellite_plant(
    params: &SatelliteParams,
    k_fb: DMatrix<f64>,
) -> Result<(NormalFormPlant, NominalModel)> {
    params.validate()?;
    if k_fb.nrows() != 2 || k_fb.ncols() != 4 {
        return Err(Error::Dimension(format!(
            "satellite feedback gain must be 2 x 4, got {} x {}",
            k_fb.nrows(),
            k_fb.ncols()
        )));
    }
    let nu = RelativeDegree::new(vec![2, 2])?;

    let r_star = params.r_star;
    let k = params.k;
    let omega_star = params.omega_star;

    let f0: DynamicsFn = Arc::new(|_z, _x| DVector::zeros(0));

    let f: DynamicsFn = Arc::new(move |_z, x| {
        let rad = x[0] + r_star;
        let rate = x[3] / r_star + omega_star;
        DVector::from_vec(vec![
            rad * rate * rate - k / (rad * rad),
            -2.0 * x[1] * r_star / rad * rate,
        ])
    });

    let m_true = params.m_true;
    let theta_known = Arc::clone(&params.theta_known);
    let theta_unknown = Arc::clone(&params.theta_unknown);
    let g: GainFn = Arc::new(move |_z, x, t| {
        let rad = x[0] + r_star;
        if rad <= 0.0 {
            return DMatrix::from_element(2, 2, f64::NAN);
        }
        diag_gain(m_true, r_star, rad) * rotation(theta_known(t) + theta_unknown(t))
    });

    let m_nom = params.m_nominal;
    let theta_known_bar = Arc::clone(&params.theta_known);
    let gbar: GainFn = Arc::new(move |_z, x, t| {
        let rad = x[0] + r_star;
        if rad <= 0.0 {
            return DMatrix::from_element(2, 2, f64::NAN);
        }
        diag_gain(m_nom, r_star, rad) * rotation(theta_known_bar(t))
    });

    let f_for_ur = Arc::clone(&f);
    let theta_known_ur = Arc::clone(&params.theta_known);
    let ur: FeedbackFn = Arc::new(move |z, x, t| {
        let rad = x[0] + r_star;
        if rad <= 0.0 {
            return DVector::from_element(2, f64::NAN);
        }
        // Gbar^{-1} = R(theta)^T diag(mbar, mbar rad / r*)
        let dinv = DMatrix::from_row_slice(2, 2, &[m_nom, 0.0, 0.0, m_nom * rad / r_star]);
        let target = -f_for_ur(z, x) - &k_fb * x;
        rotation(theta_known_ur(t)).transpose() * dinv * target
    });

    let plant = NormalFormPlant::new(4, nu, Arc::clone(&f0), Arc::clone(&f), g)?;
    let nominal = NominalModel::sharing(&plant, gbar, ur);
    Ok((plant, nominal))
}

/// Default pole-placement feedback: channel 1 takes `{-1, -3}` and channel 2
/// takes `{-3, -5}`, so the nominal closed loop has characteristic polynomial
/// `(s+1)(s+3)^2(s+5)`.
pub fn default_feedback_gain() -> DMatrix<f64> {
    let nu = RelativeDegree::new(vec![2, 2]).expect("static degree vector");
    state_feedback_from_poles(
        &nu,
        &[
            vec![Complex64::new(-1.0, 0.0), Complex64::new(-3.0, 0.0)],
            vec![Complex64::new(-3.0, 0.0), Complex64::new(-5.0, 0.0)],
        ],
    )
    .expect("static pole set")
}

/// True-gain evaluator with the unknown angle frozen at `offset`; used to
/// sample uncertainty extremes in saturation-level estimation and
/// gain-bound audits.
pub fn gain_with_theta_offset(params: &SatelliteParams, offset: f64) -> GainFn {
    let m_true = params.m_true;
    let r_star = params.r_star;
    let theta_known = Arc::clone(&params.theta_known);
    Arc::new(move |_z, x, t| {
        let rad = x[0] + r_star;
        if rad <= 0.0 {
            return DMatrix::from_element(2, 2, f64::NAN);
        }
        diag_gain(m_true, r_star, rad) * rotation(theta_known(t) + offset)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::plant_rhs;
    use approx::assert_relative_eq;

    fn reference_pair() -> (NormalFormPlant, NominalModel) {
        satellite_plant(&SatelliteParams::reference(), default_feedback_gain()).unwrap()
    }

    #[test]
    fn reference_params_validate() {
        SatelliteParams::reference().validate().unwrap();
        SatelliteParams::reference_without_uncertainty()
            .validate()
            .unwrap();
    }

    #[test]
    fn gain_at_origin_with_zero_angle_is_isotropic() {
        // With theta = 0 and x11 = 0 the gain reduces to diag(1/m, 1/m).
        let mut params = SatelliteParams::reference();
        params.theta_known = Arc::new(|_| 0.0);
        params.theta_unknown = Arc::new(|_| 0.0);
        let (plant, _) = satellite_plant(&params, default_feedback_gain()).unwrap();
        let g = plant
            .gain(&DVector::zeros(0), &DVector::zeros(4), 0.3)
            .unwrap();
        let expect = 1.0 / params.m_true;
        assert_relative_eq!(g[(0, 0)], expect, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 1)], expect, epsilon = 1e-15);
        assert_relative_eq!(g[(0, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(g[(1, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rotation_identities() {
        assert_relative_eq!(
            (rotation(0.0) - DMatrix::<f64>::identity(2, 2)).norm(),
            0.0,
            epsilon = 1e-15
        );
        for i in 0..20 {
            let theta = -3.0 + 0.3 * i as f64;
            let prod = rotation(theta) * rotation(-theta);
            assert_relative_eq!(
                (prod - DMatrix::<f64>::identity(2, 2)).norm(),
                0.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn origin_is_equilibrium() {
        let (plant, _) = reference_pair();
        let z = DVector::zeros(0);
        let u = DVector::zeros(2);
        let f0_val = plant.f(&z, &DVector::zeros(4));
        assert!(f0_val.norm() < 1e-12, "F(0) = {f0_val:?}");
        for t in [0.0, 0.17, 2.9] {
            let (_, xdot) = plant_rhs(&plant, &z, &DVector::zeros(4), &u, t).unwrap();
            assert!(xdot.norm() < 1e-12, "xdot = {xdot:?} at t = {t}");
        }
    }

    /// Cross-checks the normal-form right-hand side against an independent
    /// evaluation through the raw polar dynamics
    /// `rddot = r wdot^2 - k/r^2`, `wdot = -2 v w / r` (zero input).
    #[test]
    fn rhs_matches_polar_route() {
        let (plant, _) = reference_pair();
        let p = SatelliteParams::reference();
        let x = DVector::from_vec(vec![1.0, -2.0, 0.0, -0.8]);

        let r = x[0] + p.r_star;
        let v = x[1];
        let omega = x[3] / p.r_star + p.omega_star;
        let vdot = r * omega * omega - p.k / (r * r);
        let omegadot = -2.0 * v * omega / r;
        // x11dot = v, x12dot = vdot, x21dot = r*(psidot - omega*), x22dot = r* omegadot
        let expected = [
            v,
            vdot,
            p.r_star * (omega - p.omega_star),
            p.r_star * omegadot,
        ];

        let (zdot, xdot) =
            plant_rhs(&plant, &DVector::zeros(0), &x, &DVector::zeros(2), 0.0).unwrap();
        assert_eq!(zdot.len(), 0);
        for (got, want) in xdot.iter().zip(expected.iter()) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
        // Spot values for the forcing term itself.
        assert_relative_eq!(xdot[1], 0.36905151, epsilon = 1e-6);
        assert_relative_eq!(xdot[3], 1.64118697, epsilon = 1e-6);
    }

    #[test]
    fn rotation_preserves_gain_norm() {
        let (plant, _) = reference_pair();
        let z = DVector::zeros(0);
        let p = SatelliteParams::reference();
        for i in 0..25 {
            let x11 = -1.0 + 0.15 * i as f64;
            let x = DVector::from_vec(vec![x11, 0.4, -0.2, 0.9]);
            let t = 0.07 * i as f64;
            let g = plant.gain(&z, &x, t).unwrap();
            let diag = diag_gain(p.m_true, p.r_star, x11 + p.r_star);
            let gn = g.singular_values().max();
            let dn = diag.singular_values().max();
            assert_relative_eq!(gn, dn, max_relative = 1e-12);
        }
    }

    #[test]
    fn singular_region_signals() {
        let (plant, nominal) = reference_pair();
        let z = DVector::zeros(0);
        let x = DVector::from_vec(vec![-1.5, 0.0, 0.0, 0.0]);
        assert!(plant_rhs(&plant, &z, &x, &DVector::zeros(2), 0.0).is_err());
        assert!(nominal.gain(&z, &x, 0.0).is_err());
        assert!(nominal.ur(&z, &x, 0.0).is_err());
        let deeper = DVector::from_vec(vec![-2.0, 0.0, 0.0, 0.0]);
        assert!(plant_rhs(&plant, &z, &deeper, &DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn feedback_preserves_origin() {
        let (_, nominal) = reference_pair();
        let ur0 = nominal.ur(&DVector::zeros(0), &DVector::zeros(4), 0.0).unwrap();
        assert!(ur0.norm() < 1e-12);
    }

    #[test]
    fn default_feedback_places_poles() {
        let k = default_feedback_gain();
        assert_relative_eq!(k[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(k[(0, 1)], 4.0, epsilon = 1e-12);
        assert_relative_eq!(k[(1, 2)], 15.0, epsilon = 1e-12);
        assert_relative_eq!(k[(1, 3)], 8.0, epsilon = 1e-12);
        assert_eq!(k[(0, 2)], 0.0);
        assert_eq!(k[(1, 0)], 0.0);

        let nu = RelativeDegree::new(vec![2, 2]).unwrap();
        let s = crate::plant::build_structural_matrices(&nu);
        let acl = &s.a - &s.b * &k;
        let mut eigs: Vec<f64> = acl.complex_eigenvalues().iter().map(|e| e.re).collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected = [-5.0, -3.0, -3.0, -1.0];
        for (e, w) in eigs.iter().zip(expected.iter()) {
            assert_relative_eq!(e, w, epsilon = 1e-9);
        }
    }
}
