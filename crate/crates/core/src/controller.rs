//! Runtime dynamic output-feedback controller.
//!
//! Internal states: `zbar` (a copy of the internal dynamics driven by the
//! saturated state estimate), the high-gain observer `q`, and the
//! disturbance filter `p`:
//!
//! ```text
//! zbardot = F0(zbar, phi(q))
//! qdot    = A_atau q + Bq_atau y
//! pdot    = A_atau p + Bp_atau Gbar(zbar, phi(q)) u
//! w       = C p + B^T Bq_atau (C q - y) + F(zbar, phi(q))
//! u       = Gbar^{-1}(zbar, phi(q)) Phi(w) + Ur(zbar, phi(q))
//! ```
//!
//! `w` feeds through from `y`, so the control must be computed before the
//! derivative evaluation; [`controller_output`] produces `(u, w)` and
//! [`controller_rhs`] consumes that `u`.
//!
//! All functions here are pure: same inputs give bit-identical outputs.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::plant::NominalModel;
use crate::synthesis::ControllerParams;

/// Controller internal state `(zbar, q, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub zbar: DVector<f64>,
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl ControllerState {
    pub fn new(zbar: DVector<f64>, q: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::Dimension(format!(
                "q length {} != p length {}",
                q.len(),
                p.len()
            )));
        }
        let all_finite = zbar.iter().chain(q.iter()).chain(p.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Invalid("controller state must be finite".into()));
        }
        Ok(Self { zbar, q, p })
    }

    pub fn zeros(z_dim: usize, chain_dim: usize) -> Self {
        Self {
            zbar: DVector::zeros(z_dim),
            q: DVector::zeros(chain_dim),
            p: DVector::zeros(chain_dim),
        }
    }
}

/// Componentwise C^1 saturation: identity up to the per-component level `L`,
/// then an exponential blend bounded by `L + margin` with slope continuous
/// (equal to one) at the knee and everywhere in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothSaturation {
    levels: DVector<f64>,
    margin: f64,
}

impl SmoothSaturation {
    pub fn new(levels: DVector<f64>, margin: f64) -> Result<Self> {
        if levels.iter().any(|&l| !l.is_finite() || l <= 0.0) {
            return Err(Error::Invalid(
                "saturation levels must be strictly positive".into(),
            ));
        }
        if !margin.is_finite() || margin <= 0.0 {
            return Err(Error::Invalid(format!(
                "saturation margin must be positive, got {margin}"
            )));
        }
        Ok(Self { levels, margin })
    }

    pub fn uniform(level: f64, dim: usize, margin: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, level), margin)
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &DVector<f64> {
        &self.levels
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Scalar saturation: `v` for `|v| <= level`, otherwise
    /// `sign(v) (level + margin (1 - exp(-(|v| - level) / margin)))`.
    pub fn eval_scalar(level: f64, margin: f64, v: f64) -> f64 {
        let a = v.abs();
        if a <= level {
            v
        } else {
            v.signum() * (level + margin * (1.0 - (-(a - level) / margin).exp()))
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(v.len(), self.levels.len());
        DVector::from_fn(v.len(), |i, _| {
            Self::eval_scalar(self.levels[i], self.margin, v[i])
        })
    }

    /// True when every component is inside the identity region.
    pub fn is_identity_at(&self, v: &DVector<f64>) -> bool {
        v.iter()
            .zip(self.levels.iter())
            .all(|(x, l)| x.abs() <= *l)
    }
}

/// Computes the control `u` and the disturbance estimate `w` at the current
/// state and measurement. Errors carry the evaluation point when the nominal
/// gain cannot be inverted there.
pub fn controller_output(
    state: &ControllerState,
    y: &DVector<f64>,
    params: &ControllerParams,
    nominal: &NominalModel,
    t: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let nu = params.relative_degree();
    let m = nu.channels();
    if y.len() != m {
        return Err(Error::Dimension(format!(
            "measurement length {} != channel count {m}",
            y.len()
        )));
    }
    let xq = params.phi().apply(&state.q);
    let f_val = nominal.f(&state.zbar, &xq);

    let mut w = DVector::<f64>::zeros(m);
    for i in 0..m {
        let blk = nu.block(i);
        w[i] = state.p[blk.start] + params.dob_gain(i) * (state.q[blk.start] - y[i]) + f_val[i];
    }

    let gbar_inv = nominal.gain_inverse(&state.zbar, &xq, t)?;
    let u = &gbar_inv * params.big_phi().apply(&w) + nominal.ur(&state.zbar, &xq, t)?;
    Ok((u, w))
}

/// Controller state derivatives for a control previously computed by
/// [`controller_output`] at the same `(state, y, t)`.
pub struct ControllerDerivatives {
    pub zbar_dot: DVector<f64>,
    pub q_dot: DVector<f64>,
    pub p_dot: DVector<f64>,
}

pub fn controller_rhs(
    state: &ControllerState,
    y: &DVector<f64>,
    u: &DVector<f64>,
    params: &ControllerParams,
    nominal: &NominalModel,
    t: f64,
) -> Result<ControllerDerivatives> {
    let xq = params.phi().apply(&state.q);
    let gbar = nominal.gain(&state.zbar, &xq, t)?;
    Ok(ControllerDerivatives {
        zbar_dot: nominal.f0(&state.zbar, &xq),
        q_dot: params.a_atau() * &state.q + params.bq_atau() * y,
        p_dot: params.a_atau() * &state.p + params.bp_atau() * (gbar * u),
    })
}
