//! Normal-form plant representation: per-output integrator chains, block
//! structural matrices, black-box dynamics evaluators, and the nominal model
//! used for controller design.
//!
//! Plants are supplied as evaluators plus dimensions; nothing here is
//! symbolic. All evaluators must be pure so that plants and nominal models
//! can be shared freely across concurrent simulation runs.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub mod satellite;

/// Condition-estimate ceiling above which a gain matrix is rejected wherever
/// an inverse is required (design and analysis paths; plain simulation never
/// inverts the true gain).
pub const GAIN_COND_LIMIT: f64 = 1e12;

/// Internal/zero dynamics evaluator `(z, x) -> R^k`.
pub type DynamicsFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Input gain evaluator `(z, x, t) -> R^{m x m}`.
pub type GainFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
/// State feedback evaluator `(zbar, x, t) -> R^m`. Time-invariant feedback
/// laws simply ignore `t`.
pub type FeedbackFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>;

/// Vector relative degree: one positive entry per output channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelativeDegree {
    degrees: Vec<usize>,
}

impl RelativeDegree {
    pub fn new(degrees: Vec<usize>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::Invalid("relative degree needs >= 1 channel".into()));
        }
        if degrees.contains(&0) {
            return Err(Error::Invalid("every channel degree must be >= 1".into()));
        }
        Ok(Self { degrees })
    }

    /// Number of channels `m`.
    pub fn channels(&self) -> usize {
        self.degrees.len()
    }

    /// Total degree `nu = sum nu_i`, the dimension of the chained state block.
    pub fn total(&self) -> usize {
        self.degrees.iter().sum()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Index range of channel `i` inside the stacked chain state.
    pub fn block(&self, i: usize) -> Range<usize> {
        let start: usize = self.degrees[..i].iter().sum();
        start..start + self.degrees[i]
    }
}

/// Block-diagonal chain matrices: `A` shifts within each chain, `B` injects
/// at the chain bottom, `C` reads the chain top.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

/// Builds the block-diagonal structural matrices for a relative degree
/// vector. Construction is total.
pub fn build_structural_matrices(nu: &RelativeDegree) -> StructuralMatrices {
    let total = nu.total();
    let m = nu.channels();
    let mut a = DMatrix::<f64>::zeros(total, total);
    let mut b = DMatrix::<f64>::zeros(total, m);
    let mut c = DMatrix::<f64>::zeros(m, total);
    for i in 0..m {
        let blk = nu.block(i);
        for j in blk.start..blk.end - 1 {
            a[(j, j + 1)] = 1.0;
        }
        b[(blk.end - 1, i)] = 1.0;
        c[(i, blk.start)] = 1.0;
    }
    StructuralMatrices { a, b, c }
}

/// Plant in normal form:
///
/// ```text
/// zdot = F0(z, x)
/// xdot = A x + B (F(z, x) + G(z, x, t) u)
/// y    = C x
/// ```
///
/// `G` must be invertible at every queried point; design and analysis paths
/// enforce this with a condition-estimate guard.
#[derive(Clone)]
pub struct NormalFormPlant {
    n: usize,
    nu: RelativeDegree,
    f0: DynamicsFn,
    f: DynamicsFn,
    g: GainFn,
    structure: StructuralMatrices,
}

impl NormalFormPlant {
    pub fn new(
        n: usize,
        nu: RelativeDegree,
        f0: DynamicsFn,
        f: DynamicsFn,
        g: GainFn,
    ) -> Result<Self> {
        if n < nu.total() {
            return Err(Error::Dimension(format!(
                "state dimension {n} smaller than total relative degree {}",
                nu.total()
            )));
        }
        let structure = build_structural_matrices(&nu);
        Ok(Self {
            n,
            nu,
            f0,
            f,
            g,
            structure,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Dimension of the internal `z` block (`n - nu`); zero when the plant
    /// has no internal dynamics.
    pub fn z_dim(&self) -> usize {
        self.n - self.nu.total()
    }

    pub fn relative_degree(&self) -> &RelativeDegree {
        &self.nu
    }

    pub fn structure(&self) -> &StructuralMatrices {
        &self.structure
    }

    pub fn f0(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (self.f0)(z, x)
    }

    pub fn f(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(z, x)
    }

    /// Evaluates the true gain, signalling if the evaluation is non-finite.
    pub fn gain(&self, z: &DVector<f64>, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let g = (self.g)(z, x, t);
        ensure_finite(&g, || point_label("G", z, x, t))?;
        Ok(g)
    }

    /// Evaluates and inverts the true gain under the condition guard.
    pub fn gain_inverse(&self, z: &DVector<f64>, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let g = self.gain(z, x, t)?;
        invert_guarded(&g, || point_label("G", z, x, t))
    }

    pub fn gain_fn(&self) -> GainFn {
        Arc::clone(&self.g)
    }
}

/// Nominal model: known gain `Gbar` plus the state feedback `Ur` that
/// stabilizes the nominal closed loop. Shares `F0` and `F` with the plant.
#[derive(Clone)]
pub struct NominalModel {
    f0: DynamicsFn,
    f: DynamicsFn,
    gbar: GainFn,
    ur: FeedbackFn,
}

impl NominalModel {
    /// Builds a nominal model sharing `F0`/`F` with `plant`.
    pub fn sharing(plant: &NormalFormPlant, gbar: GainFn, ur: FeedbackFn) -> Self {
        Self {
            f0: Arc::clone(&plant.f0),
            f: Arc::clone(&plant.f),
            gbar,
            ur,
        }
    }

    pub fn f0(&self, zbar: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (self.f0)(zbar, x)
    }

    pub fn f(&self, zbar: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(zbar, x)
    }

    pub fn gain(&self, zbar: &DVector<f64>, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let g = (self.gbar)(zbar, x, t);
        ensure_finite(&g, || point_label("Gbar", zbar, x, t))?;
        Ok(g)
    }

    pub fn gain_inverse(
        &self,
        zbar: &DVector<f64>,
        x: &DVector<f64>,
        t: f64,
    ) -> Result<DMatrix<f64>> {
        let g = self.gain(zbar, x, t)?;
        invert_guarded(&g, || point_label("Gbar", zbar, x, t))
    }

    pub fn ur(&self, zbar: &DVector<f64>, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let u = (self.ur)(zbar, x, t);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGain(point_label("Ur", zbar, x, t)));
        }
        Ok(u)
    }

    pub fn gain_fn(&self) -> GainFn {
        Arc::clone(&self.gbar)
    }
}

/// Right-hand side of the plant equations for a given input.
pub fn plant_rhs(
    plant: &NormalFormPlant,
    z: &DVector<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let g = plant.gain(z, x, t)?;
    let zdot = plant.f0(z, x);
    let forcing = plant.f(z, x) + g * u;
    let xdot = &plant.structure.a * x + &plant.structure.b * forcing;
    Ok((zdot, xdot))
}

fn ensure_finite<F: Fn() -> String>(m: &DMatrix<f64>, label: F) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGain(label()));
    }
    Ok(())
}

/// Inverts a small square matrix, rejecting singular or ill-conditioned
/// inputs. Uses the Frobenius condition estimate `|M| |M^-1|`.
pub(crate) fn invert_guarded<F: Fn() -> String>(
    m: &DMatrix<f64>,
    label: F,
) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned {
            point: label(),
            cond: f64::INFINITY,
        })?;
    let cond = m.norm() * inv.norm();
    if !cond.is_finite() || cond > GAIN_COND_LIMIT {
        return Err(Error::IllConditioned {
            point: label(),
            cond,
        });
    }
    Ok(inv)
}

fn point_label(what: &str, z: &DVector<f64>, x: &DVector<f64>, t: f64) -> String {
    format!(
        "{what}(z = {:?}, x = {:?}, t = {t})",
        z.as_slice(),
        x.as_slice()
    )
}
