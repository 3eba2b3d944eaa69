//! Design procedure for the observer/disturbance filters: inner chain
//! coefficients, disk-avoidance Nyquist selection of the leading gain,
//! strict-positive-realness verification, filter matrix assembly, and
//! saturation-level estimation over a state box.
//!
//! Per channel, the loop transfer function under study is
//!
//! ```text
//! H_i(s) = a_{i1} / ( s (s^{nu_i-1} + a_{i nu_i} s^{nu_i-2} + ... + a_{i2}) )
//! ```
//!
//! and the admissibility condition for an uncertainty ratio `mu` is that the
//! Nyquist plot of `H_i` stays strictly outside, and does not encircle, the
//! disk with real-axis diameter `[-1/(1-mu), -1/(1+mu)]`.
//!
//! Every operation here is pure; grid evaluations share no mutable state and
//! may run concurrently.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::controller::SmoothSaturation;
use crate::error::{Error, Result};
use crate::plant::{GainFn, NominalModel, NormalFormPlant, RelativeDegree};
use crate::poly;

/// Per-channel filter gains `a_i = [a_{i1}, ..., a_{i nu_i}]`, all strictly
/// positive, with Hurwitz inner polynomial and Hurwitz closed polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct GainVector {
    channels: Vec<Vec<f64>>,
}

impl GainVector {
    pub fn new(channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Invalid("gain vector needs >= 1 channel".into()));
        }
        for (i, a) in channels.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Invalid(format!("channel {i}: empty gain list")));
            }
            if a.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                return Err(Error::Invalid(format!(
                    "channel {i}: gains must be strictly positive, got {a:?}"
                )));
            }
            if !poly::is_hurwitz(&a[1..], 0.0) {
                return Err(Error::Invalid(format!(
                    "channel {i}: inner polynomial not Hurwitz"
                )));
            }
            if !poly::is_hurwitz(a, 0.0) {
                return Err(Error::Invalid(format!(
                    "channel {i}: closed polynomial not Hurwitz"
                )));
            }
        }
        Ok(Self { channels })
    }

    /// Same gain list replicated over `m` channels.
    pub fn uniform(a: Vec<f64>, m: usize) -> Result<Self> {
        Self::new(vec![a; m])
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn a1(&self, i: usize) -> f64 {
        self.channels[i][0]
    }
}

/// Closed disk with real-axis diameter from `-1/(1-mu)` to `-1/(1+mu)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorDisk {
    pub mu: f64,
    pub center: f64,
    pub radius: f64,
}

impl SectorDisk {
    pub fn new(mu: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(Error::Invalid(format!("mu must be in [0, 1), got {mu}")));
        }
        let center = -0.5 * (1.0 / (1.0 - mu) + 1.0 / (1.0 + mu));
        let radius = 0.5 * (1.0 / (1.0 - mu) - 1.0 / (1.0 + mu));
        Ok(Self { mu, center, radius })
    }

    /// Signed distance from a point to the disk boundary (negative inside).
    pub fn distance(&self, p: Complex64) -> f64 {
        (p - Complex64::new(self.center, 0.0)).norm() - self.radius
    }

    /// Numerical strictness margin for "strictly outside".
    pub fn strictness(&self) -> f64 {
        1e-6 * self.radius
    }
}

/// Logarithmic frequency grid with adaptive refinement near the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    pub omega_min: f64,
    pub omega_max: f64,
    pub points: usize,
    pub refine_passes: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self {
            omega_min: 1e-4,
            omega_max: 1e4,
            points: 10_000,
            refine_passes: 3,
        }
    }
}

impl FrequencyGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_min > 0.0 && self.omega_max > self.omega_min) {
            return Err(Error::Invalid(format!(
                "frequency grid bounds invalid: [{}, {}]",
                self.omega_min, self.omega_max
            )));
        }
        if self.points < 2 {
            return Err(Error::Invalid("frequency grid needs >= 2 points".into()));
        }
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let ratio = self.omega_max / self.omega_min;
        (0..self.points)
            .map(|i| self.omega_min * ratio.powf(i as f64 / (self.points - 1) as f64))
            .collect()
    }
}

/// Returns the inner coefficients `[a_{i2}, ..., a_{i nu_i}]` whose monic
/// polynomial has exactly the given roots. Roots must all lie strictly in
/// the open left half-plane and be closed under conjugation.
pub fn inner_coeffs_from_roots(roots: &[Complex64], nu_i: usize) -> Result<Vec<f64>> {
    if nu_i == 0 {
        return Err(Error::Invalid("channel degree must be >= 1".into()));
    }
    if roots.len() != nu_i - 1 {
        return Err(Error::Invalid(format!(
            "expected {} inner roots for degree {nu_i}, got {}",
            nu_i - 1,
            roots.len()
        )));
    }
    if let Some(r) = roots.iter().find(|r| r.re >= 0.0) {
        return Err(Error::Invalid(format!("inner root {r} is not stable")));
    }
    poly::real_coeffs_from_roots(roots)
}

fn eval_h(a1: f64, inner: &[f64], omega: f64) -> Complex64 {
    let s = Complex64::new(0.0, omega);
    Complex64::new(a1, 0.0) / (s * poly::eval_monic(inner, s))
}

/// Finite real-axis limit of `Re H_i(j omega)` as `omega -> 0`; `0` for a
/// pure integrator channel.
fn low_freq_re_limit(a_i: &[f64]) -> f64 {
    let nu_i = a_i.len();
    if nu_i == 1 {
        return 0.0;
    }
    let a2 = a_i[1];
    let d1 = if nu_i == 2 { 1.0 } else { a_i[2] };
    -a_i[0] * d1 / (a2 * a2)
}

/// Result of one disk-avoidance test.
#[derive(Debug, Clone, PartialEq)]
pub struct NyquistOutcome {
    pub pass: bool,
    /// Minimum signed distance from the evaluated curve to the disk.
    pub min_distance: f64,
    /// Frequency attaining the minimum distance.
    pub min_distance_omega: f64,
    /// Winding number of the closed contour about the disk center.
    pub winding_number: i32,
    /// `lim_{omega -> 0} Re H(j omega)`; for `mu > 0` this limit must stay
    /// strictly to the right of the disk (the low-frequency branch hugs the
    /// vertical line through it).
    pub low_freq_re_limit: f64,
    pub points_evaluated: usize,
}

/// Disk-avoidance Nyquist test for one channel.
///
/// The positive-frequency curve is evaluated on the (adaptively refined)
/// grid; the negative branch is its mirror, and the pole at the origin is
/// closed with the analytic indentation arc about the Laurent constant.
/// Pass requires positive clearance, zero winding about the disk center,
/// and (for `mu > 0`) the low-frequency real-axis limit strictly to the
/// right of the disk. At `mu = 0` the disk degenerates to the point `-1`
/// and the test reduces to the classical Nyquist criterion.
pub fn nyquist_check(
    a_i: &[f64],
    disk: &SectorDisk,
    grid: &FrequencyGrid,
) -> Result<NyquistOutcome> {
    grid.validate()?;
    if a_i.is_empty() || a_i.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(Error::Invalid(format!(
            "gains must be strictly positive, got {a_i:?}"
        )));
    }
    let inner = &a_i[1..];
    if !poly::is_hurwitz(inner, 0.0) {
        return Err(Error::Precondition(
            "inner polynomial must be Hurwitz before selecting a1".into(),
        ));
    }
    let a1 = a_i[0];

    let mut pts: Vec<(f64, Complex64)> = grid
        .frequencies()
        .iter()
        .map(|&w| (w, eval_h(a1, inner, w)))
        .collect();

    // Refine where the curve is sampled coarsely relative to its clearance.
    let budget = grid.points.saturating_mul(8);
    for _ in 0..grid.refine_passes {
        let mut refined = Vec::with_capacity(pts.len());
        let mut inserted = false;
        for i in 0..pts.len() {
            refined.push(pts[i]);
            if i + 1 == pts.len() || refined.len() + (pts.len() - i) > budget {
                continue;
            }
            let gap = (pts[i + 1].1 - pts[i].1).norm();
            let d = disk.distance(pts[i].1).min(disk.distance(pts[i + 1].1));
            if gap > disk.radius && d < 4.0 * gap {
                let wm = (pts[i].0 * pts[i + 1].0).sqrt();
                refined.push((wm, eval_h(a1, inner, wm)));
                inserted = true;
            }
        }
        pts = refined;
        if !inserted {
            break;
        }
    }

    let mut min_distance = f64::INFINITY;
    let mut min_distance_omega = pts[0].0;
    for (w, h) in &pts {
        let d = disk.distance(*h);
        if d < min_distance {
            min_distance = d;
            min_distance_omega = *w;
        }
    }

    // A segment longer than the disk that sits closer than its own length
    // could hide a dip between samples; refuse rather than certify.
    if min_distance > disk.strictness() {
        for i in 0..pts.len() - 1 {
            let gap = (pts[i + 1].1 - pts[i].1).norm();
            let d = disk.distance(pts[i].1).min(disk.distance(pts[i + 1].1));
            if gap > disk.radius && d > 0.0 && d < gap {
                return Err(Error::GridTooCoarse(format!(
                    "segment [{:.3e}, {:.3e}] rad/s has curve gap {gap:.3e} with clearance {d:.3e}; \
                     increase grid points or refine passes",
                    pts[i].0,
                    pts[i + 1].0
                )));
            }
        }
    }

    let d0 = low_freq_re_limit(a_i);
    let winding_number = winding_about(&pts, d0, disk.center);

    let strict = disk.strictness();
    let limit_clear = disk.mu == 0.0 || d0 > disk.center + disk.radius + strict;
    let pass = min_distance > strict && winding_number == 0 && limit_clear;

    Ok(NyquistOutcome {
        pass,
        min_distance,
        min_distance_omega,
        winding_number,
        low_freq_re_limit: d0,
        points_evaluated: pts.len(),
    })
}

/// Winding number of the closed Nyquist contour about `center + 0j`.
///
/// Contour: mirrored negative branch, indentation arc (the image of the
/// origin-pole detour, a clockwise near-circle of radius `|H(j omega_min)|`
/// about the Laurent constant `d0`), positive branch, closure near the
/// origin.
fn winding_about(pts: &[(f64, Complex64)], d0: f64, center: f64) -> i32 {
    let c0 = Complex64::new(d0, 0.0);
    let first = pts[0].1;
    let radius = (first - c0).norm();

    let mut contour: Vec<Complex64> = Vec::with_capacity(2 * pts.len() + 130);
    for (_, h) in pts.iter().rev() {
        contour.push(h.conj());
    }
    let mut theta_start = (first.conj() - c0).arg();
    let theta_end = (first - c0).arg();
    if theta_start <= theta_end {
        theta_start += std::f64::consts::TAU;
    }
    const ARC_POINTS: usize = 128;
    for k in 0..=ARC_POINTS {
        let theta = theta_start + (theta_end - theta_start) * k as f64 / ARC_POINTS as f64;
        contour.push(c0 + Complex64::from_polar(radius, theta));
    }
    for (_, h) in pts.iter() {
        contour.push(*h);
    }

    let c = Complex64::new(center, 0.0);
    let mut total = 0.0;
    for i in 0..contour.len() {
        let a = contour[i] - c;
        let b = contour[(i + 1) % contour.len()] - c;
        total += (b / a).arg();
    }
    (total / std::f64::consts::TAU).round() as i32
}

/// Largest leading gain in `(lo, hi]` passing [`nyquist_check`], shrunk by
/// `safety` (geometric bisection; the curve scales linearly with `a1`, so
/// admissibility is monotone). Errors when even the lower end fails.
pub fn search_a1(
    channel: usize,
    a_inner: &[f64],
    disk: &SectorDisk,
    bracket: (f64, f64),
    grid: &FrequencyGrid,
    safety: f64,
) -> Result<f64> {
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Invalid(format!(
            "bracket must satisfy 0 < lo < hi, got ({lo}, {hi})"
        )));
    }
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Invalid(format!(
            "safety factor must be in (0, 1], got {safety}"
        )));
    }
    let passes = |a1: f64| -> Result<bool> {
        let mut a = Vec::with_capacity(a_inner.len() + 1);
        a.push(a1);
        a.extend_from_slice(a_inner);
        Ok(nyquist_check(&a, disk, grid)?.pass)
    };

    if !passes(lo)? {
        return Err(Error::NoAdmissibleGain {
            channel,
            lo,
            hi,
            reason: "lower bracket end already fails the disk test".into(),
        });
    }
    if passes(hi)? {
        return Ok(hi);
    }

    let mut lo_pass = lo;
    let mut hi_fail = hi;
    for _ in 0..80 {
        if hi_fail - lo_pass <= 1e-12 * hi_fail {
            break;
        }
        let mid = (lo_pass * hi_fail).sqrt();
        if passes(mid)? {
            lo_pass = mid;
        } else {
            hi_fail = mid;
        }
    }

    let result = (lo_pass * safety).max(lo);
    if !passes(result)? {
        return Err(Error::NoAdmissibleGain {
            channel,
            lo,
            hi,
            reason: format!("candidate {result} fails after safety shrink"),
        });
    }
    Ok(result)
}

/// Result of the strict-positive-realness verification.
#[derive(Debug, Clone, PartialEq)]
pub struct SprOutcome {
    pub pass: bool,
    /// `min_omega Re [1 + (1+mu) H] / [1 + (1-mu) H]` over the grid.
    pub min_re: f64,
    pub at_omega: f64,
    /// Roots of `s d(s) + (1-mu) a1` all strictly stable.
    pub loop_stable: bool,
    pub nyquist: NyquistOutcome,
}

/// Verifies that `[1 + (1+mu) H_i][1 + (1-mu) H_i]^{-1}` is strictly
/// positive real, on top of a passing disk test. At `mu = 0` the ratio is
/// identically one.
pub fn spr_check(a_i: &[f64], mu: f64, grid: &FrequencyGrid) -> Result<SprOutcome> {
    let disk = SectorDisk::new(mu)?;
    let nyquist = nyquist_check(a_i, &disk, grid)?;

    let inner = &a_i[1..];
    let a1 = a_i[0];
    let mut min_re = f64::INFINITY;
    let mut at_omega = grid.omega_min;
    for w in grid.frequencies() {
        let h = eval_h(a1, inner, w);
        let z = (Complex64::new(1.0, 0.0) + h * (1.0 + mu))
            / (Complex64::new(1.0, 0.0) + h * (1.0 - mu));
        if z.re < min_re {
            min_re = z.re;
            at_omega = w;
        }
    }

    // Closed-loop denominator at the lower sector edge: s d(s) + (1-mu) a1.
    let mut loop_coeffs = Vec::with_capacity(a_i.len());
    loop_coeffs.push((1.0 - mu) * a1);
    loop_coeffs.extend_from_slice(inner);
    let loop_stable = poly::is_hurwitz(&loop_coeffs, 0.0);

    let pass = nyquist.pass && min_re > 0.0 && loop_stable;
    Ok(SprOutcome {
        pass,
        min_re,
        at_omega,
        loop_stable,
        nyquist,
    })
}

/// Assembles the filter matrices `(A_atau, Bq_atau, Bp_atau)` for the given
/// gains and timescale. Satisfies `A_atau = A - Bq_atau C` exactly.
pub fn assemble_filter_matrices(
    gains: &GainVector,
    nu: &RelativeDegree,
    tau: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
    }
    if gains.channels() != nu.channels() {
        return Err(Error::Dimension(format!(
            "gain channels {} != relative-degree channels {}",
            gains.channels(),
            nu.channels()
        )));
    }
    let total = nu.total();
    let m = nu.channels();
    let mut a_atau = DMatrix::<f64>::zeros(total, total);
    let mut bq = DMatrix::<f64>::zeros(total, m);
    let mut bp = DMatrix::<f64>::zeros(total, m);
    for i in 0..m {
        let nu_i = nu.degrees()[i];
        let a = gains.channel(i);
        if a.len() != nu_i {
            return Err(Error::Dimension(format!(
                "channel {i}: {} gains for degree {nu_i}",
                a.len()
            )));
        }
        let blk = nu.block(i);
        for j in 0..nu_i {
            let scaled = a[nu_i - 1 - j] / tau.powi(j as i32 + 1);
            a_atau[(blk.start + j, blk.start)] = -scaled;
            bq[(blk.start + j, i)] = scaled;
            if j + 1 < nu_i {
                a_atau[(blk.start + j, blk.start + j + 1)] = 1.0;
            }
        }
        bp[(blk.end - 1, i)] = a[0] / tau.powi(nu_i as i32);
    }
    Ok((a_atau, bq, bp))
}

/// Block state feedback placing each channel's chain poles at the given
/// locations: `K_i` holds the ascending coefficients of the desired monic
/// characteristic polynomial.
pub fn state_feedback_from_poles(
    nu: &RelativeDegree,
    poles_per_channel: &[Vec<Complex64>],
) -> Result<DMatrix<f64>> {
    if poles_per_channel.len() != nu.channels() {
        return Err(Error::Dimension(format!(
            "{} pole sets for {} channels",
            poles_per_channel.len(),
            nu.channels()
        )));
    }
    let mut k = DMatrix::<f64>::zeros(nu.channels(), nu.total());
    for (i, poles) in poles_per_channel.iter().enumerate() {
        let nu_i = nu.degrees()[i];
        if poles.len() != nu_i {
            return Err(Error::Dimension(format!(
                "channel {i}: {} poles for degree {nu_i}",
                poles.len()
            )));
        }
        if let Some(p) = poles.iter().find(|p| p.re >= 0.0) {
            return Err(Error::Invalid(format!(
                "channel {i}: pole {p} is not stable"
            )));
        }
        let coeffs = poly::real_coeffs_from_roots(poles)?;
        let blk = nu.block(i);
        for (j, c) in coeffs.iter().enumerate() {
            k[(i, blk.start + j)] = *c;
        }
    }
    Ok(k)
}

/// Axis-aligned box over the stacked `(zbar; x)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl StateBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("state box lo/hi lengths differ".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::Invalid("state box has lo > hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Uniform tensor grid over the box; degenerate dimensions contribute a
    /// single value.
    pub fn grid_points(&self, points_per_dim: usize) -> Result<Vec<DVector<f64>>> {
        if points_per_dim < 2 {
            return Err(Error::Invalid("need >= 2 grid points per dimension".into()));
        }
        let dim = self.dim();
        if dim == 0 {
            return Ok(vec![DVector::zeros(0)]);
        }
        let axes: Vec<Vec<f64>> = (0..dim)
            .map(|d| {
                let (lo, hi) = (self.lo[d], self.hi[d]);
                if hi - lo <= 0.0 {
                    vec![lo]
                } else {
                    (0..points_per_dim)
                        .map(|k| lo + (hi - lo) * k as f64 / (points_per_dim - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        if total > 5_000_000 {
            return Err(Error::Invalid(format!(
                "state-box grid would have {total} points; reduce points_per_dim"
            )));
        }
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        loop {
            out.push(DVector::from_fn(dim, |d, _| axes[d][idx[d]]));
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < axes[d].len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == dim {
                    return Ok(out);
                }
            }
        }
    }
}

/// Knobs for [`estimate_saturation_levels`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationEstimateOptions {
    pub points_per_dim: usize,
    pub safety_factor: f64,
    /// Times at which the gain evaluators are sampled.
    pub time_samples: Vec<f64>,
}

impl Default for SaturationEstimateOptions {
    fn default() -> Self {
        Self {
            points_per_dim: 11,
            safety_factor: 1.25,
            time_samples: vec![0.0],
        }
    }
}

/// Output of the saturation-level estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationLevels {
    /// Per-component thresholds for the state-estimate saturation.
    pub phi_levels: DVector<f64>,
    /// Per-component thresholds for the disturbance-signal saturation.
    pub big_phi_levels: DVector<f64>,
    /// Grid maximum of the mismatch-signal norm before inflation.
    pub bracket_max: f64,
    pub bracket_argmax: String,
    /// Lipschitz constant of `F` used (supplied or estimated).
    pub lipschitz_f: f64,
    /// Grid points where a sampled gain violated `|I - G Gbar^{-1}| < 1`.
    pub assumption_violations: usize,
    pub worst_gain_ratio: f64,
    pub evaluations: usize,
}

/// Estimates saturation levels by maximizing the disturbance signal
///
/// ```text
/// w = Gbar G^{-1} [ F(zbar, x) - F(z, x) + (Gbar - G) Ur(zbar, x) ]
/// ```
///
/// over a tensor grid on the `(zbar, x)` box, a grid on the internal-state
/// ball `|z| <= l_z`, and the supplied gain samples, then inflating by the
/// noise allowance `delta_w + L_F delta_1` and the safety factor. The
/// state-estimate levels are the per-component box bounds inflated by
/// `delta_1`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_saturation_levels(
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    uncertainty_samples: &[GainFn],
    state_box: &StateBox,
    l_z: f64,
    delta_w: f64,
    delta_1: f64,
    lipschitz_f: Option<f64>,
    opts: &SaturationEstimateOptions,
) -> Result<SaturationLevels> {
    let zbar_dim = plant.z_dim();
    let x_dim = plant.relative_degree().total();
    let m = plant.relative_degree().channels();
    if state_box.dim() != zbar_dim + x_dim {
        return Err(Error::Dimension(format!(
            "state box dimension {} != zbar + x dimension {}",
            state_box.dim(),
            zbar_dim + x_dim
        )));
    }
    if uncertainty_samples.is_empty() {
        return Err(Error::Precondition(
            "need at least one uncertainty gain sample".into(),
        ));
    }
    if l_z < 0.0 || delta_w < 0.0 || delta_1 < 0.0 {
        return Err(Error::Invalid(
            "l_z, delta_w, delta_1 must be nonnegative".into(),
        ));
    }

    let grid = state_box.grid_points(opts.points_per_dim)?;
    let z_samples: Vec<DVector<f64>> = if zbar_dim == 0 {
        vec![DVector::zeros(0)]
    } else {
        let zbox = StateBox::new(
            DVector::from_element(zbar_dim, -l_z),
            DVector::from_element(zbar_dim, l_z),
        )?;
        zbox.grid_points(opts.points_per_dim)?
            .into_iter()
            .filter(|z| z.norm() <= l_z + 1e-12)
            .collect()
    };

    let split = |p: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_fn(zbar_dim, |i, _| p[i]),
            DVector::from_fn(x_dim, |i, _| p[zbar_dim + i]),
        )
    };

    let l_f = match lipschitz_f {
        Some(v) => v,
        None => estimate_lipschitz(plant, state_box, &grid, zbar_dim)?,
    };

    let mut bracket_max = 0.0_f64;
    let mut argmax = String::from("none");
    let mut violations = 0usize;
    let mut worst_ratio = 0.0_f64;
    let mut evaluations = 0usize;
    let eye = DMatrix::<f64>::identity(m, m);

    for point in &grid {
        let (zbar, x) = split(point);
        for &t in &opts.time_samples {
            let gbar = nominal.gain(&zbar, &x, t)?;
            let gbar_inv = nominal.gain_inverse(&zbar, &x, t)?;
            let f_bar = nominal.f(&zbar, &x);
            let ur = nominal.ur(&zbar, &x, t)?;
            for z in &z_samples {
                let f_z = nominal.f(z, &x);
                for gfn in uncertainty_samples {
                    let g = gfn(z, &x, t);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteGain(format!(
                            "uncertainty sample at zbar = {:?}, x = {:?}, t = {t}",
                            zbar.as_slice(),
                            x.as_slice()
                        )));
                    }
                    let g_inv = crate::plant::invert_guarded(&g, || {
                        format!(
                            "uncertainty sample at zbar = {:?}, x = {:?}, t = {t}",
                            zbar.as_slice(),
                            x.as_slice()
                        )
                    })?;
                    let ratio = (&eye - &g * &gbar_inv).singular_values().max();
                    if ratio >= 1.0 {
                        violations += 1;
                    }
                    worst_ratio = worst_ratio.max(ratio);

                    let bracket = &f_bar - &f_z + (&gbar - &g) * &ur;
                    let w = &gbar * (g_inv * bracket);
                    evaluations += 1;
                    let norm = w.norm();
                    if !norm.is_finite() {
                        return Err(Error::NonFiniteGain(format!(
                            "mismatch signal non-finite at zbar = {:?}, x = {:?}, t = {t}",
                            zbar.as_slice(),
                            x.as_slice()
                        )));
                    }
                    if norm > bracket_max {
                        bracket_max = norm;
                        argmax = format!(
                            "zbar = {:?}, x = {:?}, t = {t}",
                            zbar.as_slice(),
                            x.as_slice()
                        );
                    }
                }
            }
        }
    }

    let big_phi_scalar = (bracket_max + delta_w + l_f * delta_1) * opts.safety_factor;
    let phi_levels = DVector::from_fn(x_dim, |c, _| {
        state_box.lo[zbar_dim + c]
            .abs()
            .max(state_box.hi[zbar_dim + c].abs())
            + delta_1
    });

    Ok(SaturationLevels {
        phi_levels,
        big_phi_levels: DVector::from_element(m, big_phi_scalar),
        bracket_max,
        bracket_argmax: argmax,
        lipschitz_f: l_f,
        assumption_violations: violations,
        worst_gain_ratio: worst_ratio,
        evaluations,
    })
}

/// Central-difference estimate of `max |J_F|` over the grid.
fn estimate_lipschitz(
    plant: &NormalFormPlant,
    state_box: &StateBox,
    grid: &[DVector<f64>],
    zbar_dim: usize,
) -> Result<f64> {
    let dim = state_box.dim();
    let x_dim = dim - zbar_dim;
    let m = plant.relative_degree().channels();
    let mut max_norm = 0.0_f64;
    for point in grid {
        let mut jac = DMatrix::<f64>::zeros(m, dim);
        for d in 0..dim {
            let span = (state_box.hi[d] - state_box.lo[d]).abs();
            let h = (1e-6 * span).max(1e-8);
            let mut plus = point.clone();
            let mut minus = point.clone();
            plus[d] += h;
            minus[d] -= h;
            let eval = |p: &DVector<f64>| {
                let zb = DVector::from_fn(zbar_dim, |i, _| p[i]);
                let x = DVector::from_fn(x_dim, |i, _| p[zbar_dim + i]);
                plant.f(&zb, &x)
            };
            let df = (eval(&plus) - eval(&minus)) / (2.0 * h);
            jac.set_column(d, &df);
        }
        let n = jac.singular_values().max();
        if !n.is_finite() {
            return Err(Error::NonFiniteGain(format!(
                "F Jacobian non-finite at {:?}",
                point.as_slice()
            )));
        }
        max_norm = max_norm.max(n);
    }
    Ok(max_norm)
}

/// Fully assembled runtime controller parameters.
#[derive(Clone)]
pub struct ControllerParams {
    gains: GainVector,
    nu: RelativeDegree,
    tau: f64,
    a_atau: DMatrix<f64>,
    bq_atau: DMatrix<f64>,
    bp_atau: DMatrix<f64>,
    phi: SmoothSaturation,
    big_phi: SmoothSaturation,
}

impl ControllerParams {
    pub fn new(
        gains: GainVector,
        nu: RelativeDegree,
        tau: f64,
        phi: SmoothSaturation,
        big_phi: SmoothSaturation,
    ) -> Result<Self> {
        if phi.dim() != nu.total() {
            return Err(Error::Dimension(format!(
                "phi saturation dimension {} != total degree {}",
                phi.dim(),
                nu.total()
            )));
        }
        if big_phi.dim() != nu.channels() {
            return Err(Error::Dimension(format!(
                "Phi saturation dimension {} != channel count {}",
                big_phi.dim(),
                nu.channels()
            )));
        }
        let (a_atau, bq_atau, bp_atau) = assemble_filter_matrices(&gains, &nu, tau)?;
        if a_atau
            .clone()
            .complex_eigenvalues()
            .iter()
            .any(|e| e.re >= 0.0)
        {
            return Err(Error::Invalid(
                "assembled filter matrix is not Hurwitz".into(),
            ));
        }
        Ok(Self {
            gains,
            nu,
            tau,
            a_atau,
            bq_atau,
            bp_atau,
            phi,
            big_phi,
        })
    }

    pub fn gains(&self) -> &GainVector {
        &self.gains
    }

    pub fn relative_degree(&self) -> &RelativeDegree {
        &self.nu
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn a_atau(&self) -> &DMatrix<f64> {
        &self.a_atau
    }

    pub fn bq_atau(&self) -> &DMatrix<f64> {
        &self.bq_atau
    }

    pub fn bp_atau(&self) -> &DMatrix<f64> {
        &self.bp_atau
    }

    pub fn phi(&self) -> &SmoothSaturation {
        &self.phi
    }

    pub fn big_phi(&self) -> &SmoothSaturation {
        &self.big_phi
    }

    /// Direct feedthrough gain `a_{i1} / tau^{nu_i}` of channel `i`.
    pub fn dob_gain(&self, i: usize) -> f64 {
        let blk = self.nu.block(i);
        self.bq_atau[(blk.end - 1, i)]
    }

    /// Same design re-assembled at a different timescale.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(
            self.gains.clone(),
            self.nu.clone(),
            tau,
            self.phi.clone(),
            self.big_phi.clone(),
        )
    }
}

/// One channel's design request: inner coefficients plus either a fixed
/// leading gain to certify or a bracket to search.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDesign {
    pub inner: Vec<f64>,
    pub a1: Option<f64>,
    pub bracket: (f64, f64),
}

/// Per-channel design outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReport {
    pub channel: usize,
    pub a: Vec<f64>,
    pub a1: f64,
    pub searched: bool,
    pub nyquist: NyquistOutcome,
    pub spr: SprOutcome,
}

impl ChannelReport {
    pub fn pass(&self) -> bool {
        self.nyquist.pass && self.spr.pass
    }
}

/// Runs the per-channel design: certify or search the leading gain, then
/// verify strict positive realness.
pub fn design_gains(
    channels: &[ChannelDesign],
    disk: &SectorDisk,
    grid: &FrequencyGrid,
    a1_safety: f64,
) -> Result<(GainVector, Vec<ChannelReport>)> {
    let mut reports = Vec::with_capacity(channels.len());
    let mut gain_rows = Vec::with_capacity(channels.len());
    for (i, ch) in channels.iter().enumerate() {
        let (a1, searched) = match ch.a1 {
            Some(v) => (v, false),
            None => (
                search_a1(i, &ch.inner, disk, ch.bracket, grid, a1_safety)?,
                true,
            ),
        };
        let mut a = Vec::with_capacity(ch.inner.len() + 1);
        a.push(a1);
        a.extend_from_slice(&ch.inner);
        let nyquist = nyquist_check(&a, disk, grid)?;
        let spr = spr_check(&a, disk.mu, grid)?;
        reports.push(ChannelReport {
            channel: i,
            a: a.clone(),
            a1,
            searched,
            nyquist,
            spr,
        });
        gain_rows.push(a);
    }
    let gains = GainVector::new(gain_rows)?;
    Ok((gains, reports))
}

/// Full synthesis report, serializable as `key = value` text.
#[derive(Clone)]
pub struct SynthesisReport {
    pub mu: f64,
    pub grid: FrequencyGrid,
    pub channels: Vec<ChannelReport>,
    pub saturation: Option<SaturationLevels>,
    pub pass: bool,
}

impl SynthesisReport {
    pub fn from_parts(
        mu: f64,
        grid: FrequencyGrid,
        channels: Vec<ChannelReport>,
        saturation: Option<SaturationLevels>,
    ) -> Self {
        let pass = channels.iter().all(ChannelReport::pass);
        Self {
            mu,
            grid,
            channels,
            saturation,
            pass,
        }
    }

    /// Pass flags agree with the stored margins.
    pub fn is_consistent(&self) -> bool {
        let chan_ok = self.channels.iter().all(|c| {
            let nyq = !c.nyquist.pass
                || (c.nyquist.min_distance > 0.0 && c.nyquist.winding_number == 0);
            let spr = !c.spr.pass || (c.spr.min_re > 0.0 && c.spr.loop_stable);
            nyq && spr
        });
        chan_ok && self.pass == self.channels.iter().all(ChannelReport::pass)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("schema = dobsim.synthesis.v1\n");
        out.push_str(&format!("mu = {}\n", self.mu));
        out.push_str(&format!("grid.omega_min = {}\n", self.grid.omega_min));
        out.push_str(&format!("grid.omega_max = {}\n", self.grid.omega_max));
        out.push_str(&format!("grid.points = {}\n", self.grid.points));
        for c in &self.channels {
            let p = format!("channel.{}", c.channel + 1);
            let a_str = c
                .a
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!("{p}.a = {a_str}\n"));
            out.push_str(&format!("{p}.a1 = {}\n", c.a1));
            out.push_str(&format!("{p}.searched = {}\n", c.searched));
            out.push_str(&format!("{p}.nyquist.pass = {}\n", c.nyquist.pass));
            out.push_str(&format!(
                "{p}.nyquist.min_distance = {}\n",
                c.nyquist.min_distance
            ));
            out.push_str(&format!(
                "{p}.nyquist.min_distance_omega = {}\n",
                c.nyquist.min_distance_omega
            ));
            out.push_str(&format!(
                "{p}.nyquist.winding_number = {}\n",
                c.nyquist.winding_number
            ));
            out.push_str(&format!(
                "{p}.nyquist.low_freq_re_limit = {}\n",
                c.nyquist.low_freq_re_limit
            ));
            out.push_str(&format!("{p}.spr.pass = {}\n", c.spr.pass));
            out.push_str(&format!("{p}.spr.min_re = {}\n", c.spr.min_re));
            out.push_str(&format!("{p}.spr.at_omega = {}\n", c.spr.at_omega));
            out.push_str(&format!("{p}.spr.loop_stable = {}\n", c.spr.loop_stable));
        }
        if let Some(s) = &self.saturation {
            let phi = s
                .phi_levels
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            let big = s
                .big_phi_levels
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!("saturation.phi_levels = {phi}\n"));
            out.push_str(&format!("saturation.big_phi_levels = {big}\n"));
            out.push_str(&format!("saturation.bracket_max = {}\n", s.bracket_max));
            out.push_str(&format!(
                "saturation.bracket_argmax = {}\n",
                s.bracket_argmax
            ));
            out.push_str(&format!("saturation.lipschitz_f = {}\n", s.lipschitz_f));
            out.push_str(&format!(
                "saturation.assumption_violations = {}\n",
                s.assumption_violations
            ));
            out.push_str(&format!(
                "saturation.worst_gain_ratio = {}\n",
                s.worst_gain_ratio
            ));
            out.push_str(&format!("saturation.evaluations = {}\n", s.evaluations));
        }
        out.push_str(&format!("pass = {}\n", self.pass));
        out
    }
}
