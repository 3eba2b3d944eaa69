//! Fixed-step RK4 integration of the closed loop and the nominal loop,
//! trajectory recording, CSV export, and timescale sweeps.
//!
//! The closed loop is two-timescale: the filters move at rate `1/tau`. The
//! step is therefore tied to the timescale (`step <= tau / 20`) instead of
//! adapting, which keeps the boundary layer resolved and runs reproducible.
//! The control and the disturbance signal are recomputed inside every RK4
//! stage, honoring the direct feedthrough from `y` to `u`.
//!
//! Runs are single-threaded and deterministic: identical configurations
//! produce bit-identical trajectories. Sweep runs share only immutable data
//! and may execute concurrently.

use std::io::{self, Write};
use std::time::Instant;

use nalgebra::DVector;

use crate::analysis::{self, Metrics};
use crate::controller::{controller_output, controller_rhs, ControllerState};
use crate::error::{Error, Result};
use crate::plant::{plant_rhs, NominalModel, NormalFormPlant};
use crate::synthesis::ControllerParams;

/// Integration and initial-condition configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub t_end: f64,
    pub step: f64,
    pub tau: f64,
    pub record_stride: usize,
    pub z0: DVector<f64>,
    pub x0: DVector<f64>,
    pub zbar0: DVector<f64>,
    pub q0: DVector<f64>,
    pub p0: DVector<f64>,
    /// Abort threshold on the full state norm.
    pub blow_up: f64,
    /// Lifts the `step <= tau / 20` two-timescale guard.
    pub allow_coarse_step: bool,
}

impl SimConfig {
    /// Zero-initialized configuration; controller states default to zero,
    /// peaking is absorbed by the saturations.
    pub fn new(t_end: f64, step: f64, tau: f64, z_dim: usize, chain_dim: usize) -> Self {
        Self {
            t_end,
            step,
            tau,
            record_stride: 1,
            z0: DVector::zeros(z_dim),
            x0: DVector::zeros(chain_dim),
            zbar0: DVector::zeros(z_dim),
            q0: DVector::zeros(chain_dim),
            p0: DVector::zeros(chain_dim),
            blow_up: 1e8,
            allow_coarse_step: false,
        }
    }

    fn validate(&self, z_dim: usize, chain_dim: usize, timescale_guard: bool) -> Result<()> {
        let horizon_ok =
            self.t_end.is_finite() && self.t_end >= 0.0 && self.step.is_finite() && self.step > 0.0;
        if !horizon_ok {
            return Err(Error::Invalid(format!(
                "need t_end >= 0 and step > 0, got t_end = {}, step = {}",
                self.t_end, self.step
            )));
        }
        if self.record_stride == 0 {
            return Err(Error::Invalid("record_stride must be >= 1".into()));
        }
        if timescale_guard && !self.allow_coarse_step {
            if self.tau.is_nan() || self.tau <= 0.0 {
                return Err(Error::Invalid(format!("tau must be positive, got {}", self.tau)));
            }
            if self.step > self.tau / 20.0 * (1.0 + 1e-12) {
                return Err(Error::Precondition(format!(
                    "step {} exceeds tau/20 = {}; set allow_coarse_step to override",
                    self.step,
                    self.tau / 20.0
                )));
            }
        }
        for (name, v, want) in [
            ("z0", &self.z0, z_dim),
            ("x0", &self.x0, chain_dim),
            ("zbar0", &self.zbar0, z_dim),
            ("q0", &self.q0, chain_dim),
            ("p0", &self.p0, chain_dim),
        ] {
            if v.len() != want {
                return Err(Error::Dimension(format!(
                    "{name} has length {}, expected {want}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Divergence marker for an aborted run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Abort {
    pub t: f64,
    pub norm: f64,
}

/// Flat column-major storage for one vector signal.
#[derive(Debug, Clone, PartialEq)]
struct SignalBlock {
    dim: usize,
    data: Vec<f64>,
}

impl SignalBlock {
    fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    fn push(&mut self, v: &DVector<f64>) {
        debug_assert_eq!(v.len(), self.dim);
        self.data.extend_from_slice(v.as_slice());
    }

    fn push_slice(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.dim);
        self.data.extend_from_slice(v);
    }

    fn at(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    fn scalar_series(&self, comp: usize) -> Vec<f64> {
        assert!(comp < self.dim);
        self.data
            .iter()
            .skip(comp)
            .step_by(self.dim)
            .copied()
            .collect()
    }
}

/// Uniformly sampled run record. All stored samples are finite; a diverging
/// run is truncated and flagged in [`Trajectory::aborted`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tau: f64,
    pub step: f64,
    pub record_stride: usize,
    times: Vec<f64>,
    z: SignalBlock,
    x: SignalBlock,
    zbar: SignalBlock,
    q: SignalBlock,
    p: SignalBlock,
    y: SignalBlock,
    u: SignalBlock,
    w: SignalBlock,
    pub aborted: Option<Abort>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn z_at(&self, i: usize) -> DVector<f64> {
        self.z.at(i)
    }

    pub fn x_at(&self, i: usize) -> DVector<f64> {
        self.x.at(i)
    }

    pub fn zbar_at(&self, i: usize) -> DVector<f64> {
        self.zbar.at(i)
    }

    pub fn q_at(&self, i: usize) -> DVector<f64> {
        self.q.at(i)
    }

    pub fn p_at(&self, i: usize) -> DVector<f64> {
        self.p.at(i)
    }

    pub fn y_at(&self, i: usize) -> DVector<f64> {
        self.y.at(i)
    }

    pub fn u_at(&self, i: usize) -> DVector<f64> {
        self.u.at(i)
    }

    pub fn w_at(&self, i: usize) -> DVector<f64> {
        self.w.at(i)
    }

    pub fn has_observer_signals(&self) -> bool {
        self.q.dim > 0
    }

    pub fn q_scalar_series(&self, comp: usize) -> Vec<f64> {
        self.q.scalar_series(comp)
    }

    pub fn p_scalar_series(&self, comp: usize) -> Vec<f64> {
        self.p.scalar_series(comp)
    }

    pub fn y_scalar_series(&self, comp: usize) -> Vec<f64> {
        self.y.scalar_series(comp)
    }

    /// CSV export: one row per sample, full round-trip precision (the
    /// shortest representation that parses back to the same double).
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut header = String::from("t");
        for (name, block) in self.columns() {
            for c in 0..block.dim {
                header.push_str(&format!(",{name}_{}", c + 1));
            }
        }
        writeln!(out, "{header}")?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            line.push_str(&self.times[i].to_string());
            for (_, block) in self.columns() {
                for c in 0..block.dim {
                    line.push(',');
                    line.push_str(&block.data[i * block.dim + c].to_string());
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("csv is ascii")
    }

    fn columns(&self) -> [(&'static str, &SignalBlock); 8] {
        [
            ("z", &self.z),
            ("x", &self.x),
            ("zbar", &self.zbar),
            ("q", &self.q),
            ("p", &self.p),
            ("y", &self.y),
            ("u", &self.u),
            ("w", &self.w),
        ]
    }

    /// Test-only assembly of a trajectory from raw column data, ordered
    /// `[z, x, zbar, q, p, y, u, w]`.
    #[cfg(test)]
    pub(crate) fn from_raw(
        tau: f64,
        step: f64,
        times: Vec<f64>,
        dims: [usize; 8],
        cols: [Vec<f64>; 8],
    ) -> Self {
        let [z, x, zbar, q, p, y, u, w] = cols;
        let mk = |dim: usize, data: Vec<f64>| SignalBlock { dim, data };
        Self {
            tau,
            step,
            record_stride: 1,
            times,
            z: mk(dims[0], z),
            x: mk(dims[1], x),
            zbar: mk(dims[2], zbar),
            q: mk(dims[3], q),
            p: mk(dims[4], p),
            y: mk(dims[5], y),
            u: mk(dims[6], u),
            w: mk(dims[7], w),
            aborted: None,
        }
    }
}

fn rk4_step<F>(rhs: &F, t: f64, s: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = rhs(t, s)?;
    let k2 = rhs(t + 0.5 * h, &(s + &k1 * (0.5 * h)))?;
    let k3 = rhs(t + 0.5 * h, &(s + &k2 * (0.5 * h)))?;
    let k4 = rhs(t + h, &(s + &k3 * h))?;
    Ok(s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Integrates the coupled plant/controller loop.
///
/// Records every `record_stride`-th step; the sample count is
/// `floor(t_end / (step * record_stride)) + 1`. Divergence (non-finite state
/// or norm beyond `blow_up`) truncates the run and sets the abort flag; a
/// singular nominal gain is an error.
pub fn simulate_closed_loop(
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    params: &ControllerParams,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let z_dim = plant.z_dim();
    let nu = plant.relative_degree().clone();
    let chain = nu.total();
    let m = nu.channels();
    cfg.validate(z_dim, chain, true)?;
    if (params.tau() - cfg.tau).abs() > 1e-12 * cfg.tau.abs() {
        return Err(Error::Precondition(format!(
            "config tau {} differs from controller tau {}",
            cfg.tau,
            params.tau()
        )));
    }
    if params.relative_degree() != plant.relative_degree() {
        return Err(Error::Dimension(
            "controller and plant relative degrees differ".into(),
        ));
    }

    let total = 2 * z_dim + 3 * chain;
    let mut s = DVector::<f64>::zeros(total);
    s.rows_mut(0, z_dim).copy_from(&cfg.z0);
    s.rows_mut(z_dim, chain).copy_from(&cfg.x0);
    s.rows_mut(z_dim + chain, z_dim).copy_from(&cfg.zbar0);
    s.rows_mut(2 * z_dim + chain, chain).copy_from(&cfg.q0);
    s.rows_mut(2 * z_dim + 2 * chain, chain).copy_from(&cfg.p0);

    let unpack = |s: &DVector<f64>| {
        (
            s.rows(0, z_dim).into_owned(),
            s.rows(z_dim, chain).into_owned(),
            s.rows(z_dim + chain, z_dim).into_owned(),
            s.rows(2 * z_dim + chain, chain).into_owned(),
            s.rows(2 * z_dim + 2 * chain, chain).into_owned(),
        )
    };
    let measure = |x: &DVector<f64>| DVector::from_fn(m, |i, _| x[nu.block(i).start]);

    let rhs = |t: f64, s: &DVector<f64>| -> Result<DVector<f64>> {
        let (z, x, zbar, q, p) = unpack(s);
        let y = measure(&x);
        let state = ControllerState { zbar, q, p };
        let (u, _w) = controller_output(&state, &y, params, nominal, t)?;
        let (zdot, xdot) = plant_rhs(plant, &z, &x, &u, t)?;
        let d = controller_rhs(&state, &y, &u, params, nominal, t)?;
        let mut ds = DVector::<f64>::zeros(total);
        ds.rows_mut(0, z_dim).copy_from(&zdot);
        ds.rows_mut(z_dim, chain).copy_from(&xdot);
        ds.rows_mut(z_dim + chain, z_dim).copy_from(&d.zbar_dot);
        ds.rows_mut(2 * z_dim + chain, chain).copy_from(&d.q_dot);
        ds.rows_mut(2 * z_dim + 2 * chain, chain).copy_from(&d.p_dot);
        Ok(ds)
    };

    let n_steps = (cfg.t_end / cfg.step + 1e-9).floor() as usize;
    let mut traj = Trajectory {
        tau: cfg.tau,
        step: cfg.step,
        record_stride: cfg.record_stride,
        times: Vec::new(),
        z: SignalBlock::new(z_dim),
        x: SignalBlock::new(chain),
        zbar: SignalBlock::new(z_dim),
        q: SignalBlock::new(chain),
        p: SignalBlock::new(chain),
        y: SignalBlock::new(m),
        u: SignalBlock::new(m),
        w: SignalBlock::new(m),
        aborted: None,
    };

    for k in 0..=n_steps {
        let t = k as f64 * cfg.step;
        if k % cfg.record_stride == 0 {
            let (z, x, zbar, q, p) = unpack(&s);
            let y = measure(&x);
            let state = ControllerState { zbar, q, p };
            let (u, w) = controller_output(&state, &y, params, nominal, t)?;
            traj.times.push(t);
            traj.z.push(&z);
            traj.x.push(&x);
            traj.zbar.push(&state.zbar);
            traj.q.push(&state.q);
            traj.p.push(&state.p);
            traj.y.push(&y);
            traj.u.push(&u);
            traj.w.push(&w);
        }
        if k == n_steps {
            break;
        }
        s = rk4_step(&rhs, t, &s, cfg.step)?;
        let norm = s.norm();
        if !norm.is_finite() || norm > cfg.blow_up {
            traj.aborted = Some(Abort {
                t: t + cfg.step,
                norm,
            });
            break;
        }
    }
    Ok(traj)
}

/// Integrates the nominal loop `xdot = A x + B (F + Gbar Ur)` under the
/// designed state feedback. The internal state is recorded in both the `z`
/// and `zbar` columns; observer columns are empty.
pub fn simulate_nominal(
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let z_dim = plant.z_dim();
    let nu = plant.relative_degree().clone();
    let chain = nu.total();
    let m = nu.channels();
    cfg.validate(z_dim, chain, false)?;

    let structure = plant.structure().clone();
    let total = z_dim + chain;
    let mut s = DVector::<f64>::zeros(total);
    s.rows_mut(0, z_dim).copy_from(&cfg.zbar0);
    s.rows_mut(z_dim, chain).copy_from(&cfg.x0);

    let rhs = |t: f64, s: &DVector<f64>| -> Result<DVector<f64>> {
        let zbar = s.rows(0, z_dim).into_owned();
        let x = s.rows(z_dim, chain).into_owned();
        let ur = nominal.ur(&zbar, &x, t)?;
        let gbar = nominal.gain(&zbar, &x, t)?;
        let forcing = nominal.f(&zbar, &x) + gbar * &ur;
        let xdot = &structure.a * &x + &structure.b * forcing;
        let mut ds = DVector::<f64>::zeros(total);
        ds.rows_mut(0, z_dim).copy_from(&nominal.f0(&zbar, &x));
        ds.rows_mut(z_dim, chain).copy_from(&xdot);
        Ok(ds)
    };

    let n_steps = (cfg.t_end / cfg.step + 1e-9).floor() as usize;
    let mut traj = Trajectory {
        tau: cfg.tau,
        step: cfg.step,
        record_stride: cfg.record_stride,
        times: Vec::new(),
        z: SignalBlock::new(z_dim),
        x: SignalBlock::new(chain),
        zbar: SignalBlock::new(z_dim),
        q: SignalBlock::new(0),
        p: SignalBlock::new(0),
        y: SignalBlock::new(m),
        u: SignalBlock::new(m),
        w: SignalBlock::new(0),
        aborted: None,
    };
    let empty: [f64; 0] = [];

    for k in 0..=n_steps {
        let t = k as f64 * cfg.step;
        if k % cfg.record_stride == 0 {
            let zbar = s.rows(0, z_dim).into_owned();
            let x = s.rows(z_dim, chain).into_owned();
            let y = DVector::from_fn(m, |i, _| x[nu.block(i).start]);
            let ur = nominal.ur(&zbar, &x, t)?;
            traj.times.push(t);
            traj.z.push(&zbar);
            traj.x.push(&x);
            traj.zbar.push(&zbar);
            traj.q.push_slice(&empty);
            traj.p.push_slice(&empty);
            traj.y.push(&y);
            traj.u.push(&ur);
            traj.w.push_slice(&empty);
        }
        if k == n_steps {
            break;
        }
        s = rk4_step(&rhs, t, &s, cfg.step)?;
        let norm = s.norm();
        if !norm.is_finite() || norm > cfg.blow_up {
            traj.aborted = Some(Abort {
                t: t + cfg.step,
                norm,
            });
            break;
        }
    }
    Ok(traj)
}

/// One sweep run outcome. Failures are recorded, not propagated.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub tau: f64,
    pub step: f64,
    pub metrics: Option<Metrics>,
    /// Tail supremum of the scaled observer error norm.
    pub xi_tail: Option<f64>,
    /// Tail supremum of the leading disturbance-coordinate error norm.
    pub eta1_tail_err: Option<f64>,
    pub aborted: bool,
    pub runtime_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub t_ss: f64,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "tau,step,ultimate_bound,recovery_error,effort_l1,effort_l2,xi_tail,eta1_tail_err,settled,aborted,runtime_s,error\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.entries {
            let m = e.metrics.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.tau,
                e.step,
                opt(m.map(|m| m.ultimate_bound)),
                opt(m.and_then(|m| m.recovery_error)),
                opt(m.map(|m| m.effort_l1)),
                opt(m.map(|m| m.effort_l2)),
                opt(e.xi_tail),
                opt(e.eta1_tail_err),
                m.map(|m| m.settled.to_string()).unwrap_or_default(),
                e.aborted,
                e.runtime_s,
                e.error.clone().unwrap_or_default()
            ));
        }
        out
    }
}

/// Runs the closed loop across a descending list of timescales, with the
/// step scaled as `tau / 20`, and reports per-run metrics against a nominal
/// reference simulated on the same grid. Per-run failures are recorded in
/// the entry without aborting the sweep.
pub fn sweep_tau(
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    params: &ControllerParams,
    base_cfg: &SimConfig,
    taus: &[f64],
    t_ss_frac: f64,
    settle_threshold: f64,
) -> Result<SweepReport> {
    if taus.is_empty() {
        return Err(Error::Invalid("tau list must be nonempty".into()));
    }
    if taus.iter().any(|&t| t.is_nan() || t <= 0.0) {
        return Err(Error::Invalid("tau values must be positive".into()));
    }
    if taus.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invalid("tau list must be strictly descending".into()));
    }
    if !(0.0..1.0).contains(&t_ss_frac) {
        return Err(Error::Invalid("t_ss_frac must be in [0, 1)".into()));
    }

    let t_ss = t_ss_frac * base_cfg.t_end;
    let mut entries = Vec::with_capacity(taus.len());
    for &tau in taus {
        let start = Instant::now();
        let entry = run_sweep_entry(plant, nominal, params, base_cfg, tau, t_ss, settle_threshold);
        let runtime_s = start.elapsed().as_secs_f64();
        entries.push(match entry {
            Ok(mut e) => {
                e.runtime_s = runtime_s;
                e
            }
            Err(err) => SweepEntry {
                tau,
                step: tau / 20.0,
                metrics: None,
                xi_tail: None,
                eta1_tail_err: None,
                aborted: false,
                runtime_s,
                error: Some(err.to_string()),
            },
        });
    }
    Ok(SweepReport { entries, t_ss })
}

fn run_sweep_entry(
    plant: &NormalFormPlant,
    nominal: &NominalModel,
    params: &ControllerParams,
    base_cfg: &SimConfig,
    tau: f64,
    t_ss: f64,
    settle_threshold: f64,
) -> Result<SweepEntry> {
    let step = tau / 20.0;
    let n_steps = (base_cfg.t_end / step + 1e-9).floor() as usize;
    let stride = (n_steps / 4000).max(1);
    let mut cfg = base_cfg.clone();
    cfg.tau = tau;
    cfg.step = step;
    cfg.record_stride = stride;
    let params_tau = params.with_tau(tau)?;

    let traj = simulate_closed_loop(plant, nominal, &params_tau, &cfg)?;
    let aborted = traj.aborted.is_some();

    let (metrics, xi_tail, eta1_tail) = if aborted {
        let metrics = analysis::compute_metrics(&traj, None, t_ss, settle_threshold)?;
        (Some(metrics), None, None)
    } else {
        let nominal_traj = simulate_nominal(plant, nominal, &cfg)?;
        let metrics =
            analysis::compute_metrics(&traj, Some(&nominal_traj), t_ss, settle_threshold)?;
        let mut xi_tail = 0.0_f64;
        let mut eta_tail = 0.0_f64;
        for i in 0..traj.len() {
            if traj.time(i) < t_ss {
                continue;
            }
            let q = traj.q_at(i);
            let x = traj.x_at(i);
            let xi = analysis::xi_from_states(&q, &x, tau, plant.relative_degree())?;
            xi_tail = xi_tail.max(xi.norm());
            let eta1 = analysis::eta1_from_sample(&traj, i, &params_tau, nominal);
            let eta1_star = analysis::quasi_steady_eta(
                &traj.z_at(i),
                &x,
                &traj.zbar_at(i),
                traj.time(i),
                plant,
                nominal,
            )?;
            eta_tail = eta_tail.max((eta1 - eta1_star).norm());
        }
        (Some(metrics), Some(xi_tail), Some(eta_tail))
    };

    Ok(SweepEntry {
        tau,
        step,
        metrics,
        xi_tail,
        eta1_tail_err: eta1_tail,
        aborted,
        runtime_s: 0.0,
        error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::SmoothSaturation;
    use crate::plant::satellite::{default_feedback_gain, satellite_plant, SatelliteParams};
    use crate::plant::{DynamicsFn, FeedbackFn, GainFn, RelativeDegree};
    use crate::synthesis::GainVector;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn satellite_setup(
        params: &SatelliteParams,
        tau: f64,
    ) -> (NormalFormPlant, NominalModel, ControllerParams) {
        let (plant, nominal) = satellite_plant(params, default_feedback_gain()).unwrap();
        let cp = ControllerParams::new(
            GainVector::uniform(vec![15.0, 8.0], 2).unwrap(),
            RelativeDegree::new(vec![2, 2]).unwrap(),
            tau,
            SmoothSaturation::uniform(25.0, 4, 1.0).unwrap(),
            SmoothSaturation::uniform(100.0, 2, 1.0).unwrap(),
        )
        .unwrap();
        (plant, nominal, cp)
    }

    #[test]
    fn zero_initial_conditions_stay_zero() {
        let (plant, nominal, params) = satellite_setup(&SatelliteParams::reference(), 1e-2);
        let cfg = SimConfig::new(0.5, 5e-4, 1e-2, 0, 4);
        let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        assert!(traj.aborted.is_none());
        for i in 0..traj.len() {
            assert!(traj.x_at(i).norm() < 1e-11, "sample {i}");
            assert!(traj.u_at(i).norm() < 1e-11, "sample {i}");
        }
    }

    #[test]
    fn sample_count_matches_contract() {
        let (plant, nominal, params) = satellite_setup(&SatelliteParams::reference(), 1e-2);
        let mut cfg = SimConfig::new(0.2, 5e-4, 1e-2, 0, 4);
        cfg.record_stride = 7;
        let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        let n_steps = (0.2_f64 / 5e-4 + 1e-9).floor() as usize;
        assert_eq!(traj.len(), n_steps / 7 + 1);

        // t_end = 0 produces a single sample.
        let cfg0 = SimConfig::new(0.0, 5e-4, 1e-2, 0, 4);
        let traj0 = simulate_closed_loop(&plant, &nominal, &params, &cfg0).unwrap();
        assert_eq!(traj0.len(), 1);
    }

    #[test]
    fn step_guard_enforced() {
        let (plant, nominal, params) = satellite_setup(&SatelliteParams::reference(), 1e-3);
        let cfg = SimConfig::new(0.1, 1e-3, 1e-3, 0, 4);
        assert!(matches!(
            simulate_closed_loop(&plant, &nominal, &params, &cfg),
            Err(Error::Precondition(_))
        ));
        let mut loose = cfg;
        loose.allow_coarse_step = true;
        simulate_closed_loop(&plant, &nominal, &params, &loose).unwrap();
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let (plant, nominal, params) = satellite_setup(&SatelliteParams::reference(), 1e-2);
        let mut cfg = SimConfig::new(0.3, 5e-4, 1e-2, 0, 4);
        cfg.x0 = DVector::from_vec(vec![1.0, -2.0, 0.0, -0.8]);
        let a = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        let b = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
    }

    #[test]
    fn matched_observer_tracks_nominal() {
        // Zero uncertainty with the observer started converged: the closed
        // loop stays within O(tau) of the nominal trajectory.
        let p = SatelliteParams::reference_without_uncertainty();
        let tau = 1e-3;
        let (plant, nominal, params) = satellite_setup(&p, tau);
        let x0 = DVector::from_vec(vec![1.0, -2.0, 0.0, -0.8]);
        let mut cfg = SimConfig::new(2.0, tau / 20.0, tau, 0, 4);
        cfg.x0 = x0.clone();
        cfg.q0 = x0.clone();
        // Converged filter: p_{i1} = eta*_{i1} = -F_i(x0), p_{i2} = (a_{i2}/tau) p_{i1}.
        let f0 = plant.f(&DVector::zeros(0), &x0);
        cfg.p0 = DVector::from_vec(vec![
            -f0[0],
            8.0 / tau * -f0[0],
            -f0[1],
            8.0 / tau * -f0[1],
        ]);
        cfg.record_stride = 20;
        let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        assert!(traj.aborted.is_none());
        let nom = simulate_nominal(&plant, &nominal, &cfg).unwrap();
        let mut sup = 0.0_f64;
        for i in 0..traj.len() {
            sup = sup.max((traj.x_at(i) - nom.x_at(i)).norm());
        }
        assert!(sup < 0.05, "sup |x - xbar| = {sup}");
    }

    #[test]
    fn nominal_origin_stays_fixed() {
        let (plant, nominal, _) = satellite_setup(&SatelliteParams::reference(), 1e-2);
        let cfg = SimConfig::new(1.0, 1e-3, 1e-2, 0, 4);
        let traj = simulate_nominal(&plant, &nominal, &cfg).unwrap();
        for i in 0..traj.len() {
            assert!(traj.x_at(i).norm() < 1e-12);
        }
    }

    #[test]
    fn open_loop_origin_stays_fixed() {
        // u forced to zero: the orbit identity makes the origin an exact
        // equilibrium of the uncontrolled satellite.
        let p = SatelliteParams::reference();
        let (plant, _) = satellite_plant(&p, default_feedback_gain()).unwrap();
        let zero_u: FeedbackFn = Arc::new(|_, _, _| DVector::zeros(2));
        let open = NominalModel::sharing(&plant, plant.gain_fn(), zero_u);
        let cfg = SimConfig::new(2.0, 1e-3, 1e-2, 0, 4);
        let traj = simulate_nominal(&plant, &open, &cfg).unwrap();
        for i in 0..traj.len() {
            assert!(traj.x_at(i).norm() < 1e-12, "drifted at sample {i}");
        }
    }

    #[test]
    fn blow_up_returns_partial_trajectory() {
        // Scalar plant xdot = x^2 from x0 = 2 diverges in finite time.
        let nu = RelativeDegree::new(vec![1]).unwrap();
        let f0: DynamicsFn = Arc::new(|_, _| DVector::zeros(0));
        let f: DynamicsFn = Arc::new(|_, x| DVector::from_element(1, x[0] * x[0]));
        let g: GainFn = Arc::new(|_, _, _| DMatrix::identity(1, 1));
        let plant = NormalFormPlant::new(1, nu, f0, f, Arc::clone(&g)).unwrap();
        let ur: FeedbackFn = Arc::new(|_, _, _| DVector::zeros(1));
        let nominal = NominalModel::sharing(&plant, g, ur);
        let mut cfg = SimConfig::new(2.0, 1e-3, 1.0, 0, 1);
        cfg.x0 = DVector::from_element(1, 2.0);
        cfg.blow_up = 1e6;
        let traj = simulate_nominal(&plant, &nominal, &cfg).unwrap();
        let abort = traj.aborted.expect("must abort");
        assert!(abort.t < 1.0, "aborted at {}", abort.t);
        assert!(!traj.is_empty());
        for i in 0..traj.len() {
            assert!(traj.x_at(i).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn csv_has_expected_shape() {
        let (plant, nominal, params) = satellite_setup(&SatelliteParams::reference(), 1e-2);
        let mut cfg = SimConfig::new(0.01, 5e-4, 1e-2, 0, 4);
        cfg.x0 = DVector::from_vec(vec![0.1, 0.0, 0.0, 0.0]);
        let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        let csv = traj.to_csv_string();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert_eq!(
            header,
            "t,x_1,x_2,x_3,x_4,q_1,q_2,q_3,q_4,p_1,p_2,p_3,p_4,y_1,y_2,u_1,u_2,w_1,w_2"
        );
        assert_eq!(lines.count(), traj.len());
        // Round-trip: every field parses back to the identical double.
        for (i, line) in csv.lines().skip(1).enumerate() {
            let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals[0], traj.time(i));
            assert_eq!(vals[1], traj.x_at(i)[0]);
        }
    }

    #[test]
    fn sweep_single_entry_matches_direct_run() {
        let p = SatelliteParams::reference();
        let (plant, nominal, params) = satellite_setup(&p, 1e-2);
        let mut base = SimConfig::new(2.0, 5e-4, 1e-2, 0, 4);
        base.x0 = DVector::from_vec(vec![1.0, -2.0, 0.0, -0.8]);
        let report = sweep_tau(&plant, &nominal, &params, &base, &[1e-2], 0.7, 0.05).unwrap();
        assert_eq!(report.entries.len(), 1);
        let e = &report.entries[0];
        assert!(e.error.is_none());
        assert!(!e.aborted);
        let m = e.metrics.as_ref().unwrap();
        assert!(m.ultimate_bound.is_finite());
        assert!(m.recovery_error.unwrap().is_finite());
        assert!(e.xi_tail.unwrap().is_finite());

        // Same run by hand at the sweep's own grid.
        let mut cfg = base.clone();
        cfg.step = 1e-2 / 20.0;
        cfg.record_stride = ((2.0 / cfg.step + 1e-9).floor() as usize / 4000).max(1);
        let traj = simulate_closed_loop(&plant, &nominal, &params, &cfg).unwrap();
        let nom = simulate_nominal(&plant, &nominal, &cfg).unwrap();
        let manual = analysis::compute_metrics(&traj, Some(&nom), 1.4, 0.05).unwrap();
        assert_eq!(m.ultimate_bound, manual.ultimate_bound);
        assert_eq!(m.recovery_error, manual.recovery_error);
    }

    #[test]
    fn sweep_records_failures_without_crashing() {
        let p = SatelliteParams::reference();
        let (plant, nominal, params) = satellite_setup(&p, 1e-2);
        let mut base = SimConfig::new(4.0, 5e-4, 1e-2, 0, 4);
        base.x0 = DVector::from_vec(vec![1.0, -2.0, 0.0, -0.8]);
        // tau = 10 steps at h = 0.5: hopelessly coarse, expected to diverge
        // or report a large bound; the sweep must record it either way.
        let report =
            sweep_tau(&plant, &nominal, &params, &base, &[10.0, 1e-2], 0.7, 0.05).unwrap();
        assert_eq!(report.entries.len(), 2);
        let bad = &report.entries[0];
        assert!(
            bad.aborted
                || bad.error.is_some()
                || bad.metrics.as_ref().unwrap().ultimate_bound > 0.05
        );
        let good = &report.entries[1];
        assert!(good.error.is_none() && !good.aborted);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 3);
    }

    #[test]
    fn sweep_rejects_bad_tau_lists() {
        let (plant, nominal, params) = satellite_setup(&SatelliteParams::reference(), 1e-2);
        let base = SimConfig::new(1.0, 5e-4, 1e-2, 0, 4);
        assert!(sweep_tau(&plant, &nominal, &params, &base, &[], 0.7, 0.05).is_err());
        assert!(sweep_tau(&plant, &nominal, &params, &base, &[0.01, 0.1], 0.7, 0.05).is_err());
    }
}
