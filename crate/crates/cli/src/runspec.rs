//! Run specification: the JSON configuration consumed by every subcommand.
//!
//! Unknown keys are rejected; every field has a default, and the all-default
//! spec is the reference satellite scenario. A spec written by the tool
//! re-parses to an identical spec.

use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use dobsim::controller::SmoothSaturation;
use dobsim::plant::satellite::{satellite_plant, SatelliteParams};
use dobsim::plant::{GainFn, NominalModel, NormalFormPlant, RelativeDegree};
use dobsim::simulator::SimConfig;
use dobsim::synthesis::{
    state_feedback_from_poles, ChannelDesign, ControllerParams, FrequencyGrid, GainVector,
    SaturationEstimateOptions, StateBox,
};

use crate::CliError;

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Assembled inputs for the saturation-level estimator.
pub struct SaturationInputs {
    pub state_box: StateBox,
    pub samples: Vec<GainFn>,
    pub opts: SaturationEstimateOptions,
    pub l_z: f64,
    pub delta_w: f64,
    pub delta_1: f64,
    pub lipschitz_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    /// Plant selector; `satellite` is the only builtin.
    pub plant: String,
    /// Seed for all randomness in `verify`.
    pub seed: u64,
    pub satellite: SatelliteSpec,
    pub controller: ControllerSpec,
    pub synthesis: SynthesisSpec,
    pub sim: SimSpec,
    pub sweep: SweepSpec,
    pub verify: VerifySpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            plant: "satellite".into(),
            seed: 7,
            satellite: SatelliteSpec::default(),
            controller: ControllerSpec::default(),
            synthesis: SynthesisSpec::default(),
            sim: SimSpec::default(),
            sweep: SweepSpec::default(),
            verify: VerifySpec::default(),
        }
    }
}

/// Sinusoid `amplitude * sin(angular_frequency * t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidSpec {
    pub amplitude: f64,
    pub angular_frequency: f64,
}

impl SinusoidSpec {
    fn as_fn(&self) -> Arc<dyn Fn(f64) -> f64 + Send + Sync> {
        let a = self.amplitude;
        let w = self.angular_frequency;
        Arc::new(move |t| a * (w * t).sin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SatelliteSpec {
    pub m_true: f64,
    pub m_nominal: f64,
    pub k: f64,
    pub r_star: f64,
    pub theta_known: SinusoidSpec,
    pub theta_unknown: SinusoidSpec,
    /// Per-channel pole locations (real parts; strictly negative) for the
    /// nominal state feedback.
    pub feedback_poles: Vec<Vec<f64>>,
}

impl Default for SatelliteSpec {
    fn default() -> Self {
        Self {
            m_true: 1.2,
            m_nominal: 1.0,
            k: 5.0,
            r_star: 1.5,
            theta_known: SinusoidSpec {
                amplitude: std::f64::consts::FRAC_PI_2,
                angular_frequency: std::f64::consts::PI,
            },
            theta_unknown: SinusoidSpec {
                amplitude: std::f64::consts::PI / 5.0,
                angular_frequency: 4.0 * std::f64::consts::PI,
            },
            feedback_poles: vec![vec![-1.0, -3.0], vec![-3.0, -5.0]],
        }
    }
}

impl SatelliteSpec {
    pub fn params(&self) -> SatelliteParams {
        SatelliteParams {
            m_true: self.m_true,
            m_nominal: self.m_nominal,
            k: self.k,
            r_star: self.r_star,
            omega_star: (self.k / self.r_star.powi(3)).sqrt(),
            theta_known: self.theta_known.as_fn(),
            theta_unknown: self.theta_unknown.as_fn(),
            c_theta_bound: self.theta_unknown.amplitude.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSpec {
    /// Per-channel filter gains `[a_1, ..., a_nu]`.
    pub gains: Vec<Vec<f64>>,
    pub tau: f64,
    /// Uniform threshold of the state-estimate saturation.
    pub phi_level: f64,
    /// Uniform threshold of the disturbance-signal saturation.
    pub big_phi_level: f64,
    pub sat_margin: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            gains: vec![vec![15.0, 8.0], vec![15.0, 8.0]],
            tau: 1e-3,
            phi_level: 25.0,
            big_phi_level: 100.0,
            sat_margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthChannelSpec {
    /// Real roots of the inner polynomial (length `nu_i - 1`).
    pub inner_roots: Vec<f64>,
    /// Direct inner coefficients `[a_2, ..., a_nu]`; overrides the roots.
    pub inner_coeffs: Option<Vec<f64>>,
    /// Leading gain to certify; searched over the bracket when absent.
    pub a1: Option<f64>,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
}

impl Default for SynthChannelSpec {
    fn default() -> Self {
        Self {
            inner_roots: vec![-8.0],
            inner_coeffs: None,
            a1: Some(15.0),
            bracket_lo: 1e-3,
            bracket_hi: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaturationBoxSpec {
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    pub l_z: f64,
    pub delta_w: f64,
    pub delta_1: f64,
    pub lipschitz_f: Option<f64>,
    pub points_per_dim: usize,
    pub safety_factor: f64,
    pub time_samples: Vec<f64>,
}

impl Default for SaturationBoxSpec {
    fn default() -> Self {
        Self {
            box_lo: vec![-1.0, -2.5, -0.5, -1.0],
            box_hi: vec![1.5, 2.5, 0.5, 1.0],
            l_z: 0.0,
            delta_w: 0.1,
            delta_1: 0.1,
            lipschitz_f: None,
            points_per_dim: 11,
            safety_factor: 1.25,
            time_samples: vec![0.0, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSpec {
    pub mu: f64,
    pub channels: Vec<SynthChannelSpec>,
    pub omega_min: f64,
    pub omega_max: f64,
    pub grid_points: usize,
    pub refine_passes: usize,
    pub a1_safety: f64,
    /// Saturation-level estimation request; skipped when absent.
    pub saturation: Option<SaturationBoxSpec>,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            mu: 0.001,
            channels: vec![SynthChannelSpec::default(), SynthChannelSpec::default()],
            omega_min: 1e-4,
            omega_max: 1e4,
            grid_points: 10_000,
            refine_passes: 3,
            a1_safety: 0.95,
            saturation: Some(SaturationBoxSpec::default()),
        }
    }
}

impl SynthesisSpec {
    pub fn grid(&self) -> FrequencyGrid {
        FrequencyGrid {
            omega_min: self.omega_min,
            omega_max: self.omega_max,
            points: self.grid_points,
            refine_passes: self.refine_passes,
        }
    }

    pub fn channel_designs(&self) -> Result<Vec<ChannelDesign>, CliError> {
        self.channels
            .iter()
            .enumerate()
            .map(|(i, ch)| {
                let inner = match &ch.inner_coeffs {
                    Some(c) => c.clone(),
                    None => {
                        let roots: Vec<Complex64> = ch
                            .inner_roots
                            .iter()
                            .map(|&r| Complex64::new(r, 0.0))
                            .collect();
                        dobsim::synthesis::inner_coeffs_from_roots(&roots, roots.len() + 1)
                            .map_err(|e| cfg_err(format!("synthesis channel {i}: {e}")))?
                    }
                };
                Ok(ChannelDesign {
                    inner,
                    a1: ch.a1,
                    bracket: (ch.bracket_lo, ch.bracket_hi),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub t_end: f64,
    /// Integration step; `tau / 20` when absent.
    pub step: Option<f64>,
    pub record_stride: usize,
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub zbar0: Vec<f64>,
    /// Observer initial state; zeros when absent.
    pub q0: Option<Vec<f64>>,
    /// Filter initial state; zeros when absent.
    pub p0: Option<Vec<f64>>,
    pub blow_up: f64,
    pub allow_coarse_step: bool,
    /// Tail window start as a fraction of `t_end`.
    pub t_ss_frac: f64,
    pub settle_threshold: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            t_end: 20.0,
            step: None,
            record_stride: 50,
            x0: vec![1.0, -2.0, 0.0, -0.8],
            z0: vec![],
            zbar0: vec![],
            q0: None,
            p0: None,
            blow_up: 1e8,
            allow_coarse_step: false,
            t_ss_frac: 0.7,
            settle_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Strictly descending timescales.
    pub taus: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            taus: vec![0.1, 0.01, 0.001],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuMode {
    /// The gain-bound audit is reported but does not fail the run.
    ReportOnly,
    /// The measured bound must not exceed the design `mu`.
    Enforce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FastCheckSpec {
    pub tau: f64,
    pub steps_per_tau: f64,
    pub t_end: f64,
    /// Measurement window in units of `tau`.
    pub window_lo: f64,
    pub window_hi: f64,
    pub min_order: f64,
}

impl Default for FastCheckSpec {
    fn default() -> Self {
        Self {
            tau: 1e-3,
            steps_per_tau: 40.0,
            t_end: 0.05,
            window_lo: 3.0,
            window_hi: 6.0,
            min_order: 1.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub quasi_steady_samples: usize,
    pub quasi_steady_tol: f64,
    pub collapse_tol: f64,
    pub sector_states: usize,
    pub sector_times: usize,
    pub sector_tol: f64,
    /// Sector probe amplitude per component.
    pub zeta_range: f64,
    pub gain_grid_points: usize,
    pub gain_time_points: usize,
    pub mu_mode: MuMode,
    /// Sampling box for the chain state.
    pub region_lo: Vec<f64>,
    pub region_hi: Vec<f64>,
    /// Times sampled uniformly in `[0, time_range]`.
    pub time_range: f64,
    pub fast: FastCheckSpec,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            quasi_steady_samples: 100,
            quasi_steady_tol: 1e-10,
            collapse_tol: 1e-12,
            sector_states: 100,
            sector_times: 100,
            sector_tol: 1e-12,
            zeta_range: 10.0,
            gain_grid_points: 5,
            gain_time_points: 9,
            mu_mode: MuMode::ReportOnly,
            region_lo: vec![-1.0, -2.0, -2.0, -2.0],
            region_hi: vec![2.0, 2.0, 2.0, 2.0],
            time_range: 0.5,
            fast: FastCheckSpec::default(),
        }
    }
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| cfg_err(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("spec serializes");
        out.push('\n');
        out
    }

    pub fn saturation_inputs_available(&self) -> bool {
        self.synthesis.saturation.is_some()
    }

    pub fn build_feedback_gain(&self) -> Result<nalgebra::DMatrix<f64>, CliError> {
        let nu = RelativeDegree::new(vec![2, 2]).map_err(|e| cfg_err(e.to_string()))?;
        let poles: Vec<Vec<Complex64>> = self
            .satellite
            .feedback_poles
            .iter()
            .map(|ch| ch.iter().map(|&r| Complex64::new(r, 0.0)).collect())
            .collect();
        state_feedback_from_poles(&nu, &poles).map_err(|e| cfg_err(format!("feedback_poles: {e}")))
    }

    pub fn build_plant(&self) -> Result<(NormalFormPlant, NominalModel, SatelliteParams), CliError> {
        if self.plant != "satellite" {
            return Err(cfg_err(format!(
                "unknown plant '{}'; the builtin plant is 'satellite'",
                self.plant
            )));
        }
        let params = self.satellite.params();
        let k_fb = self.build_feedback_gain()?;
        let (plant, nominal) =
            satellite_plant(&params, k_fb).map_err(|e| cfg_err(format!("satellite: {e}")))?;
        Ok((plant, nominal, params))
    }

    pub fn build_controller(&self, tau_override: Option<f64>) -> Result<ControllerParams, CliError> {
        let tau = tau_override.unwrap_or(self.controller.tau);
        let gains = GainVector::new(self.controller.gains.clone())
            .map_err(|e| cfg_err(format!("controller.gains: {e}")))?;
        let nu = RelativeDegree::new(
            self.controller.gains.iter().map(Vec::len).collect(),
        )
        .map_err(|e| cfg_err(e.to_string()))?;
        let phi = SmoothSaturation::uniform(
            self.controller.phi_level,
            nu.total(),
            self.controller.sat_margin,
        )
        .map_err(|e| cfg_err(format!("controller.phi_level: {e}")))?;
        let big_phi = SmoothSaturation::uniform(
            self.controller.big_phi_level,
            nu.channels(),
            self.controller.sat_margin,
        )
        .map_err(|e| cfg_err(format!("controller.big_phi_level: {e}")))?;
        ControllerParams::new(gains, nu, tau, phi, big_phi)
            .map_err(|e| cfg_err(format!("controller: {e}")))
    }

    pub fn build_sim_config(&self, tau_override: Option<f64>) -> Result<SimConfig, CliError> {
        let tau = tau_override.unwrap_or(self.controller.tau);
        let step = self.sim.step.unwrap_or(tau / 20.0);
        let chain = 4;
        if self.sim.x0.len() != chain {
            return Err(cfg_err(format!(
                "sim.x0 must have length {chain}, got {}",
                self.sim.x0.len()
            )));
        }
        if !self.sim.z0.is_empty() || !self.sim.zbar0.is_empty() {
            return Err(cfg_err("the satellite plant has no internal z state"));
        }
        let vec_of = |v: &Option<Vec<f64>>| match v {
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(chain),
        };
        Ok(SimConfig {
            t_end: self.sim.t_end,
            step,
            tau,
            record_stride: self.sim.record_stride,
            z0: DVector::zeros(0),
            x0: DVector::from_vec(self.sim.x0.clone()),
            zbar0: DVector::zeros(0),
            q0: vec_of(&self.sim.q0),
            p0: vec_of(&self.sim.p0),
            blow_up: self.sim.blow_up,
            allow_coarse_step: self.sim.allow_coarse_step,
        })
    }

    pub fn saturation_inputs(
        &self,
        params: &SatelliteParams,
    ) -> Result<Option<SaturationInputs>, CliError> {
        let Some(sat) = &self.synthesis.saturation else {
            return Ok(None);
        };
        let state_box = StateBox::new(
            DVector::from_vec(sat.box_lo.clone()),
            DVector::from_vec(sat.box_hi.clone()),
        )
        .map_err(|e| cfg_err(format!("synthesis.saturation: {e}")))?;
        let ext = params.c_theta_bound;
        let samples = vec![
            dobsim::plant::satellite::gain_with_theta_offset(params, -ext),
            dobsim::plant::satellite::gain_with_theta_offset(params, 0.0),
            dobsim::plant::satellite::gain_with_theta_offset(params, ext),
        ];
        let opts = SaturationEstimateOptions {
            points_per_dim: sat.points_per_dim,
            safety_factor: sat.safety_factor,
            time_samples: sat.time_samples.clone(),
        };
        Ok(Some(SaturationInputs {
            state_box,
            samples,
            opts,
            l_z: sat.l_z,
            delta_w: sat.delta_w,
            delta_1: sat.delta_1,
            lipschitz_f: sat.lipschitz_f,
        }))
    }
}
