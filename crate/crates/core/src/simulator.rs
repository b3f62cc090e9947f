//! Closed-loop simulation under piecewise-constant inputs, and a Newton
//! solver for the steady-state equation used as an independent oracle.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{seeded_rng, SeededRng};
use crate::model::{closed_loop_jacobian, closed_loop_rhs, connection_matrix_true, steady_state_residual, NetworkSystem};
use crate::ode::{Rk4, Rkf45};

/// `max_i |d k_i^{-1} / dy|` below this counts as a vanishing gradient.
pub const TOL_GRAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegratorKind {
    Rk4 { dt: f64 },
    Rkf45 { rtol: f64, atol: f64 },
}

impl Default for IntegratorKind {
    fn default() -> Self {
        IntegratorKind::Rkf45 {
            rtol: 1e-10,
            atol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Threshold on `||dx/dt||_inf`.
    pub deriv_tol: f64,
    /// Consecutive accepted steps below `deriv_tol` required.
    pub dwell: usize,
    /// Per-segment time cap, seconds.
    pub t_max: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            deriv_tol: 1e-9,
            dwell: 10,
            t_max: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SwitchMode {
    /// Sample once the derivative test passes.
    RunToConvergence,
    /// Sample exactly `switch_time` seconds after the input changes.
    FixedTime { switch_time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub integrator: IntegratorKind,
    pub convergence: Convergence,
    pub mode: SwitchMode,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            integrator: IntegratorKind::default(),
            convergence: Convergence::default(),
            mode: SwitchMode::RunToConvergence,
        }
    }
}

impl SimOptions {
    pub fn fixed_time(switch_time: f64) -> Self {
        SimOptions {
            mode: SwitchMode::FixedTime { switch_time },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self.integrator {
            IntegratorKind::Rk4 { dt } if !(dt > 0.0 && dt.is_finite()) => return bad("dt must be positive"),
            IntegratorKind::Rkf45 { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => {
                return bad("rtol and atol must be positive")
            }
            _ => {}
        }
        let c = &self.convergence;
        if !(c.deriv_tol > 0.0) || !(c.t_max > 0.0) || c.dwell == 0 {
            return bad("convergence needs deriv_tol > 0, dwell >= 1 and t_max > 0");
        }
        if let SwitchMode::FixedTime { switch_time } = self.mode {
            if !(switch_time > 0.0 && switch_time.is_finite()) {
                return bad("switch_time must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Bound on the Euclidean norm of the additive input disturbance.
    pub disturbance: Option<f64>,
    /// Standard deviation of Gaussian noise added to sampled outputs.
    pub measurement_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.disturbance.is_some_and(|d| !(d >= 0.0)) || !(self.measurement_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise bounds must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateSample {
    /// Sampled output, measurement noise included.
    pub y: DVector<f64>,
    /// Terminal state of the segment.
    pub x: DVector<f64>,
    pub t_elapsed: f64,
    pub converged: bool,
    /// `||steady_state_residual||_inf` at the noiseless sampled output.
    pub residual_norm: f64,
}

/// Independent streams derived from one user seed.
pub(crate) fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_MEASUREMENT: u64 = 1;
const STREAM_DISTURBANCE: u64 = 2;

pub(crate) fn add_measurement_noise(y: &mut DVector<f64>, sigma: f64, seed: u64, index: usize) {
    if sigma > 0.0 {
        let mut rng = seeded_rng(stream_seed(seed, STREAM_MEASUREMENT, index as u64));
        for v in y.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
}

/// Uniform sample from the Euclidean ball of radius `r`.
fn sample_ball(rng: &mut SeededRng, r: f64, out: &mut [f64]) {
    let n = out.len();
    let mut norm2 = 0.0;
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z;
        norm2 += z * z;
    }
    let u: f64 = rng.random();
    let scale = if norm2 > 0.0 {
        r * u.powf(1.0 / n as f64) / norm2.sqrt()
    } else {
        0.0
    };
    out.iter_mut().for_each(|v| *v *= scale);
}

enum Stepper {
    Rk4(Rk4, f64),
    Rkf45(Rkf45),
}

/// Owns the state of one simulated trajectory across input switches.
pub struct Simulator<'a> {
    sys: &'a NetworkSystem,
    opts: SimOptions,
    noise: NoiseSpec,
    stepper: Stepper,
    x: Vec<f64>,
    t: f64,
    h: f64,
    segment: usize,
    y_buf: Vec<f64>,
    k1: Vec<f64>,
    disturbance: Vec<f64>,
    trajectory: Option<(usize, Vec<(f64, Vec<f64>)>)>,
    steps: usize,
}

impl<'a> Simulator<'a> {
    pub fn new(sys: &'a NetworkSystem, x0: &DVector<f64>, opts: &SimOptions, noise: &NoiseSpec) -> Result<Self> {
        opts.validate()?;
        noise.validate()?;
        let n = sys.n();
        if x0.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: x0.len(),
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial state"));
        }
        let stepper = match opts.integrator {
            IntegratorKind::Rk4 { dt } => Stepper::Rk4(Rk4::new(n), dt),
            IntegratorKind::Rkf45 { rtol, atol } => Stepper::Rkf45(Rkf45::new(n, rtol, atol)),
        };
        Ok(Simulator {
            sys,
            opts: opts.clone(),
            noise: noise.clone(),
            stepper,
            x: x0.as_slice().to_vec(),
            t: 0.0,
            h: 1e-3,
            segment: 0,
            y_buf: vec![0.0; n],
            k1: vec![0.0; n],
            disturbance: vec![0.0; n],
            trajectory: None,
            steps: 0,
        })
    }

    /// Numbers the next segment; noise streams are keyed by segment index.
    pub fn with_segment_index(mut self, index: usize) -> Self {
        self.segment = index;
        self
    }

    /// Records `(t, x)` every `stride` accepted steps.
    pub fn record_trajectory(&mut self, stride: usize) {
        self.trajectory = Some((stride.max(1), Vec::new()));
    }

    pub fn trajectory(&self) -> &[(f64, Vec<f64>)] {
        self.trajectory.as_ref().map(|(_, t)| t.as_slice()).unwrap_or(&[])
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }

    /// Accepted integration steps so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// CSV `t,x_1..x_n,y_1..y_n` of the recorded trajectory.
    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let n = self.sys.n();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|k| format!("x_{k}")));
        header.extend((1..=n).map(|k| format!("y_{k}")));
        writeln!(f, "{}", header.join(","))?;
        for (t, x) in self.trajectory() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.extend(
                self.sys
                    .agents()
                    .iter()
                    .zip(x)
                    .map(|(a, &v)| a.h(v).to_string()),
            );
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }

    fn record(&mut self) {
        if let Some((stride, rows)) = &mut self.trajectory {
            if self.steps % *stride == 0 {
                rows.push((self.t, self.x.clone()));
            }
        }
    }

    /// Holds `w` constant until the segment ends and samples the output.
    pub fn run_segment(&mut self, w: &DVector<f64>) -> Result<SteadyStateSample> {
        let n = self.sys.n();
        if w.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: w.len(),
            });
        }
        let sys = self.sys;
        let w_s = w.as_slice();
        let bound = self.noise.disturbance.filter(|d| *d > 0.0);
        let mut dist_rng = bound.map(|_| {
            seeded_rng(stream_seed(self.noise.seed, STREAM_DISTURBANCE, self.segment as u64))
        });
        let conv = self.opts.convergence;
        let fixed_end = match self.opts.mode {
            SwitchMode::FixedTime { switch_time } => Some(switch_time),
            SwitchMode::RunToConvergence => None,
        };
        let horizon = fixed_end.unwrap_or(conv.t_max);
        let t_start = self.t;
        let mut elapsed = 0.0;
        let mut below = 0usize;
        let mut converged = false;

        let mut y_buf = std::mem::take(&mut self.y_buf);
        let mut k1 = std::mem::take(&mut self.k1);
        let mut dist = std::mem::take(&mut self.disturbance);

        if let (Some(rng), Some(b)) = (dist_rng.as_mut(), bound) {
            sample_ball(rng, b, &mut dist);
        }
        let use_d = bound.is_some();
        let mut f_buf = vec![0.0; n];
        sys.rhs_into(&self.x, w_s, use_d.then_some(&dist[..]), &mut y_buf, &mut k1);
        self.record();

        let result = loop {
            if fixed_end.is_none() && below >= conv.dwell {
                converged = true;
                break Ok(());
            }
            let remaining = horizon - elapsed;
            if remaining <= horizon * 1e-14 {
                break Ok(());
            }
            let d_opt = use_d.then_some(&dist[..]);
            let mut f = |x: &[f64], out: &mut [f64]| sys.rhs_into(x, w_s, d_opt, &mut f_buf, out);
            let accepted = match &mut self.stepper {
                Stepper::Rk4(rk, dt) => {
                    let h = dt.min(remaining);
                    rk.step_with_k1(&mut f, &mut self.x, &k1, h);
                    elapsed = if h == remaining { horizon } else { elapsed + h };
                    true
                }
                Stepper::Rkf45(rk) => {
                    let h = self.h.min(remaining);
                    let last = h == remaining;
                    let out = rk.try_step(&mut f, &mut self.x, &k1, h);
                    if out.accepted {
                        elapsed = if last { horizon } else { elapsed + h };
                        // a step shortened to hit the horizon says little about the next size
                        if !last || out.h_next > self.h {
                            self.h = out.h_next;
                        }
                    } else {
                        self.h = out.h_next;
                        if self.h < 1e-14 * horizon.max(1.0) {
                            break Err(Error::IntegrationFailure {
                                t: t_start + elapsed,
                                reason: "step size underflow".into(),
                            });
                        }
                    }
                    out.accepted
                }
            };
            if !accepted {
                continue;
            }
            self.t = t_start + elapsed;
            self.steps += 1;
            if self.x.iter().any(|v| !v.is_finite()) {
                break Err(Error::IntegrationFailure {
                    t: self.t,
                    reason: "non-finite state".into(),
                });
            }
            if let (Some(rng), Some(b)) = (dist_rng.as_mut(), bound) {
                sample_ball(rng, b, &mut dist);
            }
            sys.rhs_into(&self.x, w_s, use_d.then_some(&dist[..]), &mut y_buf, &mut k1);
            self.record();
            if k1.iter().all(|v| v.abs() < conv.deriv_tol) {
                below += 1;
            } else {
                below = 0;
            }
        };

        if fixed_end.is_some() {
            converged = k1.iter().all(|v| v.abs() < conv.deriv_tol);
        }
        self.y_buf = y_buf;
        self.k1 = k1;
        self.disturbance = dist;
        result?;

        let x = DVector::from_column_slice(&self.x);
        let y_clean = sys.output(&x);
        let residual_norm = steady_state_residual(sys, &y_clean, w)?.amax();
        let mut y = y_clean;
        add_measurement_noise(&mut y, self.noise.measurement_sigma, self.noise.seed, self.segment);
        self.segment += 1;
        Ok(SteadyStateSample {
            y,
            x,
            t_elapsed: elapsed,
            converged,
            residual_norm,
        })
    }
}

/// Runs one constant input from `x0` until the segment ends.
pub fn simulate_to_steady_state(
    sys: &NetworkSystem,
    w: &DVector<f64>,
    x0: &DVector<f64>,
    opts: &SimOptions,
    noise: &NoiseSpec,
) -> Result<SteadyStateSample> {
    Simulator::new(sys, x0, opts, noise)?.run_segment(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// One trajectory; each segment starts where the previous one ended.
    #[default]
    Sequential,
    /// Every input simulated independently from `x0`.
    Parallel,
}

/// Samples the steady state for each input of `schedule`. Results are in
/// schedule order in both modes.
pub fn run_probe_schedule(
    sys: &NetworkSystem,
    schedule: &[DVector<f64>],
    x0: &DVector<f64>,
    opts: &SimOptions,
    noise: &NoiseSpec,
    mode: ScheduleMode,
) -> Result<Vec<SteadyStateSample>> {
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("empty probe schedule".into()));
    }
    match mode {
        ScheduleMode::Sequential => {
            let mut sim = Simulator::new(sys, x0, opts, noise)?;
            schedule.iter().map(|w| sim.run_segment(w)).collect()
        }
        ScheduleMode::Parallel => schedule
            .par_iter()
            .enumerate()
            .map(|(k, w)| {
                Simulator::new(sys, x0, opts, noise)?
                    .with_segment_index(k)
                    .run_segment(w)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-12,
            max_iter: 100,
        }
    }
}

/// Solves `steady_state_map(y) = w` by damped Newton from `y_guess`.
///
/// The iteration runs on the state `x = h^{-1}(y)`, where the equation reads
/// `closed_loop_rhs(x, w) = 0`; saturated outputs stay representable there.
/// When every agent has vanishing `k^{-1}` gradient at the guess the
/// Jacobian is singular along `1`; the iteration then also enforces
/// `mean(y) = mean(y_guess)`, the quantity an integrator network conserves.
pub fn newton_steady_state(sys: &NetworkSystem, w: &DVector<f64>, y_guess: &DVector<f64>) -> Result<DVector<f64>> {
    newton_steady_state_with(sys, w, y_guess, &NewtonOptions::default())
}

pub fn newton_steady_state_with(
    sys: &NetworkSystem,
    w: &DVector<f64>,
    y_guess: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<DVector<f64>> {
    let n = sys.n();
    if w.len() != n || y_guess.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: if w.len() != n { w.len() } else { y_guess.len() },
        });
    }
    let agents = sys.agents();
    let pin = sys.known().k_inv_gradient(y_guess)?.amax() < TOL_GRAD;
    let target_mean = y_guess.mean();
    // residual with a floor for the rounding in its own evaluation
    let residual = |x: &DVector<f64>| -> Result<(DVector<f64>, f64, f64)> {
        let mut r = -closed_loop_rhs(sys, x, w)?;
        let drift = agents.iter().zip(x.iter()).map(|(a, &xi)| a.f(xi).abs()).fold(0.0, f64::max);
        let floor = 64.0 * f64::EPSILON * (drift + w.amax() + r.amax());
        let mut norm = r.amax();
        if pin {
            let shift = x.mean() - target_mean;
            r.add_scalar_mut(shift);
            norm = norm.max(shift.abs());
        }
        Ok((r, norm, floor))
    };

    let mut x = DVector::from_iterator(
        n,
        agents.iter().zip(y_guess.iter()).map(|(a, &y)| a.h_inv(y).unwrap_or(0.0)),
    );
    let (mut r, mut norm, mut floor) = residual(&x)?;
    let done = |norm: f64, floor: f64| norm < opts.tol.max(floor);
    for _ in 0..opts.max_iter {
        if done(norm, floor) {
            return Ok(sys.output(&x));
        }
        let mut jac = -closed_loop_jacobian(sys, &x)?;
        if pin {
            jac.add_scalar_mut(1.0 / n as f64);
        }
        let Some(step) = jac.lu().solve(&(-&r)) else {
            break;
        };
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let trial = &x + alpha * &step;
            if let Ok((rt, nt, ft)) = residual(&trial) {
                if nt < (1.0 - 1e-4 * alpha) * norm {
                    accepted = Some((trial, rt, nt, ft));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xt, rt, nt, ft)) = accepted else {
            break;
        };
        x = xt;
        r = rt;
        norm = nt;
        floor = ft;
    }
    if done(norm, floor) {
        return Ok(sys.output(&x));
    }
    Err(Error::NewtonDiverged {
        iterations: opts.max_iter,
        residual: norm,
        last: sys.output(&x),
    })
}

/// Configuration for [`disturbance_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    /// Bound on `||d(t)||_2`.
    pub delta_in: f64,
    pub trials: usize,
    pub seed: u64,
    /// Fixed RK4 step; the disturbance is constant over each step.
    pub dt: f64,
    /// Start of the observation window.
    pub transient: f64,
    /// End of the simulation.
    pub horizon: f64,
    /// Bounds whose exceedance fraction is reported.
    pub candidate_bounds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceReport {
    pub y_ss: DVector<f64>,
    /// `sup_t ||y(t) - y_ss||_2` over the window, one entry per trial.
    pub sup_deviation: Vec<f64>,
    pub max_sup_deviation: f64,
    /// Fraction of sampled window times the deviation exceeded each bound,
    /// pooled over trials.
    pub exceed_fraction: Vec<(f64, f64)>,
}

/// Empirical deviation from the noiseless steady state under a bounded
/// random input disturbance.
pub fn disturbance_experiment(
    sys: &NetworkSystem,
    w: &DVector<f64>,
    x0: &DVector<f64>,
    cfg: &DisturbanceConfig,
    opts: &SimOptions,
) -> Result<DisturbanceReport> {
    if !(cfg.delta_in >= 0.0) || cfg.trials == 0 {
        return Err(Error::InvalidArgument(
            "disturbance experiment needs delta_in >= 0 and at least one trial".into(),
        ));
    }
    if !(cfg.dt > 0.0 && cfg.transient >= 0.0 && cfg.horizon > cfg.transient) {
        return Err(Error::InvalidArgument(
            "disturbance experiment needs dt > 0 and horizon > transient >= 0".into(),
        ));
    }
    let clean_opts = SimOptions {
        mode: SwitchMode::RunToConvergence,
        ..opts.clone()
    };
    let base = simulate_to_steady_state(sys, w, x0, &clean_opts, &NoiseSpec::default())?;
    if !base.converged {
        return Err(Error::ProbeNotConverged {
            index: 0,
            t_max: opts.convergence.t_max,
        });
    }
    let y_ss = base.y;
    let x_ss = base.x;
    let run_opts = SimOptions {
        integrator: IntegratorKind::Rk4 { dt: cfg.dt },
        mode: SwitchMode::FixedTime {
            switch_time: cfg.dt,
        },
        ..opts.clone()
    };
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let first = (cfg.transient / cfg.dt).ceil() as usize;

    let traces: Vec<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<f64>> {
            let noise = NoiseSpec {
                disturbance: Some(cfg.delta_in),
                measurement_sigma: 0.0,
                seed: stream_seed(cfg.seed, 3, trial as u64),
            };
            // one RK4 step per segment keeps d(t) piecewise constant on step
            // boundaries with a fresh draw each step
            let mut sim = Simulator::new(sys, &x_ss, &run_opts, &noise)?;
            let mut devs = Vec::with_capacity(steps.saturating_sub(first) + 1);
            for k in 1..=steps {
                let sample = sim.run_segment(w)?;
                if k >= first {
                    devs.push((&sample.y - &y_ss).norm());
                }
            }
            Ok(devs)
        })
        .collect::<Result<_>>()?;

    let sup_deviation: Vec<f64> = traces
        .iter()
        .map(|t| t.iter().copied().fold(0.0, f64::max))
        .collect();
    let max_sup_deviation = sup_deviation.iter().copied().fold(0.0, f64::max);
    let total: usize = traces.iter().map(Vec::len).sum();
    let exceed_fraction = cfg
        .candidate_bounds
        .iter()
        .map(|&b| {
            let count = traces.iter().flatten().filter(|&&d| d > b).count();
            (b, count as f64 / total.max(1) as f64)
        })
        .collect();
    Ok(DisturbanceReport {
        y_ss,
        sup_deviation,
        max_sup_deviation,
        exceed_fraction,
    })
}

/// Steady state of an LTI network with linear couplings by one dense solve of
/// `(A + B E N G E^T) y = w`. Oracle for tests.
pub fn linear_steady_state(sys: &NetworkSystem, w: &DVector<f64>) -> Result<DVector<f64>> {
    let m: DMatrix<f64> = connection_matrix_true(sys, &DVector::zeros(sys.n()))?;
    m.lu()
        .solve(w)
        .ok_or_else(|| Error::InvalidArgument("singular steady-state map".into()))
}
