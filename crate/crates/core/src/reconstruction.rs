//! Probe design, probe collection and recovery of the connection matrix,
//! graph and coupling weights from steady-state responses.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::graph::{laplacian, seeded_rng, WeightedGraph};
use crate::model::{KnownRelations, NetworkSystem};
use crate::simulator::{
    add_measurement_noise, newton_steady_state, stream_seed, NoiseSpec, ScheduleMode,
    SimOptions, Simulator, SwitchMode, TOL_GRAD,
};
use crate::DenseMatrix;

/// Largest accepted condition number of the probe response matrix.
pub const MAX_COND: f64 = 1e12;
/// `d_ij` below this leaves the weight of a detected edge undetermined.
pub const TOL_DERIV: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `grad k^{-1}(y0) = 0`; probes are differences `kappa (e_i - e_n)`.
    Integrator,
    Generic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePlan {
    pub branch: Branch,
    pub kappa: f64,
    pub delta_ws: Vec<DVector<f64>>,
    pub j: DenseMatrix,
    pub q: DenseMatrix,
}

impl ProbePlan {
    pub fn n(&self) -> usize {
        self.j.nrows()
    }

    /// Number of perturbed runs the plan needs.
    pub fn num_runs(&self) -> usize {
        self.delta_ws.len()
    }
}

/// Chooses the branch from the gradient of `k^{-1}` at `y0` and lays out
/// the perturbation inputs.
pub fn design_probes(y0: &DVector<f64>, known: &KnownRelations, kappa: f64) -> Result<ProbePlan> {
    let n = y0.len();
    if n < 2 {
        return Err(Error::InvalidArgument("probing needs at least two agents".into()));
    }
    if n != known.n() {
        return Err(Error::Dimension {
            expected: known.n(),
            got: n,
        });
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    let grad = known.k_inv_gradient(y0)?;
    let ones = DMatrix::from_element(n, n, 1.0 / n as f64);
    if grad.amax() < TOL_GRAD {
        let delta_ws = (0..n - 1)
            .map(|i| {
                let mut v = DVector::zeros(n);
                v[i] = kappa;
                v[n - 1] = -kappa;
                v
            })
            .collect();
        Ok(ProbePlan {
            branch: Branch::Integrator,
            kappa,
            delta_ws,
            j: DMatrix::identity(n, n) - &ones,
            q: ones,
        })
    } else {
        let delta_ws = (0..n)
            .map(|i| {
                let mut v = DVector::zeros(n);
                v[i] = kappa;
                v
            })
            .collect();
        Ok(ProbePlan {
            branch: Branch::Generic,
            kappa,
            delta_ws,
            j: DMatrix::identity(n, n),
            q: DMatrix::zeros(n, n),
        })
    }
}

/// One steady-state measurement returned by a probe target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub y: DVector<f64>,
    pub converged: bool,
    pub t_elapsed: f64,
}

/// The network as seen by the identification procedure: constant inputs go
/// in, steady-state outputs come out, and only the agent and coupling
/// relations are known.
pub trait ProbeTarget {
    fn known(&self) -> &KnownRelations;

    /// Applies the inputs in order and returns one sample per input.
    /// `first_index` numbers the first input within the whole experiment.
    fn run(&mut self, inputs: &[DVector<f64>], first_index: usize) -> Result<Vec<ProbeSample>>;

    /// Whether a non-converged sample is an error.
    fn requires_convergence(&self) -> bool {
        true
    }
}

/// Probes a simulated network by integrating the closed loop.
pub struct SimulatedTarget<'a> {
    sys: &'a NetworkSystem,
    opts: SimOptions,
    noise: NoiseSpec,
    mode: ScheduleMode,
    x0: DVector<f64>,
    x: DVector<f64>,
}

impl<'a> SimulatedTarget<'a> {
    pub fn new(sys: &'a NetworkSystem, opts: SimOptions, noise: NoiseSpec, mode: ScheduleMode) -> Result<Self> {
        opts.validate()?;
        noise.validate()?;
        let x0 = DVector::zeros(sys.n());
        Ok(SimulatedTarget {
            sys,
            opts,
            noise,
            mode,
            x: x0.clone(),
            x0,
        })
    }

    pub fn with_initial_state(mut self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.sys.n() {
            return Err(Error::Dimension {
                expected: self.sys.n(),
                got: x0.len(),
            });
        }
        self.x = x0.clone();
        self.x0 = x0;
        Ok(self)
    }
}

impl ProbeTarget for SimulatedTarget<'_> {
    fn known(&self) -> &KnownRelations {
        self.sys.known()
    }

    fn run(&mut self, inputs: &[DVector<f64>], first_index: usize) -> Result<Vec<ProbeSample>> {
        let samples = match self.mode {
            ScheduleMode::Sequential => {
                let mut sim =
                    Simulator::new(self.sys, &self.x, &self.opts, &self.noise)?.with_segment_index(first_index);
                let out: Vec<_> = inputs.iter().map(|w| sim.run_segment(w)).collect::<Result<_>>()?;
                self.x = sim.state();
                out
            }
            ScheduleMode::Parallel => inputs
                .par_iter()
                .enumerate()
                .map(|(k, w)| {
                    Simulator::new(self.sys, &self.x0, &self.opts, &self.noise)?
                        .with_segment_index(first_index + k)
                        .run_segment(w)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(samples
            .into_iter()
            .map(|s| ProbeSample {
                y: s.y,
                converged: s.converged,
                t_elapsed: s.t_elapsed,
            })
            .collect())
    }

    fn requires_convergence(&self) -> bool {
        matches!(self.opts.mode, SwitchMode::RunToConvergence)
    }
}

/// Probes a network by solving the steady-state equation directly.
pub struct ExactTarget<'a> {
    sys: &'a NetworkSystem,
    measurement_sigma: f64,
    seed: u64,
    y_last: DVector<f64>,
}

impl<'a> ExactTarget<'a> {
    pub fn new(sys: &'a NetworkSystem) -> Self {
        ExactTarget {
            sys,
            measurement_sigma: 0.0,
            seed: 0,
            y_last: sys.output(&DVector::zeros(sys.n())),
        }
    }

    /// Adds Gaussian noise of standard deviation `sigma` to every sample.
    pub fn with_measurement_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.measurement_sigma = sigma;
        self.seed = seed;
        self
    }
}

impl ProbeTarget for ExactTarget<'_> {
    fn known(&self) -> &KnownRelations {
        self.sys.known()
    }

    fn run(&mut self, inputs: &[DVector<f64>], first_index: usize) -> Result<Vec<ProbeSample>> {
        let mut out = Vec::with_capacity(inputs.len());
        for (k, w) in inputs.iter().enumerate() {
            let y = newton_steady_state(self.sys, w, &self.y_last)?;
            self.y_last = y.clone();
            let mut y = y;
            add_measurement_noise(&mut y, self.measurement_sigma, self.seed, first_index + k);
            out.push(ProbeSample {
                y,
                converged: true,
                t_elapsed: 0.0,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub dw: DVector<f64>,
    pub dy: DVector<f64>,
    /// Appended without a run (the `kappa 1` pair of the integrator branch).
    pub synthetic: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    pub w0: DVector<f64>,
    pub y0: DVector<f64>,
    pub kappa: f64,
    pub branch: Branch,
    pub records: Vec<ProbeRecord>,
    pub baseline_converged: bool,
    pub seed: u64,
    pub sim_time: f64,
}

impl ProbeLog {
    pub fn n(&self) -> usize {
        self.y0.len()
    }

    pub fn delta_w(&self) -> DenseMatrix {
        DMatrix::from_columns(&self.records.iter().map(|r| r.dw.clone()).collect::<Vec<_>>())
    }

    pub fn delta_y(&self) -> DenseMatrix {
        DMatrix::from_columns(&self.records.iter().map(|r| r.dy.clone()).collect::<Vec<_>>())
    }

    pub fn j(&self) -> DenseMatrix {
        let n = self.n();
        match self.branch {
            Branch::Generic => DMatrix::identity(n, n),
            Branch::Integrator => DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64),
        }
    }

    pub fn q(&self) -> DenseMatrix {
        let n = self.n();
        match self.branch {
            Branch::Generic => DMatrix::zeros(n, n),
            Branch::Integrator => DMatrix::from_element(n, n, 1.0 / n as f64),
        }
    }

    /// CSV `probe_index,dw_1..dw_n,dy_1..dy_n`.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let mut s = String::from("probe_index");
        for k in 1..=n {
            s.push_str(&format!(",dw_{k}"));
        }
        for k in 1..=n {
            s.push_str(&format!(",dy_{k}"));
        }
        s.push('\n');
        for (idx, r) in self.records.iter().enumerate() {
            s.push_str(&idx.to_string());
            for v in r.dw.iter().chain(r.dy.iter()) {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }

    /// Header data accompanying the CSV.
    pub fn header_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n(),
            "branch": self.branch,
            "kappa": self.kappa,
            "seed": self.seed,
            "w0": self.w0.as_slice(),
            "y0": self.y0.as_slice(),
            "baseline_converged": self.baseline_converged,
            "converged": self.records.iter().map(|r| r.converged).collect::<Vec<_>>(),
            "synthetic": self.records.iter().map(|r| r.synthetic).collect::<Vec<_>>(),
            "sim_time": self.sim_time,
        })
    }

    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        let mut f = std::fs::File::create(json_path)?;
        serde_json::to_writer_pretty(&mut f, &self.header_json())?;
        writeln!(f)?;
        Ok(())
    }
}

/// Runs the perturbed inputs of `plan` around the baseline `(w0, y0)`.
pub fn collect_probes(
    target: &mut dyn ProbeTarget,
    w0: &DVector<f64>,
    y0: &DVector<f64>,
    plan: &ProbePlan,
) -> Result<ProbeLog> {
    let n = plan.n();
    if w0.len() != n || y0.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: w0.len().min(y0.len()),
        });
    }
    let inputs: Vec<DVector<f64>> = plan.delta_ws.iter().map(|dw| w0 + dw).collect();
    let samples = target.run(&inputs, 1)?;
    let strict = target.requires_convergence();
    let mut records = Vec::with_capacity(n);
    let mut sim_time = 0.0;
    for (k, (dw, s)) in plan.delta_ws.iter().zip(samples).enumerate() {
        if strict && !s.converged {
            return Err(Error::ProbeNotConverged {
                index: k + 1,
                t_max: s.t_elapsed,
            });
        }
        sim_time += s.t_elapsed;
        records.push(ProbeRecord {
            dw: dw.clone(),
            dy: &plan.j * (s.y - y0),
            synthetic: false,
            converged: s.converged,
        });
    }
    if plan.branch == Branch::Integrator {
        let one = DVector::from_element(n, plan.kappa);
        records.push(ProbeRecord {
            dw: one.clone(),
            dy: one,
            synthetic: true,
            converged: true,
        });
    }
    Ok(ProbeLog {
        w0: w0.clone(),
        y0: y0.clone(),
        kappa: plan.kappa,
        branch: plan.branch,
        records,
        baseline_converged: true,
        seed: 0,
        sim_time,
    })
}

/// `delta_W^{-1} delta_Y` by row operations, with the number of scalar
/// multiply-adds performed.
pub fn delta_w_inverse_apply_counted(dy: &DenseMatrix, branch: Branch, kappa: f64) -> (DenseMatrix, usize) {
    let n = dy.nrows();
    let mut out = dy.clone();
    let mut ops = 0;
    let inv_k = 1.0 / kappa;
    match branch {
        Branch::Generic => {
            out.iter_mut().for_each(|v| *v *= inv_k);
            ops += n * dy.ncols();
        }
        Branch::Integrator => {
            let cols = dy.ncols();
            for c in 0..cols {
                // R_n += R_i; R_n /= n; R_i -= R_n, with 1/kappa folded in
                let mut last = out[(n - 1, c)];
                for i in 0..n - 1 {
                    last += out[(i, c)];
                }
                ops += n - 1;
                last *= inv_k / n as f64;
                ops += 1;
                for i in 0..n - 1 {
                    out[(i, c)] = out[(i, c)] * inv_k - last;
                }
                ops += n - 1;
                out[(n - 1, c)] = last;
            }
        }
    }
    (out, ops)
}

/// `delta_W^{-1} delta_Y` in `O(n^2)` without forming an inverse.
pub fn delta_w_inverse_apply(dy: &DenseMatrix, branch: Branch, kappa: f64) -> DenseMatrix {
    delta_w_inverse_apply_counted(dy, branch, kappa).0
}

/// `delta_Y delta_W^{-1}` by the matching column operations, with the count
/// of scalar multiply-adds. This is the product equal to `(M')^{-1}`.
pub fn delta_w_inverse_apply_right_counted(dy: &DenseMatrix, branch: Branch, kappa: f64) -> (DenseMatrix, usize) {
    let n = dy.ncols();
    let rows = dy.nrows();
    let mut out = dy.clone();
    let mut ops = 0;
    let inv_k = 1.0 / kappa;
    match branch {
        Branch::Generic => {
            out.iter_mut().for_each(|v| *v *= inv_k);
            ops += rows * n;
        }
        Branch::Integrator => {
            // Y F^{-1} = Y (I - e_n e_n^T) + (1/n) (Y xi) 1^T
            for r in 0..rows {
                let mut s = out[(r, n - 1)];
                for c in 0..n - 1 {
                    s -= out[(r, c)];
                }
                ops += n - 1;
                s *= inv_k / n as f64;
                ops += 1;
                for c in 0..n - 1 {
                    out[(r, c)] = out[(r, c)] * inv_k + s;
                }
                ops += n - 1;
                out[(r, n - 1)] = s;
            }
        }
    }
    (out, ops)
}

pub fn delta_w_inverse_apply_right(dy: &DenseMatrix, branch: Branch, kappa: f64) -> DenseMatrix {
    delta_w_inverse_apply_right_counted(dy, branch, kappa).0
}

/// `F^{-1}` in closed form, `F` having columns `e_i - e_n` and `1`.
pub fn f_inverse_closed_form(n: usize) -> DenseMatrix {
    let mut m = DMatrix::identity(n, n);
    m[(n - 1, n - 1)] = 0.0;
    for i in 0..n {
        let xi = if i == n - 1 { 1.0 } else { -1.0 };
        for j in 0..n {
            m[(i, j)] += xi / n as f64;
        }
    }
    m
}

/// `F` with columns `e_i - e_n` for `i < n` and `1`.
pub fn f_matrix(n: usize) -> DenseMatrix {
    let mut f = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        f[(i, i)] = 1.0;
        f[(n - 1, i)] = -1.0;
    }
    f.column_mut(n - 1).fill(1.0);
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatePath {
    /// Symmetrized inverse through a Cholesky factorization.
    Fast,
    /// `delta_W delta_Y^{-1}` through LU.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    /// Fast path, falling back to the direct solve.
    #[default]
    Auto,
    FastOnly,
    DirectOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub m: DenseMatrix,
    pub path: EstimatePath,
    pub cond_delta_y: f64,
    /// Why the fast path was not taken, if it was not.
    pub fallback_reason: Option<String>,
}

fn condition_number(a: &DenseMatrix) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn estimate_connection_matrix(log: &ProbeLog, gains: &[f64]) -> Result<DenseMatrix> {
    Ok(estimate_connection_matrix_with(log, gains, EstimateMethod::Auto)?.m)
}

/// Recovers `M = M' - Q` from the probe log, where `M' delta_Y = delta_W`.
///
/// The fast path inverts the symmetric part of `(M')^{-1} B`, which is the
/// inverse of a symmetric matrix whenever `M' = B S` with `S` symmetric;
/// with unit gains this is the plain symmetrization of `(M')^{-1}`.
pub fn estimate_connection_matrix_with(log: &ProbeLog, gains: &[f64], method: EstimateMethod) -> Result<Estimate> {
    let n = log.n();
    if log.records.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: log.records.len(),
        });
    }
    if gains.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: gains.len(),
        });
    }
    let dy = log.delta_y();
    if dy.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe responses"));
    }
    let cond = condition_number(&dy);
    if !(cond < MAX_COND) {
        return Err(Error::IllConditioned { cond });
    }
    let q = log.q();

    let uniform_gains = gains.iter().all(|&b| b == gains[0]);
    let fast = || -> std::result::Result<DenseMatrix, String> {
        if log.branch == Branch::Integrator && !uniform_gains {
            return Err("integrator branch with unequal gains".into());
        }
        let mut inv = delta_w_inverse_apply_right(&dy, log.branch, log.kappa);
        if log.branch == Branch::Generic {
            for (c, &b) in gains.iter().enumerate() {
                inv.column_mut(c).scale_mut(b);
            }
        }
        let sym = (&inv + inv.transpose()) * 0.5;
        let chol = Cholesky::new(sym).ok_or_else(|| "symmetrized inverse is not positive definite".to_string())?;
        let mut m_prime = chol.inverse();
        if log.branch == Branch::Generic {
            for (r, &b) in gains.iter().enumerate() {
                m_prime.row_mut(r).scale_mut(b);
            }
        }
        Ok(m_prime)
    };
    let direct = || -> Result<DenseMatrix> {
        // M' = dW dY^{-1}  <=>  dY^T M'^T = dW^T
        let dw = log.delta_w();
        let sol = dy
            .transpose()
            .lu()
            .solve(&dw.transpose())
            .ok_or(Error::IllConditioned { cond })?;
        Ok(sol.transpose())
    };

    let (m_prime, path, reason) = match method {
        EstimateMethod::DirectOnly => (direct()?, EstimatePath::Direct, None),
        EstimateMethod::FastOnly => match fast() {
            Ok(m) => (m, EstimatePath::Fast, None),
            Err(r) => return Err(Error::InvalidArgument(format!("fast path unavailable: {r}"))),
        },
        EstimateMethod::Auto => match fast() {
            Ok(m) => (m, EstimatePath::Fast, None),
            Err(r) => {
                log::warn!("fast path unavailable ({r}); using the direct solve");
                (direct()?, EstimatePath::Direct, Some(r))
            }
        },
    };
    let m = m_prime - q;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("estimated connection matrix"));
    }
    Ok(Estimate {
        m,
        path,
        cond_delta_y: cond,
        fallback_reason: reason,
    })
}

/// A detected edge with its weight estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredEdge {
    pub i: usize,
    pub j: usize,
    /// `None` when `d_ij` vanishes or the two orientations disagree in sign.
    pub weight: Option<f64>,
    pub d: f64,
    pub m_ij: f64,
    pub m_ji: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub edges: Vec<RecoveredEdge>,
    /// Edges with a determined weight.
    pub graph: WeightedGraph,
}

impl Extraction {
    pub fn edge_set(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.i, e.j)).collect()
    }

    pub fn indeterminate(&self) -> Vec<(usize, usize)> {
        self.edges.iter().filter(|e| e.weight.is_none()).map(|e| (e.i, e.j)).collect()
    }
}

/// Thresholds `M` and converts detected entries into coupling weights.
///
/// A pair is an edge when either orientation satisfies `M_ij < -epsilon`.
/// The weight averages `-M_ij / (b_i d_ij)` and `-M_ji / (b_j d_ij)`, with
/// `d_ij = g'_ij(y0_i - y0_j)` at `i < j`.
pub fn extract_graph(m: &DenseMatrix, epsilon: f64, y0: &DVector<f64>, known: &KnownRelations) -> Result<Extraction> {
    let n = m.nrows();
    if m.ncols() != n || y0.len() != n || known.n() != n {
        return Err(Error::Dimension {
            expected: known.n(),
            got: n,
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let gains = known.gains();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (mij, mji) = (m[(i, j)], m[(j, i)]);
            if mij.min(mji) >= -epsilon {
                continue;
            }
            let d = known.couplings.get(i, j).g_deriv(y0[i] - y0[j]);
            let weight = if d < TOL_DERIV {
                None
            } else {
                let p = 0.5 * (-mij / (gains[i] * d) - mji / (gains[j] * d));
                (p > 0.0 && p.is_finite()).then_some(p)
            };
            edges.push(RecoveredEdge {
                i,
                j,
                weight,
                d,
                m_ij: mij,
                m_ji: mji,
            });
        }
    }
    let graph = WeightedGraph::new(n, edges.iter().filter_map(|e| e.weight.map(|w| (e.i, e.j, w))))?;
    Ok(Extraction { edges, graph })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub kappa: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Fresh baselines tried after a domain error.
    pub max_redraws: usize,
    pub method: EstimateMethod,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            kappa: 1e-3,
            epsilon: 0.01,
            seed: 0,
            max_redraws: 8,
            method: EstimateMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cond_delta_y: f64,
    /// `sqrt(n) kappa (1 + max(nu d) lambda_max)` from recovered quantities.
    pub error_scale: f64,
    pub path: EstimatePath,
    pub fallback_reason: Option<String>,
    pub indeterminate: Vec<(usize, usize)>,
    pub redraws: usize,
    pub runtime_sec: f64,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub m: DenseMatrix,
    pub graph: WeightedGraph,
    pub edges: Vec<RecoveredEdge>,
    pub epsilon: f64,
    /// `d_ij` for every detected pair.
    pub d: BTreeMap<(usize, usize), f64>,
    pub log: ProbeLog,
    pub diagnostics: Diagnostics,
}

impl ReconstructionResult {
    /// Every detected pair, including those with undetermined weight.
    pub fn edge_set(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.i, e.j)).collect()
    }
}

fn draw_baseline(n: usize, seed: u64, attempt: usize, known: &KnownRelations) -> DVector<f64> {
    let mut rng = seeded_rng(stream_seed(seed, 10, attempt as u64));
    let mut w = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    if known.agents.iter().all(|a| a.is_integrator()) {
        // without a drift term the network only settles when sum(w_i / b_i) = 0
        let c = w.iter().zip(&known.agents).map(|(wi, a)| wi / a.gain).sum::<f64>() / n as f64;
        for (wi, a) in w.iter_mut().zip(&known.agents) {
            *wi -= c * a.gain;
        }
    }
    w
}

/// Largest eigenvalue of the unweighted Laplacian of `g`.
pub fn laplacian_lambda_max(g: &WeightedGraph) -> f64 {
    if g.num_edges() == 0 {
        return 0.0;
    }
    let unit = WeightedGraph::new(g.n(), g.edges().iter().map(|e| (e.i, e.j, 1.0))).expect("valid edges");
    laplacian(&unit).symmetric_eigenvalues().max()
}

/// Full identification: baseline, probe design, collection, estimation of
/// `M` and extraction of the graph. Only the known relations of the target
/// are consulted.
pub fn reconstruct(target: &mut dyn ProbeTarget, cfg: &ReconstructConfig) -> Result<ReconstructionResult> {
    let start = Instant::now();
    let known = target.known().clone();
    let n = known.n();
    if !(cfg.kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {}", cfg.kappa)).at(Stage::Design));
    }

    let mut attempt = 0;
    let (w0, y0, baseline_converged, plan) = loop {
        let w0 = draw_baseline(n, cfg.seed, attempt, &known);
        let outcome = target
            .run(std::slice::from_ref(&w0), 0)
            .map_err(|e| e.at(Stage::Baseline))
            .and_then(|mut s| {
                let s = s.pop().expect("one sample");
                if target.requires_convergence() && !s.converged {
                    return Err(Error::ProbeNotConverged {
                        index: 0,
                        t_max: s.t_elapsed,
                    }
                    .at(Stage::Baseline));
                }
                let plan = design_probes(&s.y, &known, cfg.kappa).map_err(|e| e.at(Stage::Design))?;
                Ok((s, plan))
            });
        match outcome {
            Ok((s, plan)) => break (w0, s.y, s.converged, plan),
            Err(e) if matches!(e.root(), Error::Domain(_)) && attempt < cfg.max_redraws => {
                log::warn!("baseline rejected ({e}); drawing a new w0");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    if plan.branch == Branch::Integrator && known.agents.iter().any(|a| a.gain != known.agents[0].gain) {
        return Err(Error::InvalidArgument(
            "difference probes need equal input gains when grad k^{-1}(y0) vanishes".into(),
        )
        .at(Stage::Design));
    }

    let mut log = collect_probes(target, &w0, &y0, &plan).map_err(|e| e.at(Stage::Collect))?;
    log.baseline_converged = baseline_converged;
    log.seed = cfg.seed;

    let gains = known.gains();
    let est = estimate_connection_matrix_with(&log, &gains, cfg.method).map_err(|e| e.at(Stage::Estimate))?;
    let ext = extract_graph(&est.m, cfg.epsilon, &y0, &known).map_err(|e| e.at(Stage::Extract))?;

    let max_nu_d = ext
        .edges
        .iter()
        .filter_map(|e| e.weight.map(|w| w * e.d))
        .fold(0.0, f64::max);
    let error_scale = (n as f64).sqrt() * cfg.kappa * (1.0 + max_nu_d * laplacian_lambda_max(&ext.graph));
    let d = ext.edges.iter().map(|e| ((e.i, e.j), e.d)).collect();
    let indeterminate = ext.indeterminate();
    Ok(ReconstructionResult {
        m: est.m,
        graph: ext.graph,
        edges: ext.edges,
        epsilon: cfg.epsilon,
        d,
        log,
        diagnostics: Diagnostics {
            cond_delta_y: est.cond_delta_y,
            error_scale,
            path: est.path,
            fallback_reason: est.fallback_reason,
            indeterminate,
            redraws: attempt,
            runtime_sec: start.elapsed().as_secs_f64(),
        },
    })
}

/// Numerical rank of the matrix whose columns are `samples`: the number of
/// singular values at least `tol` times the largest.
pub fn estimate_reachable_rank(samples: &[DVector<f64>], tol: f64) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let m = DMatrix::from_columns(samples);
    let sv = m.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s >= tol * max).count())
}

/// Steady-state responses to `count` random inputs supported on `nodes`,
/// each of Euclidean norm `amplitude`, measured relative to the response to
/// `w0`.
pub fn restricted_probe_samples(
    target: &mut dyn ProbeTarget,
    w0: &DVector<f64>,
    nodes: &[usize],
    amplitude: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let n = w0.len();
    if nodes.is_empty() || nodes.iter().any(|&k| k >= n) {
        return Err(Error::InvalidArgument("probe nodes must be nonempty and in range".into()));
    }
    if !(amplitude > 0.0) || count == 0 {
        return Err(Error::InvalidArgument("need a positive amplitude and at least one probe".into()));
    }
    let mut rng = seeded_rng(stream_seed(seed, 11, 0));
    let mut inputs = vec![w0.clone()];
    for _ in 0..count {
        let mut dw = DVector::<f64>::zeros(n);
        for &k in nodes {
            dw[k] = StandardNormal.sample(&mut rng);
        }
        let norm = dw.norm();
        inputs.push(w0 + dw * (amplitude / norm));
    }
    let samples = target.run(&inputs, 0)?;
    let y0 = samples[0].y.clone();
    Ok(samples[1..].iter().map(|s| &s.y - &y0).collect())
}
