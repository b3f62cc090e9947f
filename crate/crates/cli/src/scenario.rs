//! Scenario files: a TOML description of the hidden network, the agents,
//! the couplings and the identification settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use netprobe::graph::{log_uniform, random_graph, seeded_rng};
use netprobe::model::{
    integrator_agent, lti_agent, neural_agent, polynomial_agent, AgentModel, Couplings, EdgeCoupling,
};
use netprobe::simulator::{Convergence, IntegratorKind, NoiseSpec, ScheduleMode, SimOptions, SwitchMode};
use netprobe::{NetworkSystem, WeightedGraph};
use serde::{Deserialize, Serialize};

pub const CASESTUDY_LTI: &str = include_str!("../scenarios/casestudy_lti.toml");
pub const CASESTUDY_NEURAL: &str = include_str!("../scenarios/casestudy_neural.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub graph: GraphSpec,
    pub agents: AgentSpec,
    #[serde(default)]
    pub coupling: CouplingSpec,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub probing: Option<ProbingSpec>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub n: usize,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default = "default_weight_range")]
    pub weight_range: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    /// Explicit `[i, j, weight]` triples; replaces the random draw.
    #[serde(default)]
    pub edges: Option<Vec<(usize, usize, f64)>>,
}

fn default_weight_range() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum AgentKind {
    Lti,
    Integrator,
    Neural,
    Polynomial,
}

/// Parameters are drawn log-uniformly from the ranges, per agent, in node
/// order. Ranges that do not apply to `kind` are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub kind: AgentKind,
    #[serde(default)]
    pub a_range: Option<[f64; 2]>,
    #[serde(default)]
    pub tau_range: Option<[f64; 2]>,
    #[serde(default)]
    pub gain_range: Option<[f64; 2]>,
    #[serde(default)]
    pub c1_range: Option<[f64; 2]>,
    #[serde(default)]
    pub c3_range: Option<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum CouplingKind {
    Identity,
    Linear,
    Tanh,
    Cubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub kind: CouplingKind,
    #[serde(default)]
    pub gain_range: Option<[f64; 2]>,
    #[serde(default)]
    pub c1_range: Option<[f64; 2]>,
    #[serde(default)]
    pub c3_range: Option<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CouplingSpec {
    fn default() -> Self {
        CouplingSpec {
            kind: CouplingKind::Identity,
            gain_range: None,
            c1_range: None,
            c3_range: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Integrate the closed loop.
    Simulate,
    /// Solve the steady-state equation by Newton's method.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    Converge,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorName {
    Rkf45,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Seed of the baseline input `w0`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_source")]
    pub source: Source,
    #[serde(default)]
    pub parallel_probes: bool,
    #[serde(default = "default_switch")]
    pub switch: Switch,
    #[serde(default)]
    pub switch_time: Option<f64>,
    #[serde(default = "default_integrator")]
    pub integrator: IntegratorName,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_deriv_tol")]
    pub deriv_tol: f64,
    #[serde(default = "default_dwell")]
    pub dwell: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_kappa() -> f64 {
    1e-3
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_source() -> Source {
    Source::Simulate
}
fn default_switch() -> Switch {
    Switch::Converge
}
fn default_integrator() -> IntegratorName {
    IntegratorName::Rkf45
}
fn default_rtol() -> f64 {
    1e-10
}
fn default_atol() -> f64 {
    1e-12
}
fn default_deriv_tol() -> f64 {
    1e-9
}
fn default_dwell() -> usize {
    10
}
fn default_t_max() -> f64 {
    1e4
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub measurement_sigma: f64,
    #[serde(default)]
    pub disturbance: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Probing restricted to a subset of nodes, for the reachable-rank
/// experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbingSpec {
    pub nodes: Vec<usize>,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_amplitude() -> f64 {
    0.1
}
fn default_rank_tol() -> f64 {
    1e-8
}

fn check_range(key: &str, r: [f64; 2], allow_zero: bool) -> Result<()> {
    let ok_lo = if allow_zero { r[0] >= 0.0 } else { r[0] > 0.0 };
    if !(ok_lo && r[1] >= r[0] && r[1].is_finite()) {
        bail!("{key}: expected [lo, hi] with {} lo <= hi, got {:?}", if allow_zero { "0 <=" } else { "0 <" }, r);
    }
    Ok(())
}

fn require<T: Copy>(key: &str, v: Option<T>) -> Result<T> {
    v.with_context(|| format!("{key}: required for this kind"))
}

fn forbid<T>(key: &str, v: &Option<T>, kind: &str) -> Result<()> {
    if v.is_some() {
        bail!("{key}: not used by kind `{kind}`");
    }
    Ok(())
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Scenario::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn preset(name: &str) -> Result<Scenario> {
        match name {
            "lti" | "casestudy_lti" => Scenario::from_toml(CASESTUDY_LTI),
            "neural" | "casestudy_neural" => Scenario::from_toml(CASESTUDY_NEURAL),
            other => bail!("unknown case study `{other}` (expected lti or neural)"),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks every precondition the pipeline relies on, naming the key.
    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        if g.n < 2 {
            bail!("graph.n: need at least 2 agents, got {}", g.n);
        }
        match (&g.edges, g.p) {
            (Some(_), Some(_)) => bail!("graph: give either `p` or `edges`, not both"),
            (None, None) => bail!("graph: one of `p` or `edges` is required"),
            (None, Some(p)) if !(0.0..=1.0).contains(&p) => bail!("graph.p: must be in [0, 1], got {p}"),
            (Some(edges), None) => {
                for (k, &(i, j, w)) in edges.iter().enumerate() {
                    if i >= g.n || j >= g.n || i == j || !(w > 0.0 && w.is_finite()) {
                        bail!("graph.edges[{k}]: invalid edge ({i}, {j}, {w}) for n = {}", g.n);
                    }
                }
            }
            _ => {}
        }
        check_range("graph.weight_range", g.weight_range, false)?;

        let a = &self.agents;
        match a.kind {
            AgentKind::Lti => {
                check_range("agents.a_range", require("agents.a_range", a.a_range)?, true)?;
                forbid("agents.tau_range", &a.tau_range, "lti")?;
                forbid("agents.c1_range", &a.c1_range, "lti")?;
                forbid("agents.c3_range", &a.c3_range, "lti")?;
            }
            AgentKind::Integrator => {
                forbid("agents.a_range", &a.a_range, "integrator")?;
                forbid("agents.tau_range", &a.tau_range, "integrator")?;
                forbid("agents.c1_range", &a.c1_range, "integrator")?;
                forbid("agents.c3_range", &a.c3_range, "integrator")?;
            }
            AgentKind::Neural => {
                check_range("agents.tau_range", require("agents.tau_range", a.tau_range)?, false)?;
                forbid("agents.a_range", &a.a_range, "neural")?;
                forbid("agents.c1_range", &a.c1_range, "neural")?;
                forbid("agents.c3_range", &a.c3_range, "neural")?;
            }
            AgentKind::Polynomial => {
                check_range("agents.c1_range", require("agents.c1_range", a.c1_range)?, true)?;
                check_range("agents.c3_range", require("agents.c3_range", a.c3_range)?, true)?;
                forbid("agents.a_range", &a.a_range, "polynomial")?;
                forbid("agents.tau_range", &a.tau_range, "polynomial")?;
            }
        }
        if let Some(r) = a.gain_range {
            check_range("agents.gain_range", r, false)?;
        }

        let c = &self.coupling;
        match c.kind {
            CouplingKind::Identity => {
                forbid("coupling.gain_range", &c.gain_range, "identity")?;
                forbid("coupling.c1_range", &c.c1_range, "identity")?;
                forbid("coupling.c3_range", &c.c3_range, "identity")?;
            }
            CouplingKind::Linear | CouplingKind::Tanh => {
                check_range("coupling.gain_range", require("coupling.gain_range", c.gain_range)?, false)?;
                forbid("coupling.c1_range", &c.c1_range, "linear/tanh")?;
                forbid("coupling.c3_range", &c.c3_range, "linear/tanh")?;
            }
            CouplingKind::Cubic => {
                check_range("coupling.c1_range", require("coupling.c1_range", c.c1_range)?, false)?;
                check_range("coupling.c3_range", require("coupling.c3_range", c.c3_range)?, true)?;
                forbid("coupling.gain_range", &c.gain_range, "cubic")?;
            }
        }

        let al = &self.algorithm;
        if !(al.kappa > 0.0 && al.kappa.is_finite()) {
            bail!("algorithm.kappa: must be positive, got {}", al.kappa);
        }
        if !(al.epsilon > 0.0 && al.epsilon.is_finite()) {
            bail!("algorithm.epsilon: must be positive, got {}", al.epsilon);
        }
        if !(al.rtol > 0.0) || !(al.atol > 0.0) {
            bail!("algorithm.rtol/atol: must be positive");
        }
        if !(al.deriv_tol > 0.0) || al.dwell == 0 || !(al.t_max > 0.0) {
            bail!("algorithm: deriv_tol and t_max must be positive and dwell at least 1");
        }
        match (al.switch, al.switch_time) {
            (Switch::Fixed, None) => bail!("algorithm.switch_time: required when switch = \"fixed\""),
            (Switch::Fixed, Some(t)) if !(t > 0.0 && t.is_finite()) => {
                bail!("algorithm.switch_time: must be positive, got {t}")
            }
            (Switch::Converge, Some(_)) => bail!("algorithm.switch_time: only used when switch = \"fixed\""),
            _ => {}
        }
        match (al.integrator, al.dt) {
            (IntegratorName::Rk4, None) => bail!("algorithm.dt: required for integrator = \"rk4\""),
            (IntegratorName::Rk4, Some(dt)) if !(dt > 0.0) => bail!("algorithm.dt: must be positive, got {dt}"),
            (IntegratorName::Rkf45, Some(_)) => bail!("algorithm.dt: only used by integrator = \"rk4\""),
            _ => {}
        }

        let nz = &self.noise;
        if !(nz.measurement_sigma >= 0.0) {
            bail!("noise.measurement_sigma: must be nonnegative");
        }
        if !(nz.disturbance >= 0.0) {
            bail!("noise.disturbance: must be nonnegative");
        }

        if let Some(pr) = &self.probing {
            if pr.nodes.is_empty() {
                bail!("probing.nodes: must not be empty");
            }
            if let Some(&k) = pr.nodes.iter().find(|&&k| k >= g.n) {
                bail!("probing.nodes: node {k} out of range for n = {}", g.n);
            }
            let mut sorted = pr.nodes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != pr.nodes.len() {
                bail!("probing.nodes: duplicate node");
            }
            if !(pr.amplitude > 0.0) {
                bail!("probing.amplitude: must be positive");
            }
            if pr.count == Some(0) {
                bail!("probing.count: must be at least 1");
            }
            if !(pr.rank_tol > 0.0 && pr.rank_tol < 1.0) {
                bail!("probing.rank_tol: must be in (0, 1)");
            }
        }
        Ok(())
    }

    /// Regenerates every random draw from one master seed.
    pub fn reseed(&mut self, seed: u64) {
        self.graph.seed = seed;
        self.agents.seed = seed.wrapping_add(1);
        self.coupling.seed = seed.wrapping_add(2);
        self.algorithm.seed = seed.wrapping_add(3);
        self.noise.seed = seed.wrapping_add(4);
    }

    pub fn graph(&self) -> Result<WeightedGraph> {
        let g = &self.graph;
        Ok(match &g.edges {
            Some(edges) => WeightedGraph::new(g.n, edges.iter().copied())?,
            None => random_graph(
                g.n,
                g.p.expect("validated"),
                (g.weight_range[0], g.weight_range[1]),
                g.seed,
            )?,
        })
    }

    pub fn agents(&self) -> Vec<AgentModel> {
        let a = &self.agents;
        let mut rng = seeded_rng(a.seed);
        let mut draw = |r: Option<[f64; 2]>| {
            let r = r.unwrap_or([1.0, 1.0]);
            if r[0] == r[1] {
                r[0]
            } else if r[0] == 0.0 {
                // log-uniform needs a positive floor; zero-based ranges draw uniformly
                use rand::Rng;
                rng.random_range(r[0]..=r[1])
            } else {
                log_uniform(&mut rng, r[0], r[1])
            }
        };
        (0..self.graph.n)
            .map(|_| {
                let base = match a.kind {
                    AgentKind::Lti => lti_agent(draw(a.a_range)),
                    AgentKind::Integrator => integrator_agent(),
                    AgentKind::Neural => {
                        let tau = draw(a.tau_range);
                        let b = draw(a.gain_range);
                        return neural_agent(tau, b);
                    }
                    AgentKind::Polynomial => {
                        let c1 = draw(a.c1_range);
                        let c3 = draw(a.c3_range);
                        polynomial_agent(c1, c3)
                    }
                };
                match a.gain_range {
                    Some(_) => base.with_gain(draw(a.gain_range)),
                    None => base,
                }
            })
            .collect()
    }

    pub fn couplings(&self) -> Couplings {
        let c = &self.coupling;
        let n = self.graph.n;
        let mut rng = seeded_rng(c.seed);
        let mut draw = |r: Option<[f64; 2]>| {
            let r = r.unwrap_or([1.0, 1.0]);
            if r[0] == r[1] {
                r[0]
            } else if r[0] == 0.0 {
                use rand::Rng;
                rng.random_range(r[0]..=r[1])
            } else {
                log_uniform(&mut rng, r[0], r[1])
            }
        };
        match c.kind {
            CouplingKind::Identity => Couplings::uniform(n, EdgeCoupling::identity()),
            CouplingKind::Linear => Couplings::from_fn(n, |_, _| EdgeCoupling::Linear {
                gain: draw(c.gain_range),
            }),
            CouplingKind::Tanh => Couplings::from_fn(n, |_, _| EdgeCoupling::Tanh {
                gain: draw(c.gain_range),
            }),
            CouplingKind::Cubic => Couplings::from_fn(n, |_, _| {
                let c1 = draw(c.c1_range);
                let c3 = draw(c.c3_range);
                EdgeCoupling::Cubic { c1, c3 }
            }),
        }
    }

    pub fn system(&self) -> Result<NetworkSystem> {
        Ok(NetworkSystem::new(self.graph()?, self.agents(), self.couplings())?)
    }

    pub fn sim_options(&self) -> SimOptions {
        let al = &self.algorithm;
        SimOptions {
            integrator: match al.integrator {
                IntegratorName::Rkf45 => IntegratorKind::Rkf45 {
                    rtol: al.rtol,
                    atol: al.atol,
                },
                IntegratorName::Rk4 => IntegratorKind::Rk4 {
                    dt: al.dt.expect("validated"),
                },
            },
            convergence: Convergence {
                deriv_tol: al.deriv_tol,
                dwell: al.dwell,
                t_max: al.t_max,
            },
            mode: match al.switch {
                Switch::Converge => SwitchMode::RunToConvergence,
                Switch::Fixed => SwitchMode::FixedTime {
                    switch_time: al.switch_time.expect("validated"),
                },
            },
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            disturbance: (self.noise.disturbance > 0.0).then_some(self.noise.disturbance),
            measurement_sigma: self.noise.measurement_sigma,
            seed: self.noise.seed,
        }
    }

    pub fn schedule_mode(&self) -> ScheduleMode {
        if self.algorithm.parallel_probes {
            ScheduleMode::Parallel
        } else {
            ScheduleMode::Sequential
        }
    }
}
