//! Agent and edge-controller models and the closed-loop network
//!
//! ```text
//! dx_i/dt = f_i(x_i) - b_i * sum_{e = (i, j)} nu_e g_e(y_i - y_j)
//!                    + b_i * sum_{e = (k, i)} nu_e g_e(y_k - y_i) + w_i,   y = h(x)
//! ```
//!
//! i.e. `dx/dt = f(x) - B E N g(E^T h(x)) + w` with `E` the incidence matrix.
//! For odd `g` this is the familiar `b_i sum_j nu_ij g(y_j - y_i)` protocol.
//! Its equilibria are exactly the solutions of
//!
//! ```text
//! w = k^{-1}(y) + B E N g(E^T y),     k_i^{-1}(y) = -f_i(h_i^{-1}(y)).
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{incidence_matrix, WeightedGraph};
use crate::DenseMatrix;

/// Steady-state relations are supplied analytically per model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentDynamics {
    /// `dx = -a x`, `y = x`. `a = 0` is the single integrator.
    Linear { a: f64 },
    /// `dV = -V / tau`, `y = tanh(V)`.
    Neural { tau: f64 },
    /// `dx = -(c1 x + c3 x^3)`, `y = x`.
    Polynomial { c1: f64, c3: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    pub dynamics: AgentDynamics,
    /// Constant gain on the coupling input.
    pub gain: f64,
}

pub fn lti_agent(a: f64) -> AgentModel {
    assert!(a >= 0.0 && a.is_finite(), "lti agent needs a >= 0");
    AgentModel {
        dynamics: AgentDynamics::Linear { a },
        gain: 1.0,
    }
}

pub fn integrator_agent() -> AgentModel {
    lti_agent(0.0)
}

pub fn neural_agent(tau: f64, b: f64) -> AgentModel {
    assert!(tau > 0.0 && b > 0.0, "neural agent needs tau > 0 and b > 0");
    AgentModel {
        dynamics: AgentDynamics::Neural { tau },
        gain: b,
    }
}

pub fn polynomial_agent(c1: f64, c3: f64) -> AgentModel {
    assert!(c1 >= 0.0 && c3 >= 0.0, "polynomial agent needs nonnegative coefficients");
    AgentModel {
        dynamics: AgentDynamics::Polynomial { c1, c3 },
        gain: 1.0,
    }
}

impl AgentModel {
    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.dynamics {
            AgentDynamics::Linear { a } => a >= 0.0 && a.is_finite(),
            AgentDynamics::Neural { tau } => tau > 0.0 && tau.is_finite(),
            AgentDynamics::Polynomial { c1, c3 } => {
                c1 >= 0.0 && c3 >= 0.0 && c1.is_finite() && c3.is_finite()
            }
        };
        if !ok || !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid agent model {self:?}")));
        }
        Ok(())
    }

    pub fn f(&self, x: f64) -> f64 {
        match self.dynamics {
            AgentDynamics::Linear { a } => -a * x,
            AgentDynamics::Neural { tau } => -x / tau,
            AgentDynamics::Polynomial { c1, c3 } => -(c1 * x + c3 * x * x * x),
        }
    }

    pub fn h(&self, x: f64) -> f64 {
        match self.dynamics {
            AgentDynamics::Neural { .. } => x.tanh(),
            _ => x,
        }
    }

    pub fn f_deriv(&self, x: f64) -> f64 {
        match self.dynamics {
            AgentDynamics::Linear { a } => -a,
            AgentDynamics::Neural { tau } => -1.0 / tau,
            AgentDynamics::Polynomial { c1, c3 } => -(c1 + 3.0 * c3 * x * x),
        }
    }

    pub fn h_deriv(&self, x: f64) -> f64 {
        match self.dynamics {
            AgentDynamics::Neural { .. } => {
                let c = x.cosh();
                1.0 / (c * c)
            }
            _ => 1.0,
        }
    }

    /// Open interval the output map takes values in, if bounded.
    pub fn output_range(&self) -> Option<(f64, f64)> {
        match self.dynamics {
            AgentDynamics::Neural { .. } => Some((-1.0, 1.0)),
            _ => None,
        }
    }

    fn check_output(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::Domain(format!("non-finite output {y}")));
        }
        if let Some((lo, hi)) = self.output_range() {
            if y <= lo || y >= hi {
                return Err(Error::Domain(format!(
                    "output {y} outside the open range ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    pub fn h_inv(&self, y: f64) -> Result<f64> {
        self.check_output(y)?;
        Ok(match self.dynamics {
            AgentDynamics::Neural { .. } => y.atanh(),
            _ => y,
        })
    }

    /// Inverse steady-state relation: the constant input that holds this
    /// agent at output `y`.
    pub fn k_inv(&self, y: f64) -> Result<f64> {
        self.check_output(y)?;
        Ok(match self.dynamics {
            AgentDynamics::Linear { a } => a * y,
            AgentDynamics::Neural { tau } => y.atanh() / tau,
            AgentDynamics::Polynomial { c1, c3 } => c1 * y + c3 * y * y * y,
        })
    }

    pub fn k_inv_deriv(&self, y: f64) -> Result<f64> {
        self.check_output(y)?;
        Ok(match self.dynamics {
            AgentDynamics::Linear { a } => a,
            AgentDynamics::Neural { tau } => 1.0 / (tau * (1.0 - y * y)),
            AgentDynamics::Polynomial { c1, c3 } => c1 + 3.0 * c3 * y * y,
        })
    }

    /// `k_inv` vanishes identically (pure integrator).
    pub fn is_integrator(&self) -> bool {
        match self.dynamics {
            AgentDynamics::Linear { a } => a == 0.0,
            AgentDynamics::Polynomial { c1, c3 } => c1 == 0.0 && c3 == 0.0,
            AgentDynamics::Neural { .. } => false,
        }
    }
}

/// Static edge controller `g` with its derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeCoupling {
    /// `g(z) = gain * z`
    Linear { gain: f64 },
    /// `g(z) = gain * tanh(z)`
    Tanh { gain: f64 },
    /// `g(z) = c1 z + c3 z^3`
    Cubic { c1: f64, c3: f64 },
}

impl EdgeCoupling {
    pub fn identity() -> Self {
        EdgeCoupling::Linear { gain: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EdgeCoupling::Linear { gain } | EdgeCoupling::Tanh { gain } => {
                gain > 0.0 && gain.is_finite()
            }
            EdgeCoupling::Cubic { c1, c3 } => {
                c1 >= 0.0 && c3 >= 0.0 && c1 + c3 > 0.0 && (c1 + c3).is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid coupling {self:?}")))
        }
    }

    #[inline]
    pub fn g(&self, z: f64) -> f64 {
        match *self {
            EdgeCoupling::Linear { gain } => gain * z,
            EdgeCoupling::Tanh { gain } => gain * z.tanh(),
            EdgeCoupling::Cubic { c1, c3 } => c1 * z + c3 * z * z * z,
        }
    }

    #[inline]
    pub fn g_deriv(&self, z: f64) -> f64 {
        match *self {
            EdgeCoupling::Linear { gain } => gain,
            EdgeCoupling::Tanh { gain } => {
                let t = z.tanh();
                gain * (1.0 - t * t)
            }
            EdgeCoupling::Cubic { c1, c3 } => c1 + 3.0 * c3 * z * z,
        }
    }
}

/// Controllers for every unordered node pair, present in the graph or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Couplings {
    n: usize,
    table: Vec<EdgeCoupling>,
}

#[inline]
fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = (i.min(j), i.max(j));
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

impl Couplings {
    pub fn uniform(n: usize, c: EdgeCoupling) -> Self {
        Couplings {
            n,
            table: vec![c; n * n.saturating_sub(1) / 2],
        }
    }

    /// Calls `f(i, j)` for every pair `i < j` in lexicographic order.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> EdgeCoupling) -> Self {
        let mut table = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                table.push(f(i, j));
            }
        }
        Couplings { n, table }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &EdgeCoupling {
        assert!(i != j && i < self.n && j < self.n, "no coupling for ({i}, {j})");
        &self.table[pair_index(self.n, i, j)]
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; self.n];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        Couplings::from_fn(self.n, |i, j| *self.get(inv[i], inv[j]))
    }

    pub fn validate(&self) -> Result<()> {
        self.table.iter().try_for_each(EdgeCoupling::validate)
    }
}

/// The information a reconstruction is allowed to use: agent and controller
/// relations, but not the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownRelations {
    pub agents: Vec<AgentModel>,
    pub couplings: Couplings,
}

impl KnownRelations {
    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn gains(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.gain).collect()
    }

    /// Diagonal of the Jacobian of `k^{-1}` at `y`.
    pub fn k_inv_gradient(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.n(), y.len())?;
        let v: Result<Vec<f64>> = self
            .agents
            .iter()
            .zip(y.iter())
            .map(|(a, &yi)| a.k_inv_deriv(yi))
            .collect();
        Ok(DVector::from_vec(v?))
    }
}

#[derive(Debug, Clone, Copy)]
struct Wire {
    i: usize,
    j: usize,
    nu: f64,
    g: EdgeCoupling,
}

/// A diffusively-coupled network `(graph, agents, couplings)`.
#[derive(Debug, Clone)]
pub struct NetworkSystem {
    graph: WeightedGraph,
    known: KnownRelations,
    wires: Vec<Wire>,
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}

impl NetworkSystem {
    pub fn new(graph: WeightedGraph, agents: Vec<AgentModel>, couplings: Couplings) -> Result<Self> {
        check_dim(graph.n(), agents.len())?;
        check_dim(graph.n(), couplings.n())?;
        agents.iter().try_for_each(AgentModel::validate)?;
        couplings.validate()?;
        let wires = graph
            .edges()
            .iter()
            .map(|e| Wire {
                i: e.i,
                j: e.j,
                nu: e.weight,
                g: *couplings.get(e.i, e.j),
            })
            .collect();
        Ok(NetworkSystem {
            graph,
            known: KnownRelations { agents, couplings },
            wires,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn graph(&self) -> &WeightedGraph {
        &self.graph
    }

    pub fn agents(&self) -> &[AgentModel] {
        &self.known.agents
    }

    pub fn couplings(&self) -> &Couplings {
        &self.known.couplings
    }

    pub fn known(&self) -> &KnownRelations {
        &self.known
    }

    /// Relabels node `k` as `perm[k]` in graph, agents and couplings.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let graph = self.graph.permuted(perm)?;
        let mut agents = self.known.agents.clone();
        for (k, &p) in perm.iter().enumerate() {
            agents[p] = self.known.agents[k];
        }
        NetworkSystem::new(graph, agents, self.known.couplings.permuted(perm))
    }

    /// Right-hand side into `out`. `y` is scratch space for the outputs and
    /// `disturbance`, if any, is added to the input.
    pub(crate) fn rhs_into(
        &self,
        x: &[f64],
        w: &[f64],
        disturbance: Option<&[f64]>,
        y: &mut [f64],
        out: &mut [f64],
    ) {
        let agents = &self.known.agents;
        for k in 0..x.len() {
            y[k] = agents[k].h(x[k]);
            out[k] = agents[k].f(x[k]) + w[k];
        }
        if let Some(d) = disturbance {
            for (o, dk) in out.iter_mut().zip(d) {
                *o += dk;
            }
        }
        for wire in &self.wires {
            let flow = wire.nu * wire.g.g(y[wire.i] - y[wire.j]);
            out[wire.i] -= agents[wire.i].gain * flow;
            out[wire.j] += agents[wire.j].gain * flow;
        }
    }

    /// `w = k^{-1}(y) + B E N g(E^T y)` evaluated at `y`.
    pub fn steady_state_map(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.n(), y.len())?;
        let agents = &self.known.agents;
        let mut out = DVector::zeros(self.n());
        for k in 0..self.n() {
            out[k] = agents[k].k_inv(y[k])?;
        }
        for wire in &self.wires {
            let flow = wire.nu * wire.g.g(y[wire.i] - y[wire.j]);
            out[wire.i] += agents[wire.i].gain * flow;
            out[wire.j] -= agents[wire.j].gain * flow;
        }
        Ok(out)
    }

    /// Converts outputs to the corresponding agent states.
    pub fn state_from_output(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.n(), y.len())?;
        let v: Result<Vec<f64>> = self
            .known
            .agents
            .iter()
            .zip(y.iter())
            .map(|(a, &yi)| a.h_inv(yi))
            .collect();
        Ok(DVector::from_vec(v?))
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.n(),
            self.known.agents.iter().zip(x.iter()).map(|(a, &xi)| a.h(xi)),
        )
    }
}

/// State derivative of the closed loop.
pub fn closed_loop_rhs(sys: &NetworkSystem, x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(sys.n(), x.len())?;
    check_dim(sys.n(), w.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("closed-loop state"));
    }
    let mut y = vec![0.0; sys.n()];
    let mut out = DVector::zeros(sys.n());
    sys.rhs_into(x.as_slice(), w.as_slice(), None, &mut y, out.as_mut_slice());
    Ok(out)
}

/// Jacobian of [`closed_loop_rhs`] with respect to the state.
pub fn closed_loop_jacobian(sys: &NetworkSystem, x: &DVector<f64>) -> Result<DenseMatrix> {
    check_dim(sys.n(), x.len())?;
    let agents = &sys.known.agents;
    let y = sys.output(x);
    let hd: Vec<f64> = agents.iter().zip(x.iter()).map(|(a, &xi)| a.h_deriv(xi)).collect();
    let mut jac = DMatrix::from_fn(sys.n(), sys.n(), |r, c| if r == c { agents[r].f_deriv(x[r]) } else { 0.0 });
    for wire in &sys.wires {
        let c = wire.nu * wire.g.g_deriv(y[wire.i] - y[wire.j]);
        let (bi, bj) = (agents[wire.i].gain, agents[wire.j].gain);
        jac[(wire.i, wire.i)] -= bi * c * hd[wire.i];
        jac[(wire.i, wire.j)] += bi * c * hd[wire.j];
        jac[(wire.j, wire.j)] -= bj * c * hd[wire.j];
        jac[(wire.j, wire.i)] += bj * c * hd[wire.i];
    }
    Ok(jac)
}

/// Zero exactly when `y` is a steady-state output for the constant input `w`.
pub fn steady_state_residual(sys: &NetworkSystem, y: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(sys.n(), w.len())?;
    Ok(sys.steady_state_map(y)? - w)
}

/// Jacobian of the steady-state map at `y0`:
/// `grad k^{-1}(y0) + B E N grad g(E^T y0) E^T`. Uses the hidden graph.
pub fn connection_matrix_true(sys: &NetworkSystem, y0: &DVector<f64>) -> Result<DenseMatrix> {
    let grad = sys.known.k_inv_gradient(y0)?;
    let mut m = DMatrix::from_diagonal(&grad);
    for wire in &sys.wires {
        let c = wire.nu * wire.g.g_deriv(y0[wire.i] - y0[wire.j]);
        let (bi, bj) = (sys.known.agents[wire.i].gain, sys.known.agents[wire.j].gain);
        m[(wire.i, wire.i)] += bi * c;
        m[(wire.i, wire.j)] -= bi * c;
        m[(wire.j, wire.j)] += bj * c;
        m[(wire.j, wire.i)] -= bj * c;
    }
    Ok(m)
}

/// Same matrix through explicit incidence products; kept as an
/// independent route for tests.
pub fn connection_matrix_dense(sys: &NetworkSystem, y0: &DVector<f64>) -> Result<DenseMatrix> {
    let e = incidence_matrix(&sys.graph);
    let grad = sys.known.k_inv_gradient(y0)?;
    let zeta = e.transpose() * y0;
    let nd = DVector::from_iterator(
        sys.wires.len(),
        sys.wires.iter().zip(zeta.iter()).map(|(w, &z)| w.nu * w.g.g_deriv(z)),
    );
    let b = DVector::from_vec(sys.known.gains());
    Ok(DMatrix::from_diagonal(&grad) + DMatrix::from_diagonal(&b) * &e * DMatrix::from_diagonal(&nd) * e.transpose())
}
