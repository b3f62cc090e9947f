//! Running scenarios, writing their artifacts, parameter sweeps and the
//! built-in self-checks.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use nalgebra::{DMatrix, DVector};
use netprobe::analysis::{compare, GraphComparison, Metrics};
use netprobe::graph::{matrix_to_csv, seeded_rng};
use netprobe::model::connection_matrix_true;
use netprobe::reconstruction::{
    delta_w_inverse_apply_counted, estimate_reachable_rank, extract_graph, f_inverse_closed_form, f_matrix,
    reconstruct, restricted_probe_samples, Branch, ExactTarget, ProbeTarget, ReconstructConfig,
    ReconstructionResult, SimulatedTarget,
};
use netprobe::{NetworkSystem, WeightedGraph};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scenario::{Scenario, Source, Switch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub nodes: Vec<usize>,
    pub samples: usize,
    pub rank: usize,
}

pub struct RunOutcome {
    pub truth: WeightedGraph,
    pub result: ReconstructionResult,
    pub comparison: GraphComparison,
    pub metrics: Metrics,
    pub rank: Option<RankReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    /// The recovered edge set equals the true one.
    Exact,
    /// The pipeline finished but the edge sets differ.
    Mismatched,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Exact => 0,
            RunStatus::Mismatched => 2,
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Exact => "exact",
            RunStatus::Mismatched => "mismatched",
        })
    }
}

fn target_for<'a>(s: &Scenario, sys: &'a NetworkSystem) -> Result<Box<dyn ProbeTarget + 'a>> {
    Ok(match s.algorithm.source {
        Source::Simulate => Box::new(SimulatedTarget::new(
            sys,
            s.sim_options(),
            s.noise_spec(),
            s.schedule_mode(),
        )?),
        Source::Exact => {
            Box::new(ExactTarget::new(sys).with_measurement_noise(s.noise.measurement_sigma, s.noise.seed))
        }
    })
}

/// Builds the hidden network, identifies it and compares with the truth.
pub fn execute(s: &Scenario) -> Result<RunOutcome> {
    let start = Instant::now();
    let sys = s.system()?;
    let cfg = ReconstructConfig {
        kappa: s.algorithm.kappa,
        epsilon: s.algorithm.epsilon,
        seed: s.algorithm.seed,
        ..Default::default()
    };
    let mut target = target_for(s, &sys)?;
    let result = reconstruct(target.as_mut(), &cfg)?;
    let rank = match &s.probing {
        Some(pr) => {
            let mut target = target_for(s, &sys)?;
            let count = pr.count.unwrap_or(sys.n());
            let samples = restricted_probe_samples(
                target.as_mut(),
                &result.log.w0,
                &pr.nodes,
                pr.amplitude,
                count,
                s.algorithm.seed,
            )?;
            Some(RankReport {
                nodes: pr.nodes.clone(),
                samples: count,
                rank: estimate_reachable_rank(&samples, pr.rank_tol)?,
            })
        }
        None => None,
    };
    let comparison = compare(sys.graph(), &result)?;
    let metrics = Metrics::new(
        &comparison,
        cfg.kappa,
        cfg.epsilon,
        cfg.seed,
        start.elapsed().as_secs_f64(),
    );
    Ok(RunOutcome {
        truth: sys.graph().clone(),
        result,
        comparison,
        metrics,
        rank,
    })
}

impl RunOutcome {
    pub fn status(&self) -> RunStatus {
        if self.comparison.exact_edges() {
            RunStatus::Exact
        } else {
            RunStatus::Mismatched
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "precision={:.4} recall={:.4} max_rel_err={:.3e} max_abs_err={:.3e} runtime={:.2}s",
            self.metrics.precision,
            self.metrics.recall,
            self.metrics.max_rel_err,
            self.metrics.max_abs_err,
            self.metrics.runtime_sec
        )
    }

    pub fn write_artifacts(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let w = |name: &str, body: String| {
            std::fs::write(out.join(name), body).with_context(|| format!("writing {name}"))
        };
        w("graph_true.csv", self.truth.to_edge_csv())?;
        w("graph_est.csv", self.result.graph.to_edge_csv())?;
        w("adjacency_true.csv", self.truth.to_adjacency_csv())?;
        w("adjacency_est.csv", self.result.graph.to_adjacency_csv())?;
        w("connection_matrix.csv", matrix_to_csv(&self.result.m))?;
        w("edge_errors.csv", self.comparison.edge_errors_csv())?;
        self.result
            .log
            .write(&out.join("probes.csv"), &out.join("probes.json"))?;
        w("metrics.json", serde_json::to_string_pretty(&self.metrics)? + "\n")?;
        let mut status = serde_json::json!({
            "status": self.status().to_string(),
            "missing": self.comparison.missing,
            "spurious": self.comparison.spurious,
            "indeterminate": self.result.diagnostics.indeterminate,
            "estimate_path": self.result.diagnostics.path,
            "cond_delta_y": self.result.diagnostics.cond_delta_y,
            "error_scale": self.result.diagnostics.error_scale,
        });
        if let Some(r) = &self.rank {
            status["rank"] = serde_json::to_value(r)?;
        }
        w("status.json", serde_json::to_string_pretty(&status)? + "\n")?;
        Ok(())
    }
}

/// Runs a scenario and writes its artifacts to `out`. When the pipeline
/// fails, what was written so far is kept and `status.json` records the
/// failure.
pub fn run_scenario(s: &Scenario, out: &Path) -> Result<(RunStatus, RunOutcome)> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("scenario.toml"), s.to_toml())?;
    match execute(s) {
        Ok(outcome) => {
            outcome.write_artifacts(out)?;
            Ok((outcome.status(), outcome))
        }
        Err(e) => {
            let status = serde_json::json!({ "status": "failed", "error": format!("{e:#}") });
            let _ = std::fs::write(out.join("status.json"), serde_json::to_string_pretty(&status)? + "\n");
            if let Ok(g) = s.graph() {
                let _ = std::fs::write(out.join("graph_true.csv"), g.to_edge_csv());
            }
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Kappa,
    Sigma,
    SwitchTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub status: String,
}

pub fn apply_param(s: &Scenario, param: SweepParam, value: f64) -> Result<Scenario> {
    let mut cell = s.clone();
    match param {
        SweepParam::Kappa => cell.algorithm.kappa = value,
        SweepParam::Sigma => cell.noise.measurement_sigma = value,
        SweepParam::SwitchTime => {
            cell.algorithm.switch = Switch::Fixed;
            cell.algorithm.switch_time = Some(value);
        }
    }
    cell.validate()?;
    Ok(cell)
}

/// One run per value with every seed shared. A failing cell is recorded and
/// the sweep carries on.
pub fn sweep(s: &Scenario, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    anyhow::ensure!(!values.is_empty(), "sweep needs at least one value");
    Ok(values
        .par_iter()
        .map(|&v| match apply_param(s, param, v).and_then(|c| execute(&c)) {
            Ok(o) => SweepRow {
                value: v,
                precision: o.metrics.precision,
                recall: o.metrics.recall,
                max_abs_err: o.metrics.max_abs_err,
                max_rel_err: o.metrics.max_rel_err,
                status: o.status().to_string(),
            },
            Err(e) => SweepRow {
                value: v,
                precision: f64::NAN,
                recall: f64::NAN,
                max_abs_err: f64::NAN,
                max_rel_err: f64::NAN,
                status: format!("failed: {}", format!("{e:#}").replace(',', ";")),
            },
        })
        .collect())
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let name = match param {
        SweepParam::Kappa => "kappa",
        SweepParam::Sigma => "sigma",
        SweepParam::SwitchTime => "switch_time",
    };
    let mut s = format!("{name},precision,recall,max_abs_err,max_rel_err,status\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            r.value, r.precision, r.recall, r.max_abs_err, r.max_rel_err, r.status
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn lti_instance(n: usize, seed: u64, integrators: bool) -> Result<NetworkSystem> {
    use netprobe::graph::log_uniform;
    use netprobe::model::{integrator_agent, lti_agent, Couplings, EdgeCoupling};
    let mut g = netprobe::random_graph(n, 0.3, (0.3, 10.0), seed)?;
    while integrators && !g.is_connected() {
        g = netprobe::random_graph(n, 0.5, (0.3, 10.0), seed.wrapping_add(1000))?;
    }
    let mut rng = seeded_rng(seed ^ 0xA5A5);
    let agents = (0..n)
        .map(|_| {
            if integrators {
                integrator_agent()
            } else {
                lti_agent(log_uniform(&mut rng, 1.0, 100.0))
            }
        })
        .collect();
    let couplings = Couplings::from_fn(n, |_, _| EdgeCoupling::Linear {
        gain: log_uniform(&mut rng, 0.1, 1.0),
    });
    Ok(NetworkSystem::new(g, agents, couplings)?)
}

/// Short end-to-end self-checks of the numerical core.
pub fn verify() -> Vec<CheckResult> {
    let mut out = Vec::new();

    let mut worst = (0.0f64, 0.0f64, true);
    for n in [5usize, 50, 500] {
        let finv = f_inverse_closed_form(n);
        let id_err = (f_matrix(n) * &finv - DMatrix::<f64>::identity(n, n)).amax();
        let norm = finv.clone().singular_values().max();
        let dy = DMatrix::<f64>::from_element(n, n, 1.0);
        let (_, ops) = delta_w_inverse_apply_counted(&dy, Branch::Integrator, 1.0);
        worst = (worst.0.max(id_err), worst.1.max(norm), worst.2 && ops <= 8 * n * n);
    }
    out.push(CheckResult {
        name: "closed-form F inverse",
        passed: worst.0 <= 1e-12 && worst.1 <= 2.0 && worst.2,
        detail: format!("max |F F^-1 - I| = {:.2e}, max ||F^-1|| = {:.4}", worst.0, worst.1),
    });

    let mut max_err = 0.0f64;
    let mut failure = None;
    for seed in 0..10u64 {
        let integrators = seed % 2 == 1;
        let run = || -> Result<f64> {
            let sys = lti_instance(20, seed, integrators)?;
            let cfg = ReconstructConfig {
                kappa: 1.0,
                seed,
                ..Default::default()
            };
            let res = reconstruct(&mut ExactTarget::new(&sys), &cfg)?;
            let truth = connection_matrix_true(&sys, &res.log.y0)?;
            Ok((&res.m - truth).amax())
        };
        match run() {
            Ok(e) => max_err = max_err.max(e),
            Err(e) => failure = Some(format!("seed {seed}: {e:#}")),
        }
    }
    out.push(CheckResult {
        name: "exact LTI reconstruction",
        passed: failure.is_none() && max_err <= 1e-10,
        detail: failure.unwrap_or_else(|| format!("max |M - M_true| = {max_err:.2e} over 10 instances")),
    });

    let rigid = (|| -> Result<(usize, usize)> {
        let sys = lti_instance(12, 99, false)?;
        let y0 = DVector::zeros(12);
        let m_true = connection_matrix_true(&sys, &y0)?;
        let min_nu_d = sys
            .graph()
            .edges()
            .iter()
            .map(|e| e.weight * sys.couplings().get(e.i, e.j).g_deriv(0.0))
            .fold(f64::INFINITY, f64::min);
        let m = 0.25 * min_nu_d;
        let mut rng = seeded_rng(5);
        let mut wrong = 0;
        let trials = 200;
        for _ in 0..trials {
            let noisy = m_true.map(|v| v + rng.random_range(-m..=m));
            let ext = extract_graph(&noisy, 2.0 * m, &y0, sys.known())?;
            let truth: Vec<_> = sys.graph().edges().iter().map(|e| (e.i, e.j)).collect();
            if ext.edge_set() != truth {
                wrong += 1;
            }
        }
        Ok((wrong, trials))
    })();
    out.push(match rigid {
        Ok((wrong, trials)) => CheckResult {
            name: "rigidity threshold",
            passed: wrong == 0,
            detail: format!("{wrong} wrong edge sets in {trials} perturbed trials"),
        },
        Err(e) => CheckResult {
            name: "rigidity threshold",
            passed: false,
            detail: format!("{e:#}"),
        },
    });

    let determinism = (|| -> Result<bool> {
        let s = Scenario::from_toml(
            "[graph]\nn = 8\np = 0.4\nweight_range = [0.5, 2.0]\nseed = 3\n\
             [agents]\nkind = \"neural\"\ntau_range = [3.0, 30.0]\ngain_range = [1.0, 5.0]\nseed = 4\n\
             [algorithm]\nseed = 5\n",
        )?;
        let a = execute(&s)?;
        let b = execute(&s)?;
        Ok(a.metrics.same_outcome(&b.metrics) && a.result.m == b.result.m)
    })();
    out.push(CheckResult {
        name: "determinism",
        passed: matches!(determinism, Ok(true)),
        detail: match determinism {
            Ok(true) => "identical metrics and M on rerun".into(),
            Ok(false) => "reruns differ".into(),
            Err(e) => format!("{e:#}"),
        },
    });
    out
}
