use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use netprobe_cli::experiment::{run_scenario, sweep, sweep_csv, verify, SweepParam};
use netprobe_cli::scenario::{ProbingSpec, Scenario};

#[derive(Parser)]
#[command(name = "netprobe", version, about = "Identify a diffusively coupled network by steady-state probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a scenario once per value of one parameter.
    Sweep {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Built-in case study to sweep instead of a scenario file.
        #[arg(long, conflicts_with = "scenario")]
        casestudy: Option<String>,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a built-in case study (`lti` or `neural`).
    Casestudy {
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in numerical self-checks.
    Verify,
}

#[derive(Args)]
struct Common {
    /// Master seed; regenerates graph, agents, couplings, baseline and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to $NETPROBE_OUT/<scenario name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Simulate every probe from the initial state instead of switching.
    #[arg(long)]
    parallel_probes: bool,
    /// Restrict the rank experiment to these nodes, e.g. `0,3,5`.
    #[arg(long, value_delimiter = ',')]
    probe_nodes: Option<Vec<usize>>,
    #[arg(long, env = "NETPROBE_OUT", default_value = "netprobe-out", hide_env_values = true)]
    out_root: PathBuf,
}

impl Common {
    fn apply(&self, s: &mut Scenario) -> Result<()> {
        if let Some(seed) = self.seed {
            s.reseed(seed);
        }
        if let Some(k) = self.kappa {
            s.algorithm.kappa = k;
        }
        if let Some(e) = self.epsilon {
            s.algorithm.epsilon = e;
        }
        if self.parallel_probes {
            s.algorithm.parallel_probes = true;
        }
        if let Some(nodes) = &self.probe_nodes {
            let base = s.probing.clone();
            s.probing = Some(ProbingSpec {
                nodes: nodes.clone(),
                ..base.unwrap_or(ProbingSpec {
                    nodes: vec![],
                    amplitude: 0.1,
                    count: None,
                    rank_tol: 1e-8,
                })
            });
        }
        s.validate()
    }

    fn out_dir(&self, s: &Scenario) -> PathBuf {
        self.out
            .clone()
            .or_else(|| s.output_dir.clone())
            .unwrap_or_else(|| self.out_root.join(s.name.as_deref().unwrap_or("scenario")))
    }
}

fn run_one(mut s: Scenario, common: &Common) -> Result<ExitCode> {
    common.apply(&mut s)?;
    let out = common.out_dir(&s);
    let (status, outcome) = run_scenario(&s, &out)?;
    println!("{} [{}] -> {}", outcome.summary(), status, out.display());
    if let Some(r) = &outcome.rank {
        println!("reachable rank {} from {} probes on {} nodes", r.rank, r.samples, r.nodes.len());
    }
    Ok(ExitCode::from(status.exit_code() as u8))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, common } => Scenario::load(&scenario).and_then(|s| run_one(s, &common)),
        Command::Casestudy { name, common } => Scenario::preset(&name).and_then(|s| run_one(s, &common)),
        Command::Sweep {
            scenario,
            casestudy,
            param,
            values,
            common,
        } => (|| {
            let mut s = match (scenario, casestudy) {
                (Some(p), _) => Scenario::load(&p)?,
                (None, Some(name)) => Scenario::preset(&name)?,
                (None, None) => anyhow::bail!("sweep needs --scenario or --casestudy"),
            };
            common.apply(&mut s)?;
            let out = common.out_dir(&s);
            std::fs::create_dir_all(&out)?;
            let rows = sweep(&s, param, &values)?;
            let table = sweep_csv(param, &rows);
            std::fs::write(out.join("sweep.csv"), &table)?;
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        })(),
        Command::Verify => {
            let checks = verify();
            let mut ok = true;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
