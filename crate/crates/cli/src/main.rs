use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dwmark::config::{Experiment, ExperimentConfig};
use dwmark::{harness, Error};

#[derive(Parser)]
#[command(
    name = "dwmark",
    version,
    about = "Watermarked control and attack detection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one closed-loop trajectory.
    Simulate(Common),
    /// Monte Carlo detection experiment, or a single run over a trajectory file.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV with `y` and `a` columns.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Detection and control loss over the watermark grid.
    SweepBeta(Common),
    /// Asymptotic MTBFA and mean-delay bounds.
    Bounds(Common),
    /// Exact discounted cost of the deployed policy.
    PolicyEval(Common),
    /// CUSUM score trace of one replicate.
    Trace(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep every candidate change point.
    #[arg(long)]
    exact_window: bool,
}

impl Common {
    fn experiment(&self) -> Result<Experiment, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(r) = self.replicates {
            cfg.run.replicates = r;
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        if self.exact_window {
            cfg.detector.window = None;
        }
        cfg.resolve()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(c) => {
            let exp = c.experiment()?;
            let traj = harness::simulate_trajectory(&exp, exp.trace_replicate, Some(&exp.out))?;
            println!(
                "wrote {} steps to {}",
                traj.len(),
                exp.out.join("trajectory.csv").display()
            );
        }
        Command::Detect { common, input } => {
            let exp = common.experiment()?;
            match input {
                Some(path) => {
                    let outcome = harness::detect_file(&exp, &path, Some(&exp.out))?;
                    match outcome.alarm {
                        Some(a) => println!("alarm at n = {} ({:?})", a.time, a.reason),
                        None => println!("no alarm over {} transitions", outcome.observed),
                    }
                }
                None => {
                    let res = harness::run_experiment(&exp, Some(&exp.out))?;
                    let m = &res.metrics;
                    println!(
                        "beta {}: mean delay {}, censored {:.3}, false alarms {:.3}, MTBFA est {}, cost {:.4} +- {:.4}",
                        m.beta,
                        fmt_opt(m.mean_delay),
                        m.censored_frac,
                        m.false_alarm_rate,
                        fmt_opt(m.mtbfa_est),
                        m.mean_cost,
                        m.cost_se
                    );
                }
            }
        }
        Command::SweepBeta(c) => {
            let exp = c.experiment()?;
            let rows = harness::sweep_beta(&exp, &exp.beta_grid, Some(&exp.out))?;
            println!(
                "{:>8} {:>12} {:>10} {:>12}",
                "beta", "mean_delay", "censored", "loss_exact"
            );
            for r in rows {
                println!(
                    "{:>8} {:>12} {:>10.3} {:>12}",
                    r.beta,
                    fmt_opt(r.mean_delay),
                    r.censored_frac,
                    fmt_opt(r.loss_exact)
                );
            }
        }
        Command::Bounds(c) => {
            let exp = c.experiment()?;
            let (_, summary) = harness::bounds_report(&exp, Some(&exp.out))?;
            print!("{summary}");
        }
        Command::PolicyEval(c) => {
            let exp = c.experiment()?;
            for (k, v) in harness::policy_eval(&exp, Some(&exp.out))? {
                println!("{k} {v}");
            }
        }
        Command::Trace(c) => {
            let exp = c.experiment()?;
            let trace = harness::emit_trace(&exp, exp.trace_replicate, Some(&exp.out))?;
            let max = trace.iter().map(|p| p.score).fold(0.0, f64::max);
            println!("{} points, max score {max:.3}", trace.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
