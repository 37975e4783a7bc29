use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capmkt::equilibrium::AdmmConfig;
use capmkt::market_clearing::MarketDesign;
use capmkt::reporting::{emit_outputs, execute, ntc_domain, run_batch, RunArtifact, RunStatus};
use capmkt::scenario::{synthesize_case_study, DataSource, ScenarioConfig, SynthParams, DATA_DIR_ENV};
use capmkt::Result;

#[derive(Parser)]
#[command(name = "capmkt", version, about = "Equilibrium of coupled zonal energy and capacity markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    solver: SolverOverrides,
}

#[derive(Args)]
struct SolverOverrides {
    /// Seed of the initial price jitter and of the synthetic wind noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Initial ADMM penalty in EUR/MWh per MW.
    #[arg(long, global = true)]
    rho: Option<f64>,
}

impl SolverOverrides {
    fn apply(&self, admm: &mut AdmmConfig) {
        if let Some(s) = self.seed {
            admm.seed = s;
        }
        if let Some(m) = self.max_iter {
            admm.max_iter = m;
        }
        if let Some(r) = self.rho {
            admm.rho = r;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve all six designs on one data set.
    Batch {
        #[arg(long, required = true)]
        all_designs: bool,
        /// Data directory; the synthetic case study is used with --synthetic.
        #[arg(long, env = DATA_DIR_ENV, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the NTC box certified by a CM-FBMC run.
    NtcDomain {
        #[arg(long)]
        fbmc: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the best-response and deliverability checks of a stored run.
    Verify {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write the synthetic case study as a data directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_for(verified: bool) -> ExitCode {
    if verified {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn summarize(a: &RunArtifact) {
    let c = &a.report.system_costs;
    println!(
        "{:<12} total {:>10.2} MEUR  ENS {:>8.2} MEUR  capacity rent {:>7.2} MEUR  iterations {:>5}  {}",
        a.report.design.name(),
        c.total_meur,
        c.ens_meur,
        a.report.congestion.capacity_meur,
        a.solution.iterations,
        match a.status() {
            RunStatus::Verified => "verified",
            RunStatus::Unverified if !a.solution.converged => "NOT CONVERGED",
            RunStatus::Unverified => "NOT VERIFIED",
        }
    );
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { scenario, out } => {
            let mut cfg = ScenarioConfig::load(&scenario)?;
            cli.solver.apply(&mut cfg.admm);
            if let (Some(seed), DataSource::Synthetic(p)) = (cli.solver.seed, &mut cfg.data) {
                p.seed = seed;
            }
            let artifact = execute(&cfg, None, None)?;
            emit_outputs(&artifact, &out)?;
            summarize(&artifact);
            Ok(exit_for(artifact.status() == RunStatus::Verified))
        }
        Command::Batch {
            data, synthetic, out, ..
        } => {
            let source = match (data, synthetic) {
                (Some(dir), false) => DataSource::Directory(dir),
                (None, true) => DataSource::Synthetic(SynthParams {
                    seed: cli.solver.seed.unwrap_or_default(),
                    ..SynthParams::default()
                }),
                _ => {
                    return Err(capmkt::Error::InvalidParameter(format!(
                        "give --data, set {DATA_DIR_ENV} or pass --synthetic"
                    )))
                }
            };
            let mut base = ScenarioConfig::for_design(MarketDesign::EomCap, source);
            cli.solver.apply(&mut base.admm);
            let (runs, _) = run_batch(&base, &out)?;
            runs.iter().for_each(summarize);
            Ok(exit_for(runs.iter().all(|a| a.status() == RunStatus::Verified)))
        }
        Command::NtcDomain { fbmc, out } => {
            let ntc = ntc_domain(&RunArtifact::load(&fbmc)?)?;
            let text = serde_json::to_string_pretty(&ntc).expect("NTC boxes serialize");
            std::fs::write(&out, text + "\n").map_err(|source| capmkt::Error::Io { path: out, source })?;
            for ((a, b), (p, m)) in ntc.borders.iter().zip(ntc.atc_plus.iter().zip(&ntc.atc_minus)) {
                println!("{a}->{b} {p:.1} MW, {b}->{a} {m:.1} MW");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { run } => {
            let artifact = RunArtifact::load(&run)?;
            let (deviation, deliverability) = artifact.reverify()?;
            println!(
                "{}: converged {}, largest relative gain from deviating {:.3e}, largest overload {:.3e}",
                artifact.setup.design,
                artifact.solution.converged,
                deviation.max_relative,
                deliverability.energy_flows.max(deliverability.capacity)
            );
            Ok(exit_for(
                artifact.solution.converged && deviation.accepted && deliverability.accepted,
            ))
        }
        Command::Synth { out } => {
            let params = SynthParams {
                seed: cli.solver.seed.unwrap_or_default(),
                ..SynthParams::default()
            };
            synthesize_case_study(&params)?.save(&out)?;
            println!("wrote synthetic case study to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
