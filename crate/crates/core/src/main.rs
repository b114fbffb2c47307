use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ncs_core::experiments::{
    ensemble_report_text, export_outputs, run_ensemble, run_report_text, run_single, run_verify, verify_report_text,
    write_verify_report, Experiment, ExperimentConfig, ExperimentError, PolicyName, RunOptions,
};

#[derive(Parser)]
#[command(name = "ncs", version, about = "Event- and self-triggered networked control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured policies from the configured initial state.
    Run(Common),
    /// Monte-Carlo ensemble over initial states sampled in a ball.
    Ensemble(Common),
    /// Protocol contraction and ISS inequality checks by sampling.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Restrict to one policy (e.g. threshold, self_clock).
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides [output] dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<f64>,
}

enum Failure {
    Config(ExperimentError),
    Run(ExperimentError),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::Parse { .. } | ExperimentError::Trigger(_) => {
                Failure::Config(e)
            }
            _ => Failure::Run(e),
        }
    }
}

fn load(c: &Common) -> Result<Experiment, Failure> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(Failure::Config)?;
    if let Some(p) = &c.policy {
        let p = PolicyName::parse(p)
            .ok_or_else(|| Failure::Config(ExperimentError::Config(format!("unknown policy {p:?}"))))?;
        cfg.policies = vec![p];
    }
    if let Some(s) = c.seed {
        cfg.ensemble.seed = s;
        cfg.verify.seed = s;
    }
    if let Some(h) = c.horizon {
        cfg.horizon = h;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = Some(o.clone());
    }
    // Invalid integrator settings are a configuration problem too.
    Experiment::new(cfg).map_err(Failure::Config)
}

/// `Ok(true)` when every check passed.
fn execute(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Run(c) => {
            let exp = load(&c)?;
            if exp.config.policies.is_empty() {
                return Err(Failure::Config(ExperimentError::Config("no policies configured".into())));
            }
            let x0 = exp.default_initial_x();
            let opts = RunOptions { keep_log: true, certified_stop: false };
            let mut records = Vec::new();
            let mut ok = true;
            for p in &exp.config.policies {
                let built = exp.build(*p)?;
                match run_single(&exp, &built, &x0, opts) {
                    Ok(r) => {
                        println!("{}", run_report_text(&r));
                        ok &= r.monitor.passed();
                        records.push(r);
                    }
                    Err(e) => {
                        eprintln!("{p}: aborted: {e}");
                        ok = false;
                    }
                }
            }
            if let (Some(dir), false) = (&exp.config.output.dir, records.is_empty()) {
                for path in export_outputs(dir, &records, None, exp.protocol.nodes())? {
                    eprintln!("wrote {}", path.display());
                }
            }
            Ok(ok)
        }
        Command::Ensemble(c) => {
            let exp = load(&c)?;
            let report = run_ensemble(&exp)?;
            print!("{}", ensemble_report_text(&report));
            if let Some(dir) = &exp.config.output.dir {
                for path in export_outputs(dir, &[], Some(&report), exp.protocol.nodes())? {
                    eprintln!("wrote {}", path.display());
                }
            }
            Ok(report.clean())
        }
        Command::Verify(c) => {
            let exp = load(&c)?;
            let report = run_verify(&exp);
            print!("{}", verify_report_text(&report));
            if let Some(dir) = &exp.config.output.dir {
                eprintln!("wrote {}", write_verify_report(dir, &report)?.display());
            }
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
