use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfg_cli::config::parse_experiment;
use mfg_cli::run::{self, prediction_csv, prediction_table};
use mfg_cli::{RunConfig, RunError, RunKind, Settings};

#[derive(Parser)]
#[command(name = "mfg-branches", version, about = "Bifurcation prediction and branch continuation for two-population mean-field games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the bifurcation table.
    Predict(Common),
    /// Newton solve at one horizon from the local guess of a branch.
    Solve(Common),
    /// Seed one branch and follow it in T.
    Continue(Common),
    /// Run a preset experiment (id 1..5 or name).
    Experiment {
        id: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    /// Use the 400 x 400 grid.
    #[arg(long)]
    paper_grid: bool,
    #[arg(long)]
    eps: Option<f64>,
    /// Branch label `n` or `n,k`.
    #[arg(long)]
    branch: Option<String>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    /// `increasing`, `decreasing` or `both`.
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Any config key, e.g. `--set newton.tol=1e-10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<(Settings, Settings), RunError> {
        let file = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        let mut cli = Settings::default();
        let flags: [(&str, Option<String>); 11] = [
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("nx", self.nx.map(|v| v.to_string())),
            ("nt", self.nt.map(|v| v.to_string())),
            ("paper_grid", self.paper_grid.then(|| "true".into())),
            ("eps", self.eps.map(|v| v.to_string())),
            ("branch", self.branch.clone()),
            ("t", self.t.map(|v| v.to_string())),
            ("t_min", self.t_min.map(|v| v.to_string())),
            ("t_max", self.t_max.map(|v| v.to_string())),
            ("direction", self.direction.clone()),
            ("workers", self.workers.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cli.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                mfg_cli::ConfigError::Invalid(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            cli.set(k.trim(), v.trim())?;
        }
        Ok((file, cli))
    }
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Predict(c) => {
            let (file, over) = c.settings()?;
            let cfg = RunConfig::resolve(RunKind::Predict, &file, &over)?;
            let rows = run::predict(&cfg)?;
            print!("{}", prediction_table(&rows));
            if let Some(dir) = &cfg.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("predictions.csv"), prediction_csv(&rows))?;
            }
        }
        Command::Solve(c) => {
            let (file, over) = c.settings()?;
            let cfg = RunConfig::resolve(RunKind::Solve, &file, &over)?;
            let dir = run::solve(&cfg)?;
            println!("wrote {}", dir.display());
        }
        Command::Continue(c) => {
            let (file, over) = c.settings()?;
            let cfg = RunConfig::resolve(RunKind::Continue, &file, &over)?;
            let dir = run::continue_run(&cfg)?;
            println!("wrote {}", dir.display());
        }
        Command::Experiment { id, common } => {
            let exp = parse_experiment(&id)?;
            let (file, over) = common.settings()?;
            let cfg = RunConfig::resolve(RunKind::Experiment(exp), &file, &over)?;
            let dir = run::experiment(&cfg)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
