//! Runs the scripted desk experiments and writes one JSON report per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xlemo::repro::{expected_metrics, experiments, run_experiment, Workspace};

#[derive(Parser)]
#[command(name = "repro", about = "Desk-scale reproduction experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// List experiments with their criterion numbers.
    List,
    /// Run one experiment by name, or `all`.
    Run {
        name: String,
        /// Holds the generated corpus and cached checkpoints.
        #[arg(long, default_value = "repro_work")]
        workdir: PathBuf,
        /// Fail instead of building a missing corpus or checkpoint.
        #[arg(long)]
        no_build: bool,
        /// JSONL report file; defaults to `<workdir>/reports.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let kind = e.downcast_ref::<xlemo::Error>().map_or("other", |e| e.kind());
            eprintln!("error kind={kind} message={:?}", format!("{e:#}"));
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::List => {
            let expected = expected_metrics()?;
            for e in experiments() {
                let spec = &expected[e.name];
                println!("{:>2}  {:<20} {}", spec.criterion, e.name, spec.description);
            }
            Ok(true)
        }
        Cmd::Run {
            name,
            workdir,
            no_build,
            report,
            quiet,
        } => {
            let names: Vec<String> = if name == "all" {
                experiments().iter().map(|e| e.name.to_string()).collect()
            } else {
                vec![name]
            };
            let mut ws = Workspace::new(&workdir, !no_build)?;
            ws.progress = !quiet;
            let report = report.unwrap_or_else(|| workdir.join("reports.jsonl"));
            let mut all_pass = true;
            for n in names {
                let r = run_experiment(&n, &mut ws)?;
                println!("{}", r.summary());
                let mut f = OpenOptions::new().create(true).append(true).open(&report)?;
                writeln!(f, "{}", r.to_json_line())?;
                all_pass &= r.pass;
            }
            Ok(all_pass)
        }
    }
}
