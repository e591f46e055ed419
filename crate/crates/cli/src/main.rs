use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skillmix::allocation::AllocationFile;
use skillmix::experiment::{compare, parse_config, run_experiment, sweep, ExperimentConfig, RunRecord};
use skillmix::hierarchy::export_hierarchy;
use skillmix::model::ModelKind;
use skillmix::report::emit_plot_data;
use skillmix::Error;

/// Latent-skill multitask experiments on planted synthetic worlds.
#[derive(Parser, Debug)]
#[command(name = "skillmix", version)]
struct Cli {
    /// Root for run directories; overrides the config's `output_dir`.
    #[arg(long, global = true, env = "SKILLMIX_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, evaluate and adapt one configuration.
    Run { config: PathBuf },
    /// One run per skill-inventory size.
    Sweep {
        config: PathBuf,
        /// Inventory sizes, e.g. `S=2,4,8,16,32`; defaults to the config's grid.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<Grid>,
    },
    /// The same world under several model kinds.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "skilled,shared,private,expert,hypernet")]
        kinds: Vec<ModelKind>,
    },
    /// Group tasks of an allocation file by skill subset.
    ExportHierarchy {
        allocation: PathBuf,
        /// Print the containment diagram instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Long-format CSV tables from finished run directories.
    EmitPlots {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Destination directory; defaults to `<output root>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
struct Grid(Vec<usize>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let list = s.strip_prefix("S=").unwrap_or(s);
    list.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad grid entry `{v}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Grid)
}

/// Writes to stdout; a closed pipe (`skillmix ... | head`) ends the process quietly.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{text}").and_then(|()| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("cannot write output: {e}");
        std::process::exit(2);
    }
}

/// Failures split by exit code: bad input (1) or a failed run (2).
enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn load_config(path: &Path, root: &Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = parse_config(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(r) = root {
        cfg.output_dir = r.clone();
    }
    Ok(cfg)
}

/// Config errors raised by the orchestration itself (grid, kinds) keep exit code 1.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config { .. } => Failure::Config(e.to_string()),
        other => Failure::Run(other.to_string()),
    }
}

fn report(records: &[RunRecord]) -> Result<(), Failure> {
    for r in records {
        emit(&r.dir.display().to_string());
    }
    let failed: Vec<String> = records
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|f| format!("{}: {} ({})", r.dir.display(), f.message, f.stage)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(failed.join("\n")))
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config, &cli.output_root)?;
            let rec = run_experiment(&cfg).map_err(classify)?;
            report(std::slice::from_ref(&rec))
        }
        Command::Sweep { config, grid } => {
            let cfg = load_config(&config, &cli.output_root)?;
            let out = sweep(&cfg, grid.as_ref().map(|g| g.0.as_slice())).map_err(classify)?;
            emit(&out.table.display().to_string());
            report(&out.records)
        }
        Command::Compare { config, kinds } => {
            let cfg = load_config(&config, &cli.output_root)?;
            let out = compare(&cfg, &kinds).map_err(classify)?;
            emit(&out.table.display().to_string());
            report(&out.records)
        }
        Command::ExportHierarchy { allocation, text } => {
            let read = || -> skillmix::Result<_> {
                let file: AllocationFile = serde_json::from_str(&std::fs::read_to_string(&allocation)?)?;
                export_hierarchy(&file.hardened()?, &file.tasks)
            };
            let h = read().map_err(|e| Failure::Config(format!("{}: {e}", allocation.display())))?;
            if text {
                emit(h.render_text().trim_end());
            } else {
                let json = serde_json::to_string_pretty(&h.to_json()).map_err(Error::from)?;
                emit(&json);
            }
            Ok(())
        }
        Command::EmitPlots { run_dirs, out } => {
            let records = run_dirs
                .iter()
                .map(|d| RunRecord::load(d).map_err(|e| Failure::Config(format!("{}: {e}", d.display()))))
                .collect::<Result<Vec<_>, _>>()?;
            let out = out.unwrap_or_else(|| {
                cli.output_root
                    .clone()
                    .unwrap_or_else(|| records[0].config.output_dir.clone())
                    .join("plots")
            });
            let files = emit_plot_data(&records, &out)?;
            for p in [files.curves, files.eval_curves, files.sweep] {
                emit(&p.display().to_string());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors count as configuration errors; help and version succeed
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("run failed: {msg}");
            ExitCode::from(2)
        }
    }
}
