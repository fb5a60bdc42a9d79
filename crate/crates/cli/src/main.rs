use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use cohortfl::config::{validate_suite, ConfigErrors, Suite};
use cohortfl::experiment::{self, RunOptions};
use cohortfl::{io, presets};

#[derive(Parser)]
#[command(name = "cohortfl", version, about = "Simulate siloed, centralized, federated and incremental training over multi-site cohorts")]
struct Cli {
    /// Run only these seeds instead of the config's list (repeatable)
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds run concurrently; 0 uses every core
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment or suite config file
    Run { config: PathBuf },
    /// Run a built-in preset
    Preset {
        /// One of: fig_s1, table2, fig3b, fig4_c_sweep, fig4c, fig4d, fig5cd, embeddings
        name: String,
    },
    /// Check a config file and print it with every default filled in
    Validate { config: PathBuf },
    /// Write the cohort of a config's first seed (or --seed) as CSV
    ExportCohort {
        config: PathBuf,
        path: PathBuf,
        /// Export the training sites after the config's transforms
        #[arg(long)]
        transformed: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(json!({ "kind": "usage", "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let issues = e.chain().find_map(|c| {
                c.downcast_ref::<ConfigErrors>().or_else(|| match c.downcast_ref::<cohortfl::Error>() {
                    Some(cohortfl::Error::InvalidConfig(errs)) => Some(errs),
                    _ => None,
                })
            });
            match issues {
                Some(errs) => {
                    report(json!({
                        "kind": "invalid_config",
                        "message": format!("{e}"),
                        "issues": errs.0,
                    }));
                    ExitCode::from(2)
                }
                None => {
                    report(json!({ "kind": "runtime", "message": format!("{e:#}") }));
                    ExitCode::FAILURE
                }
            }
        }
    }
}

fn report(error: serde_json::Value) {
    eprintln!("{}", json!({ "error": error }));
}

fn load(path: &Path) -> anyhow::Result<Suite> {
    let raw = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut suite = validate_suite(&raw).with_context(|| format!("invalid config {}", path.display()))?;
    suite.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(suite)
}

fn options(cli: &Cli) -> RunOptions {
    RunOptions {
        out_dir: None,
        seeds: (!cli.seeds.is_empty()).then(|| cli.seeds.clone()),
        jobs: cli.jobs,
    }
}

fn run_and_print(cli: &Cli, suite: &Suite, default_out: PathBuf) -> anyhow::Result<()> {
    if let [single] = suite.experiments.as_slice() {
        let opts = RunOptions {
            out_dir: cli.out.clone().or_else(|| Some(experiment::default_out_dir(single))),
            ..options(cli)
        };
        let outcome = experiment::run_experiment(single, &opts)?;
        print!("{}", experiment::summary_text(&outcome.summary));
        println!("\nwrote {}", outcome.out_dir.display());
    } else {
        let out = cli.out.clone().unwrap_or(default_out);
        experiment::run_suite(suite, &out, &options(cli))?;
        print!("{}", fs::read_to_string(out.join("comparison.txt"))?);
        println!("\nwrote {}", out.display());
    }
    Ok(())
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let suite = load(config)?;
            let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            run_and_print(cli, &suite, PathBuf::from("out").join(stem))
        }
        Command::Preset { name } => {
            let suite = presets::preset(name)?;
            run_and_print(cli, &suite, PathBuf::from("out").join(name))
        }
        Command::Validate { config } => {
            let suite = load(config)?;
            let n = suite.experiments.len();
            eprintln!("{}: ok, {n} experiment{}", config.display(), if n == 1 { "" } else { "s" });
            if let [single] = suite.experiments.as_slice() {
                print!("{}", single.to_toml());
            } else {
                print!("{}", suite.to_toml());
            }
            Ok(())
        }
        Command::ExportCohort {
            config,
            path,
            transformed,
        } => {
            let suite = load(config)?;
            if suite.experiments.len() != 1 {
                bail!("export-cohort needs a single-experiment config, found {}", suite.experiments.len());
            }
            let e = &suite.experiments[0];
            let seed = cli.seeds.first().or(e.seeds.first()).copied().unwrap_or(0);
            let sites = if *transformed {
                experiment::prepared_sites(e, seed)?.0
            } else {
                experiment::load_cohort(&e.cohort, seed)?.0
            };
            let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            io::write_cohort(&sites, BufWriter::new(file))?;
            let n: usize = sites.iter().map(|s| s.train.len() + s.holdout.len()).sum();
            println!("wrote {} sites, {n} examples (seed {seed}) to {}", sites.len(), path.display());
            Ok(())
        }
    }
}
