use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mgrb_core::data::generate_synthetic;
use mgrb_core::experiment::{
    discover_runs, load_run, per_class_diff, render_grid, render_run, run_ablation, run_and_write, DatasetSource,
    ExperimentConfig,
};

#[derive(Parser, Debug)]
#[command(name = "mgrb", version, about = "Class-incremental learning with multi-granularity regularized re-balancing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// TOML experiment config; the built-in reference config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set loss.beta=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        Ok(match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides)?,
            None => ExperimentConfig::default().with_overrides(&self.overrides)?,
        })
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one incremental protocol and write its artifacts.
    Run(ConfigArgs),

    /// Run every variant of an ablation grid.
    Ablation {
        #[arg(long, default_value = "table4")]
        grid: String,

        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Print tables for finished runs, or per-class deltas between two.
    Report {
        #[arg(long)]
        dir: PathBuf,

        /// Two run names (subdirectories of --dir) or run directories.
        #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
        diff: Option<Vec<String>>,
    },

    /// Write the synthetic dataset of a config as CSV plus ontology, embedding
    /// and schema files.
    Generate {
        #[arg(long)]
        out: PathBuf,

        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Print the resolved config as TOML.
    Config(ConfigArgs),
}

fn run_dir(base: &Path, name: &str) -> PathBuf {
    let direct = PathBuf::from(name);
    if direct.join("summary.json").is_file() {
        direct
    } else {
        base.join(name)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => {
            let config = args.resolve()?;
            let artifacts = run_and_write(&config)?;
            let s = &artifacts.summary;
            println!(
                "{}: {} phases, last {:.2}, avg {:.2} -> {}",
                s.name,
                s.accuracies.len(),
                100.0 * s.last_accuracy,
                100.0 * s.average_incremental_accuracy,
                config.output_dir.display()
            );
        }
        Command::Ablation { grid, config } => {
            let base = config.resolve()?;
            let runs = run_ablation(&base, &grid)?;
            let summaries: Vec<_> = runs.into_iter().map(|r| r.summary).collect();
            print!("{}", render_grid(&summaries)?);
        }
        Command::Report { dir, diff } => match diff {
            Some(pair) => {
                let a = load_run(&run_dir(&dir, &pair[0])).with_context(|| format!("loading run {}", pair[0]))?;
                let b = load_run(&run_dir(&dir, &pair[1])).with_context(|| format!("loading run {}", pair[1]))?;
                print!("{}", per_class_diff(&a, &b)?);
            }
            None => {
                let runs = discover_runs(&dir)?;
                if let [single] = runs.as_slice() {
                    print!("{}", render_run(single));
                } else {
                    let summaries: Vec<_> = runs.into_iter().map(|r| r.summary).collect();
                    print!("{}", render_grid(&summaries)?);
                }
            }
        },
        Command::Generate { out, config } => {
            let config = config.resolve()?;
            let DatasetSource::Synthetic(spec) = &config.dataset else {
                bail!("generate needs a synthetic dataset config");
            };
            let data = generate_synthetic(spec)?.dataset;
            std::fs::create_dir_all(&out)?;
            data.write_csv(&out.join("data.csv"))?;
            std::fs::write(
                out.join("schema.toml"),
                "label_column = \"label\"\nsplit_column = \"split\"\nstandardize = false\n",
            )?;
            if let Some(o) = &data.ontology {
                std::fs::write(out.join("ontology.txt"), o.to_text())?;
            }
            if let Some(e) = &data.embeddings {
                std::fs::write(out.join("embeddings.txt"), e.to_text())?;
            }
            println!("{} classes, {} train / {} test rows -> {}", data.num_classes(), data.train.len(), data.test.len(), out.display());
        }
        Command::Config(args) => print!("{}", args.resolve()?.to_toml()?),
    }
    Ok(())
}
