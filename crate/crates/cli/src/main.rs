use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use risgat::harness::{
    evaluate, parse_csv, report, reproduce, run_generate, run_ls_baseline, run_train, write_csv,
    ExperimentConfig, Figure, NmseRecord, SEED_ENV,
};
use risgat::nn::load_checkpoint;

#[derive(Parser)]
#[command(name = "risgat", version, about = "RIS channel estimation: simulate, train, evaluate")]
struct Cli {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides the config file.
    #[arg(long, global = true, env = SEED_ENV)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset.
    Generate {
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a model; generates the dataset on demand.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over the test grid.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to one figure's sweep.
        #[arg(long)]
        figure: Option<u8>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Evaluate the LS baseline over the test grid.
    Baseline {
        #[arg(long)]
        figure: Option<u8>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Merge NMSE CSV files into a CSV and per-figure summary.
    Report {
        #[arg(long = "records", required = true)]
        records: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train, evaluate and report everything one figure needs.
    ReproduceFig {
        #[arg(value_parser = clap::value_parser!(u8).range(3..=6))]
        figure: u8,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn figures(selected: Option<u8>) -> Result<Vec<Figure>> {
    Ok(match selected {
        Some(n) => vec![Figure::from_number(n)?],
        None => Figure::ALL.to_vec(),
    })
}

fn write_records(cfg: &ExperimentConfig, records: &[NmseRecord], out: &Path) -> Result<()> {
    let (csv, json) = report(records, &cfg.evaluation, out)?;
    cfg.write_resolved(out)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate { out } => {
            let d = run_generate(&cfg, out)?;
            println!("{} samples written to {}", d.samples.len(), out.display());
        }
        Command::Train { data, out } => {
            let (_, log) = run_train(&cfg, data.as_deref(), out)?;
            for e in &log.epochs {
                println!(
                    "epoch {:>2}  train {:.6}  val {:.6}  {:.1}s",
                    e.epoch, e.train_loss, e.val_loss, e.wall_time_s
                );
            }
            println!("restored epoch {} (val {:.6})", log.best_epoch, log.best_val_loss);
        }
        Command::Evaluate { checkpoint, figure, out } => {
            let (model, _) = load_checkpoint(checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let (n, m) = (model.arch.n_elements, model.arch.m_pilots);
            let points: Vec<_> = cfg
                .evaluation
                .points_for(&figures(*figure)?)
                .into_iter()
                .filter(|p| (p.n_elements, p.m_pilots) == (n, m))
                .collect();
            if points.is_empty() {
                bail!("the grid has no points for N = {n}, M = {m}");
            }
            let records = evaluate(&model, &cfg.bench(n, m)?, &points)?;
            write_records(&cfg, &records, out)?;
        }
        Command::Baseline { figure, out } => {
            let mut records = Vec::new();
            let points = cfg.evaluation.points_for(&figures(*figure)?);
            for &n in &cfg.evaluation.n_elements {
                for &m in &cfg.evaluation.m_pilots {
                    let here: Vec<_> = points
                        .iter()
                        .filter(|p| (p.n_elements, p.m_pilots) == (n, m))
                        .copied()
                        .collect();
                    records.extend(run_ls_baseline(&cfg.bench(n, m)?, &here)?);
                }
            }
            write_records(&cfg, &records, out)?;
        }
        Command::Report { records, out } => {
            let mut all = Vec::new();
            for path in records {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                all.extend(parse_csv(&text).with_context(|| format!("parsing {}", path.display()))?);
            }
            write_records(&cfg, &all, out)?;
        }
        Command::ReproduceFig { figure, out } => {
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.output.dir.join(format!("fig{figure}")));
            let records = reproduce(&cfg, &[Figure::from_number(*figure)?], &out)?;
            write_csv(&records, std::io::stdout())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn figure_argument_is_range_checked() {
        assert!(Cli::try_parse_from(["risgat", "reproduce-fig", "7"]).is_err());
        assert!(Cli::try_parse_from(["risgat", "reproduce-fig", "5"]).is_ok());
    }
}
