use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use angioforge::commands;
use angioforge::config::{parse_config, RunConfig};
use angioforge::dataset::generate_dataset;
use angioforge::growth::Layer;
use angioforge::metrics::MetricReport;

#[derive(Parser)]
#[command(name = "angioforge", version, about = "Synthetic OCTA generator and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Seg,
    Reg,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    Svc,
    Dvc,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, render and degrade a dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Apply the degradation pipeline to an existing image/mask pair.
    Degrade {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified k-fold assignment of a label file.
    Split {
        /// CSV with a `sample_id` column and a label column.
        labels: PathBuf,
        #[arg(long, default_value = "label")]
        column: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average model outputs.
    Ensemble {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Prediction directories (seg) or score tables (reg).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Dice and IoU of lesion masks, per class and averaged.
    EvaluateSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// QWK and AUC of ordinal grade predictions.
    EvaluateGrade {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the simulated node tables for one seed.
    DumpForest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "all")]
        layer: LayerArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

fn emit_report(report: &MetricReport, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => report.write_csv(fs::File::create(p)?)?,
        None => report.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            config,
            seed,
            out,
            samples,
            jobs,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(n) = samples {
                cfg.samples = n;
            }
            let rows = generate_dataset(&cfg, jobs)?;
            println!("{} samples in {}", rows.len(), cfg.output_dir.display());
        }
        Command::Degrade {
            config,
            seed,
            image,
            mask,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            for entry in commands::degrade_files(&cfg, &image, &mask, seed, &out)? {
                println!("{entry}");
            }
        }
        Command::Split {
            labels,
            column,
            k,
            seed,
            out,
        } => {
            let hist = commands::split(&labels, &column, k, seed, &out)?;
            let mut stdout = io::stdout().lock();
            let classes = hist.first().map_or(0, Vec::len);
            write!(stdout, "fold")?;
            for c in 0..classes {
                write!(stdout, ",class_{c}")?;
            }
            writeln!(stdout)?;
            for (f, counts) in hist.iter().enumerate() {
                write!(stdout, "{f}")?;
                for n in counts {
                    write!(stdout, ",{n}")?;
                }
                writeln!(stdout)?;
            }
        }
        Command::Ensemble {
            mode,
            threshold,
            out,
            inputs,
        } => {
            let n = match mode {
                Mode::Seg => {
                    if !(0.0..=1.0).contains(&threshold) {
                        bail!("threshold {threshold} outside [0, 1]");
                    }
                    commands::ensemble_seg_dirs(&inputs, threshold, &out)?
                }
                Mode::Reg => commands::ensemble_reg_csvs(&inputs, &out)?,
            };
            println!("{n} samples combined from {} inputs", inputs.len());
        }
        Command::EvaluateSeg { pred, gt, folds, out } => {
            let report = commands::evaluate_seg(&pred, &gt, folds.as_deref())?;
            emit_report(&report, out.as_deref())?;
        }
        Command::EvaluateGrade {
            pred,
            gt,
            k,
            folds,
            out,
        } => {
            let report = commands::evaluate_grade(&pred, &gt, k, folds.as_deref())?;
            emit_report(&report, out.as_deref())?;
        }
        Command::DumpForest {
            config,
            seed,
            layer,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let layers: &[Layer] = match layer {
                LayerArg::Svc => &[Layer::Svc],
                LayerArg::Dvc => &[Layer::Dvc],
                LayerArg::All => &Layer::ALL,
            };
            match out {
                Some(p) => {
                    let mut f = io::BufWriter::new(fs::File::create(&p)?);
                    commands::dump_forest(&cfg, seed, layers, &mut f)?;
                    f.flush()?;
                }
                None => commands::dump_forest(&cfg, seed, layers, &mut io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ANGIOFORGE_LOG", "warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
