use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ttalab::bench::{self, ExperimentConfig};
use ttalab::nn::{train_source, Checkpoint};
use ttalab::postprocess::KernelSchedule;
use ttalab::synthdata::{make_stream, write_stream};
use ttalab::{Error, Result};

#[derive(Parser)]
#[command(name = "ttalab", version, about = "Online test-time adaptation experiments on synthetic real/fake images")]
struct Cli {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single seed replacing the config's seed list (for `train`, the
    /// initialization seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; all written paths are relative to it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict alpha, beta and psi to the published grid values.
    #[arg(long, global = true)]
    paper_grid: bool,
    /// Use the full-resolution blur kernel sides instead of the scaled ones.
    #[arg(long, global = true)]
    paper_kernels: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training stream and one test stream per seed.
    GenData,
    /// Train the source model and write its checkpoint.
    Train,
    /// Run the configured scenario from the source checkpoint.
    Adapt,
    /// Sweep the alpha x beta x psi grid.
    Grid,
    /// Toggle the negative-learning terms and masking.
    Ablate,
    /// Mean spectrum heatmaps and checkerboard scores per corruption.
    Spectrum,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.paper_kernels {
        cfg.postprocess.kernel_schedule = KernelSchedule::Paper;
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Train => cfg.train.train.seed = seed,
            _ => cfg.seeds = vec![seed],
        }
    }
    cfg.validate(cli.paper_grid)?;
    Ok(cfg)
}

fn load_model(cfg: &ExperimentConfig) -> Result<ttalab::nn::Model> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "source checkpoint {} does not exist; run `train` first",
            path.display()
        )));
    }
    Ok(Checkpoint::load(path)?.model)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::GenData => {
            let dir = out.join("streams");
            std::fs::create_dir_all(&dir)?;
            let mut specs = vec![("train".to_string(), cfg.train_stream())];
            for &seed in &cfg.seeds {
                let spec = cfg.stream_for(seed);
                specs.push((format!("{}_seed{seed}", spec.distribution.name()), spec));
            }
            for (name, spec) in specs {
                let path = dir.join(format!("{name}.bin"));
                write_stream(BufWriter::new(File::create(&path)?), &make_stream(&spec)?)?;
                println!("{}", path.display());
            }
        }
        Command::Train => {
            let samples = make_stream(&cfg.train_stream())?;
            let (model, log) = train_source(&samples, &cfg.train.train)?;
            let path = cfg.checkpoint_path();
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Checkpoint {
                model: model.clone(),
                optimizer: None,
            }
            .save(&path)?;
            bench::write_json(&out.join("train_log.json"), &log)?;
            let calibration = bench::calibrate(&cfg, &model)?;
            bench::write_json(&out.join("calibration.json"), &calibration)?;
            for c in &calibration {
                println!("seed {}: clean auc {}", c.seed, c.metrics.auc.unwrap_or(f64::NAN));
            }
            println!("{}", path.display());
        }
        Command::Adapt => {
            let (report, runs) = bench::run_scenario(&cfg)?;
            bench::write_scenario(out, &report, &runs)?;
            print!("{}", bench::summary_csv(&report.summary));
        }
        Command::Grid => {
            let cells = bench::run_grid(&cfg, &load_model(&cfg)?)?;
            bench::write_json(&out.join("grid.json"), &cells)?;
            std::fs::write(out.join("grid.csv"), bench::grid_csv(&cells))?;
            print!("{}", bench::grid_csv(&cells));
        }
        Command::Ablate => {
            let rows = bench::run_ablation(&cfg, &load_model(&cfg)?)?;
            bench::write_json(&out.join("ablation.json"), &rows)?;
            std::fs::write(out.join("ablation.csv"), bench::ablation_csv(&rows))?;
            print!("{}", bench::ablation_csv(&rows));
        }
        Command::Spectrum => {
            let maps = bench::spectrum_heatmaps(&cfg)?;
            bench::write_heatmaps(&out.join("spectrum"), &maps)?;
            for m in &maps {
                println!("{} {} {}", m.class, m.corruption, m.mean_score);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config { .. }) { 2 } else { 1 })
        }
    }
}
