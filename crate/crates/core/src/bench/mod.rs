//! Experiment harness: scenario orchestration over (mode, corruption, seed)
//! cells, seed aggregation, the hyperparameter grid, the component ablation
//! and spectrum heatmaps.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::adapt::{run_stream, MetricRow, RunMode, RunReport, UpdateScope};
use crate::error::{Error, Result};
use crate::image::CHANNELS;
use crate::nn::{Checkpoint, Model};
use crate::postprocess::{self, Corruption, CorruptionKind};
use crate::spectrum::{dft2, Spectrum};
use crate::synthdata::{gen_fake_sized, gen_real_sized, image_checkerboard_score, make_stream};

pub use config::{ExperimentConfig, Scenario, TrainSettings, DEFAULT_SEEDS, GRID_ALPHA, GRID_BETA, GRID_PSI};

/// Corruption column of the averaged row.
pub const AVERAGE: &str = "average";

/// Metrics of one (mode, corruption, seed) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellRow {
    pub mode: RunMode,
    pub corruption: Corruption,
    pub seed: u64,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Mean and spread across seeds of one mode on one corruption kind (its
/// levels averaged first), or on the average over kinds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mode: RunMode,
    pub corruption: String,
    pub n_seeds: usize,
    pub acc: Stat,
    pub auc: Stat,
    pub ap: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellRow>,
    pub summary: Vec<SummaryRow>,
}

// Undefined AUC/AP propagate as NaN into the aggregates.
fn metric_triple(m: &MetricRow) -> [f64; 3] {
    [m.acc, m.auc.unwrap_or(f64::NAN), m.ap.unwrap_or(f64::NAN)]
}

fn mean3(rows: &[[f64; 3]]) -> [f64; 3] {
    let n = rows.len() as f64;
    let mut out = [0.0; 3];
    for r in rows {
        for k in 0..3 {
            out[k] += r[k];
        }
    }
    out.map(|v| v / n)
}

/// Per-level metric triples of one kind, keyed by seed.
type LevelsBySeed = BTreeMap<u64, Vec<[f64; 3]>>;

fn summary_row(mode: RunMode, corruption: String, per_seed: &[[f64; 3]]) -> SummaryRow {
    let col = |k: usize| Stat::of(&per_seed.iter().map(|r| r[k]).collect::<Vec<_>>());
    SummaryRow {
        mode,
        corruption,
        n_seeds: per_seed.len(),
        acc: col(0),
        auc: col(1),
        ap: col(2),
    }
}

/// Groups cells by (mode, corruption kind), averages each seed over the
/// kind's levels, then summarizes across seeds. The `average` row per mode is
/// the mean of its per-kind means over the active kinds present; `none`
/// cells get their own row but stay out of the average.
pub fn aggregate_cells(cells: &[CellRow]) -> Result<Vec<SummaryRow>> {
    let mut seen = BTreeMap::new();
    for c in cells {
        if seen.insert((c.mode, c.corruption, c.seed), ()).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate cell {} {} seed {}",
                c.mode, c.corruption, c.seed
            )));
        }
    }
    let mut groups: BTreeMap<RunMode, BTreeMap<CorruptionKind, LevelsBySeed>> = BTreeMap::new();
    for c in cells {
        groups
            .entry(c.mode)
            .or_default()
            .entry(c.corruption.kind())
            .or_default()
            .entry(c.seed)
            .or_default()
            .push(metric_triple(&c.metrics));
    }

    let mut rows = Vec::new();
    for (mode, kinds) in &groups {
        let mut by_seed_active: BTreeMap<u64, Vec<[f64; 3]>> = BTreeMap::new();
        let mut active_kinds = 0;
        for (kind, seeds) in kinds {
            let per_seed: Vec<[f64; 3]> = seeds.values().map(|levels| mean3(levels)).collect();
            rows.push(summary_row(*mode, kind.tag().to_string(), &per_seed));
            if *kind != CorruptionKind::None {
                active_kinds += 1;
                for (seed, levels) in seeds {
                    by_seed_active.entry(*seed).or_default().push(mean3(levels));
                }
            }
        }
        if active_kinds > 0 {
            if by_seed_active.values().any(|v| v.len() != active_kinds) {
                return Err(Error::InvalidArgument(format!(
                    "mode {mode}: corruption kinds were not run on the same seeds"
                )));
            }
            let per_seed: Vec<[f64; 3]> = by_seed_active.values().map(|v| mean3(v)).collect();
            rows.push(summary_row(*mode, AVERAGE.to_string(), &per_seed));
        }
    }
    Ok(rows)
}

/// Merges reports of one configuration (seed lists may differ) and
/// summarizes all their cells together.
pub fn aggregate(reports: &[ScenarioReport]) -> Result<Vec<SummaryRow>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Empty("no reports to aggregate".into()))?;
    let base = first.config.without_seeds();
    if reports.iter().any(|r| r.config.without_seeds() != base) {
        return Err(Error::InvalidArgument("reports come from different configs".into()));
    }
    let cells: Vec<CellRow> = reports.iter().flat_map(|r| r.cells.iter().copied()).collect();
    aggregate_cells(&cells)
}

fn load_model(config: &ExperimentConfig) -> Result<Model> {
    let path = config.checkpoint_path();
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "source checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Checkpoint::load(&path)?.model)
}

/// Runs every (mode, corruption, seed) cell from a fresh copy of `model`.
/// Per-cell run reports come back in the same order as the cells.
pub fn run_cells(config: &ExperimentConfig, model: &Model) -> Result<(ScenarioReport, Vec<RunReport>)> {
    let mut streams = BTreeMap::new();
    for &seed in &config.seeds {
        streams.insert(seed, make_stream(&config.stream_for(seed))?);
    }
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for &mode in &config.modes {
        for &corruption in &config.corruptions {
            for &seed in &config.seeds {
                log::info!("cell {mode} {corruption} seed {seed}");
                let run = run_stream(
                    model,
                    &streams[&seed],
                    corruption,
                    &config.postprocess,
                    &config.tta,
                    mode,
                    seed,
                )?;
                cells.push(CellRow {
                    mode,
                    corruption,
                    seed,
                    metrics: run.metrics,
                });
                runs.push(run);
            }
        }
    }
    let summary = aggregate_cells(&cells)?;
    let report = ScenarioReport {
        config: config.clone(),
        cells,
        summary,
    };
    Ok((report, runs))
}

/// Loads the source checkpoint named by `config` and runs the scenario.
pub fn run_scenario(config: &ExperimentConfig) -> Result<(ScenarioReport, Vec<RunReport>)> {
    let model = load_model(config)?;
    run_cells(config, &model)
}

/// Clean-stream source-model metrics per seed: the `none` cell of
/// [`RunMode::SourceOnly`], computed by the same code path.
pub fn calibrate(config: &ExperimentConfig, model: &Model) -> Result<Vec<CellRow>> {
    let clean = ExperimentConfig {
        modes: vec![RunMode::SourceOnly],
        corruptions: vec![Corruption::NONE],
        ..config.clone()
    };
    Ok(run_cells(&clean, model)?.0.cells)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
    pub psi: f64,
    pub summary: Vec<SummaryRow>,
}

/// The full alpha x beta x psi cross product of the adaptation method.
pub fn run_grid(config: &ExperimentConfig, model: &Model) -> Result<Vec<GridCell>> {
    let mut out = Vec::new();
    for alpha in GRID_ALPHA {
        for beta in GRID_BETA {
            for psi in GRID_PSI {
                let mut cfg = config.clone();
                cfg.modes = vec![RunMode::T2a];
                cfg.tta.alpha = alpha;
                cfg.tta.beta = beta;
                cfg.tta.psi = psi;
                cfg.validate(true)?;
                let summary = run_cells(&cfg, model)?.0.summary;
                out.push(GridCell {
                    alpha,
                    beta,
                    psi,
                    summary,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub l_nn: bool,
    pub l_p: bool,
    pub masking: bool,
    /// The averaged row (or the single kind's row when only one is run).
    pub result: SummaryRow,
}

/// Component switches of the ablation, entropy minimization always on.
pub const ABLATION_ROWS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (true, true, false),
    (true, true, true),
];

/// Switching a loss off zeroes its weight; switching masking off restricts
/// updates to BN affine parameters.
pub fn run_ablation(config: &ExperimentConfig, model: &Model) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for (l_nn, l_p, masking) in ABLATION_ROWS {
        let mut cfg = config.clone();
        cfg.modes = vec![RunMode::T2a];
        if !l_nn {
            cfg.tta.alpha = 0.0;
        }
        if !l_p {
            cfg.tta.beta = 0.0;
        }
        cfg.tta.scope = if masking { UpdateScope::Masked } else { UpdateScope::BnOnly };
        let summary = run_cells(&cfg, model)?.0.summary;
        let result = summary
            .iter()
            .find(|r| r.corruption == AVERAGE)
            .or(summary.last())
            .cloned()
            .ok_or_else(|| Error::Empty("ablation produced no rows".into()))?;
        out.push(AblationRow {
            l_nn,
            l_p,
            masking,
            result,
        });
    }
    Ok(out)
}

/// Mean spectrum and checkerboard score of one image class under one
/// corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub class: &'static str,
    pub corruption: Corruption,
    pub mean_score: f64,
    /// Centred `log1p` of the channel- and image-averaged DFT magnitude.
    pub csv: String,
}

pub fn spectrum_heatmaps(config: &ExperimentConfig) -> Result<Vec<Heatmap>> {
    let size = config.stream.image_size;
    let dist = config.scenario.distribution();
    let n = config.spectrum_images;
    let base = config.seeds.first().copied().unwrap_or(0);
    let reals: Vec<_> = (0..n as u64).map(|i| gen_real_sized(base * 1_000_003 + i, dist, size)).collect();
    let fakes: Vec<_> = (0..n as u64).map(|i| gen_fake_sized(base * 1_000_003 + i, dist, size)).collect();

    let mut corruptions = vec![Corruption::NONE];
    corruptions.extend(config.corruptions.iter().copied().filter(|c| *c != Corruption::NONE));
    let mut out = Vec::new();
    for corruption in corruptions {
        for (class, images) in [("real", &reals), ("fake", &fakes)] {
            let mut mag = vec![0.0; size * size];
            let mut score = 0.0;
            for img in images.iter() {
                let img = postprocess::apply(img, corruption, &config.postprocess)?;
                score += image_checkerboard_score(&img);
                for ch in img.channels() {
                    for (m, c) in mag.iter_mut().zip(dft2(&ch)?.coeffs()) {
                        *m += c.norm();
                    }
                }
            }
            let scale = (images.len() * CHANNELS) as f64;
            let coeffs = mag.iter().map(|m| num_complex::Complex::new(m / scale, 0.0)).collect();
            let spec = Spectrum::from_coeffs(size, size, coeffs)?.fftshift();
            out.push(Heatmap {
                class,
                corruption,
                mean_score: score / images.len() as f64,
                csv: spec.log_magnitude_csv(),
            });
        }
    }
    Ok(out)
}

fn fmt_f(v: f64) -> String {
    v.to_string()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub fn cells_csv(cells: &[CellRow]) -> String {
    let mut out = String::from("mode,corruption,seed,acc,auc,ap\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.mode,
            c.corruption,
            c.seed,
            fmt_f(c.metrics.acc),
            fmt_opt(c.metrics.auc),
            fmt_opt(c.metrics.ap)
        ));
    }
    out
}

/// Inverse of [`cells_csv`].
pub fn parse_cells_csv(text: &str) -> Result<Vec<CellRow>> {
    let bad = |line: &str| Error::Format(format!("bad cell row `{line}`"));
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(s))
        }
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(CellRow {
                mode: f[0].parse()?,
                corruption: f[1].parse()?,
                seed: f[2].parse().map_err(|_| bad(line))?,
                metrics: MetricRow {
                    acc: f[3].parse().map_err(|_| bad(line))?,
                    auc: opt(f[4])?,
                    ap: opt(f[5])?,
                },
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "mode,corruption,n_seeds,acc_mean,acc_std,auc_mean,auc_std,ap_mean,ap_std";

fn summary_fields(r: &SummaryRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.mode,
        r.corruption,
        r.n_seeds,
        fmt_f(r.acc.mean),
        fmt_f(r.acc.std),
        fmt_f(r.auc.mean),
        fmt_f(r.auc.std),
        fmt_f(r.ap.mean),
        fmt_f(r.ap.std)
    )
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&summary_fields(r));
        out.push('\n');
    }
    out
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = format!("alpha,beta,psi,{SUMMARY_HEADER}\n");
    for g in cells {
        for r in &g.summary {
            out.push_str(&format!("{},{},{},{}\n", g.alpha, g.beta, g.psi, summary_fields(r)));
        }
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("l_em,l_nn,l_p,masking,{SUMMARY_HEADER}\n");
    for a in rows {
        out.push_str(&format!(
            "true,{},{},{},{}\n",
            a.l_nn,
            a.l_p,
            a.masking,
            summary_fields(&a.result)
        ));
    }
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::write(path, contents)?)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

/// File stem of a cell, e.g. `t2a_blur-4_seed3`.
pub fn cell_stem(run: &RunReport) -> String {
    format!("{}_{}_seed{}", run.mode, run.corruption.to_string().replace(':', "-"), run.seed)
}

/// Writes `report.json`, `cells.csv`, `summary.csv` and, per cell, the run
/// JSON plus prediction and diagnostics CSVs under `runs/`.
pub fn write_scenario(dir: &Path, report: &ScenarioReport, runs: &[RunReport]) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write(&dir.join("cells.csv"), cells_csv(&report.cells))?;
    write(&dir.join("summary.csv"), summary_csv(&report.summary))?;
    let runs_dir = dir.join("runs");
    for run in runs {
        let stem = cell_stem(run);
        write_json(&runs_dir.join(format!("{stem}.json")), run)?;
        write(&runs_dir.join(format!("{stem}.predictions.csv")), run.predictions_csv())?;
        write(&runs_dir.join(format!("{stem}.diagnostics.csv")), run.diagnostics_csv())?;
    }
    Ok(())
}

pub fn write_heatmaps(dir: &Path, maps: &[Heatmap]) -> Result<()> {
    let mut scores = String::from("class,corruption,mean_checkerboard_score\n");
    for m in maps {
        let name = format!("{}_{}.csv", m.class, m.corruption.to_string().replace(':', "-"));
        write(&dir.join(name), &m.csv)?;
        scores.push_str(&format!("{},{},{}\n", m.class, m.corruption, m.mean_score));
    }
    write(&dir.join("scores.csv"), scores)
}
