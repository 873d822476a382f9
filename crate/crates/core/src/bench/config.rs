//! Experiment configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors naming the key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::adapt::{RunMode, TtaConfig, UpdateScope};
use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::postprocess::{
    resize_intermediate, Corruption, CorruptionKind, KernelSchedule, PostprocessConfig, LEVELS,
};
use crate::synthdata::{DistributionId, StreamSpec};
use crate::ttaloss::{FocalForm, P0Mode};

/// Grid values used by `--paper-grid` validation and the `grid` sweep.
pub const GRID_ALPHA: [f64; 2] = [1.0, 2.0];
pub const GRID_BETA: [f64; 2] = [1.0, 2.0];
pub const GRID_PSI: [f64; 2] = [0.01, 0.1];

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Test streams from the training distribution, then corrupted.
    PostprocOnly,
    /// Test streams from the shifted distribution, then corrupted.
    ShiftAndPostproc,
}

impl Scenario {
    pub fn tag(self) -> &'static str {
        match self {
            Self::PostprocOnly => "postproc_only",
            Self::ShiftAndPostproc => "shift_and_postproc",
        }
    }

    pub fn distribution(self) -> DistributionId {
        match self {
            Self::PostprocOnly => DistributionId::Source,
            Self::ShiftAndPostproc => DistributionId::Shifted,
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "postproc_only" => Ok(Self::PostprocOnly),
            "shift_and_postproc" => Ok(Self::ShiftAndPostproc),
            _ => Err(Error::InvalidArgument(format!("unknown scenario `{s}`"))),
        }
    }
}

/// Source-model training settings used by the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub samples: usize,
    /// Seed of the clean training stream.
    pub stream_seed: u64,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            samples: 2000,
            stream_seed: 1000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub corruptions: Vec<Corruption>,
    pub modes: Vec<RunMode>,
    pub tta: TtaConfig,
    pub seeds: Vec<u64>,
    /// Size and class balance of the test streams. The distribution follows
    /// the scenario and the seed is replaced by each cell's seed.
    pub stream: StreamSpec,
    pub postprocess: PostprocessConfig,
    pub train: TrainSettings,
    /// Images per class rendered by the `spectrum` command.
    pub spectrum_images: usize,
    /// Source checkpoint, relative to the output directory unless absolute.
    #[serde(skip)]
    pub checkpoint: PathBuf,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::PostprocOnly,
            corruptions: CorruptionKind::ALL_ACTIVE
                .into_iter()
                .flat_map(Corruption::levels)
                .collect(),
            modes: RunMode::ALL.to_vec(),
            tta: TtaConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            stream: StreamSpec::new(512, DistributionId::Source, 0),
            postprocess: PostprocessConfig::default(),
            train: TrainSettings::default(),
            spectrum_images: 64,
            checkpoint: PathBuf::from("source.ckpt"),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(key, format!("cannot parse `{v}`")))
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.extend(f(item).map_err(|e| match e {
            Error::Config { .. } => e,
            other => config_err(key, other.to_string()),
        })?);
    }
    if out.is_empty() {
        return Err(config_err(key, "empty list"));
    }
    Ok(out)
}

/// `kind:level`, `none`, a bare kind (all five levels) or `all`.
fn parse_corruptions(item: &str) -> Result<Vec<Corruption>> {
    if item == "all" {
        return Ok(CorruptionKind::ALL_ACTIVE
            .into_iter()
            .flat_map(Corruption::levels)
            .collect());
    }
    if item.contains(':') {
        return Ok(vec![item.parse()?]);
    }
    Ok(Corruption::levels(item.parse()?))
}

fn parse_factors(key: &str, v: &str) -> Result<[f64; LEVELS]> {
    let vals = parse_list(key, v, |s| Ok(vec![parse_num::<f64>(key, s)?]))?;
    vals.try_into()
        .map_err(|_| config_err(key, format!("expected {LEVELS} comma-separated values")))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn focal_tag(f: FocalForm) -> &'static str {
    match f {
        FocalForm::Paper => "paper",
        FocalForm::Standard => "standard",
    }
}

fn p0_tag(p: P0Mode) -> &'static str {
    match p {
        P0Mode::MaxProb => "max_prob",
        P0Mode::FakeProb => "fake_prob",
    }
}

fn scope_tag(s: UpdateScope) -> &'static str {
    match s {
        UpdateScope::BnOnly => "bn_only",
        UpdateScope::Masked => "masked",
    }
}

fn schedule_tag(s: KernelSchedule) -> &'static str {
    match s {
        KernelSchedule::Scaled => "scaled",
        KernelSchedule::Paper => "paper",
    }
}

/// Splits a config file into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(config_err(line, format!("line {} is not `key = value`", i + 1)));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(config_err("", format!("line {} has an empty key", i + 1)));
        }
        if pairs.iter().any(|(seen, _)| *seen == key) {
            return Err(config_err(&key, "repeated key"));
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

impl ExperimentConfig {
    /// Defaults overridden by the keys in `text`. Not validated.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.tta;
        let tag_err = |what: &str| config_err(key, format!("unknown {what} `{v}`"));
        match key {
            "scenario" => self.scenario = v.parse().map_err(|_| tag_err("scenario"))?,
            "corruptions" => self.corruptions = parse_list(key, v, parse_corruptions)?,
            "modes" => {
                self.modes = parse_list(key, v, |s| {
                    if s == "all" {
                        Ok(RunMode::ALL.to_vec())
                    } else {
                        Ok(vec![s.parse()?])
                    }
                })?
            }
            "seeds" => self.seeds = parse_list(key, v, |s| Ok(vec![parse_num(key, s)?]))?,
            "n_samples" => self.stream.n_samples = parse_num(key, v)?,
            "fake_fraction" => self.stream.fake_fraction = parse_num(key, v)?,
            "image_size" => self.stream.image_size = parse_num(key, v)?,
            "alpha" => t.alpha = parse_num(key, v)?,
            "beta" => t.beta = parse_num(key, v)?,
            "psi" => t.psi = parse_num(key, v)?,
            "gamma" => t.gamma = parse_num(key, v)?,
            "tau" => t.tau = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "focal_form" => {
                t.focal_form = match v {
                    "paper" => FocalForm::Paper,
                    "standard" => FocalForm::Standard,
                    _ => return Err(tag_err("focal form")),
                }
            }
            "p0_mode" => {
                t.p0_mode = match v {
                    "max_prob" => P0Mode::MaxProb,
                    "fake_prob" => P0Mode::FakeProb,
                    _ => return Err(tag_err("p0 mode")),
                }
            }
            "scope" => {
                t.scope = match v {
                    "masked" => UpdateScope::Masked,
                    "bn_only" => UpdateScope::BnOnly,
                    _ => return Err(tag_err("update scope")),
                }
            }
            "kernel_schedule" => {
                self.postprocess.kernel_schedule = match v {
                    "scaled" => KernelSchedule::Scaled,
                    "paper" => KernelSchedule::Paper,
                    _ => return Err(tag_err("kernel schedule")),
                }
            }
            "sigma_ratio" => self.postprocess.sigma_ratio = parse_num(key, v)?,
            "saturation_factors" => self.postprocess.saturation_factors = parse_factors(key, v)?,
            "contrast_factors" => self.postprocess.contrast_factors = parse_factors(key, v)?,
            "train_samples" => self.train.samples = parse_num(key, v)?,
            "train_stream_seed" => self.train.stream_seed = parse_num(key, v)?,
            "train_seed" => self.train.train.seed = parse_num(key, v)?,
            "train_epochs" => self.train.train.epochs = parse_num(key, v)?,
            "train_batch_size" => self.train.train.batch_size = parse_num(key, v)?,
            "train_lr" => self.train.train.lr = parse_num(key, v)?,
            "spectrum_images" => self.spectrum_images = parse_num(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(config_err(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key in a fixed order; `from_kv(to_kv())` reproduces `self`.
    pub fn to_kv(&self) -> String {
        let t = &self.tta;
        let p = &self.postprocess;
        let tr = &self.train;
        let lines = [
            ("scenario", self.scenario.tag().to_string()),
            ("corruptions", join(&self.corruptions)),
            ("modes", join(&self.modes)),
            ("seeds", join(&self.seeds)),
            ("n_samples", self.stream.n_samples.to_string()),
            ("fake_fraction", self.stream.fake_fraction.to_string()),
            ("image_size", self.stream.image_size.to_string()),
            ("alpha", t.alpha.to_string()),
            ("beta", t.beta.to_string()),
            ("psi", t.psi.to_string()),
            ("gamma", t.gamma.to_string()),
            ("tau", t.tau.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("focal_form", focal_tag(t.focal_form).to_string()),
            ("p0_mode", p0_tag(t.p0_mode).to_string()),
            ("scope", scope_tag(t.scope).to_string()),
            ("kernel_schedule", schedule_tag(p.kernel_schedule).to_string()),
            ("sigma_ratio", p.sigma_ratio.to_string()),
            ("saturation_factors", join(&p.saturation_factors)),
            ("contrast_factors", join(&p.contrast_factors)),
            ("train_samples", tr.samples.to_string()),
            ("train_stream_seed", tr.stream_seed.to_string()),
            ("train_seed", tr.train.seed.to_string()),
            ("train_epochs", tr.train.epochs.to_string()),
            ("train_batch_size", tr.train.batch_size.to_string()),
            ("train_lr", tr.train.lr.to_string()),
            ("spectrum_images", self.spectrum_images.to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks everything a run would trip over, before any work is done.
    pub fn validate(&self, paper_grid: bool) -> Result<()> {
        self.tta.validate()?;
        if paper_grid {
            let on_grid = |key: &str, v: f64, grid: &[f64]| {
                if grid.contains(&v) {
                    Ok(())
                } else {
                    Err(config_err(key, format!("{v} is not in the paper grid {grid:?}")))
                }
            };
            on_grid("alpha", self.tta.alpha, &GRID_ALPHA)?;
            on_grid("beta", self.tta.beta, &GRID_BETA)?;
            on_grid("psi", self.tta.psi, &GRID_PSI)?;
        }
        let non_empty = |key: &str, len: usize| {
            if len == 0 {
                Err(config_err(key, "empty list"))
            } else {
                Ok(())
            }
        };
        non_empty("corruptions", self.corruptions.len())?;
        non_empty("modes", self.modes.len())?;
        non_empty("seeds", self.seeds.len())?;
        let has_dupes = |v: Vec<String>| {
            let mut s = v.clone();
            s.sort();
            s.dedup();
            s.len() != v.len()
        };
        if has_dupes(self.corruptions.iter().map(|c| c.to_string()).collect()) {
            return Err(config_err("corruptions", "repeated corruption"));
        }
        if has_dupes(self.modes.iter().map(|m| m.to_string()).collect()) {
            return Err(config_err("modes", "repeated mode"));
        }
        if has_dupes(self.seeds.iter().map(|s| s.to_string()).collect()) {
            return Err(config_err("seeds", "repeated seed"));
        }

        let s = &self.stream;
        if s.n_samples < 2 {
            return Err(config_err("n_samples", format!("{} is below 2", s.n_samples)));
        }
        if !(s.fake_fraction > 0.0 && s.fake_fraction < 1.0) {
            return Err(config_err("fake_fraction", format!("{} is outside (0, 1)", s.fake_fraction)));
        }
        if s.image_size < 4 || !s.image_size.is_multiple_of(2) {
            return Err(config_err("image_size", format!("{} must be even and at least 4", s.image_size)));
        }

        let p = &self.postprocess;
        if !(p.sigma_ratio.is_finite() && p.sigma_ratio > 0.0) {
            return Err(config_err("sigma_ratio", format!("{} must be positive", p.sigma_ratio)));
        }
        for (key, fs) in [("saturation_factors", p.saturation_factors), ("contrast_factors", p.contrast_factors)] {
            if fs.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
                return Err(config_err(key, "factors must be finite and nonnegative"));
            }
        }
        for c in &self.corruptions {
            match c.kind() {
                CorruptionKind::GaussianBlur => {
                    let side = p.kernel_side(c.intensity())?;
                    if side > s.image_size {
                        return Err(config_err(
                            "kernel_schedule",
                            format!("{c} needs a {side} px kernel on {} px images", s.image_size),
                        ));
                    }
                }
                CorruptionKind::Resize => {
                    if resize_intermediate(s.image_size, c.intensity())? < 2 {
                        return Err(config_err(
                            "image_size",
                            format!("{c} shrinks {} px images below 2 px", s.image_size),
                        ));
                    }
                }
                _ => {}
            }
        }

        let tr = &self.train;
        if tr.samples < 2 {
            return Err(config_err("train_samples", format!("{} is below 2", tr.samples)));
        }
        if tr.train.epochs == 0 {
            return Err(config_err("train_epochs", "must be at least 1"));
        }
        if tr.train.batch_size < 2 {
            return Err(config_err("train_batch_size", format!("{} is below 2", tr.train.batch_size)));
        }
        if !(tr.train.lr.is_finite() && tr.train.lr > 0.0) {
            return Err(config_err("train_lr", format!("{} must be positive", tr.train.lr)));
        }
        if self.spectrum_images == 0 {
            return Err(config_err("spectrum_images", "must be at least 1"));
        }
        Ok(())
    }

    /// The test stream of one cell seed.
    pub fn stream_for(&self, seed: u64) -> StreamSpec {
        StreamSpec {
            distribution: self.scenario.distribution(),
            seed,
            ..self.stream.clone()
        }
    }

    /// The clean training stream.
    pub fn train_stream(&self) -> StreamSpec {
        StreamSpec {
            n_samples: self.train.samples,
            distribution: DistributionId::Source,
            seed: self.train.stream_seed,
            ..self.stream.clone()
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(&self.checkpoint)
    }

    /// Copy with everything but the seed list, for comparing reports.
    pub(crate) fn without_seeds(&self) -> Self {
        Self {
            seeds: Vec::new(),
            ..self.clone()
        }
    }
}
