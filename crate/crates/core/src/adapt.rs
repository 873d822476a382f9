//! Online test-time adaptation: gradient masking against the BatchNorm
//! gradient direction, the per-batch update, and the streaming driver with
//! its baselines.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{summarize, ScoredSet};
use crate::nn::{
    adam_step_selected, backward, AdamState, Batch, BnMode, Checkpoint, GradSet, Model,
};
use crate::postprocess::{self, Corruption, PostprocessConfig};
use crate::seed::{self, Stream};
use crate::synthdata::LabeledSample;
use crate::ttaloss::{
    flip_labels, objective_with_grad, pseudo_label, FocalForm, LossBreakdown, LossConfig, P0Mode,
};

/// Norms below this make a cosine undefined; it is reported as 0.
pub const NORM_FLOOR: f64 = 1e-12;

/// Which tensors an adaptation step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// BatchNorm scale and shift only.
    BnOnly,
    /// BatchNorm always, other tensors when their gradient passes the mask.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub psi: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub focal_form: FocalForm,
    pub p0_mode: P0Mode,
    pub scope: UpdateScope,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            psi: 0.1,
            gamma: 2.0,
            tau: 0.5,
            lr: 1e-4,
            batch_size: 32,
            focal_form: FocalForm::Paper,
            p0_mode: P0Mode::MaxProb,
            scope: UpdateScope::Masked,
        }
    }
}

impl TtaConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            focal_form: self.focal_form,
            p0_mode: self.p0_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        for (key, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("{v} must be finite and nonnegative"));
            }
        }
        if self.psi.is_nan() {
            return bad("psi", "NaN threshold".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", format!("{} is outside [0, 1]", self.tau));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("{} must be finite and nonnegative", self.lr));
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("{} is below 2", self.batch_size));
        }
        self.loss_config().validate()
    }

    /// The configuration a mode actually runs with. The EM-only baseline
    /// drops both negative-learning terms and adapts BN affine parameters only.
    pub fn for_mode(&self, mode: RunMode) -> Self {
        match mode {
            RunMode::EmOnly => Self {
                alpha: 0.0,
                beta: 0.0,
                scope: UpdateScope::BnOnly,
                ..*self
            },
            _ => *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Running statistics, no updates.
    SourceOnly,
    /// Batch statistics, no updates.
    BnStats,
    /// Entropy minimization on BN affine parameters.
    EmOnly,
    /// The full objective with gradient masking.
    T2a,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [Self::SourceOnly, Self::BnStats, Self::EmOnly, Self::T2a];

    pub fn tag(self) -> &'static str {
        match self {
            Self::SourceOnly => "source_only",
            Self::BnStats => "bn_stats",
            Self::EmOnly => "em_only",
            Self::T2a => "t2a",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown run mode `{s}`")))
    }
}

/// Flattens every BN scale and shift gradient in parameter order.
pub fn concat_bn_gradients(grads: &GradSet) -> Result<Vec<f64>> {
    let mut u = Vec::new();
    let mut found = false;
    for t in grads.iter().filter(|t| t.kind.is_bn()) {
        found = true;
        u.extend_from_slice(&t.data);
    }
    if found {
        Ok(u)
    } else {
        Err(Error::InvalidArgument("gradient set has no BatchNorm entries".into()))
    }
}

/// Cosine similarity after zero-padding the shorter vector. 0 when either
/// norm is below [`NORM_FLOOR`].
pub fn padded_cosine(u: &[f64], v: &[f64]) -> f64 {
    let common = u.len().min(v.len());
    let dot: f64 = u[..common].iter().zip(&v[..common]).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub name: String,
    /// Cosine to the BN gradient vector; `None` for BN tensors, which are
    /// never tested.
    pub similarity: Option<f64>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub entries: Vec<MaskEntry>,
    /// Fraction of non-BN tensors kept.
    pub kept_fraction: f64,
}

impl MaskReport {
    pub fn kept(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.kept).collect()
    }
}

/// Keeps a non-BN tensor's gradient iff its cosine to the concatenated BN
/// gradient exceeds `psi`; zeros it otherwise. BN gradients pass untouched.
pub fn mask_gradients(grads: &GradSet, psi: f64) -> Result<(GradSet, MaskReport)> {
    let u = concat_bn_gradients(grads)?;
    let mut masked = grads.clone();
    let mut entries = Vec::with_capacity(grads.len());
    let (mut non_bn, mut kept_non_bn) = (0usize, 0usize);
    for t in masked.iter_mut() {
        if t.kind.is_bn() {
            entries.push(MaskEntry {
                name: t.name.clone(),
                similarity: None,
                kept: true,
            });
            continue;
        }
        let sim = padded_cosine(&u, &t.data);
        let kept = sim > psi;
        non_bn += 1;
        if kept {
            kept_non_bn += 1;
        } else {
            t.data.fill(0.0);
        }
        entries.push(MaskEntry {
            name: t.name.clone(),
            similarity: Some(sim),
            kept,
        });
    }
    let kept_fraction = if non_bn == 0 {
        1.0
    } else {
        kept_non_bn as f64 / non_bn as f64
    };
    Ok((masked, MaskReport { entries, kept_fraction }))
}

/// Everything an online run carries between batches.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRunState {
    pub model: Model,
    pub optimizer: AdamState,
    pub config: TtaConfig,
    /// Batches consumed so far; also the index of the next flip stream.
    pub batches_seen: u64,
    pub seed: u64,
}

const STATE_MAGIC: &[u8; 8] = b"TTARUN\0\0";
const STATE_VERSION: u32 = 1;

impl AdaptRunState {
    pub fn new(model: Model, config: TtaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamState::new(&model.params),
            model,
            config,
            batches_seen: 0,
            seed,
        })
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let config = serde_json::to_vec(&self.config)?;
        w.write_all(STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        w.write_all(&self.batches_seen.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
        .write(w)
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Format("not an adaptation state file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != STATE_VERSION {
            return Err(Error::Format("unsupported adaptation state version".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let batches_seen = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let mut config = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut config)?;
        let config: TtaConfig = serde_json::from_slice(&config)?;
        let ckpt = Checkpoint::read(r)?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Format("adaptation state lacks optimizer moments".into()))?;
        Ok(Self {
            model: ckpt.model,
            optimizer,
            config,
            batches_seen,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// Result of one online step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `p(fake)` of each sample under the state before the update.
    pub scores: Vec<f64>,
    /// Absent when the forward pass itself was not finite.
    pub breakdown: Option<LossBreakdown<f64>>,
    pub mask: Option<MaskReport>,
    /// Set when the step was skipped; parameters are then unchanged.
    pub aborted: Option<String>,
}

/// One pass of the online loop on a batch: batch-statistics forward, pseudo
/// labels, uncertainty flips, the combined objective, backward, masking and
/// an Adam step.
pub fn adapt_step(state: &mut AdaptRunState, batch: &Batch) -> Result<StepOutcome> {
    let cfg = state.config;
    let loss_cfg = cfg.loss_config();
    let (logits, cache) = state.model.forward(batch, BnMode::EvalBatch)?;
    let probs = logits.softmax();
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();

    let pseudo: Vec<_> = probs.iter().map(|p| pseudo_label(p, cfg.tau)).collect();
    let mut flip_rng = seed::rng(state.seed, Stream::Flip, state.batches_seen);
    let noisy = flip_labels(&pseudo, &mut flip_rng);
    state.batches_seen += 1;

    let abort = |reason: String, breakdown, mask| {
        log::warn!("adaptation step skipped: {reason}");
        Ok(StepOutcome {
            scores: scores.clone(),
            breakdown,
            mask,
            aborted: Some(reason),
        })
    };
    if logits.rows.iter().flatten().any(|v| !v.is_finite()) {
        return abort("non-finite logits".into(), None, None);
    }
    let (breakdown, grad_logits) = objective_with_grad(&logits.rows, &noisy, cfg.alpha, cfg.beta, &loss_cfg)?;
    if !breakdown.total.is_finite() {
        return abort(format!("non-finite loss {}", breakdown.total), Some(breakdown), None);
    }

    let grads = backward(&state.model.params, &cache, &grad_logits)?;
    let (grads, selected, mask) = match cfg.scope {
        UpdateScope::BnOnly => {
            let selected: Vec<bool> = grads.iter().map(|t| t.kind.is_bn()).collect();
            (grads, selected, None)
        }
        UpdateScope::Masked => {
            let (masked, report) = mask_gradients(&grads, cfg.psi)?;
            let selected = report.kept();
            (masked, selected, Some(report))
        }
    };
    match adam_step_selected(&mut state.model.params, &grads, &mut state.optimizer, cfg.lr, &selected) {
        Ok(()) => Ok(StepOutcome {
            scores,
            breakdown: Some(breakdown),
            mask,
            aborted: None,
        }),
        Err(Error::NonFiniteGradient(name)) => abort(format!("non-finite gradient in `{name}`"), Some(breakdown), mask),
        Err(e) => Err(e),
    }
}

/// Batch-mean loss terms, serializable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub l_em: f64,
    pub l_nn: f64,
    pub l_p: f64,
    pub l_ntnl: f64,
    pub total: f64,
    pub p0: f64,
}

impl From<&LossBreakdown<f64>> for LossRow {
    fn from(b: &LossBreakdown<f64>) -> Self {
        Self {
            l_em: b.l_em,
            l_nn: b.l_nn,
            l_p: b.l_p,
            l_ntnl: b.l_ntnl,
            total: b.total,
            p0: b.p0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub size: usize,
    /// Why the batch did not follow its mode's normal path, if it did not.
    pub flag: Option<String>,
    pub loss: Option<LossRow>,
    pub kept_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub batch_index: usize,
    pub sample_index: usize,
    pub label: u8,
    pub score: f64,
}

/// ACC, AUC and AP of a stream; AUC and AP are absent when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub acc: f64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

/// Online predictions and diagnostics of one streamed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub corruption: Corruption,
    pub seed: u64,
    pub config: TtaConfig,
    pub metrics: MetricRow,
    pub batches: Vec<BatchRecord>,
    pub predictions: Vec<Prediction>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunReport {
    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.score).collect()
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("batch_index,sample_index,label,score\n");
        for p in &self.predictions {
            out.push_str(&format!("{},{},{},{}\n", p.batch_index, p.sample_index, p.label, p.score));
        }
        out
    }

    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("batch_index,size,flag,l_em,l_nn,l_p,l_ntnl,total,p0,kept_fraction\n");
        for b in &self.batches {
            let l = b.loss;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                b.batch_index,
                b.size,
                b.flag.as_deref().unwrap_or(""),
                fmt_opt(l.map(|l| l.l_em)),
                fmt_opt(l.map(|l| l.l_nn)),
                fmt_opt(l.map(|l| l.l_p)),
                fmt_opt(l.map(|l| l.l_ntnl)),
                fmt_opt(l.map(|l| l.total)),
                fmt_opt(l.map(|l| l.p0)),
                fmt_opt(b.kept_fraction),
            ));
        }
        out
    }
}

/// Streams `samples` through a copy of `model` in mini-batches, corrupting
/// each image first, and scores every sample with the state it met on
/// arrival. A trailing batch of one sample cannot use batch statistics and is
/// scored with the running statistics instead (flagged).
pub fn run_stream(
    model: &Model,
    samples: &[LabeledSample],
    corruption: Corruption,
    postprocess: &PostprocessConfig,
    config: &TtaConfig,
    mode: RunMode,
    seed: u64,
) -> Result<RunReport> {
    if samples.is_empty() {
        return Err(Error::Empty("test stream has no samples".into()));
    }
    let config = config.for_mode(mode);
    let mut state = AdaptRunState::new(model.clone(), config, seed)?;
    let mut batches = Vec::new();
    let mut predictions = Vec::with_capacity(samples.len());

    for (bi, chunk) in samples.chunks(config.batch_size).enumerate() {
        let images = chunk
            .iter()
            .map(|s| postprocess::apply(&s.image, corruption, postprocess))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_images(&images)?;
        let mut record = BatchRecord {
            batch_index: bi,
            size: chunk.len(),
            flag: None,
            loss: None,
            kept_fraction: None,
        };
        let scores = if chunk.len() < 2 {
            record.flag = Some("single_sample_running_stats".into());
            state.model.forward(&batch, BnMode::EvalEma)?.0.fake_probs()
        } else {
            match mode {
                RunMode::SourceOnly => state.model.forward(&batch, BnMode::EvalEma)?.0.fake_probs(),
                RunMode::BnStats => state.model.forward(&batch, BnMode::EvalBatch)?.0.fake_probs(),
                RunMode::EmOnly | RunMode::T2a => {
                    let out = adapt_step(&mut state, &batch)?;
                    record.loss = out.breakdown.as_ref().map(LossRow::from);
                    record.kept_fraction = out.mask.as_ref().map(|m| m.kept_fraction);
                    record.flag = out.aborted;
                    out.scores
                }
            }
        };
        let offset = bi * config.batch_size;
        for (j, (&score, s)) in scores.iter().zip(chunk).enumerate() {
            predictions.push(Prediction {
                batch_index: bi,
                sample_index: offset + j,
                label: s.label.as_u8(),
                score,
            });
        }
        batches.push(record);
    }

    let set = ScoredSet::new(
        predictions.iter().map(|p| p.score).collect(),
        predictions.iter().map(|p| p.label).collect(),
    )?;
    let m = summarize(&set, config.tau)?;
    Ok(RunReport {
        mode,
        corruption,
        seed,
        config,
        metrics: MetricRow {
            acc: m.acc,
            auc: m.auc,
            ap: m.ap,
        },
        batches,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, Tensor};
    use crate::synthdata::{make_stream, DistributionId, StreamSpec};

    fn grads(bn: &[f64], other: &[&[f64]]) -> GradSet {
        let mut ts = vec![Tensor {
            name: "bn.weight".into(),
            kind: LayerKind::BnScale,
            shape: vec![bn.len()],
            data: bn.to_vec(),
        }];
        for (i, o) in other.iter().enumerate() {
            ts.push(Tensor {
                name: format!("w{i}"),
                kind: LayerKind::ConvKernel,
                shape: vec![o.len()],
                data: o.to_vec(),
            });
        }
        GradSet::new(ts).unwrap()
    }

    fn untrained_model() -> Model {
        // Running statistics roughly matched to the data so the EMA path is sane.
        let mut model = Model::init(3);
        let warm = make_stream(&StreamSpec::new(64, DistributionId::Source, 9)).unwrap();
        let imgs: Vec<_> = warm.iter().map(|s| s.image.clone()).collect();
        for chunk in imgs.chunks(16) {
            model.forward(&Batch::from_images(chunk).unwrap(), BnMode::Train).unwrap();
        }
        model
    }

    #[test]
    fn bn_vector_layout() {
        let model = Model::init(0);
        let g = GradSet::zeros_like(&model.params);
        let u = concat_bn_gradients(&g).unwrap();
        assert_eq!(u.len(), 48);
        assert!(u.iter().all(|&v| v == 0.0));
        assert_eq!(u, concat_bn_gradients(&g).unwrap());

        let only_conv = GradSet::new(vec![Tensor::zeros("w", LayerKind::ConvKernel, &[2])]).unwrap();
        assert!(concat_bn_gradients(&only_conv).is_err());
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3, -1.2, 2.0];
        assert!((padded_cosine(&u, &u) - 1.0).abs() < 1e-15);
        assert_eq!(padded_cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let v = padded_cosine(&[1.0, 0.0, 0.0], &[1.0, 1.0]);
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(padded_cosine(&[0.0; 3], &[1.0]), 0.0);
        assert!((padded_cosine(&[1.0], &[-2.0, 0.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_boundaries() {
        let g = grads(&[1.0, 2.0], &[&[1.0, 2.0, 5.0], &[-1.0, 0.5]]);
        let (m, r) = mask_gradients(&g, 1.0).unwrap();
        assert_eq!(r.kept(), vec![true, false, false]);
        assert_eq!(r.kept_fraction, 0.0);
        assert_eq!(m.get(0).data, g.get(0).data);
        assert!(m.get(1).data.iter().chain(&m.get(2).data).all(|&v| v == 0.0));

        let (m, r) = mask_gradients(&g, -1.5).unwrap();
        assert_eq!(r.kept(), vec![true, true, true]);
        assert_eq!(m, g);

        // The first tensor is aligned with u, the second opposes it.
        let (_, r) = mask_gradients(&g, 0.1).unwrap();
        assert_eq!(r.kept(), vec![true, true, false]);
        assert!(r.entries[0].similarity.is_none());
    }

    #[test]
    fn config_validation() {
        assert!(TtaConfig::default().validate().is_ok());
        let bad = TtaConfig { batch_size: 1, ..TtaConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "batch_size"));
        let bad = TtaConfig { alpha: -1.0, ..TtaConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "alpha"));
        let bad = TtaConfig { tau: 1.5, ..TtaConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "tau"));
    }

    #[test]
    fn mode_text_form() {
        for m in RunMode::ALL {
            assert_eq!(m.tag().parse::<RunMode>().unwrap(), m);
        }
        assert!("tent".parse::<RunMode>().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let model = untrained_model();
        let cfg = TtaConfig { lr: 0.0, ..TtaConfig::default() };
        let mut state = AdaptRunState::new(model.clone(), cfg, 1).unwrap();
        let stream = make_stream(&StreamSpec::new(8, DistributionId::Source, 2)).unwrap();
        let imgs: Vec<_> = stream.iter().map(|s| s.image.clone()).collect();
        let batch = Batch::from_images(&imgs).unwrap();
        let out = adapt_step(&mut state, &batch).unwrap();
        assert_eq!(state.model.params, model.params);
        let mut reference = model.clone();
        let expect = reference.forward(&batch, BnMode::EvalBatch).unwrap().0.fake_probs();
        assert_eq!(out.scores, expect);
        assert_eq!(state.batches_seen, 1);
    }

    #[test]
    fn bn_only_scope_leaves_other_tensors() {
        let model = untrained_model();
        let cfg = TtaConfig { scope: UpdateScope::BnOnly, lr: 1e-2, ..TtaConfig::default() };
        let mut state = AdaptRunState::new(model.clone(), cfg, 1).unwrap();
        let stream = make_stream(&StreamSpec::new(8, DistributionId::Source, 2)).unwrap();
        let imgs: Vec<_> = stream.iter().map(|s| s.image.clone()).collect();
        adapt_step(&mut state, &Batch::from_images(&imgs).unwrap()).unwrap();
        for (before, after) in model.params.iter().zip(state.model.params.iter()) {
            if before.kind.is_bn() {
                assert_ne!(before.data, after.data, "{}", before.name);
            } else {
                assert_eq!(before.data, after.data, "{}", before.name);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_without_update() {
        let mut model = untrained_model();
        model.params.get_mut(crate::nn::model::FC_BIAS).data[0] = f64::NAN;
        let mut state = AdaptRunState::new(model.clone(), TtaConfig::default(), 1).unwrap();
        let stream = make_stream(&StreamSpec::new(4, DistributionId::Source, 2)).unwrap();
        let imgs: Vec<_> = stream.iter().map(|s| s.image.clone()).collect();
        let out = adapt_step(&mut state, &Batch::from_images(&imgs).unwrap()).unwrap();
        assert!(out.aborted.is_some());
        for (a, b) in model.params.iter().zip(state.model.params.iter()) {
            let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(state.optimizer, AdamState::new(&model.params));
    }

    #[test]
    fn state_round_trips() {
        let model = untrained_model();
        let mut state = AdaptRunState::new(model, TtaConfig::default(), 77).unwrap();
        let stream = make_stream(&StreamSpec::new(8, DistributionId::Source, 2)).unwrap();
        let imgs: Vec<_> = stream.iter().map(|s| s.image.clone()).collect();
        adapt_step(&mut state, &Batch::from_images(&imgs).unwrap()).unwrap();
        let mut buf = Vec::new();
        state.write(&mut buf).unwrap();
        let back = AdaptRunState::read(buf.as_slice()).unwrap();
        assert_eq!(back, state);
        assert!(AdaptRunState::read(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn trailing_single_sample_is_flagged() {
        let model = untrained_model();
        let stream = make_stream(&StreamSpec::new(9, DistributionId::Source, 4)).unwrap();
        let cfg = TtaConfig { batch_size: 4, ..TtaConfig::default() };
        let report = run_stream(&model, &stream, Corruption::NONE, &PostprocessConfig::default(), &cfg, RunMode::T2a, 3)
            .unwrap();
        assert_eq!(report.batches.len(), 3);
        assert!(report.batches[..2].iter().all(|b| b.flag.is_none() && b.loss.is_some()));
        assert_eq!(report.batches[2].flag.as_deref(), Some("single_sample_running_stats"));
        assert_eq!(report.predictions.len(), 9);
        assert_eq!(report.predictions[8].sample_index, 8);
        assert!(report.predictions_csv().lines().count() == 10);
        assert!(report.diagnostics_csv().lines().count() == 4);
    }

    #[test]
    fn deterministic_replay() {
        let model = untrained_model();
        let stream = make_stream(&StreamSpec::new(24, DistributionId::Source, 5)).unwrap();
        let cfg = TtaConfig { batch_size: 8, lr: 1e-3, ..TtaConfig::default() };
        let pp = PostprocessConfig::default();
        let blur: Corruption = "blur:2".parse().unwrap();
        let a = run_stream(&model, &stream, blur, &pp, &cfg, RunMode::T2a, 11).unwrap();
        let b = run_stream(&model, &stream, blur, &pp, &cfg, RunMode::T2a, 11).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn online_causality() {
        let model = untrained_model();
        let stream = make_stream(&StreamSpec::new(32, DistributionId::Source, 6)).unwrap();
        let cfg = TtaConfig { batch_size: 8, lr: 1e-2, ..TtaConfig::default() };
        let pp = PostprocessConfig::default();
        let full = run_stream(&model, &stream, Corruption::NONE, &pp, &cfg, RunMode::T2a, 2).unwrap();
        let head = run_stream(&model, &stream[..16], Corruption::NONE, &pp, &cfg, RunMode::T2a, 2).unwrap();
        assert_eq!(head.scores(), full.scores()[..16].to_vec());
        // Adaptation changes later predictions relative to a frozen model.
        let frozen = run_stream(&model, &stream, Corruption::NONE, &pp, &cfg, RunMode::BnStats, 2).unwrap();
        assert_eq!(frozen.scores()[..8], full.scores()[..8]);
        assert_ne!(frozen.scores()[8..], full.scores()[8..]);
    }
}
