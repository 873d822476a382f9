use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::model::{backward, softmax2, Batch, BnMode, Model};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::synthdata::LabeledSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy over the batches of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Mean cross-entropy of a batch and its gradient on the logits.
pub fn cross_entropy(logits: &[[f64; 2]], labels: &[usize]) -> (f64, Vec<[f64; 2]>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let p = softmax2(*z);
            loss -= p[y].max(1e-300).ln();
            let mut g = [p[0] / n, p[1] / n];
            g[y] -= 1.0 / n;
            g
        })
        .collect();
    (loss / n, grads)
}

/// Cross-entropy training with Adam on clean source samples. Deterministic in
/// `cfg.seed`: initialization and per-epoch shuffles derive from it.
pub fn train_source(samples: &[LabeledSample], cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::Empty("training stream has no samples".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("training batch size must be at least 2".into()));
    }
    let mut model = Model::init(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = Batch::from_images(chunk.iter().map(|&i| &samples[i].image))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label as usize).collect();
            let (logits, cache) = model.forward(&batch, BnMode::Train)?;
            let (loss, up) = cross_entropy(&logits.rows, &labels);
            let grads = backward(&model.params, &cache, &up)?;
            adam_step(&mut model.params, &grads, &mut adam, cfg.lr)?;
            total += loss;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { f64::NAN };
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        epoch_loss.push(mean);
    }
    Ok((model, TrainLog { epoch_loss }))
}
