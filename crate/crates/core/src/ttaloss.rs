//! Adaptation objectives for binary detectors: entropy, thresholded
//! pseudo-labels, uncertainty-driven label flips, the focal base loss, the
//! normalized (negative) loss, the passive loss and their combination.
//!
//! Every loss here is a function of `q = p(y = 1 | x)` per sample (plus the
//! batch-level `p0` of the passive term), so gradients with respect to the
//! logits are assembled as `dL/dq * q (1 - q) * (-1, +1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Guard on the denominators of the normalized and passive losses.
pub const DENOM_EPS: f64 = 1e-8;

/// Modulating factor of the focal base loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalForm {
    /// `-(1 - p^gamma) log p`.
    Paper,
    /// `-(1 - p)^gamma log p`.
    Standard,
}

/// What the passive loss's `p0` is the batch minimum of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P0Mode {
    /// `max_c p(c | x)`, the confidence of the predicted class.
    MaxProb,
    /// `p(y = 1 | x)`.
    FakeProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub focal_form: FocalForm,
    pub p0_mode: P0Mode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            focal_form: FocalForm::Paper,
            p0_mode: P0Mode::MaxProb,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.focal_form {
            // gamma = 0 zeroes the paper-form loss everywhere.
            FocalForm::Paper => self.gamma > 0.0,
            FocalForm::Standard => self.gamma >= 0.0,
        };
        if !ok || !self.gamma.is_finite() {
            return Err(Error::Config {
                key: "gamma".into(),
                reason: format!("gamma {} is degenerate for the {:?} focal form", self.gamma, self.focal_form),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel<T> {
    pub hat_y: usize,
    /// Probability of class `hat_y`.
    pub confidence: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoisyLabel {
    pub tilde_y: usize,
    pub flipped: bool,
}

/// Batch-mean loss terms with their per-sample values.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_em: T,
    pub l_nn: T,
    pub l_p: T,
    pub l_ntnl: T,
    pub total: T,
    pub p0: T,
    pub per_sample_em: Vec<T>,
    pub per_sample_nn: Vec<T>,
    pub per_sample_p: Vec<T>,
}

pub fn softmax<T: Scalar>(z: [T; 2]) -> [T; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn check_distribution<T: Scalar>(p: &[T; 2]) -> Result<()> {
    let finite = p.iter().all(|v| v.is_finite() && *v >= T::zero());
    if !finite || (p[0] + p[1] - T::one()).abs() > T::lit(1e-9) {
        return Err(Error::InvalidArgument(format!(
            "({}, {}) is not a probability distribution",
            p[0], p[1]
        )));
    }
    Ok(())
}

/// `-sum_c p_c ln p_c` of one sample, probabilities floored inside the log.
pub fn sample_entropy<T: Scalar>(p: &[T; 2]) -> T {
    let floor = T::lit(PROB_FLOOR);
    -(p[0] * p[0].max(floor).ln() + p[1] * p[1].max(floor).ln())
}

/// Batch mean of the Shannon entropy of each row.
pub fn entropy_loss<T: Scalar>(probs: &[[T; 2]]) -> Result<T> {
    if probs.is_empty() {
        return Err(Error::Empty("entropy of an empty batch".into()));
    }
    for p in probs {
        check_distribution(p)?;
    }
    Ok(probs.iter().map(sample_entropy).sum::<T>() / T::from_count(probs.len()))
}

/// Class 1 iff `p(y=1|x) >= tau`.
pub fn pseudo_label<T: Scalar>(p: &[T; 2], tau: T) -> PseudoLabel<T> {
    let hat_y = usize::from(p[1] >= tau);
    PseudoLabel {
        hat_y,
        confidence: p[hat_y],
    }
}

/// Flips each pseudo-label with probability `1 - confidence`.
pub fn flip_labels<T: Scalar>(labels: &[PseudoLabel<T>], rng: &mut impl Rng) -> Vec<NoisyLabel> {
    labels
        .iter()
        .map(|l| {
            let keep = l.confidence.as_f64().clamp(PROB_FLOOR, 1.0);
            let flipped = rng.random::<f64>() < 1.0 - keep;
            NoisyLabel {
                tilde_y: if flipped { 1 - l.hat_y } else { l.hat_y },
                flipped,
            }
        })
        .collect()
}

fn focal_clamp<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_FLOOR);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// Focal base loss of probability `p` assigned to the target class.
pub fn focal_loss<T: Scalar>(p: T, cfg: &LossConfig) -> T {
    let (p, _) = focal_clamp(p);
    let g = T::lit(cfg.gamma);
    let weight = match cfg.focal_form {
        FocalForm::Paper => T::one() - p.powf(g),
        FocalForm::Standard => (T::one() - p).powf(g),
    };
    -weight * p.ln()
}

/// Derivative of [`focal_loss`] in `p` (zero where the clamp is active).
pub fn focal_loss_deriv<T: Scalar>(p: T, cfg: &LossConfig) -> T {
    let (p, live) = focal_clamp(p);
    if !live {
        return T::zero();
    }
    let g = T::lit(cfg.gamma);
    let ln_p = p.ln();
    match cfg.focal_form {
        FocalForm::Paper => g * p.powf(g - T::one()) * ln_p - (T::one() - p.powf(g)) / p,
        FocalForm::Standard => {
            let d_weight = if cfg.gamma == 0.0 {
                T::zero()
            } else {
                -g * (T::one() - p).powf(g - T::one())
            };
            -d_weight * ln_p - (T::one() - p).powf(g) / p
        }
    }
}

/// Focal loss of a sample at `label`.
pub fn focal_ce<T: Scalar>(p: &[T; 2], label: usize, cfg: &LossConfig) -> T {
    focal_loss(p[label], cfg)
}

fn guard_positive<T: Scalar>(d: T) -> T {
    d.max(T::lit(DENOM_EPS))
}

fn guard_signed<T: Scalar>(d: T) -> (T, bool) {
    let eps = T::lit(DENOM_EPS);
    if d.abs() >= eps {
        (d, true)
    } else if d < T::zero() {
        (-eps, false)
    } else {
        (eps, false)
    }
}

/// `l(p, label) / sum_c l(p, c)`.
pub fn normalized_loss<T: Scalar>(p: &[T; 2], label: usize, cfg: &LossConfig) -> T {
    let l = [focal_ce(p, 0, cfg), focal_ce(p, 1, cfg)];
    l[label] / guard_positive(l[0] + l[1])
}

/// Normalized loss evaluated at the (possibly flipped) noisy label.
pub fn negative_loss_nn<T: Scalar>(p: &[T; 2], noisy: NoisyLabel, cfg: &LossConfig) -> T {
    normalized_loss(p, noisy.tilde_y, cfg)
}

/// Batch minimum of the configured `p0` statistic.
pub fn batch_p0<T: Scalar>(probs: &[[T; 2]], mode: P0Mode) -> Option<(T, usize)> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let v = match mode {
                P0Mode::MaxProb => p[0].max(p[1]),
                P0Mode::FakeProb => p[1],
            };
            (v, i)
        })
        .fold(None, |best, cand| match best {
            Some((b, _)) if b <= cand.0 => best,
            _ => Some(cand),
        })
}

fn passive_with_p0<T: Scalar>(p: &[T; 2], tilde_y: usize, p0: T, cfg: &LossConfig) -> T {
    let l = [focal_ce(p, 0, cfg), focal_ce(p, 1, cfg)];
    let num = p0 - l[tilde_y];
    let (den, _) = guard_signed((p0 - l[0]) + (p0 - l[1]));
    T::one() - num / den
}

/// Passive loss `1 - (p0 - l(x, y~)) / sum_c (p0 - l(x, c))` per sample,
/// with `p0` the batch minimum of [`LossConfig::p0_mode`].
pub fn passive_loss<T: Scalar>(probs: &[[T; 2]], noisy: &[NoisyLabel], cfg: &LossConfig) -> Result<Vec<T>> {
    if probs.is_empty() {
        return Err(Error::Empty("passive loss of an empty batch".into()));
    }
    if probs.len() != noisy.len() {
        return Err(Error::Dimension("probabilities and labels differ in length".into()));
    }
    let (p0, _) = batch_p0(probs, cfg.p0_mode).expect("non-empty");
    Ok(probs
        .iter()
        .zip(noisy)
        .map(|(p, n)| passive_with_p0(p, n.tilde_y, p0, cfg))
        .collect())
}

fn mean<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_count(v.len())
}

/// `l_ntnl = alpha * mean(l_nn) + beta * mean(l_p)`, `total = l_ntnl + l_em`.
pub fn combined_objective<T: Scalar>(
    probs: &[[T; 2]],
    noisy: &[NoisyLabel],
    alpha: T,
    beta: T,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    if alpha < T::zero() || beta < T::zero() {
        return Err(Error::InvalidArgument("alpha and beta must be non-negative".into()));
    }
    let l_em = entropy_loss(probs)?;
    let per_sample_em: Vec<T> = probs.iter().map(sample_entropy).collect();
    let per_sample_p = passive_loss(probs, noisy, cfg)?;
    let per_sample_nn: Vec<T> = probs
        .iter()
        .zip(noisy)
        .map(|(p, &n)| negative_loss_nn(p, n, cfg))
        .collect();
    let l_nn = mean(&per_sample_nn);
    let l_p = mean(&per_sample_p);
    let l_ntnl = alpha * l_nn + beta * l_p;
    let (p0, _) = batch_p0(probs, cfg.p0_mode).expect("non-empty");
    Ok(LossBreakdown {
        l_em,
        l_nn,
        l_p,
        l_ntnl,
        total: l_ntnl + l_em,
        p0,
        per_sample_em,
        per_sample_nn,
        per_sample_p,
    })
}

/// [`combined_objective`] evaluated on logits, together with the gradient of
/// `total` with respect to each logit row.
pub fn objective_with_grad<T: Scalar>(
    logits: &[[T; 2]],
    noisy: &[NoisyLabel],
    alpha: T,
    beta: T,
    cfg: &LossConfig,
) -> Result<(LossBreakdown<T>, Vec<[T; 2]>)> {
    let probs: Vec<[T; 2]> = logits.iter().map(|z| softmax(*z)).collect();
    let breakdown = combined_objective(&probs, noisy, alpha, beta, cfg)?;
    let n = T::from_count(probs.len());
    let floor = T::lit(PROB_FLOOR);
    let eps = T::lit(DENOM_EPS);
    let (_, argmin) = batch_p0(&probs, cfg.p0_mode).expect("non-empty");
    let p0 = breakdown.p0;

    let mut dq = vec![T::zero(); probs.len()];
    let mut dp0 = T::zero();
    for (i, (p, nl)) in probs.iter().zip(noisy).enumerate() {
        let q = p[1];
        // Entropy: d/dq of -(1-q) ln c(1-q) - q ln c(q), with c the floor clamp.
        let term = |x: T| x.max(floor).ln() + if x > floor { T::one() } else { T::zero() };
        let d_em = term(p[0]) - term(q);

        let l = [focal_loss(p[0], cfg), focal_loss(q, cfg)];
        // dl_c/dq: class 1 sees p = q, class 0 sees p = 1 - q.
        let dl = [-focal_loss_deriv(p[0], cfg), focal_loss_deriv(q, cfg)];
        let y = nl.tilde_y;

        let s = l[0] + l[1];
        let ds = dl[0] + dl[1];
        let d_nn = if s > eps {
            (dl[y] * s - l[y] * ds) / (s * s)
        } else {
            dl[y] / eps
        };

        let a = p0 - l[y];
        let (d, live) = guard_signed((p0 - l[0]) + (p0 - l[1]));
        let (d_p, d_p_dp0) = if live {
            let da = -dl[y];
            let dd = -ds;
            (
                -(da * d - a * dd) / (d * d),
                -(d - T::lit(2.0) * a) / (d * d),
            )
        } else {
            (dl[y] / d, -T::one() / d)
        };

        dq[i] = (d_em + alpha * d_nn + beta * d_p) / n;
        dp0 = dp0 + beta * d_p_dp0 / n;
    }
    let sign = match cfg.p0_mode {
        P0Mode::MaxProb if probs[argmin][1] < probs[argmin][0] => -T::one(),
        _ => T::one(),
    };
    dq[argmin] = dq[argmin] + dp0 * sign;

    let grads = probs
        .iter()
        .zip(dq)
        .map(|(p, g)| {
            let s = g * p[0] * p[1];
            [-s, s]
        })
        .collect();
    Ok((breakdown, grads))
}

/// Quantities of the normalized-loss / entropy stationarity argument, with
/// plain cross-entropy as the base loss and the hard pseudo-label as target.
pub mod theory {
    use crate::scalar::Scalar;

    /// `c(q) = -ln q - ln(1 - q)`.
    pub fn normalizer<T: Scalar>(q: T) -> T {
        -q.ln() - (T::one() - q).ln()
    }

    /// Cross-entropy against pseudo-label `hat_y`.
    pub fn pseudo_label_entropy<T: Scalar>(q: T, hat_y: usize) -> T {
        let y = T::from_count(hat_y);
        -y * q.ln() - (T::one() - y) * (T::one() - q).ln()
    }

    /// Normalized cross-entropy against pseudo-label `hat_y`.
    pub fn normalized_ce<T: Scalar>(q: T, hat_y: usize) -> T {
        pseudo_label_entropy(q, hat_y) / normalizer(q)
    }
}
