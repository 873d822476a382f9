//! Detection metrics over scored streams: accuracy, ROC AUC and average
//! precision. Positives are label 1 (fake).

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scores `p(y = 1 | x)` paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet<T> {
    scores: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Scalar> ScoredSet<T> {
    pub fn new(scores: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("score {i} is not finite")));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {i} is not binary")));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Fraction of samples whose thresholded score `score >= tau` equals the label.
pub fn accuracy<T: Scalar>(set: &ScoredSet<T>, tau: T) -> Result<T> {
    if set.is_empty() {
        return Err(Error::Empty("accuracy of an empty set".into()));
    }
    let hits = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| u8::from(s >= tau) == l)
        .count();
    Ok(T::from_count(hits) / T::from_count(set.len()))
}

/// Indices sorted by descending score. Scores are finite, so the order is total.
fn descending<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Groups of equal scores in descending order, as (positives, negatives).
fn tie_groups<T: Scalar>(set: &ScoredSet<T>) -> Vec<(usize, usize)> {
    let order = descending(&set.scores);
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last: Option<T> = None;
    for i in order {
        if last != Some(set.scores[i]) {
            groups.push((0, 0));
            last = Some(set.scores[i]);
        }
        let g = groups.last_mut().expect("group opened above");
        if set.labels[i] == 1 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`. `None` unless both classes occur.
pub fn auc<T: Scalar>(set: &ScoredSet<T>) -> Option<T> {
    let pos = set.positives();
    let neg = set.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Positives in higher groups beat every negative of the current group;
    // pairs inside a group are ties worth half. Counted in half-units.
    let mut pos_above = 0usize;
    let mut twice_wins = 0u128;
    for (p, n) in tie_groups(set) {
        twice_wins += (2 * pos_above * n + p * n) as u128;
        pos_above += p;
    }
    let pairs = T::from_count(pos) * T::from_count(neg);
    Some(T::lit(twice_wins as f64) / (T::lit(2.0) * pairs))
}

/// Step-wise average precision `sum_k (R_k - R_{k-1}) P_k`, one threshold per
/// distinct score. `None` without positives.
pub fn average_precision<T: Scalar>(set: &ScoredSet<T>) -> Option<T> {
    let pos = set.positives();
    if pos == 0 {
        return None;
    }
    let total = T::from_count(pos);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = T::zero();
    for (p, n) in tie_groups(set) {
        tp += p;
        seen += p + n;
        if p > 0 {
            let recall_step = T::from_count(p) / total;
            ap = ap + recall_step * T::from_count(tp) / T::from_count(seen);
        }
    }
    Some(ap)
}

/// The three headline metrics of one scored stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary<T> {
    pub acc: T,
    pub auc: Option<T>,
    pub ap: Option<T>,
}

pub fn summarize<T: Scalar>(set: &ScoredSet<T>, tau: T) -> Result<Summary<T>> {
    Ok(Summary {
        acc: accuracy(set, tau)?,
        auc: auc(set),
        ap: average_precision(set),
    })
}
