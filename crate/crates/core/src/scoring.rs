//! Scores over a finished evaluation graph and the usual detection and
//! correlation metrics.
//!
//! * `H_acc` weights each level's mean confidence-weighted correctness by a
//!   geometric sequence normalized over the levels actually built.
//! * `H_comp` weights each level's fill ratio `n_j / N_j` by a geometric
//!   sequence normalized over all configured levels, so stopping early
//!   lowers completeness.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::Serialize;

use crate::hieg::LevelStats;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("no populated levels")]
    NoLevels,
    #[error("level {0} has no questions")]
    EmptyLevel(u32),
    #[error("{got} levels given but only {max} configured")]
    TooManyLevels { got: usize, max: usize },
    #[error("invalid scoring configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("input is empty")]
    EmptyInput,
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least two observations are required")]
    TooFewObservations,
    #[error("every value in one sequence is tied")]
    DegenerateInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("n-gram order must be positive")]
    InvalidOrder,
    #[error("text has no tokens")]
    EmptyText,
}

/// Which end of the hierarchy receives the larger weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum WeightDirection {
    /// `w_j ∝ ratio^(j-1)`: deeper levels weigh more.
    #[default]
    IncreasingWithDepth,
    /// `w_j ∝ ratio^(-(j-1))`.
    DecreasingWithDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoringConfig {
    pub weight_ratio: f64,
    pub max_level: usize,
    /// Per-level question caps `N_1..N_K`.
    pub max_per_level: Vec<usize>,
    pub weight_direction: WeightDirection,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self::uniform(5, 10, 1.2)
    }
}

impl ScoringConfig {
    pub fn uniform(max_level: usize, per_level: usize, weight_ratio: f64) -> Self {
        Self {
            weight_ratio,
            max_level,
            max_per_level: vec![per_level; max_level],
            weight_direction: WeightDirection::IncreasingWithDepth,
        }
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.weight_ratio.is_finite() && self.weight_ratio > 0.0) {
            return Err(ScoringError::InvalidConfig("weight ratio must be positive"));
        }
        if self.max_level == 0 {
            return Err(ScoringError::InvalidConfig("max level must be at least 1"));
        }
        if self.max_per_level.len() != self.max_level {
            return Err(ScoringError::InvalidConfig("need one question cap per level"));
        }
        if self.max_per_level.contains(&0) {
            return Err(ScoringError::InvalidConfig("question caps must be positive"));
        }
        Ok(())
    }

    /// Normalized geometric weights for `levels` levels.
    pub fn weights(&self, levels: usize) -> Vec<f64> {
        geometric_weights(levels, self.weight_ratio, self.weight_direction)
    }
}

/// `levels` weights in geometric progression, summing to one.
pub fn geometric_weights(levels: usize, ratio: f64, direction: WeightDirection) -> Vec<f64> {
    let step = match direction {
        WeightDirection::IncreasingWithDepth => ratio,
        WeightDirection::DecreasingWithDepth => 1.0 / ratio,
    };
    let mut raw = Vec::with_capacity(levels);
    let mut w = 1.0;
    for _ in 0..levels {
        raw.push(w);
        w *= step;
    }
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Accuracy score over levels `1..=L` given in order.
pub fn compute_h_acc(stats: &[LevelStats], config: &ScoringConfig) -> Result<f64, ScoringError> {
    config.validate()?;
    if stats.is_empty() {
        return Err(ScoringError::NoLevels);
    }
    if stats.len() > config.max_level {
        return Err(ScoringError::TooManyLevels {
            got: stats.len(),
            max: config.max_level,
        });
    }
    let weights = config.weights(stats.len());
    let mut score = 0.0;
    for (s, w) in stats.iter().zip(&weights) {
        if s.count == 0 {
            return Err(ScoringError::EmptyLevel(s.level));
        }
        score += w * (s.correct_weighted_sum / s.count as f64);
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Completeness score from per-level question counts `n_1..n_L`. Levels
/// past `L` count as empty; each ratio saturates at 1.
pub fn compute_h_comp(counts: &[usize], config: &ScoringConfig) -> Result<f64, ScoringError> {
    config.validate()?;
    if counts.len() > config.max_level {
        return Err(ScoringError::TooManyLevels {
            got: counts.len(),
            max: config.max_level,
        });
    }
    let weights = config.weights(config.max_level);
    let score: f64 = counts
        .iter()
        .zip(&config.max_per_level)
        .zip(&weights)
        .map(|((&n, &cap), w)| w * (n.min(cap) as f64 / cap as f64))
        .sum();
    Ok(score.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// Adds one observation. `1` means inconsistent for both arguments.
    pub fn record(&mut self, predicted: u8, label: u8) {
        match (predicted != 0, label != 0) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Detection rates with the inconsistent class as positive. Rates with a
/// zero denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub confusion: Confusion,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_granularity: Option<BTreeMap<u8, MetricsSummary>>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsSummary {
    pub fn from_confusion(confusion: Confusion) -> Self {
        let c = confusion;
        let tpr = ratio(c.tp, c.tp + c.fn_);
        let fpr = ratio(c.fp, c.fp + c.tn);
        let precision = ratio(c.tp, c.tp + c.fp);
        let f1 = match (precision, tpr) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self {
            tpr,
            fpr,
            precision,
            f1,
            confusion,
            per_granularity: None,
        }
    }
}

/// Confusion counts and rates from `(predicted, label)` bit pairs.
pub fn detection_metrics(pairs: &[(u8, u8)]) -> Result<MetricsSummary, ScoringError> {
    if pairs.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let mut confusion = Confusion::default();
    for &(p, l) in pairs {
        confusion.record(p, l);
    }
    Ok(MetricsSummary::from_confusion(confusion))
}

/// As [`detection_metrics`] plus a breakdown keyed by granularity for the
/// items that carry one.
pub fn detection_metrics_by_granularity(
    items: &[(u8, u8, Option<u8>)],
) -> Result<MetricsSummary, ScoringError> {
    let pairs: Vec<(u8, u8)> = items.iter().map(|&(p, l, _)| (p, l)).collect();
    let mut summary = detection_metrics(&pairs)?;
    let mut groups: BTreeMap<u8, Confusion> = BTreeMap::new();
    for &(p, l, g) in items {
        if let Some(g) = g {
            groups.entry(g).or_default().record(p, l);
        }
    }
    summary.per_granularity = Some(
        groups
            .into_iter()
            .map(|(g, c)| (g, MetricsSummary::from_confusion(c)))
            .collect(),
    );
    Ok(summary)
}

/// Kendall's tau-b between two paired samples, in `O(n log n)`.
///
/// Sorts by `(x, y)`, counts ties, then counts discordant pairs as the
/// number of swaps a merge sort on `y` performs.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, ScoringError> {
    if x.len() != y.len() {
        return Err(ScoringError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(ScoringError::TooFewObservations);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ScoringError::NonFinite);
    }
    let n = x.len() as u64;
    let total_pairs = n * (n - 1) / 2;

    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let x_ties = tied_pairs(&pairs, |a, b| a.0 == b.0);
    let joint_ties = tied_pairs(&pairs, |a, b| a.0 == b.0 && a.1 == b.1);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut scratch = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut scratch);
    let y_ties = tied_pairs(&ys, |a, b| a == b);

    if x_ties == total_pairs || y_ties == total_pairs {
        return Err(ScoringError::DegenerateInput);
    }
    let numerator = total_pairs as f64 - x_ties as f64 - y_ties as f64 + joint_ties as f64
        - 2.0 * swaps as f64;
    let denominator = libm::sqrt((total_pairs - x_ties) as f64 * (total_pairs - y_ties) as f64);
    Ok((numerator / denominator).clamp(-1.0, 1.0))
}

/// Pairs within runs of equal adjacent elements of a sorted slice.
fn tied_pairs<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort of `v`, returning the number of inversions.
fn merge_count(v: &mut [f64], scratch: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (sl, sr) = scratch.split_at_mut(mid);
        merge_count(left, sl) + merge_count(right, sr)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            scratch[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            scratch[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    while i < mid {
        scratch[k] = v[i];
        i += 1;
        k += 1;
    }
    while j < n {
        scratch[k] = v[j];
        j += 1;
        k += 1;
    }
    v.copy_from_slice(&scratch[..n]);
    swaps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Set when either text has fewer than `n` tokens; all scores are then 0.
    pub too_short: bool,
}

/// Lowercased tokens split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], u64> {
    let mut m: BTreeMap<&[String], u64> = BTreeMap::new();
    for gram in tokens.windows(n) {
        *m.entry(gram).or_default() += 1;
    }
    m
}

/// ROUGE-N with clipped n-gram counts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore, ScoringError> {
    if n == 0 {
        return Err(ScoringError::InvalidOrder);
    }
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return Err(ScoringError::EmptyText);
    }
    if cand.len() < n || refr.len() < n {
        return Ok(RougeScore {
            precision: 0.0,
            recall: 0.0,
            f_measure: 0.0,
            too_short: true,
        });
    }
    let cand_counts = ngram_counts(&cand, n);
    let ref_counts = ngram_counts(&refr, n);
    let overlap: u64 = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let precision = overlap as f64 / (cand.len() - n + 1) as f64;
    let recall = overlap as f64 / (refr.len() - n + 1) as f64;
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(RougeScore {
        precision,
        recall,
        f_measure,
        too_short: false,
    })
}
