//! Classification metrics, distribution distances, bootstrap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} labels, {1} scores")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("constant feature: range [{0}, {1}] is degenerate")]
    ConstantFeature(f64, f64),
    #[error("k = {k} exceeds the {n} available samples")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be >= 1")]
    ZeroK,
    #[error("label {0} is not binary")]
    BadLabel(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
}

/// Threshold metrics at `threshold` (predict 1 iff score >= threshold) and
/// rank AUC with tied scores sharing their mean rank.
pub fn compute_classification_metrics(
    labels: &[u8],
    risks: &[f64],
    threshold: f64,
) -> Result<ClassificationMetrics, MetricsError> {
    if labels.len() != risks.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), risks.len()));
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::BadLabel(bad));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&y, &r) in labels.iter().zip(risks) {
        match (y == 1, r >= threshold) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        n: labels.len(),
        accuracy: ratio(tp + tn, labels.len()),
        precision,
        recall,
        f1,
        auc: auc(labels, risks),
    })
}

/// Mann-Whitney AUC with midranks; `None` for single-class input.
pub fn auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Integrates `f(|F_a - F_b|)` over the merged support of the two empirical
/// CDFs.
fn integrate_cdf_gap(a: &[f64], b: &[f64], f: impl Fn(f64) -> f64) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = xs.iter().chain(&ys).copied().collect();
    all.sort_by(f64::total_cmp);
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    for w in all.windows(2) {
        while i < xs.len() && xs[i] <= w[0] {
            i += 1;
        }
        while j < ys.len() && ys[j] <= w[0] {
            j += 1;
        }
        total += f((i as f64 / na - j as f64 / nb).abs()) * (w[1] - w[0]);
    }
    Ok(total)
}

/// First Wasserstein distance, `integral |F_a - F_b|`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    integrate_cdf_gap(a, b, |d| d)
}

/// `sqrt(2 E|A-B| - E|A-A'| - E|B-B'|)`, evaluated through the equivalent
/// `sqrt(2 integral (F_a - F_b)^2)` so identical samples give exactly 0.
pub fn energy_distance_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    Ok((2.0 * integrate_cdf_gap(a, b, |d| d * d)?).sqrt())
}

/// Min-max scaling by a reference range, clamped to [0, 1].
pub fn normalize_feature(values: &[f64], min: f64, max: f64) -> Result<Vec<f64>, MetricsError> {
    if !(max > min) {
        return Err(MetricsError::ConstantFeature(min, max));
    }
    Ok(values
        .iter()
        .map(|v| ((v - min) / (max - min)).clamp(0.0, 1.0))
        .collect())
}

/// Smallest absolute error among the first `k` samples.
pub fn best_of_k_mae(samples: &[f64], truth: f64, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if k > samples.len() {
        return Err(MetricsError::KTooLarge { k, n: samples.len() });
    }
    Ok(samples[..k]
        .iter()
        .map(|s| (s - truth).abs())
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation; `None` when empty.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
    pub draws: usize,
}

/// Bayesian bootstrap of the mean: each draw weights the values by
/// normalized unit-exponential weights.
pub fn bayesian_bootstrap(values: &[f64], draws: usize, seed: u64) -> Result<BootstrapSummary, MetricsError> {
    if values.is_empty() || draws == 0 {
        return Err(MetricsError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(draws);
    let mut weights = vec![0.0; values.len()];
    for _ in 0..draws {
        let mut total = 0.0;
        for w in weights.iter_mut() {
            *w = Exp1.sample(&mut rng);
            total += *w;
        }
        let m = values.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / total;
        means.push(m);
    }
    let summary = mean_std(&means).expect("draws >= 1");
    means.sort_by(f64::total_cmp);
    Ok(BootstrapSummary {
        mean: summary.mean,
        std: summary.std,
        lower: percentile(&means, 0.025),
        upper: percentile(&means, 0.975),
        draws,
    })
}
