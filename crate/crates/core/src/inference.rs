//! Residual scoring, flags, root-cause lookup, and detection metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::InferenceError;
use crate::linalg::{Cholesky, Mat};
use crate::synthetic::Episode;

/// Absolute ridge used when the covariance trace is zero.
const MIN_RIDGE: f64 = 1e-12;

/// Mean and regularized covariance of nominal residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: Vec<f64>,
    pub covariance: Mat,
    pub count: usize,
    #[serde(skip)]
    factor: Option<Cholesky>,
}

impl ResidualStats {
    fn factor(&self) -> Result<std::borrow::Cow<'_, Cholesky>, InferenceError> {
        match &self.factor {
            Some(f) => Ok(std::borrow::Cow::Borrowed(f)),
            None => Ok(std::borrow::Cow::Owned(Cholesky::factor(&self.covariance)?)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and covariance with `+1e−6·trace/D·I` regularization.
pub fn fit_residual_stats<V: AsRef<[f64]>>(samples: &[V]) -> Result<ResidualStats, InferenceError> {
    let d = samples.first().map_or(0, |s| s.as_ref().len());
    let n = samples.len();
    if n < d + 1 || d == 0 {
        return Err(InferenceError::TooFewSamples { needed: d.max(1) + 1, got: n });
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        let s = s.as_ref();
        if s.len() != d {
            return Err(InferenceError::Dimension { expected: d, found: s.len() });
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Mat::zeros(d, d);
    for s in samples {
        let s = s.as_ref();
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[(i, j)] += di * (s[j] - mean[j]);
            }
        }
    }
    let mut cov = cov.scale(1.0 / (n - 1) as f64).symmetrized();
    let ridge = (1e-6 * cov.trace() / d as f64).max(MIN_RIDGE);
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let factor = Cholesky::factor(&cov)?;
    Ok(ResidualStats {
        mean,
        covariance: cov,
        count: n,
        factor: Some(factor),
    })
}

/// `(r − μ)ᵀ Σ⁻¹ (r − μ)` through the Cholesky factor.
pub fn mahalanobis_sq(r: &[f64], stats: &ResidualStats) -> Result<f64, InferenceError> {
    if r.len() != stats.dim() {
        return Err(InferenceError::Dimension {
            expected: stats.dim(),
            found: r.len(),
        });
    }
    let diff: Vec<f64> = r.iter().zip(&stats.mean).map(|(a, b)| a - b).collect();
    let z = stats.factor()?.forward(&diff);
    Ok(z.iter().map(|v| v * v).sum())
}

/// Nearest-rank percentile: the element at `⌈q/100·n⌉ − 1` after sorting.
pub fn calibrate_threshold(stream: &[f64], q: f64) -> Result<f64, InferenceError> {
    if stream.is_empty() {
        return Err(InferenceError::EmptyStream);
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(InferenceError::Percentile(q));
    }
    let mut sorted = stream.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// `(1[d²_c > τ_c], 1[d²_a > τ_a])`.
pub fn flag_step(d2_c: f64, d2_a: f64, tau_c: f64, tau_a: f64) -> (bool, bool) {
    (d2_c > tau_c, d2_a > tau_a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    RootCause,
    Propagated,
    Nominal,
}

impl Class {
    pub fn as_str(self) -> &'static str {
        match self {
            Class::RootCause => "root_cause",
            Class::Propagated => "propagated",
            Class::Nominal => "nominal",
        }
    }
}

/// Flag pattern → class, indexed by `(Z_c, Z_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LookupTable {
    pub both: Class,
    pub proprietary_only: Class,
    pub augmented_only: Class,
    pub neither: Class,
}

impl Default for LookupTable {
    fn default() -> Self {
        Self {
            both: Class::RootCause,
            proprietary_only: Class::Propagated,
            augmented_only: Class::Nominal,
            neither: Class::Nominal,
        }
    }
}

impl LookupTable {
    pub fn classify(&self, z_c: bool, z_a: bool) -> Class {
        match (z_c, z_a) {
            (true, true) => self.both,
            (true, false) => self.proprietary_only,
            (false, true) => self.augmented_only,
            (false, false) => self.neither,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Diagnosis {
    pub root_cause: BTreeSet<usize>,
    pub propagated: BTreeSet<usize>,
}

impl Diagnosis {
    pub fn is_empty(&self) -> bool {
        self.root_cause.is_empty() && self.propagated.is_empty()
    }
}

/// Applies the lookup to every client's report; `None` is a missing report.
pub fn diagnose(flags: &[Option<(bool, bool)>], table: &LookupTable) -> Result<Diagnosis, InferenceError> {
    let mut d = Diagnosis::default();
    for (m, f) in flags.iter().enumerate() {
        let (z_c, z_a) = f.ok_or(InferenceError::MissingReport(m))?;
        match table.classify(z_c, z_a) {
            Class::RootCause => {
                d.root_cause.insert(m);
            }
            Class::Propagated => {
                d.propagated.insert(m);
            }
            Class::Nominal => {}
        }
    }
    Ok(d)
}

/// One step's scores and flags for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub t: usize,
    pub client: usize,
    pub d2_c: f64,
    pub d2_a: f64,
    pub z_c: bool,
    pub z_a: bool,
    /// Flags after randomized response.
    pub zt_c: bool,
    pub zt_a: bool,
    pub class: Class,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArlMetrics {
    pub arl0: Option<f64>,
    pub arl1: Option<f64>,
    pub nominal_segments: usize,
    pub episodes: usize,
    pub detected: usize,
}

/// Average run lengths of an alarm stream.
///
/// Nominal segments are the gaps between `[onset, end + guard)` windows;
/// each contributes the offset of its first alarm, or its length when none
/// fires. Each episode contributes the delay from onset to the first alarm
/// before the next onset, or that whole window when undetected.
pub fn arl_metrics(alarms: &[bool], episodes: &[Episode], guard: usize) -> ArlMetrics {
    let n = alarms.len();
    let mut excluded = vec![false; n];
    for e in episodes {
        for t in e.onset..(e.end() + guard).min(n) {
            excluded[t] = true;
        }
    }
    let mut runs = Vec::new();
    let mut t = 0;
    while t < n {
        if excluded[t] {
            t += 1;
            continue;
        }
        let start = t;
        let mut first = None;
        while t < n && !excluded[t] {
            if first.is_none() && alarms[t] {
                first = Some(t - start);
            }
            t += 1;
        }
        runs.push(first.unwrap_or(t - start) as f64);
    }
    let mut delays = Vec::new();
    let mut detected = 0;
    let mut sorted: Vec<&Episode> = episodes.iter().collect();
    sorted.sort_by_key(|e| e.onset);
    for (i, e) in sorted.iter().enumerate() {
        let stop = sorted.get(i + 1).map_or(n, |next| next.onset).min(n);
        match (e.onset..stop).find(|&t| alarms[t]) {
            Some(t) => {
                detected += 1;
                delays.push((t - e.onset) as f64);
            }
            None => delays.push(stop.saturating_sub(e.onset) as f64),
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    ArlMetrics {
        arl0: mean(&runs),
        arl1: mean(&delays),
        nominal_segments: runs.len(),
        episodes: episodes.len(),
        detected,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcaMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Episode-level precision, recall and F1 of predicted root sets.
pub fn rca_metrics(predicted: &[BTreeSet<usize>], truth: &[usize]) -> Result<RcaMetrics, InferenceError> {
    if truth.is_empty() {
        return Err(InferenceError::NoEpisodes);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, &root) in predicted.iter().zip(truth) {
        if pred.contains(&root) {
            tp += 1;
        } else {
            fn_ += 1;
        }
        fp += pred.iter().filter(|&&m| m != root).count();
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let precision = ratio(tp, fp);
    let recall = ratio(tp, fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RcaMetrics {
        precision,
        recall,
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    })
}

/// Per-episode root sets by vote over the episode's steps: a client is named
/// root when more than `fraction` of the steps classify it so. `0.5` is a
/// strict majority.
pub fn episode_roots(classes: &[Vec<Class>], episodes: &[Episode], fraction: f64) -> Vec<BTreeSet<usize>> {
    episodes
        .iter()
        .map(|e| {
            let mut roots = BTreeSet::new();
            for (m, per_client) in classes.iter().enumerate() {
                let window = &per_client[e.onset.min(per_client.len())..e.end().min(per_client.len())];
                let votes = window.iter().filter(|&&c| c == Class::RootCause).count();
                if !window.is_empty() && votes as f64 > fraction * window.len() as f64 {
                    roots.insert(m);
                }
            }
            roots
        })
        .collect()
}
