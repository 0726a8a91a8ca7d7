// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output-shift metrics and summary statistics.
//!
//! ```text
//! c(O, T)  = Σ_t O(t) · max_{t̄ ∈ T} cos(E_t, E_t̄)      weighted cosine
//! Δc       = (c(Õ, T) − c(O, T)) / c(O, T)
//! w(O, T)  = Σ_{t ∈ T} O(t)                            weighted overlap
//! Δw       = w(Õ, T) − w(O, T),   relative: Δw / max(w(O, T), ε)
//! ```

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::normalize;
use crate::model::{Distribution, Model};
use crate::rng::rng_for;
use crate::tensor::{dot, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-9;
pub const BOOTSTRAP_RESAMPLES: usize = 2000;
const BASELINE_FLOOR: f64 = 1e-12;

/// Token embeddings with unit-normalized rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub id: String,
    rows: Tensor,
}

impl EmbeddingTable {
    pub fn new(id: impl Into<String>, embeddings: &Tensor) -> Result<Self> {
        let (v, d) = (embeddings.rows(), embeddings.cols());
        let mut data = Vec::with_capacity(v * d);
        for r in 0..v {
            data.extend(normalize(embeddings.row(r))?);
        }
        Ok(Self {
            id: id.into(),
            rows: Tensor::matrix(v, d, data)?,
        })
    }

    pub fn from_model(id: impl Into<String>, model: &Model) -> Result<Self> {
        Self::new(id, model.token_embeddings())
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.rows()
    }

    pub fn row(&self, token: u32) -> Result<&[f64]> {
        if (token as usize) < self.vocab_size() {
            Ok(self.rows.row(token as usize))
        } else {
            Err(Error::MissingEmbedding(token))
        }
    }
}

/// A target token set with the per-token weights of the weighted cosine
/// precomputed, so each metric evaluation is one dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetProfile {
    pub tokens: BTreeSet<u32>,
    pub embedding_id: String,
    /// `max_{t̄ ∈ T} cos(E_t, E_t̄)` for every vocabulary token.
    max_cos: Vec<f64>,
}

impl TargetProfile {
    pub fn new(tokens: &BTreeSet<u32>, table: &EmbeddingTable) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenSet);
        }
        let targets = tokens.iter().map(|&t| table.row(t)).collect::<Result<Vec<_>>>()?;
        let max_cos = (0..table.vocab_size())
            .map(|t| {
                let e = table.rows.row(t);
                targets.iter().map(|tb| dot(e, tb)).fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        Ok(Self {
            tokens: tokens.clone(),
            embedding_id: table.id.clone(),
            max_cos,
        })
    }

    pub fn weighted_cosine(&self, o: &Distribution) -> Result<f64> {
        if o.len() != self.max_cos.len() {
            return Err(Error::shape(format!(
                "distribution over {} tokens, embeddings for {}",
                o.len(),
                self.max_cos.len()
            )));
        }
        Ok(dot(o.probs(), &self.max_cos))
    }

    pub fn weighted_overlap(&self, o: &Distribution) -> f64 {
        weighted_overlap(o, &self.tokens)
    }

    pub fn report(&self, before: &Distribution, after: &Distribution, epsilon: f64) -> Result<MetricReport> {
        let c_before = self.weighted_cosine(before)?;
        let c_after = self.weighted_cosine(after)?;
        let delta_c = if c_before > BASELINE_FLOOR {
            Some((c_after - c_before) / c_before)
        } else {
            None
        };
        let w_before = self.weighted_overlap(before);
        let w_after = self.weighted_overlap(after);
        let (delta_w, delta_w_rel) = delta_w_from(w_before, w_after, epsilon);
        Ok(MetricReport {
            tokens: self.tokens.iter().copied().collect(),
            embedding_id: self.embedding_id.clone(),
            c_before,
            c_after,
            delta_c,
            zero_baseline: delta_c.is_none(),
            w_before,
            w_after,
            delta_w,
            delta_w_rel,
        })
    }
}

/// `c(O, T)`.
pub fn weighted_cosine(o: &Distribution, tokens: &BTreeSet<u32>, table: &EmbeddingTable) -> Result<f64> {
    TargetProfile::new(tokens, table)?.weighted_cosine(o)
}

/// `Δc`; fails with [`Error::ZeroBaseline`] when `c(O, T) ≤ 1e-12`.
pub fn delta_c(o: &Distribution, o_tilde: &Distribution, tokens: &BTreeSet<u32>, table: &EmbeddingTable) -> Result<f64> {
    let p = TargetProfile::new(tokens, table)?;
    let before = p.weighted_cosine(o)?;
    if before <= BASELINE_FLOOR {
        return Err(Error::ZeroBaseline);
    }
    Ok((p.weighted_cosine(o_tilde)? - before) / before)
}

/// `w(O, T)`; tokens outside the vocabulary carry no mass.
pub fn weighted_overlap(o: &Distribution, tokens: &BTreeSet<u32>) -> f64 {
    tokens.iter().filter_map(|&t| o.probs().get(t as usize)).sum()
}

fn delta_w_from(before: f64, after: f64, epsilon: f64) -> (f64, f64) {
    let abs = after - before;
    (abs, abs / before.max(epsilon))
}

/// `(Δw, Δw / max(w(O), ε))`.
pub fn delta_w(o: &Distribution, o_tilde: &Distribution, tokens: &BTreeSet<u32>, epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    Ok(delta_w_from(
        weighted_overlap(o, tokens),
        weighted_overlap(o_tilde, tokens),
        epsilon,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tokens: Vec<u32>,
    pub embedding_id: String,
    pub c_before: f64,
    pub c_after: f64,
    /// `None` when the baseline weighted cosine is not positive.
    pub delta_c: Option<f64>,
    pub zero_baseline: bool,
    pub w_before: f64,
    pub w_after: f64,
    pub delta_w: f64,
    pub delta_w_rel: f64,
}

/// Which metric delta an experiment optimizes and summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    DeltaC,
    DeltaW,
    DeltaWRel,
}

impl Metric {
    /// Metric value, or `None` when it is undefined for this report.
    pub fn value(self, r: &MetricReport) -> Option<f64> {
        match self {
            Metric::DeltaC => r.delta_c,
            Metric::DeltaW => Some(r.delta_w),
            Metric::DeltaWRel => Some(r.delta_w_rel),
        }
    }
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Ranks starting at 1, ties get the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let mut rng = rng_for(seed, "bootstrap-mean");
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / xs.len() as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(&stats, a), quantile_sorted(&stats, 1.0 - a))
}

/// One-sided sign test: `P(X ≥ successes)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(successes: usize, n: usize) -> f64 {
    // Sum in log space to stay exact-ish for large n.
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_choose = 0.0; // ln C(n, 0)
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= successes {
            total += (ln_choose + ln_half_n).exp();
        }
    }
    total.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub label: String,
    pub midpoint: f64,
    pub n: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub rows: Vec<BinRow>,
    /// Spearman correlation between bin midpoint and bin mean.
    pub spearman: Option<f64>,
    /// Percentile interval of the correlation under a bootstrap that
    /// resamples outcomes within each bin.
    pub spearman_ci: Option<(f64, f64)>,
    pub resamples: usize,
    pub seed: u64,
}

/// One group of outcomes for [`bin_summary`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinValues {
    pub label: String,
    pub midpoint: f64,
    pub values: Vec<f64>,
}

/// Mean and 95% bootstrap interval per bin, plus the bin-level Spearman trend.
/// Bins without outcomes are dropped.
pub fn bin_summary(bins: &[BinValues], resamples: usize, seed: u64) -> BinSummary {
    let bins: Vec<&BinValues> = bins.iter().filter(|b| !b.values.is_empty()).collect();
    let rows: Vec<BinRow> = bins
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (ci_lo, ci_hi) = bootstrap_mean_ci(&b.values, resamples, 0.95, crate::rng::derive_seed(seed, &format!("bin-{i}")));
            BinRow {
                label: b.label.clone(),
                midpoint: b.midpoint,
                n: b.values.len(),
                mean: mean(&b.values),
                ci_lo,
                ci_hi,
            }
        })
        .collect();
    let mids: Vec<f64> = rows.iter().map(|r| r.midpoint).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let rho = spearman(&mids, &means);
    let spearman_ci = rho.map(|_| {
        let mut rng = rng_for(seed, "bootstrap-spearman");
        let mut stats: Vec<f64> = (0..resamples)
            .map(|_| {
                let m: Vec<f64> = bins
                    .iter()
                    .map(|b| {
                        let n = b.values.len();
                        (0..n).map(|_| b.values[rng.random_range(0..n)]).sum::<f64>() / n as f64
                    })
                    .collect();
                // A resample with tied means has an undefined correlation; count it as no trend.
                spearman(&mids, &m).unwrap_or(0.0)
            })
            .collect();
        stats.sort_by(f64::total_cmp);
        (quantile_sorted(&stats, 0.025), quantile_sorted(&stats, 0.975))
    });
    BinSummary {
        rows,
        spearman: rho,
        spearman_ci,
        resamples,
        seed,
    }
}
