// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders over harvested activations.
//!
//! ```text
//! f = Act(W_enc a + b_enc)          W_enc: k × d
//! ā = W_dec f + b_dec               W_dec: d × k
//! L = ‖a − ā‖² + λ Σ_i f_i ‖W_dec[:, i]‖₂
//! ```
//!
//! Decoder columns are renormalized to unit length after every optimizer
//! step, so the sparsity term equals `λ‖f‖₁` at every step boundary; it is
//! still computed literally on the tape. Inputs are multiplied by a fixed
//! `input_scale` (mean norm → √d) before encoding so that `λ` means the same
//! thing at every site.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::NORM_EPS;
use crate::model::corpus::Corpus;
use crate::model::{Model, Site};
use crate::rng::{gaussian, rng_for};
use crate::tensor::{norm, Tensor};

/// Window length of activation records.
pub const RECORD_WINDOW: usize = 16;

// ---------------------------------------------------------------------------
// Harvesting
// ---------------------------------------------------------------------------

/// One activation vector per (sequence, position) at a site.
#[derive(Debug, Clone)]
pub struct ActivationDataset {
    pub site: Site,
    /// `N × d_model`
    pub vectors: Tensor,
    /// `(sequence index, position)` of each row.
    pub provenance: Vec<(usize, usize)>,
    /// Token at each row's position.
    pub tokens: Vec<u32>,
}

impl ActivationDataset {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn mean_vector(&self) -> Vec<f64> {
        let (n, d) = (self.vectors.rows(), self.vectors.cols());
        let mut m = vec![0.0; d];
        for r in 0..n {
            for (acc, v) in m.iter_mut().zip(self.vectors.row(r)) {
                *acc += v;
            }
        }
        m.iter().map(|v| v / n as f64).collect()
    }
}

/// Run every corpus sequence (cropped to the context window) and collect the
/// activations at `site`.
pub fn harvest_activations(model: &Model, corpus: &Corpus, site: Site) -> Result<ActivationDataset> {
    site.check(model.config())?;
    let ctx = model.config().context_length;
    let seqs: Vec<(usize, &[u32])> = corpus
        .sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(i, s)| (i, &s[..s.len().min(ctx)]))
        .collect();
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_seq: Vec<Tensor> = seqs
        .par_iter()
        .map(|(_, s)| {
            let (_, trace) = model.forward(s, &[site], &[])?;
            Ok(trace.activations.into_values().next().expect("captured site"))
        })
        .collect::<Result<_>>()?;
    let d = model.config().d_model;
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    let mut tokens = Vec::new();
    for ((i, s), acts) in seqs.iter().zip(per_seq) {
        for (pos, tok) in s.iter().enumerate() {
            provenance.push((*i, pos));
            tokens.push(*tok);
        }
        data.extend_from_slice(acts.data());
    }
    Ok(ActivationDataset {
        site,
        vectors: Tensor::matrix(provenance.len(), d, data)?,
        provenance,
        tokens,
    })
}

// ---------------------------------------------------------------------------
// SAE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SaeActivation {
    Relu,
    TopK { k: usize },
    /// No nonlinearity; only meaningful as the linear-autoencoder limit.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub n_features: usize,
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub activation: SaeActivation,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    pub seed: u64,
}

fn default_holdout() -> f64 {
    0.2
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            n_features: 256,
            lambda: 0.05,
            lr: 2e-3,
            steps: 1500,
            batch: 64,
            activation: SaeActivation::Relu,
            holdout_fraction: default_holdout(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sae {
    pub site: Site,
    pub activation: SaeActivation,
    pub input_scale: f64,
    /// `k × d`
    pub w_enc: Tensor,
    pub b_enc: Vec<f64>,
    /// `d × k`; column `i` is feature `i`'s direction.
    pub w_dec: Tensor,
    pub b_dec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    pub initial_heldout_mse: f64,
    pub final_heldout_mse: f64,
    /// `max_i |‖W_dec[:, i]‖ − 1|` after each step.
    pub norm_deviation: Vec<f64>,
    /// `(step, held-out MSE)` every `steps / 10` steps.
    pub mse_curve: Vec<(usize, f64)>,
    pub mean_l0: f64,
}

/// A feature's unit direction in activation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDirection {
    pub feature: usize,
    pub site: Site,
    pub direction: Vec<f64>,
}

impl Sae {
    pub fn d_model(&self) -> usize {
        self.w_dec.rows()
    }

    pub fn n_features(&self) -> usize {
        self.w_dec.cols()
    }

    fn activate(&self, pre: &mut [f64]) {
        match self.activation {
            SaeActivation::Relu => pre.iter_mut().for_each(|v| *v = v.max(0.0)),
            SaeActivation::Linear => {}
            SaeActivation::TopK { k } => {
                let mut idx: Vec<usize> = (0..pre.len()).collect();
                idx.sort_by(|&i, &j| pre[j].total_cmp(&pre[i]).then(i.cmp(&j)));
                let keep: BTreeSet<usize> = idx.into_iter().take(k).collect();
                for (i, v) in pre.iter_mut().enumerate() {
                    if !keep.contains(&i) || *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    /// Feature activations `f` for one raw activation vector.
    pub fn encode(&self, a: &[f64]) -> Vec<f64> {
        let d = self.d_model();
        let mut pre = self.b_enc.clone();
        for (i, p) in pre.iter_mut().enumerate() {
            let row = &self.w_enc.data()[i * d..(i + 1) * d];
            *p += self.input_scale * crate::tensor::dot(row, a);
        }
        self.activate(&mut pre);
        pre
    }

    /// Reconstruction in raw activation units.
    pub fn decode(&self, f: &[f64]) -> Vec<f64> {
        let k = self.n_features();
        (0..self.d_model())
            .map(|r| {
                let row = &self.w_dec.data()[r * k..(r + 1) * k];
                (crate::tensor::dot(row, f) + self.b_dec[r]) / self.input_scale
            })
            .collect()
    }

    pub fn reconstruct(&self, a: &[f64]) -> Vec<f64> {
        self.decode(&self.encode(a))
    }

    pub fn column_norm(&self, i: usize) -> f64 {
        norm(&self.w_dec.column(i))
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.n_features())
            .map(|i| (self.column_norm(i) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn feature_direction(&self, i: usize) -> Result<FeatureDirection> {
        if i >= self.n_features() {
            return Err(Error::InvalidArgument(format!("feature {i} out of range")));
        }
        let col = self.w_dec.column(i);
        let n = norm(&col);
        if n < NORM_EPS {
            return Err(Error::DeadFeature(i));
        }
        Ok(FeatureDirection {
            feature: i,
            site: self.site,
            direction: col.iter().map(|v| v / n).collect(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "sae".into(),
            config: serde_json::json!({
                "site": self.site,
                "activation": self.activation,
                "input_scale": self.input_scale,
            }),
            tensors: vec![
                ("w_enc".into(), self.w_enc.clone()),
                ("b_enc".into(), Tensor::vector(self.b_enc.clone())?),
                ("w_dec".into(), self.w_dec.clone()),
                ("b_dec".into(), Tensor::vector(self.b_dec.clone())?),
            ],
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "sae" {
            return Err(Error::CorruptFile(format!("expected sae, found {}", ckpt.kind)));
        }
        let field = |k: &str| {
            ckpt.config
                .get(k)
                .cloned()
                .ok_or_else(|| Error::CorruptFile(format!("sae header missing {k}")))
        };
        let site: Site = serde_json::from_value(field("site")?)?;
        let activation: SaeActivation = serde_json::from_value(field("activation")?)?;
        let input_scale: f64 = serde_json::from_value(field("input_scale")?)?;
        let w_enc = ckpt.tensor("w_enc")?.clone();
        let w_dec = ckpt.tensor("w_dec")?.clone();
        let b_enc = ckpt.tensor("b_enc")?.data().to_vec();
        let b_dec = ckpt.tensor("b_dec")?.data().to_vec();
        let (d, k) = (w_dec.rows(), w_dec.cols());
        if w_enc.shape() != [k, d] || b_enc.len() != k || b_dec.len() != d {
            return Err(Error::CorruptFile("sae tensor shapes disagree".into()));
        }
        Ok(Self {
            site,
            activation,
            input_scale,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        })
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for j in 0..p.len() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::B1 * *m + (1.0 - Self::B1) * g[j];
                *v = Self::B2 * *v + (1.0 - Self::B2) * g[j] * g[j];
                p[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn renormalize_columns(w_dec: &mut Tensor) {
    let (d, k) = (w_dec.rows(), w_dec.cols());
    for c in 0..k {
        let n = (0..d).map(|r| w_dec.get(r, c).powi(2)).sum::<f64>().sqrt();
        if n > NORM_EPS {
            for r in 0..d {
                w_dec.data_mut()[r * k + c] /= n;
            }
        }
    }
}

/// Mean squared reconstruction error `mean ‖a − ā‖²` in raw units.
pub fn reconstruction_mse(sae: &Sae, vectors: &Tensor, rows: &[usize]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|&r| {
            let a = vectors.row(r);
            let rec = sae.reconstruct(a);
            a.iter().zip(&rec).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        })
        .sum();
    total / rows.len().max(1) as f64
}

pub fn mean_l0(sae: &Sae, vectors: &Tensor, rows: &[usize]) -> f64 {
    let total: usize = rows
        .iter()
        .map(|&r| sae.encode(vectors.row(r)).iter().filter(|v| **v > 0.0).count())
        .sum();
    total as f64 / rows.len().max(1) as f64
}

/// Seeded train / held-out row split.
pub fn split_rows(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "sae-split"));
    let held = ((n as f64 * holdout_fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1).max(1));
    let train = idx.split_off(held.min(idx.len()));
    (train, idx)
}

pub fn train_sae(dataset: &ActivationDataset, config: &SaeConfig) -> Result<(Sae, SaeTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let d = dataset.vectors.cols();
    let k = config.n_features;
    if k < d {
        return Err(Error::InvalidArgument(format!("n_features {k} < d_model {d}")));
    }
    if !(config.lambda >= 0.0) {
        return Err(Error::InvalidArgument("lambda must be >= 0".into()));
    }

    let (train_rows, held_rows) = split_rows(dataset.len(), config.holdout_fraction, config.seed);
    let mean_norm = train_rows
        .iter()
        .map(|&r| norm(dataset.vectors.row(r)))
        .sum::<f64>()
        / train_rows.len() as f64;
    let input_scale = if mean_norm > NORM_EPS {
        (d as f64).sqrt() / mean_norm
    } else {
        1.0
    };

    let mut rng = rng_for(config.seed, "sae-init");
    let mut w_dec = Tensor::new(vec![d, k], (0..d * k).map(|_| gaussian(&mut rng)).collect())?;
    renormalize_columns(&mut w_dec);
    let mut sae = Sae {
        site: dataset.site,
        activation: config.activation,
        input_scale,
        w_enc: w_dec.transpose(),
        b_enc: vec![0.0; k],
        w_dec,
        b_dec: vec![0.0; d],
    };

    let initial = reconstruction_mse(&sae, &dataset.vectors, &held_rows);
    let mut adam = Adam::new(&[k * d, k, d * k, d]);
    let mut norm_deviation = Vec::with_capacity(config.steps);
    let mut mse_curve = vec![(0, initial)];
    let every = (config.steps / 10).max(1);
    let mut batch_rng = rng_for(config.seed, "sae-batches");
    let bsz = config.batch.max(1);

    for step in 0..config.steps {
        let rows: Vec<usize> = (0..bsz)
            .map(|_| train_rows[batch_rng.random_range(0..train_rows.len())])
            .collect();
        let mut batch = Vec::with_capacity(bsz * d);
        for &r in &rows {
            batch.extend(dataset.vectors.row(r).iter().map(|v| v * input_scale));
        }

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(bsz, d, batch)?);
        let w_enc = tape.leaf(sae.w_enc.clone());
        let b_enc = tape.leaf(Tensor::matrix(1, k, sae.b_enc.clone())?);
        let w_dec = tape.leaf(sae.w_dec.clone());
        let b_dec = tape.leaf(Tensor::matrix(1, d, sae.b_dec.clone())?);

        let pre = tape.matmul_nt(a, w_enc)?;
        let pre = tape.add_row(pre, b_enc)?;
        let f = match config.activation {
            SaeActivation::Relu => tape.relu(pre),
            SaeActivation::TopK { k } => tape.topk_relu(pre, k),
            SaeActivation::Linear => pre,
        };
        let rec = tape.matmul_nt(f, w_dec)?;
        let rec = tape.add_row(rec, b_dec)?;
        let err = tape.sub(a, rec)?;
        let sq = tape.mul(err, err)?;
        let mse = tape.sum(sq);
        let norms = tape.col_norms(w_dec);
        let weighted = tape.matmul_nt(f, norms)?;
        let sparsity = tape.sum(weighted);
        let sparsity = tape.scale(sparsity, config.lambda);
        let total = tape.add(mse, sparsity)?;
        let loss = tape.scale(total, 1.0 / bsz as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let g = [
            grads.get_or_zeros(&tape, w_enc),
            grads.get_or_zeros(&tape, b_enc),
            grads.get_or_zeros(&tape, w_dec),
            grads.get_or_zeros(&tape, b_dec),
        ];
        {
            let mut params: Vec<&mut [f64]> = vec![
                sae.w_enc.data_mut(),
                &mut sae.b_enc,
                sae.w_dec.data_mut(),
                &mut sae.b_dec,
            ];
            let grads: Vec<&[f64]> = g.iter().map(Tensor::data).collect();
            adam.step(&mut params, &grads, config.lr);
        }
        renormalize_columns(&mut sae.w_dec);
        norm_deviation.push(sae.max_norm_deviation());
        if (step + 1) % every == 0 || step + 1 == config.steps {
            mse_curve.push((step + 1, reconstruction_mse(&sae, &dataset.vectors, &held_rows)));
        }
    }
    if !(sae.w_enc.is_finite() && sae.w_dec.is_finite()) {
        return Err(Error::Divergence {
            step: config.steps,
            loss: f64::NAN,
        });
    }

    let final_mse = mse_curve.last().map(|x| x.1).unwrap_or(initial);
    let l0 = mean_l0(&sae, &dataset.vectors, &held_rows);
    Ok((
        sae,
        SaeTrainReport {
            initial_heldout_mse: initial,
            final_heldout_mse: final_mse,
            norm_deviation,
            mse_curve,
            mean_l0: l0,
        },
    ))
}

// ---------------------------------------------------------------------------
// Feature activations over a corpus
// ---------------------------------------------------------------------------

/// One firing of a feature: where, on which token, how strongly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub sequence: usize,
    pub position: usize,
    pub token: u32,
    pub value: f64,
}

/// All firings of one feature, sorted by descending activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureActivationRecord {
    pub feature: usize,
    pub entries: Vec<ActivationEntry>,
}

/// Sparse feature activations for every row of a harvested dataset.
#[derive(Debug, Clone)]
pub struct FeatureActivations {
    /// Per feature, `(dataset row, value > 0)` in row order.
    per_feature: Vec<Vec<(usize, f64)>>,
    provenance: Vec<(usize, usize)>,
    tokens: Vec<u32>,
}

impl FeatureActivations {
    pub fn compute(sae: &Sae, dataset: &ActivationDataset) -> Self {
        let k = sae.n_features();
        let codes: Vec<Vec<(usize, f64)>> = (0..dataset.len())
            .into_par_iter()
            .map(|r| {
                sae.encode(dataset.vectors.row(r))
                    .into_iter()
                    .enumerate()
                    .filter(|(_, v)| *v > 0.0)
                    .collect()
            })
            .collect();
        let mut per_feature = vec![Vec::new(); k];
        for (r, row) in codes.into_iter().enumerate() {
            for (i, v) in row {
                per_feature[i].push((r, v));
            }
        }
        Self {
            per_feature,
            provenance: dataset.provenance.clone(),
            tokens: dataset.tokens.clone(),
        }
    }

    /// Hand-built activations for tests: one token per dataset row.
    #[cfg(test)]
    pub(crate) fn from_parts(per_feature: Vec<Vec<(usize, f64)>>, tokens: Vec<u32>) -> Self {
        Self {
            provenance: (0..tokens.len()).map(|r| (r, 0)).collect(),
            per_feature,
            tokens,
        }
    }

    pub fn n_features(&self) -> usize {
        self.per_feature.len()
    }

    pub fn fires(&self, feature: usize) -> bool {
        self.per_feature.get(feature).is_some_and(|v| !v.is_empty())
    }

    /// Features that fire at least once (and so are analyzed).
    pub fn live_features(&self) -> Vec<usize> {
        (0..self.n_features()).filter(|&i| self.fires(i)).collect()
    }

    pub fn max_activation(&self, feature: usize) -> f64 {
        self.per_feature[feature].iter().map(|x| x.1).fold(0.0, f64::max)
    }

    pub fn record(&self, feature: usize) -> FeatureActivationRecord {
        let mut entries: Vec<ActivationEntry> = self.per_feature[feature]
            .iter()
            .map(|&(r, value)| ActivationEntry {
                sequence: self.provenance[r].0,
                position: self.provenance[r].1,
                token: self.tokens[r],
                value,
            })
            .collect();
        entries.sort_by(|a, b| {
            b.value
                .total_cmp(&a.value)
                .then(a.sequence.cmp(&b.sequence))
                .then(a.position.cmp(&b.position))
        });
        FeatureActivationRecord { feature, entries }
    }

    /// Activation of `feature` at every position, keyed by `(sequence, position)`.
    fn lookup(&self, feature: usize) -> HashMap<(usize, usize), f64> {
        self.per_feature[feature]
            .iter()
            .map(|&(r, v)| (self.provenance[r], v))
            .collect()
    }
}

/// Tokens whose activation of a feature reaches `ratio` of the feature's maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSet {
    pub feature: usize,
    pub tokens: BTreeSet<u32>,
    pub ratio: f64,
}

pub fn top_activating_tokens(acts: &FeatureActivations, feature: usize, ratio: f64) -> Result<TokenSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside (0, 1]")));
    }
    if feature >= acts.n_features() {
        return Err(Error::InvalidArgument(format!("feature {feature} out of range")));
    }
    let mut per_token: BTreeMap<u32, f64> = BTreeMap::new();
    for &(r, v) in &acts.per_feature[feature] {
        let e = per_token.entry(acts.tokens[r]).or_insert(0.0);
        *e = e.max(v);
    }
    let global = per_token.values().cloned().fold(0.0, f64::max);
    if global <= 0.0 {
        return Err(Error::NeverFires(feature));
    }
    let tokens = per_token
        .into_iter()
        .filter(|(_, m)| *m >= ratio * global)
        .map(|(t, _)| t)
        .collect();
    Ok(TokenSet {
        feature,
        tokens,
        ratio,
    })
}

/// A short corpus window around a feature's strongest firing in one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationWindow {
    pub feature: usize,
    pub sequence: usize,
    /// Offset of the window within the sequence.
    pub start: usize,
    pub tokens: Vec<u32>,
    pub activations: Vec<f64>,
    /// Index of the maximum activation within the window.
    pub peak: usize,
}

impl ActivationWindow {
    pub fn peak_value(&self) -> f64 {
        self.activations[self.peak]
    }
}

/// The `n` sequences where `feature` peaks highest, each as a window of up to
/// [`RECORD_WINDOW`] tokens centered on the peak.
pub fn activation_records(
    acts: &FeatureActivations,
    corpus: &Corpus,
    feature: usize,
    n: usize,
) -> Result<Vec<ActivationWindow>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if feature >= acts.n_features() {
        return Err(Error::InvalidArgument(format!("feature {feature} out of range")));
    }
    if !acts.fires(feature) {
        return Err(Error::NeverFires(feature));
    }
    // Per sequence: (peak value, peak position), earliest position wins ties.
    let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(r, v) in &acts.per_feature[feature] {
        let (seq, pos) = acts.provenance[r];
        let e = best.entry(seq).or_insert((v, pos));
        if v > e.0 || (v == e.0 && pos < e.1) {
            *e = (v, pos);
        }
    }
    let mut ranked: Vec<(usize, f64, usize)> = best.into_iter().map(|(s, (v, p))| (s, v, p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let lookup = acts.lookup(feature);
    ranked
        .into_iter()
        .take(n)
        .map(|(seq, _, pos)| {
            let full = corpus
                .sequences
                .get(seq)
                .ok_or_else(|| Error::InvalidArgument(format!("sequence {seq} not in corpus")))?;
            let len = full.len();
            let w = RECORD_WINDOW.min(len);
            let start = pos.saturating_sub(w / 2).min(len - w);
            let tokens = full[start..start + w].to_vec();
            let activations: Vec<f64> = (start..start + w)
                .map(|p| lookup.get(&(seq, p)).copied().unwrap_or(0.0))
                .collect();
            Ok(ActivationWindow {
                feature,
                sequence: seq,
                start,
                tokens,
                activations,
                peak: pos - start,
            })
        })
        .collect()
}
