// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interference between SAE features and its relation to semantic relatedness.
//!
//! * `I(i, j) = cos(d̂_i, d̂_j)` over decoder directions.
//! * `S(i, j) = cos(m_i, m_j)` over gloss vectors.
//!
//! Clustering is average-linkage agglomerative on cosine distance `1 − cos`.
//! A `cutoff` is a similarity: clusters merge while their average distance
//! is at most `1 − cutoff`, so lower cutoffs produce coarser partitions.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gloss::GlossTable;
use crate::linalg::cosine_similarity;
use crate::model::Site;
use crate::rng::rng_for;
use crate::sae::Sae;
use crate::tensor::{dot, Tensor};

/// Similarity cutoffs at which feature clusters are reported.
pub const CLUSTER_CUTOFFS: [f64; 4] = [0.40, 0.30, 0.20, 0.15];

/// Symmetric pairwise matrix over a fixed list of feature ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub site: Site,
    pub features: Vec<usize>,
    /// `n × n`, indexed by position in `features`.
    pub values: Tensor,
}

/// `I_ℓ(i, j)` over live features.
pub type InterferenceMatrix = FeatureMatrix;
/// `S(i, j)` over features with a gloss.
pub type SemanticTable = FeatureMatrix;

impl FeatureMatrix {
    fn from_vectors(site: Site, features: Vec<usize>, vectors: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::TooFewFeatures(n));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let c = cosine_similarity(&vectors[i], &vectors[j])?;
                values[i * n + j] = c;
                values[j * n + i] = c;
            }
        }
        Ok(Self {
            site,
            features,
            values: Tensor::matrix(n, n, values)?,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, feature: usize) -> Option<usize> {
        self.features.binary_search(&feature).ok()
    }

    /// Value for a pair of feature ids, if both are present.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        Some(self.values.get(self.index_of(i)?, self.index_of(j)?))
    }

    pub fn row(&self, feature: usize) -> Option<&[f64]> {
        Some(self.values.row(self.index_of(feature)?))
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        Checkpoint {
            kind: kind.into(),
            config: serde_json::json!({ "site": self.site, "features": self.features }),
            tensors: vec![("values".into(), self.values.clone())],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let site = ckpt
            .config
            .get("site")
            .cloned()
            .ok_or_else(|| Error::CorruptFile("missing site".into()))?;
        let features = ckpt
            .config
            .get("features")
            .cloned()
            .ok_or_else(|| Error::CorruptFile("missing features".into()))?;
        let out = Self {
            site: serde_json::from_value(site)?,
            features: serde_json::from_value(features)?,
            values: ckpt.tensor("values")?.clone(),
        };
        let n = out.features.len();
        if out.values.shape() != [n, n] || out.features.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CorruptFile("feature matrix shape disagrees with header".into()));
        }
        Ok(out)
    }
}

/// Interference matrix over the given live features (sorted, deduplicated).
pub fn interference_matrix(sae: &Sae, live: &[usize]) -> Result<InterferenceMatrix> {
    let features: Vec<usize> = live.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let dirs = features
        .iter()
        .map(|&f| sae.feature_direction(f).map(|d| d.direction))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_vectors(sae.site, features, &dirs)
}

/// Semantic relatedness over every feature with a gloss.
pub fn semantic_table(site: Site, glosses: &GlossTable) -> Result<SemanticTable> {
    let features: Vec<usize> = glosses.features().collect();
    let vectors = features
        .iter()
        .map(|&f| glosses.get(f).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_vectors(site, features, &vectors)
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCluster {
    pub cutoff: f64,
    pub linkage: String,
    /// Each cluster is sorted; clusters are ordered by their smallest member.
    pub clusters: Vec<Vec<usize>>,
}

impl FeatureCluster {
    pub fn cluster_of(&self, feature: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.binary_search(&feature).is_ok())
    }

    fn canonical(cutoff: f64, mut clusters: Vec<Vec<usize>>) -> Self {
        for c in clusters.iter_mut() {
            c.sort_unstable();
        }
        clusters.sort();
        Self {
            cutoff,
            linkage: "average".into(),
            clusters,
        }
    }
}

fn check_cluster_input(ids: &[usize], vectors: &[Vec<f64>], cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::InvalidArgument(format!("cutoff {cutoff} outside (0, 1)")));
    }
    if ids.is_empty() || ids.len() != vectors.len() {
        return Err(Error::InvalidArgument("need one vector per id and at least one".into()));
    }
    Ok(())
}

/// Average-linkage agglomerative clustering on cosine distance.
///
/// Uses the Lance-Williams update, so it is `O(n³)` overall. Among equal
/// minimal distances the lexicographically smallest cluster pair merges first.
pub fn agglomerative_cluster(ids: &[usize], vectors: &[Vec<f64>], cutoff: f64) -> Result<FeatureCluster> {
    check_cluster_input(ids, vectors, cutoff)?;
    let n = ids.len();
    let unit = vectors
        .iter()
        .map(|v| crate::linalg::normalize(v))
        .collect::<Result<Vec<_>>>()?;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - dot(&unit[i], &unit[j]).clamp(-1.0, 1.0);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = ids.iter().map(|&id| Some(vec![id])).collect();
    let threshold = 1.0 - cutoff;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if members[j].is_none() {
                    continue;
                }
                let d = dist[i * n + j];
                if best.is_none_or(|(b, _, _)| d < b) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d > threshold {
            break;
        }
        let mb = members[b].take().expect("active cluster");
        let ma = members[a].as_mut().expect("active cluster");
        let (na, nb) = (ma.len() as f64, mb.len() as f64);
        ma.extend(mb);
        for k in 0..n {
            if k == a || members[k].is_none() {
                continue;
            }
            let v = (na * dist[a * n + k] + nb * dist[b * n + k]) / (na + nb);
            dist[a * n + k] = v;
            dist[k * n + a] = v;
        }
    }
    Ok(FeatureCluster::canonical(cutoff, members.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceBin {
    pub lo: f64,
    pub hi: f64,
    /// Whether `hi` itself belongs to the bin.
    pub closed: bool,
}

impl InterferenceBin {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && (x < self.hi || (self.closed && x <= self.hi))
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn label(&self) -> String {
        format!("[{:.1},{:.1}{}", self.lo, self.hi, if self.closed { "]" } else { ")" })
    }
}

/// `[0,.1) [.1,.2) [.2,.3) [.3,.4) [.4,1]`
pub fn default_bins() -> Vec<InterferenceBin> {
    let edges = [0.0, 0.1, 0.2, 0.3, 0.4, 1.0];
    edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| InterferenceBin {
            lo: w[0],
            hi: w[1],
            closed: i == edges.len() - 2,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCandidates {
    pub bin: InterferenceBin,
    /// Every eligible feature, ascending.
    pub eligible: Vec<usize>,
    /// Seeded sample of `eligible`.
    pub sampled: Vec<usize>,
}

impl BinCandidates {
    pub fn is_empty(&self) -> bool {
        self.eligible.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    /// Candidates must have `S(target, j)` strictly below this.
    pub relevancy_cutoff: f64,
    pub per_bin: usize,
    pub seed: u64,
}

/// Interfering candidates for `target`, one list per bin.
///
/// Eligible features are live (present in `interference`), carry a gloss,
/// sit outside the target's cluster, and are semantically unrelated to it.
pub fn sample_interference_pairs(
    target: usize,
    clusters: &FeatureCluster,
    interference: &InterferenceMatrix,
    semantic: &SemanticTable,
    bins: &[InterferenceBin],
    opts: &PairSampling,
) -> Result<Vec<BinCandidates>> {
    let row = interference
        .row(target)
        .ok_or_else(|| Error::InvalidArgument(format!("target {target} is not live")))?;
    let own = clusters.cluster_of(target);
    let own_members: &[usize] = own.map(|c| clusters.clusters[c].as_slice()).unwrap_or(&[]);
    let eligible: Vec<(usize, f64)> = interference
        .features
        .iter()
        .zip(row)
        .filter(|(&j, _)| j != target && own_members.binary_search(&j).is_err())
        .filter(|(&j, _)| semantic.get(target, j).is_some_and(|s| s < opts.relevancy_cutoff))
        .map(|(&j, &i)| (j, i))
        .collect();
    Ok(bins
        .iter()
        .enumerate()
        .map(|(b, bin)| {
            let eligible: Vec<usize> = eligible.iter().filter(|(_, i)| bin.contains(*i)).map(|x| x.0).collect();
            let mut sampled = eligible.clone();
            sampled.shuffle(&mut rng_for(opts.seed, &format!("pairs-{target}-{b}")));
            sampled.truncate(opts.per_bin);
            BinCandidates {
                bin: *bin,
                eligible,
                sampled,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Neurons
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronProfile {
    pub site: Site,
    pub neuron: usize,
    pub degree: usize,
    /// `(cluster index, alignment)` for every cluster that retained this neuron.
    pub connections: Vec<(usize, f64)>,
}

/// Per-neuron polysemanticity degree.
///
/// A cluster's alignment with neuron `r` is the mean `|W_dec[r, i]|` over its
/// member features; each cluster keeps its `top_n` best-aligned neurons whose
/// alignment exceeds `threshold`.
pub fn neuron_polysemanticity(
    sae: &Sae,
    clusters: &FeatureCluster,
    threshold: f64,
    top_n: usize,
) -> Vec<NeuronProfile> {
    let d = sae.d_model();
    let mut profiles: Vec<NeuronProfile> = (0..d)
        .map(|neuron| NeuronProfile {
            site: sae.site,
            neuron,
            degree: 0,
            connections: Vec::new(),
        })
        .collect();
    for (c, members) in clusters.clusters.iter().enumerate() {
        let mut align: Vec<(usize, f64)> = (0..d)
            .map(|r| {
                let s: f64 = members.iter().map(|&i| sae.w_dec.get(r, i).abs()).sum();
                (r, s / members.len() as f64)
            })
            .collect();
        align.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(r, a) in align.iter().take(top_n).filter(|(_, a)| *a > threshold) {
            profiles[r].connections.push((c, a));
        }
    }
    for p in profiles.iter_mut() {
        p.degree = p.connections.len();
    }
    profiles
}

// ---------------------------------------------------------------------------
// Shared pairs across models
// ---------------------------------------------------------------------------

/// What one model contributes to shared-pair mining.
#[derive(Debug, Clone)]
pub struct PairArtifacts {
    pub interference: InterferenceMatrix,
    pub semantic: SemanticTable,
    pub glosses: GlossTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedPairThresholds {
    pub interference: f64,
    pub semantic: f64,
    pub cross: f64,
}

impl Default for SharedPairThresholds {
    fn default() -> Self {
        Self {
            interference: 0.4,
            semantic: 0.2,
            cross: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedPair {
    /// Pair in model A, `a.0 < a.1`.
    pub a: (usize, usize),
    /// Pair in model B, `b.0 < b.1`.
    pub b: (usize, usize),
    /// Smaller endpoint gloss cosine under the better endpoint assignment.
    pub score: f64,
    /// Whether the better assignment maps `a.0 ↔ b.1` and `a.1 ↔ b.0`.
    pub crossed: bool,
}

/// Pairs `i < j` with high interference and low semantic relatedness.
pub fn qualifying_pairs(art: &PairArtifacts, t: &SharedPairThresholds) -> Vec<(usize, usize)> {
    let f = &art.interference.features;
    let mut out = Vec::new();
    for (x, &i) in f.iter().enumerate() {
        for (y, &j) in f.iter().enumerate().skip(x + 1) {
            if art.interference.values.get(x, y) > t.interference
                && art.semantic.get(i, j).is_some_and(|s| s < t.semantic)
            {
                out.push((i, j));
            }
        }
    }
    out
}

fn cross_score(a: &GlossTable, b: &GlossTable, pa: (usize, usize), pb: (usize, usize)) -> Result<(f64, bool)> {
    let c = |i: usize, j: usize| -> Result<f64> { cosine_similarity(a.get(i)?, b.get(j)?) };
    let straight = c(pa.0, pb.0)?.min(c(pa.1, pb.1)?);
    let crossed = c(pa.0, pb.1)?.min(c(pa.1, pb.0)?);
    Ok(if crossed > straight { (crossed, true) } else { (straight, false) })
}

/// Qualifying pairs of A matched to qualifying pairs of B whose endpoints
/// carry similar glosses. Sorted by `(a, b)`.
pub fn mine_shared_pairs(a: &PairArtifacts, b: &PairArtifacts, t: &SharedPairThresholds) -> Result<Vec<SharedPair>> {
    let qa = qualifying_pairs(a, t);
    let qb = qualifying_pairs(b, t);
    let mut out = Vec::new();
    for &pa in &qa {
        for &pb in &qb {
            let (score, crossed) = cross_score(&a.glosses, &b.glosses, pa, pb)?;
            if score > t.cross {
                out.push(SharedPair {
                    a: pa,
                    b: pb,
                    score,
                    crossed,
                });
            }
        }
    }
    Ok(out)
}
