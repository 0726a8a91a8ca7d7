// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature gloss embeddings.
//!
//! A gloss vector `m_i` stands in for an embedded natural-language
//! description of feature `i`. They are exchanged as JSON lines:
//!
//! ```text
//! {"feature_id": 17, "site": "blocks.1.hook_resid_post", "vector": [0.1, ...]}
//! ```
//!
//! [`synthesize_glosses`] produces such a file for toy models from the planted
//! concept groups: each feature's gloss is an activation-weighted mixture of
//! the concept embeddings of its top-activating tokens, plus a little noise.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, normalize};
use crate::model::corpus::CorpusSpec;
use crate::model::Site;
use crate::rng::{gaussian, rng_for};
use crate::sae::FeatureActivations;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlossRecord {
    pub feature_id: usize,
    pub site: Site,
    pub vector: Vec<f64>,
}

/// Unit-normalized gloss vectors for the features of one site.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlossTable {
    vectors: BTreeMap<usize, Vec<f64>>,
}

impl GlossTable {
    pub fn insert(&mut self, feature: usize, vector: &[f64]) -> Result<()> {
        self.vectors.insert(feature, normalize(vector)?);
        Ok(())
    }

    pub fn get(&self, feature: usize) -> Result<&[f64]> {
        self.vectors
            .get(&feature)
            .map(Vec::as_slice)
            .ok_or(Error::MissingGloss(feature))
    }

    pub fn contains(&self, feature: usize) -> bool {
        self.vectors.contains_key(&feature)
    }

    pub fn features(&self) -> impl Iterator<Item = usize> + '_ {
        self.vectors.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Read every record for `site`; records for other sites are skipped.
    pub fn read_jsonl(reader: impl BufRead, site: Site) -> Result<Self> {
        let mut table = Self::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: GlossRecord = serde_json::from_str(&line)?;
            if rec.site == site {
                table.insert(rec.feature_id, &rec.vector)?;
            }
        }
        Ok(table)
    }

    pub fn write_jsonl(&self, mut out: impl Write, site: Site) -> Result<()> {
        for (&feature_id, vector) in &self.vectors {
            let rec = GlossRecord {
                feature_id,
                site,
                vector: vector.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `S(i, j)`: cosine between the two features' gloss vectors.
pub fn semantic_relatedness(glosses: &GlossTable, i: usize, j: usize) -> Result<f64> {
    cosine_similarity(glosses.get(i)?, glosses.get(j)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlossSynthesis {
    pub dim: usize,
    /// Standard deviation of per-coordinate noise added after mixing.
    pub noise: f64,
    /// Tokens reaching this fraction of the feature's maximum contribute.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for GlossSynthesis {
    fn default() -> Self {
        Self {
            dim: 64,
            noise: 0.05,
            ratio: 0.8,
            seed: 0,
        }
    }
}

/// Concept key of a token: its planted group, or the token itself when it is filler.
fn concept_key(spec: &CorpusSpec, token: u32) -> (bool, u64) {
    match spec.group_of(token) {
        Some(g) => (true, g as u64),
        None => (false, token as u64),
    }
}

/// Gloss vectors for every live feature, derived from the planted concepts of
/// the tokens each feature fires most strongly on.
pub fn synthesize_glosses(
    acts: &FeatureActivations,
    spec: &CorpusSpec,
    opts: &GlossSynthesis,
) -> Result<GlossTable> {
    if opts.dim == 0 {
        return Err(Error::InvalidArgument("gloss dimension must be >= 1".into()));
    }
    // Concept embeddings depend only on the spec seed and the concept key, so
    // two models trained on one corpus share a gloss space.
    let mut concepts: HashMap<(bool, u64), Vec<f64>> = HashMap::new();
    let mut concept = |key: (bool, u64)| {
        concepts
            .entry(key)
            .or_insert_with(|| {
                let label = format!("concept-{}-{}", if key.0 { "group" } else { "token" }, key.1);
                let mut rng = rng_for(spec.seed, &label);
                (0..opts.dim).map(|_| gaussian(&mut rng)).collect()
            })
            .clone()
    };
    let mut table = GlossTable::default();
    for feature in acts.live_features() {
        let record = acts.record(feature);
        let max = record.entries.first().map(|e| e.value).unwrap_or(0.0);
        let mut per_token: BTreeMap<u32, f64> = BTreeMap::new();
        for e in record.entries.iter().filter(|e| e.value >= opts.ratio * max) {
            let w = per_token.entry(e.token).or_insert(0.0);
            *w = w.max(e.value);
        }
        let mut mix = vec![0.0; opts.dim];
        for (&tok, &w) in &per_token {
            for (m, c) in mix.iter_mut().zip(concept(concept_key(spec, tok))) {
                *m += w * c;
            }
        }
        let mut mix = normalize(&mix)?;
        let mut rng = rng_for(opts.seed, &format!("gloss-noise-{feature}"));
        for m in mix.iter_mut() {
            *m += opts.noise * gaussian(&mut rng);
        }
        table.insert(feature, &mix)?;
    }
    Ok(table)
}
