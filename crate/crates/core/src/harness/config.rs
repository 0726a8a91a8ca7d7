// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration, seeding and hashing.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{Metric, BOOTSTRAP_RESAMPLES};
use crate::gloss::GlossSynthesis;
use crate::interference::{default_bins, InterferenceBin, SharedPairThresholds, CLUSTER_CUTOFFS};
use crate::interventions::{symmetric_grid, SnippetPolicy, DEFAULT_GUARD_TV, MAX_ALPHA, POSITIVE_GRID};
use crate::model::corpus::{CorpusSpec, SEPARATOR_TOKEN};
use crate::model::train::TrainHyper;
use crate::model::{ModelConfig, Site};
use crate::rng::derive_seed;
use crate::sae::{SaeConfig, RECORD_WINDOW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            n: 6,
            min_len: 8,
            max_len: 16,
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Cutoffs at which the semantic clustering is reported.
    pub cluster_cutoffs: Vec<f64>,
    /// Cutoff of the clustering that excludes same-cluster pair candidates.
    pub pair_cutoff: f64,
    /// Pair candidates need `S(target, j)` below this.
    pub relevancy_cutoff: f64,
    pub bins: Vec<InterferenceBin>,
    /// `T_f` keeps tokens reaching this fraction of the feature's maximum.
    pub token_ratio: f64,
    /// Leading corpus sequences used to calibrate transport and steering units.
    pub calibration_sequences: usize,
    pub sampling_seed: u64,
    pub shared: SharedPairThresholds,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            cluster_cutoffs: CLUSTER_CUTOFFS.to_vec(),
            pair_cutoff: 0.4,
            relevancy_cutoff: 0.4,
            bins: default_bins(),
            token_ratio: 0.8,
            calibration_sequences: 200,
            sampling_seed: 3,
            shared: SharedPairThresholds::default(),
        }
    }
}

/// Feature-direction steering study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub n_targets: usize,
    pub pairs_per_bin: usize,
    pub n_prompts: usize,
    /// Edit site; `None` steers at the SAE site.
    pub site: Option<Site>,
    /// One unit of α is this fraction of the mean activation norm at the edit site.
    pub unit_fraction: f64,
    pub grid: Vec<f64>,
    pub guard_tv: f64,
    pub metric: Metric,
    pub prefilter_theta: f64,
    pub prefilter_grid: Vec<f64>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            n_targets: 100,
            pairs_per_bin: 4,
            n_prompts: 6,
            site: None,
            unit_fraction: 0.2,
            grid: symmetric_grid(),
            guard_tv: DEFAULT_GUARD_TV,
            metric: Metric::DeltaC,
            prefilter_theta: 0.05,
            prefilter_grid: POSITIVE_GRID.to_vec(),
        }
    }
}

/// Token-gradient steering study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientConfig {
    pub n_targets: usize,
    pub pairs_per_bin: usize,
    pub n_prompts: usize,
    pub site: Site,
    pub unit_fraction: f64,
    pub grid: Vec<f64>,
    pub guard_tv: f64,
    pub metric: Metric,
    /// Probe with a one-hot on the direction's largest coordinate instead of
    /// the full feature direction.
    pub one_hot_probe: bool,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            n_targets: 30,
            pairs_per_bin: 2,
            n_prompts: 3,
            site: Site::resid_pre(0),
            unit_fraction: 0.2,
            grid: POSITIVE_GRID.to_vec(),
            guard_tv: DEFAULT_GUARD_TV,
            metric: Metric::DeltaC,
            one_hot_probe: false,
        }
    }
}

/// Prompt-injection study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub n_targets: usize,
    pub pairs_per_bin: usize,
    pub n_prompts: usize,
    pub separator: Option<u32>,
    pub snippet: SnippetPolicy,
    pub metric: Metric,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            n_targets: 30,
            pairs_per_bin: 2,
            n_prompts: 6,
            separator: Some(SEPARATOR_TOKEN),
            snippet: SnippetPolicy::default(),
            metric: Metric::DeltaW,
        }
    }
}

/// Neuron masking and amplification study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronConfig {
    /// Clustering cutoff defining the concepts a neuron can connect to.
    pub cutoff: f64,
    pub threshold: f64,
    pub top_n: usize,
    pub amplify_scales: Vec<f64>,
    pub n_prompts: usize,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            cutoff: 0.4,
            threshold: 0.2,
            top_n: 3,
            amplify_scales: vec![2.0, 5.0, 10.0, 20.0],
            n_prompts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub corpus: CorpusSpec,
    /// Model A; its `seed` initializes the weights.
    pub model: ModelConfig,
    /// Initialization seed of model B, used for shared-pair mining.
    pub model_b_seed: u64,
    pub train: TrainHyper,
    pub sae_site: Site,
    pub sae: SaeConfig,
    pub gloss: GlossSynthesis,
    pub prompts: PromptConfig,
    pub analysis: AnalysisConfig,
    pub steering: SteeringConfig,
    pub gradient: GradientConfig,
    pub injection: InjectionConfig,
    pub neurons: NeuronConfig,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Where artifacts go. Not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig {
            seed: 11,
            ..ModelConfig::default()
        };
        let corpus = CorpusSpec::planted(model.vocab_size, 16, 10, 4, 0.1, 1200, 33, 1)
            .expect("default corpus fits the default vocabulary");
        Self {
            run_id: "default".into(),
            corpus,
            model,
            model_b_seed: 12,
            train: TrainHyper {
                lr: 0.3,
                steps: 1200,
                batch: 8,
                ..TrainHyper::default()
            },
            sae_site: Site::resid_post(1),
            sae: SaeConfig {
                lambda: 3.0,
                ..SaeConfig::default()
            },
            gloss: GlossSynthesis::default(),
            prompts: PromptConfig::default(),
            analysis: AnalysisConfig::default(),
            steering: SteeringConfig::default(),
            gradient: GradientConfig::default(),
            injection: InjectionConfig::default(),
            neurons: NeuronConfig::default(),
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
            bootstrap_seed: 1,
            out_dir: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn check_grid(name: &str, grid: &[f64], allow_negative: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid(format!("{name} is empty")));
    }
    for &a in grid {
        if !(a.abs() <= MAX_ALPHA) || (!allow_negative && a < 0.0) {
            return Err(invalid(format!("{name} entry {a} outside the allowed range")));
        }
    }
    Ok(())
}

fn check_unit_interval(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(invalid(format!("{name} = {x} outside (0, 1]")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Replace every seed by one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.corpus.seed = derive_seed(seed, "corpus");
        self.model.seed = derive_seed(seed, "model-a");
        self.model_b_seed = derive_seed(seed, "model-b");
        self.train.seed = derive_seed(seed, "train");
        self.sae.seed = derive_seed(seed, "sae");
        self.gloss.seed = derive_seed(seed, "gloss");
        self.prompts.seed = derive_seed(seed, "prompts");
        self.analysis.sampling_seed = derive_seed(seed, "sampling");
        self.bootstrap_seed = derive_seed(seed, "bootstrap");
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [
            ("corpus", self.corpus.seed),
            ("model_a", self.model.seed),
            ("model_b", self.model_b_seed),
            ("train", self.train.seed),
            ("sae", self.sae.seed),
            ("gloss", self.gloss.seed),
            ("prompts", self.prompts.seed),
            ("sampling", self.analysis.sampling_seed),
            ("bootstrap", self.bootstrap_seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    /// Canonical JSON (sorted keys) without the output directory.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(serde_json::to_string(&serde_json::to_value(&c)?)?)
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn model_b(&self) -> ModelConfig {
        ModelConfig {
            seed: self.model_b_seed,
            ..self.model.clone()
        }
    }

    pub fn steering_site(&self) -> Site {
        self.steering.site.unwrap_or(self.sae_site)
    }

    /// How many interfering features per bin the target table must carry.
    pub fn pairs_per_bin(&self) -> usize {
        self.steering
            .pairs_per_bin
            .max(self.gradient.pairs_per_bin)
            .max(self.injection.pairs_per_bin)
    }

    pub fn max_targets(&self) -> usize {
        self.steering
            .n_targets
            .max(self.gradient.n_targets)
            .max(self.injection.n_targets)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate().map_err(|e| invalid(e.to_string()))?;
        self.corpus.validate().map_err(|e| invalid(e.to_string()))?;
        let max_token = self
            .corpus
            .groups
            .iter()
            .flat_map(|g| g.tokens.iter())
            .chain(&self.corpus.filler_tokens)
            .max()
            .copied()
            .unwrap_or(0);
        if max_token as usize >= m.vocab_size {
            return Err(invalid(format!("corpus token {max_token} outside the vocabulary")));
        }
        if self.corpus.seq_len > m.context_length {
            return Err(invalid("corpus sequences exceed the context length"));
        }
        for site in [self.sae_site, self.steering_site(), self.gradient.site] {
            site.check(m).map_err(|e| invalid(e.to_string()))?;
        }
        if self.train.steps == 0 || self.train.batch == 0 || !(self.train.lr > 0.0) {
            return Err(invalid("model training needs positive steps, batch and lr"));
        }
        if self.sae.n_features < 2 || self.sae.steps == 0 || self.sae.batch == 0 || self.sae.lambda < 0.0 {
            return Err(invalid("SAE needs >= 2 features, positive steps and batch, lambda >= 0"));
        }
        let p = &self.prompts;
        if p.n == 0 || p.min_len == 0 || p.min_len > p.max_len {
            return Err(invalid("prompts need n >= 1 and 1 <= min_len <= max_len"));
        }
        let snippet_room = self.injection.snippet.max_len.unwrap_or(RECORD_WINDOW).min(RECORD_WINDOW) + 1;
        if p.max_len + snippet_room > m.context_length {
            return Err(invalid("injected prompts would exceed the context length"));
        }
        for (name, n) in [
            ("steering", self.steering.n_prompts),
            ("gradient", self.gradient.n_prompts),
            ("injection", self.injection.n_prompts),
            ("neurons", self.neurons.n_prompts),
        ] {
            if n == 0 || n > p.n {
                return Err(invalid(format!("{name}.n_prompts must be in 1..={}", p.n)));
            }
        }
        let a = &self.analysis;
        if a.cluster_cutoffs.is_empty() {
            return Err(invalid("no cluster cutoffs"));
        }
        for &c in a.cluster_cutoffs.iter().chain([&a.pair_cutoff, &self.neurons.cutoff]) {
            check_unit_interval("cluster cutoff", c)?;
        }
        check_unit_interval("token_ratio", a.token_ratio)?;
        check_unit_interval("snippet ratio", self.injection.snippet.ratio)?;
        if a.bins.is_empty() || a.bins.iter().any(|b| !(b.lo < b.hi)) {
            return Err(invalid("bins must be non-empty intervals"));
        }
        if a.calibration_sequences == 0 {
            return Err(invalid("calibration_sequences must be >= 1"));
        }
        check_grid("steering.grid", &self.steering.grid, true)?;
        check_grid("steering.prefilter_grid", &self.steering.prefilter_grid, true)?;
        check_grid("gradient.grid", &self.gradient.grid, true)?;
        for (name, f) in [
            ("steering.unit_fraction", self.steering.unit_fraction),
            ("gradient.unit_fraction", self.gradient.unit_fraction),
        ] {
            if !(f > 0.0 && f.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.max_targets() == 0 || self.pairs_per_bin() == 0 {
            return Err(invalid("need at least one target and one pair per bin"));
        }
        if let Some(s) = self.injection.separator {
            if s as usize >= m.vocab_size {
                return Err(invalid(format!("separator {s} outside the vocabulary")));
            }
        }
        if self.neurons.top_n == 0 {
            return Err(invalid("neurons.top_n must be >= 1"));
        }
        for &s in &self.neurons.amplify_scales {
            if !(s > 0.0 && s <= MAX_ALPHA) {
                return Err(invalid(format!("amplify scale {s} outside (0, 20]")));
            }
        }
        if self.bootstrap_resamples == 0 {
            return Err(invalid("bootstrap_resamples must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.canonical_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn hash_ignores_out_dir_but_tracks_seeds() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = Some("/tmp/elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.reseed(5);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.reseed(5);
        assert_eq!(b.hash().unwrap(), c.hash().unwrap());
        assert_eq!(c.seeds().len(), 9);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"run_id": "x", "steering": {"n_targets": 3}}"#).unwrap();
        assert_eq!(c.run_id, "x");
        assert_eq!(c.steering.n_targets, 3);
        assert_eq!(c.steering.pairs_per_bin, SteeringConfig::default().pairs_per_bin);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(ExperimentConfig::from_json("{"), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"unknown_field": 1}"#),
            Err(Error::InvalidConfig(_))
        ));
        let mut c = ExperimentConfig::default();
        c.steering.grid = vec![25.0];
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = ExperimentConfig::default();
        c.sae_site = Site::resid_post(7);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = ExperimentConfig::default();
        c.neurons.n_prompts = 100;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }
}
