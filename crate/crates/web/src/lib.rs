// SPDX-License-Identifier: MIT OR Apache-2.0

//! Browser demo: a small transformer and SAE trained at load time, with three
//! interactive operations (feature steering, concept clustering and neuron
//! scaling). [`Demo`] holds the logic and runs natively; [`WebDemo`] exposes it
//! to JavaScript with JSON results.

use std::collections::BTreeSet;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use polyprobe::evaluation::{EmbeddingTable, TargetProfile};
use polyprobe::gloss::{synthesize_glosses, GlossSynthesis};
use polyprobe::interference::agglomerative_cluster;
use polyprobe::interventions::{apply_steering, neuron_intervene, steering_from_feature, SteeringPlan, TransportCalibration};
use polyprobe::model::corpus::{synth_corpus, CorpusSpec};
use polyprobe::model::train::{train, TrainHyper};
use polyprobe::model::{Distribution, Model, ModelConfig, Site};
use polyprobe::sae::{harvest_activations, top_activating_tokens, train_sae, FeatureActivations, Sae, SaeConfig};
use polyprobe::tensor::norm;
use polyprobe::Result;

const TOP_K: usize = 8;
/// One unit of α as a fraction of the mean activation norm at the site.
const UNIT_FRACTION: f64 = 0.2;
const TOKEN_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenProb {
    pub token: u32,
    pub prob: f64,
}

/// Next-token distribution before and after one intervention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputView {
    pub before: Vec<TokenProb>,
    pub after: Vec<TokenProb>,
    pub total_variation: f64,
    pub delta_c: Option<f64>,
    pub delta_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub members: Vec<usize>,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterView {
    pub cutoff: f64,
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoInfo {
    pub site: String,
    pub d_model: usize,
    pub live_features: usize,
    pub feature: usize,
    pub target_tokens: Vec<u32>,
    pub prompt: Vec<u32>,
}

pub struct Demo {
    model: Model,
    plan: SteeringPlan,
    profile: TargetProfile,
    prompt: Vec<u32>,
    site: Site,
    feature: usize,
    /// Features with a gloss, their gloss vectors and top tokens.
    gloss_ids: Vec<usize>,
    gloss_vectors: Vec<Vec<f64>>,
    gloss_tokens: Vec<BTreeSet<u32>>,
    live: usize,
}

fn top_tokens(d: &Distribution) -> Vec<TokenProb> {
    let mut v: Vec<TokenProb> = d
        .probs()
        .iter()
        .enumerate()
        .map(|(t, &p)| TokenProb { token: t as u32, prob: p })
        .collect();
    v.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.token.cmp(&b.token)));
    v.truncate(TOP_K);
    v
}

impl Demo {
    /// Train the demo model and SAE. Deterministic in `seed`.
    pub fn build(seed: u64) -> Result<Self> {
        let spec = CorpusSpec::planted(64, 6, 6, 2, 0.1, 300, 12, seed)?;
        let corpus = synth_corpus(&spec)?;
        let config = ModelConfig {
            vocab_size: 64,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_mlp: 64,
            context_length: 16,
            seed,
        };
        let hyper = TrainHyper {
            lr: 0.3,
            steps: 200,
            batch: 8,
            seed,
            ..TrainHyper::default()
        };
        let (model, _) = train(&Model::init(config)?, &corpus, &hyper)?;
        let site = Site::resid_post(0);
        let ds = harvest_activations(&model, &corpus, site)?;
        let sae_config = SaeConfig {
            n_features: 64,
            lambda: 3.0,
            steps: 400,
            seed,
            ..SaeConfig::default()
        };
        let (sae, _): (Sae, _) = train_sae(&ds, &sae_config)?;
        let acts = FeatureActivations::compute(&sae, &ds);
        let glosses = synthesize_glosses(&acts, &spec, &GlossSynthesis { seed, ..GlossSynthesis::default() })?;

        let gloss_ids: Vec<usize> = glosses.features().collect();
        let gloss_vectors = gloss_ids
            .iter()
            .map(|&f| glosses.get(f).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let gloss_tokens = gloss_ids
            .iter()
            .map(|&f| top_activating_tokens(&acts, f, TOKEN_RATIO).map(|t| t.tokens))
            .collect::<Result<Vec<_>>>()?;
        let feature = gloss_ids
            .iter()
            .copied()
            .max_by(|&a, &b| acts.max_activation(a).total_cmp(&acts.max_activation(b)).then(b.cmp(&a)))
            .ok_or_else(|| polyprobe::Error::EmptyInput("no live features".into()))?;

        let mean_norm = (0..ds.len()).map(|r| norm(ds.vectors.row(r))).sum::<f64>() / ds.len() as f64;
        let calib = TransportCalibration::from_prompts(&model, &corpus.sequences)?;
        let plan = steering_from_feature(&model, &calib, &sae, feature, site)?.with_unit(UNIT_FRACTION * mean_norm)?;
        let table = EmbeddingTable::from_model("demo", &model)?;
        let tokens = &gloss_tokens[gloss_ids.binary_search(&feature).expect("feature has a gloss")];
        let profile = TargetProfile::new(tokens, &table)?;
        let prompt = spec.sample_prompts(1, 6, 10, seed).remove(0);
        Ok(Self {
            model,
            plan,
            profile,
            prompt,
            site,
            feature,
            live: acts.live_features().len(),
            gloss_ids,
            gloss_vectors,
            gloss_tokens,
        })
    }

    pub fn info(&self) -> DemoInfo {
        DemoInfo {
            site: self.site.to_string(),
            d_model: self.model.config().d_model,
            live_features: self.live,
            feature: self.feature,
            target_tokens: self.profile.tokens.iter().copied().collect(),
            prompt: self.prompt.clone(),
        }
    }

    /// Add `α` units of the feature direction at the final position.
    pub fn steer(&self, alpha: f64) -> Result<OutputView> {
        let out = apply_steering(&self.model, &self.prompt, &self.plan, alpha, &self.profile)?;
        Ok(OutputView {
            before: top_tokens(&out.before),
            after: top_tokens(&out.after),
            total_variation: out.tv,
            delta_c: out.metrics.delta_c,
            delta_w: out.metrics.delta_w,
        })
    }

    /// Group features by gloss similarity at `cutoff`.
    pub fn clusters(&self, cutoff: f64) -> Result<ClusterView> {
        let partition = agglomerative_cluster(&self.gloss_ids, &self.gloss_vectors, cutoff)?;
        let clusters = partition
            .clusters
            .into_iter()
            .map(|members| {
                let mut tokens = BTreeSet::new();
                for m in &members {
                    let i = self.gloss_ids.binary_search(m).expect("clustered ids have glosses");
                    tokens.extend(&self.gloss_tokens[i]);
                }
                ClusterSummary {
                    members,
                    tokens: tokens.into_iter().collect(),
                }
            })
            .collect();
        Ok(ClusterView { cutoff, clusters })
    }

    /// Multiply one activation coordinate at the SAE site by `scale`.
    pub fn scale_neuron(&self, neuron: usize, scale: f64) -> Result<OutputView> {
        let outs = neuron_intervene(
            &self.model,
            self.site,
            neuron,
            scale,
            &self.prompt,
            &[(0, self.profile.clone())],
        )?;
        let out = &outs[0].outcome;
        Ok(OutputView {
            before: top_tokens(&out.before),
            after: top_tokens(&out.after),
            total_variation: out.tv,
            delta_c: out.metrics.delta_c,
            delta_w: out.metrics.delta_w,
        })
    }
}

fn to_js<T: Serialize>(value: Result<T>) -> std::result::Result<String, JsError> {
    let v = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JavaScript handle; every method returns a JSON string.
#[wasm_bindgen]
pub struct WebDemo {
    inner: Demo,
}

#[wasm_bindgen]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<WebDemo, JsError> {
        let inner = Demo::build(u64::from(seed)).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Self { inner })
    }

    pub fn info(&self) -> std::result::Result<String, JsError> {
        to_js(Ok(self.inner.info()))
    }

    pub fn steer(&self, alpha: f64) -> std::result::Result<String, JsError> {
        to_js(self.inner.steer(alpha))
    }

    pub fn clusters(&self, cutoff: f64) -> std::result::Result<String, JsError> {
        to_js(self.inner.clusters(cutoff))
    }

    pub fn scale_neuron(&self, neuron: u32, scale: f64) -> std::result::Result<String, JsError> {
        to_js(self.inner.scale_neuron(neuron as usize, scale))
    }
}
