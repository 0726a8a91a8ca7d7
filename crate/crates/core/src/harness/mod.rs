// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven pipeline: train models and SAEs, analyze interference, run
//! the four intervention families and aggregate reports.
//!
//! Stages run in order `train-model → train-sae → analyze → intervene →
//! report`. Each stage caches its artifacts in the run directory and is
//! skipped when they already exist; a stage whose inputs are missing fails
//! with [`Error::StageFailure`] naming the stage that should produce them.

pub mod artifacts;
pub mod config;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{EmbeddingTable, Metric, MetricReport, TargetProfile};
use crate::gloss::{synthesize_glosses, GlossTable};
use crate::interference::{
    agglomerative_cluster, interference_matrix, mine_shared_pairs, neuron_polysemanticity, qualifying_pairs,
    sample_interference_pairs, semantic_table, BinCandidates, FeatureCluster, FeatureMatrix, NeuronProfile,
    PairArtifacts, PairSampling, SharedPair, SharedPairThresholds,
};
use crate::interventions::{
    extract_snippet, inject_with_baseline, neuron_intervene, optimize_scale, prefilter_targets, probe_vector,
    steering_from_feature, steering_from_token_gradient, InjectionSpec, PrefilterCandidate, PrefilterReport,
    ProbeSpec, Provenance, ScaleSearchResult, SteeringPlan, TransportCalibration,
};
use crate::model::corpus::{synth_corpus, Corpus};
use crate::model::train::{train, TrainReport};
use crate::model::{Distribution, Model, Site};
use crate::sae::{
    activation_records, harvest_activations, top_activating_tokens, train_sae, ActivationWindow,
    FeatureActivations, Sae, SaeTrainReport,
};
use crate::tensor::norm;

pub use artifacts::{RunDir, Stamp, Stamped, RUN_FILE};
pub use config::ExperimentConfig;
pub use report::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainModel,
    TrainSae,
    Analyze,
    Intervene,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::TrainModel,
        Stage::TrainSae,
        Stage::Analyze,
        Stage::Intervene,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainModel => "train-model",
            Stage::TrainSae => "train-sae",
            Stage::Analyze => "analyze",
            Stage::Intervene => "intervene",
            Stage::Report => "report",
        }
    }
}

/// The four intervention families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Feature,
    Gradient,
    Inject,
    Neuron,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Feature, Family::Gradient, Family::Inject, Family::Neuron];

    pub fn name(self) -> &'static str {
        match self {
            Family::Feature => "feature",
            Family::Gradient => "gradient",
            Family::Inject => "inject",
            Family::Neuron => "neuron",
        }
    }

    pub fn outcome_file(self) -> String {
        format!("outcomes_{}.jsonl", self.name())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown intervention family {s}")))
    }
}

/// The two independently seeded models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    A,
    B,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::A, Variant::B];

    fn suffix(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
        }
    }
}

/// Artifact file names.
pub mod files {
    use super::Variant;

    pub const CORPUS: &str = "corpus.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const NEURONS: &str = "neurons.json";
    pub const TARGETS: &str = "targets.json";
    pub const SHARED_PAIRS: &str = "shared_pairs.json";
    pub const REPORT: &str = "report.json";
    pub const NEURON_CSV: &str = "neurons_by_degree.csv";

    pub fn model(v: Variant) -> String {
        format!("model_{}.ckpt", v.suffix())
    }
    pub fn train_report(v: Variant) -> String {
        format!("train_{}.json", v.suffix())
    }
    pub fn sae(v: Variant) -> String {
        format!("sae_{}.ckpt", v.suffix())
    }
    pub fn sae_report(v: Variant) -> String {
        format!("sae_{}.json", v.suffix())
    }
    pub fn glosses(v: Variant) -> String {
        format!("glosses_{}.jsonl", v.suffix())
    }
    pub fn interference(v: Variant) -> String {
        format!("interference_{}.ckpt", v.suffix())
    }
    pub fn semantic(v: Variant) -> String {
        format!("semantic_{}.ckpt", v.suffix())
    }
    pub fn bins_csv(family: super::Family) -> String {
        format!("bins_{}.csv", family.name())
    }
}

// ---------------------------------------------------------------------------
// Artifact bodies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusArtifact {
    pub spec: crate::model::corpus::CorpusSpec,
    pub sequences: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub initial_heldout_mse: f64,
    pub final_heldout_mse: f64,
    pub mean_l0: f64,
    pub max_norm_deviation: f64,
    pub report: SaeTrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub partitions: Vec<FeatureCluster>,
}

/// A concept cluster and the union of its members' token sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTokens {
    pub cluster: usize,
    pub members: Vec<usize>,
    pub tokens: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronTable {
    pub site: Site,
    pub cutoff: f64,
    pub threshold: f64,
    pub top_n: usize,
    pub clusters: Vec<ClusterTokens>,
    pub profiles: Vec<NeuronProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub feature: usize,
    pub tokens: BTreeSet<u32>,
    pub bins: Vec<BinCandidates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTable {
    /// Activation length of one α unit for feature steering.
    pub steering_unit: f64,
    /// Activation length of one α unit for token-gradient steering.
    pub gradient_unit: f64,
    pub prefilter: PrefilterReport,
    /// Candidates skipped before the prefilter, keyed by reason.
    pub skipped: BTreeMap<String, usize>,
    pub targets: Vec<TargetRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedPairTable {
    pub thresholds: SharedPairThresholds,
    pub qualifying_a: Vec<(usize, usize)>,
    pub qualifying_b: Vec<(usize, usize)>,
    pub pairs: Vec<SharedPair>,
    /// Model A mined against itself.
    pub self_pairs: Vec<SharedPair>,
}

/// One steering or injection trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub trial: usize,
    pub family: Family,
    pub target: usize,
    /// Feature whose direction, gradient or snippet was used.
    pub feature: usize,
    /// Interference bin label; `None` for the target itself.
    pub bin: Option<String>,
    pub midpoint: Option<f64>,
    pub interference: f64,
    pub semantic: Option<f64>,
    pub prompt: usize,
    pub metric: Metric,
    pub alpha: Option<f64>,
    pub value: Option<f64>,
    pub guard_tv: Option<f64>,
    pub guard_violations: usize,
    pub snippet: Option<Vec<u32>>,
    pub provenance: Option<Provenance>,
    pub metrics: Option<MetricReport>,
    pub before: Option<Distribution>,
    pub after: Option<Distribution>,
    pub error: Option<String>,
}

impl OutcomeRecord {
    pub fn is_original(&self) -> bool {
        self.bin.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronMode {
    Mask,
    Amplify,
}

/// One neuron edit scored against one connected cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRecord {
    pub trial: usize,
    pub neuron: usize,
    pub degree: usize,
    pub mode: NeuronMode,
    pub scale: f64,
    pub prompt: usize,
    pub cluster: usize,
    pub alignment: f64,
    pub metrics: MetricReport,
    pub before: Distribution,
    pub after: Distribution,
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Annotate errors with the stage they occurred in, keeping inner stage failures.
pub fn in_stage(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::StageFailure { .. } => e,
        e => Error::stage(stage.name(), e),
    }
}

/// Models, SAEs and derived data for one variant.
struct Loaded {
    model: Model,
    sae: Sae,
    acts: FeatureActivations,
}

pub struct Pipeline {
    config: ExperimentConfig,
    dir: RunDir,
}

impl Pipeline {
    /// Validate `config` and bind it to the run directory `out`.
    pub fn open(config: ExperimentConfig, out: &Path, force: bool) -> Result<Self> {
        config.validate()?;
        let dir = RunDir::open(&config, out, force)?;
        Ok(Self { config, dir })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dir(&self) -> &RunDir {
        &self.dir
    }

    /// Every stage in order, every intervention family.
    pub fn run_all(&self) -> Result<RunReport> {
        self.train_models()?;
        self.train_saes()?;
        self.analyze()?;
        self.intervene(&Family::ALL)?;
        self.report()
    }

    // -- corpus ------------------------------------------------------------

    pub fn gen_corpus(&self) -> Result<()> {
        if self.dir.exists(files::CORPUS) {
            return Ok(());
        }
        let corpus = synth_corpus(&self.config.corpus).map_err(in_stage(Stage::TrainModel))?;
        self.dir.write_json(
            files::CORPUS,
            &CorpusArtifact {
                spec: self.config.corpus.clone(),
                sequences: corpus.sequences,
            },
        )
    }

    fn corpus(&self) -> Result<Corpus> {
        let c: CorpusArtifact = self.dir.read_json(files::CORPUS, Stage::TrainModel)?;
        Ok(Corpus { sequences: c.sequences })
    }

    pub fn prompts(&self) -> Vec<Vec<u32>> {
        let p = &self.config.prompts;
        self.config.corpus.sample_prompts(p.n, p.min_len, p.max_len, p.seed)
    }

    fn calibration_corpus(&self, corpus: &Corpus) -> Corpus {
        let n = self.config.analysis.calibration_sequences.min(corpus.sequences.len());
        Corpus {
            sequences: corpus.sequences[..n].to_vec(),
        }
    }

    // -- train-model -------------------------------------------------------

    pub fn train_models(&self) -> Result<()> {
        self.gen_corpus()?;
        let stage = in_stage(Stage::TrainModel);
        let corpus = self.corpus()?;
        for v in Variant::ALL {
            if self.dir.exists(&files::model(v)) && self.dir.exists(&files::train_report(v)) {
                continue;
            }
            let cfg = match v {
                Variant::A => self.config.model.clone(),
                Variant::B => self.config.model_b(),
            };
            log::info!("training model {}", v.suffix());
            let init = Model::init(cfg).map_err(&stage)?;
            let (model, report): (Model, TrainReport) = train(&init, &corpus, &self.config.train).map_err(&stage)?;
            self.dir.write_checkpoint(&files::model(v), &model.to_checkpoint()?)?;
            self.dir.write_json(&files::train_report(v), &report)?;
        }
        Ok(())
    }

    pub fn model(&self, v: Variant) -> Result<Model> {
        Model::from_checkpoint(&self.dir.read_checkpoint(&files::model(v), Stage::TrainModel)?)
    }

    // -- train-sae ---------------------------------------------------------

    pub fn train_saes(&self) -> Result<()> {
        let stage = in_stage(Stage::TrainSae);
        let mut corpus = None;
        for v in Variant::ALL {
            if self.dir.exists(&files::sae(v)) && self.dir.exists(&files::sae_report(v)) {
                continue;
            }
            let corpus = match &corpus {
                Some(c) => c,
                None => corpus.insert(self.corpus()?),
            };
            let model = self.model(v)?;
            log::info!("training SAE {}", v.suffix());
            let ds = harvest_activations(&model, corpus, self.config.sae_site).map_err(&stage)?;
            let (sae, report) = train_sae(&ds, &self.config.sae).map_err(&stage)?;
            let summary = SaeSummary {
                initial_heldout_mse: report.initial_heldout_mse,
                final_heldout_mse: report.final_heldout_mse,
                mean_l0: report.mean_l0,
                max_norm_deviation: report.norm_deviation.iter().copied().fold(0.0, f64::max),
                report,
            };
            self.dir.write_checkpoint(&files::sae(v), &sae.to_checkpoint()?)?;
            self.dir.write_json(&files::sae_report(v), &summary)?;
        }
        Ok(())
    }

    pub fn sae(&self, v: Variant) -> Result<Sae> {
        Sae::from_checkpoint(&self.dir.read_checkpoint(&files::sae(v), Stage::TrainSae)?)
    }

    fn load(&self, v: Variant, corpus: &Corpus) -> Result<Loaded> {
        let model = self.model(v)?;
        let sae = self.sae(v)?;
        let ds = harvest_activations(&model, corpus, sae.site)?;
        let acts = FeatureActivations::compute(&sae, &ds);
        Ok(Loaded { model, sae, acts })
    }

    // -- analyze -----------------------------------------------------------

    fn analyze_outputs(&self) -> Vec<String> {
        let mut out: Vec<String> = Variant::ALL
            .into_iter()
            .flat_map(|v| [files::glosses(v), files::interference(v), files::semantic(v)])
            .collect();
        for f in [files::CLUSTERS, files::NEURONS, files::TARGETS, files::SHARED_PAIRS] {
            out.push(f.to_owned());
        }
        out
    }

    pub fn analyze(&self) -> Result<()> {
        if self.analyze_outputs().iter().all(|f| self.dir.exists(f)) {
            return Ok(());
        }
        let stage = in_stage(Stage::Analyze);
        let corpus = self.corpus()?;
        let mut pair_artifacts = Vec::new();
        let mut loaded_a = None;
        for v in Variant::ALL {
            let loaded = self.load(v, &corpus).map_err(&stage)?;
            let art = self.feature_tables(v, &loaded).map_err(&stage)?;
            pair_artifacts.push(art);
            if v == Variant::A {
                loaded_a = Some(loaded);
            }
        }
        let a = loaded_a.expect("variant A loaded");
        let art_a = &pair_artifacts[0];
        let art_b = &pair_artifacts[1];

        // Clusterings at every reported cutoff.
        let ids: Vec<usize> = art_a.glosses.features().collect();
        let vecs: Vec<Vec<f64>> = ids
            .iter()
            .map(|&i| art_a.glosses.get(i).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        let cluster_at = |cutoff: f64| agglomerative_cluster(&ids, &vecs, cutoff).map_err(&stage);
        let partitions = self
            .config
            .analysis
            .cluster_cutoffs
            .iter()
            .map(|&c| cluster_at(c))
            .collect::<Result<Vec<_>>>()?;
        self.dir.write_json(files::CLUSTERS, &ClusterTable { partitions })?;

        // Neuron polysemanticity.
        let nc = &self.config.neurons;
        let concept = cluster_at(nc.cutoff)?;
        let ratio = self.config.analysis.token_ratio;
        let clusters = concept
            .clusters
            .iter()
            .enumerate()
            .map(|(cluster, members)| {
                let mut tokens = BTreeSet::new();
                for &m in members {
                    match top_activating_tokens(&a.acts, m, ratio) {
                        Ok(ts) => tokens.extend(ts.tokens),
                        Err(Error::NeverFires(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                Ok(ClusterTokens {
                    cluster,
                    members: members.clone(),
                    tokens,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(&stage)?;
        let neurons = NeuronTable {
            site: a.sae.site,
            cutoff: nc.cutoff,
            threshold: nc.threshold,
            top_n: nc.top_n,
            clusters,
            profiles: neuron_polysemanticity(&a.sae, &concept, nc.threshold, nc.top_n),
        };
        self.dir.write_json(files::NEURONS, &neurons)?;

        // Shared pairs across models and against itself.
        let t = self.config.analysis.shared;
        let shared = SharedPairTable {
            thresholds: t,
            qualifying_a: qualifying_pairs(art_a, &t),
            qualifying_b: qualifying_pairs(art_b, &t),
            pairs: mine_shared_pairs(art_a, art_b, &t).map_err(&stage)?,
            self_pairs: mine_shared_pairs(art_a, art_a, &t).map_err(&stage)?,
        };
        self.dir.write_json(files::SHARED_PAIRS, &shared)?;

        // Targets for the intervention studies.
        let pair_clusters = cluster_at(self.config.analysis.pair_cutoff)?;
        let targets = self
            .select_targets(&a, &corpus, art_a, &pair_clusters)
            .map_err(&stage)?;
        self.dir.write_json(files::TARGETS, &targets)
    }

    /// Glosses, interference matrix and semantic table for one variant.
    fn feature_tables(&self, v: Variant, loaded: &Loaded) -> Result<PairArtifacts> {
        let glosses = synthesize_glosses(&loaded.acts, &self.config.corpus, &self.config.gloss)?;
        let site = loaded.sae.site;
        self.dir.write_with(&files::glosses(v), |w| glosses.write_jsonl(w, site))?;
        let live = loaded.acts.live_features();
        let interference = interference_matrix(&loaded.sae, &live)?;
        let semantic = semantic_table(site, &glosses)?;
        self.dir
            .write_checkpoint(&files::interference(v), &interference.to_checkpoint("interference"))?;
        self.dir
            .write_checkpoint(&files::semantic(v), &semantic.to_checkpoint("semantic"))?;
        Ok(PairArtifacts {
            interference,
            semantic,
            glosses,
        })
    }

    /// Mean activation norm at `site` over the calibration sequences, times `fraction`.
    fn site_unit(&self, model: &Model, corpus: &Corpus, site: Site, fraction: f64) -> Result<f64> {
        let ds = harvest_activations(model, &self.calibration_corpus(corpus), site)?;
        let total: f64 = (0..ds.len()).map(|r| norm(ds.vectors.row(r))).sum();
        let unit = fraction * total / ds.len() as f64;
        if !(unit > 0.0 && unit.is_finite()) {
            return Err(Error::NonFinite("steering unit".into()));
        }
        Ok(unit)
    }

    fn calibration(&self, model: &Model, corpus: &Corpus) -> Result<TransportCalibration> {
        TransportCalibration::from_prompts(model, &self.calibration_corpus(corpus).sequences)
    }

    /// Live features, in ascending order, that have a token set, a candidate
    /// in every interference bin, and pass the self-steering prefilter.
    fn select_targets(
        &self,
        a: &Loaded,
        corpus: &Corpus,
        art: &PairArtifacts,
        clusters: &FeatureCluster,
    ) -> Result<TargetTable> {
        let cfg = &self.config;
        let site = cfg.steering_site();
        let steering_unit = self.site_unit(&a.model, corpus, site, cfg.steering.unit_fraction)?;
        let gradient_unit = self.site_unit(&a.model, corpus, cfg.gradient.site, cfg.gradient.unit_fraction)?;
        let calib = self.calibration(&a.model, corpus)?;
        let table = EmbeddingTable::from_model("model_a.token_embeddings", &a.model)?;
        let prompts: Vec<Vec<u32>> = self.prompts().into_iter().take(cfg.steering.n_prompts).collect();
        let sampling = PairSampling {
            relevancy_cutoff: cfg.analysis.relevancy_cutoff,
            per_bin: cfg.pairs_per_bin(),
            seed: cfg.analysis.sampling_seed,
        };
        let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
        let mut eligible = Vec::new();
        for &f in &art.interference.features {
            if !art.glosses.contains(f) {
                *skipped.entry("no_gloss".into()).or_default() += 1;
                continue;
            }
            let tokens = top_activating_tokens(&a.acts, f, cfg.analysis.token_ratio)?.tokens;
            let bins =
                sample_interference_pairs(f, clusters, &art.interference, &art.semantic, &cfg.analysis.bins, &sampling)?;
            if bins.iter().any(BinCandidates::is_empty) {
                *skipped.entry("empty_bin".into()).or_default() += 1;
                continue;
            }
            eligible.push(TargetRecord { feature: f, tokens, bins });
        }
        // Prefilter in parallel chunks until enough targets are kept.
        let want = cfg.max_targets();
        let mut kept_records = Vec::new();
        let mut prefilter = PrefilterReport {
            theta: cfg.steering.prefilter_theta,
            kept: Vec::new(),
            dropped: Vec::new(),
        };
        let chunk = rayon::current_num_threads().max(1) * 4;
        for group in eligible.chunks(chunk) {
            if kept_records.len() >= want {
                break;
            }
            let candidates = group
                .iter()
                .map(|t| {
                    Ok(PrefilterCandidate {
                        feature: t.feature,
                        plan: steering_from_feature(&a.model, &calib, &a.sae, t.feature, site)?.with_unit(steering_unit)?,
                        profile: TargetProfile::new(&t.tokens, &table)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let reports = candidates
                .par_iter()
                .map(|c| {
                    prefilter_targets(
                        &a.model,
                        std::slice::from_ref(c),
                        &prompts,
                        &cfg.steering.prefilter_grid,
                        cfg.steering.guard_tv,
                        cfg.steering.prefilter_theta,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            for (t, r) in group.iter().zip(reports) {
                if kept_records.len() >= want {
                    break;
                }
                if r.kept.is_empty() {
                    prefilter.dropped.push(t.feature);
                } else {
                    prefilter.kept.push(t.feature);
                    kept_records.push(t.clone());
                }
            }
        }
        Ok(TargetTable {
            steering_unit,
            gradient_unit,
            prefilter,
            skipped,
            targets: kept_records,
        })
    }

    pub fn targets(&self) -> Result<TargetTable> {
        self.dir.read_json(files::TARGETS, Stage::Analyze)
    }

    pub fn neuron_table(&self) -> Result<NeuronTable> {
        self.dir.read_json(files::NEURONS, Stage::Analyze)
    }

    pub fn shared_pairs(&self) -> Result<SharedPairTable> {
        self.dir.read_json(files::SHARED_PAIRS, Stage::Analyze)
    }

    pub fn glosses(&self, v: Variant) -> Result<GlossTable> {
        let path = self.dir.require(&files::glosses(v), Stage::Analyze)?;
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        GlossTable::read_jsonl(reader, self.config.sae_site)
    }

    pub fn interference(&self, v: Variant) -> Result<FeatureMatrix> {
        FeatureMatrix::from_checkpoint(&self.dir.read_checkpoint(&files::interference(v), Stage::Analyze)?)
    }

    pub fn semantic(&self, v: Variant) -> Result<FeatureMatrix> {
        FeatureMatrix::from_checkpoint(&self.dir.read_checkpoint(&files::semantic(v), Stage::Analyze)?)
    }

    // -- intervene ---------------------------------------------------------

    /// Run the given families; each is skipped when its outcome file exists.
    pub fn intervene(&self, families: &[Family]) -> Result<()> {
        let todo: Vec<Family> = families
            .iter()
            .copied()
            .filter(|f| !self.dir.exists(&f.outcome_file()))
            .collect();
        if todo.is_empty() {
            return Ok(());
        }
        let stage = in_stage(Stage::Intervene);
        let targets = self.targets()?;
        let neurons = if todo.contains(&Family::Neuron) {
            Some(self.neuron_table()?)
        } else {
            None
        };
        let im = self.interference(Variant::A)?;
        let sem = self.semantic(Variant::A)?;
        let corpus = self.corpus()?;
        let a = self.load(Variant::A, &corpus).map_err(&stage)?;
        let ctx = TrialContext {
            config: &self.config,
            model: &a.model,
            sae: &a.sae,
            acts: &a.acts,
            corpus: &corpus,
            calib: self.calibration(&a.model, &corpus).map_err(&stage)?,
            table: EmbeddingTable::from_model("model_a.token_embeddings", &a.model).map_err(&stage)?,
            prompts: self.prompts(),
            im: &im,
            sem: &sem,
            targets: &targets,
        };
        for family in todo {
            log::info!("intervention family {family}");
            match family {
                Family::Neuron => {
                    let records = ctx
                        .neuron_trials(neurons.as_ref().expect("loaded"))
                        .map_err(&stage)?;
                    self.dir.write_jsonl(&family.outcome_file(), &records)?;
                }
                f => {
                    let records = ctx.steering_trials(f).map_err(&stage)?;
                    self.dir.write_jsonl(&f.outcome_file(), &records)?;
                }
            }
        }
        Ok(())
    }

    pub fn outcomes(&self, family: Family) -> Result<Vec<OutcomeRecord>> {
        self.dir.read_jsonl(&family.outcome_file(), Stage::Intervene)
    }

    pub fn neuron_outcomes(&self) -> Result<Vec<NeuronRecord>> {
        self.dir.read_jsonl(&Family::Neuron.outcome_file(), Stage::Intervene)
    }

    // -- report ------------------------------------------------------------

    pub fn report(&self) -> Result<RunReport> {
        report::write_report(self).map_err(in_stage(Stage::Report))
    }
}

/// Run every stage of `config` into `out`.
pub fn run_pipeline(config: ExperimentConfig, out: &Path, force: bool) -> Result<RunReport> {
    Pipeline::open(config, out, force)?.run_all()
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

struct TrialContext<'a> {
    config: &'a ExperimentConfig,
    model: &'a Model,
    sae: &'a Sae,
    acts: &'a FeatureActivations,
    corpus: &'a Corpus,
    calib: TransportCalibration,
    table: EmbeddingTable,
    prompts: Vec<Vec<u32>>,
    im: &'a FeatureMatrix,
    sem: &'a FeatureMatrix,
    targets: &'a TargetTable,
}

/// A pending steering or injection trial.
struct TrialSpec {
    target: usize,
    target_index: usize,
    feature: usize,
    bin: Option<(String, f64)>,
    prompt: usize,
}

impl TrialContext<'_> {
    fn family_shape(&self, family: Family) -> (usize, usize, usize) {
        let c = self.config;
        match family {
            Family::Feature => (c.steering.n_targets, c.steering.pairs_per_bin, c.steering.n_prompts),
            Family::Gradient => (c.gradient.n_targets, c.gradient.pairs_per_bin, c.gradient.n_prompts),
            Family::Inject => (c.injection.n_targets, c.injection.pairs_per_bin, c.injection.n_prompts),
            Family::Neuron => unreachable!("neuron trials are enumerated separately"),
        }
    }

    fn enumerate(&self, family: Family) -> Vec<TrialSpec> {
        let (n_targets, per_bin, n_prompts) = self.family_shape(family);
        let mut out = Vec::new();
        for (ti, t) in self.targets.targets.iter().take(n_targets).enumerate() {
            for prompt in 0..n_prompts {
                out.push(TrialSpec {
                    target: t.feature,
                    target_index: ti,
                    feature: t.feature,
                    bin: None,
                    prompt,
                });
                for bc in &t.bins {
                    for &j in bc.sampled.iter().take(per_bin) {
                        out.push(TrialSpec {
                            target: t.feature,
                            target_index: ti,
                            feature: j,
                            bin: Some((bc.bin.label(), bc.bin.midpoint())),
                            prompt,
                        });
                    }
                }
            }
        }
        out
    }

    fn steering_trials(&self, family: Family) -> Result<Vec<OutcomeRecord>> {
        let specs = self.enumerate(family);
        let profiles = self
            .targets
            .targets
            .iter()
            .map(|t| TargetProfile::new(&t.tokens, &self.table))
            .collect::<Result<Vec<_>>>()?;
        let baselines = self
            .prompts
            .iter()
            .map(|p| self.model.distribution(p))
            .collect::<Result<Vec<_>>>()?;
        specs
            .par_iter()
            .enumerate()
            .map(|(trial, s)| {
                let profile = &profiles[s.target_index];
                let interference = if s.bin.is_none() {
                    1.0
                } else {
                    self.im.get(s.target, s.feature).unwrap_or(f64::NAN)
                };
                let mut rec = OutcomeRecord {
                    trial,
                    family,
                    target: s.target,
                    feature: s.feature,
                    bin: s.bin.as_ref().map(|b| b.0.clone()),
                    midpoint: s.bin.as_ref().map(|b| b.1),
                    interference,
                    semantic: s.bin.as_ref().and_then(|_| self.sem.get(s.target, s.feature)),
                    prompt: s.prompt,
                    metric: Metric::DeltaC,
                    alpha: None,
                    value: None,
                    guard_tv: None,
                    guard_violations: 0,
                    snippet: None,
                    provenance: None,
                    metrics: None,
                    before: None,
                    after: None,
                    error: None,
                };
                let result = match family {
                    Family::Feature => self.feature_trial(s, profile, &mut rec),
                    Family::Gradient => self.gradient_trial(s, profile, &mut rec),
                    Family::Inject => self.inject_trial(s, profile, &baselines[s.prompt], &mut rec),
                    Family::Neuron => unreachable!(),
                };
                match result {
                    Ok(()) => Ok(rec),
                    // Expected per-trial failures are logged, not fatal.
                    Err(
                        e @ (Error::ZeroBaseline
                        | Error::AllGuarded
                        | Error::OverlapGuard(_)
                        | Error::ZeroGradient
                        | Error::NeverFires(_)),
                    ) => {
                        rec.error = Some(e.to_string());
                        Ok(rec)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect()
    }

    fn record_search(rec: &mut OutcomeRecord, plan: &SteeringPlan, r: ScaleSearchResult) {
        rec.metric = r.metric;
        rec.alpha = Some(r.best_alpha);
        rec.value = Some(r.best_value());
        rec.guard_tv = Some(r.guard_tv);
        rec.guard_violations = r.guard_violations();
        rec.provenance = Some(plan.provenance.clone());
        rec.metrics = Some(r.best.metrics);
    }

    fn feature_trial(&self, s: &TrialSpec, profile: &TargetProfile, rec: &mut OutcomeRecord) -> Result<()> {
        let c = &self.config.steering;
        let plan = steering_from_feature(self.model, &self.calib, self.sae, s.feature, self.config.steering_site())?
            .with_unit(self.targets.steering_unit)?;
        rec.metric = c.metric;
        rec.provenance = Some(plan.provenance.clone());
        let r = optimize_scale(self.model, &self.prompts[s.prompt], &plan, &c.grid, c.metric, c.guard_tv, profile)?;
        Self::record_search(rec, &plan, r);
        Ok(())
    }

    fn top_window(&self, feature: usize) -> Result<ActivationWindow> {
        Ok(activation_records(self.acts, self.corpus, feature, 1)?.remove(0))
    }

    fn gradient_trial(&self, s: &TrialSpec, profile: &TargetProfile, rec: &mut OutcomeRecord) -> Result<()> {
        let c = &self.config.gradient;
        rec.metric = c.metric;
        let window = self.top_window(s.feature)?;
        let direction = probe_vector(self.sae, ProbeSpec::FeatureDirection { feature: s.feature })?;
        let spec = if c.one_hot_probe {
            let neuron = direction
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            ProbeSpec::OneHot { neuron }
        } else {
            ProbeSpec::FeatureDirection { feature: s.feature }
        };
        let probe = probe_vector(self.sae, spec)?;
        let plan = steering_from_token_gradient(self.model, &window, window.peak, self.sae.site, &probe, spec, c.site)?
            .with_unit(self.targets.gradient_unit)?;
        rec.provenance = Some(plan.provenance.clone());
        let r = optimize_scale(self.model, &self.prompts[s.prompt], &plan, &c.grid, c.metric, c.guard_tv, profile)?;
        Self::record_search(rec, &plan, r);
        Ok(())
    }

    fn inject_trial(
        &self,
        s: &TrialSpec,
        profile: &TargetProfile,
        baseline: &Distribution,
        rec: &mut OutcomeRecord,
    ) -> Result<()> {
        let c = &self.config.injection;
        rec.metric = c.metric;
        let window = self.top_window(s.feature)?;
        let snippet = extract_snippet(&window, &c.snippet)?;
        rec.snippet = Some(snippet.clone());
        let spec = InjectionSpec {
            snippet,
            separator: c.separator,
            // The target's own snippet necessarily contains its tokens.
            overlap_guard: s.bin.is_some(),
        };
        let out = inject_with_baseline(self.model, &self.prompts[s.prompt], &spec, baseline, profile)?;
        rec.value = c.metric.value(&out.metrics);
        if rec.value.is_none() {
            rec.error = Some(Error::ZeroBaseline.to_string());
        }
        rec.metrics = Some(out.metrics);
        rec.before = Some(out.before);
        rec.after = Some(out.after);
        Ok(())
    }

    fn neuron_trials(&self, table: &NeuronTable) -> Result<Vec<NeuronRecord>> {
        let c = &self.config.neurons;
        let profiles: BTreeMap<usize, TargetProfile> = table
            .clusters
            .iter()
            .filter(|ct| !ct.tokens.is_empty())
            .map(|ct| Ok((ct.cluster, TargetProfile::new(&ct.tokens, &self.table)?)))
            .collect::<Result<_>>()?;
        let scales: Vec<(NeuronMode, f64)> = std::iter::once((NeuronMode::Mask, 0.0))
            .chain(c.amplify_scales.iter().map(|&s| (NeuronMode::Amplify, s)))
            .collect();
        let mut jobs = Vec::new();
        for p in table.profiles.iter().filter(|p| p.degree > 0) {
            for prompt in 0..c.n_prompts {
                for &(mode, scale) in &scales {
                    jobs.push((p, prompt, mode, scale));
                }
            }
        }
        let per_job: Vec<Vec<NeuronRecord>> = jobs
            .par_iter()
            .map(|&(p, prompt, mode, scale)| {
                let connected: Vec<(usize, TargetProfile)> = p
                    .connections
                    .iter()
                    .filter_map(|(cl, _)| profiles.get(cl).map(|pr| (*cl, pr.clone())))
                    .collect();
                let outs = neuron_intervene(self.model, table.site, p.neuron, scale, &self.prompts[prompt], &connected)?;
                Ok(outs
                    .into_iter()
                    .map(|o| NeuronRecord {
                        trial: 0,
                        neuron: p.neuron,
                        degree: p.degree,
                        mode,
                        scale,
                        prompt,
                        cluster: o.cluster,
                        alignment: p
                            .connections
                            .iter()
                            .find(|(cl, _)| *cl == o.cluster)
                            .map(|x| x.1)
                            .unwrap_or(0.0),
                        metrics: o.outcome.metrics,
                        before: o.outcome.before,
                        after: o.outcome.after,
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut records: Vec<NeuronRecord> = per_job.into_iter().flatten().collect();
        for (i, r) in records.iter_mut().enumerate() {
            r.trial = i;
        }
        Ok(records)
    }
}
