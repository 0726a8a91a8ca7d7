// SPDX-License-Identifier: MIT OR Apache-2.0

//! A configuration small enough to run every stage in seconds.

use polyprobe::harness::ExperimentConfig;
use polyprobe::model::corpus::CorpusSpec;
use polyprobe::model::{ModelConfig, Site};

pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.run_id = "tiny".into();
    c.model = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 32,
        context_length: 32,
        seed: 11,
    };
    c.corpus = CorpusSpec::planted(64, 6, 6, 2, 0.1, 200, 12, 1).expect("fits");
    c.train.steps = 150;
    c.sae_site = Site::resid_post(1);
    c.sae.n_features = 64;
    c.sae.steps = 200;
    c.prompts.n = 3;
    c.prompts.min_len = 4;
    c.prompts.max_len = 8;
    c.analysis.calibration_sequences = 50;
    c.steering.n_targets = 3;
    c.steering.pairs_per_bin = 1;
    c.steering.n_prompts = 2;
    c.steering.grid = vec![-2.0, -1.0, 1.0, 2.0];
    c.steering.prefilter_grid = vec![1.0, 2.0];
    c.gradient.n_targets = 2;
    c.gradient.pairs_per_bin = 1;
    c.gradient.n_prompts = 1;
    c.gradient.grid = vec![1.0, 2.0];
    c.injection.n_targets = 2;
    c.injection.pairs_per_bin = 1;
    c.injection.n_prompts = 2;
    c.neurons.n_prompts = 1;
    c.neurons.amplify_scales = vec![2.0];
    c.bootstrap_resamples = 200;
    c
}
