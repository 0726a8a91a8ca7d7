// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale pre-layernorm decoder-only transformer.
//!
//! One block computes
//!
//! ```text
//! resid_pre  = x
//! attn_out   = Σ_h softmax_causal(LN1(x) Wq_h (LN1(x) Wk_h)ᵀ / √d_h) LN1(x) Wv_h Wo_h
//! mlp_out    = GELU(LN2(x + attn_out) W_in + b_in) W_out + b_out
//! resid_post = x + attn_out + mlp_out
//! ```
//!
//! Activations at every [`Site`] are `T × d_model` matrices whose row `t` is
//! position `t`. Edits are applied on the tape at the site they name, so
//! everything downstream sees the edited value.

mod config;
pub mod corpus;
pub mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, Site, SiteKind};

use crate::autodiff::{softmax_rows, NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{gaussian, rng_for};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const MAX_NEURON_SCALE: f64 = 20.0;

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

/// Index arithmetic into the flat parameter list.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    n_heads: usize,
    per_layer: usize,
    n_layers: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerParams {
    pub ln1_g: usize,
    pub ln1_b: usize,
    head_base: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

impl LayerParams {
    pub fn wq(&self, h: usize) -> usize {
        self.head_base + 4 * h
    }
    pub fn wk(&self, h: usize) -> usize {
        self.head_base + 4 * h + 1
    }
    pub fn wv(&self, h: usize) -> usize {
        self.head_base + 4 * h + 2
    }
    pub fn wo(&self, h: usize) -> usize {
        self.head_base + 4 * h + 3
    }
}

impl Layout {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;

    fn new(cfg: &ModelConfig) -> Self {
        Self {
            n_heads: cfg.n_heads,
            per_layer: 4 * cfg.n_heads + 8,
            n_layers: cfg.n_layers,
        }
    }

    pub fn layer(&self, l: usize) -> LayerParams {
        let base = 2 + l * self.per_layer;
        let head_base = base + 2;
        let after = head_base + 4 * self.n_heads;
        LayerParams {
            ln1_g: base,
            ln1_b: base + 1,
            head_base,
            ln2_g: after,
            ln2_b: after + 1,
            w_in: after + 2,
            b_in: after + 3,
            w_out: after + 4,
            b_out: after + 5,
        }
    }

    fn final_base(&self) -> usize {
        2 + self.n_layers * self.per_layer
    }
    pub fn lnf_g(&self) -> usize {
        self.final_base()
    }
    pub fn lnf_b(&self) -> usize {
        self.final_base() + 1
    }
    pub fn w_u(&self) -> usize {
        self.final_base() + 2
    }
    pub fn b_u(&self) -> usize {
        self.final_base() + 3
    }
}

enum Init {
    Gaussian,
    Ones,
    Zeros,
}

/// Names, shapes and initializers of every parameter, in layout order.
fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, v, m, dh) = (cfg.d_model, cfg.vocab_size, cfg.d_mlp, cfg.d_head());
    let mut specs = vec![
        ("tok_emb".to_owned(), vec![v, d], Init::Gaussian),
        ("pos_emb".to_owned(), vec![cfg.context_length, d], Init::Gaussian),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        specs.push((p("ln1.gain"), vec![1, d], Init::Ones));
        specs.push((p("ln1.bias"), vec![1, d], Init::Zeros));
        for h in 0..cfg.n_heads {
            specs.push((p(&format!("attn.w_q.{h}")), vec![d, dh], Init::Gaussian));
            specs.push((p(&format!("attn.w_k.{h}")), vec![d, dh], Init::Gaussian));
            specs.push((p(&format!("attn.w_v.{h}")), vec![d, dh], Init::Gaussian));
            specs.push((p(&format!("attn.w_o.{h}")), vec![dh, d], Init::Gaussian));
        }
        specs.push((p("ln2.gain"), vec![1, d], Init::Ones));
        specs.push((p("ln2.bias"), vec![1, d], Init::Zeros));
        specs.push((p("mlp.w_in"), vec![d, m], Init::Gaussian));
        specs.push((p("mlp.b_in"), vec![1, m], Init::Zeros));
        specs.push((p("mlp.w_out"), vec![m, d], Init::Gaussian));
        specs.push((p("mlp.b_out"), vec![1, d], Init::Zeros));
    }
    specs.push(("ln_final.gain".to_owned(), vec![1, d], Init::Ones));
    specs.push(("ln_final.bias".to_owned(), vec![1, d], Init::Zeros));
    specs.push(("unembed.w".to_owned(), vec![d, v], Init::Gaussian));
    specs.push(("unembed.b".to_owned(), vec![1, v], Init::Zeros));
    specs
}

// ---------------------------------------------------------------------------
// Edits, traces, distributions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EditScope {
    #[default]
    FinalPosition,
    AllPositions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EditMode {
    /// `Ã = A + alpha · direction`
    AddVector { direction: Vec<f64>, alpha: f64 },
    /// Multiply one neuron (column of the activation) by `scale ∈ [0, 20]`.
    ScaleNeuron { index: usize, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEdit {
    pub site: Site,
    pub mode: EditMode,
    #[serde(default)]
    pub scope: EditScope,
}

impl ActivationEdit {
    pub fn add_vector(site: Site, direction: Vec<f64>, alpha: f64) -> Self {
        Self {
            site,
            mode: EditMode::AddVector { direction, alpha },
            scope: EditScope::FinalPosition,
        }
    }

    pub fn scale_neuron(site: Site, index: usize, scale: f64) -> Self {
        Self {
            site,
            mode: EditMode::ScaleNeuron { index, scale },
            scope: EditScope::FinalPosition,
        }
    }

    pub fn with_scope(mut self, scope: EditScope) -> Self {
        self.scope = scope;
        self
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.site.check(cfg)?;
        match &self.mode {
            EditMode::AddVector { direction, alpha } => {
                if direction.len() != cfg.d_model {
                    return Err(Error::shape(format!(
                        "edit direction of length {} for d_model {}",
                        direction.len(),
                        cfg.d_model
                    )));
                }
                if !alpha.is_finite() || direction.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("edit direction".into()));
                }
            }
            EditMode::ScaleNeuron { index, scale } => {
                if *index >= cfg.d_model {
                    return Err(Error::BadNeuron {
                        neuron: *index,
                        width: cfg.d_model,
                    });
                }
                if !(0.0..=MAX_NEURON_SCALE).contains(scale) {
                    return Err(Error::InvalidArgument(format!(
                        "neuron scale {scale} outside [0, {MAX_NEURON_SCALE}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Next-token probabilities at the final position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(softmax_rows(logits, 1, logits.len()))
    }

    /// Wrap probabilities, checking non-negativity and normalization.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument("negative or non-finite probability".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs_diff(&self, other: &Distribution) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn total_variation(&self, other: &Distribution) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// Captured activations, one `T × d_model` matrix per requested site.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub activations: BTreeMap<Site, Tensor>,
}

impl ActivationTrace {
    pub fn get(&self, site: Site) -> Option<&Tensor> {
        self.activations.get(&site)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
}

/// Node ids of a forward pass built on a tape.
pub(crate) struct ForwardGraph {
    pub logits: NodeId,
    pub sites: BTreeMap<Site, NodeId>,
}

impl Model {
    /// Seeded Gaussian initialization (std 0.02); layernorm gains start at 1
    /// and biases at 0.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "model-init");
        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, shape, init) in parameter_specs(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Gaussian => (0..n).map(|_| INIT_STD * gaussian(&mut rng)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            params,
            names,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub(crate) fn param(&self, idx: usize) -> &Tensor {
        &self.params[idx]
    }

    /// Token embedding matrix `E` (`vocab_size × d_model`).
    pub fn token_embeddings(&self) -> &Tensor {
        &self.params[Layout::TOK_EMB]
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence".into()));
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.context_length,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::BadToken {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn param_leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn apply_edits(&self, tape: &mut Tape, x: NodeId, site: Site, edits: &[ActivationEdit]) -> Result<NodeId> {
        let mut x = x;
        let t = tape.value(x).rows();
        for edit in edits.iter().filter(|e| e.site == site) {
            let rows: Vec<usize> = match edit.scope {
                EditScope::FinalPosition => vec![t - 1],
                EditScope::AllPositions => (0..t).collect(),
            };
            x = match &edit.mode {
                EditMode::AddVector { direction, alpha } => {
                    let delta: Vec<f64> = direction.iter().map(|v| alpha * v).collect();
                    tape.add_at_rows(x, &rows, &delta)?
                }
                EditMode::ScaleNeuron { index, scale } => tape.scale_column(x, *index, &rows, *scale)?,
            };
        }
        Ok(x)
    }

    /// Build the forward pass on `tape` from token embeddings `tok` (`T × d`,
    /// before positional embeddings). Every site node is recorded.
    pub(crate) fn build_forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        tok: NodeId,
        edits: &[ActivationEdit],
    ) -> Result<ForwardGraph> {
        let cfg = &self.config;
        let layout = self.layout();
        let t = tape.value(tok).rows();
        if t > cfg.context_length {
            return Err(Error::ContextOverflow {
                len: t,
                max: cfg.context_length,
            });
        }
        for e in edits {
            e.validate(cfg)?;
        }
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(params[Layout::POS_EMB], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut sites = BTreeMap::new();
        let attn_scale = 1.0 / (cfg.d_head() as f64).sqrt();

        for l in 0..cfg.n_layers {
            let lp = layout.layer(l);
            x = self.apply_edits(tape, x, Site::resid_pre(l), edits)?;
            sites.insert(Site::resid_pre(l), x);

            let h = tape.layer_norm(x, params[lp.ln1_g], params[lp.ln1_b])?;
            let mut attn: Option<NodeId> = None;
            for head in 0..cfg.n_heads {
                let q = tape.matmul(h, params[lp.wq(head)])?;
                let k = tape.matmul(h, params[lp.wk(head)])?;
                let v = tape.matmul(h, params[lp.wv(head)])?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, attn_scale);
                let pattern = tape.causal_softmax(scores)?;
                let mixed = tape.matmul(pattern, v)?;
                let out = tape.matmul(mixed, params[lp.wo(head)])?;
                attn = Some(match attn {
                    None => out,
                    Some(acc) => tape.add(acc, out)?,
                });
            }
            let attn = attn.expect("n_heads >= 1");
            let attn = self.apply_edits(tape, attn, Site::attn_out(l), edits)?;
            sites.insert(Site::attn_out(l), attn);
            let mid = tape.add(x, attn)?;

            let h2 = tape.layer_norm(mid, params[lp.ln2_g], params[lp.ln2_b])?;
            let pre = tape.matmul(h2, params[lp.w_in])?;
            let pre = tape.add_row(pre, params[lp.b_in])?;
            let act = tape.gelu(pre);
            let mlp = tape.matmul(act, params[lp.w_out])?;
            let mlp = tape.add_row(mlp, params[lp.b_out])?;
            let mlp = self.apply_edits(tape, mlp, Site::mlp_out(l), edits)?;
            sites.insert(Site::mlp_out(l), mlp);

            x = tape.add(mid, mlp)?;
            x = self.apply_edits(tape, x, Site::resid_post(l), edits)?;
            sites.insert(Site::resid_post(l), x);
        }

        let hf = tape.layer_norm(x, params[layout.lnf_g()], params[layout.lnf_b()])?;
        let logits = tape.matmul(hf, params[layout.w_u()])?;
        let logits = tape.add_row(logits, params[layout.b_u()])?;
        Ok(ForwardGraph {
            logits,
            sites,
        })
    }

    /// Forward pass from explicit token embeddings (`T × d_model`, before
    /// positional embeddings are added).
    pub fn forward_embeddings(
        &self,
        token_embeddings: &Tensor,
        capture: &[Site],
        edits: &[ActivationEdit],
    ) -> Result<(Distribution, ActivationTrace)> {
        if token_embeddings.cols() != self.config.d_model || token_embeddings.rows() == 0 {
            return Err(Error::shape("token embeddings must be T x d_model with T >= 1"));
        }
        for s in capture {
            s.check(&self.config)?;
        }
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape);
        let tok = tape.leaf(token_embeddings.clone());
        let graph = self.build_forward(&mut tape, &params, tok, edits)?;
        self.collect(&tape, &graph, capture)
    }

    fn collect(&self, tape: &Tape, graph: &ForwardGraph, capture: &[Site]) -> Result<(Distribution, ActivationTrace)> {
        let logits = tape.value(graph.logits);
        if !logits.is_finite() {
            return Err(Error::NonFinite("forward logits".into()));
        }
        let last = logits.row(logits.rows() - 1);
        let dist = Distribution::from_logits(last);
        let mut trace = ActivationTrace::default();
        for s in capture {
            trace.activations.insert(*s, tape.value(graph.sites[s]).clone());
        }
        Ok((dist, trace))
    }

    /// Next-token distribution at the final position, with optional edits and
    /// captured activations at the requested sites.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: &[Site],
        edits: &[ActivationEdit],
    ) -> Result<(Distribution, ActivationTrace)> {
        self.check_tokens(tokens)?;
        for s in capture {
            s.check(&self.config)?;
        }
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(params[Layout::TOK_EMB], &idx)?;
        let graph = self.build_forward(&mut tape, &params, tok, edits)?;
        self.collect(&tape, &graph, capture)
    }

    pub fn distribution(&self, tokens: &[u32]) -> Result<Distribution> {
        Ok(self.forward(tokens, &[], &[])?.0)
    }

    /// Full `T × vocab` logits (unedited).
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(params[Layout::TOK_EMB], &idx)?;
        let graph = self.build_forward(&mut tape, &params, tok, &[])?;
        Ok(tape.value(graph.logits).clone())
    }

    /// Token embeddings `E[x]` for a sequence (`T × d_model`).
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let e = self.token_embeddings();
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| e.row(t as usize).to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    /// `∂⟨a_{site, position}, probe⟩ / ∂e_position`, the gradient of a linear
    /// probe on one activation with respect to that token's input embedding.
    pub fn grad_wrt_embedding(&self, tokens: &[u32], site: Site, position: usize, probe: &[f64]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        site.check(&self.config)?;
        if position >= tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "position {position} outside sequence of length {}",
                tokens.len()
            )));
        }
        if probe.len() != self.config.d_model {
            return Err(Error::shape("probe length must equal d_model"));
        }
        if crate::tensor::norm(probe) < crate::linalg::NORM_EPS {
            return Err(Error::ZeroProbe);
        }
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape);
        let tok = tape.leaf(self.embed(tokens)?);
        let graph = self.build_forward(&mut tape, &params, tok, &[])?;
        let act = tape.gather_rows(graph.sites[&site], &[position])?;
        let v = tape.leaf(Tensor::matrix(1, probe.len(), probe.to_vec())?);
        let loss = tape.matmul_nt(act, v)?;
        let grads = tape.backward(loss)?;
        let g = grads.get_or_zeros(&tape, tok);
        Ok(g.row(position).to_vec())
    }

    // -- checkpointing --

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: "model".into(),
            config: serde_json::to_value(&self.config)?,
            tensors: self
                .names
                .iter()
                .cloned()
                .zip(self.params.iter().cloned())
                .collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "model" {
            return Err(Error::CorruptFile(format!("expected model, found {}", ckpt.kind)));
        }
        let config: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
        config.validate()?;
        let specs = parameter_specs(&config);
        if specs.len() != ckpt.tensors.len() {
            return Err(Error::CorruptFile("parameter count mismatch".into()));
        }
        let mut params = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        for ((name, shape, _), (got_name, t)) in specs.into_iter().zip(&ckpt.tensors) {
            if &name != got_name || t.shape() != shape.as_slice() {
                return Err(Error::CorruptFile(format!("unexpected tensor {got_name}")));
            }
            params.push(t.clone());
            names.push(name);
        }
        Ok(Self {
            config,
            params,
            names,
        })
    }
}
