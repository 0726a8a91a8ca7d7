// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering, prompt injection and neuron interventions.
//!
//! Activations are row vectors, so a linear map between sites is a `d × d`
//! matrix `Φ` applied on the right: `z_s = z_p Φ_{p→s}`. Transport uses only
//! the linear portions of the network:
//!
//! * the residual stream carries a perturbation unchanged from `mlp_out(l)` or
//!   `resid_post(l)` to `resid_post(l)` / `resid_pre(l+1)`;
//! * from the residual stream into `attn_out(l)` the map is
//!   `C · diag(γ/σ̄) · Σ_h W_V^h W_O^h`, with layernorm frozen at its
//!   corpus-mean scale `σ̄`, `C = I − 11ᵀ/d` the centering projection, and the
//!   attention pattern taken as the identity at the final position.
//!
//! Any path through an MLP is rejected with [`Error::NoLinearPath`]. Going
//! backwards (`s` before `p`) uses the pseudo-inverse of the forward map.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::evaluation::{Metric, MetricReport, TargetProfile, DEFAULT_EPSILON};
use crate::linalg::{normalize, pseudo_inverse, NORM_EPS};
use crate::model::{ActivationEdit, Distribution, EditScope, Model, Site, SiteKind, MAX_NEURON_SCALE};
use crate::sae::{ActivationWindow, Sae};
use crate::tensor::Tensor;

/// Largest steering scale magnitude.
pub const MAX_ALPHA: f64 = 20.0;

/// Positive half of the scale grid.
pub const POSITIVE_GRID: [f64; 16] = [
    0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 12.0, 14.0, 17.0, 20.0,
];

/// Default total-variation cap for the coherence guard.
pub const DEFAULT_GUARD_TV: f64 = 0.9;

/// Symmetric grid `±POSITIVE_GRID`, used for SAE feature directions.
pub fn symmetric_grid() -> Vec<f64> {
    let mut g: Vec<f64> = POSITIVE_GRID.iter().map(|a| -a).rev().collect();
    g.extend_from_slice(&POSITIVE_GRID);
    g
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

/// Corpus-mean layernorm scale at the input of every attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportCalibration {
    pub ln1_sigma: Vec<f64>,
}

fn row_sigma(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n + LAYER_NORM_EPS).sqrt()
}

impl TransportCalibration {
    /// Mean layernorm σ over every position of every prompt.
    pub fn from_prompts(model: &Model, prompts: &[Vec<u32>]) -> Result<Self> {
        let n_layers = model.config().n_layers;
        let sites: Vec<Site> = (0..n_layers).map(Site::resid_pre).collect();
        let mut sums = vec![0.0; n_layers];
        let mut count = 0usize;
        for p in prompts.iter().filter(|p| !p.is_empty()) {
            let ctx = model.config().context_length;
            let (_, trace) = model.forward(&p[..p.len().min(ctx)], &sites, &[])?;
            for (l, s) in sites.iter().enumerate() {
                let a = trace.get(*s).expect("captured");
                for r in 0..a.rows() {
                    sums[l] += row_sigma(a.row(r));
                }
            }
            count += p.len().min(ctx);
        }
        if count == 0 {
            return Err(Error::EmptyInput("no calibration tokens".into()));
        }
        Ok(Self {
            ln1_sigma: sums.iter().map(|s| s / count as f64).collect(),
        })
    }
}

/// Where a site sits relative to the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Point {
    /// The residual stream after block `l` (`l = -1`: the embeddings).
    Resid(isize),
    /// Written into the residual stream after block `l`.
    FeedsResid(isize),
    /// Output of the attention block of layer `l`.
    Attn(usize),
}

fn point(site: Site) -> Point {
    let l = site.layer as isize;
    match site.kind {
        SiteKind::ResidPre => Point::Resid(l - 1),
        SiteKind::ResidPost => Point::Resid(l),
        SiteKind::MlpOut => Point::FeedsResid(l),
        SiteKind::AttnOut => Point::Attn(site.layer),
    }
}

fn order(site: Site) -> usize {
    let k = match site.kind {
        SiteKind::ResidPre => 0,
        SiteKind::AttnOut => 1,
        SiteKind::MlpOut => 2,
        SiteKind::ResidPost => 3,
    };
    4 * site.layer + k
}

/// `C · diag(γ/σ̄) · Σ_h W_V^h W_O^h` for layer `l`.
fn attention_map(model: &Model, calib: &TransportCalibration, l: usize) -> Result<Tensor> {
    let cfg = model.config();
    let d = cfg.d_model;
    let lp = model.layout().layer(l);
    let sigma = *calib
        .ln1_sigma
        .get(l)
        .ok_or_else(|| Error::InvalidArgument(format!("no calibration for layer {l}")))?;
    let gain = model.param(lp.ln1_g).data();
    let mut ov = Tensor::zeros(&[d, d]);
    for h in 0..cfg.n_heads {
        ov = ov.add(&model.param(lp.wv(h)).matmul(model.param(lp.wo(h)))?)?;
    }
    // Row i of C·diag(g) is (e_i − 1/d)·g.
    let mut scaled = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let c = if i == j { 1.0 - 1.0 / d as f64 } else { -1.0 / d as f64 };
            scaled.data_mut()[i * d + j] = c * gain[j] / sigma;
        }
    }
    scaled.matmul(&ov)
}

/// `Φ_{p→s}` for `p` at or before `s`.
pub fn forward_map(model: &Model, calib: &TransportCalibration, p: Site, s: Site) -> Result<Tensor> {
    p.check(model.config())?;
    s.check(model.config())?;
    let d = model.config().d_model;
    if p == s {
        return Ok(Tensor::identity(d));
    }
    let no_path = || Error::NoLinearPath {
        from: p.to_string(),
        to: s.to_string(),
    };
    if order(p) > order(s) {
        return Err(no_path());
    }
    let stream = match point(p) {
        Point::Resid(l) | Point::FeedsResid(l) => l,
        Point::Attn(_) => return Err(no_path()),
    };
    match point(s) {
        Point::Resid(l) if l == stream => Ok(Tensor::identity(d)),
        Point::Attn(l) if l as isize == stream + 1 => attention_map(model, calib, l),
        _ => Err(no_path()),
    }
}

/// Carry a direction from site `p` to site `s`.
pub fn transport(model: &Model, calib: &TransportCalibration, z: &[f64], p: Site, s: Site) -> Result<Vec<f64>> {
    if z.len() != model.config().d_model {
        return Err(Error::shape("direction length must equal d_model"));
    }
    if p == s {
        return Ok(z.to_vec());
    }
    let m = if order(p) < order(s) {
        forward_map(model, calib, p, s)?
    } else {
        pseudo_inverse(&forward_map(model, calib, s, p)?)?
    };
    Ok(Tensor::matrix(1, z.len(), z.to_vec())?.matmul(&m)?.into_data())
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

/// Probe vector used for token-gradient directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeSpec {
    /// The SAE feature's unit decoder direction.
    FeatureDirection { feature: usize },
    /// One activation coordinate.
    OneHot { neuron: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    FeatureDirection {
        feature: usize,
    },
    TokenGradient {
        feature: usize,
        sequence: usize,
        position: usize,
        probe: ProbeSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    pub source: Site,
    pub site: Site,
    pub raw: Vec<f64>,
    /// Unit-norm direction applied at `site`.
    pub direction: Vec<f64>,
    /// Activation-space length of one unit of α.
    #[serde(default = "unit_one")]
    pub unit: f64,
    pub provenance: Provenance,
}

fn unit_one() -> f64 {
    1.0
}

impl SteeringPlan {
    /// Measure α in units of `unit` (for example a fraction of the site's
    /// typical activation norm). Must be positive and finite.
    pub fn with_unit(mut self, unit: f64) -> Result<Self> {
        if !(unit > 0.0 && unit.is_finite()) {
            return Err(Error::InvalidArgument(format!("steering unit {unit} must be positive")));
        }
        self.unit = unit;
        Ok(self)
    }

    /// The vector added to the activation at scale `alpha`.
    pub fn delta(&self, alpha: f64) -> Vec<f64> {
        self.direction.iter().map(|v| alpha * self.unit * v).collect()
    }
}

/// Steer along a feature's decoder direction, transported to `site`.
pub fn steering_from_feature(
    model: &Model,
    calib: &TransportCalibration,
    sae: &Sae,
    feature: usize,
    site: Site,
) -> Result<SteeringPlan> {
    let raw = sae.feature_direction(feature)?.direction;
    let direction = if site == sae.site {
        raw.clone()
    } else {
        normalize(&transport(model, calib, &raw, sae.site, site)?)?
    };
    Ok(SteeringPlan {
        source: sae.site,
        site,
        raw,
        direction,
        unit: 1.0,
        provenance: Provenance::FeatureDirection { feature },
    })
}

pub fn probe_vector(sae: &Sae, probe: ProbeSpec) -> Result<Vec<f64>> {
    match probe {
        ProbeSpec::FeatureDirection { feature } => Ok(sae.feature_direction(feature)?.direction),
        ProbeSpec::OneHot { neuron } => {
            let d = sae.d_model();
            if neuron >= d {
                return Err(Error::BadNeuron { neuron, width: d });
            }
            let mut v = vec![0.0; d];
            v[neuron] = 1.0;
            Ok(v)
        }
    }
}

/// Steer along the normalized gradient of `⟨a_{p, i}, v⟩` with respect to
/// the input embedding of token `i` of an activation record.
#[allow(clippy::too_many_arguments)]
pub fn steering_from_token_gradient(
    model: &Model,
    window: &ActivationWindow,
    position: usize,
    source: Site,
    probe: &[f64],
    probe_spec: ProbeSpec,
    site: Site,
) -> Result<SteeringPlan> {
    site.check(model.config())?;
    let g = model.grad_wrt_embedding(&window.tokens, source, position, probe)?;
    if crate::tensor::norm(&g) < NORM_EPS {
        return Err(Error::ZeroGradient);
    }
    let direction = normalize(&g)?;
    Ok(SteeringPlan {
        source,
        site,
        raw: g,
        direction,
        unit: 1.0,
        provenance: Provenance::TokenGradient {
            feature: window.feature,
            sequence: window.sequence,
            position: window.start + position,
            probe: probe_spec,
        },
    })
}

// ---------------------------------------------------------------------------
// Outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub before: Distribution,
    pub after: Distribution,
    pub tv: f64,
    pub metrics: MetricReport,
}

impl InterventionOutcome {
    fn new(before: &Distribution, after: Distribution, profile: &TargetProfile) -> Result<Self> {
        let metrics = profile.report(before, &after, DEFAULT_EPSILON)?;
        Ok(Self {
            before: before.clone(),
            tv: before.total_variation(&after),
            after,
            metrics,
        })
    }
}

fn check_prompt(model: &Model, prompt: &[u32]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt".into()));
    }
    model.check_tokens(prompt)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.abs() <= MAX_ALPHA) {
        return Err(Error::InvalidArgument(format!("|alpha| {alpha} exceeds {MAX_ALPHA}")));
    }
    Ok(())
}

/// `Õ` for one steering scale given the unedited baseline `O`.
pub fn steer_with_baseline(
    model: &Model,
    prompt: &[u32],
    plan: &SteeringPlan,
    alpha: f64,
    baseline: &Distribution,
    profile: &TargetProfile,
) -> Result<InterventionOutcome> {
    check_alpha(alpha)?;
    let edit = ActivationEdit::add_vector(plan.site, plan.direction.clone(), alpha * plan.unit)
        .with_scope(EditScope::FinalPosition);
    let (after, _) = model.forward(prompt, &[], &[edit])?;
    InterventionOutcome::new(baseline, after, profile)
}

/// `Ã_s = A_s + α·unit·z_s` at the final position; metrics against `profile`.
pub fn apply_steering(
    model: &Model,
    prompt: &[u32],
    plan: &SteeringPlan,
    alpha: f64,
    profile: &TargetProfile,
) -> Result<InterventionOutcome> {
    check_prompt(model, prompt)?;
    check_alpha(alpha)?;
    let baseline = model.distribution(prompt)?;
    steer_with_baseline(model, prompt, plan, alpha, &baseline, profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub alpha: f64,
    pub value: Option<f64>,
    pub tv: f64,
    pub guarded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSearchResult {
    pub grid: Vec<f64>,
    pub metric: Metric,
    pub guard_tv: f64,
    /// One point per grid entry, in grid order.
    pub curve: Vec<ScalePoint>,
    pub best_alpha: f64,
    pub best: InterventionOutcome,
}

impl ScaleSearchResult {
    pub fn best_value(&self) -> f64 {
        self.metric.value(&self.best.metrics).expect("selected point has a value")
    }

    pub fn guard_violations(&self) -> usize {
        self.curve.iter().filter(|p| p.guarded).count()
    }
}

/// Preference between two admissible points: larger metric, then smaller
/// |α|, then smaller α. Independent of grid order.
fn better(a: (f64, f64), b: (f64, f64)) -> bool {
    let (va, aa) = a;
    let (vb, ab) = b;
    va > vb || (va == vb && (aa.abs() < ab.abs() || (aa.abs() == ab.abs() && aa < ab)))
}

/// Exhaustive search of `grid` for the best admissible scale.
#[allow(clippy::too_many_arguments)]
pub fn optimize_scale(
    model: &Model,
    prompt: &[u32],
    plan: &SteeringPlan,
    grid: &[f64],
    metric: Metric,
    guard_tv: f64,
    profile: &TargetProfile,
) -> Result<ScaleSearchResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty scale grid".into()));
    }
    for &a in grid {
        check_alpha(a)?;
    }
    check_prompt(model, prompt)?;
    let baseline = model.distribution(prompt)?;
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, InterventionOutcome)> = None;
    let mut any_value = false;
    for &alpha in grid {
        let out = steer_with_baseline(model, prompt, plan, alpha, &baseline, profile)?;
        let value = metric.value(&out.metrics);
        let guarded = out.tv > guard_tv;
        any_value |= value.is_some();
        curve.push(ScalePoint {
            alpha,
            value,
            tv: out.tv,
            guarded,
        });
        if let (Some(v), false) = (value, guarded) {
            if best.as_ref().is_none_or(|(bv, ba, _)| better((v, alpha), (*bv, *ba))) {
                best = Some((v, alpha, out));
            }
        }
    }
    let Some((_, best_alpha, best)) = best else {
        return Err(if any_value { Error::AllGuarded } else { Error::ZeroBaseline });
    };
    Ok(ScaleSearchResult {
        grid: grid.to_vec(),
        metric,
        guard_tv,
        curve,
        best_alpha,
        best,
    })
}

// ---------------------------------------------------------------------------
// Prompt injection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub snippet: Vec<u32>,
    /// Token placed between snippet and prompt.
    pub separator: Option<u32>,
    /// Reject snippets that contain a target token.
    pub overlap_guard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnippetPolicy {
    pub ratio: f64,
    pub max_len: Option<usize>,
}

impl Default for SnippetPolicy {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            max_len: None,
        }
    }
}

/// The longest contiguous run of tokens whose activation reaches
/// `ratio · max` (ties: larger activation sum, then earlier). When longer
/// than `max_len`, its best-summing sub-window of that length is kept.
/// Returns `(start, len)` within the window.
pub fn snippet_span(activations: &[f64], policy: &SnippetPolicy) -> Result<(usize, usize)> {
    if activations.is_empty() {
        return Err(Error::EmptyInput("activation record".into()));
    }
    let max = activations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::NeverFires(usize::MAX));
    }
    if !(policy.ratio > 0.0 && policy.ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {} outside (0, 1]", policy.ratio)));
    }
    let thr = policy.ratio * max;
    let sum = |s: usize, l: usize| activations[s..s + l].iter().sum::<f64>();
    let mut best: Option<(usize, usize, f64)> = None;
    let mut i = 0;
    while i < activations.len() {
        if activations[i] < thr {
            i += 1;
            continue;
        }
        let start = i;
        while i < activations.len() && activations[i] >= thr {
            i += 1;
        }
        let len = i - start;
        let s = sum(start, len);
        if best.is_none_or(|(_, bl, bs)| len > bl || (len == bl && s > bs)) {
            best = Some((start, len, s));
        }
    }
    let (start, len, _) = best.expect("the maximum clears its own threshold");
    match policy.max_len {
        Some(m) if m == 0 => Err(Error::InvalidArgument("max_len must be >= 1".into())),
        Some(m) if len > m => {
            let mut b = (start, sum(start, m));
            for s in start + 1..=start + len - m {
                let v = sum(s, m);
                if v > b.1 {
                    b = (s, v);
                }
            }
            Ok((b.0, m))
        }
        _ => Ok((start, len)),
    }
}

pub fn extract_snippet(window: &ActivationWindow, policy: &SnippetPolicy) -> Result<Vec<u32>> {
    let (s, l) = snippet_span(&window.activations, policy).map_err(|e| match e {
        Error::NeverFires(_) => Error::NeverFires(window.feature),
        e => e,
    })?;
    Ok(window.tokens[s..s + l].to_vec())
}

/// The injected input `snippet ++ [separator] ++ prompt`.
pub fn injected_input(prompt: &[u32], spec: &InjectionSpec) -> Vec<u32> {
    if spec.snippet.is_empty() {
        return prompt.to_vec();
    }
    let mut input = spec.snippet.clone();
    input.extend(spec.separator);
    input.extend_from_slice(prompt);
    input
}

/// Prepend a snippet to the prompt. An empty snippet leaves the input unchanged.
pub fn prompt_inject(
    model: &Model,
    prompt: &[u32],
    spec: &InjectionSpec,
    profile: &TargetProfile,
) -> Result<InterventionOutcome> {
    check_prompt(model, prompt)?;
    let baseline = model.distribution(prompt)?;
    inject_with_baseline(model, prompt, spec, &baseline, profile)
}

pub fn inject_with_baseline(
    model: &Model,
    prompt: &[u32],
    spec: &InjectionSpec,
    baseline: &Distribution,
    profile: &TargetProfile,
) -> Result<InterventionOutcome> {
    if spec.overlap_guard {
        if let Some(&t) = spec.snippet.iter().find(|t| profile.tokens.contains(t)) {
            return Err(Error::OverlapGuard(t));
        }
    }
    let input = injected_input(prompt, spec);
    let max = model.config().context_length;
    if input.len() > max {
        return Err(Error::ContextOverflow { len: input.len(), max });
    }
    let after = if spec.snippet.is_empty() {
        baseline.clone()
    } else {
        model.distribution(&input)?
    };
    InterventionOutcome::new(baseline, after, profile)
}

// ---------------------------------------------------------------------------
// Neurons
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronOutcome {
    pub cluster: usize,
    pub outcome: InterventionOutcome,
}

/// Scale one activation coordinate at `site` (final position) and score the
/// result against each connected cluster's token set.
pub fn neuron_intervene(
    model: &Model,
    site: Site,
    neuron: usize,
    scale: f64,
    prompt: &[u32],
    clusters: &[(usize, TargetProfile)],
) -> Result<Vec<NeuronOutcome>> {
    let d = model.config().d_model;
    if neuron >= d {
        return Err(Error::BadNeuron { neuron, width: d });
    }
    if !(0.0..=MAX_NEURON_SCALE).contains(&scale) {
        return Err(Error::InvalidArgument(format!("neuron scale {scale} outside [0, 20]")));
    }
    check_prompt(model, prompt)?;
    let baseline = model.distribution(prompt)?;
    let (after, _) = model.forward(prompt, &[], &[ActivationEdit::scale_neuron(site, neuron, scale)])?;
    clusters
        .iter()
        .map(|(cluster, profile)| {
            Ok(NeuronOutcome {
                cluster: *cluster,
                outcome: InterventionOutcome::new(&baseline, after.clone(), profile)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Prefilter
// ---------------------------------------------------------------------------

/// A target feature with its self-steering plan and token set.
#[derive(Debug, Clone)]
pub struct PrefilterCandidate {
    pub feature: usize,
    pub plan: SteeringPlan,
    pub profile: TargetProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefilterReport {
    pub theta: f64,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Whether steering along the target's own direction moves `Δc` or relative
/// `Δw` by at least `theta` at some admissible scale on some prompt.
pub fn self_steering_effective(
    model: &Model,
    candidate: &PrefilterCandidate,
    prompts: &[Vec<u32>],
    grid: &[f64],
    guard_tv: f64,
    theta: f64,
) -> Result<bool> {
    for prompt in prompts {
        check_prompt(model, prompt)?;
        let baseline = model.distribution(prompt)?;
        for &alpha in grid {
            let out = steer_with_baseline(model, prompt, &candidate.plan, alpha, &baseline, &candidate.profile)?;
            if out.tv > guard_tv {
                continue;
            }
            let m = &out.metrics;
            if m.delta_c.is_some_and(|v| v >= theta) || m.delta_w_rel >= theta {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

pub fn prefilter_targets(
    model: &Model,
    candidates: &[PrefilterCandidate],
    prompts: &[Vec<u32>],
    grid: &[f64],
    guard_tv: f64,
    theta: f64,
) -> Result<PrefilterReport> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for c in candidates {
        if self_steering_effective(model, c, prompts, grid, guard_tv, theta)? {
            kept.push(c.feature);
        } else {
            dropped.push(c.feature);
        }
    }
    Ok(PrefilterReport { theta, kept, dropped })
}

/// Tokens of `snippet` that belong to `tokens`.
pub fn overlap(snippet: &[u32], tokens: &BTreeSet<u32>) -> Vec<u32> {
    snippet.iter().copied().filter(|t| tokens.contains(t)).collect()
}
