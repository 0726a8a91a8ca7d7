// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance suite.
//!
//! Runs the default experiment once, then checks ten acceptance criteria
//! against independent oracles. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Context as _};
use rand::Rng as _;

use polyprobe::evaluation::{bin_summary, BinValues, EmbeddingTable, TargetProfile};
use polyprobe::harness::artifacts::read_jsonl_file;
use polyprobe::harness::config::ExperimentConfig;
use polyprobe::harness::report::RunReport;
use polyprobe::harness::{
    files, run_pipeline, CorpusArtifact, Family, NeuronMode, NeuronRecord, OutcomeRecord, Pipeline, Stage, Variant,
};
use polyprobe::interference::{agglomerative_cluster, interference_matrix, FeatureMatrix};
use polyprobe::interventions::{
    apply_steering, forward_map, inject_with_baseline, neuron_intervene, snippet_span, steering_from_feature,
    transport, InjectionSpec, SnippetPolicy, TransportCalibration,
};
use polyprobe::linalg::{finite_difference_gradient, pseudo_inverse};
use polyprobe::model::corpus::Corpus;
use polyprobe::model::{Distribution, Model, Site};
use polyprobe::rng::{gaussian, rng_for};
use polyprobe::sae::{activation_records, harvest_activations, train_sae, FeatureActivations, Sae, SaeConfig};
use polyprobe::Tensor;

type Outcome = anyhow::Result<String>;

/// Budget for the whole default pipeline on one machine.
const PIPELINE_BUDGET: Duration = Duration::from_secs(15 * 60);
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const NUMERIC_TOL: f64 = 1e-10;

struct Run {
    root: PathBuf,
    pipeline: Pipeline,
    report: RunReport,
    elapsed: Duration,
}

impl Run {
    fn config(&self) -> &ExperimentConfig {
        self.pipeline.config()
    }

    fn corpus(&self) -> anyhow::Result<Corpus> {
        let c: CorpusArtifact = self.pipeline.dir().read_json(files::CORPUS, Stage::TrainModel)?;
        Ok(Corpus { sequences: c.sequences })
    }

    fn model_a(&self) -> anyhow::Result<Model> {
        Ok(self.pipeline.model(Variant::A)?)
    }

    fn sae_a(&self) -> anyhow::Result<Sae> {
        Ok(self.pipeline.sae(Variant::A)?)
    }

    fn outcomes(&self, family: Family) -> anyhow::Result<Vec<OutcomeRecord>> {
        Ok(read_jsonl_file(&self.root.join(family.outcome_file()))?.1)
    }

    fn neuron_outcomes(&self) -> anyhow::Result<Vec<NeuronRecord>> {
        Ok(read_jsonl_file(&self.root.join(Family::Neuron.outcome_file()))?.1)
    }

    fn calibration(&self, model: &Model) -> anyhow::Result<TransportCalibration> {
        let corpus = self.corpus()?;
        let n = self.config().analysis.calibration_sequences.min(corpus.sequences.len());
        Ok(TransportCalibration::from_prompts(model, &corpus.sequences[..n])?)
    }
}

// ---------------------------------------------------------------------------
// Independent helpers
// ---------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (l2(a) * l2(b))
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `max_{t̄ ∈ T} cos(E_t, E_t̄)` for every token, straight from raw embeddings.
fn brute_max_cos(emb: &Tensor, tokens: &BTreeSet<u32>) -> Vec<f64> {
    (0..emb.rows())
        .map(|t| {
            tokens
                .iter()
                .map(|&tb| cosine(emb.row(t), emb.row(tb as usize)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// `Σ_t O(t) · max_{t̄} cos(E_t, E_t̄)` as a double loop.
fn brute_weighted_cosine(o: &Distribution, emb: &Tensor, tokens: &BTreeSet<u32>) -> f64 {
    let mut total = 0.0;
    for (t, p) in o.probs().iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for &tb in tokens {
            best = best.max(cosine(emb.row(t), emb.row(tb as usize)));
        }
        total += p * best;
    }
    total
}

fn brute_overlap(o: &Distribution, tokens: &BTreeSet<u32>) -> f64 {
    o.probs()
        .iter()
        .enumerate()
        .filter(|(t, _)| tokens.contains(&(*t as u32)))
        .map(|(_, p)| p)
        .sum()
}

/// Exact one-sided binomial tail from a Pascal row.
fn binomial_upper_tail(successes: usize, n: usize) -> f64 {
    let mut row = vec![1.0f64];
    for _ in 0..n {
        let mut next = vec![1.0; row.len() + 1];
        for k in 1..row.len() {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
    }
    let total: f64 = row.iter().sum();
    row[successes.min(n + 1)..].iter().sum::<f64>() / total
}

/// Best window by scanning every `(start, len)`.
fn brute_snippet(acts: &[f64], ratio: f64, max_len: Option<usize>) -> (usize, usize) {
    let max = acts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thr = ratio * max;
    let n = acts.len();
    let window_sum = |s: usize, l: usize| acts[s..s + l].iter().sum::<f64>();
    let mut best: Option<(usize, usize, f64)> = None;
    for s in 0..n {
        for l in 1..=n - s {
            if acts[s..s + l].iter().any(|&v| v < thr) {
                continue;
            }
            let sum = window_sum(s, l);
            let better = match best {
                None => true,
                Some((bs, bl, bsum)) => l > bl || (l == bl && (sum > bsum || (sum == bsum && s < bs))),
            };
            if better {
                best = Some((s, l, sum));
            }
        }
    }
    let (s, l, _) = best.expect("the maximum qualifies");
    match max_len {
        Some(m) if l > m => {
            let mut b: Option<(usize, f64)> = None;
            for st in s..=s + l - m {
                let v = window_sum(st, m);
                if b.is_none_or(|(_, bv)| v > bv) {
                    b = Some((st, v));
                }
            }
            (b.expect("non-empty").0, m)
        }
        _ => (s, l),
    }
}

/// Average linkage recomputed from scratch at every merge.
fn naive_average_linkage(ids: &[usize], vectors: &[Vec<f64>], cutoff: f64) -> Vec<Vec<usize>> {
    let n = ids.len();
    let dist = |a: usize, b: usize| 1.0 - cosine(&vectors[a], &vectors[b]).clamp(-1.0, 1.0);
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let mut s = 0.0;
                for &a in &clusters[x] {
                    for &b in &clusters[y] {
                        s += dist(a, b);
                    }
                }
                let d = s / (clusters[x].len() * clusters[y].len()) as f64;
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, x, y));
                }
            }
        }
        match best {
            Some((d, x, y)) if d <= 1.0 - cutoff => {
                let moved = clusters.remove(y);
                clusters[x].extend(moved);
            }
            _ => break,
        }
    }
    let mut out: Vec<Vec<usize>> = clusters
        .into_iter()
        .map(|c| {
            let mut m: Vec<usize> = c.into_iter().map(|i| ids[i]).collect();
            m.sort_unstable();
            m
        })
        .collect();
    out.sort();
    out
}

fn feature_activations(model: &Model, sae: &Sae, corpus: &Corpus) -> anyhow::Result<FeatureActivations> {
    let ds = harvest_activations(model, corpus, sae.site)?;
    Ok(FeatureActivations::compute(sae, &ds))
}

fn listing(root: &Path) -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

/// Embedding gradients agree with central differences.
fn gradients(run: &Run) -> Outcome {
    let start = Instant::now();
    let model = run.model_a()?;
    let corpus = run.corpus()?;
    let sites = model.config().sites();
    let d = model.config().d_model;
    let mut rng = rng_for(7, "acceptance-gradients");
    let probes = 120;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let seq = &corpus.sequences[rng.random_range(0..corpus.sequences.len())];
        let len = rng.random_range(2..=12usize).min(seq.len());
        let tokens = &seq[..len];
        let site = sites[rng.random_range(0..sites.len())];
        let pos = rng.random_range(0..len);
        let probe: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        let g = model.grad_wrt_embedding(tokens, site, pos, &probe)?;
        let emb = model.embed(tokens)?;
        let objective = |row: &[f64]| -> polyprobe::Result<f64> {
            let mut data = emb.data().to_vec();
            data[pos * d..(pos + 1) * d].copy_from_slice(row);
            let e = Tensor::matrix(len, d, data)?;
            let (_, trace) = model.forward_embeddings(&e, &[site], &[])?;
            Ok(dot(trace.get(site).expect("captured").row(pos), &probe))
        };
        let fd = finite_difference_gradient(objective, emb.row(pos), 1e-5)?;
        let rel = diff_norm(&g, &fd) / l2(&fd).max(1e-6);
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    ensure!(worst < 1e-4, "max relative error {worst:.3e} >= 1e-4");
    ensure!(elapsed < GRADIENT_BUDGET, "took {elapsed:?}");
    Ok(format!("{probes} probes, max rel err {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

/// Decoder norms stay unit, held-out MSE halves, L0 falls with λ.
fn sae_training(run: &Run) -> Outcome {
    let model = run.model_a()?;
    let corpus = run.corpus()?;
    let ds = harvest_activations(&model, &corpus, run.config().sae_site)?;
    let mut l0s = Vec::new();
    let mut notes = Vec::new();
    for lambda in [0.0, 1e-3, 1e-2] {
        let cfg = SaeConfig {
            lambda,
            steps: 500,
            ..run.config().sae.clone()
        };
        let (_, rep) = train_sae(&ds, &cfg)?;
        let dev = rep.norm_deviation.iter().cloned().fold(0.0, f64::max);
        ensure!(rep.norm_deviation.len() == 500, "norm deviation recorded for every step");
        ensure!(dev < 1e-6, "λ={lambda}: decoder norm deviation {dev:.2e}");
        let (s0, m0) = rep.mse_curve[0];
        let (s1, m1) = *rep.mse_curve.last().expect("curve");
        ensure!(s0 == 0 && s1 == 500, "MSE curve spans steps {s0}..{s1}");
        ensure!(m1 < 0.5 * m0, "λ={lambda}: MSE {m0:.3} -> {m1:.3}");
        l0s.push(rep.mean_l0);
        notes.push(format!("λ={lambda}: mse {m0:.2}->{m1:.3}, L0 {:.2}", rep.mean_l0));
    }
    ensure!(
        l0s.windows(2).all(|w| w[1] < w[0]),
        "L0 not strictly decreasing in λ: {l0s:?}"
    );
    Ok(notes.join("; "))
}

/// Library routines equal brute-force recomputations.
fn oracles(run: &Run) -> Outcome {
    let model = run.model_a()?;
    let sae = run.sae_a()?;
    let cfg = run.config();

    // Interference matrix against a loop over decoder columns.
    let im = run.pipeline.interference(Variant::A)?;
    let k = sae.w_dec.cols();
    let cols: Vec<Vec<f64>> = (0..k).map(|i| sae.w_dec.column(i)).collect();
    let mut worst_i: f64 = 0.0;
    for (x, &i) in im.features.iter().enumerate() {
        for (y, &j) in im.features.iter().enumerate() {
            worst_i = worst_i.max((im.values.get(x, y) - cosine(&cols[i], &cols[j])).abs());
        }
    }
    ensure!(worst_i <= NUMERIC_TOL, "interference differs by {worst_i:.2e}");

    // Weighted cosine and overlap on real distributions and token sets.
    let emb = model.token_embeddings().clone();
    let table = EmbeddingTable::from_model("a", &model)?;
    let targets = run.pipeline.targets()?;
    let prompts = run.pipeline.prompts();
    let mut worst_c: f64 = 0.0;
    let mut worst_w: f64 = 0.0;
    let mut checked = 0;
    for t in targets.targets.iter().take(10) {
        let profile = TargetProfile::new(&t.tokens, &table)?;
        for p in &prompts {
            let o = model.distribution(p)?;
            worst_c = worst_c.max((profile.weighted_cosine(&o)? - brute_weighted_cosine(&o, &emb, &t.tokens)).abs());
            worst_w = worst_w.max((profile.weighted_overlap(&o) - brute_overlap(&o, &t.tokens)).abs());
            checked += 1;
        }
    }
    ensure!(worst_c <= NUMERIC_TOL, "weighted cosine differs by {worst_c:.2e}");
    ensure!(worst_w <= NUMERIC_TOL, "weighted overlap differs by {worst_w:.2e}");

    // Snippet extraction: random records with ties, then the real snippets.
    let mut rng = rng_for(8, "acceptance-snippets");
    for case in 0..3000 {
        let n = rng.random_range(1..=24usize);
        let acts: Vec<f64> = (0..n).map(|_| rng.random_range(0..=8u32) as f64 * 0.25).collect();
        if !acts.iter().any(|&v| v > 0.0) {
            continue;
        }
        let ratio = [0.25, 0.5, 0.8, 1.0][case % 4];
        let max_len = [None, Some(1), Some(3), Some(6)][(case / 4) % 4];
        let got = snippet_span(&acts, &SnippetPolicy { ratio, max_len })?;
        let want = brute_snippet(&acts, ratio, max_len);
        ensure!(got == want, "snippet {acts:?} ratio {ratio} max {max_len:?}: {got:?} vs {want:?}");
    }
    let corpus = run.corpus()?;
    let acts = feature_activations(&model, &sae, &corpus)?;
    let inject = run.outcomes(Family::Inject)?;
    let mut real = 0;
    for r in inject.iter().filter(|r| r.is_original()) {
        let Some(snippet) = &r.snippet else { continue };
        let w = activation_records(&acts, &corpus, r.feature, 1)?.remove(0);
        let (s, l) = brute_snippet(&w.activations, cfg.injection.snippet.ratio, cfg.injection.snippet.max_len);
        ensure!(&w.tokens[s..s + l] == snippet.as_slice(), "logged snippet of feature {}", r.feature);
        real += 1;
    }

    // Scale search: an independent pass over the grid for logged trials.
    let calib = run.calibration(&model)?;
    let feature_log = run.outcomes(Family::Feature)?;
    let sc = &cfg.steering;
    let mut searched = 0;
    for r in feature_log.iter().filter(|r| r.value.is_some()).step_by(97).take(12) {
        let t = targets
            .targets
            .iter()
            .find(|t| t.feature == r.target)
            .ok_or_else(|| anyhow!("target {} missing", r.target))?;
        let profile = TargetProfile::new(&t.tokens, &table)?;
        let plan =
            steering_from_feature(&model, &calib, &sae, r.feature, cfg.steering_site())?.with_unit(targets.steering_unit)?;
        let mut best: Option<(f64, f64)> = None;
        let mut violations = 0;
        for &alpha in &sc.grid {
            let out = apply_steering(&model, &prompts[r.prompt], &plan, alpha, &profile)?;
            if out.tv > sc.guard_tv {
                violations += 1;
                continue;
            }
            let Some(v) = sc.metric.value(&out.metrics) else { continue };
            let better = match best {
                None => true,
                Some((bv, ba)) => {
                    v > bv || (v == bv && (alpha.abs() < ba.abs() || (alpha.abs() == ba.abs() && alpha < ba)))
                }
            };
            if better {
                best = Some((v, alpha));
            }
        }
        let (v, alpha) = best.ok_or_else(|| anyhow!("trial {} has no admissible scale", r.trial))?;
        ensure!(r.alpha == Some(alpha), "trial {}: α {:?} vs {alpha}", r.trial, r.alpha);
        ensure!(
            (r.value.expect("filtered") - v).abs() <= NUMERIC_TOL,
            "trial {}: value differs",
            r.trial
        );
        ensure!(r.guard_violations == violations, "trial {}: guard count", r.trial);
        searched += 1;
    }
    ensure!(searched > 0, "no feature trials to check");

    // Clustering on small sets at every reported cutoff.
    let glosses = run.pipeline.glosses(Variant::A)?;
    let gloss_ids: Vec<usize> = glosses.features().collect();
    let mut sets: Vec<(Vec<usize>, Vec<Vec<f64>>)> = Vec::new();
    for offset in 0..4 {
        let ids: Vec<usize> = gloss_ids.iter().copied().skip(offset).step_by(gloss_ids.len() / 12).take(12).collect();
        let vecs = ids.iter().map(|&i| glosses.get(i).map(<[f64]>::to_vec)).collect::<Result<Vec<_>, _>>()?;
        sets.push((ids, vecs));
    }
    let mut crng = rng_for(9, "acceptance-clusters");
    for n in [2usize, 5, 9, 12] {
        let ids: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let vecs = (0..n).map(|_| (0..6).map(|_| gaussian(&mut crng)).collect()).collect();
        sets.push((ids, vecs));
    }
    for (ids, vecs) in &sets {
        for &cutoff in &cfg.analysis.cluster_cutoffs {
            let got = agglomerative_cluster(ids, vecs, cutoff)?.clusters;
            let want = naive_average_linkage(ids, vecs, cutoff);
            ensure!(got == want, "clusters at cutoff {cutoff} for {ids:?}");
        }
    }

    Ok(format!(
        "interference {worst_i:.1e}, cosine {worst_c:.1e} / overlap {worst_w:.1e} over {checked}, \
         3000 random + {real} real snippets, {searched} scale searches, {} clusterings",
        sets.len() * cfg.analysis.cluster_cutoffs.len()
    ))
}

/// Interventions that change nothing report zero deltas.
fn no_ops(run: &Run) -> Outcome {
    let model = run.model_a()?;
    let sae = run.sae_a()?;
    let cfg = run.config();
    let calib = run.calibration(&model)?;
    let table = EmbeddingTable::from_model("a", &model)?;
    let targets = run.pipeline.targets()?;
    let prompts = run.pipeline.prompts();
    let mut checks = 0;
    let mut check = |before: &Distribution, after: &Distribution, m: &polyprobe::evaluation::MetricReport, what: &str| {
        let diff = before.max_abs_diff(after);
        ensure!(diff <= 1e-12, "{what}: distributions differ by {diff:.2e}");
        ensure!(m.delta_c.is_none_or(|v| v == 0.0), "{what}: Δc = {:?}", m.delta_c);
        ensure!(m.delta_w == 0.0 && m.delta_w_rel == 0.0, "{what}: Δw = {}", m.delta_w);
        checks += 1;
        Ok(())
    };
    for t in targets.targets.iter().take(5) {
        let profile = TargetProfile::new(&t.tokens, &table)?;
        let plan =
            steering_from_feature(&model, &calib, &sae, t.feature, cfg.steering_site())?.with_unit(targets.steering_unit)?;
        for p in &prompts {
            let out = apply_steering(&model, p, &plan, 0.0, &profile)?;
            check(&out.before, &out.after, &out.metrics, "α = 0")?;
            let empty = InjectionSpec {
                snippet: Vec::new(),
                separator: cfg.injection.separator,
                overlap_guard: true,
            };
            let base = model.distribution(p)?;
            let out = inject_with_baseline(&model, p, &empty, &base, &profile)?;
            check(&out.before, &out.after, &out.metrics, "empty injection")?;
            for neuron in [0, 7, 31] {
                for o in neuron_intervene(&model, sae.site, neuron, 1.0, p, &[(0, profile.clone())])? {
                    check(&o.outcome.before, &o.outcome.after, &o.outcome.metrics, "neuron scale 1")?;
                }
            }
        }
    }
    Ok(format!("{checks} no-op interventions"))
}

/// Transport maps satisfy Penrose and match finite differences.
fn transport_check(run: &Run) -> Outcome {
    let model = run.model_a()?;
    let calib = run.calibration(&model)?;
    let d = model.config().d_model;
    let mut worst_penrose: f64 = 0.0;
    for l in 0..model.config().n_layers {
        let phi = forward_map(&model, &calib, Site::resid_pre(l), Site::attn_out(l))?;
        let pinv = pseudo_inverse(&phi)?;
        let pp = phi.matmul(&pinv)?;
        let qp = pinv.matmul(&phi)?;
        let residuals = [
            pp.matmul(&phi)?.max_abs_diff(&phi),
            qp.matmul(&pinv)?.max_abs_diff(&pinv),
            pp.max_abs_diff(&pp.transpose()),
            qp.max_abs_diff(&qp.transpose()),
        ];
        for r in residuals {
            worst_penrose = worst_penrose.max(r);
        }
    }
    ensure!(worst_penrose < 1e-8, "Penrose residual {worst_penrose:.2e}");

    let fd = |prompt: &[u32], z: &[f64], p: Site, s: Site| -> anyhow::Result<Vec<f64>> {
        let eps = 1e-4;
        let (_, base) = model.forward(prompt, &[s], &[])?;
        let edit = polyprobe::model::ActivationEdit::add_vector(p, z.to_vec(), eps);
        let (_, pert) = model.forward(prompt, &[s], &[edit])?;
        let (a, b) = (base.get(s).expect("captured"), pert.get(s).expect("captured"));
        let last = a.rows() - 1;
        Ok(a.row(last).iter().zip(b.row(last)).map(|(x, y)| (y - x) / eps).collect())
    };
    let mut rng = rng_for(10, "acceptance-transport");
    let unit = |rng: &mut polyprobe::rng::Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = l2(&v);
        v.into_iter().map(|x| x / n).collect()
    };
    let mut worst_fd: f64 = 0.0;
    let prompts = run.pipeline.prompts();
    for l in 0..model.config().n_layers - 1 {
        for p in [Site::mlp_out(l), Site::resid_post(l)] {
            let s = Site::resid_pre(l + 1);
            let z = unit(&mut rng);
            let phi = transport(&model, &calib, &z, p, s)?;
            let f = fd(&prompts[0], &z, p, s)?;
            worst_fd = worst_fd.max(diff_norm(&phi, &f) / l2(&f));
        }
    }
    // Attention: a single token makes the pattern exact; σ is calibrated on
    // that token and z is mean-zero and orthogonal to the normalized input.
    for l in 0..model.config().n_layers {
        let prompt = [prompts[0][0]];
        let p = Site::resid_pre(l);
        let s = Site::attn_out(l);
        let c = TransportCalibration::from_prompts(&model, &[prompt.to_vec()])?;
        let (_, tr) = model.forward(&prompt, &[p], &[])?;
        let x = tr.get(p).expect("captured").row(0).to_vec();
        let mu = x.iter().sum::<f64>() / d as f64;
        let xc: Vec<f64> = x.iter().map(|v| v - mu).collect();
        let xn = l2(&xc);
        let xh: Vec<f64> = xc.iter().map(|v| v / xn).collect();
        let mut z = unit(&mut rng);
        let zm = z.iter().sum::<f64>() / d as f64;
        z.iter_mut().for_each(|v| *v -= zm);
        let proj = dot(&z, &xh);
        z.iter_mut().zip(&xh).for_each(|(v, h)| *v -= proj * h);
        let phi = transport(&model, &c, &z, p, s)?;
        let f = fd(&prompt, &z, p, s)?;
        worst_fd = worst_fd.max(diff_norm(&phi, &f) / l2(&f));
    }
    ensure!(worst_fd < 0.05, "transport vs finite differences {worst_fd:.3}");
    Ok(format!("Penrose {worst_penrose:.1e}, FD rel err {worst_fd:.2e}"))
}

/// Steering effect falls with interference.
fn trend(run: &Run) -> Outcome {
    let cfg = run.config();
    let records = run.outcomes(Family::Feature)?;
    let targets: BTreeSet<usize> = records.iter().map(|r| r.target).collect();
    let prompts: BTreeSet<usize> = records.iter().map(|r| r.prompt).collect();
    let grouped: Vec<BinValues> = cfg
        .analysis
        .bins
        .iter()
        .map(|b| {
            let label = b.label();
            BinValues {
                values: records
                    .iter()
                    .filter(|r| r.bin.as_deref() == Some(label.as_str()) && b.contains(r.interference))
                    .filter_map(|r| r.value)
                    .collect(),
                midpoint: b.midpoint(),
                label,
            }
        })
        .collect();
    let summary = bin_summary(&grouped, cfg.bootstrap_resamples, cfg.bootstrap_seed);
    let fr = run
        .report
        .family(Family::Feature)
        .ok_or_else(|| anyhow!("report lacks the feature family"))?;
    ensure!(fr.bins == summary, "report bins differ from the recomputed summary");
    let original: Vec<f64> = records.iter().filter(|r| r.is_original()).filter_map(|r| r.value).collect();
    let original_mean = original.iter().sum::<f64>() / original.len() as f64;
    ensure!(targets.len() >= 20, "only {} targets", targets.len());
    ensure!(prompts.len() >= 3, "only {} prompts", prompts.len());
    ensure!(summary.rows.len() == 5, "only {} non-empty bins", summary.rows.len());
    let rho = summary.spearman.ok_or_else(|| anyhow!("no correlation"))?;
    let (lo, hi) = summary.spearman_ci.ok_or_else(|| anyhow!("no interval"))?;
    let means: Vec<f64> = summary.rows.iter().map(|r| r.mean).collect();
    ensure!(run.elapsed < PIPELINE_BUDGET, "pipeline took {:?}", run.elapsed);
    ensure!(rho > 0.0, "ρ = {rho}");
    ensure!(lo > 0.0, "ρ CI [{lo:.2}, {hi:.2}] includes 0");
    ensure!(
        means.iter().all(|&m| original_mean >= m),
        "original {original_mean:.3} below a bin mean {means:?}"
    );
    Ok(format!(
        "ρ = {rho:.2} CI [{lo:.2}, {hi:.2}], original {original_mean:.3}, bins {:?}, {} targets, {:.0}s",
        means.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        targets.len(),
        run.elapsed.as_secs_f64()
    ))
}

/// Self-injection raises overlap with the target tokens.
fn injection(run: &Run) -> Outcome {
    let records = run.outcomes(Family::Inject)?;
    let (mut trials, mut up, mut down) = (0usize, 0usize, 0usize);
    for r in records.iter().filter(|r| r.is_original()) {
        let (Some(b), Some(a)) = (&r.before, &r.after) else { continue };
        let Some(tokens) = r.metrics.as_ref().map(|m| m.tokens.iter().copied().collect::<BTreeSet<u32>>()) else {
            continue;
        };
        let (wb, wa) = (brute_overlap(b, &tokens), brute_overlap(a, &tokens));
        trials += 1;
        if wa > wb {
            up += 1;
        } else if wa < wb {
            down += 1;
        }
    }
    let p = binomial_upper_tail(up, up + down);
    let reported = run
        .report
        .injection_sign_test
        .as_ref()
        .ok_or_else(|| anyhow!("no sign test in report"))?;
    ensure!(reported.increases == up && reported.decreases == down, "report counts differ from the log");
    ensure!(
        (reported.p_value - p).abs() <= 1e-9 * p.max(1e-300),
        "report p {} vs {p}",
        reported.p_value
    );
    ensure!(trials >= 50, "only {trials} trials");
    ensure!(2 * up > trials, "{up} of {trials} increase");
    ensure!(p < 0.05, "p = {p:.3}");
    Ok(format!("{up} up / {down} down of {trials}, p = {p:.2e}"))
}

/// Neuron interventions span degrees and their metrics recompute exactly.
fn neurons(run: &Run) -> Outcome {
    let model = run.model_a()?;
    let emb = model.token_embeddings().clone();
    let records = run.neuron_outcomes()?;
    let mut modes: BTreeMap<usize, BTreeSet<bool>> = BTreeMap::new();
    let mut cache: BTreeMap<Vec<u32>, Vec<f64>> = BTreeMap::new();
    let mut worst: f64 = 0.0;
    for r in &records {
        modes.entry(r.degree).or_default().insert(r.mode == NeuronMode::Mask);
        let m = &r.metrics;
        let tokens: BTreeSet<u32> = m.tokens.iter().copied().collect();
        let max_cos = cache
            .entry(m.tokens.clone())
            .or_insert_with(|| brute_max_cos(&emb, &tokens));
        let c = |o: &Distribution| o.probs().iter().zip(max_cos.iter()).map(|(p, w)| p * w).sum::<f64>();
        let (cb, ca) = (c(&r.before), c(&r.after));
        let (wb, wa) = (brute_overlap(&r.before, &tokens), brute_overlap(&r.after, &tokens));
        let dc = if cb > 1e-12 { Some((ca - cb) / cb) } else { None };
        ensure!(dc.is_some() == m.delta_c.is_some(), "trial {}: zero-baseline flag", r.trial);
        let mut errs = vec![
            (m.c_before - cb).abs(),
            (m.c_after - ca).abs(),
            (m.w_before - wb).abs(),
            (m.w_after - wa).abs(),
            (m.delta_w - (wa - wb)).abs(),
        ];
        if let (Some(x), Some(y)) = (m.delta_c, dc) {
            errs.push((x - y).abs());
        }
        for e in errs {
            worst = worst.max(e);
        }
    }
    ensure!(worst <= 1e-12, "metric recomputation differs by {worst:.2e}");
    ensure!(modes.len() >= 3, "only {} degree groups", modes.len());
    ensure!(
        modes.values().all(|m| m.len() == 2),
        "some degree lacks masking or amplification"
    );
    let degrees: Vec<usize> = modes.keys().copied().collect();
    ensure!(run.report.degree_groups == degrees, "report degree groups differ");
    let csv = fs::read_to_string(run.root.join(files::NEURON_CSV))?;
    for d in &degrees {
        for mode in ["mask", "amplify"] {
            ensure!(
                csv.lines().any(|l| l.starts_with(&format!("{d},{mode},"))),
                "CSV lacks degree {d} {mode}"
            );
        }
    }
    Ok(format!("{} records, degrees {degrees:?}, max err {worst:.1e}", records.len()))
}

/// Shared pairs equal an exhaustive enumeration over the artifacts.
fn shared_pairs(run: &Run) -> Outcome {
    let t = run.config().analysis.shared;
    let table = run.pipeline.shared_pairs()?;
    let load = |v: Variant| -> anyhow::Result<(FeatureMatrix, BTreeMap<usize, Vec<f64>>)> {
        let im = run.pipeline.interference(v)?;
        let path = run.root.join(files::glosses(v));
        let mut glosses = BTreeMap::new();
        for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
            let rec: serde_json::Value = serde_json::from_str(line)?;
            let id = rec["feature_id"].as_u64().context("feature_id")? as usize;
            let vec: Vec<f64> = serde_json::from_value(rec["vector"].clone())?;
            glosses.insert(id, vec);
        }
        Ok((im, glosses))
    };
    let qualifying = |im: &FeatureMatrix, g: &BTreeMap<usize, Vec<f64>>| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (x, &i) in im.features.iter().enumerate() {
            for (y, &j) in im.features.iter().enumerate() {
                if i >= j || im.values.get(x, y) <= t.interference {
                    continue;
                }
                if let (Some(a), Some(b)) = (g.get(&i), g.get(&j)) {
                    if cosine(a, b) < t.semantic {
                        out.push((i, j));
                    }
                }
            }
        }
        out
    };
    let (im_a, g_a) = load(Variant::A)?;
    let (im_b, g_b) = load(Variant::B)?;
    let qa = qualifying(&im_a, &g_a);
    let qb = qualifying(&im_b, &g_b);
    ensure!(qa == table.qualifying_a, "qualifying pairs of A differ");
    ensure!(qb == table.qualifying_b, "qualifying pairs of B differ");
    let mine = |ga: &BTreeMap<usize, Vec<f64>>, gb: &BTreeMap<usize, Vec<f64>>, qa: &[(usize, usize)], qb: &[(usize, usize)]| {
        let mut out = Vec::new();
        for &(i, j) in qa {
            for &(k, l) in qb {
                let straight = cosine(&ga[&i], &gb[&k]).min(cosine(&ga[&j], &gb[&l]));
                let crossed = cosine(&ga[&i], &gb[&l]).min(cosine(&ga[&j], &gb[&k]));
                let (score, is_crossed) = if crossed > straight { (crossed, true) } else { (straight, false) };
                if score > t.cross {
                    out.push(((i, j), (k, l), score, is_crossed));
                }
            }
        }
        out
    };
    let compare = |want: &[((usize, usize), (usize, usize), f64, bool)],
                   got: &[polyprobe::interference::SharedPair],
                   what: &str|
     -> anyhow::Result<()> {
        ensure!(want.len() == got.len(), "{what}: {} pairs vs {}", got.len(), want.len());
        for (w, g) in want.iter().zip(got) {
            ensure!(g.a == w.0 && g.b == w.1 && g.crossed == w.3, "{what}: pair {:?}/{:?}", g.a, g.b);
            ensure!((g.score - w.2).abs() <= NUMERIC_TOL, "{what}: score of {:?}", g.a);
        }
        Ok(())
    };
    let cross = mine(&g_a, &g_b, &qa, &qb);
    compare(&cross, &table.pairs, "A vs B")?;
    let own = mine(&g_a, &g_a, &qa, &qa);
    compare(&own, &table.self_pairs, "A vs A")?;
    let diagonal: Vec<(usize, usize)> = table.self_pairs.iter().filter(|p| p.a == p.b).map(|p| p.a).collect();
    ensure!(diagonal == qa, "self-run diagonal differs from the qualifying pairs");
    Ok(format!(
        "qualifying {} / {}, shared {}, self {} (diagonal {})",
        qa.len(),
        qb.len(),
        table.pairs.len(),
        table.self_pairs.len(),
        diagonal.len()
    ))
}

/// Reruns are byte-identical and checkpoints round-trip exactly.
fn reproducibility(run: &Run, scratch: &Path) -> Outcome {
    let before = listing(&run.root)?;

    // Warm rerun: every stage is cached, nothing changes.
    run_pipeline(run.config().clone(), &run.root, false)?;
    let warm = listing(&run.root)?;
    ensure!(warm == before, "warm rerun changed artifacts");

    // Cold rerun into a fresh directory.
    let cold_root = scratch.join("cold");
    run_pipeline(run.config().clone(), &cold_root, false)?;
    let cold = listing(&cold_root)?;
    let names: Vec<&String> = before.keys().collect();
    ensure!(cold.keys().collect::<Vec<_>>() == names, "cold rerun wrote different files");
    for (name, bytes) in &before {
        ensure!(&cold[name] == bytes, "{name} differs between runs");
    }

    // Checkpoint round trips.
    let model = run.model_a()?;
    let bytes = model.to_checkpoint()?.to_bytes()?;
    ensure!(bytes == before[&files::model(Variant::A)], "model checkpoint bytes are not stable");
    let back = Model::from_checkpoint(&polyprobe::checkpoint::Checkpoint::from_bytes(&bytes)?)?;
    for p in run.pipeline.prompts() {
        let (x, y) = (model.logits(&p)?, back.logits(&p)?);
        ensure!(
            x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "logits changed across a round trip"
        );
    }
    let fresh = Model::init(run.config().model.clone())?;
    let fresh_back = Model::from_checkpoint(&polyprobe::checkpoint::Checkpoint::from_bytes(
        &fresh.to_checkpoint()?.to_bytes()?,
    )?)?;
    let p = &run.pipeline.prompts()[0];
    ensure!(
        fresh.logits(p)?.data().iter().zip(fresh_back.logits(p)?.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "fresh model logits changed across a round trip"
    );
    let sae = run.sae_a()?;
    let sae_back = Sae::from_checkpoint(&polyprobe::checkpoint::Checkpoint::from_bytes(&sae.to_checkpoint()?.to_bytes()?)?)?;
    let stored = run.pipeline.interference(Variant::A)?;
    let again = interference_matrix(&sae_back, &stored.features)?;
    ensure!(
        again.values.data().iter().zip(stored.values.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "interference matrix changed across a round trip"
    );
    ensure!(again.features == stored.features, "feature ids changed");
    Ok(format!("{} files identical across cold and warm reruns; checkpoints bit-exact", before.len()))
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(anyhow!("panicked: {msg}"))
        }
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path().join("run");
    let start = Instant::now();
    let setup = run_pipeline(ExperimentConfig::default(), &root, false).and_then(|report| {
        Ok(Run {
            pipeline: Pipeline::open(ExperimentConfig::default(), &root, false)?,
            root: root.clone(),
            report,
            elapsed: start.elapsed(),
        })
    });
    type Criterion<'a> = (&'a str, Box<dyn Fn(&Run) -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("embedding gradients match finite differences", Box::new(gradients)),
        ("SAE decoder norms, reconstruction and sparsity", Box::new(sae_training)),
        ("oracle agreement", Box::new(oracles)),
        ("no-op interventions", Box::new(no_ops)),
        ("transport maps", Box::new(transport_check)),
        ("interference trend", Box::new(trend)),
        ("self-injection sign test", Box::new(injection)),
        ("neuron polysemanticity groups", Box::new(neurons)),
        ("shared pairs", Box::new(shared_pairs)),
        ("reproducibility", Box::new(|run: &Run| reproducibility(run, tmp.path()))),
    ];
    let mut failed = 0;
    match &setup {
        Ok(run) => {
            println!("pipeline finished in {:.1}s", run.elapsed.as_secs_f64());
            for (i, (name, check)) in criteria.iter().enumerate() {
                match guarded(|| check(run)) {
                    Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL {:>2} {name}: {e:#}", i + 1);
                    }
                }
            }
        }
        Err(e) => {
            for (i, (name, _)) in criteria.iter().enumerate() {
                failed += 1;
                println!("FAIL {:>2} {name}: pipeline failed: {e}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
