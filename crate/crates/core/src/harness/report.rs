// SPDX-License-Identifier: MIT OR Apache-2.0

//! Aggregate reports recomputed from the emitted outcome logs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{files, Family, NeuronMode, NeuronRecord, OutcomeRecord, Pipeline, SaeSummary, Stage, Variant};
use crate::error::{Error, Result};
use crate::evaluation::{bin_summary, bootstrap_mean_ci, mean, sign_test_p, BinSummary, BinValues, Metric};
use crate::interference::InterferenceBin;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub n: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

fn summarize(values: &[f64], resamples: usize, seed: u64) -> Option<ConditionSummary> {
    if values.is_empty() {
        return None;
    }
    let (ci_lo, ci_hi) = bootstrap_mean_ci(values, resamples, 0.95, seed);
    Some(ConditionSummary {
        n: values.len(),
        mean: mean(values),
        ci_lo,
        ci_hi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: Family,
    pub metric: Metric,
    pub trials: usize,
    /// Trials without a metric value (zero baseline, guard, overlap, ...).
    pub errors: usize,
    /// The target's own direction, gradient or snippet.
    pub original: Option<ConditionSummary>,
    pub bins: BinSummary,
    /// Whether the original mean is at least every bin mean.
    pub original_dominates: bool,
}

/// One-sided sign test on whether self-injection raises `w(Õ, T_f)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub trials: usize,
    pub increases: usize,
    pub decreases: usize,
    pub ties: usize,
    /// `P(X ≥ increases)` for `X ~ Binomial(increases + decreases, 1/2)`.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub degree: usize,
    pub mode: NeuronMode,
    pub scale: f64,
    pub neurons: usize,
    pub n: usize,
    pub delta_c: Option<ConditionSummary>,
    pub delta_w: Option<ConditionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSummary {
    pub qualifying_a: usize,
    pub qualifying_b: usize,
    pub shared: usize,
    pub self_shared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeBrief {
    pub initial_heldout_mse: f64,
    pub final_heldout_mse: f64,
    pub mean_l0: f64,
    pub max_norm_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub families: Vec<FamilyReport>,
    pub injection_sign_test: Option<SignTest>,
    /// Degrees with at least one neuron outcome.
    pub degree_groups: Vec<usize>,
    pub neurons: Vec<NeuronRow>,
    pub shared: SharedSummary,
    pub sae_a: SaeBrief,
    pub sae_b: SaeBrief,
}

impl RunReport {
    pub fn family(&self, family: Family) -> Option<&FamilyReport> {
        self.families.iter().find(|f| f.family == family)
    }
}

/// Bin table and original-condition summary of one steering or injection log.
pub fn family_report(
    family: Family,
    metric: Metric,
    records: &[OutcomeRecord],
    bins: &[InterferenceBin],
    resamples: usize,
    seed: u64,
) -> FamilyReport {
    let original: Vec<f64> = records
        .iter()
        .filter(|r| r.is_original())
        .filter_map(|r| r.value)
        .collect();
    let grouped: Vec<BinValues> = bins
        .iter()
        .map(|b| {
            let label = b.label();
            BinValues {
                values: records
                    .iter()
                    .filter(|r| r.bin.as_deref() == Some(label.as_str()))
                    .filter_map(|r| r.value)
                    .collect(),
                midpoint: b.midpoint(),
                label,
            }
        })
        .collect();
    let summary = bin_summary(&grouped, resamples, seed);
    let original = summarize(&original, resamples, seed);
    let original_dominates = original
        .as_ref()
        .is_some_and(|o| summary.rows.iter().all(|r| o.mean >= r.mean));
    FamilyReport {
        family,
        metric,
        trials: records.len(),
        errors: records.iter().filter(|r| r.value.is_none()).count(),
        original,
        bins: summary,
        original_dominates,
    }
}

/// Sign test over the original-condition injection trials.
pub fn injection_sign_test(records: &[OutcomeRecord]) -> SignTest {
    let mut t = SignTest {
        trials: 0,
        increases: 0,
        decreases: 0,
        ties: 0,
        p_value: 1.0,
    };
    for m in records.iter().filter(|r| r.is_original()).filter_map(|r| r.metrics.as_ref()) {
        t.trials += 1;
        match m.w_after.total_cmp(&m.w_before) {
            std::cmp::Ordering::Greater => t.increases += 1,
            std::cmp::Ordering::Less => t.decreases += 1,
            std::cmp::Ordering::Equal => t.ties += 1,
        }
    }
    t.p_value = sign_test_p(t.increases, t.increases + t.decreases);
    t
}

/// Per degree and scale: masking and amplification deltas.
pub fn neuron_rows(records: &[NeuronRecord], resamples: usize, seed: u64) -> Vec<NeuronRow> {
    let mut groups: BTreeMap<(usize, u64), Vec<&NeuronRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.degree, r.scale.to_bits())).or_default().push(r);
    }
    let mut rows: Vec<NeuronRow> = groups
        .into_values()
        .map(|rs| {
            let dc: Vec<f64> = rs.iter().filter_map(|r| r.metrics.delta_c).collect();
            let dw: Vec<f64> = rs.iter().map(|r| r.metrics.delta_w).collect();
            NeuronRow {
                degree: rs[0].degree,
                mode: rs[0].mode,
                scale: rs[0].scale,
                neurons: rs.iter().map(|r| r.neuron).collect::<BTreeSet<_>>().len(),
                n: rs.len(),
                delta_c: summarize(&dc, resamples, seed),
                delta_w: summarize(&dw, resamples, seed),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.degree.cmp(&b.degree).then(a.scale.total_cmp(&b.scale)));
    rows
}

fn brief(s: &SaeSummary) -> SaeBrief {
    SaeBrief {
        initial_heldout_mse: s.initial_heldout_mse,
        final_heldout_mse: s.final_heldout_mse,
        mean_l0: s.mean_l0,
        max_norm_deviation: s.max_norm_deviation,
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn opt_cells(s: &Option<ConditionSummary>) -> [String; 3] {
    match s {
        Some(s) => [fmt(s.mean), fmt(s.ci_lo), fmt(s.ci_hi)],
        None => [String::new(), String::new(), String::new()],
    }
}

pub(super) fn write_report(p: &Pipeline) -> Result<RunReport> {
    let cfg = p.config();
    let dir = p.dir();
    let (resamples, seed) = (cfg.bootstrap_resamples, cfg.bootstrap_seed);
    let mut families = Vec::new();
    let mut sign = None;
    for family in [Family::Feature, Family::Gradient, Family::Inject] {
        if !dir.exists(&family.outcome_file()) {
            continue;
        }
        let records = p.outcomes(family)?;
        let metric = match family {
            Family::Feature => cfg.steering.metric,
            Family::Gradient => cfg.gradient.metric,
            _ => cfg.injection.metric,
        };
        let fr = family_report(family, metric, &records, &cfg.analysis.bins, resamples, seed);
        let mut rows = Vec::new();
        if let Some(o) = &fr.original {
            rows.push(vec![
                "original".into(),
                String::new(),
                o.n.to_string(),
                fmt(o.mean),
                fmt(o.ci_lo),
                fmt(o.ci_hi),
            ]);
        }
        for r in &fr.bins.rows {
            rows.push(vec![
                r.label.clone(),
                fmt(r.midpoint),
                r.n.to_string(),
                fmt(r.mean),
                fmt(r.ci_lo),
                fmt(r.ci_hi),
            ]);
        }
        dir.write_csv(
            &files::bins_csv(family),
            &["condition", "midpoint", "n", "mean", "ci_lo", "ci_hi"],
            &rows,
        )?;
        if family == Family::Inject {
            sign = Some(injection_sign_test(&records));
        }
        families.push(fr);
    }
    let (neurons, degree_groups) = if dir.exists(&Family::Neuron.outcome_file()) {
        let records = p.neuron_outcomes()?;
        let rows = neuron_rows(&records, resamples, seed);
        let csv: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.degree.to_string(),
                    match r.mode {
                        NeuronMode::Mask => "mask".into(),
                        NeuronMode::Amplify => "amplify".into(),
                    },
                    fmt(r.scale),
                    r.neurons.to_string(),
                    r.n.to_string(),
                ];
                row.extend(opt_cells(&r.delta_c));
                row.extend(opt_cells(&r.delta_w));
                row
            })
            .collect();
        dir.write_csv(
            files::NEURON_CSV,
            &[
                "degree",
                "mode",
                "scale",
                "neurons",
                "n",
                "delta_c_mean",
                "delta_c_ci_lo",
                "delta_c_ci_hi",
                "delta_w_mean",
                "delta_w_ci_lo",
                "delta_w_ci_hi",
            ],
            &csv,
        )?;
        let degrees: BTreeSet<usize> = records.iter().map(|r| r.degree).collect();
        (rows, degrees.into_iter().collect())
    } else {
        (Vec::new(), Vec::new())
    };
    if families.is_empty() && neurons.is_empty() {
        return Err(Error::stage(Stage::Intervene.name(), "no outcome logs to report"));
    }
    let shared = p.shared_pairs()?;
    let sae_a: SaeSummary = dir.read_json(&files::sae_report(Variant::A), Stage::TrainSae)?;
    let sae_b: SaeSummary = dir.read_json(&files::sae_report(Variant::B), Stage::TrainSae)?;
    let report = RunReport {
        run_id: cfg.run_id.clone(),
        families,
        injection_sign_test: sign,
        degree_groups,
        neurons,
        shared: SharedSummary {
            qualifying_a: shared.qualifying_a.len(),
            qualifying_b: shared.qualifying_b.len(),
            shared: shared.pairs.len(),
            self_shared: shared.self_pairs.len(),
        },
        sae_a: brief(&sae_a),
        sae_b: brief(&sae_b),
    };
    dir.write_json(files::REPORT, &report)?;
    Ok(report)
}
