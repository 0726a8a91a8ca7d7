// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token cross-entropy training with plain SGD and global-norm clipping.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::{Layout, Model};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    pub seed: u64,
}

fn default_clip() -> f64 {
    1.0
}

fn default_holdout() -> f64 {
    0.1
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.5,
            steps: 500,
            batch: 8,
            clip_norm: default_clip(),
            holdout_fraction: default_holdout(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// Training-batch loss per step.
    pub losses: Vec<f64>,
}

fn check_corpus(model: &Model, seqs: &[Vec<u32>]) -> Result<()> {
    if seqs.is_empty() || seqs.iter().all(|s| s.len() < 2) {
        return Err(Error::EmptyCorpus);
    }
    let vocab = model.config().vocab_size;
    for s in seqs {
        if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::BadToken { token: t, vocab });
        }
    }
    Ok(())
}

/// Inputs and shifted targets, cropped to the context window.
fn example(seq: &[u32], ctx: usize) -> (Vec<usize>, Vec<usize>) {
    let n = seq.len().min(ctx + 1);
    let input = seq[..n - 1].iter().map(|&t| t as usize).collect();
    let target = seq[1..n].iter().map(|&t| t as usize).collect();
    (input, target)
}

/// Mean per-sequence next-token cross-entropy.
pub fn mean_loss(model: &Model, seqs: &[Vec<u32>]) -> Result<f64> {
    check_corpus(model, seqs)?;
    let ctx = model.config().context_length;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let (input, target) = example(s, ctx);
        let mut tape = Tape::new();
        let params = model.param_leaves(&mut tape);
        let tok = tape.gather_rows(params[Layout::TOK_EMB], &input)?;
        let graph = model.build_forward(&mut tape, &params, tok, &[])?;
        let loss = tape.cross_entropy(graph.logits, &target)?;
        total += tape.value(loss).data()[0];
        count += 1;
    }
    Ok(total / count as f64)
}

pub fn train(model: &Model, corpus: &Corpus, hyper: &TrainHyper) -> Result<(Model, TrainReport)> {
    let (train_seqs, heldout) = corpus.split(hyper.holdout_fraction);
    check_corpus(model, train_seqs)?;
    let heldout = if heldout.is_empty() { train_seqs } else { heldout };
    let initial = mean_loss(model, heldout)?;
    let mut model = model.clone();
    let ctx = model.config().context_length;
    let usable: Vec<&Vec<u32>> = train_seqs.iter().filter(|s| s.len() >= 2).collect();
    let mut rng = rng_for(hyper.seed, "train-batches");
    let mut losses = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let mut tape = Tape::new();
        let params = model.param_leaves(&mut tape);
        let mut batch_loss = None;
        for _ in 0..hyper.batch.max(1) {
            let seq = usable[rng.random_range(0..usable.len())];
            let (input, target) = example(seq, ctx);
            let tok = tape.gather_rows(params[Layout::TOK_EMB], &input)?;
            let graph = model.build_forward(&mut tape, &params, tok, &[])?;
            let loss = tape.cross_entropy(graph.logits, &target)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let loss = tape.scale(batch_loss.expect("batch >= 1"), 1.0 / hyper.batch.max(1) as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;

        let grad_list: Vec<_> = params.iter().map(|&p| grads.get(p)).collect();
        let sq: f64 = grad_list
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        let gnorm = sq.sqrt();
        if !gnorm.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let clip = if gnorm > hyper.clip_norm {
            hyper.clip_norm / gnorm
        } else {
            1.0
        };
        for (p, g) in model.params_mut().iter_mut().zip(grad_list) {
            if let Some(g) = g {
                for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= hyper.lr * clip * gv;
                }
            }
        }
    }

    let final_loss = mean_loss(&model, heldout)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: hyper.steps,
            loss: final_loss,
        });
    }
    Ok((
        model,
        TrainReport {
            initial_heldout_loss: initial,
            final_heldout_loss: final_loss,
            losses,
        },
    ))
}
