// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic corpora with planted concept structure.
//!
//! Each sequence follows a topic: tokens come from the current concept group
//! (mostly walking the group in order, which gives learnable bigrams), filler
//! tokens are sprinkled in, and cross links let a sequence hop between two
//! otherwise unrelated groups. Those hops are the planted interference.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Token 0 never occurs in generated text; it is used as the injection separator.
pub const SEPARATOR_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub name: String,
    pub tokens: Vec<u32>,
    /// Relative probability of starting a sequence in this group.
    pub weight: f64,
}

/// Per-token probability of switching topic between groups `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLink {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub groups: Vec<ConceptGroup>,
    #[serde(default)]
    pub cross_links: Vec<CrossLink>,
    #[serde(default)]
    pub filler_tokens: Vec<u32>,
    #[serde(default)]
    pub filler_rate: f64,
    /// Probability that the next in-group token is the successor of the previous one.
    #[serde(default = "default_chain_prob")]
    pub chain_prob: f64,
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

fn default_chain_prob() -> f64 {
    0.6
}

impl CorpusSpec {
    /// Disjoint groups of consecutive token ids starting at 1, every other
    /// token as filler, and `n_links` cross links pairing group `2i` with `2i+1`.
    #[allow(clippy::too_many_arguments)]
    pub fn planted(
        vocab_size: usize,
        n_groups: usize,
        group_size: usize,
        n_links: usize,
        link_weight: f64,
        n_sequences: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if 1 + n_groups * group_size > vocab_size {
            return Err(Error::EmptySpec(format!(
                "{n_groups} groups of {group_size} do not fit in a vocabulary of {vocab_size}"
            )));
        }
        let groups = (0..n_groups)
            .map(|g| ConceptGroup {
                name: format!("concept_{g}"),
                tokens: (0..group_size).map(|i| (1 + g * group_size + i) as u32).collect(),
                weight: 1.0,
            })
            .collect();
        let cross_links = (0..n_links.min(n_groups / 2))
            .map(|i| CrossLink {
                a: 2 * i,
                b: 2 * i + 1,
                weight: link_weight,
            })
            .collect();
        let filler_tokens = ((1 + n_groups * group_size) as u32..vocab_size as u32).collect();
        Ok(Self {
            groups,
            cross_links,
            filler_tokens,
            filler_rate: 0.1,
            chain_prob: default_chain_prob(),
            n_sequences,
            seq_len,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(|g| g.tokens.is_empty()) {
            return Err(Error::EmptySpec("need at least one non-empty group".into()));
        }
        if self.n_sequences == 0 || self.seq_len == 0 {
            return Err(Error::EmptySpec("sequence count and length must be >= 1".into()));
        }
        if self.groups.iter().all(|g| g.weight <= 0.0) {
            return Err(Error::EmptySpec("all group weights are zero".into()));
        }
        if self
            .cross_links
            .iter()
            .any(|l| l.a >= self.groups.len() || l.b >= self.groups.len())
        {
            return Err(Error::InvalidArgument("cross link references unknown group".into()));
        }
        Ok(())
    }

    /// Group containing `token`, if any.
    pub fn group_of(&self, token: u32) -> Option<usize> {
        self.groups.iter().position(|g| g.tokens.contains(&token))
    }

    fn pick_group(&self, rng: &mut crate::rng::Rng) -> usize {
        let total: f64 = self.groups.iter().map(|g| g.weight.max(0.0)).sum();
        let mut r = rng.random::<f64>() * total;
        for (i, g) in self.groups.iter().enumerate() {
            r -= g.weight.max(0.0);
            if r < 0.0 {
                return i;
            }
        }
        self.groups.len() - 1
    }

    fn sample_sequence(&self, rng: &mut crate::rng::Rng, len: usize) -> Vec<u32> {
        let mut group = self.pick_group(rng);
        let mut last: Option<usize> = None;
        let mut seq = Vec::with_capacity(len);
        while seq.len() < len {
            if !self.filler_tokens.is_empty() && rng.random::<f64>() < self.filler_rate {
                seq.push(self.filler_tokens[rng.random_range(0..self.filler_tokens.len())]);
                continue;
            }
            let toks = &self.groups[group].tokens;
            let idx = match last {
                Some(k) if rng.random::<f64>() < self.chain_prob => (k + 1) % toks.len(),
                _ => rng.random_range(0..toks.len()),
            };
            seq.push(toks[idx]);
            last = Some(idx);
            for link in &self.cross_links {
                let partner = if link.a == group {
                    link.b
                } else if link.b == group {
                    link.a
                } else {
                    continue;
                };
                if rng.random::<f64>() < link.weight {
                    group = partner;
                    last = None;
                    break;
                }
            }
        }
        seq
    }

    /// Extra sequences from the same process, drawn from an independent stream.
    pub fn sample_prompts(&self, n: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = rng_for(seed, "prompts");
        (0..n)
            .map(|_| {
                let len = rng.random_range(min_len..=max_len.max(min_len));
                self.sample_sequence(&mut rng, len)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Train / held-out split; the held-out slice is the tail.
    pub fn split(&self, holdout_fraction: f64) -> (&[Vec<u32>], &[Vec<u32>]) {
        let n = self.sequences.len();
        let held = ((n as f64) * holdout_fraction).round() as usize;
        let held = held.min(n.saturating_sub(1));
        self.sequences.split_at(n - held)
    }
}

pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "corpus");
    let sequences = (0..spec.n_sequences)
        .map(|_| spec.sample_sequence(&mut rng, spec.seq_len))
        .collect();
    Ok(Corpus { sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_groups(cross: f64) -> CorpusSpec {
        CorpusSpec {
            groups: vec![
                ConceptGroup {
                    name: "a".into(),
                    tokens: vec![1, 2, 3],
                    weight: 1.0,
                },
                ConceptGroup {
                    name: "b".into(),
                    tokens: vec![4, 5, 6],
                    weight: 1.0,
                },
            ],
            cross_links: vec![CrossLink {
                a: 0,
                b: 1,
                weight: cross,
            }],
            filler_tokens: vec![],
            filler_rate: 0.0,
            chain_prob: 0.5,
            n_sequences: 200,
            seq_len: 12,
            seed: 9,
        }
    }

    #[test]
    fn single_group_only() {
        let mut spec = two_groups(0.0);
        spec.groups.truncate(1);
        spec.cross_links.clear();
        let c = synth_corpus(&spec).unwrap();
        assert!(c.sequences.iter().flatten().all(|t| [1, 2, 3].contains(t)));
    }

    #[test]
    fn disjoint_groups_never_mix() {
        let spec = two_groups(0.0);
        let c = synth_corpus(&spec).unwrap();
        for s in &c.sequences {
            let g = spec.group_of(s[0]).unwrap();
            assert!(s.iter().all(|&t| spec.group_of(t) == Some(g)));
        }
    }

    #[test]
    fn empty_spec_rejected() {
        let mut spec = two_groups(0.0);
        spec.groups.clear();
        assert!(matches!(synth_corpus(&spec), Err(Error::EmptySpec(_))));
    }

    #[test]
    fn within_group_bigrams_dominate() {
        let spec = CorpusSpec::planted(256, 16, 10, 4, 0.1, 300, 32, 5).unwrap();
        let c = synth_corpus(&spec).unwrap();
        let (mut within, mut cross) = (0usize, 0usize);
        for s in &c.sequences {
            for w in s.windows(2) {
                match (spec.group_of(w[0]), spec.group_of(w[1])) {
                    (Some(a), Some(b)) if a == b => within += 1,
                    (Some(_), Some(_)) => cross += 1,
                    _ => {}
                }
            }
        }
        assert!(within > 5 * cross, "within {within} cross {cross}");
        assert!(cross > 0);
        assert!(!c.sequences.iter().flatten().any(|&t| t == SEPARATOR_TOKEN));
    }

    #[test]
    fn deterministic() {
        let spec = CorpusSpec::planted(256, 8, 10, 2, 0.1, 20, 16, 5).unwrap();
        assert_eq!(synth_corpus(&spec).unwrap(), synth_corpus(&spec).unwrap());
    }
}
