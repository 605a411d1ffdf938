//! Positive/negative training pairs for the five plot rescorers.
//!
//! Event negatives permute material inside a gold plot (whole sentences,
//! events within a sentence, or verbs within a sentence), the entity negative
//! swaps the id following an `ent` marker and the relevance negative pairs a
//! prompt with another record's plot.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plot::{serialize_plot, Plot, ENTITY_MARKER, SENTENCE_SEP};
use crate::seed::index_seed;

/// Joins the prompt and the plot in every rescorer input.
pub const EOT: &str = "<EOT>";

/// Resampling budget for shuffles that happen to reproduce the input.
pub const MAX_SHUFFLE_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Inter,
    Intra,
    Verb,
    Entity,
    Relevance,
}

impl Aspect {
    /// Fixed order used for mixture weights and reports.
    pub const ALL: [Aspect; 5] = [
        Aspect::Inter,
        Aspect::Intra,
        Aspect::Verb,
        Aspect::Entity,
        Aspect::Relevance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Inter => "inter",
            Aspect::Intra => "intra",
            Aspect::Verb => "verb",
            Aspect::Entity => "entity",
            Aspect::Relevance => "relevance",
        }
    }

    pub fn index(self) -> usize {
        Aspect::ALL.iter().position(|a| *a == self).unwrap_or(0)
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aspect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown aspect `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RescorerExample {
    pub aspect: Aspect,
    pub context: String,
    pub positive: String,
    pub negative: String,
}

impl RescorerExample {
    pub fn tsv_line(&self) -> String {
        let clean = |s: &str| s.replace(['\t', '\n'], " ");
        format!(
            "{}\t{}\t{}\t{}",
            self.aspect,
            clean(&self.context),
            clean(&self.positive),
            clean(&self.negative)
        )
    }
}

fn no_negative(what: &str) -> Error {
    Error::NoNegativePossible(what.to_owned())
}

/// Draw candidate negatives until one differs from the input.
fn resample<F>(p: &Plot, seed: u64, what: &str, mut draw: F) -> Result<Plot>
where
    F: FnMut(&mut ChaCha8Rng) -> Plot,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SHUFFLE_ATTEMPTS {
        let candidate = draw(&mut rng);
        if candidate != *p {
            return Ok(candidate);
        }
    }
    Err(no_negative(what))
}

fn has_distinct_pair<T: PartialEq>(items: &[T]) -> bool {
    items.iter().any(|x| *x != items[0])
}

/// Permute whole sentences.
pub fn inter_shuffle(p: &Plot, seed: u64) -> Result<Plot> {
    if p.sentences.len() < 2 || !has_distinct_pair(&p.sentences) {
        return Err(no_negative("inter shuffle needs two distinct sentences"));
    }
    resample(p, seed, "inter shuffle", |rng| {
        let mut q = p.clone();
        q.sentences.shuffle(rng);
        q
    })
}

/// Permute the events of every sentence with at least two events, or of one
/// randomly chosen such sentence when `single_sentence` is set.
pub fn intra_shuffle(p: &Plot, seed: u64, single_sentence: bool) -> Result<Plot> {
    let qualifying: Vec<usize> = p
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.events.len() >= 2 && has_distinct_pair(&s.events))
        .map(|(i, _)| i)
        .collect();
    if qualifying.is_empty() {
        return Err(no_negative("intra shuffle needs a sentence with two distinct events"));
    }
    resample(p, seed, "intra shuffle", |rng| {
        let mut q = p.clone();
        if single_sentence {
            let i = qualifying[rng.gen_range(0..qualifying.len())];
            q.sentences[i].events.shuffle(rng);
        } else {
            for &i in &qualifying {
                q.sentences[i].events.shuffle(rng);
            }
        }
        q
    })
}

/// Redistribute V-slot texts within each sentence holding two or more verbs,
/// leaving every argument and the slot layout in place.
pub fn verb_shuffle(p: &Plot, seed: u64) -> Result<Plot> {
    let verb_texts = |q: &Plot, i: usize| -> Vec<Vec<String>> {
        q.sentences[i]
            .events
            .iter()
            .flat_map(|e| e.slots.iter())
            .filter(|s| s.is_verb())
            .map(|s| s.text.clone())
            .collect()
    };
    let qualifying: Vec<usize> = (0..p.sentences.len())
        .filter(|&i| {
            let v = verb_texts(p, i);
            v.len() >= 2 && has_distinct_pair(&v)
        })
        .collect();
    if qualifying.is_empty() {
        return Err(no_negative("verb shuffle needs a sentence with two distinct verbs"));
    }
    resample(p, seed, "verb shuffle", |rng| {
        let mut q = p.clone();
        for &i in &qualifying {
            let mut verbs = verb_texts(&q, i);
            verbs.shuffle(rng);
            let mut it = verbs.into_iter();
            for slot in q.sentences[i]
                .events
                .iter_mut()
                .flat_map(|e| e.slots.iter_mut())
                .filter(|s| s.is_verb())
            {
                if let Some(text) = it.next() {
                    slot.text = text;
                }
            }
        }
        q
    })
}

pub(crate) fn join_context(prompt: &str, tail: &[String]) -> String {
    let mut parts: Vec<&str> = Vec::with_capacity(tail.len() + 2);
    if !prompt.trim().is_empty() {
        parts.push(prompt.trim());
    }
    parts.push(EOT);
    parts.extend(tail.iter().map(String::as_str));
    parts.join(" ")
}

/// Entity examples: context runs through the `ent` marker, the positive is the
/// true id and the negative a uniform draw from `0..=max_id+1` without it.
/// `per_plot` caps the number of sampled occurrences (all when `None`).
pub fn make_entity_examples(
    prompt: &str,
    p: &Plot,
    seed: u64,
    per_plot: Option<usize>,
) -> Vec<RescorerExample> {
    let tokens = p.tokens();
    let mut occurrences: Vec<(usize, u32)> = tokens
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] == ENTITY_MARKER)
        .filter_map(|(i, w)| w[1].parse::<u32>().ok().map(|id| (i, id)))
        .collect();
    let Some(max_id) = occurrences.iter().map(|(_, id)| *id).max() else {
        return Vec::new();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(cap) = per_plot {
        if cap < occurrences.len() {
            occurrences.shuffle(&mut rng);
            occurrences.truncate(cap);
            occurrences.sort_unstable();
        }
    }
    occurrences
        .into_iter()
        .map(|(i, id)| {
            // domain 0..=max_id+1 minus the true id
            let mut neg = rng.gen_range(0..=max_id);
            if neg >= id {
                neg += 1;
            }
            RescorerExample {
                aspect: Aspect::Entity,
                context: join_context(prompt, &tokens[..=i]),
                positive: id.to_string(),
                negative: neg.to_string(),
            }
        })
        .collect()
}

/// Tokens of the first sentence including its `</s>`, and the remainder.
pub fn split_first_sentence(tokens: &[String]) -> (&[String], &[String]) {
    match tokens.iter().position(|t| t == SENTENCE_SEP) {
        Some(i) => tokens.split_at(i + 1),
        None => (tokens, &[]),
    }
}

/// Relevance examples: the context carries the prompt and the first plot
/// sentence, the positive is the rest of the true plot and the negative the
/// rest of another record's plot.
pub fn make_relevance_pairs(corpus: &[(String, Plot)], seed: u64) -> Result<Vec<RescorerExample>> {
    let n = corpus.len();
    if n < 2 {
        return Err(no_negative("relevance pairs need at least two records"));
    }
    let tokens: Vec<Vec<String>> = corpus.iter().map(|(_, p)| p.tokens()).collect();
    let out = (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(index_seed(seed, i as u64));
            let (first, rest) = split_first_sentence(&tokens[i]);
            let positive = rest.join(" ");
            for _ in 0..MAX_SHUFFLE_ATTEMPTS {
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                let negative = split_first_sentence(&tokens[j]).1.join(" ");
                if negative != positive {
                    return Some(RescorerExample {
                        aspect: Aspect::Relevance,
                        context: join_context(&corpus[i].0, first),
                        positive,
                        negative,
                    });
                }
            }
            None
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegativeOptions {
    /// Permute a single qualifying sentence per intra-shuffle negative.
    pub single_sentence: bool,
    /// Cap on entity occurrences sampled per plot.
    pub entity_per_plot: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub examples: Vec<RescorerExample>,
    /// Records that yielded no example.
    pub skipped: usize,
}

/// Examples for one aspect over a `(prompt, plot)` corpus. Event aspects use
/// the prompt as context and full plot strings as candidates.
pub fn build_training_set(
    aspect: Aspect,
    corpus: &[(String, Plot)],
    seed: u64,
    opts: &NegativeOptions,
) -> Result<TrainingSet> {
    if corpus.is_empty() {
        return Ok(TrainingSet::default());
    }
    if aspect == Aspect::Relevance {
        return Ok(match make_relevance_pairs(corpus, seed) {
            Ok(examples) => TrainingSet {
                skipped: corpus.len() - examples.len(),
                examples,
            },
            Err(Error::NoNegativePossible(_)) => TrainingSet {
                examples: Vec::new(),
                skipped: corpus.len(),
            },
            Err(e) => return Err(e),
        });
    }
    let per_record: Vec<Vec<RescorerExample>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, (prompt, plot))| {
            let s = index_seed(seed, i as u64);
            let shuffled = match aspect {
                Aspect::Inter => inter_shuffle(plot, s),
                Aspect::Intra => intra_shuffle(plot, s, opts.single_sentence),
                Aspect::Verb => verb_shuffle(plot, s),
                Aspect::Entity => {
                    return make_entity_examples(prompt, plot, s, opts.entity_per_plot);
                }
                Aspect::Relevance => unreachable!("handled above"),
            };
            match shuffled {
                Ok(neg) => vec![RescorerExample {
                    aspect,
                    context: prompt.clone(),
                    positive: serialize_plot(plot),
                    negative: serialize_plot(&neg),
                }],
                Err(_) => Vec::new(),
            }
        })
        .collect();
    let skipped = per_record.iter().filter(|v| v.is_empty()).count();
    Ok(TrainingSet {
        examples: per_record.into_iter().flatten().collect(),
        skipped,
    })
}
