//! Rescored plot decoding.
//!
//! At each step the base LM proposes its top-k next tokens. Each candidate
//! extension `z` is scored
//!
//! ```text
//! S(x, z) = Σ_i log p(z_i | z_<i, x) + Σ_j λ_j · a_j(x, z)
//! ```
//!
//! and one candidate is sampled from softmax(S / T). The prefix log-probability
//! is shared by all candidates, so sampling uses `log p(c | z, x) + Σ λ_j a_j`.
//! With every λ at zero the choices match [`crate::lm::sample_tokens`] draw
//! for draw.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{sample_index, sample_sequence, sample_tokens, top_k_indices, CondSeqLM, SamplerConfig, EOS};
use crate::negatives::{join_context, split_first_sentence, Aspect, EOT};
use crate::rescorer::{input_tokens, IncrementalLinear, NgramRescorer, Scorer};
use crate::seed::index_seed;

/// λ per aspect, in the fixed order inter, intra, verb, entity, relevance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub inter: f64,
    pub intra: f64,
    pub verb: f64,
    pub entity: f64,
    pub relevance: f64,
}

impl MixtureWeights {
    pub fn from_array(v: [f64; 5]) -> Self {
        MixtureWeights {
            inter: v[0],
            intra: v[1],
            verb: v[2],
            entity: v[3],
            relevance: v[4],
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.inter, self.intra, self.verb, self.entity, self.relevance]
    }

    pub fn get(&self, a: Aspect) -> f64 {
        self.to_array()[a.index()]
    }

    pub fn set(&mut self, a: Aspect, value: f64) {
        let mut v = self.to_array();
        v[a.index()] = value;
        *self = Self::from_array(v);
    }

    pub fn for_aspects(&self, aspects: &[Aspect]) -> Vec<f64> {
        aspects.iter().map(|a| self.get(*a)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    /// `+log p + Σ λ a`, higher is better.
    #[default]
    HigherIsBetter,
    /// `−log p + Σ λ a`, the objective read character for character.
    Literal,
}

/// Rescorer applied to a generated prefix.
pub trait PrefixScorer: Send + Sync {
    fn score_prefix(&self, prompt: &str, prefix: &[String]) -> Result<f64>;

    /// Stateful scorer for one prompt, for scorers that can reuse work between
    /// related prefixes. `None` falls back to [`Self::score_prefix`].
    fn session<'a>(&'a self, _prompt: &'a str) -> Option<Box<dyn ScoreSession + 'a>> {
        None
    }
}

pub trait ScoreSession {
    fn score(&mut self, prefix: &[String]) -> Result<f64>;
}

struct Stateless<'a> {
    scorer: &'a dyn PrefixScorer,
    prompt: &'a str,
}

impl ScoreSession for Stateless<'_> {
    fn score(&mut self, prefix: &[String]) -> Result<f64> {
        self.scorer.score_prefix(self.prompt, prefix)
    }
}

pub fn open_session<'a>(scorer: &'a dyn PrefixScorer, prompt: &'a str) -> Box<dyn ScoreSession + 'a> {
    scorer
        .session(prompt)
        .unwrap_or_else(|| Box::new(Stateless { scorer, prompt }))
}

/// The `(context, candidate)` pair a rescorer of `aspect` sees for a prefix,
/// laid out like its training examples.
pub fn aspect_pair(aspect: Aspect, prompt: &str, prefix: &[String]) -> (String, String) {
    match aspect {
        Aspect::Inter | Aspect::Intra | Aspect::Verb => (prompt.to_owned(), prefix.join(" ")),
        Aspect::Entity => match prefix.split_last() {
            Some((last, head)) => (join_context(prompt, head), last.clone()),
            None => (join_context(prompt, &[]), String::new()),
        },
        Aspect::Relevance => {
            let (first, rest) = split_first_sentence(prefix);
            (join_context(prompt, first), rest.join(" "))
        }
    }
}

/// Adapts a pairwise [`Scorer`] to prefixes of one aspect.
pub struct AspectScorer {
    pub aspect: Aspect,
    pub scorer: Arc<dyn Scorer>,
}

impl PrefixScorer for AspectScorer {
    fn score_prefix(&self, prompt: &str, prefix: &[String]) -> Result<f64> {
        let (context, candidate) = aspect_pair(self.aspect, prompt, prefix);
        self.scorer.score(&context, &candidate)
    }
}

/// N-gram rescorer for one aspect with an incremental session.
pub struct NgramPrefixScorer {
    pub aspect: Aspect,
    pub model: Arc<NgramRescorer>,
}

impl NgramPrefixScorer {
    fn stream(&self, prompt: &str, prefix: &[String]) -> Vec<String> {
        let (context, candidate) = aspect_pair(self.aspect, prompt, prefix);
        input_tokens(&context, &candidate).into_iter().map(str::to_owned).collect()
    }
}

impl PrefixScorer for NgramPrefixScorer {
    fn score_prefix(&self, prompt: &str, prefix: &[String]) -> Result<f64> {
        Ok(self.model.score_tokens(&self.stream(prompt, prefix)))
    }

    fn session<'a>(&'a self, prompt: &'a str) -> Option<Box<dyn ScoreSession + 'a>> {
        Some(Box::new(NgramSession {
            scorer: self,
            prompt,
            cache: IncrementalLinear::new(&self.model),
        }))
    }
}

struct NgramSession<'a> {
    scorer: &'a NgramPrefixScorer,
    prompt: &'a str,
    cache: IncrementalLinear<'a>,
}

impl ScoreSession for NgramSession<'_> {
    fn score(&mut self, prefix: &[String]) -> Result<f64> {
        let stream = self.scorer.stream(self.prompt, prefix);
        Ok(self.cache.score(&stream))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub candidates: Vec<String>,
    pub base_logp: Vec<f64>,
    /// `aspect_scores[c][j]` is scorer `j` on the prefix extended by candidate `c`.
    pub aspect_scores: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
    pub chosen: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<StepTrace>,
}

impl DecodeTrace {
    /// Sum of the base log-probabilities of the chosen tokens.
    pub fn chosen_logp(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| {
                let i = s.candidates.iter().position(|c| *c == s.chosen).unwrap_or(0);
                s.base_logp[i]
            })
            .sum()
    }
}

/// Base LM plus weighted rescorers.
pub struct Decoder<'a> {
    pub lm: &'a CondSeqLM,
    pub scorers: Vec<&'a dyn PrefixScorer>,
    pub weights: Vec<f64>,
    pub convention: SignConvention,
}

impl<'a> Decoder<'a> {
    pub fn new(lm: &'a CondSeqLM, scorers: Vec<&'a dyn PrefixScorer>, weights: Vec<f64>) -> Result<Self> {
        if scorers.len() != weights.len() {
            return Err(Error::Mismatch(format!(
                "{} mixture weights for {} scorers",
                weights.len(),
                scorers.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("mixture weights must be finite".into()));
        }
        Ok(Decoder {
            lm,
            scorers,
            weights,
            convention: SignConvention::HigherIsBetter,
        })
    }

    pub fn naive(lm: &'a CondSeqLM) -> Self {
        Decoder {
            lm,
            scorers: Vec::new(),
            weights: Vec::new(),
            convention: SignConvention::HigherIsBetter,
        }
    }

    pub fn with_convention(mut self, convention: SignConvention) -> Self {
        self.convention = convention;
        self
    }

    fn lm_term(&self, logp: f64) -> f64 {
        match self.convention {
            SignConvention::HigherIsBetter => logp,
            SignConvention::Literal => -logp,
        }
    }

    fn bonus(&self, a: &[f64]) -> f64 {
        let mut b = 0.0;
        for (l, v) in self.weights.iter().zip(a) {
            b += l * v;
        }
        b
    }

    /// Rescorer outputs on a prefix, in scorer order.
    pub fn aspect_scores(&self, prompt: &str, prefix: &[String]) -> Result<Vec<f64>> {
        self.scorers.iter().map(|s| s.score_prefix(prompt, prefix)).collect()
    }

    /// `S(prompt, prefix)`. A terminal prefix also scores the closing `<EOS>`.
    pub fn combined_score(&self, prompt: &str, prefix: &[String], terminal: bool) -> Result<f64> {
        let logp = if terminal {
            self.lm.log_prob_tokens(prompt, prefix)
        } else {
            prefix_log_prob(self.lm, prompt, prefix)
        };
        Ok(self.lm_term(logp) + self.bonus(&self.aspect_scores(prompt, prefix)?))
    }

    /// Pick the next token after `prefix`. `prefix_logp` is the base
    /// log-probability of `prefix`, used only for the traced scores.
    pub fn rescored_step(
        &self,
        sessions: &mut [Box<dyn ScoreSession + '_>],
        prompt: &str,
        prefix: &mut Vec<String>,
        prefix_logp: f64,
        cfg: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepTrace> {
        let dist = self.lm.next_token_distribution(prompt, prefix);
        let cands = top_k_indices(&dist, cfg.k);
        let mut step = StepTrace {
            candidates: Vec::with_capacity(cands.len()),
            base_logp: Vec::with_capacity(cands.len()),
            aspect_scores: Vec::with_capacity(cands.len()),
            combined: Vec::with_capacity(cands.len()),
            chosen: String::new(),
        };
        let mut logits = Vec::with_capacity(cands.len());
        for &i in &cands {
            let tok = self.lm.support_token(i);
            let logp = dist[i].ln();
            let terminal = tok == EOS;
            if !terminal {
                prefix.push(tok.to_owned());
            }
            let scored: Result<Vec<f64>> = sessions.iter_mut().map(|s| s.score(prefix)).collect();
            if !terminal {
                prefix.pop();
            }
            let a = scored?;
            let bonus = self.bonus(&a);
            logits.push(self.lm_term(logp) + bonus);
            step.combined.push(self.lm_term(prefix_logp + logp) + bonus);
            step.candidates.push(tok.to_owned());
            step.base_logp.push(logp);
            step.aspect_scores.push(a);
        }
        let pick = sample_index(&logits, cfg.temperature, rng);
        step.chosen = step.candidates[pick].clone();
        Ok(step)
    }

    /// Generate plot tokens for one prompt. Stops at `<EOS>` or `max_len`.
    pub fn generate(&self, prompt: &str, cfg: &SamplerConfig) -> Result<(Vec<String>, DecodeTrace)> {
        cfg.validate()?;
        if self.scorers.is_empty() {
            return Ok((sample_tokens(self.lm, prompt, cfg)?, DecodeTrace::default()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sessions: Vec<Box<dyn ScoreSession + '_>> =
            self.scorers.iter().map(|s| open_session(*s, prompt)).collect();
        let mut prefix = Vec::new();
        let mut logp = 0.0;
        let mut trace = DecodeTrace::default();
        while prefix.len() < cfg.max_len {
            let step = self.rescored_step(&mut sessions, prompt, &mut prefix, logp, cfg, &mut rng)?;
            let i = step.candidates.iter().position(|c| *c == step.chosen).unwrap_or(0);
            logp += step.base_logp[i];
            let done = step.chosen == EOS;
            if !done {
                prefix.push(step.chosen.clone());
            }
            trace.steps.push(step);
            if done {
                break;
            }
        }
        Ok((prefix, trace))
    }

    /// Generate for many prompts in parallel; prompt `i` uses seed
    /// `index_seed(cfg.seed, i)`.
    pub fn generate_all(&self, prompts: &[String], cfg: &SamplerConfig) -> Result<Vec<(Vec<String>, DecodeTrace)>> {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let c = SamplerConfig {
                    seed: index_seed(cfg.seed, i as u64),
                    ..*cfg
                };
                self.generate(p, &c)
            })
            .collect()
    }

    /// Full-sequence alternative to per-token rescoring: sample `n` naive
    /// hypotheses and keep the one with the highest terminal score.
    pub fn rerank(&self, prompt: &str, n: usize, cfg: &SamplerConfig) -> Result<Vec<String>> {
        let mut best: Option<(f64, Vec<String>)> = None;
        for i in 0..n.max(1) {
            let c = SamplerConfig {
                seed: index_seed(cfg.seed, i as u64),
                ..*cfg
            };
            let hyp = sample_tokens(self.lm, prompt, &c)?;
            let s = self.combined_score(prompt, &hyp, true)?;
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, hyp));
            }
        }
        Ok(best.map(|(_, h)| h).unwrap_or_default())
    }
}

/// `Σ_i log p(z_i | z_<i, x)` without the closing `<EOS>` term.
pub fn prefix_log_prob<S: AsRef<str>>(lm: &CondSeqLM, prompt: &str, prefix: &[S]) -> f64 {
    let mut hist = lm.history::<&str>(prompt, &[]);
    let mut total = 0.0;
    for tok in prefix {
        let dist = lm.distribution_ids(&hist);
        total += lm.token_prob(&dist, tok.as_ref()).ln();
        hist.push(lm.token_id(tok.as_ref()));
    }
    total
}

pub fn combined_score(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer],
    lambda: &[f64],
    prompt: &str,
    prefix: &[String],
) -> Result<f64> {
    Decoder::new(lm, scorers.to_vec(), lambda.to_vec())?.combined_score(prompt, prefix, true)
}

pub fn generate_plot(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer],
    lambda: &[f64],
    prompt: &str,
    cfg: &SamplerConfig,
) -> Result<(String, DecodeTrace)> {
    let (tokens, trace) = Decoder::new(lm, scorers.to_vec(), lambda.to_vec())?.generate(prompt, cfg)?;
    Ok((tokens.join(" "), trace))
}

/// Conditioning stream of the story model.
pub fn story_conditioning(prompt: &str, plot: &str) -> String {
    if plot.trim().is_empty() {
        prompt.trim().to_owned()
    } else {
        format!("{} {EOT} {}", prompt.trim(), plot.trim())
    }
}

pub fn generate_story(story_lm: &CondSeqLM, prompt: &str, plot: &str, cfg: &SamplerConfig) -> Result<String> {
    sample_sequence(story_lm, &story_conditioning(prompt, plot), cfg)
}

#[cfg(test)]
pub(crate) mod test_scorers {
    use super::*;

    /// Scorer defined by a closure over the prefix.
    pub struct FnScorer<F>(pub F);

    impl<F> PrefixScorer for FnScorer<F>
    where
        F: Fn(&str, &[String]) -> f64 + Send + Sync,
    {
        fn score_prefix(&self, prompt: &str, prefix: &[String]) -> Result<f64> {
            Ok((self.0)(prompt, prefix))
        }
    }

    pub fn constant(v: f64) -> FnScorer<impl Fn(&str, &[String]) -> f64 + Send + Sync> {
        FnScorer(move |_: &str, _: &[String]| v)
    }

    pub fn ends_with(tok: &'static str) -> FnScorer<impl Fn(&str, &[String]) -> f64 + Send + Sync> {
        FnScorer(move |_: &str, p: &[String]| if p.last().is_some_and(|t| t == tok) { 1.0 } else { 0.0 })
    }
}
