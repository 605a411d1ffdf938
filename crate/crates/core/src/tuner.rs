//! Mixture-weight tuning with a margin ranking loss.
//!
//! For a gold plot `z` and a hypothesis `ẑ` decoded with the current weights,
//! each compared prefix pair contributes
//!
//! ```text
//! L = max(0, margin − (S(x, z_<i) − S(x, ẑ_<i)))
//! ```
//!
//! and, while `L > 0`, moves `λ_j` by `lr · (a_j(x, z_<i) − a_j(x, ẑ_<i))`.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{open_session, Decoder, MixtureWeights, PrefixScorer};
use crate::error::{Error, Result};
use crate::lm::{CondSeqLM, SamplerConfig, EOS};
use crate::metrics::{entities_per_plot, fmt_opt, vocab_token_ratio};
use crate::negatives::Aspect;
use crate::plot::parse_plot;
use crate::seed::index_seed;

pub fn margin_ranking_loss(s_gold: f64, s_hyp: f64, margin: f64) -> f64 {
    (margin - (s_gold - s_hyp)).max(0.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Compare every prefix length.
    #[default]
    EveryToken,
    /// Compare complete sequences only.
    PerSample,
}

/// Base log-probability and rescorer outputs of one prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixFeatures {
    pub logp: f64,
    pub aspects: Vec<f64>,
}

impl PrefixFeatures {
    pub fn score(&self, lambda: &[f64]) -> f64 {
        let mut s = self.logp;
        for (l, a) in lambda.iter().zip(&self.aspects) {
            s += l * a;
        }
        s
    }
}

/// A gold/hypothesis prefix comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingPair {
    pub gold: PrefixFeatures,
    pub hyp: PrefixFeatures,
}

impl RankingPair {
    pub fn loss(&self, lambda: &[f64], margin: f64) -> f64 {
        margin_ranking_loss(self.gold.score(lambda), self.hyp.score(lambda), margin)
    }

    /// dL/dλ; zero where the hinge is inactive.
    pub fn gradient(&self, lambda: &[f64], margin: f64) -> Vec<f64> {
        if self.loss(lambda, margin) > 0.0 {
            self.gold.aspects.iter().zip(&self.hyp.aspects).map(|(g, h)| -(g - h)).collect()
        } else {
            vec![0.0; lambda.len()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub margin: f64,
    pub granularity: Granularity,
    /// Decode hypotheses once with the initial weights instead of every epoch.
    pub frozen_hypotheses: bool,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            lr: 0.001,
            epochs: 1,
            margin: 0.0,
            granularity: Granularity::EveryToken,
            frozen_hypotheses: false,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub weights: Vec<f64>,
    /// Mean hinge loss over all comparisons of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Features of every prefix `seq[..i]` for `i` in `0..=len`; the full
/// sequence also carries the `<EOS>` term.
fn prefix_features(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer],
    prompt: &str,
    seq: &[String],
) -> Result<Vec<PrefixFeatures>> {
    let mut sessions: Vec<_> = scorers.iter().map(|s| open_session(*s, prompt)).collect();
    let mut hist = lm.history::<&str>(prompt, &[]);
    let mut logp = 0.0;
    let mut out = Vec::with_capacity(seq.len() + 1);
    for i in 0..=seq.len() {
        let dist = lm.distribution_ids(&hist);
        let aspects = sessions.iter_mut().map(|s| s.score(&seq[..i])).collect::<Result<Vec<_>>>()?;
        let terminal = if i == seq.len() { lm.token_prob(&dist, EOS).ln() } else { 0.0 };
        out.push(PrefixFeatures {
            logp: logp + terminal,
            aspects,
        });
        if i < seq.len() {
            logp += lm.token_prob(&dist, &seq[i]).ln();
            hist.push(lm.token_id(&seq[i]));
        }
    }
    Ok(out)
}

/// Comparisons for one sample. Prefix lengths run over `1..=max(|z|, |ẑ|)`,
/// clamping the shorter sequence at its full length.
pub fn ranking_pairs(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer],
    prompt: &str,
    gold: &[String],
    hyp: &[String],
    granularity: Granularity,
) -> Result<Vec<RankingPair>> {
    let g = prefix_features(lm, scorers, prompt, gold)?;
    let h = prefix_features(lm, scorers, prompt, hyp)?;
    let longest = gold.len().max(hyp.len());
    let lengths: Vec<usize> = match granularity {
        Granularity::EveryToken => (1..=longest.max(1)).collect(),
        Granularity::PerSample => vec![longest],
    };
    Ok(lengths
        .into_iter()
        .map(|i| RankingPair {
            gold: g[i.min(gold.len())].clone(),
            hyp: h[i.min(hyp.len())].clone(),
        })
        .collect())
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn decode_all(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer],
    lambda: &[f64],
    prompts: &[&str],
    cfg: &SamplerConfig,
) -> Result<Vec<Vec<String>>> {
    let d = Decoder::new(lm, scorers.to_vec(), lambda.to_vec())?;
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let c = SamplerConfig {
                seed: index_seed(cfg.seed, i as u64),
                ..*cfg
            };
            d.generate(p, &c).map(|(z, _)| z)
        })
        .collect()
}

/// Learn λ from `(prompt, gold plot)` pairs, starting at zero. Hypotheses are
/// decoded in parallel at the start of each epoch; updates are applied
/// sequentially in sample order. Sample `i` is decoded with seed
/// `index_seed(cfg.seed, i)` in every epoch.
pub fn tune_weights(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer],
    validation: &[(String, String)],
    cfg: &TuneConfig,
) -> Result<TuneResult> {
    if validation.is_empty() {
        return Err(Error::Empty("tuning needs a nonempty validation set".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Config("tuning learning rate must be positive".into()));
    }
    cfg.sampler.validate()?;
    let prompts: Vec<&str> = validation.iter().map(|(p, _)| p.as_str()).collect();
    let golds: Vec<Vec<String>> = validation.iter().map(|(_, z)| tokens(z)).collect();
    let mut lambda = vec![0.0; scorers.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut frozen: Option<Vec<Vec<RankingPair>>> = None;
    // every epoch reuses the same sampling seeds, so hypotheses change only
    // through the weights
    let sampler = SamplerConfig {
        seed: cfg.seed,
        ..cfg.sampler
    };
    for _ in 0..cfg.epochs {
        let pairs = match &frozen {
            Some(p) => p.clone(),
            None => {
                let hyps = decode_all(lm, scorers, &lambda, &prompts, &sampler)?;
                let pairs: Vec<Vec<RankingPair>> = (0..validation.len())
                    .into_par_iter()
                    .map(|i| ranking_pairs(lm, scorers, prompts[i], &golds[i], &hyps[i], cfg.granularity))
                    .collect::<Result<_>>()?;
                if cfg.frozen_hypotheses {
                    frozen = Some(pairs.clone());
                }
                pairs
            }
        };
        let (mut total, mut n) = (0.0, 0usize);
        for pair in pairs.iter().flatten() {
            let loss = pair.loss(&lambda, cfg.margin);
            total += loss;
            n += 1;
            if loss > 0.0 {
                for (l, (g, h)) in lambda.iter_mut().zip(pair.gold.aspects.iter().zip(&pair.hyp.aspects)) {
                    *l += cfg.lr * (g - h);
                }
            }
        }
        epoch_losses.push(total / n.max(1) as f64);
    }
    Ok(TuneResult {
        weights: lambda,
        epoch_losses,
    })
}

/// Fraction of samples whose hypothesis scores strictly above the gold plot.
pub fn ranking_accuracy_with(
    decoder: &Decoder<'_>,
    eval: &[(String, String)],
    hypotheses: &[Vec<String>],
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Empty("ranking accuracy needs samples".into()));
    }
    if eval.len() != hypotheses.len() {
        return Err(Error::Mismatch("one hypothesis per sample is required".into()));
    }
    let wins: Vec<bool> = eval
        .par_iter()
        .zip(hypotheses)
        .map(|((prompt, gold), hyp)| {
            let g = decoder.combined_score(prompt, &tokens(gold), true)?;
            let h = decoder.combined_score(prompt, hyp, true)?;
            Ok(h > g)
        })
        .collect::<Result<_>>()?;
    Ok(wins.iter().filter(|w| **w).count() as f64 / wins.len() as f64)
}

pub fn ranking_accuracy(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer],
    lambda: &[f64],
    eval: &[(String, String)],
    sampler: &SamplerConfig,
) -> Result<f64> {
    let prompts: Vec<&str> = eval.iter().map(|(p, _)| p.as_str()).collect();
    let hyps = decode_all(lm, scorers, lambda, &prompts, sampler)?;
    ranking_accuracy_with(&Decoder::new(lm, scorers.to_vec(), lambda.to_vec())?, eval, &hyps)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSubset {
    pub name: String,
    pub aspects: Vec<Aspect>,
}

/// All five rescorers, all but intra, then each alone.
pub fn default_subsets() -> Vec<AblationSubset> {
    let mut out = vec![
        AblationSubset {
            name: "all5".into(),
            aspects: Aspect::ALL.to_vec(),
        },
        AblationSubset {
            name: "all4-intra".into(),
            aspects: Aspect::ALL.into_iter().filter(|a| *a != Aspect::Intra).collect(),
        },
    ];
    out.extend(Aspect::ALL.iter().map(|a| AblationSubset {
        name: a.name().into(),
        aspects: vec![*a],
    }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: String,
    pub ranking_accuracy: f64,
    pub vocab_token_ratio: Option<f64>,
    pub entities_per_plot: Option<f64>,
    pub weights: MixtureWeights,
}

pub const ABLATION_COLUMNS: [&str; 4] = ["subset", "RA", "V:T", "Entities"];

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = ABLATION_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{}\t{}\n",
            r.subset,
            r.ranking_accuracy,
            fmt_opt(r.vocab_token_ratio),
            fmt_opt(r.entities_per_plot)
        ));
    }
    out
}

/// Tune and evaluate each subset of rescorers. `scorers[i]` serves aspect
/// `Aspect::ALL[i]`.
pub fn run_ablations(
    lm: &CondSeqLM,
    scorers: &[&dyn PrefixScorer; 5],
    subsets: &[AblationSubset],
    validation: &[(String, String)],
    eval: &[(String, String)],
    cfg: &TuneConfig,
) -> Result<Vec<AblationRow>> {
    if subsets.is_empty() {
        return Err(Error::Empty("no ablation subsets".into()));
    }
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let unique: HashSet<Aspect> = subset.aspects.iter().copied().collect();
        if subset.aspects.is_empty() || unique.len() != subset.aspects.len() {
            return Err(Error::Config(format!("subset `{}` must list distinct aspects", subset.name)));
        }
        let chosen: Vec<&dyn PrefixScorer> = subset.aspects.iter().map(|a| scorers[a.index()]).collect();
        let tuned = tune_weights(lm, &chosen, validation, cfg)?;
        let mut weights = MixtureWeights::default();
        for (a, w) in subset.aspects.iter().zip(&tuned.weights) {
            weights.set(*a, *w);
        }
        let sampler = SamplerConfig {
            seed: index_seed(cfg.seed, u64::MAX),
            ..cfg.sampler
        };
        let prompts: Vec<&str> = eval.iter().map(|(p, _)| p.as_str()).collect();
        let hyps = decode_all(lm, &chosen, &tuned.weights, &prompts, &sampler)?;
        let decoder = Decoder::new(lm, chosen.clone(), tuned.weights.clone())?;
        let ra = ranking_accuracy_with(&decoder, eval, &hyps)?;
        let plots: Vec<_> = hyps.iter().filter_map(|h| parse_plot(&h.join(" ")).ok()).collect();
        rows.push(AblationRow {
            subset: subset.name.clone(),
            ranking_accuracy: ra,
            vocab_token_ratio: vocab_token_ratio(&hyps),
            entities_per_plot: entities_per_plot(&plots),
            weights,
        });
    }
    Ok(rows)
}
