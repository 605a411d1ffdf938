//! Conditional n-gram language model and its top-k sampler.
//!
//! A training pair `(conditioning, target)` is flattened into the stream
//! `<BOS>^(n-1) conditioning <EOT> target <EOS>` and every n-gram up to the
//! model order is counted. Prediction interpolates each order with the one
//! below it:
//!
//! ```text
//! p_1(w)   = (c(w) + k) / (N + k·|S|)
//! p_o(w|h) = (c(h w) + β·p_{o-1}(w|h')) / (c(h) + β)
//! ```
//!
//! where `S` is the predictable support (every vocabulary token except
//! `<BOS>` and `<EOT>`), `h'` drops the oldest token of `h`, and `β` is the
//! backoff mass (0.4). Unknown tokens are read as `<unk>`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::UNK;
use crate::negatives::EOT;

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_ADD_K: f64 = 0.01;
pub const BACKOFF: f64 = 0.4;
pub const PLOT_MAX_LEN: usize = 120;
pub const STORY_MAX_LEN: usize = 250;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondSeqLM {
    order: usize,
    k_add: f64,
    backoff: f64,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// Vocabulary ids that can be predicted, in vocabulary (lexicographic) order.
    support: Vec<u32>,
    support_pos: Vec<Option<usize>>,
    /// `levels[o - 1]` maps contexts of length `o - 1` to continuation counts.
    levels: Vec<HashMap<Vec<u32>, ContextCounts>>,
}

fn specials() -> [&'static str; 4] {
    [BOS, EOT, EOS, UNK]
}

fn is_predictable(tok: &str) -> bool {
    tok != BOS && tok != EOT
}

impl CondSeqLM {
    /// Model with the given vocabulary and no observations.
    pub fn empty<S: AsRef<str>>(vocab: &[S], order: usize, k_add: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("language model order must be at least 1".into()));
        }
        if !(k_add > 0.0 && k_add.is_finite()) {
            return Err(Error::Config("add-k smoothing must be positive".into()));
        }
        let mut words: Vec<String> = vocab.iter().map(|s| s.as_ref().to_owned()).collect();
        words.extend(specials().iter().map(|s| s.to_string()));
        words.sort();
        words.dedup();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut support = Vec::new();
        let mut support_pos = vec![None; words.len()];
        for (i, w) in words.iter().enumerate() {
            if is_predictable(w) {
                support_pos[i] = Some(support.len());
                support.push(i as u32);
            }
        }
        Ok(CondSeqLM {
            order,
            k_add,
            backoff: BACKOFF,
            vocab: words,
            index,
            support,
            support_pos,
            levels: vec![HashMap::new(); order],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k_add(&self) -> f64 {
        self.k_add
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Tokens a distribution ranges over, in the order of its entries.
    pub fn support(&self) -> impl Iterator<Item = &str> + '_ {
        self.support.iter().map(|&i| self.vocab[i as usize].as_str())
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    pub fn support_token(&self, i: usize) -> &str {
        &self.vocab[self.support[i] as usize]
    }

    pub fn token_id(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or_else(|| self.index[UNK])
    }

    fn stream(&self, conditioning: &str, target: &[&str]) -> Vec<u32> {
        let bos = self.index[BOS];
        let mut ids = vec![bos; self.order - 1];
        ids.extend(conditioning.split_whitespace().map(|t| self.token_id(t)));
        ids.push(self.index[EOT]);
        ids.extend(target.iter().map(|t| self.token_id(t)));
        ids
    }

    /// Record one observation of `next` after `history` at every order.
    pub fn observe(&mut self, history: &[u32], next: u32) {
        if self.support_pos[next as usize].is_none() {
            return;
        }
        for o in 1..=self.order {
            let need = o - 1;
            let ctx = history[history.len().saturating_sub(need)..].to_vec();
            if ctx.len() < need {
                continue;
            }
            let entry = self.levels[o - 1].entry(ctx).or_default();
            entry.total += 1;
            *entry.next.entry(next).or_insert(0) += 1;
        }
    }

    fn observe_stream(&mut self, ids: &[u32]) {
        for p in (self.order - 1)..ids.len() {
            self.observe(&ids[..p], ids[p]);
        }
    }

    /// Dense next-token distribution over [`Self::support`] given raw ids of
    /// the history.
    pub fn distribution_ids(&self, history: &[u32]) -> Vec<f64> {
        let s = self.support.len() as f64;
        let uni = self.levels[0].get(&Vec::new());
        let n = uni.map_or(0, |c| c.total) as f64;
        let denom = n + self.k_add * s;
        let mut p = vec![self.k_add / denom; self.support.len()];
        if let Some(c) = uni {
            for (&w, &cnt) in &c.next {
                if let Some(i) = self.support_pos[w as usize] {
                    p[i] = (cnt as f64 + self.k_add) / denom;
                }
            }
        }
        for o in 2..=self.order {
            let need = o - 1;
            if history.len() < need {
                break;
            }
            let Some(c) = self.levels[o - 1].get(&history[history.len() - need..]) else {
                continue;
            };
            let denom = c.total as f64 + self.backoff;
            for v in p.iter_mut() {
                *v *= self.backoff / denom;
            }
            for (&w, &cnt) in &c.next {
                if let Some(i) = self.support_pos[w as usize] {
                    p[i] += cnt as f64 / denom;
                }
            }
        }
        p
    }

    /// History ids for `conditioning <EOT> prefix`.
    pub fn history<S: AsRef<str>>(&self, conditioning: &str, prefix: &[S]) -> Vec<u32> {
        let prefix: Vec<&str> = prefix.iter().map(|s| s.as_ref()).collect();
        self.stream(conditioning, &prefix)
    }

    pub fn next_token_distribution<S: AsRef<str>>(&self, conditioning: &str, prefix: &[S]) -> Vec<f64> {
        self.distribution_ids(&self.history(conditioning, prefix))
    }

    pub fn token_prob(&self, dist: &[f64], tok: &str) -> f64 {
        let i = self.support_pos[self.token_id(tok) as usize];
        i.map_or(0.0, |i| dist[i])
    }

    /// Natural-log probability of `target` followed by `<EOS>`.
    pub fn log_prob(&self, conditioning: &str, target: &str) -> f64 {
        let toks: Vec<&str> = target.split_whitespace().collect();
        self.log_prob_tokens(conditioning, &toks)
    }

    pub fn log_prob_tokens<S: AsRef<str>>(&self, conditioning: &str, target: &[S]) -> f64 {
        let mut hist = self.history::<&str>(conditioning, &[]);
        let mut total = 0.0;
        for tok in target.iter().map(|t| t.as_ref()).chain(std::iter::once(EOS)) {
            let dist = self.distribution_ids(&hist);
            total += self.token_prob(&dist, tok).ln();
            hist.push(self.token_id(tok));
        }
        total
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&LmFile::from(self))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: LmFile = serde_json::from_str(&raw)?;
        file.into_model()
    }
}

/// Count n-grams over every flattened pair. Fails on an empty corpus.
pub fn train_lm<A: AsRef<str>, B: AsRef<str>>(
    pairs: &[(A, B)],
    order: usize,
    k_add: f64,
) -> Result<CondSeqLM> {
    if pairs.is_empty() {
        return Err(Error::Empty("language model corpus is empty".into()));
    }
    let mut vocab: Vec<&str> = Vec::new();
    for (c, t) in pairs {
        vocab.extend(c.as_ref().split_whitespace());
        vocab.extend(t.as_ref().split_whitespace());
    }
    vocab.sort_unstable();
    vocab.dedup();
    let mut lm = CondSeqLM::empty(&vocab, order, k_add)?;
    let eos = lm.index[EOS];
    for (c, t) in pairs {
        let target: Vec<&str> = t.as_ref().split_whitespace().collect();
        let mut ids = lm.stream(c.as_ref(), &target);
        ids.push(eos);
        lm.observe_stream(&ids);
    }
    Ok(lm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k: 5,
            temperature: 0.7,
            max_len: PLOT_MAX_LEN,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of the `k` largest entries, ties broken by lower index.
pub fn top_k_indices(dist: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    let k = k.min(dist.len());
    let by_rank = |a: &usize, b: &usize| dist[*b].total_cmp(&dist[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, by_rank);
        idx.truncate(k);
    }
    idx.sort_by(by_rank);
    idx
}

/// The `k` most probable next tokens with their natural-log probabilities.
pub fn topk_candidates<S: AsRef<str>>(
    m: &CondSeqLM,
    conditioning: &str,
    prefix: &[S],
    k: usize,
) -> Vec<(String, f64)> {
    let dist = m.next_token_distribution(conditioning, prefix);
    top_k_indices(&dist, k)
        .into_iter()
        .map(|i| (m.support_token(i).to_owned(), dist[i].ln()))
        .collect()
}

/// Draw from softmax(logits / temperature) with a single uniform variate.
pub fn sample_index<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Naive top-k/temperature sampling. The returned tokens exclude `<EOS>`.
pub fn sample_tokens(m: &CondSeqLM, conditioning: &str, cfg: &SamplerConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hist = m.history::<&str>(conditioning, &[]);
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let dist = m.distribution_ids(&hist);
        let cands = top_k_indices(&dist, cfg.k);
        let logits: Vec<f64> = cands.iter().map(|&i| dist[i].ln()).collect();
        let pick = cands[sample_index(&logits, cfg.temperature, &mut rng)];
        let tok = m.support_token(pick);
        if tok == EOS {
            break;
        }
        hist.push(m.support[pick]);
        out.push(tok.to_owned());
    }
    Ok(out)
}

pub fn sample_sequence(m: &CondSeqLM, conditioning: &str, cfg: &SamplerConfig) -> Result<String> {
    Ok(sample_tokens(m, conditioning, cfg)?.join(" "))
}

pub const LM_FORMAT: &str = "aristo-cond-ngram-lm";
pub const LM_VERSION: u32 = 1;

type LevelRow = (Vec<u32>, Vec<(u32, u64)>);

#[derive(Serialize, Deserialize)]
struct LmFile {
    format: String,
    version: u32,
    order: usize,
    k_add: f64,
    backoff: f64,
    vocab: Vec<String>,
    /// `(context ids, [(next id, count)])` per order, sorted for stable output.
    levels: Vec<Vec<LevelRow>>,
}

impl From<&CondSeqLM> for LmFile {
    fn from(m: &CondSeqLM) -> Self {
        let levels = m
            .levels
            .iter()
            .map(|level| {
                let mut rows: Vec<LevelRow> = level
                    .iter()
                    .map(|(ctx, c)| {
                        let mut next: Vec<(u32, u64)> = c.next.iter().map(|(a, b)| (*a, *b)).collect();
                        next.sort_unstable();
                        (ctx.clone(), next)
                    })
                    .collect();
                rows.sort_unstable();
                rows
            })
            .collect();
        LmFile {
            format: LM_FORMAT.into(),
            version: LM_VERSION,
            order: m.order,
            k_add: m.k_add,
            backoff: m.backoff,
            vocab: m.vocab.clone(),
            levels,
        }
    }
}

impl LmFile {
    fn into_model(self) -> Result<CondSeqLM> {
        if self.format != LM_FORMAT || self.version != LM_VERSION {
            return Err(Error::Config(format!("unsupported LM file {} v{}", self.format, self.version)));
        }
        if self.levels.len() != self.order {
            return Err(Error::Config("LM file order does not match its count tables".into()));
        }
        let mut m = CondSeqLM::empty(&self.vocab, self.order, self.k_add)?;
        if m.vocab != self.vocab {
            return Err(Error::Config("LM vocabulary is not sorted or lacks special tokens".into()));
        }
        m.backoff = self.backoff;
        let n = m.vocab.len() as u32;
        for (o, rows) in self.levels.into_iter().enumerate() {
            for (ctx, next) in rows {
                if ctx.len() != o || ctx.iter().chain(next.iter().map(|(w, _)| w)).any(|&i| i >= n) {
                    return Err(Error::Config("malformed LM count table".into()));
                }
                let total = next.iter().map(|(_, c)| c).sum();
                m.levels[o].insert(
                    ctx,
                    ContextCounts {
                        total,
                        next: next.into_iter().collect(),
                    },
                );
            }
        }
        Ok(m)
    }
}
