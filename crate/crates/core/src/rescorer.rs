//! Discriminative plot rescorers.
//!
//! [`NgramRescorer`] is a logistic regression over hashed 1–4-gram counts of
//! `context <EOT> candidate`. Its output is the probability that the candidate
//! is a gold (positive) continuation. [`ExternalScorer`] attaches any other
//! scorer through a line protocol on a child process.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::negatives::{Aspect, RescorerExample, EOT};
use crate::seed::{fnv1a64, fnv1a64_from};

pub const NGRAM_MAX: usize = 4;
pub const DEFAULT_FEATURE_DIM: usize = 1 << 20;
const GRAM_SEPARATOR: u8 = 0x1f;

/// Probability that `candidate` is a positive continuation of `context`.
pub trait Scorer: Send + Sync {
    fn score(&self, context: &str, candidate: &str) -> Result<f64>;
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Token stream scored for a `(context, candidate)` pair.
pub fn input_tokens<'a>(context: &'a str, candidate: &'a str) -> Vec<&'a str> {
    context
        .split_whitespace()
        .chain(std::iter::once(EOT))
        .chain(candidate.split_whitespace())
        .collect()
}

/// Unhashed n-gram counts for `1..=max_n`, keyed by the space-joined gram.
pub fn ngram_counts(tokens: &[&str], max_n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for n in 1..=max_n {
        for w in tokens.windows(n) {
            *out.entry(w.join(" ")).or_insert(0) += 1;
        }
    }
    out
}

/// Hashes n-grams into a fixed number of buckets.
///
/// The bucket of a gram is FNV-1a 64 over the little-endian hash seed followed
/// by the gram's tokens separated by the byte `0x1f`, reduced modulo the
/// dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub max_n: usize,
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer {
            max_n: NGRAM_MAX,
            dim: DEFAULT_FEATURE_DIM,
            hash_seed: 0,
        }
    }
}

impl Featurizer {
    pub fn bucket<S: AsRef<str>>(&self, gram: &[S]) -> usize {
        let mut h = fnv1a64(&self.hash_seed.to_le_bytes());
        for (i, t) in gram.iter().enumerate() {
            if i > 0 {
                h = fnv1a64_from(h, &[GRAM_SEPARATOR]);
            }
            h = fnv1a64_from(h, t.as_ref().as_bytes());
        }
        (h % self.dim as u64) as usize
    }

    /// Number of grams in a stream of `len` tokens.
    pub fn gram_count(&self, len: usize) -> usize {
        (0..len).map(|p| self.max_n.min(p + 1)).sum()
    }

    /// Every count is divided by the square root of the gram total, which
    /// keeps the feature norm roughly constant across input lengths.
    pub fn scale(&self, len: usize) -> f64 {
        match self.gram_count(len) {
            0 => 0.0,
            g => 1.0 / (g as f64).sqrt(),
        }
    }

    /// Sparse scaled hashed counts sorted by bucket. The bias feature is implicit.
    pub fn featurize<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(u32, f64)> {
        let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
        for p in 0..tokens.len() {
            for n in 1..=self.max_n.min(p + 1) {
                let b = self.bucket(&tokens[p + 1 - n..=p]) as u32;
                *acc.entry(b).or_insert(0.0) += 1.0;
            }
        }
        let scale = self.scale(tokens.len());
        acc.into_iter().map(|(b, c)| (b, c * scale)).collect()
    }
}

pub fn featurize(text: &str, featurizer: &Featurizer) -> Vec<(u32, f64)> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    featurizer.featurize(&tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramRescorer {
    pub aspect: Option<Aspect>,
    pub featurizer: Featurizer,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl NgramRescorer {
    pub fn zeros(aspect: Option<Aspect>, featurizer: Featurizer) -> Self {
        NgramRescorer {
            aspect,
            featurizer,
            weights: vec![0.0; featurizer.dim],
            bias: 0.0,
        }
    }

    /// Summed weights of every gram ending at position `p`.
    pub fn contribution_at<S: AsRef<str>>(&self, tokens: &[S], p: usize) -> f64 {
        (1..=self.featurizer.max_n.min(p + 1))
            .map(|n| self.weights[self.featurizer.bucket(&tokens[p + 1 - n..=p])])
            .sum()
    }

    /// Linear score (log-odds) of a token stream.
    pub fn linear<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        self.bias
            + self.featurizer.scale(tokens.len())
                * (0..tokens.len())
                    .map(|p| self.contribution_at(tokens, p))
                    .sum::<f64>()
    }

    pub fn linear_sparse(&self, features: &[(u32, f64)]) -> f64 {
        self.bias
            + features
                .iter()
                .map(|(i, v)| self.weights[*i as usize] * v)
                .sum::<f64>()
    }

    pub fn score_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        sigmoid(self.linear(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile::from(self);
        let json = serde_json::to_string(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&raw)?;
        file.into_model()
    }
}

impl Scorer for NgramRescorer {
    fn score(&self, context: &str, candidate: &str) -> Result<f64> {
        Ok(self.score_tokens(&input_tokens(context, candidate)))
    }
}

/// Prefix-sum cache of per-position contributions, so scoring a stream that
/// shares a prefix with the previously scored one only touches the new tail.
pub struct IncrementalLinear<'m> {
    model: &'m NgramRescorer,
    tokens: Vec<String>,
    cumulative: Vec<f64>,
}

impl<'m> IncrementalLinear<'m> {
    pub fn new(model: &'m NgramRescorer) -> Self {
        IncrementalLinear {
            model,
            tokens: Vec::new(),
            cumulative: vec![0.0],
        }
    }

    pub fn linear(&mut self, seq: &[String]) -> f64 {
        let common = self
            .tokens
            .iter()
            .zip(seq)
            .take_while(|(a, b)| a == b)
            .count();
        self.tokens.truncate(common);
        self.cumulative.truncate(common + 1);
        for tok in &seq[common..] {
            self.tokens.push(tok.clone());
            let p = self.tokens.len() - 1;
            let c = self.model.contribution_at(&self.tokens, p);
            let prev = self.cumulative[p];
            self.cumulative.push(prev + c);
        }
        self.model.bias + self.model.featurizer.scale(seq.len()) * self.cumulative[seq.len()]
    }

    pub fn score(&mut self, seq: &[String]) -> f64 {
        sigmoid(self.linear(seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial step size; epoch `e` uses `lr / sqrt(1 + e)`.
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub hash_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.0,
            epochs: 20,
            l2: 1e-6,
            batch_size: 1,
            seed: 0,
            feature_dim: DEFAULT_FEATURE_DIM,
            hash_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean logistic loss over all training instances after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Pairwise accuracy on the training examples.
    pub train_accuracy: f64,
}

fn logistic_loss(z: f64, label: f64) -> f64 {
    // log(1 + e^{-z}) for label 1, log(1 + e^{z}) for label 0
    let m = if label > 0.5 { -z } else { z };
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

/// Fit a rescorer by seeded mini-batch SGD on the logistic loss. Every example
/// contributes `context ⊕ positive` with label 1 and `context ⊕ negative`
/// with label 0.
pub fn train_classifier(
    examples: &[RescorerExample],
    aspect: Option<Aspect>,
    cfg: &TrainConfig,
) -> Result<(NgramRescorer, TrainReport)> {
    if examples.is_empty() {
        return Err(Error::Empty("no rescorer training examples".into()));
    }
    if cfg.feature_dim == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("feature_dim and batch_size must be positive".into()));
    }
    let featurizer = Featurizer {
        max_n: NGRAM_MAX,
        dim: cfg.feature_dim,
        hash_seed: cfg.hash_seed,
    };
    let instances: Vec<(Vec<(u32, f64)>, f64)> = examples
        .iter()
        .flat_map(|e| {
            [
                (featurizer.featurize(&input_tokens(&e.context, &e.positive)), 1.0),
                (featurizer.featurize(&input_tokens(&e.context, &e.negative)), 0.0),
            ]
        })
        .collect();

    let mut model = NgramRescorer::zeros(aspect, featurizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grad: HashMap<u32, f64> = HashMap::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr / ((1 + epoch) as f64).sqrt();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.clear();
            let mut grad_bias = 0.0;
            for &i in batch {
                let (features, label) = &instances[i];
                let err = sigmoid(model.linear_sparse(features)) - label;
                grad_bias += err;
                for (j, v) in features {
                    *grad.entry(*j).or_insert(0.0) += err * v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (j, g) in &grad {
                let w = &mut model.weights[*j as usize];
                *w -= lr * (g * scale + cfg.l2 * *w);
            }
            model.bias -= lr * grad_bias * scale;
        }
        let loss = instances
            .iter()
            .map(|(f, y)| logistic_loss(model.linear_sparse(f), *y))
            .sum::<f64>()
            / instances.len() as f64;
        epoch_losses.push(loss);
    }
    let train_accuracy = evaluate_accuracy(&model, examples)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}

pub fn score(m: &dyn Scorer, context: &str, candidate: &str) -> Result<f64> {
    m.score(context, candidate)
}

/// Fraction of examples whose positive outscores the negative; ties are wrong.
pub fn evaluate_accuracy(m: &dyn Scorer, examples: &[RescorerExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("no examples to evaluate".into()));
    }
    let mut correct = 0usize;
    for e in examples {
        if m.score(&e.context, &e.positive)? > m.score(&e.context, &e.negative)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub const MODEL_FORMAT: &str = "aristo-ngram-rescorer";
pub const MODEL_VERSION: u32 = 1;

/// On-disk form: weights stored sparsely as `[bucket, weight]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    aspect: Option<Aspect>,
    max_n: usize,
    feature_dim: usize,
    hash_seed: u64,
    bias: f64,
    weights: Vec<(u32, f64)>,
}

impl From<&NgramRescorer> for ModelFile {
    fn from(m: &NgramRescorer) -> Self {
        ModelFile {
            format: MODEL_FORMAT.to_owned(),
            version: MODEL_VERSION,
            aspect: m.aspect,
            max_n: m.featurizer.max_n,
            feature_dim: m.featurizer.dim,
            hash_seed: m.featurizer.hash_seed,
            bias: m.bias,
            weights: m
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<NgramRescorer> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Config(format!(
                "unsupported rescorer model {} v{}",
                self.format, self.version
            )));
        }
        let featurizer = Featurizer {
            max_n: self.max_n,
            dim: self.feature_dim,
            hash_seed: self.hash_seed,
        };
        let mut m = NgramRescorer::zeros(self.aspect, featurizer);
        m.bias = self.bias;
        for (i, w) in self.weights {
            let slot = m
                .weights
                .get_mut(i as usize)
                .ok_or_else(|| Error::Config(format!("weight index {i} out of range")))?;
            *slot = w;
        }
        Ok(m)
    }
}

/// Scorer backed by a child process speaking a line protocol: one
/// `context<TAB>candidate` line in, one probability line out.
pub struct ExternalScorer {
    io: Mutex<ExternalIo>,
}

struct ExternalIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ExternalScorer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().ok_or_else(|| Error::External("no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::External("no stdout".into()))?;
        Ok(ExternalScorer {
            io: Mutex::new(ExternalIo {
                child,
                stdin,
                stdout: BufReader::new(stdout),
            }),
        })
    }
}

fn protocol_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl Scorer for ExternalScorer {
    fn score(&self, context: &str, candidate: &str) -> Result<f64> {
        let mut io = self
            .io
            .lock()
            .map_err(|_| Error::External("scorer lock poisoned".into()))?;
        let line = format!("{}\t{}\n", protocol_field(context), protocol_field(candidate));
        io.stdin
            .write_all(line.as_bytes())
            .and_then(|_| io.stdin.flush())
            .map_err(|e| Error::External(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = io
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::External(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::External("scorer closed its output".into()));
        }
        let p: f64 = reply
            .trim()
            .parse()
            .map_err(|_| Error::External(format!("not a probability: {:?}", reply.trim())))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::External(format!("probability {p} outside [0, 1]")));
        }
        Ok(p)
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}
