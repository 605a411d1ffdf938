//! Silver plot extraction from pre-computed SRL frames and coreference
//! clusters, dataset splitting and test-prompt filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plot::{Event, Plot, Role, Sentence, Slot, StopVerbList, ENTITY_MARKER};

/// Half-open token span `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(self) -> usize {
        self.0
    }

    pub fn end(self) -> usize {
        self.1
    }

    pub fn overlaps(self, other: Span) -> bool {
        self.0 < other.1 && other.0 < self.1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SrlFrame {
    pub verb_span: Span,
    pub verb_lemma: String,
    /// Role name (`ARG0` .. `ARG5`, possibly modifiers such as `ARGM-TMP`) to span.
    #[serde(default)]
    pub args: BTreeMap<String, Span>,
}

/// One JSON-lines record of the extraction input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedStory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub prompt: String,
    pub story_tokens: Vec<String>,
    #[serde(default)]
    pub frames: Vec<SrlFrame>,
    /// `(cluster_id, mention spans)` pairs.
    #[serde(default)]
    pub coref_clusters: Vec<(u32, Vec<Span>)>,
    /// Start offset of every sentence; an implicit boundary at 0 is assumed.
    #[serde(default)]
    pub sentence_boundaries: Vec<usize>,
}

impl AnnotatedStory {
    fn label(&self) -> String {
        self.id.clone().unwrap_or_else(|| "<unnamed>".to_owned())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.story_tokens.len();
        let bad = |reason: String| Error::Ingest {
            story: self.label(),
            reason,
        };
        let check = |what: &str, s: Span| {
            if s.0 > s.1 || s.1 > n {
                Err(bad(format!(
                    "{what} span [{}, {}) out of bounds for {n} tokens",
                    s.0, s.1
                )))
            } else {
                Ok(())
            }
        };
        for frame in &self.frames {
            check("verb", frame.verb_span)?;
            for (role, span) in &frame.args {
                check(role, *span)?;
            }
        }
        for (cluster, spans) in &self.coref_clusters {
            for span in spans {
                check(&format!("cluster {cluster} mention"), *span)?;
            }
        }
        for pair in self.sentence_boundaries.windows(2) {
            if pair[0] >= pair[1] {
                return Err(bad("sentence boundaries not strictly increasing".to_owned()));
            }
        }
        if let Some(&last) = self.sentence_boundaries.last() {
            if last > n {
                return Err(bad(format!("sentence boundary {last} beyond {n} tokens")));
            }
        }
        Ok(())
    }

    /// Sentence ranges covering the story.
    fn sentence_ranges(&self) -> Vec<Span> {
        let n = self.story_tokens.len();
        let mut starts: Vec<usize> = self.sentence_boundaries.clone();
        if starts.first() != Some(&0) {
            starts.insert(0, 0);
        }
        starts.dedup();
        let mut out = Vec::with_capacity(starts.len());
        for (i, &s) in starts.iter().enumerate() {
            let e = starts.get(i + 1).copied().unwrap_or(n);
            if s < e || (n == 0 && i == 0) {
                out.push(Span(s, e));
            }
        }
        out
    }
}

const KEPT_ARGS: [(&str, Role); 3] = [("ARG0", Role::A0), ("ARG1", Role::A1), ("ARG2", Role::A2)];

/// Extract a silver plot with the default stop-verb list.
pub fn extract_plot(story: &AnnotatedStory) -> Result<Plot> {
    extract_plot_with(story, &StopVerbList::default())
}

/// Compression and anonymization rules:
/// frames whose lemma or surface verb is a stop verb are dropped, only ARG0–ARG2
/// survive (as `<A0>`–`<A2>`), coreferent mentions overlapping an argument are
/// replaced by `ent k`, events are ordered by verb position and joined by `#`,
/// sentences by `</s>`. Entity ids are numbered by first appearance in the
/// emitted plot, which is the first-mention order restricted to what is kept.
pub fn extract_plot_with(story: &AnnotatedStory, stop: &StopVerbList) -> Result<Plot> {
    story.validate()?;
    let tokens = &story.story_tokens;

    // mention -> cluster position, clusters ordered by first mention
    let mut clusters: Vec<(usize, u32, &Vec<Span>)> = story
        .coref_clusters
        .iter()
        .filter(|(_, spans)| !spans.is_empty())
        .map(|(id, spans)| (spans.iter().map(|s| s.0).min().unwrap_or(0), *id, spans))
        .collect();
    clusters.sort_by_key(|(first, id, _)| (*first, *id));
    let mentions: Vec<(Span, usize)> = clusters
        .iter()
        .enumerate()
        .flat_map(|(k, (_, _, spans))| spans.iter().map(move |s| (*s, k)))
        .filter(|(s, _)| s.0 < s.1)
        .collect();

    let ranges = story.sentence_ranges();
    let mut per_sentence: Vec<Vec<&SrlFrame>> = vec![Vec::new(); ranges.len()];
    for frame in &story.frames {
        let verb_text = tokens[frame.verb_span.0..frame.verb_span.1].join(" ");
        if stop.contains(&frame.verb_lemma) || stop.contains(&verb_text) {
            continue;
        }
        let pos = frame.verb_span.0;
        let idx = ranges
            .iter()
            .position(|r| pos >= r.0 && pos < r.1)
            .unwrap_or(ranges.len().saturating_sub(1));
        if let Some(bucket) = per_sentence.get_mut(idx) {
            bucket.push(frame);
        }
    }

    // Internal cluster indices are provisional; renumbered below.
    let mut sentences = Vec::with_capacity(ranges.len());
    let mut kept = 0usize;
    for frames in per_sentence.iter_mut() {
        frames.sort_by_key(|f| (f.verb_span.0, f.verb_span.1));
        let mut events = Vec::with_capacity(frames.len());
        for frame in frames.iter() {
            let mut slots: Vec<(usize, usize, Slot)> = vec![(
                frame.verb_span.0,
                Role::V as usize,
                Slot {
                    role: Some(Role::V),
                    text: tokens[frame.verb_span.0..frame.verb_span.1].to_vec(),
                },
            )];
            for (name, role) in KEPT_ARGS {
                if let Some(span) = frame.args.get(name) {
                    slots.push((
                        span.0,
                        role as usize,
                        Slot {
                            role: Some(role),
                            text: anonymize(tokens, *span, &mentions),
                        },
                    ));
                }
            }
            slots.sort_by_key(|(start, order, _)| (*start, *order));
            events.push(Event::new(slots.into_iter().map(|(_, _, s)| s).collect()));
            kept += 1;
        }
        sentences.push(Sentence::new(events));
    }
    if kept == 0 {
        return Ok(Plot::default());
    }
    let mut plot = Plot::new(sentences, true);
    renumber_entities(&mut plot);
    Ok(plot)
}

/// Provisional marker written during anonymization so renumbering never
/// confuses a literal `ent 3` in story text with a cluster reference.
const PENDING: &str = "\u{1}ent";

fn anonymize(tokens: &[String], span: Span, mentions: &[(Span, usize)]) -> Vec<String> {
    let mut out = Vec::new();
    let mut p = span.0;
    while p < span.1 {
        let covering = mentions
            .iter()
            .filter(|(m, _)| m.0 <= p && p < m.1)
            .min_by_key(|(m, k)| (m.0, std::cmp::Reverse(m.1), *k));
        match covering {
            Some((m, k)) => {
                out.push(PENDING.to_owned());
                out.push(k.to_string());
                p = m.1.min(span.1);
            }
            None => {
                out.push(tokens[p].clone());
                p += 1;
            }
        }
    }
    out
}

fn renumber_entities(plot: &mut Plot) {
    let mut map: HashMap<String, String> = HashMap::new();
    for sentence in &mut plot.sentences {
        for event in &mut sentence.events {
            for slot in &mut event.slots {
                let mut i = 0;
                while i < slot.text.len() {
                    if slot.text[i] == PENDING && i + 1 < slot.text.len() {
                        let next = map.len().to_string();
                        let id = map.entry(slot.text[i + 1].clone()).or_insert(next).clone();
                        slot.text[i] = ENTITY_MARKER.to_owned();
                        slot.text[i + 1] = id;
                        i += 2;
                    } else {
                        i += 1;
                    }
                }
            }
        }
    }
}

/// Fractions of the five splits. Defaults: 65/10/10 language-model
/// train/valid/test, 10 rescorer training, 5 mixture-weight training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub lm_train: f64,
    pub valid: f64,
    pub test: f64,
    pub rescorer_train: f64,
    pub mixture_train: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            lm_train: 0.65,
            valid: 0.10,
            test: 0.10,
            rescorer_train: 0.10,
            mixture_train: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 5] {
        [
            self.lm_train,
            self.valid,
            self.test,
            self.rescorer_train,
            self.mixture_train,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("split fractions must be non-negative".into()));
        }
        let total: f64 = f.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {total}, expected 1.0"
            )));
        }
        Ok(())
    }

    /// Subset sizes for `n` records by largest-remainder rounding. Ties in the
    /// remainder go to the earlier split.
    pub fn sizes(&self, n: usize) -> [usize; 5] {
        let f = self.fractions();
        let quotas: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
        let mut sizes = [0usize; 5];
        for (s, q) in sizes.iter_mut().zip(&quotas) {
            *s = (q + 1e-9).floor() as usize;
        }
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..5).collect();
        let rem = |i: usize| ((quotas[i] - sizes[i] as f64) * 1e9).round() as i64;
        order.sort_by(|&a, &b| rem(b).cmp(&rem(a)).then(a.cmp(&b)));
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits<T> {
    pub lm_train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
    pub rescorer_train: Vec<T>,
    pub mixture_train: Vec<T>,
}

impl<T> Splits<T> {
    pub fn named(&self) -> [(&'static str, &Vec<T>); 5] {
        [
            ("lm_train", &self.lm_train),
            ("valid", &self.valid),
            ("test", &self.test),
            ("rescorer_train", &self.rescorer_train),
            ("mixture_train", &self.mixture_train),
        ]
    }
}

/// Seeded shuffle followed by a contiguous partition.
pub fn split_dataset<T>(items: Vec<T>, spec: &SplitSpec) -> Result<Splits<T>> {
    spec.validate()?;
    let sizes = spec.sizes(items.len());
    let mut items = items;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    items.shuffle(&mut rng);
    let mut it = items.into_iter();
    let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<T>>();
    Ok(Splits {
        lm_train: take(sizes[0]),
        valid: take(sizes[1]),
        test: take(sizes[2]),
        rescorer_train: take(sizes[3]),
        mixture_train: take(sizes[4]),
    })
}

/// A small English stopword list for prompt filtering.
pub const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "of", "to", "in", "on", "at", "by", "for",
    "with", "from", "as", "is", "are", "was", "were", "be", "been", "it", "its", "this", "that",
    "these", "those", "i", "you", "he", "she", "we", "they", "me", "him", "her", "us", "them",
    "my", "your", "his", "our", "their", "what", "which", "who", "whom", "so", "than", "too",
    "very", "can", "will", "just", "do", "does", "did", "not", "no", "all", "any", "some",
    "there", "here", "when", "where", "why", "how", "into", "about", "up", "down", "out",
];

pub fn content_tokens(prompt: &str, stopwords: &HashSet<String>) -> BTreeSet<String> {
    prompt
        .split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty() && !stopwords.contains(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<String>,
    pub excluded: Vec<String>,
    pub excluded_pct: f64,
}

/// Drop test prompts whose content-token set equals that of some training
/// prompt (Jaccard similarity 1). Prompts with no content tokens are kept.
pub fn filter_test_prompts(
    test: &[String],
    train: &[String],
    stopwords: &HashSet<String>,
) -> FilterReport {
    let seen: HashSet<BTreeSet<String>> = train
        .iter()
        .map(|p| content_tokens(p, stopwords))
        .filter(|s| !s.is_empty())
        .collect();
    let (mut kept, mut excluded) = (Vec::new(), Vec::new());
    for prompt in test {
        let set = content_tokens(prompt, stopwords);
        if !set.is_empty() && seen.contains(&set) {
            excluded.push(prompt.clone());
        } else {
            kept.push(prompt.clone());
        }
    }
    let excluded_pct = if test.is_empty() {
        0.0
    } else {
        100.0 * excluded.len() as f64 / test.len() as f64
    };
    FilterReport {
        kept,
        excluded,
        excluded_pct,
    }
}

pub const STORY_TOKEN_LIMIT: usize = 1000;

pub fn truncate_story<T: Clone>(tokens: &[T], limit: usize) -> Vec<T> {
    tokens[..tokens.len().min(limit)].to_vec()
}

pub const UNK: &str = "<unk>";

/// Optional rare-word pass: tokens seen fewer than `min_count` times across
/// the corpus become `<unk>`. Off by default in the pipeline.
pub fn replace_rare(corpus: &mut [Vec<String>], min_count: usize) {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus.iter() {
        for t in text {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let rare: HashSet<String> = counts
        .into_iter()
        .filter(|(_, c)| *c < min_count)
        .map(|(t, _)| t.to_owned())
        .collect();
    for text in corpus.iter_mut() {
        for t in text.iter_mut() {
            if rare.contains(t) {
                *t = UNK.to_owned();
            }
        }
    }
}
