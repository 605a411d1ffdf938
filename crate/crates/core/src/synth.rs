//! Synthetic annotated corpora with planted regularities.
//!
//! Every theme owns a script: a fixed sequence of (verb, object) steps. A
//! story tells a contiguous window of its theme's script, one verb-first
//! sentence per step, so a plot sentence reads
//! `<V> verb <A0> ent k <A1> the object </s>` and the boundary 4-gram
//! `object </s> <V> next-verb` reveals the script order. Objects belong to one
//! theme, while scripts share a small verb pool, which makes an n-gram model
//! drift between themes and repeat itself. Some sentences join two steps with
//! "and", giving two-event sentences. Annotations include a dropped stop-verb
//! frame, a dropped modifier argument and pronoun coreference, so extraction
//! exercises its rules.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::extract::{AnnotatedStory, Span, SrlFrame};
use crate::plot::{parse_plot, Plot};

const VERBS: [&str; 24] = [
    "chased", "found", "built", "broke", "carried", "painted", "hid", "opened", "climbed", "burned",
    "buried", "fixed", "stole", "sold", "washed", "guarded", "lifted", "dropped", "traded", "watched",
    "crossed", "sealed", "mended", "followed",
];

const OBJECTS: [&str; 64] = [
    "fox", "key", "boat", "lamp", "gate", "map", "sword", "tower", "river", "crown", "letter", "wheel",
    "bridge", "ring", "drum", "cart", "rope", "stone", "mirror", "bell", "door", "cloak", "horn", "seed",
    "chest", "wall", "flag", "kettle", "ladder", "coin", "shield", "wagon", "anchor", "basket", "candle", "compass",
    "feather", "hammer", "helmet", "lantern", "mask", "needle", "oar", "pearl", "quill", "saddle", "scroll", "statue",
    "tent", "torch", "trumpet", "vase", "violin", "well", "whistle", "window", "anvil", "banner", "barrel", "blanket",
    "bottle", "bucket", "cage", "chain",
];

const THEMES: [&str; 12] = [
    "castle", "harbor", "forest", "desert", "village", "mountain", "island", "market", "temple", "mine",
    "swamp", "city",
];

const ADJECTIVES: [&str; 24] = [
    "strange", "quiet", "ancient", "broken", "golden", "hidden", "lonely", "bright", "cold", "distant",
    "secret", "burning", "silent", "wild", "lost", "final", "hollow", "frozen", "sunken", "forgotten",
    "restless", "crimson", "gentle", "endless",
];

const NAMES: [(&str, &str); 8] = [
    ("Mara", "she"),
    ("Tomas", "he"),
    ("Ilse", "she"),
    ("Oren", "he"),
    ("Vera", "she"),
    ("Bram", "he"),
    ("Nadia", "she"),
    ("Emil", "he"),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub records: usize,
    pub themes: usize,
    pub script_len: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            records: 500,
            themes: 6,
            script_len: 10,
            min_sentences: 3,
            max_sentences: 6,
            seed: 0,
        }
    }
}

/// A theme's script of (verb, object) steps. Verbs come from a shared pool;
/// objects are disjoint across themes while the object list lasts.
pub type Script = Vec<(&'static str, &'static str)>;

pub fn scripts(cfg: &SynthConfig) -> Vec<Script> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005c_1a97);
    let mut objects = OBJECTS.to_vec();
    objects.shuffle(&mut rng);
    let mut next = 0;
    let mut out = Vec::new();
    for _ in 0..cfg.themes.min(THEMES.len()) {
        let mut verbs = VERBS.to_vec();
        verbs.shuffle(&mut rng);
        let script: Script = (0..cfg.script_len)
            .map(|i| (verbs[i % verbs.len()], objects[(next + i) % objects.len()]))
            .collect();
        next += cfg.script_len;
        out.push(script);
    }
    out
}

struct StoryBuilder {
    tokens: Vec<String>,
    frames: Vec<SrlFrame>,
    clusters: BTreeMap<u32, Vec<Span>>,
    boundaries: Vec<usize>,
}

impl StoryBuilder {
    fn push(&mut self, words: &[&str]) -> Span {
        let s = self.tokens.len();
        self.tokens.extend(words.iter().map(|w| w.to_string()));
        Span(s, self.tokens.len())
    }

    fn mention(&mut self, cluster: u32, words: &[&str]) -> Span {
        let span = self.push(words);
        self.clusters.entry(cluster).or_default().push(span);
        span
    }
}

fn story_for(index: usize, steps: &[(&str, &str)], theme: &str, rng: &mut ChaCha8Rng) -> AnnotatedStory {
    let mut cast: Vec<(&str, &str)> = NAMES.to_vec();
    cast.shuffle(rng);
    let cast = &cast[..2];
    let mut b = StoryBuilder {
        tokens: Vec::new(),
        frames: Vec::new(),
        clusters: BTreeMap::new(),
        boundaries: Vec::new(),
    };
    let mut joined = false;
    for (i, (verb, object)) in steps.iter().enumerate() {
        if joined {
            b.push(&["and"]);
        } else if i > 0 {
            b.boundaries.push(b.tokens.len());
        }
        let who = usize::from(rng.gen_bool(0.25));
        let v = b.push(&[verb]);
        let subject_words = if i > 0 && rng.gen_bool(0.3) { cast[who].1 } else { cast[who].0 };
        let a0 = b.mention(who as u32, &[subject_words]);
        let a1 = b.push(&["the", object]);
        let mut args: BTreeMap<String, Span> = [("ARG0".to_owned(), a0), ("ARG1".to_owned(), a1)].into();
        if rng.gen_bool(0.2) {
            let with = b.push(&["with"]);
            let other = b.mention(1 - who as u32, &[cast[1 - who].0]);
            args.insert("ARG2".into(), Span(with.0, other.1));
        }
        if rng.gen_bool(0.2) {
            args.insert("ARGM-TMP".into(), b.push(&["at", "dawn"]));
        }
        b.frames.push(SrlFrame {
            verb_span: v,
            verb_lemma: verb.to_string(),
            args,
        });
        if rng.gen_bool(0.15) {
            b.push(&["and"]);
            let was = b.push(&["was"]);
            let arg = b.push(&["glad"]);
            b.frames.push(SrlFrame {
                verb_span: was,
                verb_lemma: "be".into(),
                args: [("ARG1".to_owned(), arg)].into(),
            });
        }
        joined = !joined && i + 1 < steps.len() && rng.gen_bool(0.3);
        if !joined {
            b.push(&["."]);
        }
    }
    let adj: Vec<&&str> = ADJECTIVES.choose_multiple(rng, 2).collect();
    AnnotatedStory {
        id: Some(format!("synth-{index:05}")),
        prompt: format!("The {} {} {}", adj[0], adj[1], theme),
        story_tokens: b.tokens,
        frames: b.frames,
        coref_clusters: b.clusters.into_iter().collect(),
        sentence_boundaries: b.boundaries,
    }
}

/// Annotated stories following the planted scripts.
pub fn synth_corpus(cfg: &SynthConfig) -> Vec<AnnotatedStory> {
    let scripts = scripts(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.records)
        .map(|i| {
            let t = rng.gen_range(0..scripts.len());
            let max = cfg.max_sentences.min(cfg.script_len);
            let len = rng.gen_range(cfg.min_sentences.min(max)..=max);
            let start = rng.gen_range(0..=cfg.script_len - len);
            story_for(i, &scripts[t][start..start + len], THEMES[t], &mut rng)
        })
        .collect()
}

/// Plots in the synthetic sentence format whose sentences are drawn
/// independently, so their order carries no signal.
pub fn random_plots(n: usize, seed: u64) -> Vec<(String, Plot)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(3..=6);
            let sentences: Vec<String> = (0..len)
                .map(|_| {
                    format!(
                        "<V> {} <A0> ent {} <A1> the {} </s>",
                        VERBS[rng.gen_range(0..VERBS.len())],
                        rng.gen_range(0..2),
                        OBJECTS[rng.gen_range(0..OBJECTS.len())]
                    )
                })
                .collect();
            let plot = parse_plot(&sentences.join(" ")).expect("generated plot is well formed");
            (format!("random prompt {i}"), plot)
        })
        .collect()
}

/// Sentence-level detokenization of a synthetic story into text lines.
pub fn story_text(story: &AnnotatedStory) -> String {
    story.story_tokens.join(" ")
}
