//! End-to-end acceptance suite. Every criterion prints one line with its
//! verdict, detail and runtime; the process fails if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use aristo_core::decoder::{Decoder, PrefixScorer};
use aristo_core::extract::{extract_plot, AnnotatedStory, Span, SrlFrame};
use aristo_core::lm::{sample_sequence, train_lm, CondSeqLM, SamplerConfig};
use aristo_core::metrics::{
    diverse_verb_pct, incorporation_rate, inter_trigram_rep, intra_trigram_rep, vocab_token_ratio,
    IncorporationMode,
};
use aristo_core::negatives::{
    build_training_set, intra_shuffle, inter_shuffle, make_entity_examples, make_relevance_pairs, verb_shuffle,
    Aspect, NegativeOptions,
};
use aristo_core::pipeline::{self, cmd_demo, GenerateIo, GenerateMode, LmStage, PipelineConfig};
use aristo_core::plot::STOP_VERBS;
use aristo_core::rescorer::{evaluate_accuracy, train_classifier, TrainConfig};
use aristo_core::seed::{fnv1a64, splitmix64};
use aristo_core::synth::{random_plots, scripts, synth_corpus, SynthConfig};
use aristo_core::tuner::{tune_weights, PrefixFeatures, RankingPair, TuneConfig};
use aristo_core::{parse_plot, serialize_plot, Error, Event, Plot, Result, Role, Sentence, Slot};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

// ---------------------------------------------------------------- fixtures

/// Opening-example plots and the rescorer training excerpts, with
/// typesetting artifacts normalized (`<<A1>` and `<A1}>` to `<A1>`, `\#` to
/// `#`, missing spaces around tags restored, whitespace collapsed).
const PRINTED_PLOTS: [&str; 12] = [
    "<A1> The universe <V> end </s> </s> <A0> ent 0 <V> see <A1> ent 3 </s> </s> <V> dying <A1> ent 1 # <A0> ent 1 <V> left <A1> ent 0 </s> <A0> the last human <V> live </s> <A1> ent 6 <V> end # <A1> ent 2 <V> come </s> <A1> the last one <V> die </s> <A1> a universe of life <V> left",
    "<A2> The light <V> filled <A2> the sky </s> </s> </s> <A2> A bright flash <V> lit </s> </s> # <V> began <A2> to grow # <A2> the stars <V> grow </s> </s> <V> began <A2> ent 0 <A2> to fade # <A2> The stars <V> fade </s> </s> <A0> ent 2 <V> looked <A2> ent 1 me </s> <V> dying <A2> star",
    "<A1> ent 0 orange glow <V> stood <A2> ent 6 night </s> <A1> ent 3 <V> emanating <A2> ent 3 </s> <A0> ent 2 <V> felt <A1> the cold <A2> ent 2 their backs # <A0> ent 2 <V> faced <A1> ent 3 </s> <A1> ent 2 eyes <V> stayed <A2> upon the saving light # <A0> ent 4 <V> stared </s> ...",
    "<A1> ent 3 <V> emanating <A2> ent 3 </s> <A1> ent 8 <V> grew <A2> quieter , darker </s> <A2> ent 5 some <A1> ent 5 <V> came # <A0> a bearded , old man <V> drawing <A1> ent 11 <A2> close # <A1> ent 13 <V> burn </s> <A0> orange <V> glow # <A1> ent 1 <V> sat # <A1> ent 1 <V> paralyzed </s> ...",
    "<A0> ent 2 <V> felt <A1> the cold <A2> ent 2 their backs # <A0> ent 2 <V> faced <A1> ent 3 </s> <A1> ent 2 eyes <V> stayed <A2> upon the saving light # <A0> ent 4 <V> stared </s> ...",
    "<A0> ent 2 <V> faced <A1> ent 3 # <A0> ent 2 <V> felt <A1> the cold <A2> ent 2 their backs </s> <A0> ent 4 <V> stared # <A1> ent 2 eyes <V> stayed <A2> upon the saving light </s> ...",
    "<A0> ent 9 <V> roamed <A1> the woods # <A0> ent 9 <V> consumed <A1> ent 6 of the night </s> <A0> The wind <V> began <A1> to blow with cold intention # <A1> The wind <V> blow # <A0> ent 7 <V> danced # <A1> ent 7 <V> shimmered # <A1> moonlight <V> began",
    "<A0> ent 9 <V> consumed <A1> the woods # <A0> ent 9 <V> roamed <A1> ent 6 of the night </s> <A0> The wind <V> shimmered <A1> to blow with cold intention # <A1> The wind <V> began # <A0> ent 7 <V> danced # <A1> ent 7 <V> blow # <A1> moonlight <V> began",
    "<A0> ent 0 <V> saw <A1> the light of a campfire </s> <A1> ent 2 <V> laying <A2> there </s> <A1> horses <V> surrounding <A2> ent 2 # <A1> light <V> bouncing </s> <A0> ent",
    "<V> masked <A0> ent 0 # <A0> ent 0 <V> rode </s>",
    "<A0> ent 0 <V> saw <A1> the light of a campfire </s> <A1> ent 2 <V> laying <A2> there </s> <A1> horses <V> surrounding <A2> ent 2 # <A1> light <V> bouncing </s> <A0> ...",
    "<A0> ent 2 <V> asks <A2> ent 0 </s> <A1> I <V> ' <A2> sorry # <A0> I <V> think <A1> ent 0 can help you # <A0> I <V> help <A1> ent 0 </s> </s> <V> colored <A1> toys </s> ...",
];

const WORDS: [&str; 14] = [
    "the", "old", "man", "ent", "0", "3", "12", "light", "...", ",", "fade", "stars", "'", "me",
];

const ROLES: [Role; 4] = [Role::A0, Role::A1, Role::A2, Role::V];

/// Any canonical plot: empty sentences, empty slots and untagged-free events
/// of one to three slots.
fn random_plot(rng: &mut ChaCha8Rng) -> Plot {
    let sentences: Vec<Sentence> = (0..rng.gen_range(0..6))
        .map(|_| {
            let events = (0..rng.gen_range(0..4))
                .map(|_| {
                    Event::new(
                        (0..rng.gen_range(1..4))
                            .map(|_| Slot {
                                role: Some(ROLES[rng.gen_range(0..4)]),
                                text: (0..rng.gen_range(0..4))
                                    .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_owned())
                                    .collect(),
                            })
                            .collect(),
                    )
                })
                .collect();
            Sentence::new(events)
        })
        .collect();
    let closed = match sentences.last() {
        None => false,
        Some(s) if s.events.is_empty() => true,
        Some(_) => rng.gen_bool(0.5),
    };
    Plot::new(sentences, closed)
}

const VERBS: [&str; 3] = ["ran", "saw", "fell"];

/// Plots shaped like extracted ones: one verb per event, arguments drawn from
/// a few entities and words, small enough that degenerate cases occur.
fn extracted_like_plot(rng: &mut ChaCha8Rng) -> Plot {
    let arg = |rng: &mut ChaCha8Rng| -> String {
        if rng.gen_bool(0.6) {
            format!("ent {}", rng.gen_range(0..4))
        } else {
            ["the door", "home", "a fox"][rng.gen_range(0..3)].to_owned()
        }
    };
    let sentences = (0..rng.gen_range(1..5))
        .map(|_| {
            let events = (0..rng.gen_range(1..4))
                .map(|_| {
                    let mut slots = Vec::new();
                    if rng.gen_bool(0.7) {
                        slots.push(Slot::new(Role::A0, &arg(rng)));
                    }
                    slots.push(Slot::new(Role::V, VERBS[rng.gen_range(0..VERBS.len())]));
                    if rng.gen_bool(0.5) {
                        slots.push(Slot::new(Role::A1, &arg(rng)));
                    }
                    Event::new(slots)
                })
                .collect();
            Sentence::new(events)
        })
        .collect();
    Plot::new(sentences, true)
}

fn multiset<T: Ord + Clone>(items: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for t in items {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn synth_pairs(records: usize, seed: u64) -> Vec<(String, Plot)> {
    synth_corpus(&SynthConfig { records, seed, ..SynthConfig::default() })
        .iter()
        .map(|s| (s.prompt.clone(), extract_plot(s).expect("synthetic story extracts")))
        .collect()
}

fn plot_lm(pairs: &[(String, Plot)], order: usize) -> CondSeqLM {
    let text: Vec<(String, String)> = pairs.iter().map(|(p, z)| (p.clone(), serialize_plot(z))).collect();
    train_lm(&text, order, 0.01).expect("plot LM trains")
}

struct FnScorer<F>(F);

impl<F: Fn(&str, &[String]) -> f64 + Send + Sync> PrefixScorer for FnScorer<F> {
    fn score_prefix(&self, prompt: &str, prefix: &[String]) -> Result<f64> {
        Ok((self.0)(prompt, prefix))
    }
}

// ---------------------------------------------------------------- criteria

fn grammar_round_trip() -> Outcome {
    for s in PRINTED_PLOTS {
        let back = parse_plot(s).map(|p| serialize_plot(&p));
        if back.as_deref().ok() != Some(s) {
            return outcome(false, format!("printed plot changed: {s:?} -> {back:?}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let p = random_plot(&mut rng);
        let s = serialize_plot(&p);
        let parsed = match parse_plot(&s) {
            Ok(q) => q,
            Err(e) => return outcome(false, format!("random plot {i} failed to parse: {e}")),
        };
        if serialize_plot(&parsed) != s || parsed != p {
            return outcome(false, format!("random plot {i} did not round-trip: {s:?}"));
        }
    }
    outcome(true, format!("{} printed plots and 1000 random plots byte-identical", PRINTED_PLOTS.len()))
}

fn sentence_strings(p: &Plot) -> BTreeMap<String, usize> {
    multiset(p.sentences.iter().map(|s| serialize_plot(&Plot::new(vec![s.clone()], false))))
}

fn shape(p: &Plot) -> Vec<Vec<Vec<Option<Role>>>> {
    p.sentences
        .iter()
        .map(|s| s.events.iter().map(|e| e.slots.iter().map(|x| x.role).collect()).collect())
        .collect()
}

fn check_shuffle(aspect: Aspect, p: &Plot, seed: u64) -> std::result::Result<bool, String> {
    let distinct = |v: &[String]| v.iter().any(|x| *x != v[0]);
    let sentence_verbs = |s: &Sentence| -> Vec<String> {
        s.events
            .iter()
            .flat_map(|e| &e.slots)
            .filter(|x| x.is_verb())
            .map(|x| x.text.join(" "))
            .collect()
    };
    let degenerate = match aspect {
        Aspect::Inter => {
            let s: Vec<String> = sentence_strings(p).into_keys().collect();
            p.sentences.len() < 2 || s.len() < 2
        }
        Aspect::Intra => !p.sentences.iter().any(|s| {
            s.events.len() >= 2 && s.events.iter().any(|e| *e != s.events[0])
        }),
        Aspect::Verb => !p.sentences.iter().any(|s| {
            let v = sentence_verbs(s);
            v.len() >= 2 && distinct(&v)
        }),
        _ => unreachable!(),
    };
    let result = match aspect {
        Aspect::Inter => inter_shuffle(p, seed),
        Aspect::Intra => intra_shuffle(p, seed, false),
        _ => verb_shuffle(p, seed),
    };
    let neg = match (result, degenerate) {
        (Err(Error::NoNegativePossible(_)), true) => return Ok(true),
        (Err(e), _) => return Err(format!("{aspect}: unexpected error {e} on {p}")),
        (Ok(n), true) => return Err(format!("{aspect}: degenerate plot {p} gave {n}")),
        (Ok(n), false) => n,
    };
    let fail = |what: &str| Err(format!("{aspect}: {what}: {p} -> {neg}"));
    if neg == *p {
        return fail("negative equals positive");
    }
    if multiset(neg.tokens()) != multiset(p.tokens()) {
        return fail("token multiset changed");
    }
    match aspect {
        Aspect::Inter => {
            if sentence_strings(&neg) != sentence_strings(p) {
                return fail("a sentence changed internally");
            }
        }
        Aspect::Intra => {
            let same = neg.sentences.len() == p.sentences.len()
                && neg.sentences.iter().zip(&p.sentences).all(|(a, b)| {
                    multiset(a.events.iter().map(|e| format!("{e:?}")))
                        == multiset(b.events.iter().map(|e| format!("{e:?}")))
                });
            if !same {
                return fail("events left their sentence");
            }
        }
        _ => {
            if shape(&neg) != shape(p) {
                return fail("slot layout changed");
            }
            let args_same = neg
                .sentences
                .iter()
                .flat_map(|s| s.events.iter().flat_map(|e| &e.slots))
                .zip(p.sentences.iter().flat_map(|s| s.events.iter().flat_map(|e| &e.slots)))
                .all(|(a, b)| a.is_verb() || a == b);
            let verbs_same = neg
                .sentences
                .iter()
                .zip(&p.sentences)
                .all(|(a, b)| multiset(sentence_verbs(a)) == multiset(sentence_verbs(b)));
            if !args_same || !verbs_same {
                return fail("something other than a verb moved");
            }
        }
    }
    Ok(false)
}

fn shuffle_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let plots: Vec<Plot> = (0..1000).map(|_| extracted_like_plot(&mut rng)).collect();
    let mut notes = Vec::new();
    for aspect in [Aspect::Inter, Aspect::Intra, Aspect::Verb] {
        let mut degenerate = 0;
        for (i, p) in plots.iter().enumerate() {
            match check_shuffle(aspect, p, i as u64) {
                Ok(d) => degenerate += usize::from(d),
                Err(e) => return outcome(false, e),
            }
        }
        if degenerate == 0 || degenerate == plots.len() {
            return outcome(false, format!("{aspect}: {degenerate} degenerate plots, both cases must occur"));
        }
        notes.push(format!("{aspect} {degenerate} degenerate"));
    }

    let mut entity_examples = 0;
    for (i, p) in plots.iter().enumerate() {
        let tokens = p.tokens();
        let max_id = p.entities().keys().max().copied();
        for ex in make_entity_examples("prompt", p, i as u64, None) {
            entity_examples += 1;
            let cut = ex.context.split_whitespace().count() - 2; // prompt and <EOT>
            let truth = tokens.get(cut).and_then(|t| t.parse::<u32>().ok());
            let neg: u32 = ex.negative.parse().unwrap();
            let ok = ex.context.ends_with(" ent")
                && truth == ex.positive.parse().ok()
                && ex.negative != ex.positive
                && max_id.is_some_and(|m| neg <= m + 1);
            if !ok {
                return outcome(false, format!("entity example {ex:?} on {p}"));
            }
        }
    }
    let corpus: Vec<(String, Plot)> = plots.iter().enumerate().map(|(i, p)| (format!("prompt {i}"), p.clone())).collect();
    let relevance = make_relevance_pairs(&corpus, 3).unwrap();
    if relevance.iter().any(|e| e.negative == e.positive) {
        return outcome(false, "relevance negative equals positive");
    }
    if !matches!(make_relevance_pairs(&corpus[..1], 3), Err(Error::NoNegativePossible(_))) {
        return outcome(false, "single-record relevance corpus did not raise NoNegativePossible");
    }
    notes.push(format!("{entity_examples} entity and {} relevance examples", relevance.len()));
    outcome(true, notes.join(", "))
}

fn rescorer_learnability() -> Outcome {
    let cfg = TrainConfig::default();
    let opts = NegativeOptions::default();
    let inter_accuracy = |train: &[(String, Plot)], held_out: &[(String, Plot)]| -> f64 {
        let tr = build_training_set(Aspect::Inter, train, 11, &opts).unwrap().examples;
        let ho = build_training_set(Aspect::Inter, held_out, 12, &opts).unwrap().examples;
        let (model, _) = train_classifier(&tr, Some(Aspect::Inter), &cfg).unwrap();
        evaluate_accuracy(&model, &ho).unwrap()
    };
    // stories follow fixed scripts: each step's object precedes the next step's verb
    let planted = synth_pairs(1000, 5);
    let planted_acc = inter_accuracy(&planted[..700], &planted[700..]);
    let random: Vec<(String, Plot)> = random_plots(2000, 6);
    let random_acc = inter_accuracy(&random[..1000], &random[1000..]);
    outcome(
        planted_acc >= 0.95 && (0.45..=0.55).contains(&random_acc),
        format!("planted held-out {planted_acc:.4} (>= 0.95), random held-out {random_acc:.4} (0.50 +- 0.05)"),
    )
}

fn decoder_reduction() -> Outcome {
    let pairs = synth_pairs(300, 7);
    let lm = plot_lm(&pairs, 4);
    let wobble = FnScorer(|_: &str, p: &[String]| (p.len() % 7) as f64 / 7.0);
    let last_len = FnScorer(|_: &str, p: &[String]| p.last().map_or(0.0, |t| 1.0 / (1 + t.len()) as f64));
    let d = Decoder::new(&lm, vec![&wobble, &last_len], vec![0.0, 0.0]).unwrap();
    for (i, (prompt, _)) in pairs.iter().take(100).enumerate() {
        let cfg = SamplerConfig { seed: 1000 + i as u64, ..SamplerConfig::default() };
        let rescored = d.generate(prompt, &cfg).unwrap().0.join(" ");
        let naive = sample_sequence(&lm, prompt, &cfg).unwrap();
        if rescored != naive {
            return outcome(false, format!("prompt {i}: {rescored:?} != {naive:?}"));
        }
    }
    outcome(true, "100 prompts byte-identical")
}

/// One-sided P(X >= wins) for X ~ Binomial(n, 1/2).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut term = 0.5f64.powi(n as i32); // C(n, 0) / 2^n
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += term;
        }
        term *= (n - k) as f64 / (k + 1) as f64;
    }
    tail
}

fn steering() -> Outcome {
    let cfg = SynthConfig { records: 300, seed: 8, ..SynthConfig::default() };
    let pairs = synth_pairs(cfg.records, cfg.seed);
    let lm = plot_lm(&pairs, 4);
    let sentinel = scripts(&cfg)[0][0].0;
    let prefers = FnScorer(move |_: &str, p: &[String]| f64::from(p.last().is_some_and(|t| t == sentinel)));
    let count = |lambda: f64, seed: u64| -> usize {
        let d = Decoder::new(&lm, vec![&prefers], vec![lambda]).unwrap();
        let prompt = &pairs[seed as usize % pairs.len()].0;
        let sc = SamplerConfig { seed, ..SamplerConfig::default() };
        d.generate(prompt, &sc).unwrap().0.iter().filter(|t| *t == sentinel).count()
    };
    let (mut wins, mut losses, mut steered, mut base) = (0, 0, 0, 0);
    for seed in 0..100 {
        let (a, b) = (count(50.0, seed), count(0.0, seed));
        steered += a;
        base += b;
        wins += usize::from(a > b);
        losses += usize::from(a < b);
    }
    let p = sign_test_p(wins, wins + losses);
    outcome(
        steered > base && p < 0.01,
        format!("`{sentinel}` {steered} vs {base} tokens, {wins} wins {losses} losses, sign test p={p:.2e}"),
    )
}

fn planted_setup(seed: u64, n: usize) -> (CondSeqLM, Vec<(String, String)>) {
    let verbs = ["ran", "saw", "took", "left", "found", "met", "held", "lost"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(String, String)> = (0..n)
        .map(|i| {
            let sentences: Vec<String> = (0..rng.gen_range(3..6))
                .map(|_| {
                    format!(
                        "<A0> ent {} <V> {} <A1> ent {} </s>",
                        rng.gen_range(0..3),
                        verbs.choose(&mut rng).unwrap(),
                        rng.gen_range(0..3)
                    )
                })
                .collect();
            (format!("prompt {i}"), sentences.join(" "))
        })
        .collect();
    (train_lm(&pairs, 3, 0.01).unwrap(), pairs)
}

fn mixture_weight_recovery() -> Outcome {
    let mut hits = 0;
    let mut detail = Vec::new();
    for seed in 0..10u64 {
        let (lm, val) = planted_setup(seed, 60);
        let gold: HashMap<String, Vec<String>> = val
            .iter()
            .map(|(p, z)| (p.clone(), z.split_whitespace().map(str::to_owned).collect()))
            .collect();
        let planted = FnScorer(move |prompt: &str, prefix: &[String]| {
            let g = &gold[prompt];
            f64::from(prefix.len() <= g.len() && g[..prefix.len()] == *prefix)
        });
        let noise: Vec<_> = (0..4u64)
            .map(|id| {
                FnScorer(move |prompt: &str, prefix: &[String]| {
                    let key = format!("{prompt}\u{1}{}", prefix.join(" "));
                    let h = splitmix64(fnv1a64(key.as_bytes()) ^ (id + 100 * seed));
                    0.4 + 0.2 * (h >> 11) as f64 / (1u64 << 53) as f64
                })
            })
            .collect();
        let slot = seed as usize % 5;
        let mut scorers: Vec<&dyn PrefixScorer> = noise.iter().map(|s| s as &dyn PrefixScorer).collect();
        scorers.insert(slot, &planted);
        let cfg = TuneConfig { seed, ..TuneConfig::default() };
        assert_eq!((cfg.lr, cfg.epochs), (0.001, 1));
        let w = tune_weights(&lm, &scorers, &val, &cfg).unwrap().weights;
        let best = (0..5).max_by(|a, b| w[*a].total_cmp(&w[*b])).unwrap();
        hits += usize::from(best == slot);
        detail.push(format!("{:.4}", w[slot]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1000 {
        let features = |rng: &mut ChaCha8Rng| PrefixFeatures {
            logp: rng.gen_range(-30.0..0.0),
            aspects: (0..5).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let pair = RankingPair { gold: features(&mut rng), hyp: features(&mut rng) };
        let lambda: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let margin = rng.gen_range(0.0..2.0);
        let gap = margin - (pair.gold.score(&lambda) - pair.hyp.score(&lambda));
        if gap.abs() < 1e-3 {
            continue; // finite differences straddle the hinge
        }
        checked += 1;
        let grad = pair.gradient(&lambda, margin);
        let h = 1e-7;
        for j in 0..5 {
            let (mut up, mut down) = (lambda.clone(), lambda.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (pair.loss(&up, margin) - pair.loss(&down, margin)) / (2.0 * h);
            worst = worst.max((fd - grad[j]).abs());
        }
    }
    outcome(
        hits >= 9 && worst < 1e-6,
        format!(
            "planted weight largest in {hits}/10 seeds (planted λ {}), max |fd - grad| {worst:.1e} over 1000 pairs",
            detail.join(" ")
        ),
    )
}

fn metric_oracles() -> Outcome {
    let corpus = |texts: &[&str]| -> Vec<Vec<String>> {
        texts.iter().map(|t| t.split_whitespace().map(str::to_owned).collect()).collect()
    };
    let plot = |s: &str| parse_plot(s).unwrap();
    // hand counts: 3 types over 5 tokens; 1 of 6 verb tokens outside the top five;
    // trigram lists [abc bca cab abc] and [aaa aaa]; LCS([a b c], [c b a]) = 1
    let fixtures: [(&str, Option<f64>, f64); 8] = [
        ("vocab_token 60.0", vocab_token_ratio(&corpus(&["a b a", "a c"])), 60.0),
        ("intra_trigram 25.0", intra_trigram_rep(&corpus(&["a b c a b c"])), 25.0),
        ("intra_trigram 50.0", intra_trigram_rep(&corpus(&["a a a a"])), 50.0),
        ("diverse_verb 16.67", diverse_verb_pct(&corpus(&["a b c", "d e f"])), 100.0 / 6.0),
        (
            "incorporation 33.33",
            incorporation_rate(&plot("<A0> a <V> run <A1> b c </s>"), &["c", "b", "a"], IncorporationMode::Words),
            100.0 / 3.0,
        ),
        ("inter_trigram 100.0", inter_trigram_rep(&corpus(&["a b c d", "a b c d"])), 100.0),
        ("inter_trigram 0.0", inter_trigram_rep(&corpus(&["a b c", "d e f"])), 0.0),
        ("diverse_verb 0.0", diverse_verb_pct(&corpus(&["a b c d e a"])), 0.0),
    ];
    for (name, got, want) in fixtures {
        if !got.is_some_and(|g| (g - want).abs() <= 1e-9) {
            return outcome(false, format!("{name}: got {got:?}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let texts: Vec<Vec<String>> = (0..rng.gen_range(1..5))
            .map(|_| (0..rng.gen_range(1..12)).map(|_| format!("w{}", rng.gen_range(0..8))).collect())
            .collect();
        let doubled: Vec<Vec<String>> = texts.iter().chain(&texts).cloned().collect();
        if vocab_token_ratio(&doubled).unwrap() >= vocab_token_ratio(&texts).unwrap() {
            return outcome(false, format!("duplication did not lower vocab:token on {texts:?}"));
        }

        let p = extracted_like_plot(&mut rng);
        let mut story: Vec<String> = Vec::new();
        for w in p.words(false) {
            for _ in 0..rng.gen_range(0..3) {
                story.push(format!("filler{}", rng.gen_range(0..5)));
            }
            story.push(w.to_lowercase());
        }
        let want = if story.is_empty() { None } else { Some(100.0) }; // no plot words: undefined
        if incorporation_rate(&p, &story, IncorporationMode::Words) != want {
            return outcome(false, format!("subsequence plot not fully incorporated: {p}"));
        }
    }
    outcome(true, "8 hand-computed fixtures within 1e-9, duplication and subsequence properties on 200 cases")
}

fn story(text: &str, frames: Vec<SrlFrame>, boundaries: Vec<usize>, clusters: Vec<(u32, Vec<Span>)>) -> AnnotatedStory {
    AnnotatedStory {
        id: Some("fixture".into()),
        prompt: "p".into(),
        story_tokens: text.split_whitespace().map(str::to_owned).collect(),
        frames,
        coref_clusters: clusters,
        sentence_boundaries: boundaries,
    }
}

fn frame(verb: (usize, usize), lemma: &str, args: &[(&str, (usize, usize))]) -> SrlFrame {
    SrlFrame {
        verb_span: Span(verb.0, verb.1),
        verb_lemma: lemma.to_owned(),
        args: args.iter().map(|(r, s)| ((*r).to_owned(), Span(s.0, s.1))).collect(),
    }
}

fn extraction_rules() -> Outcome {
    let listed = [
        "is", "was", "were", "are", "be", "'s", "'re", "'ll", "can", "could", "must", "may", "have to", "has to",
        "had to", "will", "would", "has", "have", "had", "do", "does", "did",
    ];
    if multiset(STOP_VERBS) != multiset(listed) {
        return outcome(false, format!("stop list differs: {STOP_VERBS:?}"));
    }
    for verb in listed {
        let n = verb.split_whitespace().count();
        // "Tom <verb> left ." with a kept frame on "left"
        let s = story(
            &format!("Tom {verb} left ."),
            vec![frame((1, 1 + n), "other", &[("ARG0", (0, 1))]), frame((1 + n, 2 + n), "leave", &[("ARG0", (0, 1))])],
            vec![],
            vec![],
        );
        let got = serialize_plot(&extract_plot(&s).unwrap());
        if got != "<A0> Tom <V> left </s>" {
            return outcome(false, format!("stop verb {verb:?}: {got}"));
        }
    }

    // 0   1    2   3 4    5         6
    // Tom gave Ann a book yesterday .
    let s = story(
        "Tom gave Ann a book yesterday .",
        vec![frame(
            (1, 2),
            "give",
            &[("ARG0", (0, 1)), ("ARG1", (3, 5)), ("ARG2", (2, 3)), ("ARG3", (5, 6)), ("ARGM-TMP", (5, 6))],
        )],
        vec![],
        vec![],
    );
    let dropped = serialize_plot(&extract_plot(&s).unwrap());
    if dropped != "<A0> Tom <V> gave <A2> Ann <A1> a book </s>" {
        return outcome(false, format!("argument dropping: {dropped}"));
    }

    // 0   1    2   3     4 5  6  7    8   9    10
    // Ann met  the smith . He hit Ann with iron .
    // cluster 9 (smith) and 4 (Ann) are numbered by first mention in the plot: Ann 0, smith 1
    let s = story(
        "Ann met the smith . He hit Ann with iron .",
        vec![
            frame((6, 7), "hit", &[("ARG0", (5, 6)), ("ARG1", (7, 8)), ("ARG2", (8, 10))]),
            frame((1, 2), "meet", &[("ARG0", (0, 1)), ("ARG1", (2, 4))]),
        ],
        vec![0, 5],
        vec![(9, vec![Span(2, 4), Span(5, 6)]), (4, vec![Span(0, 1), Span(7, 8)])],
    );
    let numbered = serialize_plot(&extract_plot(&s).unwrap());
    let want = "<A0> ent 0 <V> met <A1> ent 1 </s> <A0> ent 1 <V> hit <A1> ent 0 <A2> with iron </s>";
    if numbered != want {
        return outcome(false, format!("entity numbering: {numbered}"));
    }
    outcome(true, "23 stop verbs dropped, ARG3 and modifiers dropped, entities numbered by first mention")
}

fn end_to_end_demo() -> Outcome {
    let run = || -> (Duration, pipeline::DemoSummary) {
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let s = cmd_demo(0, false, dir.path()).expect("demo runs");
        (t.elapsed(), s)
    };
    let (t1, a) = run();
    let (t2, b) = run();
    let vt = a.checks.iter().find(|c| c.name == "aristotelian_vt_ge_naive").expect("vocab:token check");
    let limit = Duration::from_secs(120);
    outcome(
        a.records == 500 && t1 < limit && t2 < limit && a.text == b.text && a.passed(),
        format!(
            "{} records, runs {:.1?} and {:.1?}, summaries {}, {}{}",
            a.records,
            t1,
            t2,
            if a.text == b.text { "identical" } else { "DIFFER" },
            vt.detail,
            if a.passed() { "" } else { ", a demo check failed" }
        ),
    )
}

/// Report-only: with `ARISTO_CONFIG` naming a pipeline config over real
/// annotated data, runs every stage and prints the metric report.
fn real_data_report() -> Option<Outcome> {
    let path = PathBuf::from(std::env::var_os("ARISTO_CONFIG")?);
    let run = || -> Result<String> {
        let cfg = PipelineConfig::load(&path)?;
        pipeline::cmd_extract(&cfg)?;
        for aspect in Aspect::ALL {
            pipeline::cmd_negatives(&cfg, aspect)?;
            pipeline::cmd_train_rescorer(&cfg, aspect)?;
        }
        pipeline::cmd_train_lm(&cfg, LmStage::Plot)?;
        pipeline::cmd_train_lm(&cfg, LmStage::Story)?;
        pipeline::cmd_tune(&cfg)?;
        for mode in [GenerateMode::Naive, GenerateMode::Aristotelian, GenerateMode::Story, GenerateMode::End2end] {
            pipeline::cmd_generate(&cfg, mode, &GenerateIo::default())?;
        }
        let report = pipeline::cmd_evaluate(&cfg)?;
        let gold = report.rows.iter().find(|r| r.system == "gold_plot");
        let fmt = |v: Option<f64>| v.map_or("NA".to_owned(), |v| format!("{v:.2}"));
        Ok(format!(
            "gold plot entities/plot {} (reference 9.26), avg tokens {} (reference 371)\n{}",
            fmt(gold.and_then(|r| r.entities_per_plot)),
            fmt(gold.and_then(|r| r.avg_tokens)),
            report.to_tsv()
        ))
    };
    Some(match run() {
        Ok(text) => outcome(true, text),
        Err(e) => outcome(false, e.to_string()),
    })
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("grammar round-trip", Duration::from_secs(1), grammar_round_trip),
        ("shuffle invariants", Duration::from_secs(10), shuffle_invariants),
        ("rescorer learnability", Duration::from_secs(30), rescorer_learnability),
        ("decoder reduction", Duration::from_secs(5), decoder_reduction),
        ("steering", Duration::from_secs(30), steering),
        ("mixture-weight recovery", Duration::from_secs(60), mixture_weight_recovery),
        ("metric oracles", Duration::from_secs(5), metric_oracles),
        ("extraction rules", Duration::from_secs(5), extraction_rules),
        ("end-to-end demo", Duration::from_secs(240), end_to_end_demo),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = t.elapsed();
        let passed = o.passed && elapsed < budget;
        failed += usize::from(!passed);
        let over = if elapsed < budget { String::new() } else { format!(", over the {budget:?} budget") };
        println!(
            "acceptance {:>2} {:<24} {}  {} [{:.2?}{over}]",
            i + 1,
            name,
            if passed { "PASS" } else { "FAIL" },
            o.detail,
            elapsed
        );
    }
    match real_data_report() {
        Some(o) => println!(
            "acceptance 10 {:<24} {}  {}",
            "real-data report",
            if o.passed { "REPORT" } else { "ERROR" },
            o.detail
        ),
        None => println!("acceptance 10 {:<24} SKIP  report-only; set ARISTO_CONFIG to a config over annotated data", "real-data report"),
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
