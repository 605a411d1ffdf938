//! Automatic plot and story metrics.
//!
//! Percentages are on a 0–100 scale. A metric that is undefined for its input
//! (no tokens, no verbs, empty plot) is `None` and printed as `NA` in TSV and
//! `null` in JSON.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plot::Plot;

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Distinct types over total tokens, pooled over the whole corpus.
pub fn vocab_token_ratio<S: AsRef<str> + Sync>(corpus: &[Vec<S>]) -> Option<f64> {
    let total: usize = corpus.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let types: HashSet<&str> = corpus.iter().flatten().map(|t| t.as_ref()).collect();
    Some(100.0 * types.len() as f64 / total as f64)
}

/// The five most frequent verb types, ties broken lexicographically.
pub fn top_verbs<S: AsRef<str>>(verbs: &[Vec<S>], n: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in verbs.iter().flatten() {
        *counts.entry(v.as_ref()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(n).map(|(v, _)| v.to_owned()).collect()
}

/// Share of verb tokens whose type is outside the corpus top five.
pub fn diverse_verb_pct<S: AsRef<str>>(verbs: &[Vec<S>]) -> Option<f64> {
    let total: usize = verbs.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let top: HashSet<String> = top_verbs(verbs, 5).into_iter().collect();
    let outside = verbs.iter().flatten().filter(|v| !top.contains(v.as_ref())).count();
    Some(100.0 * outside as f64 / total as f64)
}

/// Mean number of distinct verb types per text.
pub fn unique_verbs<S: AsRef<str>>(verbs: &[Vec<S>]) -> Option<f64> {
    mean(verbs.iter().map(|v| v.iter().map(|s| s.as_ref()).collect::<HashSet<_>>().len() as f64))
}

fn trigrams<S: AsRef<str>>(text: &[S]) -> impl Iterator<Item = [&str; 3]> {
    text.windows(3).map(|w| [w[0].as_ref(), w[1].as_ref(), w[2].as_ref()])
}

/// Per text, `1 − distinct/total` trigrams; texts under three tokens are skipped.
pub fn intra_trigram_rep<S: AsRef<str> + Sync>(corpus: &[Vec<S>]) -> Option<f64> {
    let per_text: Vec<f64> = corpus
        .par_iter()
        .filter(|t| t.len() >= 3)
        .map(|t| {
            let total = t.len() - 2;
            let distinct = trigrams(t).collect::<HashSet<_>>().len();
            100.0 * (1.0 - distinct as f64 / total as f64)
        })
        .collect();
    mean(per_text.into_iter())
}

/// Per text, the share of its distinct trigrams that occur in some other text.
pub fn inter_trigram_rep<S: AsRef<str> + Sync>(corpus: &[Vec<S>]) -> Option<f64> {
    let sets: Vec<HashSet<[&str; 3]>> = corpus.par_iter().map(|t| trigrams(t).collect()).collect();
    let mut texts_with: HashMap<[&str; 3], usize> = HashMap::new();
    for s in &sets {
        for g in s {
            *texts_with.entry(*g).or_insert(0) += 1;
        }
    }
    let per_text: Vec<f64> = sets
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|s| 100.0 * s.iter().filter(|g| texts_with[*g] > 1).count() as f64 / s.len() as f64)
        .collect();
    mean(per_text.into_iter())
}

pub fn entities_per_plot(plots: &[Plot]) -> Option<f64> {
    mean(plots.iter().map(|p| p.entities().len() as f64))
}

pub fn avg_tokens<S>(corpus: &[Vec<S>]) -> Option<f64> {
    mean(corpus.iter().map(|t| t.len() as f64))
}

pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn levenshtein<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncorporationMode {
    Words,
    Verbs,
}

fn plot_sequence(plot: &Plot, mode: IncorporationMode) -> Vec<String> {
    let seq = match mode {
        IncorporationMode::Words => plot.words(false),
        IncorporationMode::Verbs => plot.verbs(),
    };
    seq.into_iter().map(|w| w.to_lowercase()).collect()
}

/// Ordered share of the plot's words (or verbs) realized in the story:
/// `100 · LCS(P, Y) / |P|`, case-folded.
pub fn incorporation_rate<S: AsRef<str>>(plot: &Plot, story: &[S], mode: IncorporationMode) -> Option<f64> {
    let p = plot_sequence(plot, mode);
    if p.is_empty() {
        return None;
    }
    let y: Vec<String> = story.iter().map(|t| t.as_ref().to_lowercase()).collect();
    Some(100.0 * lcs_len(&p, &y) as f64 / p.len() as f64)
}

pub fn incorporation_levenshtein<S: AsRef<str>>(plot: &Plot, story: &[S], mode: IncorporationMode) -> Option<usize> {
    let p = plot_sequence(plot, mode);
    if p.is_empty() {
        return None;
    }
    let y: Vec<String> = story.iter().map(|t| t.as_ref().to_lowercase()).collect();
    Some(levenshtein(&p, &y))
}

/// One system to evaluate. For a plot system `texts` holds plot tokens and
/// `plots` the parsed plots; for a story system `plots`, when present, are the
/// plots the stories were realized from, line-aligned with `texts`.
#[derive(Debug, Clone, Default)]
pub struct SystemInput {
    pub name: String,
    pub texts: Vec<Vec<String>>,
    pub plots: Option<Vec<Plot>>,
    pub texts_are_plots: bool,
}

impl SystemInput {
    pub fn from_plots(name: &str, plots: Vec<Plot>) -> Self {
        SystemInput {
            name: name.to_owned(),
            texts: plots.iter().map(Plot::tokens).collect(),
            plots: Some(plots),
            texts_are_plots: true,
        }
    }

    pub fn from_stories(name: &str, stories: Vec<Vec<String>>, plots: Option<Vec<Plot>>) -> Self {
        SystemInput {
            name: name.to_owned(),
            texts: stories,
            plots,
            texts_are_plots: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub system: String,
    pub vocab_token_ratio: Option<f64>,
    pub unique_verbs: Option<f64>,
    pub diverse_verb_pct: Option<f64>,
    pub intra_trigram_rep: Option<f64>,
    pub inter_trigram_rep: Option<f64>,
    pub entities_per_plot: Option<f64>,
    pub avg_tokens: Option<f64>,
    pub word_incorp_pct: Option<f64>,
    pub verb_incorp_pct: Option<f64>,
    pub word_levenshtein: Option<f64>,
    pub verb_levenshtein: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "system",
    "vocab_token_ratio",
    "unique_verbs",
    "diverse_verb_pct",
    "intra_trigram_rep",
    "inter_trigram_rep",
    "entities_per_plot",
    "avg_tokens",
    "word_incorp_pct",
    "verb_incorp_pct",
    "word_levenshtein",
    "verb_levenshtein",
];

pub const REPORT_DEFINITIONS: &str = "vocab_token_ratio pools types and tokens over the whole corpus; \
inter_trigram_rep is the mean share of a text's distinct trigrams found in at least one other text; \
incorporation is 100*LCS(plot, story)/|plot| after case folding";

impl MetricRow {
    fn values(&self) -> [Option<f64>; 11] {
        [
            self.vocab_token_ratio,
            self.unique_verbs,
            self.diverse_verb_pct,
            self.intra_trigram_rep,
            self.inter_trigram_rep,
            self.entities_per_plot,
            self.avg_tokens,
            self.word_incorp_pct,
            self.verb_incorp_pct,
            self.word_levenshtein,
            self.verb_levenshtein,
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub definitions: String,
    pub rows: Vec<MetricRow>,
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.4}"))
}

impl MetricReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# {}\n{}\n", self.definitions, REPORT_COLUMNS.join("\t"));
        for r in &self.rows {
            let mut cells = vec![r.system.clone()];
            cells.extend(r.values().iter().map(|v| fmt_opt(*v)));
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn story_verbs(texts: &[Vec<String>], plots: Option<&[Plot]>, lexicon: Option<&HashSet<String>>) -> Option<Vec<Vec<String>>> {
    if let Some(lex) = lexicon {
        return Some(
            texts
                .iter()
                .map(|t| t.iter().map(|w| w.to_lowercase()).filter(|w| lex.contains(w)).collect())
                .collect(),
        );
    }
    let plots = plots?;
    Some(
        texts
            .iter()
            .zip(plots)
            .map(|(t, p)| {
                let own: HashSet<String> = p.verbs().iter().map(|v| v.to_lowercase()).collect();
                t.iter().map(|w| w.to_lowercase()).filter(|w| own.contains(w)).collect()
            })
            .collect(),
    )
}

/// Every metric that applies to one system.
pub fn system_row(sys: &SystemInput, lexicon: Option<&HashSet<String>>) -> Result<MetricRow> {
    if let Some(plots) = &sys.plots {
        if plots.len() != sys.texts.len() {
            return Err(Error::Mismatch(format!(
                "system `{}`: {} texts but {} plots",
                sys.name,
                sys.texts.len(),
                plots.len()
            )));
        }
    }
    let verbs = if sys.texts_are_plots {
        sys.plots.as_ref().map(|ps| ps.iter().map(Plot::verbs).collect::<Vec<_>>())
    } else {
        story_verbs(&sys.texts, sys.plots.as_deref(), lexicon)
    };
    let mut row = MetricRow {
        system: sys.name.clone(),
        vocab_token_ratio: vocab_token_ratio(&sys.texts),
        unique_verbs: verbs.as_deref().and_then(unique_verbs),
        diverse_verb_pct: verbs.as_deref().and_then(diverse_verb_pct),
        intra_trigram_rep: intra_trigram_rep(&sys.texts),
        inter_trigram_rep: inter_trigram_rep(&sys.texts),
        avg_tokens: avg_tokens(&sys.texts),
        ..MetricRow::default()
    };
    if let Some(plots) = &sys.plots {
        row.entities_per_plot = entities_per_plot(plots);
        if !sys.texts_are_plots {
            let per: Vec<[Option<f64>; 4]> = plots
                .par_iter()
                .zip(&sys.texts)
                .map(|(p, t)| {
                    [
                        incorporation_rate(p, t, IncorporationMode::Words),
                        incorporation_rate(p, t, IncorporationMode::Verbs),
                        incorporation_levenshtein(p, t, IncorporationMode::Words).map(|d| d as f64),
                        incorporation_levenshtein(p, t, IncorporationMode::Verbs).map(|d| d as f64),
                    ]
                })
                .collect();
            let col = |k: usize| mean(per.iter().filter_map(|r| r[k]));
            row.word_incorp_pct = col(0);
            row.verb_incorp_pct = col(1);
            row.word_levenshtein = col(2);
            row.verb_levenshtein = col(3);
        }
    }
    Ok(row)
}

pub fn emit_report(systems: &[SystemInput], lexicon: Option<&HashSet<String>>) -> Result<MetricReport> {
    if systems.is_empty() {
        return Err(Error::Empty("no systems to evaluate".into()));
    }
    Ok(MetricReport {
        definitions: REPORT_DEFINITIONS.to_owned(),
        rows: systems.iter().map(|s| system_row(s, lexicon)).collect::<Result<_>>()?,
    })
}
