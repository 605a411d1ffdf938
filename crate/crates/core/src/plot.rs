//! Plot token grammar.
//!
//! A plot is a whitespace-tokenized stream of semantic-role frames:
//!
//! ```text
//! <A1> The universe <V> end </s> </s> <A0> ent 0 <V> see <A1> ent 3 # <V> dying
//! ```
//!
//! `</s>` terminates a sentence, `#` separates events inside a sentence and the
//! role tags `<A0> <A1> <A2> <V>` open a slot whose text runs until the next
//! tag or separator. Argument text is stored verbatim so that
//! `serialize_plot(parse_plot(s)) == s` for every single-space separated `s`.
//! Entity mentions (`ent N`) are a view over slot text, see [`Plot::entities`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SENTENCE_SEP: &str = "</s>";
pub const EVENT_SEP: &str = "#";
pub const ENTITY_MARKER: &str = "ent";

/// Semantic role of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    A0,
    A1,
    A2,
    V,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::A0, Role::A1, Role::A2, Role::V];

    pub fn tag(self) -> &'static str {
        match self {
            Role::A0 => "<A0>",
            Role::A1 => "<A1>",
            Role::A2 => "<A2>",
            Role::V => "<V>",
        }
    }

    pub fn from_tag(token: &str) -> Option<Role> {
        match token {
            "<A0>" => Some(Role::A0),
            "<A1>" => Some(Role::A1),
            "<A2>" => Some(Role::A2),
            "<V>" => Some(Role::V),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A role-tagged run of tokens.
///
/// `role` is `None` only for words that precede every tag of their event,
/// which happens in excerpted or model-generated plots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub role: Option<Role>,
    pub text: Vec<String>,
}

impl Slot {
    pub fn new(role: Role, text: &str) -> Self {
        Slot {
            role: Some(role),
            text: text.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn is_verb(&self) -> bool {
        self.role == Some(Role::V)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub slots: Vec<Slot>,
}

impl Event {
    pub fn new(slots: Vec<Slot>) -> Self {
        Event { slots }
    }

    pub fn verb_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_verb()).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub events: Vec<Event>,
}

impl Sentence {
    pub fn new(events: Vec<Event>) -> Self {
        Sentence { events }
    }

    pub fn verb_count(&self) -> usize {
        self.events.iter().map(Event::verb_count).sum()
    }
}

/// Parsed plot.
///
/// `closed` records whether the final sentence was followed by `</s>`.
/// A plot is canonical when it is what [`parse_plot`] would produce: no
/// sentence consists of a single empty event and an empty final sentence is
/// always closed. Structural round-trip holds for canonical plots.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Plot {
    pub sentences: Vec<Sentence>,
    pub closed: bool,
}

impl Plot {
    pub fn new(sentences: Vec<Sentence>, closed: bool) -> Self {
        Plot { sentences, closed }
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        if self.sentences.is_empty() {
            return !self.closed;
        }
        let lone_empty_event = self
            .sentences
            .iter()
            .any(|s| s.events.len() == 1 && s.events[0].slots.is_empty());
        let open_empty_tail = !self.closed
            && self
                .sentences
                .last()
                .is_some_and(|s| s.events.is_empty());
        !lone_empty_event && !open_empty_tail
    }

    /// Surface tokens, identical to splitting [`serialize_plot`] on spaces.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, sentence) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push(SENTENCE_SEP.to_owned());
            }
            sentence_tokens(sentence, &mut out);
        }
        if self.closed && !self.sentences.is_empty() {
            out.push(SENTENCE_SEP.to_owned());
        }
        out
    }

    /// V-slot tokens in surface order. Multi-token verb slots contribute one
    /// entry per token.
    pub fn verbs(&self) -> Vec<String> {
        self.slots()
            .filter(|s| s.is_verb())
            .flat_map(|s| s.text.iter().cloned())
            .collect()
    }

    /// Slot tokens in surface order, never including tags or separators.
    pub fn words(&self, include_verbs: bool) -> Vec<String> {
        self.slots()
            .filter(|s| include_verbs || !s.is_verb())
            .flat_map(|s| s.text.iter().cloned())
            .collect()
    }

    /// Multiset of entity ids, from `ent N` pairs inside slot text.
    pub fn entities(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for slot in self.slots() {
            for id in entity_ids(&slot.text) {
                *out.entry(id).or_insert(0) += 1;
            }
        }
        out
    }

    fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.sentences
            .iter()
            .flat_map(|s| s.events.iter())
            .flat_map(|e| e.slots.iter())
    }
}

/// Entity ids found as `ent N` within a token run.
pub fn entity_ids<S: AsRef<str>>(tokens: &[S]) -> Vec<u32> {
    tokens
        .windows(2)
        .filter(|w| w[0].as_ref() == ENTITY_MARKER)
        .filter_map(|w| w[1].as_ref().parse::<u32>().ok())
        .collect()
}

fn sentence_tokens(sentence: &Sentence, out: &mut Vec<String>) {
    for (j, event) in sentence.events.iter().enumerate() {
        if j > 0 {
            out.push(EVENT_SEP.to_owned());
        }
        for slot in &event.slots {
            if let Some(role) = slot.role {
                out.push(role.tag().to_owned());
            }
            out.extend(slot.text.iter().cloned());
        }
    }
}

/// Tokens shaped like a role tag that is not one of the four known tags.
fn is_malformed_tag(token: &str) -> bool {
    let tag_like = (token.starts_with("<A") || token.starts_with("<V")) && token.len() > 2;
    tag_like && Role::from_tag(token).is_none()
}

pub fn parse_plot(s: &str) -> Result<Plot> {
    let tokens: Vec<&str> = s.split_whitespace().collect();
    for (offset, token) in tokens.iter().enumerate() {
        if is_malformed_tag(token) {
            return Err(Error::MalformedTag {
                token: (*token).to_owned(),
                offset,
            });
        }
    }
    if tokens.is_empty() {
        return Ok(Plot::default());
    }

    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for token in &tokens {
        if *token == SENTENCE_SEP {
            sentences.push(parse_sentence(&current));
            current.clear();
        } else {
            current.push(token);
        }
    }
    let closed = current.is_empty();
    if !closed {
        sentences.push(parse_sentence(&current));
    }
    Ok(Plot { sentences, closed })
}

fn parse_sentence(tokens: &[&str]) -> Sentence {
    if tokens.is_empty() {
        return Sentence::default();
    }
    let events = tokens
        .split(|t| *t == EVENT_SEP)
        .map(parse_event)
        .collect();
    Sentence { events }
}

fn parse_event(tokens: &[&str]) -> Event {
    let mut slots: Vec<Slot> = Vec::new();
    for token in tokens {
        if let Some(role) = Role::from_tag(token) {
            slots.push(Slot {
                role: Some(role),
                text: Vec::new(),
            });
        } else {
            match slots.last_mut() {
                Some(slot) => slot.text.push((*token).to_owned()),
                None => slots.push(Slot {
                    role: None,
                    text: vec![(*token).to_owned()],
                }),
            }
        }
    }
    Event { slots }
}

pub fn serialize_plot(p: &Plot) -> String {
    p.tokens().join(" ")
}

pub fn plot_verbs(p: &Plot) -> Vec<String> {
    p.verbs()
}

pub fn plot_entities(p: &Plot) -> BTreeMap<u32, usize> {
    p.entities()
}

pub fn plot_words(p: &Plot, include_verbs: bool) -> Vec<String> {
    p.words(include_verbs)
}

impl fmt::Display for Plot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_plot(self))
    }
}

impl FromStr for Plot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_plot(s)
    }
}

/// The verbs dropped when extracting plot events.
pub const STOP_VERBS: [&str; 23] = [
    "is", "was", "were", "are", "be", "'s", "'re", "'ll", "can", "could", "must", "may",
    "have to", "has to", "had to", "will", "would", "has", "have", "had", "do", "does", "did",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopVerbList {
    verbs: std::collections::BTreeSet<String>,
}

impl Default for StopVerbList {
    fn default() -> Self {
        StopVerbList {
            verbs: STOP_VERBS.iter().map(|v| (*v).to_owned()).collect(),
        }
    }
}

impl StopVerbList {
    pub fn contains(&self, verb: &str) -> bool {
        self.verbs.contains(&verb.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.verbs.iter().map(String::as_str)
    }
}
