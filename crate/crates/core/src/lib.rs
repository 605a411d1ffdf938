//! Content-planned story generation with discriminative plot rescoring.
//!
//! The pipeline extracts semantic-role plots from annotated stories, trains
//! n-gram rescorers on synthesized negatives, samples plots from a conditional
//! n-gram language model under a rescored objective whose mixture weights are
//! tuned with a margin ranking loss, realizes stories from plots and reports
//! automatic plot and story metrics.

pub mod error;
pub mod decoder;
pub mod extract;
pub mod lm;
pub mod metrics;
pub mod negatives;
pub mod pipeline;
pub mod plot;
pub mod rescorer;
pub mod seed;
pub mod synth;
pub mod tuner;

pub use error::{Error, Result};
pub use plot::{
    parse_plot, plot_entities, plot_verbs, plot_words, serialize_plot, Event, Plot, Role,
    Sentence, Slot, StopVerbList,
};
