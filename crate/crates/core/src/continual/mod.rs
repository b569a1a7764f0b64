//! Continual pre-training: mitigation strategies and the CPT trainer.
//!
//! A run starts from a pre-trained checkpoint and trains on new facts while
//! optionally mixing in replay data (stored PT samples or samples generated
//! by the pre-trained model) or pulling `Y` back toward its pre-trained
//! value with a Fisher-weighted penalty.

mod fisher;
mod minhash;
mod replay;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DecodeConfig;

pub use fisher::fisher_importance;
pub use minhash::{exact_jaccard, minhash_signature, shingles, signature_similarity, DedupConfig, MinHasher};
pub use replay::{
    best_window, build_stored_replay, dedup_replay, generate_replay, read_replay, select_prompts, write_replay, Provenance,
    ReplayCorpus, ReplaySample, SelectedPrompt, Selection, StoredReplay,
};
pub(crate) use trainer::area;
pub use trainer::{
    mixture_prediction, mixture_stats, pretrain, run_cpt, CptConfig, EvalHooks, PretrainConfig, PretrainOutcome, StopRule,
    Trainer, Trajectory, TrajectoryRow,
};

/// Which PT biographies are kept as stored replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredRule {
    /// One biography per individual.
    AllOneBio,
    /// Half of the individuals keep two biographies, the rest none.
    HalfTwoBios,
}

/// Where generative replay takes its prompts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    /// The generation-trigger token alone.
    Lamol,
    /// Highest-attention window of each CPT sample.
    Stoc,
    /// A uniformly random window of each CPT sample.
    RandomSnippet,
}

impl PromptSource {
    pub fn label(&self) -> &'static str {
        match self {
            PromptSource::Lamol => "lamol",
            PromptSource::Stoc => "stoc",
            PromptSource::RandomSnippet => "random_snippet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub source: PromptSource,
    pub window_len: usize,
    /// Number of prompts kept after selection.
    pub budget: usize,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub dedup: DedupConfig,
    /// Generation stops once this many tokens (prompt plus output) exist.
    /// `None` matches the CPT corpus token count.
    #[serde(default)]
    pub target_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ContinualMethod {
    Naive,
    Ewc {
        k: f64,
    },
    StoredReplay {
        alpha: f64,
        rule: StoredRule,
    },
    GenerativeReplay {
        alpha: f64,
        #[serde(flatten)]
        generative: GenerativeConfig,
    },
}

impl ContinualMethod {
    pub fn label(&self) -> String {
        match self {
            ContinualMethod::Naive => "naive".into(),
            ContinualMethod::Ewc { .. } => "ewc".into(),
            ContinualMethod::StoredReplay { rule: StoredRule::AllOneBio, .. } => "stored_replay".into(),
            ContinualMethod::StoredReplay { rule: StoredRule::HalfTwoBios, .. } => "stored_replay_half".into(),
            ContinualMethod::GenerativeReplay { generative, .. } => generative.source.label().into(),
        }
    }

    /// Fraction of CPT samples in the training stream.
    pub fn alpha(&self) -> f64 {
        match self {
            ContinualMethod::StoredReplay { alpha, .. } | ContinualMethod::GenerativeReplay { alpha, .. } => *alpha,
            _ => 1.0,
        }
    }

    pub fn uses_replay(&self) -> bool {
        matches!(self, ContinualMethod::StoredReplay { .. } | ContinualMethod::GenerativeReplay { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match self {
            ContinualMethod::Naive => {}
            ContinualMethod::Ewc { k } => {
                if !(*k >= 0.0 && k.is_finite()) {
                    errs.push(format!("ewc k must be finite and >= 0, got {k}"));
                }
            }
            ContinualMethod::StoredReplay { alpha, .. } => check_alpha(*alpha, &mut errs),
            ContinualMethod::GenerativeReplay { alpha, generative } => {
                check_alpha(*alpha, &mut errs);
                if generative.window_len == 0 {
                    errs.push("window_len must be >= 1".into());
                }
                if generative.budget == 0 {
                    errs.push("budget must be >= 1".into());
                }
                if let Err(e) = generative.decode.validate() {
                    errs.push(e.to_string());
                }
                if let Err(e) = generative.dedup.validate() {
                    errs.push(e.to_string());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

fn check_alpha(alpha: f64, errs: &mut Vec<String>) {
    if !(alpha > 0.0 && alpha <= 1.0) {
        errs.push(format!("alpha must be in (0, 1], got {alpha}"));
    }
}
