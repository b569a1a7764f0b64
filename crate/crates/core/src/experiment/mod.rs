//! Config-driven pipeline: data generation, pre-training, probes, the CPT
//! sweep and report generation, with every artifact written to one
//! directory.
//!
//! Layout of an artifact directory:
//!
//! ```text
//! config.resolved.json   run.log   PARTIAL (only while a stage runs)
//! data/      world.json manifest.json {pt,cpt}_{train,test}.tsv
//! pretrain/  curve.csv final.bin final.json plateau.bin checkpoints/step_N.bin
//! probe/     di_scatter.csv summary.csv plateau_kl_{plateau,final}.csv kl_hist_{plateau,final}.csv
//! cells/<cell>/  replay.tsv trajectory.csv final.bin cell.json
//! eval/      metrics.csv
//! report/    grid.csv di_scatter.csv curves/*.csv summary.txt
//! ```

mod pipeline;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{ContinualMethod, DedupConfig, GenerativeConfig, PromptSource, StopRule, StoredRule};
use crate::corpus::{Augmentation, WorldConfig};
use crate::error::{Error, Result};
use crate::model::{AttentionVariant, DecodeConfig, TrainConfig};

pub use pipeline::{
    cell_names, prepare, run_experiment, stage_cpt, stage_data, stage_eval, stage_pretrain, stage_probe, stage_replay, Artifacts,
    Cell, RunLog,
};
pub use report::{emit_reports, Gate, GateStatus, ReportSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub aug: Augmentation,
    pub test_bios: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { aug: Augmentation::KAug(5), test_bios: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: AttentionVariant,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: AttentionVariant::Linear, init_scale: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPhase {
    pub train: TrainConfig,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Stop once training-set hFTA reaches this.
    pub gate: Option<f64>,
    pub extra_steps: u64,
}

impl Default for PretrainPhase {
    fn default() -> Self {
        Self {
            train: TrainConfig { lr_y: 0.1, lr_z: 0.01, ..TrainConfig::default() },
            max_steps: 150_000,
            eval_every: 5_000,
            gate: Some(0.99),
            extra_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Keep and probe a pre-training checkpoint every this many steps.
    pub every: u64,
    /// Training prompts used for the eigenvalue and oracle probes.
    pub dynamics_prompts: usize,
    /// The plateau checkpoint is the last kept one whose training hFTA is
    /// below this value.
    pub plateau_hfta: f64,
    pub kl_bins: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { every: 10_000, dynamics_prompts: 200, plateau_hfta: 0.2, kl_bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CptPhase {
    pub train: TrainConfig,
    pub stop: StopRule,
    pub max_steps: u64,
    pub extra_steps: u64,
    pub eval_every: u64,
    /// Cap on samples per evaluation set; 0 keeps all.
    pub eval_samples: usize,
    pub methods: Vec<ContinualMethod>,
    /// Replay ratios swept for every replay method. Empty keeps each
    /// method's own `alpha`.
    pub alphas: Vec<f64>,
}

impl Default for CptPhase {
    fn default() -> Self {
        let generative = |source| ContinualMethod::GenerativeReplay {
            alpha: 0.8,
            generative: GenerativeConfig {
                source,
                window_len: 3,
                budget: 100_000,
                decode: DecodeConfig::default(),
                dedup: DedupConfig::default(),
                target_tokens: None,
            },
        };
        Self {
            train: TrainConfig { lr_y: 0.1, lr_z: 0.01, ..TrainConfig::default() },
            stop: StopRule::ContinualHfta(0.95),
            max_steps: 100_000,
            extra_steps: 0,
            eval_every: 1_000,
            eval_samples: 2_000,
            methods: vec![
                ContinualMethod::Naive,
                ContinualMethod::Ewc { k: 1.0 },
                ContinualMethod::StoredReplay { alpha: 0.8, rule: StoredRule::AllOneBio },
                generative(PromptSource::Lamol),
                generative(PromptSource::RandomSnippet),
                generative(PromptSource::Stoc),
            ],
            alphas: vec![0.5, 0.67, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// EMA factor for smoothed curves.
    pub ema_alpha: f64,
    pub di_threshold: f64,
    /// Naive CPT passes when original hFTA at the gate is below this
    /// fraction of its pre-trained value.
    pub forgetting_fraction: f64,
    /// Minimum gap, in hFTA points, for the replay ordering.
    pub replay_margin: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { ema_alpha: 0.8, di_threshold: -0.8, forgetting_fraction: 0.25, replay_margin: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Artifact directory. `None` resolves to `runs/<name>`.
    pub out: Option<PathBuf>,
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainPhase,
    pub probe: ProbeConfig,
    pub cpt: CptPhase,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            out: None,
            world: WorldConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainPhase::default(),
            probe: ProbeConfig::default(),
            cpt: CptPhase::default(),
            report: ReportConfig::default(),
        }
    }
}

fn push_err(errs: &mut Vec<String>, scope: &str, r: Result<()>) {
    if let Err(e) = r {
        let msg = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        errs.extend(msg.split("; ").map(|m| format!("{scope}: {m}")));
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The artifact directory, with the default expanded.
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every violation in every nested section, joined with `"; "`.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            errs.push("name must be non-empty and contain no path separators".to_string());
        }
        push_err(&mut errs, "world", self.world.validate());
        push_err(&mut errs, "corpus.aug", self.corpus.aug.validate());
        if self.corpus.test_bios == 0 {
            errs.push("corpus: test_bios must be >= 1".into());
        }
        if !(self.model.init_scale >= 0.0 && self.model.init_scale.is_finite()) {
            errs.push("model: init_scale must be finite and >= 0".into());
        }
        push_err(&mut errs, "pretrain.train", self.pretrain.train.validate());
        if self.pretrain.eval_every == 0 {
            errs.push("pretrain: eval_every must be >= 1".into());
        }
        if self.pretrain.gate.is_some_and(|g| !(0.0..=1.0).contains(&g)) {
            errs.push("pretrain: gate must be in [0, 1]".into());
        }
        if self.probe.every == 0 {
            errs.push("probe: every must be >= 1".into());
        }
        if self.probe.kl_bins == 0 {
            errs.push("probe: kl_bins must be >= 1".into());
        }
        push_err(&mut errs, "cpt.train", self.cpt.train.validate());
        if self.cpt.eval_every == 0 {
            errs.push("cpt: eval_every must be >= 1".into());
        }
        match self.cpt.stop {
            StopRule::Fixed(_) => {}
            StopRule::ContinualHfta(t) | StopRule::ContinualSfta(t) => {
                if !(0.0..=1.0).contains(&t) {
                    errs.push(format!("cpt.stop: threshold must be in [0, 1], got {t}"));
                }
            }
        }
        for a in &self.cpt.alphas {
            if !(*a > 0.0 && *a <= 1.0) {
                errs.push(format!("cpt.alphas: alpha must be in (0, 1], got {a}"));
            }
        }
        for (i, m) in self.cpt.methods.iter().enumerate() {
            push_err(&mut errs, &format!("cpt.methods[{i}]"), m.validate());
            if let ContinualMethod::GenerativeReplay { generative, .. } = m {
                if generative.source == PromptSource::Lamol && !self.world.trigger {
                    errs.push(format!("cpt.methods[{i}]: LAMOL needs world.trigger = true"));
                }
            }
        }
        let names = cell_names(self);
        let mut sorted = names.clone();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                errs.push(format!("cpt.methods: duplicate cell name {}", w[0]));
            }
        }
        if !(self.report.ema_alpha >= 0.0 && self.report.ema_alpha <= 1.0) {
            errs.push("report: ema_alpha must be in [0, 1]".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}
