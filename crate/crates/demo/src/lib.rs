//! WebAssembly bindings for the static page in `www/`.
//!
//! A [`Lab`] holds one small world and a pre-trained model. The page calls
//! three operations and draws the JSON they return:
//!
//! * [`Lab::scatter`]: diversity index against learned attention, per token.
//! * [`Lab::forgetting`]: original and new knowledge during continual
//!   pre-training with a chosen method.
//! * [`conserved_drift`]: drift of the conserved quantity as the learning
//!   rate shrinks.
//!
//! All logic is plain Rust so it can be tested natively; the wasm exports
//! only wrap it and turn errors into JS exceptions.

use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use cfka_core::continual::{
    build_stored_replay, fisher_importance, pretrain, run_cpt, ContinualMethod, CptConfig, EvalHooks, PretrainConfig, StopRule,
    StoredRule,
};
use cfka_core::corpus::{
    compute_stats, gen_world, render_corpus, Augmentation, Phase, RelationConfig, Sample, Split, World, WorldConfig,
};
use cfka_core::model::{init_params, sgd_step, AttentionVariant, ModelParams, TrainConfig};
use cfka_core::seed::{stage_rng, stage_seed};
use cfka_core::theory::{conserved_quantity, correlate, diversity_index, DiversityRow};
use cfka_core::{Error, Result};

const TRAIN: TrainConfig = TrainConfig { lr_y: 0.5, lr_z: 0.05, update_y: true, update_z: true, batch_size: 1 };

fn world_config(individuals: u32) -> WorldConfig {
    WorldConfig {
        subject_pools: vec![12, 8, 12],
        relations: ["birthday", "birthplace", "university", "major", "company"]
            .iter()
            .map(|n| RelationConfig { name: n.to_string(), object_pool: 20 })
            .collect(),
        relation_words: 12,
        common_words: 8,
        templates_per_relation: 6,
        pt_individuals: individuals,
        cpt_individuals: (individuals / 4).max(4),
        ..WorldConfig::default()
    }
}

fn parse_variant(name: &str) -> Result<AttentionVariant> {
    match name {
        "linear" => Ok(AttentionVariant::Linear),
        "softmax" => Ok(AttentionVariant::Softmax),
        "exponential" => Ok(AttentionVariant::Exponential),
        other => Err(Error::Config(format!("unknown attention variant {other}"))),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScatterPoint {
    pub token: u32,
    pub role: &'static str,
    pub di: f64,
    pub attention: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Scatter {
    pub points: Vec<ScatterPoint>,
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Forgetting {
    pub method: String,
    /// `a` is original-knowledge hFTA, `b` is new-knowledge hFTA.
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftPoint {
    pub lr: f64,
    pub steps: u64,
    pub max_drift: f64,
}

/// One world, its corpus and a pre-trained model.
pub struct Lab {
    seed: u64,
    world: World,
    pt_train: Vec<Sample>,
    pt_test: Vec<Sample>,
    cpt_train: Vec<Sample>,
    params: ModelParams,
    /// `a` is train hFTA, `b` is held-out hFTA.
    pub curve: Vec<CurvePoint>,
}

impl Lab {
    pub fn build(seed: u64, individuals: u32, variant: &str, steps: u64) -> Result<Self> {
        let variant = parse_variant(variant)?;
        let world = gen_world(&world_config(individuals), stage_seed(seed, "world"))?;
        let corpus = render_corpus(&world, Augmentation::KAug(5), 1, stage_seed(seed, "render"))?;
        let (pt_train, pt_test, cpt_train) =
            (corpus.split(Split::PT_TRAIN), corpus.split(Split::PT_TEST), corpus.split(Split::CPT_TRAIN));
        let params = init_params(world.vocab_size, 0.01, variant, stage_seed(seed, "init"))?;
        let cfg = PretrainConfig {
            train: TRAIN,
            max_steps: steps,
            eval_every: (steps / 20).max(1),
            gate: None,
            extra_steps: 0,
            seed: stage_seed(seed, "pretrain"),
        };
        let out = pretrain(params, &pt_train, &pt_test, world.query, &cfg, None)?;
        let curve = out.curve.rows.iter().map(|r| CurvePoint { step: r.step, a: r.original.hfta, b: r.continual.hfta }).collect();
        Ok(Self { seed, world, pt_train, pt_test, cpt_train, params: out.params, curve })
    }

    pub fn vocab_size(&self) -> usize {
        self.world.vocab_size
    }

    pub fn held_out(&self) -> &[Sample] {
        &self.pt_test
    }

    /// DI against attention score for every token seen in training.
    pub fn scatter(&self) -> Result<Scatter> {
        let stats = compute_stats(&self.pt_train)?;
        let positions = stats.mean_positions();
        let ratio = TRAIN.lr_z / TRAIN.lr_y;
        let mut points = Vec::new();
        let mut rows = Vec::new();
        for s in stats.tokens() {
            let di = diversity_index(&stats, s, ratio, 0.0, positions)?;
            let attention = self.params.token_score(s);
            let role = self.world.role_of(s).map_or("none", |r| r.kind());
            points.push(ScatterPoint { token: s, role, di, attention });
            rows.push(DiversityRow { token: s, di, attention });
        }
        let c = correlate(rows)?;
        Ok(Scatter { points, pearson: c.pearson, spearman: c.spearman })
    }

    /// Continual pre-training on the new individuals. `strength` is the EWC
    /// `k` for `"ewc"` and the CPT fraction for `"replay"`; it is ignored
    /// for `"naive"`.
    pub fn forgetting(&self, method: &str, strength: f64, steps: u64) -> Result<Forgetting> {
        let method = match method {
            "naive" => ContinualMethod::Naive,
            "ewc" => ContinualMethod::Ewc { k: strength },
            "replay" => ContinualMethod::StoredReplay { alpha: strength, rule: StoredRule::AllOneBio },
            other => return Err(Error::Config(format!("unknown method {other}"))),
        };
        method.validate()?;
        let replay = match &method {
            ContinualMethod::StoredReplay { rule, .. } => {
                let ids: Vec<u32> = self.world.individuals_in(Phase::Pt).map(|i| i.id).collect();
                let stored = build_stored_replay(
                    &self.pt_train,
                    &ids,
                    self.world.relation_count(),
                    *rule,
                    stage_seed(self.seed, "replay"),
                )?;
                Some(stored.corpus.training_samples())
            }
            _ => None,
        };
        let fisher = match method {
            ContinualMethod::Ewc { .. } => Some(fisher_importance(&self.params, &self.pt_train)?),
            _ => None,
        };
        let hooks = EvalHooks {
            original: &self.pt_train,
            continual: &self.cpt_train,
            every: (steps / 25).max(1),
            query: self.world.query,
        };
        let cfg = CptConfig {
            train: TRAIN,
            stop: StopRule::Fixed(steps),
            max_steps: steps,
            extra_steps: 0,
            seed: stage_seed(self.seed, "cpt"),
        };
        let (_, traj) =
            run_cpt(self.params.clone(), &self.cpt_train, replay.as_deref(), &method, fisher.as_deref(), &cfg, &hooks)?;
        let curve = traj.rows.iter().map(|r| CurvePoint { step: r.step, a: r.original.hfta, b: r.continual.hfta }).collect();
        Ok(Forgetting { method: method.label(), curve })
    }
}

/// Largest per-token drift `|Q(T) - Q(0)| / (1 + |Q(0)|)` for each learning
/// rate in `lrs` (used for both Y and z). The first rate runs `steps` steps;
/// the others run proportionally longer so every run covers the same
/// integrated time `lr * T`.
pub fn drift_sweep(seed: u64, lrs: &[f64], steps: u64) -> Result<Vec<DriftPoint>> {
    let Some(&lr0) = lrs.first() else { return Ok(Vec::new()) };
    let world = gen_world(&world_config(20), stage_seed(seed, "world"))?;
    let samples = render_corpus(&world, Augmentation::OneAug, 1, stage_seed(seed, "render"))?.split(Split::PT_TRAIN);
    let mut out = Vec::new();
    for &lr in lrs {
        let cfg = TrainConfig { lr_y: lr, lr_z: lr, ..TRAIN };
        cfg.validate()?;
        let mut params = init_params(world.vocab_size, 0.1, AttentionVariant::Linear, stage_seed(seed, "init"))?;
        let q0 = conserved_quantity(&params, lr, lr)?;
        let mut rng = stage_rng(seed, "drift");
        let n = (steps as f64 * lr0 / lr).round() as u64;
        for step in 0..n {
            let i = rng.gen_range(0..samples.len());
            sgd_step(&mut params, &samples[i], &cfg, None, step)?;
        }
        let q1 = conserved_quantity(&params, lr, lr)?;
        let max_drift = q0.iter().zip(&q1).map(|(a, b)| (b - a).abs() / (1.0 + a.abs())).fold(0.0, f64::max);
        out.push(DriftPoint { lr, steps: n, max_drift });
    }
    Ok(out)
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

/// Browser handle to a [`Lab`].
#[wasm_bindgen(js_name = Lab)]
pub struct WasmLab(Lab);

#[wasm_bindgen(js_class = Lab)]
impl WasmLab {
    /// Builds a world and pre-trains on it. `variant` is `linear`, `softmax`
    /// or `exponential`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, individuals: u32, variant: &str, steps: u32) -> std::result::Result<WasmLab, JsError> {
        Lab::build(seed as u64, individuals, variant, steps as u64).map(WasmLab).map_err(js_err)
    }

    /// Pre-training curve as JSON `[{step, a, b}]`.
    #[wasm_bindgen(js_name = pretrainCurve)]
    pub fn pretrain_curve(&self) -> std::result::Result<String, JsError> {
        to_json(&self.0.curve)
    }

    #[wasm_bindgen(js_name = vocabSize)]
    pub fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    /// JSON `{points: [{token, role, di, attention}], pearson, spearman}`.
    pub fn scatter(&self) -> std::result::Result<String, JsError> {
        to_json(&self.0.scatter().map_err(js_err)?)
    }

    /// JSON `{method, curve: [{step, a, b}]}`.
    pub fn forgetting(&self, method: &str, strength: f64, steps: u32) -> std::result::Result<String, JsError> {
        to_json(&self.0.forgetting(method, strength, steps as u64).map_err(js_err)?)
    }
}

/// JSON `[{lr, max_drift}]` for the given learning rates.
#[wasm_bindgen(js_name = conservedDrift)]
pub fn conserved_drift(seed: u32, lrs: Vec<f64>, steps: u32) -> std::result::Result<String, JsError> {
    to_json(&drift_sweep(seed as u64, &lrs, steps as u64).map_err(js_err)?)
}
