use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ContinualMethod;
use crate::corpus::{compute_weighted_stats, CorpusStats, Sample, Token};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricRecord};
use crate::model::{
    apply_gradient, gradient, loss, shrink_factor, AttentionVariant, ModelParams, Regularizer, StepInfo, TrainConfig,
};
use crate::seed;
use crate::theory::conserved_quantity;

/// SGD driver with a lazily applied EWC penalty.
///
/// The penalty touches every entry of `Y` on every step. Between two steps
/// that touch a column, that column only shrinks toward its reference by a
/// constant per-entry factor, so the shrink is deferred and applied as one
/// power when the column is next read. The result equals the dense update.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParams,
    cfg: TrainConfig,
    reg: Option<Regularizer>,
    /// Per column: the step from which shrinks are still pending.
    synced: Vec<u64>,
    step: u64,
    pub negative_attention_steps: u64,
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: TrainConfig, reg: Option<Regularizer>) -> Result<Self> {
        cfg.validate()?;
        let d = params.dim();
        if let Some(r) = &reg {
            if r.weights.len() != d * d || r.reference.len() != d * d {
                return Err(Error::Config("regularizer shape does not match Y".into()));
            }
            if !(r.k >= 0.0) || r.weights.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::Config("regularizer needs k >= 0 and w >= 0".into()));
            }
        }
        // k = 0 takes exactly the unregularized path
        let reg = reg.filter(|r| r.k != 0.0 && cfg.update_y);
        Ok(Self { params, cfg, reg, synced: vec![0; d], step: 0, negative_attention_steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn catch_up(&mut self, s: Token) {
        let Some(r) = &self.reg else { return };
        let si = s as usize;
        let n = self.step - self.synced[si];
        if n == 0 {
            return;
        }
        let d = self.params.dim();
        let base = si * d;
        let col = self.params.column_mut(s);
        for (o, y) in col.iter_mut().enumerate() {
            let w = r.weights[base + o];
            if w != 0.0 {
                let f = shrink_factor(self.cfg.lr_y, r.k, w).powi(n.min(i32::MAX as u64) as i32);
                let yr = r.reference[base + o];
                *y = yr + (*y - yr) * f;
            }
        }
        self.synced[si] = self.step;
    }

    fn shrink_once(&mut self, s: Token) {
        let Some(r) = &self.reg else { return };
        let d = self.params.dim();
        let base = s as usize * d;
        let col = self.params.column_mut(s);
        for (o, y) in col.iter_mut().enumerate() {
            let w = r.weights[base + o];
            if w != 0.0 {
                let yr = r.reference[base + o];
                *y = yr + (*y - yr) * shrink_factor(self.cfg.lr_y, r.k, w);
            }
        }
    }

    /// One SGD step on one sample.
    pub fn step(&mut self, sample: &Sample) -> Result<StepInfo> {
        self.step_batch(&[sample])
    }

    /// One step on the mean gradient of `batch`; returns the mean pre-step loss.
    pub fn step_batch(&mut self, batch: &[&Sample]) -> Result<StepInfo> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut touched: Vec<Token> = batch.iter().flat_map(|s| s.occurrences.iter().map(|&(t, _)| t)).collect();
        touched.sort_unstable();
        touched.dedup();
        if self.reg.is_some() {
            for &t in &touched {
                self.catch_up(t);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = Vec::with_capacity(batch.len());
        let mut total = 0.0;
        for s in batch {
            let (pred, g) = gradient(&self.params, &s.prompt, s.gold())?;
            let finite = g.y.iter().all(|(_, c)| c.iter().all(|v| v.is_finite())) && g.z.iter().all(|(_, v)| v.is_finite());
            if !finite {
                return Err(Error::NonFinite { step: self.step });
            }
            total += loss(&pred, s.gold());
            grads.push(g);
        }
        for g in &grads {
            apply_gradient(&mut self.params, g, &self.cfg, scale);
        }
        if self.reg.is_some() {
            for &t in &touched {
                self.shrink_once(t);
                self.synced[t as usize] = self.step + 1;
            }
        }
        self.step += 1;
        let negative_attention =
            self.params.variant == AttentionVariant::Linear && touched.iter().any(|&t| self.params.z()[t as usize] < 0.0);
        if negative_attention {
            self.negative_attention_steps += 1;
        }
        Ok(StepInfo { loss: total * scale, negative_attention })
    }

    /// Applies every pending shrink.
    pub fn sync(&mut self) {
        if self.reg.is_none() {
            return;
        }
        for s in 0..self.params.dim() as Token {
            self.catch_up(s);
        }
    }

    pub fn params(&mut self) -> &ModelParams {
        self.sync();
        &self.params
    }

    pub fn into_params(mut self) -> ModelParams {
        self.sync();
        self.params
    }
}

/// Cycles through a sample set in freshly shuffled epochs.
struct Stream<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> Stream<'a> {
    fn new(samples: &'a [Sample], rng: ChaCha8Rng) -> Self {
        Self { samples, order: (0..samples.len()).collect(), pos: samples.len(), rng }
    }

    fn next(&mut self) -> &'a Sample {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        &self.samples[self.order[self.pos - 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum StopRule {
    Fixed(u64),
    ContinualHfta(f64),
    ContinualSfta(f64),
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::ContinualHfta(0.95)
    }
}

impl StopRule {
    fn met(&self, step: u64, continual: &MetricRecord) -> bool {
        match *self {
            StopRule::Fixed(n) => step >= n,
            StopRule::ContinualHfta(t) => continual.hfta >= t,
            StopRule::ContinualSfta(t) => continual.sfta >= t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CptConfig {
    pub train: TrainConfig,
    pub stop: StopRule,
    /// Hard cap on steps for the metric gates.
    pub max_steps: u64,
    /// Keep training this many steps after the gate is met.
    pub extra_steps: u64,
    pub seed: u64,
}

impl Default for CptConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), stop: StopRule::default(), max_steps: 200_000, extra_steps: 0, seed: 0 }
    }
}

/// Read-only evaluation schedule for a run.
#[derive(Debug, Clone, Copy)]
pub struct EvalHooks<'a> {
    /// Pre-training knowledge.
    pub original: &'a [Sample],
    /// Knowledge being acquired.
    pub continual: &'a [Sample],
    pub every: u64,
    pub query: Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub original: MetricRecord,
    pub continual: MetricRecord,
    /// Mean over tokens of `|Q_s(t) - Q_s(0)|`; absent for softmax attention.
    pub q_drift: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// First logged step at which the stop rule held.
    pub gate_step: Option<u64>,
    pub steps: u64,
    pub cpt_draws: u64,
    pub replay_draws: u64,
    pub negative_attention_steps: u64,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn realized_alpha(&self) -> f64 {
        self.cpt_draws as f64 / (self.cpt_draws + self.replay_draws).max(1) as f64
    }

    /// Row at the gate, or the last row.
    pub fn at_gate(&self) -> Option<&TrajectoryRow> {
        match self.gate_step {
            Some(s) => self.rows.iter().find(|r| r.step == s),
            None => self.rows.last(),
        }
    }

    /// Trapezoid area under original hFTA over steps, divided by the span.
    pub fn original_hfta_auc(&self) -> f64 {
        area(&self.rows.iter().map(|r| (r.step as f64, r.original.hfta)).collect::<Vec<_>>())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "step",
            "loss",
            "original_hFTA",
            "original_sFTA",
            "original_EM",
            "continual_hFTA",
            "continual_sFTA",
            "continual_EM",
            "mean_abs_Q_drift",
        ])?;
        for r in &self.rows {
            wr.write_record([
                r.step.to_string(),
                r.continual.loss.to_string(),
                r.original.hfta.to_string(),
                r.original.sfta.to_string(),
                r.original.em.to_string(),
                r.continual.hfta.to_string(),
                r.continual.sfta.to_string(),
                r.continual.em.to_string(),
                r.q_drift.map_or(String::new(), |q| q.to_string()),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn area(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return points.first().map_or(0.0, |p| p.1);
    }
    let mut a = 0.0;
    for w in points.windows(2) {
        a += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    a / (points.last().unwrap().0 - points[0].0)
}

fn conserved(params: &ModelParams, cfg: &TrainConfig) -> Option<Vec<f64>> {
    if cfg.lr_y > 0.0 && cfg.lr_z > 0.0 {
        conserved_quantity(params, cfg.lr_y, cfg.lr_z).ok()
    } else {
        None
    }
}

fn checkpoint(
    params: &ModelParams,
    hooks: &EvalHooks,
    step: u64,
    q0: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<TrajectoryRow> {
    let original = evaluate(params, hooks.original, hooks.query, "original", step)?;
    let continual = evaluate(params, hooks.continual, hooks.query, "continual", step)?;
    let q_drift = q0.and_then(|q0| {
        conserved(params, cfg).map(|q| q.iter().zip(q0).map(|(a, b)| (a - b).abs()).sum::<f64>() / q.len() as f64)
    });
    Ok(TrajectoryRow { step, original, continual, q_drift })
}

/// Continual pre-training from `params` on `cpt`.
///
/// Each step draws a CPT sample with probability `alpha` and a replay sample
/// otherwise, each from its own shuffled stream, so `alpha = 1` reproduces
/// plain training on the CPT corpus. EWC needs `importance` (see
/// [`super::fisher_importance`]); the reference is `Y` at the start of the run.
pub fn run_cpt(
    params: ModelParams,
    cpt: &[Sample],
    replay: Option<&[Sample]>,
    method: &ContinualMethod,
    importance: Option<&[f64]>,
    cfg: &CptConfig,
    hooks: &EvalHooks,
) -> Result<(ModelParams, Trajectory)> {
    method.validate()?;
    if cpt.is_empty() {
        return Err(Error::Empty("CPT corpus"));
    }
    if hooks.every == 0 {
        return Err(Error::Config("evaluation interval must be >= 1".into()));
    }
    let mut traj = Trajectory::default();
    let alpha = method.alpha();
    let replay = match (method.uses_replay(), replay) {
        (true, None) => return Err(Error::Empty("replay corpus")),
        (true, Some([])) => return Err(Error::Empty("replay corpus")),
        (true, Some(r)) => Some(r),
        (false, Some(r)) if !r.is_empty() => {
            traj.warnings.push(format!("replay corpus of {} samples ignored by method {}", r.len(), method.label()));
            None
        }
        (false, _) => None,
    };
    if alpha == 1.0 && replay.is_some() {
        traj.warnings.push("alpha = 1 with a replay corpus: replay is never drawn".into());
    }
    let reg = match method {
        ContinualMethod::Ewc { k } => {
            let w = importance.ok_or_else(|| Error::Config("EWC needs importance weights".into()))?;
            Some(Regularizer { k: *k, weights: w.to_vec(), reference: params.y_columns().to_vec() })
        }
        _ => None,
    };
    let q0 = conserved(&params, &cfg.train);
    let mut trainer = Trainer::new(params, cfg.train, reg)?;
    let mut mix_rng = seed::rng(seed::stage_seed(cfg.seed, "cpt-mix"));
    let mut cpt_stream = Stream::new(cpt, seed::rng(seed::stage_seed(cfg.seed, "cpt-samples")));
    let mut replay_stream = replay.map(|r| Stream::new(r, seed::rng(seed::stage_seed(cfg.seed, "replay-samples"))));

    let limit = match cfg.stop {
        StopRule::Fixed(n) => n,
        _ => cfg.max_steps,
    };
    let mut stop_at: Option<u64> = None;
    loop {
        let step = trainer.steps();
        if step % hooks.every == 0 || Some(step) == stop_at || step == limit {
            let row = checkpoint(trainer.params(), hooks, step, q0.as_deref(), &cfg.train)?;
            if traj.gate_step.is_none() && cfg.stop.met(step, &row.continual) {
                traj.gate_step = Some(step);
                stop_at = Some(step + cfg.extra_steps);
            }
            traj.rows.push(row);
        }
        if stop_at.is_some_and(|s| step >= s) || step >= limit.max(stop_at.unwrap_or(0)) {
            break;
        }
        let batch: Vec<&Sample> = (0..cfg.train.batch_size)
            .map(|_| {
                let from_cpt = replay_stream.is_none() || mix_rng.gen_bool(alpha);
                if from_cpt {
                    traj.cpt_draws += 1;
                    cpt_stream.next()
                } else {
                    traj.replay_draws += 1;
                    replay_stream.as_mut().expect("checked").next()
                }
            })
            .collect();
        trainer.step_batch(&batch)?;
    }
    traj.steps = trainer.steps();
    traj.negative_attention_steps = trainer.negative_attention_steps;
    Ok((trainer.into_params(), traj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Stop once training-set hFTA reaches this value.
    pub gate: Option<f64>,
    pub extra_steps: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), max_steps: 200_000, eval_every: 2_000, gate: None, extra_steps: 0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    /// `original` holds training-set metrics and `continual` held-out metrics.
    pub curve: Trajectory,
    /// Parameters at logged steps that are multiples of the requested
    /// interval, plus the last step.
    pub checkpoints: Vec<(u64, ModelParams)>,
}

/// Plain SGD over shuffled epochs of `train`, logging train and test metrics.
pub fn pretrain(
    params: ModelParams,
    train: &[Sample],
    test: &[Sample],
    query: Token,
    cfg: &PretrainConfig,
    checkpoint_every: Option<u64>,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if cfg.eval_every == 0 {
        return Err(Error::Config("eval_every must be >= 1".into()));
    }
    let test = if test.is_empty() { train } else { test };
    let hooks = EvalHooks { original: train, continual: test, every: cfg.eval_every, query };
    let q0 = conserved(&params, &cfg.train);
    let mut trainer = Trainer::new(params, cfg.train, None)?;
    let mut stream = Stream::new(train, seed::rng(seed::stage_seed(cfg.seed, "pretrain-samples")));
    let mut curve = Trajectory::default();
    let mut checkpoints = Vec::new();
    let mut stop_at: Option<u64> = None;
    loop {
        let step = trainer.steps();
        if step % cfg.eval_every == 0 || Some(step) == stop_at || step == cfg.max_steps {
            let row = checkpoint(trainer.params(), &hooks, step, q0.as_deref(), &cfg.train)?;
            if curve.gate_step.is_none() && cfg.gate.is_some_and(|g| row.original.hfta >= g) {
                curve.gate_step = Some(step);
                stop_at = Some(step + cfg.extra_steps);
            }
            let last = stop_at.is_some_and(|s| step >= s) || step >= cfg.max_steps;
            if checkpoint_every.is_some_and(|k| k > 0 && (step % k == 0 || last)) {
                checkpoints.push((step, trainer.params().clone()));
            }
            curve.rows.push(row);
        }
        if stop_at.is_some_and(|s| step >= s) || step >= cfg.max_steps {
            break;
        }
        let batch: Vec<&Sample> = (0..cfg.train.batch_size).map(|_| stream.next()).collect();
        trainer.step_batch(&batch)?;
        curve.cpt_draws += batch.len() as u64;
    }
    curve.steps = trainer.steps();
    curve.negative_attention_steps = trainer.negative_attention_steps;
    Ok(PretrainOutcome { params: trainer.into_params(), curve, checkpoints })
}

/// Stats of the training mixture: CPT samples carry total weight `alpha`,
/// replay samples `1 - alpha`.
pub fn mixture_stats(cpt: &[Sample], replay: &[Sample], alpha: f64) -> Result<CorpusStats> {
    let wc = if cpt.is_empty() { 0.0 } else { alpha / cpt.len() as f64 };
    let wr = if replay.is_empty() { 0.0 } else { (1.0 - alpha) / replay.len() as f64 };
    compute_weighted_stats(cpt.iter().map(|s| (s, wc)).chain(replay.iter().map(|s| (s, wr))))
}

/// Frequency prediction for token `s` under replay ratio `alpha`:
/// `(1 - alpha) * mean_{o in O_s_old} x_o + alpha * mean_{o in O_s_new} x_o`,
/// with `O_s` taken as multisets. A side where `s` never occurs drops out.
pub fn mixture_prediction(old: &CorpusStats, new: &CorpusStats, s: Token, alpha: f64, d: usize) -> Result<Vec<f64>> {
    let dist = |st: &CorpusStats| -> Option<Vec<f64>> {
        let objs = st.assoc_objects(s)?;
        let total: f64 = objs.values().sum();
        let mut v = vec![0.0; d];
        for (&o, &c) in objs {
            v[o as usize] = c / total;
        }
        Some(v)
    };
    match (dist(old), dist(new)) {
        (Some(a), Some(b)) => Ok(a.iter().zip(&b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::UnseenToken(s)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::model::{init_params, sgd_step};

    fn corpus() -> Vec<Sample> {
        (0..12u32).map(|i| Sample::new(vec![i % 4, 4 + i % 3, 9], vec![10 + i % 5], i, 0, Split::CPT_TRAIN)).collect()
    }

    #[test]
    fn lazy_penalty_matches_dense() {
        let p0 = init_params(16, 0.5, AttentionVariant::Linear, 1).unwrap();
        let cfg = TrainConfig { lr_y: 0.3, lr_z: 0.05, ..Default::default() };
        let mut rng = seed::rng(5);
        let weights: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..2.0)).collect();
        let reg = Regularizer { k: 0.7, weights, reference: p0.y_columns().iter().map(|y| y * 0.5).collect() };
        let data = corpus();
        let mut dense = p0.clone();
        let mut lazy = Trainer::new(p0, cfg, Some(reg.clone())).unwrap();
        for t in 0..200 {
            let s = &data[(t * 7) % data.len()];
            sgd_step(&mut dense, s, &cfg, Some(&reg), t as u64).unwrap();
            lazy.step(s).unwrap();
        }
        let lazy = lazy.into_params();
        let diff = dense.y_columns().iter().zip(lazy.y_columns()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        let dz = dense.z().iter().zip(lazy.z()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dz < 1e-12, "{dz}");
    }

    #[test]
    fn stop_rules() {
        let m = MetricRecord { split: "c".into(), step: 0, hfta: 0.96, sfta: 0.5, em: 0.96, loss: 0.1, count: 1 };
        assert!(StopRule::ContinualHfta(0.95).met(0, &m));
        assert!(!StopRule::ContinualSfta(0.9).met(0, &m));
        assert!(StopRule::Fixed(10).met(10, &m) && !StopRule::Fixed(10).met(9, &m));
    }

    #[test]
    fn area_of_constant() {
        assert!((area(&[(0.0, 0.5), (10.0, 0.5), (30.0, 0.5)]) - 0.5).abs() < 1e-15);
        assert!((area(&[(0.0, 1.0), (10.0, 0.0)]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixture_formula() {
        let old = vec![
            Sample::new(vec![0, 9], vec![1], 0, 0, Split::PT_TRAIN),
            Sample::new(vec![0, 9], vec![2], 1, 0, Split::PT_TRAIN),
        ];
        let new = vec![Sample::new(vec![0, 9], vec![3], 2, 0, Split::CPT_TRAIN)];
        let so = crate::corpus::compute_stats(&old).unwrap();
        let sn = crate::corpus::compute_stats(&new).unwrap();
        let p = mixture_prediction(&so, &sn, 0, 0.8, 10).unwrap();
        assert!((p[1] - 0.1).abs() < 1e-12 && (p[2] - 0.1).abs() < 1e-12 && (p[3] - 0.8).abs() < 1e-12);
        assert!(mixture_prediction(&so, &sn, 5, 0.8, 10).is_err());
    }
}
