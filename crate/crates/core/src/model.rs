//! The reparameterized single-layer transformer.
//!
//! The model is a logit matrix `Y` (`D x D`, entry `y[o, s]` is how much
//! prompt token `s` supports output `o`) and an attention pre-activation
//! vector `z` (the query-token column of the key/query product; the query
//! token is unique and fixed, so no other column is ever read). For a prompt
//! `x_1..x_n` the pooled logit of `o` is `sum_l a_l * y[o, x_l]` where the
//! per-position weight `a_l` depends on the attention variant.
//!
//! `Y` is stored column-major internally (one contiguous length-`D` column per
//! prompt token) because both the forward pass and the update touch whole
//! columns. Snapshots on disk are row-major.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, Token};
use crate::error::{Error, Result};
use crate::seed;

pub const LOG_FLOOR: f64 = 1e-300;
const SNAPSHOT_MAGIC: &[u8; 8] = b"CFKAPRM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    /// `a_l = z[x_l]`, no normalization.
    Linear,
    /// `a_l = exp(z[x_l]) / sum_l' exp(z[x_l'])`.
    Softmax,
    /// `a_l = exp(z[x_l])`, no normalization.
    Exponential,
}

impl AttentionVariant {
    fn tag(self) -> u64 {
        match self {
            AttentionVariant::Linear => 0,
            AttentionVariant::Softmax => 1,
            AttentionVariant::Exponential => 2,
        }
    }

    fn from_tag(t: u64) -> Option<Self> {
        match t {
            0 => Some(AttentionVariant::Linear),
            1 => Some(AttentionVariant::Softmax),
            2 => Some(AttentionVariant::Exponential),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    d: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    pub variant: AttentionVariant,
    pub init_scale: f64,
}

impl ModelParams {
    pub fn zeros(d: usize, variant: AttentionVariant) -> Self {
        Self { d, y: vec![0.0; d * d], z: vec![0.0; d], variant, init_scale: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `y[., s]`: the support of token `s` for every output.
    pub fn column(&self, s: Token) -> &[f64] {
        let s = s as usize;
        &self.y[s * self.d..(s + 1) * self.d]
    }

    pub fn column_mut(&mut self, s: Token) -> &mut [f64] {
        let s = s as usize;
        &mut self.y[s * self.d..(s + 1) * self.d]
    }

    pub fn y(&self, o: Token, s: Token) -> f64 {
        self.y[s as usize * self.d + o as usize]
    }

    pub fn set_y(&mut self, o: Token, s: Token, v: f64) {
        self.y[s as usize * self.d + o as usize] = v;
    }

    /// Column-major view of `Y` (`[s * D + o]`).
    pub fn y_columns(&self) -> &[f64] {
        &self.y
    }

    pub fn y_columns_mut(&mut self) -> &mut [f64] {
        &mut self.y
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn z_mut(&mut self) -> &mut [f64] {
        &mut self.z
    }

    /// Unnormalized per-token attention score: `z_s` for the linear variant,
    /// `exp(z_s)` otherwise.
    pub fn token_score(&self, s: Token) -> f64 {
        let z = self.z[s as usize];
        match self.variant {
            AttentionVariant::Linear => z,
            AttentionVariant::Softmax | AttentionVariant::Exponential => z.exp(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().chain(&self.z).all(|v| v.is_finite())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.d) {
            Some(&t) => Err(Error::TokenOutOfRange { token: t, vocab: self.d }),
            None => Ok(()),
        }
    }
}

/// `Y ~ U[-eps, eps]`, `z ~ U[0, eps]`.
pub fn init_params(d: usize, eps: f64, variant: AttentionVariant, seed: u64) -> Result<ModelParams> {
    if d < 2 {
        return Err(Error::Config("vocabulary size must be >= 2".into()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Config("init scale must be finite and >= 0".into()));
    }
    let mut p = ModelParams::zeros(d, variant);
    p.init_scale = eps;
    if eps > 0.0 {
        let mut rng = seed::rng(seed);
        for v in p.y.iter_mut() {
            *v = rng.gen_range(-eps..=eps);
        }
        for v in p.z.iter_mut() {
            *v = rng.gen_range(0.0..=eps);
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Attention weight per prompt position.
    pub attention: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Greedy prediction, ties broken by lowest token id.
    pub fn argmax(&self) -> Token {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> Token {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as Token
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn position_attention(params: &ModelParams, prompt: &[Token]) -> Vec<f64> {
    let z = |t: Token| params.z[t as usize];
    match params.variant {
        AttentionVariant::Linear => prompt.iter().map(|&t| z(t)).collect(),
        AttentionVariant::Exponential => prompt.iter().map(|&t| z(t).exp()).collect(),
        AttentionVariant::Softmax => {
            let pre: Vec<f64> = prompt.iter().map(|&t| z(t)).collect();
            softmax(&pre)
        }
    }
}

pub fn forward(params: &ModelParams, prompt: &[Token]) -> Result<Prediction> {
    params.check_tokens(prompt)?;
    let attention = position_attention(params, prompt);
    let mut logits = vec![0.0; params.d];
    for (&t, &a) in prompt.iter().zip(&attention) {
        if a == 0.0 {
            continue;
        }
        for (l, y) in logits.iter_mut().zip(params.column(t)) {
            *l += a * y;
        }
    }
    let probs = softmax(&logits);
    Ok(Prediction { attention, logits, probs })
}

/// Cross-entropy on the first object token.
pub fn loss(prediction: &Prediction, gold: Token) -> f64 {
    -prediction.probs[gold as usize].max(LOG_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_y: f64,
    pub lr_z: f64,
    pub update_y: bool,
    pub update_z: bool,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr_y: 0.5, lr_z: 0.05, update_y: true, update_z: true, batch_size: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_y >= 0.0 && self.lr_y.is_finite() && self.lr_z >= 0.0 && self.lr_z.is_finite()) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// True when the rates sit in the `lr_y >= lr_z >= 0` regime the
    /// separate-timescale analysis assumes.
    pub fn in_theory_regime(&self) -> bool {
        self.lr_y >= self.lr_z && self.lr_z >= 0.0
    }
}

/// Quadratic pull of `Y` toward a reference, weighted per entry:
/// adds `k/2 * sum w (y - y_ref)^2` to the loss. See [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub k: f64,
    /// Same column-major layout as `Y`.
    pub weights: Vec<f64>,
    pub reference: Vec<f64>,
}

/// Loss gradient restricted to the tokens present in a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// `(s, dL/dy[., s])` for every distinct prompt token.
    pub y: Vec<(Token, Vec<f64>)>,
    /// `(s, dL/dz_s)`.
    pub z: Vec<(Token, f64)>,
}

impl Gradient {
    fn is_finite(&self) -> bool {
        self.y.iter().all(|(_, g)| g.iter().all(|v| v.is_finite())) && self.z.iter().all(|(_, g)| g.is_finite())
    }
}

/// Analytic gradient of the cross-entropy loss for one prompt.
///
/// With residual `r = onehot(gold) - p` and `A_s` the total attention on
/// token `s` (for the linear variant `A_s = delta_s * z_s`):
///
/// * `dL/dy[o, s] = -A_s * r_o`
/// * linear/exponential: `dL/dz_s = -A_s' * v_s`, with `A_s' = delta_s` (linear)
///   or `A_s` (exponential) and `v_s = sum_o r_o y[o, s]`
/// * softmax: `dL/dz_s = -A_s * (v_s - sum_l a_l v_{x_l})`
pub fn gradient(params: &ModelParams, prompt: &[Token], gold: Token) -> Result<(Prediction, Gradient)> {
    params.check_tokens(&[gold])?;
    let pred = forward(params, prompt)?;
    let d = params.d;
    let mut resid = pred.probs.iter().map(|p| -p).collect::<Vec<_>>();
    resid[gold as usize] += 1.0;

    // distinct tokens with their total attention and multiplicity
    let mut tokens: Vec<(Token, f64, u32)> = Vec::new();
    for (&t, &a) in prompt.iter().zip(&pred.attention) {
        match tokens.iter_mut().find(|e| e.0 == t) {
            Some(e) => {
                e.1 += a;
                e.2 += 1;
            }
            None => tokens.push((t, a, 1)),
        }
    }
    tokens.sort_by_key(|e| e.0);

    let v: Vec<f64> = tokens.iter().map(|&(t, _, _)| params.column(t).iter().zip(&resid).map(|(y, r)| y * r).sum()).collect();
    let vbar: f64 = match params.variant {
        AttentionVariant::Softmax => tokens.iter().zip(&v).map(|(e, vs)| e.1 * vs).sum(),
        _ => 0.0,
    };

    let mut gy = Vec::with_capacity(tokens.len());
    let mut gz = Vec::with_capacity(tokens.len());
    for (&(t, a_tot, delta), &vs) in tokens.iter().zip(&v) {
        let col: Vec<f64> = resid.iter().map(|r| -a_tot * r).collect();
        debug_assert_eq!(col.len(), d);
        gy.push((t, col));
        let g = match params.variant {
            AttentionVariant::Linear => -(delta as f64) * vs,
            AttentionVariant::Exponential => -a_tot * vs,
            AttentionVariant::Softmax => -a_tot * (vs - vbar),
        };
        gz.push((t, g));
    }
    Ok((pred, Gradient { y: gy, z: gz }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Loss before the update.
    pub loss: f64,
    /// Some active linear-variant attention score is negative after the step.
    pub negative_attention: bool,
}

/// `params -= scale * lr * g` under the update mask.
pub fn apply_gradient(params: &mut ModelParams, g: &Gradient, cfg: &TrainConfig, scale: f64) {
    if cfg.update_y {
        for (t, col) in &g.y {
            let lr = cfg.lr_y * scale;
            for (y, gv) in params.column_mut(*t).iter_mut().zip(col) {
                *y -= lr * gv;
            }
        }
    }
    if cfg.update_z {
        for &(t, gv) in &g.z {
            params.z[t as usize] -= cfg.lr_z * scale * gv;
        }
    }
}

/// Per-entry factor `1 / (1 + lr_y * k * w)` by which the regularizer
/// shrinks `y - y_ref` in one step.
pub fn shrink_factor(lr_y: f64, k: f64, w: f64) -> f64 {
    1.0 / (1.0 + lr_y * k * w)
}

/// One regularizer-only step over the whole of `Y` (no data gradient).
pub fn apply_regularizer(params: &mut ModelParams, reg: &Regularizer, lr_y: f64) {
    if reg.k == 0.0 {
        return;
    }
    for ((y, w), r) in params.y.iter_mut().zip(&reg.weights).zip(&reg.reference) {
        if *w != 0.0 {
            *y = r + (*y - r) * shrink_factor(lr_y, reg.k, *w);
        }
    }
}

/// One SGD step on a single sample. `step` is only used for error reports.
///
/// With a regularizer the penalty gradient `k * w * (y - y_ref)` is taken at
/// the post-step point (a proximal step):
/// `y+ = y_ref + (y - lr_y * g - y_ref) / (1 + lr_y * k * w)`.
/// To first order this is the explicit update `y - lr_y * (g + k w (y - y_ref))`,
/// but it stays stable for any `k`, and `k -> inf` pins `y` to the reference.
pub fn sgd_step(
    params: &mut ModelParams,
    sample: &Sample,
    cfg: &TrainConfig,
    reg: Option<&Regularizer>,
    step: u64,
) -> Result<StepInfo> {
    let (pred, g) = gradient(params, &sample.prompt, sample.gold())?;
    if !g.is_finite() {
        return Err(Error::NonFinite { step });
    }
    let info_loss = loss(&pred, sample.gold());
    apply_gradient(params, &g, cfg, 1.0);
    if let Some(r) = reg.filter(|r| r.k != 0.0 && cfg.update_y) {
        apply_regularizer(params, r, cfg.lr_y);
    }
    let negative_attention =
        params.variant == AttentionVariant::Linear && sample.occurrences.iter().any(|&(t, _)| params.z[t as usize] < 0.0);
    Ok(StepInfo { loss: info_loss, negative_attention })
}

/// One step on the mean gradient of a batch. Returns the mean pre-step loss.
pub fn sgd_step_batch(params: &mut ModelParams, batch: &[&Sample], cfg: &TrainConfig, step: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let grads: Vec<(f64, Gradient)> = batch
        .iter()
        .map(|s| gradient(params, &s.prompt, s.gold()).map(|(p, g)| (loss(&p, s.gold()), g)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (l, g) in &grads {
        if !g.is_finite() {
            return Err(Error::NonFinite { step });
        }
        total += l;
        apply_gradient(params, g, cfg, scale);
    }
    Ok(total * scale)
}

pub fn mean_loss(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += loss(&forward(params, &s.prompt)?, s.gold());
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// `-1` disables top-k truncation.
    pub top_k: i64,
    pub repetition_penalty: f64,
    pub max_tokens: usize,
    /// Argmax decoding, the zero-temperature limit.
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, top_k: -1, repetition_penalty: 1.05, max_tokens: 1, greedy: false }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        if !(self.temperature > 0.0) && !self.greedy {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        if self.top_k == 0 || self.top_k < -1 {
            return Err(Error::Config("top_k must be -1 or >= 1".into()));
        }
        if !(self.repetition_penalty > 0.0) {
            return Err(Error::Config("repetition_penalty must be > 0".into()));
        }
        Ok(())
    }
}

/// Penalizes already-emitted tokens: positive logits are divided by the
/// penalty, negative ones multiplied.
pub fn apply_repetition_penalty(logits: &mut [f64], emitted: &[Token], penalty: f64) {
    let mut seen = emitted.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for t in seen {
        let l = &mut logits[t as usize];
        *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
    }
}

/// Turns logits into the truncated sampling distribution used by [`decode`].
pub fn sampling_distribution(logits: &[f64], cfg: &DecodeConfig) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let mut probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = probs.len();
    if cfg.top_k > 0 {
        keep = keep.min(cfg.top_k as usize);
    }
    if cfg.top_p < 1.0 {
        let mut cum = 0.0;
        for (i, &idx) in order.iter().enumerate() {
            cum += probs[idx];
            if cum >= cfg.top_p {
                keep = keep.min(i + 1);
                break;
            }
        }
    }
    for &idx in &order[keep..] {
        probs[idx] = 0.0;
    }
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

/// Autoregressive sampling of object tokens after `context`.
///
/// Each step runs the model on `context ++ emitted ++ [query]`. A trailing
/// query token on `context` is dropped first so the query only ever sits at
/// the end.
pub fn decode<R: Rng>(
    params: &ModelParams,
    context: &[Token],
    query: Token,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<Token>> {
    cfg.validate()?;
    let mut seq: Vec<Token> = context.to_vec();
    if seq.last() == Some(&query) {
        seq.pop();
    }
    if seq.is_empty() {
        return Err(Error::Empty("decode context"));
    }
    let start = seq.len();
    for _ in 0..cfg.max_tokens {
        seq.push(query);
        let pred = forward(params, &seq)?;
        seq.pop();
        let mut logits = pred.logits;
        if cfg.repetition_penalty != 1.0 {
            apply_repetition_penalty(&mut logits, &seq[start..], cfg.repetition_penalty);
        }
        let next = if cfg.greedy {
            argmax(&logits)
        } else {
            let probs = sampling_distribution(&logits, cfg);
            let dist = WeightedIndex::new(&probs).map_err(|e| Error::Config(format!("decode: {e}")))?;
            dist.sample(rng) as Token
        };
        seq.push(next);
    }
    Ok(seq.split_off(start))
}

/// Header (magic, `D`, variant tag, init scale), `Y` row-major, then `z`;
/// every number little-endian 64-bit.
pub fn write_params<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_u64::<LittleEndian>(params.d as u64)?;
    w.write_u64::<LittleEndian>(params.variant.tag())?;
    w.write_f64::<LittleEndian>(params.init_scale)?;
    for o in 0..params.d {
        for s in 0..params.d {
            w.write_f64::<LittleEndian>(params.y[s * params.d + o])?;
        }
    }
    for &z in &params.z {
        w.write_f64::<LittleEndian>(z)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Parse { line: 0, msg: "bad snapshot magic".into() });
    }
    let d = r.read_u64::<LittleEndian>()? as usize;
    let variant = AttentionVariant::from_tag(r.read_u64::<LittleEndian>()?)
        .ok_or_else(|| Error::Parse { line: 0, msg: "bad variant tag".into() })?;
    let init_scale = r.read_f64::<LittleEndian>()?;
    let mut p = ModelParams::zeros(d, variant);
    p.init_scale = init_scale;
    for o in 0..d {
        for s in 0..d {
            p.y[s * d + o] = r.read_f64::<LittleEndian>()?;
        }
    }
    for z in p.z.iter_mut() {
        *z = r.read_f64::<LittleEndian>()?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use approx::assert_abs_diff_eq;

    fn sample(prompt: Vec<Token>, gold: Token) -> Sample {
        Sample::new(prompt, vec![gold], 0, 0, Split::PT_TRAIN)
    }

    #[test]
    fn zero_init_is_uniform() {
        let p = init_params(7, 0.0, AttentionVariant::Linear, 1).unwrap();
        let pred = forward(&p, &[1, 2, 6]).unwrap();
        for q in &pred.probs {
            assert_abs_diff_eq!(*q, 1.0 / 7.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn init_bounds_and_determinism() {
        let a = init_params(50, 0.01, AttentionVariant::Linear, 3).unwrap();
        let b = init_params(50, 0.01, AttentionVariant::Linear, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.y.iter().all(|v| v.abs() <= 0.01));
        assert!(a.z.iter().all(|v| (0.0..=0.01).contains(v)));
        assert!(init_params(1, 0.1, AttentionVariant::Linear, 0).is_err());
        assert!(init_params(4, -0.1, AttentionVariant::Linear, 0).is_err());
    }

    #[test]
    fn hand_computed_logits() {
        // prompt [s, q] with z_s = 2, y[., s] = e_0 and q contributing 0.5 * y[., q]
        let mut p = ModelParams::zeros(4, AttentionVariant::Linear);
        p.z[1] = 2.0;
        p.set_y(0, 1, 1.0);
        p.z[3] = 0.5;
        p.set_y(2, 3, 4.0);
        let pred = forward(&p, &[1, 3]).unwrap();
        assert_eq!(pred.logits, vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn softmax_attention_uniform_when_z_equal() {
        let mut p = init_params(6, 0.0, AttentionVariant::Softmax, 0).unwrap();
        p.z.iter_mut().for_each(|z| *z = 0.7);
        let pred = forward(&p, &[0, 1, 2, 2, 5]).unwrap();
        for a in &pred.attention {
            assert_abs_diff_eq!(*a, 0.2, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(pred.attention.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_closed_forms() {
        let uni = Prediction { attention: vec![], logits: vec![0.0; 100], probs: vec![0.01; 100] };
        assert_abs_diff_eq!(loss(&uni, 3), 100f64.ln(), epsilon = 1e-12);
        let mut probs = vec![0.0; 4];
        probs[1] = 1.0;
        let sure = Prediction { attention: vec![], logits: vec![], probs: probs.clone() };
        assert_eq!(loss(&sure, 1), 0.0);
        assert!(loss(&sure, 0).is_finite());
        let quarter = Prediction { attention: vec![], logits: vec![], probs: vec![0.25, 0.75] };
        assert_abs_diff_eq!(loss(&quarter, 0), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_token() {
        let p = ModelParams::zeros(3, AttentionVariant::Linear);
        assert!(matches!(forward(&p, &[0, 3]), Err(Error::TokenOutOfRange { token: 3, vocab: 3 })));
    }

    #[test]
    fn linear_update_matches_hand_formula() {
        // D = 3, prompt = [s] with z_s = 1 and logits chosen so p = (0.5, 0.3, 0.2)
        let mut p = ModelParams::zeros(3, AttentionVariant::Linear);
        p.z[1] = 1.0;
        let target = [0.5f64, 0.3, 0.2];
        for o in 0..3 {
            p.set_y(o, 1, target[o as usize].ln());
        }
        let before: Vec<f64> = p.column(1).to_vec();
        let cfg = TrainConfig { lr_y: 0.1, lr_z: 0.0, update_z: false, ..Default::default() };
        sgd_step(&mut p, &sample(vec![1], 0), &cfg, None, 0).unwrap();
        let delta: Vec<f64> = p.column(1).iter().zip(&before).map(|(a, b)| a - b).collect();
        assert_abs_diff_eq!(delta[0], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(delta[1], -0.03, epsilon = 1e-12);
        assert_abs_diff_eq!(delta[2], -0.02, epsilon = 1e-12);
    }

    #[test]
    fn perfect_prediction_gives_zero_update() {
        let mut p = ModelParams::zeros(3, AttentionVariant::Linear);
        p.z[1] = 1.0;
        p.set_y(0, 1, 1e6);
        let before = p.clone();
        sgd_step(&mut p, &sample(vec![1, 1], 0), &TrainConfig::default(), None, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn locality_and_mask() {
        let mut p = init_params(8, 0.1, AttentionVariant::Linear, 4).unwrap();
        let before = p.clone();
        let cfg = TrainConfig { update_z: false, ..Default::default() };
        sgd_step(&mut p, &sample(vec![1, 2, 7], 5), &cfg, None, 0).unwrap();
        assert_eq!(p.z, before.z);
        for s in [0u32, 3, 4, 5, 6] {
            assert_eq!(p.column(s), before.column(s));
        }
        assert_ne!(p.column(1), before.column(1));
    }

    #[test]
    fn penalty_divides_positive_logits() {
        let mut l = vec![2.0, 1.0];
        apply_repetition_penalty(&mut l, &[0], 1.05);
        assert_abs_diff_eq!(l[0], 2.0 / 1.05, epsilon = 1e-15);
        assert_eq!(l[1], 1.0);
    }

    #[test]
    fn greedy_decode_is_argmax() {
        let mut p = ModelParams::zeros(5, AttentionVariant::Linear);
        p.z[1] = 1.0;
        p.set_y(3, 1, 2.0);
        let cfg = DecodeConfig { greedy: true, repetition_penalty: 1.0, ..Default::default() };
        let out = decode(&p, &[1], 4, &cfg, &mut seed::rng(0)).unwrap();
        assert_eq!(out, vec![3]);
        let bad = DecodeConfig { max_tokens: 0, ..Default::default() };
        assert!(decode(&p, &[1], 4, &bad, &mut seed::rng(0)).is_err());
    }

    #[test]
    fn defaults_match_reported_decode_settings() {
        let d = DecodeConfig::default();
        assert_eq!((d.temperature, d.top_p, d.top_k, d.repetition_penalty), (1.0, 1.0, -1, 1.05));
    }

    #[test]
    fn top_k_and_top_p_truncate() {
        let logits = [3.0, 2.0, 1.0, 0.0];
        let k1 = sampling_distribution(&logits, &DecodeConfig { top_k: 1, ..Default::default() });
        assert_eq!(k1, vec![1.0, 0.0, 0.0, 0.0]);
        let p = sampling_distribution(&logits, &DecodeConfig { top_p: 0.9, ..Default::default() });
        assert_eq!(p[3], 0.0);
        assert!(p[2] > 0.0);
    }

    #[test]
    fn snapshot_roundtrip() {
        let p = init_params(6, 0.3, AttentionVariant::Exponential, 2).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(buf.len(), 8 + 24 + 8 * (36 + 6));
        // row-major on disk: the first Y value is y[0, 0], the second y[0, 1]
        let second = f64::from_le_bytes(buf[40..48].try_into().unwrap());
        assert_eq!(second, p.y(0, 1));
        assert_eq!(read_params(&buf[..]).unwrap(), p);
        assert!(read_params(&b"nonsense-bytes.."[..]).is_err());
    }
}
