//! Analytic objects of the single-layer model and the checks built on them.
//!
//! * [`reference_state`]: the frequency-based logit matrix `U` whose pooled
//!   logits reproduce the naive-Bayes posterior.
//! * [`bayes_oracle`]: the same posterior computed by direct counting,
//!   independent of `U`.
//! * [`probe`]: per-token error `e_s = y_s - u_s`, the optimal prediction,
//!   the softmax Jacobian at it and its positive-eigenvalue extremes.
//! * [`conserved_quantity`], [`diversity_index`], [`taylor_predict`] and
//!   [`correlation_report`].

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStats, Token};
use crate::error::{Error, Result};
use crate::model::{softmax, AttentionVariant, ModelParams};

/// Eigenvalues at or below this are treated as zero.
pub const EIGEN_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceState {
    d: usize,
    /// Column-major like `Y`: `u[s * d + o]`. Undefined entries hold NaN.
    u: Vec<f64>,
    mask: Vec<bool>,
    pub positions: f64,
}

impl ReferenceState {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, o: Token, s: Token) -> Option<f64> {
        let i = s as usize * self.d + o as usize;
        self.mask[i].then_some(self.u[i])
    }

    pub fn defined(&self, o: Token, s: Token) -> bool {
        self.mask[s as usize * self.d + o as usize]
    }

    pub fn column(&self, s: Token) -> &[f64] {
        let s = s as usize;
        &self.u[s * self.d..(s + 1) * self.d]
    }

    pub fn defined_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `u[o, s] = (ln Pr(s|o) + ln Pr(o) / positions) / a_s` on the support
/// `Pr(s|o) > 0`, `a_s != 0`.
///
/// `positions` is the number of prompt positions the pooled sum runs over;
/// the pooled logit `sum_s a_s delta_s u_s` equals the log naive-Bayes joint
/// exactly when a prompt has that many positions.
pub fn reference_state(stats: &CorpusStats, scores: &[f64], positions: f64) -> Result<ReferenceState> {
    let d = scores.len();
    if stats.total <= 0.0 {
        return Err(Error::Empty("stats"));
    }
    if !(positions > 0.0) {
        return Err(Error::Config("positions must be > 0".into()));
    }
    let mut u = vec![f64::NAN; d * d];
    let mut mask = vec![false; d * d];
    for (s, objs) in &stats.assoc {
        let a = scores.get(*s as usize).copied().ok_or(Error::TokenOutOfRange { token: *s, vocab: d })?;
        if a == 0.0 {
            continue;
        }
        for &o in objs.keys() {
            if o as usize >= d {
                return Err(Error::TokenOutOfRange { token: o, vocab: d });
            }
            let p = stats.pr_s_given_o(*s, o);
            if p > 0.0 {
                let i = *s as usize * d + o as usize;
                u[i] = (p.ln() + stats.pr_o(o).ln() / positions) / a;
                mask[i] = true;
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("reference state support (every attention score is zero)"));
    }
    Ok(ReferenceState { d, u, mask, positions })
}

/// Per-token attention scores used by the reference state: `z_s` (linear) or
/// `exp(z_s)`.
pub fn token_scores(params: &ModelParams) -> Vec<f64> {
    (0..params.dim() as Token).map(|s| params.token_score(s)).collect()
}

/// `softmax(sum_s a_s delta_s u_s)`, with undefined entries at `-inf`.
pub fn optimal_prediction(reference: &ReferenceState, scores: &[f64], occurrences: &[(Token, u32)]) -> Vec<f64> {
    let d = reference.d;
    let mut logits = vec![0.0; d];
    for &(s, c) in occurrences {
        let a = scores[s as usize] * c as f64;
        let col = s as usize * d;
        for (o, l) in logits.iter_mut().enumerate() {
            if reference.mask[col + o] {
                *l += a * reference.u[col + o];
            } else {
                *l = f64::NEG_INFINITY;
            }
        }
    }
    softmax(&logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePrediction {
    pub probs: Vec<f64>,
    /// First prompt token never seen in training, if any; the distribution
    /// is then uniform.
    pub unseen: Option<Token>,
    /// No object is consistent with every prompt token; distribution uniform.
    pub inconsistent: bool,
}

/// Naive-Bayes posterior `Pr(o|X) ∝ Pr(o) * prod_s Pr(s|o)^delta_s`, by counting.
pub fn bayes_oracle(stats: &CorpusStats, occurrences: &[(Token, u32)], d: usize) -> OraclePrediction {
    let uniform = || vec![1.0 / d as f64; d];
    if let Some(&(t, _)) = occurrences.iter().find(|(t, _)| !stats.seen(*t)) {
        return OraclePrediction { probs: uniform(), unseen: Some(t), inconsistent: false };
    }
    let mut logp = vec![f64::NEG_INFINITY; d];
    for o in stats.objects() {
        let mut acc = stats.pr_o(o).ln();
        for &(s, c) in occurrences {
            let p = stats.pr_s_given_o(s, o);
            if p == 0.0 {
                acc = f64::NEG_INFINITY;
                break;
            }
            acc += c as f64 * p.ln();
        }
        if (o as usize) < d {
            logp[o as usize] = acc;
        }
    }
    if logp.iter().all(|l| *l == f64::NEG_INFINITY) {
        return OraclePrediction { probs: uniform(), unseen: None, inconsistent: true };
    }
    OraclePrediction { probs: softmax(&logp), unseen: None, inconsistent: false }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// The softmax Jacobian `diag(x) - x x^T`, kept on the support of `x`
/// (rows and columns outside it are identically zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub x: Vec<f64>,
    pub support: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

impl Jacobian {
    pub fn new(x: &[f64]) -> Self {
        let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
        let n = support.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (x[support[i]], x[support[j]]);
            if i == j {
                a - a * b
            } else {
                -a * b
            }
        });
        Self { x: x.to_vec(), support, matrix }
    }

    /// `H v` on full-length vectors.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let dot: f64 = self.x.iter().zip(v).map(|(a, b)| a * b).sum();
        self.x.iter().zip(v).map(|(x, vi)| x * vi - x * dot).collect()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.support.is_empty() {
            return Vec::new();
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Largest and smallest eigenvalues above [`EIGEN_ZERO`]; `None` when
    /// the matrix is zero (a one-hot `x`).
    pub fn positive_extremes(&self) -> Option<(f64, f64)> {
        let pos: Vec<f64> = self.eigenvalues().into_iter().filter(|&e| e > EIGEN_ZERO).collect();
        Some((*pos.last()?, pos[0]))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let m = &self.matrix;
        (m - m.transpose()).abs().max()
    }

    pub fn max_row_sum(&self) -> f64 {
        self.matrix.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsProbe {
    pub token: Token,
    /// `y_s - u_s` on the defined entries of `u_s`, zero elsewhere.
    pub error: Vec<f64>,
    pub optimal: Vec<f64>,
    pub jacobian: Jacobian,
    pub lambda_max: Option<f64>,
    pub lambda_min: Option<f64>,
    /// `onehot(gold) - optimal`.
    pub perturbation: Vec<f64>,
}

pub fn token_error(params: &ModelParams, reference: &ReferenceState, s: Token) -> Vec<f64> {
    let y = params.column(s);
    let col = s as usize * reference.d;
    (0..reference.d).map(|o| if reference.mask[col + o] { y[o] - reference.u[col + o] } else { 0.0 }).collect()
}

pub fn probe(
    params: &ModelParams,
    reference: &ReferenceState,
    occurrences: &[(Token, u32)],
    gold: Token,
    s: Token,
) -> DynamicsProbe {
    let scores = token_scores(params);
    let optimal = optimal_prediction(reference, &scores, occurrences);
    let jacobian = Jacobian::new(&optimal);
    let extremes = jacobian.positive_extremes();
    let mut perturbation: Vec<f64> = optimal.iter().map(|x| -x).collect();
    perturbation[gold as usize] += 1.0;
    DynamicsProbe {
        token: s,
        error: token_error(params, reference, s),
        optimal,
        jacobian,
        lambda_max: extremes.map(|e| e.0),
        lambda_min: extremes.map(|e| e.1),
        perturbation,
    }
}

/// Per-token quantity whose gradient-flow time derivative vanishes.
///
/// * linear: `z_s^2 / lr_z - |y_s|^2 / lr_y`
/// * exponential: `z_s / lr_z - |y_s|^2 / (2 lr_y)`
///
/// There is no such invariant for softmax-normalized attention.
pub fn conserved_quantity(params: &ModelParams, lr_y: f64, lr_z: f64) -> Result<Vec<f64>> {
    if !(lr_y > 0.0 && lr_z > 0.0) {
        return Err(Error::Config("conserved quantity needs positive learning rates".into()));
    }
    let zq: fn(f64) -> f64;
    let ny: f64;
    match params.variant {
        AttentionVariant::Linear => {
            zq = |z| z * z;
            ny = lr_y;
        }
        AttentionVariant::Exponential => {
            zq = |z| z;
            ny = 2.0 * lr_y;
        }
        AttentionVariant::Softmax => {
            return Err(Error::Unsupported("no conserved quantity for softmax attention".into()));
        }
    }
    Ok((0..params.dim() as Token)
        .map(|s| {
            let yy: f64 = params.column(s).iter().map(|y| y * y).sum();
            zq(params.z()[s as usize]) / lr_z - yy / ny
        })
        .collect())
}

/// `-sqrt(lr_z / lr_y) * (sum_o [ln Pr(s|o) + ln Pr(o) / positions]^2)^(1/4) + c`,
/// summed over objects with `Pr(s|o) > 0`.
pub fn diversity_index(stats: &CorpusStats, s: Token, lr_ratio: f64, c: f64, positions: f64) -> Result<f64> {
    let objs = stats.assoc_objects(s).ok_or(Error::UnseenToken(s))?;
    let mut sum = 0.0;
    for &o in objs.keys() {
        let p = stats.pr_s_given_o(s, o);
        if p > 0.0 {
            let term = p.ln() + stats.pr_o(o).ln() / positions;
            sum += term * term;
        }
    }
    Ok(-lr_ratio.sqrt() * sum.powf(0.25) + c)
}

/// First-order prediction of `e_s` after one SGD step on a prompt.
///
/// Linearizing the softmax at the optimal prediction gives
/// `e_s+ = e_s + lr_y * a_s * delta_s * (xi - H g)` with `g = sum_s' a_s' delta_s' e_s'`
/// the pooled logit error of the prompt. When `s` is the only token off its
/// reference value, `g = a_s delta_s e_s`.
pub fn taylor_predict(
    e_s: &[f64],
    score: f64,
    delta: f64,
    jacobian: &Jacobian,
    perturbation: &[f64],
    pooled_error: &[f64],
    lr_y: f64,
) -> Vec<f64> {
    let step = lr_y * score * delta;
    if step == 0.0 {
        return e_s.to_vec();
    }
    let hg = jacobian.apply(pooled_error);
    e_s.iter().zip(perturbation).zip(&hg).map(|((e, xi), h)| e + step * (xi - h)).collect()
}

/// `sum_s a_s delta_s e_s` over a prompt.
pub fn pooled_error(params: &ModelParams, reference: &ReferenceState, occurrences: &[(Token, u32)]) -> Vec<f64> {
    let mut g = vec![0.0; reference.d];
    for &(s, c) in occurrences {
        let a = params.token_score(s) * c as f64;
        for (gi, e) in g.iter_mut().zip(token_error(params, reference, s)) {
            *gi += a * e;
        }
    }
    g
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Ordinal ranks; equal values are ordered by `keys`.
pub fn ranks(values: &[f64], keys: &[Token]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(keys[a].cmp(&keys[b])));
    let mut r = vec![0.0; values.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64], keys: &[Token]) -> f64 {
    pearson(&ranks(x, keys), &ranks(y, keys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub token: Token,
    pub di: f64,
    pub attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<DiversityRow>,
    pub pearson: f64,
    pub spearman: f64,
}

/// Correlates per-token attention with the diversity index over `tokens`
/// (tokens without a defined index are skipped).
pub fn correlation_report(
    params: &ModelParams,
    stats: &CorpusStats,
    tokens: &[Token],
    lr_ratio: f64,
    positions: f64,
) -> Result<CorrelationReport> {
    let mut rows = Vec::new();
    for &s in tokens {
        if !stats.seen(s) {
            continue;
        }
        let di = diversity_index(stats, s, lr_ratio, 0.0, positions)?;
        rows.push(DiversityRow { token: s, di, attention: params.token_score(s) });
    }
    correlate(rows)
}

pub fn correlate(rows: Vec<DiversityRow>) -> Result<CorrelationReport> {
    if rows.len() < 3 {
        return Err(Error::TooFewTokens(rows.len()));
    }
    let di: Vec<f64> = rows.iter().map(|r| r.di).collect();
    let att: Vec<f64> = rows.iter().map(|r| r.attention).collect();
    let keys: Vec<Token> = rows.iter().map(|r| r.token).collect();
    Ok(CorrelationReport { pearson: pearson(&att, &di), spearman: spearman(&att, &di, &keys), rows })
}
