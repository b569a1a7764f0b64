//! Knowledge metrics, curve smoothing and the per-template KL diagnostic.
//!
//! * hFTA: the argmax first token equals the gold first token.
//! * sFTA: probability the model puts on the gold first token.
//! * EM: the full greedy object sequence equals the gold sequence.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, Token};
use crate::error::{Error, Result};
use crate::model::{decode, forward, loss, DecodeConfig, ModelParams};
use crate::seed;

/// Probabilities are floored here before KL.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: String,
    pub step: u64,
    pub hfta: f64,
    pub sfta: f64,
    pub em: f64,
    /// Mean cross-entropy on the gold first token.
    pub loss: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub hit: bool,
    pub gold_prob: f64,
    pub exact: bool,
    pub loss: f64,
}

fn greedy() -> DecodeConfig {
    DecodeConfig { greedy: true, repetition_penalty: 1.0, ..DecodeConfig::default() }
}

pub fn score_sample(params: &ModelParams, sample: &Sample, query: Token) -> Result<SampleScore> {
    let pred = forward(params, &sample.prompt)?;
    let gold = sample.gold();
    let hit = pred.argmax() == gold;
    let exact = if sample.object.len() == 1 {
        hit
    } else if !hit {
        false
    } else {
        let cfg = DecodeConfig { max_tokens: sample.object.len(), ..greedy() };
        // greedy decoding never draws from the rng
        decode(params, &sample.prompt, query, &cfg, &mut seed::rng(0))? == sample.object
    };
    Ok(SampleScore { hit, gold_prob: pred.probs[gold as usize], exact, loss: loss(&pred, gold) })
}

/// Per-sample scores in input order, computed in parallel.
pub fn score_samples(params: &ModelParams, samples: &[Sample], query: Token) -> Result<Vec<SampleScore>> {
    samples.par_iter().map(|s| score_sample(params, s, query)).collect()
}

pub fn evaluate(params: &ModelParams, samples: &[Sample], query: Token, split: &str, step: u64) -> Result<MetricRecord> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let scores = score_samples(params, samples, query)?;
    Ok(summarize(&scores, split, step))
}

/// Aggregates scores sequentially so the sums do not depend on thread count.
pub fn summarize(scores: &[SampleScore], split: &str, step: u64) -> MetricRecord {
    let n = scores.len() as f64;
    let (mut h, mut s, mut e, mut l) = (0.0, 0.0, 0.0, 0.0);
    for sc in scores {
        h += sc.hit as u8 as f64;
        s += sc.gold_prob;
        e += sc.exact as u8 as f64;
        l += sc.loss;
    }
    MetricRecord { split: split.to_string(), step, hfta: h / n, sfta: s / n, em: e / n, loss: l / n, count: scores.len() }
}

/// `y'_0 = y_0`, `y'_t = alpha * y'_{t-1} + (1 - alpha) * y_t`.
pub fn smooth_curve(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Empty("series"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config("ema alpha must be in [0, 1]".into()));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut prev = series[0];
    out.push(prev);
    for &y in &series[1..] {
        prev = alpha * prev + (1.0 - alpha) * y;
        out.push(prev);
    }
    Ok(out)
}

fn floored(p: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = p.iter().map(|x| x.max(KL_FLOOR)).collect();
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|x| *x /= s);
    q
}

/// `KL(p || q)` in nats after flooring both at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (floored(p), floored(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateKl {
    pub template: u32,
    pub mean_kl: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub templates: Vec<TemplateKl>,
    /// Templates with a single sample.
    pub skipped: usize,
}

impl PlateauReport {
    pub fn mean(&self) -> f64 {
        self.templates.iter().map(|t| t.mean_kl).sum::<f64>() / self.templates.len() as f64
    }

    pub fn values(&self) -> Vec<f64> {
        self.templates.iter().map(|t| t.mean_kl).collect()
    }
}

/// Mean KL between each sample's prediction and the average prediction over
/// its template, one value per template.
pub fn plateau_kl(params: &ModelParams, samples: &[Sample]) -> Result<PlateauReport> {
    let mut by_template: BTreeMap<u32, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_template.entry(s.template).or_default().push(s);
    }
    let groups: Vec<(u32, Vec<&Sample>)> = by_template.into_iter().collect();
    let results: Vec<Option<TemplateKl>> = groups
        .par_iter()
        .map(|(t, group)| {
            if group.len() < 2 {
                return Ok(None);
            }
            let probs = group.iter().map(|s| forward(params, &s.prompt).map(|p| p.probs)).collect::<Result<Vec<_>>>()?;
            let d = probs[0].len();
            let mut mean = vec![0.0; d];
            for p in &probs {
                mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= probs.len() as f64);
            let kl = probs.iter().map(|p| kl_divergence(p, &mean)).sum::<f64>() / probs.len() as f64;
            Ok(Some(TemplateKl { template: *t, mean_kl: kl, samples: group.len() }))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let templates: Vec<TemplateKl> = results.into_iter().flatten().collect();
    if templates.len() < 2 {
        return Err(Error::Config(format!("plateau KL needs at least 2 templates with 2+ samples, got {}", templates.len())));
    }
    Ok(PlateauReport { templates, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[0, max]`; the top edge is inclusive.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let max = values.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> =
        (0..bins).map(|i| HistogramBin { lo: i as f64 * width, hi: (i + 1) as f64 * width, count: 0 }).collect();
    for &v in values {
        let i = ((v / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

pub fn write_plateau_csv<W: Write>(w: W, report: &PlateauReport) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["template_id", "mean_KL"])?;
    for t in &report.templates {
        wr.write_record([t.template.to_string(), t.mean_kl.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(w: W, bins: &[HistogramBin]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["bin_lo", "bin_hi", "count"])?;
    for b in bins {
        wr.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::model::AttentionVariant;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_scores() {
        let scores = [
            SampleScore { hit: true, gold_prob: 0.6, exact: true, loss: 0.0 },
            SampleScore { hit: false, gold_prob: 0.3, exact: false, loss: 0.0 },
            SampleScore { hit: true, gold_prob: 0.9, exact: true, loss: 0.0 },
        ];
        let m = summarize(&scores, "x", 0);
        assert_abs_diff_eq!(m.hfta, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.sfta, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(m.em, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn uniform_model() {
        let p = ModelParams::zeros(4, AttentionVariant::Linear);
        let samples = vec![
            Sample::new(vec![0, 3], vec![1], 0, 0, Split::PT_TRAIN),
            Sample::new(vec![0, 3], vec![0], 0, 0, Split::PT_TRAIN),
        ];
        let m = evaluate(&p, &samples, 3, "x", 0).unwrap();
        assert_abs_diff_eq!(m.sfta, 0.25, epsilon = 1e-15);
        // ties go to the lowest id, so only the gold-0 sample is a hit
        assert_abs_diff_eq!(m.hfta, 0.5);
        assert!(evaluate(&p, &[], 3, "x", 0).is_err());
    }

    #[test]
    fn smoothing() {
        assert_abs_diff_eq!(smooth_curve(&[0.0, 1.0], 0.8).unwrap()[1], 0.2, epsilon = 1e-15);
        assert_eq!(smooth_curve(&[3.0, 3.0, 3.0], 0.8).unwrap(), vec![3.0; 3]);
        assert_eq!(smooth_curve(&[1.0, 5.0, 2.0], 0.0).unwrap(), vec![1.0, 5.0, 2.0]);
        assert!(smooth_curve(&[], 0.5).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mean = [0.5, 0.5];
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &mean), 2f64.ln(), epsilon = 1e-10);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 2);
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 3]);
    }
}
