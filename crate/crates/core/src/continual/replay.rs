use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::minhash::{signature_similarity, DedupConfig, MinHasher};
use super::{PromptSource, StoredRule};
use crate::corpus::{format_sample_line, parse_sample_line, Sample, Split, Token};
use crate::error::{Error, Result};
use crate::model::{decode, position_attention, DecodeConfig, ModelParams};
use crate::seed;

/// Individual and template id used for samples with no source sentence.
pub const NO_SOURCE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Stored,
    Generated,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Stored => "stored",
            Provenance::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    pub sample: Sample,
    pub provenance: Provenance,
    /// Prompt that produced a generated sample (without the query token).
    pub source_prompt: Vec<Token>,
    pub signature: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayCorpus {
    pub samples: Vec<ReplaySample>,
    /// Candidates dropped as near or exact duplicates.
    pub dropped: usize,
}

impl ReplayCorpus {
    pub fn token_count(&self) -> usize {
        self.samples.iter().map(|s| s.sample.token_count()).sum()
    }

    pub fn training_samples(&self) -> Vec<Sample> {
        self.samples.iter().map(|s| s.sample.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredReplay {
    pub corpus: ReplayCorpus,
    /// Selection slots left unfilled because too few individuals had
    /// enough biographies.
    pub skipped: usize,
}

/// Splits one individual's training sentences into biographies of
/// `sentences_per_bio` consecutive sentences.
fn biographies(samples: &[Sample], sentences_per_bio: usize) -> BTreeMap<u32, Vec<&[Sample]>> {
    let mut out: BTreeMap<u32, Vec<&[Sample]>> = BTreeMap::new();
    let mut start = 0;
    // sentences of one individual are contiguous in a rendered corpus
    while start < samples.len() {
        let id = samples[start].individual;
        let mut end = start;
        while end < samples.len() && samples[end].individual == id {
            end += 1;
        }
        out.entry(id).or_default().extend(samples[start..end].chunks(sentences_per_bio));
        start = end;
    }
    out
}

/// Keeps PT biographies as replay data under `rule`.
///
/// `samples` is a rendered PT training split (sentences of a biography are
/// consecutive); `individuals` lists every PT individual, including those
/// that drew no biography.
pub fn build_stored_replay(
    samples: &[Sample],
    individuals: &[u32],
    sentences_per_bio: usize,
    rule: StoredRule,
    seed: u64,
) -> Result<StoredReplay> {
    if samples.is_empty() {
        return Err(Error::Empty("PT training corpus"));
    }
    if sentences_per_bio == 0 {
        return Err(Error::Config("sentences_per_bio must be >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let bios = biographies(samples, sentences_per_bio);
    let mut chosen: Vec<&[Sample]> = Vec::new();
    let mut skipped = 0;
    match rule {
        StoredRule::AllOneBio => {
            for id in individuals {
                match bios.get(id).and_then(|b| b.choose(&mut rng)) {
                    Some(b) => chosen.push(b),
                    None => skipped += 1,
                }
            }
        }
        StoredRule::HalfTwoBios => {
            let mut ids: Vec<u32> = individuals.to_vec();
            ids.shuffle(&mut rng);
            let want = individuals.len() / 2;
            let mut taken = 0;
            for id in ids {
                if taken == want {
                    break;
                }
                match bios.get(&id) {
                    Some(b) if b.len() >= 2 => {
                        chosen.extend(b.choose_multiple(&mut rng, 2));
                        taken += 1;
                    }
                    _ => {}
                }
            }
            skipped = want - taken;
        }
    }
    let samples = chosen
        .into_iter()
        .flatten()
        .map(|s| ReplaySample { sample: s.clone(), provenance: Provenance::Stored, source_prompt: Vec::new(), signature: None })
        .collect();
    Ok(StoredReplay { corpus: ReplayCorpus { samples, dropped: 0 }, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedPrompt {
    pub tokens: Vec<Token>,
    /// Index of the CPT sample the window came from.
    pub source: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub prompts: Vec<SelectedPrompt>,
    /// Samples shorter than the window (the window was clamped to the prompt).
    pub clamped: usize,
}

/// Start and summed weight of the highest-scoring window; the earliest wins ties.
pub fn best_window(attention: &[f64], len: usize) -> (usize, f64) {
    let len = len.min(attention.len());
    let mut best = (0, f64::NEG_INFINITY);
    for start in 0..=attention.len() - len {
        let score: f64 = attention[start..start + len].iter().sum();
        if score > best.1 {
            best = (start, score);
        }
    }
    best
}

fn content(prompt: &[Token], query: Token) -> &[Token] {
    match prompt.last() {
        Some(&q) if q == query => &prompt[..prompt.len() - 1],
        _ => prompt,
    }
}

/// Chooses replay-generation prompts.
///
/// * `Stoc`: per CPT sample, the window of `window_len` positions with the
///   largest summed attention under the pre-trained model; then the global
///   top `budget` by that score.
/// * `Lamol`: `budget` copies of the trigger token.
/// * `RandomSnippet`: one uniform window per sample; then `budget` of them by
///   random priority.
#[allow(clippy::too_many_arguments)]
pub fn select_prompts(
    source: PromptSource,
    params: &ModelParams,
    cpt_samples: &[Sample],
    window_len: usize,
    budget: usize,
    trigger: Option<Token>,
    query: Token,
    seed: u64,
) -> Result<Selection> {
    if window_len == 0 {
        return Err(Error::Config("window_len must be >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let mut clamped = 0;
    let mut prompts = match source {
        PromptSource::Lamol => {
            let t = trigger.ok_or_else(|| Error::Config("LAMOL needs a generation-trigger token".into()))?;
            return Ok(Selection {
                prompts: vec![SelectedPrompt { tokens: vec![t], source: None, score: 0.0 }; budget],
                clamped: 0,
            });
        }
        PromptSource::Stoc => {
            let mut v = Vec::with_capacity(cpt_samples.len());
            for (i, s) in cpt_samples.iter().enumerate() {
                let body = content(&s.prompt, query);
                if body.is_empty() {
                    continue;
                }
                if window_len > body.len() {
                    clamped += 1;
                }
                // attention over the full prompt, query position dropped
                let att = position_attention(params, &s.prompt);
                let (start, score) = best_window(&att[..body.len()], window_len);
                let len = window_len.min(body.len());
                v.push(SelectedPrompt { tokens: body[start..start + len].to_vec(), source: Some(i), score });
            }
            v
        }
        PromptSource::RandomSnippet => {
            let mut v = Vec::with_capacity(cpt_samples.len());
            for (i, s) in cpt_samples.iter().enumerate() {
                let body = content(&s.prompt, query);
                if body.is_empty() {
                    continue;
                }
                if window_len > body.len() {
                    clamped += 1;
                }
                let len = window_len.min(body.len());
                let start = rng.gen_range(0..=body.len() - len);
                v.push(SelectedPrompt { tokens: body[start..start + len].to_vec(), source: Some(i), score: rng.gen::<f64>() });
            }
            v
        }
    };
    // stable sort keeps sample order among equal scores
    prompts.sort_by(|a, b| b.score.total_cmp(&a.score));
    prompts.truncate(budget);
    Ok(Selection { prompts, clamped })
}

/// Decodes an object for each prompt with the frozen pre-trained model until
/// the generated samples hold `target_tokens` tokens.
pub fn generate_replay(
    params: &ModelParams,
    prompts: &[SelectedPrompt],
    cpt_samples: &[Sample],
    decode_cfg: &DecodeConfig,
    target_tokens: usize,
    query: Token,
    seed: u64,
) -> Result<Vec<ReplaySample>> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::new();
    let mut tokens = 0;
    for (i, p) in prompts.iter().enumerate() {
        if tokens >= target_tokens {
            break;
        }
        let object = decode(params, &p.tokens, query, decode_cfg, &mut rng)
            .map_err(|e| Error::Config(format!("decode failed for prompt {i}: {e}")))?;
        let mut prompt = p.tokens.clone();
        prompt.push(query);
        let (individual, template) =
            p.source.and_then(|j| cpt_samples.get(j)).map_or((NO_SOURCE, NO_SOURCE), |s| (s.individual, s.template));
        let sample = Sample::new(prompt, object, individual, template, Split::PT_TRAIN);
        tokens += sample.token_count();
        out.push(ReplaySample { sample, provenance: Provenance::Generated, source_prompt: p.tokens.clone(), signature: None });
    }
    Ok(out)
}

/// Greedy near-duplicate filter in input order: a candidate is kept iff it is
/// not an exact copy of a kept sample and its estimated Jaccard similarity to
/// every kept sample is below the threshold.
pub fn dedup_replay(candidates: Vec<ReplaySample>, cfg: &DedupConfig) -> Result<ReplayCorpus> {
    cfg.validate()?;
    let hasher = MinHasher::new(cfg);
    let mut seen: HashSet<Vec<Token>> = HashSet::new();
    let mut kept: Vec<ReplaySample> = Vec::new();
    let mut dropped = 0;
    for mut c in candidates {
        let seq: Vec<Token> = c.sample.prompt.iter().chain(&c.sample.object).copied().collect();
        if seen.contains(&seq) {
            dropped += 1;
            continue;
        }
        let sig = hasher.signature(&seq);
        let near = kept.iter().any(|k| k.signature.as_ref().is_some_and(|ks| signature_similarity(ks, &sig) >= cfg.threshold));
        if near {
            dropped += 1;
            continue;
        }
        seen.insert(seq);
        c.signature = Some(sig);
        kept.push(c);
    }
    Ok(ReplayCorpus { samples: kept, dropped })
}

/// Corpus line format plus `provenance` and `source_prompt` columns.
pub fn write_replay<W: Write>(mut w: W, corpus: &ReplayCorpus) -> Result<()> {
    for r in &corpus.samples {
        let src = r.source_prompt.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(w, "{}", format_sample_line(&r.sample, &[r.provenance.as_str(), &src]))?;
    }
    Ok(())
}

pub fn read_replay<R: BufRead>(r: R) -> Result<ReplayCorpus> {
    let mut samples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (sample, extra) = parse_sample_line(&line, i + 1)?;
        let provenance = match extra.first().map(String::as_str) {
            Some("stored") => Provenance::Stored,
            Some("generated") => Provenance::Generated,
            other => return Err(Error::Parse { line: i + 1, msg: format!("bad provenance {other:?}") }),
        };
        let source_prompt = extra
            .get(1)
            .map(|s| {
                s.split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad token {t:?}") }))
                    .collect::<Result<Vec<Token>>>()
            })
            .transpose()?
            .unwrap_or_default();
        samples.push(ReplaySample { sample, provenance, source_prompt, signature: None });
    }
    Ok(ReplayCorpus { samples, dropped: 0 })
}
