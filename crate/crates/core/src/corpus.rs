//! Synthetic biography worlds.
//!
//! A [`World`] is a vocabulary split into disjoint role ranges (subject-name
//! parts, per-relation template words, shared function words, per-relation
//! object pools, the query token and an optional generation trigger), a set
//! of individuals with one object per relation, and per-relation templates.
//! Rendering a template for an individual yields a [`Sample`]: the template
//! words with the subject tokens spliced in, terminated by the query token,
//! with the individual's object as the prediction target.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type Token = u32;

pub const DEFAULT_RELATIONS: [&str; 5] = ["birthday", "birthplace", "university", "major", "company"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    SubjectPart(u8),
    RelationWords(u8),
    CommonWords,
    Objects(u8),
    ObjectSuffix(u8),
    Query,
    Trigger,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::SubjectPart(k) => write!(f, "subject{k}"),
            Role::RelationWords(r) => write!(f, "relation{r}"),
            Role::CommonWords => write!(f, "common"),
            Role::Objects(r) => write!(f, "objects{r}"),
            Role::ObjectSuffix(r) => write!(f, "suffix{r}"),
            Role::Query => write!(f, "query"),
            Role::Trigger => write!(f, "trigger"),
        }
    }
}

impl Role {
    /// Coarse label used in reports: subject, relation, object, query, trigger.
    pub fn kind(&self) -> &'static str {
        match self {
            Role::SubjectPart(_) => "subject",
            Role::RelationWords(_) | Role::CommonWords => "relation",
            Role::Objects(_) | Role::ObjectSuffix(_) => "object",
            Role::Query => "query",
            Role::Trigger => "trigger",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRange {
    pub role: Role,
    pub start: Token,
    pub end: Token,
}

impl RoleRange {
    pub fn range(&self) -> Range<Token> {
        self.start..self.end
    }

    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Disjoint, contiguous token-id ranges keyed by role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMap {
    ranges: Vec<RoleRange>,
}

impl RoleMap {
    pub fn from_ranges(mut ranges: Vec<RoleRange>) -> Result<Self> {
        for r in &ranges {
            if r.end < r.start {
                return Err(Error::Config(format!("role {} has end < start", r.role)));
            }
        }
        ranges.sort_by_key(|r| (r.start, r.end));
        for w in ranges.windows(2) {
            if w[1].start < w[0].end && !w[0].is_empty() && !w[1].is_empty() {
                return Err(Error::OverlappingRoles(w[0].role.to_string(), w[1].role.to_string()));
            }
        }
        let mut seen = BTreeSet::new();
        for r in &ranges {
            if !seen.insert(r.role) {
                return Err(Error::Config(format!("role {} listed twice", r.role)));
            }
        }
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[RoleRange] {
        &self.ranges
    }

    pub fn get(&self, role: Role) -> Option<&RoleRange> {
        self.ranges.iter().find(|r| r.role == role)
    }

    pub fn role_of(&self, token: Token) -> Option<Role> {
        self.ranges.iter().find(|r| r.start <= token && token < r.end).map(|r| r.role)
    }

    pub fn end(&self) -> Token {
        self.ranges.iter().map(|r| r.end).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub name: String,
    /// Number of distinct object entities for this relation.
    pub object_pool: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Pool size for each of the K subject-name parts.
    pub subject_pools: Vec<u32>,
    pub relations: Vec<RelationConfig>,
    /// Template-word pool size per relation.
    pub relation_words: u32,
    /// Shared function-word pool used by every relation's templates.
    pub common_words: u32,
    /// Probability that a template word is drawn from the shared pool.
    pub common_word_prob: f64,
    pub templates_per_relation: u32,
    /// Half-open `[lo, hi)` template word-count bands. Templates are spread
    /// evenly over the bands.
    pub length_bands: Vec<[u32; 2]>,
    pub pt_individuals: u32,
    pub cpt_individuals: u32,
    /// Tokens per object. 1 is the default; 2 or 3 switches on
    /// multi-token objects (a unique head token plus suffix tokens).
    pub object_len: u32,
    /// Suffix pool size per relation in multi-token mode.
    pub object_suffix_pool: u32,
    /// Reserve a generation-trigger token and prepend it to the first
    /// sentence of every pre-training biography.
    pub trigger: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            subject_pools: vec![40, 26, 40],
            relations: DEFAULT_RELATIONS.iter().map(|n| RelationConfig { name: n.to_string(), object_pool: 60 }).collect(),
            relation_words: 20,
            common_words: 10,
            common_word_prob: 0.3,
            templates_per_relation: 10,
            length_bands: vec![[2, 6], [6, 10]],
            pt_individuals: 1000,
            cpt_individuals: 200,
            object_len: 1,
            object_suffix_pool: 8,
            trigger: true,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.subject_pools.is_empty() {
            errs.push("subject_pools must name at least one part".to_string());
        }
        if self.subject_pools.contains(&0) {
            errs.push("subject pool sizes must be positive".to_string());
        }
        if self.relations.is_empty() || self.relations.len() > u8::MAX as usize {
            errs.push("relations must be non-empty".to_string());
        }
        if self.relations.iter().any(|r| r.object_pool == 0) {
            errs.push("object pools must be positive".to_string());
        }
        if self.templates_per_relation == 0 {
            errs.push("templates_per_relation must be positive".to_string());
        }
        if self.length_bands.is_empty() || self.length_bands.iter().any(|b| b[1] <= b[0]) {
            errs.push("length_bands must be non-empty half-open ranges with hi > lo".to_string());
        }
        if self.relation_words == 0 && self.common_words == 0 {
            errs.push("need at least one template-word pool".to_string());
        }
        if !(0.0..=1.0).contains(&self.common_word_prob) {
            errs.push("common_word_prob must be in [0, 1]".to_string());
        }
        if self.common_words == 0 && self.common_word_prob > 0.0 {
            errs.push("common_word_prob > 0 needs common_words > 0".to_string());
        }
        if self.relation_words == 0 && self.common_word_prob < 1.0 {
            errs.push("relation_words = 0 needs common_word_prob = 1".to_string());
        }
        if !(1..=3).contains(&self.object_len) {
            errs.push("object_len must be 1, 2 or 3".to_string());
        }
        if self.object_len > 1 && self.object_suffix_pool == 0 {
            errs.push("multi-token objects need object_suffix_pool > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn k(&self) -> usize {
        self.subject_pools.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Pt,
    Cpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Split {
    pub phase: Phase,
    pub part: Part,
}

impl Split {
    pub const PT_TRAIN: Split = Split { phase: Phase::Pt, part: Part::Train };
    pub const PT_TEST: Split = Split { phase: Phase::Pt, part: Part::Test };
    pub const CPT_TRAIN: Split = Split { phase: Phase::Cpt, part: Part::Train };
    pub const CPT_TEST: Split = Split { phase: Phase::Cpt, part: Part::Test };

    pub fn as_str(&self) -> &'static str {
        match (self.phase, self.part) {
            (Phase::Pt, Part::Train) => "pt-train",
            (Phase::Pt, Part::Test) => "pt-test",
            (Phase::Cpt, Part::Train) => "cpt-train",
            (Phase::Cpt, Part::Test) => "cpt-test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "pt-train" => Some(Split::PT_TRAIN),
            "pt-test" => Some(Split::PT_TEST),
            "cpt-train" => Some(Split::CPT_TRAIN),
            "cpt-test" => Some(Split::CPT_TEST),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Word(Token),
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: u32,
    pub relation: u8,
    pub slots: Vec<Slot>,
}

impl Template {
    pub fn word_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Word(_))).count()
    }

    /// Template words with the subject spliced in. Does not include the query token.
    pub fn render(&self, subject: &[Token]) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.slots.len() + subject.len());
        for slot in &self.slots {
            match *slot {
                Slot::Word(t) => out.push(t),
                Slot::Subject => out.extend_from_slice(subject),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: u32,
    pub phase: Phase,
    pub subject: Vec<Token>,
    /// One object token sequence per relation.
    pub attributes: Vec<Vec<Token>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub vocab_size: usize,
    pub roles: RoleMap,
    pub query: Token,
    pub trigger: Option<Token>,
    pub individuals: Vec<Individual>,
    pub templates: Vec<Template>,
}

impl World {
    pub fn relation_count(&self) -> usize {
        self.config.relations.len()
    }

    pub fn templates_for(&self, relation: u8) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(move |t| t.relation == relation)
    }

    pub fn individuals_in(&self, phase: Phase) -> impl Iterator<Item = &Individual> {
        self.individuals.iter().filter(move |i| i.phase == phase)
    }

    pub fn role_of(&self, token: Token) -> Option<Role> {
        self.roles.role_of(token)
    }

    /// All object head tokens (the first token of every object entity).
    pub fn object_heads(&self) -> Vec<Token> {
        (0..self.relation_count() as u8)
            .flat_map(|r| self.roles.get(Role::Objects(r)).map(|rr| rr.range()).unwrap_or(0..0))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: World = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    /// Checks the structural invariants a generated world always satisfies.
    pub fn validate(&self) -> Result<()> {
        let roles = RoleMap::from_ranges(self.roles.ranges().to_vec())?;
        if roles.end() as usize > self.vocab_size {
            return Err(Error::Config("role ranges exceed vocabulary".into()));
        }
        if roles.role_of(self.query) != Some(Role::Query) {
            return Err(Error::Config("query token outside the query range".into()));
        }
        let k = self.config.k();
        let nrel = self.relation_count();
        for ind in &self.individuals {
            if ind.subject.len() != k {
                return Err(Error::Config(format!("individual {} has {} subject tokens", ind.id, ind.subject.len())));
            }
            if ind.attributes.len() != nrel {
                return Err(Error::Config(format!("individual {} has {} attributes", ind.id, ind.attributes.len())));
            }
            for (part, &t) in ind.subject.iter().enumerate() {
                if roles.role_of(t) != Some(Role::SubjectPart(part as u8)) {
                    return Err(Error::Config(format!("individual {} subject token {t} has wrong role", ind.id)));
                }
            }
            for (r, obj) in ind.attributes.iter().enumerate() {
                if obj.first().and_then(|&t| roles.role_of(t)) != Some(Role::Objects(r as u8)) {
                    return Err(Error::Config(format!("individual {} relation {r} object has wrong role", ind.id)));
                }
            }
        }
        for t in &self.templates {
            let subjects = t.slots.iter().filter(|s| matches!(s, Slot::Subject)).count();
            if subjects != 1 {
                return Err(Error::Config(format!("template {} has {subjects} subject slots", t.id)));
            }
            for s in &t.slots {
                if let Slot::Word(w) = s {
                    match roles.role_of(*w) {
                        Some(Role::RelationWords(r)) if r == t.relation => {}
                        Some(Role::CommonWords) => {}
                        _ => return Err(Error::Config(format!("template {} uses token {w} outside its pools", t.id))),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Lays the role ranges out contiguously in a fixed order.
fn layout(config: &WorldConfig) -> Result<RoleMap> {
    let mut ranges = Vec::new();
    let mut next: Token = 0;
    let mut push = |role: Role, len: u32, ranges: &mut Vec<RoleRange>| {
        ranges.push(RoleRange { role, start: next, end: next + len });
        next += len;
    };
    for (k, &p) in config.subject_pools.iter().enumerate() {
        push(Role::SubjectPart(k as u8), p, &mut ranges);
    }
    for r in 0..config.relations.len() {
        push(Role::RelationWords(r as u8), config.relation_words, &mut ranges);
    }
    push(Role::CommonWords, config.common_words, &mut ranges);
    for (r, rel) in config.relations.iter().enumerate() {
        push(Role::Objects(r as u8), rel.object_pool, &mut ranges);
    }
    if config.object_len > 1 {
        for r in 0..config.relations.len() {
            push(Role::ObjectSuffix(r as u8), config.object_suffix_pool, &mut ranges);
        }
    }
    push(Role::Query, 1, &mut ranges);
    if config.trigger {
        push(Role::Trigger, 1, &mut ranges);
    }
    RoleMap::from_ranges(ranges)
}

fn sample_subjects<R: Rng>(pools: &[RoleRange], count: usize, rng: &mut R) -> Result<Vec<Vec<Token>>> {
    let available: u64 = pools.iter().map(|p| p.len() as u64).product();
    if count as u64 > available {
        return Err(Error::PoolExhausted { requested: count as u64, available });
    }
    if available <= 4 * count as u64 {
        // dense regime: enumerate and draw without replacement
        let mut all: Vec<Vec<Token>> = vec![Vec::new()];
        for p in pools {
            all = all
                .into_iter()
                .flat_map(|prefix| {
                    p.range().map(move |t| {
                        let mut v = prefix.clone();
                        v.push(t);
                        v
                    })
                })
                .collect();
        }
        all.shuffle(rng);
        all.truncate(count);
        return Ok(all);
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s: Vec<Token> = pools.iter().map(|p| rng.gen_range(p.range())).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

pub fn gen_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let roles = layout(config)?;
    let mut rng = seed::rng(seed);
    let k = config.k();
    let nrel = config.relations.len();

    let subject_ranges: Vec<RoleRange> =
        (0..k).map(|p| roles.get(Role::SubjectPart(p as u8)).cloned().expect("laid out")).collect();
    let total = (config.pt_individuals + config.cpt_individuals) as usize;
    let subjects = sample_subjects(&subject_ranges, total, &mut rng)?;

    let mut individuals = Vec::with_capacity(total);
    for (id, subject) in subjects.into_iter().enumerate() {
        let phase = if (id as u32) < config.pt_individuals { Phase::Pt } else { Phase::Cpt };
        let attributes = (0..nrel)
            .map(|r| {
                let heads = roles.get(Role::Objects(r as u8)).expect("laid out");
                let entity = rng.gen_range(0..heads.len());
                let mut obj = vec![heads.start + entity];
                if config.object_len > 1 {
                    let suffix = roles.get(Role::ObjectSuffix(r as u8)).expect("laid out");
                    // suffixes are a fixed function of the entity so each entity
                    // always spells the same way
                    for j in 1..config.object_len {
                        let idx = (entity as u64 * 2654435761 + j as u64 * 40503) % suffix.len() as u64;
                        obj.push(suffix.start + idx as Token);
                    }
                }
                obj
            })
            .collect();
        individuals.push(Individual { id: id as u32, phase, subject, attributes });
    }

    let common = roles.get(Role::CommonWords).cloned().expect("laid out");
    let mut templates = Vec::new();
    let nbands = config.length_bands.len();
    for r in 0..nrel {
        let words = roles.get(Role::RelationWords(r as u8)).cloned().expect("laid out");
        for j in 0..config.templates_per_relation as usize {
            let band = config.length_bands[j % nbands];
            let n = rng.gen_range(band[0]..band[1]) as usize;
            let mut slots: Vec<Slot> = (0..n)
                .map(|_| {
                    let from_common = !common.is_empty() && (words.is_empty() || rng.gen_bool(config.common_word_prob));
                    let pool = if from_common { &common } else { &words };
                    Slot::Word(rng.gen_range(pool.range()))
                })
                .collect();
            let at = rng.gen_range(0..=n);
            slots.insert(at, Slot::Subject);
            templates.push(Template { id: templates.len() as u32, relation: r as u8, slots });
        }
    }

    let query = roles.get(Role::Query).expect("laid out").start;
    let trigger = roles.get(Role::Trigger).map(|r| r.start);
    let world =
        World { config: config.clone(), seed, vocab_size: roles.end() as usize, roles, query, trigger, individuals, templates };
    debug_assert!(world.validate().is_ok());
    Ok(world)
}

/// Training-biography count per individual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Augmentation {
    OneAug,
    KAug(u32),
    PoissonAug(f64),
}

impl Augmentation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Augmentation::KAug(0) => Err(Error::Config("KAug needs k >= 1".into())),
            Augmentation::PoissonAug(l) if !(l > 0.0 && l.is_finite()) => {
                Err(Error::Config("PoissonAug needs a finite lambda > 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Augmentation::OneAug => "1-aug".into(),
            Augmentation::KAug(k) => format!("{k}-aug"),
            Augmentation::PoissonAug(l) => format!("poisson{l}-aug"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<Token>,
    pub object: Vec<Token>,
    pub individual: u32,
    pub template: u32,
    pub split: Split,
    /// `(token, count)` for every distinct prompt token, sorted by token.
    pub occurrences: Vec<(Token, u32)>,
}

impl Sample {
    pub fn new(prompt: Vec<Token>, object: Vec<Token>, individual: u32, template: u32, split: Split) -> Self {
        let occurrences = count_occurrences(&prompt);
        Self { prompt, object, individual, template, split, occurrences }
    }

    /// First object token, the prediction target.
    pub fn gold(&self) -> Token {
        self.object[0]
    }

    pub fn delta(&self, token: Token) -> u32 {
        self.occurrences.binary_search_by_key(&token, |&(t, _)| t).map(|i| self.occurrences[i].1).unwrap_or(0)
    }

    pub fn token_count(&self) -> usize {
        self.prompt.len() + self.object.len()
    }
}

pub fn count_occurrences(prompt: &[Token]) -> Vec<(Token, u32)> {
    let mut m: BTreeMap<Token, u32> = BTreeMap::new();
    for &t in prompt {
        *m.entry(t).or_default() += 1;
    }
    m.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedCorpus {
    pub samples: Vec<Sample>,
    /// Test sentences that had to reuse a training template.
    pub template_fallbacks: u64,
}

impl RenderedCorpus {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }
}

fn render_sentence(world: &World, ind: &Individual, template: &Template, split: Split, trigger: bool) -> Sample {
    let mut prompt = Vec::new();
    if trigger {
        if let Some(t) = world.trigger {
            prompt.push(t);
        }
    }
    prompt.extend(template.render(&ind.subject));
    prompt.push(world.query);
    Sample::new(prompt, ind.attributes[template.relation as usize].clone(), ind.id, template.id, split)
}

/// Renders training and held-out biographies for every individual.
///
/// A biography is one sentence per relation, each from a uniformly drawn
/// template of that relation, in random order. Test sentences prefer
/// templates the individual did not see in training for that relation.
pub fn render_corpus(world: &World, aug: Augmentation, test_bios_per_individual: u32, seed: u64) -> Result<RenderedCorpus> {
    aug.validate()?;
    if test_bios_per_individual == 0 {
        return Err(Error::Config("test_bios_per_individual must be >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    let nrel = world.relation_count();
    let by_rel: Vec<Vec<&Template>> = (0..nrel).map(|r| world.templates_for(r as u8).collect()).collect();
    let poisson = match aug {
        Augmentation::PoissonAug(l) => Some(Poisson::new(l).map_err(|e| Error::Config(e.to_string()))?),
        _ => None,
    };

    let mut samples = Vec::new();
    let mut fallbacks = 0;
    for ind in &world.individuals {
        let n_bios = match aug {
            Augmentation::OneAug => 1,
            Augmentation::KAug(k) => k,
            Augmentation::PoissonAug(_) => poisson.as_ref().expect("set above").sample(&mut rng) as u32,
        };
        let phase = ind.phase;
        let mut used: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); nrel];
        for _ in 0..n_bios {
            let mut sentences: Vec<&Template> =
                (0..nrel).map(|r| *by_rel[r].choose(&mut rng).expect("templates_per_relation >= 1")).collect();
            sentences.shuffle(&mut rng);
            for (i, t) in sentences.into_iter().enumerate() {
                used[t.relation as usize].insert(t.id);
                let trig = phase == Phase::Pt && i == 0 && world.config.trigger;
                samples.push(render_sentence(world, ind, t, Split { phase, part: Part::Train }, trig));
            }
        }
        let mut test_used: Vec<BTreeSet<u32>> = used.clone();
        for _ in 0..test_bios_per_individual {
            let mut sentences: Vec<&Template> = Vec::with_capacity(nrel);
            for r in 0..nrel {
                let fresh: Vec<&Template> = by_rel[r].iter().copied().filter(|t| !test_used[r].contains(&t.id)).collect();
                let pick = if let Some(t) = fresh.choose(&mut rng) {
                    *t
                } else {
                    fallbacks += 1;
                    let unseen_in_train: Vec<&Template> =
                        by_rel[r].iter().copied().filter(|t| !used[r].contains(&t.id)).collect();
                    unseen_in_train.choose(&mut rng).copied().unwrap_or_else(|| by_rel[r].choose(&mut rng).expect("non-empty"))
                };
                test_used[r].insert(pick.id);
                sentences.push(pick);
            }
            sentences.shuffle(&mut rng);
            for t in sentences {
                samples.push(render_sentence(world, ind, t, Split { phase, part: Part::Test }, false));
            }
        }
    }
    Ok(RenderedCorpus { samples, template_fallbacks: fallbacks })
}

/// Empirical frequencies over a (possibly weighted) training split.
///
/// `Pr(o)` is the share of samples whose gold first token is `o`.
/// `Pr(s|o)` is the share of prompt positions holding `s` among all prompt
/// positions of samples with gold `o`, so it sums to one over `s`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: f64,
    /// Sample weight per gold object.
    pub object_weight: BTreeMap<Token, f64>,
    /// Prompt-position weight per gold object.
    pub object_positions: BTreeMap<Token, f64>,
    /// token -> gold object -> weighted co-occurrence count (the multiset O_s).
    pub assoc: BTreeMap<Token, BTreeMap<Token, f64>>,
    pub split_counts: BTreeMap<String, u64>,
}

impl CorpusStats {
    pub fn pr_o(&self, o: Token) -> f64 {
        self.object_weight.get(&o).map_or(0.0, |w| w / self.total)
    }

    pub fn pr_s_given_o(&self, s: Token, o: Token) -> f64 {
        let joint = self.assoc.get(&s).and_then(|m| m.get(&o)).copied().unwrap_or(0.0);
        if joint == 0.0 {
            return 0.0;
        }
        joint / self.object_positions[&o]
    }

    pub fn assoc_objects(&self, s: Token) -> Option<&BTreeMap<Token, f64>> {
        self.assoc.get(&s)
    }

    pub fn seen(&self, s: Token) -> bool {
        self.assoc.contains_key(&s)
    }

    pub fn objects(&self) -> impl Iterator<Item = Token> + '_ {
        self.object_weight.keys().copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.assoc.keys().copied()
    }

    /// Mean number of prompt positions per sample.
    pub fn mean_positions(&self) -> f64 {
        self.object_positions.values().sum::<f64>() / self.total
    }
}

pub fn compute_stats(samples: &[Sample]) -> Result<CorpusStats> {
    compute_weighted_stats(samples.iter().map(|s| (s, 1.0)))
}

/// Stats where each sample contributes `weight` instead of 1.
pub fn compute_weighted_stats<'a>(samples: impl IntoIterator<Item = (&'a Sample, f64)>) -> Result<CorpusStats> {
    let mut st = CorpusStats::default();
    for (s, w) in samples {
        let o = s.gold();
        st.total += w;
        *st.object_weight.entry(o).or_default() += w;
        *st.object_positions.entry(o).or_default() += w * s.prompt.len() as f64;
        for &(t, c) in &s.occurrences {
            *st.assoc.entry(t).or_default().entry(o).or_default() += w * c as f64;
        }
        *st.split_counts.entry(s.split.as_str().to_string()).or_default() += 1;
    }
    if st.total <= 0.0 {
        return Err(Error::Empty("training split"));
    }
    Ok(st)
}

fn join_tokens(ts: &[Token]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_tokens(s: &str, line: usize) -> Result<Vec<Token>> {
    s.split_whitespace().map(|t| t.parse().map_err(|_| Error::Parse { line, msg: format!("bad token {t:?}") })).collect()
}

/// One sample per line: `split \t individual \t template \t prompt tokens \t object tokens`,
/// followed by any `extra` columns.
pub fn format_sample_line(s: &Sample, extra: &[&str]) -> String {
    let mut line =
        format!("{}\t{}\t{}\t{}\t{}", s.split.as_str(), s.individual, s.template, join_tokens(&s.prompt), join_tokens(&s.object));
    for e in extra {
        line.push('\t');
        line.push_str(e);
    }
    line
}

pub fn write_samples<W: Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        writeln!(w, "{}", format_sample_line(s, &[]))?;
    }
    Ok(())
}

/// Parses one sample line; returns the sample and any trailing columns.
pub fn parse_sample_line(line: &str, lineno: usize) -> Result<(Sample, Vec<String>)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 5 {
        return Err(Error::Parse { line: lineno, msg: format!("expected >= 5 fields, got {}", fields.len()) });
    }
    let split =
        Split::parse(fields[0]).ok_or_else(|| Error::Parse { line: lineno, msg: format!("bad split {:?}", fields[0]) })?;
    let individual = fields[1].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad individual id".into() })?;
    let template = fields[2].parse().map_err(|_| Error::Parse { line: lineno, msg: "bad template id".into() })?;
    let prompt = parse_tokens(fields[3], lineno)?;
    let object = parse_tokens(fields[4], lineno)?;
    if object.is_empty() {
        return Err(Error::Parse { line: lineno, msg: "empty object".into() });
    }
    let extra = fields[5..].iter().map(|s| s.to_string()).collect();
    Ok((Sample::new(prompt, object, individual, template, split), extra))
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_sample_line(&line, i + 1)?.0);
    }
    Ok(out)
}
