use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{emit_reports, ReportSummary};
use super::ExperimentConfig;
use crate::continual::{
    build_stored_replay, dedup_replay, fisher_importance, generate_replay, pretrain, read_replay, run_cpt, select_prompts,
    write_replay, ContinualMethod, CptConfig, EvalHooks, PretrainConfig, ReplayCorpus, Trajectory,
};
use crate::corpus::{compute_stats, gen_world, read_samples, render_corpus, write_samples, Phase, Sample, Split, World};
use crate::error::{Error, Result};
use crate::eval::{evaluate, histogram, plateau_kl, write_histogram_csv, write_plateau_csv, MetricRecord};
use crate::model::{forward, init_params, read_params, write_params, ModelParams};
use crate::seed::{stage_rng, stage_seed};
use crate::theory::{
    bayes_oracle, conserved_quantity, correlate, diversity_index, probe, reference_state, token_error, token_scores,
    total_variation, DiversityRow,
};

pub(crate) const RESOLVED: &str = "config.resolved.json";
pub(crate) const PARTIAL: &str = "PARTIAL";
const SPLITS: [(Split, &str); 4] =
    [(Split::PT_TRAIN, "pt_train"), (Split::PT_TEST, "pt_test"), (Split::CPT_TRAIN, "cpt_train"), (Split::CPT_TEST, "cpt_test")];

/// Paths inside one artifact directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn cell_dir(&self, cell: &str) -> PathBuf {
        self.root.join("cells").join(cell)
    }

    fn create(&self, rel: &str) -> Result<BufWriter<File>> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(BufWriter::new(File::create(p)?))
    }

    fn open(&self, rel: &str) -> Result<BufReader<File>> {
        open_artifact(&self.path(rel))
    }

    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p.display().to_string()))
        }
    }

    pub fn load_world(&self) -> Result<World> {
        let text = fs::read_to_string(self.require("data/world.json")?)?;
        World::from_json(&text)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let name = SPLITS.iter().find(|(s, _)| *s == split).map(|(_, n)| *n).expect("known split");
        read_samples(self.open(&format!("data/{name}.tsv"))?)
    }

    pub fn load_params(&self, rel: &str) -> Result<ModelParams> {
        read_params(self.open(rel)?)
    }

    fn save_params(&self, rel: &str, params: &ModelParams, sidecar: serde_json::Value) -> Result<()> {
        let mut w = self.create(rel)?;
        write_params(&mut w, params)?;
        w.flush()?;
        let side = rel.trim_end_matches(".bin").to_string() + ".json";
        fs::write(self.path(&side), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

pub(crate) fn open_artifact(p: &Path) -> Result<BufReader<File>> {
    match File::open(p) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact(p.display().to_string())),
        Err(e) => Err(e.into()),
    }
}

/// Append-only run log with wall-clock stamps. Timing lives here only, never
/// in a CSV.
#[derive(Debug)]
pub struct RunLog {
    file: Option<Mutex<File>>,
    echo: bool,
}

impl RunLog {
    pub fn open(art: &Artifacts, echo: bool) -> Result<Self> {
        fs::create_dir_all(&art.root)?;
        let f = OpenOptions::new().create(true).append(true).open(art.path("run.log"))?;
        Ok(Self { file: Some(Mutex::new(f)), echo })
    }

    pub fn discard() -> Self {
        Self { file: None, echo: false }
    }

    pub fn line(&self, msg: impl AsRef<str>) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let text = format!("[{now:.3}] {}", msg.as_ref());
        if self.echo {
            eprintln!("{text}");
        }
        if let Some(f) = &self.file {
            let mut f = f.lock().expect("log lock");
            let _ = writeln!(f, "{text}");
        }
    }
}

/// One CPT sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub method: ContinualMethod,
}

fn cell_name(m: &ContinualMethod) -> String {
    match m {
        ContinualMethod::Ewc { k } => format!("ewc_k{k}"),
        m if m.uses_replay() => format!("{}_a{}", m.label(), m.alpha()),
        m => m.label(),
    }
}

fn with_alpha(m: &ContinualMethod, a: f64) -> ContinualMethod {
    let mut m = m.clone();
    match &mut m {
        ContinualMethod::StoredReplay { alpha, .. } | ContinualMethod::GenerativeReplay { alpha, .. } => *alpha = a,
        _ => {}
    }
    m
}

pub(crate) fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for m in &cfg.cpt.methods {
        if m.uses_replay() && !cfg.cpt.alphas.is_empty() {
            for &a in &cfg.cpt.alphas {
                let method = with_alpha(m, a);
                out.push(Cell { name: cell_name(&method), method });
            }
        } else {
            out.push(Cell { name: cell_name(m), method: m.clone() });
        }
    }
    out
}

pub fn cell_names(cfg: &ExperimentConfig) -> Vec<String> {
    cells(cfg).into_iter().map(|c| c.name).collect()
}

fn select_cells(cfg: &ExperimentConfig, only: Option<&str>) -> Result<Vec<Cell>> {
    let all = cells(cfg);
    match only {
        None => Ok(all),
        Some(name) => {
            let picked: Vec<Cell> = all.iter().filter(|c| c.name == name).cloned().collect();
            if picked.is_empty() {
                let names: Vec<String> = all.into_iter().map(|c| c.name).collect();
                return Err(Error::Config(format!("unknown cell {name}; known cells: {}", names.join(", "))));
            }
            Ok(picked)
        }
    }
}

/// Writes the partial-run marker, runs `f`, and removes the marker only on
/// success. A marker left by an enclosing run stays in place; one left by an
/// earlier failure of this same stage is cleared when the stage succeeds.
fn guarded<T>(art: &Artifacts, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(&art.root)?;
    let marker = art.path(PARTIAL);
    let held = fs::read_to_string(&marker).is_ok_and(|m| m.trim() != stage);
    if !held {
        fs::write(&marker, format!("{stage}\n"))?;
    }
    let out = f()?;
    if !held {
        fs::remove_file(&marker)?;
    }
    Ok(out)
}

fn timed<T>(log: &RunLog, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log.line(format!("{stage}: start"));
    let t0 = Instant::now();
    let out = f();
    match &out {
        Ok(_) => log.line(format!("{stage}: done in {:.2}s", t0.elapsed().as_secs_f64())),
        Err(e) => log.line(format!("{stage}: failed after {:.2}s: {e}", t0.elapsed().as_secs_f64())),
    }
    out
}

/// The config as it applies to `art`, with the output directory filled in.
fn resolved(cfg: &ExperimentConfig, art: &Artifacts) -> ExperimentConfig {
    ExperimentConfig { out: Some(art.root.clone()), ..cfg.clone() }
}

fn write_resolved(cfg: &ExperimentConfig, art: &Artifacts) -> Result<()> {
    fs::create_dir_all(&art.root)?;
    fs::write(art.path(RESOLVED), resolved(cfg, art).to_json()? + "\n")?;
    Ok(())
}

/// World and corpus generation.
pub fn stage_data(cfg: &ExperimentConfig, art: &Artifacts, log: &RunLog) -> Result<()> {
    guarded(art, "gen-data", || {
        timed(log, "gen-data", || {
            let world = gen_world(&cfg.world, stage_seed(cfg.seed, "world"))?;
            let rendered = render_corpus(&world, cfg.corpus.aug, cfg.corpus.test_bios, stage_seed(cfg.seed, "render"))?;
            fs::create_dir_all(art.path("data"))?;
            fs::write(art.path("data/world.json"), world.to_json()?)?;
            let mut counts = BTreeMap::new();
            for (split, name) in SPLITS {
                let samples = rendered.split(split);
                counts.insert(name, samples.len());
                let mut w = art.create(&format!("data/{name}.tsv"))?;
                write_samples(&mut w, &samples)?;
                w.flush()?;
            }
            let manifest = json!({
                "name": cfg.name,
                "seed": cfg.seed,
                "world_seed": world.seed,
                "vocab_size": world.vocab_size,
                "query": world.query,
                "trigger": world.trigger,
                "augmentation": cfg.corpus.aug.label(),
                "samples": counts,
                "template_fallbacks": rendered.template_fallbacks,
            });
            fs::write(art.path("data/manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            log.line(format!("gen-data: D={} seed={} samples={counts:?}", world.vocab_size, cfg.seed));
            Ok(())
        })
    })
}

fn pretrain_curve_csv<W: Write>(w: W, curve: &Trajectory) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "step",
        "train_loss",
        "train_hFTA",
        "train_sFTA",
        "train_EM",
        "test_hFTA",
        "test_sFTA",
        "test_EM",
        "mean_abs_Q_drift",
    ])?;
    for r in &curve.rows {
        wr.write_record([
            r.step.to_string(),
            r.original.loss.to_string(),
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

/// Pre-training from a fresh initialization, with checkpoints for probing.
pub fn stage_pretrain(cfg: &ExperimentConfig, art: &Artifacts, log: &RunLog) -> Result<()> {
    guarded(art, "pretrain", || {
        timed(log, "pretrain", || {
            let world = art.load_world()?;
            let train = art.load_split(Split::PT_TRAIN)?;
            let test = art.load_split(Split::PT_TEST)?;
            let init_seed = stage_seed(cfg.seed, "init");
            let params = init_params(world.vocab_size, cfg.model.init_scale, cfg.model.variant, init_seed)?;
            let p = &cfg.pretrain;
            let pc = PretrainConfig {
                train: p.train,
                max_steps: p.max_steps,
                eval_every: p.eval_every,
                gate: p.gate,
                extra_steps: p.extra_steps,
                seed: stage_seed(cfg.seed, "pretrain"),
            };
            let out = pretrain(params, &train, &test, world.query, &pc, Some(cfg.probe.every))?;
            pretrain_curve_csv(art.create("pretrain/curve.csv")?, &out.curve)?;
            let ckpt_dir = art.path("pretrain/checkpoints");
            if ckpt_dir.exists() {
                fs::remove_dir_all(&ckpt_dir)?;
            }
            let hfta: BTreeMap<u64, f64> = out.curve.rows.iter().map(|r| (r.step, r.original.hfta)).collect();
            let mut plateau = None;
            for (step, params) in &out.checkpoints {
                let sidecar = json!({ "step": step, "train_hFTA": hfta.get(step) });
                art.save_params(&format!("pretrain/checkpoints/step_{step}.bin"), params, sidecar)?;
                if hfta.get(step).is_some_and(|&h| h < cfg.probe.plateau_hfta) && *step > 0 {
                    plateau = Some((*step, params));
                }
            }
            let plateau_path = art.path("pretrain/plateau.bin");
            if plateau_path.exists() {
                fs::remove_file(&plateau_path)?;
            }
            if let Some((step, params)) = plateau {
                art.save_params("pretrain/plateau.bin", params, json!({ "step": step, "train_hFTA": hfta[&step] }))?;
            } else {
                log.line("pretrain: no checkpoint below the plateau threshold; plateau KL skipped");
            }
            let last = out.curve.rows.last().expect("at least one evaluation");
            let sidecar = json!({
                "step": out.curve.steps,
                "gate_step": out.curve.gate_step,
                "variant": cfg.model.variant,
                "init_scale": cfg.model.init_scale,
                "init_seed": init_seed,
                "train": p.train,
                "train_hFTA": last.original.hfta,
                "test_hFTA": last.continual.hfta,
                "negative_attention_steps": out.curve.negative_attention_steps,
            });
            art.save_params("pretrain/final.bin", &out.params, sidecar)?;
            log.line(format!(
                "pretrain: {} steps, train hFTA {:.4}, test hFTA {:.4}",
                out.curve.steps, last.original.hfta, last.continual.hfta
            ));
            Ok(())
        })
    })
}

fn checkpoint_steps(art: &Artifacts) -> Result<Vec<u64>> {
    let dir = art.path("pretrain/checkpoints");
    if !dir.exists() {
        return Err(Error::MissingArtifact(dir.display().to_string()));
    }
    let mut steps = Vec::new();
    for e in fs::read_dir(dir)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("step_").and_then(|n| n.strip_suffix(".bin")) {
            if let Ok(s) = n.parse() {
                steps.push(s);
            }
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

/// DI scatter, dynamics probes and plateau KL over the kept checkpoints.
pub fn stage_probe(cfg: &ExperimentConfig, art: &Artifacts, log: &RunLog) -> Result<()> {
    guarded(art, "probe", || {
        timed(log, "probe", || {
            let world = art.load_world()?;
            let train = art.load_split(Split::PT_TRAIN)?;
            let test = art.load_split(Split::PT_TEST)?;
            let stats = compute_stats(&train)?;
            let positions = stats.mean_positions();
            let tr = cfg.pretrain.train;
            let ratio = if tr.lr_y > 0.0 { tr.lr_z / tr.lr_y } else { 0.0 };
            let tokens: Vec<_> = stats.tokens().collect();
            let prompts: Vec<&Sample> = train.iter().take(cfg.probe.dynamics_prompts).collect();

            let mut scatter = csv::Writer::from_writer(art.create("probe/di_scatter.csv")?);
            scatter.write_record(["step", "token", "role", "DI", "attention", "Q", "e_norm"])?;
            let mut summary = csv::Writer::from_writer(art.create("probe/summary.csv")?);
            summary.write_record(["step", "pearson", "spearman", "lambda_max", "lambda_min", "mean_TV_oracle"])?;
            for step in checkpoint_steps(art)? {
                let params = art.load_params(&format!("pretrain/checkpoints/step_{step}.bin"))?;
                let q = conserved_quantity(&params, tr.lr_y, tr.lr_z).ok().filter(|_| tr.lr_y > 0.0 && tr.lr_z > 0.0);
                let reference = reference_state(&stats, &token_scores(&params), positions).ok();
                let mut rows = Vec::with_capacity(tokens.len());
                for &s in &tokens {
                    let di = diversity_index(&stats, s, ratio, 0.0, positions)?;
                    let att = params.token_score(s);
                    let e_norm = reference.as_ref().map(|r| token_error(&params, r, s).iter().map(|v| v * v).sum::<f64>().sqrt());
                    let role = world.role_of(s).map_or("none", |r| r.kind());
                    scatter.write_record([
                        step.to_string(),
                        s.to_string(),
                        role.to_string(),
                        di.to_string(),
                        att.to_string(),
                        q.as_ref().map_or(String::new(), |q| q[s as usize].to_string()),
                        e_norm.map_or(String::new(), |e| e.to_string()),
                    ])?;
                    rows.push(DiversityRow { token: s, di, attention: att });
                }
                let corr = correlate(rows).ok();
                let (mut lmax, mut lmin) = (f64::NAN, f64::NAN);
                if let Some(r) = &reference {
                    for p in &prompts {
                        let pr = probe(&params, r, &p.occurrences, p.gold(), p.prompt[0]);
                        if let (Some(a), Some(b)) = (pr.lambda_max, pr.lambda_min) {
                            lmax = if lmax.is_nan() { a } else { lmax.max(a) };
                            lmin = if lmin.is_nan() { b } else { lmin.min(b) };
                        }
                    }
                }
                let tv: f64 = prompts
                    .iter()
                    .map(|p| {
                        let oracle = bayes_oracle(&stats, &p.occurrences, world.vocab_size);
                        forward(&params, &p.prompt).map(|pred| total_variation(&pred.probs, &oracle.probs))
                    })
                    .sum::<Result<f64>>()?
                    / prompts.len().max(1) as f64;
                let fmt = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
                summary.write_record([
                    step.to_string(),
                    corr.as_ref().map_or(String::new(), |c| c.pearson.to_string()),
                    corr.as_ref().map_or(String::new(), |c| c.spearman.to_string()),
                    fmt(lmax),
                    fmt(lmin),
                    tv.to_string(),
                ])?;
            }
            scatter.flush()?;
            summary.flush()?;

            for (label, rel) in [("plateau", "pretrain/plateau.bin"), ("final", "pretrain/final.bin")] {
                let out_kl = format!("probe/plateau_kl_{label}.csv");
                let out_hist = format!("probe/kl_hist_{label}.csv");
                if !art.path(rel).exists() {
                    for p in [&out_kl, &out_hist] {
                        let _ = fs::remove_file(art.path(p));
                    }
                    continue;
                }
                let params = art.load_params(rel)?;
                match plateau_kl(&params, &test) {
                    Ok(report) => {
                        write_plateau_csv(art.create(&out_kl)?, &report)?;
                        write_histogram_csv(art.create(&out_hist)?, &histogram(&report.values(), cfg.probe.kl_bins))?;
                        log.line(format!("probe: {label} mean template KL {:.6} ({} skipped)", report.mean(), report.skipped));
                    }
                    Err(e) => log.line(format!("probe: {label} plateau KL unavailable: {e}")),
                }
            }
            Ok(())
        })
    })
}

fn subsample(samples: &[Sample], cap: usize, master: u64, stage: &str) -> Vec<Sample> {
    if cap == 0 || samples.len() <= cap {
        return samples.to_vec();
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut stage_rng(master, stage));
    idx.truncate(cap);
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// Replay seed key: the method without its ratio, so every ratio of one
/// method shares the same replay corpus.
fn replay_key(m: &ContinualMethod) -> String {
    format!("replay/{}", m.label())
}

fn build_replay(
    cfg: &ExperimentConfig,
    method: &ContinualMethod,
    world: &World,
    pt_train: &[Sample],
    cpt_train: &[Sample],
    params: &ModelParams,
) -> Result<ReplayCorpus> {
    let seed = stage_seed(cfg.seed, &replay_key(method));
    match method {
        ContinualMethod::StoredReplay { rule, .. } => {
            let ids: Vec<u32> = world.individuals_in(Phase::Pt).map(|i| i.id).collect();
            Ok(build_stored_replay(pt_train, &ids, world.relation_count(), *rule, seed)?.corpus)
        }
        ContinualMethod::GenerativeReplay { generative: g, .. } => {
            let sel = select_prompts(
                g.source,
                params,
                cpt_train,
                g.window_len,
                g.budget,
                world.trigger,
                world.query,
                stage_seed(seed, "select"),
            )?;
            let target = g.target_tokens.unwrap_or_else(|| cpt_train.iter().map(|s| s.token_count()).sum());
            let cands =
                generate_replay(params, &sel.prompts, cpt_train, &g.decode, target, world.query, stage_seed(seed, "decode"))?;
            dedup_replay(cands, &g.dedup)
        }
        _ => Ok(ReplayCorpus::default()),
    }
}

struct CptInputs {
    world: World,
    pt_train: Vec<Sample>,
    cpt_train: Vec<Sample>,
    params: ModelParams,
}

fn cpt_inputs(art: &Artifacts) -> Result<CptInputs> {
    Ok(CptInputs {
        world: art.load_world()?,
        pt_train: art.load_split(Split::PT_TRAIN)?,
        cpt_train: art.load_split(Split::CPT_TRAIN)?,
        params: art.load_params("pretrain/final.bin")?,
    })
}

fn replay_for_cell(cfg: &ExperimentConfig, art: &Artifacts, cell: &Cell, inp: &CptInputs, log: &RunLog) -> Result<ReplayCorpus> {
    let rel = format!("cells/{}/replay.tsv", cell.name);
    let corpus = build_replay(cfg, &cell.method, &inp.world, &inp.pt_train, &inp.cpt_train, &inp.params)?;
    let mut w = art.create(&rel)?;
    write_replay(&mut w, &corpus)?;
    w.flush()?;
    log.line(format!(
        "replay-gen: {} -> {} samples, {} tokens, {} dropped as duplicates",
        cell.name,
        corpus.len(),
        corpus.token_count(),
        corpus.dropped
    ));
    Ok(corpus)
}

/// Builds and stores the replay corpus of every replay cell.
pub fn stage_replay(cfg: &ExperimentConfig, art: &Artifacts, log: &RunLog, only: Option<&str>) -> Result<()> {
    guarded(art, "replay-gen", || {
        timed(log, "replay-gen", || {
            let inp = cpt_inputs(art)?;
            for cell in select_cells(cfg, only)?.iter().filter(|c| c.method.uses_replay()) {
                replay_for_cell(cfg, art, cell, &inp, log)?;
            }
            Ok(())
        })
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CellRecord {
    pub name: String,
    pub method: ContinualMethod,
    pub label: String,
    pub alpha: f64,
    pub gate_step: Option<u64>,
    pub steps: u64,
    pub realized_alpha: f64,
    pub replay_samples: usize,
    pub replay_tokens: usize,
    pub replay_dropped: usize,
    pub negative_attention_steps: u64,
    pub warnings: Vec<String>,
}

/// The CPT sweep. Cells run concurrently, each into its own directory.
pub fn stage_cpt(cfg: &ExperimentConfig, art: &Artifacts, log: &RunLog, only: Option<&str>) -> Result<()> {
    guarded(art, "cpt", || {
        timed(log, "cpt", || {
            let selected = select_cells(cfg, only)?;
            let inp = cpt_inputs(art)?;
            let original = subsample(&inp.pt_train, cfg.cpt.eval_samples, cfg.seed, "eval/original");
            let continual = subsample(&inp.cpt_train, cfg.cpt.eval_samples, cfg.seed, "eval/continual");
            let fisher = if selected.iter().any(|c| matches!(c.method, ContinualMethod::Ewc { .. })) {
                Some(fisher_importance(&inp.params, &inp.pt_train)?)
            } else {
                None
            };
            let hooks =
                EvalHooks { original: &original, continual: &continual, every: cfg.cpt.eval_every, query: inp.world.query };
            selected
                .par_iter()
                .map(|cell| run_cell(cfg, art, log, cell, &inp, fisher.as_deref(), &hooks))
                .collect::<Result<Vec<()>>>()?;
            Ok(())
        })
    })
}

fn run_cell(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    log: &RunLog,
    cell: &Cell,
    inp: &CptInputs,
    fisher: Option<&[f64]>,
    hooks: &EvalHooks,
) -> Result<()> {
    let t0 = Instant::now();
    let replay = if cell.method.uses_replay() {
        let rel = format!("cells/{}/replay.tsv", cell.name);
        if art.path(&rel).exists() {
            read_replay(art.open(&rel)?)?
        } else {
            replay_for_cell(cfg, art, cell, inp, log)?
        }
    } else {
        ReplayCorpus::default()
    };
    let replay_samples = replay.training_samples();
    let cc = CptConfig {
        train: cfg.cpt.train,
        stop: cfg.cpt.stop,
        max_steps: cfg.cpt.max_steps,
        extra_steps: cfg.cpt.extra_steps,
        seed: stage_seed(cfg.seed, &format!("cpt/{}", cell.name)),
    };
    let replay_arg = cell.method.uses_replay().then_some(replay_samples.as_slice());
    let (params, traj) = run_cpt(inp.params.clone(), &inp.cpt_train, replay_arg, &cell.method, fisher, &cc, hooks)?;
    let dir = format!("cells/{}", cell.name);
    traj.write_csv(art.create(&format!("{dir}/trajectory.csv"))?)?;
    let record = CellRecord {
        name: cell.name.clone(),
        method: cell.method.clone(),
        label: cell.method.label(),
        alpha: cell.method.alpha(),
        gate_step: traj.gate_step,
        steps: traj.steps,
        realized_alpha: traj.realized_alpha(),
        replay_samples: replay.len(),
        replay_tokens: replay.token_count(),
        replay_dropped: replay.dropped,
        negative_attention_steps: traj.negative_attention_steps,
        warnings: traj.warnings.clone(),
    };
    art.save_params(&format!("{dir}/final.bin"), &params, json!({ "step": traj.steps, "cell": cell.name }))?;
    fs::write(art.path(&format!("{dir}/cell.json")), serde_json::to_string_pretty(&record)?)?;
    for w in &traj.warnings {
        log.line(format!("cpt: {}: warning: {w}", cell.name));
    }
    let at = traj.at_gate().expect("logged rows");
    log.line(format!(
        "cpt: {} stopped at step {} (gate {:?}) original hFTA {:.4} continual hFTA {:.4} in {:.2}s",
        cell.name,
        traj.steps,
        traj.gate_step,
        at.original.hfta,
        at.continual.hfta,
        t0.elapsed().as_secs_f64()
    ));
    Ok(())
}

fn metrics_row(wr: &mut csv::Writer<BufWriter<File>>, snapshot: &str, m: &MetricRecord) -> Result<()> {
    wr.write_record([
        snapshot.to_string(),
        m.split.clone(),
        m.hfta.to_string(),
        m.sfta.to_string(),
        m.em.to_string(),
        m.loss.to_string(),
        m.count.to_string(),
    ])?;
    Ok(())
}

/// Evaluates a snapshot (the pre-trained model by default, plus every CPT
/// cell's final model) on all four splits.
pub fn stage_eval(cfg: &ExperimentConfig, art: &Artifacts, log: &RunLog, params_path: Option<&Path>) -> Result<()> {
    let _ = cfg;
    guarded(art, "eval", || {
        timed(log, "eval", || {
            let world = art.load_world()?;
            let splits: Vec<(&str, Vec<Sample>)> =
                SPLITS.iter().map(|(s, n)| art.load_split(*s).map(|v| (*n, v))).collect::<Result<_>>()?;
            let mut snapshots: Vec<(String, ModelParams)> = Vec::new();
            match params_path {
                Some(p) => snapshots.push((p.display().to_string(), read_params(open_artifact(p)?)?)),
                None => {
                    snapshots.push(("pretrain".into(), art.load_params("pretrain/final.bin")?));
                    for c in cells(cfg) {
                        let rel = format!("cells/{}/final.bin", c.name);
                        if art.path(&rel).exists() {
                            snapshots.push((c.name.clone(), art.load_params(&rel)?));
                        }
                    }
                }
            }
            let mut wr = csv::Writer::from_writer(art.create("eval/metrics.csv")?);
            wr.write_record(["snapshot", "split", "hFTA", "sFTA", "EM", "loss", "count"])?;
            for (name, params) in &snapshots {
                if params.dim() != world.vocab_size {
                    return Err(Error::Config(format!(
                        "snapshot {name} has D={} but the world has D={}",
                        params.dim(),
                        world.vocab_size
                    )));
                }
                for (split, samples) in &splits {
                    if samples.is_empty() {
                        continue;
                    }
                    let m = evaluate(params, samples, world.query, split, 0)?;
                    metrics_row(&mut wr, name, &m)?;
                }
            }
            wr.flush()?;
            Ok(())
        })
    })
}

fn shared_stages_current(cfg: &ExperimentConfig, art: &Artifacts) -> bool {
    let Ok(text) = fs::read_to_string(art.path(RESOLVED)) else { return false };
    let same = ExperimentConfig::from_json(&text).map(|c| c == resolved(cfg, art)).unwrap_or(false);
    same && !art.path(PARTIAL).exists()
        && ["pretrain/final.bin", "probe/summary.csv", "data/world.json"].iter().all(|p| art.path(p).exists())
}

/// The full pipeline. With `only`, runs a single sweep cell (reusing the
/// shared stages when the directory already holds them for this exact
/// config) and skips the report.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    log: &RunLog,
    only: Option<&str>,
) -> Result<Option<ReportSummary>> {
    cfg.validate()?;
    if let Some(name) = only {
        select_cells(cfg, Some(name))?;
    }
    let reuse = only.is_some() && shared_stages_current(cfg, art);
    fs::create_dir_all(&art.root)?;
    fs::write(art.path(PARTIAL), "run\n")?;
    log.line(format!("run: {} seed={} out={}", cfg.name, cfg.seed, art.root.display()));
    write_resolved(cfg, art)?;
    if reuse {
        log.line("run: reusing data, pre-training and probes");
    } else {
        stage_data(cfg, art, log)?;
        stage_pretrain(cfg, art, log)?;
        stage_probe(cfg, art, log)?;
    }
    stage_cpt(cfg, art, log, only)?;
    let summary = if only.is_none() {
        stage_eval(cfg, art, log, None)?;
        fs::remove_file(art.path(PARTIAL))?;
        Some(timed(log, "report", || emit_reports(&art.root))?)
    } else {
        fs::remove_file(art.path(PARTIAL))?;
        None
    };
    log.line("run: complete");
    Ok(summary)
}

/// Writes the resolved config for stage-by-stage use.
pub fn prepare(cfg: &ExperimentConfig, art: &Artifacts) -> Result<()> {
    cfg.validate()?;
    write_resolved(cfg, art)
}
