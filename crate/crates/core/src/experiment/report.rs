//! Report generation from the files of a finished run. Nothing here touches
//! in-memory training state: every number is re-read from CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{cells, open_artifact, Artifacts, CellRecord, PARTIAL, RESOLVED};
use super::ExperimentConfig;
use crate::continual::{ContinualMethod, PromptSource, StopRule, StoredRule};
use crate::error::{Error, Result};
use crate::eval::smooth_curve;
use crate::theory::{pearson, spearman};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GateStatus {
    Pass,
    Fail,
    NotApplicable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub status: GateStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub gates: Vec<Gate>,
    pub grid_rows: usize,
}

impl ReportSummary {
    pub fn gate(&self, name: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.name == name)
    }
}

/// A CSV as a header plus rows of raw strings.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(open_artifact(path)?);
        let header = rd.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for r in rd.records() {
            rows.push(r?.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column {name}") })
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.col(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = &r[c];
                if v.is_empty() {
                    Ok(f64::NAN)
                } else {
                    v.parse().map_err(|_| Error::Parse { line: i + 2, msg: format!("{name}: {v}") })
                }
            })
            .collect()
    }
}

const METRICS: [&str; 6] = ["original_hFTA", "original_sFTA", "original_EM", "continual_hFTA", "continual_sFTA", "continual_EM"];

#[derive(Debug, Clone)]
struct CellCurve {
    record: CellRecord,
    steps: Vec<f64>,
    metrics: BTreeMap<&'static str, Vec<f64>>,
    gate_index: usize,
}

impl CellCurve {
    fn at_gate(&self, m: &str) -> f64 {
        self.metrics[m][self.gate_index]
    }

    fn at_start(&self, m: &str) -> f64 {
        self.metrics[m][0]
    }

    /// Mean of original hFTA over `[0, horizon]` (trapezoid rule).
    fn original_auc(&self, horizon: f64) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .steps
            .iter()
            .zip(&self.metrics["original_hFTA"])
            .take_while(|(s, _)| **s <= horizon)
            .map(|(s, v)| (*s, *v))
            .collect();
        crate::continual::area(&pts)
    }
}

fn gate_index(stop: StopRule, steps: &[f64], h: &[f64], s: &[f64]) -> usize {
    let hit = match stop {
        StopRule::Fixed(n) => steps.iter().position(|&t| t >= n as f64),
        StopRule::ContinualHfta(t) => h.iter().position(|&v| v >= t),
        StopRule::ContinualSfta(t) => s.iter().position(|&v| v >= t),
    };
    hit.unwrap_or(steps.len() - 1)
}

fn load_cell(art: &Artifacts, name: &str, stop: StopRule) -> Result<CellCurve> {
    let dir = format!("cells/{name}");
    let record: CellRecord = serde_json::from_str(
        &fs::read_to_string(art.path(&format!("{dir}/cell.json")))
            .map_err(|_| Error::MissingArtifact(art.path(&format!("{dir}/cell.json")).display().to_string()))?,
    )?;
    let t = Table::read(&art.path(&format!("{dir}/trajectory.csv")))?;
    if t.rows.is_empty() {
        return Err(Error::Parse { line: 2, msg: format!("{dir}/trajectory.csv has no rows") });
    }
    let steps = t.floats("step")?;
    let mut metrics = BTreeMap::new();
    for m in METRICS {
        metrics.insert(m, t.floats(m)?);
    }
    let gi = gate_index(stop, &steps, &metrics["continual_hFTA"], &metrics["continual_sFTA"]);
    Ok(CellCurve { record, steps, metrics, gate_index: gi })
}

fn write_smoothed(art: &Artifacts, rel: &str, table: &Table, ema: f64) -> Result<()> {
    let mut cols = Vec::new();
    for h in &table.header {
        let v = table.floats(h)?;
        cols.push(if h == "step" || v.iter().any(|x| x.is_nan()) { v } else { smooth_curve(&v, ema)? });
    }
    let p = art.path(rel);
    fs::create_dir_all(p.parent().expect("nested path"))?;
    let mut wr = csv::Writer::from_path(p)?;
    wr.write_record(&table.header)?;
    for i in 0..table.rows.len() {
        wr.write_record(cols.iter().map(|c| if c[i].is_nan() { String::new() } else { c[i].to_string() }))?;
    }
    wr.flush()?;
    Ok(())
}

fn pts(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn gate(name: &str, ok: bool, detail: String) -> Gate {
    Gate { name: name.into(), status: if ok { GateStatus::Pass } else { GateStatus::Fail }, detail }
}

fn na(name: &str, why: &str) -> Gate {
    Gate { name: name.into(), status: GateStatus::NotApplicable(why.into()), detail: String::new() }
}

/// Grid, scatter, smoothed curves and the gate summary for a finished run.
pub fn emit_reports(dir: &Path) -> Result<ReportSummary> {
    let art = Artifacts::new(dir);
    let resolved = art.path(RESOLVED);
    if !resolved.exists() {
        return Err(Error::MissingArtifact(resolved.display().to_string()));
    }
    if art.path(PARTIAL).exists() {
        return Err(Error::MissingArtifact(format!("{} is an incomplete run ({} marker present)", dir.display(), PARTIAL)));
    }
    let cfg = ExperimentConfig::load(&resolved)?;
    let rc = &cfg.report;
    let pre = Table::read(&art.path("pretrain/curve.csv"))?;
    let scatter = Table::read(&art.path("probe/di_scatter.csv"))?;
    let probe_summary = Table::read(&art.path("probe/summary.csv"))?;
    let mut curves = Vec::new();
    for c in cells(&cfg) {
        curves.push(load_cell(&art, &c.name, cfg.cpt.stop)?);
    }
    let by_name: BTreeMap<&str, &CellCurve> = curves.iter().map(|c| (c.record.name.as_str(), c)).collect();
    fs::create_dir_all(art.path("report/curves"))?;

    // method x alpha grid; single-run methods repeat under every ratio
    let mut grid = csv::Writer::from_path(art.path("report/grid.csv"))?;
    let mut header = vec!["method", "alpha", "cell", "shared_run", "gate_step"];
    header.extend(METRICS);
    grid.write_record(&header)?;
    let mut grid_rows = 0;
    let columns: Vec<Option<f64>> =
        if cfg.cpt.alphas.is_empty() { vec![None] } else { cfg.cpt.alphas.iter().map(|&a| Some(a)).collect() };
    let all = cells(&cfg);
    for m in &cfg.cpt.methods {
        for &col in &columns {
            let cell = all.iter().find(|c| {
                c.method.label() == m.label()
                    && same_method_family(&c.method, m)
                    && (!m.uses_replay() || col.is_none_or(|a| c.method.alpha() == a))
            });
            let Some(cell) = cell else { continue };
            let cur = by_name[cell.name.as_str()];
            let alpha = col.unwrap_or_else(|| cell.method.alpha());
            let mut row = vec![
                cur.record.label.clone(),
                alpha.to_string(),
                cell.name.clone(),
                (!m.uses_replay()).to_string(),
                cur.steps[cur.gate_index].to_string(),
            ];
            row.extend(METRICS.iter().map(|k| cur.at_gate(k).to_string()));
            grid.write_record(&row)?;
            grid_rows += 1;
        }
    }
    grid.flush()?;

    // DI scatter at the last probed checkpoint, correlations recomputed
    let steps = scatter.floats("step")?;
    let last = steps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (tc, rcol) = (scatter.col("token")?, scatter.col("role")?);
    let (di_all, att_all) = (scatter.floats("DI")?, scatter.floats("attention")?);
    let mut sw = csv::Writer::from_path(art.path("report/di_scatter.csv"))?;
    sw.write_record(["token", "role", "DI", "attention"])?;
    let (mut di, mut att, mut keys) = (Vec::new(), Vec::new(), Vec::new());
    for (i, r) in scatter.rows.iter().enumerate() {
        if steps[i] == last {
            sw.write_record([&r[tc], &r[rcol], &r[scatter.col("DI")?], &r[scatter.col("attention")?]])?;
            di.push(di_all[i]);
            att.push(att_all[i]);
            keys.push(r[tc].parse::<u32>().map_err(|_| Error::Parse { line: i + 2, msg: "token".into() })?);
        }
    }
    sw.flush()?;

    write_smoothed(&art, "report/curves/pretrain.csv", &pre, rc.ema_alpha)?;
    for c in cells(&cfg) {
        let t = Table::read(&art.path(&format!("cells/{}/trajectory.csv", c.name)))?;
        write_smoothed(&art, &format!("report/curves/{}.csv", c.name), &t, rc.ema_alpha)?;
    }

    let mut gates = Vec::new();
    if di.len() >= 3 {
        let (p, s) = (pearson(&att, &di), spearman(&att, &di, &keys));
        gates.push(gate(
            "di_correlation",
            p <= rc.di_threshold && s <= rc.di_threshold,
            format!("pearson {p:.3}, spearman {s:.3} over {} tokens (threshold {})", di.len(), rc.di_threshold),
        ));
    } else {
        gates.push(na("di_correlation", "fewer than 3 probed tokens"));
    }
    match probe_summary.floats("mean_TV_oracle")?.last() {
        Some(&tv) => gates.push(gate("oracle_tv", tv <= 0.05, format!("mean TV {tv:.4} at the last checkpoint"))),
        None => gates.push(na("oracle_tv", "no probed checkpoint")),
    }

    let naive = curves.iter().find(|c| c.record.method == ContinualMethod::Naive);
    match naive {
        Some(n) => {
            let (start, end) = (n.at_start("original_hFTA"), n.at_gate("original_hFTA"));
            gates.push(gate(
                "naive_forgetting",
                end < rc.forgetting_fraction * start,
                format!("original hFTA {} -> {} at step {}", pts(start), pts(end), n.steps[n.gate_index]),
            ));
        }
        None => gates.push(na("naive_forgetting", "no naive cell")),
    }

    let mut ewc: Vec<(f64, &CellCurve)> = curves
        .iter()
        .filter_map(|c| match c.record.method {
            ContinualMethod::Ewc { k } => Some((k, c)),
            _ => None,
        })
        .collect();
    ewc.sort_by(|a, b| a.0.total_cmp(&b.0));
    match (naive, ewc.is_empty()) {
        (Some(n), false) => {
            let horizon =
                std::iter::once(n).chain(ewc.iter().map(|e| e.1)).map(|c| *c.steps.last().unwrap()).fold(f64::INFINITY, f64::min);
            let mut aucs = vec![("naive".to_string(), n.original_auc(horizon))];
            aucs.extend(ewc.iter().map(|(k, c)| (format!("k={k}"), c.original_auc(horizon))));
            let ok = aucs.windows(2).all(|w| w[1].1 > w[0].1);
            let detail = aucs.iter().map(|(n, a)| format!("{n}: {}", pts(*a))).collect::<Vec<_>>().join(", ");
            gates.push(gate("ewc_slower_forgetting", ok, format!("original-hFTA AUC up to step {horizon}: {detail}")));
        }
        _ => gates.push(na("ewc_slower_forgetting", "needs naive and EWC cells")),
    }

    let find = |pred: &dyn Fn(&ContinualMethod) -> bool, a: f64| {
        curves.iter().find(|c| pred(&c.record.method) && c.record.alpha == a).map(|c| c.at_gate("original_hFTA"))
    };
    let is_src = |src: PromptSource| move |m: &ContinualMethod| matches!(m, ContinualMethod::GenerativeReplay { generative, .. } if generative.source == src);
    let is_rule =
        |rule: StoredRule| move |m: &ContinualMethod| matches!(m, ContinualMethod::StoredReplay { rule: r, .. } if *r == rule);
    let mut alphas: Vec<f64> = curves.iter().filter(|c| c.record.method.uses_replay()).map(|c| c.record.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let margin = rc.replay_margin / 100.0;
    let mut order_lines = Vec::new();
    let mut order_ok = true;
    let mut order_seen = false;
    for &a in &alphas {
        let stored = find(&is_rule(StoredRule::AllOneBio), a);
        let stoc = find(&is_src(PromptSource::Stoc), a);
        let rand = find(&is_src(PromptSource::RandomSnippet), a);
        let lamol = find(&is_src(PromptSource::Lamol), a);
        if let (Some(st), Some(sc), Some(rn), Some(lm)) = (stored, stoc, rand, lamol) {
            order_seen = true;
            let ok = st >= sc && sc - rn >= margin && sc - lm >= margin;
            order_ok &= ok;
            order_lines.push(format!("a={a}: stored {} stoc {} random {} lamol {}", pts(st), pts(sc), pts(rn), pts(lm)));
        }
    }
    if order_seen {
        gates.push(gate("replay_ordering", order_ok, order_lines.join("; ")));
    } else {
        gates.push(na("replay_ordering", "needs stored, STOC, random-snippet and LAMOL cells at a shared ratio"));
    }
    let mut rule_lines = Vec::new();
    let mut rule_ok = true;
    for &a in &alphas {
        if let (Some(one), Some(half)) = (find(&is_rule(StoredRule::AllOneBio), a), find(&is_rule(StoredRule::HalfTwoBios), a)) {
            rule_ok &= one >= half;
            rule_lines.push(format!("a={a}: one-bio {} half-two {}", pts(one), pts(half)));
        }
    }
    if rule_lines.is_empty() {
        gates.push(na("stored_rule_ordering", "needs both stored rules at a shared ratio"));
    } else {
        gates.push(gate("stored_rule_ordering", rule_ok, rule_lines.join("; ")));
    }

    let kl_mean = |label: &str| -> Result<Option<f64>> {
        let p = art.path(&format!("probe/plateau_kl_{label}.csv"));
        if !p.exists() {
            return Ok(None);
        }
        let v = Table::read(&p)?.floats("mean_KL")?;
        Ok((!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
    };
    match (kl_mean("plateau")?, kl_mean("final")?) {
        (Some(p), Some(f)) => gates.push(gate("plateau_kl", p < f, format!("plateau {p:.5} vs final {f:.5}"))),
        _ => gates.push(na("plateau_kl", "no plateau checkpoint")),
    }

    let mut text = String::new();
    let _ = writeln!(text, "run {} (seed {})", cfg.name, cfg.seed);
    let last_pre = pre.rows.len().saturating_sub(1);
    if let (Ok(h), Ok(t)) = (pre.floats("train_hFTA"), pre.floats("test_hFTA")) {
        if !h.is_empty() {
            let _ = writeln!(text, "pre-training: train hFTA {}, test hFTA {}", pts(h[last_pre]), pts(t[last_pre]));
        }
    }
    let _ = writeln!(text, "\nmethod x alpha grid ({grid_rows} rows): report/grid.csv");
    for c in &curves {
        let _ = writeln!(
            text,
            "  {:<28} gate step {:>7}  original hFTA {:>5}  continual hFTA {:>5}",
            c.record.name,
            c.steps[c.gate_index],
            pts(c.at_gate("original_hFTA")),
            pts(c.at_gate("continual_hFTA"))
        );
    }
    let _ = writeln!(text, "\ngates");
    for g in &gates {
        let status = match &g.status {
            GateStatus::Pass => "PASS".to_string(),
            GateStatus::Fail => "FAIL".to_string(),
            GateStatus::NotApplicable(why) => format!("N/A ({why})"),
        };
        let _ = writeln!(text, "  {:<22} {status}  {}", g.name, g.detail);
    }
    fs::write(art.path("report/summary.txt"), &text)?;
    Ok(ReportSummary { gates, grid_rows })
}

fn same_method_family(a: &ContinualMethod, b: &ContinualMethod) -> bool {
    match (a, b) {
        (ContinualMethod::Ewc { k: x }, ContinualMethod::Ewc { k: y }) => x == y,
        _ => std::mem::discriminant(a) == std::mem::discriminant(b),
    }
}
