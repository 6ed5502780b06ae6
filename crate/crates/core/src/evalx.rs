//! Agent-level detection metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{DetectionRow, WlgAssignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub agent_id: String,
    pub score: f64,
    pub anomalous: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores(pub Vec<Labeled>);

impl LabeledScores {
    /// Joins detections with ground truth; agents absent from `anomalous`
    /// are normal.
    pub fn from_detections(rows: &[DetectionRow], anomalous: &BTreeSet<String>) -> Self {
        LabeledScores(
            rows.iter()
                .map(|r| Labeled {
                    agent_id: r.agent_id.clone(),
                    score: r.score,
                    anomalous: anomalous.contains(&r.agent_id),
                })
                .collect(),
        )
    }

    pub fn positives(&self) -> usize {
        self.0.iter().filter(|l| l.anomalous).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, thresholds descending; a threshold admits
/// every score at or above it, so tied scores enter together.
pub fn pr_curve(ls: &LabeledScores) -> Result<Vec<PrPoint>> {
    let pos = ls.positives();
    if pos == 0 {
        return Err(Error::UndefinedRecall);
    }
    let mut v: Vec<(f64, bool)> = ls.0.iter().map(|l| (l.score, l.anomalous)).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < v.len() {
        let t = v[i].0;
        while i < v.len() && v[i].0 == t {
            if v[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(PrPoint { threshold: t, precision: tp as f64 / (tp + fp) as f64, recall: tp as f64 / pos as f64 });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF1 {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Maximal F1 over the curve; ties go to the lowest threshold.
pub fn best_f1(curve: &[PrPoint]) -> Option<BestF1> {
    let mut best: Option<BestF1> = None;
    for p in curve {
        let f = f1(p.precision, p.recall);
        let better = best.is_none_or(|b| f > b.f1 || (f == b.f1 && p.threshold < b.threshold));
        if better {
            best = Some(BestF1 { f1: f, precision: p.precision, recall: p.recall, threshold: p.threshold });
        }
    }
    best
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall gained there.
pub fn auc_pr(ls: &LabeledScores) -> Result<f64> {
    let curve = pr_curve(ls)?;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in &curve {
        ap += p.precision * (p.recall - prev_recall);
        prev_recall = p.recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFlags {
    pub group_id: String,
    pub flagged: usize,
    pub contains_anomaly: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WlgFlagReport {
    pub groups: Vec<GroupFlags>,
    pub total_flagged: usize,
    pub max_flagged_per_group: usize,
    pub groups_with_anomaly_flagged: usize,
}

/// Flag counts per group, covering every group in `wlg`.
pub fn wlg_flag_report(
    detections: &[DetectionRow],
    wlg: &WlgAssignment,
    anomalous: &BTreeSet<String>,
) -> WlgFlagReport {
    let mut groups: BTreeMap<&str, GroupFlags> = wlg
        .groups()
        .into_iter()
        .map(|g| (g, GroupFlags { group_id: g.to_string(), flagged: 0, contains_anomaly: false }))
        .collect();
    for (agent, g) in &wlg.0 {
        if anomalous.contains(agent) {
            groups.get_mut(g.as_str()).expect("group listed").contains_anomaly = true;
        }
    }
    let mut hits = BTreeSet::new();
    for d in detections.iter().filter(|d| d.flagged) {
        if let Some(g) = wlg.0.get(&d.agent_id) {
            groups.get_mut(g.as_str()).expect("group listed").flagged += 1;
            if anomalous.contains(&d.agent_id) {
                hits.insert(g.as_str());
            }
        }
    }
    let groups: Vec<GroupFlags> = groups.into_values().collect();
    WlgFlagReport {
        total_flagged: groups.iter().map(|g| g.flagged).sum(),
        max_flagged_per_group: groups.iter().map(|g| g.flagged).max().unwrap_or(0),
        groups_with_anomaly_flagged: hits.len(),
        groups,
    }
}

pub fn write_pr_curve_csv<W: Write>(curve: &[PrPoint], w: W) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format { path: "pr_curve".into(), message: e.to_string() };
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["threshold", "precision", "recall"]).map_err(fmt)?;
    for p in curve {
        wr.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()]).map_err(fmt)?;
    }
    wr.flush().map_err(|e| Error::io("pr_curve", e))
}

pub fn write_wlg_report_csv<W: Write>(r: &WlgFlagReport, w: W) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format { path: "wlg_report".into(), message: e.to_string() };
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["group_id", "flagged", "contains_anomaly"]).map_err(fmt)?;
    for g in &r.groups {
        wr.write_record([g.group_id.clone(), g.flagged.to_string(), g.contains_anomaly.to_string()]).map_err(fmt)?;
    }
    wr.flush().map_err(|e| Error::io("wlg_report", e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub best_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub auc_pr: f64,
    pub agents: usize,
    pub positives: usize,
}

pub fn evaluate(ls: &LabeledScores) -> Result<(Metrics, Vec<PrPoint>)> {
    let curve = pr_curve(ls)?;
    let b = best_f1(&curve).expect("curve has a point when positives exist");
    let m = Metrics {
        best_f1: b.f1,
        precision: b.precision,
        recall: b.recall,
        threshold: b.threshold,
        auc_pr: auc_pr(ls)?,
        agents: ls.0.len(),
        positives: ls.positives(),
    };
    Ok((m, curve))
}
