//! Node anomaly scores against an agent's own training graph and the
//! population graph, their weighted fusion, agent-level aggregation and
//! weak-label-group filtering.
//!
//! All scores are anomaly scores in [0, 1]; 0 means fully consistent with
//! the reference.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reeb::{NodeFeatures, NodeId, ReebGraph, ReebNode};
use crate::spatial::NearestIndex;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct FeatureWeights {
    pub w_dist: f64,
    pub w_stop: f64,
    pub w_vel: f64,
    pub w_mode: f64,
    pub dist_scale_m: f64,
    pub stop_scale_s: f64,
    pub vel_scale_mps: f64,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        FeatureWeights {
            w_dist: 0.6,
            w_stop: 0.2,
            w_vel: 0.1,
            w_mode: 0.1,
            dist_scale_m: 500.0,
            stop_scale_s: 3600.0,
            vel_scale_mps: 15.0,
        }
    }
}

impl FeatureWeights {
    pub fn with_weights(w_dist: f64, w_stop: f64, w_vel: f64, w_mode: f64) -> Result<Self> {
        let w = FeatureWeights { w_dist, w_stop, w_vel, w_mode, ..FeatureWeights::default() };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_dist, self.w_stop, self.w_vel, self.w_mode];
        if ws.iter().any(|w| !(*w >= 0.0)) || (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::param("feature weights must be nonnegative and sum to 1"));
        }
        if !(self.dist_scale_m > 0.0 && self.stop_scale_s > 0.0 && self.vel_scale_mps > 0.0) {
            return Err(Error::param("normalization scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct FusionParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { alpha: 0.5, beta: 0.5 }
    }
}

impl FusionParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let f = FusionParams { alpha, beta };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::param("alpha, beta must be nonnegative and sum to 1"));
        }
        Ok(())
    }

    #[inline]
    pub fn fuse(&self, s_agent: f64, s_pop: f64) -> f64 {
        self.alpha * s_agent + self.beta * s_pop
    }
}

/// Raw per-feature differences to a reference node. Normalization happens
/// at scoring time so one match can be rescored under any weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub distance_m: f64,
    pub stop_diff_s: f64,
    pub vel_diff_mps: f64,
    /// Mode sets share nothing and are not both empty.
    pub modes_disjoint: bool,
}

impl Components {
    pub fn between(test: &NodeFeatures, reference: &NodeFeatures, distance_m: f64) -> Self {
        Components {
            distance_m,
            stop_diff_s: (test.max_stop_duration_s - reference.max_stop_duration_s).abs(),
            vel_diff_mps: (test.max_velocity_mps - reference.max_velocity_mps).abs(),
            modes_disjoint: !(test.modes.is_empty() && reference.modes.is_empty())
                && test.modes.is_disjoint(&reference.modes),
        }
    }

    #[inline]
    pub fn score(&self, w: &FeatureWeights) -> f64 {
        let dist = (self.distance_m / w.dist_scale_m).min(1.0);
        let stop = (self.stop_diff_s / w.stop_scale_s).min(1.0);
        let vel = (self.vel_diff_mps / w.vel_scale_mps).min(1.0);
        let mode = if self.modes_disjoint { 1.0 } else { 0.0 };
        (w.w_dist * dist + w.w_stop * stop + w.w_vel * vel + w.w_mode * mode).clamp(0.0, 1.0)
    }
}

/// Outcome of comparing one node with a reference graph: every reference
/// node at the minimal anchor distance, ascending by id. No candidates means
/// the reference had no eligible node (maximal novelty, score 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub candidates: Vec<(NodeId, Components)>,
}

impl Match {
    /// Most similar candidate under `w`; equal scores go to the smallest id.
    pub fn best(&self, w: &FeatureWeights) -> Option<(NodeId, f64)> {
        let mut best: Option<(NodeId, f64)> = None;
        for (id, c) in &self.candidates {
            let s = c.score(w);
            if best.is_none_or(|(_, bs)| s < bs) {
                best = Some((*id, s));
            }
        }
        best
    }

    pub fn score(&self, w: &FeatureWeights) -> f64 {
        self.best(w).map_or(1.0, |b| b.1)
    }

    pub fn nearest(&self, w: &FeatureWeights) -> Option<NodeId> {
        self.best(w).map(|b| b.0)
    }
}

/// Nearest-anchor lookup over the eligible nodes of a reference graph.
pub struct ReferenceIndex<'g> {
    nodes: Vec<&'g ReebNode>,
    index: NearestIndex,
}

impl<'g> ReferenceIndex<'g> {
    /// Nodes below the graph's support floor are left out.
    pub fn new(g: &'g ReebGraph) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut anchors = Vec::new();
        for n in &g.nodes {
            let f = n.features.as_ref().ok_or(Error::FeaturesRequired)?;
            if g.is_low_support(n) {
                continue;
            }
            nodes.push(n);
            anchors.push(f.anchor);
        }
        Ok(ReferenceIndex { nodes, index: NearestIndex::new(anchors) })
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// All nodes whose anchor is nearest to the test anchor.
    pub fn candidates(&self, test: &NodeFeatures) -> Match {
        let mut ties = Vec::new();
        let Some(d) = self.index.nearest_ties(&test.anchor, &mut ties) else {
            return Match { candidates: Vec::new() };
        };
        let mut candidates: Vec<(NodeId, Components)> = ties
            .into_iter()
            .map(|i| {
                let n = self.nodes[i];
                let f = n.features.as_ref().expect("indexed nodes have features");
                (n.id, Components::between(test, f, d))
            })
            .collect();
        candidates.sort_by_key(|c| c.0);
        Match { candidates }
    }
}

/// Score of one node against a reference graph plus the matched node.
pub fn node_anomaly(v_test: &ReebNode, reference: &ReebGraph, w: &FeatureWeights) -> Result<(f64, Option<NodeId>)> {
    w.validate()?;
    let f = v_test.features.as_ref().ok_or(Error::FeaturesRequired)?;
    let idx = ReferenceIndex::new(reference)?;
    if idx.is_empty() {
        log::warn!("reference graph has no eligible node; scoring as maximal novelty");
    }
    let m = idx.candidates(f);
    Ok((m.score(w), m.nearest(w)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: NodeId,
    /// Time-of-day seconds.
    pub start: i64,
    pub end: i64,
    pub lat: f64,
    pub lon: f64,
    pub s_agent: f64,
    pub s_pop: f64,
    pub s_combined: f64,
    pub nearest_train: Option<NodeId>,
    pub nearest_marg: Option<NodeId>,
}

/// Per-node matches against both references; weights can be re-applied
/// without searching again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMatches {
    pub node: NodeId,
    pub start: i64,
    pub end: i64,
    pub lat: f64,
    pub lon: f64,
    pub agent: Match,
    pub pop: Match,
}

impl NodeMatches {
    pub fn score(&self, fp: &FusionParams, w: &FeatureWeights) -> NodeScore {
        let s_agent = self.agent.score(w);
        let s_pop = self.pop.score(w);
        NodeScore {
            node: self.node,
            start: self.start,
            end: self.end,
            lat: self.lat,
            lon: self.lon,
            s_agent,
            s_pop,
            s_combined: fp.fuse(s_agent, s_pop),
            nearest_train: self.agent.nearest(w),
            nearest_marg: self.pop.nearest(w),
        }
    }
}

/// Matches of every test node against the agent's training graph and the
/// population graph.
pub fn match_test_graph(test: &ReebGraph, train: &ReebGraph, marg: &ReebGraph) -> Result<Vec<NodeMatches>> {
    let (ta, tr) = (test.single_agent(), train.single_agent());
    if ta.is_none() || ta != tr {
        return Err(Error::AgentMismatch {
            test: ta.unwrap_or("<mixed>").to_string(),
            train: tr.unwrap_or("<mixed>").to_string(),
        });
    }
    let agent_idx = ReferenceIndex::new(train)?;
    let pop_idx = ReferenceIndex::new(marg)?;
    if agent_idx.is_empty() || pop_idx.is_empty() {
        log::warn!("agent {}: empty reference graph, nodes score as maximal novelty", ta.unwrap_or_default());
    }
    test.nodes
        .iter()
        .map(|n| {
            let f = n.features.as_ref().ok_or(Error::FeaturesRequired)?;
            Ok(NodeMatches {
                node: n.id,
                start: n.start,
                end: n.end,
                lat: f.anchor.lat(),
                lon: f.anchor.lon(),
                agent: agent_idx.candidates(f),
                pop: pop_idx.candidates(f),
            })
        })
        .collect()
}

pub fn score_test_graph(
    test: &ReebGraph,
    train: &ReebGraph,
    marg: &ReebGraph,
    fp: &FusionParams,
    w: &FeatureWeights,
) -> Result<Vec<NodeScore>> {
    fp.validate()?;
    w.validate()?;
    Ok(match_test_graph(test, train, marg)?.iter().map(|m| m.score(fp, w)).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    MeanTopK {
        k: usize,
    },
}

pub fn aggregate_agent(scores: &[NodeScore], method: Aggregation) -> Result<f64> {
    let values: Vec<f64> = scores.iter().map(|s| s.s_combined).collect();
    aggregate_values(&values, method)
}

pub fn aggregate_values(values: &[f64], method: Aggregation) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(match method {
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::MeanTopK { k } => {
            let mut v = values.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            let k = k.clamp(1, v.len());
            v[..k].iter().sum::<f64>() / k as f64
        }
    })
}

/// Highest-scoring nodes, best first, ties by node id.
pub fn top_nodes(scores: &[NodeScore], k: usize) -> Vec<NodeScore> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.s_combined.total_cmp(&a.s_combined).then(a.node.cmp(&b.node)));
    v.truncate(k);
    v
}

/// Agent id to weak-label group id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WlgAssignment(pub BTreeMap<String, String>);

impl WlgAssignment {
    /// CSV with header `agent_id,group_id`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut map = BTreeMap::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format { path: "wlg".into(), message: e.to_string() })?;
            if rec.len() != 2 {
                return Err(Error::Record {
                    path: "wlg".into(),
                    row: (i + 2) as u64,
                    message: "expected agent_id,group_id".into(),
                });
            }
            map.insert(rec[0].to_string(), rec[1].to_string());
        }
        Ok(WlgAssignment(map))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let fmt = |e: csv::Error| Error::Format { path: "wlg".into(), message: e.to_string() };
        wr.write_record(["agent_id", "group_id"]).map_err(fmt)?;
        for (a, g) in &self.0 {
            wr.write_record([a, g]).map_err(fmt)?;
        }
        wr.flush().map_err(|e| Error::Format { path: "wlg".into(), message: e.to_string() })
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.0.values().map(String::as_str).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum WlgPolicy {
    TopN { n: usize },
    Threshold { theta: f64 },
    Hybrid { n: usize, theta: f64 },
}

impl Default for WlgPolicy {
    fn default() -> Self {
        WlgPolicy::TopN { n: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub agent_id: String,
    pub score: f64,
    pub top_nodes: Vec<NodeScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDetection {
    pub agent_id: String,
    pub agent_score: f64,
    pub flagged: bool,
    pub top_nodes: Vec<NodeScore>,
}

fn rank_order(a: &AgentScore, b: &AgentScore) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.agent_id.cmp(&b.agent_id))
}

/// Flags agents under `policy`; output sorted by score descending, then
/// agent id.
pub fn apply_wlg_filter(scores: &[AgentScore], wlg: &WlgAssignment, policy: WlgPolicy) -> Result<Vec<AgentDetection>> {
    let missing: Vec<String> =
        scores.iter().filter(|s| !wlg.0.contains_key(&s.agent_id)).map(|s| s.agent_id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingGroup(missing));
    }
    let mut by_group: BTreeMap<&str, Vec<&AgentScore>> = BTreeMap::new();
    for s in scores {
        by_group.entry(wlg.0[&s.agent_id].as_str()).or_default().push(s);
    }
    let mut top: BTreeSet<&str> = BTreeSet::new();
    let n = match policy {
        WlgPolicy::TopN { n } | WlgPolicy::Hybrid { n, .. } => Some(n),
        WlgPolicy::Threshold { .. } => None,
    };
    if let Some(n) = n {
        for members in by_group.values_mut() {
            members.sort_by(|a, b| rank_order(a, b));
            top.extend(members.iter().take(n).map(|s| s.agent_id.as_str()));
        }
    }
    let mut out: Vec<AgentDetection> = scores
        .iter()
        .map(|s| {
            let flagged = match policy {
                WlgPolicy::TopN { .. } => top.contains(s.agent_id.as_str()),
                WlgPolicy::Threshold { theta } => s.score >= theta,
                WlgPolicy::Hybrid { theta, .. } => top.contains(s.agent_id.as_str()) && s.score >= theta,
            };
            AgentDetection {
                agent_id: s.agent_id.clone(),
                agent_score: s.score,
                flagged,
                top_nodes: s.top_nodes.clone(),
            }
        })
        .collect();
    out.sort_by(|a, b| b.agent_score.total_cmp(&a.agent_score).then_with(|| a.agent_id.cmp(&b.agent_id)));
    Ok(out)
}

/// CSV `agent_id,score,flagged,top_node_time,top_node_lat,top_node_lon`.
/// `top_node_time` is the time-of-day start of the highest-scoring node.
pub fn write_detections_csv<W: Write>(dets: &[AgentDetection], w: W) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format { path: "detections".into(), message: e.to_string() };
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["agent_id", "score", "flagged", "top_node_time", "top_node_lat", "top_node_lon"]).map_err(fmt)?;
    for d in dets {
        let (t, lat, lon) = d.top_nodes.first().map_or((String::new(), String::new(), String::new()), |n| {
            (n.start.to_string(), n.lat.to_string(), n.lon.to_string())
        });
        wr.write_record([d.agent_id.clone(), d.agent_score.to_string(), d.flagged.to_string(), t, lat, lon])
            .map_err(fmt)?;
    }
    wr.flush().map_err(|e| Error::Format { path: "detections".into(), message: e.to_string() })
}

/// Minimal row read back from a detections CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRow {
    pub agent_id: String,
    pub score: f64,
    pub flagged: bool,
}

pub fn read_detections_csv<R: Read>(r: R) -> Result<Vec<DetectionRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let bad = |m: &str| Error::Record { path: "detections".into(), row: (i + 2) as u64, message: m.into() };
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        if rec.len() < 3 {
            return Err(bad("expected at least agent_id,score,flagged"));
        }
        out.push(DetectionRow {
            agent_id: rec[0].to_string(),
            score: rec[1].parse().map_err(|_| bad("score is not a number"))?,
            flagged: rec[2].parse().map_err(|_| bad("flagged is not a boolean"))?,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct NodeDetail<'a> {
    agent_id: &'a str,
    #[serde(flatten)]
    score: &'a NodeScore,
}

/// JSON Lines, one object per scored node.
pub fn write_node_scores_jsonl<W: Write>(per_agent: &[(String, Vec<NodeScore>)], mut w: W) -> Result<()> {
    for (agent, scores) in per_agent {
        for s in scores {
            serde_json::to_writer(&mut w, &NodeDetail { agent_id: agent, score: s })
                .map_err(|e| Error::Format { path: "nodes.jsonl".into(), message: e.to_string() })?;
            w.write_all(b"\n").map_err(|e| Error::io("nodes.jsonl", e))?;
        }
    }
    Ok(())
}
