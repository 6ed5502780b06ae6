//! Population-level Reeb graph. A batch bootstrap over an initial cohort is
//! extended one pseudo-track at a time by scanning the newcomer against the
//! time-active nodes, keeping a connected flag per node, and rewriting the
//! touched part of the graph.
//!
//! Pseudo-tracks are the centroid paths of agent-graph nodes whose longest
//! stop passes the stop gate (or raw daily tracks when requested).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{bundle_timeline_spans, EpsilonConfig};
use crate::geo::{GeoPoint, Metric, Resampled, TimedPoint, EARTH_RADIUS_M, METERS_PER_DEGREE};
use crate::reeb::{
    distinct_agents, path_position_at, rep_times, GraphKind, NodeFeatures, NodeId, ReebEdge, ReebGraph, ReebNode,
    SourceNode, TrackInfo,
};
use crate::track::{Grid, SpanTrack, TrackId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MargConfig {
    /// Agents processed in the batch bootstrap; clamped to the population.
    pub initial_cohort: usize,
    pub epsilon: EpsilonConfig,
    pub min_support: u32,
    /// Agent nodes whose longest stop reaches this many seconds are passed
    /// to the population graph.
    pub stop_gate_s: f64,
    /// Use whole daily tracks instead of gated agent nodes.
    pub from_raw_days: bool,
}

impl Default for MargConfig {
    fn default() -> Self {
        MargConfig {
            initial_cohort: 1000,
            epsilon: EpsilonConfig::default(),
            min_support: 2,
            stop_gate_s: 3600.0,
            from_raw_days: false,
        }
    }
}

impl MargConfig {
    pub fn validate(&self) -> Result<()> {
        self.epsilon.validate()?;
        if self.initial_cohort < 1 || self.min_support < 1 || !(self.stop_gate_s >= 0.0) {
            return Err(Error::param("initial_cohort ≥ 1, min_support ≥ 1 and stop_gate_s ≥ 0 required"));
        }
        Ok(())
    }
}

/// A track offered to the population graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTrack {
    pub info: TrackInfo,
    pub span: SpanTrack,
}

/// Gated nodes of one annotated agent graph as pseudo-tracks sampled on the
/// graph's grid.
pub fn gated_pseudo_tracks(terg: &ReebGraph, stop_gate_s: f64) -> Result<Vec<PseudoTrack>> {
    let agent =
        terg.single_agent().ok_or_else(|| Error::param("agent graph must belong to exactly one agent"))?.to_string();
    let grid = terg.grid;
    let mut out = Vec::new();
    for n in &terg.nodes {
        let f = n.features.as_ref().ok_or(Error::FeaturesRequired)?;
        if f.max_stop_duration_s < stop_gate_s {
            continue;
        }
        let a = grid.index_of(n.start).ok_or(Error::GridMismatch)?;
        let b = grid.index_of(n.end).ok_or(Error::GridMismatch)?;
        let slots = (a..=b).map(|k| path_position_at(&n.centroid_path, grid.time(k))).collect();
        out.push(PseudoTrack {
            info: TrackInfo {
                agent_id: agent.clone(),
                day_index: 0,
                day_start: 0,
                source: Some(SourceNode { node: n.id, features: Some(f.clone()) }),
            },
            span: SpanTrack { start: a, slots },
        });
    }
    Ok(out)
}

/// Whole daily tracks as pseudo-tracks.
pub fn raw_pseudo_tracks(days: &[Resampled]) -> Vec<PseudoTrack> {
    days.iter()
        .filter_map(|d| {
            SpanTrack::from_grid_track(&d.track).map(|span| PseudoTrack {
                info: TrackInfo {
                    agent_id: d.agent_id.clone(),
                    day_index: d.day_index,
                    day_start: d.day_start,
                    source: None,
                },
                span,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct BBox {
    lat_lo: f64,
    lat_hi: f64,
    lon_lo: f64,
    lon_hi: f64,
}

impl BBox {
    fn of(points: impl IntoIterator<Item = GeoPoint>) -> Option<BBox> {
        let mut it = points.into_iter();
        let p = it.next()?;
        let mut b = BBox { lat_lo: p.lat(), lat_hi: p.lat(), lon_lo: p.lon(), lon_hi: p.lon() };
        for p in it {
            b.lat_lo = b.lat_lo.min(p.lat());
            b.lat_hi = b.lat_hi.max(p.lat());
            b.lon_lo = b.lon_lo.min(p.lon());
            b.lon_hi = b.lon_hi.max(p.lon());
        }
        Some(b)
    }

    /// False only when every pair of points from the two boxes is at least
    /// ε apart.
    fn may_connect(&self, o: &BBox, cfg: &EpsilonConfig) -> bool {
        let limit = cfg.epsilon * (1.0 + 1e-9);
        let dlat = (o.lat_lo - self.lat_hi).max(self.lat_lo - o.lat_hi).max(0.0);
        let direct = (o.lon_lo - self.lon_hi).max(self.lon_lo - o.lon_hi).max(0.0);
        match cfg.metric {
            Metric::EuclideanDeg => dlat.hypot(direct) <= limit,
            Metric::Haversine => {
                if dlat * METERS_PER_DEGREE > limit {
                    return false;
                }
                let dlon = if direct > 0.0 {
                    let span = self.lon_hi.max(o.lon_hi) - self.lon_lo.min(o.lon_lo);
                    direct.min((360.0 - span).max(0.0))
                } else {
                    0.0
                };
                let max_abs_lat =
                    [self.lat_lo, self.lat_hi, o.lat_lo, o.lat_hi].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let h = max_abs_lat.to_radians().cos() * (dlon.to_radians() / 2.0).sin();
                2.0 * EARTH_RADIUS_M * h.clamp(0.0, 1.0).asin() <= limit
            }
        }
    }
}

/// Node of the mutable graph. Slots are grid indices, inclusive.
#[derive(Clone, Debug)]
struct MNode {
    members: Vec<TrackId>,
    start: usize,
    end: usize,
    // per-slot mean member position, shared with sibling pieces after a split
    centroid: Arc<Vec<GeoPoint>>,
    off: usize,
    bbox: BBox,
}

impl MNode {
    #[inline]
    fn at(&self, k: usize) -> GeoPoint {
        self.centroid[self.off + k - self.start]
    }

    fn fresh(members: Vec<TrackId>, start: usize, centroid: Vec<GeoPoint>) -> MNode {
        let bbox = BBox::of(centroid.iter().copied()).expect("nonempty node");
        MNode { members, start, end: start + centroid.len() - 1, centroid: Arc::new(centroid), off: 0, bbox }
    }

    /// Sub-range `[a, b]` sharing storage; keeps the parent box as a bound.
    fn piece(&self, a: usize, b: usize) -> MNode {
        MNode {
            members: self.members.clone(),
            start: a,
            end: b,
            centroid: Arc::clone(&self.centroid),
            off: self.off + a - self.start,
            bbox: self.bbox,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagChange {
    Connect,
    Disconnect,
}

/// A flip of the newcomer's connected flag for one graph node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementEvent {
    pub time: i64,
    /// Builder-internal node id at scan time.
    pub element: u32,
    pub kind: FlagChange,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub events: Vec<ElementEvent>,
    pub nodes_added: usize,
    pub nodes_removed: usize,
}

const BUCKET: usize = 256;

/// Mutable population graph with a single writer. Snapshots are immutable
/// [`ReebGraph`]s.
#[derive(Clone, Debug)]
pub struct MargBuilder {
    epsilon: EpsilonConfig,
    grid: Grid,
    rep_stride_s: i64,
    min_support: u32,
    tracks: Vec<TrackInfo>,
    nodes: BTreeMap<u32, MNode>,
    next_id: u32,
    // node ids overlapping each block of BUCKET slots
    buckets: Vec<BTreeSet<u32>>,
    // per track: node ids in time order
    chains: Vec<Vec<u32>>,
    edges: BTreeMap<(u32, u32), BTreeSet<TrackId>>,
}

/// A maximal run of newcomer slots with one connected-node set.
struct Run {
    a: usize,
    b: usize,
    set: Vec<u32>,
}

impl MargBuilder {
    pub fn new(grid: Grid, epsilon: EpsilonConfig, rep_stride_s: i64, min_support: u32) -> Result<Self> {
        epsilon.validate()?;
        Ok(MargBuilder {
            epsilon,
            grid,
            rep_stride_s,
            min_support,
            tracks: Vec::new(),
            nodes: BTreeMap::new(),
            next_id: 0,
            buckets: vec![BTreeSet::new(); grid.len.div_ceil(BUCKET).max(1)],
            chains: Vec::new(),
            edges: BTreeMap::new(),
        })
    }

    /// Batch construction: one node per bundle of the pooled tracks.
    pub fn from_batch(
        grid: Grid,
        epsilon: EpsilonConfig,
        rep_stride_s: i64,
        min_support: u32,
        tracks: Vec<PseudoTrack>,
    ) -> Result<Self> {
        let mut b = MargBuilder::new(grid, epsilon, rep_stride_s, min_support)?;
        let spans: Vec<SpanTrack> = tracks.iter().map(|t| t.span.clone()).collect();
        let timeline = bundle_timeline_spans(grid, &spans, &epsilon)?;
        b.tracks = tracks.into_iter().map(|t| t.info).collect();
        b.chains = vec![Vec::new(); b.tracks.len()];
        for bundle in &timeline.bundles {
            let a = grid.index_of(bundle.start).expect("bundle on grid");
            let z = grid.index_of(bundle.end).expect("bundle on grid");
            let centroid = (a..=z)
                .map(|k| {
                    let pts: Vec<GeoPoint> =
                        bundle.members.iter().map(|m| spans[m.0 as usize].at(k).expect("member present")).collect();
                    GeoPoint::mean(&pts).expect("nonempty bundle")
                })
                .collect();
            b.insert_node(MNode::fresh(bundle.members.clone(), a, centroid));
        }
        b.rebuild_chains_and_edges();
        Ok(b)
    }

    /// Mutable copy of an existing graph.
    pub fn from_graph(g: &ReebGraph) -> Result<Self> {
        let mut b = MargBuilder::new(g.grid, g.epsilon, g.rep_stride_s, g.min_support)?;
        b.tracks = g.tracks.clone();
        b.chains = vec![Vec::new(); b.tracks.len()];
        for n in &g.nodes {
            let a = g.grid.index_of(n.start).ok_or(Error::GridMismatch)?;
            let z = g.grid.index_of(n.end).ok_or(Error::GridMismatch)?;
            let centroid = (a..=z)
                .map(|k| path_position_at(&n.centroid_path, g.grid.time(k)).ok_or(Error::GridMismatch))
                .collect::<Result<Vec<_>>>()?;
            b.insert_node(MNode::fresh(n.members.clone(), a, centroid));
        }
        b.rebuild_chains_and_edges();
        Ok(b)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn track_count(&self) -> usize {
        self.tracks.len()
    }

    fn insert_node(&mut self, n: MNode) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        for bk in n.start / BUCKET..=n.end / BUCKET {
            self.buckets[bk].insert(id);
        }
        self.nodes.insert(id, n);
        id
    }

    fn remove_node(&mut self, id: u32) -> MNode {
        let n = self.nodes.remove(&id).expect("known node");
        for bk in n.start / BUCKET..=n.end / BUCKET {
            self.buckets[bk].remove(&id);
        }
        n
    }

    fn rebuild_chains_and_edges(&mut self) {
        for c in &mut self.chains {
            c.clear();
        }
        let mut order: Vec<(usize, u32)> = self.nodes.iter().map(|(id, n)| (n.start, *id)).collect();
        order.sort_unstable();
        for (_, id) in order {
            for m in &self.nodes[&id].members {
                self.chains[m.0 as usize].push(id);
            }
        }
        self.edges.clear();
        for t in 0..self.chains.len() {
            self.add_chain_edges(TrackId(t as u32));
        }
    }

    fn chain_pairs(&self, t: TrackId) -> Vec<(u32, u32)> {
        self.chains[t.0 as usize]
            .windows(2)
            .filter(|w| self.nodes[&w[0]].end + 1 == self.nodes[&w[1]].start)
            .map(|w| (w[0], w[1]))
            .collect()
    }

    fn add_chain_edges(&mut self, t: TrackId) {
        for key in self.chain_pairs(t) {
            self.edges.entry(key).or_default().insert(t);
        }
    }

    fn remove_chain_edges(&mut self, t: TrackId) {
        for key in self.chain_pairs(t) {
            if let Some(set) = self.edges.get_mut(&key) {
                set.remove(&t);
                if set.is_empty() {
                    self.edges.remove(&key);
                }
            }
        }
    }

    /// Nodes overlapping slots `[a, b]` whose box may come within ε of
    /// `bbox`, sorted by start slot.
    fn candidates(&self, a: usize, b: usize, bbox: &BBox) -> Vec<u32> {
        let mut ids = BTreeSet::new();
        for bk in a / BUCKET..=b / BUCKET {
            ids.extend(self.buckets[bk].iter().copied());
        }
        let mut out: Vec<u32> = ids
            .into_iter()
            .filter(|id| {
                let n = &self.nodes[id];
                n.start <= b && n.end >= a && n.bbox.may_connect(bbox, &self.epsilon)
            })
            .collect();
        out.sort_by_key(|id| (self.nodes[id].start, *id));
        out
    }

    /// Adds one pseudo-track. Every node keeps its own connected flag for
    /// the newcomer; the slots where the connected set is constant become
    /// nodes of their own, splitting the nodes they cut.
    pub fn update(&mut self, t: PseudoTrack) -> Result<UpdateReport> {
        let span = &t.span;
        if span.end() > self.grid.len {
            return Err(Error::GridMismatch);
        }
        let Some(tbox) = BBox::of(span.slots.iter().flatten().copied()) else {
            return Err(Error::EmptyInput);
        };
        let (lo, hi) = (span.start, span.end() - 1);
        let cands = self.candidates(lo, hi, &tbox);

        // scan
        let mut report = UpdateReport::default();
        let mut runs: Vec<Run> = Vec::new();
        let mut flags: Vec<u32> = Vec::new();
        let mut now: Vec<u32> = Vec::new();
        let mut active: Vec<u32> = Vec::new();
        let mut next = 0;
        for k in lo..=hi {
            while next < cands.len() && self.nodes[&cands[next]].start <= k {
                active.push(cands[next]);
                next += 1;
            }
            active.retain(|id| self.nodes[id].end >= k);
            now.clear();
            let present = span.at(k);
            if let Some(p) = present {
                for id in &active {
                    if self.epsilon.connected(&p, &self.nodes[id].at(k)) {
                        now.push(*id);
                    }
                }
                now.sort_unstable();
            }
            let time = self.grid.time(k);
            for id in &now {
                if flags.binary_search(id).is_err() {
                    report.events.push(ElementEvent { time, element: *id, kind: FlagChange::Connect });
                }
            }
            for id in &flags {
                if now.binary_search(id).is_err() {
                    report.events.push(ElementEvent { time, element: *id, kind: FlagChange::Disconnect });
                }
            }
            std::mem::swap(&mut flags, &mut now);
            if present.is_some() {
                match runs.last_mut() {
                    Some(r) if r.b + 1 == k && r.set == flags => r.b = k,
                    _ => runs.push(Run { a: k, b: k, set: flags.clone() }),
                }
            }
        }
        let end_time = self.grid.time(hi) + self.grid.stride;
        for id in &flags {
            report.events.push(ElementEvent { time: end_time, element: *id, kind: FlagChange::Disconnect });
        }

        self.rewrite(t, runs, &mut report);
        Ok(report)
    }

    fn rewrite(&mut self, t: PseudoTrack, runs: Vec<Run>, report: &mut UpdateReport) {
        let tid = TrackId(self.tracks.len() as u32);
        let span = t.span;
        self.tracks.push(t.info);
        self.chains.push(Vec::new());

        // member set per run, then coalesce contiguous runs with equal sets
        struct Group {
            a: usize,
            b: usize,
            members: Vec<TrackId>,
            parts: Vec<Run>,
        }
        let mut groups: Vec<Group> = Vec::new();
        for r in runs {
            let mut members: Vec<TrackId> =
                r.set.iter().flat_map(|id| self.nodes[id].members.iter().copied()).collect();
            members.push(tid);
            members.sort_unstable();
            match groups.last_mut() {
                Some(g) if g.b + 1 == r.a && g.members == members => {
                    g.b = r.b;
                    g.parts.push(r);
                }
                _ => groups.push(Group { a: r.a, b: r.b, members, parts: vec![r] }),
            }
        }

        let affected: BTreeSet<u32> =
            groups.iter().flat_map(|g| g.parts.iter().flat_map(|r| r.set.iter().copied())).collect();
        let mut touched_tracks: BTreeSet<TrackId> = BTreeSet::new();
        for id in &affected {
            touched_tracks.extend(self.nodes[id].members.iter().copied());
        }
        for m in &touched_tracks {
            self.remove_chain_edges(*m);
        }

        // group nodes; a node covered exactly by one single-node group keeps its id
        let mut group_ids: Vec<u32> = Vec::with_capacity(groups.len());
        let mut reused: BTreeSet<u32> = BTreeSet::new();
        for g in &groups {
            let single = (g.parts.len() == 1 && g.parts[0].set.len() == 1).then(|| g.parts[0].set[0]);
            let centroid: Vec<GeoPoint> = g
                .parts
                .iter()
                .flat_map(|r| (r.a..=r.b).map(move |k| (k, r)))
                .map(|(k, r)| {
                    let p = span.at(k).expect("run slots present");
                    if r.set.is_empty() {
                        return p;
                    }
                    let (c, w) = self.weighted_centroid(&r.set, k);
                    // c + (p - c) / (w + 1) leaves c unchanged when p == c
                    let f = 1.0 / (w + 1.0);
                    GeoPoint::clamped(c.lat() + (p.lat() - c.lat()) * f, c.lon() + (p.lon() - c.lon()) * f)
                })
                .collect();
            match single {
                Some(x) if self.nodes[&x].start == g.a && self.nodes[&x].end == g.b => {
                    *self.nodes.get_mut(&x).expect("known node") = MNode::fresh(g.members.clone(), g.a, centroid);
                    reused.insert(x);
                    group_ids.push(x);
                }
                _ => {
                    group_ids.push(self.insert_node(MNode::fresh(g.members.clone(), g.a, centroid)));
                    report.nodes_added += 1;
                }
            }
        }

        // replace every other affected node by its pieces
        for &x in &affected {
            if reused.contains(&x) {
                continue;
            }
            let old = self.remove_node(x);
            report.nodes_removed += 1;
            let mut seq: Vec<u32> = Vec::new();
            let mut cursor = old.start;
            for (g, &gid) in groups.iter().zip(&group_ids) {
                for r in &g.parts {
                    if !r.set.contains(&x) {
                        continue;
                    }
                    if r.a > cursor {
                        seq.push(self.insert_node(old.piece(cursor, r.a - 1)));
                        report.nodes_added += 1;
                    }
                    if seq.last() != Some(&gid) {
                        seq.push(gid);
                    }
                    cursor = r.b + 1;
                }
            }
            if cursor <= old.end {
                seq.push(self.insert_node(old.piece(cursor, old.end)));
                report.nodes_added += 1;
            }
            for m in &old.members {
                let chain = &mut self.chains[m.0 as usize];
                let i = chain.iter().position(|id| *id == x).expect("member chain lists node");
                chain.splice(i..=i, seq.iter().copied());
            }
        }

        self.chains[tid.0 as usize] = group_ids;
        touched_tracks.insert(tid);
        for m in &touched_tracks {
            self.add_chain_edges(*m);
        }
    }

    /// Member-weighted mean of several node centroids at slot `k`, and the
    /// total weight. A single node's centroid is returned unchanged.
    fn weighted_centroid(&self, set: &[u32], k: usize) -> (GeoPoint, f64) {
        if let [only] = set {
            let n = &self.nodes[only];
            return (n.at(k), n.members.len() as f64);
        }
        let (mut lat, mut lon, mut w) = (0.0, 0.0, 0.0);
        for id in set {
            let n = &self.nodes[id];
            let c = n.at(k);
            let nw = n.members.len() as f64;
            lat += nw * c.lat();
            lon += nw * c.lon();
            w += nw;
        }
        (GeoPoint::clamped(lat / w, lon / w), w)
    }

    /// Immutable graph with nodes numbered by `(start, members)`.
    pub fn snapshot(&self) -> ReebGraph {
        let mut order: Vec<u32> = self.nodes.keys().copied().collect();
        order.sort_by(|a, b| {
            let (x, y) = (&self.nodes[a], &self.nodes[b]);
            (x.start, &x.members).cmp(&(y.start, &y.members))
        });
        let new_id: BTreeMap<u32, NodeId> = order.iter().enumerate().map(|(i, id)| (*id, NodeId(i as u32))).collect();
        let grid = self.grid;
        let nodes: Vec<ReebNode> = order
            .iter()
            .map(|id| {
                let n = &self.nodes[id];
                let (start, end) = (grid.time(n.start), grid.time(n.end));
                let centroid_path = rep_times(&grid, self.rep_stride_s, start, end)
                    .into_iter()
                    .map(|t| TimedPoint::new(t, n.at(grid.index_of(t).expect("on grid"))))
                    .collect();
                let mut node = ReebNode {
                    id: new_id[id],
                    members: n.members.clone(),
                    start,
                    end,
                    centroid_path,
                    support: distinct_agents(&self.tracks, &n.members),
                    features: None,
                };
                node.features = features_from_sources(&node, n, &self.tracks);
                node
            })
            .collect();
        let mut edges: Vec<ReebEdge> = self
            .edges
            .iter()
            .map(|((f, t), carried)| ReebEdge {
                from: new_id[f],
                to: new_id[t],
                carried: carried.iter().copied().collect(),
            })
            .collect();
        edges.sort_by_key(|e| (e.from, e.to));
        ReebGraph {
            kind: GraphKind::PopulationMarg,
            epsilon: self.epsilon,
            grid,
            rep_stride_s: self.rep_stride_s,
            min_support: self.min_support,
            tracks: self.tracks.clone(),
            nodes,
            edges,
        }
    }
}

/// Population node features from the agent nodes its members were cut
/// from; `None` when any member lacks them.
fn features_from_sources(node: &ReebNode, n: &MNode, tracks: &[TrackInfo]) -> Option<NodeFeatures> {
    let interval = node.interval_len_s() as f64;
    let mut f = NodeFeatures {
        max_stop_duration_s: 0.0,
        max_velocity_mps: 0.0,
        modes: BTreeSet::new(),
        mean_bearing_deg: None,
        anchor: n.at(n.start),
        dwell_total_s: 0.0,
    };
    let (mut bs, mut bc, mut nb) = (0.0f64, 0.0f64, 0usize);
    for m in &node.members {
        let src = tracks[m.0 as usize].source.as_ref()?.features.as_ref()?;
        f.max_stop_duration_s = f.max_stop_duration_s.max(src.max_stop_duration_s.min(interval));
        f.dwell_total_s += src.dwell_total_s.min(interval);
        f.max_velocity_mps = f.max_velocity_mps.max(src.max_velocity_mps);
        f.modes.extend(src.modes.iter().copied());
        if let Some(b) = src.mean_bearing_deg {
            bs += b.to_radians().sin();
            bc += b.to_radians().cos();
            nb += 1;
        }
    }
    if nb > 0 && bs.hypot(bc) > 1e-9 {
        f.mean_bearing_deg = Some(bs.atan2(bc).to_degrees().rem_euclid(360.0));
    }
    let slots: Vec<GeoPoint> = (n.start..=n.end).map(|k| n.at(k)).collect();
    f.anchor = GeoPoint::mean(&slots).expect("nonempty node");
    Some(f)
}

/// Batch graph over the gated nodes of the given agent graphs.
pub fn build_initial_marg(agents: &[ReebGraph], cfg: &MargConfig) -> Result<ReebGraph> {
    cfg.validate()?;
    let (grid, rep) = common_grid(agents)?;
    let mut tracks = Vec::new();
    for g in agents {
        tracks.extend(gated_pseudo_tracks(g, cfg.stop_gate_s)?);
    }
    if tracks.is_empty() {
        return Err(Error::EmptyPopulationModel);
    }
    Ok(MargBuilder::from_batch(grid, cfg.epsilon, rep, cfg.min_support, tracks)?.snapshot())
}

fn common_grid(agents: &[ReebGraph]) -> Result<(Grid, i64)> {
    let first = agents.first().ok_or(Error::EmptyPopulationModel)?;
    if agents.iter().any(|g| g.grid != first.grid) {
        return Err(Error::GridMismatch);
    }
    Ok((first.grid, first.rep_stride_s))
}

/// Adds one pseudo-track to a copy of `g`.
pub fn update_reeb(g: &ReebGraph, t: PseudoTrack) -> Result<(ReebGraph, UpdateReport)> {
    let mut b = MargBuilder::from_graph(g)?;
    let report = b.update(t)?;
    Ok((b.snapshot(), report))
}

/// Pseudo-tracks grouped by agent, in the order they are fed to the builder.
pub type AgentTracks = Vec<(String, Vec<PseudoTrack>)>;

/// Bootstraps from the first `initial_cohort` agents (ascending id), then
/// adds the remaining agents' tracks one at a time in ascending agent order.
pub fn build_marg_from_tracks(
    grid: Grid,
    rep_stride_s: i64,
    mut agents: AgentTracks,
    cfg: &MargConfig,
) -> Result<ReebGraph> {
    cfg.validate()?;
    agents.sort_by(|a, b| a.0.cmp(&b.0));
    if agents.iter().all(|(_, t)| t.is_empty()) {
        return Err(Error::EmptyPopulationModel);
    }
    let m = cfg.initial_cohort.min(agents.len());
    let rest = agents.split_off(m);
    let initial: Vec<PseudoTrack> = agents.into_iter().flat_map(|(_, t)| t).collect();
    let mut b = MargBuilder::from_batch(grid, cfg.epsilon, rep_stride_s, cfg.min_support, initial)?;
    let added: usize = rest.iter().map(|(_, t)| t.len()).sum();
    for (_, tracks) in rest {
        for t in tracks {
            b.update(t)?;
        }
    }
    log::debug!("population graph: {} nodes after {added} incremental additions", b.node_count());
    Ok(b.snapshot())
}

/// Population graph over annotated agent graphs using their gated nodes.
pub fn build_marg(agents: &[ReebGraph], cfg: &MargConfig) -> Result<ReebGraph> {
    let (grid, rep) = common_grid(agents)?;
    let grouped = agents
        .iter()
        .map(|g| {
            let id = g.single_agent().unwrap_or_default().to_string();
            Ok((id, gated_pseudo_tracks(g, cfg.stop_gate_s)?))
        })
        .collect::<Result<AgentTracks>>()?;
    build_marg_from_tracks(grid, rep, grouped, cfg)
}

/// Position of a node's representative path at grid time `t`.
pub fn node_position_at(n: &ReebNode, t: i64) -> Option<GeoPoint> {
    path_position_at(&n.centroid_path, t)
}

/// Position along an edge, interpolated between the end of its source node
/// and the start of its target node; absent outside that span.
pub fn edge_position_at(g: &ReebGraph, e: &ReebEdge, t: i64) -> Option<GeoPoint> {
    let (f, to) = (g.node(e.from)?, g.node(e.to)?);
    let (a, b) = (f.centroid_path.last()?, to.centroid_path.first()?);
    path_position_at(&[*a, *b], t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MargStats {
    pub nodes: usize,
    pub edges: usize,
    pub tracks: usize,
    pub low_support_nodes: usize,
    pub support_histogram: BTreeMap<u32, usize>,
    pub out_degree_histogram: BTreeMap<usize, usize>,
    pub in_degree_histogram: BTreeMap<usize, usize>,
}

pub fn marg_stats(g: &ReebGraph) -> MargStats {
    let mut support_histogram = BTreeMap::new();
    let mut out_deg: BTreeMap<NodeId, usize> = g.nodes.iter().map(|n| (n.id, 0)).collect();
    let mut in_deg = out_deg.clone();
    for n in &g.nodes {
        *support_histogram.entry(n.support).or_insert(0) += 1;
    }
    for e in &g.edges {
        *out_deg.get_mut(&e.from).expect("edge endpoint") += 1;
        *in_deg.get_mut(&e.to).expect("edge endpoint") += 1;
    }
    let hist = |m: &BTreeMap<NodeId, usize>| {
        let mut h = BTreeMap::new();
        for d in m.values() {
            *h.entry(*d).or_insert(0) += 1;
        }
        h
    };
    MargStats {
        nodes: g.nodes.len(),
        edges: g.edges.len(),
        tracks: g.tracks.len(),
        low_support_nodes: g.nodes.iter().filter(|n| n.support < g.min_support).count(),
        support_histogram,
        out_degree_histogram: hist(&out_deg),
        in_degree_histogram: hist(&in_deg),
    }
}

/// CSV with header `metric,key,count`.
pub fn write_stats_csv<W: Write>(s: &MargStats, out: W) -> Result<()> {
    let mut rows: Vec<(&str, String, usize)> = vec![
        ("nodes", String::new(), s.nodes),
        ("edges", String::new(), s.edges),
        ("tracks", String::new(), s.tracks),
        ("low_support_nodes", String::new(), s.low_support_nodes),
    ];
    rows.extend(s.support_histogram.iter().map(|(k, v)| ("support", k.to_string(), *v)));
    rows.extend(s.out_degree_histogram.iter().map(|(k, v)| ("out_degree", k.to_string(), *v)));
    rows.extend(s.in_degree_histogram.iter().map(|(k, v)| ("in_degree", k.to_string(), *v)));
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| Error::CorruptPayload(e.to_string());
    w.write_record(["metric", "key", "count"]).map_err(fmt)?;
    for (m, k, c) in rows {
        w.write_record([m, k.as_str(), c.to_string().as_str()]).map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::CorruptPayload(e.to_string()))?;
    Ok(())
}
