//! Reeb graph structure shared by agent-level (TERG) and population-level
//! (MARG) graphs, assembly from a bundle timeline, and the versioned on-disk
//! format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{EpsilonConfig, Timeline};
use crate::geo::{GeoPoint, TimedPoint};
use crate::track::{Grid, TrackId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    AgentTerg,
    PopulationMarg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Walk,
    Bike,
    Car,
}

/// Kinematic and location descriptors of one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub max_stop_duration_s: f64,
    pub max_velocity_mps: f64,
    pub modes: BTreeSet<Mode>,
    /// `None` when no member moves inside the node.
    pub mean_bearing_deg: Option<f64>,
    /// Time-weighted mean position.
    pub anchor: GeoPoint,
    pub dwell_total_s: f64,
}

/// Provenance of a track inside a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub agent_id: String,
    pub day_index: i64,
    /// Absolute epoch second that grid time 0 maps to for this track.
    pub day_start: i64,
    /// For population graphs built from gated agent nodes: the node this
    /// pseudo-track was cut from.
    pub source: Option<SourceNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceNode {
    pub node: NodeId,
    pub features: Option<NodeFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReebNode {
    pub id: NodeId,
    /// Ascending.
    pub members: Vec<TrackId>,
    /// Grid times, inclusive.
    pub start: i64,
    pub end: i64,
    /// Mean member position sampled every representative stride inside
    /// `[start, end]`, always including both ends.
    pub centroid_path: Vec<TimedPoint>,
    /// Distinct agents among the members.
    pub support: u32,
    pub features: Option<NodeFeatures>,
}

impl ReebNode {
    pub fn interval_len_s(&self) -> i64 {
        self.end - self.start
    }

    pub fn contains_time(&self, t: i64) -> bool {
        self.start <= t && t <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReebEdge {
    pub from: NodeId,
    pub to: NodeId,
    /// Tracks passing directly from `from` into `to`; ascending.
    pub carried: Vec<TrackId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReebGraph {
    pub kind: GraphKind,
    pub epsilon: EpsilonConfig,
    pub grid: Grid,
    pub rep_stride_s: i64,
    /// Nodes with lower support are kept but marked as low-support.
    pub min_support: u32,
    pub tracks: Vec<TrackInfo>,
    /// Sorted by `(start, members)`.
    pub nodes: Vec<ReebNode>,
    /// Sorted by `(from, to)`.
    pub edges: Vec<ReebEdge>,
}

impl ReebGraph {
    pub fn node(&self, id: NodeId) -> Option<&ReebNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn support(&self) -> BTreeMap<NodeId, u32> {
        self.nodes.iter().map(|n| (n.id, n.support)).collect()
    }

    pub fn is_low_support(&self, n: &ReebNode) -> bool {
        n.support < self.min_support
    }

    pub fn is_annotated(&self) -> bool {
        !self.nodes.is_empty() && self.nodes.iter().all(|n| n.features.is_some())
    }

    /// Agent owning every track, when there is exactly one.
    pub fn single_agent(&self) -> Option<&str> {
        let first = self.tracks.first()?.agent_id.as_str();
        self.tracks.iter().all(|t| t.agent_id == first).then_some(first)
    }

    /// Node member sets with intervals and the edge relation expressed
    /// through them; independent of node numbering.
    pub fn canonical_topology(&self) -> CanonicalTopology {
        let key = |n: &ReebNode| (n.start, n.end, n.members.clone());
        let by_id: BTreeMap<NodeId, &ReebNode> = self.nodes.iter().map(|n| (n.id, n)).collect();
        let nodes = self.nodes.iter().map(key).collect();
        let edges = self.edges.iter().map(|e| (key(by_id[&e.from]), key(by_id[&e.to]), e.carried.clone())).collect();
        CanonicalTopology { nodes, edges }
    }
}

pub type NodeKey = (i64, i64, Vec<TrackId>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanonicalTopology {
    pub nodes: BTreeSet<NodeKey>,
    pub edges: BTreeSet<(NodeKey, NodeKey, Vec<TrackId>)>,
}

/// Grid times at which a node's representative path is sampled.
pub(crate) fn rep_times(grid: &Grid, rep_stride_s: i64, start: i64, end: i64) -> Vec<i64> {
    let step = rep_step(grid, rep_stride_s);
    let mut times: Vec<i64> = (start..=end).step_by(step as usize).collect();
    if *times.last().expect("nonempty interval") != end {
        times.push(end);
    }
    times
}

/// Representative stride rounded up to a whole number of grid strides.
pub(crate) fn rep_step(grid: &Grid, rep_stride_s: i64) -> i64 {
    let k = ((rep_stride_s.max(1) + grid.stride - 1) / grid.stride).max(1);
    k * grid.stride
}

pub(crate) fn distinct_agents(tracks: &[TrackInfo], members: &[TrackId]) -> u32 {
    let agents: BTreeSet<&str> = members.iter().map(|m| tracks[m.0 as usize].agent_id.as_str()).collect();
    agents.len() as u32
}

/// Edges implied by member chains: a track moving from one node straight
/// into the next one (no absent slot between) creates or extends an edge.
pub(crate) fn derive_edges(nodes: &[ReebNode], stride: i64) -> Vec<ReebEdge> {
    let mut chains: BTreeMap<TrackId, Vec<usize>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by_key(|&i| nodes[i].start);
    for &i in &order {
        for m in &nodes[i].members {
            chains.entry(*m).or_default().push(i);
        }
    }
    let mut edges: BTreeMap<(NodeId, NodeId), Vec<TrackId>> = BTreeMap::new();
    for (m, chain) in &chains {
        for w in chain.windows(2) {
            let (a, b) = (&nodes[w[0]], &nodes[w[1]]);
            if a.end + stride == b.start {
                edges.entry((a.id, b.id)).or_default().push(*m);
            }
        }
    }
    edges
        .into_iter()
        .map(|((from, to), mut carried)| {
            carried.sort();
            ReebEdge { from, to, carried }
        })
        .collect()
}

/// Turns a bundle timeline into a graph: one node per bundle, centroid paths
/// from the member positions, edges from member chains.
/// `position(track, k)` must return the track position at slot `k` for
/// every bundle member.
pub fn assemble(
    kind: GraphKind,
    grid: Grid,
    infos: Vec<TrackInfo>,
    timeline: &Timeline,
    epsilon: EpsilonConfig,
    rep_stride_s: i64,
    position: impl Fn(TrackId, usize) -> Option<GeoPoint>,
) -> Result<ReebGraph> {
    if infos.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut nodes = Vec::with_capacity(timeline.bundles.len());
    for (i, b) in timeline.bundles.iter().enumerate() {
        let centroid_path = rep_times(&grid, rep_stride_s, b.start, b.end)
            .into_iter()
            .map(|t| {
                let k = grid.index_of(t).ok_or(Error::GridMismatch)?;
                let pts: Vec<GeoPoint> =
                    b.members.iter().map(|m| position(*m, k).expect("bundle member present")).collect();
                Ok(TimedPoint::new(t, GeoPoint::mean(&pts).expect("nonempty bundle")))
            })
            .collect::<Result<Vec<_>>>()?;
        nodes.push(ReebNode {
            id: NodeId(i as u32),
            members: b.members.clone(),
            start: b.start,
            end: b.end,
            centroid_path,
            support: distinct_agents(&infos, &b.members),
            features: None,
        });
    }
    let edges = derive_edges(&nodes, grid.stride);
    Ok(ReebGraph { kind, epsilon, grid, rep_stride_s, min_support: 1, tracks: infos, nodes, edges })
}

/// Position on a node's representative path at grid time `t`; `None`
/// outside the node interval.
pub fn path_position_at(path: &[TimedPoint], t: i64) -> Option<GeoPoint> {
    let first = path.first()?;
    let last = path.last()?;
    if t < first.t || t > last.t {
        return None;
    }
    let i = path.partition_point(|p| p.t <= t);
    let a = &path[i - 1];
    if a.t == t || i == path.len() {
        return Some(a.pos);
    }
    let b = &path[i];
    Some(a.pos.lerp(&b.pos, (t - a.t) as f64 / (b.t - a.t) as f64))
}

const MAGIC: &[u8; 4] = b"TRRG";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

fn checksum(payload: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(payload);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

/// Versioned binary encoding: magic, version, payload length, truncated
/// SHA-256 of the payload, then the payload.
pub fn serialize(g: &ReebGraph) -> Result<Vec<u8>> {
    if g.nodes.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let payload = bincode::serialize(g).map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&checksum(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn deserialize(bytes: &[u8]) -> Result<ReebGraph> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::CorruptPayload("missing header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::CorruptPayload(format!("expected {len} payload bytes, found {}", payload.len())));
    }
    if checksum(payload) != bytes[16..24] {
        return Err(Error::CorruptPayload("checksum mismatch".into()));
    }
    bincode::deserialize(payload).map_err(|e| Error::CorruptPayload(e.to_string()))
}

/// Human-readable rendering for debugging.
pub fn write_json<W: Write>(g: &ReebGraph, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, g).map_err(|e| Error::CorruptPayload(e.to_string()))
}
