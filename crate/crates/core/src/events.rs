//! Appear/disappear/connect/disconnect events over tracks on a shared grid,
//! the per-timestamp ε-connectivity graph and its partition into bundles.
//!
//! Two tracks are *bundled* at a grid time when both are present and lie in
//! the same connected component of the snapshot graph. A connect event for a
//! pair is emitted at the first time they become bundled, a disconnect at the
//! first time they stop being bundled (separation, split of the component,
//! or either track becoming absent). Appear is stamped at the first present
//! slot of each presence run, disappear at the last one.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, Metric};
use crate::spatial::EpsilonGrid;
use crate::track::{check_common_grid, Grid, GridTrack, SpanTrack, TrackId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    // declaration order is the tie-break order within one timestamp
    Appear,
    Connect,
    Disconnect,
    Disappear,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t")]
    pub time: i64,
    pub kind: EventKind,
    /// One track for appear/disappear, the (ascending) pair for
    /// connect/disconnect.
    pub participants: Vec<TrackId>,
}

impl Event {
    fn sort_key(&self) -> (i64, EventKind, &[TrackId]) {
        (self.time, self.kind, &self.participants)
    }
}

fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct EpsilonConfig {
    /// Meters under haversine, degrees under the planar metric.
    pub epsilon: f64,
    pub metric: Metric,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        EpsilonConfig { epsilon: 50.0, metric: Metric::Haversine }
    }
}

impl EpsilonConfig {
    pub fn new(epsilon: f64, metric: Metric) -> Result<Self> {
        let cfg = EpsilonConfig { epsilon, metric };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    #[inline]
    pub fn connected(&self, p: &GeoPoint, q: &GeoPoint) -> bool {
        self.metric.distance(p, q) < self.epsilon
    }
}

/// The ε-connectivity graph at one grid time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotGraph {
    pub time: i64,
    /// Ascending.
    pub active: Vec<TrackId>,
    /// Ascending `(lo, hi)` pairs.
    pub edges: Vec<(TrackId, TrackId)>,
}

/// A maximal run of grid times over which `members` is exactly one connected
/// component.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bundle {
    pub start: i64,
    pub end: i64,
    /// Ascending.
    pub members: Vec<TrackId>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    /// Sorted by `(start, members)`.
    pub bundles: Vec<Bundle>,
    /// Sorted by time, then appear < connect < disconnect < disappear, then
    /// participants.
    pub events: Vec<Event>,
}

struct Dsu {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a as usize] < self.size[b as usize] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b as usize] = a;
        self.size[a as usize] += self.size[b as usize];
    }
}

/// Groups `ids` (ascending) into components given local-index edges.
/// Components come out with ascending members, ordered by smallest member.
fn components_of(ids: &[TrackId], local_edges: &[(u32, u32)]) -> Vec<Vec<TrackId>> {
    let mut dsu = Dsu::new(ids.len());
    for &(a, b) in local_edges {
        dsu.union(a, b);
    }
    let mut slot_of_root: Vec<u32> = vec![u32::MAX; ids.len()];
    let mut comps: Vec<Vec<TrackId>> = Vec::new();
    for i in 0..ids.len() {
        let r = dsu.find(i as u32) as usize;
        if slot_of_root[r] == u32::MAX {
            slot_of_root[r] = comps.len() as u32;
            comps.push(Vec::new());
        }
        comps[slot_of_root[r] as usize].push(ids[i]);
    }
    // ids ascending and components opened in order of first member, so both
    // orderings already hold
    comps
}

pub fn snapshot_graph(time: i64, positions: &[(TrackId, GeoPoint)], cfg: &EpsilonConfig) -> SnapshotGraph {
    let mut sorted = positions.to_vec();
    sorted.sort_by_key(|(id, _)| *id);
    let pts: Vec<GeoPoint> = sorted.iter().map(|(_, p)| *p).collect();
    let grid = EpsilonGrid::build(&pts, cfg.metric, cfg.epsilon);
    let edges =
        grid.pairs_within(&pts).into_iter().map(|(i, j)| (sorted[i as usize].0, sorted[j as usize].0)).collect();
    SnapshotGraph { time, active: sorted.into_iter().map(|(id, _)| id).collect(), edges }
}

pub fn connected_components(g: &SnapshotGraph) -> Vec<Vec<TrackId>> {
    let local: BTreeMap<TrackId, u32> = g.active.iter().enumerate().map(|(i, id)| (*id, i as u32)).collect();
    let edges: Vec<(u32, u32)> = g.edges.iter().map(|(a, b)| (local[a], local[b])).collect();
    components_of(&g.active, &edges)
}

/// Connect/disconnect events between two tracks in O(m).
pub fn detect_pair_events(a: &GridTrack, b: &GridTrack, cfg: &EpsilonConfig) -> Result<Vec<Event>> {
    if a.grid != b.grid || a.slots.len() != b.slots.len() {
        return Err(Error::GridMismatch);
    }
    let mut events = Vec::new();
    let mut connected = false;
    let pair = vec![TrackId(0), TrackId(1)];
    for k in 0..a.grid.len {
        let now = match (a.at(k), b.at(k)) {
            (Some(p), Some(q)) => cfg.connected(&p, &q),
            _ => false,
        };
        if now != connected {
            events.push(Event {
                time: a.grid.time(k),
                kind: if now { EventKind::Connect } else { EventKind::Disconnect },
                participants: pair.clone(),
            });
            connected = now;
        }
    }
    Ok(events)
}

const NO_COMP: u32 = u32::MAX;

fn push_cross_pairs(groups: &BTreeMap<u64, Vec<TrackId>>, time: i64, kind: EventKind, out: &mut Vec<Event>) {
    if groups.len() < 2 {
        return;
    }
    let gs: Vec<&Vec<TrackId>> = groups.values().collect();
    for (i, g1) in gs.iter().enumerate() {
        for g2 in &gs[i + 1..] {
            for &x in g1.iter() {
                for &y in g2.iter() {
                    let (lo, hi) = if x < y { (x, y) } else { (y, x) };
                    out.push(Event { time, kind, participants: vec![lo, hi] });
                }
            }
        }
    }
}

/// Bundles and events for tracks `0..tracks.len()` on one grid. Per grid
/// time the work is near-linear in the number of present tracks for bounded
/// ε-neighborhoods.
pub fn bundle_timeline<T: Borrow<GridTrack>>(tracks: &[T], cfg: &EpsilonConfig) -> Result<Timeline> {
    cfg.validate()?;
    let Some(first) = tracks.first() else {
        return Ok(Timeline::default());
    };
    let grid = first.borrow().grid;
    check_common_grid(&grid, tracks.iter().map(Borrow::borrow))?;
    Ok(timeline_impl(grid, tracks.len(), cfg, |k, ids, pts| {
        for (i, t) in tracks.iter().enumerate() {
            if let Some(p) = t.borrow().slots[k] {
                ids.push(TrackId(i as u32));
                pts.push(p);
            }
        }
    }))
}

/// Same as [`bundle_timeline`] for tracks stored only over their spans.
/// Cost per grid time is proportional to the tracks alive at that time.
pub fn bundle_timeline_spans(grid: Grid, spans: &[SpanTrack], cfg: &EpsilonConfig) -> Result<Timeline> {
    cfg.validate()?;
    if spans.iter().any(|s| s.end() > grid.len) {
        return Err(Error::GridMismatch);
    }
    let mut starts: Vec<Vec<u32>> = vec![Vec::new(); grid.len];
    for (i, s) in spans.iter().enumerate() {
        if !s.slots.is_empty() {
            starts[s.start].push(i as u32);
        }
    }
    let mut alive: Vec<u32> = Vec::new();
    Ok(timeline_impl(grid, spans.len(), cfg, |k, ids, pts| {
        alive.retain(|&i| spans[i as usize].end() > k);
        if !starts[k].is_empty() {
            alive.extend_from_slice(&starts[k]);
            alive.sort_unstable();
        }
        for &i in alive.iter() {
            if let Some(p) = spans[i as usize].at(k) {
                ids.push(TrackId(i));
                pts.push(p);
            }
        }
    }))
}

/// Shared sweep. `fill(k, ids, pts)` appends the present tracks at slot `k`
/// in ascending id order.
fn timeline_impl(
    grid: Grid,
    n: usize,
    cfg: &EpsilonConfig,
    mut fill: impl FnMut(usize, &mut Vec<TrackId>, &mut Vec<GeoPoint>),
) -> Timeline {
    let mut bundles: Vec<Bundle> = Vec::new();
    let mut events: Vec<Event> = Vec::new();

    let mut prev_comp_of = vec![NO_COMP; n];
    let mut prev_comps: Vec<Vec<TrackId>> = Vec::new();
    let mut prev_bundle: Vec<usize> = Vec::new();
    let mut cur_comp_of = vec![NO_COMP; n];

    let mut ids = Vec::with_capacity(n);
    let mut pts = Vec::with_capacity(n);

    for k in 0..grid.len {
        let time = grid.time(k);
        ids.clear();
        pts.clear();
        fill(k, &mut ids, &mut pts);
        let edges = if pts.len() > 1 {
            EpsilonGrid::build(&pts, cfg.metric, cfg.epsilon).pairs_within(&pts)
        } else {
            Vec::new()
        };
        let comps = components_of(&ids, &edges);
        for (c, members) in comps.iter().enumerate() {
            for id in members {
                cur_comp_of[id.0 as usize] = c as u32;
            }
        }

        let mut continued_prev = vec![false; prev_comps.len()];
        let mut cur_bundle = Vec::with_capacity(comps.len());
        for members in &comps {
            let pc = prev_comp_of[members[0].0 as usize];
            if pc != NO_COMP && prev_comps[pc as usize] == *members {
                continued_prev[pc as usize] = true;
                let b = prev_bundle[pc as usize];
                bundles[b].end = time;
                cur_bundle.push(b);
                continue;
            }
            cur_bundle.push(bundles.len());
            bundles.push(Bundle { start: time, end: time, members: members.clone() });
            // pairs newly bundled: members from different previous groups,
            // newly present tracks each form their own group
            let mut groups: BTreeMap<u64, Vec<TrackId>> = BTreeMap::new();
            for &id in members {
                let pc = prev_comp_of[id.0 as usize];
                let key = if pc == NO_COMP { n as u64 + id.0 as u64 } else { pc as u64 };
                groups.entry(key).or_default().push(id);
            }
            push_cross_pairs(&groups, time, EventKind::Connect, &mut events);
        }

        for &id in &ids {
            if prev_comp_of[id.0 as usize] == NO_COMP {
                events.push(Event { time, kind: EventKind::Appear, participants: vec![id] });
            }
        }

        for (pc, members) in prev_comps.iter().enumerate() {
            if !continued_prev[pc] {
                let mut groups: BTreeMap<u64, Vec<TrackId>> = BTreeMap::new();
                for &id in members {
                    let cc = cur_comp_of[id.0 as usize];
                    let key = if cc == NO_COMP { n as u64 + id.0 as u64 } else { cc as u64 };
                    groups.entry(key).or_default().push(id);
                }
                push_cross_pairs(&groups, time, EventKind::Disconnect, &mut events);
            }
            for &id in members {
                if cur_comp_of[id.0 as usize] == NO_COMP {
                    events.push(Event { time: time - grid.stride, kind: EventKind::Disappear, participants: vec![id] });
                }
            }
        }

        // roll state
        for members in &prev_comps {
            for id in members {
                prev_comp_of[id.0 as usize] = NO_COMP;
            }
        }
        for members in &comps {
            for id in members {
                prev_comp_of[id.0 as usize] = cur_comp_of[id.0 as usize];
            }
        }
        for members in &comps {
            for id in members {
                cur_comp_of[id.0 as usize] = NO_COMP;
            }
        }
        prev_comps = comps;
        prev_bundle = cur_bundle;
    }

    let last = grid.time(grid.len.saturating_sub(1));
    for members in &prev_comps {
        for &id in members {
            events.push(Event { time: last, kind: EventKind::Disappear, participants: vec![id] });
        }
    }

    bundles.sort();
    sort_events(&mut events);
    Timeline { bundles, events }
}

/// Writes events as JSON Lines: `{"t":…,"kind":…,"participants":[…]}`.
pub fn write_events_jsonl<W: Write>(events: &[Event], mut out: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
