//! Agent-level temporal Reeb graphs: construction from one agent's daily
//! tracks aligned by time of day, stop detection, and node features.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{bundle_timeline, EpsilonConfig};
use crate::geo::{bearing_deg, haversine_m, speed_mps, GeoPoint, Resampled, SubTrajectory, TimedPoint};
use crate::reeb::{assemble, GraphKind, Mode, NodeFeatures, ReebGraph, ReebNode, TrackInfo};
use crate::track::GridTrack;

/// Default sampling stride of node centroid paths, seconds.
pub const DEFAULT_REP_STRIDE_S: i64 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct StopParams {
    pub v_stop_mps: f64,
    pub min_stop_s: i64,
    pub stop_radius_m: f64,
}

impl Default for StopParams {
    fn default() -> Self {
        StopParams { v_stop_mps: 0.5, min_stop_s: 300, stop_radius_m: 30.0 }
    }
}

impl StopParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_stop_mps > 0.0 && self.min_stop_s > 0 && self.stop_radius_m > 0.0) {
            return Err(Error::param("stop parameters must be positive"));
        }
        Ok(())
    }
}

/// Upper speed bounds of the walk and bike classes; anything faster is car.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ModeThresholds {
    pub walk_max_mps: f64,
    pub bike_max_mps: f64,
}

impl Default for ModeThresholds {
    fn default() -> Self {
        ModeThresholds { walk_max_mps: 2.5, bike_max_mps: 8.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct FeatureParams {
    pub stop: StopParams,
    pub modes: ModeThresholds,
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        self.stop.validate()?;
        let m = &self.modes;
        if !(m.walk_max_mps > 0.0 && m.bike_max_mps > m.walk_max_mps) {
            return Err(Error::param("mode thresholds must satisfy 0 < walk < bike"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stop {
    /// Absolute epoch seconds, inclusive.
    pub start: i64,
    pub end: i64,
    pub centroid: GeoPoint,
}

impl Stop {
    pub fn duration_s(&self) -> i64 {
        self.end - self.start
    }
}

/// Builds one agent's graph. All days must belong to the same agent and
/// share a time-of-day grid.
pub fn build_terg(days: &[Resampled], cfg: &EpsilonConfig) -> Result<ReebGraph> {
    build_terg_with(days, cfg, DEFAULT_REP_STRIDE_S)
}

pub fn build_terg_with(days: &[Resampled], cfg: &EpsilonConfig, rep_stride_s: i64) -> Result<ReebGraph> {
    cfg.validate()?;
    let first = days.first().ok_or(Error::EmptyInput)?;
    if days.iter().any(|d| d.agent_id != first.agent_id) {
        return Err(Error::param("all days must belong to one agent"));
    }
    let tracks: Vec<&GridTrack> = days.iter().map(|d| &d.track).collect();
    let infos = days
        .iter()
        .map(|d| TrackInfo {
            agent_id: d.agent_id.clone(),
            day_index: d.day_index,
            day_start: d.day_start,
            source: None,
        })
        .collect();
    let timeline = bundle_timeline(&tracks, cfg)?;
    assemble(GraphKind::AgentTerg, first.track.grid, infos, &timeline, *cfg, rep_stride_s, |m, k| {
        tracks[m.0 as usize].at(k)
    })
}

/// Greedy left-to-right stop scan. A stop grows while consecutive speeds
/// stay below `v_stop_mps` and each new sample lies within
/// `stop_radius_m` of the running centroid.
pub fn detect_stops(points: &[TimedPoint], p: &StopParams) -> Vec<Stop> {
    let n = points.len();
    let mut stops = Vec::new();
    let mut i = 0;
    while i < n {
        let (mut sum_lat, mut sum_lon, mut cnt) = (points[i].pos.lat(), points[i].pos.lon(), 1.0);
        let mut j = i;
        let mut broke_on_speed = true;
        while j + 1 < n {
            let (a, b) = (&points[j], &points[j + 1]);
            let v = speed_mps(a, b).unwrap_or(f64::INFINITY);
            if v >= p.v_stop_mps {
                break;
            }
            let centroid = GeoPoint::clamped(sum_lat / cnt, sum_lon / cnt);
            if haversine_m(&centroid, &b.pos) > p.stop_radius_m {
                broke_on_speed = false;
                break;
            }
            sum_lat += b.pos.lat();
            sum_lon += b.pos.lon();
            cnt += 1.0;
            j += 1;
        }
        if points[j].t - points[i].t >= p.min_stop_s {
            stops.push(Stop {
                start: points[i].t,
                end: points[j].t,
                centroid: GeoPoint::clamped(sum_lat / cnt, sum_lon / cnt),
            });
            i = j + 1;
        } else if broke_on_speed {
            // any run starting inside (i, j] hits the same fast step sooner
            i = j + 1;
        } else {
            i += 1;
        }
    }
    stops
}

/// Mode of one segment from its 95th-percentile moving speed; `None` when
/// the segment never moves.
pub fn segment_mode(speeds: &[f64], v_stop_mps: f64, th: &ModeThresholds) -> Option<Mode> {
    let mut moving: Vec<f64> = speeds.iter().copied().filter(|&v| v >= v_stop_mps).collect();
    if moving.is_empty() {
        return None;
    }
    moving.sort_by(f64::total_cmp);
    let rank = ((0.95 * moving.len() as f64).ceil() as usize).max(1);
    let p95 = moving[rank - 1];
    Some(if p95 <= th.walk_max_mps {
        Mode::Walk
    } else if p95 <= th.bike_max_mps {
        Mode::Bike
    } else {
        Mode::Car
    })
}

/// Union of per-segment modes.
pub fn estimate_mode<S: AsRef<[f64]>>(segments: &[S], v_stop_mps: f64, th: &ModeThresholds) -> BTreeSet<Mode> {
    segments.iter().filter_map(|s| segment_mode(s.as_ref(), v_stop_mps, th)).collect()
}

/// Per-track inputs for feature computation.
struct TrackRaw<'a> {
    points: &'a [TimedPoint],
    stops: Vec<Stop>,
}

/// Absolute window `[lo, hi)` a node covers on one member track.
fn node_window(node: &ReebNode, day_start: i64, stride: i64) -> (i64, i64) {
    (day_start + node.start, day_start + node.end + stride)
}

fn features_for(node: &ReebNode, g: &ReebGraph, raws: &[TrackRaw<'_>], p: &FeatureParams) -> NodeFeatures {
    let stride = g.grid.stride;
    let interval = node.interval_len_s();
    let mut max_stop = 0i64;
    let mut dwell = 0i64;
    let mut max_v = 0.0f64;
    let mut segments: Vec<Vec<f64>> = Vec::new();
    let (mut bs, mut bc) = (0.0f64, 0.0f64);
    let mut moving_pairs = 0usize;
    let (mut wlat, mut wlon, mut wsum) = (0.0f64, 0.0f64, 0.0f64);

    for m in &node.members {
        let info = &g.tracks[m.0 as usize];
        let raw = &raws[m.0 as usize];
        let (lo, hi) = node_window(node, info.day_start, stride);
        let (clip_lo, clip_hi) = (info.day_start + node.start, info.day_start + node.end);

        for s in &raw.stops {
            let ov = s.end.min(clip_hi) - s.start.max(clip_lo);
            if ov > 0 {
                max_stop = max_stop.max(ov);
                dwell += ov;
            }
        }

        let a = raw.points.partition_point(|q| q.t < lo);
        let b = raw.points.partition_point(|q| q.t < hi);
        let mut speeds = Vec::new();
        for i in a..b {
            let q = &raw.points[i];
            let next_t = raw.points.get(i + 1).map_or(hi, |n| n.t.min(hi));
            let w = (next_t - q.t) as f64;
            wlat += w * q.pos.lat();
            wlon += w * q.pos.lon();
            wsum += w;
            if let Some(n) = raw.points.get(i + 1) {
                let v = speed_mps(q, n).expect("strictly increasing");
                max_v = max_v.max(v);
                speeds.push(v);
                if v >= p.stop.v_stop_mps {
                    if let Ok(brg) = bearing_deg(&q.pos, &n.pos) {
                        let r = brg.to_radians();
                        bs += r.sin();
                        bc += r.cos();
                        moving_pairs += 1;
                    }
                }
            }
        }
        segments.push(speeds);
    }

    let anchor = if wsum > 0.0 {
        GeoPoint::clamped(wlat / wsum, wlon / wsum)
    } else {
        GeoPoint::mean(node.centroid_path.iter().map(|tp| &tp.pos)).expect("nonempty path")
    };
    let mean_bearing_deg = (moving_pairs > 0 && bs.hypot(bc) > 1e-9).then(|| {
        let d = bs.atan2(bc).to_degrees();
        if d < 0.0 {
            (d + 360.0) % 360.0
        } else {
            d
        }
    });
    NodeFeatures {
        max_stop_duration_s: max_stop.min(interval) as f64,
        max_velocity_mps: max_v,
        modes: estimate_mode(&segments, p.stop.v_stop_mps, &p.modes),
        mean_bearing_deg,
        anchor,
        dwell_total_s: dwell as f64,
    }
}

/// Computes features of every node from the raw member samples inside the
/// node's time window. `subtrajs` must contain every track the graph was
/// built from, matched by agent and day.
pub fn annotate_features(g: &ReebGraph, subtrajs: &[SubTrajectory], p: &FeatureParams) -> Result<ReebGraph> {
    p.validate()?;
    let by_key: BTreeMap<(&str, i64), &SubTrajectory> =
        subtrajs.iter().map(|s| ((s.agent_id.as_str(), s.day_index), s)).collect();
    let raws = g
        .tracks
        .iter()
        .map(|t| {
            let st = by_key
                .get(&(t.agent_id.as_str(), t.day_index))
                .ok_or_else(|| Error::param(format!("missing raw day {} of agent {}", t.day_index, t.agent_id)))?;
            Ok(TrackRaw { points: st.points(), stops: detect_stops(st.points(), &p.stop) })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = g.clone();
    for node in &mut out.nodes {
        node.features = Some(features_for(node, g, &raws, p));
    }
    Ok(out)
}

/// Largest haversine distance between any two node anchors.
pub fn graph_diameter_m(g: &ReebGraph) -> Result<f64> {
    let anchors = g
        .nodes
        .iter()
        .map(|n| n.features.as_ref().map(|f| f.anchor).ok_or(Error::FeaturesRequired))
        .collect::<Result<Vec<_>>>()?;
    if anchors.is_empty() {
        return Err(Error::FeaturesRequired);
    }
    let mut best = 0.0f64;
    for i in 0..anchors.len() {
        for j in i + 1..anchors.len() {
            best = best.max(haversine_m(&anchors[i], &anchors[j]));
        }
    }
    Ok(best)
}

/// Semantic place labelling hook.
pub trait PoiLabeler {
    fn labels(&self, anchor: &GeoPoint) -> Vec<String>;
}

/// Labels nothing.
pub struct NullPoiLabeler;

impl PoiLabeler for NullPoiLabeler {
    fn labels(&self, _anchor: &GeoPoint) -> Vec<String> {
        Vec::new()
    }
}

pub fn semantic_labels(g: &ReebGraph, labeler: &dyn PoiLabeler) -> Result<BTreeMap<crate::reeb::NodeId, Vec<String>>> {
    g.nodes
        .iter()
        .map(|n| {
            let f = n.features.as_ref().ok_or(Error::FeaturesRequired)?;
            Ok((n.id, labeler.labels(&f.anchor)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{resample, Metric, ResampleSpec};
    use crate::reeb::{deserialize, serialize};
    use crate::track::TrackId;

    const DAY0: i64 = 1_700_006_400; // a UTC midnight

    fn gp(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    /// Samples `pos(t)` every `step` seconds over `[from, to]` (time of day).
    fn day_track(agent: &str, day: i64, from: i64, to: i64, step: i64, pos: impl Fn(i64) -> GeoPoint) -> SubTrajectory {
        let start = DAY0 + day * 86_400;
        let pts = (from..=to).step_by(step as usize).map(|t| TimedPoint::new(start + t, pos(t))).collect();
        SubTrajectory::new(agent, DAY0 / 86_400 + day, 0, pts).unwrap()
    }

    fn spec() -> ResampleSpec {
        ResampleSpec { stride_s: 60, max_gap_s: 600 }
    }

    #[test]
    fn single_day_is_single_node() {
        let st = day_track("a", 0, 0, 3600, 60, |_| gp(10.0, 10.0));
        let r = resample(&st, &spec()).unwrap();
        let g = build_terg(&[r], &EpsilonConfig::default()).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
        assert_eq!((g.nodes[0].start, g.nodes[0].end), (0, 3600));
        assert_eq!(g.nodes[0].support, 1);
        assert_eq!(g.kind, GraphKind::AgentTerg);
    }

    #[test]
    fn disjoint_days_give_disjoint_paths() {
        let a = resample(&day_track("a", 0, 0, 3600, 60, |_| gp(10.0, 10.0)), &spec()).unwrap();
        let b = resample(&day_track("a", 1, 0, 3600, 60, |_| gp(10.1, 10.0)), &spec()).unwrap();
        let g = build_terg(&[a, b], &EpsilonConfig::default()).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn rejects_mixed_agents_and_empty() {
        let a = resample(&day_track("a", 0, 0, 600, 60, |_| gp(1.0, 1.0)), &spec()).unwrap();
        let b = resample(&day_track("b", 0, 0, 600, 60, |_| gp(1.0, 1.0)), &spec()).unwrap();
        assert!(build_terg(&[a, b], &EpsilonConfig::default()).is_err());
        assert!(matches!(build_terg(&[], &EpsilonConfig::default()), Err(Error::EmptyInput)));
    }

    /// Seven days sharing home in the morning and evening with a different
    /// destination each midday.
    fn seven_days() -> Vec<SubTrajectory> {
        let home = gp(40.0, -75.0);
        (0..7)
            .map(|d| {
                let dest = home.offset_m(2000.0 * (d as f64 - 3.0), 3000.0);
                day_track("a", d, 0, 86_340, 60, move |t| {
                    let h = t as f64 / 3600.0;
                    if !(8.0..18.0).contains(&h) {
                        home
                    } else if h < 9.0 {
                        home.lerp(&dest, h - 8.0)
                    } else if h < 17.0 {
                        dest
                    } else {
                        dest.lerp(&home, h - 17.0)
                    }
                })
            })
            .collect()
    }

    #[test]
    fn seven_day_fan_out_fan_in() {
        let days = seven_days();
        let rs: Vec<_> = days.iter().map(|d| resample(d, &spec()).unwrap()).collect();
        let g = build_terg(&rs, &EpsilonConfig::default()).unwrap();
        let all: Vec<TrackId> = (0..7).map(TrackId).collect();
        let bundled: Vec<&ReebNode> = g.nodes.iter().filter(|n| n.members == all).collect();
        assert_eq!(bundled.len(), 2, "morning and evening home nodes");
        assert_eq!(bundled[0].start, 0);
        assert_eq!(bundled[1].end, 86_340);
        // every track passes through singleton midday nodes
        let singles = g.nodes.iter().filter(|n| n.members.len() == 1).count();
        assert!(singles >= 7);
        let out_deg = g.edges.iter().filter(|e| e.from == bundled[0].id).count();
        let in_deg = g.edges.iter().filter(|e| e.to == bundled[1].id).count();
        assert!(out_deg >= 2 && in_deg >= 2);
        for e in &g.edges {
            assert!(g.node(e.from).unwrap().end < g.node(e.to).unwrap().start);
        }
    }

    #[test]
    fn stops_examples() {
        let p = StopParams::default();
        let still = day_track("a", 0, 0, 86_399, 1, |_| gp(1.0, 1.0));
        let s = detect_stops(still.points(), &p);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].duration_s(), 86_399);

        let origin = gp(0.0, 0.0);
        let moving = day_track("a", 0, 0, 3600, 1, |t| origin.offset_m(10.0 * t as f64, 0.0));
        assert!(detect_stops(moving.points(), &p).is_empty());

        // 2 h still, 30 min drive at ~10 m/s, 1 h still
        let far = origin.offset_m(18_000.0, 0.0);
        let trip = day_track("a", 0, 0, 7200 + 1800 + 3600, 1, |t| {
            if t <= 7200 {
                origin
            } else if t < 9000 {
                origin.lerp(&far, (t - 7200) as f64 / 1800.0)
            } else {
                far
            }
        });
        let s = detect_stops(trip.points(), &p);
        let durs: Vec<i64> = s.iter().map(Stop::duration_s).collect();
        assert_eq!(durs, vec![7200, 3600]);
    }

    #[test]
    fn mode_examples() {
        let th = ModeThresholds::default();
        assert_eq!(estimate_mode(&[vec![1.2; 10]], 0.5, &th), BTreeSet::from([Mode::Walk]));
        assert_eq!(estimate_mode(&[vec![1.0; 5], vec![20.0; 5]], 0.5, &th), BTreeSet::from([Mode::Walk, Mode::Car]));
        assert!(estimate_mode(&[vec![0.0; 5]], 0.5, &th).is_empty());
        assert_eq!(segment_mode(&[5.0], 0.5, &th), Some(Mode::Bike));
    }

    fn annotated(days: &[SubTrajectory]) -> ReebGraph {
        let rs: Vec<_> = days.iter().map(|d| resample(d, &spec()).unwrap()).collect();
        let g = build_terg(&rs, &EpsilonConfig::default()).unwrap();
        annotate_features(&g, days, &FeatureParams::default()).unwrap()
    }

    #[test]
    fn pure_stop_node_features() {
        let st = day_track("a", 0, 0, 10_800, 60, |_| gp(5.0, 5.0));
        let g = annotated(&[st]);
        let f = g.nodes[0].features.as_ref().unwrap();
        assert_eq!(f.max_stop_duration_s, 10_800.0);
        assert_eq!(f.max_velocity_mps, 0.0);
        assert!(f.modes.is_empty());
        assert_eq!(f.mean_bearing_deg, None);
        assert_eq!(f.anchor, gp(5.0, 5.0));
    }

    #[test]
    fn fast_segment_is_car() {
        let o = gp(0.0, 0.0);
        let st = day_track("a", 0, 0, 3600, 60, |t| o.offset_m(0.0, 25.0 * t as f64));
        let g = annotated(&[st]);
        let f = g.nodes[0].features.as_ref().unwrap();
        assert!((f.max_velocity_mps - 25.0).abs() < 0.01, "{}", f.max_velocity_mps);
        assert_eq!(f.modes, BTreeSet::from([Mode::Car]));
        assert!(f.mean_bearing_deg.unwrap().min(360.0 - f.mean_bearing_deg.unwrap()) < 0.01);
    }

    #[test]
    fn annotate_is_idempotent_and_bounded() {
        let days = seven_days();
        let g = annotated(&days);
        let again = annotate_features(&g, &days, &FeatureParams::default()).unwrap();
        assert_eq!(g, again);
        for n in &g.nodes {
            let f = n.features.as_ref().unwrap();
            assert!(f.max_stop_duration_s >= 0.0 && f.max_stop_duration_s <= n.interval_len_s() as f64);
            assert!(f.max_velocity_mps >= 0.0);
        }
    }

    #[test]
    fn rebuild_determinism() {
        let days = seven_days();
        let g = annotated(&days);
        let back = deserialize(&serialize(&g).unwrap()).unwrap();
        let re = annotate_features(&back, &days, &FeatureParams::default()).unwrap();
        assert_eq!(re, g);
    }

    #[test]
    fn diameter_examples() {
        let a = day_track("a", 0, 0, 600, 60, |_| gp(0.0, 0.0));
        let g = annotated(std::slice::from_ref(&a));
        assert_eq!(graph_diameter_m(&g).unwrap(), 0.0);

        let b = day_track("a", 1, 0, 600, 60, |_| gp(0.0, 1.0));
        let g = annotated(&[a, b]);
        assert!((graph_diameter_m(&g).unwrap() - 111_194.93).abs() < 0.1);

        let mut bare = g.clone();
        bare.nodes[0].features = None;
        assert!(matches!(graph_diameter_m(&bare), Err(Error::FeaturesRequired)));
    }

    #[test]
    fn diameter_three_nodes_matches_exhaustive() {
        let pts = [gp(0.0, 0.0), gp(0.5, 0.2), gp(-0.3, 0.9)];
        let days: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let p = *p;
                day_track("a", i as i64, 0, 600, 60, move |_| p)
            })
            .collect();
        let g = annotated(&days);
        let mut best: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                best = best.max(haversine_m(&pts[i], &pts[j]));
            }
        }
        assert!((graph_diameter_m(&g).unwrap() - best).abs() < 1e-6);
    }

    #[test]
    fn null_labeler_labels_nothing() {
        let g = annotated(&[day_track("a", 0, 0, 600, 60, |_| gp(0.0, 0.0))]);
        let labels = semantic_labels(&g, &NullPoiLabeler).unwrap();
        assert_eq!(labels.len(), 1);
        assert!(labels.values().all(Vec::is_empty));
    }

    #[test]
    fn euclidean_metric_supported() {
        let cfg = EpsilonConfig::new(0.001, Metric::EuclideanDeg).unwrap();
        let a = resample(&day_track("a", 0, 0, 600, 60, |_| gp(0.0, 0.0)), &spec()).unwrap();
        let b = resample(&day_track("a", 1, 0, 600, 60, |_| gp(0.0, 0.0005)), &spec()).unwrap();
        let g = build_terg(&[a, b], &cfg).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.nodes[0].members.len(), 2);
    }
}
