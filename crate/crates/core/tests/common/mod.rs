//! Independent oracles and generators shared by the integration tests and
//! the acceptance suite. Nothing here uses the spatial index or the sweep it
//! checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajreeb::events::{Bundle, EpsilonConfig, Event, EventKind, Timeline};
use trajreeb::geo::{haversine_m, GeoPoint, Metric};
use trajreeb::marg::{update_reeb, MargBuilder, PseudoTrack};
use trajreeb::reeb::{ReebGraph, TrackInfo};
use trajreeb::track::{Grid, GridTrack, SpanTrack, TrackId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn base() -> GeoPoint {
    GeoPoint::new(40.0, -75.0).unwrap()
}

/// Components of one time slice by repeated relabeling over all pairs.
pub fn brute_components(present: &[(TrackId, GeoPoint)], cfg: &EpsilonConfig) -> Vec<Vec<TrackId>> {
    let n = present.len();
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if i != j && cfg.metric.distance(&present[i].1, &present[j].1) < cfg.epsilon && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut groups: BTreeMap<usize, Vec<TrackId>> = BTreeMap::new();
    for (i, l) in label.iter().enumerate() {
        groups.entry(*l).or_default().push(present[i].0);
    }
    let mut out: Vec<Vec<TrackId>> = groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    out.sort();
    out
}

/// Bundles and events straight from their definitions, slot by slot:
/// a bundle is a maximal run of slots over which one member set is a
/// component; a pair connects when it starts sharing a component and
/// disconnects when it stops (absence included); appear and disappear mark
/// the first and last slot of each presence run.
pub fn brute_timeline(tracks: &[GridTrack], cfg: &EpsilonConfig) -> Timeline {
    let Some(first) = tracks.first() else {
        return Timeline::default();
    };
    let grid = first.grid;
    let n = tracks.len();
    let present = |i: usize, k: usize| tracks[i].at(k).is_some();
    let mut comps_at: Vec<BTreeSet<Vec<TrackId>>> = Vec::with_capacity(grid.len);
    let mut comp_of_at: Vec<Vec<Option<usize>>> = Vec::with_capacity(grid.len);
    for k in 0..grid.len {
        let pts: Vec<(TrackId, GeoPoint)> =
            (0..n).filter_map(|i| tracks[i].at(k).map(|p| (TrackId(i as u32), p))).collect();
        let comps = brute_components(&pts, cfg);
        let mut of = vec![None; n];
        for (c, members) in comps.iter().enumerate() {
            for m in members {
                of[m.0 as usize] = Some(c);
            }
        }
        comps_at.push(comps.into_iter().collect());
        comp_of_at.push(of);
    }

    let mut bundles = Vec::new();
    for k in 0..grid.len {
        for members in &comps_at[k] {
            if k > 0 && comps_at[k - 1].contains(members) {
                continue;
            }
            let mut z = k;
            while z + 1 < grid.len && comps_at[z + 1].contains(members) {
                z += 1;
            }
            bundles.push(Bundle { start: grid.time(k), end: grid.time(z), members: members.clone() });
        }
    }
    bundles.sort();

    let bundled = |i: usize, j: usize, k: usize| {
        let of = &comp_of_at[k];
        of[i].is_some() && of[i] == of[j]
    };
    let mut events = Vec::new();
    for k in 0..grid.len {
        let t = grid.time(k);
        for i in 0..n {
            if present(i, k) && (k == 0 || !present(i, k - 1)) {
                events.push(Event { time: t, kind: EventKind::Appear, participants: vec![TrackId(i as u32)] });
            }
            if present(i, k) && (k + 1 == grid.len || !present(i, k + 1)) {
                events.push(Event { time: t, kind: EventKind::Disappear, participants: vec![TrackId(i as u32)] });
            }
            for j in i + 1..n {
                let now = bundled(i, j, k);
                let before = k > 0 && bundled(i, j, k - 1);
                let kind = match (before, now) {
                    (false, true) => EventKind::Connect,
                    (true, false) => EventKind::Disconnect,
                    _ => continue,
                };
                events.push(Event { time: t, kind, participants: vec![TrackId(i as u32), TrackId(j as u32)] });
            }
        }
    }
    events.sort();
    Timeline { bundles, events }
}

/// Every pair closer than ε, by exhaustive comparison.
pub fn brute_edges(points: &[(TrackId, GeoPoint)], cfg: &EpsilonConfig) -> BTreeSet<(TrackId, TrackId)> {
    let mut out = BTreeSet::new();
    for (a, (ia, pa)) in points.iter().enumerate() {
        for (ib, pb) in &points[a + 1..] {
            if cfg.metric.distance(pa, pb) < cfg.epsilon {
                out.insert(if ia < ib { (*ia, *ib) } else { (*ib, *ia) });
            }
        }
    }
    out
}

/// A random bundling instance: up to `max_tracks` tracks moving between a
/// handful of shared sites, with random presence gaps, on a grid of at most
/// `max_len` slots. Uses the planar metric now and then.
pub fn random_instance(r: &mut impl Rng, max_tracks: usize, max_len: usize) -> (Vec<GridTrack>, EpsilonConfig) {
    let grid = Grid { origin: r.random_range(0..1000) * 60, stride: 60, len: r.random_range(1..=max_len) };
    let planar = r.random_bool(0.2);
    let cfg = if planar { EpsilonConfig::new(0.0005, Metric::EuclideanDeg).unwrap() } else { EpsilonConfig::default() };
    // sites sit a few ε apart so tracks merge, split and bridge
    let sites: Vec<GeoPoint> = (0..r.random_range(1..=5))
        .map(|_| base().offset_m(r.random_range(0.0..250.0), r.random_range(0.0..250.0)))
        .collect();
    let n = r.random_range(1..=max_tracks);
    let tracks = (0..n)
        .map(|_| {
            let mut slots = Vec::with_capacity(grid.len);
            let mut pos = sites[r.random_range(0..sites.len())];
            let mut target = pos;
            let mut present = r.random_bool(0.7);
            let wander = r.random_bool(0.3);
            for _ in 0..grid.len {
                if r.random_bool(0.05) {
                    present = !present;
                }
                if r.random_bool(0.08) {
                    target = sites[r.random_range(0..sites.len())];
                }
                let (dn, de) = (target.lat() - pos.lat(), target.lon() - pos.lon());
                let step = 0.3;
                pos = GeoPoint::new(pos.lat() + dn * step, pos.lon() + de * step).unwrap();
                if wander {
                    pos = pos.offset_m(r.random_range(-20.0..20.0), r.random_range(-20.0..20.0));
                }
                slots.push(present.then_some(pos));
            }
            GridTrack::new(grid, slots)
        })
        .collect();
    (tracks, cfg)
}

/// `n` points scattered over a square of `side_m` around `center`, with
/// shuffled ids.
pub fn random_cloud(r: &mut impl Rng, n: usize, center: GeoPoint, side_m: f64) -> Vec<(TrackId, GeoPoint)> {
    let mut ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 7).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, r.random_range(0..=i));
    }
    ids.into_iter()
        .map(|id| {
            let p = center
                .offset_m(r.random_range(-side_m / 2.0..side_m / 2.0), r.random_range(-side_m / 2.0..side_m / 2.0));
            (TrackId(id), p)
        })
        .collect()
}

pub const DAY_GRID: Grid = Grid { origin: 0, stride: 60, len: 1440 };

pub fn pseudo(agent: &str, start: usize, slots: Vec<GeoPoint>) -> PseudoTrack {
    PseudoTrack {
        info: TrackInfo { agent_id: agent.into(), day_index: 0, day_start: 0, source: None },
        span: SpanTrack { start, slots: slots.into_iter().map(Some).collect() },
    }
}

/// A population of stop pseudo-tracks: each agent stays at home, at work
/// and at home again, with meter-scale jitter around shared sites that are
/// many ε apart. Tracks of one agent never overlap in time.
pub fn random_population(r: &mut impl Rng, n_agents: usize) -> Vec<(String, Vec<PseudoTrack>)> {
    let homes: Vec<GeoPoint> = (0..8).map(|i| base().offset_m(400.0 * i as f64, 0.0)).collect();
    let works: Vec<GeoPoint> = (0..4).map(|i| base().offset_m(400.0 * i as f64, 2000.0)).collect();
    (0..n_agents)
        .map(|a| {
            let id = format!("agent{a:03}");
            let home = homes[r.random_range(0..homes.len())];
            let work = works[r.random_range(0..works.len())];
            let leave = r.random_range(6 * 60..10 * 60);
            let arrive = leave + r.random_range(10..60);
            let depart = r.random_range(15 * 60..19 * 60);
            let back = depart + r.random_range(10..60);
            let mut tracks = Vec::new();
            if r.random_bool(0.9) {
                tracks.push(stay(r, &id, home, 0, leave));
            }
            tracks.push(stay(r, &id, work, arrive, depart));
            if r.random_bool(0.9) {
                tracks.push(stay(r, &id, home, back, DAY_GRID.len));
            }
            (id, tracks)
        })
        .collect()
}

fn stay(r: &mut impl Rng, agent: &str, at: GeoPoint, a: usize, b: usize) -> PseudoTrack {
    let jitter = r.random_range(0.0..10.0);
    let slots =
        (a..b).map(|_| at.offset_m(r.random_range(-jitter..=jitter), r.random_range(-jitter..=jitter))).collect();
    pseudo(agent, a, slots)
}

/// Slots each track contributes, from the node member lists.
pub fn member_slots(g: &ReebGraph) -> BTreeMap<TrackId, i64> {
    let mut out = BTreeMap::new();
    for n in &g.nodes {
        let slots = (n.end - n.start) / g.grid.stride + 1;
        for m in &n.members {
            *out.entry(*m).or_insert(0) += slots;
        }
    }
    out
}

/// Support-weighted node length in slots.
pub fn support_slots(g: &ReebGraph) -> i64 {
    g.nodes.iter().map(|n| n.support as i64 * ((n.end - n.start) / g.grid.stride + 1)).sum()
}

pub fn presence(t: &PseudoTrack) -> i64 {
    t.span.slots.iter().filter(|s| s.is_some()).count() as i64
}

pub fn flatten(pop: &[(String, Vec<PseudoTrack>)]) -> Vec<PseudoTrack> {
    pop.iter().flat_map(|(_, t)| t.iter().cloned()).collect()
}

/// Bootstraps from the first `m` agents and adds the rest one track at a
/// time. After every step the support-weighted node length must equal the
/// presence added so far, and no earlier track may gain or lose slots.
pub fn grow_checked(pop: &[(String, Vec<PseudoTrack>)], m: usize) -> Result<MargBuilder, String> {
    let eps = EpsilonConfig::default();
    let (head, tail) = pop.split_at(m);
    let mut b = MargBuilder::from_batch(DAY_GRID, eps, 60, 2, flatten(head)).map_err(|e| e.to_string())?;
    let mut added: i64 = flatten(head).iter().map(presence).sum();
    if support_slots(&b.snapshot()) != added {
        return Err("batch bootstrap does not conserve support".into());
    }
    for t in flatten(tail) {
        let before = member_slots(&b.snapshot());
        added += presence(&t);
        b.update(t).map_err(|e| e.to_string())?;
        let g = b.snapshot();
        if support_slots(&g) != added {
            return Err(format!("support-weighted length {} after adding {added} slots", support_slots(&g)));
        }
        for n in &g.nodes {
            if n.support < 1 || n.support as usize > n.members.len() {
                return Err(format!("node support {} with {} members", n.support, n.members.len()));
            }
        }
        let after = member_slots(&g);
        for (track, slots) in before {
            if after.get(&track) != Some(&slots) {
                return Err(format!("track {track:?} changed presence during an update"));
            }
        }
    }
    Ok(b)
}

/// Adds `t` twice under two fresh agent ids and checks the second copy:
/// same node intervals and edges as after the first, the copy rides along
/// wherever the original is, support rises by one more on exactly those
/// nodes, and centroids move less than ε/2 (not at all where the original
/// is alone).
pub fn duplicate_add_checked(g0: &ReebGraph, t: &PseudoTrack) -> Result<(), String> {
    let mut first = t.clone();
    first.info.agent_id = "newcomer".into();
    let mut second = t.clone();
    second.info.agent_id = "newcomer-again".into();
    let (g1, _) = update_reeb(g0, first).map_err(|e| e.to_string())?;
    let (g2, _) = update_reeb(&g1, second).map_err(|e| e.to_string())?;
    let orig = TrackId(g1.tracks.len() as u32 - 1);
    let copy = TrackId(g1.tracks.len() as u32);
    if g2.nodes.len() != g1.nodes.len() || g2.edges.len() != g1.edges.len() {
        return Err(format!(
            "node/edge counts {}/{} became {}/{}",
            g1.nodes.len(),
            g1.edges.len(),
            g2.nodes.len(),
            g2.edges.len()
        ));
    }
    let eps = g1.epsilon.epsilon;
    for (a, b) in g1.nodes.iter().zip(&g2.nodes) {
        let has = a.members.contains(&orig);
        let mut want = a.members.clone();
        if has {
            want.push(copy);
        }
        if (a.start, a.end) != (b.start, b.end) || b.members != want {
            return Err(format!("node {:?} changed shape", a.id));
        }
        if b.support != a.support + has as u32 {
            return Err(format!("node {:?} support {} -> {}", a.id, a.support, b.support));
        }
        for (p, q) in a.centroid_path.iter().zip(&b.centroid_path) {
            let shift = haversine_m(&p.pos, &q.pos);
            let limit = if a.members == [orig] { 1e-6 } else { eps / 2.0 };
            if p.t != q.t || shift >= limit {
                return Err(format!("node {:?} centroid moved {shift} m", a.id));
            }
        }
    }
    for (a, b) in g1.edges.iter().zip(&g2.edges) {
        let mut want = a.carried.clone();
        if a.carried.contains(&orig) {
            want.push(copy);
        }
        if (a.from, a.to) != (b.from, b.to) || b.carried != want {
            return Err(format!("edge {:?}->{:?} changed", a.from, a.to));
        }
    }
    Ok(())
}

/// Three tracks: two travel together and part, the third keeps to itself.
/// The fourth meets the pair mid-way, rides with it and leaves again.
pub fn toy() -> (Vec<PseudoTrack>, PseudoTrack) {
    let at = |e: f64, n: f64| base().offset_m(e, n);
    let east = |k: usize| 30.0 * k as f64;
    let a = pseudo("a", 0, (0..30).map(|k| at(east(k), 0.0)).collect());
    let b = pseudo(
        "b",
        0,
        (0..30).map(|k| at(east(k), if k < 20 { 10.0 } else { 10.0 + 45.0 * (k - 19) as f64 })).collect(),
    );
    let c = pseudo("c", 0, (0..30).map(|k| at(east(k), 3000.0)).collect());
    let d = pseudo(
        "d",
        5,
        (5..30)
            .map(|k| {
                let north = match k {
                    ..15 => -300.0 + 25.0 * (k - 5) as f64,
                    15..25 => 5.0,
                    _ => -60.0 * (k - 24) as f64,
                };
                at(east(k), north)
            })
            .collect(),
    );
    (vec![a, b, c], d)
}
