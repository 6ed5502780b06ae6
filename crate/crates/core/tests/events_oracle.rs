mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{brute_edges, brute_timeline, random_cloud, random_instance, rng};
use proptest::prelude::*;
use rand::Rng;
use trajreeb::events::{
    bundle_timeline, bundle_timeline_spans, connected_components, snapshot_graph, EpsilonConfig, EventKind,
};
use trajreeb::geo::{GeoPoint, Metric};
use trajreeb::track::{SpanTrack, TrackId};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sweep_matches_brute_force(seed in any::<u64>()) {
        let (tracks, cfg) = random_instance(&mut rng(seed), 12, 200);
        let got = bundle_timeline(&tracks, &cfg).unwrap();
        let want = brute_timeline(&tracks, &cfg);
        prop_assert_eq!(&got.bundles, &want.bundles);
        prop_assert_eq!(&got.events, &want.events);
    }

    #[test]
    fn span_storage_gives_the_same_timeline(seed in any::<u64>()) {
        let (tracks, cfg) = random_instance(&mut rng(seed), 12, 200);
        let grid = tracks[0].grid;
        let spans: Vec<SpanTrack> = tracks
            .iter()
            .map(|t| SpanTrack::from_grid_track(t).unwrap_or(SpanTrack { start: 0, slots: Vec::new() }))
            .collect();
        prop_assert_eq!(bundle_timeline_spans(grid, &spans, &cfg).unwrap(), bundle_timeline(&tracks, &cfg).unwrap());
    }

    #[test]
    fn pair_events_alternate_and_bundles_are_disjoint_per_slot(seed in any::<u64>()) {
        let (tracks, cfg) = random_instance(&mut rng(seed), 12, 200);
        let tl = bundle_timeline(&tracks, &cfg).unwrap();
        let mut per_pair: BTreeMap<Vec<TrackId>, Vec<EventKind>> = BTreeMap::new();
        for e in tl.events.iter().filter(|e| e.participants.len() == 2) {
            per_pair.entry(e.participants.clone()).or_default().push(e.kind);
        }
        for kinds in per_pair.values() {
            for (i, k) in kinds.iter().enumerate() {
                let want = if i % 2 == 0 { EventKind::Connect } else { EventKind::Disconnect };
                prop_assert_eq!(*k, want);
            }
        }
        // every present track sits in exactly one bundle at every slot
        let grid = tracks[0].grid;
        for k in 0..grid.len {
            let t = grid.time(k);
            let mut seen = BTreeSet::new();
            for b in tl.bundles.iter().filter(|b| b.start <= t && t <= b.end) {
                for m in &b.members {
                    prop_assert!(seen.insert(*m));
                }
            }
            let present: BTreeSet<TrackId> =
                (0..tracks.len()).filter(|i| tracks[*i].at(k).is_some()).map(|i| TrackId(i as u32)).collect();
            prop_assert_eq!(seen, present);
        }
    }

    #[test]
    fn snapshot_edges_match_exhaustive_pairs(seed in any::<u64>(), n in 0usize..300, lat in -80.0f64..80.0) {
        let mut r = rng(seed);
        let center = GeoPoint::new(lat, r.random_range(-180.0..180.0)).unwrap();
        let cloud = random_cloud(&mut r, n, center, 600.0);
        let cfg = EpsilonConfig::default();
        let g = snapshot_graph(0, &cloud, &cfg);
        let got: BTreeSet<_> = g.edges.iter().copied().collect();
        prop_assert_eq!(got.len(), g.edges.len());
        prop_assert_eq!(got, brute_edges(&cloud, &cfg));
        let members: usize = connected_components(&g).iter().map(Vec::len).sum();
        prop_assert_eq!(members, n);
    }
}

#[test]
fn snapshot_edges_across_the_antimeridian_and_near_a_pole() {
    let cfg = EpsilonConfig::default();
    for (i, center) in
        [GeoPoint::new(10.0, 179.9999).unwrap(), GeoPoint::new(89.9995, 0.0).unwrap()].into_iter().enumerate()
    {
        let cloud = random_cloud(&mut rng(i as u64), 400, center, 300.0);
        let g = snapshot_graph(5, &cloud, &cfg);
        assert_eq!(g.edges.iter().copied().collect::<BTreeSet<_>>(), brute_edges(&cloud, &cfg));
    }
}

#[test]
fn planar_metric_edges_match_exhaustive_pairs() {
    let cfg = EpsilonConfig::new(0.0005, Metric::EuclideanDeg).unwrap();
    let cloud = random_cloud(&mut rng(9), 800, GeoPoint::new(1.0, 2.0).unwrap(), 1000.0);
    let g = snapshot_graph(0, &cloud, &cfg);
    assert_eq!(g.edges.iter().copied().collect::<BTreeSet<_>>(), brute_edges(&cloud, &cfg));
}
