//! Spatial indexes: an ε-cell grid for fixed-radius neighbor pairs and a
//! latitude-sorted sweep for exact nearest-anchor queries.
//!
//! Both are accelerators only; their answers equal exhaustive search.

use crate::geo::{haversine_m, GeoPoint, Metric, EARTH_RADIUS_M, METERS_PER_DEGREE};

// Cells are widened by this factor so floating-point rounding can never drop
// a pair sitting right at the ε boundary.
const CELL_SLACK: f64 = 1.0 + 1e-9;

/// Uniform grid with cell side ε, stored as point indices sorted by cell.
/// Every pair closer than ε lies in the same or an adjacent cell, so
/// candidate search over the 3×3 block is exact.
pub struct EpsilonGrid {
    metric: Metric,
    epsilon: f64,
    cell_lat: f64,
    cell_lon: f64,
    // number of longitude columns when wrapping around the antimeridian;
    // zero means planar (no wrap)
    ncols: i64,
    // (cell, point index) ascending
    sorted: Vec<((i64, i64), u32)>,
}

impl EpsilonGrid {
    pub fn build(points: &[GeoPoint], metric: Metric, epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        let (cell_lat, cell_lon, ncols) = match metric {
            Metric::EuclideanDeg => (epsilon * CELL_SLACK, epsilon * CELL_SLACK, 0),
            Metric::Haversine => {
                let cell_lat = epsilon * CELL_SLACK / METERS_PER_DEGREE;
                let max_abs_lat = points.iter().map(|p| p.lat().abs()).fold(0.0, f64::max);
                // widen by one cell so the bound also covers neighbors
                let cos_min = (max_abs_lat + cell_lat).min(90.0).to_radians().cos();
                let s = (epsilon * CELL_SLACK / (2.0 * EARTH_RADIUS_M)).sin();
                let ncols = if cos_min <= 0.0 || s / cos_min >= 1.0 {
                    1
                } else {
                    let dlon_deg = (2.0 * (s / cos_min).asin()).to_degrees();
                    let n = (360.0 / dlon_deg).floor() as i64;
                    if n < 3 {
                        1
                    } else {
                        n
                    }
                };
                (cell_lat, 360.0 / ncols as f64, ncols)
            }
        };
        let mut grid =
            EpsilonGrid { metric, epsilon, cell_lat, cell_lon, ncols, sorted: Vec::with_capacity(points.len()) };
        grid.sorted = points.iter().enumerate().map(|(i, p)| (grid.key(p), i as u32)).collect();
        grid.sorted.sort_unstable();
        grid
    }

    fn key(&self, p: &GeoPoint) -> (i64, i64) {
        let row = (p.lat() / self.cell_lat).floor() as i64;
        let col = if self.ncols == 0 {
            (p.lon() / self.cell_lon).floor() as i64
        } else {
            (((p.lon() + 180.0) / self.cell_lon).floor() as i64).rem_euclid(self.ncols)
        };
        (row, col)
    }

    /// Distinct columns adjacent to `col`, inclusive; `n` of them are valid.
    fn neighbor_cols(&self, col: i64) -> ([i64; 3], usize) {
        match self.ncols {
            0 => ([col - 1, col, col + 1], 3),
            1 => ([0; 3], 1),
            n => {
                let mut c = [(col - 1).rem_euclid(n), col, (col + 1).rem_euclid(n)];
                c.sort_unstable();
                // n ≥ 3 keeps the three columns distinct
                (c, 3)
            }
        }
    }

    fn cell(&self, key: (i64, i64)) -> &[((i64, i64), u32)] {
        let lo = self.sorted.partition_point(|(k, _)| *k < key);
        let hi = lo + self.sorted[lo..].partition_point(|(k, _)| *k == key);
        &self.sorted[lo..hi]
    }

    /// Indices stored in the 3×3 cell block around `q`.
    pub fn candidates(&self, q: &GeoPoint, out: &mut Vec<u32>) {
        out.clear();
        let (row, col) = self.key(q);
        let (cols, n) = self.neighbor_cols(col);
        for r in row - 1..=row + 1 {
            for &c in &cols[..n] {
                out.extend(self.cell((r, c)).iter().map(|(_, i)| *i));
            }
        }
    }

    /// All index pairs `(i, j)`, `i < j`, with distance strictly below ε,
    /// sorted ascending. `points` must be the slice the grid was built from.
    pub fn pairs_within(&self, points: &[GeoPoint]) -> Vec<(u32, u32)> {
        let mut pairs = Vec::new();
        let mut cand = Vec::new();
        for (i, p) in points.iter().enumerate() {
            self.candidates(p, &mut cand);
            for &j in &cand {
                if (j as usize) > i && self.metric.distance(p, &points[j as usize]) < self.epsilon {
                    pairs.push((i as u32, j));
                }
            }
        }
        pairs.sort_unstable();
        pairs
    }
}

/// Exact nearest-neighbor search under haversine distance. Below
/// `EXHAUSTIVE_BELOW` points it scans linearly; above, it sweeps outward in
/// latitude and stops once the latitude gap alone exceeds the best distance.
pub struct NearestIndex {
    // (lat, original index, point) sorted by latitude then index
    sorted: Vec<(f64, usize, GeoPoint)>,
    points: Vec<GeoPoint>,
}

impl NearestIndex {
    pub const EXHAUSTIVE_BELOW: usize = 1000;

    pub fn new(points: Vec<GeoPoint>) -> Self {
        let sorted = if points.len() >= Self::EXHAUSTIVE_BELOW {
            let mut s: Vec<_> = points.iter().enumerate().map(|(i, p)| (p.lat(), i, *p)).collect();
            s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            s
        } else {
            Vec::new()
        };
        NearestIndex { sorted, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point; ties go to the smallest
    /// index.
    pub fn nearest(&self, q: &GeoPoint) -> Option<(usize, f64)> {
        let mut ties = Vec::new();
        let d = self.nearest_ties(q, &mut ties)?;
        Some((ties[0], d))
    }

    /// All indices at the minimal distance, ascending, written to `out`;
    /// returns that distance.
    pub fn nearest_ties(&self, q: &GeoPoint, out: &mut Vec<usize>) -> Option<f64> {
        out.clear();
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        let visit = |i: usize, p: &GeoPoint, best: &mut f64, out: &mut Vec<usize>| {
            let d = haversine_m(q, p);
            if d < *best {
                *best = d;
                out.clear();
                out.push(i);
            } else if d == *best {
                out.push(i);
            }
        };
        if self.sorted.is_empty() {
            for (i, p) in self.points.iter().enumerate() {
                visit(i, p, &mut best, out);
            }
        } else {
            let start = self.sorted.partition_point(|e| e.0 < q.lat());
            let lat_gap_m = |lat: f64| (lat - q.lat()).abs() * METERS_PER_DEGREE;
            for e in &self.sorted[start..] {
                if lat_gap_m(e.0) * (1.0 - 1e-12) > best {
                    break;
                }
                visit(e.1, &e.2, &mut best, out);
            }
            for e in self.sorted[..start].iter().rev() {
                if lat_gap_m(e.0) * (1.0 - 1e-12) > best {
                    break;
                }
                visit(e.1, &e.2, &mut best, out);
            }
            out.sort_unstable();
        }
        Some(best)
    }
}

pub fn nearest_exhaustive(points: &[GeoPoint], q: &GeoPoint) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = haversine_m(q, p);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}
