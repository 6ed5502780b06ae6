//! Tracks sampled on a shared regular time grid.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// Identifier of a track within one analysis (a daily sub-trajectory for a
/// TERG, a pseudo-sub-trajectory for a MARG).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u32);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Regular time grid: `origin + k * stride` for `k` in `0..len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub origin: i64,
    pub stride: i64,
    pub len: usize,
}

impl Grid {
    #[inline]
    pub fn time(&self, k: usize) -> i64 {
        self.origin + k as i64 * self.stride
    }

    /// Slot index of `t` if it lies exactly on the grid.
    pub fn index_of(&self, t: i64) -> Option<usize> {
        let off = t - self.origin;
        if off < 0 || off % self.stride != 0 {
            return None;
        }
        let k = (off / self.stride) as usize;
        (k < self.len).then_some(k)
    }
}

/// Positions on a grid; `None` marks an absent slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTrack {
    pub grid: Grid,
    pub slots: Vec<Option<GeoPoint>>,
}

impl GridTrack {
    pub fn new(grid: Grid, slots: Vec<Option<GeoPoint>>) -> Self {
        assert_eq!(grid.len, slots.len(), "slot count must match grid length");
        GridTrack { grid, slots }
    }

    /// Builds a track that is present on `start..start + positions.len()`.
    pub fn from_span(grid: Grid, start: usize, positions: &[GeoPoint]) -> Self {
        let mut slots = vec![None; grid.len];
        for (i, p) in positions.iter().enumerate() {
            slots[start + i] = Some(*p);
        }
        GridTrack { grid, slots }
    }

    #[inline]
    pub fn at(&self, k: usize) -> Option<GeoPoint> {
        self.slots.get(k).copied().flatten()
    }

    pub fn iter_present(&self) -> impl Iterator<Item = (usize, GeoPoint)> + '_ {
        self.slots.iter().enumerate().filter_map(|(k, s)| s.map(|p| (k, p)))
    }

    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// First and last present slot.
    pub fn span(&self) -> Option<(usize, usize)> {
        let first = self.slots.iter().position(Option::is_some)?;
        let last = self.slots.iter().rposition(Option::is_some)?;
        Some((first, last))
    }
}

/// A track stored only from its first present slot onwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanTrack {
    pub start: usize,
    pub slots: Vec<Option<GeoPoint>>,
}

impl SpanTrack {
    /// Trims leading and trailing absent slots; `None` for an empty track.
    pub fn from_grid_track(t: &GridTrack) -> Option<Self> {
        let (a, b) = t.span()?;
        Some(SpanTrack { start: a, slots: t.slots[a..=b].to_vec() })
    }

    /// Exclusive end slot.
    pub fn end(&self) -> usize {
        self.start + self.slots.len()
    }

    #[inline]
    pub fn at(&self, k: usize) -> Option<GeoPoint> {
        k.checked_sub(self.start).and_then(|i| self.slots.get(i).copied().flatten())
    }

    pub fn to_grid_track(&self, grid: Grid) -> GridTrack {
        let mut slots = vec![None; grid.len];
        slots[self.start..self.end()].copy_from_slice(&self.slots);
        GridTrack { grid, slots }
    }

    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Verifies that every track lives on `grid`.
pub fn check_common_grid<'a>(grid: &Grid, tracks: impl IntoIterator<Item = &'a GridTrack>) -> Result<()> {
    for t in tracks {
        if t.grid != *grid || t.slots.len() != grid.len {
            return Err(Error::GridMismatch);
        }
    }
    Ok(())
}
