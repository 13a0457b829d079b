//! Online sparsity detection: unordered micro-tile indexes.
//!
//! Micro-tiles sit on a fixed grid anchored at the origin. The index groups
//! non-zero micro-tiles by their position across the PIT axis (one group per
//! dense-tile slot) and records, per group, the micro-tile coordinates along
//! the PIT axis. Parallel construction reserves slots with a fetch-and-add on
//! a per-group counter, so the coordinate order within a group depends on
//! scheduling and is deliberately unspecified.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PitError, Result};
use crate::exec::{DenseTensor, Element};
use crate::sparsity::SparsityAnnotation;

/// The axis a gather order runs along, named by its expression symbol and
/// located by its dimension in the sparse operand.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PitAxis {
    pub symbol: String,
    pub dim: usize,
}

impl PitAxis {
    pub fn new(symbol: impl Into<String>, dim: usize) -> Self {
        PitAxis {
            symbol: symbol.into(),
            dim,
        }
    }

    /// Axis along the rows (dimension 0).
    pub fn rows(symbol: impl Into<String>) -> Self {
        Self::new(symbol, 0)
    }

    /// Axis along the columns (dimension 1).
    pub fn cols(symbol: impl Into<String>) -> Self {
        Self::new(symbol, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroTileIndex {
    micro_tile: [usize; 2],
    pit_axis: PitAxis,
    tensor_shape: [usize; 2],
    /// Worst-case group size: micro-tile grid extent along the PIT axis.
    capacity: usize,
    counts: Vec<usize>,
    slots: Vec<u32>,
}

fn micro_grid(shape: [usize; 2], micro_tile: [usize; 2]) -> [usize; 2] {
    [
        shape[0].div_ceil(micro_tile[0]),
        shape[1].div_ceil(micro_tile[1]),
    ]
}

fn check_args(micro_tile: &[usize], pit_axis: &PitAxis, workers: usize) -> Result<[usize; 2]> {
    let mt: [usize; 2] = micro_tile.try_into().map_err(|_| {
        PitError::Shape(format!(
            "micro-tile rank {} on a 2-D operand",
            micro_tile.len()
        ))
    })?;
    if mt.contains(&0) {
        return Err(PitError::InvalidArgument("micro-tile edge of 0".into()));
    }
    if pit_axis.dim > 1 {
        return Err(PitError::InvalidArgument(format!(
            "PIT axis `{}` has dimension {} on a 2-D operand",
            pit_axis.symbol, pit_axis.dim
        )));
    }
    if workers == 0 {
        return Err(PitError::InvalidArgument(
            "worker count must be at least 1".into(),
        ));
    }
    Ok(mt)
}

impl MicroTileIndex {
    /// Generic parallel scan. `nonzero(row_tile, col_tile)` decides whether a
    /// micro-tile holds data.
    fn build<F>(
        shape: [usize; 2],
        micro_tile: [usize; 2],
        pit_axis: PitAxis,
        workers: usize,
        nonzero: F,
    ) -> Self
    where
        F: Fn(usize, usize) -> bool + Sync,
    {
        let grid = micro_grid(shape, micro_tile);
        let capacity = grid[pit_axis.dim];
        let num_groups = grid[1 - pit_axis.dim];
        let counters: Vec<AtomicUsize> = (0..num_groups).map(|_| AtomicUsize::new(0)).collect();
        let slots: Vec<AtomicU32> = (0..num_groups * capacity)
            .map(|_| AtomicU32::new(0))
            .collect();
        let pit_dim = pit_axis.dim;

        // Each worker owns a disjoint range of PIT coordinates across all
        // groups, so several workers append to the same group concurrently.
        let scan = |coords: std::ops::Range<usize>| {
            for g in 0..num_groups {
                for c in coords.clone() {
                    let (r, col) = if pit_dim == 0 { (c, g) } else { (g, c) };
                    if nonzero(r, col) {
                        let slot = counters[g].fetch_add(1, Ordering::Relaxed);
                        slots[g * capacity + slot].store(c as u32, Ordering::Relaxed);
                    }
                }
            }
        };
        let workers = workers.min(capacity.max(1));
        if workers <= 1 {
            scan(0..capacity);
        } else {
            let chunk = capacity.div_ceil(workers);
            std::thread::scope(|s| {
                for w in 0..workers {
                    let lo = (w * chunk).min(capacity);
                    let hi = ((w + 1) * chunk).min(capacity);
                    let scan = &scan;
                    s.spawn(move || scan(lo..hi));
                }
            });
        }

        MicroTileIndex {
            micro_tile,
            pit_axis,
            tensor_shape: shape,
            capacity,
            counts: counters.into_iter().map(AtomicUsize::into_inner).collect(),
            slots: slots.into_iter().map(AtomicU32::into_inner).collect(),
        }
    }

    /// Indexes the micro-tiles of `ann` that overlap at least one non-zero block.
    pub fn from_annotation(
        ann: &SparsityAnnotation,
        micro_tile: &[usize],
        pit_axis: PitAxis,
        workers: usize,
    ) -> Result<Self> {
        let mt = check_args(micro_tile, &pit_axis, workers)?;
        Ok(Self::build(ann.shape(), mt, pit_axis, workers, |r, c| {
            ann.any_in_region(r * mt[0]..(r + 1) * mt[0], c * mt[1]..(c + 1) * mt[1])
        }))
    }

    /// Indexes the micro-tiles of a dense tensor holding any value `!= 0`.
    pub fn from_tensor<T: Element>(
        values: &DenseTensor<T>,
        micro_tile: &[usize],
        pit_axis: PitAxis,
        workers: usize,
    ) -> Result<Self> {
        let mt = check_args(micro_tile, &pit_axis, workers)?;
        let shape = values.shape2()?;
        Ok(Self::build(shape, mt, pit_axis, workers, |r, c| {
            let rows = r * mt[0]..((r + 1) * mt[0]).min(shape[0]);
            let cols = c * mt[1]..((c + 1) * mt[1]).min(shape[1]);
            rows.into_iter()
                .any(|i| cols.clone().any(|j| values.get2(i, j) != T::zero()))
        }))
    }

    /// Assembles an index from explicit groups. Coordinates are validated
    /// against the grid and checked for duplicates.
    pub fn from_groups(
        tensor_shape: [usize; 2],
        micro_tile: [usize; 2],
        pit_axis: PitAxis,
        groups: &[Vec<u32>],
    ) -> Result<Self> {
        check_args(&micro_tile, &pit_axis, 1)?;
        let grid = micro_grid(tensor_shape, micro_tile);
        let capacity = grid[pit_axis.dim];
        let num_groups = grid[1 - pit_axis.dim];
        if groups.len() != num_groups {
            return Err(PitError::Shape(format!(
                "{} groups given, grid has {num_groups}",
                groups.len()
            )));
        }
        let mut slots = vec![0u32; num_groups * capacity];
        let mut counts = Vec::with_capacity(num_groups);
        for (g, coords) in groups.iter().enumerate() {
            let mut seen = vec![false; capacity];
            for (i, &c) in coords.iter().enumerate() {
                let c_us = c as usize;
                if c_us >= capacity {
                    return Err(PitError::InvalidArgument(format!(
                        "coordinate {c} out of range in group {g}"
                    )));
                }
                if std::mem::replace(&mut seen[c_us], true) {
                    return Err(PitError::InvalidArgument(format!(
                        "duplicate coordinate {c} in group {g}"
                    )));
                }
                slots[g * capacity + i] = c;
            }
            counts.push(coords.len());
        }
        Ok(MicroTileIndex {
            micro_tile,
            pit_axis,
            tensor_shape,
            capacity,
            counts,
            slots,
        })
    }

    pub fn micro_tile(&self) -> [usize; 2] {
        self.micro_tile
    }

    pub fn pit_axis(&self) -> &PitAxis {
        &self.pit_axis
    }

    pub fn tensor_shape(&self) -> [usize; 2] {
        self.tensor_shape
    }

    pub fn num_groups(&self) -> usize {
        self.counts.len()
    }

    /// Maximum number of coordinates a group can hold.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Coordinates of group `g` in storage order.
    pub fn group(&self, g: usize) -> &[u32] {
        let start = g * self.capacity;
        &self.slots[start..start + self.counts[g]]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.num_groups()).map(|g| self.group(g))
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Element range covered by micro-tile `coord` of group `g`, as
    /// `(row range, column range)` clipped to the tensor.
    pub fn tile_region(
        &self,
        g: usize,
        coord: u32,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (r, c) = if self.pit_axis.dim == 0 {
            (coord as usize, g)
        } else {
            (g, coord as usize)
        };
        let [h, w] = self.micro_tile;
        (
            r * h..((r + 1) * h).min(self.tensor_shape[0]),
            c * w..((c + 1) * w).min(self.tensor_shape[1]),
        )
    }

    /// Sorts every group ascending.
    pub fn canonicalize(mut self) -> Self {
        for g in 0..self.num_groups() {
            let start = g * self.capacity;
            self.slots[start..start + self.counts[g]].sort_unstable();
        }
        self
    }

    /// Randomly reorders the coordinates within every group.
    pub fn shuffle(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in 0..self.num_groups() {
            let start = g * self.capacity;
            self.slots[start..start + self.counts[g]].shuffle(&mut rng);
        }
    }

    /// Text dump in canonical order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "microtile {} {}", self.micro_tile[0], self.micro_tile[1]);
        let _ = writeln!(s, "pit_axis {}", self.pit_axis.symbol);
        for g in 0..self.num_groups() {
            let mut coords = self.group(g).to_vec();
            coords.sort_unstable();
            let _ = write!(s, "group {g} {}:", coords.len());
            for c in coords {
                let _ = write!(s, " {c}");
            }
            s.push('\n');
        }
        s
    }
}
