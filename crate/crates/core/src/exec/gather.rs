//! SRead / SWrite: move sparsely located micro-tiles into a contiguous tile
//! buffer and back.
//!
//! Slot `s` of a tile buffer holds the micro-tile named by the `s`-th
//! coordinate of a group chunk. Micro-tiles are stacked along the PIT axis,
//! so a buffer for micro-tile `[h, w]` and `S` slots is a row-major
//! `[S*h, w]` matrix when the PIT axis is dimension 0 and `[h, S*w]` when it
//! is dimension 1. The source tensor is read in place; no reformatted copy of
//! it is ever materialized.

use super::tensor::{DenseTensor, Element};
use crate::error::{PitError, Result};
use crate::index::MicroTileIndex;

#[derive(Debug, Clone, PartialEq)]
pub struct TileBuffer<T> {
    slots: usize,
    micro_tile: [usize; 2],
    pit_dim: usize,
    data: Vec<T>,
}

impl<T: Element> TileBuffer<T> {
    pub fn new(slots: usize, micro_tile: [usize; 2], pit_dim: usize) -> Self {
        TileBuffer {
            slots,
            micro_tile,
            pit_dim,
            data: vec![T::zero(); slots * micro_tile[0] * micro_tile[1]],
        }
    }

    /// Buffer sized for `idx`'s micro-tiles.
    pub fn for_index(idx: &MicroTileIndex, slots: usize) -> Self {
        Self::new(slots, idx.micro_tile(), idx.pit_axis().dim)
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// `[rows, cols]` of the row-major buffer.
    pub fn shape(&self) -> [usize; 2] {
        let [h, w] = self.micro_tile;
        if self.pit_dim == 0 {
            [self.slots * h, w]
        } else {
            [h, self.slots * w]
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn ld(&self) -> usize {
        self.shape()[1]
    }
}

/// Geometry of one gather/scatter: which micro-tiles of a 2-D tensor map to
/// which slots of a row-major buffer with leading dimension `ld`.
#[derive(Clone, Copy)]
pub(crate) struct TileMap {
    pub shape: [usize; 2],
    pub pit_dim: usize,
    pub micro_tile: [usize; 2],
    pub group: usize,
    pub ld: usize,
}

impl TileMap {
    /// Yields `(src_row, src_col, buf_offset, rows, cols)` for each
    /// coordinate, with the micro-tile clipped to the tensor.
    #[inline]
    fn regions<'a>(
        &'a self,
        coords: &'a [u32],
    ) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> + 'a {
        let [h, w] = self.micro_tile;
        coords.iter().enumerate().map(move |(s, &c)| {
            let c = c as usize;
            let (r0, c0, br, bc) = if self.pit_dim == 0 {
                (c * h, self.group * w, s * h, 0)
            } else {
                (self.group * h, c * w, 0, s * w)
            };
            let hh = h.min(self.shape[0].saturating_sub(r0));
            let ww = w.min(self.shape[1].saturating_sub(c0));
            (r0, c0, br * self.ld + bc, hh, ww)
        })
    }

    /// Copies micro-tiles from `src` (strides `rs`, `cs`) into `buf`. Slots not
    /// named by `coords` are left untouched.
    #[inline]
    pub fn gather<T: Element>(
        &self,
        src: &[T],
        rs: usize,
        cs: usize,
        coords: &[u32],
        buf: &mut [T],
    ) {
        for (r0, c0, b0, hh, ww) in self.regions(coords) {
            for i in 0..hh {
                let dst = &mut buf[b0 + i * self.ld..][..ww];
                let base = (r0 + i) * rs + c0 * cs;
                if cs == 1 {
                    dst.copy_from_slice(&src[base..base + ww]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = src[base + j * cs];
                    }
                }
            }
        }
    }

    /// Writes (or adds) buffer slots back to their micro-tile locations.
    #[inline]
    pub fn scatter<T: Element>(
        &self,
        buf: &[T],
        coords: &[u32],
        dst: &mut [T],
        rs: usize,
        cs: usize,
        accumulate: bool,
    ) {
        for (r0, c0, b0, hh, ww) in self.regions(coords) {
            for i in 0..hh {
                let srow = &buf[b0 + i * self.ld..][..ww];
                let base = (r0 + i) * rs + c0 * cs;
                if cs == 1 {
                    let drow = &mut dst[base..base + ww];
                    if accumulate {
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        drow.copy_from_slice(srow);
                    }
                } else {
                    for (j, &s) in srow.iter().enumerate() {
                        let d = &mut dst[base + j * cs];
                        if accumulate {
                            *d += s;
                        } else {
                            *d = s;
                        }
                    }
                }
            }
        }
    }
}

fn chunk_coords(idx: &MicroTileIndex, group: usize, chunk: usize, slots: usize) -> Result<&[u32]> {
    if group >= idx.num_groups() {
        return Err(PitError::InvalidArgument(format!(
            "group {group} out of range ({} groups)",
            idx.num_groups()
        )));
    }
    let coords = idx.group(group);
    let start = (chunk * slots).min(coords.len());
    let end = (start + slots).min(coords.len());
    Ok(&coords[start..end])
}

fn check_compat<T: Element>(
    t: &DenseTensor<T>,
    idx: &MicroTileIndex,
    tile: &TileBuffer<T>,
) -> Result<TileMap> {
    let shape = t.shape2()?;
    if shape != idx.tensor_shape() {
        return Err(PitError::Shape(format!(
            "tensor {:?} does not match index over {:?}",
            shape,
            idx.tensor_shape()
        )));
    }
    if tile.micro_tile != idx.micro_tile() || tile.pit_dim != idx.pit_axis().dim {
        return Err(PitError::Shape(
            "tile buffer does not match the index micro-tile".into(),
        ));
    }
    Ok(TileMap {
        shape,
        pit_dim: tile.pit_dim,
        micro_tile: tile.micro_tile,
        group: 0,
        ld: tile.ld(),
    })
}

/// Gathers chunk `chunk` (slots `chunk*S .. chunk*S+S` of the group, in
/// storage order) of `group` into `tile`. Unfilled slots are zeroed. Returns
/// the number of filled slots.
pub fn sread<T: Element>(
    src: &DenseTensor<T>,
    idx: &MicroTileIndex,
    group: usize,
    chunk: usize,
    tile: &mut TileBuffer<T>,
) -> Result<usize> {
    let mut map = check_compat(src, idx, tile)?;
    map.group = group;
    let coords = chunk_coords(idx, group, chunk, tile.slots)?;
    let (rs, cs) = src.strides2();
    tile.data.fill(T::zero());
    map.gather(src.data(), rs, cs, coords, &mut tile.data);
    Ok(coords.len())
}

/// Writes the filled slots of `tile` to their micro-tile locations in `dst`,
/// overwriting. Padded slots are not written.
pub fn swrite<T: Element>(
    tile: &TileBuffer<T>,
    dst: &mut DenseTensor<T>,
    idx: &MicroTileIndex,
    group: usize,
    chunk: usize,
) -> Result<usize> {
    swrite_impl(tile, dst, idx, group, chunk, false)
}

/// Like [`swrite`] but adds into `dst`.
pub fn swrite_accumulate<T: Element>(
    tile: &TileBuffer<T>,
    dst: &mut DenseTensor<T>,
    idx: &MicroTileIndex,
    group: usize,
    chunk: usize,
) -> Result<usize> {
    swrite_impl(tile, dst, idx, group, chunk, true)
}

fn swrite_impl<T: Element>(
    tile: &TileBuffer<T>,
    dst: &mut DenseTensor<T>,
    idx: &MicroTileIndex,
    group: usize,
    chunk: usize,
    accumulate: bool,
) -> Result<usize> {
    let mut map = check_compat(dst, idx, tile)?;
    map.group = group;
    let coords = chunk_coords(idx, group, chunk, tile.slots)?;
    let (rs, cs) = dst.strides2();
    map.scatter(&tile.data, coords, dst.data_mut(), rs, cs, accumulate);
    Ok(coords.len())
}
