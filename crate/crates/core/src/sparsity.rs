//! Dynamic sparsity annotations: a block granularity plus a bit-packed
//! attribute matrix over the block grid.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PitError, Result};

/// Element types accepted by [`SparsityAnnotation::from_mask`].
pub trait MaskValue: Copy {
    fn is_nonzero(self) -> bool;
}

impl MaskValue for bool {
    fn is_nonzero(self) -> bool {
        self
    }
}

impl MaskValue for u8 {
    fn is_nonzero(self) -> bool {
        self != 0
    }
}

impl MaskValue for f32 {
    fn is_nonzero(self) -> bool {
        self != 0.0
    }
}

impl MaskValue for f64 {
    fn is_nonzero(self) -> bool {
        self != 0.0
    }
}

/// Row-major bit matrix over the block grid of a 2-D tensor.
///
/// Bit `(r, c)` is set iff block `[r*g0, (r+1)*g0) x [c*g1, (c+1)*g1)` holds at
/// least one non-zero element. When a granularity does not divide the tensor
/// extent the trailing blocks are virtually zero padded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparsityAnnotation {
    shape: [usize; 2],
    granularity: [usize; 2],
    grid: [usize; 2],
    words: Vec<u64>,
}

fn check_rank(shape: &[usize], granularity: &[usize]) -> Result<([usize; 2], [usize; 2])> {
    if shape.len() != granularity.len() {
        return Err(PitError::Shape(format!(
            "granularity rank {} does not match tensor rank {}",
            granularity.len(),
            shape.len()
        )));
    }
    if shape.len() != 2 {
        return Err(PitError::Shape(format!(
            "annotations are 2-D, got rank {}",
            shape.len()
        )));
    }
    if granularity.contains(&0) {
        return Err(PitError::InvalidArgument("granularity edge of 0".into()));
    }
    if shape.contains(&0) {
        return Err(PitError::Shape("tensor extent of 0".into()));
    }
    Ok(([shape[0], shape[1]], [granularity[0], granularity[1]]))
}

impl SparsityAnnotation {
    /// All-zero annotation.
    pub fn zeros(shape: &[usize], granularity: &[usize]) -> Result<Self> {
        let (shape, granularity) = check_rank(shape, granularity)?;
        let grid = [
            shape[0].div_ceil(granularity[0]),
            shape[1].div_ceil(granularity[1]),
        ];
        Ok(SparsityAnnotation {
            shape,
            granularity,
            grid,
            words: vec![0; (grid[0] * grid[1]).div_ceil(64)],
        })
    }

    /// Fully dense annotation.
    pub fn ones(shape: &[usize], granularity: &[usize]) -> Result<Self> {
        let mut ann = Self::zeros(shape, granularity)?;
        for r in 0..ann.grid[0] {
            for c in 0..ann.grid[1] {
                ann.set(r, c, true);
            }
        }
        Ok(ann)
    }

    /// Builds an annotation from a row-major dense mask.
    pub fn from_mask<M: MaskValue>(
        mask: &[M],
        shape: &[usize],
        granularity: &[usize],
    ) -> Result<Self> {
        let mut ann = Self::zeros(shape, granularity)?;
        let [rows, cols] = ann.shape;
        if mask.len() != rows * cols {
            return Err(PitError::Shape(format!(
                "mask has {} elements, shape {rows}x{cols} needs {}",
                mask.len(),
                rows * cols
            )));
        }
        let [g0, g1] = ann.granularity;
        for (r, row) in mask.chunks_exact(cols).enumerate() {
            for (c, v) in row.iter().enumerate() {
                if v.is_nonzero() {
                    ann.set(r / g0, c / g1, true);
                }
            }
        }
        Ok(ann)
    }

    /// Padding sparsity of a ragged batch: row `b` is non-zero on columns
    /// `< lengths[b]`. Granularity is `(1, 1)`.
    pub fn from_ragged_lengths(lengths: &[usize], padded_shape: [usize; 2]) -> Result<Self> {
        let [batch, max_len] = padded_shape;
        if lengths.len() != batch {
            return Err(PitError::Shape(format!(
                "{} lengths for a batch of {batch}",
                lengths.len()
            )));
        }
        let mut ann = Self::zeros(&padded_shape, &[1, 1])?;
        for (b, &len) in lengths.iter().enumerate() {
            if len > max_len {
                return Err(PitError::InvalidArgument(format!(
                    "length {len} at row {b} exceeds padded length {max_len}"
                )));
            }
            for c in 0..len {
                ann.set(b, c, true);
            }
        }
        Ok(ann)
    }

    /// Every block is independently zero with probability `zero_ratio`.
    pub fn random(
        shape: &[usize],
        granularity: &[usize],
        zero_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&zero_ratio) {
            return Err(PitError::InvalidArgument(format!(
                "zero ratio {zero_ratio} outside [0, 1]"
            )));
        }
        let mut ann = Self::zeros(shape, granularity)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in 0..ann.grid[0] {
            for c in 0..ann.grid[1] {
                if rng.random::<f64>() >= zero_ratio {
                    ann.set(r, c, true);
                }
            }
        }
        Ok(ann)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn granularity(&self) -> [usize; 2] {
        self.granularity
    }

    /// Extent of the block grid, `ceil(shape / granularity)` per axis.
    pub fn grid(&self) -> [usize; 2] {
        self.grid
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.grid[0] && c < self.grid[1]);
        let i = r * self.grid[1] + c;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        assert!(
            r < self.grid[0] && c < self.grid[1],
            "block ({r}, {c}) outside grid"
        );
        let i = r * self.grid[1] + c;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// True if element `(r, c)` lies in a non-zero block.
    pub fn element_nonzero(&self, r: usize, c: usize) -> bool {
        self.get(r / self.granularity[0], c / self.granularity[1])
    }

    /// True if any block overlapping the element range `rows x cols` is set.
    /// The ranges are clipped to the tensor.
    pub fn any_in_region(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> bool {
        let r1 = rows.end.min(self.shape[0]);
        let c1 = cols.end.min(self.shape[1]);
        if rows.start >= r1 || cols.start >= c1 {
            return false;
        }
        let [g0, g1] = self.granularity;
        let (br0, br1) = (rows.start / g0, (r1 - 1) / g0);
        let (bc0, bc1) = (cols.start / g1, (c1 - 1) / g1);
        (br0..=br1).any(|br| (bc0..=bc1).any(|bc| self.get(br, bc)))
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn num_blocks(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    /// Fraction of zero blocks.
    pub fn sparsity_ratio(&self) -> f64 {
        1.0 - self.count_ones() as f64 / self.num_blocks() as f64
    }

    /// Expands the annotation back to an element mask of block-constant values.
    pub fn materialize(&self) -> Vec<bool> {
        let [rows, cols] = self.shape;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.element_nonzero(r, c));
            }
        }
        out
    }

    /// Re-annotates at granularity `(f0 * g0, f1 * g1)`.
    pub fn coarsen(&self, factor: [usize; 2]) -> Result<Self> {
        if factor.contains(&0) {
            return Err(PitError::InvalidArgument("coarsening factor of 0".into()));
        }
        let mut out = Self::zeros(
            &self.shape,
            &[
                self.granularity[0] * factor[0],
                self.granularity[1] * factor[1],
            ],
        )?;
        for r in 0..self.grid[0] {
            for c in 0..self.grid[1] {
                if self.get(r, c) {
                    out.set(r / factor[0], c / factor[1], true);
                }
            }
        }
        Ok(out)
    }

    /// Line-oriented text form: `shape d0 d1`, `granularity g0 g1`, then one
    /// `0`/`1` line per block row.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.num_blocks() + self.grid[0] + 64);
        let _ = writeln!(s, "shape {} {}", self.shape[0], self.shape[1]);
        let _ = writeln!(
            s,
            "granularity {} {}",
            self.granularity[0], self.granularity[1]
        );
        for r in 0..self.grid[0] {
            for c in 0..self.grid[1] {
                s.push(if self.get(r, c) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header = |key: &str| -> Result<[usize; 2]> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| PitError::parse(0, format!("missing `{key}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(PitError::parse(no, format!("expected `{key} <a> <b>`")));
            }
            let nums: Vec<usize> = parts
                .map(|p| {
                    p.parse()
                        .map_err(|_| PitError::parse(no, format!("bad integer `{p}`")))
                })
                .collect::<Result<_>>()?;
            match nums[..] {
                [a, b] => Ok([a, b]),
                _ => Err(PitError::parse(no, format!("`{key}` takes two integers"))),
            }
        };
        let shape = header("shape")?;
        let granularity = header("granularity")?;
        let mut ann =
            Self::zeros(&shape, &granularity).map_err(|e| PitError::parse(2, e.to_string()))?;
        let [gr, gc] = ann.grid;
        let mut row = 0;
        for (no, line) in lines {
            if row == gr {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(PitError::parse(no, "more block rows than the grid holds"));
            }
            let line = line.trim_end_matches('\r');
            if line.len() != gc {
                return Err(PitError::parse(
                    no,
                    format!("expected {gc} bits, found {}", line.len()),
                ));
            }
            for (c, ch) in line.bytes().enumerate() {
                match ch {
                    b'0' => {}
                    b'1' => ann.set(row, c, true),
                    _ => return Err(PitError::parse(no, format!("invalid bit `{}`", ch as char))),
                }
            }
            row += 1;
        }
        if row != gr {
            return Err(PitError::parse(
                row + 3,
                format!("expected {gr} block rows, found {row}"),
            ));
        }
        Ok(ann)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
