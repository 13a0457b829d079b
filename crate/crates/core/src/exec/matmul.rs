//! Matmul execution: gather micro-tiles, run fixed-shape dense tiles, scatter.

use std::ops::Range;
use std::thread;

use super::gather::TileMap;
use super::tensor::{DenseTensor, Element, Layout};
use crate::error::{PitError, Result};
use crate::index::MicroTileIndex;
use crate::policy::{PlanKind, SparseKernelPlan};
use crate::sparsity::SparsityAnnotation;
use crate::tiles::{matmul_kernel, OpKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// Dense tile kernel invocations.
    pub launches: u64,
}

/// Splits `0..n` into at most `parts` contiguous, non-empty ranges.
pub(crate) fn split(n: usize, parts: usize) -> Vec<Range<usize>> {
    let per = n.div_ceil(parts.max(1)).max(1);
    (0..n).step_by(per).map(|s| s..(s + per).min(n)).collect()
}

/// Copies the `[rows, cols]` block at `(r0, c0)` of a strided source into a
/// row-major buffer with leading dimension `ld`.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn pack_block<T: Element>(
    src: &[T],
    rs: usize,
    cs: usize,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
    buf: &mut [T],
    ld: usize,
) {
    for i in 0..rows {
        let dst = &mut buf[i * ld..i * ld + cols];
        let base = (r0 + i) * rs + c0 * cs;
        if cs == 1 {
            dst.copy_from_slice(&src[base..base + cols]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[base + j * cs];
            }
        }
    }
}

pub(crate) fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(PitError::InvalidArgument(
            "worker count must be at least 1".into(),
        ));
    }
    Ok(())
}

fn check_operands<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
) -> Result<[usize; 3]> {
    if plan.op != OpKind::MatMul {
        return Err(PitError::IncompatiblePlan(format!(
            "{} plan passed to matmul",
            plan.op
        )));
    }
    let [m, k] = a.shape2()?;
    let [k2, n] = b.shape2()?;
    if k != k2 {
        return Err(PitError::Shape(format!("A is {m}x{k} but B is {k2}x{n}")));
    }
    if plan.dims != [m, k, n] {
        return Err(PitError::IncompatiblePlan(format!(
            "plan built for {:?}, operands are m={m} k={k} n={n}",
            plan.dims
        )));
    }
    if a.layout() != plan.sparse_layout {
        return Err(PitError::Layout(format!(
            "plan needs A {}, got {}; convert it with `to_layout` first",
            plan.sparse_layout,
            a.layout()
        )));
    }
    if b.layout() != Layout::RowMajor {
        return Err(PitError::Layout("B must be row-major".into()));
    }
    Ok([m, k, n])
}

/// Executes `plan` on `A[m,k] * B[k,n]`, building the micro-tile index of
/// `A` from its annotation.
pub fn run_sparse_matmul<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    ann: &SparsityAnnotation,
    workers: usize,
) -> Result<(DenseTensor<T>, ExecStats)> {
    check_workers(workers)?;
    let [m, k, _] = check_operands(plan, a, b)?;
    if ann.shape() != [m, k] {
        return Err(PitError::IncompatiblePlan(format!(
            "annotation over {:?} does not describe a {m}x{k} operand",
            ann.shape()
        )));
    }
    match &plan.kind {
        PlanKind::Dense => Ok(dense_path(plan.tile.shape_array(), a, b, workers)),
        PlanKind::Pit(axis) => {
            let idx =
                MicroTileIndex::from_annotation(ann, &plan.micro_tile, axis.clone(), workers)?;
            run_indexed(plan, a, b, &idx, workers)
        }
    }
}

/// Like [`run_sparse_matmul`] with a prebuilt index. Groups are consumed in
/// their stored order.
pub fn run_sparse_matmul_indexed<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    idx: &MicroTileIndex,
    workers: usize,
) -> Result<(DenseTensor<T>, ExecStats)> {
    check_workers(workers)?;
    let [m, k, _] = check_operands(plan, a, b)?;
    let axis = plan
        .pit_axis()
        .ok_or_else(|| PitError::IncompatiblePlan("dense plans take no index".into()))?;
    if idx.micro_tile() != plan.micro_tile || idx.pit_axis() != axis || idx.tensor_shape() != [m, k]
    {
        return Err(PitError::IncompatiblePlan(format!(
            "index ({:?} micro-tiles along `{}` over {:?}) does not match the plan",
            idx.micro_tile(),
            idx.pit_axis().symbol,
            idx.tensor_shape()
        )));
    }
    run_indexed(plan, a, b, idx, workers)
}

fn run_indexed<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    idx: &MicroTileIndex,
    workers: usize,
) -> Result<(DenseTensor<T>, ExecStats)> {
    let tile = plan.tile.shape_array();
    let n = plan.dims[2];
    Ok(match idx.pit_axis().dim {
        0 => m_path(tile, a, b.data(), n, idx, workers),
        _ => k_path(tile, a, b.data(), n, idx, workers),
    })
}

fn finish<T: Element>(m: usize, n: usize, c: Vec<T>, launches: u64) -> (DenseTensor<T>, ExecStats) {
    let c = DenseTensor::from_vec(&[m, n], Layout::RowMajor, c).expect("output buffer sized m*n");
    (c, ExecStats { launches })
}

/// Row-gather plan. Workers own disjoint column strips of `C`.
fn m_path<T: Element>(
    tile: [usize; 3],
    a: &DenseTensor<T>,
    b: &[T],
    n: usize,
    idx: &MicroTileIndex,
    workers: usize,
) -> (DenseTensor<T>, ExecStats) {
    let m = idx.tensor_shape()[0];
    let tn = tile[2];
    let parts = split(n.div_ceil(tn), workers);
    let mut c = vec![T::zero(); m * n];
    if parts.len() <= 1 {
        let launches = m_strip(tile, a, b, n, idx, 0..n.div_ceil(tn), &mut c, n);
        return finish(m, n, c, launches);
    }
    let strips: Vec<(Range<usize>, Vec<T>, u64)> = thread::scope(|s| {
        let handles: Vec<_> = parts
            .into_iter()
            .map(|nbs| {
                s.spawn(move || {
                    let cols = nbs.start * tn..(nbs.end * tn).min(n);
                    let mut strip = vec![T::zero(); m * cols.len()];
                    let launches = m_strip(tile, a, b, n, idx, nbs, &mut strip, cols.len());
                    (cols, strip, launches)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("matmul worker panicked"))
            .collect()
    });
    let mut launches = 0;
    for (cols, strip, l) in strips {
        launches += l;
        let w = cols.len();
        for (r, row) in strip.chunks_exact(w).enumerate() {
            c[r * n + cols.start..r * n + cols.end].copy_from_slice(row);
        }
    }
    finish(m, n, c, launches)
}

/// Computes the columns of N-blocks `nbs` into `out` (leading dimension
/// `out_ld`, first column `nbs.start * N`).
#[allow(clippy::too_many_arguments)]
fn m_strip<T: Element>(
    tile: [usize; 3],
    a: &DenseTensor<T>,
    b: &[T],
    n: usize,
    idx: &MicroTileIndex,
    nbs: Range<usize>,
    out: &mut [T],
    out_ld: usize,
) -> u64 {
    let [tm, tk, tn] = tile;
    let shape = idx.tensor_shape();
    let (rs, cs) = a.strides2();
    let col0 = nbs.start * tn;
    let mut a_buf = vec![T::zero(); tm * tk];
    let mut c_buf = vec![T::zero(); tm * tn];
    let mut launches = 0;
    // One N-strip at a time keeps its slice of C cache-resident while every
    // K-group accumulates into it.
    for nb in nbs {
        let j0 = nb * tn;
        let nn = tn.min(n - j0);
        for kb in 0..idx.num_groups() {
            let k0 = kb * tk;
            let kk = tk.min(shape[1] - k0);
            let map = TileMap {
                shape,
                pit_dim: 0,
                micro_tile: [1, tk],
                group: kb,
                ld: tk,
            };
            for chunk in idx.group(kb).chunks(tm) {
                a_buf.fill(T::zero());
                map.gather(a.data(), rs, cs, chunk, &mut a_buf);
                c_buf.fill(T::zero());
                matmul_kernel(tm, kk, nn, &a_buf, tk, &b[k0 * n + j0..], n, &mut c_buf, tn);
                launches += 1;
                for (s, &row) in chunk.iter().enumerate() {
                    let dst = &mut out[row as usize * out_ld + j0 - col0..][..nn];
                    for (d, &v) in dst.iter_mut().zip(&c_buf[s * tn..s * tn + nn]) {
                        *d += v;
                    }
                }
            }
        }
    }
    launches
}

/// Column-gather plan over a col-major `A`. Workers own disjoint row blocks.
fn k_path<T: Element>(
    tile: [usize; 3],
    a: &DenseTensor<T>,
    b: &[T],
    n: usize,
    idx: &MicroTileIndex,
    workers: usize,
) -> (DenseTensor<T>, ExecStats) {
    let m = idx.tensor_shape()[0];
    let mut c = vec![T::zero(); m * n];
    let launches = for_row_blocks(
        &mut c,
        m,
        n,
        tile[0],
        idx.num_groups(),
        workers,
        |mbs, out| k_rows(tile, a, b, n, idx, mbs, out),
    );
    finish(m, n, c, launches)
}

/// Runs `f` over contiguous ranges of row blocks, each with its own slice of
/// the row-major `[rows, n]` output.
pub(crate) fn for_row_blocks<T: Element>(
    out: &mut [T],
    rows: usize,
    n: usize,
    block: usize,
    nblocks: usize,
    workers: usize,
    f: impl Fn(Range<usize>, &mut [T]) -> u64 + Sync,
) -> u64 {
    let parts = split(nblocks, workers);
    if parts.len() <= 1 {
        return f(0..nblocks, out);
    }
    let f = &f;
    thread::scope(|s| {
        let mut rest = out;
        let mut handles = Vec::new();
        for mbs in parts {
            let len = ((mbs.end * block).min(rows) - mbs.start * block) * n;
            let (mine, tail) = rest.split_at_mut(len);
            rest = tail;
            handles.push(s.spawn(move || f(mbs, mine)));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .sum()
    })
}

fn k_rows<T: Element>(
    tile: [usize; 3],
    a: &DenseTensor<T>,
    b: &[T],
    n: usize,
    idx: &MicroTileIndex,
    mbs: Range<usize>,
    out: &mut [T],
) -> u64 {
    let [tm, tk, tn] = tile;
    let shape = idx.tensor_shape();
    let (rs, cs) = a.strides2();
    let row0 = mbs.start * tm;
    let mut a_buf = vec![T::zero(); tm * tk];
    let mut b_buf = vec![T::zero(); tk * n];
    let mut launches = 0;
    for mb in mbs {
        let r0 = mb * tm;
        let mm = tm.min(shape[0] - r0);
        let map = TileMap {
            shape,
            pit_dim: 1,
            micro_tile: [tm, 1],
            group: mb,
            ld: tk,
        };
        let crows = &mut out[(r0 - row0) * n..(r0 - row0 + mm) * n];
        for chunk in idx.group(mb).chunks(tk) {
            a_buf.fill(T::zero());
            map.gather(a.data(), rs, cs, chunk, &mut a_buf);
            for (s, &kc) in chunk.iter().enumerate() {
                let kc = kc as usize;
                b_buf[s * n..(s + 1) * n].copy_from_slice(&b[kc * n..(kc + 1) * n]);
            }
            b_buf[chunk.len() * n..].fill(T::zero());
            for j0 in (0..n).step_by(tn) {
                let nn = tn.min(n - j0);
                matmul_kernel(mm, tk, nn, &a_buf, tk, &b_buf[j0..], n, &mut crows[j0..], n);
                launches += 1;
            }
        }
    }
    launches
}

/// Plain tiled matmul over every block.
fn dense_path<T: Element>(
    tile: [usize; 3],
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    workers: usize,
) -> (DenseTensor<T>, ExecStats) {
    let [m, k] = a.shape2().expect("checked");
    let n = b.shape()[1];
    let [tm, tk, tn] = tile;
    let (rs, cs) = a.strides2();
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![T::zero(); m * n];
    let launches = for_row_blocks(&mut c, m, n, tm, m.div_ceil(tm), workers, |mbs, out| {
        let row0 = mbs.start * tm;
        let mut a_buf = vec![T::zero(); tm * tk];
        let mut launches = 0;
        for mb in mbs {
            let r0 = mb * tm;
            let mm = tm.min(m - r0);
            let crows = &mut out[(r0 - row0) * n..(r0 - row0 + mm) * n];
            for k0 in (0..k).step_by(tk) {
                let kk = tk.min(k - k0);
                pack_block(ad, rs, cs, r0, k0, mm, kk, &mut a_buf, tk);
                for j0 in (0..n).step_by(tn) {
                    let nn = tn.min(n - j0);
                    matmul_kernel(
                        mm,
                        kk,
                        nn,
                        &a_buf,
                        tk,
                        &bd[k0 * n + j0..],
                        n,
                        &mut crows[j0..],
                        n,
                    );
                    launches += 1;
                }
            }
        }
        launches
    });
    finish(m, n, c, launches)
}

/// `A * B` by a naive triple loop accumulating in f64.
pub fn run_dense_reference<T: Element>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
) -> Result<DenseTensor<f64>> {
    let [m, k] = a.shape2()?;
    let [k2, n] = b.shape2()?;
    if k != k2 {
        return Err(PitError::Shape(format!("A is {m}x{k} but B is {k2}x{n}")));
    }
    let a = a.cast::<f64>().to_layout(Layout::RowMajor);
    let b = b.cast::<f64>().to_layout(Layout::RowMajor);
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *cv += aip * bv;
            }
        }
    }
    DenseTensor::from_vec(&[m, n], Layout::RowMajor, c)
}

/// Batched matmul `C[b] = A[b] * B[b]` over row-major rank-3 operands, one
/// 2-D plan per batch slice, each with its own annotation.
pub fn run_batched_sparse_matmul<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    anns: &[SparsityAnnotation],
    workers: usize,
) -> Result<(DenseTensor<T>, ExecStats)> {
    let (&[batch, m, k], &[batch2, k2, n]) = (a.shape(), b.shape()) else {
        return Err(PitError::Shape(
            "batched matmul needs rank-3 operands".into(),
        ));
    };
    if batch != batch2 || k != k2 || anns.len() != batch {
        return Err(PitError::Shape(format!(
            "A {:?}, B {:?} and {} annotations do not conform",
            a.shape(),
            b.shape(),
            anns.len()
        )));
    }
    if a.layout() != Layout::RowMajor || b.layout() != Layout::RowMajor {
        return Err(PitError::Layout(
            "batched operands must be row-major".into(),
        ));
    }
    let mut out = Vec::with_capacity(batch * m * n);
    let mut stats = ExecStats::default();
    for (s, ann) in anns.iter().enumerate() {
        let a_s = DenseTensor::from_vec_2d(m, k, a.data()[s * m * k..(s + 1) * m * k].to_vec())?;
        let b_s = DenseTensor::from_vec_2d(k, n, b.data()[s * k * n..(s + 1) * k * n].to_vec())?;
        let a_s = a_s.to_layout(plan.sparse_layout);
        let (c, st) = run_sparse_matmul(plan, &a_s, &b_s, ann, workers)?;
        stats.launches += st.launches;
        out.extend_from_slice(c.data());
    }
    Ok((
        DenseTensor::from_vec(&[batch, m, n], Layout::RowMajor, out)?,
        stats,
    ))
}
