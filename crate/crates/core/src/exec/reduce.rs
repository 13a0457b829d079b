//! Row reduction `C[p] += A[p, l]` over surviving micro-tiles only.
//!
//! Rows are independent, so each row (block) may consume its own set of
//! `l` micro-tiles in any order: the annotation rows act as per-row
//! annotations.

use super::gather::TileMap;
use super::matmul::{check_workers, for_row_blocks, pack_block, ExecStats};
use super::tensor::{DenseTensor, Element, Layout};
use crate::error::{PitError, Result};
use crate::index::MicroTileIndex;
use crate::policy::{PlanKind, SparseKernelPlan};
use crate::sparsity::SparsityAnnotation;
use crate::tiles::{rowsum_kernel, OpKind};

fn check_operand<T: Element>(plan: &SparseKernelPlan, a: &DenseTensor<T>) -> Result<[usize; 2]> {
    if plan.op != OpKind::ReduceSum {
        return Err(PitError::IncompatiblePlan(format!(
            "{} plan passed to reduce_sum",
            plan.op
        )));
    }
    let shape = a.shape2()?;
    if plan.dims != shape {
        return Err(PitError::IncompatiblePlan(format!(
            "plan built for {:?}, operand is {:?}",
            plan.dims, shape
        )));
    }
    if a.layout() != plan.sparse_layout {
        return Err(PitError::Layout(format!(
            "plan needs A {}, got {}",
            plan.sparse_layout,
            a.layout()
        )));
    }
    Ok(shape)
}

/// Executes a reduce_sum plan on `A[p, l]`.
pub fn run_sparse_reduce_sum<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    ann: &SparsityAnnotation,
    workers: usize,
) -> Result<(DenseTensor<T>, ExecStats)> {
    check_workers(workers)?;
    let shape = check_operand(plan, a)?;
    if ann.shape() != shape {
        return Err(PitError::IncompatiblePlan(format!(
            "annotation over {:?} does not describe a {:?} operand",
            ann.shape(),
            shape
        )));
    }
    match &plan.kind {
        PlanKind::Dense => Ok(dense_reduce(plan.tile.shape_array(), a, workers)),
        PlanKind::Pit(axis) => {
            let idx =
                MicroTileIndex::from_annotation(ann, &plan.micro_tile, axis.clone(), workers)?;
            run_sparse_reduce_sum_indexed(plan, a, &idx, workers)
        }
    }
}

/// Like [`run_sparse_reduce_sum`] with a prebuilt index.
pub fn run_sparse_reduce_sum_indexed<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    idx: &MicroTileIndex,
    workers: usize,
) -> Result<(DenseTensor<T>, ExecStats)> {
    check_workers(workers)?;
    let shape = check_operand(plan, a)?;
    let axis = plan
        .pit_axis()
        .ok_or_else(|| PitError::IncompatiblePlan("dense plans take no index".into()))?;
    if idx.micro_tile() != plan.micro_tile || idx.pit_axis() != axis || idx.tensor_shape() != shape
    {
        return Err(PitError::IncompatiblePlan(
            "index does not match the plan".into(),
        ));
    }
    let tile = plan.tile.shape_array();
    Ok(if axis.dim == 1 {
        l_path(tile, a, idx, workers)
    } else {
        p_path(tile, a, idx)
    })
}

fn finish<T: Element>(out: Vec<T>, launches: u64) -> (DenseTensor<T>, ExecStats) {
    let n = out.len();
    (
        DenseTensor::from_vec(&[n], Layout::RowMajor, out).expect("sized"),
        ExecStats { launches },
    )
}

fn dense_reduce<T: Element>(
    tile: [usize; 2],
    a: &DenseTensor<T>,
    workers: usize,
) -> (DenseTensor<T>, ExecStats) {
    let [p, l] = a.shape2().expect("checked");
    let [tp, tl] = tile;
    let (rs, cs) = a.strides2();
    let mut out = vec![T::zero(); p];
    let launches = for_row_blocks(&mut out, p, 1, tp, p.div_ceil(tp), workers, |pbs, out| {
        let row0 = pbs.start * tp;
        let mut buf = vec![T::zero(); tp * tl];
        let mut launches = 0;
        for pb in pbs {
            let r0 = pb * tp;
            let pp = tp.min(p - r0);
            for l0 in (0..l).step_by(tl) {
                let ll = tl.min(l - l0);
                pack_block(a.data(), rs, cs, r0, l0, pp, ll, &mut buf, tl);
                rowsum_kernel(pp, ll, &buf, tl, &mut out[r0 - row0..r0 - row0 + pp]);
                launches += 1;
            }
        }
        launches
    });
    finish(out, launches)
}

/// Micro-tiles `[P, 1]` gathered along `l`, one group per row block.
fn l_path<T: Element>(
    tile: [usize; 2],
    a: &DenseTensor<T>,
    idx: &MicroTileIndex,
    workers: usize,
) -> (DenseTensor<T>, ExecStats) {
    let shape = idx.tensor_shape();
    let [tp, tl] = tile;
    let (rs, cs) = a.strides2();
    let mut out = vec![T::zero(); shape[0]];
    let launches = for_row_blocks(
        &mut out,
        shape[0],
        1,
        tp,
        idx.num_groups(),
        workers,
        |pbs, out| {
            let row0 = pbs.start * tp;
            let mut buf = vec![T::zero(); tp * tl];
            let mut launches = 0;
            for pb in pbs {
                let r0 = pb * tp;
                let pp = tp.min(shape[0] - r0);
                let map = TileMap {
                    shape,
                    pit_dim: 1,
                    micro_tile: [tp, 1],
                    group: pb,
                    ld: tl,
                };
                for chunk in idx.group(pb).chunks(tl) {
                    buf.fill(T::zero());
                    map.gather(a.data(), rs, cs, chunk, &mut buf);
                    rowsum_kernel(pp, tl, &buf, tl, &mut out[r0 - row0..r0 - row0 + pp]);
                    launches += 1;
                }
            }
            launches
        },
    );
    finish(out, launches)
}

/// Micro-tiles `[1, L]` gathered along `p`, one group per `l` block; each
/// partial row sum is scattered back to its row.
fn p_path<T: Element>(
    tile: [usize; 2],
    a: &DenseTensor<T>,
    idx: &MicroTileIndex,
) -> (DenseTensor<T>, ExecStats) {
    let shape = idx.tensor_shape();
    let [tp, tl] = tile;
    let (rs, cs) = a.strides2();
    let mut out = vec![T::zero(); shape[0]];
    let mut buf = vec![T::zero(); tp * tl];
    let mut partial = vec![T::zero(); tp];
    let mut launches = 0;
    for lb in 0..idx.num_groups() {
        let map = TileMap {
            shape,
            pit_dim: 0,
            micro_tile: [1, tl],
            group: lb,
            ld: tl,
        };
        for chunk in idx.group(lb).chunks(tp) {
            buf.fill(T::zero());
            map.gather(a.data(), rs, cs, chunk, &mut buf);
            partial.fill(T::zero());
            rowsum_kernel(tp, tl, &buf, tl, &mut partial);
            launches += 1;
            for (s, &r) in chunk.iter().enumerate() {
                out[r as usize] += partial[s];
            }
        }
    }
    finish(out, launches)
}

/// Row sums accumulated in f64.
pub fn reference_reduce_sum<T: Element>(a: &DenseTensor<T>) -> Result<DenseTensor<f64>> {
    let [p, l] = a.shape2()?;
    let out = (0..p)
        .map(|i| (0..l).map(|j| a.get2(i, j).to_f64()).sum())
        .collect();
    DenseTensor::from_vec(&[p], Layout::RowMajor, out)
}
