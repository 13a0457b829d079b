//! Wall-clock comparison of plans against the dense plan.

use std::time::Instant;

use crate::error::Result;
use crate::exec::{run_sparse_matmul, run_sparse_matmul_indexed, DenseTensor, Element};
use crate::index::MicroTileIndex;
use crate::policy::SparseKernelPlan;
use crate::sparsity::SparsityAnnotation;

pub const CSV_HEADER: &str =
    "op,shape,granularity,zero_ratio,plan,microtile,tile,launches,wall_ms,dense_wall_ms,speedup";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    /// Median over repetitions.
    pub wall_ms: f64,
    pub launches: u64,
}

/// Times `plan` on `A * B`. The index is built once, outside the timed
/// region, and `A` must already be in the plan's layout.
pub fn time_matmul<T: Element>(
    plan: &SparseKernelPlan,
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    ann: &SparsityAnnotation,
    workers: usize,
    reps: usize,
) -> Result<Timing> {
    let idx = match plan.pit_axis() {
        Some(axis) => Some(MicroTileIndex::from_annotation(
            ann,
            &plan.micro_tile,
            axis.clone(),
            workers,
        )?),
        None => None,
    };
    let run = || match &idx {
        Some(idx) => run_sparse_matmul_indexed(plan, a, b, idx, workers),
        None => run_sparse_matmul(plan, a, b, ann, workers),
    };
    let (_, stats) = run()?;
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        std::hint::black_box(run()?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(Timing {
        wall_ms: times[times.len() / 2],
        launches: stats.launches,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub op: String,
    pub shape: Vec<usize>,
    pub granularity: [usize; 2],
    pub zero_ratio: f64,
    pub plan: String,
    pub micro_tile: [usize; 2],
    pub tile: String,
    pub launches: u64,
    pub wall_ms: f64,
    pub dense_wall_ms: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.dense_wall_ms / self.wall_ms
    }

    pub fn to_csv(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        format!(
            "{},{},{}x{},{},{},{}x{},{},{},{:.4},{:.4},{:.3}",
            self.op,
            shape.join("x"),
            self.granularity[0],
            self.granularity[1],
            self.zero_ratio,
            self.plan,
            self.micro_tile[0],
            self.micro_tile[1],
            self.tile,
            self.launches,
            self.wall_ms,
            self.dense_wall_ms,
            self.speedup()
        )
    }
}

/// Times each plan and the dense baseline on one workload. `a` is given
/// row-major and converted per plan outside the timed region.
#[allow(clippy::too_many_arguments)]
pub fn bench_matmul_plans<T: Element>(
    plans: &[SparseKernelPlan],
    dense: &SparseKernelPlan,
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    ann: &SparsityAnnotation,
    zero_ratio: f64,
    workers: usize,
    reps: usize,
) -> Result<Vec<BenchRow>> {
    let dense_ms = time_matmul(dense, a, b, ann, workers, reps)?.wall_ms;
    plans
        .iter()
        .map(|plan| {
            let a = a.to_layout(plan.sparse_layout);
            let t = if plan == dense {
                Timing {
                    wall_ms: dense_ms,
                    launches: time_matmul(plan, &a, b, ann, workers, 0)?.launches,
                }
            } else {
                time_matmul(plan, &a, b, ann, workers, reps)?
            };
            Ok(BenchRow {
                op: plan.op.to_string(),
                shape: plan.dims.clone(),
                granularity: ann.granularity(),
                zero_ratio,
                plan: plan.axis_label().to_string(),
                micro_tile: plan.micro_tile,
                tile: plan.tile.shape_string(),
                launches: t.launches,
                wall_ms: t.wall_ms,
                dense_wall_ms: dense_ms,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Layout;
    use crate::index::PitAxis;
    use crate::policy::PlanKind;
    use crate::tiles::{OpKind, TileKernelDescriptor};

    #[test]
    fn rows_have_every_column() {
        let tile = TileKernelDescriptor::matmul(8, 32, 32);
        let dims = [64, 64, 64];
        let dense = SparseKernelPlan::new(
            OpKind::MatMul,
            &dims,
            PlanKind::Dense,
            &tile,
            1e-6,
            Layout::RowMajor,
        )
        .unwrap();
        let m = SparseKernelPlan::new(
            OpKind::MatMul,
            &dims,
            PlanKind::Pit(PitAxis::rows("m")),
            &tile,
            1e-6,
            Layout::RowMajor,
        )
        .unwrap();
        let ann = SparsityAnnotation::random(&[64, 64], &[1, 32], 0.9, 1).unwrap();
        let a = DenseTensor::<f32>::random_sparse(&ann, 2);
        let b = DenseTensor::<f32>::random(&[64, 64], 3);
        let rows =
            bench_matmul_plans(&[dense.clone(), m], &dense, &a, &b, &ann, 0.9, 1, 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].speedup(), 1.0);
        for r in &rows {
            assert_eq!(r.to_csv().split(',').count(), CSV_HEADER.split(',').count());
        }
        assert!(rows[1].launches < rows[0].launches);
    }
}
