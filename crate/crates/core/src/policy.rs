//! Micro-tile derivation, cover counting and cost-model kernel selection.
//!
//! A candidate plan is a (dense tile, PIT axis) pair. Its micro-tile is the
//! tile's footprint on the sparse operand with extent 1 along the PIT axis.
//! The cost of a plan on one sparsity sample is the number of dense tile
//! launches it needs times the profiled per-tile cost:
//!
//! * each group (position across the PIT axis) with `c` non-zero micro-tiles
//!   packs them into `ceil(c / T_pit)` tile slots, where `T_pit` is the tile
//!   extent along the PIT axis;
//! * every such slot is launched once per tile along the dimensions the
//!   sparse operand does not have (the `N` grid for matmul).
//!
//! The dense fallback plan is costed the same way with every block present,
//! so sparse and dense candidates are directly comparable.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use crate::error::{PitError, Result};
use crate::exec::Layout;
use crate::expr::{AxisTerm, ElementwiseOp, Extents, ReductionOp, TensorExpr};
use crate::index::PitAxis;
use crate::sparsity::SparsityAnnotation;
use crate::tiles::{KernelRegistry, OpKind, ProfileTable, TileKernelDescriptor};

/// An expression matched against a supported operator, with the symbols
/// playing each role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorBinding {
    pub op: OpKind,
    /// Symbols of the sparse operand's two dimensions (`m, k` / `p, l`).
    pub sparse_axes: [String; 2],
    /// Matmul only: the output column symbol (`n`).
    pub col_axis: Option<String>,
    /// Prevalent axes dropped before matching (e.g. the batch axis). Each
    /// slice along them is planned on its own.
    pub batch_axes: Vec<String>,
    /// PIT axes that index the sparse operand.
    pub pit_candidates: Vec<PitAxis>,
}

fn plain_axes(op: &crate::expr::Operand) -> Option<Vec<&str>> {
    op.axes.iter().map(AxisTerm::as_symbol).collect()
}

/// Recognizes matmul (optionally batched) and row reductions.
pub fn bind_operator(expr: &TensorExpr) -> Result<OperatorBinding> {
    let pit = expr.pit_axes();
    let candidates = |axes: &[String; 2]| -> Vec<PitAxis> {
        axes.iter()
            .enumerate()
            .filter(|(_, s)| pit.contains(s.as_str()))
            .map(|(d, s)| PitAxis::new(s.clone(), d))
            .collect()
    };

    // Row reduction: C[p] += A[p,l]. Matched before simplification because
    // simplification drops the prevalent `p`.
    if expr.reduction_op == ReductionOp::Sum
        && expr.elementwise_op == ElementwiseOp::Identity
        && expr.inputs.len() == 1
    {
        if let (Some(out), Some(inp)) = (plain_axes(&expr.output), plain_axes(&expr.inputs[0])) {
            if let ([p], [p2, l]) = (&out[..], &inp[..]) {
                if p == p2 {
                    let sparse_axes = [p.to_string(), l.to_string()];
                    return Ok(OperatorBinding {
                        op: OpKind::ReduceSum,
                        pit_candidates: candidates(&sparse_axes),
                        sparse_axes,
                        col_axis: None,
                        batch_axes: Vec::new(),
                    });
                }
            }
        }
    }

    let simplified = expr.simplify();
    let s = &simplified.expr;
    if s.reduction_op == ReductionOp::Sum
        && s.elementwise_op == ElementwiseOp::Multiply
        && s.inputs.len() == 2
    {
        if let (Some(out), Some(a), Some(b)) = (
            plain_axes(&s.output),
            plain_axes(&s.inputs[0]),
            plain_axes(&s.inputs[1]),
        ) {
            if let ([m, n], [m2, k], [k2, n2]) = (&out[..], &a[..], &b[..]) {
                if m == m2 && n == n2 && k == k2 && m != n && m != k && n != k {
                    let sparse_axes = [m.to_string(), k.to_string()];
                    return Ok(OperatorBinding {
                        op: OpKind::MatMul,
                        pit_candidates: candidates(&sparse_axes),
                        sparse_axes,
                        col_axis: Some(n.to_string()),
                        batch_axes: simplified.removed.keys().cloned().collect(),
                    });
                }
            }
        }
    }
    if expr.elementwise_op == ElementwiseOp::Add {
        return Err(PitError::Unsupported(format!(
            "`{expr}` is an elementwise addition; it has no sparse execution path"
        )));
    }
    Err(PitError::Unsupported(format!(
        "`{expr}` is neither a (batched) matmul nor a row reduction"
    )))
}

impl OperatorBinding {
    /// Problem dimensions: `[m, k, n]` for matmul, `[p, l]` for reduce_sum.
    pub fn dims(&self, extents: &Extents) -> Result<Vec<usize>> {
        let get = |s: &str| {
            extents
                .get(s)
                .copied()
                .ok_or_else(|| PitError::InvalidArgument(format!("no extent bound for axis `{s}`")))
        };
        let mut dims = vec![get(&self.sparse_axes[0])?, get(&self.sparse_axes[1])?];
        if let Some(n) = &self.col_axis {
            dims.push(get(n)?);
        }
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroTileChoice {
    pub micro_tile: [usize; 2],
    /// Layout the sparse operand must be stored in for this plan.
    pub required_layout: Layout,
    /// True if `required_layout` differs from the operand's current layout.
    pub layout_change: bool,
}

/// The micro-tile is the tile footprint on the sparse operand with the PIT
/// axis shrunk to 1. The operand must be non-contiguous along the PIT axis
/// (so each micro-tile is a contiguous run); if it is not, the plan records
/// the layout change. A single-element micro-tile has no contiguity to
/// exploit and keeps the current layout.
pub fn get_micro_tile(
    tile: &TileKernelDescriptor,
    pit_axis: &PitAxis,
    layout: Layout,
) -> Result<MicroTileChoice> {
    if tile.op == OpKind::VecAdd {
        return Err(PitError::Unsupported(
            "vec_add tiles have no sparse operand".into(),
        ));
    }
    if pit_axis.dim > 1 {
        return Err(PitError::InvalidArgument(format!(
            "PIT axis `{}` does not index the sparse operand",
            pit_axis.symbol
        )));
    }
    let mut micro_tile = tile.sparse_projection();
    micro_tile[pit_axis.dim] = 1;
    let required_layout = if micro_tile == [1, 1] {
        layout
    } else if pit_axis.dim == 0 {
        Layout::RowMajor
    } else {
        Layout::ColMajor
    };
    Ok(MicroTileChoice {
        micro_tile,
        required_layout,
        layout_change: required_layout != layout,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PlanKind {
    Dense,
    Pit(PitAxis),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseKernelPlan {
    pub op: OpKind,
    /// `[m, k, n]` for matmul, `[p, l]` for reduce_sum.
    pub dims: Vec<usize>,
    pub kind: PlanKind,
    pub micro_tile: [usize; 2],
    pub tile: TileKernelDescriptor,
    /// Profiled seconds per tile launch.
    pub tile_cost: f64,
    /// Mean estimated seconds per sample.
    pub estimated_cost: f64,
    /// Layout the sparse operand must have.
    pub sparse_layout: Layout,
}

impl SparseKernelPlan {
    /// Plan for a fixed tile and axis, with no cost estimate yet.
    pub fn new(
        op: OpKind,
        dims: &[usize],
        kind: PlanKind,
        tile: &TileKernelDescriptor,
        tile_cost: f64,
        operand_layout: Layout,
    ) -> Result<Self> {
        if tile.op != op {
            return Err(PitError::IncompatiblePlan(format!(
                "{} tile for a {op} plan",
                tile.op
            )));
        }
        let want = match op {
            OpKind::MatMul => 3,
            OpKind::ReduceSum => 2,
            OpKind::VecAdd => return Err(PitError::Unsupported("no plans for vec_add".into())),
        };
        if dims.len() != want || dims.contains(&0) {
            return Err(PitError::Shape(format!(
                "{op} plan needs {want} positive dims, got {dims:?}"
            )));
        }
        let (micro_tile, sparse_layout) = match &kind {
            PlanKind::Dense => (tile.sparse_projection(), Layout::RowMajor),
            PlanKind::Pit(axis) => {
                let c = get_micro_tile(tile, axis, operand_layout)?;
                (c.micro_tile, c.required_layout)
            }
        };
        Ok(SparseKernelPlan {
            op,
            dims: dims.to_vec(),
            kind,
            micro_tile,
            tile: tile.clone(),
            tile_cost,
            estimated_cost: 0.0,
            sparse_layout,
        })
    }

    pub fn is_dense(&self) -> bool {
        self.kind == PlanKind::Dense
    }

    pub fn pit_axis(&self) -> Option<&PitAxis> {
        match &self.kind {
            PlanKind::Dense => None,
            PlanKind::Pit(a) => Some(a),
        }
    }

    /// Shape of the sparse operand.
    pub fn sparse_shape(&self) -> [usize; 2] {
        [self.dims[0], self.dims[1]]
    }

    /// Launches per packed tile slot along dimensions the sparse operand
    /// lacks.
    fn orthogonal_launches(&self) -> u64 {
        match self.op {
            OpKind::MatMul => self.dims[2].div_ceil(self.tile.shape[2]) as u64,
            _ => 1,
        }
    }

    pub fn axis_label(&self) -> &str {
        match &self.kind {
            PlanKind::Dense => "dense",
            PlanKind::Pit(a) => &a.symbol,
        }
    }

    /// One-line dump: `plan op=matmul pit_axis=m microtile=1x32 tile=16x32x128 impl=<id> cost=<sec>`.
    pub fn dump(&self) -> String {
        format!(
            "plan op={} pit_axis={} microtile={}x{} tile={} impl={} cost={:.8e}",
            self.op,
            self.axis_label(),
            self.micro_tile[0],
            self.micro_tile[1],
            self.tile.shape_string(),
            self.tile.impl_id,
            self.estimated_cost
        )
    }
}

impl fmt::Display for SparseKernelPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

fn micro_grid(shape: [usize; 2], micro_tile: [usize; 2]) -> [usize; 2] {
    [
        shape[0].div_ceil(micro_tile[0]),
        shape[1].div_ceil(micro_tile[1]),
    ]
}

/// Marks every grid-aligned micro-tile touched by a non-zero block and
/// returns the hit mask over the micro-tile grid (row-major).
fn cover_mask(ann: &SparsityAnnotation, micro_tile: [usize; 2]) -> Result<(Vec<bool>, [usize; 2])> {
    if micro_tile.contains(&0) {
        return Err(PitError::InvalidArgument("micro-tile edge of 0".into()));
    }
    let shape = ann.shape();
    let [g0, g1] = ann.granularity();
    let [gr, gc] = ann.grid();
    let grid = micro_grid(shape, micro_tile);
    let mut hit = vec![false; grid[0] * grid[1]];
    for br in 0..gr {
        // Micro-tile rows spanned by block row `br`, clipped to the tensor.
        let r_lo = br * g0 / micro_tile[0];
        let r_hi = (((br + 1) * g0).min(shape[0]) - 1) / micro_tile[0];
        for bc in 0..gc {
            if !ann.get(br, bc) {
                continue;
            }
            let c_lo = bc * g1 / micro_tile[1];
            let c_hi = (((bc + 1) * g1).min(shape[1]) - 1) / micro_tile[1];
            for r in r_lo..=r_hi {
                hit[r * grid[1] + c_lo..=r * grid[1] + c_hi].fill(true);
            }
        }
    }
    Ok((hit, grid))
}

fn micro_tile_arg(micro_tile: &[usize]) -> Result<[usize; 2]> {
    micro_tile.try_into().map_err(|_| {
        PitError::Shape(format!(
            "micro-tile rank {} on a 2-D annotation",
            micro_tile.len()
        ))
    })
}

/// Number of grid-aligned micro-tiles needed to cover every non-zero block.
/// The count does not depend on which axis the micro-tiles are gathered
/// along; `pit_axis` only has to index the annotation.
pub fn cover_count(
    ann: &SparsityAnnotation,
    micro_tile: &[usize],
    pit_axis: &PitAxis,
) -> Result<usize> {
    if pit_axis.dim > 1 {
        return Err(PitError::Shape(format!(
            "PIT axis `{}` does not index a 2-D annotation",
            pit_axis.symbol
        )));
    }
    let (hit, _) = cover_mask(ann, micro_tile_arg(micro_tile)?)?;
    Ok(hit.into_iter().filter(|&h| h).count())
}

/// Non-zero micro-tiles per group, groups running across `pit_dim`.
pub fn group_counts(
    ann: &SparsityAnnotation,
    micro_tile: &[usize],
    pit_dim: usize,
) -> Result<Vec<usize>> {
    if pit_dim > 1 {
        return Err(PitError::Shape(format!(
            "dimension {pit_dim} on a 2-D annotation"
        )));
    }
    let (hit, grid) = cover_mask(ann, micro_tile_arg(micro_tile)?)?;
    let mut counts = vec![0; grid[1 - pit_dim]];
    for r in 0..grid[0] {
        for c in 0..grid[1] {
            if hit[r * grid[1] + c] {
                counts[if pit_dim == 0 { c } else { r }] += 1;
            }
        }
    }
    Ok(counts)
}

fn check_sample(plan: &SparseKernelPlan, ann: &SparsityAnnotation) -> Result<()> {
    if ann.shape() != plan.sparse_shape() {
        return Err(PitError::IncompatiblePlan(format!(
            "annotation over {:?} for a plan on a {:?} operand",
            ann.shape(),
            plan.sparse_shape()
        )));
    }
    Ok(())
}

/// Dense tile launches `plan` needs for one sample.
pub fn plan_launches(plan: &SparseKernelPlan, ann: &SparsityAnnotation) -> Result<u64> {
    check_sample(plan, ann)?;
    Ok(launches_unchecked(plan, ann)?.0)
}

/// `(launches, covering micro-tiles)`.
fn launches_unchecked(plan: &SparseKernelPlan, ann: &SparsityAnnotation) -> Result<(u64, usize)> {
    let proj = plan.tile.sparse_projection();
    let [rows, cols] = plan.sparse_shape();
    match &plan.kind {
        PlanKind::Dense => {
            let grid = (rows.div_ceil(proj[0]) * cols.div_ceil(proj[1])) as u64;
            Ok((
                grid * plan.orthogonal_launches(),
                rows.div_ceil(proj[0]) * cols.div_ceil(proj[1]),
            ))
        }
        PlanKind::Pit(axis) => {
            let per_slot = proj[axis.dim];
            let counts = group_counts(ann, &plan.micro_tile, axis.dim)?;
            let slots: u64 = counts.iter().map(|&c| c.div_ceil(per_slot) as u64).sum();
            Ok((slots * plan.orthogonal_launches(), counts.iter().sum()))
        }
    }
}

/// Estimated seconds for one sample: launches times the per-tile cost.
pub fn estimate_plan_cost(plan: &SparseKernelPlan, ann: &SparsityAnnotation) -> Result<f64> {
    Ok(plan_launches(plan, ann)? as f64 * plan.tile_cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCost {
    pub plan: SparseKernelPlan,
    /// Covering micro-tiles per sample (full grid for the dense plan).
    pub num_tiles: Vec<usize>,
    pub launches: Vec<u64>,
    /// Sum of per-sample costs in sample order.
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: SparseKernelPlan,
    pub candidates: Vec<CandidateCost>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionOptions {
    pub allow_dense: bool,
    /// Current layout of the sparse operand.
    pub operand_layout: Layout,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            allow_dense: true,
            operand_layout: Layout::RowMajor,
        }
    }
}

/// Total order used to pick the winner: cost, then dense before sparse, then
/// larger tile FLOPs, then impl id, then axis symbol.
pub fn candidate_order(a: &CandidateCost, b: &CandidateCost) -> Ordering {
    a.total_cost
        .total_cmp(&b.total_cost)
        .then_with(|| b.plan.is_dense().cmp(&a.plan.is_dense()))
        .then_with(|| b.plan.tile.flops().cmp(&a.plan.tile.flops()))
        .then_with(|| a.plan.tile.impl_id.cmp(&b.plan.tile.impl_id))
        .then_with(|| a.plan.axis_label().cmp(b.plan.axis_label()))
}

/// Costs one candidate over all samples. The total is accumulated exactly as
/// a caller summing [`estimate_plan_cost`] in sample order would.
pub fn evaluate_candidate(
    plan: SparseKernelPlan,
    samples: &[SparsityAnnotation],
) -> Result<CandidateCost> {
    let mut num_tiles = Vec::with_capacity(samples.len());
    let mut launches = Vec::with_capacity(samples.len());
    let mut total_cost = 0.0;
    for ann in samples {
        check_sample(&plan, ann)?;
        let (l, tiles) = launches_unchecked(&plan, ann)?;
        total_cost += l as f64 * plan.tile_cost;
        launches.push(l);
        num_tiles.push(tiles);
    }
    let mut plan = plan;
    plan.estimated_cost = if samples.is_empty() {
        0.0
    } else {
        total_cost / samples.len() as f64
    };
    Ok(CandidateCost {
        plan,
        num_tiles,
        launches,
        total_cost,
    })
}

/// Enumerates every (tile, PIT axis) pair plus the dense fallback for each
/// tile and returns the cheapest under the profiled cost model.
pub fn kernel_selection(
    expr: &TensorExpr,
    extents: &Extents,
    samples: &[SparsityAnnotation],
    registry: &KernelRegistry,
    profile: &ProfileTable,
    opts: SelectionOptions,
) -> Result<Selection> {
    let binding = bind_operator(expr)?;
    let dims = binding.dims(extents)?;
    let tiles: Vec<&TileKernelDescriptor> = registry.for_op(binding.op).collect();
    if tiles.is_empty() {
        return Err(PitError::Registry(format!(
            "no {} tiles registered",
            binding.op
        )));
    }
    if samples.is_empty() && !opts.allow_dense {
        return Err(PitError::InvalidArgument(
            "no sparsity samples and dense fallback disabled".into(),
        ));
    }
    let mut candidates = Vec::new();
    for tile in tiles {
        let cost = profile.cost(tile).ok_or_else(|| {
            PitError::Registry(format!("profile has no cost for `{}`", tile.impl_id))
        })?;
        if opts.allow_dense {
            let plan = SparseKernelPlan::new(
                binding.op,
                &dims,
                PlanKind::Dense,
                tile,
                cost,
                opts.operand_layout,
            )?;
            candidates.push(evaluate_candidate(plan, samples)?);
        }
        for axis in &binding.pit_candidates {
            let plan = SparseKernelPlan::new(
                binding.op,
                &dims,
                PlanKind::Pit(axis.clone()),
                tile,
                cost,
                opts.operand_layout,
            )?;
            candidates.push(evaluate_candidate(plan, samples)?);
        }
    }
    let best = candidates
        .iter()
        .min_by(|a, b| candidate_order(a, b))
        .map(|c| c.plan.clone())
        .ok_or_else(|| {
            PitError::InvalidArgument("no applicable PIT axis and dense fallback disabled".into())
        })?;
    Ok(Selection { best, candidates })
}

/// Distinct tile-footprint axes a binding can gather along, as symbols.
pub fn pit_symbols(binding: &OperatorBinding) -> BTreeSet<String> {
    binding
        .pit_candidates
        .iter()
        .map(|a| a.symbol.clone())
        .collect()
}
