//! Sparse tensor operators executed as dense tiles over permuted
//! micro-tiles.
//!
//! An operator is written as a tensor expression ([`expr`]), its dynamic
//! sparsity as a block annotation ([`sparsity`]). [`policy`] picks a dense
//! tile and a permutation-invariant axis from profiled tile costs
//! ([`tiles`]); [`index`] locates the non-zero micro-tiles and [`exec`]
//! gathers them into dense tiles, computes, and scatters the results back.

pub mod bench;
pub mod error;
pub mod exec;
pub mod expr;
pub mod index;
pub mod policy;
pub mod sparsity;
pub mod tiles;

pub use error::{PitError, Result};
pub use exec::{DType, DenseTensor, Element, Layout, Permutation};
pub use expr::{parse_expr, parse_extents, TensorExpr};
pub use index::{MicroTileIndex, PitAxis};
pub use policy::{
    cover_count, estimate_plan_cost, get_micro_tile, kernel_selection, PlanKind, Selection,
    SelectionOptions, SparseKernelPlan,
};
pub use sparsity::SparsityAnnotation;
pub use tiles::{
    register_builtin_kernels, KernelRegistry, OpKind, ProfileTable, TileKernelDescriptor,
};
