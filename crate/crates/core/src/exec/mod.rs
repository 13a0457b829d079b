//! Execution engine: dense tensors, permutations, micro-tile gather/scatter
//! and plan execution.

mod gather;
mod matmul;
mod permutation;
mod reduce;
mod tensor;
mod verify;

pub use gather::{sread, swrite, swrite_accumulate, TileBuffer};
pub use matmul::{
    run_batched_sparse_matmul, run_dense_reference, run_sparse_matmul, run_sparse_matmul_indexed,
    ExecStats,
};
pub use permutation::{apply_permutation, Permutation};
pub use reduce::{reference_reduce_sum, run_sparse_reduce_sum, run_sparse_reduce_sum_indexed};
pub use tensor::{DType, DenseTensor, Element, Layout};
pub use verify::{compare, Comparison, ATOL, RTOL};
