//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

// `!(x <= bound)` so NaN fails.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pit_core::exec::{
    apply_permutation, compare, run_dense_reference, run_sparse_matmul, run_sparse_matmul_indexed,
    DenseTensor, Layout, Permutation,
};
use pit_core::expr::parse_expr;
use pit_core::index::{MicroTileIndex, PitAxis};
use pit_core::policy::{
    cover_count, estimate_plan_cost, kernel_selection, PlanKind, SelectionOptions, SparseKernelPlan,
};
use pit_core::sparsity::SparsityAnnotation;
use pit_core::tiles::{
    profile_with, register_builtin_kernels, OpKind, ProfileOptions, ProfileTable,
};
use pit_core::{bench, parse_extents};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within_budget(start: Instant, budget: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    ensure!(
        took < budget,
        "took {:.1}s, budget {}s",
        took.as_secs_f64(),
        budget.as_secs()
    );
    Ok(format!("{detail} ({:.1}s)", took.as_secs_f64()))
}

/// Cover-sparsity of random 4096x4096 annotations against the published
/// table and the independent-block law.
fn cover_ratios() -> Outcome {
    let start = Instant::now();
    // (granularity rows, zero ratio, micro-tile rows, published cover-sparsity %)
    let table = [
        (2, 0.95, 16, 66.39),
        (2, 0.99, 8, 96.06),
        (4, 0.95, 16, 81.45),
        (4, 0.99, 16, 96.05),
        (8, 0.95, 8, 95.0),
        (8, 0.99, 32, 96.02),
        (32, 0.95, 32, 95.0),
        (32, 0.99, 32, 99.0),
    ];
    let n = 4096;
    let mut worst: f64 = 0.0;
    for (i, &(g, ratio, mt, published)) in table.iter().enumerate() {
        let ann = SparsityAnnotation::random(&[n, n], &[g, 1], ratio, 1000 + i as u64)
            .map_err(|e| e.to_string())?;
        let covered =
            cover_count(&ann, &[mt, 1], &PitAxis::cols("k")).map_err(|e| e.to_string())?;
        let total = (n / mt) * n;
        let measured = 100.0 * (1.0 - covered as f64 / total as f64);
        let law = 100.0 * ratio.powf(mt as f64 / g as f64);
        ensure!(
            (measured - published).abs() <= 1.0,
            "({g},1)@{ratio} micro ({mt},1): measured {measured:.2}% vs table {published}%"
        );
        ensure!(
            (measured - law).abs() <= 1.0,
            "({g},1)@{ratio} micro ({mt},1): measured {measured:.2}% vs law {law:.2}%"
        );
        worst = worst.max((measured - published).abs());
    }
    within_budget(
        start,
        Duration::from_secs(30),
        format!("8 rows, max deviation {worst:.2}pp"),
    )
}

fn random_tile(rng: &mut ChaCha8Rng) -> pit_core::TileKernelDescriptor {
    let reg = register_builtin_kernels();
    let tiles: Vec<_> = reg.for_op(OpKind::MatMul).cloned().collect();
    tiles.choose(rng).unwrap().clone()
}

fn plan_for(dims: [usize; 3], axis: Option<PitAxis>, rng: &mut ChaCha8Rng) -> SparseKernelPlan {
    let kind = axis.map_or(PlanKind::Dense, PlanKind::Pit);
    SparseKernelPlan::new(
        OpKind::MatMul,
        &dims,
        kind,
        &random_tile(rng),
        1e-6,
        Layout::RowMajor,
    )
    .unwrap()
}

/// Permuting `m` (then un-permuting `C`) is bit-exact; permuting `k` on
/// both operands changes only summation order.
fn permutation_invariance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_k: f64 = 0.0;
    for case in 0..100u64 {
        let (m, k, n) = (
            rng.random_range(1..160),
            rng.random_range(1..160),
            rng.random_range(1..96),
        );
        let ratio = *[0.0, 0.5, 0.9].choose(&mut rng).unwrap();
        let workers = rng.random_range(1..=4);

        // m: row-block annotation, any tile.
        let g = rng.random_range(1..=k);
        let ann = SparsityAnnotation::random(&[m, k], &[1, g], ratio, case).unwrap();
        let a = DenseTensor::<f64>::random_sparse(&ann, case + 1);
        let b = DenseTensor::<f64>::random(&[k, n], case + 2);
        let plan = plan_for([m, k, n], Some(PitAxis::rows("m")), &mut rng);
        let p = Permutation::random("m", m, case + 3);
        let pa = apply_permutation(&a, &p, 0).unwrap();
        let pann = SparsityAnnotation::from_mask(pa.data(), &[m, k], &[1, g]).unwrap();
        let (c, _) = run_sparse_matmul(&plan, &a, &b, &ann, workers).unwrap();
        let (pc, _) = run_sparse_matmul(&plan, &pa, &b, &pann, workers).unwrap();
        let back = apply_permutation(&pc, &p.invert(), 0).unwrap();
        ensure!(
            back.data()
                .iter()
                .zip(c.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "case {case}: m permutation not bit-exact ({m}x{k}x{n}, {})",
            plan.dump()
        );

        // k: column-block annotation, joint permutation of A columns and B rows.
        let g = rng.random_range(1..=m);
        let ann = SparsityAnnotation::random(&[m, k], &[g, 1], ratio, case + 4).unwrap();
        let a = DenseTensor::<f64>::random_sparse(&ann, case + 5);
        let plan = plan_for([m, k, n], Some(PitAxis::cols("k")), &mut rng);
        let p = Permutation::random("k", k, case + 6);
        let pa = apply_permutation(&a, &p, 1).unwrap();
        let pb = apply_permutation(&b, &p, 0).unwrap();
        let pann = SparsityAnnotation::from_mask(pa.data(), &[m, k], &[g, 1]).unwrap();
        let (c, _) =
            run_sparse_matmul(&plan, &a.to_layout(Layout::ColMajor), &b, &ann, workers).unwrap();
        let (pc, _) =
            run_sparse_matmul(&plan, &pa.to_layout(Layout::ColMajor), &pb, &pann, workers).unwrap();
        let c_ref = c.cast::<f64>();
        let cmp = compare(&pc, &c_ref).unwrap();
        ensure!(
            cmp.rel_err <= 1e-12,
            "case {case}: k permutation rel err {:e}",
            cmp.rel_err
        );
        worst_k = worst_k.max(cmp.rel_err);
    }
    within_budget(
        start,
        Duration::from_secs(60),
        format!("100 cases, worst k rel err {worst_k:.1e}"),
    )
}

fn zero_rows_exact(a: &DenseTensor<f32>, c: &DenseTensor<f32>) -> bool {
    let [m, k] = a.shape2().unwrap();
    let n = c.shape()[1];
    (0..m)
        .filter(|&i| (0..k).all(|j| a.get2(i, j) == 0.0))
        .all(|i| (0..n).all(|j| c.get2(i, j) == 0.0))
}

/// Sparse execution against the f64 triple-loop oracle.
fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for case in 0..300u64 {
        let dims = [
            *[256, 512].choose(&mut rng).unwrap(),
            *[256, 512].choose(&mut rng).unwrap(),
            *[256, 512].choose(&mut rng).unwrap(),
        ];
        let ratio = *[0.0, 0.5, 0.9, 0.99].choose(&mut rng).unwrap();
        let row_blocks = rng.random_bool(0.5);
        let plan = if row_blocks {
            plan_for(dims, Some(PitAxis::rows("m")), &mut rng)
        } else {
            plan_for(dims, Some(PitAxis::cols("k")), &mut rng)
        };
        let gran = if row_blocks {
            [1, plan.tile.shape[1]]
        } else {
            [*[1, 2, 4, 8, 16, 32].choose(&mut rng).unwrap(), 1]
        };
        let ann = SparsityAnnotation::random(&dims[..2], &gran, ratio, case).unwrap();
        let a = DenseTensor::<f32>::random_sparse(&ann, case + 1);
        let b = DenseTensor::<f32>::random(&[dims[1], dims[2]], case + 2);
        let want = run_dense_reference(&a, &b).unwrap();
        let (c, _) =
            run_sparse_matmul(&plan, &a.to_layout(plan.sparse_layout), &b, &ann, 1).unwrap();
        let cmp = compare(&c, &want).unwrap();
        ensure!(
            cmp.passes(),
            "case {case} {dims:?} {gran:?}@{ratio}: rel err {:e}",
            cmp.rel_err
        );
        ensure!(
            zero_rows_exact(&a, &c),
            "case {case}: zero row of A gave a non-zero C row"
        );
        worst = worst.max(cmp.rel_err);
    }
    within_budget(
        start,
        Duration::from_secs(300),
        format!("300 cases, worst rel err {worst:.1e}"),
    )
}

/// Index construction is order-free across worker counts, and execution does
/// not depend on the order within groups.
fn unordered_index() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200u64 {
        let dims = [
            rng.random_range(1..300),
            rng.random_range(1..300),
            rng.random_range(1..64),
        ];
        let gran = [rng.random_range(1..=8), rng.random_range(1..=8)];
        let ratio = rng.random_range(0.0..1.0);
        let ann = SparsityAnnotation::random(&dims[..2], &gran, ratio, case).unwrap();
        let axis = if rng.random_bool(0.5) {
            PitAxis::rows("m")
        } else {
            PitAxis::cols("k")
        };
        let plan = plan_for(dims, Some(axis.clone()), &mut rng);

        let base = MicroTileIndex::from_annotation(&ann, &plan.micro_tile, axis.clone(), 1)
            .unwrap()
            .canonicalize();
        for workers in [2, 4, 8] {
            let idx =
                MicroTileIndex::from_annotation(&ann, &plan.micro_tile, axis.clone(), workers)
                    .unwrap()
                    .canonicalize();
            ensure!(
                idx == base,
                "case {case}: {workers} workers gave a different index"
            );
        }

        let a = DenseTensor::<f32>::random_sparse(&ann, case + 1).to_layout(plan.sparse_layout);
        let b = DenseTensor::<f32>::random(&[dims[1], dims[2]], case + 2);
        let want = run_dense_reference(&a, &b).unwrap();
        let mut shuffled = base.clone();
        shuffled.shuffle(case + 3);
        let (c, _) = run_sparse_matmul_indexed(&plan, &a, &b, &shuffled, 2).unwrap();
        let cmp = compare(&c, &want).unwrap();
        ensure!(
            cmp.passes(),
            "case {case}: shuffled index rel err {:e}",
            cmp.rel_err
        );
    }
    within_budget(
        start,
        Duration::from_secs(120),
        "200 pairs x workers {1,2,4,8}".into(),
    )
}

fn pit_axis_table() -> Outcome {
    let rows = [
        ("C[p] += A[p,l]", vec!["l", "p"]),
        ("C[p] = A[p] + B[p]", vec!["p"]),
        ("C[m,n] += A[m,k] * B[k,n]", vec!["k", "m", "n"]),
        ("C[b,m,n] += A[b,m,k] * B[b,k,n]", vec!["b", "k", "m", "n"]),
        (
            "C[n,f,x,y] += A[n,m,x+i,y+j] * B[f,m,i,j]",
            vec!["f", "m", "n"],
        ),
    ];
    for (text, want) in &rows {
        let expr = parse_expr(text).map_err(|e| e.to_string())?;
        let got: Vec<String> = expr.pit_axes().into_iter().collect();
        ensure!(got == *want, "{text}: {got:?} != {want:?}");
    }
    Ok("5 operators".into())
}

/// Gather/scatter overhead relative to the dense plan at 1024^3.
fn gather_overhead() -> Outcome {
    let n = 1024;
    let dims = [n, n, n];
    let reg = register_builtin_kernels();
    let tile = reg.lookup(OpKind::MatMul, &[16, 32, 128]).unwrap().clone();
    let dense = SparseKernelPlan::new(
        OpKind::MatMul,
        &dims,
        PlanKind::Dense,
        &tile,
        1e-6,
        Layout::RowMajor,
    )
    .unwrap();
    let m_plan = SparseKernelPlan::new(
        OpKind::MatMul,
        &dims,
        PlanKind::Pit(PitAxis::rows("m")),
        &tile,
        1e-6,
        Layout::RowMajor,
    )
    .unwrap();
    let b = DenseTensor::<f32>::random(&[n, n], 7);
    let reps = 5;

    let full = SparsityAnnotation::ones(&[n, n], &[1, 32]).unwrap();
    let a = DenseTensor::<f32>::random(&[n, n], 8);
    let dense_ms = bench::time_matmul(&dense, &a, &b, &full, 1, reps)
        .map_err(|e| e.to_string())?
        .wall_ms;
    let through_ms = bench::time_matmul(&m_plan, &a, &b, &full, 1, reps)
        .map_err(|e| e.to_string())?
        .wall_ms;
    let overhead = through_ms / dense_ms;

    let sparse = SparsityAnnotation::random(&[n, n], &[1, 32], 0.95, 9).unwrap();
    let a = DenseTensor::<f32>::random_sparse(&sparse, 10);
    let sparse_dense_ms = bench::time_matmul(&dense, &a, &b, &sparse, 1, reps)
        .map_err(|e| e.to_string())?
        .wall_ms;
    let sparse_ms = bench::time_matmul(&m_plan, &a, &b, &sparse, 1, reps)
        .map_err(|e| e.to_string())?
        .wall_ms;
    let speedup = sparse_dense_ms / sparse_ms;

    let detail = format!(
        "dense {dense_ms:.1}ms, all-dense via m-path {through_ms:.1}ms ({overhead:.2}x); \
         95% rows: dense {sparse_dense_ms:.1}ms, sparse {sparse_ms:.1}ms ({speedup:.1}x)"
    );
    ensure!(
        overhead <= 1.35,
        "overhead {overhead:.2}x > 1.35x: {detail}"
    );
    ensure!(speedup >= 3.0, "speedup {speedup:.2}x < 3x: {detail}");
    Ok(detail)
}

fn measured_profile() -> ProfileTable {
    let opts = ProfileOptions {
        reps: 3,
        warmup: 1,
        reps_inner: None,
    };
    profile_with(&register_builtin_kernels(), opts).unwrap()
}

/// The selected plan is the argmin of independently recomputed costs, is
/// unchanged by scaling the profile, and falls back to dense on dense data.
fn selection_integrity() -> Outcome {
    let start = Instant::now();
    let reg = register_builtin_kernels();
    let profile = measured_profile();
    let scaled = profile.scaled(7.3).unwrap();
    let expr = parse_expr("C[m,n] += A[m,k] * B[k,n]").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut sparse_wins = 0;
    for set in 0..50u64 {
        let dims = [
            rng.random_range(64..1024),
            rng.random_range(64..1024),
            rng.random_range(64..1024),
        ];
        let ext = parse_extents(&format!("m={},k={},n={}", dims[0], dims[1], dims[2])).unwrap();
        let gran = *[[1, 32], [1, 64], [8, 1], [32, 1], [4, 4]]
            .choose(&mut rng)
            .unwrap();
        let ratio = *[0.0, 0.5, 0.9, 0.95, 0.99].choose(&mut rng).unwrap();
        let samples: Vec<_> = (0..rng.random_range(1..=4))
            .map(|s| SparsityAnnotation::random(&dims[..2], &gran, ratio, set * 10 + s).unwrap())
            .collect();
        let sel = kernel_selection(
            &expr,
            &ext,
            &samples,
            &reg,
            &profile,
            SelectionOptions::default(),
        )
        .map_err(|e| e.to_string())?;

        // Independent enumeration of every (tile, axis) pair plus dense,
        // ordered by cost, dense first, larger tile, impl id, axis.
        let mut all = Vec::new();
        for tile in reg.for_op(OpKind::MatMul) {
            let cost = profile.cost(tile).unwrap();
            for (rank, kind) in [
                PlanKind::Dense,
                PlanKind::Pit(PitAxis::rows("m")),
                PlanKind::Pit(PitAxis::cols("k")),
            ]
            .into_iter()
            .enumerate()
            {
                let plan = SparseKernelPlan::new(
                    OpKind::MatMul,
                    &dims,
                    kind,
                    tile,
                    cost,
                    Layout::RowMajor,
                )
                .unwrap();
                let mut total = 0.0;
                for ann in &samples {
                    total += estimate_plan_cost(&plan, ann).unwrap();
                }
                all.push((
                    total,
                    rank.min(1),
                    std::cmp::Reverse(tile.flops()),
                    tile.impl_id.clone(),
                    plan.axis_label().to_string(),
                    plan,
                ));
            }
        }
        let best = all.into_iter().min_by(|x, y| {
            x.0.total_cmp(&y.0)
                .then_with(|| (x.1, &x.2, &x.3, &x.4).cmp(&(y.1, &y.2, &y.3, &y.4)))
        });
        let want = best.unwrap().5;
        ensure!(
            sel.best.kind == want.kind && sel.best.tile == want.tile,
            "set {set}: selected {} but argmin is {}",
            sel.best.dump(),
            want.dump()
        );
        for c in &sel.candidates {
            let total: f64 = samples
                .iter()
                .map(|s| estimate_plan_cost(&c.plan, s).unwrap())
                .sum();
            ensure!(
                c.total_cost == total,
                "set {set}: reported cost of {} does not sum-check",
                c.plan.dump()
            );
        }

        let resel = kernel_selection(
            &expr,
            &ext,
            &samples,
            &reg,
            &scaled,
            SelectionOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            resel.best.kind == sel.best.kind && resel.best.tile == sel.best.tile,
            "set {set}: scaling the profile by 7.3 changed the plan"
        );

        if ratio == 0.0 {
            ensure!(
                sel.best.is_dense(),
                "set {set}: dense samples selected {}",
                sel.best.dump()
            );
        }
        if !sel.best.is_dense() {
            sparse_wins += 1;
        }
    }
    let ext = parse_extents("m=512,k=512,n=512").unwrap();
    let dense_samples: Vec<_> = (0..3)
        .map(|s| SparsityAnnotation::random(&[512, 512], &[1, 1], 0.0, s).unwrap())
        .collect();
    let sel = kernel_selection(
        &expr,
        &ext,
        &dense_samples,
        &reg,
        &profile,
        SelectionOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        sel.best.is_dense(),
        "zero-sparsity samples selected {}",
        sel.best.dump()
    );
    within_budget(
        start,
        Duration::from_secs(120),
        format!("50 sample sets, {sparse_wins} sparse winners"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 cover-ratio table", cover_ratios),
        ("2 permutation invariance", permutation_invariance),
        ("3 oracle equivalence", oracle_equivalence),
        ("4 unordered parallel index", unordered_index),
        ("5 PIT-axis analysis", pit_axis_table),
        ("6 gather/scatter overhead", gather_overhead),
        ("7 selection argmin integrity", selection_integrity),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
