use pit_core::exec::{
    apply_permutation, compare, reference_reduce_sum, run_dense_reference, run_sparse_matmul,
    run_sparse_reduce_sum, sread, swrite, DenseTensor, Layout, Permutation, TileBuffer,
};
use pit_core::expr::parse_expr;
use pit_core::index::{MicroTileIndex, PitAxis};
use pit_core::parse_extents;
use pit_core::policy::{
    cover_count, estimate_plan_cost, kernel_selection, PlanKind, SelectionOptions, SparseKernelPlan,
};
use pit_core::sparsity::SparsityAnnotation;
use pit_core::tiles::{register_builtin_kernels, OpKind, ProfileTable, TileKernelDescriptor};
use proptest::prelude::*;

fn annotation() -> impl Strategy<Value = SparsityAnnotation> {
    (
        1usize..80,
        1usize..80,
        1usize..9,
        1usize..9,
        0.0f64..1.0,
        any::<u64>(),
    )
        .prop_map(|(r, c, g0, g1, ratio, seed)| {
            SparsityAnnotation::random(&[r, c], &[g0, g1], ratio, seed).unwrap()
        })
}

/// Independent cover count: test every micro-tile against every element.
fn brute_cover(ann: &SparsityAnnotation, mt: [usize; 2]) -> usize {
    let [r, c] = ann.shape();
    let mut n = 0;
    for tr in 0..r.div_ceil(mt[0]) {
        for tc in 0..c.div_ceil(mt[1]) {
            let hit = (tr * mt[0]..((tr + 1) * mt[0]).min(r)).any(|i| {
                (tc * mt[1]..((tc + 1) * mt[1]).min(c)).any(|j| ann.element_nonzero(i, j))
            });
            n += hit as usize;
        }
    }
    n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn cover_count_equals_index_total(ann in annotation(), h in 1usize..20, w in 1usize..20, dim in 0usize..2) {
        let axis = PitAxis::new("x", dim);
        let got = cover_count(&ann, &[h, w], &axis).unwrap();
        let idx = MicroTileIndex::from_annotation(&ann, &[h, w], axis, 2).unwrap();
        prop_assert_eq!(got, idx.total());
        prop_assert_eq!(got, brute_cover(&ann, [h, w]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_blocks_never_lowers_cost(ann in annotation(), extra in proptest::collection::vec((0usize..80, 0usize..80), 1..20)) {
        let [r, c] = ann.shape();
        let mut more = ann.clone();
        let [gr, gc] = ann.grid();
        for (i, j) in extra {
            more.set(i % gr, j % gc, true);
        }
        for tile in register_builtin_kernels().for_op(OpKind::MatMul) {
            for kind in [PlanKind::Dense, PlanKind::Pit(PitAxis::rows("m")), PlanKind::Pit(PitAxis::cols("k"))] {
                let plan = SparseKernelPlan::new(OpKind::MatMul, &[r, c, 64], kind, tile, 1e-6, Layout::RowMajor).unwrap();
                prop_assert!(estimate_plan_cost(&plan, &more).unwrap() >= estimate_plan_cost(&plan, &ann).unwrap());
            }
        }
    }

    #[test]
    fn scaling_profile_keeps_argmin(ratio in 0.0f64..1.0, g in prop::sample::select(vec![[1, 32], [8, 1], [2, 2], [32, 1]]), seed in any::<u64>(), factor in 0.01f64..100.0) {
        let reg = register_builtin_kernels();
        let prof = ProfileTable::flop_proportional(&reg, 3e-11).unwrap();
        // Perturb so tiles do not all share one per-flop cost.
        let mut prof2 = ProfileTable::new("perturbed", 1);
        for (i, e) in prof.entries().iter().enumerate() {
            prof2.insert(e.desc.clone(), e.cost * (1.0 + 0.13 * i as f64)).unwrap();
        }
        let expr = parse_expr("C[m,n] += A[m,k] * B[k,n]").unwrap();
        let ext = parse_extents("m=256,k=256,n=128").unwrap();
        let samples = vec![SparsityAnnotation::random(&[256, 256], &g, ratio, seed).unwrap()];
        let a = kernel_selection(&expr, &ext, &samples, &reg, &prof2, SelectionOptions::default()).unwrap();
        let b = kernel_selection(&expr, &ext, &samples, &reg, &prof2.scaled(factor).unwrap(), SelectionOptions::default()).unwrap();
        prop_assert_eq!(&a.best.kind, &b.best.kind);
        prop_assert_eq!(&a.best.tile, &b.best.tile);
    }

    #[test]
    fn expression_display_round_trips(pick in 0usize..5) {
        let texts = [
            "C[p] += A[p,l]",
            "C[p] = A[p] + B[p]",
            "C[m,n] += A[m,k] * B[k,n]",
            "C[b,m,n] += A[b,m,k] * B[b,k,n]",
            "C[n,f,x,y] += A[n,m,x+i,y+j] * B[f,m,i,j]",
        ];
        let e = parse_expr(texts[pick]).unwrap();
        let again = parse_expr(&e.to_string()).unwrap();
        prop_assert_eq!(e, again);
    }

    #[test]
    fn annotation_text_round_trips(ann in annotation()) {
        prop_assert_eq!(SparsityAnnotation::from_text(&ann.to_text()).unwrap(), ann);
    }

    #[test]
    fn tensor_file_round_trips(r in 1usize..20, c in 1usize..20, seed in any::<u64>(), col in any::<bool>()) {
        let t = DenseTensor::<f32>::random(&[r, c], seed);
        let t = if col { t.to_layout(Layout::ColMajor) } else { t };
        let mut bytes = Vec::new();
        t.write_to(&mut bytes).unwrap();
        prop_assert_eq!(DenseTensor::<f32>::read_from(&bytes[..]).unwrap(), t);
    }

    #[test]
    fn permutation_inverse(n in 1usize..200, seed in any::<u64>()) {
        let p = Permutation::random("m", n, seed);
        prop_assert!(p.invert().compose(&p).unwrap().is_identity());
        prop_assert_eq!(p.invert().invert(), p.clone());
        let t = DenseTensor::<f64>::random(&[n, 3], seed);
        let back = apply_permutation(&apply_permutation(&t, &p, 0).unwrap(), &p.invert(), 0).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn gather_scatter_restores_nonzeros(ann in annotation(), slots in 1usize..6, dim in 0usize..2, seed in any::<u64>()) {
        let src = DenseTensor::<f32>::random_sparse(&ann, seed);
        let mt = if dim == 0 { [1, 4] } else { [4, 1] };
        let mut idx = MicroTileIndex::from_annotation(&ann, &mt, PitAxis::new("x", dim), 1).unwrap();
        idx.shuffle(seed);
        let mut dst = DenseTensor::zeros(src.shape(), Layout::RowMajor);
        let mut tile = TileBuffer::for_index(&idx, slots);
        for g in 0..idx.num_groups() {
            for chunk in 0..idx.group(g).len().div_ceil(slots) {
                sread(&src, &idx, g, chunk, &mut tile).unwrap();
                swrite(&tile, &mut dst, &idx, g, chunk).unwrap();
            }
        }
        prop_assert_eq!(dst, src);
    }

    #[test]
    fn sparse_matmul_matches_oracle(ann in annotation(), n in 1usize..40, pick in 0usize..4, axis in 0usize..3, workers in 1usize..4, seed in any::<u64>()) {
        let [m, k] = ann.shape();
        let tiles: Vec<TileKernelDescriptor> = register_builtin_kernels().for_op(OpKind::MatMul).cloned().collect();
        let kind = match axis {
            0 => PlanKind::Dense,
            1 => PlanKind::Pit(PitAxis::rows("m")),
            _ => PlanKind::Pit(PitAxis::cols("k")),
        };
        let plan = SparseKernelPlan::new(OpKind::MatMul, &[m, k, n], kind, &tiles[pick], 1e-6, Layout::RowMajor).unwrap();
        let a = DenseTensor::<f32>::random_sparse(&ann, seed);
        let b = DenseTensor::<f32>::random(&[k, n], seed ^ 1);
        let want = run_dense_reference(&a, &b).unwrap();
        let (c, _) = run_sparse_matmul(&plan, &a.to_layout(plan.sparse_layout), &b, &ann, workers).unwrap();
        prop_assert!(compare(&c, &want).unwrap().passes());
    }

    #[test]
    fn sparse_reduce_matches_oracle(ann in annotation(), tile in prop::sample::select(vec![[1, 64], [1, 256], [4, 8]]), axis in 0usize..3, seed in any::<u64>()) {
        let kind = match axis {
            0 => PlanKind::Dense,
            1 => PlanKind::Pit(PitAxis::rows("p")),
            _ => PlanKind::Pit(PitAxis::cols("l")),
        };
        let t = TileKernelDescriptor::reduce_sum(tile[0], tile[1]);
        let plan = SparseKernelPlan::new(OpKind::ReduceSum, &ann.shape(), kind, &t, 1e-7, Layout::RowMajor).unwrap();
        let a = DenseTensor::<f32>::random_sparse(&ann, seed);
        let want = reference_reduce_sum(&a).unwrap();
        let (c, _) = run_sparse_reduce_sum(&plan, &a.to_layout(plan.sparse_layout), &ann, 2).unwrap();
        prop_assert!(compare(&c, &want).unwrap().passes());
    }
}
