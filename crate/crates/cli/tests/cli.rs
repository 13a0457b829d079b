use std::path::Path;
use std::process::{Command, Output};

use pit_cli::{run_from, CliError};
use pit_core::exec::DenseTensor;
use pit_core::policy::{estimate_plan_cost, PlanKind, SparseKernelPlan};
use pit_core::tiles::{register_builtin_kernels, OpKind, ProfileTable};
use pit_core::{Layout, PitAxis, SparsityAnnotation};
use tempfile::TempDir;

const MATMUL: &str = "C[m,n] += A[m,k] * B[k,n]";

fn pit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pit"))
        .args(args)
        .env_remove("PIT_PROFILE")
        .output()
        .expect("spawn pit")
}

fn call(args: &[&str]) -> Result<String, CliError> {
    let mut out = Vec::new();
    let mut full = vec!["pit"];
    full.extend_from_slice(args);
    run_from(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn flop_profile(dir: &TempDir) -> String {
    let path = dir.path().join("flops.profile");
    ProfileTable::flop_proportional(&register_builtin_kernels(), 1e-10)
        .unwrap()
        .save(&path)
        .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn analyze_lists_pit_axes() {
    let out = call(&["analyze", "--expr", MATMUL]).unwrap();
    assert!(out.contains("pit_axes k,m,n"), "{out}");
    let conv = call(&[
        "analyze",
        "--expr",
        "C[n,f,x,y] += A[n,m,x+i,y+j] * B[f,m,i,j]",
    ])
    .unwrap();
    assert!(conv.contains("pit_axes f,m,n"));
    for axis in ["x", "y", "i", "j"] {
        let line = conv
            .lines()
            .find(|l| l.starts_with(&format!("{axis} ")))
            .unwrap();
        assert!(line.ends_with("no"), "{line}");
    }
}

#[test]
fn bad_syntax_exits_2() {
    let o = pit(&["analyze", "--expr", "C[m,n] += A[m,k"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("column"));
    assert_eq!(pit(&["run", "--expr", MATMUL]).status.code(), Some(2));
}

#[test]
fn profile_writes_every_tile() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("p.txt");
    let p = path.to_str().unwrap();
    call(&["profile", "--reps", "1", "--warmup", "0", "--out", p]).unwrap();
    let first = ProfileTable::load(&path).unwrap();
    assert!(first.len() >= 4);
    assert!(first.covers(&register_builtin_kernels()));
    // Overwrites in place.
    call(&["profile", "--reps", "1", "--out", p]).unwrap();
    assert_eq!(ProfileTable::load(&path).unwrap().len(), first.len());
}

#[test]
fn profile_costs_are_stable_across_runs() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("p.txt");
    let p = path.to_str().unwrap();
    call(&["profile", "--reps", "7", "--out", p]).unwrap();
    let a = ProfileTable::load(&path).unwrap();
    call(&["profile", "--reps", "7", "--out", p]).unwrap();
    let b = ProfileTable::load(&path).unwrap();
    for (x, y) in a.entries().iter().zip(b.entries()) {
        if x.desc.op != OpKind::MatMul {
            continue;
        }
        let drift = (x.cost - y.cost).abs() / x.cost;
        assert!(drift < 0.25, "{}: {} vs {}", x.desc.impl_id, x.cost, y.cost);
    }
}

#[test]
fn unwritable_profile_exits_3() {
    let o = pit(&["profile", "--reps", "1", "--out", "/nonexistent-dir/p.txt"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn select_falls_back_to_dense_on_dense_samples() {
    let dir = TempDir::new().unwrap();
    let prof = flop_profile(&dir);
    let out = call(&[
        "select",
        "--expr",
        MATMUL,
        "--shape",
        "m=256,k=256,n=256",
        "--random",
        "8x1:0",
        "--profile",
        &prof,
    ])
    .unwrap();
    assert!(
        out.lines().next().unwrap().contains("pit_axis=dense"),
        "{out}"
    );
}

#[test]
fn select_flop_profile_picks_exact_cover() {
    let dir = TempDir::new().unwrap();
    let prof = flop_profile(&dir);
    let out = call(&[
        "select",
        "--expr",
        MATMUL,
        "--shape",
        "m=1024,k=1024,n=1024",
        "--random",
        "8x1:0.95",
        "--profile",
        &prof,
    ])
    .unwrap();
    let plan = out.lines().next().unwrap();
    assert!(plan.contains("microtile=8x1"), "{plan}");
    assert!(plan.contains("tile=8x32x128"), "{plan}");
}

#[test]
fn select_costs_sum_check() {
    let dir = TempDir::new().unwrap();
    let prof_path = flop_profile(&dir);
    let (shape, seed, samples) = ([512, 384], 5u64, 3usize);
    let out = call(&[
        "select",
        "--expr",
        MATMUL,
        "--shape",
        "m=512,k=384,n=200",
        "--random",
        "4x4:0.9",
        "--samples",
        "3",
        "--seed",
        "5",
        "--profile",
        &prof_path,
    ])
    .unwrap();
    let profile = ProfileTable::load(&prof_path).unwrap();
    let reg = register_builtin_kernels();
    let anns: Vec<_> = (0..samples as u64)
        .map(|s| SparsityAnnotation::random(&shape, &[4, 4], 0.9, seed + s).unwrap())
        .collect();
    let mut seen = 0;
    for line in out.lines().filter(|l| l.starts_with("candidate ")) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let tile = reg.by_impl_id(f[1]).unwrap();
        let kind = match f[2] {
            "dense" => PlanKind::Dense,
            "m" => PlanKind::Pit(PitAxis::rows("m")),
            "k" => PlanKind::Pit(PitAxis::cols("k")),
            other => panic!("axis {other}"),
        };
        let plan = SparseKernelPlan::new(
            OpKind::MatMul,
            &[512, 384, 200],
            kind,
            tile,
            profile.cost(tile).unwrap(),
            Layout::RowMajor,
        )
        .unwrap();
        let mut want = 0.0;
        for a in &anns {
            want += estimate_plan_cost(&plan, a).unwrap();
        }
        let printed: f64 = f[6].parse().unwrap();
        assert_eq!(printed, want, "{line}");
        seen += 1;
    }
    assert_eq!(seen, 12);
}

#[test]
fn select_errors() {
    let dir = TempDir::new().unwrap();
    let o = pit(&[
        "select",
        "--expr",
        MATMUL,
        "--shape",
        "m=64,k=64,n=64",
        "--random",
        "1x1:0.5",
    ]);
    assert_ne!(o.status.code(), Some(0));

    let prof = flop_profile(&dir);
    let bad = dir.path().join("bad.ann");
    std::fs::write(&bad, "shape 4 4\ngranularity 2 2\n10\n1x\n").unwrap();
    let o = pit(&[
        "select",
        "--expr",
        MATMUL,
        "--shape",
        "m=4,k=4,n=4",
        "--sparsity-file",
        bad.to_str().unwrap(),
        "--profile",
        &prof,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 4"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn run_verifies_row_sparse_matmul() {
    let dir = TempDir::new().unwrap();
    let prof = flop_profile(&dir);
    let out = call(&[
        "run",
        "--expr",
        MATMUL,
        "--shape",
        "m=512,k=512,n=512",
        "--random",
        "1x32:0.99",
        "--profile",
        &prof,
        "--verify",
    ])
    .unwrap();
    assert!(out.contains("PASS"), "{out}");
}

#[test]
fn run_forced_plans_verify() {
    for plan in ["dense", "pit:m", "pit:k"] {
        let out = call(&[
            "run",
            "--expr",
            MATMUL,
            "--shape",
            "m=200,k=130,n=70",
            "--random",
            "4x1:0.7",
            "--plan",
            plan,
            "--verify",
            "--workers",
            "3",
            "--dtype",
            "f64",
        ])
        .unwrap();
        assert!(out.contains("PASS"), "{plan}: {out}");
        let want = if plan == "dense" { "dense" } else { &plan[4..] };
        assert!(out.contains(&format!("pit_axis={want} ")), "{out}");
    }
    let o = pit(&[
        "run",
        "--expr",
        MATMUL,
        "--shape",
        "m=8,k=8,n=8",
        "--random",
        "1x1:0.5",
        "--plan",
        "pit:n",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_zero_annotation_writes_zeros() {
    let dir = TempDir::new().unwrap();
    let c = dir.path().join("c.pitt");
    call(&[
        "run",
        "--expr",
        MATMUL,
        "--shape",
        "m=64,k=64,n=32",
        "--random",
        "1x32:1.0",
        "--plan",
        "pit:m",
        "--out",
        c.to_str().unwrap(),
    ])
    .unwrap();
    let t = DenseTensor::<f32>::load(&c).unwrap();
    assert_eq!(t.shape(), [64, 32]);
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn run_other_operators() {
    let out = call(&[
        "run",
        "--expr",
        "C[p] += A[p,l]",
        "--shape",
        "p=100,l=500",
        "--random",
        "1x8:0.8",
        "--plan",
        "pit:l",
        "--tile",
        "1x64",
        "--verify",
    ])
    .unwrap();
    assert!(out.contains("PASS"), "{out}");
    let out = call(&[
        "run",
        "--expr",
        "C[b,m,n] += A[b,m,k] * B[b,k,n]",
        "--shape",
        "b=3,m=64,k=64,n=40",
        "--random",
        "1x32:0.5",
        "--plan",
        "pit:m",
        "--verify",
    ])
    .unwrap();
    assert!(out.contains("PASS"), "{out}");
    let out = call(&[
        "run",
        "--expr",
        MATMUL,
        "--shape",
        "m=4,k=40,n=16",
        "--ragged",
        "3,40,0,17",
        "--plan",
        "pit:m",
        "--verify",
    ])
    .unwrap();
    assert!(out.contains("PASS"), "{out}");
    let o = pit(&[
        "run",
        "--expr",
        "C[p] = A[p] + B[p]",
        "--shape",
        "p=16",
        "--random",
        "1x1:0.5",
        "--plan",
        "dense",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn index_dump() {
    let out = call(&[
        "index",
        "--expr",
        MATMUL,
        "--shape",
        "m=8,k=64,n=8",
        "--random",
        "1x32:0.5",
        "--plan",
        "pit:m",
        "--seed",
        "3",
    ])
    .unwrap();
    assert!(out.starts_with("microtile 1 32\npit_axis m\n"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("group ")).count(), 2);
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bench_sweep_rows() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("bench.csv");
    call(&[
        "bench",
        "--shape",
        "m=512,k=512,n=512",
        "--granularity",
        "1x32",
        "--reps",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ])
    .unwrap();
    let rows = read_csv(&csv);
    assert_eq!(
        rows[0].join(","),
        "op,shape,granularity,zero_ratio,plan,microtile,tile,launches,wall_ms,dense_wall_ms,speedup"
    );
    let body = &rows[1..];
    for plan in ["dense", "m", "k"] {
        assert_eq!(body.iter().filter(|r| r[4] == plan).count(), 4);
    }
    for r in body.iter().filter(|r| r[4] == "dense") {
        assert_eq!(r[10].parse::<f64>().unwrap(), 1.0);
    }
    let sparse = body.iter().find(|r| r[4] == "m" && r[3] == "0.99").unwrap();
    assert!(sparse[10].parse::<f64>().unwrap() > 1.0, "{sparse:?}");
}
