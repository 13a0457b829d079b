//! `pit` command-line front end.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use pit_core::bench::{self, BenchRow, CSV_HEADER};
use pit_core::exec::{
    compare, reference_reduce_sum, run_batched_sparse_matmul, run_dense_reference,
    run_sparse_matmul, run_sparse_reduce_sum, Comparison, DType, DenseTensor, Element, Layout,
};
use pit_core::expr::{parse_expr, parse_extents, Extents, TensorExpr};
use pit_core::index::MicroTileIndex;
use pit_core::policy::{
    bind_operator, candidate_order, evaluate_candidate, CandidateCost, OperatorBinding, PlanKind,
    SparseKernelPlan,
};
use pit_core::sparsity::SparsityAnnotation;
use pit_core::tiles::{
    machine_fingerprint, profile_with, register_builtin_kernels, KernelRegistry, OpKind,
    ProfileOptions, ProfileTable,
};
use pit_core::PitError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pit(#[from] PitError),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: PitError },

    #[error("{0}")]
    Usage(String),

    #[error("verification failed: relative error {0:e}")]
    Verify(f64),

    #[error("output: {0}")]
    Output(#[from] io::Error),
}

impl CliError {
    /// 0 ok, 1 verification failure, 2 usage or parse error, 3 I/O error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Output(_) | CliError::Pit(PitError::Io(_)) => 3,
            CliError::File { source, .. } => match source {
                PitError::Io(_) => 3,
                _ => 2,
            },
            CliError::Pit(_) | CliError::Usage(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn file_err(path: &Path) -> impl FnOnce(PitError) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pit",
    version,
    about = "Plan and execute dynamically sparse tensor operators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify every axis of an expression and list its PIT axes.
    Analyze {
        /// Tensor expression, e.g. `C[m,n] += A[m,k] * B[k,n]`
        #[arg(long)]
        expr: String,
    },
    /// Measure per-launch cost of every built-in tile and write a profile.
    Profile(ProfileArgs),
    /// Choose a plan for sampled sparsity and print every candidate's cost.
    Select(SelectArgs),
    /// Execute an operator under a selected or forced plan.
    Run(RunArgs),
    /// Time plans against the dense plan over a sparsity sweep; emits CSV.
    Bench(BenchArgs),
    /// Print the micro-tile index a plan would build.
    Index(IndexArgs),
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, default_value_t = 7)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Output path; defaults to --profile.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "PIT_PROFILE")]
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct SparsityArgs {
    /// Annotation text file.
    #[arg(long)]
    pub sparsity_file: Option<PathBuf>,
    /// Random blocks: `g0xg1:zero_ratio`.
    #[arg(long)]
    pub random: Option<String>,
    /// Per-row valid lengths of the sparse operand.
    #[arg(long, value_delimiter = ',')]
    pub ragged: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Tensor expression, e.g. `C[m,n] += A[m,k] * B[k,n]`
    #[arg(long)]
    pub expr: String,
    /// Axis extents, e.g. `m=512,k=512,n=512`.
    #[arg(long)]
    pub shape: String,
    #[command(flatten)]
    pub sparsity: SparsityArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Number of random samples (file and ragged sources give one).
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, env = "PIT_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Exclude the dense fallback.
    #[arg(long)]
    pub no_dense: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = "f32")]
    pub dtype: String,
    #[arg(long, env = "PIT_PROFILE")]
    pub profile: Option<PathBuf>,
    /// `auto`, `dense` or `pit:<axis>`.
    #[arg(long, default_value = "auto")]
    pub plan: String,
    /// Restrict to one tile shape, e.g. `16x32x128`.
    #[arg(long)]
    pub tile: Option<String>,
    /// Compare against the f64 reference.
    #[arg(long)]
    pub verify: bool,
    /// Write the result tensor here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "C[m,n] += A[m,k] * B[k,n]")]
    pub expr: String,
    #[arg(long, default_value = "m=1024,k=1024,n=1024")]
    pub shape: String,
    /// Block granularity `g0xg1`.
    #[arg(long, default_value = "1x32")]
    pub granularity: String,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.9,0.95,0.99")]
    pub ratios: Vec<f64>,
    /// Plans to time, each `auto`, `dense` or `pit:<axis>`.
    #[arg(long, value_delimiter = ',', default_value = "dense,pit:m,pit:k")]
    pub plans: Vec<String>,
    #[arg(long, default_value = "16x32x128")]
    pub tile: String,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "PIT_PROFILE")]
    pub profile: Option<PathBuf>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// `pit:<axis>` (dense plans have no index).
    #[arg(long)]
    pub plan: String,
    #[arg(long, default_value = "16x32x128")]
    pub tile: String,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Where sparsity samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SparsitySource {
    File(PathBuf),
    Random {
        granularity: [usize; 2],
        zero_ratio: f64,
    },
    Ragged(Vec<usize>),
}

fn parse_pair(text: &str) -> CliResult<[usize; 2]> {
    let (a, b) = text
        .split_once('x')
        .ok_or_else(|| CliError::Usage(format!("expected AxB, got `{text}`")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("bad number `{s}` in `{text}`")))
    };
    Ok([parse(a)?, parse(b)?])
}

fn parse_dims(text: &str) -> CliResult<Vec<usize>> {
    text.split('x')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad tile shape `{text}`")))
        })
        .collect()
}

impl SparsitySource {
    pub fn from_args(args: &SparsityArgs) -> CliResult<Self> {
        match (&args.sparsity_file, &args.random, &args.ragged) {
            (Some(p), None, None) => Ok(SparsitySource::File(p.clone())),
            (None, Some(text), None) => Self::parse_random(text),
            (None, None, Some(l)) => Ok(SparsitySource::Ragged(l.clone())),
            _ => Err(CliError::Usage(
                "give exactly one of --sparsity-file, --random, --ragged".into(),
            )),
        }
    }

    /// `g0xg1:ratio`.
    pub fn parse_random(text: &str) -> CliResult<Self> {
        let (g, r) = text
            .split_once(':')
            .ok_or_else(|| CliError::Usage(format!("expected g0xg1:ratio, got `{text}`")))?;
        let zero_ratio: f64 = r
            .parse()
            .map_err(|_| CliError::Usage(format!("bad zero ratio `{r}`")))?;
        Ok(SparsitySource::Random {
            granularity: parse_pair(g)?,
            zero_ratio,
        })
    }

    /// `count` annotations over `shape`. Random sources draw a fresh sample
    /// per index; file and ragged sources repeat their single annotation.
    pub fn samples(
        &self,
        shape: [usize; 2],
        count: usize,
        seed: u64,
    ) -> CliResult<Vec<SparsityAnnotation>> {
        let one = match self {
            SparsitySource::Random {
                granularity,
                zero_ratio,
            } => {
                return (0..count as u64)
                    .map(|s| {
                        Ok(SparsityAnnotation::random(
                            &shape,
                            granularity,
                            *zero_ratio,
                            seed.wrapping_add(s),
                        )?)
                    })
                    .collect();
            }
            SparsitySource::File(path) => SparsityAnnotation::load(path).map_err(file_err(path))?,
            SparsitySource::Ragged(lengths) => {
                SparsityAnnotation::from_ragged_lengths(lengths, shape)?
            }
        };
        if one.shape() != shape {
            return Err(CliError::Usage(format!(
                "annotation covers {:?} but the sparse operand is {:?}",
                one.shape(),
                shape
            )));
        }
        Ok(vec![one; count])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanChoice {
    Auto,
    Dense,
    Pit(String),
}

impl FromStr for PlanChoice {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "auto" => Ok(PlanChoice::Auto),
            "dense" => Ok(PlanChoice::Dense),
            _ => match s.strip_prefix("pit:") {
                Some(axis) if !axis.is_empty() => Ok(PlanChoice::Pit(axis.to_string())),
                _ => Err(CliError::Usage(format!(
                    "plan must be auto, dense or pit:<axis>, got `{s}`"
                ))),
            },
        }
    }
}

/// Validated `run` configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub expr: TensorExpr,
    pub extents: Extents,
    pub sparsity: SparsitySource,
    pub seed: u64,
    pub workers: usize,
    pub dtype: DType,
    pub profile: Option<PathBuf>,
    pub plan: PlanChoice,
    pub tile: Option<Vec<usize>>,
    pub verify: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_args(args: &RunArgs) -> CliResult<Self> {
        if args.workers == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        Ok(RunConfig {
            expr: parse_expr(&args.problem.expr)?,
            extents: parse_extents(&args.problem.shape)?,
            sparsity: SparsitySource::from_args(&args.problem.sparsity)?,
            seed: args.problem.seed,
            workers: args.workers,
            dtype: args.dtype.parse()?,
            profile: args.profile.clone(),
            plan: args.plan.parse()?,
            tile: args.tile.as_deref().map(parse_dims).transpose()?,
            verify: args.verify,
            out: args.out.clone(),
        })
    }
}

fn load_profile(path: Option<&Path>, registry: &KernelRegistry) -> CliResult<ProfileTable> {
    let path = path
        .ok_or_else(|| CliError::Usage("no profile: pass --profile or set PIT_PROFILE".into()))?;
    let table = ProfileTable::load(path).map_err(file_err(path))?;
    if table.foreign_fingerprint() {
        warn!(
            "profile {} was measured on `{}`, this machine is `{}`",
            path.display(),
            table.fingerprint(),
            machine_fingerprint()
        );
    }
    if !table.covers(registry) {
        return Err(CliError::File {
            path: path.to_path_buf(),
            source: PitError::Registry("profile does not cover every built-in tile".into()),
        });
    }
    Ok(table)
}

/// Bound problem: operator roles plus extents.
struct Problem {
    binding: OperatorBinding,
    dims: Vec<usize>,
    batch: usize,
}

impl Problem {
    fn new(expr: &TensorExpr, extents: &Extents) -> CliResult<Self> {
        expr.bind(extents)?;
        let binding = bind_operator(expr)?;
        let dims = binding.dims(extents)?;
        if binding.batch_axes.len() > 1 {
            return Err(CliError::Usage(
                "at most one batch axis is supported".into(),
            ));
        }
        let batch = binding.batch_axes.iter().map(|b| extents[b]).product();
        Ok(Problem {
            binding,
            dims,
            batch,
        })
    }

    fn sparse_shape(&self) -> [usize; 2] {
        [self.dims[0], self.dims[1]]
    }
}

/// Candidate plans for a choice, costed over `samples`.
fn candidates(
    problem: &Problem,
    choice: &PlanChoice,
    tile: Option<&[usize]>,
    registry: &KernelRegistry,
    profile: Option<&ProfileTable>,
    samples: &[SparsityAnnotation],
    allow_dense: bool,
) -> CliResult<Vec<CandidateCost>> {
    let op = problem.binding.op;
    let tiles: Vec<_> = match tile {
        Some(shape) => vec![registry
            .lookup(op, shape)
            .ok_or_else(|| {
                CliError::Usage(format!("no {op} tile of shape {shape:?} is registered"))
            })?
            .clone()],
        None => registry.for_op(op).cloned().collect(),
    };
    let kinds: Vec<PlanKind> = match choice {
        PlanChoice::Dense => vec![PlanKind::Dense],
        PlanChoice::Pit(sym) => {
            let axis = problem
                .binding
                .pit_candidates
                .iter()
                .find(|a| &a.symbol == sym)
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "`{sym}` is not a PIT axis of the sparse operand (choices: {})",
                        problem
                            .binding
                            .pit_candidates
                            .iter()
                            .map(|a| a.symbol.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ))
                })?;
            vec![PlanKind::Pit(axis.clone())]
        }
        PlanChoice::Auto => {
            let mut k = Vec::new();
            if allow_dense {
                k.push(PlanKind::Dense);
            }
            k.extend(
                problem
                    .binding
                    .pit_candidates
                    .iter()
                    .cloned()
                    .map(PlanKind::Pit),
            );
            k
        }
    };
    let mut out = Vec::new();
    for t in &tiles {
        let cost = match profile {
            Some(p) => p.cost(t).ok_or_else(|| {
                CliError::Usage(format!("profile has no cost for `{}`", t.impl_id))
            })?,
            None => 0.0,
        };
        for kind in &kinds {
            let plan =
                SparseKernelPlan::new(op, &problem.dims, kind.clone(), t, cost, Layout::RowMajor)?;
            out.push(evaluate_candidate(plan, samples)?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no applicable plan".into()));
    }
    Ok(out)
}

fn best(cands: &[CandidateCost]) -> SparseKernelPlan {
    cands
        .iter()
        .min_by(|a, b| candidate_order(a, b))
        .map(|c| c.plan.clone())
        .expect("non-empty candidate list")
}

pub fn cmd_analyze(expr_text: &str, out: &mut dyn Write) -> CliResult<()> {
    let expr = parse_expr(expr_text)?;
    writeln!(out, "expr {expr}")?;
    writeln!(out, "{:<6} {:<10} {:<16} pit", "axis", "kind", "category")?;
    for a in expr.classify_axes() {
        writeln!(
            out,
            "{:<6} {:<10} {:<16} {}",
            a.name,
            a.kind.to_string(),
            a.category.to_string(),
            if a.is_pit { "yes" } else { "no" }
        )?;
    }
    let pit: Vec<String> = expr.pit_axes().into_iter().collect();
    writeln!(out, "pit_axes {}", pit.join(","))?;
    let simplified = expr.simplify();
    if !simplified.removed.is_empty() {
        let removed: Vec<&str> = simplified.removed.keys().map(String::as_str).collect();
        writeln!(
            out,
            "simplified {} (independent per-slice permutation along {})",
            simplified.expr,
            removed.join(",")
        )?;
    }
    Ok(())
}

pub fn cmd_profile(args: &ProfileArgs, out: &mut dyn Write) -> CliResult<()> {
    let path = args.out.as_ref().or(args.profile.as_ref()).ok_or_else(|| {
        CliError::Usage("no output path: pass --out, --profile or set PIT_PROFILE".into())
    })?;
    let registry = register_builtin_kernels();
    let table = profile_with(
        &registry,
        ProfileOptions {
            reps: args.reps,
            warmup: args.warmup,
            reps_inner: None,
        },
    )?;
    table.save(path).map_err(file_err(path))?;
    for e in table.entries() {
        writeln!(out, "{:<24} {:.4e} s", e.desc.impl_id, e.cost)?;
    }
    writeln!(out, "wrote {} entries to {}", table.len(), path.display())?;
    Ok(())
}

pub fn cmd_select(args: &SelectArgs, out: &mut dyn Write) -> CliResult<()> {
    let expr = parse_expr(&args.problem.expr)?;
    let extents = parse_extents(&args.problem.shape)?;
    let problem = Problem::new(&expr, &extents)?;
    let registry = register_builtin_kernels();
    let profile = load_profile(args.profile.as_deref(), &registry)?;
    let source = SparsitySource::from_args(&args.problem.sparsity)?;
    let count = match source {
        SparsitySource::Random { .. } => args.samples,
        _ => 1,
    };
    let samples = source.samples(problem.sparse_shape(), count, args.problem.seed)?;
    if samples.is_empty() && args.no_dense {
        return Err(CliError::Usage(
            "no samples and dense fallback disabled".into(),
        ));
    }
    let cands = candidates(
        &problem,
        &PlanChoice::Auto,
        None,
        &registry,
        Some(&profile),
        &samples,
        !args.no_dense,
    )?;
    writeln!(out, "{}", best(&cands).dump())?;
    writeln!(out, "samples {}", samples.len())?;
    writeln!(out, "# impl axis microtile num_tiles launches cost")?;
    for c in &cands {
        let tiles: Vec<String> = c.num_tiles.iter().map(|t| t.to_string()).collect();
        let launches: Vec<String> = c.launches.iter().map(|t| t.to_string()).collect();
        writeln!(
            out,
            "candidate {} {} {}x{} {} {} {:.17e}",
            c.plan.tile.impl_id,
            c.plan.axis_label(),
            c.plan.micro_tile[0],
            c.plan.micro_tile[1],
            tiles.join(","),
            launches.join(","),
            c.total_cost
        )?;
    }
    Ok(())
}

fn write_tensor<T: Element>(t: &DenseTensor<T>, path: &Path) -> CliResult<()> {
    t.save(path).map_err(file_err(path))
}

fn report_verify(cmp: Comparison, out: &mut dyn Write) -> CliResult<()> {
    let pass = cmp.passes();
    writeln!(
        out,
        "verify max_abs_err={:.3e} max_rel_err={:.3e} {}",
        cmp.max_abs_err,
        cmp.rel_err,
        if pass { "PASS" } else { "FAIL" }
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Verify(cmp.rel_err))
    }
}

pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    match cfg.dtype {
        DType::F32 => run_typed::<f32>(cfg, out),
        DType::F64 => run_typed::<f64>(cfg, out),
    }
}

fn run_typed<T: Element>(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let problem = Problem::new(&cfg.expr, &cfg.extents)?;
    let registry = register_builtin_kernels();
    let profile = match (&cfg.plan, &cfg.profile) {
        (PlanChoice::Auto, p) => Some(load_profile(p.as_deref(), &registry)?),
        (_, Some(p)) => Some(load_profile(Some(p), &registry)?),
        (_, None) => None,
    };
    let shape = problem.sparse_shape();
    let anns = cfg.sparsity.samples(shape, problem.batch, cfg.seed)?;
    let cands = candidates(
        &problem,
        &cfg.plan,
        cfg.tile.as_deref(),
        &registry,
        profile.as_ref(),
        &anns,
        true,
    )?;
    let plan = best(&cands);
    writeln!(out, "{}", plan.dump())?;
    info!("plan requires A {}", plan.sparse_layout);

    let a_seed = cfg.seed.wrapping_add(0x1000);
    let b_seed = cfg.seed.wrapping_add(0x2000);
    let start = Instant::now();
    match problem.binding.op {
        OpKind::MatMul => {
            let [m, k] = shape;
            let n = problem.dims[2];
            if problem.binding.batch_axes.is_empty() {
                let a =
                    DenseTensor::<T>::random_sparse(&anns[0], a_seed).to_layout(plan.sparse_layout);
                let b = DenseTensor::<T>::random(&[k, n], b_seed);
                let (c, stats) = run_sparse_matmul(&plan, &a, &b, &anns[0], cfg.workers)?;
                writeln!(
                    out,
                    "launches {} wall_ms {:.3}",
                    stats.launches,
                    start.elapsed().as_secs_f64() * 1e3
                )?;
                if let Some(p) = &cfg.out {
                    write_tensor(&c, p)?;
                }
                if cfg.verify {
                    report_verify(compare(&c, &run_dense_reference(&a, &b)?)?, out)?;
                }
            } else {
                if plan.sparse_layout != Layout::RowMajor {
                    return Err(CliError::Usage(
                        "batched operands are row-major; choose a plan gathering along m".into(),
                    ));
                }
                let mut a_data = Vec::with_capacity(problem.batch * m * k);
                for (s, ann) in anns.iter().enumerate() {
                    a_data.extend(
                        DenseTensor::<T>::random_sparse(ann, a_seed.wrapping_add(s as u64))
                            .into_data(),
                    );
                }
                let a = DenseTensor::from_vec(&[problem.batch, m, k], Layout::RowMajor, a_data)?;
                let b = DenseTensor::<T>::random(&[problem.batch, k, n], b_seed);
                let (c, stats) = run_batched_sparse_matmul(&plan, &a, &b, &anns, cfg.workers)?;
                writeln!(
                    out,
                    "launches {} wall_ms {:.3}",
                    stats.launches,
                    start.elapsed().as_secs_f64() * 1e3
                )?;
                if let Some(p) = &cfg.out {
                    write_tensor(&c, p)?;
                }
                if cfg.verify {
                    let mut worst: Option<Comparison> = None;
                    for s in 0..problem.batch {
                        let slice = |t: &DenseTensor<T>, r: usize, c: usize| {
                            DenseTensor::from_vec_2d(
                                r,
                                c,
                                t.data()[s * r * c..(s + 1) * r * c].to_vec(),
                            )
                        };
                        let want = run_dense_reference(&slice(&a, m, k)?, &slice(&b, k, n)?)?;
                        let cmp = compare(&slice(&c, m, n)?, &want)?;
                        if worst.is_none_or(|w| !cmp.passes() || cmp.rel_err > w.rel_err) {
                            worst = Some(cmp);
                        }
                    }
                    report_verify(worst.expect("batch of at least one"), out)?;
                }
            }
        }
        OpKind::ReduceSum => {
            let a = DenseTensor::<T>::random_sparse(&anns[0], a_seed).to_layout(plan.sparse_layout);
            let (c, stats) = run_sparse_reduce_sum(&plan, &a, &anns[0], cfg.workers)?;
            writeln!(
                out,
                "launches {} wall_ms {:.3}",
                stats.launches,
                start.elapsed().as_secs_f64() * 1e3
            )?;
            if let Some(p) = &cfg.out {
                write_tensor(&c, p)?;
            }
            if cfg.verify {
                report_verify(compare(&c, &reference_reduce_sum(&a)?)?, out)?;
            }
        }
        OpKind::VecAdd => unreachable!("bind_operator rejects elementwise addition"),
    }
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let expr = parse_expr(&args.expr)?;
    let extents = parse_extents(&args.shape)?;
    let problem = Problem::new(&expr, &extents)?;
    if problem.binding.op != OpKind::MatMul || problem.batch != 1 {
        return Err(CliError::Usage("bench supports plain matmul only".into()));
    }
    if args.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let granularity = parse_pair(&args.granularity)?;
    let tile = parse_dims(&args.tile)?;
    let choices: Vec<PlanChoice> = args
        .plans
        .iter()
        .map(|p| p.parse())
        .collect::<CliResult<_>>()?;
    let registry = register_builtin_kernels();
    let profile = if choices.contains(&PlanChoice::Auto) {
        Some(load_profile(args.profile.as_deref(), &registry)?)
    } else {
        None
    };
    let shape = problem.sparse_shape();
    let n = problem.dims[2];

    let mut rows: Vec<BenchRow> = Vec::new();
    for (i, &ratio) in args.ratios.iter().enumerate() {
        let seed = args.seed.wrapping_add(i as u64);
        let ann = SparsityAnnotation::random(&shape, &granularity, ratio, seed)?;
        let samples = std::slice::from_ref(&ann);
        let a = DenseTensor::<f32>::random_sparse(&ann, seed.wrapping_add(0x1000));
        let b = DenseTensor::<f32>::random(&[shape[1], n], seed.wrapping_add(0x2000));
        let dense = best(&candidates(
            &problem,
            &PlanChoice::Dense,
            Some(&tile),
            &registry,
            None,
            samples,
            true,
        )?);
        let plans: Vec<SparseKernelPlan> = choices
            .iter()
            .map(|c| {
                let t = if *c == PlanChoice::Auto {
                    None
                } else {
                    Some(&tile[..])
                };
                Ok(best(&candidates(
                    &problem,
                    c,
                    t,
                    &registry,
                    profile.as_ref(),
                    samples,
                    true,
                )?))
            })
            .collect::<CliResult<_>>()?;
        rows.extend(bench::bench_matmul_plans(
            &plans,
            &dense,
            &a,
            &b,
            &ann,
            ratio,
            args.workers,
            args.reps,
        )?);
    }
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    match &args.csv {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| file_err(path)(PitError::Io(e)))?;
            writeln!(out, "wrote {} rows to {}", rows.len(), path.display())?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn cmd_index(args: &IndexArgs, out: &mut dyn Write) -> CliResult<()> {
    let expr = parse_expr(&args.problem.expr)?;
    let extents = parse_extents(&args.problem.shape)?;
    let problem = Problem::new(&expr, &extents)?;
    if args.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let choice: PlanChoice = args.plan.parse()?;
    if !matches!(choice, PlanChoice::Pit(_)) {
        return Err(CliError::Usage(
            "--plan must name a PIT axis, e.g. pit:m".into(),
        ));
    }
    let source = SparsitySource::from_args(&args.problem.sparsity)?;
    let anns = source.samples(problem.sparse_shape(), 1, args.problem.seed)?;
    let registry = register_builtin_kernels();
    let tile = parse_dims(&args.tile)?;
    let plan = best(&candidates(
        &problem,
        &choice,
        Some(&tile),
        &registry,
        None,
        &anns,
        true,
    )?);
    let axis = plan.pit_axis().expect("pit plan").clone();
    let idx = MicroTileIndex::from_annotation(&anns[0], &plan.micro_tile, axis, args.workers)?;
    out.write_all(idx.dump().as_bytes())?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Analyze { expr } => cmd_analyze(expr, out),
        Command::Profile(a) => cmd_profile(a, out),
        Command::Select(a) => cmd_select(a, out),
        Command::Run(a) => cmd_run(&RunConfig::from_args(a)?, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Index(a) => cmd_index(a, out),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(&cli, out)
}
