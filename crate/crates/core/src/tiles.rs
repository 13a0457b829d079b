//! Dense tile microkernels and the offline per-tile cost table.

use std::fmt::{self, Write as _};
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use crate::error::{PitError, Result};
use crate::exec::{DenseTensor, Element, Layout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    ReduceSum,
    VecAdd,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::VecAdd => "vec_add",
        }
    }

    /// Number of tile dimensions: `M,K,N` for matmul, `P,L` for reduce_sum
    /// and `N` for vec_add.
    pub fn tile_rank(self) -> usize {
        match self {
            OpKind::MatMul => 3,
            OpKind::ReduceSum => 2,
            OpKind::VecAdd => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = PitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matmul" => Ok(OpKind::MatMul),
            "reduce_sum" => Ok(OpKind::ReduceSum),
            "vec_add" => Ok(OpKind::VecAdd),
            _ => Err(PitError::InvalidArgument(format!("unknown op kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TileKernelDescriptor {
    pub op: OpKind,
    pub shape: Vec<usize>,
    pub impl_id: String,
    /// Buffer layout per operand, inputs first, output last.
    pub layouts: Vec<Layout>,
}

impl TileKernelDescriptor {
    pub fn new(op: OpKind, shape: &[usize], impl_id: impl Into<String>) -> Result<Self> {
        if shape.len() != op.tile_rank() {
            return Err(PitError::Registry(format!(
                "{op} tile needs {} dimensions, got {shape:?}",
                op.tile_rank()
            )));
        }
        if shape.contains(&0) {
            return Err(PitError::Registry(format!(
                "tile dimension of 0 in {shape:?}"
            )));
        }
        let operands = match op {
            OpKind::MatMul | OpKind::VecAdd => 3,
            OpKind::ReduceSum => 2,
        };
        Ok(TileKernelDescriptor {
            op,
            shape: shape.to_vec(),
            impl_id: impl_id.into(),
            layouts: vec![Layout::RowMajor; operands],
        })
    }

    pub fn matmul(m: usize, k: usize, n: usize) -> Self {
        Self::new(
            OpKind::MatMul,
            &[m, k, n],
            format!("blocked-rm-{m}x{k}x{n}"),
        )
        .expect("positive tile")
    }

    pub fn reduce_sum(p: usize, l: usize) -> Self {
        Self::new(OpKind::ReduceSum, &[p, l], format!("rowsum-rm-{p}x{l}")).expect("positive tile")
    }

    pub fn vec_add(n: usize) -> Self {
        Self::new(OpKind::VecAdd, &[n], format!("vadd-{n}")).expect("positive tile")
    }

    /// Floating point operations per invocation.
    pub fn flops(&self) -> u64 {
        let s: Vec<u64> = self.shape.iter().map(|&d| d as u64).collect();
        match self.op {
            OpKind::MatMul => 2 * s[0] * s[1] * s[2],
            OpKind::ReduceSum => s[0] * s[1],
            OpKind::VecAdd => s[0],
        }
    }

    /// The tile's footprint on the (first) sparse input operand: `[M, K]`
    /// for matmul, `[P, L]` for reduce_sum, `[1, N]` for vec_add.
    pub fn sparse_projection(&self) -> [usize; 2] {
        match self.op {
            OpKind::MatMul | OpKind::ReduceSum => [self.shape[0], self.shape[1]],
            OpKind::VecAdd => [1, self.shape[0]],
        }
    }

    /// The shape as a fixed-size array; panics on a rank mismatch.
    pub(crate) fn shape_array<const R: usize>(&self) -> [usize; R] {
        self.shape[..].try_into().expect("tile rank")
    }

    pub fn shape_string(&self) -> String {
        self.shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x")
    }

    /// Buffer lengths `(inputs..., output)` one invocation expects.
    fn buffer_lens(&self) -> Vec<usize> {
        let s = &self.shape;
        match self.op {
            OpKind::MatMul => vec![s[0] * s[1], s[1] * s[2], s[0] * s[2]],
            OpKind::ReduceSum => vec![s[0] * s[1], s[0]],
            OpKind::VecAdd => vec![s[0], s[0], s[0]],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KernelRegistry {
    kernels: Vec<TileKernelDescriptor>,
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, desc: TileKernelDescriptor) -> Result<()> {
        if self.kernels.iter().any(|k| k.impl_id == desc.impl_id) {
            return Err(PitError::Registry(format!(
                "duplicate impl_id `{}`",
                desc.impl_id
            )));
        }
        self.kernels.push(desc);
        Ok(())
    }

    pub fn lookup(&self, op: OpKind, shape: &[usize]) -> Option<&TileKernelDescriptor> {
        self.kernels.iter().find(|k| k.op == op && k.shape == shape)
    }

    pub fn by_impl_id(&self, impl_id: &str) -> Option<&TileKernelDescriptor> {
        self.kernels.iter().find(|k| k.impl_id == impl_id)
    }

    pub fn for_op(&self, op: OpKind) -> impl Iterator<Item = &TileKernelDescriptor> {
        self.kernels.iter().filter(move |k| k.op == op)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TileKernelDescriptor> {
        self.kernels.iter()
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// The built-in tile set: the three matmul tiles that show up as selection
/// results for row-block sparsity, a coarse square tile, and row-sum /
/// vector-add tiles.
pub fn register_builtin_kernels() -> KernelRegistry {
    let mut reg = KernelRegistry::new();
    for desc in [
        TileKernelDescriptor::matmul(8, 32, 128),
        TileKernelDescriptor::matmul(16, 32, 128),
        TileKernelDescriptor::matmul(32, 64, 32),
        TileKernelDescriptor::matmul(32, 32, 32),
        TileKernelDescriptor::reduce_sum(1, 64),
        TileKernelDescriptor::reduce_sum(1, 256),
        TileKernelDescriptor::vec_add(256),
    ] {
        reg.register(desc).expect("builtin impl ids are unique");
    }
    reg
}

/// `C[m x n] += A[m x k] * B[k x n]` on row-major buffers with leading
/// dimensions `lda`, `ldb`, `ldc`. Each output row is accumulated
/// independently in `k` order, so rows never mix.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_kernel<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    if n == 0 {
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        let arow = &a[i * lda..i * lda + k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * ldb..p * ldb + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `out[i] += sum_j A[i, j]` over a row-major `[p x l]` block.
#[inline]
pub(crate) fn rowsum_kernel<T: Element>(p: usize, l: usize, a: &[T], lda: usize, out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate().take(p) {
        let mut acc = T::zero();
        for &v in &a[i * lda..i * lda + l] {
            acc += v;
        }
        *o += acc;
    }
}

/// Runs one dense tile. Matmul and reduce_sum accumulate into `out`;
/// vec_add overwrites it.
pub fn run_tile<T: Element>(
    desc: &TileKernelDescriptor,
    inputs: &[&[T]],
    out: &mut [T],
) -> Result<()> {
    let lens = desc.buffer_lens();
    let (in_lens, out_len) = lens.split_at(lens.len() - 1);
    if inputs.len() != in_lens.len() {
        return Err(PitError::Shape(format!(
            "{} expects {} inputs, got {}",
            desc.op,
            in_lens.len(),
            inputs.len()
        )));
    }
    for (i, (buf, &want)) in inputs.iter().zip(in_lens).enumerate() {
        if buf.len() != want {
            return Err(PitError::Shape(format!(
                "input {i} of {} tile {} has {} elements, expected {want}",
                desc.op,
                desc.shape_string(),
                buf.len()
            )));
        }
    }
    if out.len() != out_len[0] {
        return Err(PitError::Shape(format!(
            "output of {} tile {} has {} elements, expected {}",
            desc.op,
            desc.shape_string(),
            out.len(),
            out_len[0]
        )));
    }
    if desc.layouts.iter().any(|&l| l != Layout::RowMajor) {
        return Err(PitError::Layout(format!(
            "{} only implements row-major buffers",
            desc.impl_id
        )));
    }
    let s = &desc.shape;
    match desc.op {
        OpKind::MatMul => matmul_kernel(
            s[0], s[1], s[2], inputs[0], s[1], inputs[1], s[2], out, s[2],
        ),
        OpKind::ReduceSum => rowsum_kernel(s[0], s[1], inputs[0], s[1], out),
        OpKind::VecAdd => {
            for ((o, &x), &y) in out.iter_mut().zip(inputs[0]).zip(inputs[1]) {
                *o = x + y;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub desc: TileKernelDescriptor,
    /// Amortized seconds per tile invocation.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    fingerprint: String,
    reps: usize,
    entries: Vec<ProfileEntry>,
    foreign_fingerprint: bool,
}

/// Rounds to the 9 significant digits used by the profile file, so the
/// in-memory table and its text form agree exactly.
fn round_cost(cost: f64) -> f64 {
    format!("{cost:.8e}")
        .parse()
        .expect("formatted float parses")
}

/// Identifies the machine a profile was measured on.
pub fn machine_fingerprint() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.split_whitespace().collect::<Vec<_>>().join("_"))
        })
        .unwrap_or_else(|| "unknown".into());
    format!(
        "{}-{}-{}cpu-{}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        cpus,
        model
    )
}

impl ProfileTable {
    pub fn new(fingerprint: impl Into<String>, reps: usize) -> Self {
        ProfileTable {
            fingerprint: fingerprint.into(),
            reps,
            entries: Vec::new(),
            foreign_fingerprint: false,
        }
    }

    /// Adds or replaces the cost of `desc`. Costs must be positive and finite.
    pub fn insert(&mut self, desc: TileKernelDescriptor, cost: f64) -> Result<()> {
        if !(cost.is_finite() && cost > 0.0) {
            return Err(PitError::InvalidArgument(format!(
                "tile cost {cost} for {} must be positive",
                desc.impl_id
            )));
        }
        let cost = round_cost(cost);
        match self
            .entries
            .iter_mut()
            .find(|e| e.desc.impl_id == desc.impl_id)
        {
            Some(e) => *e = ProfileEntry { desc, cost },
            None => self.entries.push(ProfileEntry { desc, cost }),
        }
        Ok(())
    }

    pub fn cost(&self, desc: &TileKernelDescriptor) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| {
                e.desc.impl_id == desc.impl_id && e.desc.op == desc.op && e.desc.shape == desc.shape
            })
            .map(|e| e.cost)
    }

    pub fn entries(&self) -> &[ProfileEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn reps(&self) -> usize {
        self.reps
    }

    /// Set when the table was loaded from a file measured on another machine.
    pub fn foreign_fingerprint(&self) -> bool {
        self.foreign_fingerprint
    }

    /// True if every kernel of `registry` has a cost.
    pub fn covers(&self, registry: &KernelRegistry) -> bool {
        registry.iter().all(|d| self.cost(d).is_some())
    }

    /// Every cost multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let mut out = ProfileTable::new(self.fingerprint.clone(), self.reps);
        for e in &self.entries {
            out.insert(e.desc.clone(), e.cost * factor)?;
        }
        Ok(out)
    }

    /// Synthetic table with cost proportional to tile FLOPs.
    pub fn flop_proportional(registry: &KernelRegistry, seconds_per_flop: f64) -> Result<Self> {
        let mut t = ProfileTable::new("synthetic-flops", 1);
        for d in registry.iter() {
            t.insert(d.clone(), d.flops() as f64 * seconds_per_flop)?;
        }
        Ok(t)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("pit-profile v1\n");
        let _ = writeln!(s, "fingerprint {}", self.fingerprint);
        let _ = writeln!(s, "reps {}", self.reps);
        for e in &self.entries {
            let dims: Vec<String> = e.desc.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(
                s,
                "{} {} {} {:.8e}",
                e.desc.op,
                dims.join(" "),
                e.desc.impl_id,
                e.cost
            );
        }
        s
    }

    /// Parses the text form. A fingerprint differing from this machine's is
    /// logged and flagged, not rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        match lines.next() {
            Some((_, "pit-profile v1")) => {}
            Some((no, _)) => return Err(PitError::parse(no, "expected header `pit-profile v1`")),
            None => return Err(PitError::parse(1, "empty profile")),
        }
        let fingerprint = match lines.next() {
            Some((_, l)) if l.starts_with("fingerprint ") => l["fingerprint ".len()..].to_string(),
            Some((no, _)) => return Err(PitError::parse(no, "expected `fingerprint <string>`")),
            None => return Err(PitError::parse(2, "missing fingerprint line")),
        };
        let mut table = ProfileTable::new(fingerprint, 0);
        let mut saw_reps = false;
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "reps" && !saw_reps && table.entries.is_empty() {
                table.reps = match fields[..] {
                    [_, n] => n
                        .parse()
                        .map_err(|_| PitError::parse(no, "bad repetition count"))?,
                    _ => return Err(PitError::parse(no, "expected `reps <count>`")),
                };
                saw_reps = true;
                continue;
            }
            let op: OpKind = fields[0]
                .parse()
                .map_err(|_| PitError::parse(no, format!("unknown op `{}`", fields[0])))?;
            let want = op.tile_rank() + 3;
            if fields.len() != want {
                return Err(PitError::parse(
                    no,
                    format!("{op} entry needs {want} fields, found {}", fields.len()),
                ));
            }
            let dims = fields[1..=op.tile_rank()]
                .iter()
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| PitError::parse(no, format!("bad dimension `{d}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let desc = TileKernelDescriptor::new(op, &dims, fields[want - 2])
                .map_err(|e| PitError::parse(no, e.to_string()))?;
            let cost: f64 = fields[want - 1]
                .parse()
                .map_err(|_| PitError::parse(no, format!("bad cost `{}`", fields[want - 1])))?;
            table
                .insert(desc, cost)
                .map_err(|e| PitError::parse(no, e.to_string()))?;
        }
        if table.fingerprint != machine_fingerprint() {
            log::warn!(
                "profile fingerprint `{}` differs from this machine (`{}`)",
                table.fingerprint,
                machine_fingerprint()
            );
            table.foreign_fingerprint = true;
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileOptions {
    pub reps: usize,
    pub warmup: usize,
    /// Back-to-back invocations per timed batch; `None` sizes batches to
    /// roughly 2e7 FLOPs so timer granularity does not matter.
    pub reps_inner: Option<usize>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            reps: 7,
            warmup: 2,
            reps_inner: None,
        }
    }
}

fn auto_reps_inner(desc: &TileKernelDescriptor) -> usize {
    (2e7 / desc.flops() as f64).ceil().max(16.0) as usize
}

/// Measures every kernel in `registry` on hot caches, single threaded.
/// The cost is the median over `reps` batches of batch time / batch size.
pub fn profile(registry: &KernelRegistry, reps: usize, warmup: usize) -> Result<ProfileTable> {
    profile_with(
        registry,
        ProfileOptions {
            reps,
            warmup,
            reps_inner: None,
        },
    )
}

pub fn profile_with(registry: &KernelRegistry, opts: ProfileOptions) -> Result<ProfileTable> {
    if opts.reps == 0 {
        return Err(PitError::InvalidArgument(
            "profile needs at least one repetition".into(),
        ));
    }
    let mut table = ProfileTable::new(machine_fingerprint(), opts.reps);
    for desc in registry.iter() {
        let cost = measure_tile(desc, opts)?;
        table.insert(desc.clone(), cost)?;
    }
    Ok(table)
}

fn measure_tile(desc: &TileKernelDescriptor, opts: ProfileOptions) -> Result<f64> {
    let lens = desc.buffer_lens();
    let (in_lens, out_len) = lens.split_at(lens.len() - 1);
    let inputs: Vec<Vec<f32>> = in_lens
        .iter()
        .enumerate()
        .map(|(i, &n)| DenseTensor::<f32>::random(&[n], 0x5eed + i as u64).into_data())
        .collect();
    let input_refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let mut out = vec![0f32; out_len[0]];
    let inner = opts
        .reps_inner
        .unwrap_or_else(|| auto_reps_inner(desc))
        .max(1);

    for _ in 0..opts.warmup {
        for _ in 0..inner {
            run_tile(desc, black_box(&input_refs), black_box(&mut out))?;
        }
    }
    let mut samples = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        // Keep the accumulator bounded so the timing never hits denormals or infinities.
        out.fill(0.0);
        let start = Instant::now();
        for _ in 0..inner {
            run_tile(desc, black_box(&input_refs), black_box(&mut out))?;
        }
        let elapsed = start.elapsed().as_secs_f64();
        samples.push(elapsed / inner as f64);
    }
    black_box(&out);
    samples.sort_by(f64::total_cmp);
    let median = samples[samples.len() / 2];
    if median <= 0.0 {
        return Err(PitError::InvalidArgument(format!(
            "clock reported no elapsed time for {}",
            desc.impl_id
        )));
    }
    Ok(median)
}
