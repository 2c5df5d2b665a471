//! Microbenchmarks in the shape of the Intel MPI Benchmarks, plus the
//! datatype translation probe.
//!
//! Both drive one built-in guest module. The guest reads its parameters
//! from stdin, times each iteration with `MPI_Wtime` and has rank 0 write
//! the raw per-iteration seconds to stdout. Timing therefore starts only
//! after compilation and instantiation are done.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use log::debug;
use thiserror::Error;

use crate::abi::{Primitive, ProbeSample};
use crate::engine::{Backend, Embedder, EngineError, InstanceConfig, ModuleArtifact, RunOutcome};

pub const CSV_HEADER: &str = "suite,msg_bytes,ranks,iter,usec_avg,usec_min,usec_max";
pub const PROBE_CSV_HEADER: &str = "datatype,msg_bytes,count,median_ns,p99_ns";

/// Timings live between offset 1024 and the first data buffer.
pub const MAX_ITERS: u32 = (0x20000 - 1024) / 8;

/// Largest message the harness accepts: two buffers of `ranks × size`
/// must fit below 4 GiB.
pub const MAX_MSG_BYTES: usize = 64 << 20;

/// The datatypes the probe covers.
pub const PROBE_DATATYPES: [Primitive; 6] = [
    Primitive::Byte,
    Primitive::Char,
    Primitive::Int,
    Primitive::Float,
    Primitive::Double,
    Primitive::Long,
];

const BENCH_WAT: &str = r#"
(module
  (import "wasi_snapshot_preview1" "fd_read" (func $fd_read (param i32 i32 i32 i32) (result i32)))
  (import "wasi_snapshot_preview1" "fd_write" (func $fd_write (param i32 i32 i32 i32) (result i32)))
  (import "wasi_snapshot_preview1" "proc_exit" (func $proc_exit (param i32)))
  (import "env" "MPI_Init" (func $init (param i32 i32) (result i32)))
  (import "env" "MPI_Finalize" (func $finalize (result i32)))
  (import "env" "MPI_Comm_rank" (func $rank (param i32 i32) (result i32)))
  (import "env" "MPI_Comm_size" (func $size (param i32 i32) (result i32)))
  (import "env" "MPI_Send" (func $send (param i32 i32 i32 i32 i32 i32) (result i32)))
  (import "env" "MPI_Recv" (func $recv (param i32 i32 i32 i32 i32 i32 i32) (result i32)))
  (import "env" "MPI_Sendrecv" (func $sendrecv (param i32 i32 i32 i32 i32 i32 i32 i32 i32 i32 i32 i32) (result i32)))
  (import "env" "MPI_Barrier" (func $barrier (param i32) (result i32)))
  (import "env" "MPI_Bcast" (func $bcast (param i32 i32 i32 i32 i32) (result i32)))
  (import "env" "MPI_Allreduce" (func $allreduce (param i32 i32 i32 i32 i32 i32) (result i32)))
  (import "env" "MPI_Allgather" (func $allgather (param i32 i32 i32 i32 i32 i32 i32) (result i32)))
  (import "env" "MPI_Alltoall" (func $alltoall (param i32 i32 i32 i32 i32 i32 i32) (result i32)))
  (import "env" "MPI_Wtime" (func $wtime (result f64)))
  (memory (export "memory") 3)
  (global $SBUF i32 (i32.const 0x20000))

  (func $check (param $rc i32)
    (if (local.get $rc) (then (call $proc_exit (i32.add (i32.const 100) (local.get $rc))))))

  ;; 20 bytes of parameters into offset 64
  (func $read_params (local $got i32) (local $n i32)
    (block $done
      (loop $more
        (i32.store (i32.const 0) (i32.add (i32.const 64) (local.get $got)))
        (i32.store (i32.const 4) (i32.sub (i32.const 20) (local.get $got)))
        (call $check (call $fd_read (i32.const 0) (i32.const 0) (i32.const 1) (i32.const 16)))
        (local.set $n (i32.load (i32.const 16)))
        (br_if $done (i32.eqz (local.get $n)))
        (local.set $got (i32.add (local.get $got) (local.get $n)))
        (br_if $more (i32.lt_u (local.get $got) (i32.const 20)))))
    (if (i32.lt_u (local.get $got) (i32.const 20)) (then (call $proc_exit (i32.const 2)))))

  (func (export "_start")
    (local $suite i32) (local $bytes i32) (local $count i32) (local $dt i32) (local $iters i32)
    (local $me i32) (local $n i32) (local $span i32) (local $rbuf i32) (local $pages i32)
    (local $i i32) (local $expect i32) (local $t0 f64) (local $dur f64)
    (call $read_params)
    (local.set $suite (i32.load (i32.const 64)))
    (local.set $bytes (i32.load (i32.const 68)))
    (local.set $count (i32.load (i32.const 72)))
    (local.set $dt (i32.load (i32.const 76)))
    (local.set $iters (i32.load (i32.const 80)))
    (call $check (call $init (i32.const 0) (i32.const 0)))
    (call $check (call $rank (i32.const 0) (i32.const 128)))
    (call $check (call $size (i32.const 0) (i32.const 132)))
    (local.set $me (i32.load (i32.const 128)))
    (local.set $n (i32.load (i32.const 132)))
    (local.set $expect (i32.shr_u (i32.mul (local.get $n) (i32.sub (local.get $n) (i32.const 1))) (i32.const 1)))

    (local.set $span (i32.mul (local.get $bytes) (local.get $n)))
    (local.set $rbuf (i32.add (global.get $SBUF) (local.get $span)))
    (local.set $pages
      (i32.shr_u (i32.add (i32.add (local.get $rbuf) (local.get $span)) (i32.const 65535)) (i32.const 16)))
    (if (i32.gt_u (local.get $pages) (memory.size))
      (then
        (if (i32.eq (memory.grow (i32.sub (local.get $pages) (memory.size))) (i32.const -1))
          (then (call $proc_exit (i32.const 4))))))

    ;; every 4-byte word of the send buffer holds the rank
    (local.set $i (i32.const 0))
    (block $filled
      (loop $fill
        (br_if $filled (i32.gt_u (i32.add (local.get $i) (i32.const 4)) (local.get $span)))
        (i32.store (i32.add (global.get $SBUF) (local.get $i)) (local.get $me))
        (local.set $i (i32.add (local.get $i) (i32.const 4)))
        (br $fill)))

    (call $check (call $barrier (i32.const 0)))
    (local.set $i (i32.const 0))
    (block $end
      (loop $iter
        (br_if $end (i32.ge_u (local.get $i) (local.get $iters)))
        (local.set $t0 (call $wtime))
        (block $sw
          (if (i32.eq (local.get $suite) (i32.const 0))
            (then
              (if (i32.eqz (local.get $me))
                (then
                  (call $check (call $send (global.get $SBUF) (local.get $count) (local.get $dt) (i32.const 1) (i32.const 0) (i32.const 0)))
                  (call $check (call $recv (local.get $rbuf) (local.get $count) (local.get $dt) (i32.const 1) (i32.const 0) (i32.const 0) (i32.const 0)))))
              (if (i32.eq (local.get $me) (i32.const 1))
                (then
                  (call $check (call $recv (local.get $rbuf) (local.get $count) (local.get $dt) (i32.const 0) (i32.const 0) (i32.const 0) (i32.const 0)))
                  (call $check (call $send (global.get $SBUF) (local.get $count) (local.get $dt) (i32.const 0) (i32.const 0) (i32.const 0)))))
              (br $sw)))
          (if (i32.eq (local.get $suite) (i32.const 1))
            (then
              (call $check
                (call $sendrecv
                  (global.get $SBUF) (local.get $count) (local.get $dt)
                  (i32.rem_u (i32.add (local.get $me) (i32.const 1)) (local.get $n)) (i32.const 0)
                  (local.get $rbuf) (local.get $count) (local.get $dt)
                  (i32.rem_u (i32.sub (i32.add (local.get $me) (local.get $n)) (i32.const 1)) (local.get $n)) (i32.const 0)
                  (i32.const 0) (i32.const 0)))
              (br $sw)))
          (if (i32.eq (local.get $suite) (i32.const 2))
            (then
              (call $check (call $bcast (global.get $SBUF) (local.get $count) (local.get $dt) (i32.const 0) (i32.const 0)))
              (br $sw)))
          (if (i32.eq (local.get $suite) (i32.const 3))
            (then
              (call $check (call $allreduce (global.get $SBUF) (local.get $rbuf) (local.get $count) (local.get $dt) (i32.const 0) (i32.const 0)))
              (if (i32.and
                    (i32.gt_s (local.get $count) (i32.const 0))
                    (i32.ne (i32.load (local.get $rbuf)) (local.get $expect)))
                (then (call $proc_exit (i32.const 3))))
              (br $sw)))
          (if (i32.eq (local.get $suite) (i32.const 4))
            (then
              (call $check (call $allgather (global.get $SBUF) (local.get $count) (local.get $dt) (local.get $rbuf) (local.get $count) (local.get $dt) (i32.const 0)))
              (br $sw)))
          (if (i32.eq (local.get $suite) (i32.const 5))
            (then
              (call $check (call $alltoall (global.get $SBUF) (local.get $count) (local.get $dt) (local.get $rbuf) (local.get $count) (local.get $dt) (i32.const 0)))
              (br $sw)))
          (call $proc_exit (i32.const 5)))
        (local.set $dur (f64.sub (call $wtime) (local.get $t0)))
        (if (i32.eqz (local.get $suite))
          (then (local.set $dur (f64.mul (local.get $dur) (f64.const 0.5)))))
        (f64.store (i32.add (i32.const 1024) (i32.shl (local.get $i) (i32.const 3))) (local.get $dur))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $iter)))

    (if (i32.eqz (local.get $me))
      (then
        (i32.store (i32.const 0) (i32.const 1024))
        (i32.store (i32.const 4) (i32.shl (local.get $iters) (i32.const 3)))
        (call $check (call $fd_write (i32.const 1) (i32.const 0) (i32.const 1) (i32.const 16)))))
    (call $check (call $finalize)))
)
"#;

/// The benchmark guest as a binary module.
pub fn bench_module() -> Vec<u8> {
    wat::parse_str(BENCH_WAT).expect("built-in bench module assembles")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Pingpong,
    Sendrecv,
    Bcast,
    Allreduce,
    Allgather,
    Alltoall,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Pingpong,
        Suite::Sendrecv,
        Suite::Bcast,
        Suite::Allreduce,
        Suite::Allgather,
        Suite::Alltoall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Pingpong => "pingpong",
            Suite::Sendrecv => "sendrecv",
            Suite::Bcast => "bcast",
            Suite::Allreduce => "allreduce",
            Suite::Allgather => "allgather",
            Suite::Alltoall => "alltoall",
        }
    }

    fn code(self) -> i32 {
        Suite::ALL.iter().position(|&s| s == self).unwrap() as i32
    }

    /// Allreduce sums ints so the guest can check the result.
    fn datatype(self) -> Primitive {
        match self {
            Suite::Allreduce => Primitive::Int,
            _ => Primitive::Byte,
        }
    }

    fn min_ranks(self) -> usize {
        match self {
            Suite::Pingpong => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("guest exited with code {code} ({suite}, {msg_bytes} bytes)")]
    GuestFailed { suite: String, msg_bytes: usize, code: i32 },
    #[error("rank 0 reported {got} timings, expected {expected}")]
    ShortOutput { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Powers of two from 1 B to 4 MiB.
pub fn default_sizes() -> Vec<usize> {
    (0..=22).map(|p| 1usize << p).collect()
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub suite: Suite,
    pub sizes: Vec<usize>,
    pub iters: u32,
    /// Sim rank count. Ignored by the native backend.
    pub ranks: usize,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub suite: Suite,
    pub msg_bytes: usize,
    pub ranks: usize,
    pub iter: u32,
    pub usec_avg: f64,
    pub usec_min: f64,
    pub usec_max: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3},{:.3}",
            self.suite, self.msg_bytes, self.ranks, self.iter, self.usec_avg, self.usec_min, self.usec_max
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub datatype: Primitive,
    pub msg_bytes: usize,
    pub count: usize,
    pub median_ns: u64,
    pub p99_ns: u64,
}

impl ProbeRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.datatype.name(),
            self.msg_bytes,
            self.count,
            self.median_ns,
            self.p99_ns
        )
    }
}

pub fn write_bench_csv(rows: &[BenchRow], out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

pub fn write_probe_csv(rows: &[ProbeRow], out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{PROBE_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn params(suite: Suite, msg_bytes: usize, dtype: Primitive, iters: u32) -> Vec<u8> {
    let count = msg_bytes / dtype.size();
    [suite.code(), msg_bytes as i32, count as i32, dtype.code(), iters as i32]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

struct Harness<'e> {
    embedder: &'e Embedder,
    artifact: ModuleArtifact,
}

impl<'e> Harness<'e> {
    fn new(embedder: &'e Embedder) -> Result<Self, BenchError> {
        let artifact = embedder.prepare(&bench_module(), &InstanceConfig::default())?;
        Ok(Harness { embedder, artifact })
    }

    /// Runs one configuration; returns rank 0's outcome, or `None` on a
    /// native rank other than 0.
    fn run(
        &self,
        backend: Backend,
        ranks: usize,
        suite: Suite,
        msg_bytes: usize,
        dtype: Primitive,
        iters: u32,
        instrument: bool,
    ) -> Result<Option<RunOutcome>, BenchError> {
        let cfg = InstanceConfig {
            argv: vec!["bench.wasm".into()],
            stdin: Some(params(suite, msg_bytes, dtype, iters)),
            capture_stdout: true,
            instrument,
            backend,
            defer_native_finalize: true,
            ..InstanceConfig::default()
        };
        let failed = |code| BenchError::GuestFailed {
            suite: suite.name().into(),
            msg_bytes,
            code,
        };
        match backend {
            Backend::Sim => {
                let group = self.embedder.spawn_sim_group(ranks, &self.artifact, &cfg)?;
                if let Some(&code) = group.exit_codes.iter().find(|&&c| c != 0) {
                    return Err(failed(code));
                }
                Ok(group.ranks.into_iter().next())
            }
            Backend::Native => {
                let out = self.embedder.run_native(&self.artifact, &cfg)?;
                if out.exit_code != 0 {
                    return Err(failed(out.exit_code));
                }
                Ok((out.rank == 0).then_some(out))
            }
        }
    }
}

fn timings(stdout: &[u8], expected: usize) -> Result<Vec<f64>, BenchError> {
    let t: Vec<f64> = stdout
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if t.len() != expected {
        return Err(BenchError::ShortOutput {
            got: t.len(),
            expected,
        });
    }
    Ok(t)
}

fn check_common(iters: u32, sizes: &[usize]) -> Result<(), BenchError> {
    if iters == 0 || iters > MAX_ITERS {
        return Err(BenchError::Config(format!("iterations must be in 1..={MAX_ITERS}")));
    }
    if let Some(s) = sizes.iter().find(|&&s| s > MAX_MSG_BYTES) {
        return Err(BenchError::Config(format!("message size {s} exceeds {MAX_MSG_BYTES}")));
    }
    Ok(())
}

/// One CSV row per message size. Rows come only from rank 0; on the native
/// backend other ranks return no rows.
pub fn run_bench(embedder: &Embedder, cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    check_common(cfg.iters, &cfg.sizes)?;
    if cfg.backend == Backend::Sim && cfg.ranks < cfg.suite.min_ranks() {
        return Err(BenchError::Config(format!(
            "{} needs at least {} ranks",
            cfg.suite,
            cfg.suite.min_ranks()
        )));
    }
    let harness = Harness::new(embedder)?;
    let rows = bench_sizes(&harness, cfg);
    if cfg.backend == Backend::Native {
        embedder.finish_native()?;
    }
    rows
}

fn bench_sizes(harness: &Harness<'_>, cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    let dtype = cfg.suite.datatype();
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        if size % dtype.size() != 0 {
            debug!("skipping {size} B for {}: not a whole number of {}", cfg.suite, dtype.name());
            continue;
        }
        let Some(out) = harness.run(cfg.backend, cfg.ranks, cfg.suite, size, dtype, cfg.iters, false)? else {
            continue;
        };
        let t = timings(&out.stdout, cfg.iters as usize)?;
        let usec: Vec<f64> = t.iter().map(|s| s * 1e6).collect();
        let ranks = out.world_size.max(1) as usize;
        rows.push(BenchRow {
            suite: cfg.suite,
            msg_bytes: size,
            ranks,
            iter: cfg.iters,
            usec_avg: usec.iter().sum::<f64>() / usec.len() as f64,
            usec_min: usec.iter().copied().fold(f64::INFINITY, f64::min),
            usec_max: usec.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(rows)
}

/// Per (datatype, size): latency of the datatype lookup performed by each
/// `MPI_Send` on rank 0 of a two-rank pingpong.
pub fn run_translation_probe(
    embedder: &Embedder,
    datatypes: &[Primitive],
    sizes: &[usize],
    iters: u32,
) -> Result<Vec<ProbeRow>, BenchError> {
    check_common(iters, sizes)?;
    let harness = Harness::new(embedder)?;
    let mut rows = Vec::new();
    for &dtype in datatypes {
        for &size in sizes {
            if size < dtype.size() {
                continue;
            }
            let out = harness
                .run(Backend::Sim, 2, Suite::Pingpong, size, dtype, iters, true)?
                .expect("sim runs always report rank 0");
            let mut ns: Vec<u64> = out
                .probe
                .iter()
                .filter(|s: &&ProbeSample| s.datatype == dtype.code())
                .map(|s| s.nanos)
                .collect();
            ns.sort_unstable();
            rows.push(ProbeRow {
                datatype: dtype,
                msg_bytes: size,
                count: ns.len(),
                median_ns: percentile(&ns, 0.5),
                p99_ns: percentile(&ns, 0.99),
            });
        }
    }
    Ok(rows)
}
