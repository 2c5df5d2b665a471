#![allow(dead_code)]

pub mod oracle;
pub mod paths;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use mpiwasm::engine::{Embedder, GroupOutcome, InstanceConfig, ModuleArtifact};
use mpiwasm::hostcalls::SIGNATURES;

pub fn embedder() -> &'static Embedder {
    static E: OnceLock<Embedder> = OnceLock::new();
    E.get_or_init(|| Embedder::new().expect("engine starts"))
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Imports for every shipped MPI call plus the WASI calls fixtures use.
pub fn mpi_imports() -> String {
    let mut s = String::from(
        r#"  (import "wasi_snapshot_preview1" "proc_exit" (func $exit (param i32)))
  (import "wasi_snapshot_preview1" "fd_write" (func $fd_write (param i32 i32 i32 i32) (result i32)))
  (import "wasi_snapshot_preview1" "fd_read" (func $fd_read (param i32 i32 i32 i32) (result i32)))
"#,
    );
    for sig in SIGNATURES {
        let params = " i32".repeat(sig.params);
        let params = if params.is_empty() { String::new() } else { format!(" (param{params})") };
        let result = if sig.returns_f64 { "f64" } else { "i32" };
        s.push_str(&format!(
            "  (import \"env\" \"{0}\" (func ${0}{params} (result {result})))\n",
            sig.name
        ));
    }
    s
}

/// Shared helpers: `$setup` initializes and fills `$rank`/`$size`; `$ok`
/// and `$eq` exit with the given code when a check fails.
pub const HELPERS: &str = r#"
  (global $rank (mut i32) (i32.const 0))
  (global $size (mut i32) (i32.const 0))
  (func $ok (param $rc i32) (param $where i32)
    (if (local.get $rc) (then (call $exit (local.get $where)))))
  (func $eq (param $got i32) (param $want i32) (param $where i32)
    (if (i32.ne (local.get $got) (local.get $want)) (then (call $exit (local.get $where)))))
  (func $setup
    (call $ok (call $MPI_Init (i32.const 0) (i32.const 0)) (i32.const 250))
    (call $ok (call $MPI_Comm_rank (i32.const 0) (i32.const 0)) (i32.const 251))
    (call $ok (call $MPI_Comm_size (i32.const 0) (i32.const 4)) (i32.const 252))
    (global.set $rank (i32.load (i32.const 0)))
    (global.set $size (i32.load (i32.const 4))))
  (func $teardown
    (call $ok (call $MPI_Finalize) (i32.const 253)))
  ;; p[i] = base + i for i < n (i32 words)
  (func $fill (param $p i32) (param $n i32) (param $base i32) (local $i i32)
    (block $d
      (loop $l
        (br_if $d (i32.ge_u (local.get $i) (local.get $n)))
        (i32.store (i32.add (local.get $p) (i32.shl (local.get $i) (i32.const 2)))
                   (i32.add (local.get $base) (local.get $i)))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $l))))
  (func $check (param $p i32) (param $n i32) (param $base i32) (param $where i32) (local $i i32)
    (block $d
      (loop $l
        (br_if $d (i32.ge_u (local.get $i) (local.get $n)))
        (call $eq (i32.load (i32.add (local.get $p) (i32.shl (local.get $i) (i32.const 2))))
                  (i32.add (local.get $base) (local.get $i))
                  (local.get $where))
        (local.set $i (i32.add (local.get $i) (i32.const 1)))
        (br $l))))
  ;; all of stdin into dst (at most max bytes); returns the byte count
  (func $read_stdin (param $dst i32) (param $max i32) (result i32) (local $got i32) (local $n i32)
    (block $done
      (loop $more
        (i32.store (i32.const 32) (i32.add (local.get $dst) (local.get $got)))
        (i32.store (i32.const 36) (i32.sub (local.get $max) (local.get $got)))
        (call $ok (call $fd_read (i32.const 0) (i32.const 32) (i32.const 1) (i32.const 40)) (i32.const 254))
        (local.set $n (i32.load (i32.const 40)))
        (br_if $done (i32.eqz (local.get $n)))
        (local.set $got (i32.add (local.get $got) (local.get $n)))
        (br $more)))
    (local.get $got))
  (func $left (result i32)
    (i32.rem_u (i32.add (global.get $rank) (i32.sub (global.get $size) (i32.const 1))) (global.get $size)))
  (func $right (result i32)
    (i32.rem_u (i32.add (global.get $rank) (i32.const 1)) (global.get $size)))
"#;

/// Wraps a fixture body into a complete module.
pub fn wrap(body: &str) -> String {
    let (imports, rest) = hoist_imports(body);
    let memory = if body.contains("(memory (export") {
        ""
    } else {
        "  (memory (export \"memory\") 2)\n"
    };
    format!(
        "(module\n{}{}\n{memory}{HELPERS}\n{}\n)\n",
        mpi_imports(),
        imports,
        rest
    )
}

/// Splits top-level `(import ...)` forms out of `body`; text-format imports
/// must precede every definition. Comments are assumed not to contain
/// parentheses.
fn hoist_imports(body: &str) -> (String, String) {
    let (mut imports, mut rest) = (String::new(), String::new());
    let mut i = 0;
    while let Some(at) = body[i..].find("(import").map(|p| p + i) {
        rest.push_str(&body[i..at]);
        let mut depth = 0;
        let mut end = at;
        for (k, c) in body[at..].char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                _ => {}
            }
            if depth == 0 {
                end = at + k + 1;
                break;
            }
        }
        imports.push_str("  ");
        imports.push_str(&body[at..end]);
        imports.push('\n');
        i = end;
    }
    rest.push_str(&body[i..]);
    (imports, rest)
}

pub fn fixture_source(name: &str) -> String {
    let path = fixtures_dir().join(format!("{name}.wat"));
    let body = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    wrap(&body)
}

pub fn fixture_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(fixtures_dir())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "wat").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
}

pub fn compile(wat_src: &str) -> ModuleArtifact {
    let bytes = wat::parse_str(wat_src).unwrap_or_else(|e| panic!("{e}\n{wat_src}"));
    embedder().prepare(&bytes, &InstanceConfig::default()).expect("module compiles")
}

pub fn sim_config() -> InstanceConfig {
    InstanceConfig {
        watchdog: Some(Duration::from_secs(20)),
        ..InstanceConfig::default()
    }
}

pub fn run_sim(artifact: &ModuleArtifact, n: usize) -> GroupOutcome {
    embedder()
        .spawn_sim_group(n, artifact, &sim_config())
        .unwrap_or_else(|e| panic!("group of {n} failed: {e}"))
}

pub fn run_fixture(name: &str, n: usize) -> GroupOutcome {
    run_sim(&compile(&fixture_source(name)), n)
}

/// Ranks 0 and 1 exchange `iters` round trips of `bytes` bytes, read as
/// two i32s from stdin. No other MPI traffic happens.
pub const PINGPONG_WAT: &str = r#"
(func (export "_start") (local $bytes i32) (local $iters i32) (local $i i32) (local $rbuf i32) (local $pages i32)
  (call $eq (call $read_stdin (i32.const 48) (i32.const 8)) (i32.const 8) (i32.const 2))
  (local.set $bytes (i32.load (i32.const 48)))
  (local.set $iters (i32.load (i32.const 52)))
  (call $setup)
  (local.set $rbuf (i32.add (i32.const 65536) (local.get $bytes)))
  (local.set $pages (i32.shr_u (i32.add (i32.add (local.get $rbuf) (local.get $bytes)) (i32.const 65535)) (i32.const 16)))
  (if (i32.gt_u (local.get $pages) (memory.size))
    (then (drop (memory.grow (i32.sub (local.get $pages) (memory.size))))))
  (block $d
    (loop $l
      (br_if $d (i32.ge_u (local.get $i) (local.get $iters)))
      (if (i32.eqz (global.get $rank))
        (then
          (call $ok (call $MPI_Send (i32.const 65536) (local.get $bytes) (i32.const 0) (i32.const 1) (i32.const 0) (i32.const 0)) (i32.const 3))
          (call $ok (call $MPI_Recv (local.get $rbuf) (local.get $bytes) (i32.const 0) (i32.const 1) (i32.const 0) (i32.const 0) (i32.const 0)) (i32.const 4))))
      (if (i32.eq (global.get $rank) (i32.const 1))
        (then
          (call $ok (call $MPI_Recv (local.get $rbuf) (local.get $bytes) (i32.const 0) (i32.const 0) (i32.const 0) (i32.const 0) (i32.const 0)) (i32.const 5))
          (call $ok (call $MPI_Send (i32.const 65536) (local.get $bytes) (i32.const 0) (i32.const 0) (i32.const 0) (i32.const 0)) (i32.const 6))))
      (local.set $i (i32.add (local.get $i) (i32.const 1)))
      (br $l)))
  (call $teardown))
"#;

pub fn pingpong_params(bytes: usize, iters: u32) -> Vec<u8> {
    [bytes as i32, iters as i32].iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Rank counts each fixture is run at, and the exit code every rank must
/// report.
pub fn fixture_plan(name: &str) -> (Vec<usize>, i32) {
    match name {
        "abort" => (vec![1, 2, 4], 7),
        "pingpong" => (vec![2, 4, 8], 0),
        _ => (vec![1, 2, 4, 8], 0),
    }
}

/// A valid MPI program of at least `min_bytes` bytes: many independent
/// arithmetic functions, each called once from `_start`.
pub fn large_module(min_bytes: usize) -> Vec<u8> {
    let mut funcs = String::new();
    let mut calls = String::new();
    let mut f = 0;
    loop {
        let mut body = String::from("(local.get 0)");
        for k in 0..200u32 {
            let c = (f as u32).wrapping_mul(2654435761).wrapping_add(k * 40503) as i32;
            let op = ["i32.add", "i32.xor", "i32.mul", "i32.sub"][(k % 4) as usize];
            body = format!("({op} {body} (i32.const {c}))");
        }
        funcs.push_str(&format!("  (func $f{f} (param i32) (result i32) {body})\n"));
        calls.push_str(&format!("    (local.set 0 (call $f{f} (local.get 0)))\n"));
        f += 1;
        if f % 50 == 0 {
            let src = wrap(&format!(
                "{funcs}  (func (export \"_start\") (local i32)\n    (call $setup)\n{calls}    (i32.store (i32.const 64) (local.get 0))\n    (call $teardown))\n"
            ));
            let bytes = wat::parse_str(&src).unwrap();
            if bytes.len() >= min_bytes {
                return bytes;
            }
        }
    }
}

#[derive(Debug)]
pub struct CopyTally {
    pub copies: u64,
    pub copied_bytes: u64,
    pub messages: u64,
}

/// Rank 0 of a two-rank pingpong over the mock backend, which hands the
/// guest's own memory to the "library" and copies nothing.
pub fn mock_pingpong(bytes: usize, iters: u32) -> (CopyTally, mpiwasm::transport::mock::MockLog) {
    use mpiwasm::abi::{Counters, Env};
    use mpiwasm::engine::RankContext;
    use mpiwasm::transport::mock::MockTransport;
    use mpiwasm::transport::Transport;
    use std::sync::Arc;

    static ARTIFACT: OnceLock<ModuleArtifact> = OnceLock::new();
    let artifact = ARTIFACT.get_or_init(|| compile(&wrap(PINGPONG_WAT)));
    let transport = MockTransport::new(0, 2);
    let log = transport.log();
    let counters = Arc::new(Counters::default());
    let env = Arc::new(Env::new(transport.world(), transport.self_comm(), Arc::clone(&counters), false));
    let cfg = InstanceConfig {
        stdin: Some(pingpong_params(bytes, iters)),
        ..sim_config()
    };
    let out = embedder()
        .instantiate_and_run(
            artifact,
            &cfg,
            RankContext {
                env,
                transport: Box::new(transport),
            },
        )
        .expect("mock run");
    assert_eq!(out.exit_code, 0, "mock pingpong guest failed");
    let snap = counters.snapshot();
    (
        CopyTally {
            copies: snap.copies,
            copied_bytes: snap.copied_bytes,
            messages: 2 * iters as u64,
        },
        log,
    )
}

/// Copies summed over both ranks of a sim pingpong.
pub fn sim_pingpong(bytes: usize, iters: u32) -> CopyTally {
    static ARTIFACT: OnceLock<ModuleArtifact> = OnceLock::new();
    let artifact = ARTIFACT.get_or_init(|| compile(&wrap(PINGPONG_WAT)));
    let cfg = InstanceConfig {
        stdin: Some(pingpong_params(bytes, iters)),
        ..sim_config()
    };
    let out = embedder().spawn_sim_group(2, artifact, &cfg).expect("sim run");
    assert_eq!(out.exit_codes, vec![0, 0], "sim pingpong guest failed");
    CopyTally {
        copies: out.ranks.iter().map(|r| r.counters.copies).sum(),
        copied_bytes: out.ranks.iter().map(|r| r.counters.copied_bytes).sum(),
        messages: 2 * iters as u64,
    }
}

#[derive(Debug, Default)]
pub struct BoundsReport {
    pub attempts: u64,
    pub rejected: u64,
    pub accepted: u64,
    /// Calls whose result disagreed with the bounds predicate.
    pub wrong: Vec<String>,
    pub panics: u64,
}

/// Calls buffer-taking host functions with adversarial (address, count)
/// pairs against a guest memory of `pages` pages and checks each result
/// against `address + count * size <= length`.
pub fn bounds_fuzz(attempts: u64, seed: u64, pages: usize) -> BoundsReport {
    use mpiwasm::abi::{Counters, Env, MPI_BYTE, MPI_DOUBLE, MPI_ERR_ARG, MPI_INT, MPI_SUCCESS};
    use mpiwasm::hostcalls::HostCalls;
    use mpiwasm::memory::{GuestMemory, PAGE_SIZE};
    use mpiwasm::transport::mock::MockTransport;
    use mpiwasm::transport::Transport;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::panic::{catch_unwind, AssertUnwindSafe};
    use std::sync::Arc;

    let len = pages as u64 * PAGE_SIZE as u64;
    let mut bytes = vec![0u8; len as usize];
    let mut mem = GuestMemory::new(&mut bytes).unwrap();
    let mut transport = MockTransport::new(0, 2);
    let env = Env::new(transport.world(), transport.self_comm(), Arc::new(Counters::default()), false);
    assert_eq!(HostCalls::new(&env, &mut mem, &mut transport).init(0, 0), Ok(MPI_SUCCESS));

    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = BoundsReport::default();
    let near = |rng: &mut StdRng, x: i64| x + rng.gen_range(-16..=16);
    for i in 0..attempts {
        let (dtype, size) = [(MPI_BYTE, 1i64), (MPI_INT, 4), (MPI_DOUBLE, 8)][rng.gen_range(0..3)];
        let addr: u32 = match rng.gen_range(0..6) {
            0 => rng.gen(),
            1 => near(&mut rng, len as i64).clamp(0, u32::MAX as i64) as u32,
            2 => u32::MAX - rng.gen_range(0..64),
            3 => near(&mut rng, 1 << 31) as u32,
            4 => rng.gen_range(0..len as u32),
            _ => rng.gen_range(0..64),
        };
        // counts that put the end just inside, just past, or far past the end
        let room = (len as i64 - addr as i64) / size;
        let count: i32 = match rng.gen_range(0..6) {
            0 => rng.gen(),
            1 => near(&mut rng, room).clamp(i32::MIN as i64, i32::MAX as i64) as i32,
            2 => i32::MAX - rng.gen_range(0..4),
            3 => -rng.gen_range(1..=1000),
            4 => rng.gen_range(0..=4),
            _ => (u32::MAX as i64 / size + rng.gen_range(-2..=2)).min(i32::MAX as i64) as i32,
        };
        let fits = count >= 0 && addr as u64 + count as u64 * size as u64 <= len;
        let which = rng.gen_range(0..3);
        let result = catch_unwind(AssertUnwindSafe(|| {
            let mut hc = HostCalls::new(&env, &mut mem, &mut transport);
            match which {
                0 => hc.send(addr as i32, count, dtype, 1, 0, 0),
                1 => hc.recv(addr as i32, count, dtype, 1, 0, 0, 0),
                _ => hc.bcast(addr as i32, count, dtype, 0, 0),
            }
        }));
        report.attempts += 1;
        match result {
            Err(_) => report.panics += 1,
            Ok(Ok(rc)) => {
                let want = if fits { MPI_SUCCESS } else { MPI_ERR_ARG };
                if rc != want {
                    report.wrong.push(format!("#{i}: call {which} addr {addr:#x} count {count} size {size} -> {rc}"));
                } else if fits {
                    report.accepted += 1;
                } else {
                    report.rejected += 1;
                }
            }
            Ok(Err(fatal)) => report.wrong.push(format!("#{i}: fatal {fatal:?}")),
        }
    }
    report
}
