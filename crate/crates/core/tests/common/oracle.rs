//! Randomized MPI scripts, a guest that executes them, and a sequential
//! model that predicts every rank's memory afterwards.
//!
//! Each rank owns 1024 `i32` words, initially `rank * 10000 + i`. A step
//! reads from one half of that area and writes the other half, so no call
//! has overlapping buffers. Messages carry a per-step tag, which keeps
//! wildcard receives deterministic.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use mpiwasm::engine::{InstanceConfig, ModuleArtifact};

pub const WORDS: usize = 1024;
const HALF: usize = WORDS / 2;
pub const MAX_COUNT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Blocking,
    Nonblocking,
    AnySource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Sum,
    Max,
    Min,
    Prod,
    Land,
    Lor,
    Band,
    Bor,
}

impl Op {
    const ALL: [Op; 8] = [Op::Sum, Op::Max, Op::Min, Op::Prod, Op::Land, Op::Lor, Op::Band, Op::Bor];

    fn code(self) -> i32 {
        Op::ALL.iter().position(|&o| o == self).unwrap() as i32
    }

    fn apply(self, a: i32, b: i32) -> i32 {
        match self {
            Op::Sum => a.wrapping_add(b),
            Op::Max => a.max(b),
            Op::Min => a.min(b),
            Op::Prod => a.wrapping_mul(b),
            Op::Land => (a != 0 && b != 0) as i32,
            Op::Lor => (a != 0 || b != 0) as i32,
            Op::Band => a & b,
            Op::Bor => a | b,
        }
    }
}

/// Offsets and counts are in words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    P2p { src: usize, dst: usize, count: usize, recv_count: usize, soff: usize, roff: usize, mode: Mode },
    Shift { k: usize, count: usize, soff: usize, roff: usize },
    Bcast { root: usize, count: usize, off: usize },
    Reduce { root: usize, op: Op, count: usize, soff: usize, roff: usize },
    Allreduce { op: Op, count: usize, soff: usize, roff: usize },
    Gather { root: usize, count: usize, soff: usize, roff: usize },
    Allgather { count: usize, soff: usize, roff: usize },
    Scatter { root: usize, count: usize, soff: usize, roff: usize },
    Alltoall { count: usize, soff: usize, roff: usize },
    Barrier,
    Store { rank: usize, off: usize, value: i32 },
}

#[derive(Debug, Clone)]
pub struct Script {
    pub ranks: usize,
    pub steps: Vec<Step>,
}

fn offset(rng: &mut StdRng, half: usize, len: usize) -> usize {
    half * HALF + rng.gen_range(0..=HALF - len)
}

impl Script {
    pub fn random(seed: u64) -> Script {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.gen_range(1..=8usize);
        let len = rng.gen_range(1..=30);
        let mut steps = Vec::with_capacity(len);
        for _ in 0..len {
            let sh = rng.gen_range(0..2);
            let rh = 1 - sh;
            let count = rng.gen_range(0..=MAX_COUNT);
            let step = match rng.gen_range(0..11) {
                0 | 1 => {
                    let recv_count = (count + rng.gen_range(0..=3)).min(HALF);
                    Step::P2p {
                        src: rng.gen_range(0..n),
                        dst: rng.gen_range(0..n),
                        count,
                        recv_count,
                        soff: offset(&mut rng, sh, count),
                        roff: offset(&mut rng, rh, recv_count),
                        mode: [Mode::Blocking, Mode::Nonblocking, Mode::AnySource][rng.gen_range(0..3)],
                    }
                }
                2 => Step::Shift {
                    k: rng.gen_range(0..n),
                    count,
                    soff: offset(&mut rng, sh, count),
                    roff: offset(&mut rng, rh, count),
                },
                3 => Step::Bcast {
                    root: rng.gen_range(0..n),
                    count,
                    off: rng.gen_range(0..=WORDS - count),
                },
                4 => Step::Reduce {
                    root: rng.gen_range(0..n),
                    op: Op::ALL[rng.gen_range(0..8)],
                    count,
                    soff: offset(&mut rng, sh, count),
                    roff: offset(&mut rng, rh, count),
                },
                5 => Step::Allreduce {
                    op: Op::ALL[rng.gen_range(0..8)],
                    count,
                    soff: offset(&mut rng, sh, count),
                    roff: offset(&mut rng, rh, count),
                },
                6 => Step::Gather {
                    root: rng.gen_range(0..n),
                    count,
                    soff: offset(&mut rng, sh, count),
                    roff: offset(&mut rng, rh, n * count),
                },
                7 => Step::Allgather {
                    count,
                    soff: offset(&mut rng, sh, count),
                    roff: offset(&mut rng, rh, n * count),
                },
                8 => Step::Scatter {
                    root: rng.gen_range(0..n),
                    count,
                    soff: offset(&mut rng, sh, n * count),
                    roff: offset(&mut rng, rh, count),
                },
                9 => Step::Alltoall {
                    count,
                    soff: offset(&mut rng, sh, n * count),
                    roff: offset(&mut rng, rh, n * count),
                },
                _ if rng.gen_bool(0.3) => Step::Barrier,
                _ => Step::Store {
                    rank: rng.gen_range(0..n),
                    off: rng.gen_range(0..WORDS),
                    value: rng.gen_range(-3..=3),
                },
            };
            steps.push(step);
        }
        Script { ranks: n, steps }
    }

    /// Eight words per step behind a step count, little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut w: Vec<i32> = vec![self.steps.len() as i32];
        for s in &self.steps {
            let mut op: Vec<i32> = match *s {
                Step::P2p { src, dst, count, recv_count, soff, roff, mode } => {
                    let m = match mode {
                        Mode::Blocking => 0,
                        Mode::Nonblocking => 1,
                        Mode::AnySource => 2,
                    };
                    vec![1, src as i32, dst as i32, count as i32, recv_count as i32, soff as i32, roff as i32, m]
                }
                Step::Shift { k, count, soff, roff } => vec![2, k as i32, count as i32, soff as i32, roff as i32],
                Step::Bcast { root, count, off } => vec![3, root as i32, count as i32, off as i32],
                Step::Reduce { root, op, count, soff, roff } => {
                    vec![4, root as i32, op.code(), count as i32, soff as i32, roff as i32]
                }
                Step::Allreduce { op, count, soff, roff } => vec![5, op.code(), count as i32, soff as i32, roff as i32],
                Step::Gather { root, count, soff, roff } => vec![6, root as i32, count as i32, soff as i32, roff as i32],
                Step::Allgather { count, soff, roff } => vec![7, count as i32, soff as i32, roff as i32],
                Step::Scatter { root, count, soff, roff } => vec![8, root as i32, count as i32, soff as i32, roff as i32],
                Step::Alltoall { count, soff, roff } => vec![9, count as i32, soff as i32, roff as i32],
                Step::Barrier => vec![10],
                Step::Store { rank, off, value } => vec![11, rank as i32, off as i32, value],
            };
            op.resize(8, 0);
            w.extend(op);
        }
        w.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    /// Final memory of every rank, computed one step at a time.
    pub fn interpret(&self) -> Vec<Vec<i32>> {
        let n = self.ranks;
        let mut mem: Vec<Vec<i32>> = (0..n)
            .map(|r| (0..WORDS as i32).map(|i| r as i32 * 10000 + i).collect())
            .collect();
        for step in &self.steps {
            let before = mem.clone();
            match *step {
                Step::P2p { src, dst, count, soff, roff, .. } => {
                    mem[dst][roff..roff + count].copy_from_slice(&before[src][soff..soff + count]);
                }
                Step::Shift { k, count, soff, roff } => {
                    for r in 0..n {
                        let from = (r + n - k) % n;
                        mem[r][roff..roff + count].copy_from_slice(&before[from][soff..soff + count]);
                    }
                }
                Step::Bcast { root, count, off } => {
                    for m in mem.iter_mut() {
                        m[off..off + count].copy_from_slice(&before[root][off..off + count]);
                    }
                }
                Step::Reduce { root, op, count, soff, roff } => {
                    mem[root][roff..roff + count].copy_from_slice(&reduce(&before, op, count, soff));
                }
                Step::Allreduce { op, count, soff, roff } => {
                    let v = reduce(&before, op, count, soff);
                    for m in mem.iter_mut() {
                        m[roff..roff + count].copy_from_slice(&v);
                    }
                }
                Step::Gather { root, count, soff, roff } => {
                    for r in 0..n {
                        let at = roff + r * count;
                        mem[root][at..at + count].copy_from_slice(&before[r][soff..soff + count]);
                    }
                }
                Step::Allgather { count, soff, roff } => {
                    for dst in 0..n {
                        for r in 0..n {
                            let at = roff + r * count;
                            mem[dst][at..at + count].copy_from_slice(&before[r][soff..soff + count]);
                        }
                    }
                }
                Step::Scatter { root, count, soff, roff } => {
                    for r in 0..n {
                        let at = soff + r * count;
                        mem[r][roff..roff + count].copy_from_slice(&before[root][at..at + count]);
                    }
                }
                Step::Alltoall { count, soff, roff } => {
                    for dst in 0..n {
                        for src in 0..n {
                            let from = soff + dst * count;
                            let at = roff + src * count;
                            mem[dst][at..at + count].copy_from_slice(&before[src][from..from + count]);
                        }
                    }
                }
                Step::Barrier => {}
                Step::Store { rank, off, value } => mem[rank][off] = value,
            }
        }
        mem
    }
}

fn reduce(mem: &[Vec<i32>], op: Op, count: usize, soff: usize) -> Vec<i32> {
    let mut acc = mem[0][soff..soff + count].to_vec();
    for m in &mem[1..] {
        for (a, &b) in acc.iter_mut().zip(&m[soff..soff + count]) {
            *a = op.apply(*a, b);
        }
    }
    acc
}

/// Guest that executes an encoded script from stdin and writes its data
/// area to stdout. Exit 1 means an MPI call failed, 2 a bad status.
pub const RUNNER_WAT: &str = r#"
(memory (export "memory") 4)
(global $SCRIPT i32 (i32.const 65536))

(func $arg (param $pc i32) (param $k i32) (result i32)
  (i32.load (i32.add (local.get $pc) (i32.shl (local.get $k) (i32.const 2)))))
(func $d (param $off i32) (result i32)
  (i32.add (i32.const 4096) (i32.shl (local.get $off) (i32.const 2))))
(func $c (param $rc i32) (call $ok (local.get $rc) (i32.const 1)))
(func $me (param $r i32) (result i32) (i32.eq (global.get $rank) (local.get $r)))

(func $check_status (param $src i32) (param $count i32)
  (call $eq (i32.load (i32.const 64)) (local.get $src) (i32.const 2))
  (call $eq (i32.load (i32.const 76)) (i32.shl (local.get $count) (i32.const 2)) (i32.const 2)))

(func $p2p (param $pc i32)
  (local $src i32) (local $dst i32) (local $count i32) (local $rcount i32)
  (local $soff i32) (local $roff i32) (local $mode i32) (local $tag i32)
  (local.set $src (call $arg (local.get $pc) (i32.const 1)))
  (local.set $dst (call $arg (local.get $pc) (i32.const 2)))
  (local.set $count (call $arg (local.get $pc) (i32.const 3)))
  (local.set $rcount (call $arg (local.get $pc) (i32.const 4)))
  (local.set $soff (call $d (call $arg (local.get $pc) (i32.const 5))))
  (local.set $roff (call $d (call $arg (local.get $pc) (i32.const 6))))
  (local.set $mode (call $arg (local.get $pc) (i32.const 7)))
  (local.set $tag (i32.and (i32.shr_u (local.get $pc) (i32.const 5)) (i32.const 0x7fff)))
  (if (i32.eq (local.get $mode) (i32.const 1))
    (then
      (if (call $me (local.get $dst))
        (then (call $c (call $MPI_Irecv (local.get $roff) (local.get $rcount) (i32.const 2)
                                        (local.get $src) (local.get $tag) (i32.const 0) (i32.const 256)))))
      (if (call $me (local.get $src))
        (then
          (call $c (call $MPI_Isend (local.get $soff) (local.get $count) (i32.const 2)
                                    (local.get $dst) (local.get $tag) (i32.const 0) (i32.const 260)))
          (call $c (call $MPI_Wait (i32.const 260) (i32.const 0)))))
      (if (call $me (local.get $dst))
        (then
          (call $c (call $MPI_Wait (i32.const 256) (i32.const 64)))
          (call $check_status (local.get $src) (local.get $count)))))
    (else
      (if (call $me (local.get $src))
        (then (call $c (call $MPI_Send (local.get $soff) (local.get $count) (i32.const 2)
                                       (local.get $dst) (local.get $tag) (i32.const 0)))))
      (if (call $me (local.get $dst))
        (then
          (call $c (call $MPI_Recv (local.get $roff) (local.get $rcount) (i32.const 2)
                                   (select (i32.const -1) (local.get $src) (i32.eq (local.get $mode) (i32.const 2)))
                                   (local.get $tag) (i32.const 0) (i32.const 64)))
          (call $check_status (local.get $src) (local.get $count)))))))

(func $step (param $pc i32) (local $op i32) (local $tag i32) (local $n i32)
  (local.set $op (call $arg (local.get $pc) (i32.const 0)))
  (local.set $tag (i32.and (i32.shr_u (local.get $pc) (i32.const 5)) (i32.const 0x7fff)))
  (local.set $n (global.get $size))
  (block $out
    (if (i32.eq (local.get $op) (i32.const 1))
      (then (call $p2p (local.get $pc)) (br $out)))
    (if (i32.eq (local.get $op) (i32.const 2))
      (then
        (call $c (call $MPI_Sendrecv
          (call $d (call $arg (local.get $pc) (i32.const 3))) (call $arg (local.get $pc) (i32.const 2)) (i32.const 2)
          (i32.rem_u (i32.add (global.get $rank) (call $arg (local.get $pc) (i32.const 1))) (local.get $n))
          (local.get $tag)
          (call $d (call $arg (local.get $pc) (i32.const 4))) (call $arg (local.get $pc) (i32.const 2)) (i32.const 2)
          (i32.rem_u (i32.sub (i32.add (global.get $rank) (local.get $n)) (call $arg (local.get $pc) (i32.const 1))) (local.get $n))
          (local.get $tag) (i32.const 0) (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 3))
      (then
        (call $c (call $MPI_Bcast (call $d (call $arg (local.get $pc) (i32.const 3))) (call $arg (local.get $pc) (i32.const 2))
                                  (i32.const 2) (call $arg (local.get $pc) (i32.const 1)) (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 4))
      (then
        (call $c (call $MPI_Reduce (call $d (call $arg (local.get $pc) (i32.const 4))) (call $d (call $arg (local.get $pc) (i32.const 5)))
                                   (call $arg (local.get $pc) (i32.const 3)) (i32.const 2) (call $arg (local.get $pc) (i32.const 2))
                                   (call $arg (local.get $pc) (i32.const 1)) (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 5))
      (then
        (call $c (call $MPI_Allreduce (call $d (call $arg (local.get $pc) (i32.const 3))) (call $d (call $arg (local.get $pc) (i32.const 4)))
                                      (call $arg (local.get $pc) (i32.const 2)) (i32.const 2) (call $arg (local.get $pc) (i32.const 1)) (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 6))
      (then
        (call $c (call $MPI_Gather (call $d (call $arg (local.get $pc) (i32.const 3))) (call $arg (local.get $pc) (i32.const 2)) (i32.const 2)
                                   (call $d (call $arg (local.get $pc) (i32.const 4))) (call $arg (local.get $pc) (i32.const 2)) (i32.const 2)
                                   (call $arg (local.get $pc) (i32.const 1)) (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 7))
      (then
        (call $c (call $MPI_Allgather (call $d (call $arg (local.get $pc) (i32.const 2))) (call $arg (local.get $pc) (i32.const 1)) (i32.const 2)
                                      (call $d (call $arg (local.get $pc) (i32.const 3))) (call $arg (local.get $pc) (i32.const 1)) (i32.const 2)
                                      (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 8))
      (then
        (call $c (call $MPI_Scatter (call $d (call $arg (local.get $pc) (i32.const 3))) (call $arg (local.get $pc) (i32.const 2)) (i32.const 2)
                                    (call $d (call $arg (local.get $pc) (i32.const 4))) (call $arg (local.get $pc) (i32.const 2)) (i32.const 2)
                                    (call $arg (local.get $pc) (i32.const 1)) (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 9))
      (then
        (call $c (call $MPI_Alltoall (call $d (call $arg (local.get $pc) (i32.const 2))) (call $arg (local.get $pc) (i32.const 1)) (i32.const 2)
                                     (call $d (call $arg (local.get $pc) (i32.const 3))) (call $arg (local.get $pc) (i32.const 1)) (i32.const 2)
                                     (i32.const 0)))
        (br $out)))
    (if (i32.eq (local.get $op) (i32.const 10))
      (then (call $c (call $MPI_Barrier (i32.const 0))) (br $out)))
    (if (i32.eq (local.get $op) (i32.const 11))
      (then
        (if (call $me (call $arg (local.get $pc) (i32.const 1)))
          (then (i32.store (call $d (call $arg (local.get $pc) (i32.const 2))) (call $arg (local.get $pc) (i32.const 3)))))
        (br $out)))
    (call $exit (i32.const 4))))

(func (export "_start") (local $pc i32) (local $end i32)
  (drop (call $read_stdin (global.get $SCRIPT) (i32.const 196608)))
  (call $setup)
  (call $fill (i32.const 4096) (i32.const 1024) (i32.mul (global.get $rank) (i32.const 10000)))
  (local.set $pc (i32.add (global.get $SCRIPT) (i32.const 4)))
  (local.set $end (i32.add (local.get $pc) (i32.shl (i32.load (global.get $SCRIPT)) (i32.const 5))))
  (block $d
    (loop $l
      (br_if $d (i32.ge_u (local.get $pc) (local.get $end)))
      (call $step (local.get $pc))
      (local.set $pc (i32.add (local.get $pc) (i32.const 32)))
      (br $l)))
  (i32.store (i32.const 32) (i32.const 4096))
  (i32.store (i32.const 36) (i32.const 4096))
  (call $ok (call $fd_write (i32.const 1) (i32.const 32) (i32.const 1) (i32.const 40)) (i32.const 5))
  (call $teardown))
"#;

pub fn runner() -> ModuleArtifact {
    super::compile(&super::wrap(RUNNER_WAT))
}

/// Runs `script` in the sim group and returns each rank's data area, or a
/// description of what went wrong.
pub fn execute(runner: &ModuleArtifact, script: &Script) -> Result<Vec<Vec<i32>>, String> {
    let cfg = InstanceConfig {
        stdin: Some(script.encode()),
        capture_stdout: true,
        ..super::sim_config()
    };
    let out = super::embedder()
        .spawn_sim_group(script.ranks, runner, &cfg)
        .map_err(|e| e.to_string())?;
    if out.exit_codes.iter().any(|&c| c != 0) {
        return Err(format!("exit codes {:?}", out.exit_codes));
    }
    Ok(out
        .ranks
        .iter()
        .map(|r| {
            r.stdout
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect())
}

/// Runs one seed; `Err` names the first mismatch.
pub fn check_seed(runner: &ModuleArtifact, seed: u64) -> Result<(), String> {
    let script = Script::random(seed);
    let expected = script.interpret();
    let got = execute(runner, &script).map_err(|e| format!("seed {seed}: {e}"))?;
    if got.len() != expected.len() || got.iter().any(|g| g.len() != WORDS) {
        return Err(format!("seed {seed}: short output from the guest"));
    }
    for (r, (g, e)) in got.iter().zip(&expected).enumerate() {
        if g != e {
            let i = g.iter().zip(e).position(|(a, b)| a != b).unwrap_or(g.len().min(e.len()));
            return Err(format!(
                "seed {seed}: rank {r} word {i}: got {:?}, expected {:?} ({} ranks, {:?})",
                g.get(i),
                e.get(i),
                script.ranks,
                script.steps
            ));
        }
    }
    Ok(())
}
