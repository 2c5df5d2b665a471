//! N ranks of one module inside this process.

use std::sync::Arc;
use std::thread;

use log::error;

use super::{Embedder, EngineError, EngineResult, InstanceConfig, ModuleArtifact, RankContext, RunOutcome};
use crate::abi::{Counters, Env};
use crate::transport::sim::{SimTransport, SimWorld};
use crate::transport::{AbortInfo, Transport};

/// Per-rank results of a sim run.
#[derive(Debug)]
pub struct GroupOutcome {
    /// Exit code of each rank. After an abort every rank reports the abort
    /// code.
    pub exit_codes: Vec<i32>,
    pub abort: Option<AbortInfo>,
    pub ranks: Vec<RunOutcome>,
}

impl Embedder {
    /// Runs `n` independent instances of `artifact`, one thread each, wired
    /// to a shared in-process rank group.
    ///
    /// A rank that traps or fails to start takes the group down: the others
    /// are woken out of any blocking call and the first failure is returned.
    /// A rank that exits with a nonzero code does the same, the way an MPI
    /// launcher tears down a job.
    pub fn spawn_sim_group(&self, n: usize, artifact: &ModuleArtifact, cfg: &InstanceConfig) -> EngineResult<GroupOutcome> {
        if n == 0 {
            return Err(EngineError::Setup("a rank group needs at least one rank".into()));
        }
        let world = match cfg.watchdog {
            Some(limit) => SimWorld::with_watchdog(n, limit),
            None => SimWorld::new(n),
        };
        let results: Vec<EngineResult<RunOutcome>> = thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .map(|rank| {
                    let world = Arc::clone(&world);
                    thread::Builder::new()
                        .name(format!("rank-{rank}"))
                        .spawn_scoped(s, move || {
                            let counters = Arc::new(Counters::default());
                            let transport = SimTransport::new(Arc::clone(&world), rank, Arc::clone(&counters));
                            let env = Arc::new(Env::new(transport.world(), transport.self_comm(), counters, cfg.instrument));
                            let result = self.instantiate_and_run(
                                artifact,
                                cfg,
                                RankContext {
                                    env,
                                    transport: Box::new(transport),
                                },
                            );
                            match &result {
                                Err(e) => {
                                    error!("rank {rank}: {e}");
                                    world.abort(AbortInfo { rank: rank as i32, code: 1 });
                                }
                                Ok(out) if out.abort.is_none() && out.exit_code != 0 => {
                                    world.abort(AbortInfo {
                                        rank: rank as i32,
                                        code: out.exit_code,
                                    });
                                }
                                Ok(_) => {}
                            }
                            result
                        })
                        .expect("spawn rank thread")
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(EngineError::Setup("rank thread panicked".into()))))
                .collect()
        });

        let mut ranks = Vec::with_capacity(n);
        let mut failure = None;
        for (rank, r) in results.into_iter().enumerate() {
            match r {
                Ok(out) => ranks.push(out),
                Err(e) => {
                    failure.get_or_insert(EngineError::RankFailed {
                        rank,
                        source: Box::new(e),
                    });
                }
            }
        }
        // An Aborted rank only says the group went down; report the rank
        // that actually failed.
        if let Some(e) = failure {
            return Err(e);
        }
        let abort = ranks.iter().find_map(|r| r.abort);
        let exit_codes = match abort {
            Some(info) => vec![info.code; n],
            None => ranks.iter().map(|r| r.exit_code).collect(),
        };
        Ok(GroupOutcome {
            exit_codes,
            abort,
            ranks,
        })
    }
}
