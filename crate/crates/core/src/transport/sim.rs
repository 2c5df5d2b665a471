//! In-process rank group.
//!
//! Every rank owns one mailbox: an arrival-ordered queue of [`Envelope`]s
//! guarded by a mutex and a condition variable. A receive scans the queue
//! front to back and takes the first envelope whose (source, tag,
//! communicator) matches, so messages on one channel never overtake each
//! other. Sends are eager: the payload is copied out of the sender's linear
//! memory into the envelope and copied into the receiver's memory on match.
//! Those two copies are the only payload copies the simulator makes, and both
//! are counted.
//!
//! Collectives are built from point-to-point messages on a separate context
//! so they can never match user receives. The algorithms are the naive ones
//! (root sends to everybody, fold at the root in rank order, pairwise
//! exchange in rank order): reproducible, not fast.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::abi::{Counters, ReduceOp, MPI_ANY_SOURCE, MPI_ANY_TAG, MPI_UNDEFINED};
use crate::memory::{GuestAddress, GuestMemory, HostSpan};
use crate::transport::{
    fold_into, AbortInfo, BackendComm, BackendRequest, Buffer, Completion, Incoming, Outgoing, RecvInfo,
    Transport, TransportError, TransportResult,
};

const POLL: Duration = Duration::from_millis(20);
const WORLD: BackendComm = BackendComm(0);
const SELF: BackendComm = BackendComm(1);

/// One message in flight.
#[derive(Debug, Clone)]
pub struct Envelope {
    /// Sender's rank within the communicator.
    pub src: i32,
    /// Receiver's world rank.
    pub dst: i32,
    pub tag: i32,
    /// Wire context: distinguishes communicators and separates collective
    /// traffic from point-to-point traffic on the same communicator.
    pub comm_epoch: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Default)]
struct Mailbox {
    queue: Mutex<VecDeque<Envelope>>,
    ready: Condvar,
}

/// Shared state of one simulated job.
#[derive(Debug)]
pub struct SimWorld {
    size: usize,
    mailboxes: Vec<Mailbox>,
    abort: Mutex<Option<AbortInfo>>,
    next_ctx: AtomicU64,
    watchdog: Option<Duration>,
}

impl SimWorld {
    pub fn new(size: usize) -> Arc<Self> {
        Self::build(size, None)
    }

    /// A world whose blocking calls give up with [`TransportError::Deadlock`]
    /// after waiting `limit` without progress.
    pub fn with_watchdog(size: usize, limit: Duration) -> Arc<Self> {
        Self::build(size, Some(limit))
    }

    fn build(size: usize, watchdog: Option<Duration>) -> Arc<Self> {
        assert!(size >= 1, "a rank group needs at least one rank");
        Arc::new(SimWorld {
            size,
            mailboxes: (0..size).map(|_| Mailbox::default()).collect(),
            abort: Mutex::new(None),
            // 0 and 1 are the world and self contexts.
            next_ctx: AtomicU64::new(2),
            watchdog,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Records the first abort and wakes every blocked rank.
    pub fn abort(&self, info: AbortInfo) -> AbortInfo {
        let recorded = *self.abort.lock().unwrap().get_or_insert(info);
        for mb in &self.mailboxes {
            let _guard = mb.queue.lock().unwrap();
            mb.ready.notify_all();
        }
        recorded
    }

    pub fn abort_info(&self) -> Option<AbortInfo> {
        *self.abort.lock().unwrap()
    }

    /// Messages queued at `rank` that no receive has matched yet.
    pub fn pending(&self, rank: usize) -> usize {
        self.mailboxes[rank].queue.lock().unwrap().len()
    }

    fn deliver(&self, env: Envelope) -> TransportResult<()> {
        if let Some(info) = self.abort_info() {
            return Err(TransportError::Aborted(info));
        }
        let mb = &self.mailboxes[env.dst as usize];
        mb.queue.lock().unwrap().push_back(env);
        mb.ready.notify_all();
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct SimComm {
    ctx: u64,
    /// World rank of each member, indexed by communicator rank.
    members: Vec<usize>,
    my_rank: usize,
}

impl SimComm {
    fn p2p(&self) -> u64 {
        self.ctx * 2
    }

    fn coll(&self) -> u64 {
        self.ctx * 2 + 1
    }

    fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Matcher {
    ctx: u64,
    source: i32,
    tag: i32,
}

impl Matcher {
    fn matches(&self, env: &Envelope) -> bool {
        env.comm_epoch == self.ctx
            && (self.source == MPI_ANY_SOURCE || self.source == env.src)
            && (self.tag == MPI_ANY_TAG || self.tag == env.tag)
    }
}

#[derive(Debug)]
struct PostedRecv {
    matcher: Matcher,
    addr: GuestAddress,
    capacity: usize,
}

#[derive(Debug)]
enum SimRequest {
    Sent,
    Pending(PostedRecv),
    Done(RecvInfo),
}

/// One rank's endpoint into a [`SimWorld`].
#[derive(Debug)]
pub struct SimTransport {
    world: Arc<SimWorld>,
    rank: usize,
    initialized: bool,
    comms: HashMap<u64, SimComm>,
    next_comm: u64,
    requests: HashMap<u64, SimRequest>,
    /// Pending nonblocking receives in posting order.
    posted: VecDeque<u64>,
    next_request: u64,
    counters: Arc<Counters>,
}

impl SimTransport {
    pub fn new(world: Arc<SimWorld>, rank: usize, counters: Arc<Counters>) -> Self {
        assert!(rank < world.size, "rank {rank} outside world of {}", world.size);
        let mut comms = HashMap::new();
        comms.insert(
            WORLD.0,
            SimComm {
                ctx: 0,
                members: (0..world.size).collect(),
                my_rank: rank,
            },
        );
        comms.insert(
            SELF.0,
            SimComm {
                ctx: 1,
                members: vec![rank],
                my_rank: 0,
            },
        );
        SimTransport {
            world,
            rank,
            initialized: false,
            comms,
            next_comm: 2,
            requests: HashMap::new(),
            posted: VecDeque::new(),
            next_request: 1,
            counters,
        }
    }

    pub fn world_handle(&self) -> &Arc<SimWorld> {
        &self.world
    }

    fn comm(&self, comm: BackendComm) -> TransportResult<SimComm> {
        self.comms
            .get(&comm.0)
            .cloned()
            .ok_or(TransportError::UnknownComm(comm))
    }

    fn check_init(&self) -> TransportResult<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(TransportError::NotInitialized)
        }
    }

    fn check_rank(comm: &SimComm, rank: i32) -> TransportResult<usize> {
        if rank >= 0 && (rank as usize) < comm.size() {
            Ok(rank as usize)
        } else {
            Err(TransportError::InvalidRank {
                rank,
                size: comm.size() as i32,
            })
        }
    }

    /// Copies a guest span into a fresh envelope payload.
    fn copy_out(&self, mem: &GuestMemory<'_>, span: HostSpan) -> TransportResult<Vec<u8>> {
        let payload = mem.span(span)?.to_vec();
        self.counters.record_copy(payload.len());
        Ok(payload)
    }

    /// Copies a payload into a guest span; returns (bytes written, truncated).
    fn copy_in(&self, mem: &mut GuestMemory<'_>, span: HostSpan, payload: &[u8]) -> TransportResult<(usize, bool)> {
        let dst = mem.span_mut(span)?;
        let n = payload.len().min(dst.len());
        dst[..n].copy_from_slice(&payload[..n]);
        self.counters.record_copy(n);
        Ok((n, payload.len() > dst.len()))
    }

    fn post(&self, comm: &SimComm, dst: usize, ctx: u64, tag: i32, payload: Vec<u8>) -> TransportResult<()> {
        self.world.deliver(Envelope {
            src: comm.my_rank as i32,
            dst: comm.members[dst] as i32,
            tag,
            comm_epoch: ctx,
            payload,
        })
    }

    fn first_posted_match(&self, env: &Envelope) -> Option<u64> {
        self.posted.iter().copied().find(|id| match self.requests.get(id) {
            Some(SimRequest::Pending(p)) => p.matcher.matches(env),
            _ => false,
        })
    }

    fn complete_posted(&mut self, mem: &mut GuestMemory<'_>, id: u64, env: Envelope) -> TransportResult<()> {
        self.posted.retain(|&p| p != id);
        let Some(SimRequest::Pending(p)) = self.requests.remove(&id) else {
            unreachable!("posted list only holds pending receives");
        };
        let span = mem.translate(p.addr, p.capacity as u64)?;
        let (bytes, truncated) = self.copy_in(mem, span, &env.payload)?;
        self.requests.insert(
            id,
            SimRequest::Done(RecvInfo {
                source: env.src,
                tag: env.tag,
                bytes,
                truncated,
            }),
        );
        Ok(())
    }

    fn request_pending(&self, id: u64) -> bool {
        matches!(self.requests.get(&id), Some(SimRequest::Pending(_)))
    }

    /// Drives matching for this rank. Queued envelopes go first to posted
    /// nonblocking receives (oldest first), then to `target`. Returns once
    /// `target` matched, once request `until` completed, or immediately
    /// after one pass when neither is given.
    fn progress(
        &mut self,
        mem: &mut GuestMemory<'_>,
        target: Option<Matcher>,
        until: Option<u64>,
    ) -> TransportResult<Option<Envelope>> {
        let world = Arc::clone(&self.world);
        let mailbox = &world.mailboxes[self.rank];
        let mut queue: MutexGuard<'_, VecDeque<Envelope>> = mailbox.queue.lock().unwrap();
        let started = Instant::now();
        loop {
            let mut i = 0;
            while i < queue.len() {
                if let Some(id) = self.first_posted_match(&queue[i]) {
                    let env = queue.remove(i).unwrap();
                    self.complete_posted(mem, id, env)?;
                    continue;
                }
                if target.is_some_and(|m| m.matches(&queue[i])) {
                    return Ok(queue.remove(i));
                }
                i += 1;
            }
            match (target, until) {
                (None, None) => return Ok(None),
                (None, Some(id)) if !self.request_pending(id) => return Ok(None),
                _ => {}
            }
            if let Some(info) = world.abort_info() {
                return Err(TransportError::Aborted(info));
            }
            if let Some(limit) = world.watchdog {
                if started.elapsed() >= limit {
                    return Err(TransportError::Deadlock(format!(
                        "rank {} blocked for {:?} waiting for {}; {} unmatched message(s) queued, {} receive(s) posted",
                        self.rank,
                        limit,
                        match (target, until) {
                            (Some(m), _) => format!(
                                "source {} tag {} on context {}",
                                m.source, m.tag, m.ctx
                            ),
                            (None, Some(id)) => format!("request {id}"),
                            (None, None) => unreachable!(),
                        },
                        queue.len(),
                        self.posted.len(),
                    )));
                }
            }
            queue = mailbox.ready.wait_timeout(queue, POLL).unwrap().0;
        }
    }

    fn recv_envelope(&mut self, mem: &mut GuestMemory<'_>, matcher: Matcher) -> TransportResult<Envelope> {
        Ok(self
            .progress(mem, Some(matcher), None)?
            .expect("blocking progress returns a match"))
    }

    fn coll_send(&self, comm: &SimComm, dst: usize, payload: Vec<u8>) -> TransportResult<()> {
        self.post(comm, dst, comm.coll(), 0, payload)
    }

    fn coll_recv(&mut self, mem: &mut GuestMemory<'_>, comm: &SimComm, src: usize) -> TransportResult<Vec<u8>> {
        let env = self.recv_envelope(
            mem,
            Matcher {
                ctx: comm.coll(),
                source: src as i32,
                tag: 0,
            },
        )?;
        Ok(env.payload)
    }

    fn write_block(&self, mem: &mut GuestMemory<'_>, span: HostSpan, payload: &[u8]) -> TransportResult<()> {
        let (_, truncated) = self.copy_in(mem, span, payload)?;
        if truncated {
            return Err(TransportError::SizeMismatch {
                expected: span.len,
                got: payload.len(),
            });
        }
        Ok(())
    }

    fn bcast_span(&mut self, mem: &mut GuestMemory<'_>, comm: &SimComm, span: HostSpan, root: usize) -> TransportResult<()> {
        if comm.my_rank == root {
            for r in (0..comm.size()).filter(|&r| r != root) {
                let payload = self.copy_out(mem, span)?;
                self.coll_send(comm, r, payload)?;
            }
            Ok(())
        } else {
            let payload = self.coll_recv(mem, comm, root)?;
            self.write_block(mem, span, &payload)
        }
    }

    fn reduce_impl(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: &SimComm,
        send: Buffer,
        recv: Option<Buffer>,
        op: ReduceOp,
        root: usize,
    ) -> TransportResult<()> {
        if comm.my_rank != root {
            let payload = self.copy_out(mem, send.span)?;
            return self.coll_send(comm, root, payload);
        }
        let recv = recv.expect("root supplies a receive buffer");
        let mut acc: Option<Vec<u8>> = None;
        let mut failure = None;
        for r in 0..comm.size() {
            let data = if r == root {
                self.copy_out(mem, send.span)?
            } else {
                self.coll_recv(mem, comm, r)?
            };
            match acc.as_mut() {
                None => acc = Some(data),
                Some(acc) => {
                    if let Err(e) = fold_into(op, send.dtype, acc, &data) {
                        failure.get_or_insert(e);
                    }
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        let acc = acc.unwrap_or_default();
        self.write_block(mem, recv.span, &acc)
    }

    fn gather_impl(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: &SimComm,
        send: Buffer,
        recv: Option<Buffer>,
        root: usize,
    ) -> TransportResult<()> {
        if comm.my_rank != root {
            let payload = self.copy_out(mem, send.span)?;
            return self.coll_send(comm, root, payload);
        }
        let recv = recv.expect("root supplies a receive buffer");
        let block = recv.block_bytes();
        let mut failure = None;
        for r in 0..comm.size() {
            let data = if r == root {
                self.copy_out(mem, send.span)?
            } else {
                self.coll_recv(mem, comm, r)?
            };
            if let Err(e) = self.write_block(mem, recv.span.block(r, block), &data) {
                failure.get_or_insert(e);
            }
        }
        failure.map_or(Ok(()), Err)
    }

    fn split_impl(
        &mut self,
        mem: &mut GuestMemory<'_>,
        parent: &SimComm,
        color: Option<i32>,
        key: i32,
    ) -> TransportResult<Option<BackendComm>> {
        let encode = |c: i32, k: i32| {
            let mut v = c.to_le_bytes().to_vec();
            v.extend_from_slice(&k.to_le_bytes());
            v
        };
        let mine = encode(color.unwrap_or(MPI_UNDEFINED), key);
        let n = parent.size();
        // Rank 0 of the parent collects every (color, key), reserves one
        // fresh context per color, and sends the table back out.
        let reply = if parent.my_rank == 0 {
            let mut table = Vec::with_capacity(8 * n + 8);
            for r in 0..n {
                if r == 0 {
                    table.extend_from_slice(&mine);
                } else {
                    table.extend(self.coll_recv(mem, parent, r)?);
                }
            }
            let entries = decode_pairs(&table);
            let colors = distinct_colors(&entries);
            let base = self.world.next_ctx.fetch_add(colors.len().max(1) as u64, Ordering::Relaxed);
            table.extend_from_slice(&base.to_le_bytes());
            for r in 1..n {
                self.coll_send(parent, r, table.clone())?;
            }
            table
        } else {
            self.coll_send(parent, 0, mine)?;
            self.coll_recv(mem, parent, 0)?
        };
        let (pairs, base) = reply.split_at(8 * n);
        let entries = decode_pairs(pairs);
        let base = u64::from_le_bytes(base.try_into().expect("split table carries a context base"));
        let Some(color) = color else {
            return Ok(None);
        };
        let colors = distinct_colors(&entries);
        let idx = colors.iter().position(|&c| c == color).expect("own color present");
        let mut group: Vec<(i32, usize)> = entries
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| *c == color)
            .map(|(r, (_, k))| (*k, r))
            .collect();
        group.sort();
        let my_rank = group
            .iter()
            .position(|&(_, r)| r == parent.my_rank)
            .expect("caller is a member of its own color");
        let token = self.next_comm;
        self.next_comm += 1;
        self.comms.insert(
            token,
            SimComm {
                ctx: base + idx as u64,
                members: group.iter().map(|&(_, r)| parent.members[r]).collect(),
                my_rank,
            },
        );
        Ok(Some(BackendComm(token)))
    }
}

fn decode_pairs(bytes: &[u8]) -> Vec<(i32, i32)> {
    bytes
        .chunks_exact(8)
        .map(|c| {
            (
                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                i32::from_le_bytes(c[4..8].try_into().unwrap()),
            )
        })
        .collect()
}

fn distinct_colors(entries: &[(i32, i32)]) -> Vec<i32> {
    let mut colors: Vec<i32> = entries
        .iter()
        .map(|&(c, _)| c)
        .filter(|&c| c != MPI_UNDEFINED)
        .collect();
    colors.sort_unstable();
    colors.dedup();
    colors
}

impl Transport for SimTransport {
    fn name(&self) -> &'static str {
        "sim"
    }

    fn init(&mut self) -> TransportResult<(i32, i32)> {
        self.initialized = true;
        Ok((self.rank as i32, self.world.size as i32))
    }

    fn finalize(&mut self) -> TransportResult<()> {
        self.check_init()
    }

    fn world(&self) -> BackendComm {
        WORLD
    }

    fn self_comm(&self) -> BackendComm {
        SELF
    }

    fn comm_rank(&self, comm: BackendComm) -> TransportResult<i32> {
        Ok(self.comm(comm)?.my_rank as i32)
    }

    fn comm_size(&self, comm: BackendComm) -> TransportResult<i32> {
        Ok(self.comm(comm)?.size() as i32)
    }

    fn send(&mut self, mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(msg.comm)?;
        let dst = Self::check_rank(&comm, msg.dest)?;
        let payload = self.copy_out(mem, msg.buf.span)?;
        self.post(&comm, dst, comm.p2p(), msg.tag, payload)
    }

    fn recv(&mut self, mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<RecvInfo> {
        self.check_init()?;
        let comm = self.comm(msg.comm)?;
        if msg.source != MPI_ANY_SOURCE {
            Self::check_rank(&comm, msg.source)?;
        }
        let env = self.recv_envelope(
            mem,
            Matcher {
                ctx: comm.p2p(),
                source: msg.source,
                tag: msg.tag,
            },
        )?;
        let (bytes, truncated) = self.copy_in(mem, msg.buf.span, &env.payload)?;
        Ok(RecvInfo {
            source: env.src,
            tag: env.tag,
            bytes,
            truncated,
        })
    }

    fn isend(&mut self, mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<BackendRequest> {
        self.send(mem, msg)?;
        let id = self.next_request;
        self.next_request += 1;
        self.requests.insert(id, SimRequest::Sent);
        Ok(BackendRequest(id))
    }

    fn irecv(&mut self, mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<BackendRequest> {
        self.check_init()?;
        let comm = self.comm(msg.comm)?;
        if msg.source != MPI_ANY_SOURCE {
            Self::check_rank(&comm, msg.source)?;
        }
        let view = mem.view();
        if !view.contains(msg.buf.span) {
            return Err(crate::memory::MemoryError::NotInRegion { host: msg.buf.span.start }.into());
        }
        // Kept as a guest offset: the span is re-translated at delivery.
        let addr = GuestAddress((msg.buf.span.start - view.base()) as u32);
        let id = self.next_request;
        self.next_request += 1;
        self.requests.insert(
            id,
            SimRequest::Pending(PostedRecv {
                matcher: Matcher {
                    ctx: comm.p2p(),
                    source: msg.source,
                    tag: msg.tag,
                },
                addr,
                capacity: msg.buf.span.len,
            }),
        );
        self.posted.push_back(id);
        self.progress(mem, None, None)?;
        Ok(BackendRequest(id))
    }

    fn wait(&mut self, mem: &mut GuestMemory<'_>, req: BackendRequest) -> TransportResult<Completion> {
        if self.request_pending(req.0) {
            self.progress(mem, None, Some(req.0))?;
        }
        match self.requests.remove(&req.0) {
            Some(SimRequest::Sent) => Ok(Completion::Sent),
            Some(SimRequest::Done(info)) => Ok(Completion::Received(info)),
            Some(SimRequest::Pending(_)) => unreachable!("progress returned with request pending"),
            None => Err(TransportError::UnknownRequest(req)),
        }
    }

    fn sendrecv(&mut self, mem: &mut GuestMemory<'_>, send: Outgoing, recv: Incoming) -> TransportResult<RecvInfo> {
        self.send(mem, send)?;
        self.recv(mem, recv)
    }

    fn barrier(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        if comm.my_rank == 0 {
            for r in 1..comm.size() {
                self.coll_recv(mem, &comm, r)?;
            }
            for r in 1..comm.size() {
                self.coll_send(&comm, r, Vec::new())?;
            }
        } else {
            self.coll_send(&comm, 0, Vec::new())?;
            self.coll_recv(mem, &comm, 0)?;
        }
        Ok(())
    }

    fn bcast(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, buf: Buffer, root: i32) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        let root = Self::check_rank(&comm, root)?;
        self.bcast_span(mem, &comm, buf.span, root)
    }

    fn reduce(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        op: ReduceOp,
        root: i32,
    ) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        let root = Self::check_rank(&comm, root)?;
        self.reduce_impl(mem, &comm, send, recv, op, root)
    }

    fn allreduce(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Buffer,
        op: ReduceOp,
    ) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        let at_root = (comm.my_rank == 0).then_some(recv);
        self.reduce_impl(mem, &comm, send, at_root, op, 0)?;
        self.bcast_span(mem, &comm, recv.span, 0)
    }

    fn gather(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        root: i32,
    ) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        let root = Self::check_rank(&comm, root)?;
        self.gather_impl(mem, &comm, send, recv, root)
    }

    fn allgather(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        let at_root = (comm.my_rank == 0).then_some(recv);
        self.gather_impl(mem, &comm, send, at_root, 0)?;
        self.bcast_span(mem, &comm, recv.span, 0)
    }

    fn scatter(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Option<Buffer>,
        recv: Buffer,
        root: i32,
    ) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        let root = Self::check_rank(&comm, root)?;
        if comm.my_rank != root {
            let payload = self.coll_recv(mem, &comm, root)?;
            return self.write_block(mem, recv.span, &payload);
        }
        let send = send.expect("root supplies a send buffer");
        let block = send.block_bytes();
        let mut own = Ok(());
        for r in 0..comm.size() {
            let piece = self.copy_out(mem, send.span.block(r, block))?;
            if r == root {
                own = self.write_block(mem, recv.span, &piece);
            } else {
                self.coll_send(&comm, r, piece)?;
            }
        }
        own
    }

    fn alltoall(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()> {
        self.check_init()?;
        let comm = self.comm(comm)?;
        let me = comm.my_rank;
        let (sblock, rblock) = (send.block_bytes(), recv.block_bytes());
        let mut failure = None;
        for p in 0..comm.size() {
            let piece = self.copy_out(mem, send.span.block(p, sblock))?;
            if p == me {
                if let Err(e) = self.write_block(mem, recv.span.block(p, rblock), &piece) {
                    failure.get_or_insert(e);
                }
            } else {
                self.coll_send(&comm, p, piece)?;
            }
        }
        for p in (0..comm.size()).filter(|&p| p != me) {
            let piece = self.coll_recv(mem, &comm, p)?;
            if let Err(e) = self.write_block(mem, recv.span.block(p, rblock), &piece) {
                failure.get_or_insert(e);
            }
        }
        failure.map_or(Ok(()), Err)
    }

    fn comm_split(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        color: Option<i32>,
        key: i32,
    ) -> TransportResult<Option<BackendComm>> {
        self.check_init()?;
        let parent = self.comm(comm)?;
        self.split_impl(mem, &parent, color, key)
    }

    fn comm_dup(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm) -> TransportResult<BackendComm> {
        self.check_init()?;
        let parent = self.comm(comm)?;
        let key = parent.my_rank as i32;
        Ok(self
            .split_impl(mem, &parent, Some(0), key)?
            .expect("dup always yields a communicator"))
    }

    fn comm_free(&mut self, comm: BackendComm) -> TransportResult<()> {
        if comm == WORLD || comm == SELF {
            return Err(TransportError::UnknownComm(comm));
        }
        self.comms
            .remove(&comm.0)
            .map(|_| ())
            .ok_or(TransportError::UnknownComm(comm))
    }

    fn abort(&mut self, _comm: BackendComm, code: i32) -> TransportError {
        let info = self.world.abort(AbortInfo {
            rank: self.rank as i32,
            code,
        });
        TransportError::Aborted(info)
    }
}
