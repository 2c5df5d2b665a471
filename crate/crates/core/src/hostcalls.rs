//! The `env` imports: MPI entry points as the guest sees them.
//!
//! Each call receives raw `i32` arguments, translates codes through the
//! instance's [`Env`] and addresses through its [`GuestMemory`], then hands
//! the translated call to the [`Transport`]. Everything a guest can get
//! wrong comes back as an MPI error code. Only `MPI_Abort`, and a group
//! that was aborted or deadlocked underneath a blocking call, unwind the
//! guest.

use log::warn;
use thiserror::Error;

use crate::abi::{
    write_status, AbiError, Env, Primitive, ReduceOp, StatusWire, MPI_ANY_SOURCE, MPI_ANY_TAG, MPI_COMM_NULL,
    MPI_ERR_ARG, MPI_ERR_COMM, MPI_ERR_OP, MPI_ERR_OTHER, MPI_SUCCESS, MPI_UNDEFINED, STATUS_SIZE,
};
use crate::memory::{GuestAddress, GuestMemory, HostSpan, MemoryError};
use crate::transport::{AbortInfo, BackendComm, Buffer, Completion, Incoming, Outgoing, RecvInfo, Transport, TransportError};

/// Conditions that end the guest instead of returning a code.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Fatal {
    #[error("MPI_Abort from rank {} with code {}", .0.rank, .0.code)]
    Aborted(AbortInfo),
    #[error("deadlock: {0}")]
    Deadlock(String),
}

pub type HcResult = Result<i32, Fatal>;

/// Shape of one `env` import. Every parameter is an `i32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostcallSignature {
    pub name: &'static str,
    pub params: usize,
    /// `MPI_Wtime` returns `f64`; everything else returns `i32`.
    pub returns_f64: bool,
}

const fn sig(name: &'static str, params: usize) -> HostcallSignature {
    HostcallSignature {
        name,
        params,
        returns_f64: false,
    }
}

/// The shipped surface.
pub const SIGNATURES: &[HostcallSignature] = &[
    sig("MPI_Init", 2),
    sig("MPI_Finalize", 0),
    sig("MPI_Initialized", 1),
    sig("MPI_Comm_rank", 2),
    sig("MPI_Comm_size", 2),
    sig("MPI_Send", 6),
    sig("MPI_Recv", 7),
    sig("MPI_Isend", 7),
    sig("MPI_Irecv", 7),
    sig("MPI_Wait", 2),
    sig("MPI_Waitall", 3),
    sig("MPI_Sendrecv", 12),
    sig("MPI_Barrier", 1),
    sig("MPI_Bcast", 5),
    sig("MPI_Reduce", 7),
    sig("MPI_Allreduce", 6),
    sig("MPI_Gather", 8),
    sig("MPI_Allgather", 7),
    sig("MPI_Scatter", 8),
    sig("MPI_Alltoall", 7),
    sig("MPI_Alloc_mem", 3),
    sig("MPI_Free_mem", 1),
    HostcallSignature {
        name: "MPI_Wtime",
        params: 0,
        returns_f64: true,
    },
    sig("MPI_Get_count", 3),
    sig("MPI_Abort", 2),
    sig("MPI_Comm_split", 4),
    sig("MPI_Comm_dup", 2),
    sig("MPI_Comm_free", 1),
];

pub fn signature(name: &str) -> Option<&'static HostcallSignature> {
    SIGNATURES.iter().find(|s| s.name == name)
}

/// Body of every import outside the shipped surface.
pub fn unimplemented(name: &str) -> i32 {
    warn!("{name} is not implemented by this embedder; returning MPI_ERR_OTHER");
    MPI_ERR_OTHER
}

enum Fail {
    Code(i32),
    Fatal(Fatal),
}

impl From<AbiError> for Fail {
    fn from(e: AbiError) -> Self {
        Fail::Code(e.mpi_code())
    }
}

impl From<MemoryError> for Fail {
    fn from(_: MemoryError) -> Self {
        Fail::Code(MPI_ERR_ARG)
    }
}

impl From<TransportError> for Fail {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Aborted(info) => Fail::Fatal(Fatal::Aborted(info)),
            TransportError::Deadlock(msg) => Fail::Fatal(Fatal::Deadlock(msg)),
            TransportError::InvalidRank { .. } | TransportError::Memory(_) => Fail::Code(MPI_ERR_ARG),
            TransportError::UnknownComm(_) => Fail::Code(MPI_ERR_COMM),
            TransportError::InvalidOp { .. } => Fail::Code(MPI_ERR_OP),
            TransportError::NotInitialized | TransportError::UnknownRequest(_) | TransportError::SizeMismatch { .. } => {
                Fail::Code(MPI_ERR_OTHER)
            }
            TransportError::Backend(detail) => {
                warn!("backend failure: {detail}");
                Fail::Code(MPI_ERR_OTHER)
            }
        }
    }
}

type Step<T> = Result<T, Fail>;

fn finish(r: Step<i32>) -> HcResult {
    match r {
        Ok(code) | Err(Fail::Code(code)) => Ok(code),
        Err(Fail::Fatal(f)) => Err(f),
    }
}

fn arg(ok: bool) -> Step<()> {
    if ok {
        Ok(())
    } else {
        Err(Fail::Code(MPI_ERR_ARG))
    }
}

fn addr(raw: i32) -> GuestAddress {
    GuestAddress::from_arg(raw)
}

fn status_of(info: RecvInfo) -> StatusWire {
    StatusWire {
        source: info.source,
        tag: info.tag,
        error: if info.truncated { MPI_ERR_OTHER } else { MPI_SUCCESS },
        count_bytes: info.bytes as i32,
    }
}

/// One host call in progress: the instance state, its memory as of call
/// entry, and the backend.
pub struct HostCalls<'a, 'm> {
    pub env: &'a Env,
    pub mem: &'a mut GuestMemory<'m>,
    pub transport: &'a mut dyn Transport,
}

impl<'a, 'm> HostCalls<'a, 'm> {
    /// Counts the call and refreshes the recorded memory view, which may
    /// have moved or grown since the last call.
    pub fn new(env: &'a Env, mem: &'a mut GuestMemory<'m>, transport: &'a mut dyn Transport) -> Self {
        env.counters().hostcalls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Self::resume(env, mem, transport)
    }

    /// Re-enters a call that left host code midway, e.g. to run the guest's
    /// allocator. Memory may have grown in between.
    pub fn resume(env: &'a Env, mem: &'a mut GuestMemory<'m>, transport: &'a mut dyn Transport) -> Self {
        env.refresh_memory(mem.view());
        HostCalls { env, mem, transport }
    }

    fn require_init(&self) -> Step<()> {
        if self.env.is_initialized() && !self.env.is_finalized() {
            Ok(())
        } else {
            Err(Fail::Code(MPI_ERR_OTHER))
        }
    }

    /// Bounds-checks an out-parameter of `len` bytes before anything runs.
    fn out_param(&self, raw: i32, len: u64) -> Step<GuestAddress> {
        let a = addr(raw);
        self.mem.translate(a, len)?;
        Ok(a)
    }

    fn status_param(&self, raw: i32) -> Step<GuestAddress> {
        let a = addr(raw);
        if !a.is_null() {
            self.mem.translate(a, STATUS_SIZE as u64)?;
        }
        Ok(a)
    }

    fn buffer(&self, raw: i32, count: i32, dtype: i32, blocks: usize) -> Step<Buffer> {
        arg(count >= 0)?;
        let dtype = self.env.translate_datatype(dtype)?;
        let len = count as u64 * dtype.size() as u64 * blocks as u64;
        let span = self.mem.translate(addr(raw), len)?;
        Ok(Buffer {
            span,
            count: count as usize,
            dtype,
        })
    }

    fn comm(&self, code: i32) -> Step<(BackendComm, i32)> {
        let comm = self.env.translate_comm(code)?;
        let size = self.transport.comm_size(comm)?;
        Ok((comm, size))
    }

    fn peer(rank: i32, size: i32, wildcard: bool) -> Step<()> {
        arg((0..size).contains(&rank) || (wildcard && rank == MPI_ANY_SOURCE))
    }

    fn tag(tag: i32, wildcard: bool) -> Step<()> {
        arg(tag >= 0 || (wildcard && tag == MPI_ANY_TAG))
    }

    fn disjoint(a: HostSpan, b: HostSpan) -> Step<()> {
        arg(!a.overlaps(&b))
    }

    fn op_for(&self, code: i32, dtype: Primitive) -> Step<ReduceOp> {
        let op = self.env.translate_op(code)?;
        if op.supports(dtype) {
            Ok(op)
        } else {
            Err(Fail::Code(MPI_ERR_OP))
        }
    }

    fn my_rank(&self, comm: BackendComm) -> Step<i32> {
        Ok(self.transport.comm_rank(comm)?)
    }

    pub fn init(&mut self, _argc: i32, _argv: i32) -> HcResult {
        finish((|| {
            if self.env.is_initialized() {
                return Err(Fail::Code(MPI_ERR_OTHER));
            }
            let (rank, size) = self.transport.init()?;
            self.env.mark_initialized(rank, size);
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn finalize(&mut self) -> HcResult {
        finish((|| {
            self.require_init()?;
            self.transport.finalize()?;
            self.env.mark_finalized();
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn initialized(&mut self, flag_out: i32) -> HcResult {
        finish((|| {
            self.mem.write_i32(addr(flag_out), self.env.is_initialized() as i32)?;
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn comm_rank(&mut self, comm: i32, rank_out: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let comm = self.env.translate_comm(comm)?;
            let rank = self.transport.comm_rank(comm)?;
            self.mem.write_i32(addr(rank_out), rank)?;
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn comm_size(&mut self, comm: i32, size_out: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (_, size) = self.comm(comm)?;
            self.mem.write_i32(addr(size_out), size)?;
            Ok(MPI_SUCCESS)
        })())
    }

    fn outgoing(&self, buf: i32, count: i32, dtype: i32, dest: i32, tag: i32, comm: i32) -> Step<Outgoing> {
        let (comm, size) = self.comm(comm)?;
        let buf = self.buffer(buf, count, dtype, 1)?;
        Self::peer(dest, size, false)?;
        Self::tag(tag, false)?;
        Ok(Outgoing { comm, buf, dest, tag })
    }

    fn incoming(&self, buf: i32, count: i32, dtype: i32, source: i32, tag: i32, comm: i32) -> Step<Incoming> {
        let (comm, size) = self.comm(comm)?;
        let buf = self.buffer(buf, count, dtype, 1)?;
        Self::peer(source, size, true)?;
        Self::tag(tag, true)?;
        Ok(Incoming { comm, buf, source, tag })
    }

    fn finish_recv(&mut self, info: RecvInfo, status: GuestAddress) -> Step<i32> {
        write_status(self.mem, status, status_of(info))?;
        Ok(if info.truncated { MPI_ERR_OTHER } else { MPI_SUCCESS })
    }

    pub fn send(&mut self, buf: i32, count: i32, dtype: i32, dest: i32, tag: i32, comm: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let msg = self.outgoing(buf, count, dtype, dest, tag, comm)?;
            self.env.record_send_probe(dtype, msg.buf.span.len as u64);
            self.transport.send(self.mem, msg)?;
            Ok(MPI_SUCCESS)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn recv(&mut self, buf: i32, count: i32, dtype: i32, source: i32, tag: i32, comm: i32, status: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let msg = self.incoming(buf, count, dtype, source, tag, comm)?;
            let status = self.status_param(status)?;
            let info = self.transport.recv(self.mem, msg)?;
            self.finish_recv(info, status)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn isend(&mut self, buf: i32, count: i32, dtype: i32, dest: i32, tag: i32, comm: i32, request_out: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let out = self.out_param(request_out, 4)?;
            let msg = self.outgoing(buf, count, dtype, dest, tag, comm)?;
            self.env.record_send_probe(dtype, msg.buf.span.len as u64);
            let req = self.transport.isend(self.mem, msg)?;
            let code = self.env.register_request(req);
            self.mem.write_i32(out, code)?;
            Ok(MPI_SUCCESS)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn irecv(&mut self, buf: i32, count: i32, dtype: i32, source: i32, tag: i32, comm: i32, request_out: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let out = self.out_param(request_out, 4)?;
            let msg = self.incoming(buf, count, dtype, source, tag, comm)?;
            let req = self.transport.irecv(self.mem, msg)?;
            let code = self.env.register_request(req);
            self.mem.write_i32(out, code)?;
            Ok(MPI_SUCCESS)
        })())
    }

    fn complete(&mut self, code: i32, status: GuestAddress) -> Step<i32> {
        let req = self.env.take_request(code)?;
        match self.transport.wait(self.mem, req)? {
            Completion::Sent => {
                write_status(self.mem, status, StatusWire::EMPTY)?;
                Ok(MPI_SUCCESS)
            }
            Completion::Received(info) => self.finish_recv(info, status),
        }
    }

    /// The request code is consumed; it is not overwritten in guest memory,
    /// so waiting on it again reports `MPI_ERR_OTHER`.
    pub fn wait(&mut self, request: i32, status: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let code = self.mem.read_i32(addr(request))?;
            let status = self.status_param(status)?;
            self.complete(code, status)
        })())
    }

    pub fn waitall(&mut self, count: i32, requests: i32, statuses: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            arg(count >= 0)?;
            if count == 0 {
                return Ok(MPI_SUCCESS);
            }
            let n = count as u64;
            let codes: Vec<i32> = self
                .mem
                .read_bytes(addr(requests), 4 * n)?
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let statuses = addr(statuses);
            if !statuses.is_null() {
                self.mem.translate(statuses, STATUS_SIZE as u64 * n)?;
            }
            for &code in &codes {
                self.env.lookup_request(code)?;
            }
            let mut rc = MPI_SUCCESS;
            for (i, &code) in codes.iter().enumerate() {
                let status = if statuses.is_null() {
                    GuestAddress::NULL
                } else {
                    GuestAddress(statuses.0 + STATUS_SIZE * i as u32)
                };
                let r = self.complete(code, status)?;
                if r != MPI_SUCCESS {
                    rc = r;
                }
            }
            Ok(rc)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn sendrecv(
        &mut self,
        sbuf: i32,
        scount: i32,
        stype: i32,
        dest: i32,
        stag: i32,
        rbuf: i32,
        rcount: i32,
        rtype: i32,
        source: i32,
        rtag: i32,
        comm: i32,
        status: i32,
    ) -> HcResult {
        finish((|| {
            self.require_init()?;
            let send = self.outgoing(sbuf, scount, stype, dest, stag, comm)?;
            let recv = self.incoming(rbuf, rcount, rtype, source, rtag, comm)?;
            Self::disjoint(send.buf.span, recv.buf.span)?;
            let status = self.status_param(status)?;
            self.env.record_send_probe(stype, send.buf.span.len as u64);
            let info = self.transport.sendrecv(self.mem, send, recv)?;
            self.finish_recv(info, status)
        })())
    }

    pub fn barrier(&mut self, comm: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, _) = self.comm(comm)?;
            self.transport.barrier(self.mem, comm)?;
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn bcast(&mut self, buf: i32, count: i32, dtype: i32, root: i32, comm: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, size) = self.comm(comm)?;
            let buf = self.buffer(buf, count, dtype, 1)?;
            Self::peer(root, size, false)?;
            self.transport.bcast(self.mem, comm, buf, root)?;
            Ok(MPI_SUCCESS)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn reduce(&mut self, send: i32, recv: i32, count: i32, dtype: i32, op: i32, root: i32, comm: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, size) = self.comm(comm)?;
            let send = self.buffer(send, count, dtype, 1)?;
            let op = self.op_for(op, send.dtype)?;
            Self::peer(root, size, false)?;
            let recv = if self.my_rank(comm)? == root {
                let recv = self.buffer(recv, count, dtype, 1)?;
                Self::disjoint(send.span, recv.span)?;
                Some(recv)
            } else {
                None
            };
            self.transport.reduce(self.mem, comm, send, recv, op, root)?;
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn allreduce(&mut self, send: i32, recv: i32, count: i32, dtype: i32, op: i32, comm: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, _) = self.comm(comm)?;
            let send = self.buffer(send, count, dtype, 1)?;
            let recv = self.buffer(recv, count, dtype, 1)?;
            let op = self.op_for(op, send.dtype)?;
            Self::disjoint(send.span, recv.span)?;
            self.transport.allreduce(self.mem, comm, send, recv, op)?;
            Ok(MPI_SUCCESS)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn gather(
        &mut self,
        send: i32,
        scount: i32,
        stype: i32,
        recv: i32,
        rcount: i32,
        rtype: i32,
        root: i32,
        comm: i32,
    ) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, size) = self.comm(comm)?;
            let send = self.buffer(send, scount, stype, 1)?;
            Self::peer(root, size, false)?;
            let recv = if self.my_rank(comm)? == root {
                let recv = self.buffer(recv, rcount, rtype, size as usize)?;
                Self::disjoint(send.span, recv.span)?;
                Some(recv)
            } else {
                None
            };
            self.transport.gather(self.mem, comm, send, recv, root)?;
            Ok(MPI_SUCCESS)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn allgather(&mut self, send: i32, scount: i32, stype: i32, recv: i32, rcount: i32, rtype: i32, comm: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, size) = self.comm(comm)?;
            let send = self.buffer(send, scount, stype, 1)?;
            let recv = self.buffer(recv, rcount, rtype, size as usize)?;
            Self::disjoint(send.span, recv.span)?;
            self.transport.allgather(self.mem, comm, send, recv)?;
            Ok(MPI_SUCCESS)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn scatter(
        &mut self,
        send: i32,
        scount: i32,
        stype: i32,
        recv: i32,
        rcount: i32,
        rtype: i32,
        root: i32,
        comm: i32,
    ) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, size) = self.comm(comm)?;
            let recv = self.buffer(recv, rcount, rtype, 1)?;
            Self::peer(root, size, false)?;
            let send = if self.my_rank(comm)? == root {
                let send = self.buffer(send, scount, stype, size as usize)?;
                Self::disjoint(send.span, recv.span)?;
                Some(send)
            } else {
                None
            };
            self.transport.scatter(self.mem, comm, send, recv, root)?;
            Ok(MPI_SUCCESS)
        })())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn alltoall(&mut self, send: i32, scount: i32, stype: i32, recv: i32, rcount: i32, rtype: i32, comm: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let (comm, size) = self.comm(comm)?;
            let send = self.buffer(send, scount, stype, size as usize)?;
            let recv = self.buffer(recv, rcount, rtype, size as usize)?;
            Self::disjoint(send.span, recv.span)?;
            self.transport.alltoall(self.mem, comm, send, recv)?;
            Ok(MPI_SUCCESS)
        })())
    }

    /// First half of `MPI_Alloc_mem`: validates arguments and returns the
    /// byte count to request from the guest allocator, or the error code to
    /// return right away.
    pub fn alloc_mem_prepare(&mut self, size: i32, _info: i32, base_out: i32) -> Result<u32, i32> {
        if size < 0 {
            return Err(MPI_ERR_ARG);
        }
        match self.out_param(base_out, 4) {
            Ok(_) => Ok(size as u32),
            Err(_) => Err(MPI_ERR_ARG),
        }
    }

    /// Second half: stores the guest allocator's result.
    pub fn alloc_mem_complete(&mut self, size: u32, base_out: i32, result: Result<GuestAddress, MemoryError>) -> i32 {
        let base = match result {
            Ok(base) => base,
            Err(e) => {
                warn!("MPI_Alloc_mem: {e}");
                return MPI_ERR_OTHER;
            }
        };
        if self.mem.translate(base, size as u64).is_err() {
            warn!("MPI_Alloc_mem: guest allocator returned {:#x}, outside linear memory", base.0);
            return MPI_ERR_OTHER;
        }
        match self.mem.write_i32(addr(base_out), base.0 as i32) {
            Ok(()) => MPI_SUCCESS,
            Err(_) => MPI_ERR_ARG,
        }
    }

    pub fn free_mem_complete(&mut self, result: Result<(), MemoryError>) -> i32 {
        match result {
            Ok(()) => MPI_SUCCESS,
            Err(e) => {
                warn!("MPI_Free_mem: {e}");
                MPI_ERR_OTHER
            }
        }
    }

    pub fn wtime(&mut self) -> f64 {
        self.env.wtime()
    }

    pub fn get_count(&mut self, status: i32, dtype: i32, count_out: i32) -> HcResult {
        finish((|| {
            let dtype = self.env.translate_datatype(dtype)?;
            let status = addr(status);
            arg(!status.is_null())?;
            let s = crate::abi::read_status(self.mem, status)?;
            let size = dtype.size() as i32;
            let count = if s.count_bytes >= 0 && s.count_bytes % size == 0 {
                s.count_bytes / size
            } else {
                MPI_UNDEFINED
            };
            self.mem.write_i32(addr(count_out), count)?;
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn abort(&mut self, comm: i32, code: i32) -> Fatal {
        let comm = self.env.translate_comm(comm).unwrap_or_else(|_| self.transport.world());
        match self.transport.abort(comm, code) {
            TransportError::Aborted(info) => Fatal::Aborted(info),
            other => Fatal::Aborted(AbortInfo {
                rank: self.env.rank(),
                code: {
                    warn!("abort did not complete cleanly: {other}");
                    code
                },
            }),
        }
    }

    pub fn comm_split(&mut self, comm: i32, color: i32, key: i32, newcomm_out: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let out = self.out_param(newcomm_out, 4)?;
            let (comm, _) = self.comm(comm)?;
            let color = if color == MPI_UNDEFINED {
                None
            } else {
                arg(color >= 0)?;
                Some(color)
            };
            let code = match self.transport.comm_split(self.mem, comm, color, key)? {
                Some(new) => self.env.register_comm(new),
                None => MPI_COMM_NULL,
            };
            self.mem.write_i32(out, code)?;
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn comm_dup(&mut self, comm: i32, newcomm_out: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let out = self.out_param(newcomm_out, 4)?;
            let (comm, _) = self.comm(comm)?;
            let new = self.transport.comm_dup(self.mem, comm)?;
            let code = self.env.register_comm(new);
            self.mem.write_i32(out, code)?;
            Ok(MPI_SUCCESS)
        })())
    }

    pub fn comm_free(&mut self, comm_addr: i32) -> HcResult {
        finish((|| {
            self.require_init()?;
            let slot = addr(comm_addr);
            let code = self.mem.read_i32(slot)?;
            let comm = self.env.release_comm(code)?;
            self.transport.comm_free(comm)?;
            self.mem.write_i32(slot, MPI_COMM_NULL)?;
            Ok(MPI_SUCCESS)
        })())
    }
}
