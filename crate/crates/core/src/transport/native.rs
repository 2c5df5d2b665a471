//! Delegation to the host MPI library.
//!
//! One embedder process per rank, started by the system launcher. Guest
//! buffers are passed by pointer straight into the library: the host layer
//! never stages payload bytes.

use std::collections::HashMap;
use std::os::raw::{c_int, c_void};
use std::ptr;

use mpi::ffi;

use crate::abi::{Primitive, ReduceOp, MPI_ANY_SOURCE, MPI_ANY_TAG};
use crate::memory::GuestMemory;
use crate::transport::{
    AbortInfo, BackendComm, BackendRequest, Buffer, Completion, Incoming, Outgoing, RecvInfo, Transport,
    TransportError, TransportResult,
};

const WORLD: BackendComm = BackendComm(0);
const SELF: BackendComm = BackendComm(1);

fn datatype(p: Primitive) -> ffi::MPI_Datatype {
    // Fixed-width host types: the guest ABI is LP64-style regardless of the
    // host's C model.
    unsafe {
        match p {
            Primitive::Byte => ffi::RSMPI_UINT8_T,
            Primitive::Char => ffi::RSMPI_INT8_T,
            Primitive::Int => ffi::RSMPI_INT32_T,
            Primitive::Unsigned => ffi::RSMPI_UINT32_T,
            Primitive::Long | Primitive::LongLong => ffi::RSMPI_INT64_T,
            Primitive::UnsignedLong => ffi::RSMPI_UINT64_T,
            Primitive::Float => ffi::RSMPI_FLOAT,
            Primitive::Double => ffi::RSMPI_DOUBLE,
        }
    }
}

fn op(op: ReduceOp) -> ffi::MPI_Op {
    unsafe {
        match op {
            ReduceOp::Sum => ffi::RSMPI_SUM,
            ReduceOp::Max => ffi::RSMPI_MAX,
            ReduceOp::Min => ffi::RSMPI_MIN,
            ReduceOp::Prod => ffi::RSMPI_PROD,
            ReduceOp::Land => ffi::RSMPI_LAND,
            ReduceOp::Lor => ffi::RSMPI_LOR,
            ReduceOp::Band => ffi::RSMPI_BAND,
            ReduceOp::Bor => ffi::RSMPI_BOR,
        }
    }
}

fn wildcard_source(source: i32) -> c_int {
    if source == MPI_ANY_SOURCE {
        unsafe { ffi::RSMPI_ANY_SOURCE }
    } else {
        source
    }
}

fn wildcard_tag(tag: i32) -> c_int {
    if tag == MPI_ANY_TAG {
        unsafe { ffi::RSMPI_ANY_TAG }
    } else {
        tag
    }
}

fn error_string(rc: c_int) -> String {
    let mut buf = vec![0 as std::os::raw::c_char; 512];
    let mut len: c_int = 0;
    unsafe { ffi::MPI_Error_string(rc, buf.as_mut_ptr(), &mut len) };
    let bytes: Vec<u8> = buf[..len.max(0) as usize].iter().map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn check(what: &str, rc: c_int) -> TransportResult<()> {
    if rc == 0 {
        Ok(())
    } else {
        Err(TransportError::Backend(format!("{what}: {}", error_string(rc))))
    }
}

fn is_truncation(rc: c_int) -> bool {
    let mut class: c_int = 0;
    unsafe { ffi::MPI_Error_class(rc, &mut class) };
    class == ffi::MPI_ERR_TRUNCATE as c_int
}

/// Finalizes the library if it is up. Safe to call more than once.
pub fn finalize_library() -> TransportResult<()> {
    let (mut up, mut down): (c_int, c_int) = (0, 0);
    unsafe {
        check("MPI_Initialized", ffi::MPI_Initialized(&mut up))?;
        check("MPI_Finalized", ffi::MPI_Finalized(&mut down))?;
        if up != 0 && down == 0 {
            check("MPI_Finalize", ffi::MPI_Finalize())?;
        }
    }
    Ok(())
}

#[derive(Debug)]
struct Pending {
    raw: ffi::MPI_Request,
    is_recv: bool,
}

#[derive(Debug)]
pub struct NativeTransport {
    comms: HashMap<u64, ffi::MPI_Comm>,
    next_comm: u64,
    requests: HashMap<u64, Pending>,
    next_request: u64,
    initialized: bool,
    rank: i32,
    finalize_library: bool,
}

// Handles are owned by exactly one rank worker; the library is used from
// that worker only.
unsafe impl Send for NativeTransport {}

impl Default for NativeTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl NativeTransport {
    pub fn new() -> Self {
        NativeTransport {
            comms: HashMap::new(),
            next_comm: 2,
            requests: HashMap::new(),
            next_request: 1,
            initialized: false,
            rank: -1,
            finalize_library: true,
        }
    }

    /// Guest finalize only synchronizes; see [`finalize_library`].
    pub fn with_deferred_finalize() -> Self {
        NativeTransport {
            finalize_library: false,
            ..Self::new()
        }
    }

    fn comm(&self, comm: BackendComm) -> TransportResult<ffi::MPI_Comm> {
        if !self.initialized {
            return Err(TransportError::NotInitialized);
        }
        self.comms.get(&comm.0).copied().ok_or(TransportError::UnknownComm(comm))
    }

    fn recv_info(status: &ffi::MPI_Status, truncated: bool) -> RecvInfo {
        let mut count: c_int = 0;
        unsafe { ffi::MPI_Get_count(status, ffi::RSMPI_UINT8_T, &mut count) };
        RecvInfo {
            source: status.MPI_SOURCE,
            tag: status.MPI_TAG,
            bytes: count.max(0) as usize,
            truncated,
        }
    }

    fn buf_ptr(mem: &mut GuestMemory<'_>, buf: &Buffer) -> TransportResult<*mut c_void> {
        Ok(mem.span_ptr(buf.span)? as *mut c_void)
    }

    fn opt_ptr(mem: &mut GuestMemory<'_>, buf: Option<&Buffer>) -> TransportResult<*mut c_void> {
        match buf {
            Some(b) => Self::buf_ptr(mem, b),
            None => Ok(ptr::null_mut()),
        }
    }

    fn register(&mut self, raw: ffi::MPI_Comm) -> BackendComm {
        let id = self.next_comm;
        self.next_comm += 1;
        self.comms.insert(id, raw);
        BackendComm(id)
    }
}

impl Transport for NativeTransport {
    fn name(&self) -> &'static str {
        "native"
    }

    fn init(&mut self) -> TransportResult<(i32, i32)> {
        unsafe {
            let mut flag: c_int = 0;
            check("MPI_Finalized", ffi::MPI_Finalized(&mut flag))?;
            if flag != 0 {
                return Err(TransportError::Backend("MPI library already finalized in this process".into()));
            }
            check("MPI_Initialized", ffi::MPI_Initialized(&mut flag))?;
            if flag == 0 {
                check("MPI_Init", ffi::MPI_Init(ptr::null_mut(), ptr::null_mut()))?;
            }
            let world = ffi::RSMPI_COMM_WORLD;
            for comm in [world, ffi::RSMPI_COMM_SELF] {
                check("MPI_Comm_set_errhandler", ffi::MPI_Comm_set_errhandler(comm, ffi::RSMPI_ERRORS_RETURN))?;
            }
            self.comms.insert(WORLD.0, world);
            self.comms.insert(SELF.0, ffi::RSMPI_COMM_SELF);
            let (mut rank, mut size) = (0, 0);
            check("MPI_Comm_rank", ffi::MPI_Comm_rank(world, &mut rank))?;
            check("MPI_Comm_size", ffi::MPI_Comm_size(world, &mut size))?;
            self.initialized = true;
            self.rank = rank;
            Ok((rank, size))
        }
    }

    fn finalize(&mut self) -> TransportResult<()> {
        if !self.initialized {
            return Err(TransportError::NotInitialized);
        }
        if self.finalize_library {
            check("MPI_Finalize", unsafe { ffi::MPI_Finalize() })
        } else {
            check("MPI_Barrier", unsafe { ffi::MPI_Barrier(ffi::RSMPI_COMM_WORLD) })
        }
    }

    fn world(&self) -> BackendComm {
        WORLD
    }

    fn self_comm(&self) -> BackendComm {
        SELF
    }

    fn comm_rank(&self, comm: BackendComm) -> TransportResult<i32> {
        let raw = self.comm(comm)?;
        let mut rank = 0;
        check("MPI_Comm_rank", unsafe { ffi::MPI_Comm_rank(raw, &mut rank) })?;
        Ok(rank)
    }

    fn comm_size(&self, comm: BackendComm) -> TransportResult<i32> {
        let raw = self.comm(comm)?;
        let mut size = 0;
        check("MPI_Comm_size", unsafe { ffi::MPI_Comm_size(raw, &mut size) })?;
        Ok(size)
    }

    fn send(&mut self, mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<()> {
        let raw = self.comm(msg.comm)?;
        let p = Self::buf_ptr(mem, &msg.buf)?;
        check("MPI_Send", unsafe {
            ffi::MPI_Send(p, msg.buf.count as c_int, datatype(msg.buf.dtype), msg.dest, msg.tag, raw)
        })
    }

    fn recv(&mut self, mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<RecvInfo> {
        let raw = self.comm(msg.comm)?;
        let p = Self::buf_ptr(mem, &msg.buf)?;
        let mut status = std::mem::MaybeUninit::<ffi::MPI_Status>::zeroed();
        let rc = unsafe {
            ffi::MPI_Recv(
                p,
                msg.buf.count as c_int,
                datatype(msg.buf.dtype),
                wildcard_source(msg.source),
                wildcard_tag(msg.tag),
                raw,
                status.as_mut_ptr(),
            )
        };
        let status = unsafe { status.assume_init() };
        if rc != 0 && is_truncation(rc) {
            let mut info = Self::recv_info(&status, true);
            info.bytes = msg.buf.span.len;
            return Ok(info);
        }
        check("MPI_Recv", rc)?;
        Ok(Self::recv_info(&status, false))
    }

    fn isend(&mut self, mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<BackendRequest> {
        let raw = self.comm(msg.comm)?;
        let p = Self::buf_ptr(mem, &msg.buf)?;
        let mut req = std::mem::MaybeUninit::<ffi::MPI_Request>::uninit();
        check("MPI_Isend", unsafe {
            ffi::MPI_Isend(p, msg.buf.count as c_int, datatype(msg.buf.dtype), msg.dest, msg.tag, raw, req.as_mut_ptr())
        })?;
        let id = self.next_request;
        self.next_request += 1;
        self.requests.insert(id, Pending { raw: unsafe { req.assume_init() }, is_recv: false });
        Ok(BackendRequest(id))
    }

    fn irecv(&mut self, mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<BackendRequest> {
        let raw = self.comm(msg.comm)?;
        let p = Self::buf_ptr(mem, &msg.buf)?;
        let mut req = std::mem::MaybeUninit::<ffi::MPI_Request>::uninit();
        check("MPI_Irecv", unsafe {
            ffi::MPI_Irecv(
                p,
                msg.buf.count as c_int,
                datatype(msg.buf.dtype),
                wildcard_source(msg.source),
                wildcard_tag(msg.tag),
                raw,
                req.as_mut_ptr(),
            )
        })?;
        let id = self.next_request;
        self.next_request += 1;
        self.requests.insert(id, Pending { raw: unsafe { req.assume_init() }, is_recv: true });
        Ok(BackendRequest(id))
    }

    fn wait(&mut self, _mem: &mut GuestMemory<'_>, req: BackendRequest) -> TransportResult<Completion> {
        let mut pending = self.requests.remove(&req.0).ok_or(TransportError::UnknownRequest(req))?;
        let mut status = std::mem::MaybeUninit::<ffi::MPI_Status>::zeroed();
        let rc = unsafe { ffi::MPI_Wait(&mut pending.raw, status.as_mut_ptr()) };
        let status = unsafe { status.assume_init() };
        if !pending.is_recv {
            check("MPI_Wait", rc)?;
            return Ok(Completion::Sent);
        }
        if rc != 0 && is_truncation(rc) {
            return Ok(Completion::Received(Self::recv_info(&status, true)));
        }
        check("MPI_Wait", rc)?;
        Ok(Completion::Received(Self::recv_info(&status, false)))
    }

    fn sendrecv(&mut self, mem: &mut GuestMemory<'_>, send: Outgoing, recv: Incoming) -> TransportResult<RecvInfo> {
        let raw = self.comm(send.comm)?;
        let sp = Self::buf_ptr(mem, &send.buf)?;
        let rp = Self::buf_ptr(mem, &recv.buf)?;
        let mut status = std::mem::MaybeUninit::<ffi::MPI_Status>::zeroed();
        let rc = unsafe {
            ffi::MPI_Sendrecv(
                sp,
                send.buf.count as c_int,
                datatype(send.buf.dtype),
                send.dest,
                send.tag,
                rp,
                recv.buf.count as c_int,
                datatype(recv.buf.dtype),
                wildcard_source(recv.source),
                wildcard_tag(recv.tag),
                raw,
                status.as_mut_ptr(),
            )
        };
        let status = unsafe { status.assume_init() };
        if rc != 0 && is_truncation(rc) {
            return Ok(Self::recv_info(&status, true));
        }
        check("MPI_Sendrecv", rc)?;
        Ok(Self::recv_info(&status, false))
    }

    fn barrier(&mut self, _mem: &mut GuestMemory<'_>, comm: BackendComm) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        check("MPI_Barrier", unsafe { ffi::MPI_Barrier(raw) })
    }

    fn bcast(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, buf: Buffer, root: i32) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        let p = Self::buf_ptr(mem, &buf)?;
        check("MPI_Bcast", unsafe {
            ffi::MPI_Bcast(p, buf.count as c_int, datatype(buf.dtype), root, raw)
        })
    }

    fn reduce(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        reduce_op: ReduceOp,
        root: i32,
    ) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        let sp = Self::buf_ptr(mem, &send)?;
        let rp = Self::opt_ptr(mem, recv.as_ref())?;
        check("MPI_Reduce", unsafe {
            ffi::MPI_Reduce(sp, rp, send.count as c_int, datatype(send.dtype), op(reduce_op), root, raw)
        })
    }

    fn allreduce(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Buffer,
        reduce_op: ReduceOp,
    ) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        let sp = Self::buf_ptr(mem, &send)?;
        let rp = Self::buf_ptr(mem, &recv)?;
        check("MPI_Allreduce", unsafe {
            ffi::MPI_Allreduce(sp, rp, send.count as c_int, datatype(send.dtype), op(reduce_op), raw)
        })
    }

    fn gather(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        root: i32,
    ) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        let sp = Self::buf_ptr(mem, &send)?;
        let rp = Self::opt_ptr(mem, recv.as_ref())?;
        let (rcount, rtype) = recv.map_or((0, datatype(send.dtype)), |r| (r.count as c_int, datatype(r.dtype)));
        check("MPI_Gather", unsafe {
            ffi::MPI_Gather(sp, send.count as c_int, datatype(send.dtype), rp, rcount, rtype, root, raw)
        })
    }

    fn allgather(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        let sp = Self::buf_ptr(mem, &send)?;
        let rp = Self::buf_ptr(mem, &recv)?;
        check("MPI_Allgather", unsafe {
            ffi::MPI_Allgather(
                sp,
                send.count as c_int,
                datatype(send.dtype),
                rp,
                recv.count as c_int,
                datatype(recv.dtype),
                raw,
            )
        })
    }

    fn scatter(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Option<Buffer>,
        recv: Buffer,
        root: i32,
    ) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        let sp = Self::opt_ptr(mem, send.as_ref())?;
        let rp = Self::buf_ptr(mem, &recv)?;
        let (scount, stype) = send.map_or((0, datatype(recv.dtype)), |s| (s.count as c_int, datatype(s.dtype)));
        check("MPI_Scatter", unsafe {
            ffi::MPI_Scatter(sp, scount, stype, rp, recv.count as c_int, datatype(recv.dtype), root, raw)
        })
    }

    fn alltoall(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()> {
        let raw = self.comm(comm)?;
        let sp = Self::buf_ptr(mem, &send)?;
        let rp = Self::buf_ptr(mem, &recv)?;
        check("MPI_Alltoall", unsafe {
            ffi::MPI_Alltoall(
                sp,
                send.count as c_int,
                datatype(send.dtype),
                rp,
                recv.count as c_int,
                datatype(recv.dtype),
                raw,
            )
        })
    }

    fn comm_split(
        &mut self,
        _mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        color: Option<i32>,
        key: i32,
    ) -> TransportResult<Option<BackendComm>> {
        let raw = self.comm(comm)?;
        let color = color.unwrap_or(unsafe { ffi::RSMPI_UNDEFINED });
        let mut out = std::mem::MaybeUninit::<ffi::MPI_Comm>::uninit();
        check("MPI_Comm_split", unsafe { ffi::MPI_Comm_split(raw, color, key, out.as_mut_ptr()) })?;
        let out = unsafe { out.assume_init() };
        if out == unsafe { ffi::RSMPI_COMM_NULL } {
            return Ok(None);
        }
        unsafe { ffi::MPI_Comm_set_errhandler(out, ffi::RSMPI_ERRORS_RETURN) };
        Ok(Some(self.register(out)))
    }

    fn comm_dup(&mut self, _mem: &mut GuestMemory<'_>, comm: BackendComm) -> TransportResult<BackendComm> {
        let raw = self.comm(comm)?;
        let mut out = std::mem::MaybeUninit::<ffi::MPI_Comm>::uninit();
        check("MPI_Comm_dup", unsafe { ffi::MPI_Comm_dup(raw, out.as_mut_ptr()) })?;
        Ok(self.register(unsafe { out.assume_init() }))
    }

    fn comm_free(&mut self, comm: BackendComm) -> TransportResult<()> {
        if comm == WORLD || comm == SELF {
            return Err(TransportError::UnknownComm(comm));
        }
        let mut raw = self.comms.remove(&comm.0).ok_or(TransportError::UnknownComm(comm))?;
        check("MPI_Comm_free", unsafe { ffi::MPI_Comm_free(&mut raw) })
    }

    fn abort(&mut self, comm: BackendComm, code: i32) -> TransportError {
        let raw = self.comms.get(&comm.0).copied().unwrap_or(unsafe { ffi::RSMPI_COMM_WORLD });
        unsafe { ffi::MPI_Abort(raw, code) };
        TransportError::Aborted(AbortInfo { rank: self.rank, code })
    }
}
