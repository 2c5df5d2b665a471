//! A transport that moves no bytes.
//!
//! Every call is appended to a shared log together with the host spans it
//! was handed. Tests use it to check what a delegating backend would see:
//! which spans, whether they point into guest memory, and that the host
//! layer made no copies on the way.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::abi::{ReduceOp, MPI_ANY_SOURCE, MPI_ANY_TAG};
use crate::memory::{GuestMemory, HostSpan};
use crate::transport::{
    AbortInfo, BackendComm, BackendRequest, Buffer, Completion, Incoming, Outgoing, RecvInfo, Transport,
    TransportError, TransportResult,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCall {
    pub op: &'static str,
    pub spans: Vec<HostSpan>,
}

pub type MockLog = Arc<Mutex<Vec<MockCall>>>;

#[derive(Debug)]
pub struct MockTransport {
    rank: i32,
    size: i32,
    initialized: bool,
    log: MockLog,
    next_comm: u64,
    next_request: u64,
    requests: HashMap<u64, Completion>,
}

impl MockTransport {
    pub fn new(rank: i32, size: i32) -> Self {
        MockTransport {
            rank,
            size,
            initialized: false,
            log: MockLog::default(),
            next_comm: 2,
            next_request: 1,
            requests: HashMap::new(),
        }
    }

    pub fn log(&self) -> MockLog {
        Arc::clone(&self.log)
    }

    fn record(&self, op: &'static str, spans: &[HostSpan]) -> TransportResult<()> {
        if !self.initialized {
            return Err(TransportError::NotInitialized);
        }
        self.log.lock().unwrap().push(MockCall {
            op,
            spans: spans.to_vec(),
        });
        Ok(())
    }

    fn check_rank(&self, rank: i32) -> TransportResult<()> {
        if (0..self.size).contains(&rank) {
            Ok(())
        } else {
            Err(TransportError::InvalidRank { rank, size: self.size })
        }
    }

    fn received(msg: &Incoming) -> RecvInfo {
        RecvInfo {
            source: if msg.source == MPI_ANY_SOURCE { 0 } else { msg.source },
            tag: if msg.tag == MPI_ANY_TAG { 0 } else { msg.tag },
            bytes: msg.buf.span.len,
            truncated: false,
        }
    }

    fn request(&mut self, done: Completion) -> BackendRequest {
        let id = self.next_request;
        self.next_request += 1;
        self.requests.insert(id, done);
        BackendRequest(id)
    }
}

fn spans(bufs: &[Option<Buffer>]) -> Vec<HostSpan> {
    bufs.iter().flatten().map(|b| b.span).collect()
}

impl Transport for MockTransport {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn init(&mut self) -> TransportResult<(i32, i32)> {
        self.initialized = true;
        Ok((self.rank, self.size))
    }

    fn finalize(&mut self) -> TransportResult<()> {
        self.record("finalize", &[])
    }

    fn world(&self) -> BackendComm {
        BackendComm(0)
    }

    fn self_comm(&self) -> BackendComm {
        BackendComm(1)
    }

    fn comm_rank(&self, comm: BackendComm) -> TransportResult<i32> {
        Ok(if comm == self.self_comm() { 0 } else { self.rank })
    }

    fn comm_size(&self, comm: BackendComm) -> TransportResult<i32> {
        Ok(if comm == self.self_comm() { 1 } else { self.size })
    }

    fn send(&mut self, _mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<()> {
        self.check_rank(msg.dest)?;
        self.record("send", &[msg.buf.span])
    }

    fn recv(&mut self, _mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<RecvInfo> {
        self.record("recv", &[msg.buf.span])?;
        Ok(Self::received(&msg))
    }

    fn isend(&mut self, _mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<BackendRequest> {
        self.check_rank(msg.dest)?;
        self.record("isend", &[msg.buf.span])?;
        Ok(self.request(Completion::Sent))
    }

    fn irecv(&mut self, _mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<BackendRequest> {
        self.record("irecv", &[msg.buf.span])?;
        Ok(self.request(Completion::Received(Self::received(&msg))))
    }

    fn wait(&mut self, _mem: &mut GuestMemory<'_>, req: BackendRequest) -> TransportResult<Completion> {
        self.record("wait", &[])?;
        self.requests.remove(&req.0).ok_or(TransportError::UnknownRequest(req))
    }

    fn sendrecv(&mut self, _mem: &mut GuestMemory<'_>, send: Outgoing, recv: Incoming) -> TransportResult<RecvInfo> {
        self.check_rank(send.dest)?;
        self.record("sendrecv", &[send.buf.span, recv.buf.span])?;
        Ok(Self::received(&recv))
    }

    fn barrier(&mut self, _mem: &mut GuestMemory<'_>, _comm: BackendComm) -> TransportResult<()> {
        self.record("barrier", &[])
    }

    fn bcast(&mut self, _mem: &mut GuestMemory<'_>, _comm: BackendComm, buf: Buffer, _root: i32) -> TransportResult<()> {
        self.record("bcast", &[buf.span])
    }

    fn reduce(
        &mut self,
        _mem: &mut GuestMemory<'_>,
        _comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        _op: ReduceOp,
        _root: i32,
    ) -> TransportResult<()> {
        self.record("reduce", &spans(&[Some(send), recv]))
    }

    fn allreduce(
        &mut self,
        _mem: &mut GuestMemory<'_>,
        _comm: BackendComm,
        send: Buffer,
        recv: Buffer,
        _op: ReduceOp,
    ) -> TransportResult<()> {
        self.record("allreduce", &[send.span, recv.span])
    }

    fn gather(
        &mut self,
        _mem: &mut GuestMemory<'_>,
        _comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        _root: i32,
    ) -> TransportResult<()> {
        self.record("gather", &spans(&[Some(send), recv]))
    }

    fn allgather(&mut self, _mem: &mut GuestMemory<'_>, _comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()> {
        self.record("allgather", &[send.span, recv.span])
    }

    fn scatter(
        &mut self,
        _mem: &mut GuestMemory<'_>,
        _comm: BackendComm,
        send: Option<Buffer>,
        recv: Buffer,
        _root: i32,
    ) -> TransportResult<()> {
        self.record("scatter", &spans(&[send, Some(recv)]))
    }

    fn alltoall(&mut self, _mem: &mut GuestMemory<'_>, _comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()> {
        self.record("alltoall", &[send.span, recv.span])
    }

    fn comm_split(
        &mut self,
        _mem: &mut GuestMemory<'_>,
        _comm: BackendComm,
        color: Option<i32>,
        _key: i32,
    ) -> TransportResult<Option<BackendComm>> {
        self.record("comm_split", &[])?;
        Ok(color.map(|_| {
            self.next_comm += 1;
            BackendComm(self.next_comm - 1)
        }))
    }

    fn comm_dup(&mut self, _mem: &mut GuestMemory<'_>, _comm: BackendComm) -> TransportResult<BackendComm> {
        self.record("comm_dup", &[])?;
        self.next_comm += 1;
        Ok(BackendComm(self.next_comm - 1))
    }

    fn comm_free(&mut self, _comm: BackendComm) -> TransportResult<()> {
        self.record("comm_free", &[])
    }

    fn abort(&mut self, _comm: BackendComm, code: i32) -> TransportError {
        TransportError::Aborted(AbortInfo { rank: self.rank, code })
    }
}
