//! Message layer behind the MPI host calls.
//!
//! Host calls hand the transport already-translated arguments: host spans
//! into linear memory, element types and reduction ops. Two implementations
//! exist: [`sim`] runs N ranks inside one process, and `native` (behind the
//! `native` feature) delegates to the host MPI library. [`mock`] records
//! what it is handed without moving any bytes.

use thiserror::Error;

use crate::abi::{Primitive, ReduceOp};
use crate::memory::{GuestMemory, HostSpan, MemoryError};

pub mod mock;
#[cfg(feature = "native")]
pub mod native;
pub mod sim;

/// Backend-side communicator handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BackendComm(pub u64);

/// Backend-side request handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BackendRequest(pub u64);

/// A typed guest buffer: `count` elements of `dtype` laid out in `span`.
/// For rooted/all-to-all collectives `count` is the per-rank block count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Buffer {
    pub span: HostSpan,
    pub count: usize,
    pub dtype: Primitive,
}

impl Buffer {
    pub fn block_bytes(&self) -> usize {
        self.count * self.dtype.size()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Outgoing {
    pub comm: BackendComm,
    pub buf: Buffer,
    pub dest: i32,
    pub tag: i32,
}

#[derive(Debug, Clone, Copy)]
pub struct Incoming {
    pub comm: BackendComm,
    pub buf: Buffer,
    pub source: i32,
    pub tag: i32,
}

/// Envelope of a completed receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecvInfo {
    pub source: i32,
    pub tag: i32,
    /// Bytes written into the receive buffer.
    pub bytes: usize,
    /// The incoming message was larger than the buffer.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Sent,
    Received(RecvInfo),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbortInfo {
    pub rank: i32,
    pub code: i32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("transport not initialised")]
    NotInitialized,
    #[error("rank {rank} is outside a communicator of size {size}")]
    InvalidRank { rank: i32, size: i32 },
    #[error("unknown backend communicator {0:?}")]
    UnknownComm(BackendComm),
    #[error("unknown backend request {0:?}")]
    UnknownRequest(BackendRequest),
    #[error("{op:?} is not defined for {dtype:?}")]
    InvalidOp { op: ReduceOp, dtype: Primitive },
    #[error("collective block of {got} bytes does not fit {expected} bytes")]
    SizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("group aborted by rank {} with code {}", .0.rank, .0.code)]
    Aborted(AbortInfo),
    #[error("deadlock suspected: {0}")]
    Deadlock(String),
}

impl TransportError {
    /// Errors that must unwind the guest instead of returning an MPI code.
    pub fn is_fatal(&self) -> bool {
        matches!(self, TransportError::Aborted(_) | TransportError::Deadlock(_))
    }
}

pub type TransportResult<T> = Result<T, TransportError>;

/// The operations an MPI host call can defer to.
///
/// Spans always belong to the calling instance's memory, which is passed
/// alongside so implementations can reach the bytes without copying.
pub trait Transport: Send {
    fn name(&self) -> &'static str;

    /// Joins the rank group; returns (rank, size) in the world communicator.
    fn init(&mut self) -> TransportResult<(i32, i32)>;
    fn finalize(&mut self) -> TransportResult<()>;

    fn world(&self) -> BackendComm;
    fn self_comm(&self) -> BackendComm;
    fn comm_rank(&self, comm: BackendComm) -> TransportResult<i32>;
    fn comm_size(&self, comm: BackendComm) -> TransportResult<i32>;

    fn send(&mut self, mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<()>;
    fn recv(&mut self, mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<RecvInfo>;
    fn isend(&mut self, mem: &mut GuestMemory<'_>, msg: Outgoing) -> TransportResult<BackendRequest>;
    fn irecv(&mut self, mem: &mut GuestMemory<'_>, msg: Incoming) -> TransportResult<BackendRequest>;
    fn wait(&mut self, mem: &mut GuestMemory<'_>, req: BackendRequest) -> TransportResult<Completion>;
    fn sendrecv(
        &mut self,
        mem: &mut GuestMemory<'_>,
        send: Outgoing,
        recv: Incoming,
    ) -> TransportResult<RecvInfo>;

    fn barrier(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm) -> TransportResult<()>;
    fn bcast(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, buf: Buffer, root: i32) -> TransportResult<()>;
    /// `recv` is `Some` exactly on the root.
    fn reduce(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        op: ReduceOp,
        root: i32,
    ) -> TransportResult<()>;
    fn allreduce(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Buffer,
        op: ReduceOp,
    ) -> TransportResult<()>;
    /// `recv` is `Some` exactly on the root.
    fn gather(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Buffer,
        recv: Option<Buffer>,
        root: i32,
    ) -> TransportResult<()>;
    fn allgather(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()>;
    /// `send` is `Some` exactly on the root.
    fn scatter(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        send: Option<Buffer>,
        recv: Buffer,
        root: i32,
    ) -> TransportResult<()>;
    fn alltoall(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm, send: Buffer, recv: Buffer) -> TransportResult<()>;

    /// `color == None` is `MPI_UNDEFINED`: the caller joins no new communicator.
    fn comm_split(
        &mut self,
        mem: &mut GuestMemory<'_>,
        comm: BackendComm,
        color: Option<i32>,
        key: i32,
    ) -> TransportResult<Option<BackendComm>>;
    fn comm_dup(&mut self, mem: &mut GuestMemory<'_>, comm: BackendComm) -> TransportResult<BackendComm>;
    fn comm_free(&mut self, comm: BackendComm) -> TransportResult<()>;

    /// Tears down the whole group. Returns the error to unwind the caller with.
    fn abort(&mut self, comm: BackendComm, code: i32) -> TransportError;
}

macro_rules! fold_as {
    ($ty:ty, $op:expr, $acc:expr, $other:expr) => {{
        const W: usize = std::mem::size_of::<$ty>();
        for (a, b) in $acc.chunks_exact_mut(W).zip($other.chunks_exact(W)) {
            let x = <$ty>::from_le_bytes(a[..].try_into().unwrap());
            let y = <$ty>::from_le_bytes(b.try_into().unwrap());
            let z: $ty = fold_int!($ty, $op, x, y);
            a.copy_from_slice(&z.to_le_bytes());
        }
    }};
}

macro_rules! fold_int {
    ($ty:ty, $op:expr, $x:expr, $y:expr) => {
        match $op {
            ReduceOp::Sum => $x.wrapping_add($y),
            ReduceOp::Prod => $x.wrapping_mul($y),
            ReduceOp::Max => $x.max($y),
            ReduceOp::Min => $x.min($y),
            ReduceOp::Land => (($x != 0) && ($y != 0)) as $ty,
            ReduceOp::Lor => (($x != 0) || ($y != 0)) as $ty,
            ReduceOp::Band => $x & $y,
            ReduceOp::Bor => $x | $y,
        }
    };
}

macro_rules! fold_float {
    ($ty:ty, $op:expr, $acc:expr, $other:expr) => {{
        const W: usize = std::mem::size_of::<$ty>();
        for (a, b) in $acc.chunks_exact_mut(W).zip($other.chunks_exact(W)) {
            let x = <$ty>::from_le_bytes(a[..].try_into().unwrap());
            let y = <$ty>::from_le_bytes(b.try_into().unwrap());
            let z: $ty = match $op {
                ReduceOp::Sum => x + y,
                ReduceOp::Prod => x * y,
                ReduceOp::Max => x.max(y),
                ReduceOp::Min => x.min(y),
                ReduceOp::Land | ReduceOp::Lor | ReduceOp::Band | ReduceOp::Bor => {
                    unreachable!("checked by caller")
                }
            };
            a.copy_from_slice(&z.to_le_bytes());
        }
    }};
}

/// `acc[i] = acc[i] op other[i]` element-wise over little-endian elements.
pub fn fold_into(op: ReduceOp, dtype: Primitive, acc: &mut [u8], other: &[u8]) -> TransportResult<()> {
    if !op.supports(dtype) {
        return Err(TransportError::InvalidOp { op, dtype });
    }
    if acc.len() != other.len() {
        return Err(TransportError::SizeMismatch {
            expected: acc.len(),
            got: other.len(),
        });
    }
    match dtype {
        Primitive::Byte => fold_as!(u8, op, acc, other),
        Primitive::Char => fold_as!(i8, op, acc, other),
        Primitive::Int => fold_as!(i32, op, acc, other),
        Primitive::Unsigned => fold_as!(u32, op, acc, other),
        Primitive::Long | Primitive::LongLong => fold_as!(i64, op, acc, other),
        Primitive::UnsignedLong => fold_as!(u64, op, acc, other),
        Primitive::Float => fold_float!(f32, op, acc, other),
        Primitive::Double => fold_float!(f64, op, acc, other),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ints(v: &[i32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn integer_folds() {
        let mut acc = ints(&[5, -2, 7]);
        fold_into(ReduceOp::Min, Primitive::Int, &mut acc, &ints(&[3, 4, 7])).unwrap();
        assert_eq!(acc, ints(&[3, -2, 7]));
        fold_into(ReduceOp::Sum, Primitive::Int, &mut acc, &ints(&[i32::MAX, 1, 1])).unwrap();
        assert_eq!(acc, ints(&[i32::MAX.wrapping_add(3), -1, 8]));
        let mut acc = ints(&[0, 2]);
        fold_into(ReduceOp::Lor, Primitive::Int, &mut acc, &ints(&[0, 0])).unwrap();
        assert_eq!(acc, ints(&[0, 1]));
    }

    #[test]
    fn float_folds_and_rejects_bitwise() {
        let mut acc = 1.5f64.to_le_bytes().to_vec();
        fold_into(ReduceOp::Prod, Primitive::Double, &mut acc, &4.0f64.to_le_bytes()).unwrap();
        assert_eq!(acc, 6.0f64.to_le_bytes());
        assert_eq!(
            fold_into(ReduceOp::Band, Primitive::Double, &mut acc, &4.0f64.to_le_bytes()),
            Err(TransportError::InvalidOp { op: ReduceOp::Band, dtype: Primitive::Double })
        );
    }

    #[test]
    fn unsigned_long_max() {
        let mut acc = u64::MAX.to_le_bytes().to_vec();
        fold_into(ReduceOp::Max, Primitive::UnsignedLong, &mut acc, &1u64.to_le_bytes()).unwrap();
        assert_eq!(acc, u64::MAX.to_le_bytes());
    }
}
