//! Guest-facing MPI ABI.
//!
//! Guests never see host MPI objects. Communicators, datatypes, reduction
//! operations and requests are small `i32` codes that the embedder maps to
//! host handles through per-instance [`HandleTable`]s owned by [`Env`]. The
//! predefined codes below are frozen as ABI v1; the guest header is generated
//! from [`manifest`] so both sides always agree.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicI32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::Instant;

use thiserror::Error;

use crate::memory::{GuestAddress, GuestMemory, LinearMemoryView, MemoryError};
use crate::transport::{BackendComm, BackendRequest};

pub const ABI_VERSION: u32 = 1;

pub const MPI_SUCCESS: i32 = 0;
pub const MPI_ERR_TYPE: i32 = 3;
pub const MPI_ERR_COMM: i32 = 5;
pub const MPI_ERR_OP: i32 = 9;
pub const MPI_ERR_ARG: i32 = 12;
pub const MPI_ERR_OTHER: i32 = 15;

pub const MPI_COMM_WORLD: i32 = 0;
pub const MPI_COMM_SELF: i32 = 1;
pub const MPI_COMM_NULL: i32 = -1;

pub const MPI_BYTE: i32 = 0;
pub const MPI_CHAR: i32 = 1;
pub const MPI_INT: i32 = 2;
pub const MPI_FLOAT: i32 = 3;
pub const MPI_DOUBLE: i32 = 4;
pub const MPI_LONG: i32 = 5;
pub const MPI_UNSIGNED: i32 = 6;
pub const MPI_LONG_LONG: i32 = 7;
pub const MPI_UNSIGNED_LONG: i32 = 8;
pub const MPI_DATATYPE_NULL: i32 = -1;

pub const MPI_SUM: i32 = 0;
pub const MPI_MAX: i32 = 1;
pub const MPI_MIN: i32 = 2;
pub const MPI_PROD: i32 = 3;
pub const MPI_LAND: i32 = 4;
pub const MPI_LOR: i32 = 5;
pub const MPI_BAND: i32 = 6;
pub const MPI_BOR: i32 = 7;
pub const MPI_OP_NULL: i32 = -1;

pub const MPI_ANY_SOURCE: i32 = -1;
pub const MPI_ANY_TAG: i32 = -1;
pub const MPI_UNDEFINED: i32 = -32766;
/// `MPI_STATUS_IGNORE` / `MPI_STATUSES_IGNORE`: guest null pointer.
pub const MPI_STATUS_IGNORE: u32 = 0;

/// Size of [`StatusWire`] in guest memory.
pub const STATUS_SIZE: u32 = 16;

/// Element type behind a datatype code, as understood by every backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Byte,
    Char,
    Int,
    Float,
    Double,
    Long,
    Unsigned,
    LongLong,
    UnsignedLong,
}

impl Primitive {
    pub const ALL: [Primitive; 9] = [
        Primitive::Byte,
        Primitive::Char,
        Primitive::Int,
        Primitive::Float,
        Primitive::Double,
        Primitive::Long,
        Primitive::Unsigned,
        Primitive::LongLong,
        Primitive::UnsignedLong,
    ];

    /// Width in bytes. `Long` is 8 bytes in this ABI even though wasm32 C
    /// `long` is 4; the guest header maps `MPI_LONG` to a 64-bit typedef.
    pub fn size(self) -> usize {
        match self {
            Primitive::Byte | Primitive::Char => 1,
            Primitive::Int | Primitive::Float | Primitive::Unsigned => 4,
            Primitive::Double
            | Primitive::Long
            | Primitive::LongLong
            | Primitive::UnsignedLong => 8,
        }
    }

    pub fn code(self) -> i32 {
        match self {
            Primitive::Byte => MPI_BYTE,
            Primitive::Char => MPI_CHAR,
            Primitive::Int => MPI_INT,
            Primitive::Float => MPI_FLOAT,
            Primitive::Double => MPI_DOUBLE,
            Primitive::Long => MPI_LONG,
            Primitive::Unsigned => MPI_UNSIGNED,
            Primitive::LongLong => MPI_LONG_LONG,
            Primitive::UnsignedLong => MPI_UNSIGNED_LONG,
        }
    }

    pub fn from_code(code: i32) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.code() == code)
    }

    pub fn is_float(self) -> bool {
        matches!(self, Primitive::Float | Primitive::Double)
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Byte => "MPI_BYTE",
            Primitive::Char => "MPI_CHAR",
            Primitive::Int => "MPI_INT",
            Primitive::Float => "MPI_FLOAT",
            Primitive::Double => "MPI_DOUBLE",
            Primitive::Long => "MPI_LONG",
            Primitive::Unsigned => "MPI_UNSIGNED",
            Primitive::LongLong => "MPI_LONG_LONG",
            Primitive::UnsignedLong => "MPI_UNSIGNED_LONG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Max,
    Min,
    Prod,
    Land,
    Lor,
    Band,
    Bor,
}

impl ReduceOp {
    pub const ALL: [ReduceOp; 8] = [
        ReduceOp::Sum,
        ReduceOp::Max,
        ReduceOp::Min,
        ReduceOp::Prod,
        ReduceOp::Land,
        ReduceOp::Lor,
        ReduceOp::Band,
        ReduceOp::Bor,
    ];

    pub fn code(self) -> i32 {
        match self {
            ReduceOp::Sum => MPI_SUM,
            ReduceOp::Max => MPI_MAX,
            ReduceOp::Min => MPI_MIN,
            ReduceOp::Prod => MPI_PROD,
            ReduceOp::Land => MPI_LAND,
            ReduceOp::Lor => MPI_LOR,
            ReduceOp::Band => MPI_BAND,
            ReduceOp::Bor => MPI_BOR,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "MPI_SUM",
            ReduceOp::Max => "MPI_MAX",
            ReduceOp::Min => "MPI_MIN",
            ReduceOp::Prod => "MPI_PROD",
            ReduceOp::Land => "MPI_LAND",
            ReduceOp::Lor => "MPI_LOR",
            ReduceOp::Band => "MPI_BAND",
            ReduceOp::Bor => "MPI_BOR",
        }
    }

    /// Logical and bitwise ops are defined on integer types only.
    pub fn supports(self, dtype: Primitive) -> bool {
        !dtype.is_float() || matches!(self, ReduceOp::Sum | ReduceOp::Prod | ReduceOp::Max | ReduceOp::Min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleKind {
    Comm,
    Datatype,
    Op,
    Request,
}

impl fmt::Display for HandleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HandleKind::Comm => "communicator",
            HandleKind::Datatype => "datatype",
            HandleKind::Op => "reduction op",
            HandleKind::Request => "request",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbiError {
    #[error("unknown datatype code {0}")]
    UnknownDatatype(i32),
    #[error("unknown communicator code {0}")]
    UnknownComm(i32),
    #[error("unknown reduction op code {0}")]
    UnknownOp(i32),
    #[error("unknown request code {0}")]
    UnknownRequest(i32),
    #[error("predefined {kind} code {code} cannot be released")]
    ReleasePredefined { kind: HandleKind, code: i32 },
}

impl AbiError {
    /// Error code handed back to the guest.
    pub fn mpi_code(&self) -> i32 {
        match self {
            AbiError::UnknownDatatype(_) => MPI_ERR_TYPE,
            AbiError::UnknownComm(_) => MPI_ERR_COMM,
            AbiError::UnknownOp(_) => MPI_ERR_OP,
            AbiError::UnknownRequest(_) => MPI_ERR_OTHER,
            AbiError::ReleasePredefined { kind, .. } => match kind {
                HandleKind::Comm => MPI_ERR_COMM,
                HandleKind::Datatype => MPI_ERR_TYPE,
                HandleKind::Op => MPI_ERR_OP,
                HandleKind::Request => MPI_ERR_OTHER,
            },
        }
    }

    fn unknown(kind: HandleKind, code: i32) -> AbiError {
        match kind {
            HandleKind::Comm => AbiError::UnknownComm(code),
            HandleKind::Datatype => AbiError::UnknownDatatype(code),
            HandleKind::Op => AbiError::UnknownOp(code),
            HandleKind::Request => AbiError::UnknownRequest(code),
        }
    }
}

/// Map from guest integer codes to host handles of one kind.
///
/// Codes increase monotonically and are never handed out twice, so a stale
/// code held by the guest can only ever miss.
#[derive(Debug, Clone)]
pub struct HandleTable<H> {
    kind: HandleKind,
    /// Predefined handles indexed by code.
    fixed: Vec<Option<H>>,
    entries: BTreeMap<i32, H>,
    next_code: i32,
}

impl<H: Clone> HandleTable<H> {
    pub fn new(kind: HandleKind, first_dynamic: i32) -> Self {
        HandleTable {
            kind,
            fixed: Vec::new(),
            entries: BTreeMap::new(),
            next_code: first_dynamic,
        }
    }

    /// Table seeded with predefined entries; dynamic codes start above the
    /// largest predefined one.
    pub fn with_predefined(kind: HandleKind, predefined: impl IntoIterator<Item = (i32, H)>) -> Self {
        let mut fixed: Vec<Option<H>> = Vec::new();
        for (code, h) in predefined {
            let i = usize::try_from(code).expect("predefined codes are non-negative");
            if fixed.len() <= i {
                fixed.resize(i + 1, None);
            }
            fixed[i] = Some(h);
        }
        let first_dynamic = fixed.len() as i32;
        HandleTable {
            kind,
            fixed,
            entries: BTreeMap::new(),
            next_code: first_dynamic,
        }
    }

    pub fn kind(&self) -> HandleKind {
        self.kind
    }

    pub fn is_predefined(&self, code: i32) -> bool {
        self.predefined(code).is_some()
    }

    fn predefined(&self, code: i32) -> Option<&H> {
        usize::try_from(code).ok().and_then(|i| self.fixed.get(i)).and_then(Option::as_ref)
    }

    pub fn get(&self, code: i32) -> Result<&H, AbiError> {
        self.predefined(code)
            .or_else(|| self.entries.get(&code))
            .ok_or_else(|| AbiError::unknown(self.kind, code))
    }

    pub fn register(&mut self, handle: H) -> i32 {
        let code = self.next_code;
        // i32::MAX registrations would be needed to exhaust this.
        self.next_code = self.next_code.checked_add(1).expect("handle codes exhausted");
        self.entries.insert(code, handle);
        code
    }

    pub fn release(&mut self, code: i32) -> Result<H, AbiError> {
        if self.is_predefined(code) {
            return Err(AbiError::ReleasePredefined {
                kind: self.kind,
                code,
            });
        }
        self.entries
            .remove(&code)
            .ok_or_else(|| AbiError::unknown(self.kind, code))
    }

    pub fn len(&self) -> usize {
        self.fixed.iter().flatten().count() + self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Guest-visible `MPI_Status`: four little-endian `i32`s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatusWire {
    pub source: i32,
    pub tag: i32,
    pub error: i32,
    pub count_bytes: i32,
}

impl StatusWire {
    /// Status of a request that carried no message (e.g. a completed send).
    pub const EMPTY: StatusWire = StatusWire {
        source: MPI_ANY_SOURCE,
        tag: MPI_ANY_TAG,
        error: MPI_SUCCESS,
        count_bytes: 0,
    };

    pub fn to_bytes(self) -> [u8; 16] {
        let mut out = [0u8; 16];
        out[0..4].copy_from_slice(&self.source.to_le_bytes());
        out[4..8].copy_from_slice(&self.tag.to_le_bytes());
        out[8..12].copy_from_slice(&self.error.to_le_bytes());
        out[12..16].copy_from_slice(&self.count_bytes.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        let word = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        StatusWire {
            source: word(0),
            tag: word(4),
            error: word(8),
            count_bytes: word(12),
        }
    }
}

/// Writes a status record unless `addr` is the status-ignore sentinel.
pub fn write_status(
    mem: &mut GuestMemory<'_>,
    addr: GuestAddress,
    status: StatusWire,
) -> Result<(), MemoryError> {
    if addr.is_null() {
        return Ok(());
    }
    mem.write_bytes(addr, &status.to_bytes())
}

pub fn read_status(mem: &GuestMemory<'_>, addr: GuestAddress) -> Result<StatusWire, MemoryError> {
    let bytes = mem.read_bytes(addr, STATUS_SIZE as u64)?;
    Ok(StatusWire::from_bytes(bytes.try_into().unwrap()))
}

pub fn datatype_size(code: i32) -> Result<usize, AbiError> {
    Primitive::from_code(code)
        .map(Primitive::size)
        .ok_or(AbiError::UnknownDatatype(code))
}

/// `key=value` lines describing ABI v1; the single source of truth for the
/// guest header generator.
pub fn manifest() -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: i64| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v.to_string());
        out.push('\n');
    };
    line("ABI_VERSION", ABI_VERSION as i64);
    line("MPI_SUCCESS", MPI_SUCCESS as i64);
    line("MPI_ERR_TYPE", MPI_ERR_TYPE as i64);
    line("MPI_ERR_COMM", MPI_ERR_COMM as i64);
    line("MPI_ERR_OP", MPI_ERR_OP as i64);
    line("MPI_ERR_ARG", MPI_ERR_ARG as i64);
    line("MPI_ERR_OTHER", MPI_ERR_OTHER as i64);
    line("MPI_COMM_WORLD", MPI_COMM_WORLD as i64);
    line("MPI_COMM_SELF", MPI_COMM_SELF as i64);
    line("MPI_COMM_NULL", MPI_COMM_NULL as i64);
    for p in Primitive::ALL {
        line(p.name(), p.code() as i64);
    }
    line("MPI_DATATYPE_NULL", MPI_DATATYPE_NULL as i64);
    for op in ReduceOp::ALL {
        line(op.name(), op.code() as i64);
    }
    line("MPI_OP_NULL", MPI_OP_NULL as i64);
    line("MPI_ANY_SOURCE", MPI_ANY_SOURCE as i64);
    line("MPI_ANY_TAG", MPI_ANY_TAG as i64);
    line("MPI_UNDEFINED", MPI_UNDEFINED as i64);
    line("MPI_STATUS_IGNORE", MPI_STATUS_IGNORE as i64);
    line("MPI_STATUS_SIZE", STATUS_SIZE as i64);
    for p in Primitive::ALL {
        line(&format!("SIZEOF_{}", p.name()), p.size() as i64);
    }
    out
}

/// Instrumentation counters shared between an [`Env`] and its transport.
#[derive(Debug, Default)]
pub struct Counters {
    pub translations: AtomicU64,
    pub copies: AtomicU64,
    pub copied_bytes: AtomicU64,
    pub hostcalls: AtomicU64,
}

impl Counters {
    pub fn record_copy(&self, bytes: usize) {
        self.copies.fetch_add(1, Ordering::Relaxed);
        self.copied_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            translations: self.translations.load(Ordering::Relaxed),
            copies: self.copies.load(Ordering::Relaxed),
            copied_bytes: self.copied_bytes.load(Ordering::Relaxed),
            hostcalls: self.hostcalls.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub translations: u64,
    pub copies: u64,
    pub copied_bytes: u64,
    pub hostcalls: u64,
}

/// One instrumented datatype translation performed by a send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeSample {
    pub datatype: i32,
    pub msg_bytes: u64,
    pub nanos: u64,
}

/// Per-instance translation state consulted by every host call.
///
/// Lookups take the tables' read locks; only register/release take write
/// locks, and no lock is held across a blocking transport call.
#[derive(Debug)]
pub struct Env {
    memory: RwLock<LinearMemoryView>,
    datatypes: RwLock<HandleTable<Primitive>>,
    comms: RwLock<HandleTable<BackendComm>>,
    ops: RwLock<HandleTable<ReduceOp>>,
    requests: RwLock<HandleTable<BackendRequest>>,
    rank: AtomicI32,
    world_size: AtomicI32,
    initialized: AtomicBool,
    finalized: AtomicBool,
    counters: Arc<Counters>,
    instrument: bool,
    last_translation_ns: AtomicU64,
    probe: Mutex<Vec<ProbeSample>>,
    created: Instant,
    wtime_epoch: OnceLock<Instant>,
}

impl Env {
    pub fn new(world: BackendComm, self_comm: BackendComm, counters: Arc<Counters>, instrument: bool) -> Self {
        Env {
            memory: RwLock::new(LinearMemoryView::empty()),
            datatypes: RwLock::new(HandleTable::with_predefined(
                HandleKind::Datatype,
                Primitive::ALL.map(|p| (p.code(), p)),
            )),
            comms: RwLock::new(HandleTable::with_predefined(
                HandleKind::Comm,
                [(MPI_COMM_WORLD, world), (MPI_COMM_SELF, self_comm)],
            )),
            ops: RwLock::new(HandleTable::with_predefined(
                HandleKind::Op,
                ReduceOp::ALL.map(|op| (op.code(), op)),
            )),
            // Request codes start at 1 so zero-initialised guest memory never
            // names a live request.
            requests: RwLock::new(HandleTable::new(HandleKind::Request, 1)),
            rank: AtomicI32::new(-1),
            world_size: AtomicI32::new(0),
            initialized: AtomicBool::new(false),
            finalized: AtomicBool::new(false),
            counters,
            instrument,
            last_translation_ns: AtomicU64::new(0),
            probe: Mutex::new(Vec::new()),
            created: Instant::now(),
            wtime_epoch: OnceLock::new(),
        }
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn instrumented(&self) -> bool {
        self.instrument
    }

    pub fn memory(&self) -> LinearMemoryView {
        *self.memory.read().unwrap()
    }

    pub fn refresh_memory(&self, view: LinearMemoryView) {
        let mut current = self.memory.write().unwrap();
        if *current != view {
            *current = view;
        }
    }

    pub fn rank(&self) -> i32 {
        self.rank.load(Ordering::Acquire)
    }

    pub fn world_size(&self) -> i32 {
        self.world_size.load(Ordering::Acquire)
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized.load(Ordering::Acquire)
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized.load(Ordering::Acquire)
    }

    /// Returns false if the instance was already initialised.
    pub fn mark_initialized(&self, rank: i32, world_size: i32) -> bool {
        if self.initialized.swap(true, Ordering::AcqRel) {
            return false;
        }
        self.rank.store(rank, Ordering::Release);
        self.world_size.store(world_size, Ordering::Release);
        let _ = self.wtime_epoch.set(Instant::now());
        true
    }

    pub fn mark_finalized(&self) -> bool {
        !self.finalized.swap(true, Ordering::AcqRel)
    }

    /// Instant of the first successful `MPI_Init`.
    pub fn init_instant(&self) -> Option<Instant> {
        self.wtime_epoch.get().copied()
    }

    /// Seconds since the first `MPI_Init` (or since creation, before it).
    pub fn wtime(&self) -> f64 {
        let epoch = self.wtime_epoch.get().copied().unwrap_or(self.created);
        epoch.elapsed().as_secs_f64()
    }

    pub fn translate_datatype(&self, code: i32) -> Result<Primitive, AbiError> {
        self.counters.translations.fetch_add(1, Ordering::Relaxed);
        if !self.instrument {
            return self.datatypes.read().unwrap().get(code).copied();
        }
        let start = Instant::now();
        let result = self.datatypes.read().unwrap().get(code).copied();
        let nanos = start.elapsed().as_nanos() as u64;
        self.last_translation_ns.store(nanos, Ordering::Relaxed);
        result
    }

    /// Records the latency of the most recent datatype translation against
    /// the message it served. No-op unless instrumentation is on.
    pub fn record_send_probe(&self, datatype: i32, msg_bytes: u64) {
        if !self.instrument {
            return;
        }
        let nanos = self.last_translation_ns.load(Ordering::Relaxed);
        self.probe.lock().unwrap().push(ProbeSample {
            datatype,
            msg_bytes,
            nanos,
        });
    }

    pub fn probe_samples(&self) -> Vec<ProbeSample> {
        self.probe.lock().unwrap().clone()
    }

    pub fn translate_comm(&self, code: i32) -> Result<BackendComm, AbiError> {
        self.counters.translations.fetch_add(1, Ordering::Relaxed);
        self.comms.read().unwrap().get(code).copied()
    }

    pub fn register_comm(&self, comm: BackendComm) -> i32 {
        self.comms.write().unwrap().register(comm)
    }

    pub fn release_comm(&self, code: i32) -> Result<BackendComm, AbiError> {
        self.comms.write().unwrap().release(code)
    }

    pub fn translate_op(&self, code: i32) -> Result<ReduceOp, AbiError> {
        self.counters.translations.fetch_add(1, Ordering::Relaxed);
        self.ops.read().unwrap().get(code).copied()
    }

    pub fn register_request(&self, request: BackendRequest) -> i32 {
        self.requests.write().unwrap().register(request)
    }

    pub fn lookup_request(&self, code: i32) -> Result<BackendRequest, AbiError> {
        self.requests.read().unwrap().get(code).copied()
    }

    /// Removes the request; its code is dead from here on.
    pub fn take_request(&self, code: i32) -> Result<BackendRequest, AbiError> {
        self.requests.write().unwrap().release(code)
    }

    pub fn live_requests(&self) -> usize {
        self.requests.read().unwrap().len()
    }
}
