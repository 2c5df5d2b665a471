//! Guest ↔ host address translation for one instance's linear memory.
//!
//! A guest pointer is a 32-bit offset. Translating it means adding the
//! recorded base address after checking `offset + len <= length` in 64-bit
//! arithmetic. Translation never copies; the resulting [`HostSpan`] names
//! the guest bytes in place.

use thiserror::Error;

/// Wasm page size.
pub const PAGE_SIZE: usize = 65536;
/// 65536 pages: the 4 GiB ceiling of a 32-bit linear memory.
pub const MAX_MEMORY_BYTES: u64 = 1 << 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("guest range {offset:#x}+{len} exceeds linear memory of {length} bytes")]
    OutOfBounds { offset: u64, len: u64, length: u64 },
    #[error("host address {host:#x} is not inside linear memory")]
    NotInRegion { host: usize },
    #[error("invalid linear memory length {0}")]
    InvalidLength(u64),
    #[error("send and receive buffers overlap")]
    Overlap,
    #[error("module does not export `{0}`")]
    ExportMissing(&'static str),
    #[error("guest allocator returned null for {size} bytes")]
    GuestAllocFailed { size: u32 },
    #[error("guest allocator trapped: {0}")]
    GuestTrap(String),
}

/// A 32-bit offset into a linear memory. Address 0 doubles as the null
/// sentinel for optional out-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GuestAddress(pub u32);

impl GuestAddress {
    pub const NULL: GuestAddress = GuestAddress(0);

    /// Reinterprets an `i32` hostcall argument as an unsigned offset.
    pub fn from_arg(raw: i32) -> Self {
        GuestAddress(raw as u32)
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn offset(self) -> u64 {
        self.0 as u64
    }
}

/// Base address and current size of a linear memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearMemoryView {
    base: usize,
    length: u64,
}

impl LinearMemoryView {
    pub fn new(base: usize, length: u64) -> Result<Self, MemoryError> {
        if length > MAX_MEMORY_BYTES || length % PAGE_SIZE as u64 != 0 {
            return Err(MemoryError::InvalidLength(length));
        }
        Ok(LinearMemoryView { base, length })
    }

    pub(crate) const fn empty() -> Self {
        LinearMemoryView { base: 0, length: 0 }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    pub fn to_host(&self, addr: GuestAddress, len: u64) -> Result<HostSpan, MemoryError> {
        let end = addr.offset().checked_add(len);
        match end {
            Some(end) if end <= self.length => Ok(HostSpan {
                start: self.base + addr.0 as usize,
                len: len as usize,
            }),
            _ => Err(MemoryError::OutOfBounds {
                offset: addr.offset(),
                len,
                length: self.length,
            }),
        }
    }

    pub fn to_guest(&self, host: usize) -> Result<GuestAddress, MemoryError> {
        match host.checked_sub(self.base) {
            Some(off) if (off as u64) < self.length => Ok(GuestAddress(off as u32)),
            _ => Err(MemoryError::NotInRegion { host }),
        }
    }

    pub fn contains(&self, span: HostSpan) -> bool {
        span.start >= self.base
            && ((span.start - self.base) as u64)
                .checked_add(span.len as u64)
                .is_some_and(|end| end <= self.length)
    }
}

/// A translated guest buffer: host address and byte length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostSpan {
    pub start: usize,
    pub len: usize,
}

impl HostSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn overlaps(&self, other: &HostSpan) -> bool {
        self.len > 0 && other.len > 0 && self.start < other.end() && other.start < self.end()
    }

    /// The `index`-th block of `block` bytes within this span.
    pub fn block(&self, index: usize, block: usize) -> HostSpan {
        debug_assert!((index + 1) * block <= self.len);
        HostSpan {
            start: self.start + index * block,
            len: block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    I32,
    I64,
    F32,
    F64,
}

impl ScalarKind {
    pub fn width(self) -> u64 {
        match self {
            ScalarKind::I32 | ScalarKind::F32 => 4,
            ScalarKind::I64 | ScalarKind::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    I32(i32),
    I64(i64),
    F32(f32),
    F64(f64),
}

impl Scalar {
    pub fn kind(&self) -> ScalarKind {
        match self {
            Scalar::I32(_) => ScalarKind::I32,
            Scalar::I64(_) => ScalarKind::I64,
            Scalar::F32(_) => ScalarKind::F32,
            Scalar::F64(_) => ScalarKind::F64,
        }
    }
}

/// Borrowed access to a linear memory for the duration of one host call.
///
/// Built fresh at every call entry so the view always reflects the memory's
/// current base and length.
#[derive(Debug)]
pub struct GuestMemory<'a> {
    bytes: &'a mut [u8],
    view: LinearMemoryView,
}

impl<'a> GuestMemory<'a> {
    pub fn new(bytes: &'a mut [u8]) -> Result<Self, MemoryError> {
        let view = LinearMemoryView::new(bytes.as_ptr() as usize, bytes.len() as u64)?;
        Ok(GuestMemory { bytes, view })
    }

    pub fn view(&self) -> LinearMemoryView {
        self.view
    }

    pub fn translate(&self, addr: GuestAddress, len: u64) -> Result<HostSpan, MemoryError> {
        self.view.to_host(addr, len)
    }

    fn range(&self, span: HostSpan) -> Result<std::ops::Range<usize>, MemoryError> {
        if !self.view.contains(span) {
            return Err(MemoryError::NotInRegion { host: span.start });
        }
        let start = span.start - self.view.base;
        Ok(start..start + span.len)
    }

    pub fn span(&self, span: HostSpan) -> Result<&[u8], MemoryError> {
        let range = self.range(span)?;
        Ok(&self.bytes[range])
    }

    pub fn span_mut(&mut self, span: HostSpan) -> Result<&mut [u8], MemoryError> {
        let range = self.range(span)?;
        Ok(&mut self.bytes[range])
    }

    /// Shared access to `read` and exclusive access to `write` at once.
    /// Overlapping non-empty spans are rejected (MPI forbids aliasing).
    pub fn span_pair(&mut self, read: HostSpan, write: HostSpan) -> Result<(&[u8], &mut [u8]), MemoryError> {
        if read.overlaps(&write) {
            return Err(MemoryError::Overlap);
        }
        let r = self.range(read)?;
        let w = self.range(write)?;
        if r.is_empty() {
            return Ok((&[], &mut self.bytes[w]));
        }
        if w.is_empty() {
            return Ok((&self.bytes[r], &mut []));
        }
        if r.start < w.start {
            let (lo, hi) = self.bytes.split_at_mut(w.start);
            Ok((&lo[r], &mut hi[..w.len()]))
        } else {
            let (lo, hi) = self.bytes.split_at_mut(r.start);
            Ok((&hi[..r.len()], &mut lo[w]))
        }
    }

    /// Raw pointer to a span's first byte, for handing to a native library.
    pub fn span_ptr(&mut self, span: HostSpan) -> Result<*mut u8, MemoryError> {
        let range = self.range(span)?;
        Ok(self.bytes[range].as_mut_ptr())
    }

    pub fn read_bytes(&self, addr: GuestAddress, len: u64) -> Result<&[u8], MemoryError> {
        let span = self.translate(addr, len)?;
        self.span(span)
    }

    pub fn write_bytes(&mut self, addr: GuestAddress, data: &[u8]) -> Result<(), MemoryError> {
        let span = self.translate(addr, data.len() as u64)?;
        self.span_mut(span)?.copy_from_slice(data);
        Ok(())
    }

    pub fn read_scalar(&self, addr: GuestAddress, kind: ScalarKind) -> Result<Scalar, MemoryError> {
        let b = self.read_bytes(addr, kind.width())?;
        Ok(match kind {
            ScalarKind::I32 => Scalar::I32(i32::from_le_bytes(b.try_into().unwrap())),
            ScalarKind::I64 => Scalar::I64(i64::from_le_bytes(b.try_into().unwrap())),
            ScalarKind::F32 => Scalar::F32(f32::from_le_bytes(b.try_into().unwrap())),
            ScalarKind::F64 => Scalar::F64(f64::from_le_bytes(b.try_into().unwrap())),
        })
    }

    pub fn write_scalar(&mut self, addr: GuestAddress, value: Scalar) -> Result<(), MemoryError> {
        match value {
            Scalar::I32(v) => self.write_bytes(addr, &v.to_le_bytes()),
            Scalar::I64(v) => self.write_bytes(addr, &v.to_le_bytes()),
            Scalar::F32(v) => self.write_bytes(addr, &v.to_le_bytes()),
            Scalar::F64(v) => self.write_bytes(addr, &v.to_le_bytes()),
        }
    }

    pub fn read_i32(&self, addr: GuestAddress) -> Result<i32, MemoryError> {
        let b = self.read_bytes(addr, 4)?;
        Ok(i32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_i32(&mut self, addr: GuestAddress, value: i32) -> Result<(), MemoryError> {
        self.write_bytes(addr, &value.to_le_bytes())
    }
}

/// Access to a guest's exported `malloc`/`free`.
pub trait GuestAllocator {
    fn malloc(&mut self, size: u32) -> Result<u32, MemoryError>;
    fn free(&mut self, addr: u32) -> Result<(), MemoryError>;
}

/// Allocates inside linear memory through the guest's own allocator. A null
/// result for a zero-byte request is passed through unchanged.
pub fn guest_alloc(alloc: &mut dyn GuestAllocator, size: u32) -> Result<GuestAddress, MemoryError> {
    let addr = alloc.malloc(size)?;
    if addr == 0 && size > 0 {
        return Err(MemoryError::GuestAllocFailed { size });
    }
    Ok(GuestAddress(addr))
}

pub fn guest_free(alloc: &mut dyn GuestAllocator, addr: GuestAddress) -> Result<(), MemoryError> {
    alloc.free(addr.0)
}
