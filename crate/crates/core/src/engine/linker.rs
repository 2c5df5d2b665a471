//! Wiring host calls into wasmtime.

use log::warn;
use wasmtime::{Caller, Engine, ExternType, Linker, Module, Val, ValType};

use super::HostState;
use crate::hostcalls::{self, HostCalls};
use crate::memory::{guest_alloc, guest_free, GuestAddress, GuestAllocator, GuestMemory, MemoryError};

type Res<T> = wasmtime::Result<T>;

fn enter<R>(
    caller: &mut Caller<'_, HostState>,
    counted: bool,
    f: impl FnOnce(&mut HostCalls<'_, '_>) -> R,
) -> Res<R> {
    let memory = caller
        .data()
        .memory
        .ok_or_else(|| wasmtime::Error::msg("MPI call before the instance finished starting"))?;
    let (bytes, state) = memory.data_and_store_mut(caller);
    let mut mem = GuestMemory::new(bytes).map_err(wasmtime::Error::new)?;
    let HostState { env, transport, .. } = state;
    let mut hc = if counted {
        HostCalls::new(env, &mut mem, transport.as_mut())
    } else {
        HostCalls::resume(env, &mut mem, transport.as_mut())
    };
    Ok(f(&mut hc))
}

fn with_hc<R>(caller: &mut Caller<'_, HostState>, f: impl FnOnce(&mut HostCalls<'_, '_>) -> R) -> Res<R> {
    enter(caller, true, f)
}

/// The guest's own `malloc`/`free`, called back from inside a host call.
struct CallerAlloc<'a, 'b>(&'a mut Caller<'b, HostState>);

impl CallerAlloc<'_, '_> {
    fn export(&mut self, name: &'static str) -> Result<wasmtime::Func, MemoryError> {
        self.0
            .get_export(name)
            .and_then(|e| e.into_func())
            .ok_or(MemoryError::ExportMissing(name))
    }
}

impl GuestAllocator for CallerAlloc<'_, '_> {
    fn malloc(&mut self, size: u32) -> Result<u32, MemoryError> {
        let f = self
            .export("malloc")?
            .typed::<i32, i32>(&*self.0)
            .map_err(|_| MemoryError::ExportMissing("malloc"))?;
        f.call(&mut *self.0, size as i32)
            .map(|a| a as u32)
            .map_err(|e| MemoryError::GuestTrap(format!("{e:#}")))
    }

    fn free(&mut self, addr: u32) -> Result<(), MemoryError> {
        let f = self
            .export("free")?
            .typed::<i32, ()>(&*self.0)
            .map_err(|_| MemoryError::ExportMissing("free"))?;
        f.call(&mut *self.0, addr as i32)
            .map_err(|e| MemoryError::GuestTrap(format!("{e:#}")))
    }
}

macro_rules! wire {
    ($linker:ident, $name:literal, $method:ident ( $($a:ident),* )) => {
        $linker.func_wrap(
            "env",
            $name,
            |mut caller: Caller<'_, HostState>, $($a: i32),*| -> Res<i32> {
                with_hc(&mut caller, |hc| hc.$method($($a),*))?.map_err(wasmtime::Error::new)
            },
        )?;
    };
}

/// WASI plus every shipped MPI function.
pub(super) fn base_linker(engine: &Engine) -> Res<Linker<HostState>> {
    let mut l = Linker::new(engine);
    wasmtime_wasi::p1::add_to_linker_sync(&mut l, |s: &mut HostState| &mut s.wasi)?;

    wire!(l, "MPI_Init", init(argc, argv));
    wire!(l, "MPI_Finalize", finalize());
    wire!(l, "MPI_Initialized", initialized(flag));
    wire!(l, "MPI_Comm_rank", comm_rank(comm, out));
    wire!(l, "MPI_Comm_size", comm_size(comm, out));
    wire!(l, "MPI_Send", send(buf, count, dtype, dest, tag, comm));
    wire!(l, "MPI_Recv", recv(buf, count, dtype, source, tag, comm, status));
    wire!(l, "MPI_Isend", isend(buf, count, dtype, dest, tag, comm, req));
    wire!(l, "MPI_Irecv", irecv(buf, count, dtype, source, tag, comm, req));
    wire!(l, "MPI_Wait", wait(req, status));
    wire!(l, "MPI_Waitall", waitall(count, reqs, statuses));
    wire!(
        l,
        "MPI_Sendrecv",
        sendrecv(sbuf, scount, stype, dest, stag, rbuf, rcount, rtype, source, rtag, comm, status)
    );
    wire!(l, "MPI_Barrier", barrier(comm));
    wire!(l, "MPI_Bcast", bcast(buf, count, dtype, root, comm));
    wire!(l, "MPI_Reduce", reduce(send, recv, count, dtype, op, root, comm));
    wire!(l, "MPI_Allreduce", allreduce(send, recv, count, dtype, op, comm));
    wire!(l, "MPI_Gather", gather(send, scount, stype, recv, rcount, rtype, root, comm));
    wire!(l, "MPI_Allgather", allgather(send, scount, stype, recv, rcount, rtype, comm));
    wire!(l, "MPI_Scatter", scatter(send, scount, stype, recv, rcount, rtype, root, comm));
    wire!(l, "MPI_Alltoall", alltoall(send, scount, stype, recv, rcount, rtype, comm));
    wire!(l, "MPI_Get_count", get_count(status, dtype, out));
    wire!(l, "MPI_Comm_split", comm_split(comm, color, key, out));
    wire!(l, "MPI_Comm_dup", comm_dup(comm, out));
    wire!(l, "MPI_Comm_free", comm_free(comm));

    l.func_wrap("env", "MPI_Wtime", |mut caller: Caller<'_, HostState>| -> Res<f64> {
        with_hc(&mut caller, |hc| hc.wtime())
    })?;
    l.func_wrap(
        "env",
        "MPI_Abort",
        |mut caller: Caller<'_, HostState>, comm: i32, code: i32| -> Res<i32> {
            let fatal = with_hc(&mut caller, |hc| hc.abort(comm, code))?;
            Err(wasmtime::Error::new(fatal))
        },
    )?;
    l.func_wrap(
        "env",
        "MPI_Alloc_mem",
        |mut caller: Caller<'_, HostState>, size: i32, info: i32, out: i32| -> Res<i32> {
            let size = match with_hc(&mut caller, |hc| hc.alloc_mem_prepare(size, info, out))? {
                Ok(size) => size,
                Err(code) => return Ok(code),
            };
            let result = guest_alloc(&mut CallerAlloc(&mut caller), size);
            enter(&mut caller, false, |hc| hc.alloc_mem_complete(size, out, result))
        },
    )?;
    l.func_wrap("env", "MPI_Free_mem", |mut caller: Caller<'_, HostState>, base: i32| -> Res<i32> {
        with_hc(&mut caller, |_| ())?;
        let result = guest_free(&mut CallerAlloc(&mut caller), GuestAddress::from_arg(base));
        enter(&mut caller, false, |hc| hc.free_mem_complete(result))
    })?;
    Ok(l)
}

/// Resolves MPI imports outside the shipped surface to functions that log
/// and return `MPI_ERR_OTHER`, so such modules still link.
pub(super) fn define_stubs(linker: &mut Linker<HostState>, module: &Module) -> Res<()> {
    let mut seen = std::collections::HashSet::new();
    for import in module.imports() {
        let name = import.name();
        if import.module() != "env"
            || hostcalls::signature(name).is_some()
            || !seen.insert(name)
            || !(name.starts_with("MPI_") || name.starts_with("PMPI_"))
        {
            continue;
        }
        let ExternType::Func(ty) = import.ty() else {
            continue;
        };
        let owned = name.to_string();
        let result_types: Vec<ValType> = ty.results().collect();
        warn!("{owned} is imported but not implemented; calls will return MPI_ERR_OTHER");
        linker.func_new("env", name, ty, move |_caller, _params, results| {
            let code = hostcalls::unimplemented(&owned);
            for (slot, ty) in results.iter_mut().zip(&result_types) {
                *slot = match ty {
                    ValType::I32 => Val::I32(code),
                    ValType::I64 => Val::I64(code as i64),
                    ValType::F32 => Val::F32(0),
                    ValType::F64 => Val::F64(0),
                    other => return Err(wasmtime::Error::msg(format!("unsupported stub result {other}"))),
                };
            }
            Ok(())
        })?;
    }
    Ok(())
}
