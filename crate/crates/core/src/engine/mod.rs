//! Loading, compiling, caching and running guest modules.

pub mod cache;
mod group;
mod linker;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, warn};
use thiserror::Error;
use wasmparser::{Parser, Payload, TypeRef, Validator, WasmFeatures};
use wasmtime::{Config, Engine, Linker, Module, OptLevel, Store, Strategy};
use wasmtime_wasi::p1::WasiP1Ctx;
use wasmtime_wasi::p2::pipe::{MemoryInputPipe, MemoryOutputPipe};
use wasmtime_wasi::{FsPerms, I32Exit, WasiCtxBuilder};

use crate::abi::{CounterSnapshot, Env, ProbeSample};
use crate::hostcalls::Fatal;
use crate::memory::{LinearMemoryView, MAX_MEMORY_BYTES, PAGE_SIZE};
use crate::sandbox::{PreopenTable, Rights, SandboxError};
use crate::transport::{AbortInfo, Transport};

pub use cache::{compute_module_hash, CacheError, ModuleHash};
pub use group::GroupOutcome;

/// 65536 pages of 64 KiB.
pub const MAX_PAGES: u64 = MAX_MEMORY_BYTES / PAGE_SIZE as u64;

const STDOUT_CAPACITY: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("this embedder assumes a little-endian host")]
    BigEndianHost,
    #[error("malformed module: {0}")]
    MalformedModule(String),
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("compilation failed: {0}")]
    CompilationFailed(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("module does not export `{0}`")]
    MissingExport(&'static str),
    #[error("cannot link module: {0}")]
    Link(String),
    #[error("guest trapped: {0}")]
    Trap(String),
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("rank {rank} failed: {source}")]
    RankFailed {
        rank: usize,
        #[source]
        source: Box<EngineError>,
    },
    #[error("engine setup: {0}")]
    Setup(String),
    #[error("the native backend is not compiled into this build")]
    NativeUnavailable,
}

pub type EngineResult<T> = Result<T, EngineError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportEntry {
    pub module: String,
    pub name: String,
    pub is_func: bool,
}

/// A module that parsed, validated and passed the feature gate.
#[derive(Debug, Clone)]
pub struct ValidatedModule {
    pub bytes: Arc<[u8]>,
    pub imports: Vec<ImportEntry>,
    pub exports: Vec<String>,
}

impl ValidatedModule {
    pub fn imports_from<'a>(&'a self, module: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.imports.iter().filter(move |i| i.module == module).map(|i| i.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactSource {
    Compiled,
    Cache,
}

/// Native code for one module, ready to instantiate.
#[derive(Clone)]
pub struct ModuleArtifact {
    pub module_hash: ModuleHash,
    pub native_object: Arc<Vec<u8>>,
    pub engine_fingerprint: String,
    pub module: Module,
    pub source: ArtifactSource,
    pub imports: Vec<ImportEntry>,
    /// When compile-or-fetch finished.
    pub ready_at: Instant,
}

impl std::fmt::Debug for ModuleArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModuleArtifact")
            .field("module_hash", &self.module_hash.to_hex())
            .field("native_object_len", &self.native_object.len())
            .field("engine_fingerprint", &self.engine_fingerprint)
            .field("source", &self.source)
            .finish()
    }
}

#[derive(Debug, Default)]
pub struct CompileStats {
    pub compiles: AtomicU64,
    pub cache_hits: AtomicU64,
    pub recoveries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Native,
    Sim,
}

#[derive(Debug, Clone)]
pub struct InstanceConfig {
    pub preopens: Vec<(PathBuf, Rights)>,
    /// Guest `argv`, program name first.
    pub argv: Vec<String>,
    pub env_vars: Vec<(String, String)>,
    pub backend: Backend,
    pub cache_dir: Option<PathBuf>,
    pub cache_enabled: bool,
    pub instrument: bool,
    /// Bytes for the guest's stdin; empty stdin when `None`.
    pub stdin: Option<Vec<u8>>,
    /// Collect guest stdout into [`RunOutcome::stdout`] instead of passing
    /// it through.
    pub capture_stdout: bool,
    /// Sim only: give up on a blocked rank after this long.
    pub watchdog: Option<Duration>,
    /// Native only: the guest's `MPI_Finalize` becomes a barrier and the
    /// library stays up for further runs in this process. Call
    /// [`Embedder::finish_native`] after the last one.
    pub defer_native_finalize: bool,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig {
            preopens: Vec::new(),
            argv: vec!["main.wasm".into()],
            env_vars: Vec::new(),
            backend: Backend::Sim,
            cache_dir: None,
            cache_enabled: false,
            instrument: false,
            stdin: None,
            capture_stdout: false,
            watchdog: None,
            defer_native_finalize: false,
        }
    }
}

impl InstanceConfig {
    pub fn effective_cache_dir(&self) -> Option<&Path> {
        self.cache_enabled.then_some(self.cache_dir.as_deref()).flatten()
    }
}

/// Lifecycle timestamps of one instance.
#[derive(Debug, Clone, Copy)]
pub struct Timeline {
    pub instantiated: Instant,
    pub started: Instant,
    pub finished: Instant,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub abort: Option<AbortInfo>,
    /// Rank and group size as seen by `MPI_Init`; -1 and 0 if the guest
    /// never initialized.
    pub rank: i32,
    pub world_size: i32,
    pub stdout: Vec<u8>,
    pub counters: CounterSnapshot,
    pub probe: Vec<ProbeSample>,
    pub timeline: Timeline,
    /// Linear memory as recorded before `_start` ran.
    pub memory_at_start: LinearMemoryView,
}

/// What one rank needs besides the module: its translation state and its
/// message backend.
pub struct RankContext {
    pub env: Arc<Env>,
    pub transport: Box<dyn Transport>,
}

pub(crate) struct HostState {
    env: Arc<Env>,
    transport: Box<dyn Transport>,
    wasi: WasiP1Ctx,
    memory: Option<wasmtime::Memory>,
}

pub struct Embedder {
    engine: Engine,
    fingerprint: String,
    linker: Linker<HostState>,
    stats: CompileStats,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder").field("fingerprint", &self.fingerprint).finish()
    }
}

fn feature_error(msg: &str) -> bool {
    msg.contains("support is not enabled") || msg.contains("proposal not enabled")
}

fn check_memory(ty: &wasmparser::MemoryType) -> EngineResult<()> {
    if ty.memory64 {
        return Err(EngineError::UnsupportedFeature("64-bit linear memory".into()));
    }
    if ty.shared {
        return Err(EngineError::UnsupportedFeature("shared linear memory (threads)".into()));
    }
    if ty.initial > MAX_PAGES || ty.maximum.is_some_and(|m| m > MAX_PAGES) {
        return Err(EngineError::UnsupportedFeature(format!(
            "linear memory beyond {MAX_PAGES} pages (4 GiB)"
        )));
    }
    Ok(())
}

/// Parses and validates a module, then applies the feature gate.
pub fn load_module(bytes: &[u8]) -> EngineResult<ValidatedModule> {
    let malformed = |e: wasmparser::BinaryReaderError| EngineError::MalformedModule(e.to_string());
    let mut imports = Vec::new();
    let mut exports = Vec::new();
    // The gate runs on the raw sections first so a shared or oversized
    // memory reports as unsupported rather than as a validation failure.
    for payload in Parser::new(0).parse_all(bytes) {
        match payload.map_err(malformed)? {
            Payload::ImportSection(reader) => {
                for import in reader.into_imports() {
                    let import = import.map_err(malformed)?;
                    if let TypeRef::Memory(ty) = &import.ty {
                        check_memory(ty)?;
                    }
                    imports.push(ImportEntry {
                        module: import.module.to_string(),
                        name: import.name.to_string(),
                        is_func: matches!(import.ty, TypeRef::Func(_) | TypeRef::FuncExact(_)),
                    });
                }
            }
            Payload::MemorySection(reader) => {
                for ty in reader {
                    check_memory(&ty.map_err(malformed)?)?;
                }
            }
            Payload::ExportSection(reader) => {
                for export in reader {
                    exports.push(export.map_err(malformed)?.name.to_string());
                }
            }
            _ => {}
        }
    }
    let features = WasmFeatures::default()
        .difference(WasmFeatures::THREADS | WasmFeatures::SHARED_EVERYTHING_THREADS | WasmFeatures::MEMORY64);
    Validator::new_with_features(features).validate_all(bytes).map_err(|e| {
        let msg = e.to_string();
        if feature_error(&msg) {
            EngineError::UnsupportedFeature(msg)
        } else {
            EngineError::MalformedModule(msg)
        }
    })?;
    Ok(ValidatedModule {
        bytes: Arc::from(bytes),
        imports,
        exports,
    })
}

/// Reads a module from disk. Text-format files are assembled first.
pub fn read_module_file(path: &Path) -> EngineResult<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| EngineError::MalformedModule(format!("{}: {e}", path.display())))?;
    wat::parse_bytes(&raw)
        .map(|b| b.into_owned())
        .map_err(|e| EngineError::MalformedModule(format!("{}: {e}", path.display())))
}

fn trap_message(err: &wasmtime::Error) -> String {
    format!("{err:#}")
}

impl Embedder {
    pub fn new() -> EngineResult<Self> {
        if cfg!(target_endian = "big") {
            return Err(EngineError::BigEndianHost);
        }
        let mut config = Config::new();
        config
            .strategy(Strategy::Cranelift)
            .cranelift_opt_level(OptLevel::Speed)
            .wasm_threads(false)
            .wasm_shared_everything_threads(false)
            .wasm_memory64(false);
        let engine = Engine::new(&config).map_err(|e| EngineError::Setup(format!("{e:#}")))?;
        let fingerprint = {
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            engine.precompile_compatibility_hash().hash(&mut h);
            format!(
                "wasmtime-49/{}-{}/speed/{:016x}",
                std::env::consts::ARCH,
                std::env::consts::OS,
                h.finish()
            )
        };
        let linker = linker::base_linker(&engine).map_err(|e| EngineError::Setup(format!("{e:#}")))?;
        Ok(Embedder {
            engine,
            fingerprint,
            linker,
            stats: CompileStats::default(),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn stats(&self) -> &CompileStats {
        &self.stats
    }

    pub fn compiles(&self) -> u64 {
        self.stats.compiles.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.stats.cache_hits.load(Ordering::Relaxed)
    }

    pub fn recoveries(&self) -> u64 {
        self.stats.recoveries.load(Ordering::Relaxed)
    }

    pub fn module_hash(&self, module: &ValidatedModule) -> ModuleHash {
        compute_module_hash(&module.bytes, &self.fingerprint)
    }

    fn artifact(&self, module: &ValidatedModule, hash: ModuleHash, native: Vec<u8>, compiled: Module, source: ArtifactSource) -> ModuleArtifact {
        ModuleArtifact {
            module_hash: hash,
            native_object: Arc::new(native),
            engine_fingerprint: self.fingerprint.clone(),
            module: compiled,
            source,
            imports: module.imports.clone(),
            ready_at: Instant::now(),
        }
    }

    /// Loads the module's native code from `cache_dir` or compiles it (and
    /// stores the result there). A damaged cache entry is recompiled and
    /// overwritten.
    pub fn compile_or_fetch(&self, module: &ValidatedModule, cache_dir: Option<&Path>) -> EngineResult<ModuleArtifact> {
        let hash = self.module_hash(module);
        if let Some(dir) = cache_dir {
            match cache::read_artifact(dir, &hash) {
                Ok(Some(payload)) => {
                    // The header digest matched, so these bytes are exactly
                    // what `serialize` produced for this engine fingerprint.
                    match unsafe { Module::deserialize(&self.engine, &payload) } {
                        Ok(compiled) => {
                            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                            debug!("cache hit {hash}");
                            return Ok(self.artifact(module, hash, payload, compiled, ArtifactSource::Cache));
                        }
                        Err(e) => {
                            warn!("cached artifact for {hash} rejected by the engine ({e}); recompiling");
                            self.stats.recoveries.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                Ok(None) => {}
                Err(CacheError::Corrupt(path)) => {
                    warn!("{} is corrupt; recompiling", path.display());
                    self.stats.recoveries.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.stats.compiles.fetch_add(1, Ordering::Relaxed);
        let compiled = Module::new(&self.engine, &module.bytes).map_err(|e| {
            let msg = format!("{e:#}");
            if feature_error(&msg) {
                EngineError::UnsupportedFeature(msg)
            } else {
                EngineError::CompilationFailed(msg)
            }
        })?;
        let native = compiled
            .serialize()
            .map_err(|e| EngineError::CompilationFailed(format!("{e:#}")))?;
        if let Some(dir) = cache_dir {
            cache::write_artifact(dir, &hash, &native)?;
        }
        Ok(self.artifact(module, hash, native, compiled, ArtifactSource::Compiled))
    }

    fn wasi_ctx(&self, cfg: &InstanceConfig, stdout: Option<&MemoryOutputPipe>) -> EngineResult<WasiP1Ctx> {
        let mut table = PreopenTable::new();
        for (dir, rights) in &cfg.preopens {
            table.map_preopen(dir, *rights)?;
        }
        let mut b = WasiCtxBuilder::new();
        b.args(&cfg.argv).envs(&cfg.env_vars).inherit_stderr();
        match stdout {
            Some(pipe) => b.stdout(pipe.clone()),
            None => b.inherit_stdout(),
        };
        if let Some(input) = &cfg.stdin {
            b.stdin(MemoryInputPipe::new(input.clone()));
        }
        for p in table.entries() {
            let perms = match p.rights {
                Rights::ReadOnly => FsPerms::ReadOnly,
                Rights::ReadWrite => FsPerms::ReadWrite,
            };
            b.preopened_dir(&p.host_path, p.guest_path(), perms)
                .map_err(|e| EngineError::Setup(format!("preopen {}: {e:#}", p.guest_path())))?;
        }
        Ok(b.build_p1())
    }

    /// Instantiates the artifact against `rank` and runs `_start`.
    pub fn instantiate_and_run(&self, artifact: &ModuleArtifact, cfg: &InstanceConfig, rank: RankContext) -> EngineResult<RunOutcome> {
        for name in ["_start", "memory"] {
            if artifact.module.get_export(name).is_none() {
                return Err(EngineError::MissingExport(if name == "_start" { "_start" } else { "memory" }));
            }
        }
        let pipe = cfg.capture_stdout.then(|| MemoryOutputPipe::new(STDOUT_CAPACITY));
        let wasi = self.wasi_ctx(cfg, pipe.as_ref())?;
        let env = Arc::clone(&rank.env);
        let state = HostState {
            env: rank.env,
            transport: rank.transport,
            wasi,
            memory: None,
        };
        let mut store = Store::new(&self.engine, state);
        let mut linker = self.linker.clone();
        linker::define_stubs(&mut linker, &artifact.module).map_err(|e| EngineError::Link(format!("{e:#}")))?;
        let instance = linker
            .instantiate(&mut store, &artifact.module)
            .map_err(|e| match e.downcast_ref::<wasmtime::Trap>() {
                Some(_) => EngineError::Trap(trap_message(&e)),
                None => EngineError::Link(format!("{e:#}")),
            })?;
        let memory = instance
            .get_memory(&mut store, "memory")
            .ok_or(EngineError::MissingExport("memory"))?;
        let start = instance
            .get_typed_func::<(), ()>(&mut store, "_start")
            .map_err(|_| EngineError::MissingExport("_start"))?;
        store.data_mut().memory = Some(memory);
        let view = {
            let bytes = memory.data(&store);
            LinearMemoryView::new(bytes.as_ptr() as usize, bytes.len() as u64)
                .map_err(|e| EngineError::Setup(e.to_string()))?
        };
        env.refresh_memory(view);
        let instantiated = Instant::now();
        let started = Instant::now();
        let result = start.call(&mut store, ());
        let finished = Instant::now();

        let (exit_code, abort) = match result {
            Ok(()) => (0, None),
            Err(e) => {
                if let Some(exit) = e.downcast_ref::<I32Exit>() {
                    (exit.0, None)
                } else if let Some(fatal) = e.downcast_ref::<Fatal>() {
                    match fatal {
                        Fatal::Aborted(info) => (info.code, Some(*info)),
                        Fatal::Deadlock(msg) => return Err(EngineError::Deadlock(msg.clone())),
                    }
                } else {
                    return Err(EngineError::Trap(trap_message(&e)));
                }
            }
        };
        drop(store);
        Ok(RunOutcome {
            exit_code,
            abort,
            rank: if env.is_initialized() { env.rank() } else { -1 },
            world_size: if env.is_initialized() { env.world_size() } else { 0 },
            stdout: pipe.map(|p| p.contents().to_vec()).unwrap_or_default(),
            counters: env.counters().snapshot(),
            probe: env.probe_samples(),
            timeline: Timeline {
                instantiated,
                started,
                finished,
            },
            memory_at_start: view,
        })
    }

    /// Runs one rank against the host MPI library. The rank count comes
    /// from the external launcher.
    #[cfg(feature = "native")]
    pub fn run_native(&self, artifact: &ModuleArtifact, cfg: &InstanceConfig) -> EngineResult<RunOutcome> {
        use crate::transport::native::NativeTransport;
        let transport = if cfg.defer_native_finalize {
            NativeTransport::with_deferred_finalize()
        } else {
            NativeTransport::new()
        };
        let counters = Arc::new(crate::abi::Counters::default());
        let env = Arc::new(Env::new(transport.world(), transport.self_comm(), counters, cfg.instrument));
        self.instantiate_and_run(
            artifact,
            cfg,
            RankContext {
                env,
                transport: Box::new(transport),
            },
        )
    }

    #[cfg(not(feature = "native"))]
    pub fn run_native(&self, _artifact: &ModuleArtifact, _cfg: &InstanceConfig) -> EngineResult<RunOutcome> {
        Err(EngineError::NativeUnavailable)
    }

    /// Shuts the MPI library down after runs made with
    /// [`InstanceConfig::defer_native_finalize`].
    #[cfg(feature = "native")]
    pub fn finish_native(&self) -> EngineResult<()> {
        crate::transport::native::finalize_library().map_err(|e| EngineError::Setup(e.to_string()))
    }

    #[cfg(not(feature = "native"))]
    pub fn finish_native(&self) -> EngineResult<()> {
        Ok(())
    }

    /// Loads, validates and compiles (or fetches) a module in one step.
    pub fn prepare(&self, bytes: &[u8], cfg: &InstanceConfig) -> EngineResult<ModuleArtifact> {
        let module = load_module(bytes)?;
        self.compile_or_fetch(&module, cfg.effective_cache_dir())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wasm(text: &str) -> Vec<u8> {
        wat::parse_str(text).unwrap()
    }

    #[test]
    fn empty_module_has_no_imports() {
        let m = load_module(&wasm("(module)")).unwrap();
        assert!(m.imports.is_empty());
    }

    #[test]
    fn memory_gate() {
        assert!(load_module(&wasm("(module (memory 1 65536))")).is_ok());
        assert!(matches!(
            load_module(&wasm("(module (memory 1 65537))")),
            Err(EngineError::UnsupportedFeature(_))
        ));
        assert!(matches!(
            load_module(&wasm("(module (memory 1 2 shared))")),
            Err(EngineError::UnsupportedFeature(_))
        ));
        assert!(matches!(
            load_module(&wasm("(module (memory i64 1))")),
            Err(EngineError::UnsupportedFeature(_))
        ));
        assert!(matches!(
            load_module(&wasm(r#"(module (import "env" "m" (memory 1 70000)))"#)),
            Err(EngineError::UnsupportedFeature(_))
        ));
    }

    #[test]
    fn malformed_bytes() {
        assert!(matches!(load_module(b"not wasm"), Err(EngineError::MalformedModule(_))));
        let mut truncated = wasm("(module (func (export \"f\")))");
        truncated.pop();
        assert!(matches!(load_module(&truncated), Err(EngineError::MalformedModule(_))));
    }

    #[test]
    fn imports_are_listed() {
        let m = load_module(&wasm(
            r#"(module
                (import "env" "MPI_Init" (func (param i32 i32) (result i32)))
                (import "env" "MPI_Send" (func (param i32 i32 i32 i32 i32 i32) (result i32)))
                (import "env" "MPI_Recv" (func (param i32 i32 i32 i32 i32 i32 i32) (result i32))))"#,
        ))
        .unwrap();
        assert_eq!(m.imports_from("env").collect::<Vec<_>>(), ["MPI_Init", "MPI_Send", "MPI_Recv"]);
    }

    #[test]
    fn fingerprint_names_the_target() {
        let e = Embedder::new().unwrap();
        assert!(e.fingerprint().contains(std::env::consts::ARCH));
        assert_eq!(e.fingerprint(), Embedder::new().unwrap().fingerprint());
    }
}
