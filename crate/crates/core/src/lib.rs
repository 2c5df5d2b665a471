//! Runs MPI programs compiled to WebAssembly.
//!
//! A guest module imports the C MPI surface from the `env` namespace; the
//! embedder translates guest handles and pointers and forwards each call to
//! a message-passing backend, either the host MPI library or an in-process
//! rank group.

pub mod abi;
pub mod bench;
pub mod engine;
pub mod hostcalls;
pub mod memory;
pub mod sandbox;
pub mod transport;

pub use abi::{manifest, Primitive, ReduceOp};
pub use engine::{
    load_module, read_module_file, Backend, Embedder, EngineError, GroupOutcome, InstanceConfig, ModuleArtifact,
    RunOutcome,
};
pub use sandbox::{parse_grant, Rights};
