use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, ValueEnum};
use log::{error, info};

use mpiwasm::engine::{read_module_file, Backend, Embedder, InstanceConfig};
use mpiwasm::sandbox::parse_grant;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Native,
    Sim,
}

/// Run an MPI program compiled to WebAssembly.
#[derive(Parser, Debug)]
#[command(name = "mpiwasm", version)]
struct Args {
    /// Message backend. `native` takes its rank count from the MPI launcher.
    #[arg(long, value_enum, default_value = "native")]
    backend: BackendArg,

    /// Rank count for the sim backend.
    #[arg(long, value_name = "N")]
    np: Option<usize>,

    /// Make a host directory visible to the guest; append `:ro` for read-only.
    #[arg(short = 'd', value_name = "DIR[:ro]")]
    dirs: Vec<String>,

    /// Where compiled modules are cached. Falls back to $MPIWASM_CACHE_DIR.
    #[arg(long, value_name = "P")]
    cache_dir: Option<PathBuf>,

    #[arg(long)]
    no_cache: bool,

    /// Time every datatype translation.
    #[arg(long)]
    instrument: bool,

    /// Print the guest ABI manifest and exit.
    #[arg(long, exclusive = true)]
    abi_manifest: bool,

    #[arg(value_name = "MODULE", required_unless_present = "abi_manifest")]
    module: Option<PathBuf>,

    /// Arguments passed to the guest (after `--`).
    #[arg(last = true, value_name = "ARGS")]
    guest_args: Vec<String>,
}

fn usage_error(msg: &str) -> ExitCode {
    let mut cmd = Args::command();
    cmd.error(clap::error::ErrorKind::ArgumentConflict, msg).print().ok();
    ExitCode::from(2)
}

fn default_cache_dir() -> Option<PathBuf> {
    if let Some(dir) = std::env::var_os("MPIWASM_CACHE_DIR") {
        return Some(dir.into());
    }
    let base = std::env::var_os("XDG_CACHE_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))?;
    Some(base.join("mpiwasm"))
}

fn exit_code(code: i32) -> ExitCode {
    ExitCode::from((code & 0xff) as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();

    if args.abi_manifest {
        print!("{}", mpiwasm::abi::manifest());
        return ExitCode::SUCCESS;
    }
    let backend = match (args.backend, args.np) {
        (BackendArg::Sim, None) => return usage_error("--backend sim requires --np"),
        (BackendArg::Sim, Some(0)) => return usage_error("--np must be at least 1"),
        (BackendArg::Native, Some(_)) => {
            return usage_error("--np conflicts with --backend native; the launcher sets the rank count")
        }
        (BackendArg::Sim, Some(_)) => Backend::Sim,
        (BackendArg::Native, None) => Backend::Native,
    };
    let module_path = args.module.expect("clap enforces MODULE");

    let mut argv = vec![module_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "main.wasm".into())];
    argv.extend(args.guest_args);
    let cfg = InstanceConfig {
        preopens: args.dirs.iter().map(|d| parse_grant(d)).collect(),
        argv,
        backend,
        cache_dir: args.cache_dir.or_else(default_cache_dir),
        cache_enabled: !args.no_cache,
        instrument: args.instrument,
        ..InstanceConfig::default()
    };

    let result = (|| {
        let bytes = read_module_file(&module_path)?;
        let embedder = Embedder::new()?;
        let artifact = embedder.prepare(&bytes, &cfg)?;
        info!("module {} ({:?})", artifact.module_hash, artifact.source);
        match backend {
            Backend::Sim => {
                let group = embedder.spawn_sim_group(args.np.unwrap_or(1), &artifact, &cfg)?;
                if let Some(a) = group.abort {
                    error!("rank {} called MPI_Abort with code {}", a.rank, a.code);
                }
                Ok(group.exit_codes[0])
            }
            Backend::Native => {
                let out = embedder.run_native(&artifact, &cfg)?;
                Ok(out.abort.map_or(out.exit_code, |a| a.code))
            }
        }
    })();

    match result {
        Ok(code) => exit_code(code),
        Err(e) => {
            let e: mpiwasm::engine::EngineError = e;
            eprintln!("mpiwasm: {}: {e}", module_path.display());
            ExitCode::from(1)
        }
    }
}
