use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mpiwasm::abi::Primitive;
use mpiwasm::bench::{
    default_sizes, run_bench, run_translation_probe, write_bench_csv, write_probe_csv, BenchConfig, BenchError,
    Suite, PROBE_DATATYPES,
};
use mpiwasm::engine::{Backend, Embedder};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Native,
    Sim,
}

#[derive(Parser, Debug)]
#[command(name = "mpiwasm-bench", version, about = "MPI microbenchmarks for the WebAssembly embedder")]
struct Cli {
    /// Write CSV here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Time one benchmark suite across message sizes.
    Run {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, value_enum, default_value = "sim")]
        backend: BackendArg,
        /// Sim rank count.
        #[arg(long, default_value_t = 2)]
        np: usize,
        #[arg(long, default_value_t = 100)]
        iters: u32,
        /// Comma-separated byte counts; powers of two up to 4 MiB by default.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Measure datatype translation latency inside MPI_Send.
    Probe {
        #[arg(long, default_value_t = 100)]
        iters: u32,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Datatype names such as MPI_INT; all six probe types by default.
        #[arg(long, value_delimiter = ',', value_parser = parse_datatype)]
        datatypes: Vec<Primitive>,
    },
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: BenchError| e.to_string())
}

fn parse_datatype(s: &str) -> Result<Primitive, String> {
    let want = s.to_ascii_uppercase();
    let want = if want.starts_with("MPI_") { want } else { format!("MPI_{want}") };
    Primitive::ALL
        .into_iter()
        .find(|p| p.name() == want)
        .ok_or_else(|| format!("unknown datatype `{s}`"))
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let embedder = Embedder::new()?;
    let mut out: Box<dyn Write> = match &cli.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let or_default = |s: Vec<usize>| if s.is_empty() { default_sizes() } else { s };
    match cli.cmd {
        Cmd::Run {
            suite,
            backend,
            np,
            iters,
            sizes,
        } => {
            let cfg = BenchConfig {
                suite,
                sizes: or_default(sizes),
                iters,
                ranks: np,
                backend: match backend {
                    BackendArg::Native => Backend::Native,
                    BackendArg::Sim => Backend::Sim,
                },
            };
            let rows = run_bench(&embedder, &cfg)?;
            if cfg.backend == Backend::Native && rows.is_empty() {
                return Ok(());
            }
            write_bench_csv(&rows, &mut out)?;
        }
        Cmd::Probe {
            iters,
            sizes,
            datatypes,
        } => {
            let datatypes = if datatypes.is_empty() {
                PROBE_DATATYPES.to_vec()
            } else {
                datatypes
            };
            let rows = run_translation_probe(&embedder, &datatypes, &or_default(sizes), iters)?;
            write_probe_csv(&rows, &mut out)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(BenchError::Config(msg)) => {
            eprintln!("mpiwasm-bench: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("mpiwasm-bench: {e}");
            ExitCode::from(1)
        }
    }
}
