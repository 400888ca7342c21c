//! `egpu` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 assembly or image error,
//! 3 runtime trap.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::assembler::{assemble, disassemble};
use crate::isa::{InstrClass, MachineConfig, ProgramImage};
use crate::machine::{Backend, Machine, RunOptions, RunResult, StopReason, TraceRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ASSEMBLY: i32 = 2;
pub const EXIT_TRAP: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "egpu", version, about = "Assemble, disassemble and simulate eGPU kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble source text into a program image.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render a program image as assembly text.
    Disasm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a program image and report how it stopped.
    Run(RunArgs),
    /// Run a program image and emit one CSV row per retired instruction.
    Trace(RunArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Largest thread count the machine supports.
    #[arg(long, default_value_t = MachineConfig::default().max_threads)]
    max_threads: u32,
    #[arg(long, default_value_t = MachineConfig::default().regs_per_thread)]
    regs_per_thread: u32,
    /// Shared memory size in 32-bit words.
    #[arg(long, default_value_t = MachineConfig::default().shared_mem_words)]
    shared_words: u32,
    /// Enable the predicate file (guards, SETP, SELP).
    #[arg(long)]
    predicates: bool,
    #[arg(long, default_value_t = MachineConfig::default().fetch_decode_stages)]
    fetch_stages: u32,
    /// Wrap out-of-range shared-memory addresses instead of trapping.
    #[arg(long)]
    permissive: bool,
}

impl ConfigArgs {
    fn config(&self) -> MachineConfig {
        MachineConfig {
            max_threads: self.max_threads,
            regs_per_thread: self.regs_per_thread,
            shared_mem_words: self.shared_words,
            predicates_enabled: self.predicates,
            fetch_decode_stages: self.fetch_stages,
            strict_memory: !self.permissive,
            ..MachineConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Reference,
    Bittrue,
}

#[derive(Debug, Args)]
struct RunArgs {
    image: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Override the image's declared thread count.
    #[arg(long)]
    threads: Option<u32>,
    #[arg(long, value_enum, default_value_t = BackendArg::Reference)]
    backend: BackendArg,
    #[arg(long, default_value_t = 100_000_000)]
    max_cycles: u64,
    /// Charge one clock per flushed shadow slot.
    #[arg(long)]
    fold_bubbles: bool,
    /// Print total and per-class cycle statistics.
    #[arg(long)]
    stats: bool,
    /// Raw little-endian 32-bit words loaded into shared memory before the run.
    #[arg(long)]
    init_shared: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    init_offset: usize,
    /// Write final shared memory as raw little-endian 32-bit words.
    #[arg(long)]
    dump_shared: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    dump_offset: usize,
    /// Words to dump; defaults to the rest of shared memory.
    #[arg(long)]
    dump_len: Option<usize>,
    /// Trace output file (trace command); standard output by default.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<ProgramImage, Failure> {
    ProgramImage::from_bytes(&read(path)?).map_err(|e| fail(EXIT_ASSEMBLY, format!("{}: {e}", path.display())))
}

pub fn words_from_bytes(bytes: &[u8]) -> Option<Vec<u32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

pub fn words_to_bytes(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

/// SHA-256 of shared memory as little-endian words.
pub fn shared_digest(words: &[u32]) -> String {
    format!("{:x}", Sha256::digest(words_to_bytes(words)))
}

pub fn render_stats(result: &RunResult) -> String {
    let stats = result.stats();
    let mut s = format!("total_cycles={}\ninstructions={}\n", stats.total_cycles, stats.instructions);
    for class in InstrClass::ALL {
        s.push_str(&format!("cycles_by_class.{}={}\n", class.name(), stats.cycles_by_class[&class]));
    }
    s.push_str(&format!("flush_bubbles={}\n", stats.flush_bubbles));
    s.push_str(&format!("truncated_cycles={}\n", result.truncated_cycles));
    s
}

fn simulate(args: &RunArgs) -> Result<RunResult, Failure> {
    let cfg = args.config.config();
    let mut img = load_image(&args.image)?;
    if let Some(t) = args.threads {
        img.set_declared_threads(t).map_err(|e| fail(EXIT_USAGE, e))?;
    }
    let mut machine = Machine::new(cfg, &img).map_err(|e| fail(EXIT_ASSEMBLY, e))?;
    if let Some(path) = &args.init_shared {
        let words = words_from_bytes(&read(path)?)
            .ok_or_else(|| fail(EXIT_USAGE, format!("{}: length is not a whole number of words", path.display())))?;
        machine
            .write_shared(args.init_offset, &words)
            .map_err(|e| fail(EXIT_USAGE, e))?;
    }
    let out = machine.run(&RunOptions {
        backend: match args.backend {
            BackendArg::Reference => Backend::Reference,
            BackendArg::Bittrue => Backend::BitTrue,
        },
        max_cycles: args.max_cycles,
        fold_flush_bubbles: args.fold_bubbles,
    });
    let result = RunResult {
        final_state: machine.into_state(),
        total_cycles: out.cycles,
        instructions_retired: out.instructions_retired,
        trace: out.trace,
        stop_reason: out.stop_reason,
        truncated_cycles: out.truncated_cycles,
    };
    if let Some(path) = &args.dump_shared {
        let shared = &result.final_state.shared;
        let start = args.dump_offset.min(shared.len());
        let end = match args.dump_len {
            Some(n) => start.saturating_add(n),
            None => shared.len(),
        };
        if end > shared.len() {
            return Err(fail(EXIT_USAGE, "dump range runs past the end of shared memory"));
        }
        write(path, &words_to_bytes(&shared[start..end]))?;
    }
    Ok(result)
}

fn exit_for(stop: &StopReason, err: &mut dyn Write) -> i32 {
    match stop {
        StopReason::Trap { .. } => {
            let _ = writeln!(err, "egpu: {stop}");
            EXIT_TRAP
        }
        _ => EXIT_OK,
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let io = |e: std::io::Error| fail(EXIT_USAGE, e);
    match cli.command {
        Command::Asm { input, output, config } => {
            let src = String::from_utf8(read(&input)?)
                .map_err(|_| fail(EXIT_USAGE, format!("{}: not UTF-8", input.display())))?;
            let img = assemble(&src, &config.config())
                .map_err(|e| fail(EXIT_ASSEMBLY, format!("{}: {e}", input.display())))?;
            write(&output, &img.to_bytes())?;
            Ok(EXIT_OK)
        }
        Command::Disasm { input, output } => {
            let text = disassemble(&load_image(&input)?);
            match output {
                Some(path) => write(&path, text.as_bytes())?,
                None => out.write_all(text.as_bytes()).map_err(io)?,
            }
            Ok(EXIT_OK)
        }
        Command::Run(args) => {
            let result = simulate(&args)?;
            writeln!(out, "stop={}", stop_tag(&result.stop_reason)).map_err(io)?;
            if args.stats {
                out.write_all(render_stats(&result).as_bytes()).map_err(io)?;
            } else {
                writeln!(out, "total_cycles={}", result.total_cycles).map_err(io)?;
                writeln!(out, "instructions={}", result.instructions_retired).map_err(io)?;
            }
            writeln!(out, "shared_digest={}", shared_digest(&result.final_state.shared)).map_err(io)?;
            Ok(exit_for(&result.stop_reason, err))
        }
        Command::Trace(args) => {
            let result = simulate(&args)?;
            let mut csv = String::from(TraceRecord::CSV_HEADER);
            csv.push('\n');
            for r in &result.trace {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            match &args.output {
                Some(path) => write(path, csv.as_bytes())?,
                None => out.write_all(csv.as_bytes()).map_err(io)?,
            }
            Ok(exit_for(&result.stop_reason, err))
        }
    }
}

fn stop_tag(stop: &StopReason) -> &'static str {
    match stop {
        StopReason::Halt => "halt",
        StopReason::MaxCycles => "max_cycles",
        StopReason::Trap { .. } => "trap",
    }
}

/// Run the CLI on `args` (including the program name) and return the exit
/// code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "egpu: {}", f.message);
            f.code
        }
    }
}
