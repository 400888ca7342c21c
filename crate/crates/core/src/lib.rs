//! Bit- and cycle-accurate model of a 16-lane SIMT soft GPGPU with an
//! assembler and disassembler for its PTX-flavored instruction set.

pub mod assembler;
pub mod cli;
pub mod datapath;
pub mod isa;
pub mod machine;
pub mod sequencer;

pub use assembler::{assemble, disassemble, AsmError};
pub use isa::{decode_instruction, encode_instruction, Instr, InstrClass, MachineConfig, Opcode, ProgramImage};
pub use machine::{run, Backend, Machine, RunResult, StopReason};
