//! Instruction set, 64-bit instruction encoding, program images and the
//! machine configuration envelope.
//!
//! Word layout (little-endian bit numbering):
//!
//! ```text
//!  63          40 39    32 31    24 23    16 15                8 7      0
//! +--------------+--------+--------+--------+-------------------+--------+
//! |   imm[23:0]  |  src2  |  src1  |  dst   |       flags       | opcode |
//! +--------------+--------+--------+--------+-------------------+--------+
//!
//! flags: bit 8  signed        bit 9  hi half (MUL only)
//!        bit 10 guard present bit 11 guard negated
//!        bits 14:12 guard predicate index
//!        bit 15 scale present (imm then holds the thread count override)
//! ```
//!
//! The all-zero word is `NOP`.

use std::fmt;

use thiserror::Error;

/// Number of scalar processors (lanes) in the SM.
pub const NUM_SPS: u32 = 16;
/// Architectural ceiling on threads per program.
pub const MAX_THREADS: u32 = 4096;
/// Architectural ceiling on the whole register file.
pub const MAX_REGISTERS: u32 = 65536;
/// Predicate registers per thread.
pub const NUM_PREDICATES: u8 = 8;

pub const IMM_MIN: i32 = -(1 << 23);
pub const IMM_MAX: i32 = (1 << 23) - 1;

/// Largest iteration count a `LOOP` can carry.
pub const LOOP_MAX_COUNT: u32 = (1 << 11) - 1;
/// Largest body-end address a `LOOP` can carry.
pub const LOOP_MAX_END: u32 = (1 << 12) - 1;

const FLAG_SIGNED: u64 = 1 << 8;
const FLAG_HI: u64 = 1 << 9;
const FLAG_GUARD: u64 = 1 << 10;
const FLAG_GUARD_NEG: u64 = 1 << 11;
const FLAG_SCALE: u64 = 1 << 15;
const GUARD_INDEX_SHIFT: u32 = 12;

/// Cycle-accounting class of an opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstrClass {
    /// Counted by thread-block depth only.
    Operation,
    /// Counted by depth and by read-port width phases.
    Load,
    /// Counted by depth and by write-port width phases.
    Store,
    /// Control transfer decided in the instruction block.
    Control,
    /// Always exactly one clock.
    SingleCycle,
}

impl InstrClass {
    pub const ALL: [InstrClass; 5] = [
        InstrClass::Operation,
        InstrClass::Load,
        InstrClass::Store,
        InstrClass::Control,
        InstrClass::SingleCycle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstrClass::Operation => "operation",
            InstrClass::Load => "load",
            InstrClass::Store => "store",
            InstrClass::Control => "control",
            InstrClass::SingleCycle => "single_cycle",
        }
    }
}

/// Which register/immediate fields an opcode reads, and how they print.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandForm {
    /// No operands.
    None,
    /// `rd, ra, rb`
    RegRegReg,
    /// `rd, ra`
    RegReg,
    /// `rd, imm`
    RegImm,
    /// `rd`
    Reg,
    /// `rd, [ra+imm]`
    Load,
    /// `[ra+imm], rb`
    Store,
    /// `pd, ra, rb`
    Setp,
    /// `rd, ra, rb, pc` (predicate index in imm)
    Selp,
    /// `label` (absolute instruction index in imm)
    Target,
    /// `count, label` (count in imm[22:12], exclusive body end in imm[11:0])
    Loop,
}

/// Comparison performed by a `SETP` variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn name(self) -> &'static str {
        match self {
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Lt => "lt",
            CmpOp::Le => "le",
            CmpOp::Gt => "gt",
            CmpOp::Ge => "ge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum Opcode {
    #[default]
    Nop = 0,
    Add,
    Sub,
    Abs,
    Min,
    Max,
    Mul,
    And,
    Or,
    Xor,
    Not,
    Cnot,
    Shl,
    Shr,
    Sar,
    Mov,
    Movi,
    MovTid,
    MovNtid,
    Lds,
    Sts,
    SetpEq,
    SetpNe,
    SetpLt,
    SetpLe,
    SetpGt,
    SetpGe,
    Selp,
    Bra,
    Call,
    Ret,
    Loop,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 33] = [
        Opcode::Nop,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Abs,
        Opcode::Min,
        Opcode::Max,
        Opcode::Mul,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Not,
        Opcode::Cnot,
        Opcode::Shl,
        Opcode::Shr,
        Opcode::Sar,
        Opcode::Mov,
        Opcode::Movi,
        Opcode::MovTid,
        Opcode::MovNtid,
        Opcode::Lds,
        Opcode::Sts,
        Opcode::SetpEq,
        Opcode::SetpNe,
        Opcode::SetpLt,
        Opcode::SetpLe,
        Opcode::SetpGt,
        Opcode::SetpGe,
        Opcode::Selp,
        Opcode::Bra,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Loop,
        Opcode::Halt,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Opcode> {
        Opcode::ALL.get(code as usize).copied()
    }

    pub fn class(self) -> InstrClass {
        use Opcode::*;
        match self {
            Lds => InstrClass::Load,
            Sts => InstrClass::Store,
            Bra | Call | Ret => InstrClass::Control,
            Nop | Loop | Halt => InstrClass::SingleCycle,
            _ => InstrClass::Operation,
        }
    }

    pub fn form(self) -> OperandForm {
        use Opcode::*;
        match self {
            Nop | Ret | Halt => OperandForm::None,
            Add | Sub | Min | Max | Mul | And | Or | Xor | Shl | Shr | Sar => {
                OperandForm::RegRegReg
            }
            Abs | Not | Cnot | Mov => OperandForm::RegReg,
            Movi => OperandForm::RegImm,
            MovTid | MovNtid => OperandForm::Reg,
            Lds => OperandForm::Load,
            Sts => OperandForm::Store,
            SetpEq | SetpNe | SetpLt | SetpLe | SetpGt | SetpGe => OperandForm::Setp,
            Selp => OperandForm::Selp,
            Bra | Call => OperandForm::Target,
            Loop => OperandForm::Loop,
        }
    }

    /// Mnemonic stem, before any dotted modifiers.
    pub fn base(self) -> &'static str {
        use Opcode::*;
        match self {
            Nop => "NOP",
            Add => "ADD",
            Sub => "SUB",
            Abs => "ABS",
            Min => "MIN",
            Max => "MAX",
            Mul => "MUL",
            And => "AND",
            Or => "OR",
            Xor => "XOR",
            Not => "NOT",
            Cnot => "CNOT",
            Shl => "SHL",
            Shr => "SHR",
            Sar => "SAR",
            Mov | MovTid | MovNtid => "MOV",
            Movi => "MOVI",
            Lds => "LDS",
            Sts => "STS",
            SetpEq | SetpNe | SetpLt | SetpLe | SetpGt | SetpGe => "SETP",
            Selp => "SELP",
            Bra => "BRA",
            Call => "CALL",
            Ret => "RET",
            Loop => "LOOP",
            Halt => "HALT",
        }
    }

    pub fn cmp(self) -> Option<CmpOp> {
        match self {
            Opcode::SetpEq => Some(CmpOp::Eq),
            Opcode::SetpNe => Some(CmpOp::Ne),
            Opcode::SetpLt => Some(CmpOp::Lt),
            Opcode::SetpLe => Some(CmpOp::Le),
            Opcode::SetpGt => Some(CmpOp::Gt),
            Opcode::SetpGe => Some(CmpOp::Ge),
            _ => None,
        }
    }

    pub fn setp(cmp: CmpOp) -> Opcode {
        match cmp {
            CmpOp::Eq => Opcode::SetpEq,
            CmpOp::Ne => Opcode::SetpNe,
            CmpOp::Lt => Opcode::SetpLt,
            CmpOp::Le => Opcode::SetpLe,
            CmpOp::Gt => Opcode::SetpGt,
            CmpOp::Ge => Opcode::SetpGe,
        }
    }

    /// Opcodes whose result depends on the signed flag. These always print
    /// an explicit `.s32` / `.u32` modifier.
    pub fn honors_signedness(self) -> bool {
        matches!(self, Opcode::Min | Opcode::Max | Opcode::Mul) || self.cmp().is_some()
    }

    /// Opcodes that read or write the predicate file.
    pub fn uses_predicates(self) -> bool {
        self.cmp().is_some() || self == Opcode::Selp
    }

    /// Guards are accepted on per-thread instructions and on `BRA`.
    pub fn accepts_guard(self) -> bool {
        matches!(
            self.class(),
            InstrClass::Operation | InstrClass::Load | InstrClass::Store
        ) || self == Opcode::Bra
    }

    /// Thread-count overrides are accepted on per-thread instructions.
    pub fn accepts_scale(self) -> bool {
        matches!(
            self.class(),
            InstrClass::Operation | InstrClass::Load | InstrClass::Store
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.base())?;
        match self {
            Opcode::MovTid => f.write_str(".tid"),
            Opcode::MovNtid => f.write_str(".ntid"),
            op => match op.cmp() {
                Some(c) => write!(f, ".{}", c.name()),
                None => Ok(()),
            },
        }
    }
}

/// Per-thread predicate guard: `@pN` or `@!pN`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Guard {
    pub pred: u8,
    pub negated: bool,
}

/// One decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Instr {
    pub opcode: Opcode,
    pub dst: u8,
    pub src1: u8,
    pub src2: u8,
    pub imm: i32,
    pub signed: bool,
    pub hi_half: bool,
    pub guard: Option<Guard>,
    pub scale: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("field `{field}` value {value} is out of range")]
    FieldRange { field: &'static str, value: i64 },
    #[error("illegal opcode {0:#04x}")]
    IllegalOpcode(u8),
    #[error("illegal flags on {opcode}: {reason}")]
    IllegalFlags {
        opcode: Opcode,
        reason: &'static str,
    },
    #[error("{opcode} does not use field `{field}`, which must be zero")]
    NonCanonical {
        opcode: Opcode,
        field: &'static str,
    },
}

impl Instr {
    pub fn new(opcode: Opcode) -> Self {
        Instr {
            opcode,
            ..Instr::default()
        }
    }

    pub fn rrr(opcode: Opcode, dst: u8, src1: u8, src2: u8) -> Self {
        Instr {
            opcode,
            dst,
            src1,
            src2,
            ..Instr::default()
        }
    }

    pub fn class(&self) -> InstrClass {
        self.opcode.class()
    }

    /// Branch / call target, as an instruction index.
    pub fn target(&self) -> u32 {
        self.imm as u32
    }

    /// `LOOP` iteration count and exclusive body end.
    pub fn loop_fields(&self) -> (u32, u32) {
        let raw = self.imm as u32;
        (raw >> 12, raw & LOOP_MAX_END)
    }

    pub fn make_loop(count: u32, body_end: u32) -> Self {
        Instr {
            opcode: Opcode::Loop,
            imm: ((count << 12) | (body_end & LOOP_MAX_END)) as i32,
            ..Instr::default()
        }
    }

    /// Check that every field is in range and that fields the opcode does
    /// not read are zero.
    pub fn validate(&self) -> Result<(), IsaError> {
        let op = self.opcode;
        let form = op.form();
        let non_canonical = |field| IsaError::NonCanonical { opcode: op, field };

        let (uses_dst, uses_src1, uses_src2, uses_imm) = match form {
            OperandForm::None => (false, false, false, false),
            OperandForm::RegRegReg | OperandForm::Setp => (true, true, true, false),
            OperandForm::RegReg => (true, true, false, false),
            OperandForm::RegImm => (true, false, false, true),
            OperandForm::Reg => (true, false, false, false),
            OperandForm::Load => (true, true, false, true),
            OperandForm::Store => (false, true, true, true),
            OperandForm::Selp => (true, true, true, true),
            OperandForm::Target | OperandForm::Loop => (false, false, false, true),
        };
        if !uses_dst && self.dst != 0 {
            return Err(non_canonical("dst"));
        }
        if !uses_src1 && self.src1 != 0 {
            return Err(non_canonical("src1"));
        }
        if !uses_src2 && self.src2 != 0 {
            return Err(non_canonical("src2"));
        }
        if !uses_imm && self.imm != 0 {
            return Err(non_canonical("imm"));
        }
        if !(IMM_MIN..=IMM_MAX).contains(&self.imm) {
            return Err(IsaError::FieldRange {
                field: "imm",
                value: self.imm as i64,
            });
        }

        match form {
            OperandForm::Setp if self.dst >= NUM_PREDICATES => {
                return Err(IsaError::FieldRange {
                    field: "dst",
                    value: self.dst as i64,
                });
            }
            OperandForm::Selp if !(0..NUM_PREDICATES as i32).contains(&self.imm) => {
                return Err(IsaError::FieldRange {
                    field: "imm",
                    value: self.imm as i64,
                });
            }
            OperandForm::Target if self.imm < 0 => {
                return Err(IsaError::FieldRange {
                    field: "imm",
                    value: self.imm as i64,
                });
            }
            OperandForm::Loop => {
                let (count, _) = self.loop_fields();
                if self.imm < 0 || count == 0 || count > LOOP_MAX_COUNT {
                    return Err(IsaError::FieldRange {
                        field: "loop count",
                        value: count as i64,
                    });
                }
            }
            _ => {}
        }

        if self.hi_half && op != Opcode::Mul {
            return Err(IsaError::IllegalFlags {
                opcode: op,
                reason: "hi half is only valid on MUL",
            });
        }
        if let Some(g) = self.guard {
            if !op.accepts_guard() {
                return Err(IsaError::IllegalFlags {
                    opcode: op,
                    reason: "instruction cannot be guarded",
                });
            }
            if g.pred >= NUM_PREDICATES {
                return Err(IsaError::FieldRange {
                    field: "guard",
                    value: g.pred as i64,
                });
            }
        }
        if let Some(n) = self.scale {
            if !op.accepts_scale() {
                return Err(IsaError::IllegalFlags {
                    opcode: op,
                    reason: "instruction cannot carry a thread-count override",
                });
            }
            if n == 0 || n as u32 > MAX_THREADS {
                return Err(IsaError::FieldRange {
                    field: "scale",
                    value: n as i64,
                });
            }
            if self.imm != 0 {
                return Err(IsaError::IllegalFlags {
                    opcode: op,
                    reason: "thread-count override shares the immediate field",
                });
            }
        }
        Ok(())
    }

    /// Full mnemonic with dotted modifiers, e.g. `MUL.hi.s32.n16`.
    pub fn mnemonic(&self) -> String {
        let mut s = self.opcode.to_string();
        if self.opcode == Opcode::Mul {
            s.push_str(if self.hi_half { ".hi" } else { ".lo" });
        }
        if self.opcode.honors_signedness() {
            s.push_str(if self.signed { ".s32" } else { ".u32" });
        } else if self.signed {
            s.push_str(".s32");
        }
        if let Some(n) = self.scale {
            s.push_str(&format!(".n{n}"));
        }
        s
    }

    /// Render as assembly text, naming code addresses with `label`.
    pub fn render(&self, label: impl Fn(u32) -> String) -> String {
        let mut s = String::new();
        if let Some(g) = self.guard {
            s.push_str(if g.negated { "@!p" } else { "@p" });
            s.push_str(&format!("{} ", g.pred));
        }
        s.push_str(&self.mnemonic());
        let (d, a, b) = (self.dst, self.src1, self.src2);
        let operands = match self.opcode.form() {
            OperandForm::None => String::new(),
            OperandForm::RegRegReg => format!("r{d}, r{a}, r{b}"),
            OperandForm::RegReg => format!("r{d}, r{a}"),
            OperandForm::RegImm => format!("r{d}, {}", self.imm),
            OperandForm::Reg => format!("r{d}"),
            OperandForm::Load => format!("r{d}, {}", mem_operand(a, self.imm)),
            OperandForm::Store => format!("{}, r{b}", mem_operand(a, self.imm)),
            OperandForm::Setp => format!("p{d}, r{a}, r{b}"),
            OperandForm::Selp => format!("r{d}, r{a}, r{b}, p{}", self.imm),
            OperandForm::Target => label(self.target()),
            OperandForm::Loop => {
                let (count, end) = self.loop_fields();
                format!("{count}, {}", label(end))
            }
        };
        if !operands.is_empty() {
            s.push(' ');
            s.push_str(&operands);
        }
        s
    }
}

fn mem_operand(reg: u8, offset: i32) -> String {
    match offset {
        0 => format!("[r{reg}]"),
        o if o > 0 => format!("[r{reg}+{o}]"),
        o => format!("[r{reg}-{}]", -(o as i64)),
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(|t| t.to_string()))
    }
}

pub fn encode_instruction(i: &Instr) -> Result<u64, IsaError> {
    i.validate()?;
    let mut flags = 0u64;
    if i.signed {
        flags |= FLAG_SIGNED;
    }
    if i.hi_half {
        flags |= FLAG_HI;
    }
    if let Some(g) = i.guard {
        flags |= FLAG_GUARD | ((g.pred as u64) << GUARD_INDEX_SHIFT);
        if g.negated {
            flags |= FLAG_GUARD_NEG;
        }
    }
    let imm_field = match i.scale {
        Some(n) => {
            flags |= FLAG_SCALE;
            n as u64
        }
        None => (i.imm as u32 as u64) & 0xFF_FFFF,
    };
    Ok(i.opcode.code() as u64
        | flags
        | (i.dst as u64) << 16
        | (i.src1 as u64) << 24
        | (i.src2 as u64) << 32
        | imm_field << 40)
}

pub fn decode_instruction(w: u64) -> Result<Instr, IsaError> {
    let code = (w & 0xFF) as u8;
    let opcode = Opcode::from_code(code).ok_or(IsaError::IllegalOpcode(code))?;
    let flags = w & 0xFF00;
    let guard = if flags & FLAG_GUARD != 0 {
        Some(Guard {
            pred: ((w >> GUARD_INDEX_SHIFT) & 0x7) as u8,
            negated: flags & FLAG_GUARD_NEG != 0,
        })
    } else {
        if flags & (FLAG_GUARD_NEG | (0x7 << GUARD_INDEX_SHIFT)) != 0 {
            return Err(IsaError::IllegalFlags {
                opcode,
                reason: "guard bits set without guard-present",
            });
        }
        None
    };
    let imm_field = (w >> 40) as u32 & 0xFF_FFFF;
    let (imm, scale) = if flags & FLAG_SCALE != 0 {
        if imm_field == 0 || imm_field > MAX_THREADS {
            return Err(IsaError::FieldRange {
                field: "scale",
                value: imm_field as i64,
            });
        }
        (0, Some(imm_field as u16))
    } else {
        (((imm_field << 8) as i32) >> 8, None)
    };
    let instr = Instr {
        opcode,
        dst: (w >> 16) as u8,
        src1: (w >> 24) as u8,
        src2: (w >> 32) as u8,
        imm,
        signed: flags & FLAG_SIGNED != 0,
        hi_half: flags & FLAG_HI != 0,
        guard,
        scale,
    };
    instr.validate()?;
    Ok(instr)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("the SM has exactly {NUM_SPS} SPs, not {0}")]
    NumSps(u32),
    #[error("max_threads must be in 1..={MAX_THREADS}, got {0}")]
    MaxThreads(u32),
    #[error("regs_per_thread must be in 1..=256, got {0}")]
    RegsPerThread(u32),
    #[error("{threads} threads x {regs} registers exceeds the {MAX_REGISTERS}-entry register file")]
    RegisterFile { threads: u32, regs: u32 },
    #[error("shared memory must hold at least one word")]
    SharedMemory,
    #[error("fetch/decode pipeline needs at least one stage")]
    FetchStages,
}

/// Configuration envelope of one eGPU instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineConfig {
    pub num_sps: u32,
    pub max_threads: u32,
    pub regs_per_thread: u32,
    pub shared_mem_words: u32,
    pub predicates_enabled: bool,
    pub fetch_decode_stages: u32,
    pub strict_memory: bool,
}

impl Default for MachineConfig {
    /// 512 threads x 32 registers (16K registers), 4096-word (16KB) shared
    /// memory, predicates off.
    fn default() -> Self {
        MachineConfig {
            num_sps: NUM_SPS,
            max_threads: 512,
            regs_per_thread: 32,
            shared_mem_words: 4096,
            predicates_enabled: false,
            fetch_decode_stages: 4,
            strict_memory: true,
        }
    }
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_sps != NUM_SPS {
            return Err(ConfigError::NumSps(self.num_sps));
        }
        if self.max_threads == 0 || self.max_threads > MAX_THREADS {
            return Err(ConfigError::MaxThreads(self.max_threads));
        }
        if self.regs_per_thread == 0 || self.regs_per_thread > 256 {
            return Err(ConfigError::RegsPerThread(self.regs_per_thread));
        }
        if self.max_threads as u64 * self.regs_per_thread as u64 > MAX_REGISTERS as u64 {
            return Err(ConfigError::RegisterFile {
                threads: self.max_threads,
                regs: self.regs_per_thread,
            });
        }
        if self.shared_mem_words == 0 {
            return Err(ConfigError::SharedMemory);
        }
        if self.fetch_decode_stages == 0 {
            return Err(ConfigError::FetchStages);
        }
        Ok(())
    }
}

pub const IMAGE_MAGIC: &[u8; 4] = b"EGPU";
pub const IMAGE_VERSION: u16 = 1;
pub const IMAGE_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("not a program image (bad magic)")]
    BadMagic,
    #[error("unsupported image format version {0}")]
    UnsupportedVersion(u16),
    #[error("image truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("word {index}: {source}")]
    Decode {
        index: usize,
        #[source]
        source: IsaError,
    },
    #[error("image holds no instructions")]
    Empty,
    #[error("entry point {entry} outside a {len}-word image")]
    EntryOutOfRange { entry: u32, len: usize },
    #[error("word {index}: target {target} outside a {len}-word image")]
    TargetOutOfRange { index: usize, target: u32, len: usize },
    #[error("word {index}: loop body is empty or runs backwards")]
    BadLoop { index: usize },
    #[error("declared thread count {threads} outside 1..={max}")]
    DeclaredThreads { threads: u32, max: u32 },
    #[error("word {index}: {opcode} needs predicates, which are disabled")]
    PredicatesDisabled { index: usize, opcode: Opcode },
    #[error("word {index}: thread override {scale} exceeds max_threads {max}")]
    ScaleOutOfRange { index: usize, scale: u32, max: u32 },
}

/// A validated, loadable I-Mem image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramImage {
    words: Vec<u64>,
    instrs: Vec<Instr>,
    entry: u32,
    declared_threads: u32,
}

impl ProgramImage {
    pub fn new(words: Vec<u64>, entry: u32, declared_threads: u32) -> Result<Self, ImageError> {
        let instrs = words
            .iter()
            .enumerate()
            .map(|(index, &w)| decode_instruction(w).map_err(|source| ImageError::Decode { index, source }))
            .collect::<Result<Vec<_>, _>>()?;
        let img = ProgramImage {
            words,
            instrs,
            entry,
            declared_threads,
        };
        img.check_structure()?;
        Ok(img)
    }

    pub fn from_instrs(instrs: &[Instr], entry: u32, declared_threads: u32) -> Result<Self, ImageError> {
        let words = instrs
            .iter()
            .enumerate()
            .map(|(index, i)| encode_instruction(i).map_err(|source| ImageError::Decode { index, source }))
            .collect::<Result<Vec<_>, _>>()?;
        ProgramImage::new(words, entry, declared_threads)
    }

    fn check_structure(&self) -> Result<(), ImageError> {
        let len = self.words.len();
        if len == 0 {
            return Err(ImageError::Empty);
        }
        if self.entry as usize >= len {
            return Err(ImageError::EntryOutOfRange { entry: self.entry, len });
        }
        if self.declared_threads == 0 || self.declared_threads > MAX_THREADS {
            return Err(ImageError::DeclaredThreads {
                threads: self.declared_threads,
                max: MAX_THREADS,
            });
        }
        for (index, i) in self.instrs.iter().enumerate() {
            match i.opcode.form() {
                OperandForm::Target if i.target() as usize > len => {
                    return Err(ImageError::TargetOutOfRange { index, target: i.target(), len });
                }
                OperandForm::Loop => {
                    let (_, end) = i.loop_fields();
                    if end as usize > len {
                        return Err(ImageError::TargetOutOfRange { index, target: end, len });
                    }
                    if end as usize <= index + 1 {
                        return Err(ImageError::BadLoop { index });
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks that depend on the machine the image is loaded into.
    pub fn check_config(&self, cfg: &MachineConfig) -> Result<(), ImageError> {
        if self.declared_threads > cfg.max_threads {
            return Err(ImageError::DeclaredThreads {
                threads: self.declared_threads,
                max: cfg.max_threads,
            });
        }
        for (index, i) in self.instrs.iter().enumerate() {
            if !cfg.predicates_enabled && (i.guard.is_some() || i.opcode.uses_predicates()) {
                return Err(ImageError::PredicatesDisabled { index, opcode: i.opcode });
            }
            if let Some(n) = i.scale {
                if n as u32 > cfg.max_threads {
                    return Err(ImageError::ScaleOutOfRange {
                        index,
                        scale: n as u32,
                        max: cfg.max_threads,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn instrs(&self) -> &[Instr] {
        &self.instrs
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn declared_threads(&self) -> u32 {
        self.declared_threads
    }

    pub fn set_declared_threads(&mut self, threads: u32) -> Result<(), ImageError> {
        if threads == 0 || threads > MAX_THREADS {
            return Err(ImageError::DeclaredThreads { threads, max: MAX_THREADS });
        }
        self.declared_threads = threads;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + 8 * self.words.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.declared_threads as u16).to_le_bytes());
        out.extend_from_slice(&self.entry.to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < IMAGE_HEADER_LEN {
            return Err(ImageError::Truncated {
                expected: IMAGE_HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[0..4] != IMAGE_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != IMAGE_VERSION {
            return Err(ImageError::UnsupportedVersion(version));
        }
        let threads = u16::from_le_bytes([bytes[6], bytes[7]]) as u32;
        let entry = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = IMAGE_HEADER_LEN + 8 * count;
        if bytes.len() != expected {
            return Err(ImageError::Truncated { expected, found: bytes.len() });
        }
        let words = bytes[IMAGE_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ProgramImage::new(words, entry, threads)
    }
}
