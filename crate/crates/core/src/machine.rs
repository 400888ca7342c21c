//! Architectural state and lockstep execution across the 16-lane SP array.
//!
//! Two datapath backends are available. `Reference` uses native integer
//! arithmetic. `BitTrue` routes multiplies and shifts through the DSP
//! multiplier construction and add/compare through the two-stage adder in
//! [`crate::datapath`]. Both must produce identical state and cycle counts.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::datapath::{self, AddSubOp, AluOut, LogicOp, ShiftKind};
use crate::isa::{
    CmpOp, ConfigError, ImageError, Instr, InstrClass, MachineConfig, Opcode, OperandForm, ProgramImage, NUM_SPS,
};
use crate::sequencer::{self, SeqError, SequencerState, Slot, ThreadShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Backend {
    #[default]
    Reference,
    BitTrue,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Trap {
    #[error("register r{reg} beyond {limit} registers per thread")]
    RegisterOutOfRange { reg: u8, limit: u32 },
    #[error("thread {tid} addressed shared word {addr} beyond {size} words")]
    AddressOutOfRange { tid: u32, addr: u32, size: u32 },
    #[error("thread override {scale} exceeds the {declared} declared threads")]
    ScaleExceedsThreads { scale: u32, declared: u32 },
    #[error(transparent)]
    Sequencer(#[from] SeqError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("I-Mem can only be reloaded while the machine is halted")]
    ReloadWhileRunning,
    #[error("{len} words at offset {offset} do not fit in {size}-word shared memory")]
    SharedRange { offset: usize, len: usize, size: usize },
}

/// `(sp, row)` of a thread in the 16-lane array.
pub fn lane_map(tid: u32) -> (u32, u32) {
    (tid % NUM_SPS, tid / NUM_SPS)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    /// `regs[tid * regs_per_thread + r]`
    pub regs: Vec<u32>,
    pub shared: Vec<u32>,
    /// One bit per predicate, per thread.
    pub preds: Vec<u8>,
    pub seq: SequencerState,
    pub cycles: u64,
    pub halted: bool,
    declared_threads: u32,
    regs_per_thread: u32,
}

impl MachineState {
    pub fn new(cfg: &MachineConfig, img: &ProgramImage) -> Self {
        let threads = img.declared_threads();
        MachineState {
            regs: vec![0; (threads * cfg.regs_per_thread) as usize],
            shared: vec![0; cfg.shared_mem_words as usize],
            preds: vec![0; threads as usize],
            seq: SequencerState::new(img.instrs().to_vec(), img.entry(), cfg.fetch_decode_stages),
            cycles: 0,
            halted: false,
            declared_threads: threads,
            regs_per_thread: cfg.regs_per_thread,
        }
    }

    pub fn declared_threads(&self) -> u32 {
        self.declared_threads
    }

    pub fn regs_per_thread(&self) -> u32 {
        self.regs_per_thread
    }

    pub fn reg(&self, tid: u32, r: u8) -> u32 {
        self.regs[(tid * self.regs_per_thread + r as u32) as usize]
    }

    pub fn set_reg(&mut self, tid: u32, r: u8, value: u32) {
        self.regs[(tid * self.regs_per_thread + r as u32) as usize] = value;
    }

    pub fn pred(&self, tid: u32, p: u8) -> bool {
        self.preds[tid as usize] >> p & 1 == 1
    }

    pub fn set_pred(&mut self, tid: u32, p: u8, value: bool) {
        let bits = &mut self.preds[tid as usize];
        *bits = (*bits & !(1 << p)) | ((value as u8) << p);
    }

    fn resize_threads(&mut self, threads: u32) {
        self.declared_threads = threads;
        self.regs.resize((threads * self.regs_per_thread) as usize, 0);
        self.preds.resize(threads as usize, 0);
    }
}

trait Alu {
    fn add(&self, a: u32, b: u32) -> u32;
    fn sub(&self, a: u32, b: u32) -> u32;
    fn abs(&self, a: u32) -> u32;
    fn min(&self, a: u32, b: u32, signed: bool) -> u32;
    fn max(&self, a: u32, b: u32, signed: bool) -> u32;
    fn mul(&self, a: u32, b: u32, signed: bool, hi: bool) -> u32;
    /// `amount` carries six significant bits.
    fn shift(&self, kind: ShiftKind, value: u32, amount: u32) -> u32;
    fn compare(&self, cmp: CmpOp, a: u32, b: u32, signed: bool) -> bool;
}

struct ReferenceAlu;

impl Alu for ReferenceAlu {
    fn add(&self, a: u32, b: u32) -> u32 {
        a.wrapping_add(b)
    }

    fn sub(&self, a: u32, b: u32) -> u32 {
        a.wrapping_sub(b)
    }

    fn abs(&self, a: u32) -> u32 {
        (a as i32).wrapping_abs() as u32
    }

    fn min(&self, a: u32, b: u32, signed: bool) -> u32 {
        if signed {
            (a as i32).min(b as i32) as u32
        } else {
            a.min(b)
        }
    }

    fn max(&self, a: u32, b: u32, signed: bool) -> u32 {
        if signed {
            (a as i32).max(b as i32) as u32
        } else {
            a.max(b)
        }
    }

    fn mul(&self, a: u32, b: u32, signed: bool, hi: bool) -> u32 {
        let p = if signed {
            (a as i32 as i64 * b as i32 as i64) as u64
        } else {
            a as u64 * b as u64
        };
        if hi {
            (p >> 32) as u32
        } else {
            p as u32
        }
    }

    fn shift(&self, kind: ShiftKind, value: u32, amount: u32) -> u32 {
        let amount = amount & 0x3F;
        match kind {
            ShiftKind::Shl => value.checked_shl(amount).unwrap_or(0),
            ShiftKind::ShrLogical => value.checked_shr(amount).unwrap_or(0),
            ShiftKind::ShrArith => (value as i32 >> amount.min(31)) as u32,
        }
    }

    fn compare(&self, cmp: CmpOp, a: u32, b: u32, signed: bool) -> bool {
        let ord = if signed {
            (a as i32).cmp(&(b as i32))
        } else {
            a.cmp(&b)
        };
        match cmp {
            CmpOp::Eq => ord.is_eq(),
            CmpOp::Ne => ord.is_ne(),
            CmpOp::Lt => ord.is_lt(),
            CmpOp::Le => ord.is_le(),
            CmpOp::Gt => ord.is_gt(),
            CmpOp::Ge => ord.is_ge(),
        }
    }
}

struct BitTrueAlu;

impl BitTrueAlu {
    fn word(op: AddSubOp, a: u32, b: u32, signed: bool) -> u32 {
        match datapath::alu_addsub(op, a, b, signed) {
            AluOut::Word(w) => w,
            AluOut::Pred(p) => p as u32,
        }
    }
}

impl Alu for BitTrueAlu {
    fn add(&self, a: u32, b: u32) -> u32 {
        Self::word(AddSubOp::Add, a, b, false)
    }

    fn sub(&self, a: u32, b: u32) -> u32 {
        Self::word(AddSubOp::Sub, a, b, false)
    }

    fn abs(&self, a: u32) -> u32 {
        Self::word(AddSubOp::Abs, a, 0, true)
    }

    fn min(&self, a: u32, b: u32, signed: bool) -> u32 {
        Self::word(AddSubOp::Min, a, b, signed)
    }

    fn max(&self, a: u32, b: u32, signed: bool) -> u32 {
        Self::word(AddSubOp::Max, a, b, signed)
    }

    fn mul(&self, a: u32, b: u32, signed: bool, hi: bool) -> u32 {
        datapath::mul32(a, b, signed, hi)
    }

    fn shift(&self, kind: ShiftKind, value: u32, amount: u32) -> u32 {
        datapath::shift32(kind, value, amount & 0x3F)
    }

    fn compare(&self, cmp: CmpOp, a: u32, b: u32, signed: bool) -> bool {
        datapath::compare(cmp, a, b, signed)
    }
}

fn alu(backend: Backend) -> &'static dyn Alu {
    match backend {
        Backend::Reference => &ReferenceAlu,
        Backend::BitTrue => &BitTrueAlu,
    }
}

fn check_registers(i: &Instr, limit: u32) -> Result<(), Trap> {
    let regs: &[u8] = match i.opcode.form() {
        OperandForm::RegRegReg | OperandForm::Selp => &[i.dst, i.src1, i.src2],
        OperandForm::RegReg | OperandForm::Load => &[i.dst, i.src1],
        OperandForm::RegImm | OperandForm::Reg => &[i.dst],
        OperandForm::Store | OperandForm::Setp => &[i.src1, i.src2],
        OperandForm::None | OperandForm::Target | OperandForm::Loop => &[],
    };
    match regs.iter().find(|&&r| r as u32 >= limit) {
        Some(&reg) => Err(Trap::RegisterOutOfRange { reg, limit }),
        None => Ok(()),
    }
}

fn guard_passes(st: &MachineState, i: &Instr, tid: u32) -> bool {
    match i.guard {
        Some(g) => st.pred(tid, g.pred) != g.negated,
        None => true,
    }
}

/// Apply `i` to every active thread. Control and single-cycle instructions
/// have no per-thread effect. On a trap the state is left unmodified.
pub fn exec_instruction(
    st: &mut MachineState,
    i: &Instr,
    s: &ThreadShape,
    backend: Backend,
    cfg: &MachineConfig,
) -> Result<(), Trap> {
    match i.class() {
        InstrClass::Control | InstrClass::SingleCycle => return Ok(()),
        InstrClass::Load | InstrClass::Store => return load_store(st, i, s, cfg).map(|_| ()),
        InstrClass::Operation => {}
    }
    check_registers(i, st.regs_per_thread)?;
    check_active(st, s)?;
    let alu = alu(backend);
    let ntid = st.declared_threads;
    for tid in 0..s.active_threads {
        if !guard_passes(st, i, tid) {
            continue;
        }
        let a = st.reg(tid, i.src1);
        let b = st.reg(tid, i.src2);
        let value = match i.opcode {
            Opcode::Add => alu.add(a, b),
            Opcode::Sub => alu.sub(a, b),
            Opcode::Abs => alu.abs(a),
            Opcode::Min => alu.min(a, b, i.signed),
            Opcode::Max => alu.max(a, b, i.signed),
            Opcode::Mul => alu.mul(a, b, i.signed, i.hi_half),
            Opcode::And => datapath::alu_logic(LogicOp::And, a, b),
            Opcode::Or => datapath::alu_logic(LogicOp::Or, a, b),
            Opcode::Xor => datapath::alu_logic(LogicOp::Xor, a, b),
            Opcode::Not => datapath::alu_logic(LogicOp::Not, a, b),
            Opcode::Cnot => datapath::alu_logic(LogicOp::Cnot, a, b),
            Opcode::Shl => alu.shift(ShiftKind::Shl, a, b),
            Opcode::Shr => alu.shift(ShiftKind::ShrLogical, a, b),
            Opcode::Sar => alu.shift(ShiftKind::ShrArith, a, b),
            Opcode::Mov => a,
            Opcode::Movi => i.imm as u32,
            Opcode::MovTid => tid,
            Opcode::MovNtid => ntid,
            Opcode::Selp => {
                if st.pred(tid, i.imm as u8) {
                    a
                } else {
                    b
                }
            }
            op => {
                let cmp = op.cmp().expect("remaining operation opcodes are SETP");
                let p = alu.compare(cmp, a, b, i.signed);
                st.set_pred(tid, i.dst, p);
                continue;
            }
        };
        st.set_reg(tid, i.dst, value);
    }
    Ok(())
}

fn check_active(st: &MachineState, s: &ThreadShape) -> Result<(), Trap> {
    if s.active_threads > st.declared_threads {
        return Err(Trap::ScaleExceedsThreads {
            scale: s.active_threads,
            declared: st.declared_threads,
        });
    }
    Ok(())
}

/// `LDS`/`STS` across the active threads; returns the instruction's clocks.
/// Stores apply in ascending thread order, so the highest colliding thread
/// wins.
pub fn load_store(st: &mut MachineState, i: &Instr, s: &ThreadShape, cfg: &MachineConfig) -> Result<u64, Trap> {
    check_registers(i, st.regs_per_thread)?;
    check_active(st, s)?;
    let size = st.shared.len() as u32;
    let mut addrs = Vec::with_capacity(s.active_threads as usize);
    for tid in 0..s.active_threads {
        if !guard_passes(st, i, tid) {
            continue;
        }
        let raw = st.reg(tid, i.src1).wrapping_add(i.imm as u32);
        let addr = if raw < size {
            raw
        } else if cfg.strict_memory {
            return Err(Trap::AddressOutOfRange { tid, addr: raw, size });
        } else {
            raw % size
        };
        addrs.push((tid, addr as usize));
    }
    match i.opcode {
        Opcode::Lds => {
            for (tid, addr) in addrs {
                let v = st.shared[addr];
                st.set_reg(tid, i.dst, v);
            }
        }
        Opcode::Sts => {
            for (tid, addr) in addrs {
                st.shared[addr] = st.reg(tid, i.src2);
            }
        }
        op => unreachable!("{op} is not a shared-memory access"),
    }
    Ok(sequencer::instruction_cycles(i.class(), s).cycles)
}

/// One retired instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub pc: u32,
    pub mnemonic: String,
    pub class: InstrClass,
    pub threads: u32,
    pub depth: u32,
    pub width: u32,
    pub cycles: u64,
    pub cumulative: u64,
    pub flush_bubbles: u32,
}

impl TraceRecord {
    pub const CSV_HEADER: &'static str = "pc,mnemonic,class,threads,depth,width,cycles,cumulative,flush_bubbles";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.pc,
            self.mnemonic,
            self.class.name(),
            self.threads,
            self.depth,
            self.width,
            self.cycles,
            self.cumulative,
            self.flush_bubbles
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StopReason {
    Halt,
    MaxCycles,
    Trap { pc: u32, trap: Trap },
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::Halt => f.write_str("halt"),
            StopReason::MaxCycles => f.write_str("max_cycles"),
            StopReason::Trap { pc, trap } => write!(f, "trap at pc {pc}: {trap}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub backend: Backend,
    pub max_cycles: u64,
    /// Charge one clock per flushed shadow slot.
    pub fold_flush_bubbles: bool,
}

/// One run segment of a [`Machine`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub cycles: u64,
    pub instructions_retired: u64,
    pub trace: Vec<TraceRecord>,
    pub stop_reason: StopReason,
    /// Clocks spent on an instruction cut off by `max_cycles`.
    pub truncated_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub final_state: MachineState,
    pub total_cycles: u64,
    pub instructions_retired: u64,
    pub trace: Vec<TraceRecord>,
    pub stop_reason: StopReason,
    pub truncated_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Stats {
    pub total_cycles: u64,
    pub instructions: u64,
    pub cycles_by_class: BTreeMap<InstrClass, u64>,
    pub flush_bubbles: u64,
}

impl RunResult {
    pub fn stats(&self) -> Stats {
        let mut s = Stats {
            total_cycles: self.total_cycles,
            instructions: self.instructions_retired,
            ..Stats::default()
        };
        for class in InstrClass::ALL {
            s.cycles_by_class.insert(class, 0);
        }
        for r in &self.trace {
            *s.cycles_by_class.entry(r.class).or_default() += r.cycles;
            s.flush_bubbles += r.flush_bubbles as u64;
        }
        s
    }
}

/// A configured eGPU with a loaded program.
#[derive(Debug, Clone)]
pub struct Machine {
    cfg: MachineConfig,
    state: MachineState,
}

impl Machine {
    pub fn new(cfg: MachineConfig, img: &ProgramImage) -> Result<Self, MachineError> {
        cfg.validate()?;
        img.check_config(&cfg)?;
        let state = MachineState::new(&cfg, img);
        Ok(Machine { cfg, state })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &MachineState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut MachineState {
        &mut self.state
    }

    pub fn into_state(self) -> MachineState {
        self.state
    }

    pub fn write_shared(&mut self, offset: usize, words: &[u32]) -> Result<(), MachineError> {
        let size = self.state.shared.len();
        match offset.checked_add(words.len()) {
            Some(end) if end <= size => {
                self.state.shared[offset..end].copy_from_slice(words);
                Ok(())
            }
            _ => Err(MachineError::SharedRange {
                offset,
                len: words.len(),
                size,
            }),
        }
    }

    /// Install a new program. Shared memory, registers and predicates are
    /// kept; the register file is resized to the new declared thread count.
    pub fn reload_imem(&mut self, img: &ProgramImage) -> Result<(), MachineError> {
        if !self.state.halted {
            return Err(MachineError::ReloadWhileRunning);
        }
        img.check_config(&self.cfg)?;
        self.state.seq.reload(img.instrs().to_vec(), img.entry());
        self.state.resize_threads(img.declared_threads());
        self.state.halted = false;
        Ok(())
    }

    /// Execute until HALT, a trap, or `max_cycles` clocks in this segment.
    pub fn run(&mut self, opts: &RunOptions) -> RunOutcome {
        let mut out = RunOutcome {
            cycles: 0,
            instructions_retired: 0,
            trace: Vec::new(),
            stop_reason: StopReason::Halt,
            truncated_cycles: 0,
        };
        if self.state.halted {
            return out;
        }
        loop {
            let (addr, instr) = match self.state.seq.peek() {
                Slot::Zeroed => {
                    self.state.seq.issue();
                    continue;
                }
                Slot::OutOfRange { addr } => {
                    let len = self.state.seq.imem().len();
                    return self.trap(out, addr, SeqError::PcOutOfRange { pc: addr, len }.into());
                }
                Slot::Fetched { addr, instr } => (addr, instr),
            };
            let shape = match sequencer::shape_for(&instr, self.state.declared_threads, &self.cfg) {
                Ok(s) => s,
                Err(e) => return self.trap(out, addr, e.into()),
            };
            let cycles = sequencer::instruction_cycles(instr.class(), &shape).cycles;
            if out.cycles + cycles > opts.max_cycles {
                out.truncated_cycles = opts.max_cycles - out.cycles;
                out.cycles = opts.max_cycles;
                self.state.cycles += out.truncated_cycles;
                out.stop_reason = StopReason::MaxCycles;
                return out;
            }

            // A guarded branch is uniform: thread 0's predicate decides it.
            let taken = if instr.opcode == Opcode::Bra {
                guard_passes(&self.state, &instr, 0)
            } else {
                if let Err(t) = exec_instruction(&mut self.state, &instr, &shape, opts.backend, &self.cfg) {
                    return self.trap(out, addr, t);
                }
                false
            };

            self.state.seq.issue();
            let transition = match self.state.seq.next_pc(addr, &instr, taken) {
                Ok(t) => t,
                Err(e) => return self.trap(out, addr, e.into()),
            };
            let folded = if opts.fold_flush_bubbles {
                transition.flushed as u64
            } else {
                0
            };
            out.cycles += cycles + folded;
            self.state.cycles += cycles + folded;
            out.instructions_retired += 1;
            out.trace.push(TraceRecord {
                pc: addr,
                mnemonic: instr.mnemonic(),
                class: instr.class(),
                threads: shape.active_threads,
                depth: shape.depth,
                width: shape.width,
                cycles,
                cumulative: self.state.cycles,
                flush_bubbles: transition.flushed,
            });
            if instr.opcode == Opcode::Halt {
                self.state.halted = true;
                out.stop_reason = StopReason::Halt;
                return out;
            }
            if out.cycles >= opts.max_cycles {
                out.stop_reason = StopReason::MaxCycles;
                return out;
            }
        }
    }

    fn trap(&mut self, mut out: RunOutcome, pc: u32, trap: Trap) -> RunOutcome {
        self.state.halted = true;
        out.stop_reason = StopReason::Trap { pc, trap };
        out
    }
}

/// Load `img` into a fresh machine, optionally seed shared memory from word
/// 0, and run it to completion.
pub fn run(
    img: &ProgramImage,
    cfg: &MachineConfig,
    init: Option<&[u32]>,
    backend: Backend,
    max_cycles: u64,
) -> Result<RunResult, MachineError> {
    run_with(
        img,
        cfg,
        init,
        &RunOptions {
            backend,
            max_cycles,
            fold_flush_bubbles: false,
        },
    )
}

pub fn run_with(
    img: &ProgramImage,
    cfg: &MachineConfig,
    init: Option<&[u32]>,
    opts: &RunOptions,
) -> Result<RunResult, MachineError> {
    let mut m = Machine::new(cfg.clone(), img)?;
    if let Some(words) = init {
        m.write_shared(0, words)?;
    }
    let out = m.run(opts);
    Ok(RunResult {
        final_state: m.into_state(),
        total_cycles: out.cycles,
        instructions_retired: out.instructions_retired,
        trace: out.trace,
        stop_reason: out.stop_reason,
        truncated_cycles: out.truncated_cycles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Guard;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MachineConfig {
        MachineConfig {
            predicates_enabled: true,
            ..MachineConfig::default()
        }
    }

    fn image(instrs: &[Instr], threads: u32) -> ProgramImage {
        ProgramImage::from_instrs(instrs, 0, threads).unwrap()
    }

    fn state_with(threads: u32, seed: u64) -> MachineState {
        let img = image(&[Instr::new(Opcode::Halt)], threads);
        let mut st = MachineState::new(&cfg(), &img);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        st.regs.iter_mut().for_each(|r| *r = rng.gen());
        st.preds.iter_mut().for_each(|p| *p = rng.gen());
        st
    }

    #[test]
    fn lane_mapping() {
        assert_eq!(lane_map(0), (0, 0));
        assert_eq!(lane_map(17), (1, 1));
        assert_eq!(lane_map(4095), (15, 255));
    }

    #[test]
    fn add_across_threads() {
        let mut st = state_with(32, 1);
        let before = st.clone();
        let add = Instr::rrr(Opcode::Add, 2, 0, 1);
        exec_instruction(&mut st, &add, &ThreadShape::new(32), Backend::Reference, &cfg()).unwrap();
        for tid in 0..32 {
            assert_eq!(st.reg(tid, 2), before.reg(tid, 0).wrapping_add(before.reg(tid, 1)));
        }
    }

    #[test]
    fn negated_guard_updates_odd_threads() {
        let mut st = state_with(32, 2);
        for tid in 0..32 {
            st.set_pred(tid, 0, tid % 2 == 0);
        }
        let before = st.clone();
        let mov = Instr {
            guard: Some(Guard { pred: 0, negated: true }),
            ..Instr::rrr(Opcode::Mov, 1, 2, 0)
        };
        exec_instruction(&mut st, &mov, &ThreadShape::new(32), Backend::Reference, &cfg()).unwrap();
        for tid in 0..32 {
            let expect = if tid % 2 == 1 { before.reg(tid, 2) } else { before.reg(tid, 1) };
            assert_eq!(st.reg(tid, 1), expect);
        }
    }

    #[test]
    fn backends_agree_on_random_states() {
        let ops = [
            Opcode::Sar,
            Opcode::Shl,
            Opcode::Shr,
            Opcode::Mul,
            Opcode::Add,
            Opcode::Sub,
            Opcode::Min,
            Opcode::Max,
            Opcode::Abs,
            Opcode::SetpLt,
            Opcode::SetpGe,
        ];
        for seed in 0..20 {
            for op in ops {
                for (signed, hi) in [(false, false), (true, false), (false, true), (true, true)] {
                    let mut i = Instr::rrr(op, 3, 3, 4);
                    i.signed = signed;
                    i.hi_half = hi && op == Opcode::Mul;
                    if op.cmp().is_some() {
                        i.dst = 1;
                    }
                    if op == Opcode::Abs {
                        i.src2 = 0;
                    }
                    let mut a = state_with(64, seed);
                    // keep some shift amounts in range
                    if seed % 2 == 0 {
                        for tid in 0..64 {
                            let v = a.reg(tid, 4) % 40;
                            a.set_reg(tid, 4, v);
                        }
                    }
                    let mut b = a.clone();
                    let s = ThreadShape::new(64);
                    exec_instruction(&mut a, &i, &s, Backend::Reference, &cfg()).unwrap();
                    exec_instruction(&mut b, &i, &s, Backend::BitTrue, &cfg()).unwrap();
                    assert_eq!(a, b, "{i}");
                }
            }
        }
    }

    #[test]
    fn operations_only_write_own_registers() {
        for seed in 0..10 {
            let mut st = state_with(48, seed);
            let before = st.clone();
            let mul = Instr {
                hi_half: true,
                signed: true,
                ..Instr::rrr(Opcode::Mul, 5, 1, 2)
            };
            exec_instruction(&mut st, &mul, &ThreadShape::new(20), Backend::BitTrue, &cfg()).unwrap();
            for tid in 0..48 {
                for r in 0..32 {
                    if r != 5 || tid >= 20 {
                        assert_eq!(st.reg(tid, r), before.reg(tid, r));
                    }
                }
            }
        }
    }

    #[test]
    fn store_collision_highest_thread_wins() {
        let mut st = state_with(32, 3);
        for tid in 0..32 {
            st.set_reg(tid, 1, if tid == 3 || tid == 9 { 7 } else { 100 + tid });
            st.set_reg(tid, 2, 1000 + tid);
        }
        let sts = Instr {
            opcode: Opcode::Sts,
            src1: 1,
            src2: 2,
            ..Instr::default()
        };
        let cycles = load_store(&mut st, &sts, &ThreadShape::new(32), &cfg()).unwrap();
        assert_eq!(cycles, 32);
        assert_eq!(st.shared[7], 1009);
    }

    #[test]
    fn strict_load_past_end_traps_without_writing() {
        let mut st = state_with(16, 4);
        for tid in 0..16 {
            st.set_reg(tid, 1, tid);
        }
        st.set_reg(15, 1, 4096);
        let before = st.clone();
        let lds = Instr {
            opcode: Opcode::Lds,
            dst: 2,
            src1: 1,
            ..Instr::default()
        };
        let r = load_store(&mut st, &lds, &ThreadShape::new(16), &cfg());
        assert_eq!(r, Err(Trap::AddressOutOfRange { tid: 15, addr: 4096, size: 4096 }));
        assert_eq!(st, before);

        let permissive = MachineConfig {
            strict_memory: false,
            ..cfg()
        };
        st.shared[0] = 55;
        load_store(&mut st, &lds, &ThreadShape::new(16), &permissive).unwrap();
        assert_eq!(st.reg(15, 2), 55);
    }

    #[test]
    fn load_512_threads_costs_128() {
        let mut st = MachineState::new(&cfg(), &image(&[Instr::new(Opcode::Halt)], 512));
        for (n, w) in st.shared.iter_mut().enumerate() {
            *w = n as u32 * 3;
        }
        for tid in 0..512 {
            st.set_reg(tid, 1, tid);
        }
        let lds = Instr {
            opcode: Opcode::Lds,
            dst: 2,
            src1: 1,
            imm: 8,
            ..Instr::default()
        };
        assert_eq!(load_store(&mut st, &lds, &ThreadShape::new(512), &cfg()), Ok(128));
        assert!((0..512).all(|t| st.reg(t, 2) == (t + 8) * 3));
    }

    #[test]
    fn register_range_traps() {
        let mut st = state_with(16, 5);
        let add = Instr::rrr(Opcode::Add, 40, 0, 0);
        assert_eq!(
            exec_instruction(&mut st, &add, &ThreadShape::new(16), Backend::Reference, &cfg()),
            Err(Trap::RegisterOutOfRange { reg: 40, limit: 32 })
        );
    }

    #[test]
    fn halt_only() {
        let r = run(&image(&[Instr::new(Opcode::Halt)], 16), &cfg(), None, Backend::Reference, 100).unwrap();
        assert_eq!(r.instructions_retired, 1);
        assert_eq!(r.stop_reason, StopReason::Halt);
        assert_eq!(r.total_cycles, 1);
    }

    #[test]
    fn infinite_loop_stops_at_exact_cycle_budget() {
        let spin = Instr {
            opcode: Opcode::Bra,
            imm: 1,
            ..Instr::default()
        };
        let prog = [Instr::rrr(Opcode::Add, 1, 1, 1), spin];
        // 100 threads: ADD costs 7 clocks, so 1000 is not a multiple of the loop
        let r = run(&image(&prog, 100), &cfg(), None, Backend::Reference, 1000).unwrap();
        assert_eq!(r.stop_reason, StopReason::MaxCycles);
        assert_eq!(r.total_cycles, 1000);
        assert_eq!(r.final_state.cycles, 1000);
        let spin2 = [Instr::rrr(Opcode::Add, 1, 1, 1), Instr { imm: 0, ..spin }];
        let r = run(&image(&spin2, 100), &cfg(), None, Backend::Reference, 1000).unwrap();
        assert_eq!(r.total_cycles, 1000);
        let traced: u64 = r.trace.iter().map(|t| t.cycles).sum();
        assert_eq!(traced + r.truncated_cycles, 1000);
    }

    #[test]
    fn reload_preserves_shared_memory() {
        let prog = [
            Instr::new(Opcode::MovTid),
            Instr {
                opcode: Opcode::Sts,
                src1: 0,
                src2: 0,
                imm: 10,
                ..Instr::default()
            },
            Instr::new(Opcode::Halt),
        ];
        let mut m = Machine::new(cfg(), &image(&prog, 16)).unwrap();
        assert_eq!(m.reload_imem(&image(&prog, 16)), Err(MachineError::ReloadWhileRunning));
        let opts = RunOptions {
            max_cycles: 10_000,
            ..RunOptions::default()
        };
        assert_eq!(m.run(&opts).stop_reason, StopReason::Halt);
        let shared = m.state().shared.clone();
        assert_eq!(shared[10..26], (0..16).collect::<Vec<_>>()[..]);

        // second program starts at its entry (2) and only halts
        let second = ProgramImage::from_instrs(
            &[Instr::rrr(Opcode::Add, 0, 0, 0), Instr::new(Opcode::Nop), Instr::new(Opcode::Halt)],
            2,
            16,
        )
        .unwrap();
        m.reload_imem(&second).unwrap();
        assert_eq!(m.state().shared, shared);
        let out = m.run(&opts);
        assert_eq!(out.trace.iter().map(|t| t.pc).collect::<Vec<_>>(), [2]);
    }

    #[test]
    fn reload_while_mid_run_is_refused() {
        let spin = Instr {
            opcode: Opcode::Bra,
            imm: 0,
            ..Instr::default()
        };
        let img = image(&[spin], 16);
        let mut m = Machine::new(cfg(), &img).unwrap();
        let out = m.run(&RunOptions {
            max_cycles: 50,
            ..RunOptions::default()
        });
        assert_eq!(out.stop_reason, StopReason::MaxCycles);
        assert_eq!(m.reload_imem(&img), Err(MachineError::ReloadWhileRunning));
    }

    #[test]
    fn runs_are_deterministic() {
        let prog = [
            Instr::new(Opcode::MovTid),
            Instr::rrr(Opcode::Mul, 1, 0, 0),
            Instr {
                opcode: Opcode::Sts,
                src1: 0,
                src2: 1,
                ..Instr::default()
            },
            Instr::new(Opcode::Halt),
        ];
        let img = image(&prog, 128);
        let a = run(&img, &cfg(), Some(&[1, 2, 3]), Backend::BitTrue, 1 << 20).unwrap();
        let b = run(&img, &cfg(), Some(&[1, 2, 3]), Backend::BitTrue, 1 << 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.final_state.shared[100], 10000);
    }
}
