//! Instruction fetch, program-counter control and the pipeline-control
//! counters that fix each instruction's length in clocks.
//!
//! The end-of-instruction signal is registered, so the counters are compared
//! against the state one clock *before* the last one. Operation instructions
//! are counted by thread-block depth only; loads and stores are counted by
//! depth and by width phases within each row.

use std::collections::VecDeque;

use thiserror::Error;

use crate::isa::{Instr, InstrClass, MachineConfig, Opcode, NUM_SPS};

/// Loads move one row through the four read ports in this many clocks.
pub const READ_PORTS: u32 = 4;
pub const RETURN_STACK_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeqError {
    #[error("thread override {scale} exceeds max_threads {max}")]
    ScaleOutOfRange { scale: u32, max: u32 },
    #[error("RET with an empty return stack")]
    ReturnStackUnderflow,
    #[error("CALL beyond return-stack depth {RETURN_STACK_DEPTH}")]
    ReturnStackOverflow,
    #[error("LOOP at {pc} inside an active loop body")]
    NestedLoop { pc: u32 },
    #[error("program counter {pc} outside the {len}-word I-Mem")]
    PcOutOfRange { pc: u32, len: usize },
}

/// Geometry of one instruction's thread block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadShape {
    pub active_threads: u32,
    /// Rows of 16 threads, rounded up.
    pub depth: u32,
    /// Active lanes in the final row.
    pub width: u32,
    /// Rows with all 16 lanes active.
    pub full_rows: u32,
}

impl ThreadShape {
    pub fn new(active_threads: u32) -> Self {
        assert!(active_threads > 0, "thread block needs at least one thread");
        let depth = active_threads.div_ceil(NUM_SPS);
        ThreadShape {
            active_threads,
            depth,
            width: active_threads - (depth - 1) * NUM_SPS,
            full_rows: active_threads / NUM_SPS,
        }
    }
}

pub fn shape_for(i: &Instr, declared_threads: u32, cfg: &MachineConfig) -> Result<ThreadShape, SeqError> {
    let active = match i.scale {
        Some(n) if n as u32 > cfg.max_threads => {
            return Err(SeqError::ScaleOutOfRange {
                scale: n as u32,
                max: cfg.max_threads,
            })
        }
        Some(n) => n as u32,
        None => declared_threads,
    };
    Ok(ThreadShape::new(active))
}

/// How the counters walk one instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterPlan {
    pub depth: u32,
    /// Width phases of every row but the last.
    pub phases_full: u32,
    /// Width phases of the last row.
    pub phases_last: u32,
}

impl CounterPlan {
    pub fn new(class: InstrClass, shape: &ThreadShape) -> Self {
        let (depth, phases_full, phases_last) = match class {
            InstrClass::Operation => (shape.depth, 1, 1),
            InstrClass::Load => (shape.depth, READ_PORTS, shape.width.div_ceil(READ_PORTS)),
            InstrClass::Store => (shape.depth, NUM_SPS, shape.width),
            InstrClass::Control | InstrClass::SingleCycle => (1, 1, 1),
        };
        CounterPlan {
            depth,
            phases_full,
            phases_last,
        }
    }

    pub fn phases(&self, row: u32) -> u32 {
        if row + 1 == self.depth {
            self.phases_last
        } else {
            self.phases_full
        }
    }

    pub fn cycles(&self) -> u64 {
        (self.depth as u64 - 1) * self.phases_full as u64 + self.phases_last as u64
    }

    pub fn single_cycle(&self) -> bool {
        self.cycles() == 1
    }

    /// The `(depth, width)` counter pair one clock before the last; the
    /// registered end flag is set when the counters match it.
    pub fn end_comparand(&self) -> Option<(u32, u32)> {
        if self.single_cycle() {
            return None;
        }
        let last = self.depth - 1;
        Some(if self.phases_last >= 2 {
            (last, self.phases_last - 2)
        } else {
            (last - 1, self.phases(last - 1) - 1)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterState {
    pub depth_count: u32,
    pub width_count: u32,
    /// Registered end-of-instruction flag, valid this clock.
    pub end: bool,
    pub single_cycle: bool,
}

impl CounterState {
    pub fn start(plan: &CounterPlan) -> Self {
        let single_cycle = plan.single_cycle();
        CounterState {
            depth_count: 0,
            width_count: 0,
            end: single_cycle,
            single_cycle,
        }
    }
}

/// One clock of the pipeline-control counters. Returns the next state and
/// whether the instruction ended on the current clock.
pub fn advance(c: CounterState, plan: &CounterPlan) -> (CounterState, bool) {
    if c.single_cycle || c.end {
        return (CounterState::start(plan), true);
    }
    let end = plan.end_comparand() == Some((c.depth_count, c.width_count));
    let (depth_count, width_count) = if c.width_count + 1 == plan.phases(c.depth_count) {
        (c.depth_count + 1, 0)
    } else {
        (c.depth_count, c.width_count + 1)
    };
    (
        CounterState {
            depth_count,
            width_count,
            end,
            single_cycle: false,
        },
        false,
    )
}

/// Every clock of one instruction, from its first clock to the one on which
/// the end flag is seen.
pub fn counter_trace(plan: &CounterPlan) -> Vec<CounterState> {
    let mut out = Vec::with_capacity(plan.cycles() as usize);
    let mut c = CounterState::start(plan);
    loop {
        out.push(c);
        let (next, ended) = advance(c, plan);
        if ended {
            return out;
        }
        c = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleReport {
    pub cycles: u64,
    pub end_comparand: Option<(u32, u32)>,
    pub single_cycle: bool,
}

pub fn instruction_cycles(class: InstrClass, shape: &ThreadShape) -> CycleReport {
    let plan = CounterPlan::new(class, shape);
    CycleReport {
        cycles: plan.cycles(),
        end_comparand: plan.end_comparand(),
        single_cycle: plan.single_cycle(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopState {
    pub count_remaining: u32,
    pub body_start: u32,
    /// First address after the body.
    pub body_end: u32,
}

/// Sequential successor of `addr`, taking the loop-back at the body end.
fn step_addr(addr: u32, lp: &mut Option<LoopState>) -> u32 {
    let next = addr + 1;
    if let Some(l) = lp {
        if next == l.body_end {
            if l.count_remaining > 1 {
                l.count_remaining -= 1;
                return l.body_start;
            }
            *lp = None;
        }
    }
    next
}

fn loop_for(addr: u32, i: &Instr) -> LoopState {
    let (count, end) = i.loop_fields();
    LoopState {
        count_remaining: count,
        body_start: addr + 1,
        body_end: end,
    }
}

/// One entry of the fetch/decode shadow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Fetched { addr: u32, instr: Instr },
    /// Fetched past the end of I-Mem; traps if it reaches execute.
    OutOfRange { addr: u32 },
    Zeroed,
}

/// Where the next execute-stage instruction comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencerState {
    /// Address of the next instruction to execute.
    pub pc: u32,
    imem: Vec<Instr>,
    shadow: VecDeque<Slot>,
    return_stack: Vec<u32>,
    lp: Option<LoopState>,
    fetch_pc: u32,
    fetch_lp: Option<LoopState>,
}

/// Effect of retiring one instruction on the fetch stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transition {
    /// Shadow entries zeroed by a taken control transfer.
    pub flushed: u32,
}

impl SequencerState {
    /// The pipeline starts empty: all shadow slots are bubbles and fetch
    /// begins at `entry`.
    pub fn new(imem: Vec<Instr>, entry: u32, stages: u32) -> Self {
        SequencerState {
            pc: entry,
            imem,
            shadow: std::iter::repeat_n(Slot::Zeroed, stages as usize).collect(),
            return_stack: Vec::new(),
            lp: None,
            fetch_pc: entry,
            fetch_lp: None,
        }
    }

    pub fn imem(&self) -> &[Instr] {
        &self.imem
    }

    pub fn shadow(&self) -> impl Iterator<Item = &Slot> {
        self.shadow.iter()
    }

    pub fn stages(&self) -> usize {
        self.shadow.len()
    }

    pub fn return_stack(&self) -> &[u32] {
        &self.return_stack
    }

    pub fn loop_state(&self) -> Option<LoopState> {
        self.lp
    }

    fn fetch(&mut self) -> Slot {
        let addr = self.fetch_pc;
        let slot = match self.imem.get(addr as usize) {
            Some(&instr) => {
                if instr.opcode == Opcode::Loop {
                    self.fetch_lp = Some(loop_for(addr, &instr));
                }
                Slot::Fetched { addr, instr }
            }
            None => Slot::OutOfRange { addr },
        };
        self.fetch_pc = step_addr(addr, &mut self.fetch_lp);
        slot
    }

    /// The entry `issue` would return next.
    pub fn peek(&self) -> Slot {
        *self.shadow.front().expect("shadow has at least one stage")
    }

    /// Move the oldest shadow entry into execute and fetch behind it.
    pub fn issue(&mut self) -> Slot {
        let next = self.fetch();
        self.shadow.push_back(next);
        self.shadow.pop_front().expect("shadow has at least one stage")
    }

    fn redirect(&mut self, target: u32) -> Transition {
        for slot in self.shadow.iter_mut() {
            *slot = Slot::Zeroed;
        }
        self.pc = target;
        self.fetch_pc = target;
        self.fetch_lp = self.lp;
        Transition {
            flushed: self.shadow.len() as u32,
        }
    }

    /// Retire `completed`, fetched from `addr`, and advance the program
    /// counter.
    pub fn next_pc(&mut self, addr: u32, completed: &Instr, branch_taken: bool) -> Result<Transition, SeqError> {
        match completed.opcode {
            Opcode::Bra if branch_taken => Ok(self.redirect(completed.target())),
            Opcode::Call => {
                if self.return_stack.len() == RETURN_STACK_DEPTH {
                    return Err(SeqError::ReturnStackOverflow);
                }
                let ret = step_addr(addr, &mut self.lp);
                self.return_stack.push(ret);
                Ok(self.redirect(completed.target()))
            }
            Opcode::Ret => {
                let ret = self.return_stack.pop().ok_or(SeqError::ReturnStackUnderflow)?;
                Ok(self.redirect(ret))
            }
            Opcode::Loop => {
                if self.lp.is_some() {
                    return Err(SeqError::NestedLoop { pc: addr });
                }
                self.lp = Some(loop_for(addr, completed));
                self.pc = step_addr(addr, &mut self.lp);
                Ok(Transition::default())
            }
            _ => {
                self.pc = step_addr(addr, &mut self.lp);
                Ok(Transition::default())
            }
        }
    }

    /// Install a new I-Mem. Return stack and loop state are cleared and the
    /// shadow refills from `entry` behind a full set of bubbles.
    pub fn reload(&mut self, imem: Vec<Instr>, entry: u32) {
        *self = SequencerState::new(imem, entry, self.shadow.len() as u32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(t: u32) -> ThreadShape {
        ThreadShape::new(t)
    }

    #[test]
    fn shapes() {
        let s = shape(512);
        assert_eq!((s.depth, s.width, s.full_rows), (32, 16, 32));
        let s = shape(100);
        assert_eq!((s.depth, s.width, s.full_rows), (7, 4, 6));
        let cfg = MachineConfig::default();
        let sts = Instr {
            opcode: Opcode::Sts,
            scale: Some(16),
            ..Instr::default()
        };
        let s = shape_for(&sts, 512, &cfg).unwrap();
        assert_eq!((s.active_threads, s.depth), (16, 1));
        let big = Instr {
            scale: Some(1024),
            ..sts
        };
        assert_eq!(
            shape_for(&big, 512, &cfg),
            Err(SeqError::ScaleOutOfRange { scale: 1024, max: 512 })
        );
    }

    #[test]
    fn operation_512_threads() {
        let r = instruction_cycles(InstrClass::Operation, &shape(512));
        assert_eq!(r.cycles, 32);
        assert_eq!(r.end_comparand, Some((30, 0)));
    }

    #[test]
    fn load_512_threads() {
        let r = instruction_cycles(InstrClass::Load, &shape(512));
        assert_eq!(r.cycles, 128);
        assert_eq!(r.end_comparand, Some((31, 2)));
    }

    #[test]
    fn store_cycles_follow_active_lanes() {
        assert_eq!(instruction_cycles(InstrClass::Store, &shape(512)).cycles, 512);
        assert_eq!(instruction_cycles(InstrClass::Store, &shape(16)).cycles, 16);
        assert_eq!(instruction_cycles(InstrClass::Store, &shape(100)).cycles, 100);
    }

    #[test]
    fn load_width_counter_wraps() {
        let plan = CounterPlan::new(InstrClass::Load, &shape(512));
        let c = CounterState {
            depth_count: 4,
            width_count: 3,
            end: false,
            single_cycle: false,
        };
        let (next, ended) = advance(c, &plan);
        assert!(!ended);
        assert_eq!((next.depth_count, next.width_count), (5, 0));
    }

    #[test]
    fn single_row_operation_is_single_cycle() {
        let plan = CounterPlan::new(InstrClass::Operation, &shape(16));
        let c = CounterState::start(&plan);
        assert!(c.single_cycle);
        assert!(advance(c, &plan).1);
        assert_eq!(counter_trace(&plan).len(), 1);
    }

    #[test]
    fn load_depth_two_trace() {
        let plan = CounterPlan::new(InstrClass::Load, &shape(32));
        let t = counter_trace(&plan);
        let pairs: Vec<_> = t.iter().map(|c| (c.depth_count, c.width_count)).collect();
        assert_eq!(
            pairs,
            [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3)]
        );
        assert_eq!(plan.end_comparand(), Some((1, 2)));
        assert!(t.last().unwrap().end);
        assert_eq!(t.iter().filter(|c| c.end).count(), 1);
    }

    #[test]
    fn counter_trace_agrees_with_closed_form() {
        for class in InstrClass::ALL {
            for t in (1..=4096).step_by(7).chain([16, 17, 32, 33, 512, 4096]) {
                let s = shape(t);
                let plan = CounterPlan::new(class, &s);
                let trace = counter_trace(&plan);
                assert_eq!(trace.len() as u64, instruction_cycles(class, &s).cycles, "{class:?} {t}");
                assert_eq!(trace.iter().filter(|c| c.end).count(), 1);
                assert!(trace.last().unwrap().end);
                for c in &trace {
                    assert!(c.depth_count < plan.depth);
                    assert!(c.width_count < plan.phases(c.depth_count));
                }
            }
        }
    }

    #[test]
    fn operation_cycles_are_ceil_over_sps() {
        for t in 1..=4096u32 {
            assert_eq!(
                instruction_cycles(InstrClass::Operation, &shape(t)).cycles,
                t.div_ceil(16) as u64
            );
        }
    }

    fn bra(target: u32) -> Instr {
        Instr {
            opcode: Opcode::Bra,
            imm: target as i32,
            ..Instr::default()
        }
    }

    fn run_addresses(prog: Vec<Instr>, limit: usize) -> (Vec<u32>, u32) {
        let mut st = SequencerState::new(prog, 0, 4);
        let mut out = Vec::new();
        let mut flushed = 0;
        while out.len() < limit {
            match st.issue() {
                Slot::Zeroed => continue,
                Slot::OutOfRange { .. } => break,
                Slot::Fetched { addr, instr } => {
                    assert_eq!(addr, st.pc);
                    out.push(addr);
                    if instr.opcode == Opcode::Halt {
                        break;
                    }
                    flushed += st.next_pc(addr, &instr, true).unwrap().flushed;
                }
            }
        }
        (out, flushed)
    }

    #[test]
    fn taken_branch_zeroes_shadow() {
        let prog = vec![bra(3), Instr::new(Opcode::Add), Instr::new(Opcode::Add), Instr::new(Opcode::Halt)];
        let mut st = SequencerState::new(prog, 0, 4);
        while !matches!(st.issue(), Slot::Fetched { .. }) {}
        assert!(st.shadow().all(|s| matches!(s, Slot::Fetched { .. } | Slot::OutOfRange { .. })));
        let t = st.next_pc(0, &bra(3), true).unwrap();
        assert_eq!(t.flushed, 4);
        assert_eq!(st.shadow().filter(|s| **s == Slot::Zeroed).count(), 4);
        assert_eq!(st.pc, 3);
        for _ in 0..4 {
            assert_eq!(st.issue(), Slot::Zeroed);
        }
        assert!(matches!(st.issue(), Slot::Fetched { addr: 3, .. }));
    }

    #[test]
    fn zero_overhead_loop() {
        // 0: LOOP 3, 3   1: ADD   2: ADD   3: HALT
        let prog = vec![
            Instr::make_loop(3, 3),
            Instr::new(Opcode::Add),
            Instr::new(Opcode::Sub),
            Instr::new(Opcode::Halt),
        ];
        let (addrs, flushed) = run_addresses(prog, 100);
        assert_eq!(addrs, [0, 1, 2, 1, 2, 1, 2, 3]);
        assert_eq!(flushed, 0);
    }

    #[test]
    fn call_and_return() {
        let call = Instr {
            opcode: Opcode::Call,
            imm: 3,
            ..Instr::default()
        };
        let prog = vec![call, Instr::new(Opcode::Halt), Instr::new(Opcode::Nop), Instr::new(Opcode::Ret)];
        let (addrs, flushed) = run_addresses(prog, 100);
        assert_eq!(addrs, [0, 3, 1]);
        assert_eq!(flushed, 8);
    }

    #[test]
    fn return_stack_limits() {
        let mut st = SequencerState::new(vec![Instr::new(Opcode::Ret)], 0, 4);
        assert_eq!(
            st.next_pc(0, &Instr::new(Opcode::Ret), false),
            Err(SeqError::ReturnStackUnderflow)
        );
        let call = Instr {
            opcode: Opcode::Call,
            imm: 0,
            ..Instr::default()
        };
        for _ in 0..RETURN_STACK_DEPTH {
            st.next_pc(0, &call, false).unwrap();
        }
        assert_eq!(st.next_pc(0, &call, false), Err(SeqError::ReturnStackOverflow));
    }

    #[test]
    fn nested_loop_is_rejected() {
        let mut st = SequencerState::new(vec![], 0, 4);
        st.next_pc(0, &Instr::make_loop(2, 5), false).unwrap();
        assert_eq!(
            st.next_pc(1, &Instr::make_loop(2, 4), false),
            Err(SeqError::NestedLoop { pc: 1 })
        );
    }
}
