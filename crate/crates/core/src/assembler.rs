//! Two-pass assembler and label-regenerating disassembler.
//!
//! ```text
//! .threads 512            # declared thread count
//! .entry start            # optional, defaults to the first instruction
//! start:  MOV.tid r0
//!         LDS r1, [r0+256]
//!         @!p0 MUL.hi.s32.n16 r2, r1, r1
//!         LOOP 4, done
//!         ...
//! done:   HALT
//! ```
//!
//! Mnemonics and modifiers are case-insensitive. Modifiers: `.s32` / `.u32`,
//! `.hi` / `.lo` (MUL), `.eq` .. `.ge` (SETP), `.tid` / `.ntid` (MOV) and
//! `.n<count>` for a per-instruction thread count. Immediates accept
//! decimal, `0x` hex and `0b` binary, with `_` separators.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::isa::{
    CmpOp, Guard, ImageError, Instr, IsaError, MachineConfig, Opcode, OperandForm, ProgramImage, IMM_MAX, IMM_MIN,
    LOOP_MAX_COUNT, LOOP_MAX_END, NUM_PREDICATES,
};

const DEFAULT_THREADS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: label `{label}` already defined")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: {reason}")]
    OperandRange { line: usize, reason: String },
    #[error("line {line}: predicate guard used but predicates are disabled")]
    GuardWithoutPredicates { line: usize },
    #[error("line {line}: {mnemonic} needs predicates, which are disabled")]
    PredicatesDisabled { line: usize, mnemonic: String },
    #[error("line {line}: {source}")]
    Encode {
        line: usize,
        #[source]
        source: IsaError,
    },
    #[error("program contains no instructions")]
    EmptyProgram,
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl AsmError {
    pub fn line(&self) -> Option<usize> {
        match self {
            AsmError::Parse { line, .. }
            | AsmError::UnknownMnemonic { line, .. }
            | AsmError::UndefinedLabel { line, .. }
            | AsmError::DuplicateLabel { line, .. }
            | AsmError::OperandRange { line, .. }
            | AsmError::GuardWithoutPredicates { line }
            | AsmError::PredicatesDisabled { line, .. }
            | AsmError::Encode { line, .. } => Some(*line),
            AsmError::EmptyProgram | AsmError::Image(_) => None,
        }
    }
}

struct PendingInstr<'a> {
    line: usize,
    text: &'a str,
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn assemble(src: &str, cfg: &MachineConfig) -> Result<ProgramImage, AsmError> {
    let mut labels: HashMap<&str, u32> = HashMap::new();
    let mut pending = Vec::new();
    let mut threads: Option<(usize, u32)> = None;
    let mut entry: Option<(usize, &str)> = None;

    for (n, raw) in src.lines().enumerate() {
        let line = n + 1;
        let mut text = raw.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        if text.starts_with('.') {
            let mut words = text.split_whitespace();
            let directive = words.next().unwrap_or_default().to_ascii_lowercase();
            let arg = words.next();
            if words.next().is_some() {
                return Err(parse_err(line, "trailing text after directive"));
            }
            let arg = arg.ok_or_else(|| parse_err(line, format!("{directive} needs an argument")))?;
            match directive.as_str() {
                ".threads" => {
                    if threads.is_some() {
                        return Err(parse_err(line, "duplicate .threads"));
                    }
                    let n = parse_number(arg).ok_or_else(|| parse_err(line, format!("bad thread count `{arg}`")))?;
                    if n < 1 || n > cfg.max_threads as i64 {
                        return Err(AsmError::OperandRange {
                            line,
                            reason: format!("thread count {n} outside 1..={}", cfg.max_threads),
                        });
                    }
                    threads = Some((line, n as u32));
                }
                ".entry" => {
                    if entry.is_some() {
                        return Err(parse_err(line, "duplicate .entry"));
                    }
                    if !is_identifier(arg) {
                        return Err(parse_err(line, format!("bad label `{arg}`")));
                    }
                    entry = Some((line, arg));
                }
                other => return Err(parse_err(line, format!("unknown directive `{other}`"))),
            }
            continue;
        }
        while let Some((head, rest)) = text.split_once(':') {
            let name = head.trim();
            if !is_identifier(name) {
                break;
            }
            if labels.insert(name, pending.len() as u32).is_some() {
                return Err(AsmError::DuplicateLabel {
                    line,
                    label: name.to_string(),
                });
            }
            text = rest.trim();
        }
        if !text.is_empty() {
            pending.push(PendingInstr { line, text });
        }
    }

    if pending.is_empty() {
        return Err(AsmError::EmptyProgram);
    }
    let instrs = pending
        .iter()
        .enumerate()
        .map(|(index, p)| parse_instr(p, index as u32, &labels, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let entry = match entry {
        None => 0,
        Some((line, name)) => {
            let &target = labels.get(name).ok_or_else(|| AsmError::UndefinedLabel {
                line,
                label: name.to_string(),
            })?;
            if target as usize >= instrs.len() {
                return Err(AsmError::OperandRange {
                    line,
                    reason: format!("entry label `{name}` marks the end of the program"),
                });
            }
            target
        }
    };
    let threads = threads.map_or(DEFAULT_THREADS.min(cfg.max_threads), |(_, n)| n);
    Ok(ProgramImage::from_instrs(&instrs, entry, threads)?)
}

fn parse_err(line: usize, reason: impl Into<String>) -> AsmError {
    AsmError::Parse {
        line,
        reason: reason.into(),
    }
}

fn range_err(line: usize, reason: impl Into<String>) -> AsmError {
    AsmError::OperandRange {
        line,
        reason: reason.into(),
    }
}

/// Decimal, `0x` hex or `0b` binary, optionally signed, `_` allowed.
pub fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (negative, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let lower = body.to_ascii_lowercase();
    let (radix, digits) = if let Some(d) = lower.strip_prefix("0x") {
        (16, d)
    } else if let Some(d) = lower.strip_prefix("0b") {
        (2, d)
    } else {
        (10, lower.as_str())
    };
    let digits: String = digits.chars().filter(|&c| c != '_').collect();
    if digits.is_empty() || digits.starts_with(['+', '-']) {
        return None;
    }
    let v = i64::from_str_radix(&digits, radix).ok()?;
    Some(if negative { -v } else { v })
}

fn parse_indexed(s: &str, prefix: char, limit: u32, line: usize) -> Result<u8, AsmError> {
    let s = s.trim();
    let digits = s
        .strip_prefix(prefix)
        .or_else(|| s.strip_prefix(prefix.to_ascii_uppercase()))
        .filter(|d| !d.is_empty() && d.chars().all(|c| c.is_ascii_digit()))
        .ok_or_else(|| parse_err(line, format!("expected {prefix}N, found `{s}`")))?;
    match digits.parse::<u32>() {
        Ok(n) if n < limit => Ok(n as u8),
        _ => Err(range_err(line, format!("`{s}` outside {prefix}0..{prefix}{}", limit - 1))),
    }
}

fn parse_reg(s: &str, line: usize) -> Result<u8, AsmError> {
    parse_indexed(s, 'r', 256, line)
}

fn parse_pred(s: &str, line: usize) -> Result<u8, AsmError> {
    parse_indexed(s, 'p', NUM_PREDICATES as u32, line)
}

fn parse_imm(s: &str, line: usize) -> Result<i32, AsmError> {
    let v = parse_number(s).ok_or_else(|| parse_err(line, format!("bad immediate `{}`", s.trim())))?;
    if v < IMM_MIN as i64 || v > IMM_MAX as i64 {
        return Err(range_err(line, format!("immediate {v} does not fit in 24 bits")));
    }
    Ok(v as i32)
}

/// `[rA]`, `[rA+imm]` or `[rA-imm]`.
fn parse_mem(s: &str, line: usize) -> Result<(u8, i32), AsmError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| parse_err(line, format!("expected [rN+offset], found `{}`", s.trim())))?;
    match inner.find(['+', '-']) {
        None => Ok((parse_reg(inner, line)?, 0)),
        Some(pos) => {
            let reg = parse_reg(&inner[..pos], line)?;
            let offset = parse_imm(&inner[pos..].replace(' ', ""), line)?;
            Ok((reg, offset))
        }
    }
}

fn parse_label(s: &str, labels: &HashMap<&str, u32>, line: usize) -> Result<u32, AsmError> {
    let s = s.trim();
    if !is_identifier(s) {
        return Err(parse_err(line, format!("expected a label, found `{s}`")));
    }
    labels.get(s).copied().ok_or_else(|| AsmError::UndefinedLabel {
        line,
        label: s.to_string(),
    })
}

fn cmp_from_name(s: &str) -> Option<CmpOp> {
    [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge]
        .into_iter()
        .find(|c| c.name() == s)
}

fn parse_instr(p: &PendingInstr, index: u32, labels: &HashMap<&str, u32>, cfg: &MachineConfig) -> Result<Instr, AsmError> {
    let line = p.line;
    let mut text = p.text;

    let mut guard = None;
    if let Some(rest) = text.strip_prefix('@') {
        let (tok, after) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
        let (negated, pred) = match tok.strip_prefix('!') {
            Some(pred) => (true, pred),
            None => (false, tok),
        };
        let pred = parse_pred(pred, line)?;
        if !cfg.predicates_enabled {
            return Err(AsmError::GuardWithoutPredicates { line });
        }
        guard = Some(Guard { pred, negated });
        text = after.trim_start();
    }

    let (mnemonic, operand_text) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
    let mut parts = mnemonic.split('.');
    let base = parts.next().unwrap_or_default().to_ascii_uppercase();
    let mods: Vec<String> = parts.map(|m| m.to_ascii_lowercase()).collect();

    let unknown = || AsmError::UnknownMnemonic {
        line,
        mnemonic: mnemonic.to_string(),
    };
    let mut opcode = Opcode::ALL
        .into_iter()
        .find(|op| op.base() == base && !matches!(op, Opcode::MovTid | Opcode::MovNtid) && op.cmp().is_none())
        .or_else(|| (base == "SETP").then_some(Opcode::SetpEq))
        .ok_or_else(unknown)?;
    let is_setp = base == "SETP";
    let mut have_cmp = false;
    let mut instr = Instr {
        guard,
        ..Instr::default()
    };
    let mut have_half = false;
    for m in &mods {
        match m.as_str() {
            "s32" => instr.signed = true,
            "u32" => instr.signed = false,
            "hi" | "lo" if opcode == Opcode::Mul && !have_half => {
                instr.hi_half = m == "hi";
                have_half = true;
            }
            "tid" if opcode == Opcode::Mov => opcode = Opcode::MovTid,
            "ntid" if opcode == Opcode::Mov => opcode = Opcode::MovNtid,
            m if is_setp && !have_cmp && cmp_from_name(m).is_some() => {
                opcode = Opcode::setp(cmp_from_name(m).unwrap());
                have_cmp = true;
            }
            m if m.starts_with('n') && m.len() > 1 && m[1..].chars().all(|c| c.is_ascii_digit()) => {
                let n: u32 = m[1..].parse().map_err(|_| range_err(line, format!("bad thread count `.{m}`")))?;
                if n == 0 || n > cfg.max_threads {
                    return Err(range_err(line, format!("thread count {n} outside 1..={}", cfg.max_threads)));
                }
                if !opcode.accepts_scale() {
                    return Err(parse_err(line, format!("{base} cannot take a thread count")));
                }
                instr.scale = Some(n as u16);
            }
            _ => return Err(parse_err(line, format!("unknown modifier `.{m}` on {base}"))),
        }
    }
    if is_setp && !have_cmp {
        return Err(parse_err(line, "SETP needs a comparison (.eq .ne .lt .le .gt .ge)"));
    }
    instr.opcode = opcode;
    if opcode.uses_predicates() && !cfg.predicates_enabled {
        return Err(AsmError::PredicatesDisabled {
            line,
            mnemonic: mnemonic.to_string(),
        });
    }

    let ops: Vec<&str> = if operand_text.trim().is_empty() {
        Vec::new()
    } else {
        operand_text.split(',').map(str::trim).collect()
    };
    let form = opcode.form();
    let arity = match form {
        OperandForm::None => 0,
        OperandForm::Reg | OperandForm::Target => 1,
        OperandForm::RegReg | OperandForm::RegImm | OperandForm::Load | OperandForm::Store | OperandForm::Loop => 2,
        OperandForm::RegRegReg | OperandForm::Setp => 3,
        OperandForm::Selp => 4,
    };
    if ops.len() != arity {
        return Err(parse_err(
            line,
            format!("{mnemonic} takes {arity} operand(s), found {}", ops.len()),
        ));
    }

    match form {
        OperandForm::None => {}
        OperandForm::RegRegReg => {
            instr.dst = parse_reg(ops[0], line)?;
            instr.src1 = parse_reg(ops[1], line)?;
            instr.src2 = parse_reg(ops[2], line)?;
        }
        OperandForm::RegReg => {
            instr.dst = parse_reg(ops[0], line)?;
            instr.src1 = parse_reg(ops[1], line)?;
        }
        OperandForm::RegImm => {
            instr.dst = parse_reg(ops[0], line)?;
            instr.imm = parse_imm(ops[1], line)?;
        }
        OperandForm::Reg => instr.dst = parse_reg(ops[0], line)?,
        OperandForm::Load => {
            instr.dst = parse_reg(ops[0], line)?;
            (instr.src1, instr.imm) = parse_mem(ops[1], line)?;
        }
        OperandForm::Store => {
            (instr.src1, instr.imm) = parse_mem(ops[0], line)?;
            instr.src2 = parse_reg(ops[1], line)?;
        }
        OperandForm::Setp => {
            instr.dst = parse_pred(ops[0], line)?;
            instr.src1 = parse_reg(ops[1], line)?;
            instr.src2 = parse_reg(ops[2], line)?;
        }
        OperandForm::Selp => {
            instr.dst = parse_reg(ops[0], line)?;
            instr.src1 = parse_reg(ops[1], line)?;
            instr.src2 = parse_reg(ops[2], line)?;
            instr.imm = parse_pred(ops[3], line)? as i32;
        }
        OperandForm::Target => instr.imm = parse_label(ops[0], labels, line)? as i32,
        OperandForm::Loop => {
            let count = parse_number(ops[0]).ok_or_else(|| parse_err(line, format!("bad loop count `{}`", ops[0])))?;
            if count < 1 || count > LOOP_MAX_COUNT as i64 {
                return Err(range_err(line, format!("loop count {count} outside 1..={LOOP_MAX_COUNT}")));
            }
            let end = parse_label(ops[1], labels, line)?;
            if end <= index + 1 {
                return Err(range_err(line, "loop body must contain at least one instruction"));
            }
            if end > LOOP_MAX_END {
                return Err(range_err(line, format!("loop end {end} beyond address {LOOP_MAX_END}")));
            }
            let guard = instr.guard;
            instr = Instr::make_loop(count as u32, end);
            instr.guard = guard;
        }
    }

    instr.validate().map_err(|source| match source {
        IsaError::FieldRange { .. } => range_err(line, source.to_string()),
        source => AsmError::Encode { line, source },
    })?;
    Ok(instr)
}

/// Render an image as source that assembles back to the same words.
/// Code addresses are named `L<index>`.
pub fn disassemble(img: &ProgramImage) -> String {
    let instrs = img.instrs();
    let mut targets = BTreeSet::new();
    if img.entry() != 0 {
        targets.insert(img.entry());
    }
    for i in instrs {
        match i.opcode.form() {
            OperandForm::Target => {
                targets.insert(i.target());
            }
            OperandForm::Loop => {
                targets.insert(i.loop_fields().1);
            }
            _ => {}
        }
    }
    let label = |t: u32| format!("L{t}");

    let mut out = format!(".threads {}\n", img.declared_threads());
    if img.entry() != 0 {
        out.push_str(&format!(".entry {}\n", label(img.entry())));
    }
    for (n, i) in instrs.iter().enumerate() {
        if targets.contains(&(n as u32)) {
            out.push_str(&format!("{}:\n", label(n as u32)));
        }
        out.push_str("    ");
        out.push_str(&i.render(label));
        out.push('\n');
    }
    if targets.contains(&(instrs.len() as u32)) {
        out.push_str(&format!("{}:\n", label(instrs.len() as u32)));
    }
    out
}
