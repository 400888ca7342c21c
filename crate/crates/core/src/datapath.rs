//! Bit-true model of one SP's integer datapath.
//!
//! The 32x32 multiplier is a 33x33 signed unit assembled from four 18-bit
//! lane products over two DSP blocks. Their three 37-bit outputs are laid out
//! as two 66-bit vectors and summed by a 16-bit segmented adder whose upper
//! carries come from {generate, propagate} pairs. Shifts reuse the same
//! multiplier: the shift amount becomes a one-hot multiplicand, right shifts
//! bit-reverse around the product, and arithmetic right shifts OR in a
//! reversed unary sign mask.
//!
//! Everything here is combinational; pipeline latency is the sequencer's
//! concern.

use crate::isa::CmpOp;

const MASK18: u32 = (1 << 18) - 1;
const MASK37: u64 = (1 << 37) - 1;
const MASK66: u128 = (1 << 66) - 1;
const SEG: u32 = 16;
const SEG_MASK: u128 = 0xFFFF;

/// The four 18-bit multiplier inputs: 16 payload bits in the LSBs, the top
/// two bits zero (unsigned) or a copy of bit 15 (signed high halves).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperandHalves {
    pub ah: u32,
    pub al: u32,
    pub bh: u32,
    pub bl: u32,
}

/// DSP block outputs, each a 37-bit two's-complement pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartialProducts {
    /// AH x BH
    pub a: u64,
    /// AH x BL + AL x BH
    pub b: u64,
    /// AL x BL
    pub c: u64,
}

/// The two 66-bit addends built from the partial products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vec66Pair {
    /// `{A[33:0], C[31:0]}`
    pub v1: u128,
    /// `B` sign-extended, with 16 zero bits appended on the right.
    pub v2: u128,
}

/// Carry descriptors of one 16-bit segment addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CarryGP {
    pub g: bool,
    pub p: bool,
}

pub fn sign_extend(value: u64, bits: u32) -> i64 {
    let shift = 64 - bits;
    ((value << shift) as i64) >> shift
}

fn half(x: u32, signed: bool) -> u32 {
    let hi = x >> 16;
    if signed {
        (sign_extend(hi as u64, 16) as u32) & MASK18
    } else {
        hi
    }
}

pub fn split_operands(a: u32, b: u32, signed: bool) -> OperandHalves {
    OperandHalves {
        ah: half(a, signed),
        al: a & 0xFFFF,
        bh: half(b, signed),
        bl: b & 0xFFFF,
    }
}

/// Each 18-bit input is interpreted two's-complement, so a zeroed top pair
/// reads as a non-negative value.
pub fn partial_products(h: &OperandHalves) -> PartialProducts {
    let s = |v: u32| sign_extend(v as u64, 18);
    let (ah, al, bh, bl) = (s(h.ah), s(h.al), s(h.bh), s(h.bl));
    PartialProducts {
        a: (ah * bh) as u64 & MASK37,
        b: (ah * bl + al * bh) as u64 & MASK37,
        c: (al * bl) as u64 & MASK37,
    }
}

pub fn compose(pp: &PartialProducts) -> Vec66Pair {
    let a34 = (pp.a & ((1 << 34) - 1)) as u128;
    let c32 = (pp.c & 0xFFFF_FFFF) as u128;
    let b = sign_extend(pp.b, 37) as i128 as u128;
    Vec66Pair {
        v1: (a34 << 32) | c32,
        v2: (b << 16) & MASK66,
    }
}

fn segment(v: u128, index: u32) -> u32 {
    ((v >> (index * SEG)) & SEG_MASK) as u32
}

/// {g, p} of segment `index` (bits `[16*index+15 : 16*index]`).
pub fn segment_gp(pair: &Vec66Pair, index: u32) -> CarryGP {
    let x = segment(pair.v1, index);
    let y = segment(pair.v2, index);
    CarryGP {
        g: x + y > 0xFFFF,
        p: (x | y) == 0xFFFF,
    }
}

/// Low 64 bits of `V1 + V2`, formed segment by segment.
pub fn segmented_add(pair: &Vec66Pair) -> u64 {
    let seg = |i| (segment(pair.v1, i), segment(pair.v2, i));

    // V2[15:0] is zero, so segment 0 is C's low bits.
    let s0 = segment(pair.v1, 0);

    let (x1, y1) = seg(1);
    let s1 = (x1 + y1) & 0xFFFF;

    let (x2, y2) = seg(2);
    let (x3, y3) = seg(3);
    let gp1 = segment_gp(pair, 1);
    let gp2 = segment_gp(pair, 2);
    let carry2 = gp1.g;
    let carry3 = gp2.g || (gp2.p && gp1.g);
    let s2 = (x2 + y2 + carry2 as u32) & 0xFFFF;
    let s3 = (x3 + y3 + carry3 as u32) & 0xFFFF;

    s0 as u64 | (s1 as u64) << 16 | (s2 as u64) << 32 | (s3 as u64) << 48
}

pub fn compose_and_add(pp: &PartialProducts) -> u64 {
    segmented_add(&compose(pp))
}

/// Full 64-bit product through the DSP decomposition.
pub fn mul64(a: u32, b: u32, signed: bool) -> u64 {
    compose_and_add(&partial_products(&split_operands(a, b, signed)))
}

pub fn mul32(a: u32, b: u32, signed: bool, hi: bool) -> u32 {
    let p = mul64(a, b, signed);
    if hi {
        (p >> 32) as u32
    } else {
        p as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftKind {
    Shl,
    ShrLogical,
    ShrArith,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftRequest {
    /// Data width in bits, 4..=64.
    pub width: u32,
    /// Data value (AA); bits above `width` are ignored.
    pub value: u64,
    /// Shift amount (BB), unsigned.
    pub amount: u32,
    pub kind: ShiftKind,
}

/// Every intermediate vector of a multiplicative shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftTrace {
    /// Multiplier data input: AA, or AA bit-reversed for right shifts.
    pub data_in: u64,
    pub one_hot: u64,
    /// Low `width` bits of the product.
    pub product: u64,
    /// Product after the output bit reversal (right shifts), else the product.
    pub unsigned_result: u64,
    /// Bit-reversed unary mask ORed in for negative arithmetic shifts, else 0.
    pub sign_mask: u64,
    pub result: u64,
}

pub fn width_mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1 << width) - 1
    }
}

/// Reverse the low `width` bits of `x`.
pub fn bit_reverse(x: u64, width: u32) -> u64 {
    (x & width_mask(width)).reverse_bits() >> (64 - width)
}

/// One-hot decode of a shift amount; zero when the amount is out of range.
pub fn one_hot(amount: u32, width: u32) -> u64 {
    if amount >= width {
        0
    } else {
        1 << amount
    }
}

/// `amount` consecutive ones from bit 0, saturating at `width`.
pub fn unary(amount: u32, width: u32) -> u64 {
    width_mask(amount.min(width))
}

fn multiply_low(x: u64, y: u64, width: u32) -> u64 {
    let p = if width <= 32 {
        mul64(x as u32, y as u32, false)
    } else {
        (x as u128 * y as u128) as u64
    };
    p & width_mask(width)
}

pub fn shift_trace(req: &ShiftRequest) -> ShiftTrace {
    let w = req.width;
    assert!((4..=64).contains(&w), "shift width {w} outside 4..=64");
    let value = req.value & width_mask(w);
    let right = req.kind != ShiftKind::Shl;

    let data_in = if right { bit_reverse(value, w) } else { value };
    let one_hot = one_hot(req.amount, w);
    let product = multiply_low(data_in, one_hot, w);
    let unsigned_result = if right { bit_reverse(product, w) } else { product };
    let negative = value >> (w - 1) & 1 == 1;
    let sign_mask = if req.kind == ShiftKind::ShrArith && negative {
        bit_reverse(unary(req.amount, w), w)
    } else {
        0
    };
    ShiftTrace {
        data_in,
        one_hot,
        product,
        unsigned_result,
        sign_mask,
        result: unsigned_result | sign_mask,
    }
}

pub fn multiplicative_shift(req: &ShiftRequest) -> u64 {
    shift_trace(req).result
}

/// 32-bit machine shift through the multiplier.
pub fn shift32(kind: ShiftKind, value: u32, amount: u32) -> u32 {
    multiplicative_shift(&ShiftRequest {
        width: 32,
        value: value as u64,
        amount,
        kind,
    }) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LogicOp {
    And,
    Or,
    Xor,
    Not,
    Cnot,
}

pub fn alu_logic(op: LogicOp, a: u32, b: u32) -> u32 {
    match op {
        LogicOp::And => a & b,
        LogicOp::Or => a | b,
        LogicOp::Xor => a ^ b,
        LogicOp::Not => !a,
        LogicOp::Cnot => (a == 0) as u32,
    }
}

/// Two-stage adder: two 16-bit halves, the low half's carry registered into
/// the high half. Returns the sum and the carry out of bit 31.
pub fn two_stage_add(a: u32, b: u32, carry_in: bool) -> (u32, bool) {
    let lo = (a & 0xFFFF) + (b & 0xFFFF) + carry_in as u32;
    let hi = (a >> 16) + (b >> 16) + (lo >> 16);
    ((hi & 0xFFFF) << 16 | (lo & 0xFFFF), hi >> 16 != 0)
}

/// Flags of `a - b` formed as `a + !b + 1`.
struct SubFlags {
    diff: u32,
    /// Unsigned a < b.
    borrow: bool,
    /// Signed a < b.
    less: bool,
}

fn subtract(a: u32, b: u32) -> SubFlags {
    let (diff, carry) = two_stage_add(a, !b, true);
    let negative = diff >> 31 == 1;
    let overflow = ((a ^ b) & (a ^ diff)) >> 31 == 1;
    SubFlags {
        diff,
        borrow: !carry,
        less: negative != overflow,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AddSubOp {
    Add,
    Sub,
    Abs,
    Min,
    Max,
    Setp(CmpOp),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AluOut {
    Word(u32),
    Pred(bool),
}

pub fn compare(cmp: CmpOp, a: u32, b: u32, signed: bool) -> bool {
    let f = subtract(a, b);
    let lt = if signed { f.less } else { f.borrow };
    let eq = f.diff == 0;
    match cmp {
        CmpOp::Eq => eq,
        CmpOp::Ne => !eq,
        CmpOp::Lt => lt,
        CmpOp::Le => lt || eq,
        CmpOp::Gt => !(lt || eq),
        CmpOp::Ge => !lt,
    }
}

/// Adder-path operations. `ABS` always reads its operand as signed and wraps
/// at the most negative value.
pub fn alu_addsub(op: AddSubOp, a: u32, b: u32, signed: bool) -> AluOut {
    let word = match op {
        AddSubOp::Add => two_stage_add(a, b, false).0,
        AddSubOp::Sub => subtract(a, b).diff,
        AddSubOp::Abs => {
            if a >> 31 == 1 {
                subtract(0, a).diff
            } else {
                a
            }
        }
        AddSubOp::Min => {
            if compare(CmpOp::Lt, a, b, signed) {
                a
            } else {
                b
            }
        }
        AddSubOp::Max => {
            if compare(CmpOp::Gt, a, b, signed) {
                a
            } else {
                b
            }
        }
        AddSubOp::Setp(cmp) => return AluOut::Pred(compare(cmp, a, b, signed)),
    };
    AluOut::Word(word)
}
