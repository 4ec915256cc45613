//! Register IR shared by lowering, the execution tree and the simulator.

use serde::{Deserialize, Serialize};

use crate::frontend::ast::{BinOp, Qualifier, UnOp};

/// Bytes of code per IR instruction.
pub const INSTR_BYTES: u32 = 4;

pub type Reg = u32;
pub type ObjId = u32;
pub type CodeId = u32;

pub const NO_CALLER: CodeId = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Const {
        dst: Reg,
        v: i64,
    },
    Mov {
        dst: Reg,
        src: Reg,
    },
    Un {
        dst: Reg,
        op: UnOp,
        a: Reg,
    },
    Bin {
        dst: Reg,
        op: BinOp,
        a: Reg,
        b: Reg,
    },
    /// `dst = c != 0 ? a : b`
    Select {
        dst: Reg,
        c: Reg,
        a: Reg,
        b: Reg,
    },
    Load {
        dst: Reg,
        obj: ObjId,
        idx: Option<Reg>,
    },
    Store {
        obj: ObjId,
        idx: Option<Reg>,
        src: Reg,
    },
    /// Conditional branch closing a block; fetches code only.
    Br {
        cond: Reg,
    },
    /// Call and return markers; they fetch code only.
    Call,
    Ret,
    /// Padding. `touch` issues a dummy read of the pad object.
    Nop {
        touch: bool,
    },
}

impl Op {
    /// The data object and index register this op accesses, if any.
    pub fn data_access(&self) -> Option<(ObjId, Option<Reg>, bool)> {
        match *self {
            Op::Load { obj, idx, .. } => Some((obj, idx, false)),
            Op::Store { obj, idx, .. } => Some((obj, idx, true)),
            _ => None,
        }
    }

    pub fn is_nop(&self) -> bool {
        matches!(self, Op::Nop { .. })
    }

    pub fn dst(&self) -> Option<Reg> {
        match *self {
            Op::Const { dst, .. }
            | Op::Mov { dst, .. }
            | Op::Un { dst, .. }
            | Op::Bin { dst, .. }
            | Op::Select { dst, .. }
            | Op::Load { dst, .. } => Some(dst),
            _ => None,
        }
    }

    pub fn srcs(&self) -> Vec<Reg> {
        match *self {
            Op::Const { .. } | Op::Call | Op::Ret | Op::Nop { .. } => vec![],
            Op::Mov { src, .. } | Op::Br { cond: src } => vec![src],
            Op::Un { a, .. } => vec![a],
            Op::Bin { a, b, .. } => vec![a, b],
            Op::Select { c, a, b, .. } => vec![c, a, b],
            Op::Load { idx, .. } => idx.into_iter().collect(),
            Op::Store { idx, src, .. } => idx.into_iter().chain(std::iter::once(src)).collect(),
        }
    }

    pub fn map_regs(&self, f: impl Fn(Reg) -> Reg) -> Op {
        match *self {
            Op::Const { dst, v } => Op::Const { dst: f(dst), v },
            Op::Mov { dst, src } => Op::Mov {
                dst: f(dst),
                src: f(src),
            },
            Op::Un { dst, op, a } => Op::Un {
                dst: f(dst),
                op,
                a: f(a),
            },
            Op::Bin { dst, op, a, b } => Op::Bin {
                dst: f(dst),
                op,
                a: f(a),
                b: f(b),
            },
            Op::Select { dst, c, a, b } => Op::Select {
                dst: f(dst),
                c: f(c),
                a: f(a),
                b: f(b),
            },
            Op::Load { dst, obj, idx } => Op::Load {
                dst: f(dst),
                obj,
                idx: idx.map(&f),
            },
            Op::Store { obj, idx, src } => Op::Store {
                obj,
                idx: idx.map(&f),
                src: f(src),
            },
            Op::Br { cond } => Op::Br { cond: f(cond) },
            o => o,
        }
    }
}

/// Position of an instruction inside a code object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeLoc {
    pub obj: CodeId,
    pub offset: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instr {
    pub op: Op,
    pub loc: CodeLoc,
    /// Code object of the immediate caller of the function instance.
    pub caller: CodeId,
    pub high: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataObject {
    pub name: String,
    pub qual: Qualifier,
    pub width: Option<u32>,
    pub elem_bytes: u64,
    pub len: u64,
    pub init: Vec<i64>,
    pub high: bool,
}

impl DataObject {
    pub fn byte_len(&self) -> u64 {
        self.len * self.elem_bytes
    }

    /// Stored values are truncated to the declared width.
    pub fn store_mask(&self) -> Option<i64> {
        match self.width {
            Some(w) if w < 64 => Some(((1u64 << w) - 1) as i64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeObject {
    pub name: String,
    /// Function whose code this object holds; clones share it.
    pub function: String,
    pub size: u64,
    pub high: bool,
}

pub const PAD_CODE: &str = "__pad_code";
pub const PAD_DATA: &str = "__pad";

/// Sign-extends `v` from `width` bits.
pub fn wrap(v: i64, width: u32) -> i64 {
    if width >= 64 {
        v
    } else {
        let s = 64 - width;
        (v << s) >> s
    }
}

pub fn eval_unop(op: UnOp, a: i64, width: u32) -> i64 {
    wrap(
        match op {
            UnOp::Neg => a.wrapping_neg(),
            UnOp::Plus => a,
            UnOp::Not => (a == 0) as i64,
            UnOp::BitNot => !a,
        },
        width,
    )
}

/// `None` on division or remainder by zero.
pub fn eval_binop(op: BinOp, a: i64, b: i64, width: u32) -> Option<i64> {
    let sh = (b as u32) & (width.min(64) - 1);
    let v = match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::Div => {
            if b == 0 {
                return None;
            }
            a.wrapping_div(b)
        }
        BinOp::Rem => {
            if b == 0 {
                return None;
            }
            a.wrapping_rem(b)
        }
        BinOp::Shl => a.wrapping_shl(sh),
        BinOp::Shr => a.wrapping_shr(sh),
        BinOp::BitAnd => a & b,
        BinOp::BitOr => a | b,
        BinOp::BitXor => a ^ b,
        BinOp::And => (a != 0 && b != 0) as i64,
        BinOp::Or => (a != 0 || b != 0) as i64,
        BinOp::Eq => (a == b) as i64,
        BinOp::Ne => (a != b) as i64,
        BinOp::Lt => (a < b) as i64,
        BinOp::Le => (a <= b) as i64,
        BinOp::Gt => (a > b) as i64,
        BinOp::Ge => (a >= b) as i64,
    };
    Some(wrap(v, width))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrapping_semantics() {
        assert_eq!(eval_binop(BinOp::Add, i64::MAX, 1, 64), Some(i64::MIN));
        assert_eq!(eval_binop(BinOp::Add, 127, 1, 8), Some(-128));
        assert_eq!(eval_binop(BinOp::Shl, 1, 9, 8), Some(2));
        assert_eq!(eval_binop(BinOp::Div, 5, 0, 64), None);
        assert_eq!(eval_unop(UnOp::Neg, -128, 8), -128);
        assert_eq!(wrap(0xff, 8), -1);
    }
}
