//! The mini-IR: a small SSA language with explicit address arithmetic.
//!
//! Programs are a list of module-scope globals plus functions made of basic
//! blocks. Every value is an unsigned 64-bit integer; pointers are plain
//! addresses into the simulated application space. Registers are interned
//! per function as [`Reg`] indices, and blocks are addressed by [`BlockId`].

mod defuse;
mod dom;
mod loops;
mod parse;
mod print;
mod validate;

pub use defuse::{DefSite, DefUse};
pub use dom::DomTree;
pub use loops::{IrreducibleCfg, Loop, LoopInfo};
pub use parse::{parse_module, ParseError, ParseErrorKind};
pub use validate::{validate, Violation, ViolationKind};

use std::fmt;

/// Index of a register inside its function's register table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u32);

/// Index of a basic block inside its function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub usize);

/// Index of a module-scope global.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GlobalId(pub usize);

/// Index of a function in its module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FuncId(pub usize);

/// Position of an instruction: block plus index within the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstRef {
    pub block: BlockId,
    pub idx: usize,
}

impl InstRef {
    pub fn new(block: BlockId, idx: usize) -> Self {
        InstRef { block, idx }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    Reg(Reg),
    Const(u64),
    /// Base address of a module-scope global.
    Global(GlobalId),
}

impl Value {
    pub fn as_reg(self) -> Option<Reg> {
        match self {
            Value::Reg(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_const(self) -> Option<u64> {
        match self {
            Value::Const(c) => Some(c),
            _ => None,
        }
    }
}

/// Width of a load or store. Only 1, 2, 4 and 8 bytes are representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AccessSize(u8);

impl AccessSize {
    pub const B1: AccessSize = AccessSize(1);
    pub const B2: AccessSize = AccessSize(2);
    pub const B4: AccessSize = AccessSize(4);
    pub const B8: AccessSize = AccessSize(8);
    pub const ALL: [AccessSize; 4] = [Self::B1, Self::B2, Self::B4, Self::B8];

    pub fn new(bytes: u64) -> Option<Self> {
        match bytes {
            1 | 2 | 4 | 8 => Some(AccessSize(bytes as u8)),
            _ => None,
        }
    }

    pub fn bytes(self) -> u64 {
        self.0 as u64
    }

    /// Type keyword used by the text format (`i8`, `i16`, ...).
    pub fn type_name(self) -> &'static str {
        match self.0 {
            1 => "i8",
            2 => "i16",
            4 => "i32",
            _ => "i64",
        }
    }

    pub fn from_type_name(s: &str) -> Option<Self> {
        match s {
            "i8" => Some(Self::B1),
            "i16" => Some(Self::B2),
            "i32" => Some(Self::B4),
            "i64" => Some(Self::B8),
            _ => None,
        }
    }
}

/// Unsigned comparison operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn eval(self, a: u64, b: u64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            CmpOp::Lt => "lt",
            CmpOp::Le => "le",
            CmpOp::Gt => "gt",
            CmpOp::Ge => "ge",
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Some(match s {
            "lt" => CmpOp::Lt,
            "le" => CmpOp::Le,
            "gt" => CmpOp::Gt,
            "ge" => CmpOp::Ge,
            "eq" => CmpOp::Eq,
            "ne" => CmpOp::Ne,
            _ => return None,
        })
    }
}

/// Wrapping integer arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    pub fn eval(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Some(match s {
            "add" => BinOp::Add,
            "sub" => BinOp::Sub,
            "mul" => BinOp::Mul,
            _ => return None,
        })
    }
}

/// Library functions known to the runtime. Everything except `malloc` and
/// `read_input` goes through an interceptor when checks are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Builtin {
    Malloc,
    Free,
    Memset,
    Memcpy,
    Strcpy,
    Wcscpy,
    ReadInput,
}

impl Builtin {
    pub const ALL: [Builtin; 7] = [
        Builtin::Malloc,
        Builtin::Free,
        Builtin::Memset,
        Builtin::Memcpy,
        Builtin::Strcpy,
        Builtin::Wcscpy,
        Builtin::ReadInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Malloc => "malloc",
            Builtin::Free => "free",
            Builtin::Memset => "memset",
            Builtin::Memcpy => "memcpy",
            Builtin::Strcpy => "strcpy",
            Builtin::Wcscpy => "wcscpy",
            Builtin::ReadInput => "read_input",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Builtin::ALL.into_iter().find(|b| b.name() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::ReadInput => 0,
            Builtin::Malloc | Builtin::Free => 1,
            Builtin::Strcpy | Builtin::Wcscpy => 2,
            Builtin::Memset | Builtin::Memcpy => 3,
        }
    }

    pub fn returns_value(self) -> bool {
        matches!(self, Builtin::Malloc | Builtin::ReadInput)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Callee {
    Builtin(Builtin),
    Func(FuncId),
}

/// One term of a `gep`: `idx * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GepIndex {
    pub idx: Value,
    pub scale: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Inst {
    Alloca {
        dst: Reg,
        size: u64,
    },
    /// `dst = base + Σ idx·scale` (wrapping).
    Gep {
        dst: Reg,
        base: Value,
        indexes: Vec<GepIndex>,
    },
    Load {
        dst: Reg,
        ptr: Value,
        size: AccessSize,
    },
    Store {
        ptr: Value,
        val: Value,
        size: AccessSize,
    },
    Phi {
        dst: Reg,
        incomings: Vec<(Value, BlockId)>,
    },
    Cmp {
        dst: Reg,
        op: CmpOp,
        lhs: Value,
        rhs: Value,
    },
    Bin {
        dst: Reg,
        op: BinOp,
        lhs: Value,
        rhs: Value,
    },
    Br {
        cond: Value,
        then_bb: BlockId,
        else_bb: BlockId,
    },
    Jmp {
        target: BlockId,
    },
    Call {
        dst: Option<Reg>,
        callee: Callee,
        args: Vec<Value>,
    },
    Ret {
        val: Option<Value>,
    },
}

impl Inst {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Inst::Br { .. } | Inst::Jmp { .. } | Inst::Ret { .. })
    }

    pub fn def(&self) -> Option<Reg> {
        match self {
            Inst::Alloca { dst, .. }
            | Inst::Gep { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::Phi { dst, .. }
            | Inst::Cmp { dst, .. }
            | Inst::Bin { dst, .. } => Some(*dst),
            Inst::Call { dst, .. } => *dst,
            Inst::Store { .. } | Inst::Br { .. } | Inst::Jmp { .. } | Inst::Ret { .. } => None,
        }
    }

    /// Operands read by the instruction, in textual order.
    pub fn operands(&self) -> Vec<Value> {
        match self {
            Inst::Alloca { .. } | Inst::Jmp { .. } => vec![],
            Inst::Gep { base, indexes, .. } => std::iter::once(*base)
                .chain(indexes.iter().map(|g| g.idx))
                .collect(),
            Inst::Load { ptr, .. } => vec![*ptr],
            Inst::Store { ptr, val, .. } => vec![*val, *ptr],
            Inst::Phi { incomings, .. } => incomings.iter().map(|(v, _)| *v).collect(),
            Inst::Cmp { lhs, rhs, .. } | Inst::Bin { lhs, rhs, .. } => vec![*lhs, *rhs],
            Inst::Br { cond, .. } => vec![*cond],
            Inst::Call { args, .. } => args.clone(),
            Inst::Ret { val } => val.iter().copied().collect(),
        }
    }

    pub fn successors(&self) -> Vec<BlockId> {
        match self {
            Inst::Br {
                then_bb, else_bb, ..
            } => {
                if then_bb == else_bb {
                    vec![*then_bb]
                } else {
                    vec![*then_bb, *else_bb]
                }
            }
            Inst::Jmp { target } => vec![*target],
            _ => vec![],
        }
    }

    /// True for instructions that may change application memory or shadow
    /// state: stores, calls and allocas.
    pub fn has_memory_effect(&self) -> bool {
        matches!(
            self,
            Inst::Store { .. } | Inst::Call { .. } | Inst::Alloca { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub insts: Vec<Inst>,
}

impl BasicBlock {
    pub fn terminator(&self) -> Option<&Inst> {
        self.insts.last().filter(|i| i.is_terminator())
    }

    pub fn successors(&self) -> Vec<BlockId> {
        self.terminator().map(Inst::successors).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Reg>,
    /// Register names, indexed by [`Reg`].
    pub reg_names: Vec<String>,
    /// `blocks[0]` is the entry block.
    pub blocks: Vec<BasicBlock>,
}

impl Function {
    pub const ENTRY: BlockId = BlockId(0);

    pub fn block(&self, id: BlockId) -> &BasicBlock {
        &self.blocks[id.0]
    }

    pub fn inst(&self, at: InstRef) -> &Inst {
        &self.blocks[at.block.0].insts[at.idx]
    }

    pub fn reg_name(&self, r: Reg) -> &str {
        &self.reg_names[r.0 as usize]
    }

    pub fn num_regs(&self) -> usize {
        self.reg_names.len()
    }

    pub fn block_by_label(&self, label: &str) -> Option<BlockId> {
        self.blocks
            .iter()
            .position(|b| b.label == label)
            .map(BlockId)
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.blocks.len()).map(BlockId)
    }

    /// CFG predecessors per block, deduplicated, in block order.
    pub fn predecessors(&self) -> Vec<Vec<BlockId>> {
        let mut preds = vec![Vec::new(); self.blocks.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            for s in b.successors() {
                if s.0 < preds.len() && !preds[s.0].contains(&BlockId(i)) {
                    preds[s.0].push(BlockId(i));
                }
            }
        }
        preds
    }

    /// Iterate all instructions with their positions.
    pub fn insts(&self) -> impl Iterator<Item = (InstRef, &Inst)> {
        self.blocks.iter().enumerate().flat_map(|(b, bb)| {
            bb.insts
                .iter()
                .enumerate()
                .map(move |(i, inst)| (InstRef::new(BlockId(b), i), inst))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalDef {
    pub name: String,
    pub size: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Module {
    pub globals: Vec<GlobalDef>,
    pub functions: Vec<Function>,
}

impl Module {
    pub fn function(&self, id: FuncId) -> &Function {
        &self.functions[id.0]
    }

    pub fn function_by_name(&self, name: &str) -> Option<FuncId> {
        self.functions
            .iter()
            .position(|f| f.name == name)
            .map(FuncId)
    }

    pub fn global(&self, id: GlobalId) -> &GlobalDef {
        &self.globals[id.0]
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl serde::Serialize for AccessSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.bytes())
    }
}
