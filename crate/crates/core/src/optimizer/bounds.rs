//! Address decomposition and static index bounds.

use crate::ir::{
    BlockId, Builtin, Callee, CmpOp, DefSite, DefUse, DomTree, FuncId, Function, GepIndex, GlobalId, Inst,
    InstRef, IrreducibleCfg, LoopInfo, Module, Reg, Value,
};

/// Per-function analyses shared by the rules.
pub struct FnAnalysis<'a> {
    pub module: &'a Module,
    pub fid: FuncId,
    pub f: &'a Function,
    pub du: DefUse,
    pub dom: DomTree,
    pub loops: Result<LoopInfo, IrreducibleCfg>,
    pub preds: Vec<Vec<BlockId>>,
}

impl<'a> FnAnalysis<'a> {
    pub fn new(module: &'a Module, fid: FuncId) -> Self {
        let f = module.function(fid);
        let dom = DomTree::compute(f);
        let loops = LoopInfo::compute(f, &dom);
        FnAnalysis {
            module,
            fid,
            f,
            du: DefUse::compute(f),
            dom,
            loops,
            preds: f.predecessors(),
        }
    }

    fn def_inst(&self, r: Reg) -> Option<(InstRef, &'a Inst)> {
        match self.du.def(r)? {
            DefSite::Inst(at) => Some((at, self.f.inst(at))),
            DefSite::Param(_) => None,
        }
    }
}

/// What an address is ultimately computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Root {
    Alloca(Reg),
    Global(GlobalId),
    Malloc(Reg),
    /// Any other value: a parameter, a loaded pointer, arithmetic.
    Opaque(Reg),
    Const,
}

/// `root + Σ idx·scale`, flattened through chains of `gep`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AddrExpr {
    pub root: Root,
    pub terms: Vec<GepIndex>,
}

impl AddrExpr {
    /// Split into register terms and the summed constant byte offset.
    pub fn split(&self) -> (Vec<(Reg, u64)>, i64) {
        let mut vars = Vec::new();
        let mut off = 0i64;
        for t in &self.terms {
            match t.idx {
                Value::Const(c) => off = off.wrapping_add((c as i64).wrapping_mul(t.scale as i64)),
                Value::Reg(r) => vars.push((r, t.scale)),
                Value::Global(_) => vars.push((Reg(u32::MAX), t.scale)),
            }
        }
        vars.sort();
        (vars, off)
    }
}

pub fn addr_expr(a: &FnAnalysis, ptr: Value) -> AddrExpr {
    let mut terms = Vec::new();
    let mut cur = ptr;
    let root = loop {
        match cur {
            Value::Global(g) => break Root::Global(g),
            Value::Const(_) => break Root::Const,
            Value::Reg(r) => match a.def_inst(r) {
                Some((_, Inst::Gep { base, indexes, .. })) => {
                    terms.extend(indexes.iter().copied());
                    cur = *base;
                }
                Some((_, Inst::Alloca { .. })) => break Root::Alloca(r),
                Some((
                    _,
                    Inst::Call {
                        callee: Callee::Builtin(Builtin::Malloc),
                        ..
                    },
                )) => break Root::Malloc(r),
                _ => break Root::Opaque(r),
            },
        }
    };
    AddrExpr { root, terms }
}

/// Statically known stack or global object reached by `ptr`, with its size
/// and the gep terms applied to it. Heap and parameter bases are unknown.
pub fn resolve_object(a: &FnAnalysis, ptr: Value) -> Option<(Root, u64, Vec<GepIndex>)> {
    let e = addr_expr(a, ptr);
    let size = match e.root {
        Root::Alloca(r) => match a.def_inst(r)?.1 {
            Inst::Alloca { size, .. } => *size,
            _ => unreachable!(),
        },
        Root::Global(g) => a.module.global(g).size,
        _ => return None,
    };
    Some((e.root, size, e.terms))
}

/// `c` when `cmp_inst` has the shape `r < c` or `c > r` with constant `c`.
fn upper_bound_shape(cmp_inst: &Inst, r: Reg) -> Option<u64> {
    match cmp_inst {
        Inst::Cmp {
            op: CmpOp::Lt,
            lhs: Value::Reg(x),
            rhs: Value::Const(c),
            ..
        }
        | Inst::Cmp {
            op: CmpOp::Gt,
            lhs: Value::Const(c),
            rhs: Value::Reg(x),
            ..
        } if *x == r && *c > 0 => Some(*c),
        _ => None,
    }
}

/// Exclusive upper bound on `r` wherever `m` executes, justified by a
/// branch on `r < c` whose true edge `B -> T` is the only way into `T`
/// and `T` dominates `m`.
pub fn guard_bound(a: &FnAnalysis, r: Reg, m: InstRef) -> Option<u64> {
    let mut best: Option<u64> = None;
    for &u in a.du.users(r) {
        let cmp = a.f.inst(u);
        let Some(c) = upper_bound_shape(cmp, r) else { continue };
        let cond = cmp.def().expect("cmp defines a register");
        for &bu in a.du.users(cond) {
            let Inst::Br {
                cond: Value::Reg(x),
                then_bb,
                else_bb,
            } = a.f.inst(bu)
            else {
                continue;
            };
            if *x != cond || then_bb == else_bb {
                continue;
            }
            if a.preds[then_bb.0] == [bu.block]
                && a.dom.is_reachable(m.block)
                && a.dom.dominates(*then_bb, m.block)
            {
                best = Some(best.map_or(c, |b| b.min(c)));
            }
        }
    }
    best
}

/// Exclusive upper bound on a loop-header phi `r` used by `m`, for a
/// single-level loop whose header is `r`'s block: non-latch incomings must be
/// constants, and each latch incoming `v` must leave the latch through
/// `br (v < c), header, exit` with `m` dominating that compare.
pub fn phi_bound(a: &FnAnalysis, r: Reg, m: InstRef) -> Option<u64> {
    let loops = a.loops.as_ref().ok()?;
    let (phi_at, Inst::Phi { incomings, .. }) = a.def_inst(r)? else {
        return None;
    };
    let lp = loops.innermost_loop(m.block)?;
    if lp.header != phi_at.block || lp.depth != 1 {
        return None;
    }
    let mut ub = 0u64;
    for (v, p) in incomings {
        let b = match v {
            Value::Const(k) => k.checked_add(1)?,
            Value::Reg(vr) if lp.latches.contains(p) => {
                let term_at = InstRef::new(*p, a.f.block(*p).insts.len() - 1);
                let Inst::Br {
                    cond: Value::Reg(c),
                    then_bb,
                    else_bb,
                } = a.f.inst(term_at)
                else {
                    return None;
                };
                if *then_bb != lp.header || *else_bb == lp.header {
                    return None;
                }
                let (cmp_at, cmp) = a.def_inst(*c)?;
                let bound = upper_bound_shape(cmp, *vr)?;
                if !a.dom.dominates_inst(m, cmp_at) {
                    return None;
                }
                bound
            }
            _ => return None,
        };
        ub = ub.max(b);
    }
    Some(ub)
}

/// Exclusive upper bound on `idx` at `m`. `loop_pattern` enables the
/// loop-header phi rule.
pub fn index_bound(a: &FnAnalysis, idx: Value, m: InstRef, loop_pattern: bool) -> Option<u64> {
    match idx {
        Value::Const(k) => k.checked_add(1),
        Value::Global(_) => None,
        Value::Reg(r) => {
            let g = guard_bound(a, r, m);
            let p = if loop_pattern { phi_bound(a, r, m) } else { None };
            match (g, p) {
                (Some(x), Some(y)) => Some(x.min(y)),
                (x, y) => x.or(y),
            }
        }
    }
}

/// Whether `index` provably stays below `size` elements at `m`.
pub fn is_safe_access(a: &FnAnalysis, m: InstRef, index: Value, size: u64, loop_pattern: bool) -> bool {
    index_bound(a, index, m, loop_pattern).is_some_and(|ub| ub <= size)
}

/// Whether every byte the access at `m` can touch lies inside its stack or
/// global object: each gep index needs a bound, and
/// `Σ (bound-1)·scale + access_size ≤ object_size`.
pub fn access_in_bounds(a: &FnAnalysis, m: InstRef, loop_pattern: bool) -> bool {
    let (ptr, size) = match a.f.inst(m) {
        Inst::Load { ptr, size, .. } | Inst::Store { ptr, size, .. } => (*ptr, *size),
        _ => return false,
    };
    let Some((_, obj_size, terms)) = resolve_object(a, ptr) else {
        return false;
    };
    let mut max_off = 0u64;
    for t in terms {
        let Some(ub) = index_bound(a, t.idx, m, loop_pattern) else {
            return false;
        };
        let Some(next) = (ub - 1).checked_mul(t.scale).and_then(|x| max_off.checked_add(x)) else {
            return false;
        };
        max_off = next;
    }
    max_off
        .checked_add(size.bytes())
        .is_some_and(|end| end <= obj_size)
}
