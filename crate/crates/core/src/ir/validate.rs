use std::fmt;

use super::{BlockId, Callee, DefSite, DefUse, DomTree, Function, Inst, InstRef, Module, Value};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    MultipleTerminators,
    MissingTerminator,
    PhiNotAtHead,
    PhiPredMismatch,
    EntryHasPredecessors,
    BadBranchTarget,
    DuplicateDefinition(String),
    UndefinedRegister(String),
    UseNotDominated(String),
    CallArity { callee: String, expected: usize, found: usize },
    CallResult(String),
    BadGlobal,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::MultipleTerminators => write!(f, "multiple terminators"),
            ViolationKind::MissingTerminator => write!(f, "missing terminator"),
            ViolationKind::PhiNotAtHead => write!(f, "phi not at block head"),
            ViolationKind::PhiPredMismatch => write!(f, "phi/pred mismatch"),
            ViolationKind::EntryHasPredecessors => write!(f, "entry block has predecessors"),
            ViolationKind::BadBranchTarget => write!(f, "branch to nonexistent block"),
            ViolationKind::DuplicateDefinition(r) => write!(f, "duplicate definition of %{r}"),
            ViolationKind::UndefinedRegister(r) => write!(f, "undefined register %{r}"),
            ViolationKind::UseNotDominated(r) => {
                write!(f, "use of %{r} not dominated by its definition")
            }
            ViolationKind::CallArity {
                callee,
                expected,
                found,
            } => write!(f, "call to {callee} expects {expected} arguments, found {found}"),
            ViolationKind::CallResult(c) => write!(f, "result of {c} used but it returns nothing"),
            ViolationKind::BadGlobal => write!(f, "reference to nonexistent global"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub function: String,
    pub block: Option<String>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.block {
            Some(b) => write!(f, "fn {} block {}: {}", self.function, b, self.kind),
            None => write!(f, "fn {}: {}", self.function, self.kind),
        }
    }
}

/// Check every structural and SSA invariant of `module`. Never aborts early:
/// all violations found are returned.
pub fn validate(module: &Module) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for f in &module.functions {
        validate_function(module, f, &mut out);
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn validate_function(module: &Module, f: &Function, out: &mut Vec<Violation>) {
    let mut push = |block: Option<BlockId>, kind| {
        out.push(Violation {
            function: f.name.clone(),
            block: block.map(|b| f.block(b).label.clone()),
            kind,
        })
    };
    let nblocks = f.blocks.len();

    let mut targets_ok = true;
    for b in f.block_ids() {
        let insts = &f.block(b).insts;
        let terms = insts.iter().filter(|i| i.is_terminator()).count();
        if terms > 1 {
            push(Some(b), ViolationKind::MultipleTerminators);
        } else if insts.last().is_none_or(|i| !i.is_terminator()) {
            push(Some(b), ViolationKind::MissingTerminator);
        }
        let mut seen_non_phi = false;
        for inst in insts {
            match inst {
                Inst::Phi { .. } if seen_non_phi => push(Some(b), ViolationKind::PhiNotAtHead),
                Inst::Phi { .. } => {}
                _ => seen_non_phi = true,
            }
            for s in inst.successors() {
                if s.0 >= nblocks {
                    targets_ok = false;
                    push(Some(b), ViolationKind::BadBranchTarget);
                }
            }
            for v in inst.operands() {
                if let Value::Global(g) = v {
                    if g.0 >= module.globals.len() {
                        push(Some(b), ViolationKind::BadGlobal);
                    }
                }
            }
            if let Inst::Call { dst, callee, args } = inst {
                let (name, arity, returns) = match callee {
                    Callee::Builtin(bi) => (bi.name().to_string(), bi.arity(), bi.returns_value()),
                    Callee::Func(fid) => match module.functions.get(fid.0) {
                        Some(g) => (g.name.clone(), g.params.len(), true),
                        None => (format!("#{}", fid.0), args.len(), true),
                    },
                };
                if arity != args.len() {
                    push(
                        Some(b),
                        ViolationKind::CallArity {
                            callee: name.clone(),
                            expected: arity,
                            found: args.len(),
                        },
                    );
                }
                if dst.is_some() && !returns {
                    push(Some(b), ViolationKind::CallResult(name));
                }
            }
        }
    }
    if !targets_ok {
        // CFG-based checks need valid edges.
        return;
    }

    let preds = f.predecessors();
    if !preds[0].is_empty() {
        push(Some(Function::ENTRY), ViolationKind::EntryHasPredecessors);
    }
    for b in f.block_ids() {
        for inst in &f.block(b).insts {
            if let Inst::Phi { incomings, .. } = inst {
                let mut labels: Vec<BlockId> = incomings.iter().map(|(_, p)| *p).collect();
                labels.sort();
                let dedup_len = {
                    let mut l = labels.clone();
                    l.dedup();
                    l.len()
                };
                let mut expected = preds[b.0].clone();
                expected.sort();
                if dedup_len != labels.len() || labels != expected {
                    push(Some(b), ViolationKind::PhiPredMismatch);
                }
            }
        }
    }

    // SSA: single definition, definitions dominate uses.
    let mut def_count = vec![0usize; f.num_regs()];
    for p in &f.params {
        def_count[p.0 as usize] += 1;
    }
    for (_, inst) in f.insts() {
        if let Some(d) = inst.def() {
            def_count[d.0 as usize] += 1;
        }
    }
    for (i, c) in def_count.iter().enumerate() {
        let name = f.reg_names[i].clone();
        if *c > 1 {
            push(None, ViolationKind::DuplicateDefinition(name));
        } else if *c == 0 {
            push(None, ViolationKind::UndefinedRegister(name));
        }
    }
    let du = DefUse::compute(f);
    let dom = DomTree::compute(f);
    for (at, inst) in f.insts() {
        if !dom.is_reachable(at.block) {
            continue;
        }
        let uses: Vec<(Value, InstRef)> = match inst {
            // A phi operand is used at the end of its predecessor.
            Inst::Phi { incomings, .. } => incomings
                .iter()
                .map(|(v, p)| (*v, InstRef::new(*p, f.block(*p).insts.len())))
                .collect(),
            _ => inst.operands().into_iter().map(|v| (v, at)).collect(),
        };
        for (v, use_at) in uses {
            let Some(r) = v.as_reg() else { continue };
            let ok = match du.def(r) {
                None => continue,
                Some(DefSite::Param(_)) => true,
                Some(DefSite::Inst(def_at)) => dom.strictly_dominates_inst(def_at, use_at),
            };
            if !ok {
                push(
                    Some(at.block),
                    ViolationKind::UseNotDominated(f.reg_name(r).to_string()),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn kinds(src: &str) -> Vec<ViolationKind> {
        match validate(&parse_module(src).unwrap()) {
            Ok(()) => vec![],
            Err(v) => v.into_iter().map(|v| v.kind).collect(),
        }
    }

    #[test]
    fn two_terminators() {
        assert_eq!(
            kinds("fn main { e: ret ret }"),
            vec![ViolationKind::MultipleTerminators]
        );
    }

    #[test]
    fn phi_pred_mismatch() {
        let k = kinds("fn main { e: jmp b \n o: jmp b \n b: %x = phi [1, e] \n ret }");
        assert!(k.contains(&ViolationKind::PhiPredMismatch));
        assert_eq!(ViolationKind::PhiPredMismatch.to_string(), "phi/pred mismatch");
    }

    #[test]
    fn use_before_definition() {
        let k = kinds("fn main { e: %y = add %x, 1 \n %x = add 1, 1 \n ret }");
        assert_eq!(k, vec![ViolationKind::UseNotDominated("x".into())]);
    }

    #[test]
    fn phi_not_at_head_and_missing_terminator() {
        let k = kinds("fn main { e: jmp b \n b: %a = add 1, 1 \n %x = phi [1, e] }");
        assert!(k.contains(&ViolationKind::PhiNotAtHead));
        assert!(k.contains(&ViolationKind::MissingTerminator));
    }

    #[test]
    fn call_arity_and_result() {
        let k = kinds("fn main { e: %p = call free(1) \n call malloc() \n ret }");
        assert!(k.contains(&ViolationKind::CallResult("free".into())));
        assert!(k.iter().any(|v| matches!(v, ViolationKind::CallArity { .. })));
    }

    #[test]
    fn entry_with_predecessor() {
        let k = kinds("fn main { e: jmp e }");
        assert!(k.contains(&ViolationKind::EntryHasPredecessors));
    }

    #[test]
    fn loop_phi_ok() {
        let src = "fn main { e: jmp h \n h: %j = phi [0, e], [%j2, h] \n %j2 = add %j, 1 \n \
                   %c = cmp lt %j2, 3 \n br %c, h, x \n x: ret }";
        assert_eq!(kinds(src), vec![]);
    }
}
