//! Canonical text form. `parse_module(&m.to_string())` reproduces `m`.

use std::fmt::{self, Write};

use super::{Callee, Function, Inst, Module, Value};

struct Printer<'a> {
    module: &'a Module,
    func: &'a Function,
}

impl Printer<'_> {
    fn value(&self, v: Value) -> String {
        match v {
            Value::Reg(r) => format!("%{}", self.func.reg_name(r)),
            Value::Const(c) if c >= 1 << 63 => format!("-{}", c.wrapping_neg()),
            Value::Const(c) => c.to_string(),
            Value::Global(g) => format!("@{}", self.module.global(g).name),
        }
    }

    fn label(&self, b: super::BlockId) -> &str {
        &self.func.block(b).label
    }

    fn inst(&self, inst: &Inst, out: &mut String) -> fmt::Result {
        let reg = |r: super::Reg| format!("%{}", self.func.reg_name(r));
        match inst {
            Inst::Alloca { dst, size } => write!(out, "{} = alloca {size}", reg(*dst)),
            Inst::Gep { dst, base, indexes } => {
                write!(out, "{} = gep {}", reg(*dst), self.value(*base))?;
                for g in indexes {
                    write!(out, ", [{} x {}]", self.value(g.idx), g.scale)?;
                }
                Ok(())
            }
            Inst::Load { dst, ptr, size } => write!(
                out,
                "{} = load {}, {}",
                reg(*dst),
                size.type_name(),
                self.value(*ptr)
            ),
            Inst::Store { ptr, val, size } => write!(
                out,
                "store {} {}, {}",
                size.type_name(),
                self.value(*val),
                self.value(*ptr)
            ),
            Inst::Phi { dst, incomings } => {
                write!(out, "{} = phi ", reg(*dst))?;
                for (i, (v, b)) in incomings.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write!(out, "[{}, {}]", self.value(*v), self.label(*b))?;
                }
                Ok(())
            }
            Inst::Cmp { dst, op, lhs, rhs } => write!(
                out,
                "{} = cmp {} {}, {}",
                reg(*dst),
                op.mnemonic(),
                self.value(*lhs),
                self.value(*rhs)
            ),
            Inst::Bin { dst, op, lhs, rhs } => write!(
                out,
                "{} = {} {}, {}",
                reg(*dst),
                op.mnemonic(),
                self.value(*lhs),
                self.value(*rhs)
            ),
            Inst::Br {
                cond,
                then_bb,
                else_bb,
            } => write!(
                out,
                "br {}, {}, {}",
                self.value(*cond),
                self.label(*then_bb),
                self.label(*else_bb)
            ),
            Inst::Jmp { target } => write!(out, "jmp {}", self.label(*target)),
            Inst::Call { dst, callee, args } => {
                if let Some(d) = dst {
                    write!(out, "{} = ", reg(*d))?;
                }
                let name = match callee {
                    Callee::Builtin(b) => b.name(),
                    Callee::Func(f) => self.module.function(*f).name.as_str(),
                };
                let args: Vec<String> = args.iter().map(|a| self.value(*a)).collect();
                write!(out, "call {name}({})", args.join(", "))
            }
            Inst::Ret { val: None } => write!(out, "ret"),
            Inst::Ret { val: Some(v) } => write!(out, "ret {}", self.value(*v)),
        }
    }
}

impl Module {
    /// Render one instruction of `func` in the text syntax.
    pub fn render_inst(&self, func: &Function, inst: &Inst) -> String {
        let mut s = String::new();
        let _ = Printer { module: self, func }.inst(inst, &mut s);
        s
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.globals {
            writeln!(f, "global @{} {}", g.name, g.size)?;
        }
        for (i, func) in self.functions.iter().enumerate() {
            if i > 0 || !self.globals.is_empty() {
                writeln!(f)?;
            }
            let p = Printer { module: self, func };
            write!(f, "fn {}", func.name)?;
            if !func.params.is_empty() {
                let ps: Vec<String> = func
                    .params
                    .iter()
                    .map(|r| format!("%{}", func.reg_name(*r)))
                    .collect();
                write!(f, "({})", ps.join(", "))?;
            }
            writeln!(f, " {{")?;
            for b in &func.blocks {
                writeln!(f, "{}:", b.label)?;
                for inst in &b.insts {
                    let mut line = String::new();
                    p.inst(inst, &mut line)?;
                    writeln!(f, "  {line}")?;
                }
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse_module;

    #[test]
    fn canonical_form() {
        let src = "global @g 8 fn main { entry: %a = alloca 16 %p = gep %a, [%a x 4], [-1 x 1] \
                   store i32 7, %p %v = load i8, @g br 1, entry, entry }";
        let m = parse_module(src).unwrap();
        let text = m.to_string();
        assert_eq!(
            text,
            "global @g 8\n\nfn main {\nentry:\n  %a = alloca 16\n  %p = gep %a, [%a x 4], [-1 x 1]\n  \
             store i32 7, %p\n  %v = load i8, @g\n  br 1, entry, entry\n}\n"
        );
        assert_eq!(parse_module(&text).unwrap(), m);
    }
}
