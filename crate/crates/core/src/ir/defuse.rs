use super::{Function, InstRef, Reg};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefSite {
    Param(usize),
    Inst(InstRef),
}

/// Definition site and users of every register in a function.
#[derive(Clone, Debug)]
pub struct DefUse {
    defs: Vec<Option<DefSite>>,
    users: Vec<Vec<InstRef>>,
}

impl DefUse {
    pub fn compute(f: &Function) -> Self {
        let n = f.num_regs();
        let mut defs = vec![None; n];
        let mut users = vec![Vec::new(); n];
        for (i, p) in f.params.iter().enumerate() {
            defs[p.0 as usize] = Some(DefSite::Param(i));
        }
        for (at, inst) in f.insts() {
            if let Some(d) = inst.def() {
                if defs[d.0 as usize].is_none() {
                    defs[d.0 as usize] = Some(DefSite::Inst(at));
                }
            }
            for v in inst.operands() {
                if let Some(r) = v.as_reg() {
                    let u = &mut users[r.0 as usize];
                    if u.last() != Some(&at) {
                        u.push(at);
                    }
                }
            }
        }
        DefUse { defs, users }
    }

    pub fn def(&self, r: Reg) -> Option<DefSite> {
        self.defs.get(r.0 as usize).copied().flatten()
    }

    pub fn def_inst(&self, r: Reg) -> Option<InstRef> {
        match self.def(r) {
            Some(DefSite::Inst(at)) => Some(at),
            _ => None,
        }
    }

    pub fn users(&self, r: Reg) -> &[InstRef] {
        self.users.get(r.0 as usize).map(Vec::as_slice).unwrap_or(&[])
    }
}
