//! Interpreter for instrumented mini-IR programs.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alloc::{AddressSpace, AllocError, SpaceConfig};
use crate::checker::{Access, AccessCheck, CheckMode, CheckStats, Checker, FastMiss, ViolationReport};
use crate::instrument::{AccessKind, Instrumentation, Rule, SiteId, SiteStatus};
use crate::ir::{BlockId, Builtin, Callee, FuncId, Function, Inst, Module, Reg, Value};
use crate::shadow::OutOfSpace;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub mode: CheckMode,
    pub halt_on_error: bool,
    pub step_budget: u64,
    pub max_depth: usize,
    /// Record accesses the fast stage let through although invalid.
    pub audit: bool,
    pub space: SpaceConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: CheckMode::TwoStage,
            halt_on_error: true,
            step_budget: 10_000_000,
            max_depth: 256,
            audit: false,
            space: SpaceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "fault", rename_all = "kebab-case")]
pub enum Fault {
    InputExhausted,
    OutOfMemory { size: u64 },
    BadRegion { addr: u64, size: u64 },
    StackOverflow,
    GlobalArenaExhausted,
    StepBudget,
    RecursionLimit,
    NoMain,
    Config { message: String },
}

impl Fault {
    pub fn name(&self) -> &'static str {
        match self {
            Fault::InputExhausted => "input-exhausted",
            Fault::OutOfMemory { .. } => "oom",
            Fault::BadRegion { .. } => "bad-region",
            Fault::StackOverflow => "stack-overflow",
            Fault::GlobalArenaExhausted => "global-arena-exhausted",
            Fault::StepBudget => "step-budget",
            Fault::RecursionLimit => "recursion-limit",
            Fault::NoMain => "no-main",
            Fault::Config { .. } => "config",
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::OutOfMemory { size } => write!(f, "oom size={size}"),
            Fault::BadRegion { addr, size } => write!(f, "bad-region addr={addr:#x} size={size}"),
            Fault::Config { message } => write!(f, "config: {message}"),
            other => f.write_str(other.name()),
        }
    }
}

impl From<OutOfSpace> for Fault {
    fn from(e: OutOfSpace) -> Self {
        Fault::BadRegion {
            addr: e.addr,
            size: e.size,
        }
    }
}

impl From<AllocError> for Fault {
    fn from(e: AllocError) -> Self {
        match e {
            AllocError::OutOfMemory { size } => Fault::OutOfMemory { size },
            AllocError::StackOverflow { .. } | AllocError::NoFrame => Fault::StackOverflow,
            AllocError::GlobalArenaExhausted { .. } => Fault::GlobalArenaExhausted,
            AllocError::BadConfig(message) => Fault::Config { message },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Exit {
    Normal { value: Option<u64> },
    Aborted { report: ViolationReport },
    Fault { fault: Fault },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunResult {
    pub exit: Exit,
    pub reports: Vec<ViolationReport>,
    pub stats: CheckStats,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fast_misses: Vec<FastMiss>,
    /// Dynamic executions per site, indexed by site id.
    #[serde(skip)]
    pub site_hits: Vec<u64>,
}

impl RunResult {
    /// 0 clean, 1 violations, 2 simulator fault.
    pub fn exit_code(&self) -> i32 {
        match self.exit {
            Exit::Fault { .. } => 2,
            _ if !self.reports.is_empty() => 1,
            _ => 0,
        }
    }

    pub fn is_fault(&self) -> bool {
        matches!(self.exit, Exit::Fault { .. })
    }
}

struct Activation {
    fid: FuncId,
    regs: Vec<u64>,
    block: BlockId,
    idx: usize,
    /// Caller register receiving the return value.
    ret_to: Option<Reg>,
}

/// One program execution with private memory.
pub struct Interpreter<'a> {
    module: &'a Module,
    ins: &'a Instrumentation,
    opts: RunOptions,
    site_table: Vec<Vec<Vec<Option<SiteId>>>>,
    space: Option<AddressSpace>,
}

impl<'a> Interpreter<'a> {
    pub fn new(module: &'a Module, ins: &'a Instrumentation, opts: RunOptions) -> Self {
        let site_table = module
            .functions
            .iter()
            .enumerate()
            .map(|(fi, f)| {
                f.blocks
                    .iter()
                    .enumerate()
                    .map(|(bi, b)| {
                        (0..b.insts.len())
                            .map(|i| ins.site_id_at(FuncId(fi), crate::ir::InstRef::new(BlockId(bi), i)))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Interpreter {
            module,
            ins,
            opts,
            site_table,
            space: None,
        }
    }

    /// Memory after the last [`run`](Self::run).
    pub fn space(&self) -> Option<&AddressSpace> {
        self.space.as_ref()
    }

    pub fn run(&mut self, inputs: &[u64]) -> RunResult {
        let mut checker = Checker::new(self.opts.mode, self.opts.halt_on_error, self.opts.space.magic);
        checker.audit = self.opts.audit;
        let mut hits = vec![0u64; self.ins.sites.len()];
        let exit = match AddressSpace::new(self.opts.space) {
            Err(e) => Exit::Fault { fault: e.into() },
            Ok(space) => {
                let mut ex = Exec {
                    module: self.module,
                    ins: self.ins,
                    table: &self.site_table,
                    opts: &self.opts,
                    space,
                    checker: &mut checker,
                    inputs,
                    cursor: 0,
                    globals: Vec::new(),
                    stack: Vec::new(),
                    pending_reinject: HashSet::new(),
                    hits: &mut hits,
                };
                let exit = match ex.execute() {
                    Ok(e) => e,
                    Err(Stop::Fault(f)) => Exit::Fault { fault: f },
                    Err(Stop::Abort(r)) => Exit::Aborted { report: r },
                };
                self.space = Some(ex.space);
                exit
            }
        };
        let mut stats = checker.stats;
        stats.eliminated_unsat = self.ins.eliminated_by(Rule::Unsat).count() as u64;
        stats.eliminated_loop = self.ins.eliminated_by(Rule::Loop).count() as u64;
        stats.eliminated_recurring = self.ins.eliminated_by(Rule::Recurring).count() as u64;
        stats.eliminated_neighbor = self.ins.eliminated_by(Rule::Neighbor).count() as u64;
        RunResult {
            exit,
            reports: checker.reports,
            stats,
            fast_misses: checker.fast_misses,
            site_hits: hits,
        }
    }
}

/// Run `module` under `opts` with the given instrumentation.
pub fn run(module: &Module, ins: &Instrumentation, inputs: &[u64], opts: &RunOptions) -> RunResult {
    Interpreter::new(module, ins, opts.clone()).run(inputs)
}

/// Vanilla baseline: same memory layout, no checks.
pub fn run_nocheck(module: &Module, ins: &Instrumentation, inputs: &[u64], opts: &RunOptions) -> RunResult {
    let opts = RunOptions {
        mode: CheckMode::NoCheck,
        ..opts.clone()
    };
    run(module, ins, inputs, &opts)
}

enum Stop {
    Fault(Fault),
    Abort(ViolationReport),
}

impl From<OutOfSpace> for Stop {
    fn from(e: OutOfSpace) -> Self {
        Stop::Fault(e.into())
    }
}

impl From<AllocError> for Stop {
    fn from(e: AllocError) -> Self {
        Stop::Fault(e.into())
    }
}

struct Exec<'r, 'a> {
    module: &'a Module,
    ins: &'a Instrumentation,
    table: &'r [Vec<Vec<Option<SiteId>>>],
    opts: &'r RunOptions,
    space: AddressSpace,
    checker: &'r mut Checker,
    inputs: &'r [u64],
    cursor: usize,
    globals: Vec<u64>,
    stack: Vec<Activation>,
    /// Store sites flagged in recover mode whose write still has to happen.
    pending_reinject: HashSet<SiteId>,
    hits: &'r mut Vec<u64>,
}

impl Exec<'_, '_> {
    fn execute(&mut self) -> Result<Exit, Stop> {
        for g in &self.module.globals {
            let a = self.space.register_global(g.size)?;
            self.globals.push(a);
        }
        let main = self.module.function_by_name("main").ok_or(Stop::Fault(Fault::NoMain))?;
        if !self.module.function(main).params.is_empty() {
            return Err(Stop::Fault(Fault::NoMain));
        }
        self.push_activation(main, &[], None)?;
        let mut steps = 0u64;
        loop {
            steps += 1;
            if steps > self.opts.step_budget {
                return Err(Stop::Fault(Fault::StepBudget));
            }
            let act = self.stack.last().expect("an activation is running");
            let f = self.module.function(act.fid);
            let (block, idx) = (act.block, act.idx);
            let inst = &f.block(block).insts[idx];
            if let Some(exit) = self.step(f, inst, block, idx)? {
                return Ok(exit);
            }
        }
    }

    fn push_activation(&mut self, fid: FuncId, args: &[u64], ret_to: Option<Reg>) -> Result<(), Stop> {
        if self.stack.len() >= self.opts.max_depth {
            return Err(Stop::Fault(Fault::RecursionLimit));
        }
        let f = self.module.function(fid);
        let mut regs = vec![0u64; f.num_regs()];
        for (p, v) in f.params.iter().zip(args) {
            regs[p.0 as usize] = *v;
        }
        self.space.stack_enter_frame();
        self.stack.push(Activation {
            fid,
            regs,
            block: Function::ENTRY,
            idx: 0,
            ret_to,
        });
        Ok(())
    }

    fn val(&self, v: Value) -> u64 {
        match v {
            Value::Reg(r) => self.stack.last().unwrap().regs[r.0 as usize],
            Value::Const(c) => c,
            Value::Global(g) => self.globals[g.0],
        }
    }

    fn set(&mut self, r: Reg, v: u64) {
        self.stack.last_mut().unwrap().regs[r.0 as usize] = v;
    }

    fn advance(&mut self) {
        self.stack.last_mut().unwrap().idx += 1;
    }

    /// Transfer to `to`, evaluating its leading phis against `from`.
    fn jump(&mut self, f: &Function, from: BlockId, to: BlockId) {
        let insts = &f.block(to).insts;
        let mut vals = Vec::new();
        let mut n = 0;
        for inst in insts {
            let Inst::Phi { dst, incomings } = inst else { break };
            let v = incomings
                .iter()
                .find(|(_, p)| *p == from)
                .map(|(v, _)| self.val(*v))
                .unwrap_or(0);
            vals.push((*dst, v));
            n += 1;
        }
        for (d, v) in vals {
            self.set(d, v);
        }
        let act = self.stack.last_mut().unwrap();
        act.block = to;
        act.idx = n;
    }

    fn site(&self, fid: FuncId, block: BlockId, idx: usize) -> Option<SiteId> {
        self.table[fid.0][block.0][idx]
    }

    /// Fire the check of an active site. `addr`/`loaded` describe the
    /// access at the site's own instruction.
    fn fire(&mut self, id: SiteId, addr: u64, loaded: Option<u64>) -> Result<(), Stop> {
        let site = &self.ins.sites[id];
        if site.status != SiteStatus::Active {
            return Ok(());
        }
        self.hits[id] += 1;
        let access = |k: AccessKind| match k {
            AccessKind::Load => Access::Read,
            AccessKind::Store => Access::Write,
        };
        let checks: Vec<AccessCheck> = if site.merged.is_empty() {
            vec![AccessCheck {
                addr,
                size: site.size,
                access: access(site.kind),
                site: id,
                loaded,
            }]
        } else {
            site.merged
                .iter()
                .map(|c| AccessCheck {
                    addr: addr.wrapping_add(c.delta as u64),
                    size: c.size,
                    access: access(c.kind),
                    site: c.site,
                    loaded: if c.site == id { loaded } else { None },
                })
                .collect()
        };
        for c in &checks {
            self.space.read_bytes(c.addr, c.size.bytes())?;
        }
        let reports = self.checker.check(&self.space, &checks)?;
        if let Some(r) = reports.first() {
            if self.checker.halt_on_error {
                return Err(Stop::Abort(*r));
            }
        }
        for r in &reports {
            if let crate::checker::SiteRef::Check(s) = r.site {
                if r.access == Access::Write {
                    self.pending_reinject.insert(s);
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, f: &Function, inst: &Inst, block: BlockId, idx: usize) -> Result<Option<Exit>, Stop> {
        let fid = self.stack.last().unwrap().fid;
        match inst {
            Inst::Alloca { dst, size } => {
                let a = self.space.stack_alloca(*size)?;
                self.set(*dst, a);
            }
            Inst::Gep { dst, base, indexes } => {
                let mut a = self.val(*base);
                for g in indexes {
                    a = a.wrapping_add(self.val(g.idx).wrapping_mul(g.scale));
                }
                self.set(*dst, a);
            }
            Inst::Load { dst, ptr, size } => {
                let addr = self.val(*ptr);
                let v = self.space.read(addr, *size)?;
                self.checker.stats.dynamic_accesses += 1;
                self.set(*dst, v);
                if let Some(id) = self.site(fid, block, idx) {
                    self.fire(id, addr, Some(v))?;
                }
            }
            Inst::Store { ptr, val, size } => {
                let addr = self.val(*ptr);
                let v = self.val(*val);
                self.space.read_bytes(addr, size.bytes())?;
                self.checker.stats.dynamic_accesses += 1;
                let id = self.site(fid, block, idx);
                if let Some(id) = id {
                    self.fire(id, addr, None)?;
                }
                self.space.write(addr, *size, v)?;
                if let Some(id) = id {
                    if self.pending_reinject.remove(&id) {
                        self.checker.reinject(&mut self.space, addr, size.bytes())?;
                    }
                }
            }
            Inst::Phi { .. } => {}
            Inst::Cmp { dst, op, lhs, rhs } => {
                let v = op.eval(self.val(*lhs), self.val(*rhs)) as u64;
                self.set(*dst, v);
            }
            Inst::Bin { dst, op, lhs, rhs } => {
                let v = op.eval(self.val(*lhs), self.val(*rhs));
                self.set(*dst, v);
            }
            Inst::Br {
                cond,
                then_bb,
                else_bb,
            } => {
                let to = if self.val(*cond) != 0 { *then_bb } else { *else_bb };
                self.jump(f, block, to);
                return Ok(None);
            }
            Inst::Jmp { target } => {
                self.jump(f, block, *target);
                return Ok(None);
            }
            Inst::Call { dst, callee, args } => {
                let argv: Vec<u64> = args.iter().map(|a| self.val(*a)).collect();
                match callee {
                    Callee::Func(g) => {
                        self.advance();
                        self.push_activation(*g, &argv, *dst)?;
                        return Ok(None);
                    }
                    Callee::Builtin(Builtin::Malloc) => {
                        let p = self.space.heap_alloc(argv[0])?;
                        self.set(dst.expect("validated"), p);
                    }
                    Callee::Builtin(Builtin::ReadInput) => {
                        let v = *self
                            .inputs
                            .get(self.cursor)
                            .ok_or(Stop::Fault(Fault::InputExhausted))?;
                        self.cursor += 1;
                        if let Some(d) = dst {
                            self.set(*d, v);
                        }
                    }
                    Callee::Builtin(b) => {
                        let out = self.checker.intercept(&mut self.space, *b, &argv)?;
                        if let Some(r) = out.report {
                            if self.checker.halt_on_error {
                                return Err(Stop::Abort(r));
                            }
                        }
                    }
                }
            }
            Inst::Ret { val } => {
                let v = val.map(|v| self.val(v));
                let act = self.stack.pop().unwrap();
                self.space.stack_leave_frame();
                match self.stack.last() {
                    None => return Ok(Some(Exit::Normal { value: v })),
                    Some(_) => {
                        if let Some(r) = act.ret_to {
                            self.set(r, v.unwrap_or(0));
                        }
                        return Ok(None);
                    }
                }
            }
        }
        self.advance();
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::BugKind;
    use crate::ir::parse_module;

    fn go(src: &str, inputs: &[u64], mode: CheckMode, halt: bool) -> RunResult {
        let m = parse_module(src).unwrap();
        crate::ir::validate(&m).unwrap();
        let ins = Instrumentation::new(&m);
        run(
            &m,
            &ins,
            inputs,
            &RunOptions {
                mode,
                halt_on_error: halt,
                ..Default::default()
            },
        )
    }

    #[test]
    fn arithmetic_and_calls() {
        let src = "fn sq(%x) { e: %y = mul %x, %x \n ret %y }
                   fn main { e: %a = call read_input() \n %b = call sq(%a) \n ret %b }";
        let r = go(src, &[7], CheckMode::TwoStage, true);
        assert_eq!(r.exit, Exit::Normal { value: Some(49) });
        let r = go(src, &[], CheckMode::TwoStage, true);
        assert_eq!(r.exit, Exit::Fault { fault: Fault::InputExhausted });
        assert_eq!(r.exit_code(), 2);
    }

    #[test]
    fn loop_with_phi() {
        let src = "fn main { e: jmp h \n h: %i = phi [0, e], [%i2, h] \n %s = phi [0, e], [%s2, h] \n \
                   %s2 = add %s, %i \n %i2 = add %i, 1 \n %c = cmp lt %i2, 5 \n br %c, h, x \n x: ret %s2 }";
        assert_eq!(go(src, &[], CheckMode::NoCheck, true).exit, Exit::Normal { value: Some(10) });
    }

    #[test]
    fn heap_overflow_detected_in_both_modes() {
        let src = "fn main { e: %p = call malloc(56) \n %q = gep %p, [60 x 1] \n store i8 1, %q \n ret }";
        for mode in [CheckMode::TwoStage, CheckMode::SlowOnly] {
            let r = go(src, &[], mode, true);
            assert_eq!(r.reports.len(), 1);
            assert_eq!(r.reports[0].kind, BugKind::HeapBufferOverflow);
            assert_eq!(r.exit_code(), 1);
        }
        let r = go(src, &[], CheckMode::NoCheck, true);
        assert!(r.reports.is_empty());
        assert_eq!(r.exit_code(), 0);
    }

    #[test]
    fn recursion_cap() {
        let src = "fn f { e: call f() \n ret } fn main { e: call f() \n ret }";
        assert_eq!(go(src, &[], CheckMode::NoCheck, true).exit, Exit::Fault { fault: Fault::RecursionLimit });
    }

    #[test]
    fn step_budget() {
        let m = parse_module("fn main { e: jmp l \n l: jmp l }").unwrap();
        let ins = Instrumentation::new(&m);
        let r = run(
            &m,
            &ins,
            &[],
            &RunOptions {
                step_budget: 1000,
                ..Default::default()
            },
        );
        assert_eq!(r.exit, Exit::Fault { fault: Fault::StepBudget });
    }

    #[test]
    fn recover_mode_two_reports() {
        let src = "fn main { e: %b = alloca 16 \n %p = gep %b, [16 x 1] \n store i32 1, %p \n \
                   store i32 2, %p \n ret }";
        let r = go(src, &[], CheckMode::TwoStage, false);
        assert_eq!(r.reports.len(), 2);
        assert_eq!(r.exit, Exit::Normal { value: None });
        assert_eq!(r.stats.reinjections, 2);
    }
}
