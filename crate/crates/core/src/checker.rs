//! The two-stage check, library interceptors and violation reports.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alloc::{AddressSpace, FreeError, MagicConfig, Region};
use crate::instrument::SiteId;
use crate::ir::{AccessSize, Builtin};
use crate::shadow::{OutOfSpace, PoisonKind, Verdict};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckMode {
    #[default]
    TwoStage,
    SlowOnly,
    NoCheck,
}

impl CheckMode {
    pub const ALL: [CheckMode; 3] = [CheckMode::TwoStage, CheckMode::SlowOnly, CheckMode::NoCheck];

    pub fn name(self) -> &'static str {
        match self {
            CheckMode::TwoStage => "two-stage",
            CheckMode::SlowOnly => "slow-only",
            CheckMode::NoCheck => "nocheck",
        }
    }
}

impl FromStr for CheckMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CheckMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected two-stage, slow-only or nocheck)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BugKind {
    HeapBufferOverflow,
    HeapUseAfterFree,
    DoubleFree,
    InvalidFree,
    StackBufferOverflow,
    GlobalBufferOverflow,
    BadRegion,
}

impl BugKind {
    pub const ALL: [BugKind; 7] = [
        BugKind::HeapBufferOverflow,
        BugKind::HeapUseAfterFree,
        BugKind::DoubleFree,
        BugKind::InvalidFree,
        BugKind::StackBufferOverflow,
        BugKind::GlobalBufferOverflow,
        BugKind::BadRegion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BugKind::HeapBufferOverflow => "heap-buffer-overflow",
            BugKind::HeapUseAfterFree => "heap-use-after-free",
            BugKind::DoubleFree => "double-free",
            BugKind::InvalidFree => "invalid-free",
            BugKind::StackBufferOverflow => "stack-buffer-overflow",
            BugKind::GlobalBufferOverflow => "global-buffer-overflow",
            BugKind::BadRegion => "bad-region",
        }
    }
}

impl FromStr for BugKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BugKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown violation kind `{s}`"))
    }
}

impl fmt::Display for BugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
}

impl Access {
    pub fn letter(self) -> char {
        match self {
            Access::Read => 'r',
            Access::Write => 'w',
        }
    }
}

/// What raised a report: an instrumented check site or an interceptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteRef {
    Check(SiteId),
    Interceptor(&'static str),
}

impl fmt::Display for SiteRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteRef::Check(id) => write!(f, "{id}"),
            SiteRef::Interceptor(name) => f.write_str(name),
        }
    }
}

impl Serialize for SiteRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SiteRef::Check(id) => s.serialize_u64(*id as u64),
            SiteRef::Interceptor(name) => s.serialize_str(name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ViolationReport {
    pub kind: BugKind,
    pub fault_addr: u64,
    pub access: Access,
    pub size: u64,
    pub site: SiteRef,
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "VIOLATION kind={} addr={:#x} access={} size={} site={}",
            self.kind,
            self.fault_addr,
            self.access.letter(),
            self.size,
            self.site
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CheckStats {
    /// Check evaluations at instrumented sites, one per covered access.
    pub checks_executed: u64,
    pub fast_checks_executed: u64,
    pub slow_checks_executed: u64,
    pub shadow_loads: u64,
    pub interceptor_checks: u64,
    pub interceptor_shadow_loads: u64,
    pub violations: u64,
    pub reinjections: u64,
    /// Loads and stores executed, checked or not.
    pub dynamic_accesses: u64,
    pub eliminated_unsat: u64,
    pub eliminated_loop: u64,
    pub eliminated_recurring: u64,
    pub eliminated_neighbor: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FastMissClass {
    /// Some accessed bytes are addressable, so the word cannot equal magic.
    Straddle,
    /// Fully unaddressable bytes whose magic was overwritten.
    ProgramOverwrite,
}

/// An invalid access the fast stage let through; recorded only in audit mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FastMiss {
    pub class: FastMissClass,
    pub report: ViolationReport,
}

/// `value == MAGIC_VALUE_N`, bit for bit.
pub fn fast_check(value: u64, size: AccessSize, magic: MagicConfig) -> bool {
    value == magic.value(size)
}

/// Map a poison kind and the region holding the faulting byte to a report kind.
pub fn classify(space: &AddressSpace, kind: PoisonKind, fault_addr: u64) -> BugKind {
    match kind {
        PoisonKind::HeapRedzone => BugKind::HeapBufferOverflow,
        PoisonKind::HeapFreed => BugKind::HeapUseAfterFree,
        PoisonKind::StackRedzone => BugKind::StackBufferOverflow,
        PoisonKind::GlobalRedzone => BugKind::GlobalBufferOverflow,
        PoisonKind::Bad => match space.region_of(fault_addr) {
            Region::Heap => BugKind::HeapBufferOverflow,
            Region::Stack => BugKind::StackBufferOverflow,
            Region::Global => BugKind::GlobalBufferOverflow,
            Region::Null | Region::Outside => BugKind::BadRegion,
        },
    }
}

/// One access to check: where, how wide, and, for loads, the value produced.
#[derive(Clone, Copy, Debug)]
pub struct AccessCheck {
    pub addr: u64,
    pub size: AccessSize,
    pub access: Access,
    pub site: SiteId,
    pub loaded: Option<u64>,
}

/// Result of an interceptor call.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Intercepted {
    pub report: Option<ViolationReport>,
}

#[derive(Clone, Debug)]
pub struct Checker {
    pub mode: CheckMode,
    pub halt_on_error: bool,
    pub magic: MagicConfig,
    pub wchar_size: u64,
    pub audit: bool,
    pub stats: CheckStats,
    pub reports: Vec<ViolationReport>,
    pub fast_misses: Vec<FastMiss>,
}

impl Checker {
    pub fn new(mode: CheckMode, halt_on_error: bool, magic: MagicConfig) -> Self {
        Checker {
            mode,
            halt_on_error,
            magic,
            wchar_size: 4,
            audit: false,
            stats: CheckStats::default(),
            reports: Vec::new(),
            fast_misses: Vec::new(),
        }
    }

    fn record(&mut self, r: ViolationReport) -> ViolationReport {
        self.stats.violations += 1;
        self.reports.push(r);
        r
    }

    /// Slow stage: the native shadow check, behind a call boundary.
    #[inline(never)]
    fn slow_check(&mut self, space: &AddressSpace, addr: u64, size: AccessSize) -> Result<(Verdict, u32), OutOfSpace> {
        self.stats.slow_checks_executed += 1;
        space.shadow().check_access_slow_counted(addr, size.bytes())
    }

    fn report_for(&self, space: &AddressSpace, c: &AccessCheck, v: Verdict) -> Option<ViolationReport> {
        match v {
            Verdict::Valid => None,
            Verdict::Invalid { kind, fault_addr } => Some(ViolationReport {
                kind: classify(space, kind, fault_addr),
                fault_addr,
                access: c.access,
                size: c.size.bytes(),
                site: SiteRef::Check(c.site),
            }),
        }
    }

    /// Evaluate the checks of one site execution. A plain site passes one
    /// access; a merged site passes all its constituents, which share one
    /// shadow load. In halt mode evaluation stops at the first violation.
    pub fn check(&mut self, space: &AddressSpace, accesses: &[AccessCheck]) -> Result<Vec<ViolationReport>, OutOfSpace> {
        let mut found = Vec::new();
        if self.mode == CheckMode::NoCheck {
            return Ok(found);
        }
        let mut shadow_loaded = 0u32;
        for c in accesses {
            self.stats.checks_executed += 1;
            let verdict = match self.mode {
                CheckMode::TwoStage => {
                    self.stats.fast_checks_executed += 1;
                    let value = match c.loaded {
                        Some(v) => v,
                        None => space.read(c.addr, c.size)?,
                    };
                    if fast_check(value, c.size, self.magic) {
                        let (v, loads) = self.slow_check(space, c.addr, c.size)?;
                        shadow_loaded = shadow_loaded.max(loads);
                        v
                    } else {
                        if self.audit {
                            self.audit_miss(space, c)?;
                        }
                        Verdict::Valid
                    }
                }
                _ => {
                    let (v, loads) = self.slow_check(space, c.addr, c.size)?;
                    shadow_loaded = shadow_loaded.max(loads);
                    v
                }
            };
            if let Some(r) = self.report_for(space, c, verdict) {
                found.push(self.record(r));
                if self.halt_on_error {
                    break;
                }
            }
        }
        self.stats.shadow_loads += shadow_loaded as u64;
        Ok(found)
    }

    fn audit_miss(&mut self, space: &AddressSpace, c: &AccessCheck) -> Result<(), OutOfSpace> {
        let v = space.shadow().check_access_slow(c.addr, c.size.bytes())?;
        if let Some(report) = self.report_for(space, c, v) {
            let sh = space.shadow();
            let mut any_ok = false;
            for a in c.addr..c.addr + c.size.bytes() {
                any_ok |= sh.is_addressable(a)?;
            }
            let class = if any_ok {
                FastMissClass::Straddle
            } else {
                FastMissClass::ProgramOverwrite
            };
            self.fast_misses.push(FastMiss { class, report });
        }
        Ok(())
    }

    /// Recover mode: after a flagged store has been performed, put the magic
    /// back into whatever unaddressable bytes it overwrote.
    pub fn reinject(&mut self, space: &mut AddressSpace, addr: u64, size: u64) -> Result<(), OutOfSpace> {
        if space.refill_unaddressable(addr, size)? > 0 {
            self.stats.reinjections += 1;
        }
        Ok(())
    }

    fn check_range(
        &mut self,
        space: &AddressSpace,
        name: &'static str,
        addr: u64,
        size: u64,
        access: Access,
    ) -> Result<Option<ViolationReport>, OutOfSpace> {
        self.stats.interceptor_checks += 1;
        let sh = space.shadow();
        if size > 0 {
            self.stats.interceptor_shadow_loads += ((addr + size - 1) >> 3) - (addr >> 3) + 1;
        }
        Ok(sh.region_is_poisoned(addr, size)?.map(|bad| ViolationReport {
            kind: classify(space, sh.poison_kind_at(bad), bad),
            fault_addr: bad,
            access,
            size,
            site: SiteRef::Interceptor(name),
        }))
    }

    /// Byte length of the zero-terminated string of `elem`-byte units at
    /// `addr`, terminator included.
    fn terminated_len(space: &AddressSpace, addr: u64, elem: u64) -> Result<u64, OutOfSpace> {
        let mut n = 0;
        loop {
            let unit = space.read_bytes(addr.wrapping_add(n), elem)?;
            n += elem;
            if unit.iter().all(|b| *b == 0) {
                return Ok(n);
            }
        }
    }

    /// Run a library function under the interceptor. Sources are checked
    /// before destinations and before any byte moves. In halt mode a flagged
    /// call has no effect; in recover mode the effect happens and the magic
    /// of the overwritten unaddressable bytes is restored.
    pub fn intercept(&mut self, space: &mut AddressSpace, callee: Builtin, args: &[u64]) -> Result<Intercepted, OutOfSpace> {
        let checking = self.mode != CheckMode::NoCheck;
        let name = callee.name();
        // (addr, len) ranges read and written.
        type Range = Option<(u64, u64)>;
        let (src, dst): (Range, Range) = match callee {
            Builtin::Memset => (None, Some((args[0], args[2]))),
            Builtin::Memcpy => (Some((args[1], args[2])), Some((args[0], args[2]))),
            Builtin::Strcpy | Builtin::Wcscpy => {
                let elem = if callee == Builtin::Strcpy { 1 } else { self.wchar_size };
                let n = Self::terminated_len(space, args[1], elem)?;
                (Some((args[1], n)), Some((args[0], n)))
            }
            Builtin::Free => {
                return Ok(match space.heap_free(args[0]) {
                    Ok(()) => Intercepted::default(),
                    Err(_) if !checking => Intercepted::default(),
                    Err(e) => {
                        self.stats.interceptor_checks += 1;
                        let (kind, addr) = match e {
                            FreeError::DoubleFree { addr } => (BugKind::DoubleFree, addr),
                            FreeError::InvalidFree { addr } => (BugKind::InvalidFree, addr),
                        };
                        let r = self.record(ViolationReport {
                            kind,
                            fault_addr: addr,
                            access: Access::Write,
                            size: 0,
                            site: SiteRef::Interceptor(name),
                        });
                        Intercepted { report: Some(r) }
                    }
                });
            }
            Builtin::Malloc | Builtin::ReadInput => unreachable!("{name} is not intercepted"),
        };

        let mut report = None;
        if checking {
            if let Some((a, n)) = src {
                report = self.check_range(space, name, a, n, Access::Read)?;
            }
            if report.is_none() {
                if let Some((a, n)) = dst {
                    report = self.check_range(space, name, a, n, Access::Write)?;
                }
            }
            if let Some(r) = report {
                self.record(r);
                if self.halt_on_error {
                    return Ok(Intercepted { report });
                }
            }
        }

        let (d, n) = dst.expect("every remaining interceptor writes");
        match callee {
            Builtin::Memset => space.fill(d, n, args[1] as u8)?,
            _ => {
                let bytes = space.read_bytes(src.unwrap().0, n)?.to_vec();
                space.write_bytes(d, &bytes)?;
            }
        }
        if report.is_some() {
            self.reinject(space, d, n)?;
        }
        Ok(Intercepted { report })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::SpaceConfig;

    fn space() -> AddressSpace {
        AddressSpace::new(SpaceConfig {
            space_size: 1 << 16,
            global_arena: 4096,
            stack_arena: 8192,
            ..Default::default()
        })
        .unwrap()
    }

    fn acc(addr: u64, size: AccessSize, access: Access, loaded: Option<u64>) -> AccessCheck {
        AccessCheck {
            addr,
            size,
            access,
            site: 0,
            loaded,
        }
    }

    #[test]
    fn fast_check_examples() {
        let m = MagicConfig::default();
        assert!(fast_check(0x8989_8989, AccessSize::B4, m));
        assert!(!fast_check(0, AccessSize::B8, m));
        assert!(!fast_check(0x0089_8989, AccessSize::B4, m));
    }

    #[test]
    fn store_paths() {
        let mut s = space();
        let p = s.heap_alloc(16).unwrap();
        let mut c = Checker::new(CheckMode::TwoStage, true, MagicConfig::default());
        assert!(c.check(&s, &[acc(p, AccessSize::B4, Access::Write, None)]).unwrap().is_empty());
        assert_eq!(c.stats.shadow_loads, 0);
        let r = c
            .check(&s, &[acc(p + 16, AccessSize::B4, Access::Write, None)])
            .unwrap()
            .remove(0);
        assert_eq!(r.kind, BugKind::HeapBufferOverflow);
        assert_eq!(r.fault_addr, p + 16);
        s.write(p + 8, AccessSize::B8, u64::MAX / 255 * 0x89).unwrap();
        assert!(c.check(&s, &[acc(p + 8, AccessSize::B8, Access::Write, None)]).unwrap().is_empty());
        assert_eq!(c.stats.slow_checks_executed, 2);
        assert_eq!(c.stats.fast_checks_executed, 3);
    }

    #[test]
    fn load_of_freed_slot() {
        let mut s = space();
        let p = s.heap_alloc(16).unwrap();
        s.heap_free(p).unwrap();
        let v = s.read(p, AccessSize::B8).unwrap();
        let mut c = Checker::new(CheckMode::TwoStage, true, MagicConfig::default());
        let r = c.check(&s, &[acc(p, AccessSize::B8, Access::Read, Some(v))]).unwrap();
        assert_eq!(r[0].kind, BugKind::HeapUseAfterFree);
    }

    #[test]
    fn classify_mapping() {
        let s = space();
        assert_eq!(classify(&s, PoisonKind::HeapFreed, 0), BugKind::HeapUseAfterFree);
        assert_eq!(classify(&s, PoisonKind::StackRedzone, 0), BugKind::StackBufferOverflow);
        assert_eq!(classify(&s, PoisonKind::GlobalRedzone, 0), BugKind::GlobalBufferOverflow);
        assert_eq!(classify(&s, PoisonKind::Bad, 16), BugKind::BadRegion);
    }

    #[test]
    fn straddle_missed_by_fast_stage() {
        let mut s = space();
        let p = s.heap_alloc(5).unwrap();
        let v = s.read(p + 3, AccessSize::B4).unwrap();
        let mut two = Checker::new(CheckMode::TwoStage, true, MagicConfig::default());
        two.audit = true;
        let mut slow = Checker::new(CheckMode::SlowOnly, true, MagicConfig::default());
        let a = acc(p + 3, AccessSize::B4, Access::Read, Some(v));
        assert!(two.check(&s, &[a]).unwrap().is_empty());
        assert_eq!(slow.check(&s, &[a]).unwrap().len(), 1);
        assert_eq!(two.fast_misses[0].class, FastMissClass::Straddle);
    }

    #[test]
    fn wcscpy_short_destination() {
        let mut s = space();
        let src = s.heap_alloc(16).unwrap();
        for i in 0..3u64 {
            s.write(src + 4 * i, AccessSize::B4, 0x41 + i).unwrap();
        }
        s.write(src + 12, AccessSize::B4, 0).unwrap();
        let dst = s.heap_alloc(12).unwrap();
        let mut c = Checker::new(CheckMode::TwoStage, true, MagicConfig::default());
        let r = c.intercept(&mut s, Builtin::Wcscpy, &[dst, src]).unwrap().report.unwrap();
        assert_eq!(r.kind, BugKind::HeapBufferOverflow);
        assert_eq!(r.fault_addr, dst + 16 - 4);
        assert_eq!(r.access, Access::Write);
        assert_eq!(s.read(dst, AccessSize::B4).unwrap(), 0);
    }

    #[test]
    fn strcpy_unterminated_source() {
        let mut s = space();
        let src = s.heap_alloc(8).unwrap();
        s.fill(src, 8, b'a').unwrap();
        let dst = s.heap_alloc(64).unwrap();
        let mut c = Checker::new(CheckMode::TwoStage, true, MagicConfig::default());
        let r = c.intercept(&mut s, Builtin::Strcpy, &[dst, src]).unwrap().report.unwrap();
        assert_eq!((r.kind, r.access, r.fault_addr), (BugKind::HeapBufferOverflow, Access::Read, src + 8));
    }

    #[test]
    fn recover_mode_reinjects() {
        let mut s = space();
        let p = s.heap_alloc(8).unwrap();
        let mut c = Checker::new(CheckMode::TwoStage, false, MagicConfig::default());
        let r = c.intercept(&mut s, Builtin::Memset, &[p, 0, 12]).unwrap();
        assert!(r.report.is_some());
        assert_eq!(s.read(p, AccessSize::B8).unwrap(), 0);
        assert_eq!(s.read_bytes(p + 8, 4).unwrap(), &[0x89; 4]);
        assert_eq!(c.stats.reinjections, 1);
    }

    #[test]
    fn free_reports() {
        let mut s = space();
        let p = s.heap_alloc(8).unwrap();
        let mut c = Checker::new(CheckMode::SlowOnly, false, MagicConfig::default());
        assert_eq!(c.intercept(&mut s, Builtin::Free, &[p]).unwrap().report, None);
        let r = c.intercept(&mut s, Builtin::Free, &[p]).unwrap().report.unwrap();
        assert_eq!(r.kind, BugKind::DoubleFree);
        assert_eq!(r.to_string(), format!("VIOLATION kind=double-free addr={p:#x} access=w size=0 site=free"));
        let mut n = Checker::new(CheckMode::NoCheck, false, MagicConfig::default());
        assert_eq!(n.intercept(&mut s, Builtin::Free, &[p]).unwrap().report, None);
    }
}
