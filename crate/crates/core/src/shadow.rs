//! Shadow memory: one signed byte per 8-byte granule of application space.
//!
//! Encoding of a shadow byte `k`:
//! * `0` – all 8 bytes addressable
//! * `1..=7` – only the first `k` bytes addressable
//! * negative – nothing addressable; the value names a [`PoisonKind`]
//!
//! Positive values of 8 or more never appear in shadow written by this crate;
//! if one is read it is treated as "first k bytes addressable", which makes
//! the whole granule addressable.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

pub const GRANULE: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoisonKind {
    HeapRedzone,
    HeapFreed,
    StackRedzone,
    GlobalRedzone,
    Bad,
}

impl PoisonKind {
    pub const ALL: [PoisonKind; 5] = [
        PoisonKind::HeapRedzone,
        PoisonKind::HeapFreed,
        PoisonKind::StackRedzone,
        PoisonKind::GlobalRedzone,
        PoisonKind::Bad,
    ];

    pub fn code(self) -> i8 {
        (match self {
            PoisonKind::HeapRedzone => 0xfa_u8,
            PoisonKind::HeapFreed => 0xfd,
            PoisonKind::StackRedzone => 0xf1,
            PoisonKind::GlobalRedzone => 0xf9,
            PoisonKind::Bad => 0xfe,
        }) as i8
    }

    pub fn from_code(code: i8) -> Option<Self> {
        PoisonKind::ALL.into_iter().find(|k| k.code() == code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid { kind: PoisonKind, fault_addr: u64 },
}

impl Verdict {
    pub fn is_valid(self) -> bool {
        self == Verdict::Valid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("bad-region: [{addr:#x}, +{size}) lies outside the simulated space")]
pub struct OutOfSpace {
    pub addr: u64,
    pub size: u64,
}

/// Number of leading addressable bytes described by shadow byte `k`.
pub fn addressable_prefix(k: i8) -> u64 {
    match k {
        0 => GRANULE,
        k if k > 0 => (k as u64).min(GRANULE),
        _ => 0,
    }
}

/// Shadow byte that encodes an addressable prefix of `prefix` bytes, or
/// `code` if nothing is addressable.
fn encode_prefix(prefix: u64, code: i8) -> i8 {
    match prefix {
        0 => code,
        p if p >= GRANULE => 0,
        p => p as i8,
    }
}

#[derive(Clone, Debug)]
pub struct ShadowMemory {
    bytes: Vec<i8>,
    offset: u64,
    app_size: u64,
}

impl ShadowMemory {
    /// Shadow for an application space of `app_size` bytes with offset 0.
    pub fn new(app_size: u64) -> Self {
        Self::with_offset(app_size, 0)
    }

    pub fn with_offset(app_size: u64, offset: u64) -> Self {
        let len = offset + app_size.div_ceil(GRANULE);
        ShadowMemory {
            bytes: vec![0; len as usize],
            offset,
            app_size,
        }
    }

    pub fn app_size(&self) -> u64 {
        self.app_size
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn check_range(&self, addr: u64, size: u64) -> Result<(), OutOfSpace> {
        match addr.checked_add(size) {
            Some(end) if end <= self.app_size => Ok(()),
            _ => Err(OutOfSpace { addr, size }),
        }
    }

    pub fn shadow_index(&self, addr: u64) -> Result<usize, OutOfSpace> {
        if addr >= self.app_size {
            return Err(OutOfSpace { addr, size: 1 });
        }
        Ok(((addr >> 3) + self.offset) as usize)
    }

    /// Shadow byte of the granule containing `addr`.
    pub fn get(&self, addr: u64) -> Result<i8, OutOfSpace> {
        Ok(self.bytes[self.shadow_index(addr)?])
    }

    pub fn set(&mut self, addr: u64, value: i8) -> Result<(), OutOfSpace> {
        let i = self.shadow_index(addr)?;
        self.bytes[i] = value;
        Ok(())
    }

    /// Byte-level meaning of the encoding.
    pub fn is_addressable(&self, addr: u64) -> Result<bool, OutOfSpace> {
        Ok(addr & 7 < addressable_prefix(self.get(addr)?))
    }

    /// Mark `[addr, addr+size)` unaddressable with `kind`.
    ///
    /// Granules fully covered get the kind's code. A granule whose tail is
    /// covered keeps its addressable head as a prefix length. A range that
    /// would punch a hole in the middle of an addressable prefix cannot be
    /// encoded and leaves that granule unchanged.
    pub fn poison_region(&mut self, addr: u64, size: u64, kind: PoisonKind) -> Result<(), OutOfSpace> {
        self.check_range(addr, size)?;
        let end = addr + size;
        let mut g = addr & !7;
        while g < end {
            let s = addr.max(g) - g;
            let e = end.min(g + GRANULE) - g;
            let i = self.shadow_index(g)?;
            let p = addressable_prefix(self.bytes[i]);
            if e == GRANULE || e >= p {
                let new = if s == 0 && e == GRANULE { 0 } else { p.min(s) };
                self.bytes[i] = encode_prefix(new, kind.code());
            }
            g += GRANULE;
        }
        Ok(())
    }

    /// Mark `[addr, addr+size)` addressable. A trailing partial granule of
    /// `r` bytes gets `k = r`.
    pub fn unpoison_region(&mut self, addr: u64, size: u64) -> Result<(), OutOfSpace> {
        self.check_range(addr, size)?;
        let end = addr + size;
        let mut g = addr & !7;
        while g < end {
            let s = addr.max(g) - g;
            let e = end.min(g + GRANULE) - g;
            let i = self.shadow_index(g)?;
            let p = addressable_prefix(self.bytes[i]);
            if s <= p {
                let new = p.max(e);
                if new > 0 {
                    self.bytes[i] = encode_prefix(new, 0);
                }
            }
            g += GRANULE;
        }
        Ok(())
    }

    /// Poison kind to blame for the unaddressable byte at `addr`. A byte past
    /// a partial prefix takes the kind of the following granule when that one
    /// is poisoned, since it is the redzone the object runs into.
    pub fn poison_kind_at(&self, addr: u64) -> PoisonKind {
        let Ok(k) = self.get(addr) else {
            return PoisonKind::Bad;
        };
        if k < 0 {
            return PoisonKind::from_code(k).unwrap_or(PoisonKind::Bad);
        }
        match self.get((addr & !7) + GRANULE) {
            Ok(next) if next < 0 => PoisonKind::from_code(next).unwrap_or(PoisonKind::Bad),
            _ => PoisonKind::Bad,
        }
    }

    /// The native shadow check for one `size`-byte access.
    #[inline(never)]
    pub fn check_access_slow(&self, addr: u64, size: u64) -> Result<Verdict, OutOfSpace> {
        self.check_access_slow_counted(addr, size).map(|(v, _)| v)
    }

    /// As [`check_access_slow`](Self::check_access_slow), also returning how
    /// many shadow bytes were loaded (1, or 2 for a granule-straddling access
    /// whose first half passed).
    #[inline(never)]
    pub fn check_access_slow_counted(&self, addr: u64, size: u64) -> Result<(Verdict, u32), OutOfSpace> {
        self.check_range(addr, size)?;
        let off = addr & 7;
        if off + size <= GRANULE {
            return Ok((self.check_granule(addr, size), 1));
        }
        let first = GRANULE - off;
        match self.check_granule(addr, first) {
            Verdict::Valid => Ok((self.check_granule(addr + first, size - first), 2)),
            bad => Ok((bad, 1)),
        }
    }

    /// `k != 0 && (addr & 7) + size > k`, with the access inside one granule.
    fn check_granule(&self, addr: u64, size: u64) -> Verdict {
        let k = self.bytes[self.shadow_index(addr).expect("range checked")];
        let off = addr & 7;
        if k != 0 && (off + size) as i64 > k as i64 {
            let fault_addr = if k > 0 { (addr & !7) + (k as u64).max(off) } else { addr };
            Verdict::Invalid {
                kind: self.poison_kind_at(fault_addr),
                fault_addr,
            }
        } else {
            Verdict::Valid
        }
    }

    /// First unaddressable byte in `[addr, addr+size)`, if any.
    pub fn region_is_poisoned(&self, addr: u64, size: u64) -> Result<Option<u64>, OutOfSpace> {
        self.check_range(addr, size)?;
        let end = addr + size;
        let mut g = addr & !7;
        while g < end {
            let p = addressable_prefix(self.bytes[self.shadow_index(g)?]);
            if p < GRANULE {
                let bad = (g + p).max(addr);
                if bad < end && bad < g + GRANULE {
                    return Ok(Some(bad));
                }
            }
            g += GRANULE;
        }
        Ok(None)
    }

    /// Hex dump of shadow for `[start, end)`, 16 granules per line. Runs of
    /// all-zero lines are collapsed into a single `*` line.
    pub fn dump(&self, start: u64, end: u64) -> String {
        let mut out = String::new();
        let start = start & !(16 * GRANULE - 1);
        let end = end.min(self.app_size);
        let mut collapsed = false;
        let mut line = start;
        while line < end {
            let granules: Vec<i8> = (0..16)
                .map(|j| line + j * GRANULE)
                .take_while(|a| *a < end)
                .map(|a| self.bytes[self.shadow_index(a).unwrap()])
                .collect();
            if granules.iter().all(|&b| b == 0) {
                if !collapsed {
                    out.push_str("*\n");
                    collapsed = true;
                }
            } else {
                collapsed = false;
                let _ = write!(out, "{line:#010x}:");
                for b in granules {
                    let _ = write!(out, " {:02x}", b as u8);
                }
                out.push('\n');
            }
            line += 16 * GRANULE;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_distinct_negative() {
        for (i, a) in PoisonKind::ALL.iter().enumerate() {
            assert!(a.code() < 0);
            for b in &PoisonKind::ALL[i + 1..] {
                assert_ne!(a.code(), b.code());
            }
            assert_eq!(PoisonKind::from_code(a.code()), Some(*a));
        }
        assert_eq!(PoisonKind::HeapRedzone.code(), -6);
        assert_eq!(PoisonKind::HeapFreed.code(), -3);
    }

    #[test]
    fn index_with_offset() {
        assert_eq!(ShadowMemory::new(1024).shadow_index(0).unwrap(), 0);
        assert_eq!(ShadowMemory::new(1024).shadow_index(64).unwrap(), 8);
        assert_eq!(ShadowMemory::with_offset(1024, 1000).shadow_index(13).unwrap(), 1001);
        assert!(ShadowMemory::new(1024).shadow_index(1024).is_err());
    }

    #[test]
    fn poison_examples() {
        let mut s = ShadowMemory::new(1024);
        s.poison_region(64, 32, PoisonKind::HeapRedzone).unwrap();
        for a in (64..96).step_by(8) {
            assert_eq!(s.get(a).unwrap(), PoisonKind::HeapRedzone.code());
        }
        assert_eq!(s.get(96).unwrap(), 0);
        s.poison_region(0, 0, PoisonKind::Bad).unwrap();
        assert_eq!(s.get(0).unwrap(), 0);
        s.poison_region(5, 3, PoisonKind::HeapRedzone).unwrap();
        assert_eq!(s.get(0).unwrap(), 5);
        assert!(s.poison_region(1020, 8, PoisonKind::Bad).is_err());
    }

    #[test]
    fn unpoison_examples() {
        let mut s = ShadowMemory::new(1024);
        s.poison_region(0, 128, PoisonKind::HeapRedzone).unwrap();
        s.unpoison_region(64, 20).unwrap();
        assert_eq!([s.get(64).unwrap(), s.get(72).unwrap(), s.get(80).unwrap()], [0, 0, 4]);
        s.unpoison_region(0, 1).unwrap();
        assert_eq!(s.get(0).unwrap(), 1);
        s.unpoison_region(0, 8).unwrap();
        assert_eq!(s.get(0).unwrap(), 0);
    }

    #[test]
    fn slow_check_examples() {
        let mut s = ShadowMemory::new(64);
        for size in [1, 2, 4, 8] {
            assert_eq!(s.check_access_slow(0, size).unwrap(), Verdict::Valid);
        }
        s.set(8, 4).unwrap();
        assert_eq!(s.check_access_slow(8 + 2, 2).unwrap(), Verdict::Valid);
        s.set(16, PoisonKind::HeapRedzone.code()).unwrap();
        assert_eq!(
            s.check_access_slow(8 + 3, 2).unwrap(),
            Verdict::Invalid {
                kind: PoisonKind::HeapRedzone,
                fault_addr: 12
            }
        );
    }

    #[test]
    fn straddle_is_split() {
        let mut s = ShadowMemory::new(64);
        s.set(8, PoisonKind::StackRedzone.code()).unwrap();
        let (v, loads) = s.check_access_slow_counted(6, 4).unwrap();
        assert_eq!(
            v,
            Verdict::Invalid {
                kind: PoisonKind::StackRedzone,
                fault_addr: 8
            }
        );
        assert_eq!(loads, 2);
    }

    #[test]
    fn region_examples() {
        let mut s = ShadowMemory::new(256);
        assert_eq!(s.region_is_poisoned(0, 64).unwrap(), None);
        assert_eq!(s.region_is_poisoned(3, 0).unwrap(), None);
        s.unpoison_region(0, 0).unwrap();
        s.poison_region(60, 4, PoisonKind::GlobalRedzone).unwrap();
        assert_eq!(s.region_is_poisoned(0, 64).unwrap(), Some(60));
        assert_eq!(s.region_is_poisoned(0, 60).unwrap(), None);
        assert_eq!(s.region_is_poisoned(62, 10).unwrap(), Some(62));
    }

    #[test]
    fn dump_collapses_zero_lines() {
        let mut s = ShadowMemory::new(1024);
        s.poison_region(512, 16, PoisonKind::HeapRedzone).unwrap();
        let d = s.dump(0, 1024);
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines[0], "*");
        assert!(lines[1].starts_with("0x00000200: fa fa 00"));
        assert_eq!(lines[2], "*");
    }
}
