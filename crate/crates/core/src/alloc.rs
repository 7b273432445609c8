//! Simulated application memory and its allocator.
//!
//! The flat space is split into fixed arenas:
//!
//! ```text
//! [0, 4096)            null page, poisoned Bad
//! [4096, +globals)     global arena, starting with a 64-byte guard
//! [.., +stack)         stack arena, grows upward
//! [.., space_size)     heap arena: bump pointer plus a free list
//! ```
//!
//! Every byte made unaddressable by the allocator is filled with the magic
//! byte, so a plain value comparison can act as a first filter.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::AccessSize;
use crate::shadow::{addressable_prefix, OutOfSpace, PoisonKind, ShadowMemory, GRANULE};

pub const NULL_PAGE: u64 = 4096;
pub const GLOBAL_GUARD: u64 = 64;
pub const STACK_LEFT_RZ: u64 = 32;
pub const STACK_ALIGN: u64 = 32;
pub const GLOBAL_MIN_RZ: u64 = 32;
pub const HEAP_MIN_RZ: u64 = 16;
pub const HEAP_MAX_RZ: u64 = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagicConfig {
    pub byte: u8,
}

impl Default for MagicConfig {
    fn default() -> Self {
        MagicConfig { byte: 0x89 }
    }
}

impl MagicConfig {
    /// `MAGIC_VALUE_N`: the magic byte replicated `size` times.
    pub fn value(self, size: AccessSize) -> u64 {
        let all = u64::from_le_bytes([self.byte; 8]);
        match size.bytes() {
            8 => all,
            n => all & ((1u64 << (8 * n)) - 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    pub space_size: u64,
    pub global_arena: u64,
    pub stack_arena: u64,
    pub quarantine_capacity: u64,
    pub magic: MagicConfig,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            space_size: 1 << 24,
            global_arena: 1 << 20,
            stack_arena: 4 << 20,
            quarantine_capacity: 64 << 10,
            magic: MagicConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Null,
    Global,
    Stack,
    Heap,
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordState {
    Live,
    Quarantined,
    Recycled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AllocationRecord {
    pub base: u64,
    pub size: u64,
    pub left_rz: u64,
    pub right_rz: u64,
    pub region: Region,
    pub state: RecordState,
}

impl AllocationRecord {
    /// First byte of the left redzone.
    pub fn chunk_start(&self) -> u64 {
        self.base - self.left_rz
    }

    pub fn chunk_end(&self) -> u64 {
        self.base + self.size + self.right_rz
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("out of memory allocating {size} bytes")]
    OutOfMemory { size: u64 },
    #[error("stack arena exhausted allocating {size} bytes")]
    StackOverflow { size: u64 },
    #[error("global arena exhausted registering {size} bytes")]
    GlobalArenaExhausted { size: u64 },
    #[error("alloca outside of any frame")]
    NoFrame,
    #[error("invalid space configuration: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum FreeError {
    #[error("double-free of {addr:#x}")]
    DoubleFree { addr: u64 },
    #[error("invalid-free of {addr:#x}")]
    InvalidFree { addr: u64 },
}

/// FIFO of freed heap bases, budgeted by user bytes.
#[derive(Clone, Debug, Default)]
pub struct QuarantineQueue {
    fifo: VecDeque<(u64, u64)>,
    total: u64,
    pub capacity: u64,
}

impl QuarantineQueue {
    pub fn new(capacity: u64) -> Self {
        QuarantineQueue {
            capacity,
            ..Default::default()
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn bases(&self) -> impl Iterator<Item = u64> + '_ {
        self.fifo.iter().map(|(b, _)| *b)
    }

    fn push(&mut self, base: u64, size: u64) {
        self.fifo.push_back((base, size));
        self.total += size;
    }

    fn pop_over_capacity(&mut self) -> Option<u64> {
        if self.total > self.capacity {
            self.pop()
        } else {
            None
        }
    }

    fn pop(&mut self) -> Option<u64> {
        let (base, size) = self.fifo.pop_front()?;
        self.total -= size;
        Some(base)
    }
}

/// `clamp(next_pow2(size / 8), 16, 2048)`.
pub fn redzone_size_heap(object_size: u64) -> u64 {
    (object_size / 8)
        .checked_next_power_of_two()
        .unwrap_or(u64::MAX)
        .clamp(HEAP_MIN_RZ, HEAP_MAX_RZ)
}

/// Right redzone of a stack object: 32 plus the pad that 32-aligns the object.
pub fn redzone_size_stack(size: u64) -> u64 {
    STACK_LEFT_RZ + (STACK_ALIGN - size % STACK_ALIGN) % STACK_ALIGN
}

/// Trailing redzone of a global: the object is 8-aligned, gets at least
/// `max(32, size/4)` of redzone, and the whole is rounded up to 32.
pub fn redzone_size_global(size: u64) -> u64 {
    let padded = round_up(size, GRANULE);
    round_up(padded + GLOBAL_MIN_RZ.max(size / 4), STACK_ALIGN) - size
}

fn round_up(x: u64, to: u64) -> u64 {
    x.div_ceil(to) * to
}

#[derive(Clone, Debug)]
struct Frame {
    start: u64,
    objects: Vec<AllocationRecord>,
}

#[derive(Clone, Debug)]
pub struct AddressSpace {
    cfg: SpaceConfig,
    mem: Vec<u8>,
    shadow: ShadowMemory,
    global_start: u64,
    global_cursor: u64,
    stack_start: u64,
    stack_end: u64,
    sp: u64,
    stack_high: u64,
    heap_start: u64,
    heap_bump: u64,
    frames: Vec<Frame>,
    globals: Vec<AllocationRecord>,
    heap: BTreeMap<u64, AllocationRecord>,
    free_chunks: BTreeMap<u64, u64>,
    quarantine: QuarantineQueue,
}

impl AddressSpace {
    pub fn new(cfg: SpaceConfig) -> Result<Self, AllocError> {
        let global_start = NULL_PAGE;
        let stack_start = global_start
            .checked_add(cfg.global_arena)
            .ok_or_else(|| AllocError::BadConfig("global arena too large".into()))?;
        let stack_end = stack_start
            .checked_add(cfg.stack_arena)
            .ok_or_else(|| AllocError::BadConfig("stack arena too large".into()))?;
        if cfg.global_arena < GLOBAL_GUARD || !cfg.global_arena.is_multiple_of(STACK_ALIGN) {
            return Err(AllocError::BadConfig(
                "global arena must be a multiple of 32 and at least 64 bytes".into(),
            ));
        }
        if !cfg.stack_arena.is_multiple_of(STACK_ALIGN) || !cfg.space_size.is_multiple_of(GRANULE) {
            return Err(AllocError::BadConfig(
                "stack arena must be a multiple of 32 and space size a multiple of 8".into(),
            ));
        }
        if stack_end > cfg.space_size || cfg.space_size > 1 << 32 {
            return Err(AllocError::BadConfig(format!(
                "arenas need {stack_end} bytes plus heap; space is {}",
                cfg.space_size
            )));
        }
        let mut s = AddressSpace {
            cfg,
            mem: vec![0; cfg.space_size as usize],
            shadow: ShadowMemory::new(cfg.space_size),
            global_start,
            global_cursor: global_start + GLOBAL_GUARD,
            stack_start,
            stack_end,
            sp: stack_start,
            stack_high: stack_start,
            heap_start: stack_end,
            heap_bump: stack_end,
            frames: Vec::new(),
            globals: Vec::new(),
            heap: BTreeMap::new(),
            free_chunks: BTreeMap::new(),
            quarantine: QuarantineQueue::new(cfg.quarantine_capacity),
        };
        s.poison_and_fill(0, NULL_PAGE, PoisonKind::Bad);
        s.poison_and_fill(global_start, GLOBAL_GUARD, PoisonKind::GlobalRedzone);
        Ok(s)
    }

    pub fn config(&self) -> &SpaceConfig {
        &self.cfg
    }

    pub fn magic(&self) -> MagicConfig {
        self.cfg.magic
    }

    pub fn shadow(&self) -> &ShadowMemory {
        &self.shadow
    }

    /// Raw shadow access for tools that build patterns by hand. Nothing
    /// keeps memory contents in step with changes made here.
    pub fn shadow_mut(&mut self) -> &mut ShadowMemory {
        &mut self.shadow
    }

    pub fn memory(&self) -> &[u8] {
        &self.mem
    }

    pub fn quarantine(&self) -> &QuarantineQueue {
        &self.quarantine
    }

    pub fn region_of(&self, addr: u64) -> Region {
        if addr < NULL_PAGE {
            Region::Null
        } else if addr < self.stack_start {
            Region::Global
        } else if addr < self.stack_end {
            Region::Stack
        } else if addr < self.cfg.space_size {
            Region::Heap
        } else {
            Region::Outside
        }
    }

    /// Arena bounds as `(global, stack, heap)` half-open ranges.
    pub fn arenas(&self) -> [(u64, u64); 3] {
        [
            (self.global_start, self.stack_start),
            (self.stack_start, self.stack_end),
            (self.heap_start, self.cfg.space_size),
        ]
    }

    /// Parts of each arena handed out so far, for shadow dumps.
    pub fn used_ranges(&self) -> [(u64, u64); 3] {
        [
            (self.global_start, self.global_cursor),
            (self.stack_start, self.stack_high),
            (self.heap_start, self.heap_bump),
        ]
    }

    fn check_range(&self, addr: u64, size: u64) -> Result<(), OutOfSpace> {
        match addr.checked_add(size) {
            Some(end) if end <= self.cfg.space_size => Ok(()),
            _ => Err(OutOfSpace { addr, size }),
        }
    }

    pub fn read_bytes(&self, addr: u64, size: u64) -> Result<&[u8], OutOfSpace> {
        self.check_range(addr, size)?;
        Ok(&self.mem[addr as usize..(addr + size) as usize])
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), OutOfSpace> {
        self.check_range(addr, bytes.len() as u64)?;
        self.mem[addr as usize..addr as usize + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Little-endian read of `size` bytes.
    pub fn read(&self, addr: u64, size: AccessSize) -> Result<u64, OutOfSpace> {
        let mut buf = [0u8; 8];
        buf[..size.bytes() as usize].copy_from_slice(self.read_bytes(addr, size.bytes())?);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write(&mut self, addr: u64, size: AccessSize, value: u64) -> Result<(), OutOfSpace> {
        let bytes = value.to_le_bytes();
        self.write_bytes(addr, &bytes[..size.bytes() as usize])
    }

    pub fn fill(&mut self, addr: u64, size: u64, byte: u8) -> Result<(), OutOfSpace> {
        self.check_range(addr, size)?;
        self.mem[addr as usize..(addr + size) as usize].fill(byte);
        Ok(())
    }

    pub fn magic_fill(&mut self, addr: u64, size: u64) -> Result<(), OutOfSpace> {
        self.fill(addr, size, self.cfg.magic.byte)
    }

    /// Fill every unaddressable byte of `[addr, addr+size)` with magic.
    pub fn refill_unaddressable(&mut self, addr: u64, size: u64) -> Result<u64, OutOfSpace> {
        self.check_range(addr, size)?;
        let mut n = 0;
        for a in addr..addr + size {
            if !self.shadow.is_addressable(a)? {
                self.mem[a as usize] = self.cfg.magic.byte;
                n += 1;
            }
        }
        Ok(n)
    }

    fn poison_and_fill(&mut self, addr: u64, size: u64, kind: PoisonKind) {
        self.shadow
            .poison_region(addr, size, kind)
            .expect("allocator ranges lie inside the space");
        self.magic_fill(addr, size)
            .expect("allocator ranges lie inside the space");
    }

    /// Lay out `left | object | right` at `start`: redzones poisoned and
    /// magic-filled, object unpoisoned with its bytes untouched.
    fn place(&mut self, start: u64, left: u64, size: u64, right: u64, kind: PoisonKind) -> u64 {
        let base = start + left;
        self.poison_and_fill(start, left, kind);
        self.shadow
            .unpoison_region(base, size)
            .expect("allocator ranges lie inside the space");
        self.poison_and_fill(base + size, right, kind);
        base
    }

    pub fn heap_alloc(&mut self, size: u64) -> Result<u64, AllocError> {
        let rz = redzone_size_heap(size);
        let total = size
            .checked_add(GRANULE - 1)
            .map(|s| s / GRANULE * GRANULE)
            .and_then(|s| s.checked_add(2 * rz))
            .ok_or(AllocError::OutOfMemory { size })?;
        let start = match self.take_chunk(total) {
            Some(s) => s,
            None => {
                while let Some(b) = self.quarantine.pop() {
                    self.recycle(b);
                }
                self.take_chunk(total)
                    .ok_or(AllocError::OutOfMemory { size })?
            }
        };
        let stale: Vec<u64> = self
            .heap
            .range(start..start + total)
            .map(|(b, _)| *b)
            .collect();
        for b in stale {
            self.heap.remove(&b);
        }
        let right = total - rz - size;
        let base = self.place(start, rz, size, right, PoisonKind::HeapRedzone);
        self.heap.insert(
            base,
            AllocationRecord {
                base,
                size,
                left_rz: rz,
                right_rz: right,
                region: Region::Heap,
                state: RecordState::Live,
            },
        );
        Ok(base)
    }

    /// First fit from the free list, else bump.
    fn take_chunk(&mut self, total: u64) -> Option<u64> {
        let hit = self
            .free_chunks
            .iter()
            .find(|(_, len)| **len >= total)
            .map(|(s, l)| (*s, *l));
        if let Some((start, len)) = hit {
            self.free_chunks.remove(&start);
            if len > total {
                self.free_chunks.insert(start + total, len - total);
            }
            return Some(start);
        }
        let end = self.heap_bump.checked_add(total)?;
        if end > self.cfg.space_size {
            return None;
        }
        let start = self.heap_bump;
        self.heap_bump = end;
        Some(start)
    }

    fn release_chunk(&mut self, mut start: u64, mut len: u64) {
        if let Some((&ps, &pl)) = self.free_chunks.range(..start).next_back() {
            if ps + pl == start {
                self.free_chunks.remove(&ps);
                start = ps;
                len += pl;
            }
        }
        if let Some(&nl) = self.free_chunks.get(&(start + len)) {
            self.free_chunks.remove(&(start + len));
            len += nl;
        }
        self.free_chunks.insert(start, len);
    }

    /// Return a quarantined chunk's storage to the free list. Its shadow and
    /// magic stay as they are until the storage is reused.
    fn recycle(&mut self, base: u64) {
        let rec = self.heap.get_mut(&base).expect("quarantined base has a record");
        rec.state = RecordState::Recycled;
        let (start, end) = (rec.chunk_start(), rec.chunk_end());
        self.release_chunk(start, end - start);
    }

    pub fn heap_free(&mut self, addr: u64) -> Result<(), FreeError> {
        if addr == 0 {
            return Ok(());
        }
        let rec = match self.heap.get_mut(&addr) {
            Some(r) if r.state == RecordState::Live => r,
            Some(_) => return Err(FreeError::DoubleFree { addr }),
            None => return Err(FreeError::InvalidFree { addr }),
        };
        rec.state = RecordState::Quarantined;
        let size = rec.size;
        self.poison_and_fill(addr, round_up(size, GRANULE), PoisonKind::HeapFreed);
        self.quarantine.push(addr, size);
        while let Some(b) = self.quarantine.pop_over_capacity() {
            self.recycle(b);
        }
        Ok(())
    }

    /// Heap record whose user base is exactly `base`.
    pub fn heap_record(&self, base: u64) -> Option<&AllocationRecord> {
        self.heap.get(&base)
    }

    pub fn heap_records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.heap.values()
    }

    pub fn stack_records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.frames.iter().flat_map(|f| f.objects.iter())
    }

    pub fn global_records(&self) -> &[AllocationRecord] {
        &self.globals
    }

    pub fn frame_depth(&self) -> usize {
        self.frames.len()
    }

    pub fn stack_enter_frame(&mut self) {
        self.frames.push(Frame {
            start: self.sp,
            objects: Vec::new(),
        });
    }

    pub fn stack_alloca(&mut self, size: u64) -> Result<u64, AllocError> {
        if self.frames.is_empty() {
            return Err(AllocError::NoFrame);
        }
        let right = redzone_size_stack(size);
        let end = size
            .checked_add(STACK_LEFT_RZ + right)
            .and_then(|t| self.sp.checked_add(t))
            .filter(|e| *e <= self.stack_end)
            .ok_or(AllocError::StackOverflow { size })?;
        let start = self.sp;
        self.sp = end;
        self.stack_high = self.stack_high.max(end);
        let base = self.place(start, STACK_LEFT_RZ, size, right, PoisonKind::StackRedzone);
        self.frames.last_mut().unwrap().objects.push(AllocationRecord {
            base,
            size,
            left_rz: STACK_LEFT_RZ,
            right_rz: right,
            region: Region::Stack,
            state: RecordState::Live,
        });
        Ok(base)
    }

    /// Pop the innermost frame. Its shadow becomes addressable again; stale
    /// magic bytes in old redzones stay in memory.
    pub fn stack_leave_frame(&mut self) {
        if let Some(f) = self.frames.pop() {
            self.shadow
                .unpoison_region(f.start, self.sp - f.start)
                .expect("stack lies inside the space");
            self.sp = f.start;
        }
    }

    pub fn register_global(&mut self, size: u64) -> Result<u64, AllocError> {
        let err = AllocError::GlobalArenaExhausted { size };
        if size > self.cfg.global_arena {
            return Err(err);
        }
        let right = redzone_size_global(size);
        let base = self.global_cursor;
        let end = base + size + right;
        if end > self.stack_start {
            return Err(err);
        }
        self.global_cursor = end;
        self.place(base, 0, size, right, PoisonKind::GlobalRedzone);
        self.globals.push(AllocationRecord {
            base,
            size,
            left_rz: 0,
            right_rz: right,
            region: Region::Global,
            state: RecordState::Live,
        });
        Ok(base)
    }

    /// First unaddressable byte whose value is not the magic byte.
    pub fn magic_invariant_violation(&self) -> Option<u64> {
        let magic = self.cfg.magic.byte;
        (0..self.cfg.space_size).step_by(GRANULE as usize).find_map(|g| {
            let prefix = addressable_prefix(self.shadow.get(g).ok()?);
            let end = (g + GRANULE).min(self.cfg.space_size);
            (g + prefix..end).find(|&a| self.mem[a as usize] != magic)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> AddressSpace {
        AddressSpace::new(SpaceConfig {
            space_size: 1 << 16,
            global_arena: 4096,
            stack_arena: 8192,
            quarantine_capacity: 1024,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn heap_redzone_rule() {
        assert_eq!(redzone_size_heap(0), 16);
        assert_eq!(redzone_size_heap(100), 16);
        assert_eq!(redzone_size_heap(1_000_000), 2048);
        assert_eq!(redzone_size_heap(256), 32);
        assert_eq!(redzone_size_heap(u64::MAX), 2048);
    }

    #[test]
    fn stack_and_global_redzones() {
        assert_eq!(redzone_size_stack(40), 56);
        assert_eq!(redzone_size_stack(32), 32);
        assert_eq!(30 + redzone_size_global(30), 64);
        assert_eq!(redzone_size_global(32), 32);
        assert_eq!(redzone_size_global(256), 64);
    }

    #[test]
    fn magic_values() {
        let m = MagicConfig::default();
        assert_eq!(m.value(AccessSize::B1), 0x89);
        assert_eq!(m.value(AccessSize::B4), 0x8989_8989);
        assert_eq!(m.value(AccessSize::B8), 0x8989_8989_8989_8989);
    }

    #[test]
    fn heap_alloc_geometry() {
        let mut s = space();
        let p = s.heap_alloc(24).unwrap();
        let r = *s.heap_record(p).unwrap();
        assert_eq!((r.left_rz, r.right_rz), (16, 16));
        assert_eq!(p % 8, 0);
        for a in [p, p + 8, p + 16] {
            assert_eq!(s.shadow().get(a).unwrap(), 0);
        }
        assert_eq!(s.shadow().get(p - 8).unwrap(), PoisonKind::HeapRedzone.code());
        assert_eq!(s.shadow().get(p + 24).unwrap(), PoisonKind::HeapRedzone.code());

        let q = s.heap_alloc(20).unwrap();
        assert_eq!(s.shadow().get(q + 16).unwrap(), 4);
        assert_eq!(s.read_bytes(q + 20, 4).unwrap(), &[0x89; 4]);

        let z = s.heap_alloc(0).unwrap();
        let z2 = s.heap_alloc(0).unwrap();
        assert_ne!(z, z2);
        assert!(!s.shadow().is_addressable(z).unwrap());
        assert!(!s.shadow().is_addressable(z - 1).unwrap());
        assert_eq!(s.magic_invariant_violation(), None);
    }

    #[test]
    fn free_poisons_and_detects_misuse() {
        let mut s = space();
        let p = s.heap_alloc(32).unwrap();
        s.write(p, AccessSize::B8, 7).unwrap();
        s.heap_free(p).unwrap();
        assert_eq!(s.heap_record(p).unwrap().state, RecordState::Quarantined);
        assert_eq!(s.shadow().get(p).unwrap(), PoisonKind::HeapFreed.code());
        assert_eq!(s.read_bytes(p, 32).unwrap(), &[0x89; 32]);
        assert_eq!(s.heap_free(p), Err(FreeError::DoubleFree { addr: p }));
        let q = s.heap_alloc(32).unwrap();
        assert_eq!(s.heap_free(q + 8), Err(FreeError::InvalidFree { addr: q + 8 }));
        assert_eq!(s.heap_free(0), Ok(()));
    }

    #[test]
    fn quarantine_evicts_fifo_and_recycles() {
        let mut s = space();
        let a = s.heap_alloc(512).unwrap();
        let b = s.heap_alloc(512).unwrap();
        let c = s.heap_alloc(512).unwrap();
        s.heap_free(a).unwrap();
        s.heap_free(b).unwrap();
        assert_eq!(s.heap_record(a).unwrap().state, RecordState::Quarantined);
        s.heap_free(c).unwrap();
        assert_eq!(s.heap_record(a).unwrap().state, RecordState::Recycled);
        assert_eq!(s.heap_record(b).unwrap().state, RecordState::Quarantined);
        assert_eq!(s.quarantine().total_bytes(), 1024);
        // Recycled storage keeps its poison until reused, then is handed out
        // again with the old bytes intact.
        assert!(!s.shadow().is_addressable(a).unwrap());
        let a2 = s.heap_alloc(512).unwrap();
        assert_eq!(a2, a);
        assert!(s.shadow().is_addressable(a).unwrap());
        assert_eq!(s.read(a, AccessSize::B8).unwrap(), MagicConfig::default().value(AccessSize::B8));
    }

    #[test]
    fn stack_frames() {
        let mut s = space();
        assert_eq!(s.stack_alloca(8), Err(AllocError::NoFrame));
        s.stack_enter_frame();
        let p = s.stack_alloca(8).unwrap();
        let q = s.stack_alloca(40).unwrap();
        assert_eq!(q - p, 8 + 56 + 32);
        assert_eq!(s.shadow().get(p - 8).unwrap(), PoisonKind::StackRedzone.code());
        assert_eq!(s.shadow().get(p).unwrap(), 0);
        s.stack_leave_frame();
        assert_eq!(s.shadow().region_is_poisoned(p - 32, 200).unwrap(), None);
        assert_eq!(s.read_bytes(p - 32, 32).unwrap(), &[0x89; 32]);
    }

    #[test]
    fn globals_and_guards() {
        let mut s = space();
        let g = s.register_global(30).unwrap();
        let h = s.register_global(256).unwrap();
        assert_eq!(h - g, 64);
        assert_eq!(s.shadow().get(g + 24).unwrap(), 6);
        assert_eq!(s.shadow().poison_kind_at(g + 30), PoisonKind::GlobalRedzone);
        assert_eq!(s.shadow().poison_kind_at(g - 1), PoisonKind::GlobalRedzone);
        assert_eq!(s.shadow().poison_kind_at(8), PoisonKind::Bad);
        assert!(s.register_global(1 << 20).is_err());
        assert_eq!(s.magic_invariant_violation(), None);
    }

    #[test]
    fn oom_after_draining_quarantine() {
        let mut s = space();
        let heap = s.arenas()[2];
        let big = (heap.1 - heap.0) / 2;
        let p = s.heap_alloc(big).unwrap();
        assert!(matches!(s.heap_alloc(big), Err(AllocError::OutOfMemory { .. })));
        s.heap_free(p).unwrap();
        assert!(s.heap_alloc(big).is_ok());
    }
}
