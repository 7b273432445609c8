//! Seeded random program generator for differential and oracle tests.
//!
//! Programs are emitted as text and parsed back, so every generated case can
//! be dumped and replayed with the CLI. The shapes are biased toward what the
//! optimizer looks for: constant and guarded indexes, counted loops, clustered
//! constant offsets, repeated pointers. Roughly half the accesses can leave
//! their object depending on the inputs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{parse_module, Module};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    /// Top-level statements in `main`.
    pub statements: usize,
    pub num_inputs: usize,
    pub max_object_size: u64,
    /// Allow free, interceptors and helper calls.
    pub heap_ops: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            statements: 8,
            num_inputs: 3,
            max_object_size: 96,
            heap_ops: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub seed: u64,
    pub source: String,
    pub module: Module,
    pub num_inputs: usize,
    /// Largest object size; inputs are drawn from `0..=2*max_size`.
    pub max_size: u64,
}

impl Generated {
    pub fn random_inputs(&self, rng: &mut impl Rng) -> Vec<u64> {
        (0..self.num_inputs).map(|_| rng.gen_range(0..=2 * self.max_size)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ObjKind {
    Stack,
    Global,
    Heap,
}

#[derive(Clone, Debug)]
struct Obj {
    name: String,
    size: u64,
    kind: ObjKind,
    freed: bool,
}

struct Gen {
    rng: ChaCha8Rng,
    cfg: GenConfig,
    globals: String,
    body: String,
    objs: Vec<Obj>,
    label: String,
    n: usize,
}

const SIZES: [u64; 4] = [1, 2, 4, 8];
const MAGIC_WORD: u64 = 0x8989_8989_8989_8989;

fn ty(size: u64) -> &'static str {
    match size {
        1 => "i8",
        2 => "i16",
        4 => "i32",
        _ => "i64",
    }
}

/// Generate one program from `seed`.
pub fn generate(seed: u64, cfg: GenConfig) -> Generated {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
        globals: String::new(),
        body: String::new(),
        objs: Vec::new(),
        label: "entry".into(),
        n: 0,
    };
    g.program();
    let source = format!("{}{}{}", g.globals, HELPERS, g.body);
    let module = parse_module(&source).unwrap_or_else(|e| panic!("generator emitted bad program ({e}):\n{source}"));
    Generated {
        seed,
        source,
        module,
        num_inputs: cfg.num_inputs,
        max_size: cfg.max_object_size,
    }
}

const HELPERS: &str = "fn touch(%p, %i) {
entry:
  %q = gep %p, [%i x 4]
  %v = load i32, %q
  %w = add %v, 1
  store i32 %w, %q
  ret
}

fn peek(%p) {
entry:
  %v = load i8, %p
  ret %v
}

";

impl Gen {
    fn fresh(&mut self) -> usize {
        self.n += 1;
        self.n
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.body.push_str("  ");
        self.body.push_str(s.as_ref());
        self.body.push('\n');
    }

    fn block(&mut self, label: String) {
        let _ = writeln!(self.body, "{label}:");
        self.label = label;
    }

    fn input(&mut self) -> String {
        format!("%in{}", self.rng.gen_range(0..self.cfg.num_inputs.max(1)))
    }

    fn program(&mut self) {
        self.body.push_str("fn main {\nentry:\n");
        for i in 0..self.cfg.num_inputs {
            self.line(format!("%in{i} = call read_input()"));
        }
        let nobj = self.rng.gen_range(2..=4);
        for _ in 0..nobj {
            self.new_object();
        }
        for _ in 0..self.cfg.statements {
            self.statement();
        }
        self.line("ret");
        self.body.push_str("}\n");
    }

    fn new_object(&mut self) {
        let size = self.rng.gen_range(1..=self.cfg.max_object_size);
        let id = self.fresh();
        let kind = *[ObjKind::Stack, ObjKind::Global, ObjKind::Heap]
            .choose(&mut self.rng)
            .unwrap();
        let kind = if !self.cfg.heap_ops && kind == ObjKind::Heap {
            ObjKind::Stack
        } else {
            kind
        };
        let name = match kind {
            ObjKind::Stack => {
                self.line(format!("%a{id} = alloca {size}"));
                format!("%a{id}")
            }
            ObjKind::Global => {
                let _ = writeln!(self.globals, "global @g{id} {size}");
                format!("@g{id}")
            }
            ObjKind::Heap => {
                self.line(format!("%h{id} = call malloc({size})"));
                format!("%h{id}")
            }
        };
        self.objs.push(Obj {
            name,
            size,
            kind,
            freed: false,
        });
    }

    fn pick_obj(&mut self) -> Obj {
        self.objs.choose(&mut self.rng).unwrap().clone()
    }

    fn store_value(&mut self) -> String {
        match self.rng.gen_range(0..5) {
            0 => format!("{MAGIC_WORD}"),
            1 => self.input(),
            2 => "0".into(),
            _ => format!("{}", self.rng.gen_range(1..1000)),
        }
    }

    /// Load or store through `ptr`.
    fn access(&mut self, ptr: &str, size: u64) {
        let id = self.fresh();
        if self.rng.gen_bool(0.5) {
            self.line(format!("%v{id} = load {}, {ptr}", ty(size)));
        } else {
            let v = self.store_value();
            self.line(format!("store {} {v}, {ptr}", ty(size)));
        }
    }

    /// A constant element index near the object's bounds.
    fn near_index(&mut self, size: u64, scale: u64) -> u64 {
        let elems = (size / scale).max(1);
        if self.rng.gen_bool(0.75) {
            self.rng.gen_range(0..elems)
        } else {
            self.rng.gen_range(elems.saturating_sub(1)..elems + 3)
        }
    }

    fn statement(&mut self) {
        let heap = self.cfg.heap_ops;
        match self.rng.gen_range(0..if heap { 13 } else { 9 }) {
            0 | 1 => self.const_access(),
            2 => self.guarded_access(),
            3 | 4 => self.counted_loop(),
            5 => self.neighbor_cluster(),
            6 => self.recurring(),
            7 => self.input_access(),
            8 => self.nested_loop(),
            9 => self.free_one(),
            10 => self.intercept(),
            11 => self.helper_call(),
            _ => self.new_object(),
        }
    }

    fn const_access(&mut self) {
        let o = self.pick_obj();
        let size = *SIZES.choose(&mut self.rng).unwrap();
        if self.rng.gen_bool(0.15) {
            let name = o.name.clone();
            self.access(&name, size);
            return;
        }
        let k = self.near_index(o.size, size);
        let id = self.fresh();
        self.line(format!("%p{id} = gep {}, [{k} x {size}]", o.name));
        self.access(&format!("%p{id}"), size);
    }

    fn guarded_access(&mut self) {
        let o = self.pick_obj();
        let scale = *SIZES.choose(&mut self.rng).unwrap();
        let elems = (o.size / scale).max(1);
        let bound = self.rng.gen_range(1..elems + 3);
        let inp = self.input();
        let id = self.fresh();
        let cmp = match self.rng.gen_range(0..4) {
            0 => format!("cmp gt {bound}, {inp}"),
            1 => format!("cmp le {inp}, {bound}"),
            _ => format!("cmp lt {inp}, {bound}"),
        };
        self.line(format!("%c{id} = {cmp}"));
        self.line(format!("br %c{id}, gt{id}, gj{id}"));
        self.block(format!("gt{id}"));
        self.line(format!("%p{id} = gep {}, [{inp} x {scale}]", o.name));
        self.access(&format!("%p{id}"), scale);
        self.line(format!("jmp gj{id}"));
        self.block(format!("gj{id}"));
    }

    fn input_access(&mut self) {
        let o = self.pick_obj();
        let scale = *SIZES.choose(&mut self.rng).unwrap();
        let inp = self.input();
        let id = self.fresh();
        self.line(format!("%p{id} = gep {}, [{inp} x {scale}]", o.name));
        self.access(&format!("%p{id}"), scale);
    }

    /// Loop bodies: accesses at `j`, at a constant, and at `j+d`.
    fn loop_body(&mut self, j: &str, o: &Obj, scale: u64) {
        let n = self.rng.gen_range(1..=3);
        for _ in 0..n {
            let id = self.fresh();
            match self.rng.gen_range(0..4) {
                0 => {
                    let k = self.near_index(o.size, scale);
                    self.line(format!("%p{id} = gep {}, [{k} x {scale}]", o.name));
                }
                1 => {
                    let d = self.rng.gen_range(1..3);
                    self.line(format!("%d{id} = add {j}, {d}"));
                    self.line(format!("%p{id} = gep {}, [%d{id} x {scale}]", o.name));
                }
                _ => self.line(format!("%p{id} = gep {}, [{j} x {scale}]", o.name)),
            }
            let size = if self.rng.gen_bool(0.8) {
                scale
            } else {
                let k = SIZES.iter().position(|&s| s == scale).unwrap();
                SIZES[self.rng.gen_range(0..=k)]
            };
            self.access(&format!("%p{id}"), size);
        }
    }

    fn counted_loop(&mut self) {
        let o = self.pick_obj();
        let scale = *SIZES.choose(&mut self.rng).unwrap();
        let elems = (o.size / scale).max(1);
        let bound = if self.rng.gen_bool(0.7) {
            elems
        } else {
            self.rng.gen_range(1..elems + 3)
        };
        let start = if self.rng.gen_bool(0.8) { 0 } else { self.rng.gen_range(0..elems + 2) };
        let id = self.fresh();
        let pre = self.label.clone();
        let j = format!("%j{id}");
        if self.rng.gen_bool(0.6) {
            // Bottom-tested: header is the latch.
            self.line(format!("jmp lh{id}"));
            self.block(format!("lh{id}"));
            self.line(format!("{j} = phi [{start}, {pre}], [%jn{id}, lh{id}]"));
            self.loop_body(&j, &o, scale);
            self.line(format!("%jn{id} = add {j}, 1"));
            let cmp = if self.rng.gen_bool(0.85) {
                format!("cmp lt %jn{id}, {bound}")
            } else {
                format!("cmp le %jn{id}, {bound}")
            };
            self.line(format!("%c{id} = {cmp}"));
            self.line(format!("br %c{id}, lh{id}, lx{id}"));
        } else {
            // Top-tested with a separate body block.
            self.line(format!("jmp lh{id}"));
            self.block(format!("lh{id}"));
            self.line(format!("{j} = phi [{start}, {pre}], [%jn{id}, lb{id}]"));
            self.line(format!("%c{id} = cmp lt {j}, {bound}"));
            self.line(format!("br %c{id}, lb{id}, lx{id}"));
            self.block(format!("lb{id}"));
            self.loop_body(&j, &o, scale);
            self.line(format!("%jn{id} = add {j}, 1"));
            self.line(format!("jmp lh{id}"));
        }
        self.block(format!("lx{id}"));
    }

    fn nested_loop(&mut self) {
        let o = self.pick_obj();
        let scale = *SIZES.choose(&mut self.rng).unwrap();
        let elems = (o.size / scale).max(1);
        let outer = self.rng.gen_range(1..4);
        let inner = if self.rng.gen_bool(0.7) { elems } else { elems + 1 };
        let id = self.fresh();
        let pre = self.label.clone();
        self.line(format!("jmp oh{id}"));
        self.block(format!("oh{id}"));
        self.line(format!("%o{id} = phi [0, {pre}], [%on{id}, ol{id}]"));
        self.line(format!("jmp ih{id}"));
        self.block(format!("ih{id}"));
        let j = format!("%j{id}");
        self.line(format!("{j} = phi [0, oh{id}], [%jn{id}, ih{id}]"));
        self.loop_body(&j, &o, scale);
        self.line(format!("%jn{id} = add {j}, 1"));
        self.line(format!("%c{id} = cmp lt %jn{id}, {inner}"));
        self.line(format!("br %c{id}, ih{id}, ol{id}"));
        self.block(format!("ol{id}"));
        self.line(format!("%on{id} = add %o{id}, 1"));
        self.line(format!("%oc{id} = cmp lt %on{id}, {outer}"));
        self.line(format!("br %oc{id}, oh{id}, ox{id}"));
        self.block(format!("ox{id}"));
    }

    fn neighbor_cluster(&mut self) {
        let o = self.pick_obj();
        let base = self.rng.gen_range(0..o.size + 8) & !3;
        let var = if self.rng.gen_bool(0.25) {
            let inp = self.input();
            let id = self.fresh();
            self.line(format!("%m{id} = cmp lt {inp}, 2"));
            Some(inp)
        } else {
            None
        };
        let n = self.rng.gen_range(2..=4);
        let mut off = base;
        for _ in 0..n {
            let size = *SIZES.choose(&mut self.rng).unwrap();
            let id = self.fresh();
            let gep = match &var {
                Some(v) => format!("%p{id} = gep {}, [{v} x 8], [{off} x 1]", o.name),
                None => format!("%p{id} = gep {}, [{off} x 1]", o.name),
            };
            self.line(gep);
            self.access(&format!("%p{id}"), size);
            off += if self.rng.gen_bool(0.5) { size } else { self.rng.gen_range(0..6) };
        }
    }

    fn recurring(&mut self) {
        let o = self.pick_obj();
        let size = *SIZES.choose(&mut self.rng).unwrap();
        let k = self.near_index(o.size, size);
        let id = self.fresh();
        let p = format!("%p{id}");
        self.line(format!("{p} = gep {}, [{k} x {size}]", o.name));
        for _ in 0..self.rng.gen_range(2..=4) {
            self.access(&p, size);
        }
    }

    fn free_one(&mut self) {
        let heap: Vec<usize> = (0..self.objs.len()).filter(|&i| self.objs[i].kind == ObjKind::Heap).collect();
        let Some(&i) = heap.choose(&mut self.rng) else {
            return self.new_object();
        };
        if self.objs[i].freed && self.rng.gen_bool(0.7) {
            return;
        }
        let name = self.objs[i].name.clone();
        self.line(format!("call free({name})"));
        self.objs[i].freed = true;
    }

    fn intercept(&mut self) {
        let d = self.pick_obj();
        let s = self.pick_obj();
        let n = if self.rng.gen_bool(0.3) {
            self.input()
        } else {
            let max = d.size.min(s.size);
            format!("{}", self.rng.gen_range(0..max + 4))
        };
        match self.rng.gen_range(0..4) {
            0 => self.line(format!("call memset({}, 65, {n})", d.name)),
            1 => self.line(format!("call memcpy({}, {}, {n})", d.name, s.name)),
            2 => {
                // Terminate the source somewhere near its end first.
                let t = self.rng.gen_range(0..s.size + 2);
                let id = self.fresh();
                self.line(format!("%t{id} = gep {}, [{t} x 1]", s.name));
                self.line(format!("store i8 0, %t{id}"));
                self.line(format!("call strcpy({}, {})", d.name, s.name));
            }
            _ => {
                let t = self.rng.gen_range(0..s.size / 4 + 2);
                let id = self.fresh();
                self.line(format!("%t{id} = gep {}, [{t} x 4]", s.name));
                self.line(format!("store i32 0, %t{id}"));
                self.line(format!("call wcscpy({}, {})", d.name, s.name));
            }
        }
    }

    fn helper_call(&mut self) {
        let o = self.pick_obj();
        let id = self.fresh();
        if self.rng.gen_bool(0.5) {
            let i = if self.rng.gen_bool(0.5) {
                self.input()
            } else {
                format!("{}", self.near_index(o.size, 4))
            };
            self.line(format!("call touch({}, {i})", o.name));
        } else {
            self.line(format!("%r{id} = call peek({})", o.name));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate;

    #[test]
    fn many_seeds_validate() {
        for seed in 0..300 {
            let g = generate(seed, GenConfig::default());
            if let Err(v) = validate(&g.module) {
                panic!("seed {seed}: {v:?}\n{}", g.source);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(42, GenConfig::default());
        let b = generate(42, GenConfig::default());
        assert_eq!(a.source, b.source);
        assert_ne!(a.source, generate(43, GenConfig::default()).source);
    }
}
