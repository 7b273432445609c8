//! Dominator tree via the Cooper–Harvey–Kennedy iterative algorithm.

use super::{BlockId, Function, InstRef};

#[derive(Clone, Debug)]
pub struct DomTree {
    /// Immediate dominator per block; the entry maps to itself and
    /// unreachable blocks map to `None`.
    idom: Vec<Option<BlockId>>,
    /// Position of each reachable block in reverse postorder.
    rpo_index: Vec<Option<usize>>,
    rpo: Vec<BlockId>,
}

/// Reverse postorder of the blocks reachable from the entry.
pub(crate) fn reverse_postorder(f: &Function) -> Vec<BlockId> {
    let n = f.blocks.len();
    let succs: Vec<Vec<BlockId>> = f.blocks.iter().map(|b| b.successors()).collect();
    let mut visited = vec![false; n];
    let mut post = Vec::with_capacity(n);
    let mut stack = vec![(Function::ENTRY, 0usize)];
    visited[0] = true;
    while let Some((b, i)) = stack.last_mut() {
        if let Some(&s) = succs[b.0].get(*i) {
            *i += 1;
            if s.0 < n && !visited[s.0] {
                visited[s.0] = true;
                stack.push((s, 0));
            }
        } else {
            post.push(*b);
            stack.pop();
        }
    }
    post.reverse();
    post
}

impl DomTree {
    pub fn compute(f: &Function) -> Self {
        let n = f.blocks.len();
        let rpo = reverse_postorder(f);
        let mut rpo_index = vec![None; n];
        for (i, b) in rpo.iter().enumerate() {
            rpo_index[b.0] = Some(i);
        }
        let preds = f.predecessors();
        let mut idom: Vec<Option<BlockId>> = vec![None; n];
        idom[0] = Some(Function::ENTRY);

        let intersect = |idom: &[Option<BlockId>], mut a: BlockId, mut b: BlockId| {
            while a != b {
                while rpo_index[a.0] > rpo_index[b.0] {
                    a = idom[a.0].expect("processed block");
                }
                while rpo_index[b.0] > rpo_index[a.0] {
                    b = idom[b.0].expect("processed block");
                }
            }
            a
        };

        let mut changed = true;
        while changed {
            changed = false;
            for &b in rpo.iter().skip(1) {
                let mut new_idom: Option<BlockId> = None;
                for &p in &preds[b.0] {
                    if idom[p.0].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new_idom.is_some() && idom[b.0] != new_idom {
                    idom[b.0] = new_idom;
                    changed = true;
                }
            }
        }
        DomTree {
            idom,
            rpo_index,
            rpo,
        }
    }

    /// Immediate dominator; `None` for the entry and for unreachable blocks.
    pub fn idom(&self, b: BlockId) -> Option<BlockId> {
        if b == Function::ENTRY {
            return None;
        }
        self.idom[b.0]
    }

    pub fn is_reachable(&self, b: BlockId) -> bool {
        self.rpo_index[b.0].is_some()
    }

    pub fn reverse_postorder(&self) -> &[BlockId] {
        &self.rpo
    }

    /// Reflexive block dominance. Unreachable blocks are dominated by every
    /// block; an unreachable block dominates nothing reachable.
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        if !self.is_reachable(b) {
            return true;
        }
        if !self.is_reachable(a) {
            return false;
        }
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            match self.idom(cur) {
                Some(next) => cur = next,
                None => return false,
            }
        }
    }

    /// Reflexive instruction dominance: same block means earlier-or-equal
    /// position, otherwise block dominance.
    pub fn dominates_inst(&self, a: InstRef, b: InstRef) -> bool {
        if a.block == b.block {
            a.idx <= b.idx
        } else {
            self.dominates(a.block, b.block)
        }
    }

    pub fn strictly_dominates_inst(&self, a: InstRef, b: InstRef) -> bool {
        a != b && self.dominates_inst(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn func(src: &str) -> Function {
        parse_module(src).unwrap().functions.remove(0)
    }

    #[test]
    fn diamond() {
        let f = func(
            "fn main { a: br 1, b, c \n b: jmp d \n c: jmp d \n d: ret }",
        );
        let d = DomTree::compute(&f);
        let (a, b, c, dd) = (BlockId(0), BlockId(1), BlockId(2), BlockId(3));
        assert_eq!(d.idom(b), Some(a));
        assert_eq!(d.idom(c), Some(a));
        assert_eq!(d.idom(dd), Some(a));
        assert!(!d.dominates(b, dd));
    }

    #[test]
    fn straight_line_instruction_order() {
        let f = func(
            "fn main { e: %a = alloca 8 \n %b = add 1, 2 \n store i8 1, %a \n %c = add 1, 2 \n \
             %d = add 1, 2 \n %x = cmp lt %b, 3 \n ret }",
        );
        let d = DomTree::compute(&f);
        let store = InstRef::new(BlockId(0), 2);
        let cmp = InstRef::new(BlockId(0), 5);
        assert!(d.dominates_inst(store, cmp));
        assert!(!d.dominates_inst(cmp, store));
    }

    #[test]
    fn loop_header_dominates_body() {
        let f = func("fn main { e: jmp h \n h: br 1, b, x \n b: jmp h \n x: ret }");
        let d = DomTree::compute(&f);
        let (h, b) = (BlockId(1), BlockId(2));
        assert!(d.dominates(h, b));
        assert!(!d.dominates(b, h));
    }

    #[test]
    fn unreachable_block() {
        let f = func("fn main { e: ret \n u: jmp e }");
        let d = DomTree::compute(&f);
        assert!(!d.is_reachable(BlockId(1)));
        assert!(d.dominates(BlockId(0), BlockId(1)));
        assert!(!d.dominates(BlockId(1), BlockId(0)));
    }
}
