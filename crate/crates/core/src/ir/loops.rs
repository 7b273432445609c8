//! Natural loops from back edges, and per-block loop depth.

use std::collections::BTreeSet;

use thiserror::Error;

use super::{BlockId, DomTree, Function, InstRef};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Loop {
    pub header: BlockId,
    /// Sources of the back edges into `header`.
    pub latches: Vec<BlockId>,
    /// Body blocks including the header.
    pub body: BTreeSet<BlockId>,
    /// Index of the innermost enclosing loop.
    pub parent: Option<usize>,
    /// 1 for an outermost loop.
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("irreducible control flow in `{function}`: edge {from} -> {to} re-enters a cycle below its entry")]
pub struct IrreducibleCfg {
    pub function: String,
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug)]
pub struct LoopInfo {
    pub loops: Vec<Loop>,
    block_depth: Vec<u32>,
    /// Innermost loop per block.
    innermost: Vec<Option<usize>>,
}

impl LoopInfo {
    pub fn compute(f: &Function, dom: &DomTree) -> Result<Self, IrreducibleCfg> {
        let n = f.blocks.len();
        let preds = f.predecessors();

        // Any retreating edge of a DFS that is not a back edge (target does
        // not dominate source) means the CFG is irreducible.
        let mut on_stack = vec![false; n];
        let mut visited = vec![false; n];
        let mut stack = vec![(Function::ENTRY, 0usize)];
        visited[0] = true;
        on_stack[0] = true;
        let succs: Vec<Vec<BlockId>> = f.blocks.iter().map(|b| b.successors()).collect();
        while let Some(&mut (b, ref mut i)) = stack.last_mut() {
            if let Some(&s) = succs[b.0].get(*i) {
                *i += 1;
                if on_stack[s.0] && !dom.dominates(s, b) {
                    return Err(IrreducibleCfg {
                        function: f.name.clone(),
                        from: f.block(b).label.clone(),
                        to: f.block(s).label.clone(),
                    });
                }
                if !visited[s.0] {
                    visited[s.0] = true;
                    on_stack[s.0] = true;
                    stack.push((s, 0));
                }
            } else {
                on_stack[b.0] = false;
                stack.pop();
            }
        }

        let mut loops: Vec<Loop> = Vec::new();
        for &h in dom.reverse_postorder() {
            let latches: Vec<BlockId> = preds[h.0]
                .iter()
                .copied()
                .filter(|&u| dom.is_reachable(u) && dom.dominates(h, u))
                .collect();
            if latches.is_empty() {
                continue;
            }
            let mut body = BTreeSet::new();
            body.insert(h);
            let mut work: Vec<BlockId> = latches.clone();
            while let Some(b) = work.pop() {
                if body.insert(b) {
                    work.extend(preds[b.0].iter().copied().filter(|p| dom.is_reachable(*p)));
                }
            }
            loops.push(Loop {
                header: h,
                latches,
                body,
                parent: None,
                depth: 0,
            });
        }

        // Parent = smallest strictly enclosing loop.
        for i in 0..loops.len() {
            let parent = (0..loops.len())
                .filter(|&j| {
                    j != i
                        && loops[j].body.len() > loops[i].body.len()
                        && loops[j].body.contains(&loops[i].header)
                })
                .min_by_key(|&j| loops[j].body.len());
            loops[i].parent = parent;
        }
        for i in 0..loops.len() {
            let mut d = 1;
            let mut p = loops[i].parent;
            while let Some(j) = p {
                d += 1;
                p = loops[j].parent;
            }
            loops[i].depth = d;
        }

        let mut block_depth = vec![0u32; n];
        let mut innermost: Vec<Option<usize>> = vec![None; n];
        for (i, l) in loops.iter().enumerate() {
            for b in &l.body {
                block_depth[b.0] += 1;
                let replace = match innermost[b.0] {
                    None => true,
                    Some(j) => loops[j].body.len() > l.body.len(),
                };
                if replace {
                    innermost[b.0] = Some(i);
                }
            }
        }
        Ok(LoopInfo {
            loops,
            block_depth,
            innermost,
        })
    }

    pub fn block_depth(&self, b: BlockId) -> u32 {
        self.block_depth[b.0]
    }

    pub fn depth(&self, at: InstRef) -> u32 {
        self.block_depth(at.block)
    }

    pub fn innermost_loop(&self, b: BlockId) -> Option<&Loop> {
        self.innermost[b.0].map(|i| &self.loops[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    fn info(src: &str) -> (Function, Result<LoopInfo, IrreducibleCfg>) {
        let f = parse_module(src).unwrap().functions.remove(0);
        let d = DomTree::compute(&f);
        let li = LoopInfo::compute(&f, &d);
        (f, li)
    }

    #[test]
    fn straight_line_depth_zero() {
        let (f, li) = info("fn main { a: jmp b \n b: ret }");
        let li = li.unwrap();
        assert!(li.loops.is_empty());
        assert!(f.block_ids().all(|b| li.block_depth(b) == 0));
    }

    #[test]
    fn nested_loops() {
        let src = "fn main {
            entry: jmp outer
            outer: %i = phi [0, entry], [%i2, olatch]
              jmp inner
            inner: %j = phi [0, outer], [%j2, inner]
              %j2 = add %j, 1
              %c = cmp lt %j2, 4
              br %c, inner, olatch
            olatch: %i2 = add %i, 1
              %d = cmp lt %i2, 4
              br %d, outer, exit
            exit: ret
        }";
        let (f, li) = info(src);
        let li = li.unwrap();
        assert_eq!(li.loops.len(), 2);
        let inner = f.block_by_label("inner").unwrap();
        let outer = f.block_by_label("outer").unwrap();
        assert_eq!(li.block_depth(inner), 2);
        assert_eq!(li.block_depth(outer), 1);
        assert_eq!(li.block_depth(f.block_by_label("exit").unwrap()), 0);
        let inl = li.innermost_loop(inner).unwrap();
        assert_eq!(inl.header, inner);
        assert_eq!(inl.depth, 2);
        let parent = &li.loops[inl.parent.unwrap()];
        assert!(inl.body.is_subset(&parent.body));
    }

    #[test]
    fn irreducible_rejected() {
        // Two entries into the a<->b cycle.
        let (_, li) = info("fn main { e: br 1, a, b \n a: jmp b \n b: jmp a }");
        let err = li.unwrap_err();
        assert!(err.to_string().contains("irreducible"));
    }
}
