use std::collections::HashMap;

use crate::instrument::{Constituent, Instrumentation, Rule, SiteId, SiteStatus};
use crate::ir::{AccessSize, Inst, InstRef, Value};

use super::bounds::{access_in_bounds, addr_expr, FnAnalysis, Root};
use super::MIN_RD_SZ;

fn eliminate(ins: &mut Instrumentation, id: SiteId, rule: Rule, out: &mut Vec<SiteId>) {
    ins.sites[id].status = SiteStatus::Eliminated(rule);
    out.push(id);
}

fn active_sites(a: &FnAnalysis, ins: &Instrumentation) -> Vec<SiteId> {
    ins.sites_of(a.fid)
        .filter(|s| s.status.is_active())
        .map(|s| s.id)
        .collect()
}

/// Constant or branch-guarded indexes on stack/global objects outside loops.
pub fn remove_unsatisfiable(a: &FnAnalysis, ins: &mut Instrumentation) -> Vec<SiteId> {
    let Ok(loops) = &a.loops else { return vec![] };
    let mut out = Vec::new();
    for id in active_sites(a, ins) {
        let at = ins.sites[id].at;
        if loops.depth(at) == 0 && access_in_bounds(a, at, false) {
            eliminate(ins, id, Rule::Unsat, &mut out);
        }
    }
    out
}

/// Sites in single-level loops whose every index is provably in bounds,
/// including loop-header phis bounded by the latch compare.
pub fn remove_loop_checks(a: &FnAnalysis, ins: &mut Instrumentation) -> Vec<SiteId> {
    let Ok(loops) = &a.loops else { return vec![] };
    let mut out = Vec::new();
    for id in active_sites(a, ins) {
        let at = ins.sites[id].at;
        if loops.depth(at) == 1 && access_in_bounds(a, at, true) {
            eliminate(ins, id, Rule::Loop, &mut out);
        }
    }
    out
}

fn access_of(inst: &Inst) -> Option<(Value, AccessSize, bool)> {
    match inst {
        Inst::Load { ptr, size, .. } => Some((*ptr, *size, false)),
        Inst::Store { ptr, size, .. } => Some((*ptr, *size, true)),
        _ => None,
    }
}

/// Later accesses through the same SSA pointer with the same width, in the
/// same block, with no call, alloca or unrelated store in between.
pub fn remove_recurring(a: &FnAnalysis, ins: &mut Instrumentation) -> Vec<SiteId> {
    let mut out = Vec::new();
    for b in a.f.block_ids() {
        let mut first: HashMap<(Value, AccessSize), SiteId> = HashMap::new();
        for (i, inst) in a.f.block(b).insts.iter().enumerate() {
            if matches!(inst, Inst::Call { .. } | Inst::Alloca { .. }) {
                first.clear();
                continue;
            }
            let Some((ptr, size, is_store)) = access_of(inst) else { continue };
            let id = ins.site_id_at(a.fid, InstRef::new(b, i)).expect("every access has a site");
            match first.get(&(ptr, size)) {
                Some(&f) => {
                    if ins.sites[id].status.is_active() {
                        ins.sites[f].pinned = true;
                        eliminate(ins, id, Rule::Recurring, &mut out);
                    }
                }
                None => {
                    if is_store {
                        first.clear();
                    }
                    first.insert((ptr, size), id);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Cand {
    id: SiteId,
    root: Root,
    vars: Vec<(crate::ir::Reg, u64)>,
    off: i64,
    size: u64,
}

/// Runs of loads and stores separated only by gep, cmp and arithmetic.
fn windows(a: &FnAnalysis, ins: &Instrumentation) -> Vec<Vec<Cand>> {
    let mut out = Vec::new();
    for b in a.f.block_ids() {
        let mut cur: Vec<Cand> = Vec::new();
        for (i, inst) in a.f.block(b).insts.iter().enumerate() {
            match inst {
                Inst::Gep { .. } | Inst::Cmp { .. } | Inst::Bin { .. } => {}
                Inst::Load { .. } | Inst::Store { .. } => {
                    let id = ins.site_id_at(a.fid, InstRef::new(b, i)).unwrap();
                    let (ptr, size, _) = access_of(inst).unwrap();
                    let e = addr_expr(a, ptr);
                    let (vars, off) = e.split();
                    cur.push(Cand {
                        id,
                        root: e.root,
                        vars,
                        off,
                        size: size.bytes(),
                    });
                }
                _ => {
                    if cur.len() > 1 {
                        out.push(std::mem::take(&mut cur));
                    }
                    cur.clear();
                }
            }
        }
        if cur.len() > 1 {
            out.push(cur);
        }
    }
    out
}

fn disjoint(x: &Cand, y: &Cand) -> bool {
    x.off.wrapping_add(x.size as i64) <= y.off || y.off.wrapping_add(y.size as i64) <= x.off
}

/// Neighbor optimization: merge accesses sharing one aligned granule into a
/// single check, then drop the middle of close triples.
pub fn optimize_neighbors(a: &FnAnalysis, ins: &mut Instrumentation, triples: bool) -> Vec<SiteId> {
    let mut out = Vec::new();
    for win in windows(a, ins) {
        let live: Vec<Cand> = win
            .into_iter()
            .filter(|c| ins.sites[c.id].status.is_active())
            .collect();

        // Merge.
        let mut merged_away = vec![false; live.len()];
        for i in 0..live.len() {
            let s = &live[i];
            if merged_away[i] || !mergeable_root(s) || !ins.sites[s.id].merged.is_empty() {
                continue;
            }
            let granule = s.off.div_euclid(8);
            if s.off.rem_euclid(8) as u64 + s.size > 8 {
                continue;
            }
            let mut group = vec![i];
            for j in i + 1..live.len() {
                let t = &live[j];
                if merged_away[j]
                    || ins.sites[t.id].pinned
                    || t.root != s.root
                    || t.vars != s.vars
                    || t.off.div_euclid(8) != granule
                    || t.off.rem_euclid(8) as u64 + t.size > 8
                    || !group.iter().all(|&g| disjoint(&live[g], t))
                {
                    continue;
                }
                group.push(j);
            }
            if group.len() < 2 {
                continue;
            }
            let constituents: Vec<Constituent> = group
                .iter()
                .map(|&g| {
                    let c = &ins.sites[live[g].id];
                    Constituent {
                        site: c.id,
                        delta: live[g].off.wrapping_sub(s.off),
                        size: c.size,
                        kind: c.kind,
                    }
                })
                .collect();
            for &g in &group[1..] {
                merged_away[g] = true;
                eliminate(ins, live[g].id, Rule::Neighbor, &mut out);
            }
            ins.sites[s.id].merged = constituents;
            ins.sites[s.id].pinned = true;
        }

        if !triples {
            continue;
        }
        // Triples: equal size, naturally aligned, stack or global objects.
        let mut changed = true;
        while changed {
            changed = false;
            let cands: Vec<&Cand> = live
                .iter()
                .filter(|c| {
                    ins.sites[c.id].status.is_active()
                        && matches!(c.root, Root::Alloca(_) | Root::Global(_))
                        && c.off.rem_euclid(c.size as i64) == 0
                        && c.vars.iter().all(|(_, sc)| sc % c.size == 0)
                })
                .collect();
            for m in &cands {
                if ins.sites[m.id].pinned {
                    continue;
                }
                let same = |c: &&&Cand| c.id != m.id && c.root == m.root && c.vars == m.vars && c.size == m.size;
                let lo = cands.iter().filter(same).filter(|c| c.off < m.off).map(|c| c.off).max();
                let hi = cands.iter().filter(same).filter(|c| c.off > m.off).map(|c| c.off).min();
                if let (Some(lo), Some(hi)) = (lo, hi) {
                    if hi.wrapping_sub(lo) < MIN_RD_SZ as i64 {
                        eliminate(ins, m.id, Rule::Neighbor, &mut out);
                        changed = true;
                        break;
                    }
                }
            }
        }
    }
    out
}

fn mergeable_root(c: &Cand) -> bool {
    matches!(c.root, Root::Alloca(_) | Root::Global(_) | Root::Malloc(_)) && c.vars.iter().all(|(_, sc)| sc % 8 == 0)
}
