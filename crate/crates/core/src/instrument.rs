//! Check sites: a side table attached to every interesting load and store.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::ir::{AccessSize, FuncId, Function, Inst, InstRef, Module};

pub type SiteId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Load,
    Store,
}

impl AccessKind {
    pub fn name(self) -> &'static str {
        match self {
            AccessKind::Load => "load",
            AccessKind::Store => "store",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Before,
    After,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Unsat,
    Loop,
    Recurring,
    Neighbor,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Unsat, Rule::Loop, Rule::Recurring, Rule::Neighbor];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Unsat => "unsat",
            Rule::Loop => "loop",
            Rule::Recurring => "recurring",
            Rule::Neighbor => "neighbor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "state", content = "rule")]
pub enum SiteStatus {
    Active,
    Eliminated(Rule),
}

impl SiteStatus {
    pub fn is_active(self) -> bool {
        self == SiteStatus::Active
    }
}

impl fmt::Display for SiteStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiteStatus::Active => write!(f, "active"),
            SiteStatus::Eliminated(r) => write!(f, "eliminated:{}", r.name()),
        }
    }
}

/// One access covered by a merged check, addressed relative to the
/// surviving site's pointer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Constituent {
    pub site: SiteId,
    pub delta: i64,
    pub size: AccessSize,
    pub kind: AccessKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CheckSite {
    pub id: SiteId,
    #[serde(skip)]
    pub func: FuncId,
    #[serde(skip)]
    pub at: InstRef,
    pub kind: AccessKind,
    pub size: AccessSize,
    pub placement: Placement,
    pub status: SiteStatus,
    /// Non-empty when this site survived a neighbor merge: every covered
    /// access in program order, itself included.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub merged: Vec<Constituent>,
    /// Another eliminated site relies on this one's check.
    #[serde(skip)]
    pub pinned: bool,
}

/// Every load and store of `f`, in block and instruction order.
pub fn collect_interesting_accesses(f: &Function) -> Vec<(InstRef, AccessKind, AccessSize)> {
    f.insts()
        .filter_map(|(at, inst)| match inst {
            Inst::Load { size, .. } => Some((at, AccessKind::Load, *size)),
            Inst::Store { size, .. } => Some((at, AccessKind::Store, *size)),
            _ => None,
        })
        .collect()
}

/// `(loads, stores)` among the interesting accesses of `f`.
pub fn access_stats(f: &Function) -> (usize, usize) {
    let acc = collect_interesting_accesses(f);
    let loads = acc.iter().filter(|a| a.1 == AccessKind::Load).count();
    (loads, acc.len() - loads)
}

/// One active site per access. Ids start at `first_id`.
pub fn place_check_sites(func: FuncId, f: &Function, first_id: SiteId) -> Vec<CheckSite> {
    collect_interesting_accesses(f)
        .into_iter()
        .enumerate()
        .map(|(i, (at, kind, size))| CheckSite {
            id: first_id + i,
            func,
            at,
            kind,
            size,
            placement: match kind {
                AccessKind::Load => Placement::After,
                AccessKind::Store => Placement::Before,
            },
            status: SiteStatus::Active,
            merged: Vec::new(),
            pinned: false,
        })
        .collect()
}

/// Check sites of a whole module. Ids are dense and follow function, block
/// and instruction order, so they are stable across runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instrumentation {
    pub sites: Vec<CheckSite>,
    index: HashMap<(FuncId, InstRef), SiteId>,
}

impl Instrumentation {
    pub fn new(module: &Module) -> Self {
        let mut sites = Vec::new();
        for (i, f) in module.functions.iter().enumerate() {
            let placed = place_check_sites(FuncId(i), f, sites.len());
            sites.extend(placed);
        }
        let index = sites.iter().map(|s| ((s.func, s.at), s.id)).collect();
        Instrumentation { sites, index }
    }

    pub fn site_at(&self, func: FuncId, at: InstRef) -> Option<&CheckSite> {
        self.index.get(&(func, at)).map(|&i| &self.sites[i])
    }

    pub fn site_id_at(&self, func: FuncId, at: InstRef) -> Option<SiteId> {
        self.index.get(&(func, at)).copied()
    }

    pub fn sites_of(&self, func: FuncId) -> impl Iterator<Item = &CheckSite> {
        self.sites.iter().filter(move |s| s.func == func)
    }

    pub fn active_count(&self) -> usize {
        self.sites.iter().filter(|s| s.status.is_active()).count()
    }

    pub fn eliminated_by(&self, rule: Rule) -> impl Iterator<Item = &CheckSite> {
        self.sites
            .iter()
            .filter(move |s| s.status == SiteStatus::Eliminated(rule))
    }

    /// `SITE id=.. fn=.. block=.. idx=.. kind=.. size=.. status=..`
    pub fn site_line(&self, module: &Module, id: SiteId) -> String {
        let s = &self.sites[id];
        let f = module.function(s.func);
        format!(
            "SITE id={} fn={} block={} idx={} kind={} size={} status={}",
            s.id,
            f.name,
            f.block(s.at.block).label,
            s.at.idx,
            s.kind.name(),
            s.size.bytes(),
            s.status
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    #[test]
    fn sites_and_placement() {
        let m = parse_module(
            "fn main { e: %a = alloca 16 \n store i32 1, %a \n %v = load i64, %a \n \
             call memcpy(%a, %a, 4) \n ret }\n fn f { e: %x = add 1, 2 \n ret }",
        )
        .unwrap();
        let ins = Instrumentation::new(&m);
        assert_eq!(ins.sites.len(), 2);
        assert_eq!(ins.sites[0].placement, Placement::Before);
        assert_eq!(ins.sites[1].placement, Placement::After);
        assert_eq!(access_stats(&m.functions[0]), (1, 1));
        assert_eq!(access_stats(&m.functions[1]), (0, 0));
        assert_eq!(
            ins.site_line(&m, 1),
            "SITE id=1 fn=main block=e idx=2 kind=load size=8 status=active"
        );
    }
}
