//! Redundant check elimination over the check-site table.
//!
//! Rules run in a fixed order per function: unsat, loop, recurring,
//! neighbor. Each only looks at sites still active, so a site is eliminated
//! by at most one rule and a second run finds nothing new.

mod bounds;
mod rules;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bounds::{
    access_in_bounds, addr_expr, guard_bound, index_bound, is_safe_access, phi_bound, resolve_object, AddrExpr,
    FnAnalysis, Root,
};
pub use rules::{optimize_neighbors, remove_loop_checks, remove_recurring, remove_unsatisfiable};

use crate::instrument::{Instrumentation, Rule, SiteId, SiteStatus};
use crate::ir::{FuncId, Module};

/// Minimum redzone size assumed by the triple rule.
pub const MIN_RD_SZ: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptToggles {
    pub unsat: bool,
    #[serde(rename = "loop")]
    pub loops: bool,
    pub recurring: bool,
    pub neighbor: bool,
}

impl Default for OptToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl OptToggles {
    pub fn all() -> Self {
        OptToggles {
            unsat: true,
            loops: true,
            recurring: true,
            neighbor: true,
        }
    }

    pub fn none() -> Self {
        OptToggles {
            unsat: false,
            loops: false,
            recurring: false,
            neighbor: false,
        }
    }

    pub fn any(self) -> bool {
        self.unsat || self.loops || self.recurring || self.neighbor
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoopReport {
    pub function: String,
    pub header: String,
    pub depth: u32,
    /// Sites whose innermost loop is this one.
    pub sites: usize,
    pub eliminated: usize,
    pub eliminated_by_loop_rule: usize,
}

impl LoopReport {
    pub fn ratio(&self) -> f64 {
        if self.sites == 0 {
            0.0
        } else {
            self.eliminated as f64 / self.sites as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EliminationReport {
    pub eliminated: BTreeMap<Rule, Vec<SiteId>>,
    pub loops: Vec<LoopReport>,
    /// Functions skipped by the unsat and loop rules.
    pub irreducible: Vec<String>,
}

impl EliminationReport {
    pub fn count(&self, rule: Rule) -> usize {
        self.eliminated.get(&rule).map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.eliminated.values().map(Vec::len).sum()
    }
}

/// Apply the enabled rules to every function. Under `recover` (reporting
/// continues after a violation) the recurring rule and the triple part of
/// the neighbor rule are off: both let one check stand in for another, which
/// only preserves reports when the first report ends the run.
pub fn run_optimizer(module: &Module, ins: &mut Instrumentation, toggles: OptToggles, recover: bool) -> EliminationReport {
    let mut report = EliminationReport::default();
    for i in 0..module.functions.len() {
        let a = FnAnalysis::new(module, FuncId(i));
        if let Err(e) = &a.loops {
            report.irreducible.push(e.function.clone());
        }
        let mut add = |rule: Rule, ids: Vec<SiteId>| {
            report.eliminated.entry(rule).or_default().extend(ids);
        };
        if toggles.unsat {
            add(Rule::Unsat, remove_unsatisfiable(&a, ins));
        }
        if toggles.loops {
            add(Rule::Loop, remove_loop_checks(&a, ins));
        }
        if toggles.recurring && !recover {
            add(Rule::Recurring, remove_recurring(&a, ins));
        }
        if toggles.neighbor {
            add(Rule::Neighbor, optimize_neighbors(&a, ins, !recover));
        }
        if let Ok(li) = &a.loops {
            for (li_idx, l) in li.loops.iter().enumerate() {
                let mut lr = LoopReport {
                    function: a.f.name.clone(),
                    header: a.f.block(l.header).label.clone(),
                    depth: l.depth,
                    sites: 0,
                    eliminated: 0,
                    eliminated_by_loop_rule: 0,
                };
                for s in ins.sites_of(a.fid) {
                    let inner = li.innermost_loop(s.at.block).map(|x| std::ptr::eq(x, &li.loops[li_idx]));
                    if inner != Some(true) {
                        continue;
                    }
                    lr.sites += 1;
                    if let SiteStatus::Eliminated(r) = s.status {
                        lr.eliminated += 1;
                        if r == Rule::Loop {
                            lr.eliminated_by_loop_rule += 1;
                        }
                    }
                }
                report.loops.push(lr);
            }
        }
    }
    report
}
