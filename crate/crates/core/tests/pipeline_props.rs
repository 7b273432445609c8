use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use minisan::alloc::SpaceConfig;
use minisan::checker::{CheckMode, SiteRef};
use minisan::driver::{prepare, prepare_module, Prepared};
use minisan::gen::{generate, GenConfig, Generated};
use minisan::instrument::{collect_interesting_accesses, Instrumentation, Rule, SiteStatus};
use minisan::ir::{DomTree, FuncId, LoopInfo};
use minisan::optimizer::{run_optimizer, OptToggles};
use minisan::runtime::{Interpreter, RunOptions, RunResult};

fn small_space() -> SpaceConfig {
    SpaceConfig {
        space_size: 1 << 20,
        global_arena: 32 << 10,
        stack_arena: 128 << 10,
        ..SpaceConfig::default()
    }
}

fn opts(mode: CheckMode, halt: bool) -> RunOptions {
    RunOptions {
        mode,
        halt_on_error: halt,
        space: small_space(),
        ..RunOptions::default()
    }
}

fn prep(g: &Generated, opt: OptToggles, recover: bool) -> Prepared {
    prepare(&g.source, opt, recover).unwrap()
}

fn inputs(g: &Generated, salt: u64) -> Vec<u64> {
    g.random_inputs(&mut ChaCha8Rng::seed_from_u64(g.seed ^ salt))
}

/// Run and keep the final memory.
fn exec(p: &Prepared, inp: &[u64], o: RunOptions) -> (RunResult, Vec<u8>) {
    let mut i = Interpreter::new(&p.module, &p.ins, o);
    let r = i.run(inp);
    let mem = i.space().map(|s| s.memory().to_vec()).unwrap_or_default();
    (r, mem)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_access_has_one_site(seed in any::<u64>()) {
        let g = generate(seed, GenConfig::default());
        let p = prep(&g, OptToggles::all(), false);
        let mut ids = Vec::new();
        for (fi, f) in p.module.functions.iter().enumerate() {
            let acc = collect_interesting_accesses(f);
            prop_assert_eq!(p.ins.sites_of(FuncId(fi)).count(), acc.len());
            for (at, kind, size) in acc {
                let s = p.ins.site_at(FuncId(fi), at).unwrap();
                prop_assert_eq!((s.kind, s.size), (kind, size));
                ids.push(s.id);
            }
        }
        prop_assert_eq!(ids, (0..p.ins.sites.len()).collect::<Vec<_>>());
        // Merged checks only cover neighbor-eliminated sites of the same function.
        for s in &p.ins.sites {
            for c in s.merged.iter().filter(|c| c.site != s.id) {
                let other = &p.ins.sites[c.site];
                prop_assert_eq!(other.status, SiteStatus::Eliminated(Rule::Neighbor));
                prop_assert_eq!(other.func, s.func);
            }
            if !s.merged.is_empty() {
                prop_assert!(s.status.is_active());
            }
        }
    }

    #[test]
    fn optimizer_is_idempotent(seed in any::<u64>(), recover in any::<bool>()) {
        let g = generate(seed, GenConfig::default());
        let mut ins = Instrumentation::new(&g.module);
        run_optimizer(&g.module, &mut ins, OptToggles::all(), recover);
        let once = ins.clone();
        let again = run_optimizer(&g.module, &mut ins, OptToggles::all(), recover);
        prop_assert_eq!(again.total(), 0);
        prop_assert_eq!(ins, once);
    }

    #[test]
    fn loop_rule_only_touches_depth_one(seed in any::<u64>()) {
        let g = generate(seed, GenConfig { statements: 10, ..GenConfig::default() });
        let p = prep(&g, OptToggles::all(), false);
        for s in p.ins.eliminated_by(Rule::Loop) {
            let f = p.module.function(s.func);
            let dom = DomTree::compute(f);
            let li = LoopInfo::compute(f, &dom).unwrap();
            prop_assert_eq!(li.depth(s.at), 1);
        }
    }

    #[test]
    fn recover_mode_disables_stand_in_rules(seed in any::<u64>()) {
        let g = generate(seed, GenConfig::default());
        let p = prep(&g, OptToggles::all(), true);
        prop_assert_eq!(p.eliminations.count(Rule::Recurring), 0);
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>()) {
        let g = generate(seed, GenConfig::default());
        let p = prep(&g, OptToggles::all(), false);
        let inp = inputs(&g, 1);
        let a = exec(&p, &inp, opts(CheckMode::TwoStage, true));
        let b = exec(&p, &inp, opts(CheckMode::TwoStage, true));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checking_does_not_change_clean_programs(seed in any::<u64>()) {
        let g = generate(seed, GenConfig::default());
        let inp = inputs(&g, 2);
        for opt in [OptToggles::none(), OptToggles::all()] {
            let p = prep(&g, opt, false);
            let (slow, mem) = exec(&p, &inp, opts(CheckMode::SlowOnly, true));
            if !slow.reports.is_empty() || slow.is_fault() {
                continue;
            }
            for mode in [CheckMode::NoCheck, CheckMode::TwoStage] {
                let (r, m) = exec(&p, &inp, opts(mode, true));
                prop_assert!(r.reports.is_empty());
                prop_assert_eq!(&r.exit, &slow.exit);
                prop_assert_eq!(&r.stats.dynamic_accesses, &slow.stats.dynamic_accesses);
                prop_assert!(m == mem, "final memory differs in {}", mode.name());
            }
        }
    }

    #[test]
    fn check_counters_follow_executed_sites(seed in any::<u64>()) {
        let g = generate(seed, GenConfig::default());
        let inp = inputs(&g, 3);

        let plain = prep(&g, OptToggles::none(), false);
        let (two, _) = exec(&plain, &inp, opts(CheckMode::TwoStage, true));
        let (slow, _) = exec(&plain, &inp, opts(CheckMode::SlowOnly, true));
        if two.reports.is_empty() && !two.is_fault() {
            prop_assert_eq!(two.stats.fast_checks_executed, two.stats.dynamic_accesses);
            prop_assert_eq!(two.stats.checks_executed, two.stats.dynamic_accesses);
            prop_assert!(two.stats.slow_checks_executed <= two.stats.fast_checks_executed);
            prop_assert!(two.stats.shadow_loads <= slow.stats.shadow_loads);
        }
        if slow.reports.is_empty() && !slow.is_fault() {
            prop_assert_eq!(slow.stats.slow_checks_executed, slow.stats.dynamic_accesses);
            prop_assert_eq!(slow.stats.fast_checks_executed, 0);
        }

        let opt = prep(&g, OptToggles::all(), false);
        let (r, _) = exec(&opt, &inp, opts(CheckMode::TwoStage, true));
        if r.reports.is_empty() && !r.is_fault() {
            let expected: u64 = opt
                .ins
                .sites
                .iter()
                .filter(|s| s.status.is_active())
                .map(|s| r.site_hits[s.id] * s.merged.len().max(1) as u64)
                .sum();
            prop_assert_eq!(r.stats.fast_checks_executed, expected);
            for s in opt.ins.sites.iter().filter(|s| !s.status.is_active()) {
                prop_assert_eq!(r.site_hits[s.id], 0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Sites removed by the unsat and loop rules are never reported by an
    /// unoptimized slow-only run in recover mode, over every input the
    /// generator can draw.
    #[test]
    fn eliminated_sites_never_fire(seed in any::<u64>()) {
        let g = generate(seed, GenConfig { num_inputs: 1, ..GenConfig::default() });
        let opt = prepare_module(g.module.clone(), OptToggles::all(), true).unwrap();
        let proven: BTreeSet<usize> = opt
            .ins
            .eliminated_by(Rule::Unsat)
            .chain(opt.ins.eliminated_by(Rule::Loop))
            .map(|s| s.id)
            .collect();
        let plain = prep(&g, OptToggles::none(), true);
        let o = opts(CheckMode::SlowOnly, false);
        let mut interp = Interpreter::new(&plain.module, &plain.ins, o);
        for x in 0..=2 * g.max_size {
            let r = interp.run(&[x]);
            for rep in &r.reports {
                if let SiteRef::Check(id) = rep.site {
                    prop_assert!(!proven.contains(&id), "input {}: {} at eliminated site\n{}", x, rep, g.source);
                }
            }
        }
    }
}
