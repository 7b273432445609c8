//! Command implementations shared by the CLI, the tests and the Python module.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::SpaceConfig;
use crate::checker::{BugKind, CheckMode, FastMissClass, SiteRef, ViolationReport};
use crate::instrument::{access_stats, Instrumentation};
use crate::ir::{parse_module, validate, Module, ParseError, Violation};
use crate::optimizer::{run_optimizer, EliminationReport, OptToggles};
use crate::runtime::{run, Exit, RunOptions, RunResult};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("invalid program: {}", fmt_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Case { path: PathBuf, message: String },
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub fn read_file(path: &Path) -> Result<String, DriverError> {
    std::fs::read_to_string(path).map_err(|err| DriverError::Io {
        path: path.to_owned(),
        err,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: CheckMode,
    pub halt_on_error: bool,
    pub opt: OptToggles,
    pub space: SpaceConfig,
    pub step_budget: u64,
    pub max_depth: usize,
    /// Seed for the random program generator.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RunOptions::default();
        RunConfig {
            mode: r.mode,
            halt_on_error: r.halt_on_error,
            opt: OptToggles::all(),
            space: r.space,
            step_budget: r.step_budget,
            max_depth: r.max_depth,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, DriverError> {
        toml::from_str(text).map_err(|e| DriverError::Config(e.to_string()))
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            mode: self.mode,
            halt_on_error: self.halt_on_error,
            step_budget: self.step_budget,
            max_depth: self.max_depth,
            audit: false,
            space: self.space,
        }
    }
}

/// A parsed, validated, instrumented and optimized program.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub module: Module,
    pub ins: Instrumentation,
    pub eliminations: EliminationReport,
}

pub fn prepare_module(module: Module, opt: OptToggles, recover: bool) -> Result<Prepared, DriverError> {
    validate(&module).map_err(DriverError::Invalid)?;
    let mut ins = Instrumentation::new(&module);
    let eliminations = if opt.any() {
        run_optimizer(&module, &mut ins, opt, recover)
    } else {
        EliminationReport::default()
    };
    Ok(Prepared {
        module,
        ins,
        eliminations,
    })
}

pub fn prepare(src: &str, opt: OptToggles, recover: bool) -> Result<Prepared, DriverError> {
    prepare_module(parse_module(src)?, opt, recover)
}

/// `1,2,0x10` or one value per line; blank lines and `;` comments skipped.
pub fn parse_inputs(text: &str) -> Result<Vec<u64>, DriverError> {
    text.split([',', '\n'])
        .map(|t| t.split(';').next().unwrap().trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
                Some(h) => u64::from_str_radix(h, 16),
                None => t.parse(),
            };
            r.map_err(|_| DriverError::Config(format!("bad input value {t:?}")))
        })
        .collect()
}

pub fn format_stats(r: &RunResult) -> String {
    let mut out = String::new();
    let v = serde_json::to_value(&r.stats).expect("stats serialize");
    if let serde_json::Value::Object(m) = v {
        for (k, v) in m {
            let _ = writeln!(out, "{k}={v}");
        }
    }
    out
}

/// Text output of a run: report lines, exit line, stats block.
pub fn format_run_text(r: &RunResult) -> String {
    let mut out = String::new();
    for rep in &r.reports {
        let _ = writeln!(out, "{rep}");
    }
    match &r.exit {
        Exit::Normal { value } => {
            let _ = writeln!(out, "EXIT normal value={}", value.map_or("-".into(), |v| v.to_string()));
        }
        Exit::Aborted { report } => {
            let _ = writeln!(out, "EXIT aborted kind={}", report.kind);
        }
        Exit::Fault { fault } => {
            let _ = writeln!(out, "EXIT fault {fault}");
        }
    }
    out.push_str(&format_stats(r));
    out
}

/// Shadow of every arena part used by a finished run.
pub fn shadow_dump(space: &crate::alloc::AddressSpace) -> String {
    let mut out = String::new();
    for (name, (s, e)) in ["globals", "stack", "heap"].iter().zip(space.used_ranges()) {
        if s == e {
            continue;
        }
        let _ = writeln!(out, "; {name} [{s:#x}, {e:#x})");
        out.push_str(&space.shadow().dump(s, e));
    }
    out
}

pub fn cmd_run(cfg: &RunConfig, src: &str, inputs: &[u64]) -> Result<(Prepared, RunResult), DriverError> {
    let p = prepare(src, cfg.opt, !cfg.halt_on_error)?;
    let r = run(&p.module, &p.ins, inputs, &cfg.run_options());
    Ok((p, r))
}

#[derive(Clone, Debug, Serialize)]
pub struct Analysis {
    pub sites: Vec<String>,
    pub loads: usize,
    pub stores: usize,
    pub eliminations: EliminationReport,
}

impl Analysis {
    pub fn to_text(&self, with_eliminations: bool) -> String {
        let mut out = String::new();
        for s in &self.sites {
            let _ = writeln!(out, "{s}");
        }
        let _ = writeln!(out, "ACCESSES loads={} stores={}", self.loads, self.stores);
        if with_eliminations {
            let e = &self.eliminations;
            for rule in crate::instrument::Rule::ALL {
                let ids: Vec<String> = e.eliminated.get(&rule).map_or(vec![], |v| v.iter().map(|i| i.to_string()).collect());
                let _ = writeln!(out, "ELIMINATED rule={} count={} sites=[{}]", rule.name(), ids.len(), ids.join(","));
            }
            for l in &e.loops {
                let _ = writeln!(
                    out,
                    "LOOP fn={} header={} depth={} sites={} eliminated={} by_loop_rule={} ratio={:.3}",
                    l.function,
                    l.header,
                    l.depth,
                    l.sites,
                    l.eliminated,
                    l.eliminated_by_loop_rule,
                    l.ratio()
                );
            }
            for f in &e.irreducible {
                let _ = writeln!(out, "IRREDUCIBLE fn={f}");
            }
        }
        out
    }
}

pub fn cmd_analyze(cfg: &RunConfig, src: &str) -> Result<(Prepared, Analysis), DriverError> {
    let p = prepare(src, cfg.opt, !cfg.halt_on_error)?;
    let (mut loads, mut stores) = (0, 0);
    for f in &p.module.functions {
        let (l, s) = access_stats(f);
        loads += l;
        stores += s;
    }
    let a = Analysis {
        sites: (0..p.ins.sites.len()).map(|i| p.ins.site_line(&p.module, i)).collect(),
        loads,
        stores,
        eliminations: p.eliminations.clone(),
    };
    Ok((p, a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Clean,
    Bug(BugKind),
}

#[derive(Clone, Debug, Serialize)]
pub struct CorpusCase {
    pub path: PathBuf,
    pub expect: Expect,
    pub category: String,
    pub inputs: Vec<u64>,
}

impl CorpusCase {
    /// Read the `; expect:`, `; category:` and `; input:` headers.
    pub fn from_source(path: &Path, src: &str) -> Result<Self, DriverError> {
        let err = |m: String| DriverError::Case {
            path: path.to_owned(),
            message: m,
        };
        let mut expect = None;
        let mut category = None;
        let mut inputs = Vec::new();
        for line in src.lines() {
            let Some(c) = line.trim().strip_prefix(';') else { continue };
            let Some((k, v)) = c.split_once(':') else { continue };
            let v = v.trim();
            match k.trim() {
                "expect" => {
                    expect = Some(if v == "clean" {
                        Expect::Clean
                    } else {
                        Expect::Bug(v.parse().map_err(|_| err(format!("unknown verdict {v:?}")))?)
                    })
                }
                "category" => category = Some(v.to_string()),
                "input" => inputs = parse_inputs(v)?,
                _ => {}
            }
        }
        Ok(CorpusCase {
            path: path.to_owned(),
            expect: expect.ok_or_else(|| err("missing `; expect:` header".into()))?,
            category: category.unwrap_or_else(|| "uncategorized".into()),
            inputs,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub path: PathBuf,
    pub category: String,
    pub expect: Expect,
    /// Kind of the first report, if any.
    pub got: Option<BugKind>,
    pub reports: usize,
    pub fault: Option<String>,
    pub ok: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CategoryRow {
    pub buggy: usize,
    pub detected: usize,
    pub wrong_kind: usize,
    pub missed: usize,
    pub clean: usize,
    pub false_positive: usize,
    pub faults: usize,
}

impl CategoryRow {
    fn add(&mut self, o: &CategoryRow) {
        self.buggy += o.buggy;
        self.detected += o.detected;
        self.wrong_kind += o.wrong_kind;
        self.missed += o.missed;
        self.clean += o.clean;
        self.false_positive += o.false_positive;
        self.faults += o.faults;
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CorpusSummary {
    pub rows: BTreeMap<String, CategoryRow>,
    pub total: CategoryRow,
    pub cases: Vec<CaseOutcome>,
}

impl CorpusSummary {
    pub fn mismatches(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.cases.iter().filter(|c| !c.ok)
    }

    pub fn all_ok(&self) -> bool {
        self.cases.iter().all(|c| c.ok)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>9} {:>6} {:>7} {:>6} {:>6} {:>7}",
            "category", "buggy", "detected", "wrong", "missed", "clean", "fp", "faults"
        );
        let row = |out: &mut String, name: &str, r: &CategoryRow| {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>9} {:>6} {:>7} {:>6} {:>6} {:>7}",
                name, r.buggy, r.detected, r.wrong_kind, r.missed, r.clean, r.false_positive, r.faults
            );
        };
        for (name, r) in &self.rows {
            row(&mut out, name, r);
        }
        row(&mut out, "total", &self.total);
        for c in self.mismatches() {
            let _ = writeln!(
                out,
                "MISMATCH {} expect={} got={}{}",
                c.path.display(),
                match c.expect {
                    Expect::Clean => "clean".to_string(),
                    Expect::Bug(k) => k.to_string(),
                },
                c.got.map_or("clean".to_string(), |k| k.to_string()),
                c.fault.as_ref().map_or(String::new(), |f| format!(" fault={f}"))
            );
        }
        out
    }
}

pub fn run_case(cfg: &RunConfig, case: &CorpusCase, src: &str) -> Result<CaseOutcome, DriverError> {
    let (_, r) = cmd_run(cfg, src, &case.inputs)?;
    let got = r.reports.first().map(|x| x.kind);
    let fault = match &r.exit {
        Exit::Fault { fault } => Some(fault.to_string()),
        _ => None,
    };
    let ok = fault.is_none()
        && match case.expect {
            Expect::Clean => r.reports.is_empty(),
            Expect::Bug(k) => got == Some(k),
        };
    Ok(CaseOutcome {
        path: case.path.clone(),
        category: case.category.clone(),
        expect: case.expect,
        got,
        reports: r.reports.len(),
        fault,
        ok,
    })
}

/// `*.ir` files under `dir`, recursively, sorted.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>, DriverError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_owned()];
    while let Some(d) = stack.pop() {
        let rd = std::fs::read_dir(&d).map_err(|err| DriverError::Io { path: d.clone(), err })?;
        for e in rd {
            let p = e
                .map_err(|err| DriverError::Io { path: d.clone(), err })?
                .path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "ir") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Load every corpus case under `dir`. Files without an `expect` header are
/// skipped.
pub fn load_corpus(dir: &Path) -> Result<Vec<(CorpusCase, String)>, DriverError> {
    let mut out = Vec::new();
    for p in corpus_files(dir)? {
        let src = read_file(&p)?;
        if !src.lines().any(|l| l.trim_start().starts_with("; expect:")) {
            continue;
        }
        out.push((CorpusCase::from_source(&p, &src)?, src));
    }
    Ok(out)
}

pub fn cmd_corpus(cfg: &RunConfig, dir: &Path) -> Result<CorpusSummary, DriverError> {
    let cases = load_corpus(dir)?;
    let outcomes: Vec<CaseOutcome> = cases
        .par_iter()
        .map(|(c, src)| run_case(cfg, c, src))
        .collect::<Result<_, _>>()?;
    let mut s = CorpusSummary::default();
    for o in &outcomes {
        let mut r = CategoryRow::default();
        if o.fault.is_some() {
            r.faults = 1;
        }
        match o.expect {
            Expect::Clean => {
                r.clean = 1;
                if o.reports > 0 {
                    r.false_positive = 1;
                }
            }
            Expect::Bug(k) => {
                r.buggy = 1;
                match o.got {
                    Some(g) if g == k => r.detected = 1,
                    Some(_) => r.wrong_kind = 1,
                    None => r.missed = 1,
                }
            }
        }
        s.rows.entry(o.category.clone()).or_default().add(&r);
        s.total.add(&r);
    }
    s.cases = outcomes;
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceClass {
    /// The fast stage let an access through that the slow stage rejects.
    FastFilter(FastMissClass),
    Unexpected,
}

#[derive(Clone, Debug, Serialize)]
pub struct Divergence {
    pub class: DivergenceClass,
    pub what: String,
    /// The access responsible, as `fn:block:idx inst`.
    pub access: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffRun {
    pub mode: CheckMode,
    pub optimized: bool,
    pub result: RunResult,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffReport {
    pub runs: Vec<DiffRun>,
    pub divergences: Vec<Divergence>,
}

impl DiffReport {
    pub fn unexpected(&self) -> usize {
        self.divergences
            .iter()
            .filter(|d| d.class == DivergenceClass::Unexpected)
            .count()
    }

    pub fn get(&self, mode: CheckMode, optimized: bool) -> &RunResult {
        &self
            .runs
            .iter()
            .find(|r| r.mode == mode && r.optimized == optimized)
            .expect("all six runs present")
            .result
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            let s = &r.result.stats;
            let _ = writeln!(
                out,
                "RUN mode={} opt={} reports={} exit={} fast={} slow={} shadow_loads={}",
                r.mode.name(),
                if r.optimized { "on" } else { "off" },
                r.result.reports.len(),
                r.result.exit_code(),
                s.fast_checks_executed,
                s.slow_checks_executed,
                s.shadow_loads
            );
        }
        for d in &self.divergences {
            let class = match d.class {
                DivergenceClass::FastFilter(c) => match c {
                    FastMissClass::Straddle => "known:straddle",
                    FastMissClass::ProgramOverwrite => "known:program-overwrite",
                },
                DivergenceClass::Unexpected => "unexpected",
            };
            let _ = writeln!(
                out,
                "DIVERGENCE class={class} {}{}",
                d.what,
                d.access.as_ref().map_or(String::new(), |a| format!(" at {a}"))
            );
        }
        if self.divergences.is_empty() {
            out.push_str("no divergence\n");
        }
        out
    }
}

fn describe_site(p: &Prepared, site: SiteRef) -> Option<String> {
    match site {
        SiteRef::Check(id) => {
            let s = p.ins.sites.get(id)?;
            let f = p.module.function(s.func);
            Some(format!(
                "{}:{}:{} `{}`",
                f.name,
                f.block(s.at.block).label,
                s.at.idx,
                p.module.render_inst(f, f.inst(s.at))
            ))
        }
        SiteRef::Interceptor(name) => Some(name.to_string()),
    }
}

type ReportKey = (BugKind, u64, crate::checker::Access, u64);

fn key(r: &ViolationReport) -> ReportKey {
    (r.kind, r.fault_addr, r.access, r.size)
}

fn multiset<T: Ord + Clone>(xs: impl Iterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x).or_default() += 1;
    }
    m
}

/// Optimizer on/off comparison used by `diff` and the soundness tests.
/// In halt mode with the triple rule active a different member of the triple
/// may report first, so only kinds are compared there.
pub fn reports_agree(cfg: &RunConfig, on: &RunResult, off: &RunResult) -> bool {
    let kinds_only = cfg.halt_on_error && cfg.opt.neighbor;
    let fault = |r: &RunResult| match &r.exit {
        Exit::Fault { fault } => Some(fault.name()),
        _ => None,
    };
    if fault(on) != fault(off) {
        return false;
    }
    if kinds_only {
        multiset(on.reports.iter().map(|r| r.kind)) == multiset(off.reports.iter().map(|r| r.kind))
    } else {
        multiset(on.reports.iter().map(key)) == multiset(off.reports.iter().map(key))
    }
}

pub fn cmd_diff(cfg: &RunConfig, src: &str, inputs: &[u64]) -> Result<DiffReport, DriverError> {
    let recover = !cfg.halt_on_error;
    let plain = prepare(src, OptToggles::none(), recover)?;
    let opt = prepare(src, cfg.opt, recover)?;
    let mut runs = Vec::new();
    for mode in [CheckMode::NoCheck, CheckMode::SlowOnly, CheckMode::TwoStage] {
        for (optimized, p) in [(false, &plain), (true, &opt)] {
            let mut o = cfg.run_options();
            o.mode = mode;
            o.audit = mode == CheckMode::TwoStage;
            runs.push(DiffRun {
                mode,
                optimized,
                result: run(&p.module, &p.ins, inputs, &o),
            });
        }
    }
    let mut d = DiffReport {
        runs,
        divergences: Vec::new(),
    };
    let mut divs = Vec::new();

    for m in [CheckMode::SlowOnly, CheckMode::TwoStage] {
        let (on, off) = (d.get(m, true), d.get(m, false));
        if !reports_agree(cfg, on, off) {
            // Eliminated checks stand in for retained ones through the slow
            // predicate; once the fast stage has missed an invalid access the
            // two runs may legitimately part ways.
            let miss = off.fast_misses.first().or(on.fast_misses.first());
            divs.push(Divergence {
                class: miss.map_or(DivergenceClass::Unexpected, |x| DivergenceClass::FastFilter(x.class)),
                what: format!(
                    "optimizer changed {} reports: on={:?} off={:?}",
                    m.name(),
                    d.get(m, true).reports.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
                    d.get(m, false).reports.iter().map(|r| r.to_string()).collect::<Vec<_>>()
                ),
                access: None,
            });
        }
    }

    let slow = d.get(CheckMode::SlowOnly, false);
    let two = d.get(CheckMode::TwoStage, false);
    let mut two_left = multiset(two.reports.iter().map(key));
    for r in &slow.reports {
        match two_left.get_mut(&key(r)) {
            Some(n) if *n > 0 => *n -= 1,
            _ => {
                let miss = two.fast_misses.iter().find(|m| key(&m.report) == key(r));
                divs.push(Divergence {
                    class: miss.map_or(DivergenceClass::Unexpected, |m| DivergenceClass::FastFilter(m.class)),
                    what: format!("two-stage missed {r}"),
                    access: describe_site(&plain, r.site),
                });
                // Everything after the first miss can legitimately differ.
                if cfg.halt_on_error {
                    break;
                }
            }
        }
    }
    let slow_keys = multiset(slow.reports.iter().map(key));
    for r in &two.reports {
        if !slow_keys.contains_key(&key(r)) && two.fast_misses.is_empty() {
            divs.push(Divergence {
                class: DivergenceClass::Unexpected,
                what: format!("two-stage reported {r} that slow-only did not"),
                access: describe_site(&plain, r.site),
            });
        }
    }
    if two.fast_misses.is_empty() && slow.reports == two.reports && two.stats.shadow_loads > slow.stats.shadow_loads {
        divs.push(Divergence {
            class: DivergenceClass::Unexpected,
            what: format!(
                "two-stage shadow_loads {} exceed slow-only {}",
                two.stats.shadow_loads, slow.stats.shadow_loads
            ),
            access: None,
        });
    }
    for optimized in [false, true] {
        let n = d.get(CheckMode::NoCheck, optimized);
        if !n.reports.is_empty() {
            divs.push(Divergence {
                class: DivergenceClass::Unexpected,
                what: "nocheck run produced reports".into(),
                access: None,
            });
        }
    }
    d.divergences = divs;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_parse() {
        assert_eq!(parse_inputs("1, 2,0x10\n; c\n3").unwrap(), vec![1, 2, 16, 3]);
        assert!(parse_inputs("x").is_err());
    }

    #[test]
    fn config_toml() {
        let c = RunConfig::from_toml("mode = \"slow-only\"\nhalt_on_error = false\n[opt]\nloop = false\n[space]\nquarantine_capacity = 128\n").unwrap();
        assert_eq!(c.mode, CheckMode::SlowOnly);
        assert!(!c.opt.loops && c.opt.unsat);
        assert_eq!(c.space.quarantine_capacity, 128);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn case_headers() {
        let c = CorpusCase::from_source(
            Path::new("x.ir"),
            "; expect: heap-use-after-free\n; category: cwe416\n; input: 3,4\nfn main { e: ret }",
        )
        .unwrap();
        assert_eq!(c.expect, Expect::Bug(BugKind::HeapUseAfterFree));
        assert_eq!(c.inputs, vec![3, 4]);
        assert!(CorpusCase::from_source(Path::new("x.ir"), "fn main { e: ret }").is_err());
    }

    #[test]
    fn straddle_is_a_known_divergence() {
        let src = "fn main { e: %p = call malloc(5) \n %q = gep %p, [3 x 1] \n %v = load i32, %q \n ret }";
        let d = cmd_diff(&RunConfig::default(), src, &[]).unwrap();
        assert_eq!(d.unexpected(), 0, "{}", d.to_text());
        assert_eq!(
            d.divergences[0].class,
            DivergenceClass::FastFilter(FastMissClass::Straddle)
        );
        assert_eq!(d.get(CheckMode::SlowOnly, false).reports.len(), 1);
        assert!(d.get(CheckMode::TwoStage, false).reports.is_empty());
    }
}
