//! Python bindings: `import minisan`.

use std::path::Path;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use minisan::alloc::SpaceConfig;
use minisan::checker::{self, CheckMode, ViolationReport};
use minisan::driver::{self, DriverError, Prepared, RunConfig};
use minisan::gen::{generate as gen_program, GenConfig};
use minisan::ir::AccessSize;
use minisan::optimizer::OptToggles;
use minisan::runtime::{Exit, RunOptions, RunResult as CoreResult};
use minisan::shadow::{self, PoisonKind, Verdict};

fn err(e: DriverError) -> PyErr {
    match e {
        DriverError::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn mode(s: &str) -> PyResult<CheckMode> {
    s.parse().map_err(PyValueError::new_err)
}

fn toggles(opt: Option<&Bound<'_, PyDict>>) -> PyResult<OptToggles> {
    let mut t = OptToggles::all();
    if let Some(d) = opt {
        for (k, v) in d.iter() {
            let on: bool = v.extract()?;
            match k.extract::<String>()?.as_str() {
                "unsat" => t.unsat = on,
                "loop" => t.loops = on,
                "recurring" => t.recurring = on,
                "neighbor" => t.neighbor = on,
                other => return Err(PyValueError::new_err(format!("unknown optimizer rule {other:?}"))),
            }
        }
    }
    Ok(t)
}

fn config(mode_name: &str, halt_on_error: bool, opt: Option<&Bound<'_, PyDict>>, magic: u8, quarantine: u64) -> PyResult<RunConfig> {
    let mut c = RunConfig {
        mode: mode(mode_name)?,
        halt_on_error,
        opt: toggles(opt)?,
        ..RunConfig::default()
    };
    c.space.magic.byte = magic;
    c.space.quarantine_capacity = quarantine;
    Ok(c)
}

/// One violation.
#[pyclass(module = "minisan", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Report {
    kind: String,
    addr: u64,
    /// "r" or "w".
    access: String,
    size: u64,
    site: String,
}

impl From<&ViolationReport> for Report {
    fn from(r: &ViolationReport) -> Self {
        Report {
            kind: r.kind.name().to_string(),
            addr: r.fault_addr,
            access: r.access.letter().to_string(),
            size: r.size,
            site: r.site.to_string(),
        }
    }
}

#[pymethods]
impl Report {
    fn __repr__(&self) -> String {
        format!(
            "VIOLATION kind={} addr={:#x} access={} size={} site={}",
            self.kind, self.addr, self.access, self.size, self.site
        )
    }
}

#[pyclass(module = "minisan", frozen)]
struct RunResult {
    inner: CoreResult,
}

#[pymethods]
impl RunResult {
    /// 0 clean, 1 violations, 2 fault.
    #[getter]
    fn exit_code(&self) -> i32 {
        self.inner.exit_code()
    }

    /// "normal", "aborted" or "fault".
    #[getter]
    fn status(&self) -> &'static str {
        match self.inner.exit {
            Exit::Normal { .. } => "normal",
            Exit::Aborted { .. } => "aborted",
            Exit::Fault { .. } => "fault",
        }
    }

    /// Return value of `main` after a normal exit.
    #[getter]
    fn value(&self) -> Option<u64> {
        match self.inner.exit {
            Exit::Normal { value } => value,
            _ => None,
        }
    }

    #[getter]
    fn fault(&self) -> Option<String> {
        match &self.inner.exit {
            Exit::Fault { fault } => Some(fault.to_string()),
            _ => None,
        }
    }

    #[getter]
    fn reports(&self) -> Vec<Report> {
        self.inner.reports.iter().map(Report::from).collect()
    }

    #[getter]
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.stats)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult(status={}, reports={}, exit_code={})",
            self.status(),
            self.inner.reports.len(),
            self.exit_code()
        )
    }

    fn __str__(&self) -> String {
        driver::format_run_text(&self.inner)
    }
}

/// A parsed, validated, instrumented and optimized program.
#[pyclass(module = "minisan", frozen)]
struct Program {
    prepared: Prepared,
    recover: bool,
}

#[pymethods]
impl Program {
    /// `opt` maps rule names (unsat, loop, recurring, neighbor) to bools;
    /// missing rules stay on. `recover` prepares for halt_on_error=False.
    #[new]
    #[pyo3(signature = (source, opt=None, recover=false))]
    fn new(source: &str, opt: Option<&Bound<'_, PyDict>>, recover: bool) -> PyResult<Self> {
        let prepared = driver::prepare(source, toggles(opt)?, recover).map_err(err)?;
        Ok(Program { prepared, recover })
    }

    #[staticmethod]
    #[pyo3(signature = (path, opt=None, recover=false))]
    fn from_file(path: &str, opt: Option<&Bound<'_, PyDict>>, recover: bool) -> PyResult<Self> {
        let src = driver::read_file(Path::new(path)).map_err(err)?;
        Self::new(&src, opt, recover)
    }

    /// SITE lines, one per load or store.
    #[getter]
    fn sites(&self) -> Vec<String> {
        let p = &self.prepared;
        (0..p.ins.sites.len()).map(|i| p.ins.site_line(&p.module, i)).collect()
    }

    /// Per-rule elimination counts and per-loop data.
    #[getter]
    fn eliminations<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.prepared.eliminations)
    }

    #[getter]
    fn active_sites(&self) -> usize {
        self.prepared.ins.active_count()
    }

    /// Execute `main`. Halt mode follows how the program was prepared.
    #[pyo3(signature = (inputs=vec![], mode="two-stage", magic=0x89, quarantine=65536))]
    fn run(&self, inputs: Vec<u64>, mode: &str, magic: u8, quarantine: u64) -> PyResult<RunResult> {
        let mut space = SpaceConfig::default();
        space.magic.byte = magic;
        space.quarantine_capacity = quarantine;
        let opts = RunOptions {
            mode: self::mode(mode)?,
            halt_on_error: !self.recover,
            space,
            ..RunOptions::default()
        };
        let p = &self.prepared;
        Ok(RunResult {
            inner: minisan::runtime::run(&p.module, &p.ins, &inputs, &opts),
        })
    }

    fn __str__(&self) -> String {
        self.prepared.module.to_string()
    }
}

/// Standalone shadow memory for experimenting with the encoding.
#[pyclass(module = "minisan", name = "ShadowMemory")]
struct PyShadow {
    inner: shadow::ShadowMemory,
}

fn poison_kind(name: &str) -> PyResult<PoisonKind> {
    Ok(match name {
        "heap-redzone" => PoisonKind::HeapRedzone,
        "heap-freed" => PoisonKind::HeapFreed,
        "stack-redzone" => PoisonKind::StackRedzone,
        "global-redzone" => PoisonKind::GlobalRedzone,
        "bad" => PoisonKind::Bad,
        other => return Err(PyValueError::new_err(format!("unknown poison kind {other:?}"))),
    })
}

fn oob(e: shadow::OutOfSpace) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pymethods]
impl PyShadow {
    #[new]
    fn new(app_size: u64) -> Self {
        PyShadow {
            inner: shadow::ShadowMemory::new(app_size),
        }
    }

    fn get(&self, addr: u64) -> PyResult<i8> {
        self.inner.get(addr).map_err(oob)
    }

    fn set(&mut self, addr: u64, value: i8) -> PyResult<()> {
        self.inner.set(addr, value).map_err(oob)
    }

    #[pyo3(signature = (addr, size, kind="heap-redzone"))]
    fn poison(&mut self, addr: u64, size: u64, kind: &str) -> PyResult<()> {
        self.inner.poison_region(addr, size, poison_kind(kind)?).map_err(oob)
    }

    fn unpoison(&mut self, addr: u64, size: u64) -> PyResult<()> {
        self.inner.unpoison_region(addr, size).map_err(oob)
    }

    fn is_addressable(&self, addr: u64) -> PyResult<bool> {
        self.inner.is_addressable(addr).map_err(oob)
    }

    /// Slow check: None when valid, else the first unaddressable byte.
    fn check(&self, addr: u64, size: u64) -> PyResult<Option<u64>> {
        if !matches!(size, 1 | 2 | 4 | 8) {
            return Err(PyValueError::new_err("access size must be 1, 2, 4 or 8"));
        }
        Ok(match self.inner.check_access_slow(addr, size).map_err(oob)? {
            Verdict::Valid => None,
            Verdict::Invalid { fault_addr, .. } => Some(fault_addr),
        })
    }

    fn dump(&self, start: u64, end: u64) -> String {
        self.inner.dump(start, end)
    }
}

/// Parse, prepare and run in one call.
#[pyfunction]
#[pyo3(signature = (source, inputs=vec![], mode="two-stage", halt_on_error=true, opt=None, magic=0x89, quarantine=65536))]
fn run(
    source: &str,
    inputs: Vec<u64>,
    mode: &str,
    halt_on_error: bool,
    opt: Option<&Bound<'_, PyDict>>,
    magic: u8,
    quarantine: u64,
) -> PyResult<RunResult> {
    let cfg = config(mode, halt_on_error, opt, magic, quarantine)?;
    let (_, r) = driver::cmd_run(&cfg, source, &inputs).map_err(err)?;
    Ok(RunResult { inner: r })
}

/// Site and elimination listing as text.
#[pyfunction]
#[pyo3(signature = (source, opt=None, halt_on_error=true))]
fn analyze(source: &str, opt: Option<&Bound<'_, PyDict>>, halt_on_error: bool) -> PyResult<String> {
    let cfg = config("two-stage", halt_on_error, opt, 0x89, 65536)?;
    let (_, a) = driver::cmd_analyze(&cfg, source).map_err(err)?;
    Ok(a.to_text(true))
}

/// Run a corpus directory; returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (dir, mode="two-stage"))]
fn corpus<'py>(py: Python<'py>, dir: &str, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(mode, true, None, 0x89, 65536)?;
    let s = driver::cmd_corpus(&cfg, Path::new(dir)).map_err(err)?;
    json(py, &s)
}

/// Differential run across modes and optimizer settings, as text.
#[pyfunction]
#[pyo3(signature = (source, inputs=vec![], halt_on_error=true))]
fn diff(source: &str, inputs: Vec<u64>, halt_on_error: bool) -> PyResult<String> {
    let cfg = config("two-stage", halt_on_error, None, 0x89, 65536)?;
    Ok(driver::cmd_diff(&cfg, source, &inputs).map_err(err)?.to_text())
}

/// Source text of the random program for `seed`.
#[pyfunction]
#[pyo3(signature = (seed, statements=8))]
fn generate(seed: u64, statements: usize) -> String {
    gen_program(
        seed,
        GenConfig {
            statements,
            ..GenConfig::default()
        },
    )
    .source
}

/// The fast-stage comparison against the replicated magic byte.
#[pyfunction]
#[pyo3(signature = (value, size, magic=0x89))]
fn fast_check(value: u64, size: u64, magic: u8) -> PyResult<bool> {
    let size = AccessSize::new(size).ok_or_else(|| PyValueError::new_err("access size must be 1, 2, 4 or 8"))?;
    Ok(checker::fast_check(value, size, minisan::alloc::MagicConfig { byte: magic }))
}

#[pymodule]
#[pyo3(name = "minisan")]
fn minisan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Program>()?;
    m.add_class::<RunResult>()?;
    m.add_class::<Report>()?;
    m.add_class::<PyShadow>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(corpus, m)?)?;
    m.add_function(wrap_pyfunction!(diff, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(fast_check, m)?)?;
    Ok(())
}
