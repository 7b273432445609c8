use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;

use minisan::checker::CheckMode;
use minisan::driver::{self, RunConfig};
use minisan::gen::{generate, GenConfig};
use minisan::runtime::Interpreter;

/// Shadow-memory sanitizer laboratory for the mini-IR.
#[derive(Parser)]
#[command(name = "minisan", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a program and print reports and counters.
    Run {
        #[command(flatten)]
        opts: Opts,
        /// Program file; omit together with --seed to run a generated program.
        file: Option<PathBuf>,
        /// Print the shadow of the used arenas after the run.
        #[arg(long)]
        dump_shadow: bool,
    },
    /// List check sites and eliminations without executing.
    Analyze {
        #[command(flatten)]
        opts: Opts,
        file: Option<PathBuf>,
        /// Also print per-rule and per-loop elimination data.
        #[arg(long)]
        eliminations: bool,
        /// Print the shadow after globals are laid out.
        #[arg(long)]
        dump_shadow: bool,
    },
    /// Run every `*.ir` case with an `; expect:` header under a directory.
    Corpus {
        #[command(flatten)]
        opts: Opts,
        dir: PathBuf,
    },
    /// Compare nocheck, slow-only and two-stage runs, optimizer on and off.
    Diff {
        #[command(flatten)]
        opts: Opts,
        file: Option<PathBuf>,
    },
    /// Print the program generated from --seed.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        statements: usize,
    },
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Text,
    Structured,
}

#[derive(Args, Clone)]
struct Opts {
    /// TOML file with RunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<CheckMode>,
    #[arg(long, value_name = "0|1", value_parser = parse_flag)]
    halt_on_error: Option<bool>,
    #[arg(long, value_name = "0|1", value_parser = parse_flag, num_args = 0..=1, default_missing_value = "1")]
    opt_unsat: Option<bool>,
    #[arg(long, value_name = "0|1", value_parser = parse_flag, num_args = 0..=1, default_missing_value = "1")]
    opt_loop: Option<bool>,
    #[arg(long, value_name = "0|1", value_parser = parse_flag, num_args = 0..=1, default_missing_value = "1")]
    opt_recurring: Option<bool>,
    #[arg(long, value_name = "0|1", value_parser = parse_flag, num_args = 0..=1, default_missing_value = "1")]
    opt_neighbor: Option<bool>,
    /// Turn every optimizer rule off.
    #[arg(long)]
    no_opt: bool,
    /// Magic byte, e.g. 0x89.
    #[arg(long, value_parser = parse_u8)]
    magic: Option<u8>,
    /// Quarantine capacity in bytes.
    #[arg(long, value_parser = parse_u64)]
    quarantine: Option<u64>,
    /// Comma-separated values, or @FILE with one value per line.
    #[arg(long)]
    input: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Seed for the program generator.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<CheckMode, String> {
    s.parse()
}

fn parse_flag(s: &str) -> Result<bool, String> {
    match s {
        "1" | "true" | "on" => Ok(true),
        "0" | "false" | "off" => Ok(false),
        _ => Err(format!("expected 0 or 1, got `{s}`")),
    }
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| e.to_string())
}

fn parse_u8(s: &str) -> Result<u8, String> {
    let v = parse_u64(s)?;
    u8::try_from(v).map_err(|_| format!("{s} does not fit in a byte"))
}

impl Opts {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_toml(&driver::read_file(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(h) = self.halt_on_error {
            c.halt_on_error = h;
        }
        if self.no_opt {
            c.opt = minisan::optimizer::OptToggles::none();
        }
        let set = |slot: &mut bool, v: Option<bool>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.opt.unsat, self.opt_unsat);
        set(&mut c.opt.loops, self.opt_loop);
        set(&mut c.opt.recurring, self.opt_recurring);
        set(&mut c.opt.neighbor, self.opt_neighbor);
        if let Some(m) = self.magic {
            c.space.magic.byte = m;
        }
        if let Some(q) = self.quarantine {
            c.space.quarantine_capacity = q;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }

    fn inputs(&self) -> Result<Option<Vec<u64>>> {
        let Some(spec) = &self.input else { return Ok(None) };
        let text = match spec.strip_prefix('@') {
            Some(path) => driver::read_file(Path::new(path))?,
            None => spec.clone(),
        };
        Ok(Some(driver::parse_inputs(&text)?))
    }

    /// Program text and inputs: from the file and its `; input:` header, or
    /// generated from the seed.
    fn program(&self, file: &Option<PathBuf>, cfg: &RunConfig) -> Result<(String, Vec<u64>)> {
        let explicit = self.inputs()?;
        match file {
            Some(p) => {
                let src = driver::read_file(p)?;
                let inputs = match explicit {
                    Some(i) => i,
                    None => header_inputs(&src)?,
                };
                Ok((src, inputs))
            }
            None if self.seed.is_some() => {
                let g = generate(cfg.seed, GenConfig::default());
                let inputs = match explicit {
                    Some(i) => i,
                    None => g.random_inputs(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed)),
                };
                Ok((g.source, inputs))
            }
            None => bail!("a program FILE or --seed is required"),
        }
    }
}

fn header_inputs(src: &str) -> Result<Vec<u64>> {
    for line in src.lines() {
        if let Some(v) = line.trim().strip_prefix("; input:") {
            return Ok(driver::parse_inputs(v)?);
        }
    }
    Ok(Vec::new())
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn exec(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Run {
            opts,
            file,
            dump_shadow,
        } => {
            let cfg = opts.config()?;
            let (src, inputs) = opts.program(&file, &cfg)?;
            let p = driver::prepare(&src, cfg.opt, !cfg.halt_on_error)?;
            let mut interp = Interpreter::new(&p.module, &p.ins, cfg.run_options());
            let r = interp.run(&inputs);
            let dump = if dump_shadow {
                interp.space().map(driver::shadow_dump)
            } else {
                None
            };
            match opts.format {
                Format::Text => {
                    print!("{}", driver::format_run_text(&r));
                    if let Some(d) = dump {
                        print!("{d}");
                    }
                }
                Format::Structured => print_json(&serde_json::json!({
                    "exit_code": r.exit_code(),
                    "result": r,
                    "shadow": dump,
                }))?,
            }
            Ok(r.exit_code() as u8)
        }
        Cmd::Analyze {
            opts,
            file,
            eliminations,
            dump_shadow,
        } => {
            let cfg = opts.config()?;
            let (src, _) = opts.program(&file, &cfg)?;
            let (p, a) = driver::cmd_analyze(&cfg, &src)?;
            let dump = if dump_shadow {
                let mut space = minisan::alloc::AddressSpace::new(cfg.space)?;
                for g in &p.module.globals {
                    space.register_global(g.size)?;
                }
                Some(driver::shadow_dump(&space))
            } else {
                None
            };
            match opts.format {
                Format::Text => {
                    print!("{}", a.to_text(eliminations));
                    if let Some(d) = dump {
                        print!("{d}");
                    }
                }
                Format::Structured => print_json(&serde_json::json!({ "analysis": a, "shadow": dump }))?,
            }
            Ok(0)
        }
        Cmd::Corpus { opts, dir } => {
            let cfg = opts.config()?;
            let s = driver::cmd_corpus(&cfg, &dir)?;
            match opts.format {
                Format::Text => print!("{}", s.to_table()),
                Format::Structured => print_json(&s)?,
            }
            Ok(if s.all_ok() { 0 } else { 1 })
        }
        Cmd::Diff { opts, file } => {
            let cfg = opts.config()?;
            let (src, inputs) = opts.program(&file, &cfg)?;
            let d = driver::cmd_diff(&cfg, &src, &inputs)?;
            match opts.format {
                Format::Text => print!("{}", d.to_text()),
                Format::Structured => print_json(&d)?,
            }
            Ok(if d.unexpected() == 0 { 0 } else { 1 })
        }
        Cmd::Gen { seed, statements } => {
            let g = generate(
                seed,
                GenConfig {
                    statements,
                    ..GenConfig::default()
                },
            );
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<String> = g.random_inputs(&mut rng).iter().map(u64::to_string).collect();
            println!("; seed: {seed}\n; input: {}", inputs.join(", "));
            print!("{}", g.source);
            Ok(0)
        }
    }
}

/// Exit status for bad usage, unreadable files and invalid programs.
const EX_USAGE: u8 = 64;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EX_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match exec(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EX_USAGE)
        }
    }
}
