//! `slicefold` command-line tool.
//!
//! Exit codes: 0 on success or a passing verdict, 1 on a failing verdict,
//! 2 on usage, parse or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use slicefold::asm::{parse_program_with, serialize_program, Dialect, Instr, ParseOptions, Program, Register};
use slicefold::bench::{bench_all, load_corpus, metric_lines, table, verdict_lines};
use slicefold::cfg::{build_cfg, secret_region};
use slicefold::exec::{run, Blind, Config, ExecOptions, Halt};
use slicefold::fold::{transform_with, FoldOptions};
use slicefold::leakage::{load_contract, trace_line, ContractObserver, LeakageContract, ObserverMode};
use slicefold::linearize::linearize;
use slicefold::oni::{
    check_correctness, check_final_state, check_oni, scratch_registers, semantics_for, CheckOptions, InputSpace,
    SecurityPolicy,
};

#[derive(Parser)]
#[command(name = "slicefold", version, about = "Fold balanced secret-dependent branches and check the result")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fold every outermost secret region into the slice layout.
    Fold {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the source-to-target location relation here.
        #[arg(long)]
        emit_corrmap: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Replace diamonds with mask-based straight-line code.
    Linearize {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Execute a program and print its final state.
    Run {
        input: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        common: Common,
    },
    /// Execute a program and print one observation per step.
    Trace {
        input: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        common: Common,
    },
    /// Check observational non-interference over the policy's input space.
    CheckOni {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fold a source program and check it against its fold in lockstep, or
    /// compare final states with another source program.
    CheckCorrectness {
        input: PathBuf,
        /// Compare final states with this program instead of folding.
        #[arg(long)]
        against: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every benchmark in a corpus directory.
    Bench {
        corpus: PathBuf,
        /// Run benchmarks one after another.
        #[arg(long)]
        sequential: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Print basic blocks, edges and secret regions.
    CfgDump {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ObserverArg {
    Weak,
    Strong,
}

#[derive(Clone, Copy, ValueEnum)]
enum DialectArg {
    Source,
    Target,
    Mixed,
}

#[derive(Args)]
struct Common {
    /// Leakage contract file; the bundled contract by default.
    #[arg(long)]
    contract: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "strong")]
    observer: ObserverArg,
    /// Enforce the hardware slice-width and context-depth limits.
    #[arg(long)]
    hw_mode: bool,
    #[arg(long, default_value_t = 100_000)]
    max_steps: usize,
    /// Security policy; defaults to `<stem>.policy` next to the input.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Seed for the extra random public fixtures.
    #[arg(long)]
    seed: Option<u64>,
    /// Expected instruction dialect; `mixed` admits both.
    #[arg(long, value_enum)]
    dialect: Option<DialectArg>,
}

#[derive(Args)]
struct Inputs {
    /// Index of the secret assignment taken from the policy.
    #[arg(long, default_value_t = 0)]
    assignment: usize,
    /// Register override, `name=value`.
    #[arg(long = "set", value_parser = parse_pair::<String>)]
    set: Vec<(String, i64)>,
    /// Memory override, `addr=value`.
    #[arg(long = "mem", value_parser = parse_pair::<i64>)]
    mem: Vec<(i64, i64)>,
}

fn parse_pair<K: std::str::FromStr>(s: &str) -> Result<(K, i64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let k = k.trim().parse().map_err(|_| format!("bad key `{k}`"))?;
    let v = v.trim().parse().map_err(|_| format!("bad value `{v}`"))?;
    Ok((k, v))
}

/// A usage, parse or I/O error.
struct Usage(String);

impl<E: std::fmt::Display> From<E> for Usage {
    fn from(e: E) -> Usage {
        Usage(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, Usage> {
    fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Usage> {
    fs::write(path, text).map_err(|e| Usage(format!("{}: {e}", path.display())))
}

impl Common {
    fn program(&self, path: &Path) -> Result<Program, Usage> {
        let allow_mixed = matches!(self.dialect, Some(DialectArg::Mixed));
        let p = parse_program_with(&read(path)?, ParseOptions { allow_mixed })
            .map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let expected = match self.dialect {
            Some(DialectArg::Source) => Some(Dialect::Source),
            Some(DialectArg::Target) => Some(Dialect::Target),
            _ => None,
        };
        if let Some(d) = expected {
            if p.dialect() != d && p.dialect() != Dialect::Source {
                return Err(Usage(format!("{}: expected the {d:?} dialect, found {:?}", path.display(), p.dialect())));
            }
        }
        Ok(p)
    }

    fn contract(&self) -> Result<LeakageContract, Usage> {
        match &self.contract {
            Some(path) => load_contract(&read(path)?).map_err(|e| Usage(format!("{}: {e}", path.display()))),
            None => Ok(LeakageContract::default()),
        }
    }

    fn mode(&self) -> ObserverMode {
        match self.observer {
            ObserverArg::Weak => ObserverMode::Weak,
            ObserverArg::Strong => ObserverMode::Strong,
        }
    }

    fn options(&self) -> CheckOptions {
        CheckOptions { max_steps: self.max_steps, exec: ExecOptions { hw_mode: self.hw_mode }, ..CheckOptions::default() }
    }

    /// The explicit policy, else `<stem>.policy` beside `input`.
    fn policy(&self, input: &Path, required: bool) -> Result<Option<SecurityPolicy>, Usage> {
        let path = match &self.policy {
            Some(p) => p.clone(),
            None => {
                let sibling = input.with_extension("policy");
                if !sibling.exists() {
                    return if required {
                        Err(Usage(format!("no --policy given and {} does not exist", sibling.display())))
                    } else {
                        Ok(None)
                    };
                }
                sibling
            }
        };
        let text = read(&path)?;
        SecurityPolicy::parse(&text).map(Some).map_err(|e| Usage(format!("{}: {e}", path.display())))
    }

    fn space(&self, input: &Path) -> Result<InputSpace, Usage> {
        let policy = self.policy(input, true)?.expect("required policy");
        Ok(InputSpace::new(&policy, self.seed))
    }
}

fn initial(p: &Program, input: &Path, inputs: &Inputs, common: &Common) -> Result<Config, Usage> {
    let mut c = match common.policy(input, false)? {
        Some(policy) => {
            let space = InputSpace::new(&policy, common.seed);
            if inputs.assignment >= space.assignments.len() {
                return Err(Usage(format!("assignment {} out of range (0..{})", inputs.assignment, space.assignments.len())));
            }
            space.initial(p, 0, inputs.assignment)
        }
        None => Config::initial(p),
    };
    for (r, v) in &inputs.set {
        c.set_reg(&Register::new(r), *v);
    }
    for (a, v) in &inputs.mem {
        c.store(*a, *v);
    }
    Ok(c)
}

fn emit(output: &Option<PathBuf>, text: &str) -> Result<(), Usage> {
    match output {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn verdict(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn execute(cmd: Command) -> Result<ExitCode, Usage> {
    match cmd {
        Command::Fold { input, output, emit_corrmap, common } => {
            let p = common.program(&input)?;
            let folded = match transform_with(&p, FoldOptions { hw_mode: common.hw_mode }) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(ExitCode::from(1));
                }
            };
            emit(&output, &serialize_program(&folded.program))?;
            if let Some(path) = emit_corrmap {
                write(&path, &folded.corr.render())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Linearize { input, output, common } => {
            let p = common.program(&input)?;
            match linearize(&p) {
                Ok(out) => {
                    emit(&output, &serialize_program(&out))?;
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("{e}");
                    Ok(ExitCode::from(1))
                }
            }
        }
        Command::Run { input, inputs, common } => {
            let p = common.program(&input)?;
            let c0 = initial(&p, &input, &inputs, &common)?;
            let sem = semantics_for(&p, ExecOptions { hw_mode: common.hw_mode });
            match run(&p, c0, sem, &Blind, common.max_steps) {
                Ok(r) => {
                    let halted = r.halt == Halt::Halted;
                    println!("halt={} steps={}", if halted { "halted" } else { "max-steps" }, r.steps);
                    for (reg, v) in r.config.nonzero_regs() {
                        println!("reg {reg} = {v}");
                    }
                    for (a, v) in r.config.nonzero_mem() {
                        println!("mem {a} = {v}");
                    }
                    Ok(verdict(halted))
                }
                Err(e) => {
                    println!("stuck: {e}");
                    Ok(ExitCode::from(1))
                }
            }
        }
        Command::Trace { input, inputs, common } => {
            let p = common.program(&input)?;
            let k = common.contract()?;
            let c0 = initial(&p, &input, &inputs, &common)?;
            let sem = semantics_for(&p, ExecOptions { hw_mode: common.hw_mode });
            let obs = ContractObserver { contract: &k, mode: common.mode() };
            match run(&p, c0, sem, &obs, common.max_steps) {
                Ok(r) => {
                    for (i, (pc, o)) in r.pcs.iter().zip(&r.trace).enumerate() {
                        println!("{}", trace_line(i, *pc, o));
                    }
                    Ok(verdict(r.halt == Halt::Halted))
                }
                Err(e) => {
                    println!("stuck: {e}");
                    Ok(ExitCode::from(1))
                }
            }
        }
        Command::CheckOni { input, common } => {
            let p = common.program(&input)?;
            let k = common.contract()?;
            let space = common.space(&input)?;
            let v = check_oni(&p, &k, common.mode(), &space, common.options());
            println!("observer={} verdict={v}", common.mode().as_str());
            if let slicefold::oni::OniVerdict::Fail(c) = &v {
                println!("left: {}", space.describe(c.left));
                println!("right: {}", space.describe(c.right));
            }
            Ok(verdict(v.passed()))
        }
        Command::CheckCorrectness { input, against, common } => {
            let p = common.program(&input)?;
            let space = common.space(&input)?;
            let v = match against {
                Some(other) => {
                    let q = common.program(&other)?;
                    check_final_state(&p, &q, &space, &scratch_registers(), common.options())
                }
                None => match transform_with(&p, FoldOptions { hw_mode: common.hw_mode }) {
                    Ok(f) => check_correctness(&p, &f, &space, common.options()),
                    Err(e) => {
                        eprintln!("{e}");
                        return Ok(ExitCode::from(1));
                    }
                },
            };
            println!("verdict={v}");
            Ok(verdict(v.passed()))
        }
        Command::Bench { corpus, sequential, common } => {
            let k = common.contract()?;
            let benches = load_corpus(&corpus)?;
            let mut opts = common.options();
            if sequential {
                opts.parallelism = slicefold::par::Parallelism::Sequential;
            }
            let reports = bench_all(&benches, &k, common.seed, opts);
            print!("{}", verdict_lines(&reports));
            print!("{}", metric_lines(&reports));
            print!("{}", table(&reports));
            Ok(verdict(reports.iter().all(|r| r.all_passed())))
        }
        Command::CfgDump { input, common } => {
            let p = common.program(&input)?;
            let g = build_cfg(&p)?;
            print!("{}", g.dump(&p));
            for b in g.reachable_blocks() {
                if !matches!(g.block(b).terminator(), Instr::SecretBranch { .. }) {
                    continue;
                }
                match secret_region(&g, b) {
                    Ok(r) => {
                        let body: Vec<String> = r.body.iter().map(|x| x.to_string()).collect();
                        println!("region {} -> {} body [{}]", r.entry, r.exit, body.join(" "));
                    }
                    Err(e) => println!("region {b}: {e}"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
