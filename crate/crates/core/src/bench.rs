//! Benchmark corpus loading and the per-benchmark evaluation sweep.
//!
//! A corpus is a directory with one subdirectory per benchmark holding
//! `baseline.sasm` (unbalanced), `balanced.sasm` and `<name>.policy`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::asm::{parse_program, AsmError, Program};
use crate::exec::{run, Blind, Halt};
use crate::fold::{transform_with, FoldOptions, Folded};
use crate::leakage::{ContractObserver, LeakageContract, ObserverMode};
use crate::linearize::linearize;
use crate::oni::{
    check_correctness, check_final_state, check_oni, scratch_registers, semantics_for, CheckOptions,
    CorrectnessVerdict, InputSpace, OniVerdict, PolicyError, SecurityPolicy,
};
use crate::par;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Asm { path: PathBuf, source: AsmError },
    #[error("{path}: {source}")]
    Policy { path: PathBuf, source: PolicyError },
}

pub struct Benchmark {
    pub name: String,
    pub baseline: Program,
    pub balanced: Program,
    pub policy: SecurityPolicy,
}

fn read(path: &Path) -> Result<String, BenchError> {
    fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.into(), source })
}

fn read_program(path: &Path) -> Result<Program, BenchError> {
    parse_program(&read(path)?).map_err(|source| BenchError::Asm { path: path.into(), source })
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark, BenchError> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let policy_path = dir.join(format!("{name}.policy"));
    let policy = SecurityPolicy::parse(&read(&policy_path)?).map_err(|source| BenchError::Policy { path: policy_path, source })?;
    Ok(Benchmark {
        baseline: read_program(&dir.join("baseline.sasm"))?,
        balanced: read_program(&dir.join("balanced.sasm"))?,
        name,
        policy,
    })
}

/// Every benchmark under `dir`, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<Benchmark>, BenchError> {
    let entries = fs::read_dir(dir).map_err(|source| BenchError::Io { path: dir.into(), source })?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.iter().map(|d| load_benchmark(d)).collect()
}

/// Size and summed step count of one program variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metrics {
    pub static_size: usize,
    /// Executed instructions summed over the input space; `None` if some run
    /// did not halt.
    pub dynamic_steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckResult {
    pub id: &'static str,
    pub passed: bool,
    pub step: Option<usize>,
    pub detail: String,
}

/// A variant that could not be produced, and why.
pub type Variant<T> = Result<T, String>;

pub struct BenchReport {
    pub name: String,
    pub baseline: Metrics,
    pub balanced: Metrics,
    pub linearized: Variant<Metrics>,
    pub folded: Variant<Metrics>,
    pub checks: Vec<CheckResult>,
}

impl BenchReport {
    pub fn check(&self, id: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn metrics(p: &Program, space: &InputSpace, opts: CheckOptions) -> Metrics {
    let sem = semantics_for(p, opts.exec);
    let mut total = Some(0);
    for (f, a) in space.inputs() {
        let steps = match run(p, space.initial(p, f, a), sem, &Blind, opts.max_steps) {
            Ok(r) if r.halt == Halt::Halted => Some(r.steps),
            _ => None,
        };
        total = total.zip(steps).map(|(t, s)| t + s);
    }
    Metrics { static_size: p.len(), dynamic_steps: total }
}

fn oni_check(id: &'static str, v: &OniVerdict, expect_pass: bool) -> CheckResult {
    let step = match v {
        OniVerdict::Fail(c) => Some(c.step),
        _ => None,
    };
    let passed = match v {
        OniVerdict::Pass { .. } => expect_pass,
        OniVerdict::Fail(_) => !expect_pass,
        OniVerdict::Inconclusive(_) => false,
    };
    CheckResult { id, passed, step, detail: v.to_string() }
}

fn correctness_check(id: &'static str, v: &CorrectnessVerdict) -> CheckResult {
    let step = match v {
        CorrectnessVerdict::Fail(c) => Some(c.step),
        _ => None,
    };
    CheckResult { id, passed: v.passed(), step, detail: v.to_string() }
}

/// True iff all runs from one fixture produce the same slice sequence.
pub fn slice_traces_agree(p: &Program, k: &LeakageContract, space: &InputSpace, opts: CheckOptions) -> Result<(), String> {
    let obs = ContractObserver { contract: k, mode: ObserverMode::Strong };
    let sem = semantics_for(p, opts.exec);
    for f in 0..space.fixtures.len() {
        let mut first: Option<Vec<_>> = None;
        for a in 0..space.assignments.len() {
            let r = run(p, space.initial(p, f, a), sem, &obs, opts.max_steps).map_err(|e| e.to_string())?;
            let slices: Vec<_> = r.trace.iter().map(|o| o.slice).collect();
            match &first {
                None => first = Some(slices),
                Some(s) if *s != slices => {
                    let step = s.iter().zip(&slices).position(|(x, y)| x != y).unwrap_or(s.len().min(slices.len()));
                    return Err(format!("slice traces diverge at step {step} for {}", space.describe(a)));
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

/// Evaluates one benchmark: builds every variant, measures it and runs the
/// harness checks. Checks run sequentially; parallelism is across
/// benchmarks.
pub fn evaluate(b: &Benchmark, k: &LeakageContract, seed: Option<u64>, opts: CheckOptions) -> BenchReport {
    let opts = CheckOptions { parallelism: par::Parallelism::Sequential, ..opts };
    let space = InputSpace::new(&b.policy, seed);
    let mut checks = Vec::new();
    let weak = |p: &Program| check_oni(p, k, ObserverMode::Weak, &space, opts);
    let strong = |p: &Program| check_oni(p, k, ObserverMode::Strong, &space, opts);

    checks.push(oni_check("baseline-weak-leaks", &weak(&b.baseline), false));
    let balanced_weak = weak(&b.balanced);
    checks.push(oni_check("balanced-weak", &balanced_weak, true));
    let balanced_strong = strong(&b.balanced);
    let mut c = oni_check("balanced-strong-leaks-slice", &balanced_strong, false);
    if let OniVerdict::Fail(cex) = &balanced_strong {
        c.passed &= cex.slice_only();
    }
    checks.push(c);

    let folded: Variant<Folded> = if balanced_weak.passed() {
        transform_with(&b.balanced, FoldOptions { hw_mode: opts.exec.hw_mode }).map_err(|e| e.to_string())
    } else {
        Err("balanced variant does not pass weak ONI".into())
    };
    match &folded {
        Ok(f) => {
            checks.push(oni_check("folded-strong", &strong(&f.program), true));
            checks.push(correctness_check("folded-correct", &check_correctness(&b.balanced, f, &space, opts)));
            let agree = slice_traces_agree(&f.program, k, &space, opts);
            checks.push(CheckResult { id: "folded-slices-agree", passed: agree.is_ok(), step: None, detail: agree.err().unwrap_or_default() });
        }
        Err(e) => checks.push(CheckResult { id: "fold", passed: false, step: None, detail: e.clone() }),
    }

    let linearized: Variant<Program> = linearize(&b.baseline).map_err(|e| e.to_string());
    if let Ok(l) = &linearized {
        checks.push(oni_check("linearized-strong", &strong(l), true));
        let v = check_final_state(&b.baseline, l, &space, &scratch_registers(), opts);
        checks.push(correctness_check("linearized-equivalent", &v));
    }

    BenchReport {
        name: b.name.clone(),
        baseline: metrics(&b.baseline, &space, opts),
        balanced: metrics(&b.balanced, &space, opts),
        linearized: linearized.map(|l| metrics(&l, &space, opts)),
        folded: folded.map(|f| metrics(&f.program, &space, opts)),
        checks,
    }
}

/// Evaluates every benchmark; reports come back in corpus order.
pub fn bench_all(corpus: &[Benchmark], k: &LeakageContract, seed: Option<u64>, opts: CheckOptions) -> Vec<BenchReport> {
    par::map(corpus, opts.parallelism, |b| evaluate(b, k, seed, opts))
}

/// One `bench=<name> check=<id> verdict=<pass|fail>[ step=<n>]` line per check.
pub fn verdict_lines(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    for r in reports {
        for c in &r.checks {
            let _ = write!(out, "bench={} check={} verdict={}", r.name, c.id, if c.passed { "pass" } else { "fail" });
            if let Some(s) = c.step {
                let _ = write!(out, " step={s}");
            }
            out.push('\n');
        }
    }
    out
}

fn cell<T: ToString>(v: &Variant<Metrics>, f: impl Fn(&Metrics) -> Option<T>) -> String {
    match v {
        Ok(m) => f(m).map_or("-".into(), |x| x.to_string()),
        Err(_) => "n/a".into(),
    }
}

/// Machine-readable metrics, one line per variant.
pub fn metric_lines(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let variants = [
            ("baseline", Ok(r.baseline.clone())),
            ("balanced", Ok(r.balanced.clone())),
            ("linearized", r.linearized.clone()),
            ("folded", r.folded.clone()),
        ];
        for (name, v) in &variants {
            let _ = writeln!(
                out,
                "bench={} variant={} static={} steps={}",
                r.name,
                name,
                cell(v, |m| Some(m.static_size)),
                cell(v, |m| m.dynamic_steps)
            );
        }
    }
    out
}

/// Mean of `variant / baseline` over the reports where both are available.
pub fn mean_ratio<'a>(
    reports: impl IntoIterator<Item = &'a BenchReport>,
    pick: impl Fn(&BenchReport) -> Option<(usize, usize)>,
) -> Option<f64> {
    let ratios: Vec<f64> = reports.into_iter().filter_map(pick).map(|(v, base)| v as f64 / base as f64).collect();
    (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
}

pub fn size_ratio(r: &BenchReport, linearized: bool) -> Option<(usize, usize)> {
    let v = if linearized { &r.linearized } else { &r.folded };
    v.as_ref().ok().map(|m| (m.static_size, r.baseline.static_size))
}

pub fn step_ratio(r: &BenchReport, linearized: bool) -> Option<(usize, usize)> {
    let v = if linearized { &r.linearized } else { &r.folded };
    v.as_ref().ok().and_then(|m| m.dynamic_steps).zip(r.baseline.dynamic_steps)
}

/// Human-readable table of sizes and step counts.
pub fn table(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>6} {:>6} {:>6} {:>6}   {:>8} {:>8} {:>8} {:>8}  checks",
        "benchmark", "base", "bal", "lin", "fold", "base", "bal", "lin", "fold"
    );
    for r in reports {
        let (base, bal) = (Ok(r.baseline.clone()), Ok(r.balanced.clone()));
        let size = |v: &Variant<Metrics>| cell(v, |m| Some(m.static_size));
        let steps = |v: &Variant<Metrics>| cell(v, |m| m.dynamic_steps);
        let passed = r.checks.iter().filter(|c| c.passed).count();
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>6} {:>6} {:>6}   {:>8} {:>8} {:>8} {:>8}  {}/{}",
            r.name,
            size(&base),
            size(&bal),
            size(&r.linearized),
            size(&r.folded),
            steps(&base),
            steps(&bal),
            steps(&r.linearized),
            steps(&r.folded),
            passed,
            r.checks.len()
        );
    }
    let fmt = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:.2}x"));
    // Means over the benchmarks where the linearizer applies, so both columns cover the same rows.
    let comparable: Vec<&BenchReport> = reports.iter().filter(|r| r.linearized.is_ok()).collect();
    let _ = writeln!(
        out,
        "mean size ratio: linearized {} folded {}",
        fmt(mean_ratio(comparable.iter().copied(), |r| size_ratio(r, true))),
        fmt(mean_ratio(comparable.iter().copied(), |r| size_ratio(r, false)))
    );
    let _ = writeln!(
        out,
        "mean step ratio: linearized {} folded {}",
        fmt(mean_ratio(comparable.iter().copied(), |r| step_ratio(r, true))),
        fmt(mean_ratio(comparable.iter().copied(), |r| step_ratio(r, false)))
    );
    out
}
