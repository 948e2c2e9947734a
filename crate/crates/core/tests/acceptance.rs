//! Acceptance run: one PASS/FAIL line per criterion, with pinned limits.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use slicefold::asm::{normalize_listing, parse_program, serialize_normalized, Program, Register};
use slicefold::bench::{bench_all, BenchReport, load_corpus, mean_ratio, size_ratio, slice_traces_agree, step_ratio, Benchmark};
use slicefold::cfg::FoldCode;
use slicefold::exec::{run, Blind, Config, ExecOptions, Halt, Semantics, StepFault};
use slicefold::fold::{transform, transform_with, FoldOptions, Folded};
use slicefold::leakage::{LeakageContract, ObserverMode};
use slicefold::oni::{check_correctness, check_oni, CheckOptions, InputSpace, OniVerdict};

/// Largest exhaustive secret domain allowed per benchmark.
const MAX_ASSIGNMENTS: usize = 256;
/// Seed for the extra public fixtures drawn from `range` policy entries.
const SEED: u64 = 1;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn listing(name: &str) -> String {
    std::fs::read_to_string(root().join("listings").join(name)).unwrap()
}

fn corpus() -> Vec<Benchmark> {
    load_corpus(&root().join("corpus")).unwrap()
}

struct Criterion {
    id: &'static str,
    what: &'static str,
    limit: Duration,
    result: Result<String, String>,
    elapsed: Duration,
}

impl Criterion {
    fn passed(&self) -> bool {
        self.result.is_ok() && self.elapsed <= self.limit
    }

    fn line(&self) -> String {
        let detail = match &self.result {
            Ok(d) => d.clone(),
            Err(e) => e.clone(),
        };
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        format!(
            "{} {verdict} {} [{:.2}s, limit {}s] {detail}",
            self.id,
            self.what,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        )
    }
}

fn measure(id: &'static str, what: &'static str, limit_secs: u64, f: impl FnOnce() -> Result<String, String>) -> Criterion {
    let start = Instant::now();
    let result = f();
    Criterion { id, what, limit: Duration::from_secs(limit_secs), result, elapsed: start.elapsed() }
}

fn fold_listing(name: &str) -> Result<Folded, String> {
    transform(&parse_program(&listing(name)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn golden(src: &str, expected: &str) -> Result<Folded, String> {
    let f = fold_listing(src)?;
    let want = normalize_listing(&listing(expected)).map_err(|e| e.to_string())?;
    let got = serialize_normalized(&f.program);
    if got != want {
        return Err(format!("{src}: got\n{got}\nwant\n{want}"));
    }
    Ok(f)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn running_example() -> Result<String, String> {
    let f = golden("running.sasm", "running.tasm")?;
    let text = serialize_normalized(&f.program);
    ensure(text.starts_with("lo.br secret,0:1:2\nadd s1,s2,s3\nadd s2,s3,s4\n"), || text.clone())?;
    ensure(text.matches("lo.br zero,0:0:1").count() == 2, || text.clone())?;
    Ok("matches the hand-written golden".into())
}

fn nested() -> Result<String, String> {
    for (src, want) in [("nested.sasm", "nested.tasm"), ("levels.sasm", "levels.tasm")] {
        let f = golden(src, want)?;
        let text = serialize_normalized(&f.program);
        ensure(text.contains(",0:1:4\n") && text.contains(",2:3:4\n"), || format!("{src}: offset pairs missing"))?;
    }
    Ok("both goldens match, offsets 0:1:4 and 2:3:4 present".into())
}

fn functions() -> Result<String, String> {
    let f = golden("function.sasm", "function.tasm")?;
    let text = serialize_normalized(&f.program);
    ensure(text.starts_with("lo.call T,"), || text.clone())?;
    let first = f.program.label("ffoofoo'").ok_or("folded function label missing")?;
    ensure(f.slices[first.0].bbc == 2, || format!("first slice has {} blocks", f.slices[first.0].bbc))?;
    ensure(text.contains("lo.br c,0:1:4\nlo.br c',2:3:4\n"), || "paired level branches missing".into())?;
    Ok("golden matches, first slice holds 2 blocks".into())
}

fn space_of(b: &Benchmark) -> Result<InputSpace, String> {
    let space = InputSpace::new(&b.policy, Some(SEED));
    ensure(space.assignments.len() <= MAX_ASSIGNMENTS, || format!("{}: {} assignments", b.name, space.assignments.len()))?;
    Ok(space)
}

fn correctness(corpus: &[Benchmark]) -> Result<String, String> {
    let mut runs = 0;
    for b in corpus {
        let f = transform(&b.balanced).map_err(|e| format!("{}: {e}", b.name))?;
        let v = check_correctness(&b.balanced, &f, &space_of(b)?, CheckOptions::default());
        ensure(v.passed(), || format!("{}: {v}", b.name))?;
        runs += space_of(b)?.inputs().len();
    }
    Ok(format!("{} benchmarks, {runs} lockstep runs, 0 violations", corpus.len()))
}

fn security(corpus: &[Benchmark]) -> Result<String, String> {
    let k = LeakageContract::default();
    let opts = CheckOptions::default();
    for b in corpus {
        let space = space_of(b)?;
        let oni = |p: &Program, mode| check_oni(p, &k, mode, &space, opts);
        let v = oni(&b.balanced, ObserverMode::Weak);
        ensure(v.passed(), || format!("{}: balanced weak {v}", b.name))?;
        let f = transform(&b.balanced).map_err(|e| e.to_string())?;
        let v = oni(&f.program, ObserverMode::Strong);
        ensure(v.passed(), || format!("{}: folded strong {v}", b.name))?;
        let v = oni(&b.baseline, ObserverMode::Weak);
        ensure(matches!(v, OniVerdict::Fail(_)), || format!("{}: baseline weak {v}", b.name))?;
        let v = oni(&b.balanced, ObserverMode::Strong);
        ensure(matches!(&v, OniVerdict::Fail(c) if c.slice_only()), || format!("{}: balanced strong {v}", b.name))?;
    }
    Ok(format!("{} benchmarks: balanced weak, folded strong, both negative controls", corpus.len()))
}

fn slice_traces(corpus: &[Benchmark]) -> Result<String, String> {
    let k = LeakageContract::default();
    for b in corpus {
        let f = transform(&b.balanced).map_err(|e| e.to_string())?;
        slice_traces_agree(&f.program, &k, &space_of(b)?, CheckOptions::default()).map_err(|e| format!("{}: {e}", b.name))?;
    }
    Ok("0 divergences".into())
}

/// Benchmarks where the linearizer applies.
fn comparable(reports: &[BenchReport]) -> impl Iterator<Item = &BenchReport> {
    reports.iter().filter(|r| r.linearized.is_ok())
}

fn sizes(reports: &[BenchReport]) -> Result<String, String> {
    let mut applicable = 0;
    for r in reports {
        if let (Ok(l), Ok(f)) = (&r.linearized, &r.folded) {
            applicable += 1;
            ensure(f.static_size <= l.static_size, || format!("{}: folded {} > linearized {}", r.name, f.static_size, l.static_size))?;
        }
    }
    let lin = mean_ratio(comparable(reports), |r| size_ratio(r, true)).ok_or("no linearized sizes")?;
    let fold = mean_ratio(comparable(reports), |r| size_ratio(r, false)).ok_or("no folded sizes")?;
    ensure(fold < lin, || format!("mean folded {fold:.2}x >= linearized {lin:.2}x"))?;
    Ok(format!("{applicable} comparable benchmarks, mean size folded {fold:.2}x vs linearized {lin:.2}x"))
}

fn steps(reports: &[BenchReport]) -> Result<String, String> {
    let lin = mean_ratio(comparable(reports), |r| step_ratio(r, true)).ok_or("no linearized step counts")?;
    let fold = mean_ratio(comparable(reports), |r| step_ratio(r, false)).ok_or("no folded step counts")?;
    ensure(fold < lin, || format!("mean folded {fold:.2}x >= linearized {lin:.2}x"))?;
    let modexp = reports.iter().find(|r| r.name == "modexp2").ok_or("modexp2 missing")?;
    let (f, l) = (step_ratio(modexp, false), step_ratio(modexp, true));
    ensure(f.zip(l).is_some_and(|(f, l)| f.0 <= l.0), || format!("modexp2 folded {f:?} vs linearized {l:?}"))?;
    Ok(format!("mean step overhead folded {:.0}% vs linearized {:.0}%", (fold - 1.0) * 100.0, (lin - 1.0) * 100.0))
}

type Suite = fn(u32) -> Result<(), String>;

fn properties() -> Result<String, String> {
    let suites: [(&str, Suite); 6] = [
        ("fold_level invertibility", common::fold_level_is_invertible),
        ("offset soundness", common::level_offsets_are_sound),
        ("context well-formedness", common::contexts_stay_well_formed),
        ("weak pc-obliviousness", common::weak_observation_ignores_pc),
        ("strong erasure equals weak", common::strong_without_slice_is_weak),
        ("folded lockstep", common::folded_regions_run_in_lockstep),
    ];
    for (name, suite) in suites {
        suite(common::CASES).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("{} suites x {} cases, 0 failures", suites.len(), common::CASES))
}

fn hw_limits() -> Result<String, String> {
    let wide = parse_program(&listing("wide_level.sasm")).map_err(|e| e.to_string())?;
    let err = transform_with(&wide, FoldOptions { hw_mode: true }).err().ok_or("17-block level accepted in hardware mode")?;
    ensure(err.codes().contains(&FoldCode::LevelTooWide), || err.to_string())?;
    let f = transform(&wide).map_err(|e| e.to_string())?;
    let hw = Semantics::Target(ExecOptions { hw_mode: true });
    let unlimited = Semantics::Target(ExecOptions::default());
    let r = run(&f.program, Config::initial(&f.program), unlimited, &Blind, 10_000).map_err(|e| e.to_string())?;
    ensure(r.halt == Halt::Halted, || "wide level did not halt".into())?;

    let deep = fold_listing("deep_calls.sasm")?;
    let c0 = Config::initial(&deep.program);
    let e = run(&deep.program, c0.clone(), hw, &Blind, 10_000).err().ok_or("depth-3 calls ran in hardware mode")?;
    ensure(matches!(e.fault, StepFault::HwLimit(_)), || e.to_string())?;
    let r = run(&deep.program, c0, unlimited, &Blind, 10_000).map_err(|e| e.to_string())?;
    ensure(r.halt == Halt::Halted && r.config.reg(&Register::new("a0")) == 11, || "depth-3 calls gave the wrong result".into())?;
    Ok("17-block level rejected, depth-3 call faults in hardware mode; both run without it".into())
}

#[test]
fn acceptance() {
    let corpus = corpus();
    let mut results = vec![
        measure("AC1", "golden folding of the running example", 1, running_example),
        measure("AC2", "golden folding of nested regions", 1, nested),
        measure("AC3", "golden folding of a function pair", 1, functions),
        measure("AC4", "lockstep correctness over the corpus", 60, || correctness(&corpus)),
        measure("AC5", "ONI security and negative controls", 120, || security(&corpus)),
        measure("AC6", "slice-trace obliviousness", 60, || slice_traces(&corpus)),
    ];
    let reports = bench_all(&corpus, &LeakageContract::default(), Some(SEED), CheckOptions::default());
    results.push(measure("AC7", "folded size at most linearized size", 1, || sizes(&reports)));
    results.push(measure("AC8", "folded step overhead below linearized", 1, || steps(&reports)));
    results.push(measure("AC9", "randomized property suites", 60, properties));
    results.push(measure("AC10", "hardware-mode limits", 1, hw_limits));
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
