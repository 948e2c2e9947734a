//! Observational non-interference and lockstep correctness checks.
//!
//! ONI runs every secret assignment from the same public fixture and compares
//! the observation traces step by step. Correctness runs a source program and
//! its folded image side by side and checks that their states stay related.

mod policy;

use std::fmt;

pub use policy::{indistinguishable, Assignment, Fixture, InputSpace, PolicyError, SecretLoc, SecurityPolicy, SEEDED_FIXTURES};

use crate::asm::{Loc, Program, Register};
use crate::exec::{run, Config, Ctx, ExecOptions, Halt, Semantics};
use crate::fold::Folded;
use crate::leakage::{ContractObserver, LeakageContract, Observation, ObserverMode};
use crate::par::{self, Parallelism};

/// Why two runs were told apart.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Divergence {
    /// Observations differ at `step`.
    Observation,
    /// One run halted while the other kept going.
    Length,
    /// The right-hand run could not step.
    Stuck(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counterexample {
    pub fixture: usize,
    pub left: usize,
    pub right: usize,
    pub step: usize,
    pub left_obs: Option<Observation>,
    pub right_obs: Option<Observation>,
    pub cause: Divergence,
}

impl Counterexample {
    /// True when the divergence is in the slice address alone.
    pub fn slice_only(&self) -> bool {
        match (&self.left_obs, &self.right_obs) {
            (Some(l), Some(r)) => l.slice != r.slice && l.erase_slice() == r.erase_slice(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OniVerdict {
    Pass { runs: usize, steps: Vec<usize> },
    Fail(Counterexample),
    Inconclusive(String),
}

impl OniVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, OniVerdict::Pass { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            OniVerdict::Pass { .. } => "pass",
            OniVerdict::Fail(_) => "fail",
            OniVerdict::Inconclusive(_) => "inconclusive",
        }
    }
}

fn show(o: &Option<Observation>) -> String {
    match o {
        Some(o) => match o.slice {
            Some(s) => format!("{o} @slice {s}"),
            None => o.to_string(),
        },
        None => "<halted>".into(),
    }
}

impl fmt::Display for OniVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OniVerdict::Pass { runs, .. } => write!(f, "pass ({runs} runs)"),
            OniVerdict::Inconclusive(why) => write!(f, "inconclusive: {why}"),
            OniVerdict::Fail(c) => {
                write!(f, "fail at step {}: ", c.step)?;
                match &c.cause {
                    Divergence::Observation => write!(f, "{} vs {}", show(&c.left_obs), show(&c.right_obs)),
                    Divergence::Length => write!(f, "run lengths differ ({} vs {})", show(&c.left_obs), show(&c.right_obs)),
                    Divergence::Stuck(m) => write!(f, "{m}"),
                }
            }
        }
    }
}

/// Settings shared by the checks.
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub max_steps: usize,
    pub exec: ExecOptions,
    pub parallelism: Parallelism,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { max_steps: 100_000, exec: ExecOptions::default(), parallelism: Parallelism::default() }
    }
}

/// Picks source or target semantics from the instructions present.
pub fn semantics_for(p: &Program, exec: ExecOptions) -> Semantics {
    match p.dialect() {
        crate::asm::Dialect::Source => Semantics::Source,
        _ => Semantics::Target(exec),
    }
}

enum Outcome {
    Done { trace: Vec<Observation>, halted: bool },
    Stuck { trace: Vec<Observation>, step: usize, msg: String },
}

fn observe_run(
    p: &Program,
    c0: Config,
    k: &LeakageContract,
    mode: ObserverMode,
    opts: CheckOptions,
) -> Outcome {
    let sem = semantics_for(p, opts.exec);
    let obs = ContractObserver { contract: k, mode };
    match run(p, c0.clone(), sem, &obs, opts.max_steps) {
        Ok(r) => Outcome::Done { trace: r.trace, halted: r.halt == Halt::Halted },
        Err(e) => {
            // Re-run up to the fault to keep the observations seen so far.
            let partial = run(p, c0, sem, &obs, e.step).map(|r| r.trace).unwrap_or_default();
            Outcome::Stuck { trace: partial, step: e.step, msg: e.to_string() }
        }
    }
}

fn trace_of(o: &Outcome) -> &[Observation] {
    match o {
        Outcome::Done { trace, .. } | Outcome::Stuck { trace, .. } => trace,
    }
}

fn compare(left: &Outcome, right: &Outcome, fixture: usize, l: usize, r: usize) -> Option<Counterexample> {
    let (lt, rt) = (trace_of(left), trace_of(right));
    let cex = |step: usize, cause| Counterexample {
        fixture,
        left: l,
        right: r,
        step,
        left_obs: lt.get(step).cloned(),
        right_obs: rt.get(step).cloned(),
        cause,
    };
    if let Some(step) = lt.iter().zip(rt).position(|(a, b)| a != b) {
        return Some(cex(step, Divergence::Observation));
    }
    for o in [right, left] {
        if let Outcome::Stuck { step, msg, .. } = o {
            return Some(cex(*step, Divergence::Stuck(msg.clone())));
        }
    }
    let halted = |o: &Outcome| matches!(o, Outcome::Done { halted: true, .. });
    if halted(left) && halted(right) && lt.len() != rt.len() {
        return Some(cex(lt.len().min(rt.len()), Divergence::Length));
    }
    None
}

/// Checks ONI of `p` under `mode` over `space`. Every run is compared with
/// the first assignment of its fixture; the first failure by input order is
/// reported.
pub fn check_oni(p: &Program, k: &LeakageContract, mode: ObserverMode, space: &InputSpace, opts: CheckOptions) -> OniVerdict {
    let inputs = space.inputs();
    let outcomes = par::map(&inputs, opts.parallelism, |&(f, a)| observe_run(p, space.initial(p, f, a), k, mode, opts));
    let n = space.assignments.len();
    let mut steps = Vec::new();
    let mut inconclusive = None;
    for (idx, &(f, a)) in inputs.iter().enumerate() {
        let base = f * n;
        if let Some(c) = compare(&outcomes[base], &outcomes[idx], f, 0, a) {
            return OniVerdict::Fail(c);
        }
        match &outcomes[idx] {
            Outcome::Done { trace, halted: true } => steps.push(trace.len()),
            _ => {
                inconclusive.get_or_insert_with(|| {
                    format!("input {} ({}) hit the {}-step limit", idx, space.describe(a), opts.max_steps)
                });
            }
        }
    }
    match inconclusive {
        Some(why) => OniVerdict::Inconclusive(why),
        None => OniVerdict::Pass { runs: inputs.len(), steps },
    }
}

/// Re-runs a counterexample's pair and reports whether it diverges at the
/// same step again.
pub fn replay(p: &Program, k: &LeakageContract, mode: ObserverMode, space: &InputSpace, c: &Counterexample, opts: CheckOptions) -> bool {
    let left = observe_run(p, space.initial(p, c.fixture, c.left), k, mode, opts);
    let right = observe_run(p, space.initial(p, c.fixture, c.right), k, mode, opts);
    matches!(compare(&left, &right, c.fixture, c.left, c.right), Some(again) if again.step == c.step)
}

/// How source and target states stopped being related.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Memory,
    Registers,
    Pc { src: Loc, tgt: Loc },
    ReturnStack,
    ContextStack,
    /// One side halted and the other did not.
    Halt,
    Stuck { target: bool, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectnessFailure {
    pub fixture: usize,
    pub assignment: usize,
    pub step: usize,
    pub violation: Violation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CorrectnessVerdict {
    Pass { runs: usize },
    Fail(CorrectnessFailure),
    Inconclusive(String),
}

impl CorrectnessVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, CorrectnessVerdict::Pass { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            CorrectnessVerdict::Pass { .. } => "pass",
            CorrectnessVerdict::Fail(_) => "fail",
            CorrectnessVerdict::Inconclusive(_) => "inconclusive",
        }
    }
}

impl fmt::Display for CorrectnessVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrectnessVerdict::Pass { runs } => write!(f, "pass ({runs} runs)"),
            CorrectnessVerdict::Inconclusive(why) => write!(f, "inconclusive: {why}"),
            CorrectnessVerdict::Fail(c) => {
                write!(f, "fail at step {} (fixture {}, assignment {}): {:?}", c.step, c.fixture, c.assignment, c.violation)
            }
        }
    }
}

/// Checks that the context stack matches the slice layout at every return
/// address and at the pc.
fn context_stack_ok(t: &Config, slices: &[Ctx], halt: Loc) -> bool {
    if t.ctx_stack.len() != t.ret_stack.len() + 1 {
        return false;
    }
    let locs = t.ret_stack.iter().copied().chain(std::iter::once(t.pc));
    t.ctx_stack.iter().zip(locs).all(|(ctx, l)| {
        if l == halt {
            *ctx == Ctx::INITIAL
        } else {
            slices.get(l.0) == Some(ctx)
        }
    })
}

fn related(s: &Config, t: &Config, f: &Folded, src_halt: Loc, tgt_halt: Loc) -> Result<(), Violation> {
    if s.nonzero_mem() != t.nonzero_mem() {
        return Err(Violation::Memory);
    }
    if s.nonzero_regs() != t.nonzero_regs() {
        return Err(Violation::Registers);
    }
    if (s.pc == src_halt) != (t.pc == tgt_halt) {
        return Err(Violation::Halt);
    }
    if !f.corr.relates(s.pc, t.pc) {
        return Err(Violation::Pc { src: s.pc, tgt: t.pc });
    }
    if s.ret_stack.len() != t.ret_stack.len() || s.ret_stack.iter().zip(&t.ret_stack).any(|(a, b)| !f.corr.relates(*a, *b)) {
        return Err(Violation::ReturnStack);
    }
    if !context_stack_ok(t, &f.slices, tgt_halt) {
        return Err(Violation::ContextStack);
    }
    Ok(())
}

enum Lockstep {
    Ok,
    Fail(usize, Violation),
    Limit,
}

fn lockstep(src: &Program, f: &Folded, s0: Config, t0: Config, opts: CheckOptions) -> Lockstep {
    let (mut s, mut t) = (s0, t0);
    let (sh, th) = (src.halt_loc(), f.program.halt_loc());
    let tsem = Semantics::Target(opts.exec);
    for step in 0..=opts.max_steps {
        if let Err(v) = related(&s, &t, f, sh, th) {
            return Lockstep::Fail(step, v);
        }
        if s.pc == sh {
            return Lockstep::Ok;
        }
        if step == opts.max_steps {
            break;
        }
        if let Err(e) = Semantics::Source.step(src, &mut s) {
            return Lockstep::Fail(step, Violation::Stuck { target: false, msg: e.to_string() });
        }
        if let Err(e) = tsem.step(&f.program, &mut t) {
            return Lockstep::Fail(step, Violation::Stuck { target: true, msg: e.to_string() });
        }
    }
    Lockstep::Limit
}

/// Runs `src` and its folded image in lockstep over every input.
pub fn check_correctness(src: &Program, f: &Folded, space: &InputSpace, opts: CheckOptions) -> CorrectnessVerdict {
    let inputs = space.inputs();
    let results = par::map(&inputs, opts.parallelism, |&(fx, a)| {
        lockstep(src, f, space.initial(src, fx, a), space.initial(&f.program, fx, a), opts)
    });
    let mut limit = None;
    for (&(fixture, assignment), r) in inputs.iter().zip(&results) {
        match r {
            Lockstep::Ok => {}
            Lockstep::Fail(step, v) => {
                return CorrectnessVerdict::Fail(CorrectnessFailure { fixture, assignment, step: *step, violation: v.clone() })
            }
            Lockstep::Limit => {
                limit.get_or_insert_with(|| format!("{} hit the {}-step limit", space.describe(assignment), opts.max_steps));
            }
        }
    }
    match limit {
        Some(why) => CorrectnessVerdict::Inconclusive(why),
        None => CorrectnessVerdict::Pass { runs: inputs.len() },
    }
}

/// Registers reserved for the linearizer's masks.
pub fn scratch_registers() -> Vec<Register> {
    ["t1", "t2", "t3", "t4", "t5", "t6"].iter().map(|r| Register::new(r)).collect()
}

/// Checks that `a` and `b` (both source dialect) halt with the same memory
/// and the same registers, ignoring `scratch`.
pub fn check_final_state(a: &Program, b: &Program, space: &InputSpace, scratch: &[Register], opts: CheckOptions) -> CorrectnessVerdict {
    let inputs = space.inputs();
    let results = par::map(&inputs, opts.parallelism, |&(fx, asg)| {
        let ra = run(a, space.initial(a, fx, asg), Semantics::Source, &crate::exec::Blind, opts.max_steps);
        let rb = run(b, space.initial(b, fx, asg), Semantics::Source, &crate::exec::Blind, opts.max_steps);
        match (ra, rb) {
            (Err(e), _) => Err(Violation::Stuck { target: false, msg: e.to_string() }),
            (_, Err(e)) => Err(Violation::Stuck { target: true, msg: e.to_string() }),
            (Ok(x), Ok(y)) if x.halt != Halt::Halted || y.halt != Halt::Halted => Ok(false),
            (Ok(x), Ok(y)) => {
                let regs = |c: &Config| {
                    c.nonzero_regs().into_iter().filter(|(r, _)| !scratch.contains(r)).map(|(r, v)| (r.clone(), v)).collect::<Vec<_>>()
                };
                if x.config.nonzero_mem() != y.config.nonzero_mem() {
                    Err(Violation::Memory)
                } else if regs(&x.config) != regs(&y.config) {
                    Err(Violation::Registers)
                } else {
                    Ok(true)
                }
            }
        }
    });
    let mut limit = None;
    for (&(fixture, assignment), r) in inputs.iter().zip(results) {
        match r {
            Ok(true) => {}
            Ok(false) => {
                limit.get_or_insert_with(|| format!("{} hit the {}-step limit", space.describe(assignment), opts.max_steps));
            }
            Err(violation) => return CorrectnessVerdict::Fail(CorrectnessFailure { fixture, assignment, step: 0, violation }),
        }
    }
    match limit {
        Some(why) => CorrectnessVerdict::Inconclusive(why),
        None => CorrectnessVerdict::Pass { runs: inputs.len() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::{parse_program, Instr};
    use crate::fold::transform;

    const VULNERABLE: &str = "s.br secret,t,f\nt: add s1,s2,s3\n j Ex\nf: add s2,s3,s4\nEx: mv a0,s1\n";
    const BALANCED: &str = "s.br secret,t,f\nt: add s1,s2,s3\n j Ex\nf: add s2,s3,s4\n j Ex\nEx: mv a0,s1\n";

    fn space() -> InputSpace {
        InputSpace::new(&SecurityPolicy::parse("secret reg secret\npublic reg s2 = 5\npublic reg s3 = 7\npublic reg s4 = 11\n").unwrap(), None)
    }

    fn oni(src: &str, mode: ObserverMode) -> OniVerdict {
        let p = parse_program(src).unwrap();
        check_oni(&p, &LeakageContract::default(), mode, &space(), CheckOptions::default())
    }

    #[test]
    fn unbalanced_fails_weak() {
        let v = oni(VULNERABLE, ObserverMode::Weak);
        let OniVerdict::Fail(c) = v else { panic!("{v}") };
        assert_eq!(c.step, 2);
    }

    #[test]
    fn balanced_passes_weak_fails_strong() {
        assert!(oni(BALANCED, ObserverMode::Weak).passed());
        let OniVerdict::Fail(c) = oni(BALANCED, ObserverMode::Strong) else { panic!() };
        assert_eq!(c.step, 1);
        assert!(c.slice_only());
    }

    #[test]
    fn folded_passes_strong_and_lockstep() {
        let p = parse_program(BALANCED).unwrap();
        let f = transform(&p).unwrap();
        let k = LeakageContract::default();
        assert!(check_oni(&f.program, &k, ObserverMode::Strong, &space(), CheckOptions::default()).passed());
        assert_eq!(check_correctness(&p, &f, &space(), CheckOptions::default()), CorrectnessVerdict::Pass { runs: 2 });
    }

    #[test]
    fn corrupted_offset_breaks_lockstep() {
        let p = parse_program(BALANCED).unwrap();
        let mut f = transform(&p).unwrap();
        f.program.code[0] = Instr::LevelBranch { cond: crate::asm::Expr::reg("secret"), off_true: 1, off_false: 1, bbc: 2 };
        let CorrectnessVerdict::Fail(c) = check_correctness(&p, &f, &space(), CheckOptions::default()) else { panic!() };
        assert!(matches!(c.violation, Violation::Pc { .. }));
        assert_eq!(c.step, 1);
    }

    #[test]
    fn counterexamples_replay() {
        let p = parse_program(BALANCED).unwrap();
        let k = LeakageContract::default();
        let OniVerdict::Fail(c) = check_oni(&p, &k, ObserverMode::Strong, &space(), CheckOptions::default()) else { panic!() };
        assert!(replay(&p, &k, ObserverMode::Strong, &space(), &c, CheckOptions::default()));
    }

    #[test]
    fn step_limit_is_inconclusive() {
        let p = parse_program("l: j l\n").unwrap();
        let opts = CheckOptions { max_steps: 20, ..CheckOptions::default() };
        let v = check_oni(&p, &LeakageContract::default(), ObserverMode::Weak, &space(), opts);
        assert!(matches!(v, OniVerdict::Inconclusive(_)));
    }

    #[test]
    fn stuck_run_fails_with_cause() {
        let p = parse_program("s.br secret,t,f\nt: ret\nf: j f2\nf2: mv a0,a0\n").unwrap();
        let v = oni_prog(&p);
        let OniVerdict::Fail(c) = v else { panic!() };
        assert!(matches!(c.cause, Divergence::Stuck(_)) || c.cause == Divergence::Observation);
    }

    fn oni_prog(p: &Program) -> OniVerdict {
        check_oni(p, &LeakageContract::default(), ObserverMode::Weak, &space(), CheckOptions::default())
    }

    #[test]
    fn modes_give_identical_verdicts() {
        let p = parse_program(BALANCED).unwrap();
        let k = LeakageContract::default();
        let seq = CheckOptions { parallelism: Parallelism::Sequential, ..CheckOptions::default() };
        for mode in [ObserverMode::Weak, ObserverMode::Strong] {
            assert_eq!(
                check_oni(&p, &k, mode, &space(), seq),
                check_oni(&p, &k, mode, &space(), CheckOptions::default())
            );
        }
    }
}
