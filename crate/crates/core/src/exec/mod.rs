//! Small-step interpreter for both dialects.
//!
//! Source programs advance one instruction at a time. Target programs
//! advance by the size of the current slice, and level-offset branches pick
//! an offset into the next slice. The program halts when the pc reaches the
//! location one past the last instruction.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::asm::{BinaryOp, Expr, Instr, Loc, Program, Register, UnaryOp};

/// Size of the current slice and the offset of the running block within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ctx {
    pub bbc: usize,
    pub off: usize,
}

impl Ctx {
    pub const INITIAL: Ctx = Ctx { bbc: 1, off: 0 };
}

impl fmt::Display for Ctx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.bbc, self.off)
    }
}

/// Widest slice and deepest context stack allowed in hardware mode.
pub const HW_MAX_BBC: usize = 16;
pub const HW_MAX_CTX_DEPTH: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    /// Data memory; unwritten addresses read as 0.
    pub mem: BTreeMap<i64, i64>,
    /// Register file; unset registers read as 0.
    pub regs: BTreeMap<Register, i64>,
    pub pc: Loc,
    pub ret_stack: Vec<Loc>,
    pub ctx_stack: Vec<Ctx>,
}

impl Config {
    /// Zeroed state at the program entry.
    pub fn initial(p: &Program) -> Config {
        Config {
            mem: BTreeMap::new(),
            regs: BTreeMap::new(),
            pc: p.entry,
            ret_stack: Vec::new(),
            ctx_stack: vec![Ctx::INITIAL],
        }
    }

    pub fn reg(&self, r: &Register) -> i64 {
        if r.is_zero() {
            0
        } else {
            self.regs.get(r).copied().unwrap_or(0)
        }
    }

    pub fn set_reg(&mut self, r: &Register, v: i64) {
        if !r.is_zero() {
            self.regs.insert(r.clone(), v);
        }
    }

    pub fn load(&self, addr: i64) -> i64 {
        self.mem.get(&addr).copied().unwrap_or(0)
    }

    pub fn store(&mut self, addr: i64, v: i64) {
        self.mem.insert(addr, v);
    }

    pub fn eval(&self, e: &Expr) -> i64 {
        match e {
            Expr::Imm(v) => *v,
            Expr::Reg(r) => self.reg(r),
        }
    }

    pub fn top_ctx(&self) -> Option<Ctx> {
        self.ctx_stack.last().copied()
    }

    /// Registers with a nonzero value, which is all that distinguishes states.
    pub fn nonzero_regs(&self) -> BTreeMap<&Register, i64> {
        self.regs.iter().filter(|(r, v)| **v != 0 && !r.is_zero()).map(|(r, v)| (r, *v)).collect()
    }

    /// Memory cells with a nonzero value.
    pub fn nonzero_mem(&self) -> BTreeMap<i64, i64> {
        self.mem.iter().filter(|(_, v)| **v != 0).map(|(a, v)| (*a, *v)).collect()
    }
}

/// Why a single step could not be taken.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepFault {
    #[error("stuck: {0}")]
    Stuck(String),
    #[error("hardware limit: {0}")]
    HwLimit(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step {step} at pc {pc}: {fault}")]
pub struct RunError {
    pub step: usize,
    pub pc: Loc,
    pub fault: StepFault,
}

fn stuck<T>(msg: impl Into<String>) -> Result<T, StepFault> {
    Err(StepFault::Stuck(msg.into()))
}

pub fn slice_addr(pc: Loc, off: usize) -> Result<Loc, StepFault> {
    pc.0.checked_sub(off).map(Loc).ok_or_else(|| StepFault::Stuck(format!("offset {off} exceeds pc {pc}")))
}

pub fn next_slice(pc: Loc, bbc: usize, off: usize) -> Result<Loc, StepFault> {
    Ok(slice_addr(pc, off)?.offset(bbc))
}

pub fn eval_unary(op: UnaryOp, v: i64, c: &Config) -> i64 {
    match op {
        UnaryOp::Neg => v.wrapping_neg(),
        UnaryOp::Not => !v,
        UnaryOp::Mv => v,
        UnaryOp::Seqz => (v == 0) as i64,
        UnaryOp::Snez => (v != 0) as i64,
        UnaryOp::Load => c.load(v),
    }
}

/// RISC-V style arithmetic: wrapping, shifts mask to 6 bits, division by
/// zero yields all ones (quotient) or the dividend (remainder).
pub fn eval_binary(op: BinaryOp, a: i64, b: i64) -> i64 {
    use BinaryOp::*;
    match op {
        Add | Addi => a.wrapping_add(b),
        Sub => a.wrapping_sub(b),
        Mul => a.wrapping_mul(b),
        Div => {
            if b == 0 {
                -1
            } else {
                a.wrapping_div(b)
            }
        }
        Divu => {
            if b == 0 {
                -1
            } else {
                ((a as u64) / (b as u64)) as i64
            }
        }
        Rem => {
            if b == 0 {
                a
            } else {
                a.wrapping_rem(b)
            }
        }
        Remu => {
            if b == 0 {
                a
            } else {
                ((a as u64) % (b as u64)) as i64
            }
        }
        And | Andi => a & b,
        Or | Ori => a | b,
        Xor | Xori => a ^ b,
        Sll | Slli => a.wrapping_shl((b & 63) as u32),
        Srl | Srli => ((a as u64) >> (b & 63)) as i64,
        Sra | Srai => a >> (b & 63),
        Slt => (a < b) as i64,
        Sltu => ((a as u64) < (b as u64)) as i64,
    }
}

/// Applies a non-control-transfer instruction. Returns false for
/// control transfers, which are left to the caller.
pub fn exec_data(instr: &Instr, c: &mut Config) -> bool {
    match instr {
        Instr::Unary { op, dest, src } => {
            let v = eval_unary(*op, c.eval(src), c);
            c.set_reg(dest, v);
        }
        Instr::Binary { op, dest, lhs, rhs } => {
            let v = eval_binary(*op, c.eval(lhs), c.eval(rhs));
            c.set_reg(dest, v);
        }
        Instr::Store { value, addr } => {
            let (v, a) = (c.eval(value), c.eval(addr));
            c.store(a, v);
        }
        _ => return false,
    }
    true
}

fn fetch(p: &Program, c: &Config) -> Result<Instr, StepFault> {
    match p.get(c.pc) {
        Some(i) => Ok(i.clone()),
        None => stuck(format!("pc {} is outside the code", c.pc)),
    }
}

/// One source-semantics step. The context stack is left untouched.
pub fn step_source(p: &Program, c: &mut Config) -> Result<(), StepFault> {
    let instr = fetch(p, c)?;
    if exec_data(&instr, c) {
        c.pc = c.pc.offset(1);
        return Ok(());
    }
    match instr {
        Instr::Branch { cond, on_true, on_false } | Instr::SecretBranch { cond, on_true, on_false } => {
            c.pc = if c.eval(&cond) != 0 { on_true } else { on_false };
        }
        Instr::Call { target } => {
            c.ret_stack.push(c.pc.offset(1));
            c.pc = target;
        }
        Instr::SecretCall { real, func, dummy } => {
            c.ret_stack.push(c.pc.offset(1));
            c.pc = if real { func } else { dummy };
        }
        Instr::Ret => match c.ret_stack.pop() {
            Some(r) => c.pc = r,
            None => return stuck("return with an empty return stack"),
        },
        other => return stuck(format!("`{}` is not a source instruction", other.mnemonic())),
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Enforce the slice-width and context-depth limits of the hardware profile.
    pub hw_mode: bool,
}

fn push_ctx(c: &mut Config, ctx: Ctx, opts: ExecOptions) -> Result<(), StepFault> {
    c.ctx_stack.push(ctx);
    if opts.hw_mode && c.ctx_stack.len() > HW_MAX_CTX_DEPTH {
        return Err(StepFault::HwLimit(format!(
            "context stack depth {} exceeds {HW_MAX_CTX_DEPTH}",
            c.ctx_stack.len()
        )));
    }
    Ok(())
}

/// One target-semantics step.
pub fn step_target(p: &Program, c: &mut Config, opts: ExecOptions) -> Result<(), StepFault> {
    let instr = fetch(p, c)?;
    let Some(top) = c.top_ctx() else {
        return stuck("empty context stack");
    };
    if top.off >= top.bbc {
        return stuck(format!("malformed context {top}"));
    }
    if exec_data(&instr, c) {
        c.pc = c.pc.offset(top.bbc);
        return Ok(());
    }
    match instr {
        Instr::LevelBranch { cond, off_true, off_false, bbc } => {
            if opts.hw_mode && bbc > HW_MAX_BBC {
                return Err(StepFault::HwLimit(format!("slice of {bbc} blocks exceeds {HW_MAX_BBC}")));
            }
            let off = if c.eval(&cond) != 0 { off_true } else { off_false };
            if off >= bbc {
                return stuck(format!("offset {off} not below slice size {bbc}"));
            }
            c.pc = next_slice(c.pc, top.bbc, top.off)?.offset(off);
            *c.ctx_stack.last_mut().unwrap() = Ctx { bbc, off };
        }
        Instr::LevelCall { real, target } => {
            let off = if real { 0 } else { 1 };
            c.ret_stack.push(c.pc.offset(top.bbc));
            c.pc = target.offset(off);
            push_ctx(c, Ctx { bbc: 2, off }, opts)?;
        }
        Instr::Call { target } => {
            c.ret_stack.push(c.pc.offset(top.bbc));
            c.pc = target;
            push_ctx(c, Ctx::INITIAL, opts)?;
        }
        Instr::Branch { cond, on_true, on_false } => {
            if top != Ctx::INITIAL {
                return stuck(format!("plain branch inside a folded slice {top}"));
            }
            c.pc = if c.eval(&cond) != 0 { on_true } else { on_false };
        }
        Instr::Ret => {
            let Some(r) = c.ret_stack.pop() else {
                return stuck("return with an empty return stack");
            };
            if c.ctx_stack.len() < 2 {
                return stuck("return would empty the context stack");
            }
            c.ctx_stack.pop();
            c.pc = r;
        }
        other => return stuck(format!("`{}` is not a target instruction", other.mnemonic())),
    }
    Ok(())
}

/// Which semantics to run a program under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Semantics {
    Source,
    Target(ExecOptions),
}

impl Semantics {
    pub fn step(self, p: &Program, c: &mut Config) -> Result<(), StepFault> {
        match self {
            Semantics::Source => step_source(p, c),
            Semantics::Target(opts) => step_target(p, c, opts),
        }
    }
}

/// Produces one observation per step from the pre-step state.
pub trait Observer {
    type Obs;
    fn observe(&self, p: &Program, c: &Config) -> Self::Obs;
}

/// Observes nothing.
pub struct Blind;

impl Observer for Blind {
    type Obs = ();
    fn observe(&self, _: &Program, _: &Config) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Halt {
    /// The pc reached the halt location.
    Halted,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct Run<O> {
    pub config: Config,
    pub trace: Vec<O>,
    /// Pre-step pc of every step.
    pub pcs: Vec<Loc>,
    pub steps: usize,
    pub halt: Halt,
}

/// Steps until halt or `max_steps`.
pub fn run<O: Observer>(
    p: &Program,
    c0: Config,
    sem: Semantics,
    observer: &O,
    max_steps: usize,
) -> Result<Run<O::Obs>, RunError> {
    let mut c = c0;
    let mut trace = Vec::new();
    let mut pcs = Vec::new();
    let halt_loc = p.halt_loc();
    let mut steps = 0;
    let halt = loop {
        if c.pc == halt_loc {
            break Halt::Halted;
        }
        if steps >= max_steps {
            break Halt::MaxSteps;
        }
        trace.push(observer.observe(p, &c));
        pcs.push(c.pc);
        let pc = c.pc;
        sem.step(p, &mut c).map_err(|fault| RunError { step: steps, pc, fault })?;
        steps += 1;
    };
    Ok(Run { config: c, trace, pcs, steps, halt })
}
