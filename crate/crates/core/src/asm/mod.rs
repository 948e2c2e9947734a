//! Source (`sasm`) and target (`tasm`) instruction languages.
//!
//! Both dialects share the ordinary ISA instructions. The source dialect adds
//! annotated secret branches and secret calls; the target dialect adds the
//! level-offset branch and level-offset call used to walk folded code.
//! Programs are dense: one instruction per address unit, starting at 0.

mod text;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub use text::{normalize_listing, parse_instruction, parse_program, parse_program_with, serialize_normalized, serialize_program, AsmError, ParseOptions};
pub use validate::{validate_program, DiagCode, Diagnostic};

/// A code address. One instruction occupies one unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Loc(pub usize);

impl Loc {
    pub fn offset(self, by: usize) -> Loc {
        Loc(self.0 + by)
    }
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A register name. `zero` always reads 0 and ignores writes.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Register(Arc<str>);

const ABI_NAMES: [&str; 32] = [
    "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4", "a5",
    "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4", "t5", "t6",
];

impl Register {
    /// Builds a register, mapping `xN` aliases onto their ABI names.
    pub fn new(name: &str) -> Register {
        if let Some(n) = name.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
            let canonical_digits = name == "x0" || !name[1..].starts_with('0');
            if n < 32 && canonical_digits {
                return Register(Arc::from(ABI_NAMES[n]));
            }
        }
        if name == "fp" {
            return Register(Arc::from("s0"));
        }
        Register(Arc::from(name))
    }

    pub fn zero() -> Register {
        Register::new("zero")
    }

    pub fn is_zero(&self) -> bool {
        &*self.0 == "zero"
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Operand expression: an immediate or a register.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Imm(i64),
    Reg(Register),
}

impl Expr {
    pub fn reg(name: &str) -> Expr {
        Expr::Reg(Register::new(name))
    }

    /// True when the expression always evaluates to zero.
    pub fn is_const_zero(&self) -> bool {
        match self {
            Expr::Imm(v) => *v == 0,
            Expr::Reg(r) => r.is_zero(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Imm(v) => write!(f, "{v}"),
            Expr::Reg(r) => write!(f, "{r}"),
        }
    }
}

macro_rules! op_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $txt:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name { $($var),* }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),*];

            pub fn mnemonic(self) -> &'static str {
                match self { $($name::$var => $txt),* }
            }

            pub fn from_mnemonic(s: &str) -> Option<$name> {
                match s { $($txt => Some($name::$var),)* _ => None }
            }
        }
    };
}

op_enum!(
    /// Non-control-transfer instructions with one source operand.
    UnaryOp {
        Neg => "neg",
        Not => "not",
        Mv => "mv",
        Seqz => "seqz",
        Snez => "snez",
        Load => "load",
    }
);

op_enum!(
    /// Non-control-transfer instructions with two source operands.
    BinaryOp {
        Add => "add",
        Addi => "addi",
        Sub => "sub",
        Mul => "mul",
        Div => "div",
        Divu => "divu",
        Rem => "rem",
        Remu => "remu",
        And => "and",
        Andi => "andi",
        Or => "or",
        Ori => "ori",
        Xor => "xor",
        Xori => "xori",
        Sll => "sll",
        Slli => "slli",
        Srl => "srl",
        Srli => "srli",
        Sra => "sra",
        Srai => "srai",
        Slt => "slt",
        Sltu => "sltu",
    }
);

/// One instruction of either dialect.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    Unary { op: UnaryOp, dest: Register, src: Expr },
    Binary { op: BinaryOp, dest: Register, lhs: Expr, rhs: Expr },
    /// `store value, addr`
    Store { value: Expr, addr: Expr },
    Branch { cond: Expr, on_true: Loc, on_false: Loc },
    /// `s.br`: a branch on a secret condition (source only).
    SecretBranch { cond: Expr, on_true: Loc, on_false: Loc },
    Call { target: Loc },
    /// `s.call b,f,f'`: calls `func` when `real`, its dummy otherwise (source only).
    SecretCall { real: bool, func: Loc, dummy: Loc },
    Ret,
    /// `lo.br c,offT:offF:bbc` (target only).
    LevelBranch { cond: Expr, off_true: usize, off_false: usize, bbc: usize },
    /// `lo.call b,f` into a function folded with its dummy (target only).
    LevelCall { real: bool, target: Loc },
}

/// Which instruction dialect a program is written in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dialect {
    Source,
    Target,
    Mixed,
}

impl Instr {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Unary { op, .. } => op.mnemonic(),
            Instr::Binary { op, .. } => op.mnemonic(),
            Instr::Store { .. } => "store",
            Instr::Branch { .. } => "br",
            Instr::SecretBranch { .. } => "s.br",
            Instr::Call { .. } => "call",
            Instr::SecretCall { .. } => "s.call",
            Instr::Ret => "ret",
            Instr::LevelBranch { .. } => "lo.br",
            Instr::LevelCall { .. } => "lo.call",
        }
    }

    /// Every mnemonic an instruction can carry.
    pub fn all_mnemonics() -> Vec<&'static str> {
        let mut out: Vec<&'static str> = UnaryOp::ALL.iter().map(|o| o.mnemonic()).collect();
        out.extend(BinaryOp::ALL.iter().map(|o| o.mnemonic()));
        out.extend(CONTROL_MNEMONICS);
        out.push("store");
        out
    }

    /// Ends a basic block. Calls return to the next instruction and do not.
    pub fn is_terminator(&self) -> bool {
        matches!(
            self,
            Instr::Branch { .. } | Instr::SecretBranch { .. } | Instr::Ret | Instr::LevelBranch { .. }
        )
    }

    pub fn is_control_transfer(&self) -> bool {
        CONTROL_MNEMONICS.contains(&self.mnemonic())
    }

    pub fn is_source_only(&self) -> bool {
        matches!(self, Instr::SecretBranch { .. } | Instr::SecretCall { .. })
    }

    pub fn is_target_only(&self) -> bool {
        matches!(self, Instr::LevelBranch { .. } | Instr::LevelCall { .. })
    }

    /// Code locations named by this instruction.
    pub fn code_targets(&self) -> Vec<Loc> {
        match self {
            Instr::Branch { on_true, on_false, .. } | Instr::SecretBranch { on_true, on_false, .. } => {
                vec![*on_true, *on_false]
            }
            Instr::Call { target } | Instr::LevelCall { target, .. } => vec![*target],
            Instr::SecretCall { func, dummy, .. } => vec![*func, *dummy],
            _ => Vec::new(),
        }
    }

    /// Rewrites every code location through `f`.
    pub fn map_targets(&self, mut f: impl FnMut(Loc) -> Loc) -> Instr {
        match self.clone() {
            Instr::Branch { cond, on_true, on_false } => Instr::Branch { cond, on_true: f(on_true), on_false: f(on_false) },
            Instr::SecretBranch { cond, on_true, on_false } => {
                Instr::SecretBranch { cond, on_true: f(on_true), on_false: f(on_false) }
            }
            Instr::Call { target } => Instr::Call { target: f(target) },
            Instr::SecretCall { real, func, dummy } => Instr::SecretCall { real, func: f(func), dummy: f(dummy) },
            Instr::LevelCall { real, target } => Instr::LevelCall { real, target: f(target) },
            other => other,
        }
    }

    /// `j L`
    pub fn jump(to: Loc) -> Instr {
        Instr::Branch { cond: Expr::Reg(Register::zero()), on_true: to, on_false: to }
    }

    /// `lo.br zero,0:0:1`, the exit from a folded level into a one-block level.
    pub fn level_jump() -> Instr {
        Instr::LevelBranch { cond: Expr::Reg(Register::zero()), off_true: 0, off_false: 0, bbc: 1 }
    }

    /// The register written, if any.
    pub fn dest(&self) -> Option<&Register> {
        match self {
            Instr::Unary { dest, .. } | Instr::Binary { dest, .. } => Some(dest),
            _ => None,
        }
    }
}

pub const CONTROL_MNEMONICS: [&str; 7] = ["br", "s.br", "lo.br", "call", "s.call", "lo.call", "ret"];

/// A program: dense code, a label table and an entry point.
///
/// Labels may also name `code.len()`, the halt location.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    pub code: Vec<Instr>,
    pub labels: BTreeMap<String, Loc>,
    pub entry: Loc,
}

impl Program {
    pub fn new(code: Vec<Instr>) -> Program {
        Program { code, labels: BTreeMap::new(), entry: Loc(0) }
    }

    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.is_empty()
    }

    pub fn get(&self, loc: Loc) -> Option<&Instr> {
        self.code.get(loc.0)
    }

    /// The pseudo-location one past the last instruction.
    pub fn halt_loc(&self) -> Loc {
        Loc(self.code.len())
    }

    pub fn label(&self, name: &str) -> Option<Loc> {
        self.labels.get(name).copied()
    }

    /// Labels grouped by location, in name order.
    pub fn labels_at(&self) -> BTreeMap<Loc, Vec<&str>> {
        let mut out: BTreeMap<Loc, Vec<&str>> = BTreeMap::new();
        for (name, loc) in &self.labels {
            out.entry(*loc).or_default().push(name);
        }
        out
    }

    /// The dialect implied by the instructions present.
    pub fn dialect(&self) -> Dialect {
        let src = self.code.iter().any(Instr::is_source_only);
        let tgt = self.code.iter().any(Instr::is_target_only);
        match (src, tgt) {
            (true, true) => Dialect::Mixed,
            (false, true) => Dialect::Target,
            _ => Dialect::Source,
        }
    }
}
