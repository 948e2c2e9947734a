//! Assembly text front-end and back-end.
//!
//! One label or instruction per line (a label may also prefix an instruction
//! on the same line), operands separated by commas, `#` starts a comment.
//! Code targets are label names or absolute locations written `@<n>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{BinaryOp, Dialect, Expr, Instr, Loc, Program, Register, UnaryOp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("source-only instruction on line {source_line} and target-only instruction on line {target_line} in one program (use the mixed dialect)")]
    MixedDialect { source_line: usize, target_line: usize },
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Accept source-only and target-only instructions in one program.
    pub allow_mixed: bool,
}

/// Code target before label resolution.
#[derive(Clone, Debug)]
enum Target {
    Label(String),
    Abs(usize),
}

#[derive(Clone, Debug)]
enum RawInstr {
    Plain(Instr),
    Branch { secret: bool, cond: Expr, on_true: Target, on_false: Target },
    Call(Target),
    SecretCall { real: bool, func: Target, dummy: Target },
    LevelCall { real: bool, target: Target },
}

fn err(line: usize, reason: impl Into<String>) -> AsmError {
    AsmError::Parse { line, reason: reason.into() }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '\'' | '$'))
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok().map(|u| u as i64)?
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_usize(line: usize, s: &str) -> Result<usize, AsmError> {
    s.trim().parse::<usize>().map_err(|_| err(line, format!("expected a non-negative integer, found `{s}`")))
}

fn parse_expr(line: usize, s: &str) -> Result<Expr, AsmError> {
    if let Some(v) = parse_int(s) {
        return Ok(Expr::Imm(v));
    }
    if is_ident(s) && !s.starts_with('.') {
        return Ok(Expr::Reg(Register::new(s)));
    }
    Err(err(line, format!("bad operand `{s}`")))
}

fn parse_reg(line: usize, s: &str) -> Result<Register, AsmError> {
    match parse_expr(line, s)? {
        Expr::Reg(r) => Ok(r),
        Expr::Imm(_) => Err(err(line, format!("expected a destination register, found `{s}`"))),
    }
}

fn parse_target(line: usize, s: &str) -> Result<Target, AsmError> {
    if let Some(n) = s.strip_prefix('@') {
        return Ok(Target::Abs(parse_usize(line, n)?));
    }
    if is_ident(s) {
        return Ok(Target::Label(s.to_string()));
    }
    Err(err(line, format!("bad code target `{s}`")))
}

fn parse_bool(line: usize, s: &str) -> Result<bool, AsmError> {
    match s {
        "T" | "true" | "⊤" => Ok(true),
        "F" | "false" | "⊥" => Ok(false),
        _ => Err(err(line, format!("expected T or F, found `{s}`"))),
    }
}

fn arity(line: usize, mnemonic: &str, ops: &[&str], n: usize) -> Result<(), AsmError> {
    if ops.len() != n {
        return Err(err(line, format!("`{mnemonic}` takes {n} operand(s), found {}", ops.len())));
    }
    Ok(())
}

fn parse_raw(line: usize, text: &str) -> Result<RawInstr, AsmError> {
    let text = text.trim();
    let (mnemonic, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let ops: Vec<&str> = if rest.is_empty() { Vec::new() } else { rest.split(',').map(str::trim).collect() };

    if let Some(op) = UnaryOp::from_mnemonic(mnemonic) {
        arity(line, mnemonic, &ops, 2)?;
        return Ok(RawInstr::Plain(Instr::Unary { op, dest: parse_reg(line, ops[0])?, src: parse_expr(line, ops[1])? }));
    }
    if let Some(op) = BinaryOp::from_mnemonic(mnemonic) {
        arity(line, mnemonic, &ops, 3)?;
        return Ok(RawInstr::Plain(Instr::Binary {
            op,
            dest: parse_reg(line, ops[0])?,
            lhs: parse_expr(line, ops[1])?,
            rhs: parse_expr(line, ops[2])?,
        }));
    }
    match mnemonic {
        "store" => {
            arity(line, mnemonic, &ops, 2)?;
            Ok(RawInstr::Plain(Instr::Store { value: parse_expr(line, ops[0])?, addr: parse_expr(line, ops[1])? }))
        }
        "br" | "s.br" => {
            arity(line, mnemonic, &ops, 3)?;
            Ok(RawInstr::Branch {
                secret: mnemonic == "s.br",
                cond: parse_expr(line, ops[0])?,
                on_true: parse_target(line, ops[1])?,
                on_false: parse_target(line, ops[2])?,
            })
        }
        "j" => {
            arity(line, mnemonic, &ops, 1)?;
            let to = parse_target(line, ops[0])?;
            Ok(RawInstr::Branch { secret: false, cond: Expr::Reg(Register::zero()), on_true: to.clone(), on_false: to })
        }
        "call" => {
            arity(line, mnemonic, &ops, 1)?;
            Ok(RawInstr::Call(parse_target(line, ops[0])?))
        }
        "s.call" => {
            arity(line, mnemonic, &ops, 3)?;
            Ok(RawInstr::SecretCall {
                real: parse_bool(line, ops[0])?,
                func: parse_target(line, ops[1])?,
                dummy: parse_target(line, ops[2])?,
            })
        }
        "ret" => {
            arity(line, mnemonic, &ops, 0)?;
            Ok(RawInstr::Plain(Instr::Ret))
        }
        "lo.br" => {
            arity(line, mnemonic, &ops, 2)?;
            let parts: Vec<&str> = ops[1].split(':').collect();
            if parts.len() != 3 {
                return Err(err(line, format!("expected offT:offF:bbc, found `{}`", ops[1])));
            }
            Ok(RawInstr::Plain(Instr::LevelBranch {
                cond: parse_expr(line, ops[0])?,
                off_true: parse_usize(line, parts[0])?,
                off_false: parse_usize(line, parts[1])?,
                bbc: parse_usize(line, parts[2])?,
            }))
        }
        "lo.j" => match ops.len() {
            0 => Ok(RawInstr::Plain(Instr::level_jump())),
            1 => {
                let n = parse_usize(line, ops[0])?;
                Ok(RawInstr::Plain(Instr::LevelBranch { cond: Expr::Reg(Register::zero()), off_true: n, off_false: n, bbc: 2 }))
            }
            k => Err(err(line, format!("`lo.j` takes 0 or 1 operands, found {k}"))),
        },
        "lo.call" => {
            arity(line, mnemonic, &ops, 2)?;
            Ok(RawInstr::LevelCall { real: parse_bool(line, ops[0])?, target: parse_target(line, ops[1])? })
        }
        _ => Err(err(line, format!("unknown mnemonic `{mnemonic}`"))),
    }
}

/// Splits a leading `label:` off a line, if present.
fn split_label(line: &str) -> Option<(&str, &str)> {
    let idx = line.find(':')?;
    let name = line[..idx].trim();
    if is_ident(name) {
        Some((name, &line[idx + 1..]))
    } else {
        None
    }
}

/// Parses a program, rejecting mixed source/target dialect.
pub fn parse_program(text: &str) -> Result<Program, AsmError> {
    parse_program_with(text, ParseOptions::default())
}

pub fn parse_program_with(text: &str, opts: ParseOptions) -> Result<Program, AsmError> {
    let mut raw: Vec<(usize, RawInstr)> = Vec::new();
    let mut labels: BTreeMap<String, Loc> = BTreeMap::new();
    let mut entry: Option<(usize, Target)> = None;

    for (idx, full) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut line = match full.find('#') {
            Some(i) => &full[..i],
            None => full,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(".entry") {
            let name = rest.trim();
            if name.is_empty() {
                return Err(err(line_no, "`.entry` needs a label"));
            }
            entry = Some((line_no, parse_target(line_no, name)?));
            continue;
        }
        if let Some((name, rest)) = split_label(line) {
            if labels.insert(name.to_string(), Loc(raw.len())).is_some() {
                return Err(err(line_no, format!("duplicate label `{name}`")));
            }
            line = rest.trim();
            if line.is_empty() {
                continue;
            }
        }
        raw.push((line_no, parse_raw(line_no, line)?));
    }

    let halt = raw.len();
    let resolve = |line: usize, t: &Target| -> Result<Loc, AsmError> {
        match t {
            Target::Label(name) => labels.get(name).copied().ok_or_else(|| err(line, format!("unresolved label `{name}`"))),
            Target::Abs(n) if *n <= halt => Ok(Loc(*n)),
            Target::Abs(n) => Err(err(line, format!("location @{n} is outside the program"))),
        }
    };

    let mut code = Vec::with_capacity(raw.len());
    let mut first_source = None;
    let mut first_target = None;
    for (line, r) in &raw {
        let instr = match r {
            RawInstr::Plain(i) => i.clone(),
            RawInstr::Branch { secret, cond, on_true, on_false } => {
                let (on_true, on_false) = (resolve(*line, on_true)?, resolve(*line, on_false)?);
                if *secret {
                    Instr::SecretBranch { cond: cond.clone(), on_true, on_false }
                } else {
                    Instr::Branch { cond: cond.clone(), on_true, on_false }
                }
            }
            RawInstr::Call(t) => Instr::Call { target: resolve(*line, t)? },
            RawInstr::SecretCall { real, func, dummy } => {
                Instr::SecretCall { real: *real, func: resolve(*line, func)?, dummy: resolve(*line, dummy)? }
            }
            RawInstr::LevelCall { real, target } => Instr::LevelCall { real: *real, target: resolve(*line, target)? },
        };
        if instr.is_source_only() && first_source.is_none() {
            first_source = Some(*line);
        }
        if instr.is_target_only() && first_target.is_none() {
            first_target = Some(*line);
        }
        code.push(instr);
    }
    if let (Some(source_line), Some(target_line), false) = (first_source, first_target, opts.allow_mixed) {
        return Err(AsmError::MixedDialect { source_line, target_line });
    }

    let entry = match entry {
        Some((line, target)) => resolve(line, &target)?,
        None => Loc(0),
    };
    Ok(Program { code, labels, entry })
}

/// Parses a single instruction with numeric (`@n`) code targets only.
pub fn parse_instruction(text: &str) -> Result<Instr, AsmError> {
    let raw = parse_raw(1, text)?;
    let abs = |t: &Target| match t {
        Target::Abs(n) => Ok(Loc(*n)),
        Target::Label(l) => Err(err(1, format!("unresolved label `{l}`"))),
    };
    Ok(match raw {
        RawInstr::Plain(i) => i,
        RawInstr::Branch { secret: false, cond, on_true, on_false } => {
            Instr::Branch { cond, on_true: abs(&on_true)?, on_false: abs(&on_false)? }
        }
        RawInstr::Branch { secret: true, cond, on_true, on_false } => {
            Instr::SecretBranch { cond, on_true: abs(&on_true)?, on_false: abs(&on_false)? }
        }
        RawInstr::Call(t) => Instr::Call { target: abs(&t)? },
        RawInstr::SecretCall { real, func, dummy } => Instr::SecretCall { real, func: abs(&func)?, dummy: abs(&dummy)? },
        RawInstr::LevelCall { real, target } => Instr::LevelCall { real, target: abs(&target)? },
    })
}

fn bool_text(b: bool) -> &'static str {
    if b {
        "T"
    } else {
        "F"
    }
}

/// Renders one instruction, naming code targets through `name`.
pub(crate) fn render_instr(instr: &Instr, name: &dyn Fn(Loc) -> String) -> String {
    match instr {
        Instr::Unary { op, dest, src } => format!("{} {dest},{src}", op.mnemonic()),
        Instr::Binary { op, dest, lhs, rhs } => format!("{} {dest},{lhs},{rhs}", op.mnemonic()),
        Instr::Store { value, addr } => format!("store {value},{addr}"),
        Instr::Branch { cond: Expr::Reg(r), on_true, on_false } if r.is_zero() && on_true == on_false => {
            format!("j {}", name(*on_true))
        }
        Instr::Branch { cond, on_true, on_false } => format!("br {cond},{},{}", name(*on_true), name(*on_false)),
        Instr::SecretBranch { cond, on_true, on_false } => format!("s.br {cond},{},{}", name(*on_true), name(*on_false)),
        Instr::Call { target } => format!("call {}", name(*target)),
        Instr::SecretCall { real, func, dummy } => format!("s.call {},{},{}", bool_text(*real), name(*func), name(*dummy)),
        Instr::Ret => "ret".to_string(),
        Instr::LevelBranch { cond, off_true, off_false, bbc } => format!("lo.br {cond},{off_true}:{off_false}:{bbc}"),
        Instr::LevelCall { real, target } => format!("lo.call {},{}", bool_text(*real), name(*target)),
    }
}

impl std::fmt::Display for Instr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&render_instr(self, &|l: Loc| format!("@{l}")))
    }
}

/// Deterministic text for `p`; `parse_program` of the result rebuilds `p`.
pub fn serialize_program(p: &Program) -> String {
    let by_loc = p.labels_at();
    let name = |l: Loc| match by_loc.get(&l) {
        Some(names) => names[0].to_string(),
        None => format!("@{l}"),
    };
    let mut out = String::new();
    if p.entry != Loc(0) {
        let _ = writeln!(out, ".entry {}", name(p.entry));
    }
    for loc in 0..=p.code.len() {
        if let Some(names) = by_loc.get(&Loc(loc)) {
            for n in names {
                let _ = writeln!(out, "{n}:");
            }
        }
        if let Some(instr) = p.code.get(loc) {
            let _ = writeln!(out, "    {}", render_instr(instr, &name));
        }
    }
    out
}

/// Label-free rendering with absolute targets; two programs that differ only
/// in label spelling render identically.
pub fn serialize_normalized(p: &Program) -> String {
    let mut out = String::new();
    if p.entry != Loc(0) {
        let _ = writeln!(out, ".entry @{}", p.entry);
    }
    for instr in &p.code {
        let _ = writeln!(out, "{instr}");
    }
    out
}

/// Parses listing text in any dialect and renders it label-free.
pub fn normalize_listing(text: &str) -> Result<String, AsmError> {
    let p = parse_program_with(text, ParseOptions { allow_mixed: true })?;
    Ok(serialize_normalized(&p))
}

impl Dialect {
    pub fn parse(s: &str) -> Option<Dialect> {
        match s {
            "source" | "sasm" => Some(Dialect::Source),
            "target" | "tasm" => Some(Dialect::Target),
            "mixed" => Some(Dialect::Mixed),
            _ => None,
        }
    }
}
