use std::fmt;

use super::{Dialect, Instr, Loc, Program};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DiagCode {
    OffsetOutOfRange,
    ZeroBbc,
    DialectViolation,
    TargetOutOfRange,
    MissingEntry,
}

impl DiagCode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagCode::OffsetOutOfRange => "OFFSET_OUT_OF_RANGE",
            DiagCode::ZeroBbc => "ZERO_BBC",
            DiagCode::DialectViolation => "DIALECT_VIOLATION",
            DiagCode::TargetOutOfRange => "TARGET_OUT_OF_RANGE",
            DiagCode::MissingEntry => "MISSING_ENTRY",
        }
    }
}

impl fmt::Display for DiagCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub loc: Option<Loc>,
    pub code: DiagCode,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.loc {
            Some(l) => write!(f, "@{l}: {}: {}", self.code, self.message),
            None => write!(f, "{}: {}", self.code, self.message),
        }
    }
}

/// Checks instruction invariants and dialect restrictions. Empty means valid.
pub fn validate_program(p: &Program, dialect: Dialect) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |loc: Option<Loc>, code, message: String| out.push(Diagnostic { loc, code, message });

    if p.entry.0 >= p.code.len() {
        push(None, DiagCode::MissingEntry, format!("entry @{} has no instruction", p.entry));
    }
    for (i, instr) in p.code.iter().enumerate() {
        let loc = Some(Loc(i));
        if let Instr::LevelBranch { off_true, off_false, bbc, .. } = instr {
            if *bbc == 0 {
                push(loc, DiagCode::ZeroBbc, "level-offset branch with bbc 0".into());
            } else if off_true >= bbc || off_false >= bbc {
                push(loc, DiagCode::OffsetOutOfRange, format!("offsets {off_true}:{off_false} not below bbc {bbc}"));
            }
        }
        match dialect {
            Dialect::Source if instr.is_target_only() => {
                push(loc, DiagCode::DialectViolation, format!("`{}` is not a source instruction", instr.mnemonic()))
            }
            Dialect::Target if instr.is_source_only() => {
                push(loc, DiagCode::DialectViolation, format!("`{}` is not a target instruction", instr.mnemonic()))
            }
            _ => {}
        }
        for t in instr.code_targets() {
            // Branches may name the halt location; calls must land on code.
            let limit = if matches!(instr, Instr::Branch { .. } | Instr::SecretBranch { .. }) {
                p.code.len()
            } else {
                p.code.len().saturating_sub(1)
            };
            if t.0 > limit || p.code.is_empty() {
                push(loc, DiagCode::TargetOutOfRange, format!("target @{t} is outside the code"));
            }
        }
    }
    out
}
