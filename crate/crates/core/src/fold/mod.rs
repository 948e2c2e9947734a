//! Folding of balanced secret-dependent regions and function pairs.
//!
//! Every level of a level structure is rewritten so its terminators become
//! level-offset branches into the next level, then its blocks are
//! interleaved instruction by instruction. [`transform`] assembles the folded
//! pieces into a target program.

mod layout;

use std::collections::BTreeMap;

use crate::asm::{Instr, Loc};
use crate::cfg::{
    function_levels, level_structure, validate_foldable, validate_function_pair, BasicBlock, BlockId,
    ControlFlowGraph, FoldCode, FoldDiagnostic, SecretRegion,
};

pub use layout::{transform, transform_with, CorrMap, FoldError, FoldOptions, Folded};

/// A level after interleaving: `instrs[j * bbc + i]` is instruction `j` of block `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldedLevel {
    /// Number of interleaved blocks.
    pub bbc: usize,
    pub instrs: Vec<Instr>,
    /// Source location of each instruction in `instrs`.
    pub origin: Vec<Loc>,
}

impl FoldedLevel {
    pub fn block_len(&self) -> usize {
        self.instrs.len() / self.bbc.max(1)
    }
}

fn check_equal_lengths(level: &[BasicBlock]) -> Result<usize, FoldDiagnostic> {
    let lens: Vec<usize> = level.iter().map(BasicBlock::len).collect();
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(FoldDiagnostic::new(
            FoldCode::UnequalLevelLengths,
            level.first().map(|b| b.start),
            format!("block lengths {lens:?}"),
        ));
    }
    Ok(lens.first().copied().unwrap_or(0))
}

/// Rewrites the terminators of `level` into level-offset branches indexing
/// into `next`. Returns are left alone.
pub fn insert_lob(level: &[BasicBlock], next: &[BasicBlock]) -> Result<Vec<BasicBlock>, FoldDiagnostic> {
    check_equal_lengths(level)?;
    let index_of = |from: &BasicBlock, target: Loc| {
        next.iter().position(|b| b.start == target).ok_or_else(|| {
            FoldDiagnostic::new(
                FoldCode::TargetNotInNextLevel,
                Some(from.end().0.checked_sub(1).map(Loc).unwrap_or_default()),
                format!("branch target @{target} is not in the next level"),
            )
        })
    };
    level
        .iter()
        .map(|b| {
            let mut out = b.clone();
            let last = out.instrs.len() - 1;
            match &b.instrs[last] {
                Instr::Branch { cond, on_true, on_false } | Instr::SecretBranch { cond, on_true, on_false } => {
                    out.instrs[last] = Instr::LevelBranch {
                        cond: cond.clone(),
                        off_true: index_of(b, *on_true)?,
                        off_false: index_of(b, *on_false)?,
                        bbc: next.len(),
                    };
                }
                Instr::Ret => {}
                other => {
                    return Err(FoldDiagnostic::new(
                        FoldCode::BadTerminator,
                        Some(b.start.offset(last)),
                        format!("block ends in `{}`", other.mnemonic()),
                    ))
                }
            }
            Ok(out)
        })
        .collect()
}

/// Interleaves equally long blocks instruction by instruction.
pub fn fold_level(level: &[BasicBlock]) -> Result<FoldedLevel, FoldDiagnostic> {
    let len = check_equal_lengths(level)?;
    let bbc = level.len();
    let mut instrs = Vec::with_capacity(len * bbc);
    let mut origin = Vec::with_capacity(len * bbc);
    for j in 0..len {
        for b in level {
            instrs.push(b.instrs[j].clone());
            origin.push(b.start.offset(j));
        }
    }
    Ok(FoldedLevel { bbc, instrs, origin })
}

/// Recovers the instruction sequences of the interleaved blocks.
pub fn unfold_level(level: &FoldedLevel) -> Vec<Vec<Instr>> {
    (0..level.bbc).map(|i| level.instrs.iter().skip(i).step_by(level.bbc).cloned().collect()).collect()
}

fn blocks(g: &ControlFlowGraph, ids: &[BlockId]) -> Vec<BasicBlock> {
    ids.iter().map(|b| g.block(*b).clone()).collect()
}

/// Folds levels `L0..Ln` of a region. The exit block is not part of the result.
pub fn fold_region(g: &ControlFlowGraph, region: &SecretRegion) -> Result<Vec<FoldedLevel>, Vec<FoldDiagnostic>> {
    let diags = validate_foldable(g, region);
    if !diags.is_empty() {
        return Err(diags);
    }
    let structure = level_structure(g, region).expect("validated region is acyclic");
    let levels = &structure.levels;
    (0..levels.len() - 1)
        .map(|i| {
            let rewritten = insert_lob(&blocks(g, &levels[i]), &blocks(g, &levels[i + 1]))?;
            fold_level(&rewritten)
        })
        .collect::<Result<_, _>>()
        .map_err(|d| vec![d])
}

/// Folds a function with its dummy. The real function's blocks come first
/// in every level, so offset 0 runs the real code and offset 1 the dummy.
pub fn fold_function(real: &ControlFlowGraph, dummy: &ControlFlowGraph) -> Result<Vec<FoldedLevel>, Vec<FoldDiagnostic>> {
    let diags = validate_function_pair(real, dummy);
    if !diags.is_empty() {
        return Err(diags);
    }
    let (sr, sd) = (function_levels(real).unwrap(), function_levels(dummy).unwrap());
    let union: Vec<Vec<BasicBlock>> = sr
        .levels
        .iter()
        .zip(&sd.levels)
        .map(|(a, b)| {
            let mut level = blocks(real, a);
            level.extend(blocks(dummy, b));
            level
        })
        .collect();
    (0..union.len())
        .map(|i| {
            let next = union.get(i + 1).map(Vec::as_slice).unwrap_or(&[]);
            fold_level(&insert_lob(&union[i], next)?)
        })
        .collect::<Result<_, _>>()
        .map_err(|d| vec![d])
}

/// Replaces secret calls with level-offset calls to the folded function
/// registered for their `(real, dummy)` pair.
pub fn insert_locall(instrs: &[Instr], folded: &BTreeMap<(Loc, Loc), Loc>) -> Result<Vec<Instr>, FoldDiagnostic> {
    instrs
        .iter()
        .map(|i| match i {
            Instr::SecretCall { real, func, dummy } => folded
                .get(&(*func, *dummy))
                .map(|t| Instr::LevelCall { real: *real, target: *t })
                .ok_or_else(|| {
                    FoldDiagnostic::new(
                        FoldCode::UnregisteredFunctionPair,
                        None,
                        format!("no folded function for @{func}/@{dummy}"),
                    )
                }),
            other => Ok(other.clone()),
        })
        .collect()
}
