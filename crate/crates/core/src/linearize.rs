//! Mask-based linearization of secret diamonds, used as a comparison baseline.
//!
//! Both sides of a diamond run unconditionally. Each side instruction is
//! wrapped so it only changes its destination when its side is selected:
//!
//! ```text
//! seqz m1,c        # m1 = all ones when c != 0
//! addi m1,m1,-1
//! not  m2,m1
//! and  m3,d,KEEP   # old value, kept when the side is not selected
//! op   d,...
//! and  d,d,SEL
//! or   d,d,m3
//! ```
//!
//! The then-side uses `KEEP = m2, SEL = m1`, the else-side the reverse.
//! Nested diamonds are linearized innermost-first. A diamond whose sides
//! already contain linearized code takes the next set of mask registers.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::asm::{BinaryOp, Expr, Instr, Loc, Program, Register, UnaryOp};
use crate::cfg::{build_cfg_at, secret_region, BlockId, CfgError, ControlFlowGraph, SecretRegion};

/// Mask registers for one nesting height: `(true, false, saved)`.
pub const MASK_SETS: [[&str; 3]; 2] = [["t1", "t2", "t3"], ["t4", "t5", "t6"]];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinearizeError {
    #[error("unsupported region shape at @{loc}: {reason}")]
    UnsupportedShape { loc: Loc, reason: String },
    #[error(transparent)]
    Cfg(#[from] CfgError),
}

/// Registers holding one diamond's masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub true_mask: Register,
    pub false_mask: Register,
    pub saved: Register,
}

impl MaskPair {
    pub fn at_height(h: usize) -> Option<MaskPair> {
        MASK_SETS.get(h).map(|[t, f, s]| MaskPair {
            true_mask: Register::new(t),
            false_mask: Register::new(f),
            saved: Register::new(s),
        })
    }
}

fn is_scratch(r: &Register) -> bool {
    MASK_SETS.iter().flatten().any(|s| r.name() == *s)
}

/// Code of a single diamond, resolved against the CFG.
struct Diamond {
    entry: BlockId,
    exit: Loc,
    /// Blocks of the then- and else-sides in execution order.
    sides: [Vec<BlockId>; 2],
}

fn unconditional_target(i: &Instr) -> Option<Loc> {
    match i {
        Instr::Branch { cond, on_true, on_false } if on_true == on_false || cond.is_const_zero() => {
            Some(if cond.is_const_zero() { *on_false } else { *on_true })
        }
        _ => None,
    }
}

fn side_chain(g: &ControlFlowGraph, region: &SecretRegion, start: Loc) -> Result<Vec<BlockId>, String> {
    let exit = g.block(region.exit).start;
    let mut chain = Vec::new();
    let mut at = start;
    let mut pred = region.entry;
    while at != exit {
        let b = g.block_starting_at(at).ok_or_else(|| format!("no block starts at @{at}"))?;
        let preds: Vec<BlockId> = g.predecessors(b).iter().copied().filter(|p| g.is_reachable(*p)).collect();
        if preds != [pred] {
            return Err(format!("block at @{at} is shared between paths"));
        }
        let block = g.block(b);
        let (last, body) = block.instrs.split_last().unwrap();
        let next = match unconditional_target(last) {
            Some(t) => t,
            None => {
                if !matches!(last, Instr::Unary { .. } | Instr::Binary { .. }) {
                    return Err(format!("`{}` at @{} cannot be linearized", last.mnemonic(), block.end().0 - 1));
                }
                block.end()
            }
        };
        if let Some((k, i)) = body.iter().enumerate().find(|(_, i)| !matches!(i, Instr::Unary { .. } | Instr::Binary { .. })) {
            return Err(format!("`{}` at @{} cannot be linearized", i.mnemonic(), block.start.0 + k));
        }
        chain.push(b);
        pred = b;
        at = next;
    }
    Ok(chain)
}

fn diamond(g: &ControlFlowGraph, entry: BlockId) -> Result<Diamond, LinearizeError> {
    let e = g.block(entry);
    let unsupported = |reason: String| LinearizeError::UnsupportedShape { loc: Loc(e.end().0 - 1), reason };
    let region = secret_region(g, entry).map_err(|e| unsupported(e.to_string()))?;
    let Instr::SecretBranch { on_true, on_false, .. } = e.terminator() else { unreachable!() };
    let then_side = side_chain(g, &region, *on_true).map_err(unsupported)?;
    let else_side = side_chain(g, &region, *on_false).map_err(unsupported)?;
    let covered = then_side.len() + else_side.len();
    if covered != region.body.len() || then_side.iter().any(|b| else_side.contains(b)) {
        return Err(unsupported("region is not a two-way diamond".into()));
    }
    Ok(Diamond { entry, exit: g.block(region.exit).start, sides: [then_side, else_side] })
}

/// One line of code being rewritten. `ids` are the original locations that
/// now resolve to this line.
#[derive(Clone, Debug)]
struct Line {
    ids: Vec<usize>,
    instr: Instr,
}

fn masked(instr: &Instr, keep: &Register, sel: &Register, saved: &Register) -> Vec<Instr> {
    let Some(d) = instr.dest().filter(|d| !is_scratch(d) && !d.is_zero()).cloned() else {
        return vec![instr.clone()];
    };
    let bin = |op, dest: &Register, lhs: &Register, rhs: &Register| Instr::Binary {
        op,
        dest: dest.clone(),
        lhs: Expr::Reg(lhs.clone()),
        rhs: Expr::Reg(rhs.clone()),
    };
    vec![
        bin(BinaryOp::And, saved, &d, keep),
        instr.clone(),
        bin(BinaryOp::And, &d, &d, sel),
        bin(BinaryOp::Or, &d, &d, saved),
    ]
}

/// Height of a diamond: one more than the highest mask set its sides use.
fn height(g: &ControlFlowGraph, d: &Diamond) -> usize {
    let uses = |set: &[&str; 3]| {
        d.sides.iter().flatten().flat_map(|b| &g.block(*b).instrs).any(|i| i.dest().is_some_and(|r| set.contains(&r.name())))
    };
    MASK_SETS.iter().rposition(uses).map_or(0, |h| h + 1)
}

fn rewrite(p: &Program, g: &ControlFlowGraph, d: &Diamond) -> Result<Program, LinearizeError> {
    let e = g.block(d.entry);
    let branch_loc = e.end().0 - 1;
    let Instr::SecretBranch { cond, .. } = e.terminator() else { unreachable!() };
    let masks = MaskPair::at_height(height(g, d)).ok_or_else(|| LinearizeError::UnsupportedShape {
        loc: Loc(branch_loc),
        reason: format!("nesting deeper than {} diamonds", MASK_SETS.len()),
    })?;
    let (m1, m2) = (&masks.true_mask, &masks.false_mask);

    let mut emitted: Vec<Line> = vec![
        Line { ids: vec![branch_loc], instr: Instr::Unary { op: UnaryOp::Seqz, dest: m1.clone(), src: cond.clone() } },
        Line { ids: vec![], instr: Instr::Binary { op: BinaryOp::Addi, dest: m1.clone(), lhs: Expr::Reg(m1.clone()), rhs: Expr::Imm(-1) } },
        Line { ids: vec![], instr: Instr::Unary { op: UnaryOp::Not, dest: m2.clone(), src: Expr::Reg(m1.clone()) } },
    ];
    // Ids of dropped jumps attach to whatever line comes next.
    let mut pending: Vec<usize> = Vec::new();
    let mut removed = vec![false; p.code.len()];
    for (side, (keep, sel)) in d.sides.iter().zip([(m2, m1), (m1, m2)]) {
        for b in side {
            let block = g.block(*b);
            for (loc, i) in block.locs().zip(&block.instrs) {
                removed[loc.0] = true;
                pending.push(loc.0);
                if unconditional_target(i).is_some() {
                    continue;
                }
                for w in masked(i, keep, sel, &masks.saved) {
                    emitted.push(Line { ids: std::mem::take(&mut pending), instr: w });
                }
            }
        }
    }

    let mut lines: Vec<Line> = Vec::with_capacity(p.code.len() + emitted.len());
    let mut carry: Vec<usize> = Vec::new();
    for (k, i) in p.code.iter().enumerate() {
        if k == branch_loc {
            let next_kept = (k + 1..p.code.len()).find(|x| !removed[*x]).unwrap_or(p.code.len());
            lines.append(&mut emitted);
            if next_kept != d.exit.0 {
                lines.push(Line { ids: std::mem::take(&mut pending), instr: Instr::jump(d.exit) });
            }
            carry.append(&mut pending);
            continue;
        }
        if removed[k] {
            continue;
        }
        let mut ids = std::mem::take(&mut carry);
        ids.push(k);
        lines.push(Line { ids, instr: i.clone() });
    }
    carry.push(p.code.len());
    Ok(resolve(p, lines, carry))
}

fn resolve(p: &Program, lines: Vec<Line>, halt_ids: Vec<usize>) -> Program {
    let mut map: BTreeMap<usize, Loc> = BTreeMap::new();
    for (k, l) in lines.iter().enumerate() {
        for id in &l.ids {
            map.entry(*id).or_insert(Loc(k));
        }
    }
    let halt = Loc(lines.len());
    for id in halt_ids {
        map.entry(id).or_insert(halt);
    }
    let at = |l: Loc| map.get(&l.0).copied().unwrap_or(halt);
    Program {
        code: lines.iter().map(|l| l.instr.map_targets(at)).collect(),
        labels: p.labels.iter().map(|(n, l)| (n.clone(), at(*l))).collect(),
        entry: at(p.entry),
    }
}

fn roots(p: &Program) -> Vec<Loc> {
    let mut out = vec![p.entry];
    for i in &p.code {
        match i {
            Instr::Call { target } => out.push(*target),
            Instr::SecretCall { func, dummy, .. } => out.extend([*func, *dummy]),
            _ => {}
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Finds an innermost secret diamond. `Ok(None)` once no secret branch is
/// left.
fn next_diamond(p: &Program) -> Result<Option<(ControlFlowGraph, Diamond)>, LinearizeError> {
    let mut first_err = None;
    for root in roots(p) {
        let g = build_cfg_at(p, root)?;
        let entries: Vec<BlockId> = g
            .reachable_blocks()
            .filter(|b| matches!(g.block(*b).terminator(), Instr::SecretBranch { .. }))
            .collect();
        for b in entries {
            match diamond(&g, b) {
                Ok(d) => return Ok(Some((g, d))),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(None),
    }
}

/// Linearizes the diamond rooted at `region.entry` in `g`, which must be a
/// CFG of `p`.
pub fn linearize_region(p: &Program, g: &ControlFlowGraph, region: &SecretRegion) -> Result<Program, LinearizeError> {
    let d = diamond(g, region.entry)?;
    rewrite(p, g, &d)
}

/// Linearizes every secret branch of `p`, innermost first.
pub fn linearize(p: &Program) -> Result<Program, LinearizeError> {
    let mut cur = p.clone();
    while let Some((g, d)) = next_diamond(&cur)? {
        cur = rewrite(&cur, &g, &d)?;
    }
    Ok(cur)
}
