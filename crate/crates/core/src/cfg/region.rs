//! Secret-dependent regions and their level structures.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use super::{BlockId, CfgError, ControlFlowGraph};
use crate::asm::{Instr, Loc};

/// The blocks between a secret branch and its immediate postdominator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretRegion {
    pub entry: BlockId,
    pub exit: BlockId,
    /// Blocks strictly between entry and exit.
    pub body: BTreeSet<BlockId>,
}

impl SecretRegion {
    pub fn contains(&self, b: BlockId) -> bool {
        b == self.entry || b == self.exit || self.body.contains(&b)
    }
}

/// Region rooted at `b`, which must end in `s.br`.
pub fn secret_region(g: &ControlFlowGraph, b: BlockId) -> Result<SecretRegion, CfgError> {
    if !matches!(g.block(b).terminator(), Instr::SecretBranch { .. }) {
        return Err(CfgError::NotSecretBranch(b));
    }
    let exit = g.immediate_postdominator(b).ok_or(CfgError::NoPostdominator(b))?;
    let mut body = BTreeSet::new();
    let mut queue: VecDeque<BlockId> = g.successors(b).iter().copied().collect();
    while let Some(x) = queue.pop_front() {
        if x == exit || x == b || !body.insert(x) {
            continue;
        }
        queue.extend(g.successors(x).iter().copied());
    }
    Ok(SecretRegion { entry: b, exit, body })
}

/// Blocks grouped by distance from an entry, each level sorted by address.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelStructure {
    pub levels: Vec<Vec<BlockId>>,
}

impl LevelStructure {
    pub fn level_of(&self, b: BlockId) -> Option<usize> {
        self.levels.iter().position(|l| l.contains(&b))
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.levels.iter().flatten().copied()
    }

    /// Total instruction count of each level.
    pub fn level_lengths(&self, g: &ControlFlowGraph) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.iter().map(|b| g.block(*b).len()).collect()).collect()
    }
}

fn sorted_by_start(g: &ControlFlowGraph, mut v: Vec<BlockId>) -> Vec<BlockId> {
    v.sort_by_key(|b| g.block(*b).start);
    v
}

/// Finds a cycle among `nodes` using only edges between members.
fn has_cycle(g: &ControlFlowGraph, nodes: &BTreeSet<BlockId>) -> bool {
    // Kahn's algorithm: leftover nodes lie on or behind a cycle.
    let mut indeg: std::collections::BTreeMap<BlockId, usize> = nodes.iter().map(|b| (*b, 0)).collect();
    for b in nodes {
        for s in g.successors(*b) {
            if let Some(d) = indeg.get_mut(s) {
                *d += 1;
            }
        }
    }
    let mut ready: Vec<BlockId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(b, _)| *b).collect();
    let mut seen = 0;
    while let Some(b) = ready.pop() {
        seen += 1;
        for s in g.successors(b) {
            if let Some(d) = indeg.get_mut(s) {
                *d -= 1;
                if *d == 0 {
                    ready.push(*s);
                }
            }
        }
    }
    seen != nodes.len()
}

/// Levels of a region: `[entry]`, body blocks by distance, then `[exit]`.
pub fn level_structure(g: &ControlFlowGraph, region: &SecretRegion) -> Result<LevelStructure, CfgError> {
    let mut inner = region.body.clone();
    inner.insert(region.entry);
    if has_cycle(g, &inner) {
        return Err(CfgError::CyclicRegion(region.entry));
    }
    let dist = g.distances_from(region.entry, |b| region.body.contains(&b));
    let mut levels = vec![vec![region.entry]];
    let depth = region.body.iter().filter_map(|b| dist[b.0]).max().unwrap_or(0);
    for d in 1..=depth {
        let level: Vec<BlockId> = region.body.iter().copied().filter(|b| dist[b.0] == Some(d)).collect();
        levels.push(sorted_by_start(g, level));
    }
    levels.push(vec![region.exit]);
    Ok(LevelStructure { levels })
}

/// Levels of every block reachable from the graph's root, by distance.
/// Cycles are allowed; each block sits at its shortest distance.
pub fn level_structure_of_cfg(g: &ControlFlowGraph) -> LevelStructure {
    let dist = g.distances_from(g.entry, |_| true);
    let depth = dist.iter().flatten().copied().max().unwrap_or(0);
    let levels = (0..=depth)
        .map(|d| sorted_by_start(g, g.reachable_blocks().filter(|b| dist[b.0] == Some(d)).collect()))
        .collect();
    LevelStructure { levels }
}

/// Levels of a function body; its control flow must be acyclic.
pub fn function_levels(g: &ControlFlowGraph) -> Result<LevelStructure, CfgError> {
    let all: BTreeSet<BlockId> = g.reachable_blocks().collect();
    if has_cycle(g, &all) {
        return Err(CfgError::CyclicRegion(g.entry));
    }
    Ok(level_structure_of_cfg(g))
}

/// Starting point of a level slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAnchor {
    /// The first instruction of the block.
    Block(BlockId),
    Instr(Loc),
}

/// Instructions exactly `delta` instruction-steps from the anchor, moving
/// only through blocks of `structure`.
pub fn level_slice(
    g: &ControlFlowGraph,
    structure: &LevelStructure,
    anchor: SliceAnchor,
    delta: usize,
) -> Result<Vec<Loc>, CfgError> {
    let members: BTreeSet<BlockId> = structure.blocks().collect();
    let start = match anchor {
        SliceAnchor::Block(b) => g.block(b).start,
        SliceAnchor::Instr(l) => l,
    };
    let in_structure = |l: Loc| g.block_of(l).is_some_and(|b| members.contains(&b));
    if !in_structure(start) {
        return Err(CfgError::OutOfRange(delta));
    }
    let mut frontier = BTreeSet::from([start]);
    let mut seen = frontier.clone();
    for _ in 0..delta {
        let mut next = BTreeSet::new();
        for l in &frontier {
            let b = g.block_of(*l).unwrap();
            let block = g.block(b);
            let outs: Vec<Loc> = if l.offset(1) < block.end() {
                vec![l.offset(1)]
            } else {
                g.successors(b).iter().map(|s| g.block(*s).start).collect()
            };
            for o in outs {
                if in_structure(o) && seen.insert(o) {
                    next.insert(o);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            return Err(CfgError::OutOfRange(delta));
        }
    }
    Ok(frontier.into_iter().collect())
}

/// Reasons a region or function pair cannot be folded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FoldCode {
    UnequalLevelLengths,
    CrossLevelEdge,
    NotSese,
    BadTerminator,
    CyclicRegion,
    LevelCountMismatch,
    LevelTooWide,
    Blocklisted,
    Layout,
    TargetNotInNextLevel,
    UnregisteredFunctionPair,
}

impl FoldCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FoldCode::UnequalLevelLengths => "UNEQUAL_LEVEL_LENGTHS",
            FoldCode::CrossLevelEdge => "CROSS_LEVEL_EDGE",
            FoldCode::NotSese => "NOT_SESE",
            FoldCode::BadTerminator => "BAD_TERMINATOR",
            FoldCode::CyclicRegion => "CYCLIC_REGION",
            FoldCode::LevelCountMismatch => "LEVEL_COUNT_MISMATCH",
            FoldCode::LevelTooWide => "LEVEL_TOO_WIDE",
            FoldCode::Blocklisted => "BLOCKLISTED",
            FoldCode::Layout => "LAYOUT",
            FoldCode::TargetNotInNextLevel => "TARGET_NOT_IN_NEXT_LEVEL",
            FoldCode::UnregisteredFunctionPair => "UNREGISTERED_FUNCTION_PAIR",
        }
    }
}

impl fmt::Display for FoldCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldDiagnostic {
    pub code: FoldCode,
    /// Address of the offending block or instruction, when there is one.
    pub loc: Option<Loc>,
    pub message: String,
}

impl FoldDiagnostic {
    pub fn new(code: FoldCode, loc: Option<Loc>, message: impl Into<String>) -> FoldDiagnostic {
        FoldDiagnostic { code, loc, message: message.into() }
    }
}

impl fmt::Display for FoldDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.loc {
            Some(l) => write!(f, "@{l}: {}: {}", self.code, self.message),
            None => write!(f, "{}: {}", self.code, self.message),
        }
    }
}

/// Checks that every edge out of level `i` lands in level `i + 1`.
fn cross_level_edges(g: &ControlFlowGraph, s: &LevelStructure, upto: usize, out: &mut Vec<FoldDiagnostic>) {
    for (i, level) in s.levels.iter().enumerate().take(upto) {
        for b in level {
            for t in g.successors(*b) {
                if !s.levels.get(i + 1).is_some_and(|l| l.contains(t)) {
                    out.push(FoldDiagnostic::new(
                        FoldCode::CrossLevelEdge,
                        Some(g.block(*b).start),
                        format!("edge {b} -> {t} leaves level {i} for level {:?}", s.level_of(*t)),
                    ));
                }
            }
        }
    }
}

/// Checks one level for equal lengths, then (only if equal) for terminators
/// accepted by `ok`.
fn check_level(
    g: &ControlFlowGraph,
    idx: usize,
    level: &[BlockId],
    ok: impl Fn(&Instr) -> bool,
    expected: &str,
    out: &mut Vec<FoldDiagnostic>,
) {
    let lens: Vec<usize> = level.iter().map(|b| g.block(*b).len()).collect();
    if lens.windows(2).any(|w| w[0] != w[1]) {
        out.push(FoldDiagnostic::new(
            FoldCode::UnequalLevelLengths,
            level.first().map(|b| g.block(*b).start),
            format!("level {idx} has block lengths {lens:?}"),
        ));
        return;
    }
    for b in level {
        let t = g.block(*b).terminator();
        if !ok(t) {
            out.push(FoldDiagnostic::new(
                FoldCode::BadTerminator,
                Some(g.block(*b).end().0.checked_sub(1).map(Loc).unwrap_or_default()),
                format!("block {b} ends in `{}`, expected {expected}", t.mnemonic()),
            ));
        }
    }
}

fn is_branch(i: &Instr) -> bool {
    matches!(i, Instr::Branch { .. } | Instr::SecretBranch { .. })
}

/// Foldability diagnostics for a region; empty means foldable.
pub fn validate_foldable(g: &ControlFlowGraph, region: &SecretRegion) -> Vec<FoldDiagnostic> {
    let structure = match level_structure(g, region) {
        Ok(s) => s,
        Err(_) => {
            return vec![FoldDiagnostic::new(
                FoldCode::CyclicRegion,
                Some(g.block(region.entry).start),
                "region contains a loop",
            )]
        }
    };
    let mut out = Vec::new();
    for b in &region.body {
        let outside = g.predecessors(*b).iter().find(|p| **p != region.entry && !region.body.contains(p));
        if let Some(p) = outside {
            out.push(FoldDiagnostic::new(
                FoldCode::NotSese,
                Some(g.block(*b).start),
                format!("block {b} is entered from {p} outside the region"),
            ));
        }
        if g.successors(*b).is_empty() {
            out.push(FoldDiagnostic::new(
                FoldCode::NotSese,
                Some(g.block(*b).start),
                format!("block {b} leaves the region without reaching its exit"),
            ));
        }
    }
    let inner = structure.levels.len() - 1;
    for (i, level) in structure.levels.iter().enumerate().take(inner) {
        check_level(g, i, level, is_branch, "a branch", &mut out);
    }
    cross_level_edges(g, &structure, inner, &mut out);
    out
}

/// Foldability diagnostics for a real function and its dummy.
pub fn validate_function_pair(real: &ControlFlowGraph, dummy: &ControlFlowGraph) -> Vec<FoldDiagnostic> {
    let mut out = Vec::new();
    let (sr, sd) = match (function_levels(real), function_levels(dummy)) {
        (Ok(a), Ok(b)) => (a, b),
        (a, _) => {
            let g = if a.is_err() { real } else { dummy };
            return vec![FoldDiagnostic::new(FoldCode::CyclicRegion, Some(g.block(g.entry).start), "function contains a loop")];
        }
    };
    if sr.levels.len() != sd.levels.len() {
        out.push(FoldDiagnostic::new(
            FoldCode::LevelCountMismatch,
            Some(real.block(real.entry).start),
            format!("{} levels against {} in the dummy", sr.levels.len(), sd.levels.len()),
        ));
        return out;
    }
    let last = sr.levels.len() - 1;
    for i in 0..=last {
        let lens: Vec<usize> = sr.levels[i]
            .iter()
            .map(|b| real.block(*b).len())
            .chain(sd.levels[i].iter().map(|b| dummy.block(*b).len()))
            .collect();
        if lens.windows(2).any(|w| w[0] != w[1]) {
            out.push(FoldDiagnostic::new(
                FoldCode::UnequalLevelLengths,
                Some(real.block(sr.levels[i][0]).start),
                format!("level {i} has block lengths {lens:?}"),
            ));
            continue;
        }
        for (g, s) in [(real, &sr), (dummy, &sd)] {
            if i == last {
                check_level(g, i, &s.levels[i], |t| matches!(t, Instr::Ret), "`ret`", &mut out);
            } else {
                check_level(g, i, &s.levels[i], is_branch, "a branch", &mut out);
            }
        }
    }
    cross_level_edges(real, &sr, last, &mut out);
    cross_level_edges(dummy, &sd, last, &mut out);
    out
}
