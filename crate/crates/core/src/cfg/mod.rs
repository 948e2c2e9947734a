//! Control-flow graphs over [`Program`]s.
//!
//! A graph is rooted at one procedure entry and only follows intra-procedural
//! edges: calls return to the next instruction, so they neither end a block
//! nor add an edge. The block partition always covers the whole program.
//! Blocks start at code targets and after terminators; labels alone do not
//! split blocks.

mod region;

use std::collections::{BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::asm::{Instr, Loc, Program};

pub use region::{
    function_levels, level_slice, level_structure, level_structure_of_cfg, secret_region, validate_foldable,
    validate_function_pair, FoldCode, FoldDiagnostic, LevelStructure, SecretRegion, SliceAnchor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub usize);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CfgError {
    #[error("program has no instructions")]
    EmptyProgram,
    #[error("root @{0} is not an instruction")]
    BadRoot(Loc),
    #[error("expected one exit block, found {0:?}")]
    NoUniqueExit(Vec<BlockId>),
    #[error("block {0} does not end in a secret branch")]
    NotSecretBranch(BlockId),
    #[error("block {0} has no immediate postdominator")]
    NoPostdominator(BlockId),
    #[error("region entered at {0} contains a cycle")]
    CyclicRegion(BlockId),
    #[error("no instruction at distance {0}")]
    OutOfRange(usize),
}

/// Straight-line code entered at `start` and left through its last instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub start: Loc,
    pub instrs: Vec<Instr>,
}

impl BasicBlock {
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    pub fn terminator(&self) -> &Instr {
        self.instrs.last().expect("blocks are never empty")
    }

    /// First location after the block.
    pub fn end(&self) -> Loc {
        self.start.offset(self.instrs.len())
    }

    pub fn locs(&self) -> impl Iterator<Item = Loc> {
        (self.start.0..self.end().0).map(Loc)
    }

    /// True if control can run off the end into the next location.
    pub fn falls_through(&self) -> bool {
        !self.terminator().is_terminator()
    }
}

#[derive(Clone, Debug)]
pub struct ControlFlowGraph {
    pub blocks: Vec<BasicBlock>,
    succs: Vec<Vec<BlockId>>,
    preds: Vec<Vec<BlockId>>,
    block_at: Vec<BlockId>,
    reachable: Vec<bool>,
    ipdom: Vec<Option<BlockId>>,
    pub entry: BlockId,
    /// Reachable blocks without successors (returns, or falling off into halt).
    pub exits: Vec<BlockId>,
}

/// CFG of the program's main procedure; it must have a unique exit.
pub fn build_cfg(p: &Program) -> Result<ControlFlowGraph, CfgError> {
    let g = build_cfg_at(p, p.entry)?;
    if g.exits.len() != 1 {
        return Err(CfgError::NoUniqueExit(g.exits.clone()));
    }
    Ok(g)
}

/// CFG of the procedure starting at `root`. Several exits are allowed.
pub fn build_cfg_at(p: &Program, root: Loc) -> Result<ControlFlowGraph, CfgError> {
    let n = p.code.len();
    if n == 0 {
        return Err(CfgError::EmptyProgram);
    }
    if root.0 >= n {
        return Err(CfgError::BadRoot(root));
    }

    let mut leader = vec![false; n];
    leader[0] = true;
    leader[root.0] = true;
    if p.entry.0 < n {
        leader[p.entry.0] = true;
    }
    for (i, instr) in p.code.iter().enumerate() {
        for t in instr.code_targets() {
            if t.0 < n {
                leader[t.0] = true;
            }
        }
        if instr.is_terminator() && i + 1 < n {
            leader[i + 1] = true;
        }
    }

    let mut blocks = Vec::new();
    let mut block_at = vec![BlockId(0); n];
    let mut i = 0;
    while i < n {
        let id = BlockId(blocks.len());
        let start = i;
        loop {
            block_at[i] = id;
            i += 1;
            if i >= n || leader[i] {
                break;
            }
        }
        blocks.push(BasicBlock { id, start: Loc(start), instrs: p.code[start..i].to_vec() });
    }

    let mut succs = vec![Vec::new(); blocks.len()];
    for b in &blocks {
        let mut out: Vec<BlockId> = Vec::new();
        let mut add = |l: Loc| {
            if l.0 < n {
                let s = block_at[l.0];
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        };
        match b.terminator() {
            Instr::Branch { on_true, on_false, .. } | Instr::SecretBranch { on_true, on_false, .. } => {
                add(*on_true);
                add(*on_false);
            }
            Instr::Ret | Instr::LevelBranch { .. } => {}
            _ => add(b.end()),
        }
        succs[b.id.0] = out;
    }
    let mut preds = vec![Vec::new(); blocks.len()];
    for (from, ss) in succs.iter().enumerate() {
        for s in ss {
            preds[s.0].push(BlockId(from));
        }
    }

    let entry = block_at[root.0];
    let mut reachable = vec![false; blocks.len()];
    let mut queue = VecDeque::from([entry]);
    reachable[entry.0] = true;
    while let Some(b) = queue.pop_front() {
        for s in &succs[b.0] {
            if !reachable[s.0] {
                reachable[s.0] = true;
                queue.push_back(*s);
            }
        }
    }
    let exits: Vec<BlockId> = (0..blocks.len()).filter(|&b| reachable[b] && succs[b].is_empty()).map(BlockId).collect();

    let mut g = ControlFlowGraph { blocks, succs, preds, block_at, reachable, ipdom: Vec::new(), entry, exits };
    g.ipdom = g.compute_ipdom();
    Ok(g)
}

impl ControlFlowGraph {
    pub fn block(&self, id: BlockId) -> &BasicBlock {
        &self.blocks[id.0]
    }

    pub fn successors(&self, id: BlockId) -> &[BlockId] {
        &self.succs[id.0]
    }

    pub fn predecessors(&self, id: BlockId) -> &[BlockId] {
        &self.preds[id.0]
    }

    /// The unique exit block, if there is exactly one.
    pub fn exit(&self) -> Option<BlockId> {
        match self.exits.as_slice() {
            [e] => Some(*e),
            _ => None,
        }
    }

    pub fn is_reachable(&self, id: BlockId) -> bool {
        self.reachable[id.0]
    }

    /// Block containing `loc`.
    pub fn block_of(&self, loc: Loc) -> Option<BlockId> {
        self.block_at.get(loc.0).copied()
    }

    /// Block whose first instruction is at `loc`.
    pub fn block_starting_at(&self, loc: Loc) -> Option<BlockId> {
        self.block_of(loc).filter(|b| self.blocks[b.0].start == loc)
    }

    pub fn edges(&self) -> Vec<(BlockId, BlockId)> {
        let mut out = Vec::new();
        for (from, ss) in self.succs.iter().enumerate() {
            for s in ss {
                out.push((BlockId(from), *s));
            }
        }
        out.sort();
        out
    }

    /// Blocks reachable from the root, in layout order.
    pub fn reachable_blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        (0..self.blocks.len()).filter(|&b| self.reachable[b]).map(BlockId)
    }

    /// Shortest-path edge count from `a` to `b`; `None` when unreachable.
    pub fn distance(&self, a: BlockId, b: BlockId) -> Option<usize> {
        self.distances_from(a, |_| true)[b.0]
    }

    /// BFS distances from `a`, only expanding blocks accepted by `expand`.
    pub(crate) fn distances_from(&self, a: BlockId, expand: impl Fn(BlockId) -> bool) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.blocks.len()];
        dist[a.0] = Some(0);
        let mut queue = VecDeque::from([a]);
        while let Some(b) = queue.pop_front() {
            if b != a && !expand(b) {
                continue;
            }
            let d = dist[b.0].unwrap();
            for s in &self.succs[b.0] {
                if dist[s.0].is_none() {
                    dist[s.0] = Some(d + 1);
                    queue.push_back(*s);
                }
            }
        }
        dist
    }

    /// Closest block other than `b` on every path from `b` to an exit.
    /// `None` for exits, blocks that never reach an exit, and blocks whose
    /// only common postdominator is the virtual sink joining several exits.
    pub fn immediate_postdominator(&self, b: BlockId) -> Option<BlockId> {
        self.ipdom[b.0]
    }

    fn compute_ipdom(&self) -> Vec<Option<BlockId>> {
        let n = self.blocks.len();
        // Node n is a virtual sink fed by every exit.
        let sink = n;
        let succ = |b: usize| -> Vec<usize> {
            if self.exits.contains(&BlockId(b)) {
                vec![sink]
            } else {
                self.succs[b].iter().map(|s| s.0).collect()
            }
        };
        // Only blocks that are reachable and reach the sink take part.
        let mut reaches = vec![false; n + 1];
        reaches[sink] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for b in 0..n {
                if self.reachable[b] && !reaches[b] && succ(b).iter().any(|&s| reaches[s]) {
                    reaches[b] = true;
                    changed = true;
                }
            }
        }
        let full: BTreeSet<usize> = (0..=n).filter(|&b| reaches[b]).collect();
        let mut pdom: Vec<BTreeSet<usize>> = (0..=n).map(|_| full.clone()).collect();
        pdom[sink] = BTreeSet::from([sink]);
        changed = true;
        while changed {
            changed = false;
            for b in (0..n).rev() {
                if !reaches[b] {
                    continue;
                }
                let mut acc: Option<BTreeSet<usize>> = None;
                for s in succ(b).into_iter().filter(|&s| reaches[s]) {
                    acc = Some(match acc {
                        None => pdom[s].clone(),
                        Some(a) => a.intersection(&pdom[s]).copied().collect(),
                    });
                }
                let mut next = acc.unwrap_or_default();
                next.insert(b);
                if next != pdom[b] {
                    pdom[b] = next;
                    changed = true;
                }
            }
        }
        (0..n)
            .map(|b| {
                if !reaches[b] {
                    return None;
                }
                let strict: BTreeSet<usize> = pdom[b].iter().copied().filter(|&d| d != b).collect();
                strict
                    .iter()
                    .copied()
                    .find(|&d| pdom[d].len() == strict.len())
                    .filter(|&d| d != sink)
                    .map(BlockId)
            })
            .collect()
    }

    /// `B<id> @<start>` lines followed by `B<a> -> B<b>` edge lines.
    pub fn dump(&self, p: &Program) -> String {
        let by_loc = p.labels_at();
        let mut out = String::new();
        for b in &self.blocks {
            let name = by_loc.get(&b.start).map(|n| format!(" {}", n[0])).unwrap_or_default();
            let _ = writeln!(out, "{} @{}{name}", b.id, b.start);
        }
        for (a, b) in self.edges() {
            let _ = writeln!(out, "{a} -> {b}");
        }
        out
    }
}
