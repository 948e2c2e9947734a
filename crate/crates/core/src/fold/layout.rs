//! Whole-program transformation: folded functions, folded regions, copied
//! code and the source-to-target location map.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use super::{fold_function, fold_region, FoldedLevel};
use crate::asm::{Instr, Loc, Program};
use crate::cfg::{build_cfg_at, secret_region, BlockId, CfgError, ControlFlowGraph, FoldCode, FoldDiagnostic, SecretRegion};
use crate::exec::{Ctx, HW_MAX_BBC};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FoldOptions {
    /// Reject levels with more than [`HW_MAX_BBC`] blocks.
    pub hw_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct FoldError {
    pub diagnostics: Vec<FoldDiagnostic>,
}

impl fmt::Display for FoldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.diagnostics.iter().map(|d| d.to_string()).collect();
        f.write_str(&lines.join("\n"))
    }
}

impl FoldError {
    pub fn codes(&self) -> Vec<FoldCode> {
        self.diagnostics.iter().map(|d| d.code).collect()
    }
}

/// Relation between source and target locations. A source location inside
/// a folded function may relate to both the folded copy and the original.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorrMap {
    map: BTreeMap<Loc, BTreeSet<Loc>>,
}

impl CorrMap {
    pub fn insert(&mut self, src: Loc, tgt: Loc) {
        self.map.entry(src).or_default().insert(tgt);
    }

    pub fn targets(&self, src: Loc) -> impl Iterator<Item = Loc> + '_ {
        self.map.get(&src).into_iter().flatten().copied()
    }

    pub fn relates(&self, src: Loc, tgt: Loc) -> bool {
        self.map.get(&src).is_some_and(|s| s.contains(&tgt))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Loc, &BTreeSet<Loc>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// One `src -> tgt[,tgt]` line per source location.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (s, ts) in &self.map {
            let ts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
            out.push_str(&format!("{s} -> {}\n", ts.join(",")));
        }
        out
    }

    pub fn parse(text: &str) -> Result<CorrMap, String> {
        let mut out = CorrMap::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || format!("line {}: expected `src -> tgt[,tgt]`", n + 1);
            let (s, ts) = line.split_once("->").ok_or_else(bad)?;
            let s: usize = s.trim().parse().map_err(|_| bad())?;
            for t in ts.split(',') {
                out.insert(Loc(s), Loc(t.trim().parse().map_err(|_| bad())?));
            }
        }
        Ok(out)
    }
}

/// Result of [`transform`].
#[derive(Clone, Debug)]
pub struct Folded {
    pub program: Program,
    pub corr: CorrMap,
    /// Slice size and offset of every target location.
    pub slices: Vec<Ctx>,
}

pub fn transform(p: &Program) -> Result<Folded, FoldError> {
    transform_with(p, FoldOptions::default())
}

/// Instruction whose code targets are still source locations.
enum Pending {
    Fixed(Instr),
    Remap(Instr),
    LoCall { real: bool, pair: usize },
}

fn pend(i: &Instr, pairs: &[(Loc, Loc)]) -> Pending {
    match i {
        Instr::Branch { .. } | Instr::Call { .. } => Pending::Remap(i.clone()),
        Instr::SecretCall { real, func, dummy } => {
            let pair = pairs.iter().position(|p| *p == (*func, *dummy)).expect("pairs collected from code");
            Pending::LoCall { real: *real, pair }
        }
        other => Pending::Fixed(other.clone()),
    }
}

fn diag(code: FoldCode, loc: Option<Loc>, message: impl Into<String>) -> FoldDiagnostic {
    FoldDiagnostic::new(code, loc, message)
}

fn cfg_diag(p: &Program, e: CfgError) -> FoldDiagnostic {
    match e {
        CfgError::NoPostdominator(b) | CfgError::NotSecretBranch(b) => {
            diag(FoldCode::NotSese, None, format!("region at block {b} has no single exit: {e}"))
        }
        CfgError::CyclicRegion(_) => diag(FoldCode::CyclicRegion, None, e.to_string()),
        other => diag(FoldCode::Layout, Some(p.halt_loc()), other.to_string()),
    }
}

struct Plan {
    /// Global block partition; reachability is that of the main entry.
    global: ControlFlowGraph,
    pairs: Vec<(Loc, Loc)>,
    pair_levels: Vec<Vec<FoldedLevel>>,
    retained: Vec<bool>,
    regions: Vec<(SecretRegion, Vec<FoldedLevel>)>,
}

fn plan(p: &Program, opts: FoldOptions) -> Result<Plan, FoldError> {
    let global = build_cfg_at(p, p.entry).map_err(|e| FoldError { diagnostics: vec![cfg_diag(p, e)] })?;
    let mut diags = Vec::new();

    let mut pairs: Vec<(Loc, Loc)> = Vec::new();
    for i in &p.code {
        if let Instr::SecretCall { func, dummy, .. } = i {
            if !pairs.contains(&(*func, *dummy)) {
                pairs.push((*func, *dummy));
            }
        }
    }

    let mut cfg_at: BTreeMap<Loc, ControlFlowGraph> = BTreeMap::new();
    let mut cfg = |root: Loc| -> Result<ControlFlowGraph, FoldDiagnostic> {
        if let Some(g) = cfg_at.get(&root) {
            return Ok(g.clone());
        }
        let g = build_cfg_at(p, root).map_err(|e| cfg_diag(p, e))?;
        cfg_at.insert(root, g.clone());
        Ok(g)
    };

    let mut pair_levels = Vec::new();
    let mut roots: VecDeque<Loc> = VecDeque::from([p.entry]);
    for &(f, d) in &pairs {
        let (gf, gd) = match (cfg(f), cfg(d)) {
            (Ok(a), Ok(b)) => (a, b),
            (a, b) => {
                diags.extend(a.err());
                diags.extend(b.err());
                continue;
            }
        };
        for g in [&gf, &gd] {
            for b in g.reachable_blocks() {
                for i in &g.block(b).instrs {
                    if let Instr::Call { target } = i {
                        roots.push_back(*target);
                    }
                }
            }
        }
        match fold_function(&gf, &gd) {
            Ok(levels) => {
                check_width(opts, &levels, &mut diags);
                pair_levels.push(levels);
            }
            Err(ds) => {
                diags.extend(ds.into_iter().map(|x| with_context(x, &format!("function pair @{f}/@{d}"))));
                pair_levels.push(Vec::new());
            }
        }
    }

    let mut retained = vec![false; global.blocks.len()];
    let mut seen_roots = BTreeSet::new();
    let mut regions: BTreeMap<BlockId, SecretRegion> = BTreeMap::new();
    let mut region_cfg: BTreeMap<BlockId, Loc> = BTreeMap::new();
    while let Some(root) = roots.pop_front() {
        if !seen_roots.insert(root) {
            continue;
        }
        let g = match cfg(root) {
            Ok(g) => g,
            Err(d) => {
                diags.push(d);
                continue;
            }
        };
        for b in g.reachable_blocks() {
            retained[b.0] = true;
            let block = g.block(b);
            for i in &block.instrs {
                if let Instr::Call { target } = i {
                    roots.push_back(*target);
                }
            }
            if matches!(block.terminator(), Instr::SecretBranch { .. }) && !regions.contains_key(&b) {
                match secret_region(&g, b) {
                    Ok(r) => {
                        regions.insert(b, r);
                        region_cfg.insert(b, root);
                    }
                    Err(e) => diags.push(with_context(cfg_diag(p, e), &format!("region at @{}", block.start))),
                }
            }
        }
    }

    let nested: BTreeSet<BlockId> = regions.values().flat_map(|r| r.body.iter().copied()).collect();
    let mut folded_regions = Vec::new();
    for (entry, r) in regions {
        if nested.contains(&entry) {
            continue;
        }
        let g = cfg(region_cfg[&entry]).expect("built above");
        let at = g.block(entry).start;
        match fold_region(&g, &r) {
            Ok(levels) => {
                check_width(opts, &levels, &mut diags);
                folded_regions.push((r, levels));
            }
            Err(ds) => diags.extend(ds.into_iter().map(|d| with_context(d, &format!("region at @{at}")))),
        }
    }

    if !diags.is_empty() {
        return Err(FoldError { diagnostics: diags });
    }
    Ok(Plan { global, pairs, pair_levels, retained, regions: folded_regions })
}

fn with_context(mut d: FoldDiagnostic, context: &str) -> FoldDiagnostic {
    d.message = format!("{context}: {}", d.message);
    d
}

fn check_width(opts: FoldOptions, levels: &[FoldedLevel], diags: &mut Vec<FoldDiagnostic>) {
    if !opts.hw_mode {
        return;
    }
    for l in levels {
        if l.bbc > HW_MAX_BBC {
            diags.push(diag(
                FoldCode::LevelTooWide,
                l.origin.first().copied(),
                format!("level of {} blocks exceeds the limit of {HW_MAX_BBC}", l.bbc),
            ));
        }
    }
}

struct Builder<'a> {
    p: &'a Program,
    plan: &'a Plan,
    code: Vec<Pending>,
    slices: Vec<Ctx>,
    corr: CorrMap,
    /// Target location used when remapping code targets.
    image: BTreeMap<Loc, Loc>,
    emitted: Vec<bool>,
    region_at: BTreeMap<BlockId, usize>,
    labels: BTreeMap<String, Loc>,
    /// End of a copied block that runs off into the halt location.
    halt_fallthrough: Option<usize>,
}

impl Builder<'_> {
    fn fresh_label(&mut self, base: String, at: usize) {
        let mut name = base.clone();
        let mut k = 1;
        while self.labels.contains_key(&name) || self.p.labels.contains_key(&name) {
            name = format!("{base}_{k}");
            k += 1;
        }
        self.labels.insert(name, Loc(at));
    }

    fn push_level(&mut self, level: &FoldedLevel, primary: bool) {
        for (k, instr) in level.instrs.iter().enumerate() {
            let at = Loc(self.code.len());
            self.code.push(pend(instr, &self.plan.pairs));
            self.slices.push(Ctx { bbc: level.bbc, off: k % level.bbc });
            self.corr.insert(level.origin[k], at);
            if primary {
                self.image.entry(level.origin[k]).or_insert(at);
            }
        }
    }

    fn emit(&mut self, b: BlockId) -> Result<(), FoldDiagnostic> {
        if self.emitted[b.0] {
            return Ok(());
        }
        let g = &self.plan.global;
        if let Some(&r) = self.region_at.get(&b) {
            let (region, levels) = &self.plan.regions[r];
            for (li, level) in levels.iter().enumerate() {
                if li > 0 {
                    let base = if r == 0 { format!("L{li}") } else { format!("R{r}.L{li}") };
                    self.fresh_label(base, self.code.len());
                }
                self.push_level(level, true);
            }
            self.emitted[region.entry.0] = true;
            for x in &region.body {
                self.emitted[x.0] = true;
            }
            if self.emitted[region.exit.0] {
                return Err(diag(
                    FoldCode::Layout,
                    Some(g.block(region.exit).start),
                    "region exit is already placed and cannot follow the folded levels",
                ));
            }
            return self.emit(region.exit);
        }

        let block = g.block(b);
        for (k, instr) in block.instrs.iter().enumerate() {
            let at = Loc(self.code.len());
            self.code.push(pend(instr, &self.plan.pairs));
            self.slices.push(Ctx::INITIAL);
            self.corr.insert(block.start.offset(k), at);
            self.image.insert(block.start.offset(k), at);
        }
        self.emitted[b.0] = true;
        if block.falls_through() {
            if block.end() == self.p.halt_loc() {
                self.halt_fallthrough = Some(self.code.len());
            } else {
                let next = g.block_of(block.end()).unwrap();
                if self.emitted[next.0] {
                    return Err(diag(
                        FoldCode::Layout,
                        Some(block.start),
                        format!("block falls through into @{}, which is already placed", block.end()),
                    ));
                }
                self.emit(next)?;
            }
        }
        Ok(())
    }

    fn resolve(&self, l: Loc, halt: Loc) -> Result<Loc, FoldDiagnostic> {
        if l == self.p.halt_loc() {
            return Ok(halt);
        }
        self.image.get(&l).copied().ok_or_else(|| diag(FoldCode::Layout, Some(l), "jump or call to code that is not emitted"))
    }
}

/// Folds every outermost secret region and every secret-call pair.
pub fn transform_with(p: &Program, opts: FoldOptions) -> Result<Folded, FoldError> {
    if p.is_empty() {
        let mut corr = CorrMap::default();
        corr.insert(Loc(0), Loc(0));
        return Ok(Folded { program: p.clone(), corr, slices: Vec::new() });
    }
    let plan = plan(p, opts)?;
    let fail = |d: FoldDiagnostic| FoldError { diagnostics: vec![d] };
    let region_at = plan.regions.iter().enumerate().map(|(i, (r, _))| (r.entry, i)).collect();
    let mut b = Builder {
        p,
        plan: &plan,
        code: Vec::new(),
        slices: Vec::new(),
        corr: CorrMap::default(),
        image: BTreeMap::new(),
        emitted: vec![false; plan.global.blocks.len()],
        region_at,
        labels: BTreeMap::new(),
        halt_fallthrough: None,
    };

    for id in 0..plan.global.blocks.len() {
        if plan.retained[id] {
            b.emit(BlockId(id)).map_err(fail)?;
        }
    }

    let names = p.labels_at();
    let name_of = |l: Loc| names.get(&l).map(|n| n[0].to_string()).unwrap_or_else(|| l.to_string());
    let mut pair_locs = Vec::new();
    for (k, &(f, d)) in plan.pairs.iter().enumerate() {
        let start = b.code.len();
        pair_locs.push(Loc(start));
        let name = format!("f{}{}", name_of(f), name_of(d));
        b.fresh_label(name.clone(), start);
        for (li, level) in plan.pair_levels[k].iter().enumerate() {
            if li > 0 {
                b.fresh_label(format!("{name}.L{li}"), b.code.len());
            }
            b.push_level(level, false);
        }
    }

    if let Some(end) = b.halt_fallthrough {
        if end != b.code.len() {
            return Err(fail(diag(
                FoldCode::Layout,
                None,
                "code runs off into the halt location but other code is placed after it; end it with a jump",
            )));
        }
    }

    let halt = Loc(b.code.len());
    let mut code = Vec::with_capacity(b.code.len());
    for pending in &b.code {
        code.push(match pending {
            Pending::Fixed(i) => i.clone(),
            Pending::LoCall { real, pair } => Instr::LevelCall { real: *real, target: pair_locs[*pair] },
            Pending::Remap(i) => {
                let mut err = None;
                let out = i.map_targets(|l| match b.resolve(l, halt) {
                    Ok(t) => t,
                    Err(e) => {
                        err = Some(e);
                        l
                    }
                });
                if let Some(e) = err {
                    return Err(fail(e));
                }
                out
            }
        });
    }

    let in_body: BTreeSet<Loc> = plan
        .regions
        .iter()
        .flat_map(|(r, _)| r.body.iter().flat_map(|x| plan.global.block(*x).locs()))
        .collect();
    let mut labels = b.labels.clone();
    for (name, loc) in &p.labels {
        if *loc == p.halt_loc() {
            labels.insert(name.clone(), halt);
        } else if !in_body.contains(loc) {
            if let Some(t) = b.image.get(loc) {
                labels.insert(name.clone(), *t);
            }
        }
    }

    let mut corr = b.corr;
    corr.insert(p.halt_loc(), halt);
    let entry = b.image[&p.entry];
    Ok(Folded { program: Program { code, labels, entry }, corr, slices: b.slices })
}
