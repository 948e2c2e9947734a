//! Strategies and checks shared by the property suites and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

use slicefold::asm::{
    parse_program, parse_program_with, serialize_program, validate_program, BinaryOp, Dialect, Expr, Instr, Loc,
    ParseOptions, Program, Register, UnaryOp,
};
use slicefold::cfg::{build_cfg, build_cfg_at, level_structure, secret_region, BlockId, ControlFlowGraph};
use slicefold::exec::{slice_addr, Config, Ctx, ExecOptions, Semantics};
use slicefold::fold::{fold_level, transform, unfold_level};
use slicefold::leakage::LeakageContract;
use slicefold::oni::{check_correctness, CheckOptions, InputSpace, SecretLoc, SecurityPolicy};

pub const CASES: u32 = 1000;
const REGS: [&str; 5] = ["a0", "a1", "a2", "a3", "s0"];

fn reg() -> impl Strategy<Value = Register> {
    prop::sample::select(&REGS[..]).prop_map(Register::new)
}

fn expr() -> impl Strategy<Value = Expr> {
    prop_oneof![reg().prop_map(Expr::Reg), (-64i64..64).prop_map(Expr::Imm)]
}

pub fn data_instr() -> impl Strategy<Value = Instr> {
    let unary = (prop::sample::select(UnaryOp::ALL), reg(), expr()).prop_map(|(op, dest, src)| Instr::Unary { op, dest, src });
    let binary = (prop::sample::select(BinaryOp::ALL), reg(), expr(), expr())
        .prop_map(|(op, dest, lhs, rhs)| Instr::Binary { op, dest, lhs, rhs });
    let store = (expr(), expr()).prop_map(|(value, addr)| Instr::Store { value, addr });
    prop_oneof![4 => binary, 2 => unary, 1 => store]
}

/// Any instruction of either dialect with targets below `n`.
pub fn any_instr(n: usize) -> impl Strategy<Value = Instr> {
    let loc = (0..n).prop_map(Loc);
    prop_oneof![
        6 => data_instr(),
        1 => (expr(), loc.clone(), loc.clone()).prop_map(|(cond, on_true, on_false)| Instr::Branch { cond, on_true, on_false }),
        1 => (expr(), loc.clone(), loc.clone()).prop_map(|(cond, on_true, on_false)| Instr::SecretBranch { cond, on_true, on_false }),
        1 => loc.clone().prop_map(|target| Instr::Call { target }),
        1 => (any::<bool>(), loc.clone(), loc.clone()).prop_map(|(real, func, dummy)| Instr::SecretCall { real, func, dummy }),
        1 => Just(Instr::Ret),
        1 => (expr(), 0usize..4, 0usize..4, 1usize..5)
            .prop_map(|(cond, off_true, off_false, bbc)| Instr::LevelBranch { cond, off_true, off_false, bbc }),
        1 => (any::<bool>(), loc).prop_map(|(real, target)| Instr::LevelCall { real, target }),
    ]
}

pub fn any_program() -> impl Strategy<Value = Program> {
    (1usize..16).prop_flat_map(|n| {
        (
            prop::collection::vec(any_instr(n + 1), n),
            prop::collection::btree_map("[a-z][a-z0-9_]{0,5}", 0..=n, 0..4),
            0..n,
        )
            .prop_map(|(code, labels, entry)| Program {
                code,
                labels: labels.into_iter().map(|(k, v)| (format!("L{k}"), Loc(v))).collect(),
                entry: Loc(entry),
            })
    })
}

/// Shape of a randomly generated balanced region.
#[derive(Clone, Debug)]
pub struct RegionSpec {
    pub prefix: Vec<Instr>,
    /// Per level below the entry: block bodies (equal length within a level).
    pub levels: Vec<Vec<Vec<Instr>>>,
    /// Per level except the last: (condition, secret?, true index, false index) per block.
    pub branches: Vec<Vec<(Register, bool, usize, usize)>>,
}

fn alu_instr() -> impl Strategy<Value = Instr> {
    const OPS: [BinaryOp; 6] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Xor, BinaryOp::Mul, BinaryOp::Addi, BinaryOp::Slt];
    (prop::sample::select(&OPS[..]), prop::sample::select(&REGS[..4]), expr(), expr()).prop_map(|(op, d, lhs, rhs)| {
        Instr::Binary { op, dest: Register::new(d), lhs, rhs }
    })
}

pub fn region_spec() -> impl Strategy<Value = RegionSpec> {
    // At least two blocks per level, so only the exit postdominates the entry.
    let widths = prop::collection::vec(0usize..=2, 0..=2).prop_map(|extras| {
        let mut ws = vec![2];
        for extra in extras {
            let prev = *ws.last().unwrap();
            ws.push((prev + extra).min(4));
        }
        ws
    });
    widths.prop_flat_map(|ws| {
        let d = ws.len();
        let bodies: Vec<_> = ws
            .iter()
            .map(|&w| (0usize..3).prop_flat_map(move |len| prop::collection::vec(prop::collection::vec(alu_instr(), len), w)))
            .collect();
        let branches: Vec<_> = (0..d - 1)
            .map(|i| {
                let (w, next) = (ws[i], ws[i + 1]);
                prop::collection::vec((prop::sample::select(&REGS[..]).prop_map(Register::new), any::<bool>(), 0..next, 0..next), w)
                    .prop_map(move |mut bs| {
                        // Every next-level block needs a parent in this level.
                        for j in 0..next {
                            let (parent, slot) = (j % w, j / w);
                            if slot == 0 {
                                bs[parent].2 = j;
                            } else {
                                bs[parent].3 = j;
                            }
                        }
                        bs
                    })
            })
            .collect();
        (prop::collection::vec(alu_instr(), 0..3), bodies, branches)
            .prop_map(|(prefix, levels, branches)| RegionSpec { prefix, levels, branches })
    })
}

impl RegionSpec {
    fn text(&self) -> String {
        let mut out = String::new();
        for i in &self.prefix {
            out += &format!("    {i}\n");
        }
        let targets = |level: usize| -> Vec<String> { (0..self.levels[level].len()).map(|j| format!("B{level}_{j}")).collect() };
        let first = targets(0);
        out += &format!("    s.br s0,{},{}\n", first[0], first[1]);
        for (lv, blocks) in self.levels.iter().enumerate() {
            for (j, body) in blocks.iter().enumerate() {
                out += &format!("B{lv}_{j}:\n");
                for i in body {
                    out += &format!("    {i}\n");
                }
                match self.branches.get(lv) {
                    Some(bs) => {
                        let (c, secret, t, f) = &bs[j];
                        let next = targets(lv + 1);
                        let m = if *secret { "s.br" } else { "br" };
                        out += &format!("    {m} {c},{},{}\n", next[*t], next[*f]);
                    }
                    None => out += "    j Ex\n",
                }
            }
        }
        out + "Ex: mv a0,a0\n"
    }
}

fn bfs_levels(g: &ControlFlowGraph, from: BlockId) -> BTreeMap<BlockId, usize> {
    let mut dist = BTreeMap::from([(from, 0)]);
    let mut q = VecDeque::from([from]);
    while let Some(b) = q.pop_front() {
        for s in g.successors(b) {
            if !dist.contains_key(s) {
                dist.insert(*s, dist[&b] + 1);
                q.push_back(*s);
            }
        }
    }
    dist
}

/// Strict postdominators of `b` by enumerating every simple path to an exit.
/// `None` when no exit is reachable.
fn brute_postdominators(g: &ControlFlowGraph, b: BlockId) -> Option<BTreeSet<BlockId>> {
    fn walk(g: &ControlFlowGraph, at: BlockId, path: &mut Vec<BlockId>, acc: &mut Option<BTreeSet<BlockId>>) {
        if g.successors(at).is_empty() {
            let on_path: BTreeSet<BlockId> = path[1..].iter().copied().collect();
            *acc = Some(match acc.take() {
                Some(s) => s.intersection(&on_path).copied().collect(),
                None => on_path,
            });
            return;
        }
        for s in g.successors(at) {
            if !path.contains(s) {
                path.push(*s);
                walk(g, *s, path, acc);
                path.pop();
            }
        }
    }
    let mut acc = None;
    walk(g, b, &mut vec![b], &mut acc);
    acc
}

fn brute_ipdom(g: &ControlFlowGraph, b: BlockId) -> Option<BlockId> {
    let strict = brute_postdominators(g, b)?;
    strict.iter().copied().find(|d| {
        let of_d = brute_postdominators(g, *d).unwrap_or_default();
        strict.iter().all(|x| x == d || of_d.contains(x))
    })
}

pub fn cfg_program() -> impl Strategy<Value = Program> {
    (2usize..=10).prop_flat_map(|n| {
        let loc = (0..n).prop_map(Loc);
        let instr = prop_oneof![
            3 => Just(Instr::Binary { op: BinaryOp::Add, dest: Register::new("a0"), lhs: Expr::reg("a0"), rhs: Expr::Imm(1) }),
            2 => (loc.clone(), loc.clone()).prop_map(|(t, f)| Instr::Branch { cond: Expr::reg("a0"), on_true: t, on_false: f }),
            1 => loc.prop_map(Instr::jump),
            1 => Just(Instr::Ret),
        ];
        prop::collection::vec(instr, n).prop_map(Program::new)
    })
}

fn random_config(p: &Program, pc: usize, regs: &[i64], mem: &[(i64, i64)]) -> Config {
    let mut c = Config::initial(p);
    c.pc = Loc(pc);
    for (r, v) in REGS.iter().zip(regs) {
        c.set_reg(&Register::new(r), *v);
    }
    for (a, v) in mem {
        c.store(*a, *v);
    }
    c
}

/// Runs `check` on `cases` values drawn from `strategy`.
pub fn run<S: Strategy>(cases: u32, strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(RunnerConfig { cases, failure_persistence: None, ..RunnerConfig::default() });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

pub fn parse_serialize_round_trip(cases: u32) -> Result<(), String> {
    run(cases, any_program(), |p| {
        let opts = ParseOptions { allow_mixed: true };
        let first = parse_program_with(&serialize_program(&p), opts).unwrap();
        prop_assert_eq!(&first.code, &p.code);
        let second = parse_program_with(&serialize_program(&first), opts).unwrap();
        prop_assert_eq!(first, second);
        Ok(())
    })
}

pub fn postdominators_match_path_enumeration(cases: u32) -> Result<(), String> {
    run(cases, cfg_program(), |p| {
        let g = build_cfg_at(&p, Loc(0)).unwrap();
        for b in g.reachable_blocks() {
            prop_assert_eq!(g.immediate_postdominator(b), brute_ipdom(&g, b), "block {}", b);
        }
        Ok(())
    })
}

pub fn fold_level_is_invertible(cases: u32) -> Result<(), String> {
    let blocks = (1usize..9, 1usize..7).prop_flat_map(|(w, len)| prop::collection::vec(prop::collection::vec(data_instr(), len), w));
    run(cases, blocks, |blocks| {
        let level: Vec<_> = blocks
            .iter()
            .enumerate()
            .map(|(i, instrs)| slicefold::cfg::BasicBlock { id: BlockId(i), start: Loc(i * 100), instrs: instrs.clone() })
            .collect();
        let folded = fold_level(&level).unwrap();
        prop_assert_eq!(folded.bbc, blocks.len());
        prop_assert_eq!(unfold_level(&folded), blocks);
        Ok(())
    })
}

pub fn levels_match_independent_bfs(cases: u32) -> Result<(), String> {
    run(cases, region_spec(), |spec| {
        let p = parse_program(&spec.text()).unwrap();
        let g = build_cfg(&p).unwrap();
        let entry = g.block_of(Loc(spec.prefix.len())).unwrap();
        let region = secret_region(&g, entry).unwrap();
        let ls = level_structure(&g, &region).unwrap();
        let dist = bfs_levels(&g, entry);
        for (i, level) in ls.levels.iter().enumerate() {
            for b in level {
                prop_assert_eq!(dist[b], i);
            }
        }
        Ok(())
    })
}

pub fn level_offsets_are_sound(cases: u32) -> Result<(), String> {
    run(cases, region_spec(), |spec| {
        let src = parse_program(&spec.text()).unwrap();
        let f = transform(&src).unwrap();
        prop_assert!(validate_program(&f.program, Dialect::Target).is_empty());
        for (t, instr) in f.program.code.iter().enumerate() {
            let Instr::LevelBranch { off_true, off_false, bbc, .. } = instr else { continue };
            prop_assert!(*off_true < *bbc && *off_false < *bbc);
            let ctx = f.slices[t];
            let next = slice_addr(Loc(t), ctx.off).unwrap().offset(ctx.bbc);
            let sources: Vec<Loc> = f.corr.iter().filter(|(_, ts)| ts.contains(&Loc(t))).map(|(s, _)| s).collect();
            prop_assert!(!sources.is_empty());
            for s in sources {
                let (lt, lf) = match &src.code[s.0] {
                    Instr::Branch { on_true, on_false, .. } | Instr::SecretBranch { on_true, on_false, .. } => (*on_true, *on_false),
                    other => return Err(TestCaseError::fail(format!("lo.br at {t} relates to `{other}`"))),
                };
                prop_assert!(f.corr.relates(lt, next.offset(*off_true)));
                prop_assert!(f.corr.relates(lf, next.offset(*off_false)));
            }
        }
        Ok(())
    })
}

pub fn contexts_stay_well_formed(cases: u32) -> Result<(), String> {
    run(cases, (region_spec(), prop::collection::vec(-8i64..8, REGS.len())), |(spec, regs)| {
        let src = parse_program(&spec.text()).unwrap();
        let f = transform(&src).unwrap();
        let mut c = random_config(&f.program, f.program.entry.0, &regs, &[]);
        let sem = Semantics::Target(ExecOptions::default());
        let halt = f.program.halt_loc();
        for _ in 0..1000 {
            prop_assert_eq!(c.ctx_stack.len(), c.ret_stack.len() + 1);
            let top = *c.ctx_stack.last().unwrap();
            prop_assert!(top.off < top.bbc);
            if c.pc == halt {
                prop_assert_eq!(top, Ctx::INITIAL);
                break;
            }
            prop_assert_eq!(f.slices[c.pc.0], top);
            sem.step(&f.program, &mut c).unwrap();
        }
        prop_assert_eq!(c.pc, halt);
        Ok(())
    })
}

pub fn folded_regions_run_in_lockstep(cases: u32) -> Result<(), String> {
    run(cases, (region_spec(), prop::collection::vec(-8i64..8, 4), -3i64..3), |(spec, regs, s)| {
        let src = parse_program(&spec.text()).unwrap();
        let f = transform(&src).unwrap();
        let mut policy = SecurityPolicy::default();
        policy.secrets.push((SecretLoc::Reg(Register::new("s0")), vec![0, s]));
        for (r, v) in REGS.iter().zip(&regs) {
            policy.public_regs.insert(Register::new(r), *v);
        }
        let v = check_correctness(&src, &f, &InputSpace::new(&policy, None), CheckOptions::default());
        prop_assert!(v.passed(), "{}", v);
        Ok(())
    })
}

pub fn weak_observation_ignores_pc(cases: u32) -> Result<(), String> {
    let case = (
        any_instr(8),
        prop::collection::vec(data_instr(), 8),
        (0usize..8, 0usize..8),
        prop::collection::vec(any::<i64>(), REGS.len()),
        prop::collection::vec((-8i64..8, any::<i64>()), 0..4),
    );
    run(cases, case, |(instr, filler, (i, j), regs, mem)| {
        let mut code = filler;
        code[i] = instr.clone();
        code[j] = instr;
        let p = Program::new(code);
        let k = LeakageContract::default();
        let a = random_config(&p, i, &regs, &mem);
        let b = random_config(&p, j, &regs, &mem);
        prop_assert_eq!(k.obs_weak(&p, &a), k.obs_weak(&p, &b));
        Ok(())
    })
}

pub fn strong_without_slice_is_weak(cases: u32) -> Result<(), String> {
    let case = (
        any_program(),
        any::<prop::sample::Index>(),
        (1usize..5).prop_flat_map(|bbc| (Just(bbc), 0..bbc)),
        prop::collection::vec(any::<i64>(), REGS.len()),
    );
    run(cases, case, |(p, pc, ctx, regs)| {
        let pc = pc.index(p.len());
        let mut c = random_config(&p, pc, &regs, &[]);
        c.ctx_stack = vec![Ctx { bbc: ctx.0, off: ctx.1.min(pc) }];
        let k = LeakageContract::default();
        let strong = k.obs_strong(&p, &c);
        prop_assert!(strong.slice.is_some());
        prop_assert_eq!(strong.erase_slice(), k.obs_weak(&p, &c));
        Ok(())
    })
}
