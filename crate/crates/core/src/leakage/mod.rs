//! Leakage contracts and the weak and strong observers.
//!
//! A contract sorts mnemonics into classes and marks which operand positions
//! leak their value. The weak observer sees the class of the executing
//! instruction plus its leaked operands; the strong observer also sees the
//! address of the current slice.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::asm::{parse_instruction, Expr, Instr, Loc, Program, Register, CONTROL_MNEMONICS};
use crate::exec::{exec_data, slice_addr, Config, Observer};

const DEFAULT_CONTRACT: &str = include_str!("default.contract");

/// Mnemonics that must never leak anything beyond their class.
const ALWAYS_SAFE: [&str; 5] = ["s.br", "lo.br", "s.call", "lo.call", "ret"];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(Arc<str>);

impl ClassId {
    pub fn new(s: &str) -> ClassId {
        ClassId(Arc::from(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Operand positions whose values an instruction leaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unsafe {
    /// The single source operand (or the outcome/target of a plain transfer).
    Only,
    Left,
    Right,
    LeftRight,
}

impl Unsafe {
    fn parse(s: &str) -> Option<Unsafe> {
        let parts: BTreeSet<&str> = s.split(',').map(str::trim).collect();
        let v: Vec<&str> = parts.into_iter().collect();
        match v.as_slice() {
            ["only"] => Some(Unsafe::Only),
            ["left"] => Some(Unsafe::Left),
            ["right"] => Some(Unsafe::Right),
            ["left", "right"] => Some(Unsafe::LeftRight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("`{0}` is assigned to more than one class")]
    DuplicateMnemonic(String),
    #[error("mnemonic `{0}` has no class")]
    MissingClass(String),
    #[error("class `{0}` mixes a control transfer with other mnemonics")]
    SharedControlClass(String),
    #[error("`{0}` must be safe")]
    MustBeSafe(String),
    #[error("`{0}` must leak its outcome")]
    MustLeak(String),
    #[error("`{mnemonic}` has no operand positions `{positions}`")]
    BadPositions { mnemonic: String, positions: String },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("dummy `{instr}` for class `{class}`: {reason}")]
    BadDummy { class: String, instr: String, reason: String },
    #[error("granularity for `{0}` must be a power of two")]
    BadGranularity(String),
}

/// A validated leakage contract.
#[derive(Clone, Debug)]
pub struct LeakageContract {
    class_of: BTreeMap<String, ClassId>,
    unsafe_ops: BTreeMap<String, Unsafe>,
    dummies: BTreeMap<ClassId, Instr>,
    blocklist: BTreeSet<String>,
    granularity: BTreeMap<String, i64>,
}

/// Operand slots of an instruction, as `(only, left, right)`.
fn operands(i: &Instr) -> (Option<&Expr>, Option<&Expr>, Option<&Expr>) {
    match i {
        Instr::Unary { src, .. } => (Some(src), None, None),
        Instr::Binary { lhs, rhs, .. } => (None, Some(lhs), Some(rhs)),
        Instr::Store { value, addr } => (None, Some(value), Some(addr)),
        _ => (None, None, None),
    }
}

fn positions_valid(mnemonic: &str, u: Unsafe) -> bool {
    let unary = crate::asm::UnaryOp::from_mnemonic(mnemonic).is_some();
    let binary = crate::asm::BinaryOp::from_mnemonic(mnemonic).is_some() || mnemonic == "store";
    match u {
        Unsafe::Only => unary || mnemonic == "br" || mnemonic == "call",
        _ => binary,
    }
}

pub fn load_contract(text: &str) -> Result<LeakageContract, ContractError> {
    let vocab: BTreeSet<&str> = Instr::all_mnemonics().into_iter().collect();
    let mut classes: BTreeMap<ClassId, Vec<String>> = BTreeMap::new();
    let mut class_of = BTreeMap::new();
    let mut unsafe_ops = BTreeMap::new();
    let mut dummy_text: Vec<(usize, String, String)> = Vec::new();
    let mut blocklist = BTreeSet::new();
    let mut granularity = BTreeMap::new();

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let syntax = |reason: &str| ContractError::Syntax { line: line_no, reason: reason.into() };
        let (head, body) = line.split_once(':').ok_or_else(|| syntax("expected `<directive>: <value>`"))?;
        let mut words = head.split_whitespace();
        let directive = words.next().unwrap_or("");
        let arg = words.next();
        if words.next().is_some() {
            return Err(syntax("too many words before `:`"));
        }
        let known = |m: &str| -> Result<String, ContractError> {
            if vocab.contains(m) {
                Ok(m.to_string())
            } else {
                Err(ContractError::UnknownMnemonic { line: line_no, mnemonic: m.to_string() })
            }
        };
        let list = |s: &str| -> Vec<String> {
            s.split(',').map(str::trim).filter(|m| !m.is_empty()).map(String::from).collect()
        };
        match (directive, arg) {
            ("class", Some(id)) => {
                let id = ClassId::new(id);
                for m in list(body) {
                    let m = known(&m)?;
                    if class_of.insert(m.clone(), id.clone()).is_some() {
                        return Err(ContractError::DuplicateMnemonic(m));
                    }
                    classes.entry(id.clone()).or_default().push(m);
                }
            }
            ("unsafe", Some(m)) => {
                let m = known(m)?;
                let u = Unsafe::parse(body).ok_or_else(|| syntax("expected only, left, right or left,right"))?;
                if ALWAYS_SAFE.contains(&m.as_str()) {
                    return Err(ContractError::MustBeSafe(m));
                }
                if !positions_valid(&m, u) {
                    return Err(ContractError::BadPositions { mnemonic: m, positions: body.trim().to_string() });
                }
                unsafe_ops.insert(m, u);
            }
            ("dummy", Some(id)) => dummy_text.push((line_no, id.to_string(), body.trim().to_string())),
            ("blocklist", None) => {
                for m in list(body) {
                    blocklist.insert(known(&m)?);
                }
            }
            ("granularity", Some(m)) => {
                let m = known(m)?;
                let g: i64 = body.trim().parse().map_err(|_| syntax("expected an integer"))?;
                if g <= 0 || g & (g - 1) != 0 {
                    return Err(ContractError::BadGranularity(m));
                }
                granularity.insert(m, g);
            }
            _ => return Err(syntax("unknown directive")),
        }
    }

    for m in &vocab {
        if !class_of.contains_key(*m) {
            return Err(ContractError::MissingClass(m.to_string()));
        }
    }
    for m in CONTROL_MNEMONICS {
        let id = &class_of[m];
        if classes[id].len() != 1 {
            return Err(ContractError::SharedControlClass(id.to_string()));
        }
    }
    for m in ["br", "call"] {
        if unsafe_ops.get(m) != Some(&Unsafe::Only) {
            return Err(ContractError::MustLeak(m.to_string()));
        }
    }

    let mut dummies = BTreeMap::new();
    for (line, id, text) in dummy_text {
        let id = ClassId::new(&id);
        if !classes.contains_key(&id) {
            return Err(ContractError::UnknownClass(id.to_string()));
        }
        let instr = parse_instruction(&text).map_err(|e| ContractError::Syntax { line, reason: e.to_string() })?;
        let bad = |reason: &str| ContractError::BadDummy { class: id.to_string(), instr: text.clone(), reason: reason.into() };
        if class_of[instr.mnemonic()] != id {
            return Err(bad("instruction belongs to another class"));
        }
        if !is_no_op(&instr) {
            return Err(bad("instruction changes the state"));
        }
        dummies.insert(id, instr);
    }

    Ok(LeakageContract { class_of, unsafe_ops, dummies, blocklist, granularity })
}

/// Checks that `instr` leaves registers and memory unchanged on a spread of
/// operand values.
fn is_no_op(instr: &Instr) -> bool {
    if !matches!(instr, Instr::Unary { .. } | Instr::Binary { .. } | Instr::Store { .. }) {
        return false;
    }
    let regs: BTreeSet<Register> = {
        let (a, b, c) = operands(instr);
        [a, b, c].into_iter().flatten().filter_map(|e| match e {
            Expr::Reg(r) => Some(r.clone()),
            Expr::Imm(_) => None,
        })
        .chain(instr.dest().cloned())
        .collect()
    };
    let samples = [0, 1, -1, 7, 64, i64::MIN, i64::MAX];
    for (k, v) in samples.iter().enumerate() {
        let mut c = Config::initial(&Program::default());
        for (j, r) in regs.iter().enumerate() {
            c.set_reg(r, samples[(k + j) % samples.len()].wrapping_add(*v & 3));
        }
        c.store(*v, 5);
        let before = c.clone();
        exec_data(instr, &mut c);
        if c.nonzero_regs() != before.nonzero_regs() || c.nonzero_mem() != before.nonzero_mem() {
            return false;
        }
    }
    true
}

impl Default for LeakageContract {
    fn default() -> Self {
        load_contract(DEFAULT_CONTRACT).expect("bundled contract is valid")
    }
}

impl LeakageContract {
    /// Text of the bundled contract.
    pub fn default_text() -> &'static str {
        DEFAULT_CONTRACT
    }

    pub fn class_of(&self, i: &Instr) -> &ClassId {
        &self.class_of[i.mnemonic()]
    }

    pub fn unsafe_positions(&self, mnemonic: &str) -> Option<Unsafe> {
        self.unsafe_ops.get(mnemonic).copied()
    }

    pub fn is_blocklisted(&self, mnemonic: &str) -> bool {
        self.blocklist.contains(mnemonic)
    }

    /// Locations of blocklisted instructions in `p`.
    pub fn blocklisted_in(&self, p: &Program) -> Vec<Loc> {
        (0..p.len()).map(Loc).filter(|l| self.is_blocklisted(p.code[l.0].mnemonic())).collect()
    }

    /// The canonical no-op of a class.
    pub fn compose_dummy(&self, class: &ClassId) -> Result<Instr, ContractError> {
        self.dummies.get(class).cloned().ok_or_else(|| ContractError::UnknownClass(class.to_string()))
    }

    pub fn classes(&self) -> BTreeSet<&ClassId> {
        self.class_of.values().collect()
    }

    fn mask(&self, mnemonic: &str, v: i64) -> i64 {
        match self.granularity.get(mnemonic) {
            Some(g) => v & !(g - 1),
            None => v,
        }
    }

    /// Class plus leaked operand values of the instruction at `c.pc`.
    pub fn obs_weak(&self, p: &Program, c: &Config) -> Observation {
        let Some(instr) = p.get(c.pc) else {
            return Observation { slice: None, class: ClassId::new("halt"), leaked: Vec::new() };
        };
        let m = instr.mnemonic();
        let class = self.class_of(instr).clone();
        let mut leaked = Vec::new();
        match (instr, self.unsafe_positions(m)) {
            (_, None) => {}
            (Instr::Branch { cond, .. }, Some(_)) => leaked.push((c.eval(cond) != 0) as i64),
            (Instr::Call { target }, Some(_)) => leaked.push(target.0 as i64),
            (_, Some(u)) => {
                let (only, left, right) = operands(instr);
                let picked = match u {
                    Unsafe::Only => vec![only],
                    Unsafe::Left => vec![left],
                    Unsafe::Right => vec![right],
                    Unsafe::LeftRight => vec![left, right],
                };
                leaked.extend(picked.into_iter().flatten().map(|e| self.mask(m, c.eval(e))));
            }
        }
        Observation { slice: None, class, leaked }
    }

    /// Weak observation plus the address of the current slice.
    pub fn obs_strong(&self, p: &Program, c: &Config) -> Observation {
        let mut o = self.obs_weak(p, c);
        let off = c.top_ctx().map(|t| t.off).unwrap_or(0);
        o.slice = Some(slice_addr(c.pc, off).unwrap_or(c.pc));
        o
    }
}

/// What the attacker sees for one step.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pub slice: Option<Loc>,
    pub class: ClassId,
    pub leaked: Vec<i64>,
}

impl Observation {
    /// The same observation with the slice address removed.
    pub fn erase_slice(&self) -> Observation {
        Observation { slice: None, ..self.clone() }
    }
}

impl fmt::Display for Observation {
    /// `<class>[ operands]`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.class)?;
        for v in &self.leaked {
            write!(f, " {v}")?;
        }
        Ok(())
    }
}

/// One trace-file line: `step=<n> pc=<loc> slice=<loc|-> obs=<class>[ operands]`.
pub fn trace_line(step: usize, pc: Loc, o: &Observation) -> String {
    let slice = o.slice.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    format!("step={step} pc={pc} slice={slice} obs={o}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObserverMode {
    Weak,
    Strong,
}

impl ObserverMode {
    pub fn parse(s: &str) -> Option<ObserverMode> {
        match s {
            "weak" => Some(ObserverMode::Weak),
            "strong" => Some(ObserverMode::Strong),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObserverMode::Weak => "weak",
            ObserverMode::Strong => "strong",
        }
    }
}

/// Observer backed by a contract.
#[derive(Clone, Copy, Debug)]
pub struct ContractObserver<'a> {
    pub contract: &'a LeakageContract,
    pub mode: ObserverMode,
}

impl Observer for ContractObserver<'_> {
    type Obs = Observation;

    fn observe(&self, p: &Program, c: &Config) -> Observation {
        match self.mode {
            ObserverMode::Weak => self.contract.obs_weak(p, c),
            ObserverMode::Strong => self.contract.obs_strong(p, c),
        }
    }
}
