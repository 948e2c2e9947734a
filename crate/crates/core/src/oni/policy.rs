//! Security policies and the input spaces they induce.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::asm::{Program, Register};
use crate::exec::Config;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("policy line {line}: {reason}")]
pub struct PolicyError {
    pub line: usize,
    pub reason: String,
}

/// A location holding secret data.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SecretLoc {
    Reg(Register),
    Mem(i64),
}

impl std::fmt::Display for SecretLoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SecretLoc::Reg(r) => write!(f, "{r}"),
            SecretLoc::Mem(a) => write!(f, "mem[{a}]"),
        }
    }
}

/// Which parts of the initial state are secret, plus the public fixture.
///
/// File format, one directive per line (`#` starts a comment):
///
/// ```text
/// secret reg <name> [in <v>,<v>...]
/// secret mem <lo>..<hi> [in <v>,<v>...]
/// public reg <name> = <v>
/// public mem <addr> = <v>
/// public reg <name> range <lo>..<hi>
/// public mem <addr> range <lo>..<hi>
/// ```
///
/// Secrets range over `{0, 1}` unless a domain is given. `range` entries
/// are drawn at random for extra fixtures when a seed is supplied.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SecurityPolicy {
    pub secrets: Vec<(SecretLoc, Vec<i64>)>,
    pub public_regs: BTreeMap<Register, i64>,
    pub public_mem: BTreeMap<i64, i64>,
    pub random_regs: Vec<(Register, i64, i64)>,
    pub random_mem: Vec<(i64, i64, i64)>,
}

fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = match body.strip_prefix("0x") {
        Some(h) => i64::from_str_radix(h, 16).ok()?,
        None => body.parse().ok()?,
    };
    Some(if neg { -v } else { v })
}

fn parse_range(s: &str) -> Option<(i64, i64)> {
    let (lo, hi) = s.split_once("..")?;
    Some((parse_int(lo)?, parse_int(hi)?))
}

impl SecurityPolicy {
    pub fn parse(text: &str) -> Result<SecurityPolicy, PolicyError> {
        let mut p = SecurityPolicy::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| PolicyError { line: n + 1, reason: reason.into() };
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["secret", kind, what, rest @ ..] => {
                    let domain = match rest {
                        [] => vec![0, 1],
                        ["in", vals] => vals
                            .split(',')
                            .map(|v| parse_int(v).ok_or_else(|| err("bad domain value")))
                            .collect::<Result<_, _>>()?,
                        _ => return Err(err("expected `in <v>,<v>...`")),
                    };
                    match *kind {
                        "reg" => p.secrets.push((SecretLoc::Reg(Register::new(what)), domain)),
                        "mem" => {
                            let (lo, hi) = parse_range(what).ok_or_else(|| err("expected <lo>..<hi>"))?;
                            if hi <= lo {
                                return Err(err("empty secret memory range"));
                            }
                            for a in lo..hi {
                                p.secrets.push((SecretLoc::Mem(a), domain.clone()));
                            }
                        }
                        _ => return Err(err("expected `reg` or `mem`")),
                    }
                }
                ["public", "reg", name, "=", v] => {
                    p.public_regs.insert(Register::new(name), parse_int(v).ok_or_else(|| err("bad value"))?);
                }
                ["public", "mem", a, "=", v] => {
                    let a = parse_int(a).ok_or_else(|| err("bad address"))?;
                    p.public_mem.insert(a, parse_int(v).ok_or_else(|| err("bad value"))?);
                }
                ["public", "reg", name, "range", r] => {
                    let (lo, hi) = parse_range(r).ok_or_else(|| err("expected <lo>..<hi>"))?;
                    p.random_regs.push((Register::new(name), lo, hi));
                }
                ["public", "mem", a, "range", r] => {
                    let a = parse_int(a).ok_or_else(|| err("bad address"))?;
                    let (lo, hi) = parse_range(r).ok_or_else(|| err("expected <lo>..<hi>"))?;
                    p.random_mem.push((a, lo, hi));
                }
                _ => return Err(err("unknown directive")),
            }
        }
        Ok(p)
    }

    pub fn is_secret_reg(&self, r: &Register) -> bool {
        self.secrets.iter().any(|(l, _)| *l == SecretLoc::Reg(r.clone()))
    }

    pub fn is_secret_mem(&self, a: i64) -> bool {
        self.secrets.iter().any(|(l, _)| *l == SecretLoc::Mem(a))
    }
}

/// True iff the two states agree on every public register and memory cell.
pub fn indistinguishable(c1: &Config, c2: &Config, policy: &SecurityPolicy) -> bool {
    let regs = |c: &Config| -> BTreeMap<Register, i64> {
        c.nonzero_regs().into_iter().filter(|(r, _)| !policy.is_secret_reg(r)).map(|(r, v)| (r.clone(), v)).collect()
    };
    let mem = |c: &Config| -> BTreeMap<i64, i64> {
        c.nonzero_mem().into_iter().filter(|(a, _)| !policy.is_secret_mem(*a)).collect()
    };
    regs(c1) == regs(c2) && mem(c1) == mem(c2)
}

/// Concrete public part of an initial state.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Fixture {
    pub regs: BTreeMap<Register, i64>,
    pub mem: BTreeMap<i64, i64>,
}

/// One value per secret location, in policy order.
pub type Assignment = Vec<i64>;

/// Public fixtures crossed with every assignment of the secrets.
#[derive(Clone, Debug)]
pub struct InputSpace {
    pub policy: SecurityPolicy,
    pub fixtures: Vec<Fixture>,
    pub assignments: Vec<Assignment>,
}

/// Extra random fixtures drawn when a seed is given.
pub const SEEDED_FIXTURES: usize = 3;

impl InputSpace {
    /// The base fixture, plus [`SEEDED_FIXTURES`] random ones when `seed`
    /// is given and the policy has `range` entries.
    pub fn new(policy: &SecurityPolicy, seed: Option<u64>) -> InputSpace {
        let base = Fixture { regs: policy.public_regs.clone(), mem: policy.public_mem.clone() };
        let mut fixtures = vec![base.clone()];
        let has_random = !policy.random_regs.is_empty() || !policy.random_mem.is_empty();
        if let (Some(seed), true) = (seed, has_random) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..SEEDED_FIXTURES {
                let mut f = base.clone();
                for (r, lo, hi) in &policy.random_regs {
                    f.regs.insert(r.clone(), rng.gen_range(*lo..=*hi));
                }
                for (a, lo, hi) in &policy.random_mem {
                    f.mem.insert(*a, rng.gen_range(*lo..=*hi));
                }
                fixtures.push(f);
            }
        } else if has_random {
            // Without a seed, range entries take their lower bound.
            let f = &mut fixtures[0];
            for (r, lo, _) in &policy.random_regs {
                f.regs.insert(r.clone(), *lo);
            }
            for (a, lo, _) in &policy.random_mem {
                f.mem.insert(*a, *lo);
            }
        }
        let mut assignments: Vec<Assignment> = vec![Vec::new()];
        for (_, domain) in &policy.secrets {
            assignments = assignments
                .into_iter()
                .flat_map(|a| {
                    domain.iter().map(move |v| {
                        let mut a = a.clone();
                        a.push(*v);
                        a
                    })
                })
                .collect();
        }
        InputSpace { policy: policy.clone(), fixtures, assignments }
    }

    /// Every (fixture, assignment) index pair, fixture-major.
    pub fn inputs(&self) -> Vec<(usize, usize)> {
        (0..self.fixtures.len()).flat_map(|f| (0..self.assignments.len()).map(move |a| (f, a))).collect()
    }

    pub fn initial(&self, p: &Program, fixture: usize, assignment: usize) -> Config {
        let mut c = Config::initial(p);
        let f = &self.fixtures[fixture];
        for (r, v) in &f.regs {
            c.set_reg(r, *v);
        }
        for (a, v) in &f.mem {
            c.store(*a, *v);
        }
        for ((loc, _), v) in self.policy.secrets.iter().zip(&self.assignments[assignment]) {
            match loc {
                SecretLoc::Reg(r) => c.set_reg(r, *v),
                SecretLoc::Mem(a) => c.store(*a, *v),
            }
        }
        c
    }

    /// `name=value` pairs of an assignment.
    pub fn describe(&self, assignment: usize) -> String {
        let parts: Vec<String> = self
            .policy
            .secrets
            .iter()
            .zip(&self.assignments[assignment])
            .map(|((l, _), v)| format!("{l}={v}"))
            .collect();
        parts.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_all_directives() {
        let p = SecurityPolicy::parse(
            "secret reg secret\nsecret mem 16..18 in 0,5\npublic reg a0 = 3\npublic mem 4 = -1\npublic reg a1 range 0..9\n",
        )
        .unwrap();
        assert_eq!(p.secrets.len(), 3);
        assert_eq!(p.secrets[1], (SecretLoc::Mem(16), vec![0, 5]));
        assert_eq!(p.public_regs[&Register::new("a0")], 3);
        assert_eq!(p.public_mem[&4], -1);
        assert_eq!(p.random_regs, vec![(Register::new("a1"), 0, 9)]);
        assert!(SecurityPolicy::parse("secret reg").is_err());
    }

    #[test]
    fn cross_product_of_secrets() {
        let p = SecurityPolicy::parse("secret reg a\nsecret reg b in 1,2,3\n").unwrap();
        let s = InputSpace::new(&p, None);
        assert_eq!(s.assignments.len(), 6);
        assert_eq!(s.describe(5), "a=1,b=3");
    }

    #[test]
    fn seeded_fixtures_are_deterministic() {
        let p = SecurityPolicy::parse("public reg a0 range 0..1000\n").unwrap();
        let a = InputSpace::new(&p, Some(7));
        let b = InputSpace::new(&p, Some(7));
        assert_eq!(a.fixtures, b.fixtures);
        assert_eq!(a.fixtures.len(), 1 + SEEDED_FIXTURES);
    }

    #[test]
    fn indistinguishability() {
        let policy = SecurityPolicy::parse("secret reg s\nsecret mem 8..9\n").unwrap();
        let prog = Program::default();
        let mut a = Config::initial(&prog);
        let mut b = a.clone();
        assert!(indistinguishable(&a, &b, &policy));
        a.set_reg(&Register::new("s"), 1);
        b.store(8, 4);
        assert!(indistinguishable(&a, &b, &policy));
        b.store(9, 1);
        assert!(!indistinguishable(&a, &b, &policy));
    }
}
