//! Input partitioning by page access profile, leakage in bits, the
//! PF-obliviousness checker and the concrete attack oracles.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exectree::ExecTree;
use crate::frontend::ast::Qualifier;
use crate::model::{MemoryLayout, PageAccessProfile, VirtualPage};
use crate::simulate::{simulate_with, Inputs, PageTables, SimOptions};
use crate::transform::Plan;

/// Largest domain enumerated without sampling.
pub const DEFAULT_EXHAUSTIVE_LIMIT_BITS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainKind {
    /// Every value of the low `bits` bits of the secret bit string.
    Exhaustive {
        bits: u32,
    },
    /// `count` uniformly random full-width secrets.
    Sample {
        count: usize,
        seed: u64,
    },
    Explicit {
        inputs: Vec<Inputs>,
    },
}

/// Secret inputs to range over; publics stay fixed at `base`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretDomain {
    /// Secret objects, in declaration order when empty.
    pub vars: Vec<String>,
    pub kind: DomainKind,
    pub base: Inputs,
}

impl SecretDomain {
    pub fn exhaustive(bits: u32) -> Self {
        SecretDomain {
            vars: Vec::new(),
            kind: DomainKind::Exhaustive { bits },
            base: Inputs::new(),
        }
    }

    pub fn sample(count: usize, seed: u64) -> Self {
        SecretDomain {
            vars: Vec::new(),
            kind: DomainKind::Sample { count, seed },
            base: Inputs::new(),
        }
    }

    pub fn with_vars(mut self, vars: &[&str]) -> Self {
        self.vars = vars.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_base(mut self, base: Inputs) -> Self {
        self.base = base;
        self
    }
}

/// (name, elements, bits per element) of each secret in the domain.
fn secret_shape(tree: &ExecTree, dom: &SecretDomain) -> Result<Vec<(String, usize, u32)>> {
    let names: Vec<String> = if dom.vars.is_empty() {
        tree.objects
            .iter()
            .filter(|o| o.qual == Qualifier::Secret)
            .map(|o| o.name.clone())
            .collect()
    } else {
        dom.vars.clone()
    };
    names
        .into_iter()
        .map(|n| {
            let o = tree
                .object_id(&n)
                .map(|i| &tree.objects[i as usize])
                .ok_or_else(|| Error::Domain(format!("unknown secret `{n}`")))?;
            let bits = o.width.unwrap_or((o.elem_bytes * 8) as u32).min(63);
            Ok((n, o.len.max(1) as usize, bits))
        })
        .collect()
}

/// Total secret bits the domain ranges over at full width.
pub fn domain_width(tree: &ExecTree, dom: &SecretDomain) -> Result<u64> {
    Ok(secret_shape(tree, dom)?
        .iter()
        .map(|(_, n, b)| *n as u64 * *b as u64)
        .sum())
}

/// Materializes the domain in enumeration order. Index `j` of an exhaustive
/// domain fills the secret elements in order from its low bits.
pub fn enumerate_domain(tree: &ExecTree, dom: &SecretDomain) -> Result<Vec<Inputs>> {
    let shape = secret_shape(tree, dom)?;
    let with_base = |vals: Vec<(String, Vec<i64>)>| {
        let mut i = dom.base.clone();
        i.extend(vals);
        i
    };
    match &dom.kind {
        DomainKind::Explicit { inputs } => {
            if inputs.is_empty() {
                return Err(Error::Domain("empty input domain".into()));
            }
            Ok(inputs
                .iter()
                .map(|x| with_base(x.clone().into_iter().collect()))
                .collect())
        }
        DomainKind::Exhaustive { bits } => {
            if *bits > DEFAULT_EXHAUSTIVE_LIMIT_BITS {
                return Err(Error::Domain(format!(
                    "exhaustive domain of 2^{bits} inputs exceeds 2^{DEFAULT_EXHAUSTIVE_LIMIT_BITS}; sample instead"
                )));
            }
            let width: u64 = shape.iter().map(|(_, n, b)| *n as u64 * *b as u64).sum();
            let bits = (*bits as u64).min(width) as u32;
            Ok((0..1u64 << bits)
                .map(|j| {
                    let mut rest = j;
                    let mut left = bits;
                    let vals = shape
                        .iter()
                        .map(|(name, n, b)| {
                            let v = (0..*n)
                                .map(|_| {
                                    let take = (*b).min(left);
                                    left -= take;
                                    let x = if take == 0 {
                                        0
                                    } else {
                                        rest & ((1u64 << take) - 1)
                                    };
                                    rest = rest.checked_shr(take).unwrap_or(0);
                                    x as i64
                                })
                                .collect();
                            (name.clone(), v)
                        })
                        .collect();
                    with_base(vals)
                })
                .collect())
        }
        DomainKind::Sample { count, seed } => {
            if *count == 0 {
                return Err(Error::Domain("empty input domain".into()));
            }
            let mut rng = ChaCha20Rng::seed_from_u64(*seed);
            Ok((0..*count)
                .map(|_| {
                    let vals = shape
                        .iter()
                        .map(|(name, n, b)| {
                            let v = (0..*n)
                                .map(|_| (rng.gen::<u64>() & ((1u64 << b) - 1)) as i64)
                                .collect();
                            (name.clone(), v)
                        })
                        .collect();
                    with_base(vals)
                })
                .collect())
        }
    }
}

/// The program view every analysis runs against.
#[derive(Clone, Copy)]
pub struct Target<'a> {
    pub tree: &'a ExecTree,
    pub layout: &'a MemoryLayout,
    pub plan: Option<&'a Plan>,
}

impl<'a> Target<'a> {
    pub fn vanilla(tree: &'a ExecTree, layout: &'a MemoryLayout) -> Self {
        Target {
            tree,
            layout,
            plan: None,
        }
    }

    pub fn planned(tree: &'a ExecTree, plan: &'a Plan) -> Self {
        Target {
            tree,
            layout: &plan.layout,
            plan: Some(plan),
        }
    }

    pub fn page_tables(&self) -> Result<PageTables> {
        PageTables::new(
            self.tree,
            self.plan.map(|p| &p.layout).unwrap_or(self.layout),
        )
    }
}

fn profiles(t: &Target, inputs: &[Inputs], opts: &SimOptions) -> Result<Vec<PageAccessProfile>> {
    let pages = t.page_tables()?;
    let opts = SimOptions {
        record_trace: false,
        ..*opts
    };
    inputs
        .par_iter()
        .map(|i| simulate_with(t.tree, &pages, t.plan, i, &opts).map(|r| r.profile))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub i0: Inputs,
    pub i1: Inputs,
    pub index0: usize,
    pub index1: usize,
    pub first_divergence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub oblivious: bool,
    pub inputs_checked: usize,
    pub counterexample: Option<Counterexample>,
}

/// Checks that every input of the domain yields the profile of the first.
pub fn verify_pfo(t: &Target, dom: &SecretDomain, opts: &SimOptions) -> Result<VerifyReport> {
    let inputs = enumerate_domain(t.tree, dom)?;
    verify_inputs(t, &inputs, opts)
}

pub fn verify_inputs(t: &Target, inputs: &[Inputs], opts: &SimOptions) -> Result<VerifyReport> {
    if inputs.is_empty() {
        return Err(Error::Domain("empty input domain".into()));
    }
    let pages = t.page_tables()?;
    let opts = SimOptions {
        record_trace: false,
        ..*opts
    };
    let run = |i: &Inputs| simulate_with(t.tree, &pages, t.plan, i, &opts).map(|r| r.profile);
    let reference = run(&inputs[0])?;
    let diffs: Vec<Option<usize>> = inputs[1..]
        .par_iter()
        .map(|i| run(i).map(|p| reference.first_divergence(&p)))
        .collect::<Result<_>>()?;
    Ok(verify_report(inputs, &diffs))
}

/// Report from `diffs[k]`, the first divergence of `inputs[k + 1]` from
/// the profile of `inputs[0]`.
pub fn verify_report(inputs: &[Inputs], diffs: &[Option<usize>]) -> VerifyReport {
    let counterexample = diffs.iter().enumerate().find_map(|(k, d)| {
        d.map(|first_divergence| Counterexample {
            i0: inputs[0].clone(),
            i1: inputs[k + 1].clone(),
            index0: 0,
            index1: k + 1,
            first_divergence,
        })
    });
    VerifyReport {
        oblivious: counterexample.is_none(),
        inputs_checked: inputs.len(),
        counterexample,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileClass {
    /// Domain index of the first member.
    pub representative: usize,
    pub size: usize,
    pub faults: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub domain_size: usize,
    /// Ordered by first member.
    pub classes: Vec<ProfileClass>,
    pub mutual_information: f64,
    pub max_leakage: f64,
    /// Class of each domain index.
    #[serde(skip)]
    pub class_of: Vec<usize>,
}

impl LeakageReport {
    /// log2(initial choices / remaining choices) for an observation falling
    /// into `class`.
    pub fn observation_bits(&self, class: usize) -> f64 {
        (self.domain_size as f64 / self.classes[class].size as f64).log2()
    }

    pub fn observation_bits_for_input(&self, index: usize) -> f64 {
        self.observation_bits(self.class_of[index])
    }
}

/// Partitions a list of profiles and computes the entropy figures.
pub fn partition(profiles: &[PageAccessProfile]) -> Result<LeakageReport> {
    if profiles.is_empty() {
        return Err(Error::Domain("empty input domain".into()));
    }
    let mut index: HashMap<&PageAccessProfile, usize> = HashMap::new();
    let mut classes: Vec<ProfileClass> = Vec::new();
    let mut class_of = Vec::with_capacity(profiles.len());
    for (i, p) in profiles.iter().enumerate() {
        let c = *index.entry(p).or_insert_with(|| {
            classes.push(ProfileClass {
                representative: i,
                size: 0,
                faults: p.len(),
            });
            classes.len() - 1
        });
        classes[c].size += 1;
        class_of.push(c);
    }
    let n = profiles.len() as f64;
    let mutual_information = classes
        .iter()
        .map(|c| {
            let f = c.size as f64 / n;
            f * (n / c.size as f64).log2()
        })
        .sum();
    let min = classes.iter().map(|c| c.size).min().unwrap_or(1) as f64;
    Ok(LeakageReport {
        domain_size: profiles.len(),
        classes,
        mutual_information,
        max_leakage: (n / min).log2(),
        class_of,
    })
}

pub fn quantify_leakage(
    t: &Target,
    dom: &SecretDomain,
    opts: &SimOptions,
) -> Result<LeakageReport> {
    let inputs = enumerate_domain(t.tree, dom)?;
    partition(&profiles(t, &inputs, opts)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinguishabilityExperiment {
    pub i0: Inputs,
    pub i1: Inputs,
    pub trials: usize,
    pub correct: usize,
    pub advantage: f64,
}

/// The adversary knows the program and both candidate inputs, sees the
/// profile of I_b, and answers 1 only when it matches I_1 and not I_0.
pub fn distinguish(
    t: &Target,
    i0: &Inputs,
    i1: &Inputs,
    trials: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<DistinguishabilityExperiment> {
    let p = profiles(t, &[i0.clone(), i1.clone()], opts)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut hits1, mut n1, mut hits0, mut n0, mut correct) =
        (0usize, 0usize, 0usize, 0usize, 0usize);
    for _ in 0..trials.max(1) {
        let b: bool = rng.gen();
        let seen = &p[b as usize];
        let guess = *seen == p[1] && *seen != p[0];
        if b {
            n1 += 1;
            hits1 += guess as usize;
        } else {
            n0 += 1;
            hits0 += guess as usize;
        }
        correct += (guess == b) as usize;
    }
    let rate = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    let advantage = if p[0] == p[1] {
        0.0
    } else {
        (rate(hits1, n1) - rate(hits0, n0)).abs()
    };
    Ok(DistinguishabilityExperiment {
        i0: i0.clone(),
        i1: i1.clone(),
        trials: trials.max(1),
        correct,
        advantage,
    })
}

/// Keeps only the faults on `pages`, collapsing immediate repeats.
pub fn code_walk(profile: &PageAccessProfile, pages: &[VirtualPage]) -> Vec<(usize, VirtualPage)> {
    let mut out: Vec<(usize, VirtualPage)> = Vec::new();
    for (i, p) in profile.faults.iter().enumerate() {
        if pages.contains(p) && out.last().map(|x| x.1) != Some(*p) {
            out.push((i, *p));
        }
    }
    out
}

/// Pages of the scalar multiplication routine and its two helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EddsaPages {
    pub ec_mul: VirtualPage,
    pub dup: VirtualPage,
    pub test_bit: VirtualPage,
}

/// Reads one scalar bit per `test_bit` visit. Between two visits the walk
/// is `P1 (P2 P1)^m`: one pair is the next doubling, any extra pairs are
/// the addition that only a 1 bit performs.
pub fn attack_eddsa(profile: &PageAccessProfile, pages: &EddsaPages) -> Result<Vec<u8>> {
    let walk = code_walk(profile, &[pages.ec_mul, pages.dup, pages.test_bit]);
    let err = |offset: usize, msg: &str| Error::AttackParse {
        offset,
        msg: msg.to_string(),
    };
    let (p1, p2, p3) = (pages.ec_mul, pages.dup, pages.test_bit);
    let tests: Vec<usize> = walk
        .iter()
        .enumerate()
        .filter(|(_, x)| x.1 == p3)
        .map(|(k, _)| k)
        .collect();
    if tests.is_empty() {
        return Ok(Vec::new());
    }
    // Prologue: P1 P2 P1 before the first test.
    let pro: Vec<VirtualPage> = walk[..tests[0]].iter().map(|x| x.1).collect();
    if pro != [p1, p2, p1] {
        return Err(err(
            walk.first().map(|x| x.0).unwrap_or(0),
            "expected prologue P1 P2 P1",
        ));
    }
    let mut bits = Vec::with_capacity(tests.len());
    for (n, &t) in tests.iter().enumerate() {
        let end = tests.get(n + 1).copied().unwrap_or(walk.len());
        let seg = &walk[t + 1..end];
        let off = walk[t].0;
        if seg.first().map(|x| x.1) != Some(p1) {
            return Err(err(off, "test_bit must return to P1"));
        }
        let rest = &seg[1..];
        if !rest.len().is_multiple_of(2) || rest.chunks(2).any(|c| c[0].1 != p2 || c[1].1 != p1) {
            return Err(err(off, "expected (P2 P1) pairs after test_bit"));
        }
        let pairs = rest.len() / 2;
        let last = n + 1 == tests.len();
        let extra = if last {
            pairs
        } else if pairs == 0 {
            return Err(err(off, "missing doubling before next test_bit"));
        } else {
            pairs - 1
        };
        bits.push((extra > 0) as u8);
    }
    Ok(bits)
}

/// Pages of the exponentiation body, the multiply and the table select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowmPages {
    pub powm: VirtualPage,
    pub mul_mod: VirtualPage,
    pub set_cond: VirtualPage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MulKind {
    /// Inner-loop squaring.
    Square,
    /// Outer multiply by a table entry, announced by `set_cond`.
    Multiply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowmRecovery {
    pub skeleton: Vec<MulKind>,
    /// The exact exponent, most significant bit first, when w = 1.
    pub exponent: Option<Vec<u8>>,
    /// log2 of the number of exponents consistent with the skeleton.
    pub remaining_bits: f64,
    pub leaked_bits: f64,
    pub leaked_fraction: f64,
}

/// Splits the `mul_mod` calls of a profile into squarings and multiplies:
/// a call is a multiply when `set_cond` ran since the previous call.
pub fn powm_skeleton(profile: &PageAccessProfile, pages: &PowmPages) -> Vec<MulKind> {
    let walk = code_walk(profile, &[pages.powm, pages.mul_mod, pages.set_cond]);
    let mut out = Vec::new();
    let mut selected = false;
    for (_, p) in walk {
        if p == pages.set_cond {
            selected = true;
        } else if p == pages.mul_mod {
            out.push(if selected {
                MulKind::Multiply
            } else {
                MulKind::Square
            });
            selected = false;
        }
    }
    out
}

/// Recovers the exponent (w = 1) or the window skeleton (w > 1) of an
/// `nbits`-bit exponent. The first 2^(w-1) calls are the precomputation.
pub fn attack_powm(
    profile: &PageAccessProfile,
    pages: &PowmPages,
    w: u32,
    nbits: usize,
) -> Result<PowmRecovery> {
    if w == 0 || w > 16 {
        return Err(Error::Input(format!("window size {w} out of range")));
    }
    let all = powm_skeleton(profile, pages);
    let pre = 1usize << (w - 1);
    if all.len() < pre || all[..pre].iter().any(|k| *k != MulKind::Square) {
        return Err(Error::AttackParse {
            offset: 0,
            msg: "missing precomputation multiplies".into(),
        });
    }
    let skeleton = all[pre..].to_vec();
    let squares = skeleton.iter().filter(|k| **k == MulKind::Square).count();
    if squares != nbits || skeleton.first() == Some(&MulKind::Multiply) {
        return Err(Error::AttackParse {
            offset: 0,
            msg: format!("expected {nbits} squarings, found {squares}"),
        });
    }
    let exponent = if w == 1 {
        let mut bits: Vec<u8> = Vec::with_capacity(nbits);
        for k in &skeleton {
            match k {
                MulKind::Square => bits.push(0),
                MulKind::Multiply => {
                    let last = bits.last_mut().ok_or_else(|| Error::AttackParse {
                        offset: 0,
                        msg: "multiply before any squaring".into(),
                    })?;
                    if *last == 1 {
                        return Err(Error::AttackParse {
                            offset: 0,
                            msg: "two multiplies in a row".into(),
                        });
                    }
                    *last = 1;
                }
            }
        }
        Some(bits)
    } else {
        None
    };
    let remaining_bits = consistent_exponents_log2(&skeleton, w, nbits);
    if !remaining_bits.is_finite() {
        return Err(Error::AttackParse {
            offset: 0,
            msg: "no exponent produces this skeleton".into(),
        });
    }
    let leaked_bits = nbits as f64 - remaining_bits;
    Ok(PowmRecovery {
        skeleton,
        exponent,
        remaining_bits,
        leaked_bits,
        leaked_fraction: if nbits == 0 {
            0.0
        } else {
            leaked_bits / nbits as f64
        },
    })
}

fn log2_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (1.0 + (lo - hi).exp2()).log2()
}

/// log2 of the number of `nbits`-bit exponents whose left-to-right
/// sliding-window scan yields `skeleton`. A zero bit costs one squaring; a
/// window of length l (first and last bit set, longest such within w bits)
/// costs l squarings and one multiply.
pub fn consistent_exponents_log2(skeleton: &[MulKind], w: u32, nbits: usize) -> f64 {
    let len = skeleton.len();
    let w = w as usize;
    // Bit position reached at each token index is fixed by the multiplies
    // seen so far.
    let mut mults_before = vec![0usize; len + 1];
    for k in 0..len {
        mults_before[k + 1] = mults_before[k] + (skeleton[k] == MulKind::Multiply) as usize;
    }
    let pos = |k: usize| k.checked_sub(mults_before[k]);
    // f[k][z]: log2 completions from token k with z forced zero bits pending.
    let mut f = vec![vec![f64::NEG_INFINITY; w]; len + 1];
    for k in (0..=len).rev() {
        let Some(i) = pos(k) else { continue };
        if i > nbits {
            continue;
        }
        for z in 0..w {
            let v = if i == nbits {
                if k == len && z == 0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else if k >= len || skeleton[k] != MulKind::Square {
                f64::NEG_INFINITY
            } else if z > 0 {
                f[k + 1][z - 1]
            } else {
                let mut acc = f[k + 1][0];
                let span = w.min(nbits - i);
                for l in 1..=span {
                    if k + l >= len
                        || skeleton[k..k + l].iter().any(|t| *t != MulKind::Square)
                        || skeleton[k + l] != MulKind::Multiply
                    {
                        continue;
                    }
                    let free = l.saturating_sub(2) as f64;
                    let rest = f[k + l + 1][span - l];
                    acc = log2_add(acc, rest + free);
                }
                acc
            };
            f[k][z] = v;
        }
    }
    f[0][0]
}

/// Key byte values consistent with every (plaintext, lower page) sighting
/// of a lookup `T[key ^ plaintext]` whose table splits after `boundary`
/// entries.
pub fn table_candidates(boundary: u32, observations: &[(u8, bool)]) -> Vec<u8> {
    (0..=255u8)
        .filter(|k| {
            observations
                .iter()
                .all(|&(pt, lower)| (((k ^ pt) as u32) < boundary) == lower)
        })
        .collect()
}

/// Plaintext byte that splits the remaining candidates most evenly.
pub fn next_plaintext(boundary: u32, candidates: &[u8]) -> u8 {
    (0..=255u8)
        .min_by_key(|&pt| {
            let lower = candidates
                .iter()
                .filter(|&&k| ((k ^ pt) as u32) < boundary)
                .count();
            (2 * lower).abs_diff(candidates.len())
        })
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableAttackReport {
    /// Candidate key bytes per attacked key index.
    pub candidates: Vec<(usize, Vec<u8>)>,
    pub runs: usize,
    /// Σ log2(256 / candidates).
    pub leaked_bits: f64,
}

/// One split-table lookup the attacker watches: the table, where it splits,
/// and the key/plaintext element it is indexed by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchedLookup {
    pub table: String,
    pub boundary: u32,
    pub byte: usize,
}

/// Which side of its split each watched lookup hit, read from a victim
/// profile. The attacker locates the lookups' fault positions by running
/// the program itself; each lookup is assumed to fault on its own.
pub fn observe_lookups(
    t: &Target,
    victim: &PageAccessProfile,
    reference_inputs: &Inputs,
    watched: &[WatchedLookup],
    opts: &SimOptions,
) -> Result<Vec<bool>> {
    let pages = t.page_tables()?;
    let opts = SimOptions {
        record_trace: false,
        log_accesses: true,
        ..*opts
    };
    let r = simulate_with(t.tree, &pages, t.plan, reference_inputs, &opts)?;
    if r.profile.len() != victim.len() {
        return Err(Error::AttackParse {
            offset: r.profile.len().min(victim.len()),
            msg: "victim profile length differs from the reference run".into(),
        });
    }
    let mut out = Vec::with_capacity(watched.len());
    let mut cursor = 0usize;
    for wl in watched {
        let acc = r.accesses[cursor..]
            .iter()
            .position(|a| a.object == wl.table)
            .map(|p| p + cursor)
            .ok_or_else(|| Error::AttackParse {
                offset: victim.len(),
                msg: format!("no lookup of `{}` in the reference run", wl.table),
            })?;
        cursor = acc + 1;
        let step = r.accesses[acc].step;
        let fi = r
            .fault_steps
            .iter()
            .rposition(|&s| s == step)
            .ok_or_else(|| Error::AttackParse {
                offset: 0,
                msg: format!("lookup of `{}` at step {step} does not fault", wl.table),
            })?;
        let o = t.tree.object_id(&wl.table).expect("watched table exists");
        let lower_page = pages.data_page(o, 0);
        out.push(victim.faults[fi] == lower_page);
    }
    Ok(out)
}

/// Chosen-plaintext attack on split tables. With `adaptive`, each run picks
/// the plaintext bytes that best split the remaining candidates.
pub fn attack_table(
    t: &Target,
    key: &str,
    plaintext: &str,
    victim_key: &[i64],
    watched: &[WatchedLookup],
    runs: usize,
    adaptive: bool,
    opts: &SimOptions,
) -> Result<TableAttackReport> {
    let pt_len = t
        .tree
        .object_id(plaintext)
        .map(|o| t.tree.objects[o as usize].len.max(1) as usize)
        .ok_or_else(|| Error::Input(format!("unknown plaintext `{plaintext}`")))?;
    let mut obs: Vec<Vec<(u8, bool)>> = vec![Vec::new(); watched.len()];
    let pages = t.page_tables()?;
    let quiet = SimOptions {
        record_trace: false,
        ..*opts
    };
    for run in 0..runs.max(1) {
        let mut pt = vec![0i64; pt_len];
        if adaptive {
            for (m, wl) in watched.iter().enumerate() {
                let c = table_candidates(wl.boundary, &obs[m]);
                pt[wl.byte] = next_plaintext(wl.boundary, &c) as i64;
            }
        } else {
            for (j, b) in pt.iter_mut().enumerate() {
                *b = ((run * 37 + j * 11) % 256) as i64;
            }
        }
        let mut victim = Inputs::new();
        victim.insert(key.to_string(), victim_key.to_vec());
        victim.insert(plaintext.to_string(), pt.clone());
        let prof = simulate_with(t.tree, &pages, t.plan, &victim, &quiet)?.profile;
        let mut reference = victim.clone();
        reference.insert(key.to_string(), vec![0; victim_key.len()]);
        let sides = observe_lookups(t, &prof, &reference, watched, opts)?;
        for (m, wl) in watched.iter().enumerate() {
            obs[m].push((pt[wl.byte] as u8, sides[m]));
        }
    }
    let mut per_byte: std::collections::BTreeMap<usize, Vec<u8>> =
        std::collections::BTreeMap::new();
    for (m, wl) in watched.iter().enumerate() {
        let c = table_candidates(wl.boundary, &obs[m]);
        per_byte
            .entry(wl.byte)
            .and_modify(|prev| prev.retain(|k| c.contains(k)))
            .or_insert(c);
    }
    let leaked_bits = per_byte
        .values()
        .map(|c| (256.0 / c.len().max(1) as f64).log2())
        .sum();
    Ok(TableAttackReport {
        candidates: per_byte.into_iter().collect(),
        runs: runs.max(1),
        leaked_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use MulKind::*;

    fn vp(v: &[u64]) -> PageAccessProfile {
        PageAccessProfile {
            faults: v.iter().map(|&p| VirtualPage(p)).collect(),
        }
    }

    #[test]
    fn partition_entropy_of_even_split() {
        let a = vp(&[1, 2]);
        let b = vp(&[1, 3]);
        let ps = vec![
            a.clone(),
            a.clone(),
            a.clone(),
            a,
            b.clone(),
            b.clone(),
            b.clone(),
            b,
        ];
        let r = partition(&ps).unwrap();
        assert_eq!(r.classes.len(), 2);
        assert!((r.mutual_information - 1.0).abs() < 1e-12);
        assert!((r.max_leakage - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_form_reproduces_aes_figure() {
        let bits = 8.0 * (256.0f64 / 28.0).log2();
        assert!((bits - 25.54).abs() < 0.01);
    }

    #[test]
    fn table_candidate_arithmetic() {
        assert_eq!(table_candidates(0x1c, &[(0x00, true)]).len(), 28);
        assert_eq!(table_candidates(0x1c, &[(0x00, false)]).len(), 228);
        assert!(table_candidates(0x1c, &[(0x00, false)]).contains(&0xff));
        assert_eq!(table_candidates(0, &[(0x00, false)]).len(), 256);
    }

    #[test]
    fn eddsa_grammar() {
        // P1=1 (ec_mul), P2=2 (dup), P3=3 (test_bit); bits 1,0,1,1.
        let pages = EddsaPages {
            ec_mul: VirtualPage(1),
            dup: VirtualPage(2),
            test_bit: VirtualPage(3),
        };
        let mut f = vec![1, 9, 2, 1];
        for (n, b) in [1, 0, 1, 1].iter().enumerate() {
            f.extend([3, 1]);
            if *b == 1 {
                f.extend([2, 1]);
            }
            if n < 3 {
                f.extend([2, 9, 1]);
            }
        }
        assert_eq!(attack_eddsa(&vp(&f), &pages).unwrap(), vec![1, 0, 1, 1]);
        assert!(attack_eddsa(&vp(&[1, 3, 1]), &pages).is_err());
    }

    /// Brute-force oracle for the window DP.
    fn skeleton_of(bits: &[u8], w: usize) -> Vec<MulKind> {
        let n = bits.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            if bits[i] == 0 {
                out.push(Square);
                i += 1;
            } else {
                let span = w.min(n - i);
                let l = (1..=span).rev().find(|&l| bits[i + l - 1] == 1).unwrap();
                out.extend(std::iter::repeat_n(Square, l));
                out.push(Multiply);
                i += l;
            }
        }
        out
    }

    #[test]
    fn window_dp_matches_enumeration() {
        for w in 1..=3usize {
            let n = 9;
            let mut counts: HashMap<Vec<MulKind>, usize> = HashMap::new();
            for x in 0..1u32 << n {
                let bits: Vec<u8> = (0..n).map(|k| (x >> (n - 1 - k) & 1) as u8).collect();
                *counts.entry(skeleton_of(&bits, w)).or_default() += 1;
            }
            for (sk, c) in counts {
                let got = consistent_exponents_log2(&sk, w as u32, n);
                assert!((got - (c as f64).log2()).abs() < 1e-9, "w={w} {sk:?}");
            }
        }
    }

    #[test]
    fn powm_w1_reads_exponent() {
        let pages = PowmPages {
            powm: VirtualPage(1),
            mul_mod: VirtualPage(2),
            set_cond: VirtualPage(3),
        };
        // Precompute g^2, then d = 1001: S M S S S M.
        let mut f = vec![1, 2, 1];
        for k in [Square, Multiply, Square, Square, Square, Multiply] {
            if k == Multiply {
                f.extend([3, 1]);
            }
            f.extend([2, 1]);
        }
        let r = attack_powm(&vp(&f), &pages, 1, 4).unwrap();
        assert_eq!(r.exponent, Some(vec![1, 0, 0, 1]));
        assert!(r.remaining_bits.abs() < 1e-12);
    }
}
