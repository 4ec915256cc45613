//! Contractual execution: the enclave pledges a bucket of pages, the CPU
//! reports faults on them to the enclave's own handler instead of the OS,
//! and the handler either stops at once (naive) or keeps stepping to the
//! end of the schedule (fake execution).

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exectree::{check_balanced, BalanceCheck, ExecTree};
use crate::ir::{Op, PAD_DATA};
use crate::layout::{handler_page, HANDLER};
use crate::leakage::{enumerate_domain, SecretDomain};
use crate::model::{MemoryLayout, PageAccessProfile, Region, VirtualPage};
use crate::simulate::{simulate_with, Inputs, PageTables, SimOptions, SimulationResult, Trap};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub bucket: BTreeSet<VirtualPage>,
    pub code_pages: BTreeSet<VirtualPage>,
    /// Data pages that hold no code.
    pub data_pages: BTreeSet<VirtualPage>,
    pub reserved_handler_page: VirtualPage,
    pub total_schedule_steps: u64,
}

impl Contract {
    /// Bucket size as (code pages, data pages), handler page excluded.
    pub fn bucket_size(&self) -> (usize, usize) {
        (self.code_pages.len(), self.data_pages.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsStrategy {
    Honest,
    /// Evict `page` just before logical step `step`.
    Steal {
        page: VirtualPage,
        step: u64,
    },
    StealMany(Vec<(VirtualPage, u64)>),
}

impl OsStrategy {
    fn steals(&self) -> Vec<(VirtualPage, u64)> {
        match self {
            OsStrategy::Honest => vec![],
            OsStrategy::Steal { page, step } => vec![(*page, *step)],
            OsStrategy::StealMany(v) => v.clone(),
        }
    }
}

impl std::str::FromStr for OsStrategy {
    type Err = Error;

    /// `honest` or `steal:PAGE@STEP`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "honest" {
            return Ok(OsStrategy::Honest);
        }
        let bad = || {
            Error::Input(format!(
                "bad strategy `{s}`; expected honest or steal:PAGE@STEP"
            ))
        };
        let rest = s.strip_prefix("steal:").ok_or_else(bad)?;
        let (p, st) = rest.split_once('@').ok_or_else(bad)?;
        Ok(OsStrategy::Steal {
            page: VirtualPage(p.parse().map_err(|_| bad())?),
            step: st.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    NaiveTerminate,
    FakeExecute,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" | "naive-terminate" => Ok(Policy::NaiveTerminate),
            "fake" | "fake-execute" => Ok(Policy::FakeExecute),
            _ => Err(Error::Input(format!("unknown policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitKind {
    Normal,
    AbortOnEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnclaveObservable {
    pub os_visible_faults: PageAccessProfile,
    pub termination_step: u64,
    pub exit_kind: ExitKind,
}

/// Pages a balanced, laid-out program may touch at any level.
pub fn derive_contract(tree: &ExecTree, layout: &MemoryLayout) -> Result<Contract> {
    if let BalanceCheck::Unbalanced { witness } = check_balanced(tree) {
        return Err(Error::NotBalanced(format!("{witness:?}")));
    }
    let pages = PageTables::new(tree, layout)?;
    let mut code = BTreeSet::new();
    let mut data = BTreeSet::new();
    let pad = tree.object_id(PAD_DATA);
    for lv in &tree.levels {
        for &b in lv {
            for i in &tree.block(b).instrs {
                code.insert(pages.code_page(i));
                let obj = match i.op {
                    Op::Load { obj, .. } | Op::Store { obj, .. } => Some(obj),
                    Op::Nop { touch: true } => pad,
                    _ => None,
                };
                if let Some(o) = obj {
                    data.extend(layout.pages_of(Region::Data, &tree.objects[o as usize].name));
                }
            }
        }
    }
    let handler = layout
        .extents(Region::Code, HANDLER)
        .and_then(|e| e.first())
        .map(|e| e.page)
        .unwrap_or(VirtualPage(handler_page(tree)));
    code.remove(&handler);
    data.remove(&handler);
    let data_pages: BTreeSet<VirtualPage> = data.difference(&code).copied().collect();
    let mut bucket: BTreeSet<VirtualPage> = code.union(&data_pages).copied().collect();
    bucket.insert(handler);
    let total = tree
        .levels
        .iter()
        .map(|lv| tree.block(lv[0]).instrs.len() as u64)
        .sum();
    Ok(Contract {
        bucket,
        code_pages: code,
        data_pages,
        reserved_handler_page: handler,
        total_schedule_steps: total,
    })
}

/// Faults the OS services before entry: one load per bucket page.
fn pre_contract(c: &Contract) -> PageAccessProfile {
    PageAccessProfile {
        faults: c.bucket.iter().copied().collect(),
    }
}

fn validate(c: &Contract, strategy: &OsStrategy) -> Result<()> {
    for (p, s) in strategy.steals() {
        if s > c.total_schedule_steps {
            return Err(Error::Input(format!(
                "steal step {s} outside [0, {}]",
                c.total_schedule_steps
            )));
        }
        if !c.bucket.contains(&p) {
            return Err(Error::Input(format!(
                "steal of page {} outside the bucket",
                p.0
            )));
        }
    }
    Ok(())
}

/// Observable of a run once the first violation step (if any) is known.
fn observable(
    c: &Contract,
    strategy: &OsStrategy,
    violation: Option<u64>,
    policy: Policy,
) -> EnclaveObservable {
    let faults = pre_contract(c);
    // Stealing the handler page is caught at the next context entry.
    let abort = strategy
        .steals()
        .into_iter()
        .filter(|(p, _)| *p == c.reserved_handler_page)
        .map(|(_, s)| s)
        .min();
    if let Some(s) = abort {
        if violation.is_none_or(|v| s <= v) || policy == Policy::FakeExecute {
            return EnclaveObservable {
                os_visible_faults: faults,
                termination_step: s,
                exit_kind: ExitKind::AbortOnEntry,
            };
        }
    }
    let termination_step = match (policy, violation) {
        (Policy::NaiveTerminate, Some(v)) => v,
        _ => c.total_schedule_steps,
    };
    EnclaveObservable {
        os_visible_faults: faults,
        termination_step,
        exit_kind: ExitKind::Normal,
    }
}

/// Runs one input under a contract and an OS strategy.
pub fn run_contractual(
    tree: &ExecTree,
    layout: &MemoryLayout,
    contract: &Contract,
    inputs: &Inputs,
    strategy: &OsStrategy,
    policy: Policy,
) -> Result<(SimulationResult, EnclaveObservable)> {
    validate(contract, strategy)?;
    let pages = PageTables::new(tree, layout)?;
    let opts = SimOptions {
        record_trace: true,
        ..Default::default()
    };
    let mut r = simulate_with(tree, &pages, None, inputs, &opts)?;
    let steals: Vec<(VirtualPage, u64)> = strategy
        .steals()
        .into_iter()
        .filter(|(p, _)| *p != contract.reserved_handler_page)
        .collect();
    let violation = r
        .trace
        .iter()
        .find(|e| steals.iter().any(|&(p, s)| e.page == p && e.step >= s))
        .map(|e| e.step);
    let obs = observable(contract, strategy, violation, policy);
    // Inside the enclave the bucket is resident: the OS sees only the
    // pre-contract loads.
    r.profile = obs.os_visible_faults.clone();
    r.fault_steps.clear();
    r.faults = r.profile.len();
    if obs.exit_kind == ExitKind::AbortOnEntry {
        r.trap = Some(Trap {
            step: obs.termination_step,
            block: r.path.first().copied().unwrap_or(tree.root),
            message: "handler page unmapped at context entry".into(),
        });
    } else if let (Policy::NaiveTerminate, Some(v)) = (policy, violation) {
        r.trap = Some(Trap {
            step: v,
            block: r.path.last().copied().unwrap_or(tree.root),
            message: "contract violation reported; enclave terminated".into(),
        });
        r.steps = v;
    } else {
        r.steps = contract.total_schedule_steps;
    }
    Ok((r, obs))
}

/// Sorted access steps of each bucket page in one run.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccessSets {
    pages: Vec<VirtualPage>,
    steps: Vec<Vec<u64>>,
}

impl AccessSets {
    pub fn build(contract: &Contract, r: &SimulationResult) -> Self {
        let pages: Vec<VirtualPage> = contract.bucket.iter().copied().collect();
        let mut steps = vec![Vec::new(); pages.len()];
        for e in &r.trace {
            if let Ok(k) = pages.binary_search(&e.page) {
                if steps[k].last() != Some(&e.step) {
                    steps[k].push(e.step);
                }
            }
        }
        AccessSets { pages, steps }
    }

    /// First access to `page` at or after `step`.
    pub fn next_access(&self, page: VirtualPage, step: u64) -> Option<u64> {
        let k = self.pages.binary_search(&page).ok()?;
        let v = &self.steps[k];
        v.get(v.partition_point(|&s| s < step)).copied()
    }

    fn violation(&self, contract: &Contract, strategy: &OsStrategy) -> Option<u64> {
        strategy
            .steals()
            .into_iter()
            .filter(|(p, _)| *p != contract.reserved_handler_page)
            .filter_map(|(p, s)| self.next_access(p, s))
            .min()
    }
}

/// Strategies to sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sweep {
    /// Honest plus a steal of every bucket page at every step.
    Grid,
    Strategies(Vec<OsStrategy>),
}

impl Sweep {
    pub fn len(&self, contract: &Contract) -> u64 {
        match self {
            Sweep::Grid => 1 + contract.bucket.len() as u64 * (contract.total_schedule_steps + 1),
            Sweep::Strategies(v) => v.len() as u64,
        }
    }

    pub fn is_empty(&self, contract: &Contract) -> bool {
        self.len(contract) == 0
    }

    fn for_each(&self, contract: &Contract, mut f: impl FnMut(&OsStrategy) -> bool) {
        match self {
            Sweep::Grid => {
                if !f(&OsStrategy::Honest) {
                    return;
                }
                for &page in &contract.bucket {
                    for step in 0..=contract.total_schedule_steps {
                        if !f(&OsStrategy::Steal { page, step }) {
                            return;
                        }
                    }
                }
            }
            Sweep::Strategies(v) => {
                for s in v {
                    if !f(s) {
                        return;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistinguishingPoint {
    pub strategy: OsStrategy,
    pub secret0: usize,
    pub secret1: usize,
    pub observable0: EnclaveObservable,
    pub observable1: EnclaveObservable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndistinguishabilityReport {
    pub policy: Policy,
    pub secrets: usize,
    pub strategies: u64,
    /// Classes of secrets that some swept strategy tells apart.
    pub secret_classes: usize,
    /// Whether every abort-on-entry strategy looks the same for all secrets.
    pub aborts_secret_independent: bool,
    pub indistinguishable: bool,
    pub distinguishing: Option<DistinguishingPoint>,
}

/// Every single-page steal: each bucket page at each step, plus honest.
pub fn steal_grid(contract: &Contract) -> Vec<OsStrategy> {
    let mut out = Vec::new();
    Sweep::Grid.for_each(contract, |s| {
        out.push(s.clone());
        true
    });
    out
}

/// Sweeps the secret domain against `sweep`. Each input is simulated once.
/// Under the full grid a secret's responses are fixed by the access steps
/// of each bucket page, so those are what get compared.
pub fn check_contract_indistinguishability(
    tree: &ExecTree,
    layout: &MemoryLayout,
    contract: &Contract,
    dom: &SecretDomain,
    sweep: &Sweep,
    policy: Policy,
) -> Result<IndistinguishabilityReport> {
    if let Sweep::Strategies(v) = sweep {
        for s in v {
            validate(contract, s)?;
        }
    }
    let inputs = enumerate_domain(tree, dom)?;
    let pages = PageTables::new(tree, layout)?;
    let opts = SimOptions {
        record_trace: true,
        ..Default::default()
    };
    let run = |inp: &Inputs| -> Result<AccessSets> {
        let r = simulate_with(tree, &pages, None, inp, &opts)?;
        if r.trap.is_none() && r.steps != contract.total_schedule_steps {
            return Err(Error::Internal(format!(
                "run took {} steps, schedule has {}",
                r.steps, contract.total_schedule_steps
            )));
        }
        Ok(AccessSets::build(contract, &r))
    };
    let handler = contract.reserved_handler_page;
    // (response fingerprint, abort fingerprint) per secret.
    let prints: Vec<(u64, u64)> = inputs
        .par_iter()
        .map(|inp| -> Result<(u64, u64)> {
            let acc = run(inp)?;
            let mut h = DefaultHasher::new();
            let mut aborts = DefaultHasher::new();
            let resp = |st: &OsStrategy| {
                let o = observable(contract, st, acc.violation(contract, st), policy);
                (o.termination_step, o.exit_kind)
            };
            observable(contract, &OsStrategy::Honest, None, policy)
                .os_visible_faults
                .hash(&mut h);
            match sweep {
                Sweep::Grid => {
                    resp(&OsStrategy::Honest).hash(&mut h);
                    // A steal's response is constant between consecutive
                    // accesses to its page: hash the response as runs of
                    // (last step, response).
                    for (k, &page) in acc.pages.iter().enumerate() {
                        let ends: Vec<u64> = if page == handler {
                            (0..=contract.total_schedule_steps).collect()
                        } else {
                            let mut e: Vec<u64> = acc.steps[k]
                                .iter()
                                .copied()
                                .filter(|&x| x <= contract.total_schedule_steps)
                                .collect();
                            if e.last() != Some(&contract.total_schedule_steps) {
                                e.push(contract.total_schedule_steps);
                            }
                            e
                        };
                        let mut runs: Vec<(u64, (u64, ExitKind))> = Vec::new();
                        for end in ends {
                            let r = resp(&OsStrategy::Steal { page, step: end });
                            match runs.last_mut() {
                                Some(last) if last.1 == r => last.0 = end,
                                _ => runs.push((end, r)),
                            }
                        }
                        if page == handler {
                            runs.hash(&mut aborts);
                        } else {
                            runs.hash(&mut h);
                        }
                    }
                }
                Sweep::Strategies(_) => sweep.for_each(contract, |st| {
                    let r = resp(st);
                    if r.1 == ExitKind::AbortOnEntry {
                        r.hash(&mut aborts);
                    } else {
                        r.hash(&mut h);
                    }
                    true
                }),
            }
            Ok((h.finish(), aborts.finish()))
        })
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, (fp, _)) in prints.iter().enumerate() {
        groups.entry(*fp).or_insert(i);
    }
    let aborts_ok = prints.windows(2).all(|w| w[0].1 == w[1].1);
    let mut distinguishing = None;
    if groups.len() > 1 {
        let mut reps = groups.values().copied().collect::<Vec<_>>();
        reps.sort_unstable();
        let (i0, i1) = (reps[0], reps[1]);
        let (a0, a1) = (run(&inputs[i0])?, run(&inputs[i1])?);
        sweep.for_each(contract, |st| {
            let o0 = observable(contract, st, a0.violation(contract, st), policy);
            let o1 = observable(contract, st, a1.violation(contract, st), policy);
            if o0 != o1 {
                distinguishing = Some(DistinguishingPoint {
                    strategy: st.clone(),
                    secret0: i0,
                    secret1: i1,
                    observable0: o0,
                    observable1: o1,
                });
                return false;
            }
            true
        });
        if distinguishing.is_none() {
            return Err(Error::Internal(
                "fingerprints differ but no strategy separates them".into(),
            ));
        }
    }
    Ok(IndistinguishabilityReport {
        policy,
        secrets: inputs.len(),
        strategies: sweep.len(contract),
        secret_classes: groups.len(),
        aborts_secret_independent: aborts_ok,
        indistinguishable: groups.len() <= 1 && aborts_ok,
        distinguishing,
    })
}

impl Ord for EnclaveObservable {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (
            self.termination_step,
            self.exit_kind,
            &self.os_visible_faults.faults,
        )
            .cmp(&(o.termination_step, o.exit_kind, &o.os_visible_faults.faults))
    }
}

impl PartialOrd for EnclaveObservable {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exectree::{balance, build_execution_tree, BuildOptions};
    use crate::frontend::{label_sensitivity, parse};
    use crate::layout::build_layout;

    fn compile(src: &str, ps: u64) -> (ExecTree, MemoryLayout) {
        let t = balance(
            &build_execution_tree(
                &label_sensitivity(&parse(src).unwrap()).unwrap(),
                &BuildOptions::default(),
            )
            .unwrap(),
        );
        let l = build_layout(&t, ps).unwrap();
        (t, l)
    }

    const SPLIT: &str =
        "#pragma place t at 3:48\n#pragma place s at 1:32\n#pragma place y at 1:40\n\
        secret int<3> s; int<32> t[8] = {1,2,3,4,5,6,7,8}; output int y;\n\
        void main() { y = 1; y = 2; y = t[s]; y = y + 1; }";

    fn input(s: i64) -> Inputs {
        Inputs::from([("s".to_string(), vec![s])])
    }

    #[test]
    fn single_page_program_bucket() {
        let (t, l) = compile(
            "#pragma place main at 1:0\n#pragma place y at 1:2048\noutput int y; void main() { y = 1; }",
            4096,
        );
        let c = derive_contract(&t, &l).unwrap();
        assert_eq!(c.bucket, BTreeSet::from([VirtualPage(0), VirtualPage(1)]));
        assert_eq!(c.bucket_size(), (1, 0));
    }

    #[test]
    fn unbalanced_is_rejected() {
        let src = "secret int s; int a; void main() { if (s) { a = 1; a = 2; } }";
        let t = build_execution_tree(
            &label_sensitivity(&parse(src).unwrap()).unwrap(),
            &BuildOptions::default(),
        )
        .unwrap();
        let l = build_layout(&t, 4096).unwrap();
        assert!(matches!(
            derive_contract(&t, &l),
            Err(Error::NotBalanced(_))
        ));
    }

    #[test]
    fn honest_run_matches_plain_simulation() {
        let (t, l) = compile(SPLIT, 64);
        let c = derive_contract(&t, &l).unwrap();
        let (r, obs) = run_contractual(
            &t,
            &l,
            &c,
            &input(5),
            &OsStrategy::Honest,
            Policy::FakeExecute,
        )
        .unwrap();
        let plain =
            crate::simulate::simulate(&t, &l, None, &input(5), &SimOptions::default()).unwrap();
        assert_eq!(r.outputs, plain.outputs);
        assert_eq!(obs.termination_step, c.total_schedule_steps);
        assert_eq!(obs.exit_kind, ExitKind::Normal);
        assert_eq!(
            obs.os_visible_faults.faults,
            c.bucket.iter().copied().collect::<Vec<_>>()
        );
    }

    #[test]
    fn naive_termination_is_an_oracle() {
        let (t, l) = compile(SPLIT, 64);
        let c = derive_contract(&t, &l).unwrap();
        let steal = OsStrategy::Steal {
            page: VirtualPage(4),
            step: 0,
        };
        let (_, lo) =
            run_contractual(&t, &l, &c, &input(1), &steal, Policy::NaiveTerminate).unwrap();
        let (_, hi) =
            run_contractual(&t, &l, &c, &input(6), &steal, Policy::NaiveTerminate).unwrap();
        assert_ne!(lo, hi);
        let (_, flo) = run_contractual(&t, &l, &c, &input(1), &steal, Policy::FakeExecute).unwrap();
        let (_, fhi) = run_contractual(&t, &l, &c, &input(6), &steal, Policy::FakeExecute).unwrap();
        let (_, honest) = run_contractual(
            &t,
            &l,
            &c,
            &input(6),
            &OsStrategy::Honest,
            Policy::FakeExecute,
        )
        .unwrap();
        assert_eq!(flo, fhi);
        assert_eq!(fhi, honest);
    }

    #[test]
    fn stealing_the_handler_aborts_on_entry() {
        let (t, l) = compile(SPLIT, 64);
        let c = derive_contract(&t, &l).unwrap();
        let steal = OsStrategy::Steal {
            page: c.reserved_handler_page,
            step: 2,
        };
        for p in [Policy::FakeExecute, Policy::NaiveTerminate] {
            let (r, obs) = run_contractual(&t, &l, &c, &input(3), &steal, p).unwrap();
            assert_eq!(obs.exit_kind, ExitKind::AbortOnEntry);
            assert_eq!(obs.termination_step, 2);
            assert!(r.trap.is_some());
        }
    }

    #[test]
    fn sweep_fast_path_agrees_with_full_runs() {
        let (t, l) = compile(SPLIT, 64);
        let c = derive_contract(&t, &l).unwrap();
        let dom = SecretDomain::exhaustive(3);
        for policy in [Policy::FakeExecute, Policy::NaiveTerminate] {
            let grid = check_contract_indistinguishability(&t, &l, &c, &dom, &Sweep::Grid, policy)
                .unwrap();
            let list = Sweep::Strategies(steal_grid(&c));
            let explicit =
                check_contract_indistinguishability(&t, &l, &c, &dom, &list, policy).unwrap();
            assert_eq!(grid.secrets, 8);
            assert_eq!(grid.strategies, explicit.strategies);
            assert_eq!(grid.secret_classes, explicit.secret_classes);
            assert!(grid.aborts_secret_independent);
            if policy == Policy::FakeExecute {
                assert!(grid.indistinguishable, "{grid:?}");
                assert_eq!(grid.secret_classes, 1);
            } else {
                assert!(!grid.indistinguishable);
                assert_eq!(grid.secret_classes, 2);
                let d = grid.distinguishing.unwrap();
                let (_, o0) =
                    run_contractual(&t, &l, &c, &input(d.secret0 as i64), &d.strategy, policy)
                        .unwrap();
                let (_, o1) =
                    run_contractual(&t, &l, &c, &input(d.secret1 as i64), &d.strategy, policy)
                        .unwrap();
                assert_eq!(o0, d.observable0);
                assert_eq!(o1, d.observable1);
                assert_ne!(o0, o1);
            }
        }
    }

    #[test]
    fn corpus_buckets() {
        for (name, size) in [
            ("aes", (3, 3)),
            ("powm", (21, 1)),
            ("eddsa", (19, 1)),
            ("cast_openssl", (1, 2)),
        ] {
            let c = crate::corpus::case(name).unwrap();
            let t = balance(&c.compile().unwrap());
            let l = build_layout(&t, 4096).unwrap();
            assert_eq!(
                derive_contract(&t, &l).unwrap().bucket_size(),
                size,
                "{name}"
            );
        }
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("honest".parse::<OsStrategy>().unwrap(), OsStrategy::Honest);
        assert_eq!(
            "steal:3@17".parse::<OsStrategy>().unwrap(),
            OsStrategy::Steal {
                page: VirtualPage(3),
                step: 17
            }
        );
        assert!("steal:x".parse::<OsStrategy>().is_err());
    }
}
