//! Step-accurate interpreter of execution trees, with or without a
//! multiplexing plan, emitting the page access trace the OS would see.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exectree::{BlockId, ExecTree, Succ};
use crate::frontend::ast::Qualifier;
use crate::ir::{eval_binop, eval_unop, wrap, Instr, ObjId, Op, PAD_DATA};
use crate::model::{
    AccessEvent, AccessKind, AdversaryModel, MemoryLayout, PageAccessProfile, PigeonholeState,
    Region, VirtualPage,
};
use crate::transform::{CopyCounters, CopyKind, CopyOp, Group, Plan};

/// Values bound to global objects by name.
pub type Inputs = BTreeMap<String, Vec<i64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub model: AdversaryModel,
    pub record_trace: bool,
    /// Record every real data access with its element index.
    pub log_accesses: bool,
    pub max_steps: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            model: AdversaryModel::Pigeonhole,
            record_trace: true,
            log_accesses: false,
            max_steps: 200_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trap {
    pub step: u64,
    pub block: BlockId,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataAccess {
    pub step: u64,
    pub object: String,
    pub index: u64,
    pub write: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub outputs: BTreeMap<String, Vec<i64>>,
    pub store: BTreeMap<String, Vec<i64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<AccessEvent>,
    pub profile: PageAccessProfile,
    /// Step of each fault in `profile`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub fault_steps: Vec<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub accesses: Vec<DataAccess>,
    pub steps: u64,
    pub copy_ops: CopyCounters,
    pub faults: usize,
    pub trap: Option<Trap>,
    /// Blocks executed, in order.
    pub path: Vec<BlockId>,
}

impl SimulationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Page of every code word and every data element, resolved once.
#[derive(Debug, Clone)]
pub struct PageTables {
    code: Vec<Vec<VirtualPage>>,
    data: Vec<Vec<VirtualPage>>,
}

impl PageTables {
    pub fn new(tree: &ExecTree, layout: &MemoryLayout) -> Result<Self> {
        let mut code = Vec::with_capacity(tree.code_objects.len());
        for c in &tree.code_objects {
            let words = c.size.div_ceil(4).max(1);
            if !layout.is_mapped(Region::Code, &c.name) {
                code.push(Vec::new());
                continue;
            }
            code.push(
                (0..words)
                    .map(|w| {
                        layout.page_of(Region::Code, &c.name, (w * 4).min(c.size.saturating_sub(1)))
                    })
                    .collect::<Result<_>>()?,
            );
        }
        let mut data = Vec::with_capacity(tree.objects.len());
        for o in &tree.objects {
            if !layout.is_mapped(Region::Data, &o.name) {
                data.push(Vec::new());
                continue;
            }
            data.push(
                (0..o.len.max(1))
                    .map(|i| layout.page_of(Region::Data, &o.name, i * o.elem_bytes))
                    .collect::<Result<_>>()?,
            );
        }
        let pt = PageTables { code, data };
        pt.check(tree)?;
        Ok(pt)
    }

    fn check(&self, tree: &ExecTree) -> Result<()> {
        for b in &tree.blocks {
            for i in &b.instrs {
                if self.code[i.loc.obj as usize].is_empty() {
                    return Err(Error::Layout(format!(
                        "code object `{}` is not mapped",
                        tree.code_objects[i.loc.obj as usize].name
                    )));
                }
                let obj = match i.op {
                    Op::Nop { touch: true } => tree.object_id(PAD_DATA),
                    op => op.data_access().map(|a| a.0),
                };
                if let Some(o) = obj {
                    if self.data[o as usize].is_empty() {
                        return Err(Error::Layout(format!(
                            "data object `{}` is not mapped",
                            tree.objects[o as usize].name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn code_page(&self, i: &Instr) -> VirtualPage {
        let t = &self.code[i.loc.obj as usize];
        t[((i.loc.offset / 4) as usize).min(t.len() - 1)]
    }

    pub fn data_page(&self, obj: ObjId, idx: usize) -> VirtualPage {
        self.data[obj as usize][idx]
    }
}

/// Turns raw inputs into the initial store, checking names and bounds.
pub fn initial_store(tree: &ExecTree, inputs: &Inputs) -> Result<Vec<Vec<i64>>> {
    for name in inputs.keys() {
        match tree.object_id(name) {
            Some(o)
                if matches!(
                    tree.objects[o as usize].qual,
                    Qualifier::Secret | Qualifier::Public
                ) => {}
            Some(_) => {
                return Err(Error::Input(format!(
                    "`{name}` is not a secret or public input"
                )))
            }
            None => return Err(Error::Input(format!("unknown input `{name}`"))),
        }
    }
    let mut store = Vec::with_capacity(tree.objects.len());
    for o in &tree.objects {
        let mut v = vec![0i64; o.len.max(1) as usize];
        for (d, s) in v.iter_mut().zip(&o.init) {
            *d = *s;
        }
        if let Some(given) = inputs.get(&o.name) {
            if given.len() as u64 > o.len.max(1) {
                return Err(Error::Input(format!(
                    "`{}` takes {} elements, got {}",
                    o.name,
                    o.len.max(1),
                    given.len()
                )));
            }
            for (d, s) in v.iter_mut().zip(given) {
                *d = mask(o.store_mask(), *s);
            }
        } else if o.qual == Qualifier::Secret && o.init.is_empty() {
            return Err(Error::Input(format!("secret `{}` is not bound", o.name)));
        }
        store.push(v);
    }
    Ok(store)
}

fn mask(m: Option<i64>, v: i64) -> i64 {
    match m {
        Some(m) => v & m,
        None => v,
    }
}

/// Parses a CLI value for `name`: a decimal or hex scalar, a comma list, or
/// one big-endian hex number spread over the elements (element 0 most
/// significant).
pub fn parse_value(tree: &ExecTree, name: &str, text: &str) -> Result<Vec<i64>> {
    let o = tree
        .object_id(name)
        .map(|o| &tree.objects[o as usize])
        .ok_or_else(|| Error::Input(format!("unknown input `{name}`")))?;
    let text = text.trim();
    let bad = || Error::Input(format!("cannot parse value `{text}` for `{name}`"));
    if text.contains(',') {
        return text
            .split(',')
            .map(|t| parse_int(t.trim()).ok_or_else(bad))
            .collect();
    }
    let hex = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X"));
    match hex {
        Some(h) if o.len > 1 => {
            let bits = o.width.map(|w| w as u64).unwrap_or(o.elem_bytes * 8);
            let digits: Vec<u8> = h
                .chars()
                .filter(|c| *c != '_')
                .map(|c| c.to_digit(16).map(|d| d as u8))
                .collect::<Option<_>>()
                .ok_or_else(bad)?;
            // Bit string, most significant first, left-padded to the object size.
            let mut bitv: Vec<bool> = digits
                .iter()
                .flat_map(|d| (0..4).rev().map(move |k| d >> k & 1 == 1))
                .collect();
            let total = (bits * o.len) as usize;
            if bitv.len() > total {
                let extra = bitv.len() - total;
                if bitv[..extra].iter().any(|&b| b) {
                    return Err(Error::Input(format!(
                        "value for `{name}` exceeds {total} bits"
                    )));
                }
                bitv.drain(..extra);
            }
            let mut full = vec![false; total - bitv.len()];
            full.extend(bitv);
            Ok(full
                .chunks(bits as usize)
                .map(|c| c.iter().fold(0i64, |a, &b| (a << 1) | b as i64))
                .collect())
        }
        _ => Ok(vec![parse_int(text).ok_or_else(bad)?]),
    }
}

fn parse_int(t: &str) -> Option<i64> {
    let (neg, t) = match t.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, t),
    };
    let v = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok()? as i64,
        None => t.parse::<i64>().ok()?,
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

/// Appends steps to the trace and the online fault observer.
struct Observer {
    model: AdversaryModel,
    record: bool,
    trace: Vec<AccessEvent>,
    ph: PigeonholeState,
    faults: Vec<VirtualPage>,
    fault_steps: Vec<u64>,
    step: u64,
    max_steps: u64,
    needed: Vec<VirtualPage>,
}

impl Observer {
    fn new(opts: &SimOptions) -> Self {
        Observer {
            model: opts.model,
            record: opts.record_trace,
            trace: Vec::new(),
            ph: PigeonholeState::default(),
            faults: Vec::new(),
            fault_steps: Vec::new(),
            step: 0,
            max_steps: opts.max_steps,
            needed: Vec::with_capacity(3),
        }
    }

    fn step(&mut self, code: VirtualPage, data: &[(AccessKind, VirtualPage)]) -> Result<()> {
        if self.step >= self.max_steps {
            return Err(Error::StepLimit(format!(
                "simulation exceeded {} steps",
                self.max_steps
            )));
        }
        if self.record {
            self.trace.push(AccessEvent {
                kind: AccessKind::CodeFetch,
                page: code,
                step: self.step,
            });
            for &(kind, page) in data {
                self.trace.push(AccessEvent {
                    kind,
                    page,
                    step: self.step,
                });
            }
        }
        if self.model == AdversaryModel::Pigeonhole {
            self.needed.clear();
            self.needed.push(code);
            self.needed.extend(data.iter().map(|d| d.1));
            let needed = std::mem::take(&mut self.needed);
            self.ph.retire(&needed, &mut self.faults)?;
            self.needed = needed;
            while self.fault_steps.len() < self.faults.len() {
                self.fault_steps.push(self.step);
            }
        }
        self.step += 1;
        Ok(())
    }
}

struct Machine<'a> {
    tree: &'a ExecTree,
    pages: &'a PageTables,
    regs: Vec<i64>,
    store: Vec<Vec<i64>>,
    width: u32,
    pad: Option<ObjId>,
}

enum Effect {
    None,
    Access(ObjId, usize, AccessKind),
    Trap(String),
}

impl Machine<'_> {
    /// Executes the semantics of one instruction and reports its data access.
    fn exec(&mut self, i: &Instr) -> Effect {
        let w = self.width;
        match i.op {
            Op::Const { dst, v } => self.regs[dst as usize] = wrap(v, w),
            Op::Mov { dst, src } => self.regs[dst as usize] = self.regs[src as usize],
            Op::Un { dst, op, a } => {
                self.regs[dst as usize] = eval_unop(op, self.regs[a as usize], w)
            }
            Op::Bin { dst, op, a, b } => {
                self.regs[dst as usize] =
                    eval_binop(op, self.regs[a as usize], self.regs[b as usize], w).unwrap_or(0)
            }
            Op::Select { dst, c, a, b } => {
                self.regs[dst as usize] = if self.regs[c as usize] != 0 {
                    self.regs[a as usize]
                } else {
                    self.regs[b as usize]
                }
            }
            Op::Load { dst, obj, idx } => {
                let k = match self.index(obj, idx) {
                    Ok(k) => k,
                    Err(m) => return Effect::Trap(m),
                };
                self.regs[dst as usize] = self.store[obj as usize][k];
                return Effect::Access(obj, k, AccessKind::DataRead);
            }
            Op::Store { obj, idx, src } => {
                let k = match self.index(obj, idx) {
                    Ok(k) => k,
                    Err(m) => return Effect::Trap(m),
                };
                let m = self.tree.objects[obj as usize].store_mask();
                self.store[obj as usize][k] = mask(m, self.regs[src as usize]);
                return Effect::Access(obj, k, AccessKind::DataWrite);
            }
            Op::Nop { touch: true } => {
                if let Some(p) = self.pad {
                    return Effect::Access(p, 0, AccessKind::DataRead);
                }
            }
            Op::Br { .. } | Op::Call | Op::Ret | Op::Nop { touch: false } => {}
        }
        Effect::None
    }

    fn index(&self, obj: ObjId, idx: Option<u32>) -> std::result::Result<usize, String> {
        let len = self.store[obj as usize].len() as i64;
        let k = idx.map(|r| self.regs[r as usize]).unwrap_or(0);
        if k < 0 || k >= len {
            Err(format!(
                "index {k} out of bounds for `{}` of length {len}",
                self.tree.objects[obj as usize].name
            ))
        } else {
            Ok(k as usize)
        }
    }

    fn next(&self, b: BlockId) -> Option<BlockId> {
        match self.tree.block(b).succ {
            Succ::Exit => None,
            Succ::Goto(t) => Some(t),
            Succ::Branch { cond, then_, else_ } => Some(if self.regs[cond as usize] != 0 {
                then_
            } else {
                else_
            }),
        }
    }
}

/// Runs the tree under its vanilla layout, or under `plan` when given (the
/// plan carries its own layout with staging).
pub fn simulate(
    tree: &ExecTree,
    layout: &MemoryLayout,
    plan: Option<&Plan>,
    inputs: &Inputs,
    opts: &SimOptions,
) -> Result<SimulationResult> {
    let layout = plan.map(|p| &p.layout).unwrap_or(layout);
    let pages = PageTables::new(tree, layout)?;
    simulate_with(tree, &pages, plan, inputs, opts)
}

/// Like [`simulate`], reusing precomputed page tables.
pub fn simulate_with(
    tree: &ExecTree,
    pages: &PageTables,
    plan: Option<&Plan>,
    inputs: &Inputs,
    opts: &SimOptions,
) -> Result<SimulationResult> {
    let store = initial_store(tree, inputs)?;
    let mut m = Machine {
        tree,
        pages,
        regs: vec![0; tree.nregs as usize],
        store,
        width: tree.int_width,
        pad: tree.object_id(PAD_DATA),
    };
    let mut obs = Observer::new(opts);
    let mut counters = CopyCounters::default();
    let mut path = Vec::new();
    let mut accesses: Vec<DataAccess> = Vec::new();
    let mut log = |step: u64, eff: &Effect| {
        if let Effect::Access(o, k, kind) = *eff {
            if opts.log_accesses && Some(o) != tree.object_id(PAD_DATA) {
                accesses.push(DataAccess {
                    step,
                    object: tree.objects[o as usize].name.clone(),
                    index: k as u64,
                    write: kind == AccessKind::DataWrite,
                });
            }
        }
    };
    let mut trap = None;
    let mut cur = Some(tree.root);
    let mut current_group: Option<usize> = None;
    let staged_lookup: Option<Vec<HashMap<ObjId, ()>>> = plan.map(|p| {
        p.staging
            .groups
            .iter()
            .map(|g| g.staged.iter().map(|&o| (o, ())).collect())
            .collect()
    });
    'run: while let Some(b) = cur {
        let blk = tree.block(b);
        path.push(b);
        let lvl = blk.level as usize - 1;
        match plan {
            None => {
                for ins in &blk.instrs {
                    let code = m.pages.code_page(ins);
                    let eff = m.exec(ins);
                    log(obs.step, &eff);
                    match eff {
                        Effect::Trap(msg) => {
                            trap = Some(Trap {
                                step: obs.step,
                                block: b,
                                message: msg,
                            });
                            break 'run;
                        }
                        Effect::Access(o, k, kind) => {
                            obs.step(code, &[(kind, m.pages.data_page(o, k))])?
                        }
                        Effect::None => obs.step(code, &[])?,
                    }
                }
            }
            Some(p) => {
                let gi = p.level_group[lvl] as usize;
                let g = &p.staging.groups[gi];
                let k = g
                    .levels
                    .iter()
                    .position(|&l| l as usize == lvl)
                    .expect("level in group");
                if current_group != Some(gi) {
                    current_group = Some(gi);
                    run_copies(&mut obs, p, &g.fetch, &mut counters)?;
                }
                let staged = &staged_lookup.as_ref().expect("plan lookup")[gi];
                let sa_code = p.staging.sa_code;
                let scan_all = g.scan_all[k];
                let stage_code = g.stage_code[k];
                if scan_all {
                    // Selector: reads the candidate index from SA_data page 0.
                    let code = if stage_code {
                        sa_code
                    } else {
                        blk.instrs
                            .first()
                            .map(|i| m.pages.code_page(i))
                            .unwrap_or(sa_code)
                    };
                    scan(&mut obs, code, g, None)?;
                }
                for ins in &blk.instrs {
                    let code = if stage_code {
                        sa_code
                    } else {
                        m.pages.code_page(ins)
                    };
                    let eff = m.exec(ins);
                    log(obs.step, &eff);
                    match eff {
                        Effect::Trap(msg) => {
                            trap = Some(Trap {
                                step: obs.step,
                                block: b,
                                message: msg,
                            });
                            break 'run;
                        }
                        Effect::Access(o, _, kind) if scan_all || staged.contains_key(&o) => {
                            scan(&mut obs, code, g, Some(kind))?
                        }
                        Effect::None if scan_all => scan(&mut obs, code, g, None)?,
                        Effect::Access(o, idx, kind) => {
                            obs.step(code, &[(kind, m.pages.data_page(o, idx))])?
                        }
                        Effect::None => obs.step(code, &[])?,
                    }
                }
                let last_of_group = g.levels.last().map(|&l| l as usize) == Some(lvl);
                if last_of_group {
                    run_copies(&mut obs, p, &g.copy_back, &mut counters)?;
                }
            }
        }
        cur = m.next(b);
    }
    let profile = PageAccessProfile { faults: obs.faults };
    let fault_steps = obs.fault_steps;
    let mut outputs = BTreeMap::new();
    let mut final_store = BTreeMap::new();
    for (o, v) in tree.objects.iter().zip(m.store) {
        if o.qual == Qualifier::Output {
            outputs.insert(o.name.clone(), v.clone());
        }
        if !o.name.starts_with("__") {
            final_store.insert(o.name.clone(), v);
        }
    }
    Ok(SimulationResult {
        outputs,
        store: final_store,
        faults: profile.len(),
        profile,
        fault_steps,
        accesses,
        trace: obs.trace,
        steps: obs.step,
        copy_ops: counters,
        trap,
        path,
    })
}

/// One micro-step per page of the group's staging scan set.
fn scan(obs: &mut Observer, code: VirtualPage, g: &Group, kind: Option<AccessKind>) -> Result<()> {
    let kind = kind.unwrap_or(AccessKind::DataRead);
    if g.scan_pages.is_empty() {
        return obs.step(code, &[]);
    }
    for &p in &g.scan_pages {
        obs.step(code, &[(kind, p)])?;
    }
    Ok(())
}

fn run_copies(
    obs: &mut Observer,
    p: &Plan,
    ops: &[CopyOp],
    counters: &mut CopyCounters,
) -> Result<()> {
    let sa = p.staging.sa_code;
    for op in ops {
        match op.kind {
            CopyKind::CodeFetch => counters.code_fetch += 1,
            CopyKind::DataFetch => counters.data_fetch += 1,
            CopyKind::CopyBack => counters.copy_back += 1,
        }
        for (s, d) in op.src_pages.iter().zip(&op.dst_pages) {
            obs.step(
                sa,
                &[(AccessKind::DataRead, *s), (AccessKind::DataWrite, *d)],
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exectree::{build_execution_tree, BuildOptions};
    use crate::frontend::{label_sensitivity, parse};
    use crate::layout::build_layout;
    use crate::model::observe_profile;

    fn compile(src: &str) -> ExecTree {
        build_execution_tree(
            &label_sensitivity(&parse(src).unwrap()).unwrap(),
            &BuildOptions::default(),
        )
        .unwrap()
    }

    const SPLIT: &str = "#pragma place t at 3:48\n\
        secret int s; int<32> t[8] = {1,2,3,4,5,6,7,8}; output int y;\n\
        void main() { y = t[s]; }";

    fn run(tree: &ExecTree, lay: &MemoryLayout, s: i64, model: AdversaryModel) -> SimulationResult {
        let inputs = Inputs::from([("s".to_string(), vec![s])]);
        let opts = SimOptions {
            model,
            ..Default::default()
        };
        simulate(tree, lay, None, &inputs, &opts).unwrap()
    }

    #[test]
    fn split_table_lookup_reveals_half() {
        let t = compile(SPLIT);
        let lay = build_layout(&t, 64).unwrap();
        let lo = run(&t, &lay, 2, AdversaryModel::Pigeonhole);
        let hi = run(&t, &lay, 6, AdversaryModel::Pigeonhole);
        assert_eq!(lo.outputs["y"], vec![3]);
        assert_eq!(hi.outputs["y"], vec![7]);
        assert!(lo.profile.faults.contains(&VirtualPage(3)));
        assert!(!lo.profile.faults.contains(&VirtualPage(4)));
        assert!(hi.profile.faults.contains(&VirtualPage(4)));
        assert!(!hi.profile.faults.contains(&VirtualPage(3)));
        assert_ne!(lo.profile, hi.profile);
        assert_eq!(
            observe_profile(&lo.trace, AdversaryModel::Pigeonhole).unwrap(),
            lo.profile
        );
        assert!(lo.steps as usize <= lo.trace.len());
    }

    #[test]
    fn infinite_memory_sees_nothing() {
        let t = compile(SPLIT);
        let lay = build_layout(&t, 64).unwrap();
        assert!(run(&t, &lay, 6, AdversaryModel::InfiniteMemory)
            .profile
            .is_empty());
    }

    #[test]
    fn out_of_bounds_traps_with_events_so_far() {
        let t = compile(SPLIT);
        let lay = build_layout(&t, 64).unwrap();
        let r = run(&t, &lay, 9, AdversaryModel::Pigeonhole);
        let trap = r.trap.expect("trap");
        assert!(trap.message.contains("out of bounds"));
        assert_eq!(trap.step, r.steps);
        assert!(!r.trace.is_empty());
    }

    #[test]
    fn secret_must_be_bound() {
        let t = compile(SPLIT);
        let lay = build_layout(&t, 64).unwrap();
        let e = simulate(&t, &lay, None, &Inputs::new(), &SimOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Input(_)));
    }

    #[test]
    fn hex_values_are_big_endian() {
        let t = compile("secret int<8> k[4]; void main() { }");
        assert_eq!(
            parse_value(&t, "k", "0x1A3E0946").unwrap(),
            vec![0x1A, 0x3E, 0x09, 0x46]
        );
        assert_eq!(parse_value(&t, "k", "0x46").unwrap(), vec![0, 0, 0, 0x46]);
        assert_eq!(parse_value(&t, "k", "1,2,3").unwrap(), vec![1, 2, 3]);
        let b = compile("secret int<1> k[4]; void main() { }");
        assert_eq!(parse_value(&b, "k", "0xA").unwrap(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn stores_truncate_to_width() {
        let t = compile("output int<8> y; void main() { y = 300; }");
        let lay = build_layout(&t, 64).unwrap();
        let r = simulate(&t, &lay, None, &Inputs::new(), &SimOptions::default()).unwrap();
        assert_eq!(r.outputs["y"], vec![300 & 0xff]);
    }

    #[test]
    fn plan_makes_profiles_secret_independent() {
        use crate::exectree::balance;
        use crate::transform::{plan_layout, PlanConfig};
        let src = "#pragma place t at 3:240\n\
            secret int s; int<32> t[8] = {1,2,3,4,5,6,7,8}; output int y;\n\
            void main() { if (s > 3) { y = t[s]; } else { y = t[s] + t[0]; y = y * 2; } }";
        let t = balance(&compile(src));
        let lay = build_layout(&t, 256).unwrap();
        let plan = plan_layout(&t, &lay, &PlanConfig::default()).unwrap();
        let mut profiles = Vec::new();
        for s in 0..8 {
            let inputs = Inputs::from([("s".to_string(), vec![s])]);
            let r = simulate(&t, &lay, Some(&plan), &inputs, &SimOptions::default()).unwrap();
            let v = run(&t, &lay, s, AdversaryModel::Pigeonhole);
            assert_eq!(r.outputs, v.outputs);
            profiles.push((r.profile, r.steps));
        }
        assert!(profiles.windows(2).all(|w| w[0] == w[1]));
        let vanilla: Vec<_> = (0..8)
            .map(|s| run(&t, &lay, s, AdversaryModel::Pigeonhole).profile)
            .collect();
        assert!(vanilla.windows(2).any(|w| w[0] != w[1]));
    }
}
