//! Deterministic multiplexing: staging areas, fetch/execute/copy-back
//! schedules and the block/object relocation map.

pub mod taint;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exectree::{check_balanced, BlockId, ExecTree};
use crate::ir::{ObjId, Op, INSTR_BYTES, PAD_DATA};
use crate::model::{Extent, MemoryLayout, Region, StagingPages, VirtualPage};

/// Bytes moved by one copy step.
pub const WORD_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuxChoice {
    #[default]
    Auto,
    Basic,
    Compacted,
}

impl std::str::FromStr for MuxChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(MuxChoice::Auto),
            "basic" => Ok(MuxChoice::Basic),
            "compacted" => Ok(MuxChoice::Compacted),
            _ => Err(Error::Input(format!("unknown multiplexing mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuxMode {
    Basic,
    Compacted,
}

/// Knobs the optimization passes turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub mux: MuxChoice,
    /// O1: read-only objects are never copied back nor re-fetched.
    pub readonly_elim: bool,
    /// O3A: consecutive levels executed under one fetch/copy-back. Each
    /// entry is a run of 0-based level indices.
    pub groups: Option<Vec<Vec<u32>>>,
    /// O4: levels whose code is not staged.
    pub unstaged_code_levels: BTreeSet<u32>,
    /// Objects confined to one page of the source layout. A secret index
    /// into them cannot change the page, so single-block levels skip them.
    pub exempt: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyKind {
    CodeFetch,
    DataFetch,
    CopyBack,
}

/// Copy of one source-page extent into (or out of) staging.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyOp {
    pub kind: CopyKind,
    /// `B<id>` for code, the object name for data.
    pub object: String,
    /// Pages read, one per word.
    pub src_pages: Vec<VirtualPage>,
    /// Pages written, one per word.
    pub dst_pages: Vec<VirtualPage>,
}

impl CopyOp {
    pub fn words(&self) -> usize {
        self.src_pages.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CodeSlot {
    Basic {
        offset: u64,
    },
    /// The real block lands at `real_offset`; every dummy at `dummy_offset`.
    Compacted {
        real_offset: u64,
        dummy_offset: u64,
    },
}

/// The relocation map Γ.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutMapGamma {
    pub blocks: BTreeMap<BlockId, CodeSlot>,
    pub data: BTreeMap<String, Vec<Extent>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    /// 0-based level indices, consecutive.
    pub levels: Vec<u32>,
    pub sensitive: bool,
    /// Per level: more than one candidate block, so every instruction scans.
    pub scan_all: Vec<bool>,
    /// Per level: code runs from SA_code.
    pub stage_code: Vec<bool>,
    pub staged: Vec<ObjId>,
    /// SA_data pages visited, in order, by every staged access.
    pub scan_pages: Vec<VirtualPage>,
    pub fetch: Vec<CopyOp>,
    pub copy_back: Vec<CopyOp>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyCounters {
    pub code_fetch: u64,
    pub data_fetch: u64,
    pub copy_back: u64,
}

impl CopyCounters {
    /// Data copy operations, the figure the read-only optimizations reduce.
    pub fn data_total(&self) -> u64 {
        self.data_fetch + self.copy_back
    }

    pub fn total(&self) -> u64 {
        self.code_fetch + self.data_fetch + self.copy_back
    }
}

/// Static staging schedule for one program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingArea {
    pub sa_code: VirtualPage,
    pub sa_data: Vec<VirtualPage>,
    pub groups: Vec<Group>,
    /// First sensitive level, where staging is set up.
    pub created_at_level: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub page_size: u64,
    pub mode: MuxMode,
    pub config: PlanConfig,
    /// Source layout plus staging pages.
    pub layout: MemoryLayout,
    pub gamma: LayoutMapGamma,
    pub staging: StagingArea,
    /// Group index of each level.
    pub level_group: Vec<u32>,
    pub counters: CopyCounters,
    /// Objects never written inside the tree.
    pub read_only: BTreeSet<String>,
    pub applied: Vec<String>,
}

impl Plan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// A program after multiplexing: the balanced tree and its plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transformed {
    pub tree: ExecTree,
    pub plan: Plan,
}

/// Objects written anywhere in the tree.
pub fn written_objects(tree: &ExecTree) -> BTreeSet<ObjId> {
    let mut w = BTreeSet::new();
    for b in &tree.blocks {
        for i in &b.instrs {
            if let Op::Store { obj, .. } = i.op {
                w.insert(obj);
            }
        }
    }
    w
}

/// Data objects whose extents lie on a single page.
pub fn single_page_objects(tree: &ExecTree, layout: &MemoryLayout) -> BTreeSet<String> {
    tree.objects
        .iter()
        .filter(|o| layout.pages_of(Region::Data, &o.name).len() == 1)
        .map(|o| o.name.clone())
        .collect()
}

/// Objects staged at each level, before grouping.
pub fn staged_per_level(tree: &ExecTree, exempt: &BTreeSet<String>) -> Vec<BTreeSet<ObjId>> {
    let t = taint::analyze(tree);
    let pad = tree.object_id(PAD_DATA);
    tree.levels
        .iter()
        .map(|lv| {
            let sensitive = lv.iter().any(|&b| tree.block(b).high);
            let mut s = BTreeSet::new();
            if !sensitive {
                return s;
            }
            let multi = lv.len() > 1;
            for &b in lv {
                for i in &tree.block(b).instrs {
                    match i.op {
                        Op::Load { obj, idx, .. } | Op::Store { obj, idx, .. } => {
                            let confined = exempt.contains(&tree.objects[obj as usize].name);
                            if multi || (idx.is_some_and(|r| t.reg(r)) && !confined) {
                                s.insert(obj);
                            }
                        }
                        Op::Nop { touch: true } if multi => {
                            if let Some(p) = pad {
                                s.insert(p);
                            }
                        }
                        _ => {}
                    }
                }
            }
            s
        })
        .collect()
}

/// Chooses the multiplexing mode and allocates staging pages and slots.
pub fn plan_layout(tree: &ExecTree, layout: &MemoryLayout, config: &PlanConfig) -> Result<Plan> {
    if !check_balanced(tree).is_balanced() {
        return Err(Error::Plan(
            "execution tree must be balanced before planning".into(),
        ));
    }
    let ps = layout.page_size;
    let nlev = tree.levels.len();
    let groups_spec: Vec<Vec<u32>> = match &config.groups {
        Some(g) => {
            let flat: Vec<u32> = g.iter().flatten().copied().collect();
            if flat != (0..nlev as u32).collect::<Vec<_>>() || g.iter().any(|x| x.is_empty()) {
                return Err(Error::Plan(
                    "level groups must partition the levels in order".into(),
                ));
            }
            g.clone()
        }
        None => (0..nlev as u32).map(|l| vec![l]).collect(),
    };
    let per_level = staged_per_level(tree, &config.exempt);
    let sensitive: Vec<bool> = tree
        .levels
        .iter()
        .map(|lv| lv.iter().any(|&b| tree.block(b).high))
        .collect();
    let multi: Vec<bool> = tree.levels.iter().map(|lv| lv.len() > 1).collect();
    let stage_code: Vec<bool> = (0..nlev)
        .map(|l| sensitive[l] && multi[l] && !config.unstaged_code_levels.contains(&(l as u32)))
        .collect();

    // Mode selection over code-staged levels.
    let mut fits_basic = true;
    for l in 0..nlev {
        if !stage_code[l] {
            continue;
        }
        let sizes: Vec<u64> = tree.levels[l]
            .iter()
            .map(|&b| tree.block(b).code_size())
            .collect();
        let max = sizes.iter().copied().max().unwrap_or(0);
        if max > ps {
            return Err(Error::Plan(format!(
                "block of {max} bytes at level {} exceeds one page; block splitting is unsupported",
                l + 1
            )));
        }
        if sizes.iter().sum::<u64>() > ps {
            fits_basic = false;
        }
    }
    for g in &groups_spec {
        let staged_levels: Vec<u32> = g
            .iter()
            .copied()
            .filter(|&l| stage_code[l as usize])
            .collect();
        if staged_levels.len() > 1 {
            let total: u64 = staged_levels
                .iter()
                .flat_map(|&l| tree.levels[l as usize].iter())
                .map(|&b| tree.block(b).code_size())
                .sum();
            if total > ps {
                return Err(Error::Plan(format!(
                    "merged levels {:?} need {total} bytes of staged code, more than one page",
                    g.iter().map(|l| l + 1).collect::<Vec<_>>()
                )));
            }
        }
    }
    let mode = match config.mux {
        MuxChoice::Basic if !fits_basic => {
            return Err(Error::Plan(
                "basic multiplexing requested but a level's blocks exceed one page".into(),
            ))
        }
        MuxChoice::Basic => MuxMode::Basic,
        MuxChoice::Compacted => MuxMode::Compacted,
        MuxChoice::Auto if fits_basic => MuxMode::Basic,
        MuxChoice::Auto => MuxMode::Compacted,
    };

    // Staging pages and data slots.
    let mut lay = layout.clone();
    let sa_code = VirtualPage(lay.fresh_page());
    let staged_union: BTreeSet<ObjId> = per_level.iter().flatten().copied().collect();
    let any_staging = stage_code.iter().any(|&x| x) || !staged_union.is_empty();
    let mut gamma = LayoutMapGamma::default();
    let mut sa_data: Vec<VirtualPage> = Vec::new();
    if any_staging {
        let first = sa_code.0 + 1;
        // Page 0 of SA_data starts with the pad and selector words.
        let mut cursor = first * ps + 2 * WORD_BYTES;
        let mut max_page = first;
        for &o in &staged_union {
            let obj = &tree.objects[o as usize];
            let len = obj.byte_len().max(1);
            let mut addr = cursor.div_ceil(obj.elem_bytes) * obj.elem_bytes;
            if len <= ps && addr / ps != (addr + len - 1) / ps {
                addr = addr.div_ceil(ps) * ps;
            }
            if len > ps {
                addr = addr.div_ceil(ps) * ps;
            }
            let exts = lay.split(addr, len);
            max_page = max_page.max(exts.last().map(|e| e.page.0).unwrap_or(first));
            gamma.data.insert(obj.name.clone(), exts);
            cursor = addr + len;
        }
        sa_data = (first..=max_page).map(VirtualPage).collect();
        lay.staging = Some(StagingPages {
            sa_code,
            sa_data: sa_data.clone(),
        });
    }

    let written = written_objects(tree);
    let read_only: BTreeSet<String> = tree
        .objects
        .iter()
        .enumerate()
        .filter(|(i, _)| !written.contains(&(*i as ObjId)))
        .map(|(_, o)| o.name.clone())
        .collect();

    let code_page = |b: BlockId, i: usize| -> Result<VirtualPage> {
        let ins = &tree.block(b).instrs[i];
        let name = &tree.code_objects[ins.loc.obj as usize].name;
        lay.page_of(Region::Code, name, ins.loc.offset as u64)
    };

    let mut groups = Vec::new();
    let mut level_group = vec![0u32; nlev];
    let mut resident: BTreeSet<ObjId> = BTreeSet::new();
    let mut counters = CopyCounters::default();
    for (gi, g) in groups_spec.iter().enumerate() {
        let mut staged: BTreeSet<ObjId> = BTreeSet::new();
        let mut writes: BTreeSet<ObjId> = BTreeSet::new();
        for &l in g {
            level_group[l as usize] = gi as u32;
            staged.extend(per_level[l as usize].iter().copied());
            for &b in &tree.levels[l as usize] {
                for i in &tree.block(b).instrs {
                    if let Op::Store { obj, .. } = i.op {
                        writes.insert(obj);
                    }
                }
            }
        }
        let mut fetch = Vec::new();
        // Code fetch: every candidate of every code-staged level, in id order.
        let mut offset = 0u64;
        for &l in g {
            if !stage_code[l as usize] {
                continue;
            }
            let lv = &tree.levels[l as usize];
            let max = lv
                .iter()
                .map(|&b| tree.block(b).code_size())
                .max()
                .unwrap_or(0);
            for &b in lv {
                let blk = tree.block(b);
                let slot = match mode {
                    MuxMode::Basic => {
                        let s = CodeSlot::Basic { offset };
                        offset += blk.code_size();
                        s
                    }
                    MuxMode::Compacted => {
                        if 2 * max > ps {
                            return Err(Error::Plan(format!(
                                "compacted multiplexing needs 2 x {max} bytes at level {}, more than a page",
                                l + 1
                            )));
                        }
                        CodeSlot::Compacted {
                            real_offset: 0,
                            dummy_offset: max,
                        }
                    }
                };
                gamma.blocks.insert(b, slot);
                // One copy op per run of words from the same source page.
                let mut run: Option<CopyOp> = None;
                for i in 0..blk.instrs.len() {
                    let p = code_page(b, i)?;
                    match run.as_mut() {
                        Some(r) if r.src_pages.last() == Some(&p) => {
                            r.src_pages.push(p);
                            r.dst_pages.push(sa_code);
                        }
                        _ => {
                            if let Some(r) = run.take() {
                                fetch.push(r);
                            }
                            run = Some(CopyOp {
                                kind: CopyKind::CodeFetch,
                                object: format!("B{b}"),
                                src_pages: vec![p],
                                dst_pages: vec![sa_code],
                            });
                        }
                    }
                }
                fetch.extend(run);
            }
        }
        for op in &fetch {
            let _ = op;
            counters.code_fetch += 1;
        }
        let mut copy_back = Vec::new();
        for &o in &staged {
            let obj = &tree.objects[o as usize];
            let ro = !written.contains(&o);
            let skip_fetch = config.readonly_elim && ro && resident.contains(&o);
            let ops = data_copy_ops(&lay, &gamma, &obj.name, CopyKind::DataFetch)?;
            if !skip_fetch {
                counters.data_fetch += ops.len() as u64;
                fetch.extend(ops);
            }
            if config.readonly_elim && ro {
                resident.insert(o);
            }
            let back = if config.readonly_elim {
                writes.contains(&o)
            } else {
                true
            };
            if back {
                let ops = data_copy_ops(&lay, &gamma, &obj.name, CopyKind::CopyBack)?;
                counters.copy_back += ops.len() as u64;
                copy_back.extend(ops);
            }
        }
        let scan_all: Vec<bool> = g
            .iter()
            .map(|&l| sensitive[l as usize] && multi[l as usize])
            .collect();
        let mut scan: BTreeSet<VirtualPage> = BTreeSet::new();
        for &o in &staged {
            for e in &gamma.data[&tree.objects[o as usize].name] {
                scan.insert(e.page);
            }
        }
        if scan_all.iter().any(|&x| x) {
            if let Some(&p0) = sa_data.first() {
                scan.insert(p0);
            }
        }
        groups.push(Group {
            levels: g.clone(),
            sensitive: g.iter().any(|&l| sensitive[l as usize]),
            scan_all,
            stage_code: g.iter().map(|&l| stage_code[l as usize]).collect(),
            staged: staged.into_iter().collect(),
            scan_pages: scan.into_iter().collect(),
            fetch,
            copy_back,
        });
    }
    let created_at_level = (0..nlev as u32).find(|&l| sensitive[l as usize]);
    Ok(Plan {
        page_size: ps,
        mode,
        config: config.clone(),
        layout: lay,
        gamma,
        staging: StagingArea {
            sa_code,
            sa_data,
            groups,
            created_at_level,
        },
        level_group,
        counters,
        read_only,
        applied: Vec::new(),
    })
}

/// One copy op per source-page extent of `name`.
fn data_copy_ops(
    lay: &MemoryLayout,
    gamma: &LayoutMapGamma,
    name: &str,
    kind: CopyKind,
) -> Result<Vec<CopyOp>> {
    let src = lay
        .extents(Region::Data, name)
        .ok_or_else(|| Error::Layout(format!("object `{name}` is not mapped")))?;
    let slot = &gamma.data[name];
    let slot_page = |byte: u64| -> VirtualPage {
        let mut rem = byte;
        for e in slot {
            if rem < e.len {
                return e.page;
            }
            rem -= e.len;
        }
        slot.last().map(|e| e.page).unwrap_or(VirtualPage(0))
    };
    let mut out = Vec::new();
    let mut base = 0u64;
    for e in src {
        let words = e.len.div_ceil(WORD_BYTES).max(1);
        let mut s = Vec::with_capacity(words as usize);
        let mut d = Vec::with_capacity(words as usize);
        for w in 0..words {
            s.push(e.page);
            d.push(slot_page(base + w * WORD_BYTES));
        }
        let (src_pages, dst_pages) = match kind {
            CopyKind::CopyBack => (d, s),
            _ => (s, d),
        };
        out.push(CopyOp {
            kind,
            object: name.to_string(),
            src_pages,
            dst_pages,
        });
        base += e.len;
    }
    Ok(out)
}

/// Builds the plan and checks that every execute-phase access of a
/// multiplexed level stays inside staging.
pub fn apply_multiplexing(tree: &ExecTree, plan: Plan) -> Result<Transformed> {
    for g in &plan.staging.groups {
        for (k, &l) in g.levels.iter().enumerate() {
            if !g.scan_all[k] {
                continue;
            }
            for &b in &tree.levels[l as usize] {
                for i in &tree.block(b).instrs {
                    if let Some((obj, _, _)) = i.op.data_access() {
                        if !g.staged.contains(&obj) {
                            return Err(Error::Internal(format!(
                                "block B{b} at level {} accesses `{}` outside staging",
                                l + 1,
                                tree.objects[obj as usize].name
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(Transformed {
        tree: tree.clone(),
        plan,
    })
}

/// One write of the smart-copy schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmartWrite {
    pub block: usize,
    pub page: VirtualPage,
    pub offset: u64,
    pub len: u64,
}

/// Compacted code fetch: the real block goes to offset 0, every other block
/// to one shared dummy slot right after the largest block.
pub fn smart_copy(
    sizes: &[u64],
    real_index: usize,
    sa_code: VirtualPage,
    page_size: u64,
) -> Result<Vec<SmartWrite>> {
    if real_index >= sizes.len() {
        return Err(Error::Input(format!(
            "real block {real_index} out of range"
        )));
    }
    let max = sizes.iter().copied().max().unwrap_or(0);
    if max + max > page_size {
        return Err(Error::Plan(format!(
            "real block slot of {max} bytes plus dummy slot exceed the {page_size}-byte page"
        )));
    }
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &len)| SmartWrite {
            block: i,
            page: sa_code,
            offset: if i == real_index { 0 } else { max },
            len,
        })
        .collect())
}

/// Whether a level of the given block sizes fits basic multiplexing.
pub fn fits_basic(sizes: &[u64], page_size: u64) -> bool {
    sizes.iter().sum::<u64>() <= page_size
}

pub fn block_bytes(instrs: usize) -> u64 {
    instrs as u64 * INSTR_BYTES as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_rule() {
        assert!(!fits_basic(&[40, 40], 64));
        assert!(fits_basic(&[10, 10, 10], 4096));
        assert!(fits_basic(&[30, 30], 64));
    }

    #[test]
    fn smart_copy_pages_do_not_depend_on_real_block() {
        let sa = VirtualPage(9);
        let sizes = [30, 30, 30];
        let pages = |r: usize| -> Vec<VirtualPage> {
            smart_copy(&sizes, r, sa, 64)
                .unwrap()
                .iter()
                .map(|w| w.page)
                .collect()
        };
        let w = smart_copy(&sizes, 1, sa, 64).unwrap();
        assert_eq!(
            w.iter().map(|x| x.offset).collect::<Vec<_>>(),
            vec![30, 0, 30]
        );
        assert_eq!(pages(0), pages(2));
        assert_eq!(pages(1), pages(2));
        assert!(smart_copy(&[40, 10], 0, sa, 64).is_err());
    }
}
