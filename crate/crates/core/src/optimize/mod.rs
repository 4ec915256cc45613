//! Optimization passes over the multiplexing plan, applied in the fixed
//! order O5, O3A, O3B, O4, O1, O2.

pub mod ifconv;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exectree::{balance, build_execution_tree, BuildOptions, ExecTree};
use crate::frontend::{label_sensitivity, parse_with_defines};
use crate::ir::{CodeId, CodeObject, PAD_CODE, PAD_DATA};
use crate::layout::{alloc, build_layout, gap_from};
use crate::model::{MemoryLayout, Region, VirtualPage};
use crate::transform::{
    block_bytes, fits_basic, plan_layout, single_page_objects, staged_per_level, written_objects,
    MuxChoice, Plan, PlanConfig,
};

pub use ifconv::{if_convert, secret_taint, IfConversion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Opt {
    O1,
    O2,
    O3A,
    O3B,
    O4,
    O5,
}

/// Application order.
pub const ORDER: [Opt; 6] = [Opt::O5, Opt::O3A, Opt::O3B, Opt::O4, Opt::O1, Opt::O2];

impl fmt::Display for Opt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Opt::O1 => "O1",
            Opt::O2 => "O2",
            Opt::O3A => "O3A",
            Opt::O3B => "O3B",
            Opt::O4 => "O4",
            Opt::O5 => "O5",
        };
        f.write_str(s)
    }
}

/// Parses `O1,O2`; `O3` stands for both O3A and O3B.
pub fn parse_opts(s: &str) -> Result<BTreeSet<Opt>> {
    let mut out = BTreeSet::new();
    for w in s.split(',').map(str::trim).filter(|w| !w.is_empty()) {
        match w.to_ascii_uppercase().as_str() {
            "ALL" => {
                out.extend(ORDER);
                true
            }
            "O1" => out.insert(Opt::O1),
            "O2" => out.insert(Opt::O2),
            "O3" => {
                out.insert(Opt::O3A);
                out.insert(Opt::O3B)
            }
            "O3A" => out.insert(Opt::O3A),
            "O3B" => out.insert(Opt::O3B),
            "O4" => out.insert(Opt::O4),
            "O5" => out.insert(Opt::O5),
            _ => return Err(Error::Input(format!("unknown optimization `{w}`"))),
        };
    }
    Ok(out)
}

impl FromStr for Opt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let set = parse_opts(s)?;
        match set.len() {
            1 => Ok(*set.iter().next().expect("one element")),
            _ => Err(Error::Input(format!("`{s}` is not a single optimization"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass: Opt,
    pub applied: bool,
    pub detail: String,
    pub copy_ops_before: u64,
    pub copy_ops_after: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileOptions {
    pub page_size: u64,
    pub mux: MuxChoice,
    pub build: BuildOptions,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            page_size: 4096,
            mux: MuxChoice::Auto,
            build: BuildOptions::default(),
        }
    }
}

/// A program compiled both ways: the vanilla tree and layout as written,
/// and the balanced, optimized tree with its plan.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub vanilla: ExecTree,
    pub vanilla_layout: MemoryLayout,
    pub tree: ExecTree,
    pub layout: MemoryLayout,
    pub plan: Plan,
    pub passes: Vec<PassRecord>,
}

/// Vanilla compilation: parse, label, build. No balancing.
pub fn compile_vanilla(
    src: &str,
    defines: &[(String, i64)],
    opts: &CompileOptions,
) -> Result<(ExecTree, MemoryLayout)> {
    let ast = parse_with_defines(src, defines)?;
    let tree = build_execution_tree(&label_sensitivity(&ast)?, &opts.build)?;
    let layout = build_layout(&tree, opts.page_size)?;
    Ok((tree, layout))
}

pub fn compile_program(
    src: &str,
    defines: &[(String, i64)],
    passes: &BTreeSet<Opt>,
    opts: &CompileOptions,
) -> Result<Compiled> {
    let ast = parse_with_defines(src, defines)?;
    let vanilla = build_execution_tree(&label_sensitivity(&ast)?, &opts.build)?;
    let vanilla_layout = build_layout(&vanilla, opts.page_size)?;
    let ps = opts.page_size;
    let mut tree = balance(&vanilla);
    let mut layout = build_layout(&tree, ps)?;
    let mut config = PlanConfig {
        mux: opts.mux,
        exempt: single_page_objects(&tree, &layout),
        ..Default::default()
    };
    let mut plan = plan_layout(&tree, &layout, &config)?;
    let mut records = Vec::new();
    for pass in ORDER {
        if !passes.contains(&pass) {
            continue;
        }
        let before = plan.counters.total();
        let mut rec = PassRecord {
            pass,
            applied: false,
            detail: String::new(),
            copy_ops_before: before,
            copy_ops_after: before,
        };
        let attempt: Result<Option<(ExecTree, MemoryLayout, PlanConfig, String)>> = match pass {
            Opt::O5 => {
                let (conv, r) = if_convert(&ast);
                let mut detail = format!("{} branch(es) converted", r.converted);
                for d in &r.declined {
                    detail.push_str(&format!(
                        "; kept {} in `{}`: {}",
                        d.pos, d.function, d.reason
                    ));
                }
                if r.converted == 0 {
                    rec.detail = detail;
                    Ok(None)
                } else {
                    let t = balance(&build_execution_tree(
                        &label_sensitivity(&conv)?,
                        &opts.build,
                    )?);
                    let l = build_layout(&t, ps)?;
                    Ok(Some((t, l, config.clone(), detail)))
                }
            }
            Opt::O3A => Ok(merge_levels(&tree, ps, &config).map(|g| {
                let n = g.len();
                let c = PlanConfig {
                    groups: Some(g),
                    ..config.clone()
                };
                (
                    tree.clone(),
                    layout.clone(),
                    c,
                    format!("{} level group(s) for {} levels", n, tree.levels.len()),
                )
            })),
            Opt::O3B => clone_callees(&tree, &layout).map(|r| {
                (!r.clones.is_empty()).then(|| {
                    let mut d = format!("{} clone(s)", r.clones.len());
                    if !r.skipped.is_empty() {
                        d.push_str(&format!(", {} call edge(s) left crossing", r.skipped.len()));
                    }
                    (r.tree, r.layout, config.clone(), d)
                })
            }),
            Opt::O4 => lockstep_group(&tree, &layout).map(|r| {
                (!r.levels.is_empty()).then(|| {
                    let mut c = config.clone();
                    c.unstaged_code_levels = r.levels.clone();
                    let d = format!(
                        "{} level(s) unstaged, {} page group(s)",
                        r.levels.len(),
                        r.groups
                    );
                    (r.tree, r.layout, c, d)
                })
            }),
            Opt::O1 => Ok(Some((
                tree.clone(),
                layout.clone(),
                PlanConfig {
                    readonly_elim: true,
                    ..config.clone()
                },
                "read-only objects fetched once, never copied back".into(),
            ))),
            Opt::O2 => align_read_only(&tree, &layout).map(|(l, moved)| {
                (!moved.is_empty()).then(|| {
                    (
                        tree.clone(),
                        l,
                        config.clone(),
                        format!("page-aligned {}", moved.join(", ")),
                    )
                })
            }),
        };
        match attempt {
            Ok(Some((t, l, c, detail))) => match plan_layout(&t, &l, &c) {
                Ok(mut p) => {
                    rec.applied = true;
                    rec.detail = detail;
                    rec.copy_ops_after = p.counters.total();
                    p.applied = plan.applied.clone();
                    p.applied.push(pass.to_string());
                    tree = t;
                    layout = l;
                    config = c;
                    plan = p;
                }
                Err(e) => rec.detail = format!("{detail}; plan rejected: {e}"),
            },
            Ok(None) => {
                if rec.detail.is_empty() {
                    rec.detail = "not applicable".into();
                }
            }
            Err(e) => rec.detail = e.to_string(),
        }
        records.push(rec);
    }
    Ok(Compiled {
        vanilla,
        vanilla_layout,
        tree,
        layout,
        plan,
        passes: records,
    })
}

/// O3A: runs of consecutive sensitive levels share one fetch and one
/// copy-back while their staged code fits a page. `None` when nothing
/// merges or the program needs compacted multiplexing.
pub fn merge_levels(tree: &ExecTree, page_size: u64, config: &PlanConfig) -> Option<Vec<Vec<u32>>> {
    let sensitive: Vec<bool> = tree
        .levels
        .iter()
        .map(|lv| lv.iter().any(|&b| tree.block(b).high))
        .collect();
    let staged_code = |l: usize| -> u64 {
        let lv = &tree.levels[l];
        if sensitive[l] && lv.len() > 1 && !config.unstaged_code_levels.contains(&(l as u32)) {
            lv.iter().map(|&b| tree.block(b).code_size()).sum()
        } else {
            0
        }
    };
    for l in 0..tree.levels.len() {
        if staged_code(l) > 0 {
            let sizes: Vec<u64> = tree.levels[l]
                .iter()
                .map(|&b| tree.block(b).code_size())
                .collect();
            if !fits_basic(&sizes, page_size) {
                return None;
            }
        }
    }
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut used = 0u64;
    for l in 0..tree.levels.len() {
        let c = staged_code(l);
        let extend = sensitive[l]
            && groups.last().is_some_and(|g| {
                sensitive[*g.last().expect("nonempty") as usize] && used + c <= page_size
            });
        if extend {
            groups.last_mut().expect("nonempty").push(l as u32);
            used += c;
        } else {
            groups.push(vec![l as u32]);
            used = c;
        }
    }
    (groups.len() < tree.levels.len()).then_some(groups)
}

pub struct CloneResult {
    pub tree: ExecTree,
    pub layout: MemoryLayout,
    /// (callee, caller) pairs now sharing a page.
    pub clones: Vec<(String, String)>,
    /// Pairs left alone for lack of room.
    pub skipped: Vec<(String, String)>,
}

fn first_page(lay: &MemoryLayout, name: &str) -> Option<VirtualPage> {
    lay.extents(Region::Code, name)
        .and_then(|e| e.first())
        .map(|e| e.page)
}

/// O3B: sensitive calls that cross a page get a private copy of the callee
/// on the caller's page.
pub fn clone_callees(tree: &ExecTree, layout: &MemoryLayout) -> Result<CloneResult> {
    let ps = layout.page_size;
    let mut pairs: BTreeSet<(CodeId, CodeId)> = BTreeSet::new();
    for b in &tree.blocks {
        for i in &b.instrs {
            if i.high && i.caller != crate::ir::NO_CALLER && i.loc.obj != i.caller {
                pairs.insert((i.loc.obj, i.caller));
            }
        }
    }
    let mut t = tree.clone();
    let mut lay = layout.clone();
    let mut clones = Vec::new();
    let mut skipped = Vec::new();
    let mut remap: BTreeMap<(CodeId, CodeId), CodeId> = BTreeMap::new();
    for (callee, caller) in pairs {
        let (ce, cr) = (
            &tree.code_objects[callee as usize],
            &tree.code_objects[caller as usize],
        );
        if ce.name == PAD_CODE {
            continue;
        }
        let (Some(pe), Some(pr)) = (first_page(layout, &ce.name), first_page(layout, &cr.name))
        else {
            continue;
        };
        if lay.pages_of(Region::Code, &ce.name).len() == 1 && pe == pr {
            continue;
        }
        let size = ce.size.max(1);
        match (size <= ps)
            .then(|| gap_from(&lay, pr, size, 4, 0))
            .flatten()
        {
            Some(off) => {
                let name = format!("{}@{}", ce.name, cr.name);
                lay.place(Region::Code, &name, pr.0 * ps + off, size)?;
                t.code_objects.push(CodeObject {
                    name,
                    function: ce.function.clone(),
                    size: ce.size,
                    high: ce.high,
                });
                remap.insert((callee, caller), (t.code_objects.len() - 1) as CodeId);
                clones.push((ce.name.clone(), cr.name.clone()));
            }
            None => skipped.push((ce.name.clone(), cr.name.clone())),
        }
    }
    if clones.is_empty() {
        if let Some((ce, cr)) = skipped.first() {
            return Err(Error::Plan(format!(
                "callee `{ce}` too large to co-locate with `{cr}`"
            )));
        }
    }
    for b in &mut t.blocks {
        for i in &mut b.instrs {
            if let Some(&c) = remap.get(&(i.loc.obj, i.caller)) {
                i.loc.obj = c;
            }
        }
    }
    Ok(CloneResult {
        tree: t,
        layout: lay,
        clones,
        skipped,
    })
}

pub struct LockstepResult {
    pub tree: ExecTree,
    pub layout: MemoryLayout,
    /// Levels whose candidates now fetch code from identical pages.
    pub levels: BTreeSet<u32>,
    pub groups: usize,
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let n = parent[c];
        parent[c] = r;
        c = n;
    }
    r
}

/// O4: code objects that run at the same instruction position of any
/// multi-candidate sensitive level are grouped onto one page, so every
/// candidate touches the same code page at every step and the level needs
/// no code staging. Padding instructions get a pad copy on the page their
/// position maps to.
pub fn lockstep_group(tree: &ExecTree, layout: &MemoryLayout) -> Result<LockstepResult> {
    let ps = layout.page_size;
    let pad = tree.code_id(PAD_CODE);
    let levels: Vec<usize> = (0..tree.levels.len())
        .filter(|&l| {
            let lv = &tree.levels[l];
            lv.len() > 1 && lv.iter().any(|&b| tree.block(b).high)
        })
        .collect();
    let n = tree.code_objects.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut involved = vec![false; n];
    for &l in &levels {
        let lv = &tree.levels[l];
        let len = tree.block(lv[0]).instrs.len();
        for i in 0..len {
            let mut first: Option<usize> = None;
            for &b in lv {
                let o = tree.block(b).instrs[i].loc.obj;
                if Some(o) == pad {
                    continue;
                }
                let o = o as usize;
                involved[o] = true;
                match first {
                    None => first = Some(o),
                    Some(f) => {
                        let (a, c) = (find(&mut parent, f), find(&mut parent, o));
                        parent[a] = c;
                    }
                }
            }
        }
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for o in 0..n {
        if involved[o] {
            let r = find(&mut parent, o);
            members.entry(r).or_default().push(o);
        }
    }
    let mut t = tree.clone();
    let mut lay = layout.clone();
    let mut group_page: BTreeMap<usize, VirtualPage> = BTreeMap::new();
    for (&root, objs) in &members {
        let total: u64 = objs.iter().map(|&o| tree.code_objects[o].size.max(4)).sum();
        if total + 4 > ps {
            let names: Vec<&str> = objs
                .iter()
                .map(|&o| tree.code_objects[o].name.as_str())
                .collect();
            return Err(Error::Plan(format!(
                "no valid grouping: {} need {total} bytes of code on one page",
                names.join(", ")
            )));
        }
        let pages: BTreeSet<VirtualPage> = objs
            .iter()
            .flat_map(|&o| lay.pages_of(Region::Code, &tree.code_objects[o].name))
            .collect();
        let keep = pages.len() == 1
            && gap_from(&lay, *pages.iter().next().expect("one"), 4, 4, 0).is_some();
        let page = if keep {
            *pages.iter().next().expect("one")
        } else {
            for &o in objs {
                lay.remove(Region::Code, &tree.code_objects[o].name);
            }
            let p = VirtualPage(lay.fresh_page());
            let mut cursor = p.0 * ps;
            for &o in objs {
                let c = &tree.code_objects[o];
                cursor = alloc(&mut lay, Region::Code, &c.name, c.size, 4, cursor)?;
            }
            p
        };
        group_page.insert(root, page);
    }
    // Pad instructions follow the group running at their position.
    let mut pad_copy: BTreeMap<usize, CodeId> = BTreeMap::new();
    if let Some(pad) = pad {
        for &l in &levels {
            let lv = tree.levels[l].clone();
            let len = tree.block(lv[0]).instrs.len();
            for i in 0..len {
                let real = lv
                    .iter()
                    .map(|&b| tree.block(b).instrs[i].loc.obj)
                    .find(|&o| o != pad);
                let Some(real) = real else { continue };
                let root = find(&mut parent, real as usize);
                let copy = match pad_copy.get(&root) {
                    Some(&c) => c,
                    None => {
                        let name = format!("{PAD_CODE}@{}", group_page[&root].0);
                        let page = group_page[&root];
                        let off = gap_from(&lay, page, 4, 4, 0).ok_or_else(|| {
                            Error::Plan(format!("no room for padding on page {}", page.0))
                        })?;
                        lay.place(Region::Code, &name, page.0 * ps + off, 4)?;
                        t.code_objects.push(CodeObject {
                            name,
                            function: PAD_CODE.into(),
                            size: 4,
                            high: true,
                        });
                        let c = (t.code_objects.len() - 1) as CodeId;
                        pad_copy.insert(root, c);
                        c
                    }
                };
                for &b in &lv {
                    let ins = &mut t.blocks[b as usize].instrs[i];
                    if ins.loc.obj == pad {
                        ins.loc.obj = copy;
                        ins.loc.offset = 0;
                    }
                }
            }
        }
    }
    // Every position must now agree on its page.
    for &l in &levels {
        let lv = &t.levels[l];
        let len = t.block(lv[0]).instrs.len();
        for i in 0..len {
            let mut seen: Option<VirtualPage> = None;
            for &b in lv {
                let ins = &t.block(b).instrs[i];
                let p = lay.page_of(
                    Region::Code,
                    &t.code_objects[ins.loc.obj as usize].name,
                    ins.loc.offset as u64,
                )?;
                if seen.is_some_and(|s| s != p) {
                    return Err(Error::Plan(format!(
                        "no valid grouping: level {} position {i} spans pages",
                        l + 1
                    )));
                }
                seen = Some(p);
            }
        }
    }
    Ok(LockstepResult {
        tree: t,
        layout: lay,
        levels: levels.iter().map(|&l| l as u32).collect(),
        groups: members.len(),
    })
}

/// O2: staged read-only objects that straddle more pages than their size
/// needs move to the start of fresh pages.
pub fn align_read_only(
    tree: &ExecTree,
    layout: &MemoryLayout,
) -> Result<(MemoryLayout, Vec<String>)> {
    let ps = layout.page_size;
    let written = written_objects(tree);
    let staged: BTreeSet<u32> = staged_per_level(tree, &BTreeSet::new())
        .into_iter()
        .flatten()
        .collect();
    let mut lay = layout.clone();
    let mut moved = Vec::new();
    for &o in &staged {
        let obj = &tree.objects[o as usize];
        if written.contains(&o) || obj.name == PAD_DATA {
            continue;
        }
        let len = obj.byte_len().max(1);
        if lay.pages_of(Region::Data, &obj.name).len() as u64 <= len.div_ceil(ps) {
            continue;
        }
        lay.remove(Region::Data, &obj.name);
        let p = lay.fresh_page();
        lay.place(Region::Data, &obj.name, p * ps, len)?;
        moved.push(obj.name.clone());
    }
    Ok((lay, moved))
}

/// Bytes of code staged at a level, as multiplexed.
pub fn level_code_bytes(tree: &ExecTree, level: usize) -> u64 {
    tree.levels[level]
        .iter()
        .map(|&b| block_bytes(tree.block(b).instrs.len()))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn compile(src: &str, opts: &str, ps: u64) -> Compiled {
        let o = CompileOptions {
            page_size: ps,
            ..Default::default()
        };
        compile_program(src, &[], &parse_opts(opts).unwrap(), &o).unwrap()
    }

    #[test]
    fn opts_parse() {
        let s = parse_opts("O1, o3,O5").unwrap();
        assert_eq!(s, BTreeSet::from([Opt::O1, Opt::O3A, Opt::O3B, Opt::O5]));
        assert!(parse_opts("O9").is_err());
    }

    #[test]
    fn merged_chain_is_one_group() {
        let src = "secret int s; int t[4]; output int y;\n\
            void main() { if (s) { y = 1; } else { y = 2; } y = y + t[s & 3]; if (y > 1) { y = 3; } else { y = 4; } }";
        let c = compile(src, "O3A", 4096);
        assert!(c.passes[0].applied, "{:?}", c.passes);
        assert!(c.tree.levels.len() >= 3);
        assert_eq!(c.plan.staging.groups.len(), 1);
        assert!(c.passes[0].copy_ops_after < c.passes[0].copy_ops_before);
    }

    #[test]
    fn clone_lands_on_each_caller_page() {
        let src = "#pragma place f at 1:0\n#pragma place g at 2:0\n#pragma place h at 3:0\n#pragma place main at 4:0\n\
            secret int s; int a; int b;\n\
            int h(int x) { return x * 3 + 1; }\n\
            void f() { a = h(s) + 1; a = a + 2; }\n\
            void g() { b = h(s) + 2; b = b + 3; }\n\
            void main() {\n#pragma begin_pf_sensitive\nf(); g();\n#pragma end_pf_sensitive\n}";
        let c = compile(src, "O3B", 128);
        assert!(c.passes[0].applied, "{:?}", c.passes);
        let pages = |n: &str| c.layout.pages_of(Region::Code, n);
        assert_eq!(pages("h@f"), pages("f"));
        assert_eq!(pages("h@g"), pages("g"));
    }

    #[test]
    fn lockstep_groups_candidates_onto_one_page() {
        let src = "#pragma place f at 1:0\n#pragma place g at 2:0\n\
            secret int s; int a;\n\
            void f() { a = a + 1; }\n\
            void g() { a = a * 2; }\n\
            void main() {\n#pragma begin_pf_sensitive\nif (s) { f(); } else { g(); }\n#pragma end_pf_sensitive\n}";
        let c = compile(src, "O4", 256);
        assert!(c.passes[0].applied, "{:?}", c.passes);
        assert_eq!(
            c.layout.pages_of(Region::Code, "f"),
            c.layout.pages_of(Region::Code, "g")
        );
        assert_eq!(c.plan.counters.code_fetch, 0);
    }

    #[test]
    fn lockstep_reports_impossible_grouping() {
        let body: String = (0..25).map(|k| format!("a = a + {k};")).collect();
        let src = format!(
            "secret int s; int a;\nvoid f() {{ {body} }}\nvoid g() {{ {body} }}\nvoid h() {{ {body} }}\n\
             void main() {{\n#pragma begin_pf_sensitive\nif (s & 1) {{ f(); }} else {{ g(); }}\nif (s & 2) {{ g(); }} else {{ h(); }}\n#pragma end_pf_sensitive\n}}"
        );
        let c = compile(&src, "O4", 1024);
        assert!(!c.passes[0].applied);
        assert!(
            c.passes[0].detail.contains("no valid grouping"),
            "{}",
            c.passes[0].detail
        );
        assert!(c.plan.counters.code_fetch > 0);
    }

    #[test]
    fn aes_toy_copy_counts() {
        let src = include_str!("../../../../corpus/aes_toy.pfo");
        assert_eq!(compile(src, "", 4096).plan.counters.data_total(), 8);
        assert_eq!(compile(src, "O1", 4096).plan.counters.data_total(), 4);
        let c = compile(src, "O1,O2", 4096);
        assert_eq!(c.plan.counters.data_total(), 2);
        assert_eq!(c.layout.extents(Region::Data, "T1").unwrap()[0].offset, 0);
        assert_eq!(c.layout.pages_of(Region::Data, "T3").len(), 1);
    }
}
