//! Execution trees: calls inlined, loops unrolled, blocks split at branches.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Pos, Result};
use crate::frontend::ast::{Placement, Qualifier, ENTRY};
use crate::frontend::label::LabeledAst;
use crate::ir::*;
use crate::lower::{lower, LFunc, LProgram, SNode};

pub type BlockId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Succ {
    Exit,
    Goto(BlockId),
    /// Taken on a non-zero condition register.
    Branch {
        cond: Reg,
        then_: BlockId,
        else_: BlockId,
    },
}

impl Succ {
    pub fn targets(&self) -> Vec<BlockId> {
        match *self {
            Succ::Exit => vec![],
            Succ::Goto(t) => vec![t],
            Succ::Branch { then_, else_, .. } => {
                if then_ == else_ {
                    vec![then_]
                } else {
                    vec![then_, else_]
                }
            }
        }
    }

    fn map(&self, f: impl Fn(BlockId) -> BlockId) -> Succ {
        match *self {
            Succ::Exit => Succ::Exit,
            Succ::Goto(t) => Succ::Goto(f(t)),
            Succ::Branch { cond, then_, else_ } => Succ::Branch {
                cond,
                then_: f(then_),
                else_: f(else_),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub level: u32,
    pub instrs: Vec<Instr>,
    pub succ: Succ,
    pub high: bool,
    /// Inserted by balancing.
    pub pad: bool,
}

impl Block {
    pub fn code_size(&self) -> u64 {
        self.instrs.len() as u64 * INSTR_BYTES as u64
    }

    /// (instructions, data accesses)
    pub fn access_counts(&self) -> (usize, usize) {
        let data = self
            .instrs
            .iter()
            .filter(|i| i.op.data_access().is_some() || matches!(i.op, Op::Nop { touch: true }))
            .count();
        (self.instrs.len(), data)
    }

    /// Data objects touched, in access order.
    pub fn data_refs(&self) -> Vec<ObjId> {
        self.instrs
            .iter()
            .filter_map(|i| i.op.data_access().map(|a| a.0))
            .collect()
    }
}

/// A compiled program: execution tree plus the object tables it refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecTree {
    pub blocks: Vec<Block>,
    pub root: BlockId,
    /// `levels[i]` holds the blocks at depth `i + 1`.
    pub levels: Vec<Vec<BlockId>>,
    pub objects: Vec<DataObject>,
    pub code_objects: Vec<CodeObject>,
    pub nregs: u32,
    pub int_width: u32,
    pub placements: Vec<Placement>,
    pub handler_page: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Maximum number of instructions after inlining and unrolling.
    pub node_budget: usize,
    pub int_width: u32,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            node_budget: 4_000_000,
            int_width: 64,
        }
    }
}

impl ExecTree {
    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id as usize]
    }

    pub fn object_id(&self, name: &str) -> Option<ObjId> {
        self.objects
            .iter()
            .position(|o| o.name == name)
            .map(|i| i as ObjId)
    }

    pub fn code_id(&self, name: &str) -> Option<CodeId> {
        self.code_objects
            .iter()
            .position(|o| o.name == name)
            .map(|i| i as CodeId)
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn leaves(&self) -> Vec<BlockId> {
        self.blocks
            .iter()
            .filter(|b| b.succ == Succ::Exit)
            .map(|b| b.id)
            .collect()
    }

    pub fn instr_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instrs.len()).sum()
    }

    /// Levels containing at least one high block.
    pub fn sensitive_levels(&self) -> Vec<usize> {
        (0..self.levels.len())
            .filter(|&l| self.levels[l].iter().any(|&b| self.block(b).high))
            .collect()
    }

    pub fn preds(&self) -> Vec<Vec<BlockId>> {
        let mut p = vec![Vec::new(); self.blocks.len()];
        for b in &self.blocks {
            for t in b.succ.targets() {
                p[t as usize].push(b.id);
            }
        }
        p
    }

    pub fn secrets(&self) -> Vec<&DataObject> {
        self.objects
            .iter()
            .filter(|o| o.qual == Qualifier::Secret)
            .collect()
    }

    /// Adds the pad data and code objects if missing.
    pub fn ensure_pad_objects(&mut self) -> (ObjId, CodeId) {
        let d = match self.object_id(PAD_DATA) {
            Some(d) => d,
            None => {
                self.objects.push(DataObject {
                    name: PAD_DATA.into(),
                    qual: Qualifier::Plain,
                    width: None,
                    elem_bytes: 4,
                    len: 1,
                    init: vec![],
                    high: true,
                });
                (self.objects.len() - 1) as ObjId
            }
        };
        let c = match self.code_id(PAD_CODE) {
            Some(c) => c,
            None => {
                self.code_objects.push(CodeObject {
                    name: PAD_CODE.into(),
                    function: PAD_CODE.into(),
                    size: INSTR_BYTES as u64,
                    high: true,
                });
                (self.code_objects.len() - 1) as CodeId
            }
        };
        (d, c)
    }
}

pub fn build_execution_tree(l: &LabeledAst, opts: &BuildOptions) -> Result<ExecTree> {
    let prog = lower(l)?;
    let main = prog.funcs.get(ENTRY).ok_or_else(|| Error::Semantic {
        pos: Pos::default(),
        msg: format!("missing entry function `{ENTRY}`"),
    })?;
    let mut ex = Expander {
        p: &prog,
        blocks: vec![RawBlock::default()],
        cur: 0,
        nregs: main.nregs,
        instrs: 0,
        budget: opts.node_budget,
        loops: Vec::new(),
    };
    let map = RegMap {
        base: 0,
        params: vec![],
        ret: None,
    };
    ex.seq(main, &map, NO_CALLER, &main.body)?;
    let nregs = ex.nregs;
    let raw = ex.blocks;
    let blocks = cleanup(raw);
    let mut tree = ExecTree {
        blocks,
        root: 0,
        levels: vec![],
        objects: prog.objects.clone(),
        code_objects: prog.code_objects.clone(),
        nregs,
        int_width: opts.int_width,
        placements: l.ast.placements.clone(),
        handler_page: l.ast.handler_page,
    };
    finalize(&mut tree);
    Ok(tree)
}

#[derive(Debug, Clone, Default)]
struct RawBlock {
    instrs: Vec<Instr>,
    succ: Option<Succ>,
}

struct RegMap {
    base: Reg,
    params: Vec<(Reg, Reg)>,
    ret: Option<(Reg, Reg)>,
}

impl RegMap {
    fn get(&self, r: Reg) -> Reg {
        if let Some(&(_, g)) = self.params.iter().find(|(l, _)| *l == r) {
            return g;
        }
        if let Some((l, g)) = self.ret {
            if l == r {
                return g;
            }
        }
        self.base + r
    }
}

struct Expander<'a> {
    p: &'a LProgram,
    blocks: Vec<RawBlock>,
    cur: usize,
    nregs: u32,
    instrs: usize,
    budget: usize,
    loops: Vec<Pos>,
}

impl Expander<'_> {
    fn new_block(&mut self) -> usize {
        self.blocks.push(RawBlock::default());
        self.blocks.len() - 1
    }

    fn push(&mut self, op: Op, loc: CodeLoc, caller: CodeId, high: bool) -> Result<()> {
        self.instrs += 1;
        if self.instrs > self.budget {
            let pos = self.loops.last().copied().unwrap_or_default();
            return Err(Error::Resource {
                pos,
                msg: format!(
                    "unrolled program exceeds the budget of {} instructions",
                    self.budget
                ),
            });
        }
        self.blocks[self.cur].instrs.push(Instr {
            op,
            loc,
            caller,
            high,
        });
        Ok(())
    }

    fn branch(
        &mut self,
        f: &LFunc,
        map: &RegMap,
        caller: CodeId,
        cond: Reg,
        off: u32,
        high: bool,
        then_: &dyn Fn(&mut Self) -> Result<()>,
        else_: &dyn Fn(&mut Self) -> Result<()>,
    ) -> Result<()> {
        let c = map.get(cond);
        self.push(
            Op::Br { cond: c },
            CodeLoc {
                obj: f.code,
                offset: off,
            },
            caller,
            high,
        )?;
        let t = self.new_block();
        let e = self.new_block();
        self.blocks[self.cur].succ = Some(Succ::Branch {
            cond: c,
            then_: t as BlockId,
            else_: e as BlockId,
        });
        self.cur = t;
        then_(self)?;
        let te = self.cur;
        self.cur = e;
        else_(self)?;
        let ee = self.cur;
        let j = self.new_block();
        self.blocks[te].succ = Some(Succ::Goto(j as BlockId));
        self.blocks[ee].succ = Some(Succ::Goto(j as BlockId));
        self.cur = j;
        Ok(())
    }

    fn seq(&mut self, f: &LFunc, map: &RegMap, caller: CodeId, nodes: &[SNode]) -> Result<()> {
        for n in nodes {
            match n {
                SNode::Op { op, off, high } => {
                    let op = op.map_regs(|r| map.get(r));
                    self.push(
                        op,
                        CodeLoc {
                            obj: f.code,
                            offset: *off,
                        },
                        caller,
                        *high,
                    )?;
                }
                SNode::If {
                    cond,
                    off,
                    high,
                    then_,
                    else_,
                } => {
                    self.branch(
                        f,
                        map,
                        caller,
                        *cond,
                        *off,
                        *high,
                        &|s: &mut Self| s.seq(f, map, caller, then_),
                        &|s: &mut Self| s.seq(f, map, caller, else_),
                    )?;
                }
                SNode::Loop(lp) => {
                    self.loops.push(lp.pos);
                    for k in 0..lp.bound {
                        if lp.unguarded || (k == 0 && lp.first_unguarded) {
                            self.seq(f, map, caller, &lp.body)?;
                            self.seq(f, map, caller, &lp.step)?;
                            continue;
                        }
                        self.seq(f, map, caller, &lp.cond)?;
                        self.branch(
                            f,
                            map,
                            caller,
                            lp.cond_reg,
                            lp.off,
                            lp.high,
                            &|s: &mut Self| {
                                s.seq(f, map, caller, &lp.body)?;
                                s.seq(f, map, caller, &lp.step)
                            },
                            &|_: &mut Self| Ok(()),
                        )?;
                    }
                    self.loops.pop();
                }
                SNode::Call {
                    callee,
                    args,
                    ret,
                    off,
                    high,
                } => {
                    let g = &self.p.funcs[callee];
                    self.push(
                        Op::Call,
                        CodeLoc {
                            obj: f.code,
                            offset: *off,
                        },
                        caller,
                        *high,
                    )?;
                    let base = self.nregs;
                    self.nregs += g.nregs;
                    let inner = RegMap {
                        base,
                        params: g
                            .params
                            .iter()
                            .zip(args)
                            .map(|(p, a)| (*p, map.get(*a)))
                            .collect(),
                        ret: ret.map(|r| (g.ret, map.get(r))),
                    };
                    self.seq(g, &inner, f.code, &g.body)?;
                    self.push(
                        Op::Ret,
                        CodeLoc {
                            obj: g.code,
                            offset: g.ret_off,
                        },
                        f.code,
                        *high || g.high,
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Drops empty forwarding blocks and converts raw blocks.
fn cleanup(raw: Vec<RawBlock>) -> Vec<Block> {
    let n = raw.len();
    let succ: Vec<Succ> = raw.iter().map(|b| b.succ.unwrap_or(Succ::Exit)).collect();
    let empty: Vec<bool> = raw.iter().map(|b| b.instrs.is_empty()).collect();
    // forward[i]: block that actually runs when control reaches i
    let mut forward: Vec<BlockId> = (0..n as BlockId).collect();
    for i in (0..n).rev() {
        if i != 0 && empty[i] {
            if let Succ::Goto(t) = succ[i] {
                forward[i] = forward[t as usize];
            }
        }
    }
    let is_empty_exit = |i: usize| i != 0 && empty[i] && succ[i] == Succ::Exit;
    let mut blocks: Vec<Block> = raw
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let s = match succ[i] {
                Succ::Goto(t) => {
                    let f = forward[t as usize];
                    if is_empty_exit(f as usize) {
                        Succ::Exit
                    } else {
                        Succ::Goto(f)
                    }
                }
                s => s.map(|t| forward[t as usize]),
            };
            let high = b.instrs.iter().any(|x| x.high);
            Block {
                id: i as BlockId,
                level: 0,
                instrs: b.instrs,
                succ: s,
                high,
                pad: false,
            }
        })
        .collect();
    // The root may itself be an empty forwarder.
    if blocks[0].instrs.is_empty() {
        if let Succ::Goto(t) = blocks[0].succ {
            let t = t as usize;
            blocks.swap(0, t);
            blocks[0].id = 0;
            blocks[t].id = t as BlockId;
        }
    }
    blocks
}

/// Removes unreachable blocks, assigns levels by longest path and
/// renumbers blocks by (level, discovery order).
pub fn finalize(tree: &mut ExecTree) {
    let n = tree.blocks.len();
    let root = tree.root as usize;
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    let mut stack = vec![root];
    while let Some(b) = stack.pop() {
        if seen[b] {
            continue;
        }
        seen[b] = true;
        order.push(b);
        let t = tree.blocks[b].succ.targets();
        for x in t.into_iter().rev() {
            if !seen[x as usize] {
                stack.push(x as usize);
            }
        }
    }
    let mut indeg = vec![0usize; n];
    for &b in &order {
        for t in tree.blocks[b].succ.targets() {
            indeg[t as usize] += 1;
        }
    }
    let mut level = vec![0u32; n];
    level[root] = 1;
    let mut q = VecDeque::from([root]);
    while let Some(b) = q.pop_front() {
        for t in tree.blocks[b].succ.targets() {
            let t = t as usize;
            level[t] = level[t].max(level[b] + 1);
            indeg[t] -= 1;
            if indeg[t] == 0 {
                q.push_back(t);
            }
        }
    }
    let disc: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let mut sorted = order.clone();
    sorted.sort_by_key(|&b| (level[b], disc[&b]));
    let mut newid = vec![u32::MAX; n];
    for (i, &b) in sorted.iter().enumerate() {
        newid[b] = i as BlockId;
    }
    let old = std::mem::take(&mut tree.blocks);
    let mut slots: Vec<Option<Block>> = old.into_iter().map(Some).collect();
    let mut blocks = Vec::with_capacity(sorted.len());
    let mut levels: Vec<Vec<BlockId>> = Vec::new();
    for &b in &sorted {
        let mut blk = slots[b].take().expect("block visited once");
        blk.id = newid[b];
        blk.level = level[b];
        blk.succ = blk.succ.map(|t| newid[t as usize]);
        let l = level[b] as usize;
        if levels.len() < l {
            levels.resize(l, Vec::new());
        }
        levels[l - 1].push(blk.id);
        blocks.push(blk);
    }
    tree.blocks = blocks;
    tree.root = 0;
    tree.levels = levels;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    /// Two leaves at different depths.
    LeafDepths {
        a: BlockId,
        depth_a: u32,
        b: BlockId,
        depth_b: u32,
    },
    /// A block reachable at two different depths.
    Depth {
        block: BlockId,
        from: BlockId,
        expected: u32,
        actual: u32,
    },
    /// Two blocks on one level with different (instruction, data) counts.
    AccessCounts {
        level: u32,
        a: BlockId,
        counts_a: (usize, usize),
        b: BlockId,
        counts_b: (usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BalanceCheck {
    Balanced,
    Unbalanced { witness: Witness },
}

impl BalanceCheck {
    pub fn is_balanced(&self) -> bool {
        matches!(self, BalanceCheck::Balanced)
    }
}

pub fn check_balanced(tree: &ExecTree) -> BalanceCheck {
    let leaves = tree.leaves();
    if let Some(&first) = leaves.first() {
        let d0 = tree.block(first).level;
        for &l in &leaves[1..] {
            let d = tree.block(l).level;
            if d != d0 {
                let (a, b) = if d0 < d { (first, l) } else { (l, first) };
                return BalanceCheck::Unbalanced {
                    witness: Witness::LeafDepths {
                        a,
                        depth_a: tree.block(a).level,
                        b,
                        depth_b: tree.block(b).level,
                    },
                };
            }
        }
    }
    for b in &tree.blocks {
        for t in b.succ.targets() {
            let tl = tree.block(t).level;
            if tl != b.level + 1 {
                return BalanceCheck::Unbalanced {
                    witness: Witness::Depth {
                        block: t,
                        from: b.id,
                        expected: b.level + 1,
                        actual: tl,
                    },
                };
            }
        }
    }
    for (i, lv) in tree.levels.iter().enumerate() {
        let c0 = tree.block(lv[0]).access_counts();
        for &b in &lv[1..] {
            let c = tree.block(b).access_counts();
            if c != c0 {
                return BalanceCheck::Unbalanced {
                    witness: Witness::AccessCounts {
                        level: i as u32 + 1,
                        a: lv[0],
                        counts_a: c0,
                        b,
                        counts_b: c,
                    },
                };
            }
        }
    }
    BalanceCheck::Balanced
}

/// Pads short paths with pad blocks and every block to its level's access
/// counts. Idempotent.
pub fn balance(tree: &ExecTree) -> ExecTree {
    if check_balanced(tree).is_balanced() {
        return tree.clone();
    }
    let mut t = tree.clone();
    let (pad_obj, pad_code) = t.ensure_pad_objects();
    let pad_loc = CodeLoc {
        obj: pad_code,
        offset: 0,
    };
    let new_pad = |blocks: &mut Vec<Block>, high: bool, succ: Succ| -> BlockId {
        let id = blocks.len() as BlockId;
        blocks.push(Block {
            id,
            level: 0,
            instrs: vec![],
            succ,
            high,
            pad: true,
        });
        id
    };
    // Edges that skip levels get a chain of pad blocks.
    let n = t.blocks.len();
    for b in 0..n {
        let lb = t.blocks[b].level;
        let high = t.blocks[b].high;
        let succ = t.blocks[b].succ;
        let fix = |target: BlockId, blocks: &mut Vec<Block>| -> BlockId {
            let gap = blocks[target as usize].level - lb - 1;
            let mut next = target;
            for _ in 0..gap {
                next = new_pad(blocks, high, Succ::Goto(next));
            }
            next
        };
        let s = match succ {
            Succ::Exit => Succ::Exit,
            Succ::Goto(x) => Succ::Goto(fix(x, &mut t.blocks)),
            Succ::Branch { cond, then_, else_ } => {
                let a = fix(then_, &mut t.blocks);
                let e = fix(else_, &mut t.blocks);
                Succ::Branch {
                    cond,
                    then_: a,
                    else_: e,
                }
            }
        };
        t.blocks[b].succ = s;
    }
    // Shallow leaves are extended to the maximum depth.
    let depth = t.levels.len() as u32;
    for b in 0..n {
        if t.blocks[b].succ == Succ::Exit && t.blocks[b].level < depth {
            let high = t.blocks[b].high;
            let mut next = Succ::Exit;
            for _ in 0..depth - t.blocks[b].level {
                next = Succ::Goto(new_pad(&mut t.blocks, high, next));
            }
            t.blocks[b].succ = next;
        }
    }
    finalize(&mut t);
    for lv in t.levels.clone() {
        let counts: Vec<(usize, usize)> = lv.iter().map(|&b| t.block(b).access_counts()).collect();
        let max_data = counts.iter().map(|c| c.1).max().unwrap_or(0);
        let target = counts
            .iter()
            .map(|c| c.0 + (max_data - c.1))
            .max()
            .unwrap_or(0);
        for (&b, &(ni, nd)) in lv.iter().zip(&counts) {
            let blk = &mut t.blocks[b as usize];
            let touch = max_data - nd;
            let plain = target - ni - touch;
            if touch + plain == 0 {
                continue;
            }
            let has_br = matches!(blk.instrs.last(), Some(i) if matches!(i.op, Op::Br { .. }));
            let (loc, caller) = match blk
                .instrs
                .iter()
                .rev()
                .find(|i| !matches!(i.op, Op::Br { .. }))
            {
                Some(i) if !blk.pad => (i.loc, i.caller),
                _ => (pad_loc, NO_CALLER),
            };
            let high = blk.high;
            let at = if has_br {
                blk.instrs.len() - 1
            } else {
                blk.instrs.len()
            };
            let pads = (0..touch)
                .map(|_| Op::Nop { touch: true })
                .chain((0..plain).map(|_| Op::Nop { touch: false }))
                .map(|op| Instr {
                    op,
                    loc,
                    caller,
                    high,
                });
            blk.instrs.splice(at..at, pads);
        }
    }
    let _ = pad_obj;
    t
}

/// Summary JSON for `pfo analyze`.
pub fn tree_summary_json(tree: &ExecTree) -> serde_json::Value {
    let blocks: Vec<serde_json::Value> = tree
        .blocks
        .iter()
        .map(|b| {
            let refs: Vec<&str> = b
                .data_refs()
                .into_iter()
                .map(|o| tree.objects[o as usize].name.as_str())
                .collect();
            let succ: Vec<BlockId> = b.succ.targets();
            serde_json::json!({
                "id": b.id,
                "level": b.level,
                "instrs": b.instrs.len(),
                "code_size": b.code_size(),
                "data_refs": refs,
                "succ": succ,
                "high": b.high,
                "pad": b.pad,
            })
        })
        .collect();
    serde_json::json!({
        "depth": tree.levels.len(),
        "blocks": blocks,
        "levels": tree.levels,
        "balanced": check_balanced(tree).is_balanced(),
    })
}

pub fn tree_to_dot(tree: &ExecTree) -> String {
    let mut s = String::from("digraph exectree {\n  node [shape=box];\n");
    for b in &tree.blocks {
        let style = if b.pad { ", style=dashed" } else { "" };
        let color = if b.high { ", color=red" } else { "" };
        let _ = writeln!(
            s,
            "  b{} [label=\"B{} L{} n={}\"{style}{color}];",
            b.id,
            b.id,
            b.level,
            b.instrs.len()
        );
    }
    for b in &tree.blocks {
        match b.succ {
            Succ::Exit => {}
            Succ::Goto(t) => {
                let _ = writeln!(s, "  b{} -> b{};", b.id, t);
            }
            Succ::Branch { then_, else_, .. } => {
                let _ = writeln!(s, "  b{} -> b{} [label=T];", b.id, then_);
                let _ = writeln!(s, "  b{} -> b{} [label=F];", b.id, else_);
            }
        }
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{label_sensitivity, parse};

    pub(crate) const FOO: &str = "
secret int x;
secret int y;
int z;
int r;
void path_a() { r = 1; }
void path_b() { r = 2; }
void path_c() { r = 3; }
void main() {
    #pragma begin_pf_sensitive
    z = 2 * y;
    if (z != x) {
        if (z < x + 10) path_c(); else path_b();
    } else path_a();
    #pragma end_pf_sensitive
}";

    fn tree(src: &str) -> ExecTree {
        let l = label_sensitivity(&parse(src).unwrap()).unwrap();
        build_execution_tree(&l, &BuildOptions::default()).unwrap()
    }

    fn leaf_depths(t: &ExecTree) -> Vec<u32> {
        let mut d: Vec<u32> = t.leaves().iter().map(|&b| t.block(b).level).collect();
        d.sort();
        d
    }

    #[test]
    fn foo_has_three_paths_and_is_unbalanced() {
        let t = tree(FOO);
        assert_eq!(t.leaves().len(), 3);
        assert_eq!(leaf_depths(&t), vec![2, 3, 3]);
        match check_balanced(&t) {
            BalanceCheck::Unbalanced {
                witness:
                    Witness::LeafDepths {
                        depth_a, depth_b, ..
                    },
            } => assert_eq!((depth_a, depth_b), (2, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn balancing_foo_pads_path_a() {
        let t = balance(&tree(FOO));
        assert!(check_balanced(&t).is_balanced());
        assert_eq!(leaf_depths(&t), vec![3, 3, 3]);
        assert_eq!(t.blocks.iter().filter(|b| b.pad).count(), 1);
        assert_eq!(balance(&t), t);
    }

    #[test]
    fn straight_line_is_single_block() {
        let t = tree("int a; int b; void main() { a = 1; b = a + 2; }");
        assert_eq!(t.blocks.len(), 1);
        assert!(check_balanced(&t).is_balanced());
        assert_eq!(balance(&t), t);
    }

    #[test]
    fn loop_of_two_block_body_unrolls_to_eight_blocks() {
        // Oracle: a guarded body `if (c) { A }` contributes the branch-taken
        // block A and one join block per iteration.
        let t = tree(
            "secret int k; int a; void main() { int i; for (i = 0; i < 4; i++) { if (k > i) { a = a + 1; } } }",
        );
        let body_blocks = t.blocks.iter().filter(|b| b.level > 1).count();
        assert_eq!(body_blocks, 8);
    }

    #[test]
    fn leaves_of_depth_two_and_five_both_reach_five() {
        let t = tree(
            "secret int k; int a; void main() { if (k) { a = 1; } else { if (a) { if (a > 1) { if (a > 2) { a = 3; } } } } }",
        );
        let mut d = leaf_depths(&t);
        d.dedup();
        assert_eq!((d[0], *d.last().unwrap()), (2, 5));
        let b = balance(&t);
        assert!(leaf_depths(&b).iter().all(|&x| x == 5));
        assert!(check_balanced(&b).is_balanced());
    }

    #[test]
    fn budget_names_the_loop() {
        let l = label_sensitivity(
            &parse(
                "int a; void main() {\n  int i;\n  for (i = 0; i < 1000; i++) { a = a + 1; }\n}",
            )
            .unwrap(),
        )
        .unwrap();
        let e = build_execution_tree(
            &l,
            &BuildOptions {
                node_budget: 100,
                int_width: 64,
            },
        )
        .unwrap_err();
        match e {
            Error::Resource { pos, .. } => assert_eq!(pos.line, 3),
            e => panic!("{e}"),
        }
    }
}
