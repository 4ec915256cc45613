//! Flow-insensitive secret taint over registers and data objects.

use crate::exectree::ExecTree;
use crate::frontend::ast::Qualifier;
use crate::ir::Op;

#[derive(Debug, Clone)]
pub struct Taint {
    pub regs: Vec<bool>,
    pub objects: Vec<bool>,
}

impl Taint {
    pub fn reg(&self, r: u32) -> bool {
        self.regs[r as usize]
    }
}

/// Secrets taint what they flow into. Definitions inside blocks of
/// multi-candidate sensitive levels are tainted as well (implicit flow).
pub fn analyze(tree: &ExecTree) -> Taint {
    let mut regs = vec![false; tree.nregs as usize];
    let mut objects: Vec<bool> = tree
        .objects
        .iter()
        .map(|o| o.qual == Qualifier::Secret)
        .collect();
    let implicit: Vec<bool> = tree
        .blocks
        .iter()
        .map(|b| {
            let lv = &tree.levels[b.level as usize - 1];
            lv.len() > 1 && lv.iter().any(|&x| tree.block(x).high)
        })
        .collect();
    loop {
        let mut changed = false;
        for b in &tree.blocks {
            let ctx = implicit[b.id as usize];
            for i in &b.instrs {
                let any_src = i.op.srcs().iter().any(|&r| regs[r as usize]);
                match i.op {
                    Op::Load { dst, obj, .. } => {
                        let t = ctx || any_src || objects[obj as usize];
                        if t && !regs[dst as usize] {
                            regs[dst as usize] = true;
                            changed = true;
                        }
                    }
                    Op::Store { obj, .. } => {
                        if (ctx || any_src) && !objects[obj as usize] {
                            objects[obj as usize] = true;
                            changed = true;
                        }
                    }
                    op => {
                        if let Some(d) = op.dst() {
                            if (ctx || any_src) && !regs[d as usize] {
                                regs[d as usize] = true;
                                changed = true;
                            }
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    Taint { regs, objects }
}
