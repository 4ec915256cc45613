//! Sensitivity labeling: marks statements, variables and functions high.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ast::*;
use crate::error::{Error, Pos, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityLabel {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveRegion {
    pub function: String,
    /// Statements between the directives, in order.
    pub span: Vec<NodeId>,
    /// Secret globals with their bit widths.
    pub secrets: Vec<(String, u32)>,
    pub pos: Pos,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub high_stmts: BTreeSet<NodeId>,
    /// Globals by name, locals and parameters as `function::name`.
    pub high_vars: BTreeSet<String>,
    pub high_functions: BTreeSet<String>,
    pub regions: Vec<SensitiveRegion>,
    pub warnings: Vec<String>,
}

impl Labels {
    pub fn stmt(&self, id: NodeId) -> SensitivityLabel {
        if self.high_stmts.contains(&id) {
            SensitivityLabel::High
        } else {
            SensitivityLabel::Low
        }
    }

    pub fn var(&self, key: &str) -> SensitivityLabel {
        if self.high_vars.contains(key) {
            SensitivityLabel::High
        } else {
            SensitivityLabel::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledAst {
    pub ast: Ast,
    pub labels: Labels,
}

/// Resolves a name used in `func` to its variable key.
pub fn var_key(ast: &Ast, func: &Function, name: &str) -> String {
    if is_local(func, name) || ast.global(name).is_none() {
        format!("{}::{name}", func.name)
    } else {
        name.to_string()
    }
}

fn is_local(func: &Function, name: &str) -> bool {
    if func.params.iter().any(|p| p == name) {
        return true;
    }
    let mut found = false;
    visit_stmts(&func.body, &mut |s| {
        if let StmtKind::Local { name: n, .. } = &s.kind {
            if n == name {
                found = true;
            }
        }
    });
    found
}

pub fn label_sensitivity(ast: &Ast) -> Result<LabeledAst> {
    let mut labels = Labels::default();
    find_regions(ast, &mut labels)?;
    propagate(ast, &mut labels);
    Ok(LabeledAst {
        ast: ast.clone(),
        labels,
    })
}

/// Re-runs propagation seeded with existing labels; a fixpoint returns it unchanged.
pub fn relabel(l: &LabeledAst) -> LabeledAst {
    let mut labels = l.labels.clone();
    propagate(&l.ast, &mut labels);
    LabeledAst {
        ast: l.ast.clone(),
        labels,
    }
}

fn find_regions(ast: &Ast, labels: &mut Labels) -> Result<()> {
    let secrets: Vec<(String, u32)> = ast
        .secrets()
        .map(|g| (g.name.clone(), g.width.unwrap_or(64)))
        .collect();
    for f in &ast.functions {
        collect_regions(f, &f.body, &secrets, labels)?;
    }
    if labels.regions.is_empty() {
        if let Some(main) = ast.entry() {
            labels.warnings.push(format!(
                "no begin_pf_sensitive directive; treating `{}` as the sensitive region",
                main.name
            ));
            let mut span = Vec::new();
            for s in &main.body {
                span.push(s.id);
            }
            labels.regions.push(SensitiveRegion {
                function: main.name.clone(),
                span,
                secrets: secrets.clone(),
                pos: main.pos,
            });
        }
    }
    if secrets.is_empty() {
        labels
            .warnings
            .push("sensitive region has no secret inputs".to_string());
    }
    for r in &labels.regions {
        let f = ast.function(&r.function).expect("region function exists");
        let mut in_span = BTreeSet::new();
        in_span.extend(r.span.iter().copied());
        visit_stmts(&f.body, &mut |s| {
            if in_span.contains(&s.id) {
                mark_subtree(s, &mut labels.high_stmts);
            }
        });
    }
    Ok(())
}

fn mark_subtree(s: &Stmt, out: &mut BTreeSet<NodeId>) {
    visit_stmts(std::slice::from_ref(s), &mut |t| {
        out.insert(t.id);
    });
}

fn collect_regions(
    f: &Function,
    body: &[Stmt],
    secrets: &[(String, u32)],
    labels: &mut Labels,
) -> Result<()> {
    let mut open: Option<(Pos, Vec<NodeId>)> = None;
    for s in body {
        match &s.kind {
            StmtKind::BeginSensitive => {
                if open.is_some() {
                    return Err(Error::Semantic {
                        pos: s.pos,
                        msg: "nested begin_pf_sensitive".into(),
                    });
                }
                open = Some((s.pos, Vec::new()));
            }
            StmtKind::EndSensitive => match open.take() {
                Some((pos, span)) => labels.regions.push(SensitiveRegion {
                    function: f.name.clone(),
                    span,
                    secrets: secrets.to_vec(),
                    pos,
                }),
                None => {
                    return Err(Error::Semantic {
                        pos: s.pos,
                        msg: "end_pf_sensitive without matching begin".into(),
                    })
                }
            },
            _ => {
                if let Some((_, span)) = open.as_mut() {
                    span.push(s.id);
                }
                let mut nested = |b: &[Stmt]| collect_regions(f, b, secrets, labels);
                match &s.kind {
                    StmtKind::If {
                        then_branch,
                        else_branch,
                        ..
                    } => {
                        nested(then_branch)?;
                        nested(else_branch)?;
                    }
                    StmtKind::While { body, .. }
                    | StmtKind::DoWhile { body, .. }
                    | StmtKind::For { body, .. } => nested(body)?,
                    _ => {}
                }
            }
        }
    }
    if let Some((pos, _)) = open {
        return Err(Error::Semantic {
            pos,
            msg: "begin_pf_sensitive without matching end".into(),
        });
    }
    Ok(())
}

/// Per-statement facts used by propagation.
struct StmtFacts {
    reads: Vec<String>,
    writes: Vec<String>,
    calls: Vec<(String, Vec<Vec<String>>)>,
    /// Statements guarded by this statement's condition.
    children: Vec<NodeId>,
}

fn expr_reads(ast: &Ast, f: &Function, e: &Expr, out: &mut Vec<String>) {
    e.visit_reads(&mut |n| out.push(var_key(ast, f, n)));
}

fn collect_facts(ast: &Ast) -> BTreeMap<NodeId, StmtFacts> {
    let mut facts = BTreeMap::new();
    for f in &ast.functions {
        visit_stmts(&f.body, &mut |s| {
            let mut reads = Vec::new();
            let mut writes = Vec::new();
            let mut calls = Vec::new();
            let mut children = Vec::new();
            let mut exprs: Vec<&Expr> = Vec::new();
            match &s.kind {
                StmtKind::Local { name, init } => {
                    writes.push(var_key(ast, f, name));
                    exprs.extend(init.iter());
                }
                StmtKind::Assign { lhs, rhs } => {
                    writes.push(var_key(ast, f, lhs.name()));
                    if let LValue::Index(_, i) = lhs {
                        exprs.push(i);
                    }
                    exprs.push(rhs);
                }
                StmtKind::Expr(e) => exprs.push(e),
                StmtKind::If {
                    cond,
                    then_branch,
                    else_branch,
                } => {
                    exprs.push(cond);
                    visit_stmts(then_branch, &mut |c| children.push(c.id));
                    visit_stmts(else_branch, &mut |c| children.push(c.id));
                }
                StmtKind::While { cond, body, .. } | StmtKind::DoWhile { body, cond, .. } => {
                    exprs.push(cond);
                    visit_stmts(body, &mut |c| children.push(c.id));
                }
                StmtKind::For {
                    init,
                    cond,
                    step,
                    body,
                    ..
                } => {
                    exprs.push(cond);
                    children.extend(init.iter().map(|i| i.id));
                    children.extend(step.iter().map(|i| i.id));
                    visit_stmts(body, &mut |c| children.push(c.id));
                }
                StmtKind::Return(e) => {
                    exprs.extend(e.iter());
                    writes.push(format!("{}::<ret>", f.name));
                }
                StmtKind::BeginSensitive | StmtKind::EndSensitive => {}
            }
            for e in exprs {
                expr_reads(ast, f, e, &mut reads);
                e.visit_writes(&mut |n| writes.push(var_key(ast, f, n)));
                e.visit_calls(&mut |callee, args| {
                    let per_arg = args
                        .iter()
                        .map(|a| {
                            let mut r = Vec::new();
                            expr_reads(ast, f, a, &mut r);
                            r
                        })
                        .collect();
                    calls.push((callee.to_string(), per_arg));
                    reads.push(format!("{callee}::<ret>"));
                });
            }
            facts.insert(
                s.id,
                StmtFacts {
                    reads,
                    writes,
                    calls,
                    children,
                },
            );
        });
    }
    facts
}

fn propagate(ast: &Ast, labels: &mut Labels) {
    let facts = collect_facts(ast);
    for (name, _) in ast.secrets().map(|g| (g.name.clone(), ())) {
        labels.high_vars.insert(name);
    }
    loop {
        let before = (
            labels.high_stmts.len(),
            labels.high_vars.len(),
            labels.high_functions.len(),
        );
        // Calls from high code make the callee high.
        for (id, fa) in &facts {
            let high = labels.high_stmts.contains(id);
            for (callee, args) in &fa.calls {
                if high {
                    labels.high_functions.insert(callee.clone());
                }
                if let Some(cf) = ast.function(callee) {
                    for (p, reads) in cf.params.iter().zip(args) {
                        if high || reads.iter().any(|r| labels.high_vars.contains(r)) {
                            labels.high_vars.insert(format!("{callee}::{p}"));
                        }
                    }
                }
            }
        }
        for f in &ast.functions {
            if labels.high_functions.contains(&f.name) {
                visit_stmts(&f.body, &mut |s| {
                    labels.high_stmts.insert(s.id);
                });
            }
        }
        for (id, fa) in &facts {
            let reads_high = fa.reads.iter().any(|r| labels.high_vars.contains(r));
            let writes_high = fa.writes.iter().any(|w| labels.high_vars.contains(w));
            if reads_high || writes_high {
                labels.high_stmts.insert(*id);
            }
            if labels.high_stmts.contains(id) {
                for w in &fa.writes {
                    labels.high_vars.insert(w.clone());
                }
                for r in &fa.reads {
                    if !r.ends_with("::<ret>") {
                        labels.high_vars.insert(r.clone());
                    }
                }
                // Implicit flow: a high condition taints everything it guards.
                if reads_high {
                    for c in &fa.children {
                        labels.high_stmts.insert(*c);
                    }
                }
            }
        }
        let after = (
            labels.high_stmts.len(),
            labels.high_vars.len(),
            labels.high_functions.len(),
        );
        if after == before {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::parser::parse;
    use super::*;

    const SRC: &str = "
secret int<8> k;
int t[4];
int unrelated;
output int y;
int helper(int a) { return t[a & 3]; }
void other() { unrelated = unrelated + 1; }
void main() {
    other();
    #pragma begin_pf_sensitive
    y = helper(k);
    #pragma end_pf_sensitive
}";

    #[test]
    fn callee_of_region_is_high_and_untouched_var_low() {
        let l = label_sensitivity(&parse(SRC).unwrap()).unwrap();
        assert!(l.labels.high_functions.contains("helper"));
        assert_eq!(l.labels.var("helper::a"), SensitivityLabel::High);
        assert_eq!(l.labels.var("t"), SensitivityLabel::High);
        assert_eq!(l.labels.var("unrelated"), SensitivityLabel::Low);
        assert!(!l.labels.high_functions.contains("other"));
        assert_eq!(l.labels.regions.len(), 1);
    }

    #[test]
    fn idempotent() {
        let l = label_sensitivity(&parse(SRC).unwrap()).unwrap();
        assert_eq!(relabel(&l), l);
    }

    #[test]
    fn zero_secrets_is_a_warning() {
        let src =
            "int x; void main() {\n#pragma begin_pf_sensitive\nx = 1;\n#pragma end_pf_sensitive\n}";
        let l = label_sensitivity(&parse(src).unwrap()).unwrap();
        assert!(l.labels.warnings.iter().any(|w| w.contains("no secret")));
    }

    #[test]
    fn unmatched_directive_is_an_error() {
        let src = "int x; void main() {\n#pragma begin_pf_sensitive\nx = 1;\n}";
        assert!(label_sensitivity(&parse(src).unwrap()).is_err());
    }
}
