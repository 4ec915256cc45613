//! O5: if-conversion of secret-dependent branches.
//!
//! `if (c) A else B` becomes straight-line code that runs both arms and
//! then selects, per written variable, the value the taken arm produced:
//!
//! ```text
//! int __o5c_N = (c) != 0;
//! __o5_N_v[0] = v;  A;  __o5_N_v[1] = v;  v = __o5_N_v[0];
//! B;  __o5_N_v[0] = v;  v = __o5_N_v[__o5c_N];
//! ```

use std::collections::{BTreeMap, BTreeSet};

use crate::error::Pos;
use crate::frontend::ast::*;
use crate::frontend::label::var_key;

/// Variables (by `var_key`) whose value may depend on a secret, and
/// functions called under a secret condition.
#[derive(Debug, Default, Clone)]
pub struct SecretTaint {
    pub vars: BTreeSet<String>,
    pub guarded_functions: BTreeSet<String>,
}

impl SecretTaint {
    fn expr(&self, ast: &Ast, f: &Function, e: &Expr) -> bool {
        let mut t = false;
        e.visit_reads(&mut |n| t |= self.vars.contains(&var_key(ast, f, n)));
        e.visit_calls(&mut |c, _| t |= self.vars.contains(&format!("{c}::<ret>")));
        t
    }
}

pub fn secret_taint(ast: &Ast) -> SecretTaint {
    let mut st = SecretTaint::default();
    st.vars.extend(ast.secrets().map(|g| g.name.clone()));
    loop {
        let before = (st.vars.len(), st.guarded_functions.len());
        for f in &ast.functions {
            let ctx = st.guarded_functions.contains(&f.name);
            let mut add = Vec::new();
            let mut guarded = Vec::new();
            walk_taint(ast, f, &f.body, ctx, &st, &mut add, &mut guarded);
            st.vars.extend(add);
            st.guarded_functions.extend(guarded);
        }
        if (st.vars.len(), st.guarded_functions.len()) == before {
            return st;
        }
    }
}

fn walk_taint(
    ast: &Ast,
    f: &Function,
    body: &[Stmt],
    ctx: bool,
    st: &SecretTaint,
    add: &mut Vec<String>,
    guarded: &mut Vec<String>,
) {
    let calls = |e: &Expr, add: &mut Vec<String>, guarded: &mut Vec<String>| {
        e.visit_calls(&mut |c, args| {
            if ctx {
                guarded.push(c.to_string());
            }
            if let Some(cf) = ast.function(c) {
                for (p, a) in cf.params.iter().zip(args) {
                    if ctx || st.expr(ast, f, a) {
                        add.push(format!("{c}::{p}"));
                    }
                }
            }
        });
        if ctx {
            e.visit_writes(&mut |n| add.push(var_key(ast, f, n)));
        }
    };
    for s in body {
        match &s.kind {
            StmtKind::Local { name, init } => {
                if let Some(e) = init {
                    calls(e, add, guarded);
                    if ctx || st.expr(ast, f, e) {
                        add.push(var_key(ast, f, name));
                    }
                }
            }
            StmtKind::Assign { lhs, rhs } => {
                calls(rhs, add, guarded);
                let mut t = ctx || st.expr(ast, f, rhs);
                if let LValue::Index(_, i) = lhs {
                    calls(i, add, guarded);
                    t |= st.expr(ast, f, i);
                }
                if t {
                    add.push(var_key(ast, f, lhs.name()));
                }
            }
            StmtKind::Expr(e) => calls(e, add, guarded),
            StmtKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                calls(cond, add, guarded);
                let c = ctx || st.expr(ast, f, cond);
                walk_taint(ast, f, then_branch, c, st, add, guarded);
                walk_taint(ast, f, else_branch, c, st, add, guarded);
            }
            StmtKind::While { cond, body, .. } | StmtKind::DoWhile { body, cond, .. } => {
                calls(cond, add, guarded);
                let c = ctx || st.expr(ast, f, cond);
                walk_taint(ast, f, body, c, st, add, guarded);
            }
            StmtKind::For {
                init,
                cond,
                step,
                body,
                ..
            } => {
                if let Some(i) = init {
                    walk_taint(ast, f, std::slice::from_ref(i), ctx, st, add, guarded);
                }
                calls(cond, add, guarded);
                let c = ctx || st.expr(ast, f, cond);
                if let Some(s) = step {
                    walk_taint(ast, f, std::slice::from_ref(s), c, st, add, guarded);
                }
                walk_taint(ast, f, body, c, st, add, guarded);
            }
            StmtKind::Return(Some(e)) => {
                calls(e, add, guarded);
                if ctx || st.expr(ast, f, e) {
                    add.push(format!("{}::<ret>", f.name));
                }
            }
            _ => {}
        }
    }
}

/// Why a secret branch was left alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declined {
    pub function: String,
    pub pos: Pos,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IfConversion {
    pub converted: usize,
    pub declined: Vec<Declined>,
}

/// Effects of running a statement list unconditionally.
#[derive(Default)]
struct Effects {
    /// Scalars written, in first-write order.
    writes: Vec<String>,
    declared: BTreeSet<String>,
    problem: Option<String>,
}

impl Effects {
    fn write(&mut self, n: &str) {
        if !self.writes.iter().any(|w| w == n) {
            self.writes.push(n.to_string());
        }
    }

    fn fail(&mut self, msg: String) {
        if self.problem.is_none() {
            self.problem = Some(msg);
        }
    }
}

fn is_scratch(name: &str) -> bool {
    name.starts_with("__o5")
}

/// Globals written by `name` and its callees, or a reason it cannot be
/// speculated.
fn callee_effects(
    ast: &Ast,
    name: &str,
    memo: &mut BTreeMap<String, std::result::Result<Vec<String>, String>>,
    stack: &mut Vec<String>,
) -> std::result::Result<Vec<String>, String> {
    if let Some(r) = memo.get(name) {
        return r.clone();
    }
    if stack.iter().any(|s| s == name) {
        return Err(format!("recursive call to `{name}`"));
    }
    let Some(f) = ast.function(name) else {
        return Err(format!("call to unknown function `{name}`"));
    };
    stack.push(name.to_string());
    let mut eff = Effects::default();
    for s in &f.body {
        if let StmtKind::Return(e) = &s.kind {
            if let Some(e) = e {
                expr_effects(ast, f, e, &mut eff, memo, stack);
            }
            continue;
        }
        stmt_effects(ast, f, s, &mut eff, memo, stack, true);
    }
    stack.pop();
    let r = match eff.problem {
        Some(p) => Err(p),
        None => Ok(eff
            .writes
            .into_iter()
            .filter(|w| ast.global(w).is_some() && !is_local_of(f, w))
            .collect()),
    };
    memo.insert(name.to_string(), r.clone());
    r
}

fn is_local_of(f: &Function, name: &str) -> bool {
    if f.params.iter().any(|p| p == name) {
        return true;
    }
    let mut found = false;
    visit_stmts(&f.body, &mut |s| {
        if matches!(&s.kind, StmtKind::Local { name: n, .. } if n == name) {
            found = true;
        }
    });
    found
}

fn expr_effects(
    ast: &Ast,
    f: &Function,
    e: &Expr,
    eff: &mut Effects,
    memo: &mut BTreeMap<String, std::result::Result<Vec<String>, String>>,
    stack: &mut Vec<String>,
) {
    let mut idx_reads = false;
    check_index_reads(e, &mut idx_reads);
    if idx_reads {
        eff.fail("speculated code reads an array at a computed index".into());
    }
    let mut writes = Vec::new();
    e.visit_writes(&mut |n| writes.push(n.to_string()));
    for w in writes {
        scalar_write(ast, f, &w, eff);
    }
    let mut callees = Vec::new();
    e.visit_calls(&mut |c, _| callees.push(c.to_string()));
    for c in callees {
        match callee_effects(ast, &c, memo, stack) {
            Ok(ws) => ws.iter().for_each(|w| eff.write(w)),
            Err(p) => eff.fail(p),
        }
    }
}

fn check_index_reads(e: &Expr, found: &mut bool) {
    match &e.kind {
        ExprKind::Index(n, i) => {
            if !is_scratch(n) && !matches!(i.kind, ExprKind::Const(_)) {
                *found = true;
            }
            check_index_reads(i, found);
        }
        ExprKind::Unary(_, a) => check_index_reads(a, found),
        ExprKind::Binary(_, a, b) => {
            check_index_reads(a, found);
            check_index_reads(b, found);
        }
        ExprKind::Ternary(a, b, c) => {
            check_index_reads(a, found);
            check_index_reads(b, found);
            check_index_reads(c, found);
        }
        ExprKind::Call(_, args) => args.iter().for_each(|a| check_index_reads(a, found)),
        ExprKind::PreIncr(lv, _) => {
            if let LValue::Index(_, i) = lv.as_ref() {
                *found = true;
                check_index_reads(i, found);
            }
        }
        _ => {}
    }
}

fn scalar_write(ast: &Ast, f: &Function, name: &str, eff: &mut Effects) {
    let is_array = !is_local_of(f, name) && ast.global(name).is_some_and(|g| g.len.is_some());
    if is_array {
        if !is_scratch(name) {
            eff.fail(format!("speculated code writes array `{name}`"));
        }
    } else {
        eff.write(name);
    }
}

fn stmt_effects(
    ast: &Ast,
    f: &Function,
    s: &Stmt,
    eff: &mut Effects,
    memo: &mut BTreeMap<String, std::result::Result<Vec<String>, String>>,
    stack: &mut Vec<String>,
    in_callee: bool,
) {
    match &s.kind {
        StmtKind::Local { name, init } => {
            if let Some(e) = init {
                expr_effects(ast, f, e, eff, memo, stack);
            }
            eff.declared.insert(name.clone());
        }
        StmtKind::Assign { lhs, rhs } => {
            expr_effects(ast, f, rhs, eff, memo, stack);
            match lhs {
                LValue::Var(n) => scalar_write(ast, f, n, eff),
                LValue::Index(n, i) => {
                    expr_effects(ast, f, i, eff, memo, stack);
                    if !is_scratch(n) {
                        eff.fail(format!("speculated code writes array `{n}`"));
                    }
                }
            }
        }
        StmtKind::Expr(e) => expr_effects(ast, f, e, eff, memo, stack),
        StmtKind::If {
            cond,
            then_branch,
            else_branch,
        } => {
            expr_effects(ast, f, cond, eff, memo, stack);
            for t in then_branch.iter().chain(else_branch) {
                stmt_effects(ast, f, t, eff, memo, stack, in_callee);
            }
        }
        StmtKind::While { cond, body, .. } | StmtKind::DoWhile { body, cond, .. } => {
            expr_effects(ast, f, cond, eff, memo, stack);
            for t in body {
                stmt_effects(ast, f, t, eff, memo, stack, in_callee);
            }
        }
        StmtKind::For {
            init,
            cond,
            step,
            body,
            ..
        } => {
            for t in init.iter().chain(step.iter()) {
                stmt_effects(ast, f, t, eff, memo, stack, in_callee);
            }
            expr_effects(ast, f, cond, eff, memo, stack);
            for t in body {
                stmt_effects(ast, f, t, eff, memo, stack, in_callee);
            }
        }
        StmtKind::Return(e) => {
            if in_callee {
                if let Some(e) = e {
                    expr_effects(ast, f, e, eff, memo, stack);
                }
            } else {
                eff.fail("return inside a secret branch".into());
            }
        }
        StmtKind::BeginSensitive | StmtKind::EndSensitive => {
            eff.fail("sensitivity directive inside a secret branch".into())
        }
    }
}

struct Rewriter<'a> {
    ast: &'a Ast,
    taint: &'a SecretTaint,
    next_id: u32,
    next_site: usize,
    new_globals: Vec<GlobalDecl>,
    memo: BTreeMap<String, std::result::Result<Vec<String>, String>>,
    report: IfConversion,
}

impl Rewriter<'_> {
    fn id(&mut self) -> NodeId {
        self.next_id += 1;
        NodeId(self.next_id)
    }

    fn stmt(&mut self, kind: StmtKind, pos: Pos) -> Stmt {
        Stmt {
            id: self.id(),
            kind,
            pos,
        }
    }

    fn block(&mut self, f: &Function, body: &[Stmt]) -> Vec<Stmt> {
        let mut out = Vec::with_capacity(body.len());
        for s in body {
            out.extend(self.rewrite(f, s));
        }
        out
    }

    fn rewrite(&mut self, f: &Function, s: &Stmt) -> Vec<Stmt> {
        let mut s = s.clone();
        match &mut s.kind {
            StmtKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                *then_branch = self.block(f, then_branch);
                *else_branch = self.block(f, else_branch);
                if self.taint.expr(self.ast, f, cond) {
                    let (c, t, e) = (cond.clone(), then_branch.clone(), else_branch.clone());
                    match self.convert(f, &c, &t, &e, s.pos) {
                        Ok(v) => {
                            self.report.converted += 1;
                            return v;
                        }
                        Err(reason) => self.report.declined.push(Declined {
                            function: f.name.clone(),
                            pos: s.pos,
                            reason,
                        }),
                    }
                }
            }
            StmtKind::While { body, .. }
            | StmtKind::DoWhile { body, .. }
            | StmtKind::For { body, .. } => {
                *body = self.block(f, body);
            }
            _ => {}
        }
        vec![s]
    }

    fn convert(
        &mut self,
        f: &Function,
        cond: &Expr,
        then_b: &[Stmt],
        else_b: &[Stmt],
        pos: Pos,
    ) -> Result<Vec<Stmt>, String> {
        let mut eff = Effects::default();
        let mut stack = vec![f.name.clone()];
        for s in then_b.iter().chain(else_b) {
            stmt_effects(self.ast, f, s, &mut eff, &mut self.memo, &mut stack, false);
        }
        if let Some(p) = eff.problem {
            return Err(p);
        }
        let written: Vec<String> = eff
            .writes
            .into_iter()
            .filter(|w| !eff.declared.contains(w) && !is_scratch(w))
            .collect();
        let n = self.next_site;
        self.next_site += 1;
        let c_name = format!("__o5c_{n}");
        let sel = |v: &str| format!("__o5_{n}_{v}");
        for v in &written {
            self.new_globals.push(GlobalDecl {
                name: sel(v),
                qual: Qualifier::Plain,
                width: None,
                len: Some(2),
                init: vec![],
                pos,
            });
        }
        let ex = |k: ExprKind| Expr::new(k, pos);
        let var = |v: &str| ex(ExprKind::Var(v.to_string()));
        let at = |arr: String, i: Expr| ex(ExprKind::Index(arr, Box::new(i)));
        let mut out = Vec::new();
        let cval = ex(ExprKind::Binary(
            BinOp::Ne,
            Box::new(cond.clone()),
            Box::new(ex(ExprKind::Const(0))),
        ));
        out.push(self.stmt(
            StmtKind::Local {
                name: c_name.clone(),
                init: Some(cval),
            },
            pos,
        ));
        let save = |rw: &mut Self, out: &mut Vec<Stmt>, slot: i64| {
            for v in &written {
                let s = rw.stmt(
                    StmtKind::Assign {
                        lhs: LValue::Index(sel(v), Box::new(ex(ExprKind::Const(slot)))),
                        rhs: var(v),
                    },
                    pos,
                );
                out.push(s);
            }
        };
        save(self, &mut out, 0);
        out.extend(then_b.iter().cloned());
        save(self, &mut out, 1);
        if !else_b.is_empty() {
            for v in &written {
                let s = self.stmt(
                    StmtKind::Assign {
                        lhs: LValue::Var(v.clone()),
                        rhs: at(sel(v), ex(ExprKind::Const(0))),
                    },
                    pos,
                );
                out.push(s);
            }
            out.extend(else_b.iter().cloned());
            save(self, &mut out, 0);
        }
        for v in &written {
            let s = self.stmt(
                StmtKind::Assign {
                    lhs: LValue::Var(v.clone()),
                    rhs: at(sel(v), var(&c_name)),
                },
                pos,
            );
            out.push(s);
        }
        Ok(out)
    }
}

/// Converts every secret-conditioned `if` whose arms are safe to run
/// unconditionally: no returns, no array writes, no computed-index reads,
/// including through callees.
pub fn if_convert(ast: &Ast) -> (Ast, IfConversion) {
    let taint = secret_taint(ast);
    let mut rw = Rewriter {
        ast,
        taint: &taint,
        next_id: ast.max_node_id(),
        next_site: 0,
        new_globals: Vec::new(),
        memo: BTreeMap::new(),
        report: IfConversion::default(),
    };
    let mut out = ast.clone();
    for (k, f) in ast.functions.iter().enumerate() {
        out.functions[k].body = rw.block(f, &f.body);
    }
    out.globals.extend(rw.new_globals);
    (out, rw.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse;

    fn has_secret_if(ast: &Ast) -> bool {
        let t = secret_taint(ast);
        let mut found = false;
        for f in &ast.functions {
            visit_stmts(&f.body, &mut |s| {
                if let StmtKind::If { cond, .. } = &s.kind {
                    found |= t.expr(ast, f, cond);
                }
            });
        }
        found
    }

    #[test]
    fn diamond_becomes_straight_line() {
        let src = "secret int s; int a; int b; output int y;\n\
            void bump() { b = b + 3; }\n\
            void main() { a = 1; if (s > 2) { a = a + 5; bump(); } else { a = a * 7; } y = a + b; }";
        let ast = parse(src).unwrap();
        let (conv, rep) = if_convert(&ast);
        assert_eq!(rep.converted, 1);
        assert!(has_secret_if(&ast));
        assert!(!has_secret_if(&conv));
        assert!(conv.global("__o5_0_a").is_some());
        assert!(conv.global("__o5_0_b").is_some());
    }

    #[test]
    fn array_writes_are_declined() {
        let src = "secret int s; int t[4]; void main() { if (s) { t[1] = 2; } }";
        let (_, rep) = if_convert(&parse(src).unwrap());
        assert_eq!(rep.converted, 0);
        assert!(rep.declined[0].reason.contains("array"));
    }

    #[test]
    fn public_branches_stay() {
        let src = "public int p; int a; void main() { if (p) { a = 1; } }";
        let (conv, rep) = if_convert(&parse(src).unwrap());
        assert_eq!(rep.converted, 0);
        assert!(rep.declined.is_empty());
        assert_eq!(conv, parse(src).unwrap());
    }
}
