//! Lowering from the AST to structured per-function IR.
//!
//! Control flow stays structured (`If`, `Loop`, `Call`) so the execution
//! tree builder can inline and unroll it. Every op gets a fixed byte offset
//! inside its function's code object.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Pos, Result};
use crate::frontend::ast::*;
use crate::frontend::label::LabeledAst;
use crate::ir::*;

#[derive(Debug, Clone)]
pub enum SNode {
    Op {
        op: Op,
        off: u32,
        high: bool,
    },
    If {
        cond: Reg,
        off: u32,
        high: bool,
        then_: Vec<SNode>,
        else_: Vec<SNode>,
    },
    Loop(Box<LoopNode>),
    Call {
        callee: String,
        args: Vec<Reg>,
        ret: Option<Reg>,
        off: u32,
        high: bool,
    },
}

#[derive(Debug, Clone)]
pub struct LoopNode {
    pub cond: Vec<SNode>,
    pub cond_reg: Reg,
    /// Offset of the loop's conditional branch.
    pub off: u32,
    pub body: Vec<SNode>,
    pub step: Vec<SNode>,
    pub bound: u64,
    /// `do-while`: the first iteration runs unconditionally.
    pub first_unguarded: bool,
    /// Counted loop whose induction variable the body never writes.
    pub unguarded: bool,
    pub high: bool,
    pub pos: Pos,
}

#[derive(Debug, Clone)]
pub struct LFunc {
    pub name: String,
    pub code: CodeId,
    pub params: Vec<Reg>,
    pub ret: Reg,
    pub nregs: u32,
    pub body: Vec<SNode>,
    pub ret_off: u32,
    pub size: u64,
    pub high: bool,
}

#[derive(Debug, Clone)]
pub struct LProgram {
    pub funcs: BTreeMap<String, LFunc>,
    pub objects: Vec<DataObject>,
    pub code_objects: Vec<CodeObject>,
}

impl LProgram {
    pub fn object_id(&self, name: &str) -> Option<ObjId> {
        self.objects
            .iter()
            .position(|o| o.name == name)
            .map(|i| i as ObjId)
    }
}

pub fn lower(l: &LabeledAst) -> Result<LProgram> {
    let ast = &l.ast;
    check_recursion(ast)?;
    let objects: Vec<DataObject> = ast
        .globals
        .iter()
        .map(|g| DataObject {
            name: g.name.clone(),
            qual: g.qual,
            width: g.width,
            elem_bytes: g.elem_bytes(),
            len: g.elements(),
            init: g.init.clone(),
            high: l.labels.high_vars.contains(&g.name),
        })
        .collect();
    let obj_ids: HashMap<&str, ObjId> = objects
        .iter()
        .enumerate()
        .map(|(i, o)| (o.name.as_str(), i as ObjId))
        .collect();
    let mut funcs = BTreeMap::new();
    let mut code_objects = Vec::new();
    for (ci, f) in ast.functions.iter().enumerate() {
        let high = l.labels.high_functions.contains(&f.name) || {
            let mut any = false;
            visit_stmts(&f.body, &mut |s| any |= l.labels.high_stmts.contains(&s.id));
            any
        };
        let mut cx = FnCx {
            ast,
            l,
            obj_ids: &obj_ids,
            vars: HashMap::new(),
            next_reg: 0,
            next_off: 0,
            high: false,
        };
        let mut params = Vec::new();
        for p in &f.params {
            let r = cx.fresh();
            cx.vars.insert(p.clone(), r);
            params.push(r);
        }
        let ret = cx.fresh();
        let mut body = Vec::new();
        for (i, s) in f.body.iter().enumerate() {
            if let StmtKind::Return(e) = &s.kind {
                if i + 1 != f.body.len() {
                    return Err(Error::Unsupported {
                        pos: s.pos,
                        rule: "Commands",
                        msg: "`return` must be the last statement of a function".into(),
                    });
                }
                cx.high = l.labels.high_stmts.contains(&s.id);
                if let Some(e) = e {
                    if !f.returns_value {
                        return Err(Error::Semantic {
                            pos: s.pos,
                            msg: format!("void function `{}` returns a value", f.name),
                        });
                    }
                    let r = cx.expr(e, &mut body)?;
                    cx.emit(Op::Mov { dst: ret, src: r }, &mut body);
                }
                continue;
            }
            cx.stmt(s, &mut body)?;
        }
        let ret_off = cx.next_off;
        cx.next_off += INSTR_BYTES;
        let size = cx.next_off as u64;
        code_objects.push(CodeObject {
            name: f.name.clone(),
            function: f.name.clone(),
            size,
            high,
        });
        funcs.insert(
            f.name.clone(),
            LFunc {
                name: f.name.clone(),
                code: ci as CodeId,
                params,
                ret,
                nregs: cx.next_reg,
                body,
                ret_off,
                size,
                high,
            },
        );
    }
    Ok(LProgram {
        funcs,
        objects,
        code_objects,
    })
}

fn check_recursion(ast: &Ast) -> Result<()> {
    let mut edges: BTreeMap<&str, Vec<(String, Pos)>> = BTreeMap::new();
    for f in &ast.functions {
        let mut calls = Vec::new();
        visit_stmts(&f.body, &mut |s| {
            for_each_expr(s, &mut |e| {
                e.visit_calls(&mut |c, _| calls.push((c.to_string(), e.pos)));
            });
        });
        for (c, pos) in &calls {
            if ast.function(c).is_none() {
                return Err(Error::Semantic {
                    pos: *pos,
                    msg: format!("call to undefined function `{c}`"),
                });
            }
        }
        edges.insert(&f.name, calls);
    }
    // 0 unvisited, 1 on stack, 2 done
    let mut state: HashMap<&str, u8> = HashMap::new();
    fn dfs<'a>(
        n: &'a str,
        edges: &'a BTreeMap<&'a str, Vec<(String, Pos)>>,
        state: &mut HashMap<&'a str, u8>,
    ) -> Result<()> {
        state.insert(n, 1);
        for (c, pos) in &edges[n] {
            match state.get(c.as_str()).copied().unwrap_or(0) {
                1 => {
                    return Err(Error::Unsupported {
                        pos: *pos,
                        rule: "Commands",
                        msg: format!("unbounded recursion through `{c}`"),
                    })
                }
                0 => dfs(c, edges, state)?,
                _ => {}
            }
        }
        state.insert(n, 2);
        Ok(())
    }
    for f in &ast.functions {
        if state.get(f.name.as_str()).copied().unwrap_or(0) == 0 {
            dfs(&f.name, &edges, &mut state)?;
        }
    }
    Ok(())
}

/// Calls `f` on every top-level expression of a single statement.
pub fn for_each_expr(s: &Stmt, f: &mut dyn FnMut(&Expr)) {
    match &s.kind {
        StmtKind::Local { init, .. } => init.iter().for_each(f),
        StmtKind::Assign { lhs, rhs } => {
            if let LValue::Index(_, i) = lhs {
                f(i);
            }
            f(rhs);
        }
        StmtKind::Expr(e) => f(e),
        StmtKind::If { cond, .. }
        | StmtKind::While { cond, .. }
        | StmtKind::DoWhile { cond, .. }
        | StmtKind::For { cond, .. } => f(cond),
        StmtKind::Return(e) => e.iter().for_each(f),
        StmtKind::BeginSensitive | StmtKind::EndSensitive => {}
    }
}

struct FnCx<'a> {
    ast: &'a Ast,
    l: &'a LabeledAst,
    obj_ids: &'a HashMap<&'a str, ObjId>,
    vars: HashMap<String, Reg>,
    next_reg: Reg,
    next_off: u32,
    high: bool,
}

enum Place {
    Reg(Reg),
    Mem(ObjId, Option<Reg>),
}

impl FnCx<'_> {
    fn fresh(&mut self) -> Reg {
        let r = self.next_reg;
        self.next_reg += 1;
        r
    }

    fn off(&mut self) -> u32 {
        let o = self.next_off;
        self.next_off += INSTR_BYTES;
        o
    }

    fn emit(&mut self, op: Op, out: &mut Vec<SNode>) {
        let off = self.off();
        out.push(SNode::Op {
            op,
            off,
            high: self.high,
        });
    }

    fn resolve(&mut self, name: &str, pos: Pos, indexed: bool) -> Result<Option<ObjId>> {
        if self.vars.contains_key(name) {
            if indexed {
                return Err(Error::Semantic {
                    pos,
                    msg: format!("`{name}` is a scalar local and cannot be indexed"),
                });
            }
            return Ok(None);
        }
        match self.obj_ids.get(name) {
            Some(id) => {
                let g = self.ast.global(name).expect("global exists");
                if indexed && g.len.is_none() {
                    return Err(Error::Semantic {
                        pos,
                        msg: format!("`{name}` is not an array"),
                    });
                }
                if !indexed && g.len.is_some() {
                    return Err(Error::Unsupported {
                        pos,
                        rule: "Expressions",
                        msg: format!("array `{name}` used without an index"),
                    });
                }
                Ok(Some(*id))
            }
            None => Err(Error::Semantic {
                pos,
                msg: format!("undeclared variable `{name}`"),
            }),
        }
    }

    fn place(&mut self, lv: &LValue, pos: Pos, out: &mut Vec<SNode>) -> Result<Place> {
        match lv {
            LValue::Var(n) => match self.resolve(n, pos, false)? {
                None => Ok(Place::Reg(self.vars[n])),
                Some(obj) => Ok(Place::Mem(obj, None)),
            },
            LValue::Index(n, i) => {
                let obj = self.resolve(n, pos, true)?.expect("indexed globals only");
                let r = self.expr(i, out)?;
                Ok(Place::Mem(obj, Some(r)))
            }
        }
    }

    fn write(&mut self, p: &Place, src: Reg, out: &mut Vec<SNode>) {
        match *p {
            Place::Reg(dst) => self.emit(Op::Mov { dst, src }, out),
            Place::Mem(obj, idx) => self.emit(Op::Store { obj, idx, src }, out),
        }
    }

    fn stmt(&mut self, s: &Stmt, out: &mut Vec<SNode>) -> Result<()> {
        self.high = self.l.labels.high_stmts.contains(&s.id);
        match &s.kind {
            StmtKind::Local { name, init } => {
                let r = match self.vars.get(name) {
                    Some(r) => *r,
                    None => {
                        let r = self.fresh();
                        self.vars.insert(name.clone(), r);
                        r
                    }
                };
                match init {
                    Some(e) => {
                        let v = self.expr(e, out)?;
                        self.emit(Op::Mov { dst: r, src: v }, out);
                    }
                    None => self.emit(Op::Const { dst: r, v: 0 }, out),
                }
            }
            StmtKind::Assign { lhs, rhs } => {
                let p = self.place(lhs, s.pos, out)?;
                let v = self.expr(rhs, out)?;
                self.write(&p, v, out);
            }
            StmtKind::Expr(e) => {
                self.expr_stmt(e, out)?;
            }
            StmtKind::If {
                cond,
                then_branch,
                else_branch,
            } => {
                let c = self.expr(cond, out)?;
                let high = self.high;
                let off = self.off();
                let mut t = Vec::new();
                for x in then_branch {
                    self.stmt(x, &mut t)?;
                }
                let mut e = Vec::new();
                for x in else_branch {
                    self.stmt(x, &mut e)?;
                }
                out.push(SNode::If {
                    cond: c,
                    off,
                    high,
                    then_: t,
                    else_: e,
                });
            }
            StmtKind::While { cond, bound, body } => {
                self.lower_loop(s, None, cond, None, body, bound.value(), false, out)?;
            }
            StmtKind::DoWhile { body, cond, bound } => {
                self.lower_loop(s, None, cond, None, body, bound.value(), true, out)?;
            }
            StmtKind::For {
                init,
                cond,
                step,
                bound,
                body,
            } => {
                if let Some(i) = init {
                    self.stmt(i, out)?;
                }
                self.high = self.l.labels.high_stmts.contains(&s.id);
                let counted_var = match (bound, init.as_deref()) {
                    (Bound::Counted(_), Some(i)) => match &i.kind {
                        StmtKind::Assign {
                            lhs: LValue::Var(v),
                            ..
                        } => Some(v.clone()),
                        StmtKind::Local { name, .. } => Some(name.clone()),
                        _ => None,
                    },
                    _ => None,
                };
                let unguarded = counted_var.is_some_and(|v| !writes_var(body, &v));
                self.lower_loop(
                    s,
                    step.as_deref(),
                    cond,
                    Some(unguarded),
                    body,
                    bound.value(),
                    false,
                    out,
                )?;
            }
            StmtKind::Return(_) => {
                return Err(Error::Unsupported {
                    pos: s.pos,
                    rule: "Commands",
                    msg: "`return` is only allowed as the last statement of a function".into(),
                })
            }
            StmtKind::BeginSensitive | StmtKind::EndSensitive => {}
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn lower_loop(
        &mut self,
        s: &Stmt,
        step: Option<&Stmt>,
        cond: &Expr,
        unguarded: Option<bool>,
        body: &[Stmt],
        bound: u64,
        first_unguarded: bool,
        out: &mut Vec<SNode>,
    ) -> Result<()> {
        let high = self.l.labels.high_stmts.contains(&s.id);
        self.high = high;
        let mut c = Vec::new();
        let cond_reg = self.expr(cond, &mut c)?;
        let off = self.off();
        let mut b = Vec::new();
        for x in body {
            self.stmt(x, &mut b)?;
        }
        let mut st = Vec::new();
        if let Some(x) = step {
            self.stmt(x, &mut st)?;
        }
        out.push(SNode::Loop(Box::new(LoopNode {
            cond: c,
            cond_reg,
            off,
            body: b,
            step: st,
            bound,
            first_unguarded,
            unguarded: unguarded.unwrap_or(false),
            high,
            pos: s.pos,
        })));
        Ok(())
    }

    fn expr_stmt(&mut self, e: &Expr, out: &mut Vec<SNode>) -> Result<()> {
        match &e.kind {
            ExprKind::Call(name, args) => {
                self.call(name, args, e.pos, false, out)?;
            }
            _ => {
                self.expr(e, out)?;
            }
        }
        Ok(())
    }

    fn call(
        &mut self,
        name: &str,
        args: &[Expr],
        pos: Pos,
        want_value: bool,
        out: &mut Vec<SNode>,
    ) -> Result<Option<Reg>> {
        let f = self.ast.function(name).ok_or_else(|| Error::Semantic {
            pos,
            msg: format!("call to undefined function `{name}`"),
        })?;
        if f.params.len() != args.len() {
            return Err(Error::Semantic {
                pos,
                msg: format!(
                    "`{name}` takes {} argument(s), {} given",
                    f.params.len(),
                    args.len()
                ),
            });
        }
        if want_value && !f.returns_value {
            return Err(Error::Semantic {
                pos,
                msg: format!("void function `{name}` used as a value"),
            });
        }
        let mut regs = Vec::new();
        for a in args {
            let v = self.expr(a, out)?;
            let t = self.fresh();
            self.emit(Op::Mov { dst: t, src: v }, out);
            regs.push(t);
        }
        let ret = f.returns_value.then(|| self.fresh());
        let off = self.off();
        out.push(SNode::Call {
            callee: name.to_string(),
            args: regs,
            ret,
            off,
            high: self.high,
        });
        Ok(ret)
    }

    fn expr(&mut self, e: &Expr, out: &mut Vec<SNode>) -> Result<Reg> {
        match &e.kind {
            ExprKind::Const(v) => {
                let d = self.fresh();
                self.emit(Op::Const { dst: d, v: *v }, out);
                Ok(d)
            }
            ExprKind::SizeOf(n) => {
                let g = self.ast.global(n).ok_or_else(|| Error::Semantic {
                    pos: e.pos,
                    msg: format!("sizeof of unknown global `{n}`"),
                })?;
                let d = self.fresh();
                self.emit(
                    Op::Const {
                        dst: d,
                        v: g.byte_len() as i64,
                    },
                    out,
                );
                Ok(d)
            }
            ExprKind::Var(n) => match self.resolve(n, e.pos, false)? {
                None => Ok(self.vars[n]),
                Some(obj) => {
                    let d = self.fresh();
                    self.emit(
                        Op::Load {
                            dst: d,
                            obj,
                            idx: None,
                        },
                        out,
                    );
                    Ok(d)
                }
            },
            ExprKind::Index(n, i) => {
                let obj = self.resolve(n, e.pos, true)?.expect("indexed globals only");
                let r = self.expr(i, out)?;
                let d = self.fresh();
                self.emit(
                    Op::Load {
                        dst: d,
                        obj,
                        idx: Some(r),
                    },
                    out,
                );
                Ok(d)
            }
            ExprKind::Unary(op, a) => {
                let a = self.expr(a, out)?;
                let d = self.fresh();
                self.emit(Op::Un { dst: d, op: *op, a }, out);
                Ok(d)
            }
            ExprKind::Binary(op, a, b) => {
                let a = self.expr(a, out)?;
                let b = self.expr(b, out)?;
                let d = self.fresh();
                self.emit(
                    Op::Bin {
                        dst: d,
                        op: *op,
                        a,
                        b,
                    },
                    out,
                );
                Ok(d)
            }
            ExprKind::Ternary(c, a, b) => {
                let c = self.expr(c, out)?;
                let a = self.expr(a, out)?;
                let b = self.expr(b, out)?;
                let d = self.fresh();
                self.emit(Op::Select { dst: d, c, a, b }, out);
                Ok(d)
            }
            ExprKind::Call(name, args) => Ok(self
                .call(name, args, e.pos, true, out)?
                .expect("value-returning call")),
            ExprKind::PreIncr(lv, delta) => {
                let p = self.place(lv, e.pos, out)?;
                let cur = match p {
                    Place::Reg(r) => r,
                    Place::Mem(obj, idx) => {
                        let d = self.fresh();
                        self.emit(Op::Load { dst: d, obj, idx }, out);
                        d
                    }
                };
                let k = self.fresh();
                self.emit(Op::Const { dst: k, v: *delta }, out);
                let d = self.fresh();
                self.emit(
                    Op::Bin {
                        dst: d,
                        op: BinOp::Add,
                        a: cur,
                        b: k,
                    },
                    out,
                );
                self.write(&p, d, out);
                Ok(d)
            }
        }
    }
}

fn writes_var(body: &[Stmt], var: &str) -> bool {
    let mut w = false;
    visit_stmts(body, &mut |s| {
        match &s.kind {
            StmtKind::Assign { lhs, .. } if lhs.name() == var => w = true,
            StmtKind::Local { name, .. } if name == var => w = true,
            _ => {}
        }
        for_each_expr(s, &mut |e| {
            e.visit_writes(&mut |n| {
                if n == var {
                    w = true
                }
            })
        });
    });
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{label_sensitivity, parse};

    fn lower_src(src: &str) -> Result<LProgram> {
        lower(&label_sensitivity(&parse(src)?)?)
    }

    #[test]
    fn recursion_is_rejected() {
        let e = lower_src(
            "int f(int a) { return g(a); } int g(int a) { return f(a); } void main() { f(1); }",
        )
        .unwrap_err();
        assert!(e.to_string().contains("unbounded recursion"), "{e}");
    }

    #[test]
    fn early_return_is_rejected() {
        let e =
            lower_src("int x; int f() { return 1; x = 2; } void main() { x = f(); }").unwrap_err();
        assert!(matches!(e, Error::Unsupported { .. }), "{e}");
    }

    #[test]
    fn code_sizes_count_ops() {
        let p = lower_src("int x; int y; void main() { x = y + 1; }").unwrap();
        // load y, const 1, add, store x, ret
        assert_eq!(p.funcs["main"].size, 5 * INSTR_BYTES as u64);
    }

    #[test]
    fn counted_loop_is_unguarded_unless_body_writes_index() {
        let p = lower_src("int a[4]; void main() { int i; for (i = 0; i < 4; i++) { a[i] = i; } }")
            .unwrap();
        let found = p.funcs["main"]
            .body
            .iter()
            .any(|n| matches!(n, SNode::Loop(l) if l.unguarded && l.bound == 4));
        assert!(found);
        let p =
            lower_src("int a[4]; void main() { int i; for (i = 0; i < 4; i++) { i = i + 1; } }")
                .unwrap();
        let found = p.funcs["main"]
            .body
            .iter()
            .any(|n| matches!(n, SNode::Loop(l) if !l.unguarded));
        assert!(found);
    }
}
