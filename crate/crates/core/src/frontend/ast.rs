use serde::{Deserialize, Serialize};

use crate::error::Pos;

/// Statement identifier, assigned in parse order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Qualifier {
    Plain,
    Secret,
    Public,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalDecl {
    pub name: String,
    pub qual: Qualifier,
    /// Declared bit width (`int<k>`), if any.
    pub width: Option<u32>,
    /// Element count for arrays.
    pub len: Option<u64>,
    pub init: Vec<i64>,
    pub pos: Pos,
}

impl GlobalDecl {
    pub fn elements(&self) -> u64 {
        self.len.unwrap_or(1)
    }

    /// Storage bytes per element: one machine word unless a narrower width is
    /// declared.
    pub fn elem_bytes(&self) -> u64 {
        match self.width {
            Some(w) if w <= 8 => 1,
            Some(w) if w <= 16 => 2,
            Some(w) if w <= 32 => 4,
            Some(_) => 8,
            None => 4,
        }
    }

    pub fn byte_len(&self) -> u64 {
        self.elements() * self.elem_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstDecl {
    pub name: String,
    pub value: i64,
    pub pos: Pos,
}

/// `#pragma place NAME at PAGE:OFFSET`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub name: String,
    pub page: u64,
    pub offset: u64,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub returns_value: bool,
    pub params: Vec<String>,
    pub body: Vec<Stmt>,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stmt {
    pub id: NodeId,
    pub kind: StmtKind,
    pub pos: Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    /// Written with `bound N`.
    Explicit(u64),
    /// Derived from a canonical counted `for` header.
    Counted(u64),
}

impl Bound {
    pub fn value(self) -> u64 {
        match self {
            Bound::Explicit(n) | Bound::Counted(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StmtKind {
    Local {
        name: String,
        init: Option<Expr>,
    },
    Assign {
        lhs: LValue,
        rhs: Expr,
    },
    Expr(Expr),
    If {
        cond: Expr,
        then_branch: Vec<Stmt>,
        else_branch: Vec<Stmt>,
    },
    While {
        cond: Expr,
        bound: Bound,
        body: Vec<Stmt>,
    },
    DoWhile {
        body: Vec<Stmt>,
        cond: Expr,
        bound: Bound,
    },
    For {
        init: Option<Box<Stmt>>,
        cond: Expr,
        step: Option<Box<Stmt>>,
        bound: Bound,
        body: Vec<Stmt>,
    },
    Return(Option<Expr>),
    BeginSensitive,
    EndSensitive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LValue {
    Var(String),
    Index(String, Box<Expr>),
}

impl LValue {
    pub fn name(&self) -> &str {
        match self {
            LValue::Var(n) | LValue::Index(n, _) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expr {
    pub kind: ExprKind,
    pub pos: Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnOp {
    Neg,
    Plus,
    Not,
    BitNot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Shl,
    Shr,
    BitAnd,
    BitOr,
    BitXor,
    And,
    Or,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Rem => "%",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::BitAnd => "&",
            BinOp::BitOr => "|",
            BinOp::BitXor => "^",
            BinOp::And => "&&",
            BinOp::Or => "||",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
        }
    }

    /// Binding strength, higher binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::BitOr => 3,
            BinOp::BitXor => 4,
            BinOp::BitAnd => 5,
            BinOp::Eq | BinOp::Ne => 6,
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 7,
            BinOp::Shl | BinOp::Shr => 8,
            BinOp::Add | BinOp::Sub => 9,
            BinOp::Mul | BinOp::Div | BinOp::Rem => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExprKind {
    Const(i64),
    Var(String),
    Index(String, Box<Expr>),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Ternary(Box<Expr>, Box<Expr>, Box<Expr>),
    Call(String, Vec<Expr>),
    /// `++lv` (delta 1) or `--lv` (delta -1); yields the updated value.
    PreIncr(Box<LValue>, i64),
    SizeOf(String),
}

impl Expr {
    pub fn new(kind: ExprKind, pos: Pos) -> Self {
        Expr { kind, pos }
    }

    /// Calls `f` on every variable name read by this expression.
    pub fn visit_reads(&self, f: &mut dyn FnMut(&str)) {
        match &self.kind {
            ExprKind::Const(_) | ExprKind::SizeOf(_) => {}
            ExprKind::Var(n) => f(n),
            ExprKind::Index(n, i) => {
                f(n);
                i.visit_reads(f);
            }
            ExprKind::Unary(_, e) => e.visit_reads(f),
            ExprKind::Binary(_, a, b) => {
                a.visit_reads(f);
                b.visit_reads(f);
            }
            ExprKind::Ternary(a, b, c) => {
                a.visit_reads(f);
                b.visit_reads(f);
                c.visit_reads(f);
            }
            ExprKind::Call(_, args) => args.iter().for_each(|a| a.visit_reads(f)),
            ExprKind::PreIncr(lv, _) => {
                f(lv.name());
                if let LValue::Index(_, i) = lv.as_ref() {
                    i.visit_reads(f);
                }
            }
        }
    }

    pub fn visit_calls(&self, f: &mut dyn FnMut(&str, &[Expr])) {
        match &self.kind {
            ExprKind::Const(_) | ExprKind::SizeOf(_) | ExprKind::Var(_) => {}
            ExprKind::Index(_, i) => i.visit_calls(f),
            ExprKind::Unary(_, e) => e.visit_calls(f),
            ExprKind::Binary(_, a, b) => {
                a.visit_calls(f);
                b.visit_calls(f);
            }
            ExprKind::Ternary(a, b, c) => {
                a.visit_calls(f);
                b.visit_calls(f);
                c.visit_calls(f);
            }
            ExprKind::Call(name, args) => {
                f(name, args);
                args.iter().for_each(|a| a.visit_calls(f));
            }
            ExprKind::PreIncr(lv, _) => {
                if let LValue::Index(_, i) = lv.as_ref() {
                    i.visit_calls(f);
                }
            }
        }
    }

    /// Variables this expression writes through `++`/`--`.
    pub fn visit_writes(&self, f: &mut dyn FnMut(&str)) {
        match &self.kind {
            ExprKind::Const(_) | ExprKind::SizeOf(_) | ExprKind::Var(_) => {}
            ExprKind::Index(_, i) => i.visit_writes(f),
            ExprKind::Unary(_, e) => e.visit_writes(f),
            ExprKind::Binary(_, a, b) => {
                a.visit_writes(f);
                b.visit_writes(f);
            }
            ExprKind::Ternary(a, b, c) => {
                a.visit_writes(f);
                b.visit_writes(f);
                c.visit_writes(f);
            }
            ExprKind::Call(_, args) => args.iter().for_each(|a| a.visit_writes(f)),
            ExprKind::PreIncr(lv, _) => f(lv.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ast {
    pub consts: Vec<ConstDecl>,
    pub globals: Vec<GlobalDecl>,
    pub functions: Vec<Function>,
    pub placements: Vec<Placement>,
    /// Page reserved for the enclave fault handler, if pinned by a pragma.
    pub handler_page: Option<u64>,
}

pub const ENTRY: &str = "main";

impl Ast {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalDecl> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn const_value(&self, name: &str) -> Option<i64> {
        self.consts.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn secrets(&self) -> impl Iterator<Item = &GlobalDecl> {
        self.globals.iter().filter(|g| g.qual == Qualifier::Secret)
    }

    pub fn entry(&self) -> Option<&Function> {
        self.function(ENTRY)
    }

    /// Copy with positions cleared, for structural comparison.
    pub fn without_positions(&self) -> Ast {
        let mut a = self.clone();
        let z = Pos::default();
        for c in &mut a.consts {
            c.pos = z;
        }
        for g in &mut a.globals {
            g.pos = z;
        }
        for p in &mut a.placements {
            p.pos = z;
        }
        for f in &mut a.functions {
            f.pos = z;
            clear_block(&mut f.body);
        }
        a
    }

    pub fn max_node_id(&self) -> u32 {
        let mut m = 0;
        for f in &self.functions {
            visit_stmts(&f.body, &mut |s| m = m.max(s.id.0));
        }
        m
    }
}

fn clear_block(b: &mut [Stmt]) {
    for s in b {
        clear_stmt(s);
    }
}

fn clear_stmt(s: &mut Stmt) {
    s.pos = Pos::default();
    match &mut s.kind {
        StmtKind::Local { init, .. } => {
            if let Some(e) = init {
                clear_expr(e)
            }
        }
        StmtKind::Assign { lhs, rhs } => {
            clear_lv(lhs);
            clear_expr(rhs);
        }
        StmtKind::Expr(e) => clear_expr(e),
        StmtKind::If {
            cond,
            then_branch,
            else_branch,
        } => {
            clear_expr(cond);
            clear_block(then_branch);
            clear_block(else_branch);
        }
        StmtKind::While { cond, body, .. } | StmtKind::DoWhile { body, cond, .. } => {
            clear_expr(cond);
            clear_block(body);
        }
        StmtKind::For {
            init,
            cond,
            step,
            body,
            ..
        } => {
            if let Some(i) = init {
                clear_stmt(i);
            }
            clear_expr(cond);
            if let Some(s) = step {
                clear_stmt(s);
            }
            clear_block(body);
        }
        StmtKind::Return(e) => {
            if let Some(e) = e {
                clear_expr(e)
            }
        }
        StmtKind::BeginSensitive | StmtKind::EndSensitive => {}
    }
}

fn clear_lv(lv: &mut LValue) {
    if let LValue::Index(_, i) = lv {
        clear_expr(i);
    }
}

fn clear_expr(e: &mut Expr) {
    e.pos = Pos::default();
    match &mut e.kind {
        ExprKind::Const(_) | ExprKind::Var(_) | ExprKind::SizeOf(_) => {}
        ExprKind::Index(_, i) => clear_expr(i),
        ExprKind::Unary(_, a) => clear_expr(a),
        ExprKind::Binary(_, a, b) => {
            clear_expr(a);
            clear_expr(b);
        }
        ExprKind::Ternary(a, b, c) => {
            clear_expr(a);
            clear_expr(b);
            clear_expr(c);
        }
        ExprKind::Call(_, args) => args.iter_mut().for_each(clear_expr),
        ExprKind::PreIncr(lv, _) => clear_lv(lv),
    }
}

/// Pre-order walk over a statement list, including loop headers.
pub fn visit_stmts<'a>(b: &'a [Stmt], f: &mut dyn FnMut(&'a Stmt)) {
    for s in b {
        f(s);
        match &s.kind {
            StmtKind::If {
                then_branch,
                else_branch,
                ..
            } => {
                visit_stmts(then_branch, f);
                visit_stmts(else_branch, f);
            }
            StmtKind::While { body, .. } | StmtKind::DoWhile { body, .. } => visit_stmts(body, f),
            StmtKind::For {
                init, step, body, ..
            } => {
                if let Some(i) = init {
                    f(i);
                }
                if let Some(st) = step {
                    f(st);
                }
                visit_stmts(body, f);
            }
            _ => {}
        }
    }
}
