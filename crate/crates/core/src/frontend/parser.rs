//! Recursive-descent parser for the `.pfo` language.

use std::collections::HashMap;

use super::ast::*;
use super::lexer::{lex, Tok, Token};
use crate::error::{Error, Pos, Result};

/// Upper limit on an inferred `for` trip count.
const MAX_COUNTED_TRIPS: u64 = 10_000_000;

pub fn parse(src: &str) -> Result<Ast> {
    parse_with_defines(src, &[])
}

/// Parses with `const` overrides (`NAME=value`), applied before any use.
pub fn parse_with_defines(src: &str, defines: &[(String, i64)]) -> Result<Ast> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        i: 0,
        next_id: 0,
        consts: HashMap::new(),
        defines: defines.iter().cloned().collect(),
    };
    p.program()
}

struct Parser {
    toks: Vec<Token>,
    i: usize,
    next_id: u32,
    consts: HashMap<String, i64>,
    defines: HashMap<String, i64>,
}

fn syntax(pos: Pos, msg: impl Into<String>) -> Error {
    Error::Syntax {
        pos,
        msg: msg.into(),
    }
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.i].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let j = (self.i + k).min(self.toks.len() - 1);
        &self.toks[j].tok
    }

    fn pos(&self) -> Pos {
        self.toks[self.i].pos
    }

    fn advance(&mut self) -> Token {
        let t = self.toks[self.i].clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn is_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Ident(q) if q == s)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> Result<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            Err(syntax(
                self.pos(),
                format!("expected `{p}`, found {}", self.describe()),
            ))
        }
    }

    fn describe(&self) -> String {
        match self.peek() {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Pragma(s) => format!("`#pragma {s}`"),
            Tok::Punct(p) => format!("`{p}`"),
            Tok::Eof => "end of input".into(),
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek().clone() {
            Tok::Ident(s) if !is_keyword(&s) => {
                self.advance();
                Ok(s)
            }
            _ => Err(syntax(
                self.pos(),
                format!("expected identifier, found {}", self.describe()),
            )),
        }
    }

    fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    fn program(&mut self) -> Result<Ast> {
        let mut ast = Ast {
            consts: Vec::new(),
            globals: Vec::new(),
            functions: Vec::new(),
            placements: Vec::new(),
            handler_page: None,
        };
        loop {
            let pos = self.pos();
            match self.peek().clone() {
                Tok::Eof => break,
                Tok::Pragma(text) => {
                    self.advance();
                    self.top_pragma(&text, pos, &mut ast)?;
                }
                Tok::Ident(kw) if kw == "const" => {
                    self.advance();
                    self.expect_kw("int")?;
                    let name = self.ident()?;
                    self.expect_punct("=")?;
                    let e = self.expr()?;
                    self.expect_punct(";")?;
                    let value = match self.defines.get(&name) {
                        Some(v) => *v,
                        None => self.const_eval(&e)?,
                    };
                    self.consts.insert(name.clone(), value);
                    ast.consts.push(ConstDecl { name, value, pos });
                }
                Tok::Ident(kw)
                    if matches!(kw.as_str(), "secret" | "public" | "output" | "int" | "void") =>
                {
                    self.top_decl(&mut ast)?;
                }
                _ => {
                    return Err(syntax(
                        pos,
                        format!("expected declaration, found {}", self.describe()),
                    ));
                }
            }
        }
        if ast.entry().is_none() {
            return Err(Error::Semantic {
                pos: Pos::default(),
                msg: format!("missing entry function `{ENTRY}`"),
            });
        }
        Ok(ast)
    }

    fn expect_kw(&mut self, kw: &str) -> Result<()> {
        if self.is_ident(kw) {
            self.advance();
            Ok(())
        } else {
            Err(syntax(
                self.pos(),
                format!("expected `{kw}`, found {}", self.describe()),
            ))
        }
    }

    fn top_pragma(&mut self, text: &str, pos: Pos, ast: &mut Ast) -> Result<()> {
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["place", name, "at", loc] => {
                let (pg, off) = loc
                    .split_once(':')
                    .ok_or_else(|| syntax(pos, "placement must be PAGE:OFFSET"))?;
                let consts = &self.consts;
                let num = |s: &str| -> Result<u64> {
                    let s = s.trim();
                    if let Some(&v) = consts.get(s) {
                        return u64::try_from(v)
                            .map_err(|_| syntax(pos, format!("negative placement `{s}`")));
                    }
                    let r = if let Some(h) = s.strip_prefix("0x") {
                        u64::from_str_radix(h, 16)
                    } else {
                        s.parse()
                    };
                    r.map_err(|_| syntax(pos, format!("bad number `{s}` in placement")))
                };
                ast.placements.push(Placement {
                    name: name.to_string(),
                    page: num(pg)?,
                    offset: num(off)?,
                    pos,
                });
                Ok(())
            }
            ["handler", page] => {
                let p = page
                    .parse()
                    .map_err(|_| syntax(pos, format!("bad handler page `{page}`")))?;
                ast.handler_page = Some(p);
                Ok(())
            }
            ["begin_pf_sensitive"] | ["end_pf_sensitive"] => Err(syntax(
                pos,
                "sensitivity directives must appear inside a function body",
            )),
            _ => Err(Error::Unsupported {
                pos,
                rule: "Program",
                msg: format!("unknown pragma `{text}`"),
            }),
        }
    }

    fn top_decl(&mut self, ast: &mut Ast) -> Result<()> {
        let pos = self.pos();
        let qual = if self.is_ident("secret") {
            self.advance();
            Qualifier::Secret
        } else if self.is_ident("public") {
            self.advance();
            Qualifier::Public
        } else if self.is_ident("output") {
            self.advance();
            Qualifier::Output
        } else {
            Qualifier::Plain
        };
        let is_void = self.is_ident("void");
        if is_void {
            self.advance();
        } else {
            self.expect_kw("int")?;
        }
        let width = if self.eat_punct("<") {
            let w = match self.peek().clone() {
                Tok::Int(v) => {
                    self.advance();
                    v
                }
                Tok::Ident(n) => {
                    self.advance();
                    self.lookup_const(&n, pos)?
                }
                _ => return Err(syntax(self.pos(), "expected bit width")),
            };
            self.expect_punct(">")?;
            if !(1..=64).contains(&w) {
                return Err(Error::Semantic {
                    pos,
                    msg: format!("bit width {w} outside 1..=64"),
                });
            }
            Some(w as u32)
        } else {
            None
        };
        let name = self.ident()?;
        if self.is_punct("(") {
            if qual != Qualifier::Plain || width.is_some() {
                return Err(syntax(pos, "functions cannot carry qualifiers or widths"));
            }
            let f = self.function(name, !is_void, pos)?;
            if ast.function(&f.name).is_some() {
                return Err(Error::Semantic {
                    pos,
                    msg: format!("function `{}` defined twice", f.name),
                });
            }
            ast.functions.push(f);
            return Ok(());
        }
        if is_void {
            return Err(syntax(pos, "variables cannot be void"));
        }
        let len = if self.eat_punct("[") {
            let e = self.expr()?;
            self.expect_punct("]")?;
            let n = self.const_eval(&e)?;
            if n <= 0 {
                return Err(Error::Semantic {
                    pos,
                    msg: format!("array `{name}` must have positive length"),
                });
            }
            Some(n as u64)
        } else {
            None
        };
        let mut init = Vec::new();
        if self.eat_punct("=") {
            if self.eat_punct("{") {
                if !self.is_punct("}") {
                    loop {
                        let e = self.expr()?;
                        init.push(self.const_eval(&e)?);
                        if !self.eat_punct(",") {
                            break;
                        }
                        if self.is_punct("}") {
                            break;
                        }
                    }
                }
                self.expect_punct("}")?;
            } else {
                let e = self.expr()?;
                init.push(self.const_eval(&e)?);
            }
        }
        self.expect_punct(";")?;
        let g = GlobalDecl {
            name,
            qual,
            width,
            len,
            init,
            pos,
        };
        if g.init.len() as u64 > g.elements() {
            return Err(Error::Semantic {
                pos,
                msg: format!("too many initializers for `{}`", g.name),
            });
        }
        if ast.global(&g.name).is_some() || self.consts.contains_key(&g.name) {
            return Err(Error::Semantic {
                pos,
                msg: format!("`{}` declared twice", g.name),
            });
        }
        ast.globals.push(g);
        Ok(())
    }

    fn function(&mut self, name: String, returns_value: bool, pos: Pos) -> Result<Function> {
        self.expect_punct("(")?;
        let mut params = Vec::new();
        if !self.is_punct(")") {
            if self.is_ident("void") && matches!(self.peek_at(1), Tok::Punct(")")) {
                self.advance();
            } else {
                loop {
                    if self.is_punct("(") || self.is_punct("*") {
                        return Err(Error::Unsupported {
                            pos: self.pos(),
                            rule: "Expressions",
                            msg: "function pointers are not part of the language".into(),
                        });
                    }
                    self.expect_kw("int")?;
                    if self.is_punct("*") {
                        return Err(Error::Unsupported {
                            pos: self.pos(),
                            rule: "Unary",
                            msg: "pointer parameters are not part of the language".into(),
                        });
                    }
                    params.push(self.ident()?);
                    if !self.eat_punct(",") {
                        break;
                    }
                }
            }
        }
        self.expect_punct(")")?;
        let body = self.block()?;
        Ok(Function {
            name,
            returns_value,
            params,
            body,
            pos,
        })
    }

    fn block(&mut self) -> Result<Vec<Stmt>> {
        self.expect_punct("{")?;
        let mut out = Vec::new();
        while !self.is_punct("}") {
            if matches!(self.peek(), Tok::Eof) {
                return Err(syntax(self.pos(), "unexpected end of input in block"));
            }
            self.stmt_into(&mut out)?;
        }
        self.expect_punct("}")?;
        Ok(out)
    }

    fn body(&mut self) -> Result<Vec<Stmt>> {
        if self.is_punct("{") {
            self.block()
        } else {
            let mut v = Vec::new();
            self.stmt_into(&mut v)?;
            Ok(v)
        }
    }

    fn stmt_into(&mut self, out: &mut Vec<Stmt>) -> Result<()> {
        if self.is_punct("{") {
            let inner = self.block()?;
            out.extend(inner);
            return Ok(());
        }
        if self.eat_punct(";") {
            return Ok(());
        }
        let s = self.stmt()?;
        out.push(s);
        Ok(())
    }

    fn bound(&mut self) -> Result<Option<u64>> {
        if !self.is_ident("bound") {
            return Ok(None);
        }
        let pos = self.pos();
        self.advance();
        let e = self.unary()?;
        let v = self.const_eval(&e)?;
        if v < 0 {
            return Err(Error::Semantic {
                pos,
                msg: "loop bound must be non-negative".into(),
            });
        }
        Ok(Some(v as u64))
    }

    fn stmt(&mut self) -> Result<Stmt> {
        let pos = self.pos();
        if let Tok::Pragma(text) = self.peek().clone() {
            self.advance();
            let kind = match text.as_str() {
                "begin_pf_sensitive" => StmtKind::BeginSensitive,
                "end_pf_sensitive" => StmtKind::EndSensitive,
                _ => {
                    return Err(Error::Unsupported {
                        pos,
                        rule: "Program",
                        msg: format!("unknown pragma `{text}` in function body"),
                    })
                }
            };
            let id = self.fresh_id();
            return Ok(Stmt { id, kind, pos });
        }
        let kw = match self.peek() {
            Tok::Ident(s) => s.clone(),
            _ => String::new(),
        };
        match kw.as_str() {
            "int" => {
                self.advance();
                if self.is_punct("*") {
                    return Err(Error::Unsupported {
                        pos,
                        rule: "Unary",
                        msg: "pointers are not part of the language".into(),
                    });
                }
                let name = self.ident()?;
                if self.is_punct("[") {
                    return Err(Error::Unsupported {
                        pos,
                        rule: "lval",
                        msg: "local arrays are not supported; declare arrays at top level".into(),
                    });
                }
                let init = if self.eat_punct("=") {
                    Some(self.expr()?)
                } else {
                    None
                };
                self.expect_punct(";")?;
                let id = self.fresh_id();
                Ok(Stmt {
                    id,
                    kind: StmtKind::Local { name, init },
                    pos,
                })
            }
            "if" => {
                self.advance();
                let id = self.fresh_id();
                self.expect_punct("(")?;
                let cond = self.expr()?;
                self.expect_punct(")")?;
                let then_branch = self.body()?;
                let else_branch = if self.is_ident("else") {
                    self.advance();
                    self.body()?
                } else {
                    Vec::new()
                };
                Ok(Stmt {
                    id,
                    kind: StmtKind::If {
                        cond,
                        then_branch,
                        else_branch,
                    },
                    pos,
                })
            }
            "while" => {
                self.advance();
                let id = self.fresh_id();
                self.expect_punct("(")?;
                let cond = self.expr()?;
                self.expect_punct(")")?;
                let bound = self.bound()?.ok_or_else(|| Error::UnboundedLoop {
                    pos,
                    msg: "`while` needs a constant bound (`while (e) bound N { ... }`)".into(),
                })?;
                let body = self.body()?;
                Ok(Stmt {
                    id,
                    kind: StmtKind::While {
                        cond,
                        bound: Bound::Explicit(bound),
                        body,
                    },
                    pos,
                })
            }
            "do" => {
                self.advance();
                let id = self.fresh_id();
                let body = self.body()?;
                self.expect_kw("while")?;
                self.expect_punct("(")?;
                let cond = self.expr()?;
                self.expect_punct(")")?;
                let bound = self.bound()?.ok_or_else(|| Error::UnboundedLoop {
                    pos,
                    msg: "`do-while` needs a constant bound (`do { ... } while (e) bound N;`)"
                        .into(),
                })?;
                self.expect_punct(";")?;
                if bound == 0 {
                    return Err(Error::Semantic {
                        pos,
                        msg: "do-while bound must be at least 1".into(),
                    });
                }
                Ok(Stmt {
                    id,
                    kind: StmtKind::DoWhile {
                        body,
                        cond,
                        bound: Bound::Explicit(bound),
                    },
                    pos,
                })
            }
            "for" => {
                self.advance();
                let id = self.fresh_id();
                self.expect_punct("(")?;
                let init = if self.is_punct(";") {
                    None
                } else if self.is_ident("int") {
                    let lpos = self.pos();
                    self.advance();
                    let name = self.ident()?;
                    self.expect_punct("=")?;
                    let e = self.expr()?;
                    let lid = self.fresh_id();
                    Some(Box::new(Stmt {
                        id: lid,
                        kind: StmtKind::Local {
                            name,
                            init: Some(e),
                        },
                        pos: lpos,
                    }))
                } else {
                    Some(Box::new(self.simple_stmt()?))
                };
                self.expect_punct(";")?;
                let cond = self.expr()?;
                self.expect_punct(";")?;
                let step = if self.is_punct(")") {
                    None
                } else {
                    Some(Box::new(self.simple_stmt()?))
                };
                self.expect_punct(")")?;
                let explicit = self.bound()?;
                let bound = match explicit {
                    Some(b) => Bound::Explicit(b),
                    None => match counted_trips(init.as_deref(), &cond, step.as_deref()) {
                        Some(n) => Bound::Counted(n),
                        None => {
                            return Err(Error::UnboundedLoop {
                                pos,
                                msg: "`for` header is not a constant counted loop; add `bound N`"
                                    .into(),
                            })
                        }
                    },
                };
                let body = self.body()?;
                Ok(Stmt {
                    id,
                    kind: StmtKind::For {
                        init,
                        cond,
                        step,
                        bound,
                        body,
                    },
                    pos,
                })
            }
            "return" => {
                self.advance();
                let id = self.fresh_id();
                let e = if self.is_punct(";") {
                    None
                } else {
                    Some(self.expr()?)
                };
                self.expect_punct(";")?;
                Ok(Stmt {
                    id,
                    kind: StmtKind::Return(e),
                    pos,
                })
            }
            "else" => Err(syntax(pos, "`else` without `if`")),
            "goto" | "switch" | "break" | "continue" => Err(Error::Unsupported {
                pos,
                rule: "Commands",
                msg: format!("`{kw}` is not part of the command grammar"),
            }),
            _ => {
                let s = self.simple_stmt()?;
                self.expect_punct(";")?;
                Ok(s)
            }
        }
    }

    /// Assignment, increment, or call, without the trailing `;`.
    fn simple_stmt(&mut self) -> Result<Stmt> {
        let pos = self.pos();
        if self.is_punct("++") || self.is_punct("--") {
            let delta = if self.is_punct("++") { 1 } else { -1 };
            self.advance();
            let lv = self.lvalue()?;
            let id = self.fresh_id();
            return Ok(incr_stmt(id, lv, delta, pos));
        }
        let e = self.expr()?;
        if self.eat_punct("=") {
            let lhs = expr_to_lvalue(e)?;
            let rhs = self.expr()?;
            let id = self.fresh_id();
            return Ok(Stmt {
                id,
                kind: StmtKind::Assign { lhs, rhs },
                pos,
            });
        }
        if self.is_punct("++") || self.is_punct("--") {
            let delta = if self.is_punct("++") { 1 } else { -1 };
            self.advance();
            let lv = expr_to_lvalue(e)?;
            let id = self.fresh_id();
            return Ok(incr_stmt(id, lv, delta, pos));
        }
        match e.kind {
            ExprKind::Call(..) | ExprKind::PreIncr(..) => {
                let id = self.fresh_id();
                Ok(Stmt {
                    id,
                    kind: StmtKind::Expr(e),
                    pos,
                })
            }
            _ => Err(syntax(pos, "expression statement has no effect")),
        }
    }

    fn lvalue(&mut self) -> Result<LValue> {
        let e = self.postfix()?;
        expr_to_lvalue(e)
    }

    pub fn expr(&mut self) -> Result<Expr> {
        let cond = self.binary(1)?;
        if self.eat_punct("?") {
            let pos = cond.pos;
            let a = self.expr()?;
            self.expect_punct(":")?;
            let b = self.expr()?;
            return Ok(Expr::new(
                ExprKind::Ternary(Box::new(cond), Box::new(a), Box::new(b)),
                pos,
            ));
        }
        Ok(cond)
    }

    fn peek_binop(&self) -> Option<BinOp> {
        let p = match self.peek() {
            Tok::Punct(p) => *p,
            _ => return None,
        };
        Some(match p {
            "+" => BinOp::Add,
            "-" => BinOp::Sub,
            "*" => BinOp::Mul,
            "/" => BinOp::Div,
            "%" => BinOp::Rem,
            "<<" => BinOp::Shl,
            ">>" => BinOp::Shr,
            "&" => BinOp::BitAnd,
            "|" => BinOp::BitOr,
            "^" => BinOp::BitXor,
            "&&" => BinOp::And,
            "||" => BinOp::Or,
            "==" => BinOp::Eq,
            "!=" => BinOp::Ne,
            "<" => BinOp::Lt,
            "<=" => BinOp::Le,
            ">" => BinOp::Gt,
            ">=" => BinOp::Ge,
            _ => return None,
        })
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.peek_binop() {
            let prec = op.precedence();
            if prec < min_prec {
                break;
            }
            self.advance();
            let rhs = self.binary(prec + 1)?;
            let pos = lhs.pos;
            lhs = Expr::new(ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)), pos);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        let pos = self.pos();
        let op = match self.peek() {
            Tok::Punct("-") => Some(UnOp::Neg),
            Tok::Punct("+") => Some(UnOp::Plus),
            Tok::Punct("!") => Some(UnOp::Not),
            Tok::Punct("~") => Some(UnOp::BitNot),
            Tok::Punct("&") | Tok::Punct("*") => {
                return Err(Error::Unsupported {
                    pos,
                    rule: "Unary",
                    msg: "address-of and dereference are outside the supported grammar".into(),
                })
            }
            Tok::Punct("++") | Tok::Punct("--") => {
                let delta = if self.is_punct("++") { 1 } else { -1 };
                self.advance();
                let lv = self.lvalue()?;
                return Ok(Expr::new(ExprKind::PreIncr(Box::new(lv), delta), pos));
            }
            _ => None,
        };
        if let Some(op) = op {
            self.advance();
            let e = self.unary()?;
            if let (UnOp::Neg, ExprKind::Const(v)) = (op, &e.kind) {
                return Ok(Expr::new(ExprKind::Const(v.wrapping_neg()), pos));
            }
            return Ok(Expr::new(ExprKind::Unary(op, Box::new(e)), pos));
        }
        if self.is_ident("sizeof") {
            self.advance();
            let paren = self.eat_punct("(");
            let name = self.ident()?;
            if paren {
                self.expect_punct(")")?;
            }
            return Ok(Expr::new(ExprKind::SizeOf(name), pos));
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.advance();
                Ok(Expr::new(ExprKind::Const(v), pos))
            }
            Tok::Punct("(") => {
                self.advance();
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Tok::Ident(name) if !is_keyword(&name) => {
                self.advance();
                if self.eat_punct("(") {
                    let mut args = Vec::new();
                    if !self.is_punct(")") {
                        loop {
                            args.push(self.expr()?);
                            if !self.eat_punct(",") {
                                break;
                            }
                        }
                    }
                    self.expect_punct(")")?;
                    return Ok(Expr::new(ExprKind::Call(name, args), pos));
                }
                if self.eat_punct("[") {
                    let idx = self.expr()?;
                    self.expect_punct("]")?;
                    return Ok(Expr::new(ExprKind::Index(name, Box::new(idx)), pos));
                }
                if let Some(v) = self.consts.get(&name) {
                    return Ok(Expr::new(ExprKind::Const(*v), pos));
                }
                Ok(Expr::new(ExprKind::Var(name), pos))
            }
            _ => Err(syntax(
                pos,
                format!("expected expression, found {}", self.describe()),
            )),
        }
    }

    fn lookup_const(&self, name: &str, pos: Pos) -> Result<i64> {
        self.consts
            .get(name)
            .copied()
            .ok_or_else(|| Error::Semantic {
                pos,
                msg: format!("`{name}` is not a compile-time constant"),
            })
    }

    fn const_eval(&self, e: &Expr) -> Result<i64> {
        const_fold(e).ok_or_else(|| Error::Semantic {
            pos: e.pos,
            msg: "expected a compile-time constant expression".into(),
        })
    }
}

fn incr_stmt(id: NodeId, lv: LValue, delta: i64, pos: Pos) -> Stmt {
    let read = match &lv {
        LValue::Var(n) => Expr::new(ExprKind::Var(n.clone()), pos),
        LValue::Index(n, i) => Expr::new(ExprKind::Index(n.clone(), i.clone()), pos),
    };
    let (op, k) = if delta > 0 {
        (BinOp::Add, delta)
    } else {
        (BinOp::Sub, -delta)
    };
    Stmt {
        id,
        kind: StmtKind::Assign {
            lhs: lv,
            rhs: Expr::new(
                ExprKind::Binary(
                    op,
                    Box::new(read),
                    Box::new(Expr::new(ExprKind::Const(k), pos)),
                ),
                pos,
            ),
        },
        pos,
    }
}

fn is_keyword(s: &str) -> bool {
    matches!(
        s,
        "int"
            | "void"
            | "if"
            | "else"
            | "while"
            | "do"
            | "for"
            | "return"
            | "secret"
            | "public"
            | "output"
            | "const"
            | "bound"
            | "sizeof"
    )
}

fn expr_to_lvalue(e: Expr) -> Result<LValue> {
    match e.kind {
        ExprKind::Var(n) => Ok(LValue::Var(n)),
        ExprKind::Index(n, i) => Ok(LValue::Index(n, i)),
        _ => Err(syntax(e.pos, "left-hand side is not an lvalue")),
    }
}

/// Folds an expression built only from literals.
pub fn const_fold(e: &Expr) -> Option<i64> {
    match &e.kind {
        ExprKind::Const(v) => Some(*v),
        ExprKind::Unary(op, a) => {
            let a = const_fold(a)?;
            Some(match op {
                UnOp::Neg => a.wrapping_neg(),
                UnOp::Plus => a,
                UnOp::Not => (a == 0) as i64,
                UnOp::BitNot => !a,
            })
        }
        ExprKind::Binary(op, a, b) => {
            let (a, b) = (const_fold(a)?, const_fold(b)?);
            crate::ir::eval_binop(*op, a, b, 64)
        }
        _ => None,
    }
}

/// Trip count of `for (i = c0; i OP c1; i = i +/- c)`, if it has that shape.
fn counted_trips(init: Option<&Stmt>, cond: &Expr, step: Option<&Stmt>) -> Option<u64> {
    let (var, start) = match &init?.kind {
        StmtKind::Assign {
            lhs: LValue::Var(v),
            rhs,
        } => (v.as_str(), const_fold(rhs)?),
        StmtKind::Local {
            name,
            init: Some(rhs),
        } => (name.as_str(), const_fold(rhs)?),
        _ => return None,
    };
    let (op, limit) = match &cond.kind {
        ExprKind::Binary(op, a, b) if matches!(&a.kind, ExprKind::Var(n) if n == var) => {
            (*op, const_fold(b)?)
        }
        _ => return None,
    };
    let delta = match &step?.kind {
        StmtKind::Assign {
            lhs: LValue::Var(v),
            rhs,
        } if v == var => match &rhs.kind {
            ExprKind::Binary(BinOp::Add, a, b) if matches!(&a.kind, ExprKind::Var(n) if n == var) => {
                const_fold(b)?
            }
            ExprKind::Binary(BinOp::Sub, a, b) if matches!(&a.kind, ExprKind::Var(n) if n == var) => {
                const_fold(b)?.checked_neg()?
            }
            _ => return None,
        },
        _ => return None,
    };
    if delta == 0 {
        return None;
    }
    let holds = |i: i64| match op {
        BinOp::Lt => i < limit,
        BinOp::Le => i <= limit,
        BinOp::Gt => i > limit,
        BinOp::Ge => i >= limit,
        BinOp::Ne => i != limit,
        _ => false,
    };
    if !matches!(
        op,
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Ne
    ) {
        return None;
    }
    let mut i = start;
    let mut n = 0u64;
    while holds(i) {
        n += 1;
        if n > MAX_COUNTED_TRIPS {
            return None;
        }
        i = i.checked_add(delta)?;
    }
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counted_for_loop_gets_constant_bound() {
        let ast = parse(
            "int a[4]; int s; void main() { int i; for (i=0; i<4; i=i+1) { s = s + a[i]; } }",
        )
        .unwrap();
        let f = ast.entry().unwrap();
        match &f.body[1].kind {
            StmtKind::For { bound, .. } => assert_eq!(*bound, Bound::Counted(4)),
            k => panic!("unexpected {k:?}"),
        }
    }

    #[test]
    fn while_without_bound_is_rejected() {
        let err = parse("int x; void main() { while (x) { x = x - 1; } }").unwrap_err();
        assert!(matches!(err, Error::UnboundedLoop { .. }), "{err}");
        assert!(err.to_string().contains("unbounded loop"));
    }

    #[test]
    fn explicit_bounds_and_consts() {
        let ast = parse(
            "const int N = 3; int x; void main() { while (x > 0) bound N { x = x - 1; } do { x++; } while (x < 2) bound 2; }",
        )
        .unwrap();
        let f = ast.entry().unwrap();
        assert!(matches!(
            &f.body[0].kind,
            StmtKind::While {
                bound: Bound::Explicit(3),
                ..
            }
        ));
        assert!(matches!(
            &f.body[1].kind,
            StmtKind::DoWhile {
                bound: Bound::Explicit(2),
                ..
            }
        ));
    }

    #[test]
    fn defines_override_consts() {
        let ast = parse_with_defines(
            "const int N = 3; secret int<1> r[N]; void main() { }",
            &[("N".into(), 12)],
        )
        .unwrap();
        assert_eq!(ast.global("r").unwrap().len, Some(12));
    }

    #[test]
    fn pointers_and_recursionless_constructs() {
        assert!(matches!(
            parse("int x; void main() { x = *x; }"),
            Err(Error::Unsupported { rule: "Unary", .. })
        ));
        assert!(matches!(
            parse("int x; void main() { x = &x; }"),
            Err(Error::Unsupported { .. })
        ));
        assert!(matches!(parse("int x;"), Err(Error::Semantic { .. })));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse("int x;\nvoid main() {\n  x = ;\n}").unwrap_err();
        match err {
            Error::Syntax { pos, .. } => assert_eq!((pos.line, pos.col), (3, 7)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn precedence() {
        let ast = parse("int x; void main() { x = 1 + 2 * 3 << 1; }").unwrap();
        match &ast.entry().unwrap().body[0].kind {
            StmtKind::Assign { rhs, .. } => assert_eq!(const_fold(rhs), Some(14)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn placements_name_consts() {
        let src = "const int OFF = 48;\n#pragma place t at 3:OFF\nint t[4]; void main() {}";
        assert_eq!(parse(src).unwrap().placements[0].offset, 48);
        let d = parse_with_defines(src, &[("OFF".into(), 8)]).unwrap();
        assert_eq!(d.placements[0].offset, 8);
    }

    #[test]
    fn placements_and_handler() {
        let ast = parse("#pragma place t at 3:0x10\n#pragma handler 9\nint t[4]; void main() {}")
            .unwrap();
        assert_eq!(ast.placements[0].page, 3);
        assert_eq!(ast.placements[0].offset, 16);
        assert_eq!(ast.handler_page, Some(9));
    }
}
