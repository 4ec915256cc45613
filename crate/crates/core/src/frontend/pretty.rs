use std::fmt::Write;

use super::ast::*;

/// Renders an AST back to concrete syntax that reparses to the same tree.
pub fn pretty(ast: &Ast) -> String {
    let mut out = String::new();
    if let Some(h) = ast.handler_page {
        let _ = writeln!(out, "#pragma handler {h}");
    }
    for p in &ast.placements {
        let _ = writeln!(out, "#pragma place {} at {}:{}", p.name, p.page, p.offset);
    }
    for c in &ast.consts {
        let _ = writeln!(out, "const int {} = {};", c.name, c.value);
    }
    for g in &ast.globals {
        let q = match g.qual {
            Qualifier::Plain => "",
            Qualifier::Secret => "secret ",
            Qualifier::Public => "public ",
            Qualifier::Output => "output ",
        };
        let _ = write!(out, "{q}int");
        if let Some(w) = g.width {
            let _ = write!(out, "<{w}>");
        }
        let _ = write!(out, " {}", g.name);
        if let Some(n) = g.len {
            let _ = write!(out, "[{n}]");
        }
        if !g.init.is_empty() {
            let vals: Vec<String> = g.init.iter().map(|v| v.to_string()).collect();
            if g.len.is_some() {
                let _ = write!(out, " = {{{}}}", vals.join(", "));
            } else {
                let _ = write!(out, " = {}", vals[0]);
            }
        }
        out.push_str(";\n");
    }
    for f in &ast.functions {
        out.push('\n');
        let params: Vec<String> = f.params.iter().map(|p| format!("int {p}")).collect();
        let ret = if f.returns_value { "int" } else { "void" };
        let _ = writeln!(out, "{ret} {}({}) {{", f.name, params.join(", "));
        block(&mut out, &f.body, 1);
        out.push_str("}\n");
    }
    out
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("    ");
    }
}

fn block(out: &mut String, body: &[Stmt], depth: usize) {
    for s in body {
        stmt(out, s, depth);
    }
}

fn simple(s: &Stmt) -> String {
    match &s.kind {
        StmtKind::Local { name, init } => match init {
            Some(e) => format!("int {name} = {}", expr(e)),
            None => format!("int {name}"),
        },
        StmtKind::Assign { lhs, rhs } => format!("{} = {}", lvalue(lhs), expr(rhs)),
        StmtKind::Expr(e) => expr(e),
        _ => String::new(),
    }
}

fn stmt(out: &mut String, s: &Stmt, depth: usize) {
    indent(out, depth);
    match &s.kind {
        StmtKind::Local { .. } | StmtKind::Assign { .. } | StmtKind::Expr(_) => {
            let _ = writeln!(out, "{};", simple(s));
        }
        StmtKind::If {
            cond,
            then_branch,
            else_branch,
        } => {
            let _ = writeln!(out, "if ({}) {{", expr(cond));
            block(out, then_branch, depth + 1);
            indent(out, depth);
            if else_branch.is_empty() {
                out.push_str("}\n");
            } else {
                out.push_str("} else {\n");
                block(out, else_branch, depth + 1);
                indent(out, depth);
                out.push_str("}\n");
            }
        }
        StmtKind::While { cond, bound, body } => {
            let _ = writeln!(out, "while ({}) bound {} {{", expr(cond), bound.value());
            block(out, body, depth + 1);
            indent(out, depth);
            out.push_str("}\n");
        }
        StmtKind::DoWhile { body, cond, bound } => {
            out.push_str("do {\n");
            block(out, body, depth + 1);
            indent(out, depth);
            let _ = writeln!(out, "}} while ({}) bound {};", expr(cond), bound.value());
        }
        StmtKind::For {
            init,
            cond,
            step,
            bound,
            body,
        } => {
            let i = init.as_deref().map(simple).unwrap_or_default();
            let st = step.as_deref().map(simple).unwrap_or_default();
            let _ = write!(out, "for ({i}; {}; {st})", expr(cond));
            if let Bound::Explicit(n) = bound {
                let _ = write!(out, " bound {n}");
            }
            out.push_str(" {\n");
            block(out, body, depth + 1);
            indent(out, depth);
            out.push_str("}\n");
        }
        StmtKind::Return(e) => match e {
            Some(e) => {
                let _ = writeln!(out, "return {};", expr(e));
            }
            None => out.push_str("return;\n"),
        },
        StmtKind::BeginSensitive => out.push_str("#pragma begin_pf_sensitive\n"),
        StmtKind::EndSensitive => out.push_str("#pragma end_pf_sensitive\n"),
    }
}

fn lvalue(lv: &LValue) -> String {
    match lv {
        LValue::Var(n) => n.clone(),
        LValue::Index(n, i) => format!("{n}[{}]", expr(i)),
    }
}

/// Operand rendering: compound operands are parenthesized.
fn operand(e: &Expr) -> String {
    match &e.kind {
        ExprKind::Binary(..) | ExprKind::Ternary(..) => format!("({})", expr(e)),
        ExprKind::Const(v) if *v < 0 => format!("({v})"),
        _ => expr(e),
    }
}

pub fn expr(e: &Expr) -> String {
    match &e.kind {
        ExprKind::Const(v) => v.to_string(),
        ExprKind::Var(n) => n.clone(),
        ExprKind::Index(n, i) => format!("{n}[{}]", expr(i)),
        ExprKind::Unary(op, a) => {
            let s = match op {
                UnOp::Neg => "-",
                UnOp::Plus => "+",
                UnOp::Not => "!",
                UnOp::BitNot => "~",
            };
            format!("{s}{}", operand(a))
        }
        ExprKind::Binary(op, a, b) => format!("{} {} {}", operand(a), op.symbol(), operand(b)),
        ExprKind::Ternary(c, a, b) => format!("{} ? {} : {}", operand(c), operand(a), operand(b)),
        ExprKind::Call(n, args) => {
            let a: Vec<String> = args.iter().map(expr).collect();
            format!("{n}({})", a.join(", "))
        }
        ExprKind::PreIncr(lv, d) => {
            let s = if *d > 0 { "++" } else { "--" };
            format!("({s}{})", lvalue(lv))
        }
        ExprKind::SizeOf(n) => format!("sizeof({n})"),
    }
}

#[cfg(test)]
mod tests {
    use super::super::parser::parse;
    use super::*;

    const SRC: &str = r#"
#pragma handler 0
#pragma place t at 2:8
const int N = 4;
secret int<8> k;
int t[N] = {1, -2, 3, 4};
output int y;

int f(int a, int b) {
    int c = a > b ? a - b : -(b - a);
    return c;
}

void main() {
    int i;
    #pragma begin_pf_sensitive
    for (i = 0; i < N; i++) {
        if (k & 1) { y = y + t[i]; } else if (k == 3) y = f(y, -7); else { y = ~y; }
    }
    while (y > 0 && !(k == 2)) bound 3 { y = y >> 1; }
    do { y = ++t[0]; } while (y != 0) bound 2;
    for (int j = 10; j > 0; j = j - 3) bound 9 { y = y * 2 % 7; }
    #pragma end_pf_sensitive
}
"#;

    #[test]
    fn round_trip() {
        let a = parse(SRC).unwrap();
        let printed = pretty(&a);
        let b = parse(&printed).unwrap();
        assert_eq!(a.without_positions(), b.without_positions(), "{printed}");
        assert_eq!(printed, pretty(&b));
    }
}
