use crate::error::{Error, Pos, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    /// Everything after `#pragma` up to the end of the line.
    Pragma(String),
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub pos: Pos,
}

const PUNCTS: &[&str] = &[
    "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "++", "--", "+", "-", "*", "/", "%", "<", ">",
    "=", "!", "~", "&", "|", "^", "?", ":", ";", ",", "(", ")", "{", "}", "[", "]",
];

pub fn lex(src: &str) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0usize;
    let mut line = 1u32;
    let mut col = 1u32;

    macro_rules! bump {
        () => {{
            if bytes[i] == b'\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            bump!();
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                bump!();
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let start = Pos { line, col };
            bump!();
            bump!();
            loop {
                if i + 1 >= bytes.len() {
                    return Err(Error::Syntax {
                        pos: start,
                        msg: "unterminated block comment".into(),
                    });
                }
                if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                    bump!();
                    bump!();
                    break;
                }
                bump!();
            }
            continue;
        }
        let pos = Pos { line, col };
        if c == b'#' {
            let start = i;
            while i < bytes.len() && bytes[i] != b'\n' {
                bump!();
            }
            let text = src[start..i].trim();
            let rest = text
                .strip_prefix('#')
                .map(str::trim_start)
                .and_then(|t| t.strip_prefix("pragma"))
                .ok_or_else(|| Error::Unsupported {
                    pos,
                    rule: "Program",
                    msg: format!("preprocessor directive `{text}` (only #pragma is accepted)"),
                })?;
            out.push(Token {
                tok: Tok::Pragma(rest.trim().to_string()),
                pos,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                bump!();
            }
            out.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                pos,
            });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                bump!();
            }
            let text = src[start..i].replace('_', "");
            let parsed = if let Some(h) =
                text.strip_prefix("0x").or_else(|| text.strip_prefix("0X"))
            {
                u64::from_str_radix(h, 16).map(|v| v as i64)
            } else if let Some(b) = text.strip_prefix("0b").or_else(|| text.strip_prefix("0B")) {
                u64::from_str_radix(b, 2).map(|v| v as i64)
            } else {
                text.parse::<u64>().map(|v| v as i64)
            };
            let v = parsed.map_err(|_| Error::Syntax {
                pos,
                msg: format!("bad integer literal `{}`", &src[start..i]),
            })?;
            out.push(Token {
                tok: Tok::Int(v),
                pos,
            });
            continue;
        }
        let rest = &src[i..];
        match PUNCTS.iter().find(|p| rest.starts_with(**p)) {
            Some(p) => {
                for _ in 0..p.len() {
                    bump!();
                }
                out.push(Token {
                    tok: Tok::Punct(p),
                    pos,
                });
            }
            None => {
                let ch = rest.chars().next().unwrap_or('?');
                return Err(Error::Syntax {
                    pos,
                    msg: format!("unexpected character `{ch}`"),
                });
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        pos: Pos { line, col },
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_literals_and_pragmas() {
        let t = lex("#pragma begin_pf_sensitive\nx = 0x1C + 0b11; // c\n/* b */ y<<=").unwrap();
        assert_eq!(t[0].tok, Tok::Pragma("begin_pf_sensitive".into()));
        assert_eq!(t[1].pos, Pos { line: 2, col: 1 });
        assert!(t.iter().any(|k| k.tok == Tok::Int(28)));
        assert!(t.iter().any(|k| k.tok == Tok::Int(3)));
        assert!(t.iter().any(|k| k.tok == Tok::Punct("<<")));
    }

    #[test]
    fn rejects_other_directives() {
        assert!(matches!(
            lex("#include <x.h>"),
            Err(Error::Unsupported { .. })
        ));
        assert!(matches!(lex("x = $;"), Err(Error::Syntax { .. })));
    }
}
