//! Recursive-descent parser for the rate-law language.
//!
//! ```text
//! expr  := sum | term
//! sum   := "sum(" expr ("," expr)+ ")"
//! term  := "ma(" ident ("," species)+ ")"
//!        | "mm(" ident "," ident "," species [";" comp ("," comp)*] ")"
//!        | "neg(" expr ")"
//!        | "const_scale(" factor "," expr ")"
//! comp  := factor "*" species
//! factor:= (number | ident) ["^" (number | ident)]
//! ```
//!
//! Structures are written as `species' = expr` equations separated by `;` or newlines.

use std::fmt;

use thiserror::Error;

use super::expr::{CompetitionTerm, Factor, RateExpr, Scalar};

const MAX_NESTING: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{line}:{col}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    Lexical(char),
    BadNumber(String),
    Unexpected { expected: String, found: String },
    UnknownPrimitive(String),
    Arity { primitive: &'static str, message: String },
    TooDeep,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Lexical(c) => write!(f, "unexpected character `{c}`"),
            ParseErrorKind::BadNumber(s) => write!(f, "malformed number `{s}`"),
            ParseErrorKind::Unexpected { expected, found } => {
                write!(f, "expected {expected}, found {found}")
            }
            ParseErrorKind::UnknownPrimitive(p) => write!(f, "unknown primitive `{p}`"),
            ParseErrorKind::Arity { primitive, message } => {
                write!(f, "wrong number of arguments to `{primitive}`: {message}")
            }
            ParseErrorKind::TooDeep => write!(f, "expression nested too deeply"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    LParen,
    RParen,
    Comma,
    Semi,
    Star,
    Caret,
    Prime,
    Eq,
    Newline,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Num(v) => write!(f, "`{v}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::Star => f.write_str("`*`"),
            Tok::Caret => f.write_str("`^`"),
            Tok::Prime => f.write_str("`'`"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Newline => f.write_str("end of line"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let single = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            ';' => Some(Tok::Semi),
            '*' => Some(Tok::Star),
            '^' => Some(Tok::Caret),
            '\'' => Some(Tok::Prime),
            '=' => Some(Tok::Eq),
            '\n' => Some(Tok::Newline),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Spanned {
                tok,
                line: start_line,
                col: start_col,
            });
            i += 1;
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            out.push(Spanned {
                tok: Tok::Ident(s),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            col += i - start;
            let v: f64 = s.parse().map_err(|_| ParseError {
                line: start_line,
                col: start_col,
                kind: ParseErrorKind::BadNumber(s.clone()),
            })?;
            out.push(Spanned {
                tok: Tok::Num(v),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        return Err(ParseError {
            line,
            col,
            kind: ParseErrorKind::Lexical(c),
        });
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    depth: usize,
    skip_newlines: bool,
}

impl Parser {
    fn new(text: &str, skip_newlines: bool) -> Result<Self, ParseError> {
        Ok(Parser {
            toks: lex(text)?,
            pos: 0,
            depth: 0,
            skip_newlines,
        })
    }

    fn skip_nl(&mut self) {
        while self.skip_newlines && self.toks[self.pos].tok == Tok::Newline {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> &Spanned {
        self.skip_nl();
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Spanned {
        self.skip_nl();
        let t = self.toks[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn err_at(t: &Spanned, kind: ParseErrorKind) -> ParseError {
        ParseError {
            line: t.line,
            col: t.col,
            kind,
        }
    }

    fn unexpected(t: &Spanned, expected: &str) -> ParseError {
        Self::err_at(
            t,
            ParseErrorKind::Unexpected {
                expected: expected.to_string(),
                found: t.tok.to_string(),
            },
        )
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<Spanned, ParseError> {
        let t = self.next();
        if t.tok == tok {
            Ok(t)
        } else {
            Err(Self::unexpected(&t, expected))
        }
    }

    fn ident(&mut self, expected: &str) -> Result<String, ParseError> {
        let t = self.next();
        match t.tok {
            Tok::Ident(s) => Ok(s),
            _ => Err(Self::unexpected(&t, expected)),
        }
    }

    /// Consumes `,` between required arguments; a premature `)` is an arity error.
    fn arg_sep(&mut self, primitive: &'static str, message: &str) -> Result<(), ParseError> {
        let t = self.next();
        match t.tok {
            Tok::Comma => Ok(()),
            Tok::RParen => Err(Self::err_at(
                &t,
                ParseErrorKind::Arity {
                    primitive,
                    message: message.to_string(),
                },
            )),
            _ => Err(Self::unexpected(&t, "`,`")),
        }
    }

    fn scalar(&mut self) -> Result<Scalar, ParseError> {
        let t = self.next();
        match t.tok {
            Tok::Num(v) => Ok(Scalar::Num(v)),
            Tok::Ident(s) => Ok(Scalar::Name(s)),
            _ => Err(Self::unexpected(&t, "number or identifier")),
        }
    }

    fn factor(&mut self) -> Result<Factor, ParseError> {
        let base = self.scalar()?;
        let exponent = if self.peek().tok == Tok::Caret {
            self.next();
            Some(self.scalar()?)
        } else {
            None
        };
        Ok(Factor { base, exponent })
    }

    fn expr(&mut self) -> Result<RateExpr, ParseError> {
        let head = self.next();
        let name = match &head.tok {
            Tok::Ident(s) => s.clone(),
            _ => return Err(Self::unexpected(&head, "rate primitive")),
        };
        let primitive: &'static str = match name.as_str() {
            "sum" => "sum",
            "ma" => "ma",
            "mm" => "mm",
            "neg" => "neg",
            "const_scale" => "const_scale",
            _ => {
                return Err(Self::err_at(&head, ParseErrorKind::UnknownPrimitive(name)));
            }
        };
        self.expect(Tok::LParen, "`(`")?;
        self.depth += 1;
        if self.depth > MAX_NESTING {
            return Err(Self::err_at(&head, ParseErrorKind::TooDeep));
        }
        let arity = |message: String| {
            Self::err_at(
                &head,
                ParseErrorKind::Arity {
                    primitive,
                    message,
                },
            )
        };
        let out = match primitive {
            "sum" => {
                let mut children = vec![self.expr()?];
                while self.peek().tok == Tok::Comma {
                    self.next();
                    children.push(self.expr()?);
                }
                self.expect(Tok::RParen, "`,` or `)`")?;
                if children.len() < 2 {
                    return Err(arity("sum needs at least 2 operands".into()));
                }
                RateExpr::Sum(children)
            }
            "ma" => {
                let rate = self.ident("rate slot")?;
                let mut reactants = Vec::new();
                while self.peek().tok == Tok::Comma {
                    self.next();
                    reactants.push(self.ident("species")?);
                }
                self.expect(Tok::RParen, "`,` or `)`")?;
                if reactants.is_empty() {
                    return Err(arity("mass action needs at least one species".into()));
                }
                RateExpr::MassAction { rate, reactants }
            }
            "mm" => {
                let vmax = self.ident("vmax slot")?;
                self.arg_sep("mm", "expected vmax, km and substrate")?;
                let km = self.ident("km slot")?;
                self.arg_sep("mm", "expected vmax, km and substrate")?;
                let substrate = self.ident("species")?;
                let mut competition = Vec::new();
                let t = self.next();
                match t.tok {
                    Tok::RParen => {}
                    Tok::Semi => {
                        loop {
                            let weight = self.factor()?;
                            self.expect(Tok::Star, "`*`")?;
                            let species = self.ident("species")?;
                            competition.push(CompetitionTerm { weight, species });
                            let t = self.next();
                            match t.tok {
                                Tok::Comma => continue,
                                Tok::RParen => break,
                                _ => return Err(Self::unexpected(&t, "`,` or `)`")),
                            }
                        }
                    }
                    Tok::Comma => {
                        return Err(Self::err_at(
                            &t,
                            ParseErrorKind::Arity {
                                primitive: "mm",
                                message: "competition terms must follow `;`".into(),
                            },
                        ))
                    }
                    _ => return Err(Self::unexpected(&t, "`;` or `)`")),
                }
                RateExpr::Saturating {
                    vmax,
                    km,
                    substrate,
                    competition,
                }
            }
            "neg" => {
                let inner = self.expr()?;
                let t = self.next();
                match t.tok {
                    Tok::RParen => RateExpr::Neg(Box::new(inner)),
                    Tok::Comma => return Err(arity("neg takes exactly one operand".into())),
                    _ => return Err(Self::unexpected(&t, "`)`")),
                }
            }
            _ => {
                let factor = self.factor()?;
                self.arg_sep("const_scale", "expected a factor and an expression")?;
                let inner = self.expr()?;
                let t = self.next();
                match t.tok {
                    Tok::RParen => RateExpr::Scale {
                        factor,
                        expr: Box::new(inner),
                    },
                    Tok::Comma => {
                        return Err(arity("const_scale takes a factor and one expression".into()))
                    }
                    _ => return Err(Self::unexpected(&t, "`)`")),
                }
            }
        };
        self.depth -= 1;
        Ok(out)
    }
}

pub fn parse_rate_expr(text: &str) -> Result<RateExpr, ParseError> {
    let mut p = Parser::new(text, true)?;
    let e = p.expr()?;
    let t = p.next();
    if t.tok != Tok::Eof {
        return Err(Parser::unexpected(&t, "end of input"));
    }
    Ok(e)
}

/// Parses `x' = expr` equations separated by `;` or line breaks.
pub fn parse_equations(text: &str) -> Result<Vec<(String, RateExpr)>, ParseError> {
    let mut p = Parser::new(text, false)?;
    let mut out = Vec::new();
    loop {
        while matches!(p.toks[p.pos].tok, Tok::Newline | Tok::Semi) {
            p.pos += 1;
        }
        if p.toks[p.pos].tok == Tok::Eof {
            break;
        }
        let lhs = p.ident("species name")?;
        p.expect(Tok::Prime, "`'`")?;
        p.expect(Tok::Eq, "`=`")?;
        p.skip_newlines = true;
        let e = p.expr()?;
        p.skip_newlines = false;
        out.push((lhs, e));
        let t = &p.toks[p.pos];
        match t.tok {
            Tok::Semi | Tok::Newline => p.pos += 1,
            Tok::Eof => break,
            _ => return Err(Parser::unexpected(t, "`;` or end of line")),
        }
    }
    Ok(out)
}
