//! Property-file and formula parser.
//!
//! ```text
//! formula  := implies
//! implies  := until ('=>' implies)?
//! until    := or ('U' or)?
//! or       := and ('||' and)*
//! and      := unary ('&&' unary)*
//! unary    := ('!' | 'G' | 'F' | 'X') unary | quant | primary
//! quant    := ('forall_stack' | 'exists_stack') ID '.' formula
//!           | ('forall_buffer' | 'exists_buffer') ID 'in' FRAME '.' formula
//!           | ('all' | 'any') ID 'in' INT '..' INT ':' formula
//! primary  := '(' formula ')' | 'true' | 'false'
//!           | 'byte' '(' index ',' FRAME ')' ('=' | '!=') STATE
//!           | 'has_canary' '(' FRAME ')'
//!           | 'previous_transition' ('=' | '!=') (LABEL | '{' LABEL (',' LABEL)* '}')
//! index    := term (('+' | '-') term)*
//! term     := INT | ID | ('start' | 'end') '(' BUF ')' | '(' index ')'
//! FRAME    := 'stack' '(' ID ')' | ID
//! BUF      := 'buffer' '(' ID ',' FRAME ')' | ID
//! ```

use super::ast::{Atom, Domain, Formula, FrameRef, IndexExpr, LabelPat, Quantifier};
use crate::memstace::ByteState;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LtlError {
    #[error("syntax error at line {line}, col {col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("unknown operator `{name}` at line {line}, col {col}")]
    UnknownOperator { name: String, line: usize, col: usize },
    #[error("unsupported fragment: {0}")]
    UnsupportedFragment(String),
}

impl LtlError {
    fn shift(self, dline: usize, dcol: usize) -> LtlError {
        let fix = |line: usize, col: usize| if line == 1 { (line + dline, col + dcol) } else { (line + dline, col) };
        match self {
            LtlError::Syntax { line, col, message } => {
                let (line, col) = fix(line, col);
                LtlError::Syntax { line, col, message }
            }
            LtlError::UnknownOperator { name, line, col } => {
                let (line, col) = fix(line, col);
                LtlError::UnknownOperator { name, line, col }
            }
            e => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Id(String),
    Int(i64),
    Sym(&'static str),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const SYMBOLS: &[(&str, &str)] = &[
    ("..", ".."),
    ("=>", "=>"),
    ("->", "=>"),
    ("!=", "!="),
    ("&&", "&&"),
    ("||", "||"),
    ("⇒", "=>"),
    ("→", "=>"),
    ("≠", "!="),
    ("∧", "&&"),
    ("∨", "||"),
    ("¬", "!"),
    ("□", "G"),
    ("◇", "F"),
    ("(", "("),
    (")", ")"),
    ("{", "{"),
    ("}", "}"),
    (",", ","),
    (".", "."),
    (":", ":"),
    ("=", "="),
    ("!", "!"),
    ("+", "+"),
    ("-", "-"),
];

fn lex(text: &str) -> Result<Vec<Token>, LtlError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let (l0, c0) = (line, col);
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let v = if let Some(h) = s.strip_prefix("0x") {
                i64::from_str_radix(h, 16)
            } else {
                s.parse()
            };
            let v = v.map_err(|_| LtlError::Syntax {
                line: l0,
                col: c0,
                message: format!("bad integer `{s}`"),
            })?;
            col += i - start;
            out.push(Token {
                tok: Tok::Int(v),
                line: l0,
                col: c0,
            });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push(Token {
                tok: Tok::Id(chars[start..i].iter().collect()),
                line: l0,
                col: c0,
            });
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        let Some((pat, sym)) = SYMBOLS.iter().find(|(p, _)| rest.starts_with(p)) else {
            return Err(LtlError::Syntax {
                line: l0,
                col: c0,
                message: format!("unexpected character `{c}`"),
            });
        };
        let n = pat.chars().count();
        i += n;
        col += n;
        out.push(Token {
            tok: if *sym == "G" || *sym == "F" {
                Tok::Id(sym.to_string())
            } else {
                Tok::Sym(sym)
            },
            line: l0,
            col: c0,
        });
    }
    out.push(Token {
        tok: Tok::End,
        line,
        col,
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarKind {
    Frame,
    Buffer,
    Int,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    scope: Vec<(String, VarKind)>,
    /// Open parentheses, for unbalanced-input errors.
    open: Vec<(usize, usize)>,
}

const FRAME_OPS: &[&str] = &["byte", "has_canary", "stack", "start", "end", "buffer", "previous_transition"];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn here(&self) -> (usize, usize) {
        (self.toks[self.pos].line, self.toks[self.pos].col)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, LtlError> {
        if *self.peek() == Tok::End {
            if let Some(&(line, col)) = self.open.last() {
                return Err(LtlError::Syntax {
                    line,
                    col,
                    message: "unclosed `(`".into(),
                });
            }
        }
        let (line, col) = self.here();
        Err(LtlError::Syntax {
            line,
            col,
            message: message.into(),
        })
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    fn is_kw(&self, k: &str) -> bool {
        matches!(self.peek(), Tok::Id(x) if x == k)
    }

    fn eat_kw(&mut self, k: &str) -> bool {
        if self.is_kw(k) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), LtlError> {
        if self.is_sym("(") && s == "(" {
            let h = self.here();
            self.bump();
            self.open.push(h);
            return Ok(());
        }
        if self.eat_sym(s) {
            if s == ")" {
                self.open.pop();
            }
            Ok(())
        } else {
            self.err(format!("expected `{s}`"))
        }
    }

    fn ident(&mut self) -> Result<String, LtlError> {
        match self.peek().clone() {
            Tok::Id(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.err("expected an identifier"),
        }
    }

    fn int(&mut self) -> Result<i64, LtlError> {
        let neg = self.eat_sym("-");
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            _ => self.err("expected an integer"),
        }
    }

    fn lookup(&self, name: &str) -> Option<VarKind> {
        self.scope.iter().rev().find(|(n, _)| n == name).map(|(_, k)| *k)
    }

    fn formula(&mut self) -> Result<Formula, LtlError> {
        let lhs = self.until()?;
        if self.eat_sym("=>") {
            let rhs = self.formula()?;
            return Ok(Formula::Implies(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn until(&mut self) -> Result<Formula, LtlError> {
        let lhs = self.or()?;
        if self.is_kw("U") || self.is_kw("until") {
            self.bump();
            let rhs = self.or()?;
            return Ok(Formula::Until(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn or(&mut self) -> Result<Formula, LtlError> {
        let mut parts = vec![self.and()?];
        while self.eat_sym("||") || self.eat_kw("or") {
            parts.push(self.and()?);
        }
        Ok(if parts.len() == 1 { parts.remove(0) } else { Formula::Or(parts) })
    }

    fn and(&mut self) -> Result<Formula, LtlError> {
        let mut parts = vec![self.unary()?];
        while self.eat_sym("&&") || self.eat_kw("and") {
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 { parts.remove(0) } else { Formula::And(parts) })
    }

    fn unary(&mut self) -> Result<Formula, LtlError> {
        if self.eat_sym("!") {
            return Ok(!self.unary()?);
        }
        let Tok::Id(kw) = self.peek().clone() else {
            return self.primary();
        };
        match kw.as_str() {
            "not" => {
                self.bump();
                Ok(!self.unary()?)
            }
            "G" | "always" => {
                self.bump();
                Ok(Formula::Always(Box::new(self.unary()?)))
            }
            "F" | "eventually" => {
                self.bump();
                Ok(Formula::Eventually(Box::new(self.unary()?)))
            }
            "X" | "next" => {
                self.bump();
                Ok(Formula::Next(Box::new(self.unary()?)))
            }
            "forall_stack" | "exists_stack" => {
                self.bump();
                let var = self.ident()?;
                self.expect_sym(".")?;
                self.scope.push((var.clone(), VarKind::Frame));
                let body = self.formula();
                self.scope.pop();
                Ok(Formula::Quant {
                    q: if kw.starts_with("forall") { Quantifier::Forall } else { Quantifier::Exists },
                    var,
                    domain: Domain::Stack,
                    body: Box::new(body?),
                })
            }
            "forall_buffer" | "exists_buffer" => {
                self.bump();
                let var = self.ident()?;
                if !self.is_kw("in") {
                    return self.err("expected `in`");
                }
                self.bump();
                let frame = self.frame()?;
                self.expect_sym(".")?;
                self.scope.push((var.clone(), VarKind::Buffer));
                let body = self.formula();
                self.scope.pop();
                Ok(Formula::Quant {
                    q: if kw.starts_with("forall") { Quantifier::Forall } else { Quantifier::Exists },
                    var,
                    domain: Domain::Buffer(frame),
                    body: Box::new(body?),
                })
            }
            "all" | "any" => {
                self.bump();
                let var = self.ident()?;
                if !self.is_kw("in") {
                    return self.err("expected `in`");
                }
                self.bump();
                let lo = self.int()?;
                self.expect_sym("..")?;
                let hi = self.int()?;
                if lo < 0 || hi < lo {
                    return self.err(format!("bad range {lo}..{hi}"));
                }
                self.expect_sym(":")?;
                self.scope.push((var.clone(), VarKind::Int));
                let body = self.formula();
                self.scope.pop();
                Ok(Formula::Quant {
                    q: if kw == "all" { Quantifier::Forall } else { Quantifier::Exists },
                    var,
                    domain: Domain::Range(lo, hi),
                    body: Box::new(body?),
                })
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Formula, LtlError> {
        if self.is_sym("(") {
            self.expect_sym("(")?;
            let f = self.formula()?;
            self.expect_sym(")")?;
            return Ok(f);
        }
        let (line, col) = self.here();
        let Tok::Id(name) = self.peek().clone() else {
            return self.err("expected a formula");
        };
        match name.as_str() {
            "true" => {
                self.bump();
                Ok(Formula::True)
            }
            "false" => {
                self.bump();
                Ok(Formula::False)
            }
            "byte" => {
                self.bump();
                self.expect_sym("(")?;
                let index = self.index()?;
                self.expect_sym(",")?;
                let frame = self.frame()?;
                self.expect_sym(")")?;
                let negated = self.comparison()?;
                let state = self.ident()?;
                let Some(state) = ByteState::parse(&state) else {
                    return Err(LtlError::Syntax {
                        line,
                        col,
                        message: format!("unknown byte state `{state}`"),
                    });
                };
                Ok(Formula::Atom(Atom::Byte {
                    index,
                    frame,
                    state,
                    negated,
                }))
            }
            "has_canary" => {
                self.bump();
                self.expect_sym("(")?;
                let frame = self.frame()?;
                self.expect_sym(")")?;
                Ok(Formula::Atom(Atom::HasCanary(frame)))
            }
            "previous_transition" => {
                self.bump();
                let negated = self.comparison()?;
                let mut labels = Vec::new();
                if self.eat_sym("{") {
                    loop {
                        labels.push(self.label()?);
                        if !self.eat_sym(",") {
                            break;
                        }
                    }
                    self.expect_sym("}")?;
                } else {
                    labels.push(self.label()?);
                }
                Ok(Formula::Atom(Atom::Previous { labels, negated }))
            }
            _ => Err(LtlError::UnknownOperator { name, line, col }),
        }
    }

    /// `=` or `!=`; returns whether negated.
    fn comparison(&mut self) -> Result<bool, LtlError> {
        if self.eat_sym("=") {
            Ok(false)
        } else if self.eat_sym("!=") {
            Ok(true)
        } else {
            self.err("expected `=` or `!=`")
        }
    }

    fn label(&mut self) -> Result<LabelPat, LtlError> {
        let (line, col) = self.here();
        let name = self.ident()?;
        Ok(match name.as_str() {
            "loop" => LabelPat::Loop,
            "libc" => LabelPat::Libc,
            "push" => LabelPat::Push,
            "pop" => LabelPat::Pop,
            "write" => LabelPat::Write,
            "fe" => LabelPat::Fe,
            "fa" => LabelPat::Fa,
            "bufreg" => LabelPat::BufReg,
            other => match other.strip_prefix("call_") {
                Some(callee) if !callee.is_empty() => LabelPat::Call(callee.to_string()),
                _ => {
                    return Err(LtlError::Syntax {
                        line,
                        col,
                        message: format!("unknown transition label `{other}`"),
                    })
                }
            },
        })
    }

    fn frame(&mut self) -> Result<FrameRef, LtlError> {
        if self.is_kw("stack") {
            self.bump();
            self.expect_sym("(")?;
            let f = self.frame_name()?;
            self.expect_sym(")")?;
            return Ok(f);
        }
        self.frame_name()
    }

    fn frame_name(&mut self) -> Result<FrameRef, LtlError> {
        let (line, col) = self.here();
        let name = self.ident()?;
        match self.lookup(&name) {
            Some(VarKind::Frame) => Ok(FrameRef::Var(name)),
            Some(_) => Err(LtlError::Syntax {
                line,
                col,
                message: format!("`{name}` is not a frame variable"),
            }),
            None => Ok(FrameRef::Named(name)),
        }
    }

    fn buffer(&mut self) -> Result<String, LtlError> {
        if self.is_kw("buffer") {
            self.bump();
            self.expect_sym("(")?;
            let b = self.buffer_var()?;
            self.expect_sym(",")?;
            self.frame()?;
            self.expect_sym(")")?;
            return Ok(b);
        }
        self.buffer_var()
    }

    fn buffer_var(&mut self) -> Result<String, LtlError> {
        let (line, col) = self.here();
        let name = self.ident()?;
        if self.lookup(&name) == Some(VarKind::Buffer) {
            Ok(name)
        } else {
            Err(LtlError::Syntax {
                line,
                col,
                message: format!("`{name}` is not a bound buffer variable"),
            })
        }
    }

    fn index(&mut self) -> Result<IndexExpr, LtlError> {
        let mut e = self.term()?;
        loop {
            if self.eat_sym("+") {
                e = IndexExpr::Add(Box::new(e), Box::new(self.term()?));
            } else if self.eat_sym("-") {
                e = IndexExpr::Sub(Box::new(e), Box::new(self.term()?));
            } else {
                return Ok(e);
            }
        }
    }

    fn term(&mut self) -> Result<IndexExpr, LtlError> {
        let (line, col) = self.here();
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(IndexExpr::Const(v))
            }
            Tok::Sym("(") => {
                self.expect_sym("(")?;
                let e = self.index()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Id(name) if name == "start" || name == "end" => {
                self.bump();
                self.expect_sym("(")?;
                let b = self.buffer()?;
                self.expect_sym(")")?;
                Ok(if name == "start" { IndexExpr::Start(b) } else { IndexExpr::End(b) })
            }
            Tok::Id(name) => {
                self.bump();
                match self.lookup(&name) {
                    Some(VarKind::Int) => Ok(IndexExpr::Var(name)),
                    _ if self.is_sym("(") && !FRAME_OPS.contains(&name.as_str()) => {
                        Err(LtlError::UnknownOperator { name, line, col })
                    }
                    _ => Err(LtlError::Syntax {
                        line,
                        col,
                        message: format!("`{name}` is not a bound index variable"),
                    }),
                }
            }
            _ => self.err("expected a byte index"),
        }
    }
}

/// Parse one formula.
pub fn parse_formula(text: &str) -> Result<Formula, LtlError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
        scope: Vec::new(),
        open: Vec::new(),
    };
    let f = p.formula()?;
    if *p.peek() != Tok::End {
        if p.is_sym(")") {
            return p.err("unbalanced `)`");
        }
        return p.err("unexpected trailing input");
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Property {
    pub name: String,
    pub formula: Formula,
    pub source: String,
    pub cwes: Vec<String>,
}

/// Parse a property file: `property <name> { ltl: <formula> cwe: [..] }`
/// blocks, with `#` comments.
pub fn parse_properties(text: &str) -> Result<Vec<Property>, LtlError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut s = Scanner { chars: &chars, i: 0, line: 1, col: 1 };
    loop {
        s.skip_ws();
        if s.done() {
            return Ok(out);
        }
        if !s.eat_word("property") {
            return Err(s.error("expected `property`"));
        }
        s.skip_ws();
        let name = s.name()?;
        s.skip_ws();
        if !s.eat_char('{') {
            return Err(s.error("expected `{`"));
        }
        let mut formula = None;
        let mut cwes = Vec::new();
        loop {
            s.skip_ws();
            if s.eat_char('}') {
                break;
            }
            if s.eat_word("ltl") {
                s.skip_ws();
                if !s.eat_char(':') {
                    return Err(s.error("expected `:`"));
                }
                let (line, col) = (s.line, s.col);
                let src = s.formula_text();
                let f = parse_formula(&src).map_err(|e| e.shift(line - 1, col - 1))?;
                formula = Some((f, src.trim().to_string()));
            } else if s.eat_word("cwe") {
                s.skip_ws();
                if !s.eat_char(':') {
                    return Err(s.error("expected `:`"));
                }
                s.skip_ws();
                if !s.eat_char('[') {
                    return Err(s.error("expected `[`"));
                }
                let list = s.until(']');
                if !s.eat_char(']') {
                    return Err(s.error("unclosed `[`"));
                }
                cwes = list
                    .split(',')
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect();
            } else if s.done() {
                return Err(s.error("unclosed property block"));
            } else {
                return Err(s.error("expected `ltl:`, `cwe:` or `}`"));
            }
        }
        let Some((formula, source)) = formula else {
            return Err(s.error(format!("property `{name}` has no ltl formula")));
        };
        out.push(Property {
            name,
            formula,
            source,
            cwes,
        });
    }
}

struct Scanner<'a> {
    chars: &'a [char],
    i: usize,
    line: usize,
    col: usize,
}

impl Scanner<'_> {
    fn done(&self) -> bool {
        self.i >= self.chars.len()
    }

    fn advance(&mut self) {
        if self.chars[self.i] == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        self.i += 1;
    }

    fn skip_ws(&mut self) {
        while !self.done() {
            match self.chars[self.i] {
                '#' => {
                    while !self.done() && self.chars[self.i] != '\n' {
                        self.advance();
                    }
                }
                c if c.is_whitespace() => self.advance(),
                _ => break,
            }
        }
    }

    fn error(&self, message: impl Into<String>) -> LtlError {
        LtlError::Syntax {
            line: self.line,
            col: self.col,
            message: message.into(),
        }
    }

    fn eat_char(&mut self, c: char) -> bool {
        if !self.done() && self.chars[self.i] == c {
            self.advance();
            true
        } else {
            false
        }
    }

    fn eat_word(&mut self, w: &str) -> bool {
        let n = w.chars().count();
        if self.i + n > self.chars.len() || self.chars[self.i..self.i + n].iter().copied().ne(w.chars()) {
            return false;
        }
        if self.chars.get(self.i + n).is_some_and(|c| c.is_alphanumeric() || *c == '_') {
            return false;
        }
        for _ in 0..n {
            self.advance();
        }
        true
    }

    fn until(&mut self, stop: char) -> String {
        let mut out = String::new();
        while !self.done() && self.chars[self.i] != stop {
            out.push(self.chars[self.i]);
            self.advance();
        }
        out
    }

    /// A quoted string or a bare identifier.
    fn name(&mut self) -> Result<String, LtlError> {
        if self.eat_char('"') {
            let n = self.until('"');
            if !self.eat_char('"') {
                return Err(self.error("unterminated string"));
            }
            return Ok(n);
        }
        let mut n = String::new();
        while !self.done() && (self.chars[self.i].is_alphanumeric() || self.chars[self.i] == '_') {
            n.push(self.chars[self.i]);
            self.advance();
        }
        if n.is_empty() {
            Err(self.error("expected a property name"))
        } else {
            Ok(n)
        }
    }

    /// Formula text up to a `cwe:` field or the block's closing brace.
    fn formula_text(&mut self) -> String {
        let mut out = String::new();
        let mut depth = 0i32;
        while !self.done() {
            let c = self.chars[self.i];
            if c == '#' {
                while !self.done() && self.chars[self.i] != '\n' {
                    out.push(' ');
                    self.advance();
                }
                continue;
            }
            if depth == 0 && c == '}' {
                break;
            }
            if depth == 0 && self.at_field("cwe") {
                break;
            }
            match c {
                '{' => depth += 1,
                '}' => depth -= 1,
                _ => {}
            }
            out.push(c);
            self.advance();
        }
        out
    }

    fn at_field(&self, w: &str) -> bool {
        let prev_ok = self.i == 0 || !self.chars[self.i - 1].is_alphanumeric() && self.chars[self.i - 1] != '_';
        let n = w.chars().count();
        if !prev_ok || self.i + n > self.chars.len() || self.chars[self.i..self.i + n].iter().copied().ne(w.chars()) {
            return false;
        }
        self.chars[self.i + n..]
            .iter()
            .find(|c| !c.is_whitespace())
            .is_some_and(|c| *c == ':')
    }
}
