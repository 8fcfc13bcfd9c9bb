use crate::measure::Unit;

use super::ast::*;
use super::QueryError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64, Unit),
    LParen,
    RParen,
    Comma,
    Colon,
    Arrow,
    EqEq,
    Dot,
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    i: usize,
    line: usize,
    col: usize,
}

type Spanned = (Tok, usize, usize);

impl<'a> Lexer<'a> {
    fn err(&self, expected: &str) -> QueryError {
        QueryError::Syntax { line: self.line, col: self.col, expected: expected.into() }
    }

    fn bump(&mut self) -> u8 {
        let c = self.src[self.i];
        self.i += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        c
    }

    fn peek(&self, k: usize) -> Option<u8> {
        self.src.get(self.i + k).copied()
    }

    fn tokens(mut self) -> Result<Vec<Spanned>, QueryError> {
        let mut out = Vec::new();
        loop {
            while let Some(c) = self.peek(0) {
                if c.is_ascii_whitespace() {
                    self.bump();
                } else if c == b'#' || (c == b'/' && self.peek(1) == Some(b'/')) {
                    while self.peek(0).is_some_and(|c| c != b'\n') {
                        self.bump();
                    }
                } else {
                    break;
                }
            }
            let (line, col) = (self.line, self.col);
            let Some(c) = self.peek(0) else {
                out.push((Tok::Eof, line, col));
                return Ok(out);
            };
            let tok = match c {
                b'(' | b')' | b',' | b'.' => {
                    self.bump();
                    match c {
                        b'(' => Tok::LParen,
                        b')' => Tok::RParen,
                        b',' => Tok::Comma,
                        _ => Tok::Dot,
                    }
                }
                b':' if self.peek(1) == Some(b'-') => {
                    self.bump();
                    self.bump();
                    Tok::Arrow
                }
                b':' => {
                    self.bump();
                    Tok::Colon
                }
                b'<' if self.peek(1) == Some(b'=') => {
                    self.bump();
                    self.bump();
                    Tok::Arrow
                }
                b'=' if self.peek(1) == Some(b'=') => {
                    self.bump();
                    self.bump();
                    Tok::EqEq
                }
                b'\'' | b'"' => self.string(c)?,
                b'-' | b'0'..=b'9' => self.number()?,
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let start = self.i;
                    while self.peek(0).is_some_and(|c| is_ident_char(c as char)) {
                        self.bump();
                    }
                    Tok::Ident(String::from_utf8_lossy(&self.src[start..self.i]).into_owned())
                }
                _ => return Err(self.err("a term, `(`, `)`, `,`, `<=` or `==`")),
            };
            out.push((tok, line, col));
        }
    }

    fn string(&mut self, quote: u8) -> Result<Tok, QueryError> {
        self.bump();
        let mut s = Vec::new();
        loop {
            match self.peek(0) {
                None | Some(b'\n') => return Err(self.err("closing quote")),
                Some(b'\\') => {
                    self.bump();
                    match self.peek(0) {
                        Some(c @ (b'\\' | b'\'' | b'"')) => {
                            self.bump();
                            s.push(c);
                        }
                        _ => return Err(self.err("escape \\\\, \\' or \\\"")),
                    }
                }
                Some(c) if c == quote => {
                    self.bump();
                    return Ok(Tok::Str(String::from_utf8_lossy(&s).into_owned()));
                }
                Some(_) => s.push(self.bump()),
            }
        }
    }

    fn number(&mut self) -> Result<Tok, QueryError> {
        let start = self.i;
        if self.peek(0) == Some(b'-') {
            self.bump();
            if !self.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                return Err(self.err("a digit after `-`"));
            }
        }
        let digits = |l: &mut Self| {
            while l.peek(0).is_some_and(|c| c.is_ascii_digit()) {
                l.bump();
            }
        };
        digits(self);
        if self.peek(0) == Some(b'.') && self.peek(1).is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
            digits(self);
        }
        if matches!(self.peek(0), Some(b'e' | b'E'))
            && (self.peek(1).is_some_and(|c| c.is_ascii_digit())
                || (matches!(self.peek(1), Some(b'-' | b'+')) && self.peek(2).is_some_and(|c| c.is_ascii_digit())))
        {
            self.bump();
            self.bump();
            digits(self);
        }
        let text = std::str::from_utf8(&self.src[start..self.i]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| self.err("a number"))?;
        let ustart = self.i;
        while self.peek(0).is_some_and(|c| c.is_ascii_alphabetic() || c == b'%') {
            self.bump();
        }
        let sym = std::str::from_utf8(&self.src[ustart..self.i]).expect("ascii");
        let unit = sym.parse::<Unit>().map_err(|_| self.err("a known unit"))?;
        Ok(Tok::Num(value, unit))
    }
}

struct Parser {
    toks: Vec<Spanned>,
    at: usize,
    fresh: usize,
}

impl Parser {
    fn new(src: &str) -> Result<Self, QueryError> {
        let toks = Lexer { src: src.as_bytes(), i: 0, line: 1, col: 1 }.tokens()?;
        Ok(Self { toks, at: 0, fresh: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err(&self, expected: &str) -> QueryError {
        let (_, line, col) = self.toks[self.at];
        QueryError::Syntax { line, col, expected: expected.into() }
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<(), QueryError> {
        if *self.peek() == t {
            self.next();
            Ok(())
        } else {
            Err(self.err(what))
        }
    }

    fn statements(&mut self) -> Result<Vec<Rule>, QueryError> {
        let mut out = Vec::new();
        while *self.peek() != Tok::Eof {
            out.push(self.statement()?);
        }
        Ok(out)
    }

    fn statement(&mut self) -> Result<Rule, QueryError> {
        let id = match (self.peek().clone(), self.peek2()) {
            (Tok::Ident(id), Tok::Colon) => {
                if !is_statement_id(&id) {
                    return Err(self.err("a statement identifier R<int> or F<int>"));
                }
                self.next();
                self.next();
                Some(id)
            }
            _ => None,
        };
        let (_, line, col) = self.toks[self.at];
        let head = self.atom("a rule head")?;
        if head.pred.len() >= 3 && head.pred[..3].eq_ignore_ascii_case("fn_") {
            return Err(QueryError::Syntax { line, col, expected: "a predicate (function calls cannot be heads)".into() });
        }
        let mut body = Vec::new();
        if *self.peek() == Tok::Arrow {
            self.next();
            loop {
                body.push(self.literal()?);
                if *self.peek() != Tok::Comma {
                    break;
                }
                self.next();
            }
        }
        if *self.peek() == Tok::Dot {
            self.next();
        }
        let rule = Rule { id, head, body };
        check_safety(&rule)?;
        Ok(rule)
    }

    fn name(&mut self, what: &str) -> Result<String, QueryError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            _ => Err(self.err(what)),
        }
    }

    fn atom(&mut self, what: &str) -> Result<Atom, QueryError> {
        let pred = self.name(what)?;
        let mut args = Vec::new();
        if *self.peek() == Tok::LParen {
            self.next();
            if *self.peek() != Tok::RParen {
                loop {
                    args.push(self.term()?);
                    if *self.peek() != Tok::Comma {
                        break;
                    }
                    self.next();
                }
            }
            self.expect(Tok::RParen, "`,` or `)`")?;
        }
        Ok(Atom { pred, args })
    }

    fn term(&mut self) -> Result<Term, QueryError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                if *self.peek2() == Tok::LParen {
                    return Err(self.err("a variable or constant (nested atoms are only allowed as fn_ arguments)"));
                }
                self.next();
                Ok(self.classify(s))
            }
            Tok::Str(s) => {
                self.next();
                Ok(Term::Const(Value::Sym(s)))
            }
            Tok::Num(v, u) => {
                self.next();
                Ok(Term::Const(Value::num(v, u)))
            }
            _ => Err(self.err("a variable or constant")),
        }
    }

    /// Upper-case initial: variable. `_` alone: a fresh anonymous variable.
    fn classify(&mut self, s: String) -> Term {
        if s == "_" {
            self.fresh += 1;
            Term::Var(format!("_{}", self.fresh))
        } else if s.starts_with(|c: char| c.is_ascii_uppercase() || c == '_') {
            Term::Var(s)
        } else {
            Term::Const(Value::Sym(s))
        }
    }

    fn literal(&mut self) -> Result<Literal, QueryError> {
        match (self.peek().clone(), self.peek2()) {
            (Tok::Ident(v), Tok::EqEq) => {
                if !v.starts_with(|c: char| c.is_ascii_uppercase()) {
                    return Err(self.err("a variable on the left of `==`"));
                }
                self.next();
                self.next();
                let call = self.call()?;
                Ok(Literal::Assign { var: v, call })
            }
            (Tok::Ident(f), _) if is_fn_name(&f) => Ok(Literal::Call(self.call()?)),
            _ => Ok(Literal::Atom(self.atom("a body atom or fn_ call")?)),
        }
    }

    fn call(&mut self) -> Result<FnCall, QueryError> {
        let name = match self.peek().clone() {
            Tok::Ident(f) if is_fn_name(&f) => f,
            _ => return Err(self.err("a function call fn_<name>(...)")),
        };
        self.next();
        self.expect(Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                args.push(match (self.peek().clone(), self.peek2()) {
                    (Tok::Ident(f), Tok::LParen) if is_fn_name(&f) => {
                        return Err(self.err("an atom or term (function calls do not nest)"))
                    }
                    (Tok::Ident(_), Tok::LParen) => FnArg::Atom(self.atom("an atom")?),
                    _ => FnArg::Term(self.term()?),
                });
                if *self.peek() != Tok::Comma {
                    break;
                }
                self.next();
            }
        }
        self.expect(Tok::RParen, "`,` or `)`")?;
        Ok(FnCall { name, args })
    }
}

fn is_fn_name(s: &str) -> bool {
    s.len() > 3 && s[..3].eq_ignore_ascii_case("fn_")
}

fn is_statement_id(s: &str) -> bool {
    s.len() > 1 && matches!(s.as_bytes()[0], b'R' | b'F') && s[1..].bytes().all(|b| b.is_ascii_digit())
}

/// Range restriction: every head variable is bound by the body, and every
/// plain term passed to a function is bound before the call.
fn check_safety(rule: &Rule) -> Result<(), QueryError> {
    let unsafe_var = |var: &str| QueryError::UnsafeRule { rule: rule.label(), var: var.to_owned() };
    let bare_calls = rule.body.iter().filter(|l| matches!(l, Literal::Call(_))).count();
    let unbound = rule.call_vars();
    if unbound.len() != bare_calls {
        let var = unbound.get(bare_calls).copied().unwrap_or("<call result>");
        return Err(unsafe_var(var));
    }
    let mut bound = rule.bound_vars();
    bound.extend(unbound);
    for l in &rule.body {
        let call = match l {
            Literal::Atom(_) => continue,
            Literal::Assign { call, .. } | Literal::Call(call) => call,
        };
        for a in &call.args {
            if let FnArg::Term(Term::Var(v)) = a {
                if !bound.contains(v.as_str()) {
                    return Err(unsafe_var(v));
                }
            }
        }
    }
    Ok(())
}

/// Parses a rule program. Statements need no terminator; a trailing `.` is
/// accepted. Ground statements without a body are facts.
pub fn parse_rules(source: &str) -> Result<Vec<Rule>, QueryError> {
    Parser::new(source)?.statements()
}

/// Parses a single atom such as `all_Leaf(nf1, Y)`.
pub fn parse_atom(source: &str) -> Result<Atom, QueryError> {
    let mut p = Parser::new(source)?;
    let a = p.atom("an atom")?;
    if *p.peek() == Tok::Dot {
        p.next();
    }
    if *p.peek() != Tok::Eof {
        return Err(p.err("end of query"));
    }
    Ok(a)
}

/// Parses the command form `name arg1 arg2 ...` into an atom of `arity`
/// arguments; positions past the given ones become result variables.
pub fn parse_command(command: &str, arity: usize) -> Result<Atom, QueryError> {
    let mut p = Parser::new(command)?;
    let pred = p.name("a query name")?;
    let mut args = Vec::new();
    while *p.peek() != Tok::Eof {
        args.push(p.term()?);
    }
    if args.len() > arity {
        return Err(QueryError::ArityMismatch { pred, want: arity, got: args.len() });
    }
    let given = args.len();
    args.extend((given..arity).map(|i| Term::Var(format!("V{}", i - given + 1))));
    Ok(Atom { pred, args })
}

/// Parses fact text: ground atoms, one per statement.
pub(crate) fn parse_facts(source: &str) -> Result<Vec<Atom>, QueryError> {
    let mut p = Parser::new(source)?;
    let mut out = Vec::new();
    while *p.peek() != Tok::Eof {
        let before = p.at;
        let r = p.statement()?;
        if !r.body.is_empty() {
            p.at = before;
            return Err(p.err("a ground fact (rules belong in the rule program)"));
        }
        out.push(r.head);
    }
    Ok(out)
}
