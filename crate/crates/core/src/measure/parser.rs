//! Recursive-descent parser for MEASURE source.
//!
//! Lexing is done on demand: measurement arguments are read as raw location
//! names (which may contain `-`), while zone and action bodies use ordinary
//! tokens. Sections are each optional but must appear in the order
//! `measurements`, `zones`, `actions`.

use std::collections::HashMap;

use super::ast::*;
use super::units::{function_dimension, Dimension, Quantity, Unit};
use super::MeasureError;

pub fn parse(source: &str) -> Result<Program, MeasureError> {
    let program = Parser::new(source).program()?;
    validate(&program)?;
    Ok(program)
}

struct Parser<'a> {
    src: &'a str,
    at: usize,
    line: u32,
    col: u32,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, at: 0, line: 1, col: 1 }
    }

    fn pos(&self) -> Pos {
        Pos { line: self.line, col: self.col }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.at..].chars().next()
    }

    fn peek2(&self) -> Option<char> {
        self.src[self.at..].chars().nth(1)
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.at += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('#') => self.skip_line(),
                Some('/') if self.peek2() == Some('/') => self.skip_line(),
                _ => return,
            }
        }
    }

    fn skip_line(&mut self) {
        while let Some(c) = self.bump() {
            if c == '\n' {
                return;
            }
        }
    }

    fn error(&self, expected: impl Into<String>) -> MeasureError {
        MeasureError::Syntax { line: self.line, col: self.col, expected: expected.into() }
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_trivia();
        if self.src[self.at..].starts_with(s) {
            for _ in s.chars() {
                self.bump();
            }
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), MeasureError> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(self.error(format!("`{s}`")))
        }
    }

    fn peek_ident(&mut self) -> Option<&'a str> {
        self.skip_trivia();
        let rest = &self.src[self.at..];
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return None,
        }
        let end = chars
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map_or(rest.len(), |(i, _)| i);
        Some(&rest[..end])
    }

    fn ident(&mut self, what: &str) -> Result<(String, Pos), MeasureError> {
        let Some(id) = self.peek_ident() else {
            return Err(self.error(what));
        };
        let pos = self.pos();
        for _ in id.chars() {
            self.bump();
        }
        Ok((id.to_owned(), pos))
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if self.peek_ident() == Some(kw) {
            for _ in kw.chars() {
                self.bump();
            }
            true
        } else {
            false
        }
    }

    fn program(mut self) -> Result<Program, MeasureError> {
        let mut program = Program::default();
        if self.keyword("measurements") {
            self.expect("{")?;
            while !self.eat("}") {
                program.measurements.push(self.mdecl()?);
            }
        }
        if self.keyword("zones") {
            self.expect("{")?;
            while !self.eat("}") {
                program.zones.push(self.zdecl()?);
            }
        }
        if self.keyword("actions") {
            self.expect("{")?;
            while !self.eat("}") {
                program.actions.push(self.adecl()?);
            }
        }
        self.skip_trivia();
        if self.peek().is_some() {
            let expected = match (program.zones.is_empty(), program.actions.is_empty()) {
                (true, true) => "a section (`measurements`, `zones` or `actions`)",
                (_, true) => "`actions` section or end of input",
                _ => "end of input",
            };
            return Err(self.error(expected));
        }
        Ok(program)
    }

    fn mdecl(&mut self) -> Result<MeasurementDecl, MeasureError> {
        let (id, pos) = self.ident("measurement id or `}`")?;
        self.expect("=")?;
        let (function, _) = self.ident("measurement function")?;
        self.expect("(")?;
        let mut args = Vec::new();
        if !self.eat(")") {
            loop {
                args.push(self.marg()?);
                if self.eat(")") {
                    break;
                }
                self.expect(",")?;
            }
        }
        self.expect(";")?;
        Ok(MeasurementDecl { id, function, args, pos })
    }

    fn marg(&mut self) -> Result<Arg, MeasureError> {
        self.skip_trivia();
        match self.peek() {
            Some(c) if c.is_ascii_digit() || c == '.' => Ok(Arg::literal(self.quantity()?.0)),
            _ => {
                let start = self.at;
                while let Some(c) = self.peek() {
                    if c.is_ascii_alphanumeric() || "-_.:/@".contains(c) {
                        self.bump();
                    } else {
                        break;
                    }
                }
                if self.at == start {
                    return Err(self.error("location or literal argument"));
                }
                Ok(Arg::Location { name: self.src[start..self.at].to_owned() })
            }
        }
    }

    /// Number immediately followed by an optional unit symbol.
    fn quantity(&mut self) -> Result<(Quantity, Pos), MeasureError> {
        self.skip_trivia();
        let pos = self.pos();
        let start = self.at;
        if self.peek() == Some('-') {
            self.bump();
        }
        let digits = |p: &mut Self| {
            let s = p.at;
            while p.peek().is_some_and(|c| c.is_ascii_digit()) {
                p.bump();
            }
            p.at > s
        };
        let mut any = digits(self);
        if self.peek() == Some('.') && self.peek2().is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
            any |= digits(self);
        }
        if !any {
            return Err(self.error("number"));
        }
        if matches!(self.peek(), Some('e' | 'E')) {
            let rest = &self.src[self.at + 1..];
            let signed = rest.starts_with(['+', '-']);
            let after = if signed { &rest[1..] } else { rest };
            if after.starts_with(|c: char| c.is_ascii_digit()) {
                self.bump();
                if signed {
                    self.bump();
                }
                digits(self);
            }
        }
        let value: f64 = self.src[start..self.at].parse().map_err(|_| self.error("number"))?;
        let ustart = self.at;
        if self.peek() == Some('%') {
            self.bump();
        } else {
            while self.peek().is_some_and(|c| c.is_ascii_alphabetic()) {
                self.bump();
            }
        }
        let sym = &self.src[ustart..self.at];
        let unit: Unit = sym.parse().map_err(|_| MeasureError::Syntax {
            line: pos.line,
            col: pos.col,
            expected: format!("known unit, found {sym:?}"),
        })?;
        Ok((Quantity::new(value, unit), pos))
    }

    fn zdecl(&mut self) -> Result<ZoneDecl, MeasureError> {
        let (id, pos) = self.ident("zone id or `}`")?;
        self.expect("=")?;
        let (agg, _) = self.ident("aggregate (`mean`, `max`, `min` or `sum`)")?;
        let kind = AggKind::from_keyword(&agg).ok_or_else(|| MeasureError::Syntax {
            line: pos.line,
            col: pos.col,
            expected: "aggregate (`mean`, `max`, `min` or `sum`)".into(),
        })?;
        self.expect("(")?;
        self.skip_trivia();
        let wpos = self.pos();
        let start = self.at;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
        }
        let window = match self.src[start..self.at].parse::<u32>() {
            Ok(n) if n >= 1 => n,
            _ => {
                return Err(MeasureError::Syntax {
                    line: wpos.line,
                    col: wpos.col,
                    expected: "window size of at least 1".into(),
                })
            }
        };
        self.expect(",")?;
        let expr = self.mexpr()?;
        self.expect(")")?;
        let cmp = self.cmp()?;
        let (threshold, tpos) = self.quantity()?;
        if threshold.dimension() == Dimension::Frequency {
            return Err(MeasureError::UnitMismatch {
                line: tpos.line,
                col: tpos.col,
                detail: format!("`{threshold}` is a frequency; frequencies are only allowed as measurement arguments"),
            });
        }
        self.expect(";")?;
        Ok(ZoneDecl { id, aggregate: Aggregate { kind, window, expr }, cmp, threshold, pos })
    }

    fn cmp(&mut self) -> Result<Cmp, MeasureError> {
        for (s, c) in [(">=", Cmp::Ge), ("<=", Cmp::Le), ("==", Cmp::Eq), (">", Cmp::Gt), ("<", Cmp::Lt)] {
            if self.eat(s) {
                return Ok(c);
            }
        }
        Err(self.error("comparison (`>`, `>=`, `<`, `<=` or `==`)"))
    }

    fn mexpr(&mut self) -> Result<MExpr, MeasureError> {
        let mut lhs = self.mterm()?;
        loop {
            if self.eat("+") {
                lhs = MExpr::Add { lhs: Box::new(lhs), rhs: Box::new(self.mterm()?) };
            } else if self.peek_is_minus() {
                self.bump();
                lhs = MExpr::Sub { lhs: Box::new(lhs), rhs: Box::new(self.mterm()?) };
            } else {
                return Ok(lhs);
            }
        }
    }

    /// A `-` that is not the start of `->`.
    fn peek_is_minus(&mut self) -> bool {
        self.skip_trivia();
        self.peek() == Some('-') && self.peek2() != Some('>')
    }

    fn mterm(&mut self) -> Result<MExpr, MeasureError> {
        if self.eat("(") {
            let e = self.mexpr()?;
            self.expect(")")?;
            return Ok(e);
        }
        let (id, pos) = self.ident("measurement reference")?;
        if let Ok(op) = id.parse::<Combiner>() {
            if self.eat("(") {
                let mut args = vec![self.mexpr()?];
                while self.eat(",") {
                    args.push(self.mexpr()?);
                }
                self.expect(")")?;
                return Ok(MExpr::Combine { op, args });
            }
        }
        Ok(MExpr::Ref { id, pos })
    }

    fn adecl(&mut self) -> Result<ActionDecl, MeasureError> {
        self.skip_trivia();
        let pos = self.pos();
        let from = if self.peek_ident().is_some() { Some(self.ident("zone id")?.0) } else { None };
        if !self.eat("->") {
            return Err(self.error(if from.is_some() { "`->`" } else { "zone id, `->` or `}`" }));
        }
        let (to, _) = self.ident("target zone id")?;
        self.expect("=")?;
        if !self.keyword("Notify") {
            return Err(self.error("`Notify`"));
        }
        self.expect("(")?;
        let (dest, _) = self.ident("notification destination")?;
        self.expect(",")?;
        self.expect("[")?;
        let mut payload = Vec::new();
        if !self.eat("]") {
            loop {
                payload.push(self.payload_item()?);
                if self.eat("]") {
                    break;
                }
                self.expect(",")?;
            }
        }
        self.expect(")")?;
        self.expect(";")?;
        let trigger = match from {
            Some(from) => Trigger::Transition { from, to },
            None => Trigger::Entry { to },
        };
        Ok(ActionDecl { trigger, action: Action::Notify { dest, payload }, pos })
    }

    fn payload_item(&mut self) -> Result<PayloadItem, MeasureError> {
        self.skip_trivia();
        if self.peek() != Some('"') {
            return Ok(PayloadItem::Expr { expr: self.mexpr()? });
        }
        self.bump();
        let mut value = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => return Err(self.error("closing `\"`")),
                Some('"') => return Ok(PayloadItem::Text { value }),
                Some('\\') => match self.bump() {
                    Some('n') => value.push('\n'),
                    Some('t') => value.push('\t'),
                    Some(c @ ('"' | '\\')) => value.push(c),
                    _ => return Err(self.error("escape (`\\\"`, `\\\\`, `\\n` or `\\t`)")),
                },
                Some(c) => value.push(c),
            }
        }
    }
}

/// Checks identifiers, references and units of an already parsed program.
pub fn validate(p: &Program) -> Result<(), MeasureError> {
    let mut seen: HashMap<&str, ()> = HashMap::new();
    let decls = p.measurements.iter().map(|m| (&m.id, m.pos)).chain(p.zones.iter().map(|z| (&z.id, z.pos)));
    for (id, pos) in decls {
        if seen.insert(id, ()).is_some() {
            return Err(MeasureError::DuplicateId { id: id.clone(), line: pos.line, col: pos.col });
        }
    }

    let unknown = |id: &str, pos: Pos| MeasureError::UnknownReference { id: id.to_owned(), line: pos.line, col: pos.col };
    let check_refs = |e: &MExpr| {
        e.refs().into_iter().try_for_each(|(id, pos)| match p.measurement(id) {
            Some(_) => Ok(()),
            None => Err(unknown(id, pos)),
        })
    };
    for z in &p.zones {
        check_refs(&z.aggregate.expr)?;
    }
    for a in &p.actions {
        for zone in [Some(a.trigger.to()), if let Trigger::Transition { from, .. } = &a.trigger { Some(from.as_str()) } else { None }]
            .into_iter()
            .flatten()
        {
            if p.zone_index(zone).is_none() {
                return Err(unknown(zone, a.pos));
            }
        }
        let Action::Notify { payload, .. } = &a.action;
        for item in payload {
            if let PayloadItem::Expr { expr } = item {
                check_refs(expr)?;
            }
        }
    }

    for z in &p.zones {
        let mismatch = |detail: String| MeasureError::UnitMismatch { line: z.pos.line, col: z.pos.col, detail };
        let dim = expr_dimension(p, &z.aggregate.expr).map_err(mismatch)?;
        if z.threshold.dimension() == Dimension::Frequency {
            return Err(mismatch(format!("zone {} compares against a frequency", z.id)));
        }
        if let Some(d) = dim {
            if !d.compatible(z.threshold.dimension()) {
                return Err(mismatch(format!(
                    "zone {} compares a {d:?} aggregate with `{}` ({:?})",
                    z.id,
                    z.threshold,
                    z.threshold.dimension()
                )));
            }
        }
    }
    for a in &p.actions {
        let Action::Notify { payload, .. } = &a.action;
        for item in payload {
            if let PayloadItem::Expr { expr } = item {
                expr_dimension(p, expr)
                    .map_err(|detail| MeasureError::UnitMismatch { line: a.pos.line, col: a.pos.col, detail })?;
            }
        }
    }
    Ok(())
}

/// Dimension of an expression, `None` when it only involves functions of
/// unknown dimension.
pub fn expr_dimension(p: &Program, e: &MExpr) -> Result<Option<Dimension>, String> {
    let join = |a: Option<Dimension>, b: Option<Dimension>| -> Result<Option<Dimension>, String> {
        match (a, b) {
            (Some(x), Some(y)) if !x.compatible(y) => Err(format!("cannot combine {x:?} with {y:?}")),
            (Some(x), _) | (None, Some(x)) => Ok(Some(x)),
            (None, None) => Ok(None),
        }
    };
    match e {
        MExpr::Ref { id, .. } => Ok(p.measurement(id).and_then(|m| function_dimension(&m.function))),
        MExpr::Add { lhs, rhs } | MExpr::Sub { lhs, rhs } => join(expr_dimension(p, lhs)?, expr_dimension(p, rhs)?),
        MExpr::Combine { args, .. } => {
            args.iter().try_fold(None, |acc, a| join(acc, expr_dimension(p, a)?))
        }
    }
}
