//! Parse-tree export as JSON and XML.

use std::fmt::Write;

use super::ast::*;

pub fn to_json(p: &Program) -> String {
    serde_json::to_string_pretty(p).expect("AST always serializes")
}

pub fn to_json_value(p: &Program) -> serde_json::Value {
    serde_json::to_value(p).expect("AST always serializes")
}

pub fn to_xml(p: &Program) -> String {
    let mut x = Xml::default();
    x.open("program", &[]);
    x.open("measurements", &[]);
    for m in &p.measurements {
        x.open("measurement", &[("id", &m.id), ("function", &m.function)]);
        for a in &m.args {
            match a {
                Arg::Location { name } => x.empty("location", &[("name", name)]),
                Arg::Literal { value, unit } => {
                    x.empty("literal", &[("value", &value.to_string()), ("unit", unit.symbol())])
                }
            }
        }
        x.close("measurement");
    }
    x.close("measurements");
    x.open("zones", &[]);
    for z in &p.zones {
        x.open("zone", &[("id", &z.id), ("cmp", z.cmp.symbol())]);
        let a = &z.aggregate;
        x.open("aggregate", &[("kind", a.kind.keyword()), ("window", &a.window.to_string())]);
        x.expr(&a.expr);
        x.close("aggregate");
        x.empty("threshold", &[("value", &z.threshold.value.to_string()), ("unit", z.threshold.unit.symbol())]);
        x.close("zone");
    }
    x.close("zones");
    x.open("actions", &[]);
    for a in &p.actions {
        x.open("action", &[]);
        match &a.trigger {
            Trigger::Transition { from, to } => x.empty("transition", &[("from", from), ("to", to)]),
            Trigger::Entry { to } => x.empty("entry", &[("to", to)]),
        }
        let Action::Notify { dest, payload } = &a.action;
        x.open("notify", &[("dest", dest)]);
        for item in payload {
            match item {
                PayloadItem::Text { value } => x.text("text", value),
                PayloadItem::Expr { expr } => {
                    x.open("expr", &[]);
                    x.expr(expr);
                    x.close("expr");
                }
            }
        }
        x.close("notify");
        x.close("action");
    }
    x.close("actions");
    x.close("program");
    x.out
}

#[derive(Default)]
struct Xml {
    out: String,
    depth: usize,
}

impl Xml {
    fn tag(&mut self, name: &str, attrs: &[(&str, &str)], end: &str) {
        let _ = write!(self.out, "{:1$}<{name}", "", self.depth * 2);
        for (k, v) in attrs {
            let _ = write!(self.out, " {k}=\"{}\"", escape(v));
        }
        self.out.push_str(end);
        self.out.push('\n');
    }

    fn open(&mut self, name: &str, attrs: &[(&str, &str)]) {
        self.tag(name, attrs, ">");
        self.depth += 1;
    }

    fn empty(&mut self, name: &str, attrs: &[(&str, &str)]) {
        self.tag(name, attrs, "/>");
    }

    fn close(&mut self, name: &str) {
        self.depth -= 1;
        let _ = writeln!(self.out, "{:1$}</{name}>", "", self.depth * 2);
    }

    fn text(&mut self, name: &str, body: &str) {
        let _ = writeln!(self.out, "{:1$}<{name}>{2}</{name}>", "", self.depth * 2, escape(body));
    }

    fn expr(&mut self, e: &MExpr) {
        match e {
            MExpr::Ref { id, .. } => self.empty("ref", &[("id", id)]),
            MExpr::Add { lhs, rhs } | MExpr::Sub { lhs, rhs } => {
                let name = if matches!(e, MExpr::Add { .. }) { "add" } else { "sub" };
                self.open(name, &[]);
                self.expr(lhs);
                self.expr(rhs);
                self.close(name);
            }
            MExpr::Combine { op, args } => {
                self.open("combine", &[("op", op.keyword())]);
                args.iter().for_each(|a| self.expr(a));
                self.close("combine");
            }
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}
