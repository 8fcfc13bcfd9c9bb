//! Canonical source rendering. `parse(&p.to_string())` yields `p` again.

use std::fmt::{self, Display, Formatter, Write};

use super::ast::*;

impl Display for Program {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        writeln!(f, "measurements {{")?;
        for m in &self.measurements {
            writeln!(f, "    {m}")?;
        }
        writeln!(f, "}}\nzones {{")?;
        for z in &self.zones {
            writeln!(f, "    {z}")?;
        }
        writeln!(f, "}}\nactions {{")?;
        for a in &self.actions {
            writeln!(f, "    {a}")?;
        }
        writeln!(f, "}}")
    }
}

impl Display for MeasurementDecl {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}(", self.id, self.function)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match a {
                Arg::Location { name } => f.write_str(name)?,
                Arg::Literal { value, unit } => write!(f, "{value}{unit}")?,
            }
        }
        f.write_str(");")
    }
}

impl Display for ZoneDecl {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let a = &self.aggregate;
        write!(f, "{} = {}({}, {}) {} {};", self.id, a.kind.keyword(), a.window, a.expr, self.cmp.symbol(), self.threshold)
    }
}

impl Display for MExpr {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match self {
            MExpr::Ref { id, .. } => f.write_str(id),
            MExpr::Add { lhs, rhs } => binary(f, lhs, "+", rhs),
            MExpr::Sub { lhs, rhs } => binary(f, lhs, "-", rhs),
            MExpr::Combine { op, args } => {
                write!(f, "{}(", op.keyword())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_char(')')
            }
        }
    }
}

// Operators are left-associative, so only a binary right operand needs parentheses.
fn binary(f: &mut Formatter<'_>, lhs: &MExpr, op: &str, rhs: &MExpr) -> fmt::Result {
    match rhs {
        MExpr::Add { .. } | MExpr::Sub { .. } => write!(f, "{lhs} {op} ({rhs})"),
        _ => write!(f, "{lhs} {op} {rhs}"),
    }
}

impl Display for ActionDecl {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        match &self.trigger {
            Trigger::Transition { from, to } => write!(f, "{from} -> {to} = ")?,
            Trigger::Entry { to } => write!(f, "-> {to} = ")?,
        }
        let Action::Notify { dest, payload } = &self.action;
        write!(f, "Notify({dest}, [")?;
        for (i, item) in payload.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match item {
                PayloadItem::Text { value } => write_string(f, value)?,
                PayloadItem::Expr { expr } => write!(f, "{expr}")?,
            }
        }
        f.write_str("]);")
    }
}

fn write_string(f: &mut Formatter<'_>, s: &str) -> fmt::Result {
    f.write_char('"')?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => f.write_char(c)?,
        }
    }
    f.write_char('"')
}
