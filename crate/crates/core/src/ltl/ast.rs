use crate::memstace::ByteState;
use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum FrameRef {
    /// A bound `forall_stack`/`exists_stack` variable.
    Var(String),
    /// A frame selected by function name.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum IndexExpr {
    Const(i64),
    Var(String),
    /// Highest index of a buffer (its lowest address).
    Start(String),
    /// Lowest index of a buffer (its highest address).
    End(String),
    Add(Box<IndexExpr>, Box<IndexExpr>),
    Sub(Box<IndexExpr>, Box<IndexExpr>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum LabelPat {
    Loop,
    /// Any library call.
    Libc,
    Call(String),
    Push,
    Pop,
    Write,
    Fe,
    Fa,
    BufReg,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Atom {
    Byte {
        index: IndexExpr,
        frame: FrameRef,
        state: ByteState,
        negated: bool,
    },
    HasCanary(FrameRef),
    Previous {
        labels: Vec<LabelPat>,
        negated: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Quantifier {
    Forall,
    Exists,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Domain {
    Stack,
    /// Buffers Σ of a frame.
    Buffer(FrameRef),
    /// Inclusive integer range.
    Range(i64, i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Formula {
    True,
    False,
    Atom(Atom),
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Always(Box<Formula>),
    Eventually(Box<Formula>),
    Next(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
    Quant {
        q: Quantifier,
        var: String,
        domain: Domain,
        body: Box<Formula>,
    },
}

impl std::ops::Not for Formula {
    type Output = Formula;

    fn not(self) -> Formula {
        Formula::Not(Box::new(self))
    }
}

impl Formula {
    pub fn is_temporal(&self) -> bool {
        matches!(
            self,
            Formula::Always(_) | Formula::Eventually(_) | Formula::Next(_) | Formula::Until(..)
        )
    }

    /// Whether any temporal operator occurs in the formula.
    pub fn has_temporal(&self) -> bool {
        match self {
            Formula::True | Formula::False | Formula::Atom(_) => false,
            Formula::Always(_) | Formula::Eventually(_) | Formula::Next(_) | Formula::Until(..) => true,
            Formula::Not(f) => f.has_temporal(),
            Formula::And(v) | Formula::Or(v) => v.iter().any(Formula::has_temporal),
            Formula::Implies(a, b) => a.has_temporal() || b.has_temporal(),
            Formula::Quant { body, .. } => body.has_temporal(),
        }
    }

    /// Replace integer range quantifiers by explicit conjunctions and
    /// disjunctions.
    pub fn expand_ranges(&self) -> Formula {
        match self {
            Formula::True | Formula::False | Formula::Atom(_) => self.clone(),
            Formula::Not(f) => !f.expand_ranges(),
            Formula::And(v) => Formula::And(v.iter().map(Formula::expand_ranges).collect()),
            Formula::Or(v) => Formula::Or(v.iter().map(Formula::expand_ranges).collect()),
            Formula::Implies(a, b) => Formula::Implies(Box::new(a.expand_ranges()), Box::new(b.expand_ranges())),
            Formula::Always(f) => Formula::Always(Box::new(f.expand_ranges())),
            Formula::Eventually(f) => Formula::Eventually(Box::new(f.expand_ranges())),
            Formula::Next(f) => Formula::Next(Box::new(f.expand_ranges())),
            Formula::Until(a, b) => Formula::Until(Box::new(a.expand_ranges()), Box::new(b.expand_ranges())),
            Formula::Quant {
                q,
                var,
                domain: Domain::Range(lo, hi),
                body,
            } => {
                let body = body.expand_ranges();
                let parts: Vec<Formula> = (*lo..=*hi).map(|k| body.substitute_index(var, k)).collect();
                match (q, parts.len()) {
                    (Quantifier::Forall, 0) => Formula::True,
                    (Quantifier::Exists, 0) => Formula::False,
                    (_, 1) => parts.into_iter().next().unwrap_or(Formula::True),
                    (Quantifier::Forall, _) => Formula::And(parts),
                    (Quantifier::Exists, _) => Formula::Or(parts),
                }
            }
            Formula::Quant { q, var, domain, body } => Formula::Quant {
                q: *q,
                var: var.clone(),
                domain: domain.clone(),
                body: Box::new(body.expand_ranges()),
            },
        }
    }

    fn substitute_index(&self, var: &str, k: i64) -> Formula {
        let sub = |f: &Formula| f.substitute_index(var, k);
        match self {
            Formula::True | Formula::False => self.clone(),
            Formula::Atom(Atom::Byte {
                index,
                frame,
                state,
                negated,
            }) => Formula::Atom(Atom::Byte {
                index: index.substitute(var, k),
                frame: frame.clone(),
                state: *state,
                negated: *negated,
            }),
            Formula::Atom(_) => self.clone(),
            Formula::Not(f) => !sub(f),
            Formula::And(v) => Formula::And(v.iter().map(sub).collect()),
            Formula::Or(v) => Formula::Or(v.iter().map(sub).collect()),
            Formula::Implies(a, b) => Formula::Implies(Box::new(sub(a)), Box::new(sub(b))),
            Formula::Always(f) => Formula::Always(Box::new(sub(f))),
            Formula::Eventually(f) => Formula::Eventually(Box::new(sub(f))),
            Formula::Next(f) => Formula::Next(Box::new(sub(f))),
            Formula::Until(a, b) => Formula::Until(Box::new(sub(a)), Box::new(sub(b))),
            Formula::Quant { var: v, .. } if v == var => self.clone(),
            Formula::Quant { q, var: v, domain, body } => Formula::Quant {
                q: *q,
                var: v.clone(),
                domain: domain.clone(),
                body: Box::new(sub(body)),
            },
        }
    }
}

impl IndexExpr {
    fn substitute(&self, var: &str, k: i64) -> IndexExpr {
        match self {
            IndexExpr::Var(v) if v == var => IndexExpr::Const(k),
            IndexExpr::Add(a, b) => IndexExpr::Add(Box::new(a.substitute(var, k)), Box::new(b.substitute(var, k))),
            IndexExpr::Sub(a, b) => IndexExpr::Sub(Box::new(a.substitute(var, k)), Box::new(b.substitute(var, k))),
            other => other.clone(),
        }
    }
}

impl fmt::Display for FrameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameRef::Var(v) | FrameRef::Named(v) => write!(f, "{v}"),
        }
    }
}

impl fmt::Display for IndexExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexExpr::Const(k) => write!(f, "{k}"),
            IndexExpr::Var(v) => write!(f, "{v}"),
            IndexExpr::Start(b) => write!(f, "start({b})"),
            IndexExpr::End(b) => write!(f, "end({b})"),
            IndexExpr::Add(a, b) => write!(f, "{a} + {}", Paren(b)),
            IndexExpr::Sub(a, b) => write!(f, "{a} - {}", Paren(b)),
        }
    }
}

/// Right operands of `+`/`-` need grouping when compound.
struct Paren<'a>(&'a IndexExpr);

impl fmt::Display for Paren<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            IndexExpr::Add(..) | IndexExpr::Sub(..) => write!(f, "({})", self.0),
            e => write!(f, "{e}"),
        }
    }
}

impl fmt::Display for LabelPat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelPat::Loop => write!(f, "loop"),
            LabelPat::Libc => write!(f, "libc"),
            LabelPat::Call(n) => write!(f, "call_{n}"),
            LabelPat::Push => write!(f, "push"),
            LabelPat::Pop => write!(f, "pop"),
            LabelPat::Write => write!(f, "write"),
            LabelPat::Fe => write!(f, "fe"),
            LabelPat::Fa => write!(f, "fa"),
            LabelPat::BufReg => write!(f, "bufreg"),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Byte {
                index,
                frame,
                state,
                negated,
            } => {
                let op = if *negated { "!=" } else { "=" };
                let frame = match frame {
                    FrameRef::Var(v) | FrameRef::Named(v) => format!("stack({v})"),
                };
                write!(f, "byte({index}, {frame}) {op} {state}")
            }
            Atom::HasCanary(fr) => write!(f, "has_canary({fr})"),
            Atom::Previous { labels, negated } => {
                let op = if *negated { "!=" } else { "=" };
                if labels.len() == 1 {
                    write!(f, "previous_transition {op} {}", labels[0])
                } else {
                    let l: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
                    write!(f, "previous_transition {op} {{{}}}", l.join(", "))
                }
            }
        }
    }
}

fn join(f: &mut fmt::Formatter<'_>, parts: &[Formula], op: &str) -> fmt::Result {
    write!(f, "(")?;
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            write!(f, " {op} ")?;
        }
        write!(f, "{p}")?;
    }
    write!(f, ")")
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::True => write!(f, "true"),
            Formula::False => write!(f, "false"),
            Formula::Atom(a) => write!(f, "{a}"),
            Formula::Not(x) => write!(f, "!{x}"),
            Formula::And(v) => join(f, v, "&&"),
            Formula::Or(v) => join(f, v, "||"),
            Formula::Implies(a, b) => write!(f, "({a} => {b})"),
            Formula::Always(x) => write!(f, "G {x}"),
            Formula::Eventually(x) => write!(f, "F {x}"),
            Formula::Next(x) => write!(f, "X {x}"),
            Formula::Until(a, b) => write!(f, "({a} U {b})"),
            Formula::Quant { q, var, domain, body } => {
                let kw = match (q, domain) {
                    (Quantifier::Forall, Domain::Stack) => "forall_stack",
                    (Quantifier::Exists, Domain::Stack) => "exists_stack",
                    (Quantifier::Forall, Domain::Buffer(_)) => "forall_buffer",
                    (Quantifier::Exists, Domain::Buffer(_)) => "exists_buffer",
                    (Quantifier::Forall, Domain::Range(..)) => "all",
                    (Quantifier::Exists, Domain::Range(..)) => "any",
                };
                match domain {
                    Domain::Stack => write!(f, "({kw} {var} . {body})"),
                    Domain::Buffer(fr) => write!(f, "({kw} {var} in {fr} . {body})"),
                    Domain::Range(lo, hi) => write!(f, "({kw} {var} in {lo}..{hi} : {body})"),
                }
            }
        }
    }
}
