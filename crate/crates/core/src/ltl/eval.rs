//! Three-valued evaluation of state formulas over one memory state.
//!
//! A byte atom whose index falls outside its frame is `Unknown`. Quantifier
//! instances that evaluate to `Unknown` are dropped; an `Unknown` body at the
//! top level is treated as satisfied.

use super::ast::{Atom, Domain, Formula, FrameRef, IndexExpr, LabelPat, Quantifier};
use crate::memstace::{BaseSlot, Buffer, LabelKind, MemoryState};
use serde::Serialize;
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Truth {
    True,
    False,
    Unknown,
}

impl std::ops::Not for Truth {
    type Output = Truth;

    fn not(self) -> Truth {
        match self {
            Truth::True => Truth::False,
            Truth::False => Truth::True,
            Truth::Unknown => Truth::Unknown,
        }
    }
}

impl Truth {
    pub fn from_bool(b: bool) -> Truth {
        if b {
            Truth::True
        } else {
            Truth::False
        }
    }

    pub fn and(self, o: Truth) -> Truth {
        match (self, o) {
            (Truth::False, _) | (_, Truth::False) => Truth::False,
            (Truth::True, Truth::True) => Truth::True,
            _ => Truth::Unknown,
        }
    }

    pub fn or(self, o: Truth) -> Truth {
        match (self, o) {
            (Truth::True, _) | (_, Truth::True) => Truth::True,
            (Truth::False, Truth::False) => Truth::False,
            _ => Truth::Unknown,
        }
    }
}

/// Facts gathered while evaluating, used for vacuity notes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalNotes {
    pub implications: usize,
    pub antecedents_held: usize,
    /// Frames whose base-register bytes were referenced but never existed.
    pub absent: BTreeSet<String>,
    pub missing_frames: BTreeSet<String>,
}

impl EvalNotes {
    pub fn merge(&mut self, o: &EvalNotes) {
        self.implications += o.implications;
        self.antecedents_held += o.antecedents_held;
        self.absent.extend(o.absent.iter().cloned());
        self.missing_frames.extend(o.missing_frames.iter().cloned());
    }
}

#[derive(Debug, Clone, Default)]
pub struct Env {
    frames: Vec<(String, usize)>,
    buffers: Vec<(String, Buffer)>,
    ints: Vec<(String, i64)>,
}

impl Env {
    pub fn bind_frame(mut self, var: &str, frame: usize) -> Env {
        self.frames.push((var.to_string(), frame));
        self
    }

    pub fn bind_buffer(mut self, var: &str, b: Buffer) -> Env {
        self.buffers.push((var.to_string(), b));
        self
    }

    pub fn bind_int(mut self, var: &str, v: i64) -> Env {
        self.ints.push((var.to_string(), v));
        self
    }

    fn frame_var(&self, v: &str) -> Option<usize> {
        self.frames.iter().rev().find(|(n, _)| n == v).map(|(_, i)| *i)
    }

    fn buffer(&self, v: &str) -> Option<Buffer> {
        self.buffers.iter().rev().find(|(n, _)| n == v).map(|(_, b)| *b)
    }

    fn int(&self, v: &str) -> Option<i64> {
        self.ints.iter().rev().find(|(n, _)| n == v).map(|(_, i)| *i)
    }
}

fn resolve_frame(fr: &FrameRef, env: &Env, m: &MemoryState, notes: &mut EvalNotes) -> Option<usize> {
    match fr {
        FrameRef::Var(v) => env.frame_var(v),
        FrameRef::Named(name) => {
            let found = m.frames.iter().rposition(|f| &f.label == name);
            if found.is_none() {
                notes.missing_frames.insert(name.clone());
            }
            found
        }
    }
}

fn eval_index(e: &IndexExpr, env: &Env) -> Option<i64> {
    Some(match e {
        IndexExpr::Const(k) => *k,
        IndexExpr::Var(v) => env.int(v)?,
        IndexExpr::Start(b) => env.buffer(b)?.start as i64,
        IndexExpr::End(b) => env.buffer(b)?.end() as i64,
        IndexExpr::Add(a, b) => eval_index(a, env)? + eval_index(b, env)?,
        IndexExpr::Sub(a, b) => eval_index(a, env)? - eval_index(b, env)?,
    })
}

fn label_matches(p: &LabelPat, k: &LabelKind) -> bool {
    match (p, k) {
        (LabelPat::Loop, LabelKind::Loop) => true,
        (LabelPat::Libc, LabelKind::Call(_)) => true,
        (LabelPat::Call(a), LabelKind::Call(b)) => a == b,
        (LabelPat::Push, LabelKind::Push)
        | (LabelPat::Pop, LabelKind::Pop)
        | (LabelPat::Write, LabelKind::Write)
        | (LabelPat::Fe, LabelKind::Fe)
        | (LabelPat::Fa, LabelKind::Fa)
        | (LabelPat::BufReg, LabelKind::BufferRegister) => true,
        _ => false,
    }
}

/// Evaluate one atom with its variables bound in `env`.
pub fn eval_atom(atom: &Atom, env: &Env, m: &MemoryState, notes: &mut EvalNotes) -> Truth {
    match atom {
        Atom::Byte {
            index,
            frame,
            state,
            negated,
        } => {
            let Some(fi) = resolve_frame(frame, env, m, notes) else {
                return Truth::Unknown;
            };
            let Some(i) = eval_index(index, env) else {
                return Truth::Unknown;
            };
            let f = &m.frames[fi];
            if i < 0 {
                return Truth::Unknown;
            }
            match f.get(i as usize) {
                Some(s) => Truth::from_bool((s == *state) != *negated),
                None => {
                    if f.base == BaseSlot::Absent && (8..16).contains(&i) {
                        notes.absent.insert(f.label.clone());
                    }
                    Truth::Unknown
                }
            }
        }
        Atom::HasCanary(frame) => match resolve_frame(frame, env, m, notes) {
            Some(fi) => Truth::from_bool(m.frames[fi].has_canary),
            None => Truth::Unknown,
        },
        Atom::Previous { labels, negated } => {
            let hit = labels.iter().any(|p| label_matches(p, &m.incoming.kind));
            Truth::from_bool(hit != *negated)
        }
    }
}

fn quantify(q: Quantifier, instances: impl Iterator<Item = Truth>) -> Truth {
    let mut known = instances.filter(|t| *t != Truth::Unknown);
    match q {
        Quantifier::Forall => Truth::from_bool(known.all(|t| t == Truth::True)),
        Quantifier::Exists => Truth::from_bool(known.any(|t| t == Truth::True)),
    }
}

/// Evaluate a state formula. Temporal operators are outside the state
/// fragment and evaluate to `Unknown`.
pub fn eval(f: &Formula, env: &Env, m: &MemoryState, notes: &mut EvalNotes) -> Truth {
    match f {
        Formula::True => Truth::True,
        Formula::False => Truth::False,
        Formula::Atom(a) => eval_atom(a, env, m, notes),
        Formula::Not(x) => !eval(x, env, m, notes),
        Formula::And(v) => v.iter().fold(Truth::True, |acc, x| acc.and(eval(x, env, m, notes))),
        Formula::Or(v) => v.iter().fold(Truth::False, |acc, x| acc.or(eval(x, env, m, notes))),
        Formula::Implies(a, b) => {
            let ta = eval(a, env, m, notes);
            notes.implications += 1;
            if ta == Truth::True {
                notes.antecedents_held += 1;
            }
            (!ta).or(eval(b, env, m, notes))
        }
        Formula::Always(_) | Formula::Eventually(_) | Formula::Next(_) | Formula::Until(..) => Truth::Unknown,
        Formula::Quant { q, var, domain, body } => match domain {
            Domain::Stack => {
                let results: Vec<Truth> = (0..m.frames.len())
                    .map(|i| eval(body, &env.clone().bind_frame(var, i), m, notes))
                    .collect();
                quantify(*q, results.into_iter())
            }
            Domain::Buffer(fr) => {
                let Some(fi) = resolve_frame(fr, env, m, notes) else {
                    return Truth::Unknown;
                };
                let results: Vec<Truth> = m.frames[fi]
                    .buffers
                    .iter()
                    .map(|b| eval(body, &env.clone().bind_buffer(var, *b), m, notes))
                    .collect();
                quantify(*q, results.into_iter())
            }
            Domain::Range(lo, hi) => {
                let results: Vec<Truth> = (*lo..=*hi)
                    .map(|k| eval(body, &env.clone().bind_int(var, k), m, notes))
                    .collect();
                quantify(*q, results.into_iter())
            }
        },
    }
}

/// Whether `m` satisfies the closed state formula `f`, counting an
/// `Unknown` result as satisfied.
pub fn satisfies(f: &Formula, m: &MemoryState) -> bool {
    eval(f, &Env::default(), m, &mut EvalNotes::default()) != Truth::False
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltl::parse::parse_formula;
    use crate::memstace::{ByteState, StackFrame, TransitionLabel};

    fn state(frames: Vec<StackFrame>, kind: LabelKind) -> MemoryState {
        MemoryState {
            frames,
            incoming: TransitionLabel { kind, address: 0 },
        }
    }

    fn frame(label: &str, bytes: &[ByteState]) -> StackFrame {
        let mut f = StackFrame::allocate(label);
        f.bytes = bytes.to_vec();
        if bytes.len() > 8 {
            f.base = BaseSlot::Present;
        }
        f
    }

    fn truth(src: &str, m: &MemoryState) -> Truth {
        eval(&parse_formula(src).unwrap(), &Env::default(), m, &mut EvalNotes::default())
    }

    use ByteState::*;

    #[test]
    fn byte_atoms() {
        let m = state(vec![frame("copy", &[Critical; 16])], LabelKind::Push);
        assert_eq!(truth("byte(0, stack(copy)) = Critical", &m), Truth::True);
        assert_eq!(truth("byte(0, stack(copy)) != Critical", &m), Truth::False);
        assert_eq!(truth("byte(16, stack(copy)) = Critical", &m), Truth::Unknown);
        assert_eq!(truth("byte(0, stack(other)) = Critical", &m), Truth::Unknown);
        let mut bytes = vec![Modified; 8];
        bytes.extend([Critical; 8]);
        let m = state(vec![frame("copy", &bytes)], LabelKind::Call("strcpy".into()));
        assert_eq!(truth("byte(0, stack(copy)) = Critical", &m), Truth::False);
    }

    #[test]
    fn canary_antecedent() {
        let m = state(vec![frame("f", &[Critical; 16])], LabelKind::Push);
        let src = "forall_stack f . has_canary(f) => all i in 16..23 : byte(i, stack(f)) = Critical";
        let mut notes = EvalNotes::default();
        let t = eval(&parse_formula(src).unwrap(), &Env::default(), &m, &mut notes);
        assert_eq!(t, Truth::True);
        assert_eq!((notes.implications, notes.antecedents_held), (1, 0));
    }

    #[test]
    fn absent_base_is_dropped_and_noted() {
        let mut f = frame("leaf", &[Critical; 8]);
        f.base = BaseSlot::Absent;
        f.bytes.extend([Free; 8]);
        let m = state(vec![f], LabelKind::Fe);
        let src = "forall_stack f . all i in 8..15 : byte(i, stack(f)) = Critical";
        let mut notes = EvalNotes::default();
        let t = eval(&parse_formula(src).unwrap(), &Env::default(), &m, &mut notes);
        assert_eq!(t, Truth::True);
        assert!(notes.absent.contains("leaf"));
    }

    #[test]
    fn buffer_bounds() {
        let mut bytes = vec![Critical; 16];
        bytes.extend([Free; 16]);
        let mut f = frame("g", &bytes);
        f.buffers.push(Buffer { start: 31, size: 8 });
        let m = state(vec![f], LabelKind::Loop);
        let start = "exists_stack f . exists_buffer s in f . byte(start(buffer(s, f)), f) = Free";
        assert_eq!(truth(start, &m), Truth::True);
        let end = "exists_stack f . exists_buffer s in f . byte(end(s) - 25, f) = Critical";
        assert_eq!(truth(end, &m), Truth::False);
        let end = "exists_stack f . exists_buffer s in f . byte(end(s) - 9, f) = Critical";
        assert_eq!(truth(end, &m), Truth::True);
        assert_eq!(truth("previous_transition = {loop, libc}", &m), Truth::True);
        assert_eq!(truth("previous_transition = call_gets", &m), Truth::False);
    }

    #[test]
    fn libc_matches_any_call() {
        let m = state(vec![frame("g", &[Critical; 8])], LabelKind::Call("gets".into()));
        assert_eq!(truth("previous_transition = libc", &m), Truth::True);
        assert_eq!(truth("previous_transition != call_gets", &m), Truth::False);
        assert_eq!(truth("previous_transition = call_strcpy", &m), Truth::False);
    }

    #[test]
    fn kleene_tables() {
        use Truth::*;
        for a in [True, False, Unknown] {
            assert_eq!(!!a, a);
            assert_eq!(a.and(True), a);
            assert_eq!(a.or(False), a);
            assert_eq!(a.and(False), False);
            assert_eq!(a.or(True), True);
        }
    }
}
