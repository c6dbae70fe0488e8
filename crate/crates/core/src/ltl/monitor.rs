use super::ast::Formula;
use super::eval::{eval, Env, EvalNotes, Truth};
use super::parse::{LtlError, Property};
use crate::memstace::MemoryState;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MonitorState {
    pub name: String,
    pub accepting: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MonitorEdge {
    pub from: usize,
    pub to: usize,
    pub guard: Formula,
}

/// Safety automaton. For the negation monitor the accepting states are the
/// reject states; a run reaching one witnesses a bad prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Monitor {
    pub property: String,
    pub cwes: Vec<String>,
    pub states: Vec<MonitorState>,
    pub edges: Vec<MonitorEdge>,
    pub initial: usize,
    /// Range-expanded body of the outermost `G`.
    pub body: Formula,
    pub negated: bool,
}

impl Monitor {
    pub fn is_reject(&self, q: usize) -> bool {
        self.negated && self.states[q].accepting
    }

    /// Successor of `q` on reading `m`. Edges into a reject state need a
    /// definite `True` guard; other edges fire unless the guard is `False`.
    pub fn step(&self, q: usize, m: &MemoryState, notes: &mut EvalNotes) -> usize {
        let out: Vec<&MonitorEdge> = self.edges.iter().filter(|e| e.from == q).collect();
        for e in out.iter().filter(|e| self.is_reject(e.to)) {
            if eval(&e.guard, &Env::default(), m, notes) == Truth::True {
                return e.to;
            }
        }
        for e in out.iter().filter(|e| !self.is_reject(e.to)) {
            if eval(&e.guard, &Env::default(), m, notes) != Truth::False {
                return e.to;
            }
        }
        q
    }

    /// Position of the first state whose reading drives the monitor into
    /// reject.
    pub fn first_reject(&self, trace: &[MemoryState]) -> Option<usize> {
        let mut q = self.initial;
        let mut notes = EvalNotes::default();
        for (i, m) in trace.iter().enumerate() {
            q = self.step(q, m, &mut notes);
            if self.is_reject(q) {
                return Some(i);
            }
        }
        None
    }

    /// The automaton of the property itself: one accepting state looping on
    /// the body.
    pub fn positive_form(&self) -> Monitor {
        Monitor {
            property: self.property.clone(),
            cwes: self.cwes.clone(),
            states: vec![MonitorState {
                name: "init".into(),
                accepting: true,
            }],
            edges: vec![MonitorEdge {
                from: 0,
                to: 0,
                guard: self.body.clone(),
            }],
            initial: 0,
            body: self.body.clone(),
            negated: false,
        }
    }
}

/// Compile `G p` into the monitor of its negation.
pub fn compile_formula(name: &str, f: &Formula, cwes: &[String]) -> Result<Monitor, LtlError> {
    let Formula::Always(p) = f else {
        return Err(LtlError::UnsupportedFragment(format!(
            "`{name}`: expected an outermost G over a state formula, found `{f}`"
        )));
    };
    if p.has_temporal() {
        return Err(LtlError::UnsupportedFragment(format!(
            "`{name}`: temporal operator under G in `{p}`"
        )));
    }
    let body = p.expand_ranges();
    let bad = if body == Formula::True {
        Formula::False
    } else {
        !body.clone()
    };
    Ok(Monitor {
        property: name.to_string(),
        cwes: cwes.to_vec(),
        states: vec![
            MonitorState {
                name: "run".into(),
                accepting: false,
            },
            MonitorState {
                name: "reject".into(),
                accepting: true,
            },
        ],
        edges: vec![
            MonitorEdge {
                from: 0,
                to: 0,
                guard: body.clone(),
            },
            MonitorEdge { from: 0, to: 1, guard: bad },
            MonitorEdge {
                from: 1,
                to: 1,
                guard: Formula::True,
            },
        ],
        initial: 0,
        body,
        negated: true,
    })
}

pub fn compile_monitor(p: &Property) -> Result<Monitor, LtlError> {
    compile_formula(&p.name, &p.formula, &p.cwes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltl::eval::satisfies;
    use crate::ltl::parse::parse_formula;
    use crate::memstace::{ByteState, LabelKind, StackFrame, TransitionLabel};

    fn monitor(src: &str) -> Result<Monitor, LtlError> {
        compile_formula("p", &parse_formula(src).unwrap(), &[])
    }

    fn st(byte0: ByteState) -> MemoryState {
        let mut f = StackFrame::allocate("main");
        f.bytes[0] = byte0;
        MemoryState {
            frames: vec![f],
            incoming: TransitionLabel {
                kind: LabelKind::Write,
                address: 0,
            },
        }
    }

    #[test]
    fn two_state_shape() {
        let m = monitor("G (forall_stack f . all i in 0..7 : byte(i, stack(f)) = Critical)").unwrap();
        assert_eq!(m.states.len(), 2);
        assert!(m.is_reject(1) && !m.is_reject(0));
        assert_eq!(m.edges.iter().filter(|e| e.from == 0).count(), 2);
        let pos = m.positive_form();
        assert_eq!(pos.states.len(), 1);
        assert_eq!(pos.edges.len(), 1);
        assert_eq!((pos.edges[0].from, pos.edges[0].to), (0, 0));
        assert!(pos.states[0].accepting);
    }

    #[test]
    fn always_true_never_rejects() {
        let m = monitor("G true").unwrap();
        assert_eq!(m.edges[1].guard, Formula::False);
        let trace = vec![st(ByteState::Modified); 5];
        assert_eq!(m.first_reject(&trace), None);
    }

    #[test]
    fn fragment_errors() {
        assert!(matches!(monitor("F true"), Err(LtlError::UnsupportedFragment(_))));
        assert!(matches!(monitor("G (true U false)"), Err(LtlError::UnsupportedFragment(_))));
        assert!(matches!(monitor("true"), Err(LtlError::UnsupportedFragment(_))));
    }

    #[test]
    fn rejects_on_first_falsifying_state() {
        let m = monitor("G byte(0, stack(main)) = Critical").unwrap();
        let trace = vec![
            st(ByteState::Critical),
            st(ByteState::Critical),
            st(ByteState::Modified),
            st(ByteState::Critical),
        ];
        assert_eq!(m.first_reject(&trace), Some(2));
        let brute = trace.iter().position(|s| !satisfies(&m.body, s));
        assert_eq!(brute, Some(2));
    }
}
