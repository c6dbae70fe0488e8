//! Breadth-first search over the product of a state space and a monitor.

pub mod trace;

use crate::diag::{Warning, WarningKind};
use crate::ltl::{EvalNotes, Monitor, Property};
use crate::memstace::MemStaCe;
use serde::Serialize;
use std::collections::{BTreeMap, HashMap, VecDeque};
pub use trace::{build_counterexample, Trace, TraceStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Holds,
    Violated,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub property: String,
    pub status: VerdictStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Trace>,
    pub cwes: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub vacuity: Vec<String>,
    /// Product states visited.
    pub explored: usize,
}

impl Verdict {
    pub fn violated(&self) -> bool {
        self.status == VerdictStatus::Violated
    }
}

fn vacuity_notes(notes: &EvalNotes) -> Vec<String> {
    let mut out = Vec::new();
    if notes.implications > 0 && notes.antecedents_held == 0 {
        out.push("holds vacuously: no implication antecedent was ever true".to_string());
    }
    if !notes.absent.is_empty() {
        let names: Vec<&str> = notes.absent.iter().map(String::as_str).collect();
        out.push(format!(
            "base-register bytes absent (no standard prologue) in: {}",
            names.join(", ")
        ));
    }
    if !notes.missing_frames.is_empty() {
        let names: Vec<&str> = notes.missing_frames.iter().map(String::as_str).collect();
        out.push(format!("named frames never present: {}", names.join(", ")));
    }
    out
}

/// Check one monitor against the space.
/// (MemStaCe state, monitor state).
type Product = (usize, usize);

pub fn check(space: &MemStaCe, monitor: &Monitor) -> Verdict {
    let mut notes = EvalNotes::default();
    let q0 = monitor.step(monitor.initial, &space.states[space.initial], &mut notes);
    let verdict = |status, trace, explored, notes: &EvalNotes| Verdict {
        property: monitor.property.clone(),
        status,
        trace,
        cwes: monitor.cwes.clone(),
        vacuity: if status == VerdictStatus::Violated {
            Vec::new()
        } else {
            vacuity_notes(notes)
        },
        explored,
    };
    if monitor.is_reject(q0) {
        return verdict(
            VerdictStatus::Violated,
            Some(build_counterexample(&[], space)),
            1,
            &notes,
        );
    }
    // Parent links: product state -> (previous product state, transition).
    let mut parent: HashMap<Product, Option<(Product, usize)>> = HashMap::new();
    let mut queue = VecDeque::new();
    parent.insert((space.initial, q0), None);
    queue.push_back((space.initial, q0));
    while let Some((s, q)) = queue.pop_front() {
        for &ti in space.outgoing(s) {
            let t = &space.transitions[ti];
            let q2 = monitor.step(q, &space.states[t.dst], &mut notes);
            let next = (t.dst, q2);
            if parent.contains_key(&next) {
                continue;
            }
            parent.insert(next, Some(((s, q), ti)));
            if monitor.is_reject(q2) {
                let mut path = Vec::new();
                let mut cur = next;
                while let Some(Some((prev, ti))) = parent.get(&cur) {
                    path.push(*ti);
                    cur = *prev;
                }
                path.reverse();
                let explored = parent.len();
                return verdict(
                    VerdictStatus::Violated,
                    Some(build_counterexample(&path, space)),
                    explored,
                    &notes,
                );
            }
            queue.push_back(next);
        }
    }
    let status = if space.truncated {
        VerdictStatus::Inconclusive
    } else {
        VerdictStatus::Holds
    };
    verdict(status, None, parent.len(), &notes)
}

/// Check every monitor, in parallel when enabled. Order follows `monitors`.
pub fn check_all(space: &MemStaCe, monitors: &[Monitor]) -> Vec<Verdict> {
    crate::par::map(monitors, |m| check(space, m))
}

/// Property name to CWE classes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CweDb {
    entries: BTreeMap<String, Vec<String>>,
}

fn normalize(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl CweDb {
    pub fn from_properties(props: &[Property]) -> CweDb {
        let mut db = CweDb::default();
        for p in props {
            if !p.cwes.is_empty() {
                db.entries.insert(normalize(&p.name), p.cwes.clone());
            }
        }
        db
    }

    pub fn bundled() -> CweDb {
        CweDb::from_properties(&crate::ltl::bundled_properties())
    }

    pub fn insert(&mut self, name: &str, cwes: Vec<String>) {
        self.entries.insert(normalize(name), cwes);
    }

    /// CWE classes of a property; names compare case-insensitively.
    pub fn map_cwe(&self, name: &str) -> Vec<String> {
        self.entries.get(&normalize(name)).cloned().unwrap_or_default()
    }

    /// Like `map_cwe`, with a warning for unmapped properties.
    pub fn classify(&self, name: &str) -> (Vec<String>, Option<Warning>) {
        let cwes = self.map_cwe(name);
        let warn = cwes
            .is_empty()
            .then(|| Warning::new(WarningKind::UnmappedProperty, format!("property `{name}` has no CWE mapping")));
        (cwes, warn)
    }
}

pub fn map_cwe(name: &str) -> Vec<String> {
    CweDb::bundled().map_cwe(name)
}
