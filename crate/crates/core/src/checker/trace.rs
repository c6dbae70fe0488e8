use crate::memstace::{ByteDelta, ByteState, LabelKind, MemStaCe};
use serde::Serialize;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceStep {
    /// Index into the state space's transitions.
    pub transition: usize,
    pub address: u64,
    pub text: String,
    pub op: String,
    pub frame: String,
    pub deltas: Vec<ByteDelta>,
    #[serde(skip)]
    frame_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    /// The state the last step leads to.
    pub final_state: usize,
}

fn op_name(kind: &LabelKind) -> String {
    match kind {
        LabelKind::Call(n) => format!("Call({n})"),
        k => k.name(),
    }
}

/// One step per transition on the path.
pub fn build_counterexample(path: &[usize], space: &MemStaCe) -> Trace {
    let steps = path
        .iter()
        .map(|&ti| {
            let t = &space.transitions[ti];
            let src = &space.states[t.src];
            let dst = &space.states[t.dst];
            let name_of = |fi: usize| {
                dst.frames
                    .get(fi)
                    .or_else(|| src.frames.get(fi))
                    .map(|f| f.label.clone())
                    .unwrap_or_default()
            };
            let frame = t
                .deltas
                .iter()
                .map(|d| d.frame)
                .max()
                .map(name_of)
                .or_else(|| dst.frames.last().map(|f| f.label.clone()))
                .unwrap_or_default();
            let n = src.frames.len().max(dst.frames.len());
            TraceStep {
                transition: ti,
                address: t.label.address,
                text: t.text.clone(),
                op: op_name(&t.label.kind),
                frame,
                deltas: t.deltas.clone(),
                frame_names: (0..n).map(name_of).collect(),
            }
        })
        .collect();
    let final_state = path
        .last()
        .map(|&t| space.transitions[t].dst)
        .unwrap_or(space.initial);
    Trace { steps, final_state }
}

fn state_name(s: Option<ByteState>) -> String {
    s.map(|s| s.to_string()).unwrap_or_else(|| "_".into())
}

/// `a..b:Before->After` runs over consecutive indices, ascending.
fn render_deltas(deltas: &[&ByteDelta]) -> String {
    let mut d: Vec<&ByteDelta> = deltas.to_vec();
    d.sort_by_key(|x| x.index);
    let mut parts = Vec::new();
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len()
            && d[j + 1].index == d[j].index + 1
            && d[j + 1].before == d[i].before
            && d[j + 1].after == d[i].after
        {
            j += 1;
        }
        let range = if i == j {
            d[i].index.to_string()
        } else {
            format!("{}..{}", d[i].index, d[j].index)
        };
        parts.push(format!("{range}:{}->{}", state_name(d[i].before), state_name(d[i].after)));
        i = j + 1;
    }
    parts.join(",")
}

impl fmt::Display for TraceStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:x}: {} -> {}", self.address, self.text, self.op)?;
        let mut frames: Vec<usize> = self.deltas.iter().map(|d| d.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        if frames.is_empty() {
            return write!(f, "[{}]()", self.frame);
        }
        // Innermost frame first.
        for fi in frames.into_iter().rev() {
            let ds: Vec<&ByteDelta> = self.deltas.iter().filter(|d| d.frame == fi).collect();
            let name = self.frame_names.get(fi).cloned().unwrap_or_default();
            write!(f, "[{name}]({})", render_deltas(&ds))?;
        }
        Ok(())
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

impl Trace {
    pub fn lines(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
