//! Stack effects of library calls and loops by concrete emulation.
//!
//! Each probe runs the program from its root with attacker inputs of a
//! given length, stops at the call site (or loop header) under the
//! requested call context, snapshots the stack, executes the call (or the
//! loop) and snapshots again. Changed bytes are reported as positions
//! relative to the top frame, as [`crate::memstace::MemOp::Touched`] expects.

use super::libc::{LibcDb, Rule};
use super::loops::Loop;
use crate::frontend::{FunctionListing, Gpr, ProgramImage};
use crate::validator::machine::{Inputs, Machine, Start, STACK_HIGH};
use crate::validator::{root_function, start_machine};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::sync::Mutex;

pub const FILLER: u8 = b'A';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectsConfig {
    pub max_input_len: usize,
    pub max_loop_iters: usize,
    pub step_budget: u64,
    pub entry: Option<String>,
}

impl Default for EffectsConfig {
    fn default() -> Self {
        EffectsConfig {
            max_input_len: 4096,
            max_loop_iters: 64,
            step_budget: 1_000_000,
            entry: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputStream {
    Stdin,
    Argv,
    /// Both streams carry the filler.
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashInput {
    pub stream: InputStream,
    pub length: usize,
    pub inputs: Inputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectStatus {
    Ok,
    /// The site was not reached on the explored run.
    Unreached,
    /// The step budget ran out before the site.
    Diverged,
    /// Semantics outside the supported subset; no effect applied.
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallEffect {
    pub site: u64,
    pub callee: String,
    pub context: Vec<u64>,
    /// Changed positions, relative to the calling frame, at the maximum
    /// input length.
    pub touched: Vec<i64>,
    pub input_dependent: bool,
    /// Smallest probed input length whose write reaches a return address
    /// or canary.
    pub crash_length: Option<usize>,
    pub concrete_input: Option<CrashInput>,
    /// Reached only by starting at the containing function.
    pub synthetic_start: bool,
    pub status: EffectStatus,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl CallEffect {
    pub fn empty(site: u64, callee: &str, context: &[u64], status: EffectStatus) -> CallEffect {
        CallEffect {
            site,
            callee: callee.to_string(),
            context: context.to_vec(),
            touched: Vec::new(),
            input_dependent: false,
            crash_length: None,
            concrete_input: None,
            synthetic_start: false,
            status,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopEffect {
    pub header: u64,
    pub exit: Option<u64>,
    pub context: Vec<u64>,
    pub touched: Vec<i64>,
    pub iterations: usize,
    pub budget_exhausted: bool,
    pub input_dependent: bool,
    pub synthetic_start: bool,
    pub status: EffectStatus,
}

impl LoopEffect {
    pub fn empty(header: u64, exit: Option<u64>, context: &[u64], status: EffectStatus) -> LoopEffect {
        LoopEffect {
            header,
            exit,
            context: context.to_vec(),
            touched: Vec::new(),
            iterations: 0,
            budget_exhausted: false,
            input_dependent: false,
            synthetic_start: false,
            status,
        }
    }
}

/// Source of indirect-transition effects for the state-space builder.
pub trait EffectsOracle: Sync {
    fn call_effect(&self, site: u64, callee: &str, context: &[u64]) -> CallEffect;
    fn loop_effect(&self, header: u64, context: &[u64]) -> LoopEffect;
    fn loops(&self) -> &[Loop];
    fn libc(&self) -> &LibcDb;
    /// Every call effect computed so far, ordered by site and context.
    fn call_effects(&self) -> Vec<CallEffect> {
        Vec::new()
    }
}

/// Effects that touch nothing; loops are still reported so the builder
/// summarises them.
pub struct NullEffects {
    pub loops: Vec<Loop>,
    pub libc: LibcDb,
}

impl EffectsOracle for NullEffects {
    fn call_effect(&self, site: u64, callee: &str, context: &[u64]) -> CallEffect {
        CallEffect::empty(site, callee, context, EffectStatus::Ok)
    }

    fn loop_effect(&self, header: u64, context: &[u64]) -> LoopEffect {
        let exit = self.loops.iter().find(|l| l.header == header).and_then(|l| l.exit);
        LoopEffect::empty(header, exit, context, EffectStatus::Ok)
    }

    fn loops(&self) -> &[Loop] {
        &self.loops
    }

    fn libc(&self) -> &LibcDb {
        &self.libc
    }
}

type Key = (u64, Vec<u64>);

pub struct Emulator<'a> {
    image: &'a ProgramImage,
    libc: LibcDb,
    loops: Vec<Loop>,
    cfg: EffectsConfig,
    root: Option<FunctionListing>,
    calls: Mutex<BTreeMap<Key, CallEffect>>,
    loop_cache: Mutex<BTreeMap<Key, LoopEffect>>,
}

struct Probe {
    positions: Vec<i64>,
    hits_control: bool,
    synthetic: bool,
    format: Option<Vec<u8>>,
}

enum Reach<'m> {
    At(Box<Machine<'m>>, bool),
    Missed { diverged: bool },
}

/// Whether a format string stays within `%s`, `%d`, `%x` and literal text.
pub fn format_in_subset(fmt: &[u8]) -> bool {
    let mut i = 0;
    while i < fmt.len() {
        if fmt[i] == b'%' {
            match fmt.get(i + 1) {
                Some(b's' | b'd' | b'x' | b'%') => i += 2,
                _ => return false,
            }
        } else {
            i += 1;
        }
    }
    true
}

fn filler_inputs(len: usize, stream: InputStream) -> Inputs {
    let fill = vec![FILLER; len];
    let line = |b: &[u8]| {
        let mut v = b.to_vec();
        v.push(b'\n');
        v
    };
    match stream {
        InputStream::Both => Inputs {
            stdin: line(&fill),
            args: vec![fill],
        },
        InputStream::Stdin => Inputs {
            stdin: line(&fill),
            args: vec![b"a".to_vec()],
        },
        InputStream::Argv => Inputs {
            stdin: b"a\n".to_vec(),
            args: vec![fill],
        },
    }
}

fn diff_positions(before: &[u8], after: &[u8], lo: u64, top_entry: u64) -> Vec<i64> {
    before
        .iter()
        .zip(after)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(k, _)| top_entry as i64 + 7 - (lo + k as u64) as i64)
        .collect()
}

impl<'a> Emulator<'a> {
    pub fn new(image: &'a ProgramImage, libc: LibcDb, loops: Vec<Loop>, cfg: EffectsConfig) -> Emulator<'a> {
        let root = root_function(image, cfg.entry.as_deref()).ok().cloned();
        Emulator {
            image,
            libc,
            loops,
            cfg,
            root,
            calls: Mutex::new(BTreeMap::new()),
            loop_cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &EffectsConfig {
        &self.cfg
    }

    /// Run until `target` is about to execute under `context`.
    fn reach(&self, target: usize, context: &[u64], inputs: &Inputs) -> Reach<'_> {
        let mut diverged = false;
        if let Some(root) = &self.root {
            let mut m = start_machine(self.image, &self.libc, root, inputs, self.cfg.step_budget);
            loop {
                if m.pc_index() == Some(target) && m.call_context() == context {
                    return Reach::At(Box::new(m), false);
                }
                if let Some(out) = m.step() {
                    diverged = out.status == crate::validator::Status::StepBudgetExceeded;
                    break;
                }
            }
        }
        // Fall back to entering the containing function directly.
        let Some(f) = self.image.function_of_index(target) else {
            return Reach::Missed { diverged };
        };
        if self.root.as_ref().map(|r| r.name == f.name).unwrap_or(false) && context.is_empty() {
            return Reach::Missed { diverged };
        }
        let mut m = Machine::new(self.image, &self.libc, inputs, self.cfg.step_budget);
        m.start(
            f.start,
            Start::Synthetic {
                bytes: inputs.args.first().cloned().unwrap_or_default(),
            },
        );
        loop {
            if m.pc_index() == Some(target) && m.shadows.len() == 1 {
                return Reach::At(Box::new(m), true);
            }
            if let Some(out) = m.step() {
                diverged |= out.status == crate::validator::Status::StepBudgetExceeded;
                return Reach::Missed { diverged };
            }
        }
    }

    fn probe_call(&self, site: usize, context: &[u64], rule: Rule, inputs: &Inputs) -> Result<Probe, bool> {
        let (mut m, synthetic) = match self.reach(site, context, inputs) {
            Reach::At(m, s) => (*m, s),
            Reach::Missed { diverged } => return Err(diverged),
        };
        let format = match rule {
            Rule::Format => Some(m.read_string(m.reg(Gpr::Rsi))),
            Rule::FormatBounded => Some(m.read_string(m.reg(Gpr::Rdx))),
            _ => None,
        };
        let lo = m.rsp().saturating_sub(256);
        let top_entry = m.shadows.last().map(|s| s.entry_rsp).unwrap_or(lo);
        let control: HashSet<u64> = m.shadows.iter().flat_map(|s| s.guard_bytes()).collect();
        let before = m.stack_bytes(lo, STACK_HIGH);
        m.step();
        let after = m.stack_bytes(lo, STACK_HIGH);
        let hits_control = before
            .iter()
            .zip(&after)
            .enumerate()
            .any(|(k, (a, b))| a != b && control.contains(&(lo + k as u64)));
        Ok(Probe {
            positions: diff_positions(&before, &after, lo, top_entry),
            hits_control,
            synthetic,
            format,
        })
    }

    fn hits(&self, site: usize, context: &[u64], rule: Rule, len: usize, stream: InputStream) -> bool {
        self.probe_call(site, context, rule, &filler_inputs(len, stream))
            .map(|p| p.hits_control)
            .unwrap_or(false)
    }

    /// Smallest length reaching control data: doubling, then bisection.
    fn search_length(&self, site: usize, context: &[u64], rule: Rule) -> Option<usize> {
        let max = self.cfg.max_input_len.max(1);
        let mut lo = 0usize;
        let mut hi = None;
        let mut len = 1usize;
        loop {
            if self.hits(site, context, rule, len, InputStream::Both) {
                hi = Some(len);
                break;
            }
            lo = len;
            if len >= max {
                break;
            }
            len = (len * 2).min(max);
        }
        let mut hi = hi?;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.hits(site, context, rule, mid, InputStream::Both) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }

    fn compute_call(&self, site: u64, callee: &str, context: &[u64]) -> CallEffect {
        let Some(spec) = self.libc.get(callee) else {
            let mut e = CallEffect::empty(site, callee, context, EffectStatus::Opaque);
            e.notes.push(format!("unknown library function `{callee}`"));
            return e;
        };
        let Some(idx) = self.image.index_of(site) else {
            return CallEffect::empty(site, callee, context, EffectStatus::Unreached);
        };
        let rule = spec.rule;
        let max = self.cfg.max_input_len;
        let at_max = match self.probe_call(idx, context, rule, &filler_inputs(max, InputStream::Both)) {
            Ok(p) => p,
            Err(diverged) => {
                let status = if diverged {
                    EffectStatus::Diverged
                } else {
                    EffectStatus::Unreached
                };
                return CallEffect::empty(site, callee, context, status);
            }
        };
        let mut e = CallEffect::empty(site, callee, context, EffectStatus::Ok);
        e.synthetic_start = at_max.synthetic;
        if let Some(fmt) = &at_max.format {
            if !format_in_subset(fmt) {
                e.status = EffectStatus::Opaque;
                e.notes.push(format!(
                    "format `{}` outside the %s/%d/%x subset",
                    String::from_utf8_lossy(fmt)
                ));
                return e;
            }
        }
        let at_one = self
            .probe_call(idx, context, rule, &filler_inputs(1, InputStream::Both))
            .map(|p| p.positions)
            .unwrap_or_default();
        e.input_dependent = at_one != at_max.positions;
        e.touched = at_max.positions;
        if e.input_dependent {
            e.crash_length = self.search_length(idx, context, rule);
        }
        if let Some(len) = e.crash_length {
            if e.synthetic_start {
                e.notes
                    .push("site reached only from its own function; no program-level input".to_string());
            } else {
                let stream = if self.hits(idx, context, rule, len, InputStream::Stdin) {
                    InputStream::Stdin
                } else if self.hits(idx, context, rule, len, InputStream::Argv) {
                    InputStream::Argv
                } else {
                    InputStream::Both
                };
                e.concrete_input = Some(CrashInput {
                    stream,
                    length: len,
                    inputs: filler_inputs(len, stream),
                });
            }
        }
        e
    }

    fn probe_loop(&self, lp: &Loop, context: &[u64], inputs: &Inputs) -> Result<LoopEffect, bool> {
        let Some(header) = self.image.index_of(lp.header) else {
            return Err(false);
        };
        let (mut m, synthetic) = match self.reach(header, context, inputs) {
            Reach::At(m, s) => (*m, s),
            Reach::Missed { diverged } => return Err(diverged),
        };
        let depth = m.shadows.len();
        let lo = m.rsp().saturating_sub(256);
        let top_entry = m.shadows.last().map(|s| s.entry_rsp).unwrap_or(lo);
        let before = m.stack_bytes(lo, STACK_HIGH);
        let mut iterations = 0;
        let mut budget_exhausted = false;
        loop {
            if m.step().is_some() {
                break;
            }
            let Some(pc) = m.pc() else { break };
            if m.shadows.len() < depth || (m.shadows.len() == depth && !lp.contains(pc)) {
                break;
            }
            if pc == lp.header && m.shadows.len() == depth {
                iterations += 1;
                if iterations >= self.cfg.max_loop_iters {
                    budget_exhausted = true;
                    break;
                }
            }
        }
        let after = m.stack_bytes(lo, STACK_HIGH);
        Ok(LoopEffect {
            header: lp.header,
            exit: lp.exit,
            context: context.to_vec(),
            touched: diff_positions(&before, &after, lo, top_entry),
            iterations,
            budget_exhausted,
            input_dependent: false,
            synthetic_start: synthetic,
            status: EffectStatus::Ok,
        })
    }

    fn compute_loop(&self, header: u64, context: &[u64]) -> LoopEffect {
        let Some(lp) = self.loops.iter().find(|l| l.header == header) else {
            return LoopEffect::empty(header, None, context, EffectStatus::Unreached);
        };
        if lp.irreducible {
            return LoopEffect::empty(header, lp.exit, context, EffectStatus::Opaque);
        }
        let max = self.cfg.max_input_len;
        match self.probe_loop(lp, context, &filler_inputs(max, InputStream::Both)) {
            Ok(mut e) => {
                if let Ok(one) = self.probe_loop(lp, context, &filler_inputs(1, InputStream::Both)) {
                    e.input_dependent = one.touched != e.touched;
                }
                e
            }
            Err(diverged) => {
                let status = if diverged {
                    EffectStatus::Diverged
                } else {
                    EffectStatus::Unreached
                };
                LoopEffect::empty(header, lp.exit, context, status)
            }
        }
    }
}

impl EffectsOracle for Emulator<'_> {
    fn call_effect(&self, site: u64, callee: &str, context: &[u64]) -> CallEffect {
        let key = (site, context.to_vec());
        if let Some(e) = self.calls.lock().expect("effects cache").get(&key) {
            return e.clone();
        }
        let e = self.compute_call(site, callee, context);
        self.calls.lock().expect("effects cache").insert(key, e.clone());
        e
    }

    fn loop_effect(&self, header: u64, context: &[u64]) -> LoopEffect {
        let key = (header, context.to_vec());
        if let Some(e) = self.loop_cache.lock().expect("effects cache").get(&key) {
            return e.clone();
        }
        let e = self.compute_loop(header, context);
        self.loop_cache.lock().expect("effects cache").insert(key, e.clone());
        e
    }

    fn loops(&self) -> &[Loop] {
        &self.loops
    }

    fn libc(&self) -> &LibcDb {
        &self.libc
    }

    fn call_effects(&self) -> Vec<CallEffect> {
        self.calls.lock().expect("effects cache").values().cloned().collect()
    }
}

/// The crash-inducing input recorded by an effect, if any.
pub fn extract_concrete_input(effect: &CallEffect) -> Option<&CrashInput> {
    effect.concrete_input.as_ref()
}
