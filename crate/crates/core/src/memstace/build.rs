//! Depth-first construction of the memory state space.

use super::classify::{buffer_refs, classify_instruction, frame_offsets, infer_buffer_size, update_ctx, FrameCtx, MemOpClass};
use super::model::{
    apply_memory_operator, BaseSlot, Buffer, ByteDelta, ByteOp, LabelKind, MemError, MemOp, MemoryState, StackFrame,
    TransitionLabel,
};
use crate::diag::{Warning, WarningKind};
use crate::effects::{EffectStatus, EffectsOracle, Loop};
use crate::frontend::{FunctionMap, Mnemonic, Operand, ProgramImage};
use crate::validator::root_function;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferHint {
    pub function: String,
    pub offset: i64,
    pub size: usize,
}

/// Pinned buffer sizes, keyed by function and `rbp` offset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferHints {
    #[serde(default, rename = "buffer")]
    pub buffers: Vec<BufferHint>,
}

impl BufferHints {
    pub fn from_toml(text: &str) -> Result<BufferHints, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn size(&self, function: &str, offset: i64) -> Option<usize> {
        self.buffers
            .iter()
            .find(|b| b.function == function && b.offset == offset)
            .map(|b| b.size)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub max_states: usize,
    pub max_call_depth: usize,
    pub atomic_writes: bool,
    pub entry: Option<String>,
    pub buffers: BufferHints,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            max_states: 100_000,
            max_call_depth: 64,
            atomic_writes: false,
            entry: None,
            buffers: BufferHints::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("no entry function to start from")]
    NoEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transition {
    pub src: usize,
    pub dst: usize,
    pub label: TransitionLabel,
    pub text: String,
    pub op: MemOp,
    pub deltas: Vec<ByteDelta>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemStaCe {
    pub root: String,
    pub states: Vec<MemoryState>,
    pub transitions: Vec<Transition>,
    pub initial: usize,
    pub truncated: bool,
    pub warnings: Vec<Warning>,
    #[serde(skip)]
    out: Vec<Vec<usize>>,
}

impl MemStaCe {
    pub fn from_parts(root: &str, states: Vec<MemoryState>, transitions: Vec<Transition>, initial: usize, truncated: bool) -> MemStaCe {
        let mut out = vec![Vec::new(); states.len()];
        for (i, t) in transitions.iter().enumerate() {
            out[t.src].push(i);
        }
        MemStaCe {
            root: root.to_string(),
            states,
            transitions,
            initial,
            truncated,
            warnings: Vec::new(),
            out,
        }
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.len()
    }

    /// Indices of the transitions leaving `state`.
    pub fn outgoing(&self, state: usize) -> &[usize] {
        &self.out[state]
    }

    pub fn successors(&self, state: usize) -> impl Iterator<Item = &Transition> {
        self.out[state].iter().map(|i| &self.transitions[*i])
    }

    /// Count of transitions per label kind.
    pub fn label_multiset(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for t in &self.transitions {
            *m.entry(t.label.kind.name()).or_insert(0) += 1;
        }
        m
    }

    fn state_summary(&self, s: usize) -> String {
        self.states[s]
            .frames
            .iter()
            .map(|f| format!("{}: {}", f.label, f.rle()))
            .collect::<Vec<_>>()
            .join(" | ")
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph memstace {\n  node [shape=box, fontname=monospace];\n");
        for s in 0..self.states.len() {
            let shape = if s == self.initial { ", style=bold" } else { "" };
            let _ = writeln!(out, "  s{s} [label=\"s{s}\\n{}\"{shape}];", self.state_summary(s).replace('"', "\\\""));
        }
        for t in &self.transitions {
            let _ = writeln!(
                out,
                "  s{} -> s{} [label=\"{} @{:#x}\\n{}\"];",
                t.src,
                t.dst,
                t.label.kind.name(),
                t.label.address,
                t.text.replace('"', "\\\"")
            );
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let states: Vec<serde_json::Value> = self
            .states
            .iter()
            .enumerate()
            .map(|(i, m)| {
                serde_json::json!({
                    "id": i,
                    "incoming": m.incoming.kind.name(),
                    "frames": m.frames.iter().map(|f| serde_json::json!({
                        "label": f.label,
                        "bytes": f.rle(),
                        "buffers": f.buffers,
                        "has_canary": f.has_canary,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        let edges: Vec<serde_json::Value> = self
            .transitions
            .iter()
            .map(|t| {
                serde_json::json!({
                    "src": t.src,
                    "dst": t.dst,
                    "kind": t.label.kind.name(),
                    "address": format!("{:#x}", t.label.address),
                    "text": t.text,
                })
            })
            .collect();
        serde_json::json!({
            "root": self.root,
            "initial": self.initial,
            "truncated": self.truncated,
            "states": states,
            "transitions": edges,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CallRecord {
    ret: u64,
    saved: FrameCtx,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Ctx {
    calls: Vec<CallRecord>,
    frame: FrameCtx,
}

impl Ctx {
    fn rets(&self) -> Vec<u64> {
        self.calls.iter().map(|c| c.ret).collect()
    }
}

type StateKey = (Vec<StackFrame>, LabelKind);

struct Builder<'a> {
    image: &'a ProgramImage,
    funcs: &'a FunctionMap,
    cfg: &'a BuildConfig,
    loops: HashMap<u64, &'a Loop>,
    states: Vec<MemoryState>,
    index: HashMap<StateKey, usize>,
    transitions: Vec<Transition>,
    seen: HashSet<(usize, TransitionLabel, usize)>,
    warnings: Vec<Warning>,
    warned: HashSet<(WarningKind, u64, String)>,
    truncated: bool,
    offsets: HashMap<String, Vec<i64>>,
}

impl<'a> Builder<'a> {
    fn warn(&mut self, kind: WarningKind, address: u64, message: String) {
        if self.warned.insert((kind, address, message.clone())) {
            self.warnings.push(Warning::new(kind, message).at(address));
        }
    }

    fn intern(&mut self, m: MemoryState) -> Option<usize> {
        let key = (m.frames.clone(), m.incoming.kind.clone());
        if let Some(&id) = self.index.get(&key) {
            return Some(id);
        }
        if self.states.len() >= self.cfg.max_states {
            self.truncated = true;
            return None;
        }
        let id = self.states.len();
        self.states.push(m);
        self.index.insert(key, id);
        Some(id)
    }

    /// Apply one operator; `None` when the state budget is exhausted.
    fn apply_one(&mut self, src: usize, op: MemOp, label: TransitionLabel, text: &str) -> Option<usize> {
        let applied = match apply_memory_operator(&self.states[src], &op, label.clone()) {
            Ok(a) => Ok((a, op)),
            Err(MemError::IllegalByteTransition(s, o)) => {
                self.warn(
                    WarningKind::IllegalByteTransition,
                    label.address,
                    format!("{s:?} + {o:?} at `{text}`; applied as nRWrite"),
                );
                let retry = match op {
                    MemOp::Write { first, len, .. } => MemOp::Write {
                        first,
                        len,
                        op: ByteOp::NRWrite,
                        canary: false,
                    },
                    MemOp::Push { .. } => MemOp::Push { op: ByteOp::NRWrite },
                    other => other,
                };
                apply_memory_operator(&self.states[src], &retry, label.clone()).map(|a| (a, retry))
            }
            Err(e) => Err(e),
        };
        let (applied, op) = match applied {
            Ok(x) => x,
            Err(e) => {
                let kind = match e {
                    MemError::WriteOutsideStack => WarningKind::WriteOutsideStack,
                    MemError::OverlappingBuffer { .. } | MemError::BufferOutsideFrame { .. } => {
                        WarningKind::OverlappingBuffer
                    }
                    _ => WarningKind::IllegalByteTransition,
                };
                self.warn(kind, label.address, format!("`{text}`: {e}; skipped"));
                return Some(src);
            }
        };
        if applied.clipped > 0 {
            self.warn(
                WarningKind::ClippedEffect,
                label.address,
                format!("`{text}`: {} byte(s) outside every modelled frame", applied.clipped),
            );
        }
        let before = self.states[src].frames.last().map(|f| (f.label.clone(), f.base));
        let after = applied.state.frames.last().map(|f| f.base);
        if let (Some((name, BaseSlot::Pending)), Some(BaseSlot::Absent)) = (before, after) {
            self.warn(
                WarningKind::NoStandardPrologue,
                label.address,
                format!("`{name}` has no base-register push; indices 8-15 absent"),
            );
        }
        let dst = self.intern(applied.state)?;
        if self.seen.insert((src, label.clone(), dst)) {
            self.transitions.push(Transition {
                src,
                dst,
                label,
                text: text.to_string(),
                op,
                deltas: applied.deltas,
            });
        }
        Some(dst)
    }

    /// Apply an operator, split per byte in atomic mode.
    fn add(&mut self, src: usize, op: MemOp, kind: LabelKind, address: u64, text: &str) -> Option<usize> {
        let label = TransitionLabel { kind, address };
        if !self.cfg.atomic_writes {
            return self.apply_one(src, op, label, text);
        }
        let parts: Vec<MemOp> = match &op {
            MemOp::Write { first, len, op, canary } if *len > 1 => (0..*len as i64)
                .map(|k| MemOp::Write {
                    first: first - k,
                    len: 1,
                    op: *op,
                    canary: *canary,
                })
                .collect(),
            MemOp::Touched { positions } if positions.len() > 1 => {
                let mut p = positions.clone();
                // Ascending addresses are descending positions.
                p.sort_unstable_by(|a, b| b.cmp(a));
                p.into_iter().map(|x| MemOp::Touched { positions: vec![x] }).collect()
            }
            _ => vec![op],
        };
        let mut cur = src;
        for part in parts {
            cur = self.apply_one(cur, part, label.clone(), text)?;
        }
        Some(cur)
    }

    fn function_offsets(&mut self, name: &str) -> Vec<i64> {
        if let Some(v) = self.offsets.get(name) {
            return v.clone();
        }
        let v = match self.image.function(name) {
            Some(f) => frame_offsets(&self.image.instructions[f.start..f.end]),
            None => Vec::new(),
        };
        self.offsets.insert(name.to_string(), v.clone());
        v
    }

    /// Emit buffer-register pseudo-transitions for the instruction at `idx`.
    fn register_buffers(&mut self, idx: usize, ctx: &FrameCtx, mut sid: usize) -> Option<usize> {
        let ins = &self.image.instructions[idx];
        let refs = buffer_refs(ins);
        if refs.is_empty() {
            return Some(sid);
        }
        let Some(rbp) = ctx.rbp_pos else {
            return Some(sid);
        };
        let function = self
            .image
            .function_of_index(idx)
            .map(|f| f.name.clone())
            .unwrap_or_default();
        let known = self.function_offsets(&function);
        for off in refs {
            let size = self
                .cfg
                .buffers
                .size(&function, off)
                .unwrap_or_else(|| infer_buffer_size(off, &known));
            let start = rbp as i64 - off;
            let Some(top) = self.states[sid].frames.last() else {
                return Some(sid);
            };
            if start >= 0 && (start as usize) < top.phys_len() {
                let b = Buffer {
                    start: top.logical(start as usize),
                    size,
                };
                if top.has_buffer(&b) {
                    continue;
                }
            }
            sid = self.add(
                sid,
                MemOp::RegisterBuffer { start, size },
                LabelKind::BufferRegister,
                ins.address,
                &ins.text,
            )?;
        }
        Some(sid)
    }

    fn is_user_target(&self, address: u64, plt: bool) -> bool {
        !plt && self
            .image
            .function_of(address)
            .map(|f| self.funcs.is_user(&f.name))
            .unwrap_or(false)
    }
}

struct Item {
    idx: usize,
    ctx: Ctx,
    sid: usize,
}

/// Build the state space from the root function.
pub fn build_memstace(
    image: &ProgramImage,
    funcs: &FunctionMap,
    oracle: &dyn EffectsOracle,
    cfg: &BuildConfig,
) -> Result<MemStaCe, BuildError> {
    let root = root_function(image, cfg.entry.as_deref()).map_err(|_| BuildError::NoEntry)?;
    let mut b = Builder {
        image,
        funcs,
        cfg,
        loops: oracle
            .loops()
            .iter()
            .filter(|l| !l.irreducible)
            .map(|l| (l.header, l))
            .collect(),
        states: Vec::new(),
        index: HashMap::new(),
        transitions: Vec::new(),
        seen: HashSet::new(),
        warnings: Vec::new(),
        warned: HashSet::new(),
        truncated: false,
        offsets: HashMap::new(),
    };
    let initial = b
        .intern(MemoryState::initial(&root.name, root.address))
        .ok_or(BuildError::NoEntry)?;
    let mut start = root.start;
    if image.instructions[start].mnemonic == Mnemonic::Endbr64 && start + 1 < root.end {
        start += 1;
    }

    let mut stack = vec![Item {
        idx: start,
        ctx: Ctx {
            calls: Vec::new(),
            frame: FrameCtx::default(),
        },
        sid: initial,
    }];
    let mut visited: HashSet<(usize, Ctx, usize)> = HashSet::new();

    while let Some(Item { idx, ctx, sid }) = stack.pop() {
        if !visited.insert((idx, ctx.clone(), sid)) {
            continue;
        }
        let ins = &image.instructions[idx];
        let next = |i: usize| image.next_in_function(i).and_then(|a| image.index_of(a));

        if let Some(lp) = b.loops.get(&ins.address).copied() {
            let mut s = sid;
            let body: Vec<usize> = lp.addresses.iter().filter_map(|a| image.index_of(*a)).collect();
            let mut ok = true;
            for bi in body {
                match b.register_buffers(bi, &ctx.frame, s) {
                    Some(n) => s = n,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let effect = oracle.loop_effect(lp.header, &ctx.rets());
            if effect.status != EffectStatus::Ok {
                b.warn(
                    WarningKind::EffectsFailure,
                    lp.header,
                    format!("loop at {:#x}: {:?}", lp.header, effect.status),
                );
            }
            if effect.budget_exhausted {
                b.warn(
                    WarningKind::IterationBudget,
                    lp.header,
                    format!("loop at {:#x} stopped after {} iterations", lp.header, effect.iterations),
                );
            }
            let text = format!("loop {:#x}", lp.header);
            let Some(s) = b.add(s, MemOp::Touched { positions: effect.touched }, LabelKind::Loop, lp.header, &text) else {
                continue;
            };
            if let Some(exit) = lp.exit.and_then(|a| image.index_of(a)) {
                stack.push(Item { idx: exit, ctx, sid: s });
            }
            continue;
        }

        let Some(sid) = b.register_buffers(idx, &ctx.frame, sid) else {
            continue;
        };
        let phys = match b.states[sid].frames.last() {
            Some(f) => f.phys_len(),
            None => continue,
        };
        let class = classify_instruction(ins, &ctx.frame, phys);
        let frame = update_ctx(ins, &ctx.frame, phys);

        match class {
            MemOpClass::Op(MemOp::Release) => {
                let mut calls = ctx.calls.clone();
                let Some(rec) = calls.pop() else {
                    // The root returns: the path is complete.
                    continue;
                };
                let Some(s) = b.add(sid, MemOp::Release, LabelKind::Pop, ins.address, &ins.text) else {
                    continue;
                };
                if let Some(r) = image.index_of(rec.ret) {
                    stack.push(Item {
                        idx: r,
                        ctx: Ctx { calls, frame: rec.saved },
                        sid: s,
                    });
                }
            }
            MemOpClass::Op(op) => {
                let kind = op.kind(None, false);
                let Some(s) = b.add(sid, op, kind, ins.address, &ins.text) else {
                    continue;
                };
                if let Some(n) = next(idx) {
                    stack.push(Item {
                        idx: n,
                        ctx: Ctx {
                            calls: ctx.calls,
                            frame,
                        },
                        sid: s,
                    });
                }
            }
            MemOpClass::Indirect => {
                let ret_idx = next(idx);
                match ins.operands.first() {
                    Some(Operand::Target(t)) if b.is_user_target(t.address, t.is_plt()) => {
                        if ctx.calls.len() >= cfg.max_call_depth {
                            b.truncated = true;
                            b.warn(
                                WarningKind::Truncation,
                                ins.address,
                                format!("call depth {} reached", cfg.max_call_depth),
                            );
                            continue;
                        }
                        let Some(entry) = image.index_of(t.address) else { continue };
                        let callee = image
                            .function_of_index(entry)
                            .map(|f| f.name.clone())
                            .unwrap_or_default();
                        let (body, text) = if image.instructions[entry].mnemonic == Mnemonic::Endbr64 {
                            (next(entry), image.instructions[entry].text.clone())
                        } else {
                            (Some(entry), format!("{callee}:"))
                        };
                        let Some(s) = b.add(
                            sid,
                            MemOp::Fa {
                                function: callee.clone(),
                            },
                            LabelKind::Fa,
                            t.address,
                            &text,
                        ) else {
                            continue;
                        };
                        let mut calls = ctx.calls.clone();
                        calls.push(CallRecord {
                            ret: image.return_address(idx),
                            saved: frame,
                        });
                        if let Some(bi) = body {
                            stack.push(Item {
                                idx: bi,
                                ctx: Ctx {
                                    calls,
                                    frame: FrameCtx::default(),
                                },
                                sid: s,
                            });
                        }
                    }
                    Some(Operand::Target(t)) => {
                        let name = t
                            .plain_symbol()
                            .map(str::to_string)
                            .unwrap_or_else(|| format!("{:#x}", t.address));
                        let spec = oracle.libc().get(&name).cloned();
                        let touched = match &spec {
                            None => {
                                b.warn(
                                    WarningKind::UnknownLibc,
                                    ins.address,
                                    format!("`{name}` is not in the library database; no stack effect"),
                                );
                                Vec::new()
                            }
                            Some(s) if s.rule.is_noreturn() => continue,
                            Some(_) => {
                                let e = oracle.call_effect(ins.address, &name, &ctx.rets());
                                match e.status {
                                    EffectStatus::Ok => {}
                                    EffectStatus::Opaque if !e.notes.is_empty() => b.warn(
                                        WarningKind::FormatSubset,
                                        ins.address,
                                        format!("call {name}: {}", e.notes.join("; ")),
                                    ),
                                    status => b.warn(
                                        WarningKind::EffectsFailure,
                                        ins.address,
                                        format!("call {name}: {status:?}"),
                                    ),
                                }
                                e.touched
                            }
                        };
                        let Some(s) = b.add(
                            sid,
                            MemOp::Touched { positions: touched },
                            LabelKind::Call(name),
                            ins.address,
                            &ins.text,
                        ) else {
                            continue;
                        };
                        if let Some(r) = ret_idx {
                            stack.push(Item {
                                idx: r,
                                ctx: Ctx {
                                    calls: ctx.calls,
                                    frame,
                                },
                                sid: s,
                            });
                        }
                    }
                    _ => {
                        b.warn(
                            WarningKind::IndirectTransfer,
                            ins.address,
                            format!("indirect call `{}` not followed", ins.text),
                        );
                        if let Some(r) = ret_idx {
                            stack.push(Item {
                                idx: r,
                                ctx: Ctx {
                                    calls: ctx.calls,
                                    frame,
                                },
                                sid,
                            });
                        }
                    }
                }
            }
            MemOpClass::NoEffect | MemOpClass::Fa => {
                let mut succ = Vec::new();
                match &ins.mnemonic {
                    Mnemonic::Hlt => {}
                    Mnemonic::Jmp => match ins.operands.first() {
                        Some(Operand::Target(t)) if !t.is_plt() => if let Some(i) = image.index_of(t.address) { succ.push(i) },
                        Some(Operand::Target(_)) => {}
                        _ => b.warn(
                            WarningKind::IndirectTransfer,
                            ins.address,
                            format!("indirect jump `{}` ends the path", ins.text),
                        ),
                    },
                    Mnemonic::Jcc(_) => {
                        if let Some(n) = next(idx) {
                            succ.push(n);
                        }
                        if let Some(i) = ins.target().and_then(|t| image.index_of(t.address)) {
                            succ.push(i);
                        }
                    }
                    _ => succ.extend(next(idx)),
                }
                for i in succ {
                    stack.push(Item {
                        idx: i,
                        ctx: Ctx {
                            calls: ctx.calls.clone(),
                            frame,
                        },
                        sid,
                    });
                }
            }
        }
    }

    if b.truncated {
        let n = b.states.len();
        b.warn(WarningKind::Truncation, root.address, format!("state space truncated at {n} states"));
    }
    let mut space = MemStaCe::from_parts(&root.name, b.states, b.transitions, initial, b.truncated);
    space.warnings = b.warnings;
    Ok(space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effects::{detect_loops, EffectsConfig, Emulator, LibcDb, NullEffects};
    use crate::frontend::{build_bcfg, extract_user_functions, parse_disassembly, tests::COPY_STRCPY};
    use crate::memstace::model::ByteState;

    fn build_with(text: &str, null: bool, cfg: &BuildConfig) -> MemStaCe {
        let img = parse_disassembly(text).unwrap();
        let bcfg = build_bcfg(&img);
        let funcs = extract_user_functions(&bcfg, &img).unwrap();
        let (loops, _) = detect_loops(&bcfg, &img);
        if null {
            let o = NullEffects {
                loops,
                libc: LibcDb::bundled(),
            };
            build_memstace(&img, &funcs, &o, cfg).unwrap()
        } else {
            let o = Emulator::new(&img, LibcDb::bundled(), loops, EffectsConfig::default());
            build_memstace(&img, &funcs, &o, cfg).unwrap()
        }
    }

    fn chain(space: &MemStaCe) -> Vec<&Transition> {
        let mut out = Vec::new();
        let mut s = space.initial;
        while let Some(t) = space.successors(s).next() {
            out.push(t);
            s = t.dst;
        }
        out
    }

    #[test]
    fn copy_strcpy_chain() {
        let space = build_with(COPY_STRCPY, false, &BuildConfig::default());
        let steps = chain(&space);
        let kinds: Vec<String> = steps.iter().map(|t| t.label.kind.name()).collect();
        assert_eq!(kinds, vec!["Push", "Fe", "Write", "BufReg", "Call strcpy"]);
        let frame = |t: &Transition| space.states[t.dst].frames[0].clone();
        assert_eq!(frame(steps[0]).bytes, vec![ByteState::Critical; 16]);
        let f2 = frame(steps[1]);
        assert_eq!(f2.rle(), "16C 32F");
        assert_eq!(frame(steps[3]).buffers, vec![Buffer { start: 31, size: 16 }]);
        let f5 = frame(steps[4]);
        for i in 0..16 {
            assert_eq!(f5.get(i), Some(ByteState::Modified), "{i}");
        }
        for i in 16..32 {
            assert_eq!(f5.get(i), Some(ByteState::Occupied), "{i}");
        }
        assert_eq!(space.state_count(), 6);
    }

    #[test]
    fn no_writes_gives_frame_ops_only() {
        let text = "main:\n 401000: endbr64\n 401004: push rbp\n 401005: mov rbp, rsp\n 401008: sub rsp, 16\n 40100c: nop\n 40100d: leave\n 40100e: ret\n";
        let space = build_with(text, true, &BuildConfig::default());
        let labels = space.label_multiset();
        assert!(labels.keys().all(|k| ["Fa", "Push", "Fe", "Pop"].contains(&k.as_str())), "{labels:?}");
        assert!(!space.truncated);
    }

    #[test]
    fn diamond_arms_converge() {
        let text = "\
main:
  401000: push rbp
  401001: mov rbp, rsp
  401004: sub rsp, 16
  401008: cmp edi, 1
  40100b: je 0x401016
  40100d: mov DWORD PTR [rbp-4], 1
  401014: jmp 0x40101d
  401016: mov DWORD PTR [rbp-4], 2
  40101d: leave
  40101e: ret
";
        let space = build_with(text, true, &BuildConfig::default());
        let writes: Vec<&Transition> = space
            .transitions
            .iter()
            .filter(|t| t.label.kind == LabelKind::Write)
            .collect();
        assert_eq!(writes.len(), 2);
        assert_eq!(writes[0].dst, writes[1].dst);
        assert_ne!(writes[0].label.address, writes[1].label.address);
    }

    #[test]
    fn user_call_allocates_and_releases() {
        let text = "\
f:
  401000: endbr64
  401004: push rbp
  401005: mov rbp, rsp
  401008: pop rbp
  401009: ret
main:
  401010: endbr64
  401014: push rbp
  401015: mov rbp, rsp
  401018: call 0x401000 <f>
  40101d: pop rbp
  40101e: ret
";
        let space = build_with(text, true, &BuildConfig::default());
        let kinds: Vec<String> = chain(&space).iter().map(|t| t.label.kind.name()).collect();
        assert_eq!(kinds, vec!["Push", "Fa", "Push", "Pop", "Pop", "Pop"]);
        assert!(space.states.iter().any(|s| s.frames.len() == 2 && s.frames[1].label == "f"));
    }

    #[test]
    fn state_budget_truncates() {
        let cfg = BuildConfig {
            max_states: 3,
            ..BuildConfig::default()
        };
        let space = build_with(COPY_STRCPY, true, &cfg);
        assert!(space.truncated);
        assert_eq!(space.state_count(), 3);
        assert!(space.warnings.iter().any(|w| w.kind == WarningKind::Truncation));
    }

    #[test]
    fn atomic_writes_split_bytes() {
        let cfg = BuildConfig {
            atomic_writes: true,
            ..BuildConfig::default()
        };
        let space = build_with(COPY_STRCPY, true, &cfg);
        let writes = space
            .transitions
            .iter()
            .filter(|t| t.label.kind == LabelKind::Write)
            .count();
        assert_eq!(writes, 8);
    }

    #[test]
    fn exports() {
        let space = build_with(COPY_STRCPY, true, &BuildConfig::default());
        let dot = space.to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("16C 32F"));
        let json = space.to_json();
        assert_eq!(json["states"].as_array().unwrap().len(), space.state_count());
        assert_eq!(json["transitions"][0]["kind"], "Push");
    }

    #[test]
    fn buffer_hints_override_inference() {
        let hints = BufferHints::from_toml("[[buffer]]\nfunction = \"copy\"\noffset = -16\nsize = 8\n").unwrap();
        let cfg = BuildConfig {
            buffers: hints,
            ..BuildConfig::default()
        };
        let space = build_with(COPY_STRCPY, true, &cfg);
        assert!(space
            .states
            .iter()
            .any(|s| s.frames[0].buffers == vec![Buffer { start: 31, size: 8 }]));
    }
}
