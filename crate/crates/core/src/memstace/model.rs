//! Byte-state automaton, stack frames and the memory operators.
//!
//! Frame indices follow the anchor convention: index `i` is the byte at
//! `anchor + 15 - i`, so 0..=7 hold the return address, 8..=15 the saved
//! base register and 16..=23 the canary when present. Internally the bytes
//! are stored by *physical* position (distance below the top byte of the
//! return address); the two coincide unless the frame never saved a base
//! register, in which case logical indices 8..=15 are absent and physical
//! position `p >= 8` is logical `p + 8`.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ByteState {
    Free,
    Critical,
    Occupied,
    Modified,
}

impl ByteState {
    pub const ALL: [ByteState; 4] = [
        ByteState::Free,
        ByteState::Critical,
        ByteState::Occupied,
        ByteState::Modified,
    ];

    pub fn parse(s: &str) -> Option<ByteState> {
        match s {
            "Free" => Some(ByteState::Free),
            "Critical" => Some(ByteState::Critical),
            "Occupied" => Some(ByteState::Occupied),
            "Modified" => Some(ByteState::Modified),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            ByteState::Free => 'F',
            ByteState::Critical => 'C',
            ByteState::Occupied => 'O',
            ByteState::Modified => 'M',
        }
    }
}

impl fmt::Display for ByteState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ByteOp {
    RWrite,
    NRWrite,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MemError {
    #[error("illegal byte transition {0:?} + {1:?}")]
    IllegalByteTransition(ByteState, ByteOp),
    #[error("write leaves every modelled frame")]
    WriteOutsideStack,
    #[error("pop of {0} bytes underflows the frame")]
    PopUnderflow(usize),
    #[error("no active frame")]
    NoFrame,
    #[error("buffer ({start}, {size}) overlaps an existing buffer")]
    OverlappingBuffer { start: usize, size: usize },
    #[error("buffer ({start}, {size}) lies outside the frame")]
    BufferOutsideFrame { start: usize, size: usize },
}

/// The byte-state automaton.
pub fn byte_transition(s: ByteState, op: ByteOp) -> Result<ByteState, MemError> {
    use ByteOp::*;
    use ByteState::*;
    match (s, op) {
        (Free, NRWrite) => Ok(Occupied),
        (Free, RWrite) => Ok(Critical),
        (Occupied, NRWrite) | (Critical, NRWrite) | (Modified, NRWrite) => Ok(Modified),
        _ => Err(MemError::IllegalByteTransition(s, op)),
    }
}

/// A buffer inside a frame: `start` is the logical index of its lowest
/// address byte (its highest index); it spans `start - size + 1 ..= start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Buffer {
    pub start: usize,
    pub size: usize,
}

impl Buffer {
    /// Logical index of the highest-address byte.
    pub fn end(&self) -> usize {
        self.start + 1 - self.size
    }

    /// Signed offset of the buffer's first byte from the frame anchor
    /// (`rbp` in a standard frame).
    pub fn offset(&self) -> i64 {
        15 - self.start as i64
    }

    pub fn from_offset(offset: i64, size: usize) -> Option<Buffer> {
        let start = 15 - offset;
        (start >= 0 && size >= 1 && start + 1 >= size as i64).then_some(Buffer {
            start: start as usize,
            size,
        })
    }

    pub fn overlaps(&self, other: &Buffer) -> bool {
        self.end() <= other.start && other.end() <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSlot {
    /// Only the return address is present so far.
    Pending,
    Present,
    /// The frame grew without a base-register push.
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StackFrame {
    pub label: String,
    /// Byte states by physical position.
    pub bytes: Vec<ByteState>,
    pub buffers: Vec<Buffer>,
    pub has_canary: bool,
    pub base: BaseSlot,
}

impl StackFrame {
    /// A fresh frame holding only the return address.
    pub fn allocate(label: &str) -> StackFrame {
        StackFrame {
            label: label.to_string(),
            bytes: vec![ByteState::Critical; 8],
            buffers: Vec::new(),
            has_canary: false,
            base: BaseSlot::Pending,
        }
    }

    pub fn phys_len(&self) -> usize {
        self.bytes.len()
    }

    /// One past the highest logical index.
    pub fn len(&self) -> usize {
        match self.base {
            BaseSlot::Absent if self.bytes.len() > 8 => self.bytes.len() + 8,
            _ => self.bytes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn logical(&self, phys: usize) -> usize {
        if self.base == BaseSlot::Absent && phys >= 8 {
            phys + 8
        } else {
            phys
        }
    }

    pub fn physical(&self, index: usize) -> Option<usize> {
        let p = match self.base {
            BaseSlot::Absent if (8..16).contains(&index) => return None,
            BaseSlot::Absent if index >= 16 => index - 8,
            _ => index,
        };
        (p < self.bytes.len()).then_some(p)
    }

    /// State of the byte at a logical index, `None` when absent.
    pub fn get(&self, index: usize) -> Option<ByteState> {
        self.physical(index).map(|p| self.bytes[p])
    }

    pub fn has_buffer(&self, b: &Buffer) -> bool {
        self.buffers.contains(b)
    }

    /// Add a buffer; idempotent. Returns whether Σ changed.
    pub fn register_buffer(&mut self, b: Buffer) -> Result<bool, MemError> {
        if self.buffers.contains(&b) {
            return Ok(false);
        }
        if b.start >= self.len() || b.size == 0 || b.size > b.start + 1 {
            return Err(MemError::BufferOutsideFrame {
                start: b.start,
                size: b.size,
            });
        }
        if self.buffers.iter().any(|o| o.overlaps(&b)) {
            return Err(MemError::OverlappingBuffer {
                start: b.start,
                size: b.size,
            });
        }
        self.buffers.push(b);
        self.buffers.sort();
        Ok(true)
    }

    /// Run-length encoding of the logical byte states from index 0 upward;
    /// `-` marks absent indices.
    pub fn rle(&self) -> String {
        let mut out = String::new();
        let mut i = 0;
        let n = self.len();
        while i < n {
            let s = self.get(i);
            let mut j = i;
            while j + 1 < n && self.get(j + 1) == s {
                j += 1;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            let c = s.map(|s| s.letter()).unwrap_or('-');
            out.push_str(&format!("{}{}", j - i + 1, c));
            i = j + 1;
        }
        out
    }
}

/// Register a buffer at a signed anchor offset.
pub fn register_buffer(frame: &StackFrame, offset: i64, size: usize) -> Result<StackFrame, MemError> {
    let b = Buffer::from_offset(offset, size).ok_or(MemError::BufferOutsideFrame {
        start: (15 - offset).max(0) as usize,
        size,
    })?;
    let mut f = frame.clone();
    f.register_buffer(b)?;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "callee", rename_all = "snake_case")]
pub enum LabelKind {
    Push,
    Pop,
    Write,
    Fe,
    Fa,
    Call(String),
    Loop,
    BufferRegister,
}

impl LabelKind {
    pub fn name(&self) -> String {
        match self {
            LabelKind::Push => "Push".into(),
            LabelKind::Pop => "Pop".into(),
            LabelKind::Write => "Write".into(),
            LabelKind::Fe => "Fe".into(),
            LabelKind::Fa => "Fa".into(),
            LabelKind::Call(n) => format!("Call {n}"),
            LabelKind::Loop => "Loop".into(),
            LabelKind::BufferRegister => "BufReg".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionLabel {
    pub kind: LabelKind,
    pub address: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryState {
    pub frames: Vec<StackFrame>,
    pub incoming: TransitionLabel,
}

impl MemoryState {
    pub fn initial(function: &str, address: u64) -> MemoryState {
        MemoryState {
            frames: vec![StackFrame::allocate(function)],
            incoming: TransitionLabel {
                kind: LabelKind::Fa,
                address,
            },
        }
    }

    pub fn top(&self) -> Option<&StackFrame> {
        self.frames.last()
    }

    /// The innermost frame labelled `name`.
    pub fn frame_named(&self, name: &str) -> Option<&StackFrame> {
        self.frames.iter().rev().find(|f| f.label == name)
    }
}

/// A concrete memory operator as applied to a state.
///
/// Positions in `Write`, `Touched` and `RegisterBuffer` are physical and
/// relative to the top frame: position `r` is the byte at address
/// `entry_rsp + 7 - r` where `entry_rsp` is the top frame's stack pointer
/// on entry. Negative positions continue into the caller frames.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemOp {
    Fa { function: String },
    Push { op: ByteOp },
    Pop { bytes: usize },
    /// `ret`: the whole top frame is released.
    Release,
    Fe { bytes: usize },
    Write { first: i64, len: usize, op: ByteOp, canary: bool },
    Touched { positions: Vec<i64> },
    RegisterBuffer { start: i64, size: usize },
}

impl MemOp {
    pub fn kind(&self, callee: Option<&str>, looped: bool) -> LabelKind {
        match self {
            MemOp::Fa { .. } => LabelKind::Fa,
            MemOp::Push { .. } => LabelKind::Push,
            MemOp::Pop { .. } | MemOp::Release => LabelKind::Pop,
            MemOp::Fe { .. } => LabelKind::Fe,
            MemOp::Write { .. } => LabelKind::Write,
            MemOp::RegisterBuffer { .. } => LabelKind::BufferRegister,
            MemOp::Touched { .. } if looped => LabelKind::Loop,
            MemOp::Touched { .. } => LabelKind::Call(callee.unwrap_or("?").to_string()),
        }
    }
}

/// One byte changed by an operator; `None` marks an absent byte (appended or
/// released).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ByteDelta {
    pub frame: usize,
    pub index: usize,
    pub before: Option<ByteState>,
    pub after: Option<ByteState>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Applied {
    pub state: MemoryState,
    pub deltas: Vec<ByteDelta>,
    /// Positions that fell outside every modelled frame.
    pub clipped: usize,
}

/// Map a top-relative physical position to (frame, physical position).
pub fn locate(frames: &[StackFrame], pos: i64) -> Option<(usize, usize)> {
    let mut fi = frames.len().checked_sub(1)?;
    let mut p = pos;
    loop {
        if p >= 0 {
            return ((p as usize) < frames[fi].phys_len()).then_some((fi, p as usize));
        }
        fi = fi.checked_sub(1)?;
        p += frames[fi].phys_len() as i64;
    }
}

/// Apply a memory operator to a state. `label` becomes the result's
/// incoming label.
pub fn apply_memory_operator(m: &MemoryState, op: &MemOp, label: TransitionLabel) -> Result<Applied, MemError> {
    let mut s = m.clone();
    s.incoming = label;
    let mut deltas = Vec::new();
    let mut clipped = 0;

    let top_index = |s: &MemoryState| s.frames.len().checked_sub(1).ok_or(MemError::NoFrame);

    match op {
        MemOp::Fa { function } => {
            s.frames.push(StackFrame::allocate(function));
            let fi = s.frames.len() - 1;
            deltas.extend((0..8).map(|i| ByteDelta {
                frame: fi,
                index: i,
                before: None,
                after: Some(ByteState::Critical),
            }));
        }
        MemOp::Push { op } => {
            let fi = top_index(&s)?;
            let f = &mut s.frames[fi];
            if f.base == BaseSlot::Pending {
                f.base = if *op == ByteOp::RWrite {
                    BaseSlot::Present
                } else {
                    BaseSlot::Absent
                };
            }
            let state = byte_transition(ByteState::Free, *op)?;
            for _ in 0..8 {
                f.bytes.push(state);
                deltas.push(ByteDelta {
                    frame: fi,
                    index: f.logical(f.bytes.len() - 1),
                    before: None,
                    after: Some(state),
                });
            }
        }
        MemOp::Fe { bytes } => {
            let fi = top_index(&s)?;
            let f = &mut s.frames[fi];
            if f.base == BaseSlot::Pending && *bytes > 0 {
                f.base = BaseSlot::Absent;
            }
            for _ in 0..*bytes {
                f.bytes.push(ByteState::Free);
                deltas.push(ByteDelta {
                    frame: fi,
                    index: f.logical(f.bytes.len() - 1),
                    before: None,
                    after: Some(ByteState::Free),
                });
            }
        }
        MemOp::Pop { bytes } => {
            let fi = top_index(&s)?;
            let f = &mut s.frames[fi];
            if *bytes > f.phys_len() {
                return Err(MemError::PopUnderflow(*bytes));
            }
            for _ in 0..*bytes {
                let p = f.bytes.len() - 1;
                let before = f.bytes.pop();
                deltas.push(ByteDelta {
                    frame: fi,
                    index: f.logical(p),
                    before,
                    after: None,
                });
            }
            let len = f.len();
            f.buffers.retain(|b| b.start < len);
            if f.phys_len() <= 8 && f.base == BaseSlot::Absent {
                f.base = BaseSlot::Pending;
            }
        }
        MemOp::Release => {
            let fi = top_index(&s)?;
            let f = s.frames.pop().ok_or(MemError::NoFrame)?;
            for p in (0..f.phys_len()).rev() {
                deltas.push(ByteDelta {
                    frame: fi,
                    index: f.logical(p),
                    before: Some(f.bytes[p]),
                    after: None,
                });
            }
        }
        MemOp::Write { first, len, op, canary } => {
            let mut any = false;
            for k in 0..*len as i64 {
                match locate(&s.frames, first - k) {
                    Some((fi, p)) => {
                        let before = s.frames[fi].bytes[p];
                        let after = byte_transition(before, *op)?;
                        s.frames[fi].bytes[p] = after;
                        any = true;
                        deltas.push(ByteDelta {
                            frame: fi,
                            index: s.frames[fi].logical(p),
                            before: Some(before),
                            after: Some(after),
                        });
                    }
                    None => clipped += 1,
                }
            }
            if !any && *len > 0 {
                return Err(MemError::WriteOutsideStack);
            }
            if *canary {
                let fi = top_index(&s)?;
                s.frames[fi].has_canary = true;
            }
        }
        MemOp::Touched { positions } => {
            for &pos in positions {
                match locate(&s.frames, pos) {
                    Some((fi, p)) => {
                        let before = s.frames[fi].bytes[p];
                        let after = byte_transition(before, ByteOp::NRWrite)?;
                        s.frames[fi].bytes[p] = after;
                        deltas.push(ByteDelta {
                            frame: fi,
                            index: s.frames[fi].logical(p),
                            before: Some(before),
                            after: Some(after),
                        });
                    }
                    None => clipped += 1,
                }
            }
        }
        MemOp::RegisterBuffer { start, size } => {
            let fi = top_index(&s)?;
            let f = &mut s.frames[fi];
            if *start < 0 || *start as usize >= f.phys_len() {
                return Err(MemError::BufferOutsideFrame {
                    start: (*start).max(0) as usize,
                    size: *size,
                });
            }
            let b = Buffer {
                start: f.logical(*start as usize),
                size: *size,
            };
            f.register_buffer(b)?;
        }
    }
    Ok(Applied {
        state: s,
        deltas,
        clipped,
    })
}
