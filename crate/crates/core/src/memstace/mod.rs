//! Byte-precise stack model and the memory state space.

pub mod build;
pub mod classify;
pub mod model;

pub use build::{build_memstace, BufferHint, BufferHints, BuildConfig, BuildError, MemStaCe, Transition};
pub use classify::{classify_instruction, FrameCtx, MemOpClass};
pub use model::{
    apply_memory_operator, byte_transition, register_buffer, BaseSlot, Buffer, ByteDelta, ByteOp, ByteState, LabelKind, MemError,
    MemOp, MemoryState, StackFrame, TransitionLabel,
};
