pub mod args;
pub mod emulate;
pub mod libc;
pub mod loops;

pub use emulate::{extract_concrete_input, CallEffect, CrashInput, EffectStatus, EffectsConfig, EffectsOracle, Emulator, InputStream, LoopEffect, NullEffects};
pub use libc::{lookup_libc, LibcDb, LibcSpec, Rule};
pub use loops::{detect_loops, Loop};
pub use args::{recover_arguments, ArgKind, ArgValue, CallArgs};
