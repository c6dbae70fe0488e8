#![allow(dead_code)]

use stackcheck::cli::GroundTruth;
use stackcheck::effects::{detect_loops, EffectsConfig, Emulator, LibcDb};
use stackcheck::frontend::{build_bcfg, extract_user_functions, parse_disassembly, BCfg, FunctionMap, ProgramImage};
use rand::Rng;
use stackcheck::memstace::{build_memstace, BaseSlot, Buffer, BuildConfig, ByteState, LabelKind, MemStaCe, MemoryState, StackFrame, TransitionLabel};
use std::path::PathBuf;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn fixture(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn manifest() -> GroundTruth {
    GroundTruth::load(&corpus_dir().join("manifest.toml")).unwrap()
}

pub fn corpus_text(file: &str) -> String {
    std::fs::read_to_string(corpus_dir().join(file)).unwrap()
}

pub struct Loaded {
    pub image: ProgramImage,
    pub bcfg: BCfg,
    pub funcs: FunctionMap,
}

pub fn load(text: &str) -> Loaded {
    let image = parse_disassembly(text).unwrap();
    let bcfg = build_bcfg(&image);
    let funcs = extract_user_functions(&bcfg, &image).unwrap();
    Loaded { image, bcfg, funcs }
}

pub fn space(l: &Loaded) -> MemStaCe {
    let (loops, _) = detect_loops(&l.bcfg, &l.image);
    let emu = Emulator::new(&l.image, LibcDb::bundled(), loops, EffectsConfig::default());
    build_memstace(&l.image, &l.funcs, &emu, &BuildConfig::default()).unwrap()
}

fn is(m: &MemoryState, f: usize, i: i64, s: ByteState) -> bool {
    i >= 0 && m.frames[f].get(i as usize) == Some(s)
}

fn is_not(m: &MemoryState, f: usize, i: i64, s: ByteState) -> bool {
    i >= 0 && m.frames[f].get(i as usize).is_some_and(|x| x != s)
}

fn after_loop_or_libc(m: &MemoryState) -> bool {
    matches!(m.incoming.kind, LabelKind::Loop | LabelKind::Call(_))
}

/// Whether `m` definitely falsifies the bundled property `name`. Bytes that
/// are absent or outside a frame decide nothing.
pub fn falsifies(name: &str, m: &MemoryState) -> bool {
    use ByteState::*;
    let frames = 0..m.frames.len();
    let any_bad = |lo: i64, hi: i64, f: usize| (lo..=hi).any(|i| is_not(m, f, i, Critical));
    match name {
        "RIP Integrity" => frames.clone().any(|f| any_bad(0, 7, f)),
        "RBP Integrity" => frames.clone().any(|f| any_bad(8, 15, f)),
        "No off-by-one Overflow" => frames.clone().any(|f| is(m, f, 15, Modified) && is(m, f, 14, Critical)),
        "Canary Integrity" => frames.clone().any(|f| m.frames[f].has_canary && any_bad(16, 23, f)),
        "No Buffer Underflow by one" => {
            after_loop_or_libc(m)
                && frames.clone().any(|f| {
                    m.frames[f].buffers.iter().any(|b| {
                        let s = b.start as i64;
                        is(m, f, s, Occupied) && is(m, f, s + 1, Occupied) && is_not(m, f, s + 2, Occupied)
                    })
                })
        }
        "No Buffer Overflow by one" => {
            after_loop_or_libc(m)
                && frames.clone().any(|f| {
                    m.frames[f].buffers.iter().any(|b| {
                        let e = b.end() as i64;
                        is(m, f, e, Occupied) && is(m, f, e - 1, Modified)
                    })
                })
        }
        "No gets() Usage" => m.incoming.kind == LabelKind::Call("gets".into()),
        other => panic!("no oracle for `{other}`"),
    }
}

pub const PROPERTY_NAMES: [&str; 7] = [
    "RIP Integrity",
    "RBP Integrity",
    "No off-by-one Overflow",
    "Canary Integrity",
    "No Buffer Underflow by one",
    "No Buffer Overflow by one",
    "No gets() Usage",
];

/// Depth-first enumeration of every path of at most `depth` transitions.
/// Returns the fewest transitions leading to a falsifying state, if any.
pub fn brute_force(space: &MemStaCe, name: &str, depth: usize) -> Option<usize> {
    fn go(space: &MemStaCe, name: &str, s: usize, d: usize, depth: usize, best: &mut Option<usize>) {
        if falsifies(name, &space.states[s]) {
            *best = Some(best.map_or(d, |b| b.min(d)));
            return;
        }
        if d == depth {
            return;
        }
        for &t in space.outgoing(s) {
            go(space, name, space.transitions[t].dst, d + 1, depth, best);
        }
    }
    let mut best = None;
    go(space, name, space.initial, 0, depth, &mut best);
    best
}

/// A random state of 1 to 3 frames, biased towards intact control bytes.
pub fn random_state(rng: &mut impl Rng) -> MemoryState {
    const STATES: [ByteState; 4] = [ByteState::Free, ByteState::Critical, ByteState::Occupied, ByteState::Modified];
    let n = rng.gen_range(1..=3);
    let frames = (0..n)
        .map(|k| {
            let base = [BaseSlot::Pending, BaseSlot::Present, BaseSlot::Absent][rng.gen_range(0..3)];
            let phys = if base == BaseSlot::Pending { 8 } else { rng.gen_range(16..=40) };
            let bytes: Vec<ByteState> = (0..phys)
                .map(|i| {
                    if i < 24 && rng.gen_bool(0.8) {
                        ByteState::Critical
                    } else {
                        STATES[rng.gen_range(0..4)]
                    }
                })
                .collect();
            let mut f = StackFrame {
                label: format!("f{k}"),
                bytes,
                buffers: Vec::new(),
                has_canary: false,
                base,
            };
            f.has_canary = f.len() >= 24 && rng.gen_bool(0.5);
            if f.len() > 17 {
                let start = rng.gen_range(16..f.len());
                let size = rng.gen_range(1..=start + 1 - 15);
                let _ = f.register_buffer(Buffer { start, size });
            }
            f
        })
        .collect();
    let kinds = [
        LabelKind::Push,
        LabelKind::Write,
        LabelKind::Loop,
        LabelKind::Call("strcpy".into()),
        LabelKind::Call("gets".into()),
        LabelKind::Fe,
    ];
    MemoryState {
        frames,
        incoming: TransitionLabel {
            kind: kinds[rng.gen_range(0..kinds.len())].clone(),
            address: 0,
        },
    }
}
