//! Sink localisation, template selection and trampoline rewriting.

pub mod templates;

use crate::checker::Trace;
use crate::effects::{recover_arguments, ArgKind, CallEffect, LibcDb, Rule};
use crate::frontend::{BCfg, FunctionMap, Mnemonic, ProgramImage};
use crate::memstace::classify::{frame_offsets, infer_buffer_size};
use crate::memstace::BufferHints;
use crate::validator::{Bound, SafeCall};
use serde::Serialize;
pub use templates::{PatchMode, PatchTemplate, TemplateDb, TemplateError};

/// First trampoline address; well above any code in the corpus.
pub const TRAMPOLINE_BASE: u64 = 0x90_0000;
const TRAMPOLINE_STRIDE: u64 = 0x10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PatchError {
    #[error("trace has no library call or loop step")]
    NoSinkFound,
    #[error("no template for `{0}`")]
    NoTemplate(String),
    #[error("sink at {0:#x} is already patched")]
    AlreadyPatched(u64),
    #[error("label `{0}` already exists")]
    LabelCollision(String),
    #[error("no call at {0:#x}")]
    SinkMissing(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkKind {
    Call,
    Loop,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SinkSite {
    pub address: u64,
    pub function: String,
    pub kind: SinkKind,
    /// Library callee for call sinks.
    pub callee: Option<String>,
    pub cwes: Vec<String>,
}

/// Walk the trace backwards to the last library call, else the last loop.
pub fn locate_sink(trace: &Trace, image: &ProgramImage, funcs: &FunctionMap, cwes: &[String]) -> Result<SinkSite, PatchError> {
    let function_of = |a: u64| {
        funcs
            .function_containing(image, a)
            .map(str::to_string)
            .or_else(|| image.function_of(a).map(|f| f.name.clone()))
            .unwrap_or_default()
    };
    if let Some(step) = trace.steps.iter().rev().find(|s| s.op.starts_with("Call(")) {
        let callee = step.op.trim_start_matches("Call(").trim_end_matches(')').to_string();
        return Ok(SinkSite {
            address: step.address,
            function: function_of(step.address),
            kind: SinkKind::Call,
            callee: Some(callee),
            cwes: cwes.to_vec(),
        });
    }
    if let Some(step) = trace.steps.iter().rev().find(|s| s.op == "Loop") {
        return Ok(SinkSite {
            address: step.address,
            function: function_of(step.address),
            kind: SinkKind::Loop,
            callee: None,
            cwes: cwes.to_vec(),
        });
    }
    Err(PatchError::NoSinkFound)
}

/// Every call in user code to a callee some enabled template covers, in
/// address order.
pub fn library_call_sites(image: &ProgramImage, funcs: &FunctionMap, templates: &TemplateDb) -> Vec<SinkSite> {
    let mut out = Vec::new();
    for f in &image.functions {
        if !funcs.is_user(&f.name) {
            continue;
        }
        for ins in &image.instructions[f.start..f.end] {
            let Some(callee) = ins.is_call().then(|| ins.target().and_then(|t| t.plain_symbol())).flatten() else {
                continue;
            };
            if templates.covers(callee) {
                out.push(SinkSite {
                    address: ins.address,
                    function: f.name.clone(),
                    kind: SinkKind::Call,
                    callee: Some(callee.to_string()),
                    cwes: Vec::new(),
                });
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatchPlan {
    pub sink: SinkSite,
    pub template: PatchTemplate,
    pub dest_offset: Option<i64>,
    pub dest_size: Option<u64>,
    pub bound: Bound,
    pub label: String,
    pub trampoline: u64,
    pub return_address: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl PatchPlan {
    pub fn safecall(&self) -> SafeCall {
        SafeCall {
            template: self.template.name.clone(),
            replacement: self.template.replacement.clone(),
            bound: self.bound,
            terminate: self.template.terminate,
        }
    }
}

/// Evidence available for choosing a template.
pub struct PatchContext<'a> {
    pub image: &'a ProgramImage,
    pub bcfg: &'a BCfg,
    pub libc: &'a LibcDb,
    pub templates: &'a TemplateDb,
    pub buffers: &'a BufferHints,
}

fn dest_position(libc: &LibcDb, callee: &str) -> usize {
    match libc.get(callee) {
        Some(s) if s.rule == Rule::Scan => 1,
        Some(s) => s.dest_arg().unwrap_or(0),
        None => 0,
    }
}

/// Pick the static template when the destination size is known, else the
/// runtime one. `slot` numbers the trampoline.
pub fn select_template(
    sink: &SinkSite,
    effect: Option<&CallEffect>,
    ctx: &PatchContext,
    slot: usize,
) -> Result<PatchPlan, PatchError> {
    let callee = match (&sink.kind, &sink.callee) {
        (SinkKind::Call, Some(c)) => c.clone(),
        _ => return Err(PatchError::NoTemplate("loop".into())),
    };
    if !ctx.templates.covers(&callee) {
        return Err(PatchError::NoTemplate(callee));
    }
    let idx = ctx.image.index_of(sink.address).ok_or(PatchError::SinkMissing(sink.address))?;
    let pos = dest_position(ctx.libc, &callee);
    let args = recover_arguments(ctx.bcfg, ctx.image, sink.address, pos + 1);
    let dest_offset = match args.get(pos).map(|a| a.kind) {
        Some(ArgKind::FrameOffset(off)) if off < 0 => Some(off),
        _ => None,
    };
    let dest_size = dest_offset.and_then(|off| {
        ctx.buffers.size(&sink.function, off).map(|s| s as u64).or_else(|| {
            let f = ctx.image.function(&sink.function)?;
            let known = frame_offsets(&ctx.image.instructions[f.start..f.end]);
            Some(infer_buffer_size(off, &known) as u64)
        })
    });
    let mut notes = Vec::new();
    let static_t = ctx.templates.find(&callee, PatchMode::Static);
    let (template, bound) = match (static_t, dest_size) {
        (Some(t), Some(n)) if n > 0 && t.bound(n).is_some_and(|b| b > 0) => (t.clone(), Bound::Static(t.bound(n).unwrap_or(n))),
        _ => match ctx.templates.find(&callee, PatchMode::Runtime) {
            Some(t) => (t.clone(), Bound::Runtime),
            None => return Err(PatchError::NoTemplate(callee)),
        },
    };
    if template.replacement == "snprintf" {
        notes.push("formatted output is truncated at the bound".to_string());
    }
    if let Some(e) = effect {
        if let Some(l) = e.crash_length {
            notes.push(format!("input of {l} bytes overflows the destination"));
        }
    }
    if ctx.image.next_in_function(idx).is_none() {
        notes.push("sink is the last instruction of its function; return assumed after a 5-byte call".to_string());
    }
    Ok(PatchPlan {
        sink: sink.clone(),
        template,
        dest_offset,
        dest_size,
        bound,
        label: format!("T{slot}"),
        trampoline: TRAMPOLINE_BASE + slot as u64 * TRAMPOLINE_STRIDE,
        return_address: ctx.image.return_address(idx),
        notes,
    })
}

fn is_trampoline_jump(image: &ProgramImage, idx: usize) -> bool {
    let ins = &image.instructions[idx];
    ins.mnemonic == Mnemonic::Jmp
        && ins
            .target()
            .is_some_and(|t| t.address >= TRAMPOLINE_BASE && image.function_of(t.address).is_some())
}

/// Replace the sink call by a jump to a new trampoline that runs the safe
/// call and jumps back.
pub fn apply_trampoline(image: &ProgramImage, plan: &PatchPlan) -> Result<ProgramImage, PatchError> {
    let addr = plan.sink.address;
    let idx = image.index_of(addr).ok_or(PatchError::SinkMissing(addr))?;
    if is_trampoline_jump(image, idx) {
        return Err(PatchError::AlreadyPatched(addr));
    }
    if !image.instructions[idx].is_call() {
        return Err(PatchError::SinkMissing(addr));
    }
    if image.function(&plan.label).is_some() || image.index_of(plan.trampoline).is_some() {
        return Err(PatchError::LabelCollision(plan.label.clone()));
    }
    let mut out = image.clone();
    let ret_name = image
        .function_of_index(idx)
        .map(|f| format!("{}+{:#x}", f.name, plan.return_address.saturating_sub(f.address)))
        .unwrap_or_else(|| plan.label.clone());
    out.replace(
        addr,
        ProgramImage::synthesize(addr, &format!("jmp 0x{:x} <{}>", plan.trampoline, plan.label)),
    );
    out.append_function(
        &plan.label,
        vec![
            ProgramImage::synthesize(plan.trampoline, &plan.safecall().render()),
            ProgramImage::synthesize(plan.trampoline + 8, &format!("jmp 0x{:x} <{ret_name}>", plan.return_address)),
        ],
    );
    Ok(out)
}

/// Apply several plans in order.
pub fn apply_all(image: &ProgramImage, plans: &[PatchPlan]) -> Result<ProgramImage, PatchError> {
    let mut out = image.clone();
    for p in plans {
        out = apply_trampoline(&out, p)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::{check, VerdictStatus};
    use crate::effects::{detect_loops, EffectsConfig, Emulator};
    use crate::frontend::{build_bcfg, extract_user_functions, parse_disassembly, tests::COPY_STRCPY};
    use crate::ltl::{bundled_properties, compile_monitor};
    use crate::memstace::{build_memstace, BuildConfig};

    struct Fixture {
        image: ProgramImage,
        bcfg: BCfg,
        funcs: FunctionMap,
    }

    fn fixture(text: &str) -> Fixture {
        let image = parse_disassembly(text).unwrap();
        let bcfg = build_bcfg(&image);
        let funcs = extract_user_functions(&bcfg, &image).unwrap();
        Fixture { image, bcfg, funcs }
    }

    fn trace_for(fx: &Fixture, property: &str) -> Trace {
        let (loops, _) = detect_loops(&fx.bcfg, &fx.image);
        let emu = Emulator::new(&fx.image, LibcDb::bundled(), loops, EffectsConfig::default());
        let sp = build_memstace(&fx.image, &fx.funcs, &emu, &BuildConfig::default()).unwrap();
        let p = bundled_properties().into_iter().find(|p| p.name == property).unwrap();
        let v = check(&sp, &compile_monitor(&p).unwrap());
        assert_eq!(v.status, VerdictStatus::Violated);
        v.trace.unwrap()
    }

    fn plan(fx: &Fixture, sink: &SinkSite, slot: usize, templates: &TemplateDb) -> Result<PatchPlan, PatchError> {
        let libc = LibcDb::bundled();
        let hints = BufferHints::default();
        let ctx = PatchContext {
            image: &fx.image,
            bcfg: &fx.bcfg,
            libc: &libc,
            templates,
            buffers: &hints,
        };
        select_template(sink, None, &ctx, slot)
    }

    #[test]
    fn copy_strcpy_static_strcpy() {
        let fx = fixture(COPY_STRCPY);
        let trace = trace_for(&fx, "RIP Integrity");
        let sink = locate_sink(&trace, &fx.image, &fx.funcs, &[]).unwrap();
        assert_eq!(sink.callee.as_deref(), Some("strcpy"));
        assert_eq!(sink.function, "copy");
        assert_eq!(sink.address, 0x401150);
        let p = plan(&fx, &sink, 0, &TemplateDb::bundled()).unwrap();
        assert_eq!(p.template.name, "strcpy_static");
        assert_eq!(p.bound, Bound::Static(16));
        assert_eq!(p.dest_offset, Some(-16));
        let patched = apply_trampoline(&fx.image, &p).unwrap();
        assert_eq!(patched.at(0x401150).unwrap().text, "jmp 0x900000 <T0>");
        let t0 = patched.function("T0").unwrap();
        let body: Vec<&str> = patched.instructions[t0.start..t0.end].iter().map(|i| i.text.as_str()).collect();
        assert_eq!(body, vec!["safecall strcpy_static strncpy(16)", "jmp 0x401155 <copy+0x1f>"]);
        // Locality: everything else is unchanged.
        for (a, b) in fx.image.instructions.iter().zip(&patched.instructions) {
            if a.address != 0x401150 {
                assert_eq!(a, b);
            }
        }
        assert_eq!(apply_trampoline(&patched, &p), Err(PatchError::AlreadyPatched(0x401150)));
    }

    #[test]
    fn unknown_destination_goes_runtime() {
        let text = "\
main:
  401000: push rbp
  401001: mov rbp, rsp
  401004: mov rdi, QWORD PTR [rbp-8]
  401008: call 0x401030 <gets@plt>
  40100d: leave
  40100e: ret
";
        let fx = fixture(text);
        let sink = SinkSite {
            address: 0x401008,
            function: "main".into(),
            kind: SinkKind::Call,
            callee: Some("gets".into()),
            cwes: vec![],
        };
        let p = plan(&fx, &sink, 0, &TemplateDb::bundled()).unwrap();
        assert_eq!(p.template.name, "gets_runtime");
        assert_eq!(p.bound, Bound::Runtime);
    }

    #[test]
    fn loop_and_unknown_callees_have_no_template() {
        let fx = fixture(COPY_STRCPY);
        let mut sink = SinkSite {
            address: 0x401150,
            function: "copy".into(),
            kind: SinkKind::Loop,
            callee: None,
            cwes: vec![],
        };
        assert!(matches!(plan(&fx, &sink, 0, &TemplateDb::bundled()), Err(PatchError::NoTemplate(_))));
        sink.kind = SinkKind::Call;
        sink.callee = Some("memcpy".into());
        assert!(matches!(plan(&fx, &sink, 0, &TemplateDb::bundled()), Err(PatchError::NoTemplate(_))));
        sink.callee = Some("__isoc99_scanf".into());
        assert!(matches!(plan(&fx, &sink, 0, &TemplateDb::bundled()), Err(PatchError::NoTemplate(_))));
    }

    #[test]
    fn direct_write_has_no_sink() {
        let text = "main:\n 401000: push rbp\n 401001: mov rbp, rsp\n 401004: mov QWORD PTR [rbp+8], 0\n 40100c: pop rbp\n 40100d: ret\n";
        let fx = fixture(text);
        let trace = trace_for(&fx, "RIP Integrity");
        assert_eq!(locate_sink(&trace, &fx.image, &fx.funcs, &[]), Err(PatchError::NoSinkFound));
    }

    #[test]
    fn two_sinks_two_trampolines() {
        let text = "\
main:
  401000: push rbp
  401001: mov rbp, rsp
  401004: sub rsp, 32
  401008: lea rax, [rbp-16]
  40100c: mov rdi, rax
  40100f: call 0x401030 <gets@plt>
  401014: lea rax, [rbp-32]
  401018: mov rdi, rax
  40101b: call 0x401030 <gets@plt>
  401020: leave
  401021: ret
";
        let fx = fixture(text);
        let db = TemplateDb::bundled();
        let mk = |a| SinkSite {
            address: a,
            function: "main".into(),
            kind: SinkKind::Call,
            callee: Some("gets".into()),
            cwes: vec![],
        };
        let p0 = plan(&fx, &mk(0x40100f), 0, &db).unwrap();
        let p1 = plan(&fx, &mk(0x40101b), 1, &db).unwrap();
        assert_eq!((p0.bound, p1.bound), (Bound::Static(16), Bound::Static(16)));
        let out = apply_all(&fx.image, &[p0.clone(), p1.clone()]).unwrap();
        assert!(out.function("T0").is_some() && out.function("T1").is_some());
        assert_ne!(p0.trampoline, p1.trampoline);
        let clash = PatchPlan {
            sink: mk(0x40101b),
            ..p0
        };
        let once = apply_trampoline(&fx.image, &p1).unwrap();
        let again = PatchPlan { sink: mk(0x40100f), ..p1 };
        assert_eq!(apply_trampoline(&once, &again), Err(PatchError::LabelCollision("T1".into())));
        assert!(apply_trampoline(&fx.image, &clash).is_ok());
    }
}
