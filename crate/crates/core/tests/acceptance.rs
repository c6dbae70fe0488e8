//! Acceptance run: one PASS/FAIL line per criterion.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackcheck::checker::{check, VerdictStatus};
use stackcheck::cli::{analyze, analyze_text, BinaryReport, Config, Resources};
use stackcheck::effects::{EffectsOracle, Emulator, LibcDb};
use stackcheck::ltl::{bundled_properties, compile_monitor};
use stackcheck::memstace::{byte_transition, ByteOp, ByteState, LabelKind, MemoryState};
use stackcheck::patcher::{apply_all, library_call_sites, select_template, PatchContext, TemplateDb};
use stackcheck::validator::{validate_patch, RunConfig};
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn byte_automaton() -> Outcome {
    use ByteOp::*;
    use ByteState::*;
    let start = Instant::now();
    // Legal transitions of the byte automaton; every other pair is an error.
    let legal = [
        ((Free, NRWrite), Occupied),
        ((Free, RWrite), Critical),
        ((Occupied, NRWrite), Modified),
        ((Critical, NRWrite), Modified),
        ((Modified, NRWrite), Modified),
    ];
    let expected: BTreeMap<(u8, u8), Option<ByteState>> = [Free, Critical, Occupied, Modified]
        .iter()
        .flat_map(|&s| [NRWrite, RWrite].map(move |op| (s, op)))
        .map(|(s, op)| {
            let want = legal.iter().find(|(k, _)| *k == (s, op)).map(|(_, v)| *v);
            ((s as u8, op as u8), want)
        })
        .collect();
    let mut errors = 0;
    for (&(s, op), want) in &expected {
        let s = [Free, Critical, Occupied, Modified].into_iter().find(|x| *x as u8 == s).unwrap();
        let op = [NRWrite, RWrite].into_iter().find(|x| *x as u8 == op).unwrap();
        let got = byte_transition(s, op).ok();
        ensure(got == *want, || format!("{s:?} x {op:?}: got {got:?}, want {want:?}"))?;
        errors += usize::from(got.is_none());
    }
    ensure(expected.len() == 8 && errors == 3, || format!("{} pairs, {errors} errors", expected.len()))?;
    within(Duration::from_secs(1), start)?;
    Ok("8 pairs, 5 legal, 3 errors".into())
}

fn running_example() -> Outcome {
    let start = Instant::now();
    let l = load(&fixture("copy_strcpy.s"));
    let sp = space(&l);
    // Follow the single chain from the initial state.
    let mut s = sp.initial;
    let mut kinds = Vec::new();
    let mut snaps = Vec::new();
    while let [t] = sp.outgoing(s) {
        let t = &sp.transitions[*t];
        kinds.push(t.label.kind.clone());
        s = t.dst;
        snaps.push(sp.states[s].frames[0].clone());
    }
    let want = vec![
        LabelKind::Push,
        LabelKind::Fe,
        LabelKind::Write,
        LabelKind::BufferRegister,
        LabelKind::Call("strcpy".into()),
    ];
    ensure(kinds == want, || format!("chain {kinds:?}"))?;
    ensure(snaps[0].rle() == "16C", || format!("after push: {}", snaps[0].rle()))?;
    ensure(snaps[1].rle() == "16C 32F", || format!("after extension: {}", snaps[1].rle()))?;
    let last = &snaps[4];
    ensure((0..16).all(|i| last.get(i) == Some(ByteState::Modified)), || format!("after call: {}", last.rle()))?;
    let rip = bundled_properties().into_iter().find(|p| p.name == "RIP Integrity").unwrap();
    let v = check(&sp, &compile_monitor(&rip).map_err(|e| e.to_string())?);
    ensure(v.status == VerdictStatus::Violated, || format!("RIP Integrity {:?}", v.status))?;
    let trace = v.trace.ok_or("no trace")?;
    ensure(trace.len() == 5, || format!("trace of {} steps", trace.len()))?;
    let end = trace.steps.last().unwrap();
    ensure(end.op == "Call(strcpy)" && end.address == 0x401150, || format!("trace ends at {end}"))?;
    within(Duration::from_secs(5), start)?;
    Ok(format!("5-step chain, final frame {}", last.rle()))
}

fn monitor_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let monitors: Vec<_> = bundled_properties().iter().map(|p| compile_monitor(p).unwrap()).collect();
    for m in &monitors {
        let pos = m.positive_form();
        ensure(pos.states.len() == 1 && pos.edges.len() == 1 && pos.edges[0].from == 0 && pos.edges[0].to == 0, || {
            format!("{}: positive form {} states, {} edges", m.property, pos.states.len(), pos.edges.len())
        })?;
    }
    let mut disagreements = 0;
    let mut rejects = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=6);
        let trace: Vec<MemoryState> = (0..len).map(|_| random_state(&mut rng)).collect();
        for m in &monitors {
            let want = trace.iter().position(|s| falsifies(&m.property, s));
            let got = m.first_reject(&trace);
            rejects += usize::from(got.is_some());
            disagreements += usize::from(got != want);
        }
    }
    ensure(disagreements == 0, || format!("{disagreements} disagreements"))?;
    ensure(rejects > 0 && rejects < 7000, || format!("degenerate sample: {rejects} rejecting runs"))?;
    Ok(format!("1000 traces x 7 monitors, {rejects} rejecting runs, 0 disagreements"))
}

fn analyze_corpus(validate: bool) -> Result<Vec<BinaryReport>, String> {
    let cfg = Config {
        validate,
        ..Config::default()
    };
    let report = analyze(&[corpus_dir()], &cfg, Some(&manifest())).map_err(|e| e.to_string())?;
    Ok(report.binaries)
}

fn seven_properties() -> Outcome {
    let props = bundled_properties();
    ensure(props.len() == 7, || format!("{} properties", props.len()))?;
    for p in &props {
        compile_monitor(p).map_err(|e| format!("{}: {e}", p.name))?;
    }
    let reports = analyze_corpus(false)?;
    let mut seen: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for b in &reports {
        for p in &b.properties {
            let e = seen.entry(PROPERTY_NAMES.iter().find(|n| **n == p.name).copied().unwrap_or("?")).or_default();
            match p.status {
                VerdictStatus::Violated => e.0 += 1,
                VerdictStatus::Holds => e.1 += 1,
                VerdictStatus::Inconclusive => {}
            }
        }
    }
    for n in PROPERTY_NAMES {
        let (v, h) = seen.get(n).copied().unwrap_or_default();
        ensure(v > 0 && h > 0, || format!("`{n}`: {v} violating, {h} holding fixtures"))?;
    }
    Ok(format!("7 properties; violating/holding fixtures: {:?}", seen.values().collect::<Vec<_>>()))
}

fn detection() -> Outcome {
    let start = Instant::now();
    let cfg = Config::default();
    let report = analyze(&[corpus_dir()], &cfg, Some(&manifest())).map_err(|e| e.to_string())?;
    ensure(report.binaries.len() == 24, || format!("{} cases", report.binaries.len()))?;
    // Recomputed from the per-case predictions, independent of the report's
    // own metrics.
    let labels = manifest().labels();
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for b in &report.binaries {
        let file = std::path::Path::new(&b.path).file_name().unwrap().to_str().unwrap();
        let actual = labels[file];
        let predicted = b.prediction().ok_or_else(|| format!("{file}: {:?}", b.error))?;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fnn) as f64;
    let m = report.metrics.ok_or("no metrics")?;
    ensure(m.precision == Some(precision) && m.recall == Some(recall), || format!("report metrics {m:?}"))?;
    ensure(precision == 1.0, || format!("precision {precision:.3}"))?;
    ensure(recall >= 0.90, || format!("recall {recall:.3}"))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("precision {precision:.2}, recall {recall:.2} (TP={tp} FP={fp} FN={fnn})"))
}

fn patch_success() -> Outcome {
    let res = Resources::load(&Config::default()).map_err(|e| e.to_string())?;
    let libc = LibcDb::bundled();
    let templates = TemplateDb::bundled();
    let (mut total, mut clean_pairs) = (0, 0);
    for case in manifest().cases {
        let l = load(&corpus_text(&case.file));
        let sites = library_call_sites(&l.image, &l.funcs, &templates);
        if sites.is_empty() {
            continue;
        }
        let (loops, _) = stackcheck::effects::detect_loops(&l.bcfg, &l.image);
        let emu = Emulator::new(&l.image, libc.clone(), loops, Default::default());
        let ctx = PatchContext {
            image: &l.image,
            bcfg: &l.bcfg,
            libc: &libc,
            templates: &templates,
            buffers: &res.buffers,
        };
        let mut plans = Vec::new();
        let mut inputs = Vec::new();
        for (k, site) in sites.iter().enumerate() {
            let effect = emu.call_effect(site.address, site.callee.as_deref().unwrap(), &[]);
            plans.push(select_template(site, Some(&effect), &ctx, k).map_err(|e| format!("{}: {e}", case.file))?);
            if let Some(c) = effect.concrete_input {
                inputs.push(c.inputs);
            }
        }
        let patched = apply_all(&l.image, &plans).map_err(|e| format!("{}: {e}", case.file))?;
        // Each derived input once, or random inputs when nothing was derived.
        inputs.dedup();
        let runs: Vec<Option<&_>> = if inputs.is_empty() { vec![None] } else { inputs.iter().map(Some).collect() };
        for input in runs {
            let v = validate_patch(&l.image, &patched, &libc, input, &RunConfig::default()).map_err(|e| e.to_string())?;
            ensure(v.success, || format!("{}: {:?}", case.file, v.note))?;
            if !case.vulnerable {
                clean_pairs += 1;
                ensure(v.original.is_clean() && v.original.stdout == v.patched.stdout, || format!("{}: behaviour changed", case.file))?;
            }
        }
        total += plans.len();
    }
    ensure(total > 0, || "no patchable sinks".into())?;
    Ok(format!("{total}/{total} patched sinks validated ({clean_pairs} clean-case runs unchanged)"))
}

fn checker_oracle() -> Outcome {
    let mut texts: Vec<(String, String)> = manifest().cases.iter().map(|c| (c.file.clone(), corpus_text(&c.file))).collect();
    texts.push(("copy_strcpy.s".into(), fixture("copy_strcpy.s")));
    let monitors: Vec<_> = bundled_properties().iter().map(|p| compile_monitor(p).unwrap()).collect();
    let mut compared = 0;
    for (name, text) in &texts {
        let sp = space(&load(text));
        for m in &monitors {
            let v = check(&sp, m);
            let want = brute_force(&sp, &m.property, 20);
            let got = v.trace.as_ref().filter(|_| v.violated()).map(|t| t.len());
            ensure(got == want && v.status != VerdictStatus::Inconclusive, || {
                format!("{name} / {}: checker {:?} {got:?}, enumeration {want:?}", m.property, v.status)
            })?;
            compared += 1;
        }
    }
    Ok(format!("{compared} fixture/property pairs, 0 disagreements"))
}

fn crash_inputs() -> Outcome {
    let res = Resources::load(&Config::default()).map_err(|e| e.to_string())?;
    let cfg = Config {
        validate: true,
        ..Config::default()
    };
    let mut n = 0;
    for case in manifest().cases.iter().filter(|c| c.input_source) {
        let (b, _) = analyze_text(&case.file, &corpus_text(&case.file), &cfg, &res);
        let want = case.crash.as_deref().ok_or_else(|| format!("{}: no expected cause", case.file))?;
        let v = b.validation.first().ok_or_else(|| format!("{}: not validated", case.file))?;
        ensure(v.origin == stackcheck::validator::InputOrigin::Derived, || format!("{}: {:?} input", case.file, v.origin))?;
        let got = serde_json::to_value(&v.original).unwrap()["cause"].as_str().unwrap_or("none").to_string();
        ensure(got == want, || format!("{}: original {got}, expected {want}", case.file))?;
        let property = if want == "canary-mismatch" { "Canary Integrity" } else { "RIP Integrity" };
        ensure(b.violated().any(|p| p.name == property), || format!("{}: `{property}` not violated", case.file))?;
        ensure(v.patched.is_clean(), || format!("{}: patched run {:?}", case.file, v.patched.status))?;
        n += 1;
    }
    ensure(n > 0, || "no input-source fixtures".into())?;
    Ok(format!("{n}/{n} input-source fixtures"))
}

fn strip_timings(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("timings");
            m.values_mut().for_each(strip_timings);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timings),
        _ => {}
    }
}

fn determinism() -> Outcome {
    let cfg = Config {
        validate: true,
        ..Config::default()
    };
    let run = || -> Result<String, String> {
        let r = analyze(&[corpus_dir()], &cfg, Some(&manifest())).map_err(|e| e.to_string())?;
        let mut v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        strip_timings(&mut v);
        Ok(serde_json::to_string_pretty(&v).unwrap())
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "reports differ".into())?;
    Ok(format!("two runs, {} identical bytes", a.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("byte automaton conformance", byte_automaton),
        ("running example state space and trace", running_example),
        ("monitor shape and brute-force agreement", monitor_shape),
        ("seven properties with violating and holding fixtures", seven_properties),
        ("mini-corpus detection", detection),
        ("patch success", patch_success),
        ("checker/oracle equivalence", checker_oracle),
        ("crash-input chain", crash_inputs),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail} ({secs:.2}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why} ({secs:.2}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
