use criterion::{criterion_group, criterion_main, Criterion};
use stackcheck::checker::check_all;
use stackcheck::cli::{analyze, Config};
use stackcheck::effects::{detect_loops, EffectsConfig, Emulator, LibcDb};
use stackcheck::frontend::{build_bcfg, extract_user_functions, parse_disassembly};
use stackcheck::ltl::{bundled_properties, compile_monitor};
use stackcheck::memstace::{build_memstace, BuildConfig, MemStaCe};
use std::hint::black_box;
use std::path::PathBuf;

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

fn largest_space() -> MemStaCe {
    let cfg = BuildConfig {
        atomic_writes: true,
        ..BuildConfig::default()
    };
    std::fs::read_dir(corpus())
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "s"))
        .map(|p| {
            let image = parse_disassembly(&std::fs::read_to_string(p).unwrap()).unwrap();
            let bcfg = build_bcfg(&image);
            let funcs = extract_user_functions(&bcfg, &image).unwrap();
            let (loops, _) = detect_loops(&bcfg, &image);
            let emu = Emulator::new(&image, LibcDb::bundled(), loops, EffectsConfig::default());
            build_memstace(&image, &funcs, &emu, &cfg).unwrap()
        })
        .max_by_key(|s| s.states.len())
        .unwrap()
}

/// Runs `f` on one worker thread, so the same build measures the
/// sequential path.
#[cfg(feature = "parallel")]
fn sequential<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

#[cfg(not(feature = "parallel"))]
fn sequential<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    f()
}

fn bench_analyze(c: &mut Criterion) {
    let paths = [corpus()];
    let cfg = Config {
        validate: true,
        ..Config::default()
    };
    let mut g = c.benchmark_group("analyze_corpus");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| sequential(|| black_box(analyze(&paths, &cfg, None).unwrap()))));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| black_box(analyze(&paths, &cfg, None).unwrap())));
    g.finish();
}

fn bench_check(c: &mut Criterion) {
    let space = largest_space();
    let monitors: Vec<_> = bundled_properties().iter().map(|p| compile_monitor(p).unwrap()).collect();
    let mut g = c.benchmark_group("check_all");
    g.bench_function("sequential", |b| b.iter(|| sequential(|| black_box(check_all(&space, &monitors)))));
    #[cfg(feature = "parallel")]
    g.bench_function("parallel", |b| b.iter(|| black_box(check_all(&space, &monitors))));
    g.finish();
}

criterion_group!(benches, bench_analyze, bench_check);
criterion_main!(benches);
