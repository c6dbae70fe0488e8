use super::config::{Config, ConfigError, Resources};
use super::metrics::{report_metrics, GroundTruth};
use super::report::{BinaryReport, BinaryStatus, PatchFailure, PropertyResult, Report, SinkReport, SpaceSummary, Timings};
use crate::checker::{check, Verdict, VerdictStatus};
use crate::effects::{detect_loops, EffectsOracle, Emulator};
use crate::frontend::{build_bcfg, extract_user_functions, parse_disassembly, ProgramImage};
use crate::memstace::{build_memstace, MemStaCe};
use crate::patcher::{apply_all, locate_sink, select_template, PatchContext, PatchPlan, SinkSite};
use crate::validator::{validate_patch, Inputs};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

/// Products of one analysis that are not part of the report.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub space: Option<MemStaCe>,
    pub patched: Option<ProgramImage>,
}

struct Clock {
    start: Instant,
    limit: Option<Duration>,
}

impl Clock {
    fn expired(&self) -> bool {
        self.limit.is_some_and(|l| self.start.elapsed() >= l)
    }
}

fn property_result(v: Verdict) -> PropertyResult {
    PropertyResult {
        name: v.property,
        status: v.status,
        cwes: v.cwes,
        trace: v.trace.map(|t| t.lines()),
        vacuity: v.vacuity,
        reason: None,
        explored: v.explored,
    }
}

fn timed_out(name: &str, cwes: &[String]) -> PropertyResult {
    PropertyResult {
        name: name.to_string(),
        status: VerdictStatus::Inconclusive,
        cwes: cwes.to_vec(),
        trace: None,
        vacuity: Vec::new(),
        reason: Some("timeout".into()),
        explored: 0,
    }
}

/// Run the whole pipeline on one listing.
pub fn analyze_text(path: &str, text: &str, cfg: &Config, res: &Resources) -> (BinaryReport, Artifacts) {
    let clock = Clock {
        start: Instant::now(),
        limit: cfg.timeout.map(Duration::from_secs_f64),
    };
    let image = match parse_disassembly(text) {
        Ok(i) => i,
        Err(e) => return (BinaryReport::error(path, e.to_string()), Artifacts::default()),
    };
    let bcfg = build_bcfg(&image);
    let funcs = match extract_user_functions(&bcfg, &image) {
        Ok(f) => f,
        Err(e) => return (BinaryReport::error(path, e.to_string()), Artifacts::default()),
    };
    let mut warnings = image.warnings.clone();
    let (loops, loop_warnings) = detect_loops(&bcfg, &image);
    warnings.extend(loop_warnings);
    let emu = Emulator::new(&image, res.libc.clone(), loops, cfg.effects());
    let space = match build_memstace(&image, &funcs, &emu, &cfg.build(&res.buffers)) {
        Ok(s) => s,
        Err(e) => return (BinaryReport::error(path, e.to_string()), Artifacts::default()),
    };
    warnings.extend(space.warnings.iter().cloned());
    let build_secs = clock.start.elapsed().as_secs_f64();

    let verify_start = Instant::now();
    let verdicts: Vec<Option<Verdict>> = crate::par::map(&res.monitors, |m| (!clock.expired()).then(|| check(&space, m)));
    let verify_secs = verify_start.elapsed().as_secs_f64();
    let properties: Vec<PropertyResult> = verdicts
        .iter()
        .zip(&res.monitors)
        .map(|(v, m)| match v {
            Some(v) => property_result(v.clone()),
            None => timed_out(&m.property, &m.cwes),
        })
        .collect();
    for p in &properties {
        let (_, w) = res.cwes.classify(&p.name);
        warnings.extend(w);
    }

    // Sinks, one per address, each with the properties it explains.
    let mut sinks: BTreeMap<u64, SinkReport> = BTreeMap::new();
    let mut patch_failures = Vec::new();
    for (p, v) in properties.iter().zip(&verdicts) {
        let Some(trace) = v.as_ref().filter(|v| v.violated()).and_then(|v| v.trace.as_ref()) else {
            continue;
        };
        match locate_sink(trace, &image, &funcs, &p.cwes) {
            Ok(site) => {
                let e = sinks.entry(site.address).or_insert_with(|| SinkReport {
                    site: SinkSite { cwes: Vec::new(), ..site },
                    properties: Vec::new(),
                });
                e.properties.push(p.name.clone());
                for c in &p.cwes {
                    if !e.site.cwes.contains(c) {
                        e.site.cwes.push(c.clone());
                    }
                }
                e.site.cwes.sort();
            }
            Err(err) => patch_failures.push(PatchFailure {
                address: None,
                properties: vec![p.name.clone()],
                error: err.to_string(),
            }),
        }
    }
    let sinks: Vec<SinkReport> = sinks.into_values().collect();

    let ctx = PatchContext {
        image: &image,
        bcfg: &bcfg,
        libc: &res.libc,
        templates: &res.templates,
        buffers: &res.buffers,
    };
    let effects = emu.call_effects();
    let mut plans: Vec<PatchPlan> = Vec::new();
    for s in &sinks {
        let effect = effects.iter().find(|e| e.site == s.site.address && e.concrete_input.is_some()).or_else(|| effects.iter().find(|e| e.site == s.site.address));
        match select_template(&s.site, effect, &ctx, plans.len()) {
            Ok(p) => plans.push(p),
            Err(err) => patch_failures.push(PatchFailure {
                address: Some(s.site.address),
                properties: s.properties.clone(),
                error: err.to_string(),
            }),
        }
    }
    let mut patched = None;
    if !plans.is_empty() {
        match apply_all(&image, &plans) {
            Ok(p) => patched = Some(p),
            Err(err) => patch_failures.push(PatchFailure {
                address: None,
                properties: Vec::new(),
                error: err.to_string(),
            }),
        }
    }

    let mut validation = Vec::new();
    let mut error = None;
    if cfg.validate {
        if let Some(p) = &patched {
            let mut inputs: Vec<Inputs> = Vec::new();
            for plan in &plans {
                for e in effects.iter().filter(|e| e.site == plan.sink.address) {
                    if let Some(ci) = &e.concrete_input {
                        if !inputs.contains(&ci.inputs) {
                            inputs.push(ci.inputs.clone());
                        }
                    }
                }
            }
            let run_cfg = cfg.run();
            let runs: Vec<Option<&Inputs>> = if inputs.is_empty() {
                vec![None]
            } else {
                inputs.iter().map(Some).collect()
            };
            for i in runs {
                match validate_patch(&image, p, &res.libc, i, &run_cfg) {
                    Ok(v) => validation.push(v),
                    Err(e) => error = Some(e.to_string()),
                }
            }
        }
    }

    let status = if error.is_some() {
        BinaryStatus::Error
    } else if properties.iter().any(|p| p.status == VerdictStatus::Violated) {
        BinaryStatus::Vulnerable
    } else if properties.iter().any(|p| p.status == VerdictStatus::Inconclusive) {
        BinaryStatus::Inconclusive
    } else {
        BinaryStatus::Clean
    };
    let summary = SpaceSummary {
        root: space.root.clone(),
        states: space.state_count(),
        transitions: space.transition_count(),
        truncated: space.truncated,
        labels: space.label_multiset(),
    };
    warnings.sort();
    warnings.dedup();
    let report = BinaryReport {
        path: path.to_string(),
        status,
        error,
        memstace: Some(summary),
        properties,
        sinks,
        patches: plans,
        patch_failures,
        patched_listing: None,
        validation,
        warnings,
        timings: Timings {
            build_secs,
            verify_secs,
            total_secs: clock.start.elapsed().as_secs_f64(),
        },
    };
    (report, Artifacts { space: Some(space), patched })
}

/// Listing files under `paths`; directories contribute their `.s` and
/// `.asm` files in name order.
pub fn expand_paths(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
                .unwrap_or_default();
            files.retain(|f| f.extension().is_some_and(|x| x == "s" || x == "asm"));
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    out
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string()
}

fn write_artifacts(path: &Path, report: &mut BinaryReport, art: &Artifacts, cfg: &Config) -> std::io::Result<()> {
    if let (Some(dir), Some(space)) = (&cfg.export_memstace, &art.space) {
        std::fs::create_dir_all(dir)?;
        let base = dir.join(stem(path));
        let json = serde_json::to_string_pretty(&space.to_json()).expect("state space serializes");
        std::fs::write(base.with_extension("memstace.json"), json)?;
        std::fs::write(base.with_extension("memstace.dot"), space.to_dot())?;
    }
    if cfg.patch {
        if let (Some(dir), Some(img)) = (&cfg.out, &art.patched) {
            std::fs::create_dir_all(dir)?;
            let out = dir.join(format!("{}.patched.s", stem(path)));
            std::fs::write(&out, img.to_listing())?;
            report.patched_listing = Some(out.display().to_string());
        }
    }
    Ok(())
}

fn analyze_path(path: &Path, cfg: &Config, res: &Resources) -> BinaryReport {
    let name = path.display().to_string();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return BinaryReport::error(&name, e.to_string()),
    };
    let (mut report, art) = analyze_text(&name, &text, cfg, res);
    if let Err(e) = write_artifacts(path, &mut report, &art, cfg) {
        report.status = BinaryStatus::Error;
        report.error = Some(format!("writing outputs: {e}"));
    }
    report
}

/// Analyse every listing, one binary per task. A failing binary yields an
/// error entry and does not stop the batch.
pub fn analyze(paths: &[PathBuf], cfg: &Config, ground_truth: Option<&GroundTruth>) -> Result<Report, ConfigError> {
    let res = Resources::load(cfg)?;
    let files = expand_paths(paths);
    let binaries = crate::par::map(&files, |p| {
        log::info!("analysing {}", p.display());
        analyze_path(p, cfg, &res)
    });
    let mut report = Report::new(binaries);
    if let Some(gt) = ground_truth {
        let preds: Vec<(String, Option<bool>)> = report.binaries.iter().map(|b| (b.path.clone(), b.prediction())).collect();
        report.metrics = Some(report_metrics(&preds, gt));
    }
    Ok(report)
}
