use super::metrics::Metrics;
use crate::checker::VerdictStatus;
use crate::diag::Warning;
use crate::patcher::{PatchPlan, SinkSite};
use crate::validator::{Bound, ValidationReport};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryStatus {
    Vulnerable,
    Clean,
    /// No violation, but some property could not be decided.
    Inconclusive,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub status: VerdictStatus,
    pub cwes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub vacuity: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub explored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinkReport {
    #[serde(flatten)]
    pub site: SinkSite,
    pub properties: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatchFailure {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address: Option<u64>,
    pub properties: Vec<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceSummary {
    pub root: String,
    pub states: usize,
    pub transitions: usize,
    pub truncated: bool,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    /// State-space construction, including effect emulation.
    pub build_secs: f64,
    /// Property checking.
    pub verify_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryReport {
    pub path: String,
    pub status: BinaryStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memstace: Option<SpaceSummary>,
    pub properties: Vec<PropertyResult>,
    pub sinks: Vec<SinkReport>,
    pub patches: Vec<PatchPlan>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub patch_failures: Vec<PatchFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patched_listing: Option<String>,
    pub validation: Vec<ValidationReport>,
    pub warnings: Vec<Warning>,
    pub timings: Timings,
}

impl BinaryReport {
    pub fn error(path: &str, message: String) -> BinaryReport {
        BinaryReport {
            path: path.to_string(),
            status: BinaryStatus::Error,
            error: Some(message),
            memstace: None,
            properties: Vec::new(),
            sinks: Vec::new(),
            patches: Vec::new(),
            patch_failures: Vec::new(),
            patched_listing: None,
            validation: Vec::new(),
            warnings: Vec::new(),
            timings: Timings::default(),
        }
    }

    pub fn violated(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| p.status == VerdictStatus::Violated)
    }

    /// `Some(vulnerable)`, or `None` on error.
    pub fn prediction(&self) -> Option<bool> {
        match self.status {
            BinaryStatus::Error => None,
            s => Some(s == BinaryStatus::Vulnerable),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub binaries: usize,
    pub vulnerable: usize,
    pub clean: usize,
    pub inconclusive: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tool {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: String,
    pub tool: Tool,
    pub binaries: Vec<BinaryReport>,
    pub summary: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

impl Report {
    pub fn new(binaries: Vec<BinaryReport>) -> Report {
        let mut summary = Summary {
            binaries: binaries.len(),
            ..Summary::default()
        };
        for b in &binaries {
            match b.status {
                BinaryStatus::Vulnerable => summary.vulnerable += 1,
                BinaryStatus::Clean => summary.clean += 1,
                BinaryStatus::Inconclusive => summary.inconclusive += 1,
                BinaryStatus::Error => summary.errors += 1,
            }
        }
        Report {
            schema_version: SCHEMA_VERSION.to_string(),
            tool: Tool {
                name: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            binaries,
            summary,
            metrics: None,
        }
    }

    /// 2 on any error, else 1 when anything is vulnerable, else 0.
    pub fn exit_code(&self) -> i32 {
        if self.summary.errors > 0 {
            2
        } else if self.summary.vulnerable > 0 {
            1
        } else {
            0
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.binaries {
            render_binary(&mut out, b);
        }
        let s = &self.summary;
        let _ = writeln!(
            out,
            "{} binaries: {} vulnerable, {} clean, {} inconclusive, {} errors",
            s.binaries, s.vulnerable, s.clean, s.inconclusive, s.errors
        );
        if let Some(m) = &self.metrics {
            let f = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
            let c = m.confusion;
            let _ = writeln!(
                out,
                "TP={} FP={} TN={} FN={}  accuracy={} precision={} recall={} f1={}",
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                f(m.accuracy),
                f(m.precision),
                f(m.recall),
                f(m.f1)
            );
        }
        out
    }
}

fn status_word(s: VerdictStatus) -> &'static str {
    match s {
        VerdictStatus::Holds => "holds",
        VerdictStatus::Violated => "violated",
        VerdictStatus::Inconclusive => "inconclusive",
    }
}

fn render_binary(out: &mut String, b: &BinaryReport) {
    let head = match b.status {
        BinaryStatus::Vulnerable => format!("VULNERABLE ({} of {} properties violated)", b.violated().count(), b.properties.len()),
        BinaryStatus::Clean => "clean".to_string(),
        BinaryStatus::Inconclusive => "inconclusive".to_string(),
        BinaryStatus::Error => format!("error: {}", b.error.as_deref().unwrap_or("")),
    };
    let _ = writeln!(out, "{}: {head}", b.path);
    for p in &b.properties {
        let cwes = if p.cwes.is_empty() {
            String::new()
        } else {
            format!(" ({})", p.cwes.join(", "))
        };
        let _ = writeln!(out, "  [{}] {}{cwes}", status_word(p.status), p.name);
        for line in p.trace.iter().flatten() {
            let _ = writeln!(out, "      {line}");
        }
        for n in p.vacuity.iter().chain(&p.reason) {
            let _ = writeln!(out, "      note: {n}");
        }
    }
    for s in &b.sinks {
        let what = s.site.callee.as_deref().unwrap_or("loop");
        let _ = writeln!(out, "  sink: {what} at 0x{:x} in {}", s.site.address, s.site.function);
    }
    for p in &b.patches {
        let bound = match p.bound {
            Bound::Static(n) => n.to_string(),
            Bound::Runtime => "runtime".into(),
        };
        let _ = writeln!(
            out,
            "  patch: {} at 0x{:x}: {} -> {}({bound}) via {} at 0x{:x}",
            p.label, p.sink.address, p.template.target, p.template.replacement, p.template.name, p.trampoline
        );
    }
    for f in &b.patch_failures {
        let _ = writeln!(out, "  patch failed: {}", f.error);
    }
    for v in &b.validation {
        let _ = writeln!(
            out,
            "  validation: {} ({} input, {} trials; original {}, patched {})",
            if v.success { "success" } else { "FAILED" },
            format!("{:?}", v.origin).to_lowercase(),
            v.trials,
            outcome_word(&v.original),
            outcome_word(&v.patched)
        );
        if let Some(n) = &v.note {
            let _ = writeln!(out, "      note: {n}");
        }
    }
    for w in &b.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
    if let Some(m) = &b.memstace {
        let _ = writeln!(
            out,
            "  memstace: {} states, {} transitions{}; build {:.3}s, verify {:.3}s",
            m.states,
            m.transitions,
            if m.truncated { " (truncated)" } else { "" },
            b.timings.build_secs,
            b.timings.verify_secs
        );
    }
}

fn outcome_word(o: &crate::validator::RunOutcome) -> String {
    serde_json::to_value(&o.status)
        .ok()
        .map(|v| {
            let s = v["status"].as_str().unwrap_or("").to_string();
            match v["cause"].as_str() {
                Some(c) => format!("{s}: {c}"),
                None => s,
            }
        })
        .unwrap_or_default()
}
