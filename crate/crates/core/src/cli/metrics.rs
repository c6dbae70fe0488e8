use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Confusion counts; "positive" means vulnerable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Ratios are `None` when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Binaries without a ground-truth label or with an analysis error.
    pub unlabelled: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics_from(c: Confusion) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Metrics {
        confusion: c,
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        unlabelled: 0,
    }
}

/// One labelled case of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub file: String,
    pub vulnerable: bool,
    #[serde(default)]
    pub family: String,
    /// Properties expected to be violated.
    #[serde(default)]
    pub properties: Vec<String>,
    /// Whether the crash input comes from an input source (stdin, argv).
    #[serde(default)]
    pub input_source: bool,
    /// Expected crash cause of the derived input, for input-source cases.
    #[serde(default)]
    pub crash: Option<String>,
    /// Whether the sink has a patch template.
    #[serde(default)]
    pub patchable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "case", default)]
    pub cases: Vec<Case>,
}

impl GroundTruth {
    pub fn from_toml(text: &str) -> Result<GroundTruth, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<GroundTruth, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        GroundTruth::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Labels keyed by file name.
    pub fn labels(&self) -> BTreeMap<String, bool> {
        self.cases.iter().map(|c| (c.file.clone(), c.vulnerable)).collect()
    }
}

fn file_name(path: &str) -> &str {
    Path::new(path).file_name().and_then(|s| s.to_str()).unwrap_or(path)
}

/// Accuracy, precision, recall and F1 of `(path, predicted)` pairs against
/// labels matched by file name. `None` predictions are errors and count
/// as unlabelled.
pub fn report_metrics(predictions: &[(String, Option<bool>)], truth: &GroundTruth) -> Metrics {
    let labels = truth.labels();
    let mut c = Confusion::default();
    let mut unlabelled = 0;
    for (path, predicted) in predictions {
        match (predicted, labels.get(file_name(path))) {
            (Some(p), Some(&a)) => c.record(*p, a),
            _ => unlabelled += 1,
        }
    }
    Metrics {
        unlabelled,
        ..metrics_from(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbalanced_counts() {
        let m = metrics_from(Confusion {
            tp: 95,
            fn_: 3,
            fp: 17,
            tn: 36,
        });
        assert!((m.precision.unwrap() - 95.0 / 112.0).abs() < 1e-12);
        assert!((m.recall.unwrap() - 95.0 / 98.0).abs() < 1e-12);
        assert!((m.accuracy.unwrap() - 131.0 / 151.0).abs() < 1e-12);
        assert!((m.precision.unwrap() - 0.848).abs() < 1e-3);
        assert!((m.recall.unwrap() - 0.969).abs() < 1e-3);
    }

    #[test]
    fn all_correct_is_one() {
        let truth = GroundTruth::from_toml(
            "[[case]]\nfile = \"a.s\"\nvulnerable = true\n[[case]]\nfile = \"b.s\"\nvulnerable = false\n",
        )
        .unwrap();
        let m = report_metrics(
            &[("dir/a.s".into(), Some(true)), ("b.s".into(), Some(false)), ("c.s".into(), Some(true))],
            &truth,
        );
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.unlabelled, 1);
    }

    #[test]
    fn empty_denominators() {
        let m = metrics_from(Confusion::default());
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (None, None, None, None));
    }
}
