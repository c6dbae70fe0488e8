//! Concrete execution of original and patched images.

pub mod machine;

use crate::effects::libc::LibcDb;
use crate::frontend::{FunctionListing, ProgramImage};
pub use machine::{Bound, CrashCause, Inputs, Machine, RunOutcome, SafeCall, Start, Status};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidatorError {
    #[error("no entry function `{0}` in the image")]
    NoEntry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Entry function; `main`, else the first listed function, when unset.
    pub entry: Option<String>,
    pub step_budget: u64,
    pub random_trials: usize,
    pub max_input_len: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            entry: None,
            step_budget: 1_000_000,
            random_trials: 16,
            max_input_len: 4096,
            seed: 0,
        }
    }
}

/// The function execution starts in.
pub fn root_function<'a>(image: &'a ProgramImage, entry: Option<&str>) -> Result<&'a FunctionListing, ValidatorError> {
    let found = match entry {
        Some(name) => image.function(name),
        None => image.function("main").or_else(|| {
            image
                .functions
                .iter()
                .find(|f| !f.is_empty() && !f.name.ends_with("@plt"))
        }),
    };
    found
        .filter(|f| !f.is_empty())
        .ok_or_else(|| ValidatorError::NoEntry(entry.unwrap_or("main").to_string()))
}

/// A machine positioned at the root's first instruction. `main` receives
/// `argc`/`argv`; any other root receives `argv[1]` (or an empty string)
/// through every argument register.
pub fn start_machine<'a>(
    image: &'a ProgramImage,
    libc: &'a LibcDb,
    root: &FunctionListing,
    inputs: &Inputs,
    budget: u64,
) -> Machine<'a> {
    let mut m = Machine::new(image, libc, inputs, budget);
    let how = if root.name == "main" {
        Start::Main
    } else {
        Start::Synthetic {
            bytes: inputs.args.first().cloned().unwrap_or_default(),
        }
    };
    m.start(root.start, how);
    m
}

pub fn run(image: &ProgramImage, libc: &LibcDb, inputs: &Inputs, cfg: &RunConfig) -> Result<RunOutcome, ValidatorError> {
    let root = root_function(image, cfg.entry.as_deref())?;
    Ok(start_machine(image, libc, root, inputs, cfg.step_budget).run())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputOrigin {
    /// Derived from the call effect's length search.
    Derived,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub input: Inputs,
    pub original: RunOutcome,
    pub patched: RunOutcome,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub origin: InputOrigin,
    /// The representative trial: the first failure, else the first trial
    /// whose original run crashed, else the first trial.
    pub input: Inputs,
    pub original: RunOutcome,
    pub patched: RunOutcome,
    pub success: bool,
    pub trials: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Success rule for one input.
pub fn trial_success(original: &RunOutcome, patched: &RunOutcome) -> bool {
    (original.is_crash() && patched.is_clean()) || (original.is_clean() && patched.is_clean() && original.stdout == patched.stdout)
}

fn describe(t: &Trial) -> Option<String> {
    if t.success {
        return None;
    }
    Some(if t.patched.is_crash() {
        format!("patched run crashed: {:?}", t.patched.status)
    } else if t.original.is_clean() && t.patched.is_clean() {
        "stdout diverged between original and patched runs".to_string()
    } else {
        format!("original {:?}, patched {:?}", t.original.status, t.patched.status)
    })
}

/// Random printable inputs with lengths log-uniform in `1..=max_len`.
pub fn random_inputs(seed: u64, trials: usize, max_len: usize) -> Vec<Inputs> {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = (max_len.max(1) as f64).ln();
    (0..trials)
        .map(|_| {
            let len = (rng.gen_range(0.0..=top)).exp().round().clamp(1.0, max_len.max(1) as f64) as usize;
            let bytes: Vec<u8> = (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect();
            let mut stdin = bytes.clone();
            stdin.push(b'\n');
            Inputs {
                stdin,
                args: vec![bytes],
            }
        })
        .collect()
}

/// Run both images on the derived input, or on random inputs when none is
/// available.
pub fn validate_patch(
    original: &ProgramImage,
    patched: &ProgramImage,
    libc: &LibcDb,
    input: Option<&Inputs>,
    cfg: &RunConfig,
) -> Result<ValidationReport, ValidatorError> {
    let (origin, inputs) = match input {
        Some(i) => (InputOrigin::Derived, vec![i.clone()]),
        None => (
            InputOrigin::Random,
            random_inputs(cfg.seed, cfg.random_trials.max(1), cfg.max_input_len),
        ),
    };
    let mut trials = Vec::with_capacity(inputs.len());
    for i in inputs {
        let o = run(original, libc, &i, cfg)?;
        let p = run(patched, libc, &i, cfg)?;
        let success = trial_success(&o, &p);
        trials.push(Trial {
            input: i,
            original: o,
            patched: p,
            success,
        });
    }
    let failures = trials.iter().filter(|t| !t.success).count();
    let rep = trials
        .iter()
        .find(|t| !t.success)
        .or_else(|| trials.iter().find(|t| t.original.is_crash()))
        .unwrap_or(&trials[0])
        .clone();
    Ok(ValidationReport {
        origin,
        note: describe(&rep),
        input: rep.input,
        original: rep.original,
        patched: rep.patched,
        success: failures == 0,
        trials: trials.len(),
        failures,
    })
}
