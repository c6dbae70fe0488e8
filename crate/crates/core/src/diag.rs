//! Non-fatal diagnostics collected while analysing one listing.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    UnknownMnemonic,
    UnsupportedOperand,
    DanglingBranch,
    IndirectTransfer,
    UnknownLibc,
    WriteOutsideStack,
    IllegalByteTransition,
    NoStandardPrologue,
    EffectsFailure,
    IrreducibleLoop,
    IterationBudget,
    ClippedEffect,
    Truncation,
    OverlappingBuffer,
    UnmappedProperty,
    SinkAtBlockEnd,
    FormatSubset,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Warning {
    pub kind: WarningKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address: Option<u64>,
    pub message: String,
}

impl Warning {
    pub fn new(kind: WarningKind, message: impl Into<String>) -> Self {
        Warning {
            kind,
            line: None,
            address: None,
            message: message.into(),
        }
    }

    pub fn at_line(mut self, line: usize) -> Self {
        self.line = Some(line);
        self
    }

    pub fn at(mut self, address: u64) -> Self {
        self.address = Some(address);
        self
    }
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(line) = self.line {
            write!(f, " (line {line})")?;
        }
        if let Some(addr) = self.address {
            write!(f, " @0x{addr:x}")?;
        }
        write!(f, ": {}", self.message)
    }
}
