//! Listing ingestion: parse the disassembly text, recover basic blocks and
//! the function map.

mod cfg;
mod functions;
pub mod instr;
mod parse;

pub use cfg::{build_bcfg, BCfg, BasicBlock, Edge, EdgeKind, EdgeTarget};
pub use functions::{extract_user_functions, FunctionMap};
pub use instr::{Base, Cond, Gpr, Instruction, MemRef, Mnemonic, Operand, Reg, Target};
pub use parse::parse_disassembly;
pub(crate) use parse::escape;
use parse::parse_instruction_body;

use crate::diag::Warning;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum FrontendError {
    #[error("line {line}: malformed line: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
}

/// A function as it appears in the listing: a header followed by a
/// contiguous run of instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionListing {
    pub name: String,
    /// Address of the first instruction (or the header address when empty).
    pub address: u64,
    /// Half-open range into [`ProgramImage::instructions`].
    pub start: usize,
    pub end: usize,
    pub line: usize,
}

impl FunctionListing {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Parsed listing: instructions in listing order, function ranges and
/// read-only data chunks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProgramImage {
    pub instructions: Vec<Instruction>,
    pub functions: Vec<FunctionListing>,
    pub data: BTreeMap<u64, Vec<u8>>,
    pub warnings: Vec<Warning>,
    #[serde(skip)]
    index: HashMap<u64, usize>,
}

impl ProgramImage {
    pub fn new(
        instructions: Vec<Instruction>,
        functions: Vec<FunctionListing>,
        data: BTreeMap<u64, Vec<u8>>,
        warnings: Vec<Warning>,
    ) -> Self {
        let index = instructions
            .iter()
            .enumerate()
            .map(|(i, ins)| (ins.address, i))
            .collect();
        ProgramImage {
            instructions,
            functions,
            data,
            warnings,
            index,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn index_of(&self, address: u64) -> Option<usize> {
        self.index.get(&address).copied()
    }

    pub fn at(&self, address: u64) -> Option<&Instruction> {
        self.index_of(address).map(|i| &self.instructions[i])
    }

    pub fn function(&self, name: &str) -> Option<&FunctionListing> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// The listing function whose instruction range contains `idx`.
    pub fn function_of_index(&self, idx: usize) -> Option<&FunctionListing> {
        self.functions.iter().find(|f| f.start <= idx && idx < f.end)
    }

    pub fn function_of(&self, address: u64) -> Option<&FunctionListing> {
        self.index_of(address).and_then(|i| self.function_of_index(i))
    }

    /// Address of the instruction following `idx` inside the same function.
    pub fn next_in_function(&self, idx: usize) -> Option<u64> {
        let f = self.function_of_index(idx)?;
        (idx + 1 < f.end).then(|| self.instructions[idx + 1].address)
    }

    /// Where a call at `idx` returns to. Without instruction lengths in the
    /// listing, a trailing call is assumed to be the 5-byte `e8` form.
    pub fn return_address(&self, idx: usize) -> u64 {
        self.next_in_function(idx)
            .unwrap_or(self.instructions[idx].address + 5)
    }

    /// Bytes of read-only data starting at `address` (up to the end of the
    /// containing chunk).
    pub fn read_data(&self, address: u64) -> Option<&[u8]> {
        let (start, bytes) = self.data.range(..=address).next_back()?;
        let off = (address - start) as usize;
        (off < bytes.len()).then(|| &bytes[off..])
    }

    pub fn max_address(&self) -> u64 {
        let code = self.instructions.iter().map(|i| i.address).max().unwrap_or(0);
        let data = self
            .data
            .iter()
            .map(|(a, b)| a + b.len() as u64)
            .max()
            .unwrap_or(0);
        code.max(data)
    }

    /// Replace the instruction at `address` in place.
    pub fn replace(&mut self, address: u64, ins: Instruction) -> bool {
        match self.index_of(address) {
            Some(i) => {
                self.instructions[i] = ins;
                true
            }
            None => false,
        }
    }

    /// Build an instruction that has no source line.
    pub fn synthesize(address: u64, text: &str) -> Instruction {
        let (mnemonic, operands, _) = parse_instruction_body(text);
        Instruction {
            address,
            mnemonic,
            operands,
            text: text.to_string(),
            raw_text: format!("{address:x}: {text}"),
            line: 0,
        }
    }

    /// Append a new function with the given instructions.
    pub fn append_function(&mut self, name: &str, instrs: Vec<Instruction>) {
        let start = self.instructions.len();
        let address = instrs.first().map(|i| i.address).unwrap_or(0);
        for ins in instrs {
            self.index.insert(ins.address, self.instructions.len());
            self.instructions.push(ins);
        }
        self.functions.push(FunctionListing {
            name: name.to_string(),
            address,
            start,
            end: self.instructions.len(),
            line: 0,
        });
    }

    /// Emit the image in the canonical listing grammar.
    pub fn to_listing(&self) -> String {
        let mut out = String::new();
        for f in &self.functions {
            let _ = writeln!(out, "{}:", f.name);
            for ins in &self.instructions[f.start..f.end] {
                let _ = writeln!(out, "  {:x}: {}", ins.address, ins.text);
            }
        }
        for (addr, bytes) in &self.data {
            match bytes.split_last() {
                Some((0, body)) if !body.contains(&0) => {
                    let _ = writeln!(out, "  {:x}: .string {}", addr, escape(body));
                }
                _ => {
                    let _ = writeln!(out, "  {:x}: .ascii {}", addr, escape(bytes));
                }
            }
        }
        out
    }
}
