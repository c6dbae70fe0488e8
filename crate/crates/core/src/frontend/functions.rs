use super::instr::Mnemonic;
use super::{BCfg, FrontendError, ProgramImage};
use serde::Serialize;
use std::collections::BTreeMap;

/// Function name ↔ entry address, split into user code and library stubs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FunctionMap {
    pub entries: BTreeMap<String, u64>,
    pub by_address: BTreeMap<u64, String>,
    /// Names (without `@plt`) of library functions referenced by calls.
    pub library: BTreeMap<String, u64>,
}

impl FunctionMap {
    pub fn entry(&self, name: &str) -> Option<u64> {
        self.entries.get(name).copied()
    }

    pub fn name_at(&self, address: u64) -> Option<&str> {
        self.by_address.get(&address).map(String::as_str)
    }

    pub fn is_user(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_library(&self, name: &str) -> bool {
        self.library.contains_key(name)
    }

    /// The user function whose listing contains `address`.
    pub fn function_containing<'a>(&'a self, image: &ProgramImage, address: u64) -> Option<&'a str> {
        let f = image.function_of(address)?;
        self.entries.get_key_value(&f.name).map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Collect user functions from listing headers and library functions from
/// `@plt` call targets. A listed `foo@plt` stub counts as library code.
pub fn extract_user_functions(bcfg: &BCfg, image: &ProgramImage) -> Result<FunctionMap, FrontendError> {
    let mut map = FunctionMap::default();
    for f in &image.functions {
        if let Some(lib) = f.name.strip_suffix("@plt") {
            map.library.insert(lib.to_string(), f.address);
            continue;
        }
        if map.entries.contains_key(&f.name) {
            return Err(FrontendError::DuplicateFunction(f.name.clone()));
        }
        // Prefer the endbr64 site when the header is followed by padding.
        let entry = image.instructions[f.start..f.end]
            .iter()
            .find(|i| i.mnemonic == Mnemonic::Endbr64)
            .filter(|i| Some(i.address) == image.instructions.get(f.start).map(|s| s.address))
            .map(|i| i.address)
            .unwrap_or(f.address);
        map.entries.insert(f.name.clone(), entry);
        map.by_address.insert(entry, f.name.clone());
    }
    for b in bcfg.blocks.values() {
        for ins in b.instructions(image) {
            if !ins.is_call() {
                continue;
            }
            if let Some(t) = ins.target() {
                if t.is_plt() || image.index_of(t.address).is_none() {
                    if let Some(name) = t.plain_symbol() {
                        map.library.entry(name.to_string()).or_insert(t.address);
                    }
                }
            }
        }
    }
    Ok(map)
}
