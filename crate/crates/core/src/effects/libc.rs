//! Declarative C library database.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const BUNDLED: &str = include_str!("../../data/libc.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgRole {
    Dest,
    Src,
    Format,
    Size,
    Value,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Stdin,
}

/// Write-extent rule, doubling as the id of the concrete semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    CopyString,
    CopyBounded,
    AppendString,
    AppendBounded,
    Format,
    FormatBounded,
    ReadLine,
    ReadLineBounded,
    Scan,
    ReadChar,
    Fill,
    CopyMem,
    Length,
    Compare,
    ToInt,
    PrintFormat,
    PrintString,
    PrintChar,
    Exit,
    Abort,
    StackChkFail,
    NoEffect,
}

impl Rule {
    pub fn is_noreturn(self) -> bool {
        matches!(self, Rule::Exit | Rule::Abort | Rule::StackChkFail)
    }

    /// Whether the call may write memory at all.
    pub fn writes(self) -> bool {
        matches!(
            self,
            Rule::CopyString
                | Rule::CopyBounded
                | Rule::AppendString
                | Rule::AppendBounded
                | Rule::Format
                | Rule::FormatBounded
                | Rule::ReadLine
                | Rule::ReadLineBounded
                | Rule::Scan
                | Rule::Fill
                | Rule::CopyMem
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibcSpec {
    pub name: String,
    pub roles: Vec<ArgRole>,
    #[serde(default)]
    pub variadic: bool,
    #[serde(default)]
    pub input: Option<InputSource>,
    pub rule: Rule,
}

impl LibcSpec {
    pub fn arity(&self) -> usize {
        self.roles.len()
    }

    /// Argument position of the destination buffer.
    pub fn dest_arg(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == ArgRole::Dest)
    }

    pub fn is_input_source(&self) -> bool {
        self.input.is_some()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LibcDbError {
    #[error("libc database: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("libc database: {0}")]
    Io(#[from] std::io::Error),
    #[error("libc database: `{0}` declares more than one dest argument")]
    DuplicateDest(String),
}

#[derive(Deserialize)]
struct DbFile {
    #[serde(default)]
    function: Vec<LibcSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibcDb {
    specs: BTreeMap<String, LibcSpec>,
}

impl Default for LibcDb {
    fn default() -> Self {
        LibcDb::bundled()
    }
}

impl LibcDb {
    pub fn bundled() -> LibcDb {
        let mut db = LibcDb {
            specs: BTreeMap::new(),
        };
        db.extend_from_str(BUNDLED).expect("bundled libc database is valid");
        db
    }

    /// Add or override entries from TOML text.
    pub fn extend_from_str(&mut self, text: &str) -> Result<(), LibcDbError> {
        let file: DbFile = toml::from_str(text)?;
        for spec in file.function {
            if spec.roles.iter().filter(|r| **r == ArgRole::Dest).count() > 1 {
                return Err(LibcDbError::DuplicateDest(spec.name));
            }
            self.specs.insert(spec.name.clone(), spec);
        }
        Ok(())
    }

    pub fn extend_from_file(&mut self, path: &Path) -> Result<(), LibcDbError> {
        let text = std::fs::read_to_string(path)?;
        self.extend_from_str(&text)
    }

    pub fn get(&self, name: &str) -> Option<&LibcSpec> {
        self.specs.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown library function `{0}`")]
pub struct UnknownLibc(pub String);

pub fn lookup_libc<'a>(db: &'a LibcDb, name: &str) -> Result<&'a LibcSpec, UnknownLibc> {
    db.get(name).ok_or_else(|| UnknownLibc(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn required_functions_present() {
        let db = LibcDb::bundled();
        for name in [
            "strcpy", "strcat", "sprintf", "gets", "scanf", "strncpy", "fgets", "snprintf", "memset", "printf",
        ] {
            assert!(db.get(name).is_some(), "{name}");
        }
    }

    #[test]
    fn strcpy_and_gets() {
        let db = LibcDb::bundled();
        let s = lookup_libc(&db, "strcpy").unwrap();
        assert_eq!(s.arity(), 2);
        assert_eq!(s.roles, vec![ArgRole::Dest, ArgRole::Src]);
        assert_eq!(s.rule, Rule::CopyString);
        let g = lookup_libc(&db, "gets").unwrap();
        assert_eq!(g.arity(), 1);
        assert!(g.is_input_source());
        assert_eq!(g.rule, Rule::ReadLine);
        assert_eq!(lookup_libc(&db, "qsort"), Err(UnknownLibc("qsort".into())));
    }

    #[test]
    fn user_extension_and_dest_uniqueness() {
        let mut db = LibcDb::bundled();
        db.extend_from_str("[[function]]\nname = \"stpcpy\"\nroles = [\"dest\", \"src\"]\nrule = \"copy_string\"\n")
            .unwrap();
        assert!(db.get("stpcpy").is_some());
        let err = db
            .extend_from_str("[[function]]\nname = \"bad\"\nroles = [\"dest\", \"dest\"]\nrule = \"copy_mem\"\n")
            .unwrap_err();
        assert!(matches!(err, LibcDbError::DuplicateDest(_)));
    }
}
