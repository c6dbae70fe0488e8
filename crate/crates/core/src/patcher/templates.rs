use serde::{Deserialize, Serialize};
use std::path::Path;

const BUNDLED: &str = include_str!("../../data/templates.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    Static,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchTemplate {
    pub name: String,
    pub target: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub mode: PatchMode,
    pub replacement: String,
    pub size_expr: String,
    pub terminate: bool,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

impl PatchTemplate {
    pub fn matches(&self, callee: &str) -> bool {
        self.target == callee || self.aliases.iter().any(|a| a == callee)
    }

    /// Evaluate `size_expr` for a destination of `dest_size` bytes.
    pub fn bound(&self, dest_size: u64) -> Option<u64> {
        let e = self.size_expr.replace(' ', "");
        if e == "dest_size" {
            return Some(dest_size);
        }
        if let Some(k) = e.strip_prefix("dest_size-") {
            return dest_size.checked_sub(k.parse().ok()?);
        }
        if let Some(k) = e.strip_prefix("dest_size+") {
            return Some(dest_size + k.parse::<u64>().ok()?);
        }
        e.parse().ok()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Deserialize)]
struct TemplateFile {
    #[serde(default)]
    template: Vec<PatchTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TemplateDb {
    pub templates: Vec<PatchTemplate>,
}

impl TemplateDb {
    pub fn bundled() -> TemplateDb {
        let f: TemplateFile = toml::from_str(BUNDLED).expect("bundled templates parse");
        TemplateDb { templates: f.template }
    }

    pub fn extend_from_str(&mut self, text: &str, origin: &str) -> Result<(), TemplateError> {
        let f: TemplateFile = toml::from_str(text).map_err(|source| TemplateError::Parse {
            path: origin.to_string(),
            source,
        })?;
        for t in f.template {
            match self.templates.iter_mut().find(|x| x.name == t.name) {
                Some(x) => *x = t,
                None => self.templates.push(t),
            }
        }
        Ok(())
    }

    /// Load every `*.toml` file of a directory, in name order.
    pub fn extend_from_dir(&mut self, dir: &Path) -> Result<(), TemplateError> {
        let io = |source| TemplateError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        for p in files {
            let text = std::fs::read_to_string(&p).map_err(|source| TemplateError::Io {
                path: p.display().to_string(),
                source,
            })?;
            self.extend_from_str(&text, &p.display().to_string())?;
        }
        Ok(())
    }

    pub fn enable(&mut self, target: &str) {
        for t in &mut self.templates {
            if t.target == target {
                t.enabled = true;
            }
        }
    }

    /// The enabled template for a callee and mode.
    pub fn find(&self, callee: &str, mode: PatchMode) -> Option<&PatchTemplate> {
        self.templates
            .iter()
            .find(|t| t.enabled && t.mode == mode && t.matches(callee))
    }

    pub fn covers(&self, callee: &str) -> bool {
        self.templates.iter().any(|t| t.enabled && t.matches(callee))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ten_templates_one_per_pair() {
        let db = TemplateDb::bundled();
        assert_eq!(db.templates.len(), 10);
        let pairs: BTreeSet<(String, PatchMode)> = db.templates.iter().map(|t| (t.target.clone(), t.mode)).collect();
        assert_eq!(pairs.len(), 10);
        for f in ["strcpy", "strcat", "sprintf", "gets", "scanf"] {
            for m in [PatchMode::Static, PatchMode::Runtime] {
                assert!(pairs.contains(&(f.to_string(), m)));
            }
        }
    }

    #[test]
    fn scanf_is_opt_in() {
        let mut db = TemplateDb::bundled();
        assert!(db.find("scanf", PatchMode::Static).is_none());
        assert!(!db.covers("__isoc99_scanf"));
        db.enable("scanf");
        assert_eq!(db.find("__isoc99_scanf", PatchMode::Static).unwrap().name, "scanf_static");
    }

    #[test]
    fn size_expressions() {
        let mut t = TemplateDb::bundled().find("strcpy", PatchMode::Static).unwrap().clone();
        assert_eq!(t.bound(16), Some(16));
        t.size_expr = "dest_size - 1".into();
        assert_eq!(t.bound(16), Some(15));
        t.size_expr = "8".into();
        assert_eq!(t.bound(16), Some(8));
        t.size_expr = "nonsense".into();
        assert_eq!(t.bound(16), None);
    }

    #[test]
    fn user_templates_override() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("mine.toml"),
            "[[template]]\nname = \"strcpy_static\"\ntarget = \"strcpy\"\nmode = \"static\"\nreplacement = \"strncpy\"\nsize_expr = \"dest_size - 1\"\nterminate = false\n",
        )
        .unwrap();
        let mut db = TemplateDb::bundled();
        db.extend_from_dir(dir.path()).unwrap();
        assert_eq!(db.templates.len(), 10);
        assert!(!db.find("strcpy", PatchMode::Static).unwrap().terminate);
    }
}
