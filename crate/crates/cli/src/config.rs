//! Setting resolution: command-line flag, then config file, then default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Environment variable naming the root that relative data paths resolve
/// against.
pub const DATA_ROOT_VAR: &str = "CMCM_DATA_ROOT";

/// Resolves settings for one subcommand and records every resolved value.
///
/// The config file is a single JSON object. Keys in a section named after
/// the subcommand take precedence over top-level keys.
#[derive(Debug, Default)]
pub struct Settings {
    file: Map<String, Value>,
    section: Map<String, Value>,
    snapshot: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>, command: &str) -> Result<Self> {
        let file = match path {
            None => Map::new(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                match serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))? {
                    Value::Object(m) => m,
                    _ => bail!("config {} is not a JSON object", p.display()),
                }
            }
        };
        let section = match file.get(command) {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        };
        Ok(Self {
            file,
            section,
            snapshot: Map::new(),
        })
    }

    fn from_file<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.section.get(key).or_else(|| self.file.get(key)) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .with_context(|| format!("config key `{key}`")),
        }
    }

    pub fn get<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.snapshot.insert(key.into(), serde_json::to_value(&v)?);
        Ok(v)
    }

    pub fn get_opt<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        self.snapshot.insert(key.into(), serde_json::to_value(&v)?);
        Ok(v)
    }

    pub fn require<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        match self.get_opt(key, flag)? {
            Some(v) => Ok(v),
            None => bail!("missing required setting `{key}` (flag --{})", key.replace('_', "-")),
        }
    }

    /// A boolean switch: a set flag wins, otherwise the file, otherwise false.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.get(key, flag.then_some(true), false)
    }

    /// A data path: relative paths resolve under the data root when set.
    pub fn data_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let p: PathBuf = self.require(key, flag)?;
        let resolved = resolve_data_path(&p, std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from).as_deref());
        self.snapshot
            .insert(key.into(), Value::String(resolved.to_string_lossy().into_owned()));
        Ok(resolved)
    }

    pub fn snapshot(&self) -> Value {
        Value::Object(self.snapshot.clone())
    }
}

pub fn resolve_data_path(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(json: &str, command: &str) -> Settings {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, json).unwrap();
        Settings::load(Some(&path), command).unwrap()
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = settings(r#"{"epochs": 7, "lr": 0.5, "train": {"epochs": 9}}"#, "train");
        assert_eq!(s.get("epochs", Some(3usize), 20).unwrap(), 3);
        assert_eq!(s.get("epochs", None, 20usize).unwrap(), 9);
        assert_eq!(s.get("lr", None, 1e-4).unwrap(), 0.5);
        assert_eq!(s.get("batch_size", None, 32usize).unwrap(), 32);
        let snap = s.snapshot();
        assert_eq!(snap["batch_size"], 32);
        assert_eq!(snap["lr"], 0.5);
    }

    #[test]
    fn section_only_applies_to_its_command() {
        let mut s = settings(r#"{"epochs": 7, "train": {"epochs": 9}}"#, "eval");
        assert_eq!(s.get("epochs", None, 20usize).unwrap(), 7);
    }

    #[test]
    fn bad_config_values_are_errors() {
        let mut s = settings(r#"{"epochs": "many"}"#, "train");
        assert!(s.get("epochs", None, 20usize).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "[1, 2]").unwrap();
        assert!(Settings::load(Some(&path), "train").is_err());
        assert!(Settings::default().require::<String>("out", None).is_err());
    }

    #[test]
    fn switch_reads_file() {
        let mut s = settings(r#"{"refine": true}"#, "eval");
        assert!(s.switch("refine", false).unwrap());
        assert!(!Settings::default().switch("refine", false).unwrap());
    }

    #[test]
    fn data_root_applies_to_relative_paths() {
        let root = Path::new("/data");
        assert_eq!(resolve_data_path(Path::new("cite"), Some(root)), PathBuf::from("/data/cite"));
        assert_eq!(resolve_data_path(Path::new("/abs/cite"), Some(root)), PathBuf::from("/abs/cite"));
        assert_eq!(resolve_data_path(Path::new("cite"), None), PathBuf::from("cite"));
    }
}
