//! Layered configuration: built-in defaults, then a TOML file section, then flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use musart::{Error, Result};

/// Parsed config file; each top-level table configures one subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(root) =
            serde_json::to_value(parsed).map_err(|e| Error::Config(e.to_string()))?
        else {
            unreachable!("a TOML table converts to a JSON object")
        };
        for key in root.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown section [{key}] (expected one of {})",
                    SECTIONS.join(", ")
                )));
            }
        }
        Ok(Self { root })
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.root.get(name)
    }
}

pub const SECTIONS: [&str; 5] = ["synth", "train", "style", "video", "eval"];

/// Rejects keys of `layer` that `base` does not have.
fn check_known(base: &Value, layer: &Value, at: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(l)) = (base, layer) {
        for (k, v) in l {
            let path = if at.is_empty() {
                k.clone()
            } else {
                format!("{at}.{k}")
            };
            match b.get(k) {
                Some(bv) => check_known(bv, v, &path)?,
                None => return Err(Error::Config(format!("unknown key {path:?}"))),
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Value, layer: &Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(k) {
                    Some(bv) if bv.is_object() && v.is_object() => merge(bv, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, l) => *b = l.clone(),
    }
}

/// `defaults <- file section <- flags`, where `flags` holds only the flags given.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&ConfigFile>,
    section: &str,
    flags: Value,
) -> Result<T> {
    let mut v = serde_json::to_value(defaults).expect("config serializes");
    if let Some(layer) = file.and_then(|f| f.section(section)) {
        check_known(&v, layer, section)?;
        merge(&mut v, layer);
    }
    merge(&mut v, &flags);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("[{section}]: {e}")))
}

/// JSON object from `(key, value)` pairs, skipping absent flags. Dotted keys nest.
pub fn flags<const N: usize>(pairs: [(&str, Option<Value>); N]) -> Value {
    let mut root = Value::Object(Map::new());
    for (key, value) in pairs {
        let Some(value) = value else { continue };
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .as_object_mut()
                .unwrap()
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
        }
        node.as_object_mut()
            .unwrap()
            .insert(parts[parts.len() - 1].to_string(), value);
    }
    root
}

pub fn opt<T: Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref()
        .map(|x| serde_json::to_value(x).expect("flag serializes"))
}
