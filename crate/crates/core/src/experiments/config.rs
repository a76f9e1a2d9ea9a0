//! Flat `key = value` configuration with `[section]` headers and `#` comments,
//! applied on top of a fixed table of typed defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{NddeError, Result};

/// A typed parameter. Overrides must parse as the same variant as the default.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Int(u64),
    Bool(bool),
    Text(String),
    Floats(Vec<f64>),
    Ints(Vec<usize>),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Float(_) => "a number",
            Value::Int(_) => "a nonnegative integer",
            Value::Bool(_) => "true or false",
            Value::Text(_) => "text",
            Value::Floats(_) => "a comma-separated list of numbers",
            Value::Ints(_) => "a comma-separated list of integers",
        }
    }

    /// Parses `raw` as the same kind of value as `self`.
    fn parse_like(&self, raw: &str) -> std::result::Result<Value, String> {
        let raw = raw.trim();
        let list = |s: &str| -> Vec<String> {
            let s = s.trim().trim_start_matches('[').trim_end_matches(']');
            s.split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect()
        };
        let bad = || format!("expected {}, got `{raw}`", self.kind());
        Ok(match self {
            Value::Float(_) => Value::Float(raw.parse().map_err(|_| bad())?),
            Value::Int(_) => Value::Int(raw.parse().map_err(|_| bad())?),
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::Text(_) => Value::Text(raw.trim_matches('"').to_string()),
            Value::Floats(_) => Value::Floats(
                list(raw)
                    .iter()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?,
            ),
            Value::Ints(_) => Value::Ints(
                list(raw)
                    .iter()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?,
            ),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Value::Float(v) => json!(v),
            Value::Int(v) => json!(v),
            Value::Bool(v) => json!(v),
            Value::Text(v) => json!(v),
            Value::Floats(v) => json!(v),
            Value::Ints(v) => json!(v),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<String>| v.join(", ");
        match self {
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Text(v) => write!(f, "{v}"),
            Value::Floats(v) => write!(f, "{}", join(v.iter().map(|x| format!("{x:?}")).collect())),
            Value::Ints(v) => write!(f, "{}", join(v.iter().map(|x| x.to_string()).collect())),
        }
    }
}

/// One `key = value` line of a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses config text. Keys are qualified by the most recent `[section]`
/// header as `section.key`; keys before any header stay unqualified.
pub fn parse_config(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut section = String::new();
    let mut out: Vec<ConfigEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| NddeError::Parse {
                line,
                message: format!("unterminated section header `{body}`"),
            })?;
            let name = name.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(NddeError::Parse {
                    line,
                    message: format!("bad section name `{name}`"),
                });
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| NddeError::Parse {
            line,
            message: format!("expected `key = value`, found `{body}`"),
        })?;
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(NddeError::Parse {
                line,
                message: format!("bad key `{k}`"),
            });
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        if out.iter().any(|e| e.key == key) {
            return Err(NddeError::Parse {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        out.push(ConfigEntry {
            key,
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<ConfigEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NddeError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// The full parameter table of a run, keyed `section.key`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: BTreeMap<String, Value>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn define(mut self, key: &str, value: Value) -> Self {
        self.entries.insert(key.to_string(), value);
        self
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.entries.iter()
    }

    /// Overrides a defined key from its textual form.
    pub fn set_raw(&mut self, key: &str, raw: &str) -> Result<()> {
        let Some(current) = self.entries.get(key) else {
            let known: Vec<&str> = self.entries.keys().map(String::as_str).collect();
            return Err(NddeError::Config(format!(
                "unknown key `{key}`; known keys: {}",
                known.join(", ")
            )));
        };
        let v = current
            .parse_like(raw)
            .map_err(|m| NddeError::Config(format!("`{key}`: {m}")))?;
        self.entries.insert(key.to_string(), v);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match self.entries.get(key) {
            Some(cur) if std::mem::discriminant(cur) == std::mem::discriminant(&value) => {
                self.entries.insert(key.to_string(), value);
                Ok(())
            }
            Some(cur) => Err(NddeError::Config(format!("`{key}` expects {}", cur.kind()))),
            None => Err(NddeError::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn apply(&mut self, entries: &[ConfigEntry]) -> Result<()> {
        for e in entries {
            self.set_raw(&e.key, &e.value).map_err(|err| match err {
                NddeError::Config(m) => NddeError::Config(format!("line {}: {m}", e.line)),
                other => other,
            })?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Result<&Value> {
        self.entries
            .get(key)
            .ok_or_else(|| NddeError::Config(format!("missing parameter `{key}`")))
    }

    fn mismatch(key: &str, want: &str) -> NddeError {
        NddeError::Config(format!("`{key}` is not {want}"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            Value::Float(v) => Ok(*v),
            Value::Int(v) => Ok(*v as f64),
            _ => Err(Self::mismatch(key, "a number")),
        }
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        match self.get(key)? {
            Value::Int(v) => Ok(*v),
            _ => Err(Self::mismatch(key, "an integer")),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            Value::Bool(v) => Ok(*v),
            _ => Err(Self::mismatch(key, "a boolean")),
        }
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        match self.get(key)? {
            Value::Text(v) => Ok(v),
            _ => Err(Self::mismatch(key, "text")),
        }
    }

    pub fn floats(&self, key: &str) -> Result<&[f64]> {
        match self.get(key)? {
            Value::Floats(v) => Ok(v),
            _ => Err(Self::mismatch(key, "a list of numbers")),
        }
    }

    pub fn ints(&self, key: &str) -> Result<&[usize]> {
        match self.get(key)? {
            Value::Ints(v) => Ok(v),
            _ => Err(Self::mismatch(key, "a list of integers")),
        }
    }

    /// Canonical `key = value` lines in key order.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.entries
                .iter()
                .map(|(k, v)| (k.clone(), v.to_json()))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Params {
        Params::new()
            .define("train.lr", Value::Float(1e-3))
            .define("train.epochs", Value::Int(10))
            .define("model.hidden", Value::Ints(vec![16, 16]))
            .define("model.train_tau", Value::Bool(false))
            .define("data.csv", Value::Text(String::new()))
            .define("seed", Value::Int(1))
    }

    #[test]
    fn parses_sections_comments_and_lists() {
        let text = "seed = 4 # top level\n\n[train]\n# a comment\nlr = 0.01\nepochs=3\n[model]\nhidden = 8, 8, 8\ntrain_tau = true\n[data]\ncsv = \"a b.csv\"\n";
        let mut p = table();
        p.apply(&parse_config(text).unwrap()).unwrap();
        assert_eq!(p.f64("train.lr").unwrap(), 0.01);
        assert_eq!(p.usize("train.epochs").unwrap(), 3);
        assert_eq!(p.ints("model.hidden").unwrap(), &[8, 8, 8]);
        assert!(p.bool("model.train_tau").unwrap());
        assert_eq!(p.text("data.csv").unwrap(), "a b.csv");
        assert_eq!(p.u64("seed").unwrap(), 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let mut p = table();
        let e = p.apply(&parse_config("[train]\nlearning_rate = 0.1\n").unwrap());
        assert!(matches!(e, Err(NddeError::Config(m)) if m.contains("learning_rate") && m.starts_with("line 2")));
        assert!(p.apply(&parse_config("[train]\nepochs = 1.5\n").unwrap()).is_err());
        assert!(p.apply(&parse_config("[model]\ntrain_tau = yes\n").unwrap()).is_err());
        assert!(p.set("train.lr", Value::Int(1)).is_err());
    }

    #[test]
    fn malformed_lines_report_their_number() {
        for (text, line) in [("[train\n", 1), ("a = 1\nnovalue\n", 2), ("[x]\na = 1\na = 2\n", 3), ("bad key = 1\n", 1)] {
            match parse_config(text) {
                Err(NddeError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn canonical_form_ignores_file_order() {
        let mut a = table();
        let mut b = table();
        a.apply(&parse_config("[train]\nlr = 0.5\nepochs = 2\n").unwrap()).unwrap();
        b.apply(&parse_config("[train]\nepochs = 2\nlr = 0.5\n").unwrap()).unwrap();
        assert_eq!(a.canonical(), b.canonical());
        let mut c = table();
        c.set_raw("train.lr", &a.f64("train.lr").unwrap().to_string()).unwrap();
        assert_ne!(a.canonical(), c.canonical());
    }

    #[test]
    fn display_round_trips() {
        let p = table().define("x", Value::Floats(vec![0.1, -2.5e-7]));
        for (k, v) in p.iter() {
            let mut q = p.clone();
            q.set_raw(k, &v.to_string()).unwrap();
            assert_eq!(q, p);
        }
    }
}
