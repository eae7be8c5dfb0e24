//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment. Dotted keys address
//! nested sections (`model.channels = 8,16,32`). Values are read as JSON
//! scalars when they parse as such, comma-separated values become lists,
//! and anything else is a string. The resulting tree is deserialised into
//! the target type, so unknown keys and badly typed values are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// An ordered list of `(line, key, value)` assignments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignments(pub Vec<(usize, String, String)>);

impl Assignments {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = parse_assignment(line).map_err(|m| Error::parse(origin, i + 1, m))?;
            out.push((i + 1, key, value));
        }
        Ok(Self(out))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses command-line overrides of the form `key=value`.
    pub fn from_overrides<S: AsRef<str>>(items: &[S]) -> Result<Self> {
        let mut out = Vec::new();
        for item in items {
            let (key, value) = parse_assignment(item.as_ref())
                .map_err(|m| Error::InvalidConfig(format!("override `{}`: {m}", item.as_ref())))?;
            out.push((0, key, value));
        }
        Ok(Self(out))
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.0.push((0, key.to_string(), value.to_string()));
    }

    pub fn extend(&mut self, other: Assignments) {
        self.0.extend(other.0);
    }

    /// Applies the assignments on top of `base`, later ones winning.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, base: &T) -> Result<T> {
        let mut tree = serde_json::to_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (line, key, value) in &self.0 {
            set_path(&mut tree, key, parse_value(value)).map_err(|m| {
                if *line > 0 {
                    Error::InvalidConfig(format!("line {line}: {m}"))
                } else {
                    Error::InvalidConfig(m)
                }
            })?;
        }
        serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

fn parse_assignment(line: &str) -> std::result::Result<(String, String), String> {
    let (key, value) = line.split_once('=').ok_or_else(|| "expected `key = value`".to_string())?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.is_empty() || !p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')) {
        return Err(format!("invalid key `{key}`"));
    }
    Ok((key.to_string(), value.trim().to_string()))
}

fn parse_scalar(text: &str) -> Value {
    let t = text.trim();
    match serde_json::from_str::<Value>(t) {
        Ok(v) if !v.is_object() => v,
        _ => Value::String(t.to_string()),
    }
}

fn parse_value(text: &str) -> Value {
    let t = text.trim();
    if t.starts_with('[') || t.starts_with('"') || !t.contains(',') {
        return parse_scalar(t);
    }
    Value::Array(t.split(',').map(parse_scalar).collect())
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        if !map.contains_key(*part) {
            return Err(format!("unknown key `{key}`"));
        }
        if i + 1 == parts.len() {
            let slot = map.get_mut(*part).expect("checked");
            *slot = coerce(slot, value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked");
    }
    unreachable!("keys have at least one part")
}

/// Wraps a lone value into a list when the existing slot holds a list, and
/// turns `null` placeholders into whatever was given.
fn coerce(existing: &Value, value: Value) -> Value {
    match (existing, value) {
        (Value::Array(_), v @ (Value::Number(_) | Value::String(_) | Value::Bool(_))) => Value::Array(vec![v]),
        (Value::String(_), Value::Number(n)) => Value::String(n.to_string()),
        (_, v) => v,
    }
}

/// Renders a config as `key = value` lines that [`Assignments::parse`] reads back.
pub fn render<T: Serialize>(config: &T) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(scalar_text).collect();
                let text = if parts.len() == 1 { format!("[{}]", parts[0]) } else { parts.join(",") };
                out.push_str(&format!("{prefix} = {text}\n"));
            }
            other => out.push_str(&format!("{prefix} = {}\n", scalar_text(other))),
        }
    }
    fn scalar_text(v: &Value) -> String {
        match v {
            Value::String(s) if s.contains(',') || s.parse::<f64>().is_ok() || s.is_empty() => {
                serde_json::to_string(s).expect("string")
            }
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
    let mut out = String::new();
    walk("", &serde_json::to_value(config).expect("serialisable config"), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        widths: Vec<usize>,
        flag: bool,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        rate: f64,
        name: String,
        inner: Inner,
        range: [usize; 2],
    }

    fn base() -> Outer {
        Outer {
            rate: 0.1,
            name: "a".into(),
            inner: Inner { widths: vec![1, 2], flag: false },
            range: [2, 4],
        }
    }

    #[test]
    fn parses_nested_lists_and_comments() {
        let text = "# comment\nrate = 0.001\nname = run one # trailing\ninner.widths = 8,16,32\ninner.flag = true\nrange = 2,2\n";
        let a = Assignments::parse(text, Path::new("t.cfg")).unwrap();
        let got = a.apply(&base()).unwrap();
        assert_eq!(
            got,
            Outer { rate: 0.001, name: "run one".into(), inner: Inner { widths: vec![8, 16, 32], flag: true }, range: [2, 2] }
        );
    }

    #[test]
    fn later_assignments_win_and_render_round_trips() {
        let mut a = Assignments::parse("rate = 0.5\n", Path::new("t.cfg")).unwrap();
        a.extend(Assignments::from_overrides(&["rate=0.25", "inner.widths=7"]).unwrap());
        let got = a.apply(&base()).unwrap();
        assert_eq!(got.rate, 0.25);
        assert_eq!(got.inner.widths, vec![7]);
        let text = render(&got);
        assert_eq!(Assignments::parse(&text, Path::new("r")).unwrap().apply(&base()).unwrap(), got);
    }

    #[test]
    fn errors_name_the_line() {
        let err = Assignments::parse("rate = 1\noops\n", Path::new("t.cfg")).unwrap_err();
        assert!(err.to_string().contains("t.cfg:2"), "{err}");
        let err = Assignments::parse("bogus = 1\n", Path::new("t.cfg")).unwrap().apply(&base()).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        let err = Assignments::parse("rate = fast\n", Path::new("t.cfg")).unwrap().apply(&base()).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }
}
