//! Flat dotted-key experiment configuration.
//!
//! A config is TOML whose tables are flattened into dotted keys
//! (`[dist]` + `h = 0.5` and `dist.h = 0.5` are the same entry). Values are
//! checked against the experiment's key table before anything runs.

use std::collections::BTreeMap;
use std::fmt;

use toml::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config does not parse: {0}")]
    Syntax(String),
    #[error("key `{key}`: {reason}")]
    Key { key: String, reason: String },
}

impl ConfigError {
    pub fn key(key: &str, reason: impl Into<String>) -> Self {
        ConfigError::Key { key: key.to_string(), reason: reason.into() }
    }

    /// The offending key, if the error names one.
    pub fn offending_key(&self) -> Option<&str> {
        match self {
            ConfigError::Key { key, .. } => Some(key),
            ConfigError::Syntax(_) => None,
        }
    }
}

/// Parsed but unvalidated entries, keyed by dotted path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, Value>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
        let mut entries = BTreeMap::new();
        flatten("", &table, &mut entries)?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &BTreeMap<String, Value> {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        check_key_syntax(key)?;
        match &value {
            Value::Table(_) => return Err(ConfigError::key(key, "tables are not allowed as values")),
            Value::Array(items) if items.iter().any(|i| matches!(i, Value::Table(_) | Value::Array(_))) => {
                return Err(ConfigError::key(key, "arrays may only hold scalars"));
            }
            _ => {}
        }
        // A key cannot be both a value and a table of further keys.
        let clash = self.entries.keys().find(|k| {
            k.len() != key.len()
                && (k.starts_with(key) && k.as_bytes()[key.len()] == b'.'
                    || key.starts_with(k.as_str()) && key.as_bytes()[k.len()] == b'.')
        });
        if let Some(k) = clash {
            return Err(ConfigError::key(key, format!("clashes with existing key `{k}`")));
        }
        self.entries.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies `key=value`; the value is read as a TOML literal and falls back
    /// to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax(format!("override `{spec}` is not of the form key=value")))?;
        let key = key.trim();
        let value = parse_literal(raw.trim());
        self.set(key, value)
    }

    /// Serialises back to flat dotted-key TOML, one entry per line in key order.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

fn parse_literal(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn check_key_syntax(key: &str) -> Result<(), ConfigError> {
    let ok = !key.is_empty()
        && key.split('.').all(|seg| {
            !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        });
    if ok {
        Ok(())
    } else {
        Err(ConfigError::key(key, "keys are dot-separated segments of letters, digits, `_` and `-`"))
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        check_key_syntax(&key)?;
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            Value::Array(items) if items.iter().any(|i| matches!(i, Value::Table(_) | Value::Array(_))) => {
                return Err(ConfigError::key(&key, "arrays may only hold scalars"));
            }
            _ => {
                out.insert(key, v.clone());
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Str,
    FloatList,
    StrList,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::Str => "a string",
            Kind::FloatList => "a list of numbers",
            Kind::StrList => "a list of strings",
        })
    }
}

/// One accepted key. A trailing `.*` accepts any single further segment.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    /// TOML literal used when the key is absent; `None` makes it required.
    pub default: Option<&'static str>,
}

impl KeySpec {
    pub const fn required(key: &'static str, kind: Kind) -> Self {
        Self { key, kind, default: None }
    }

    pub const fn optional(key: &'static str, kind: Kind, default: &'static str) -> Self {
        Self { key, kind, default: Some(default) }
    }

    fn matches(&self, key: &str) -> bool {
        match self.key.strip_suffix(".*") {
            Some(prefix) => key
                .strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('.'))
                .is_some_and(|rest| !rest.is_empty() && !rest.contains('.')),
            None => self.key == key,
        }
    }
}

/// Entries validated against a key table, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, Value>,
}

impl ExperimentConfig {
    pub fn validate(raw: &RawConfig, specs: &[KeySpec]) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (key, value) in raw.entries() {
            let spec = specs
                .iter()
                .find(|s| s.matches(key))
                .ok_or_else(|| ConfigError::key(key, "unknown key for this experiment"))?;
            values.insert(key.clone(), coerce(key, value, spec.kind)?);
        }
        for spec in specs {
            if spec.key.ends_with(".*") || values.contains_key(spec.key) {
                continue;
            }
            match spec.default {
                Some(lit) => {
                    let v = coerce(spec.key, &parse_literal(lit), spec.kind)?;
                    values.insert(spec.key.to_string(), v);
                }
                None => return Err(ConfigError::key(spec.key, "required key is missing")),
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    pub fn to_raw(&self) -> RawConfig {
        RawConfig { entries: self.values.clone() }
    }

    fn value(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("key `{key}` is not part of the validated schema"))
    }

    pub fn float(&self, key: &str) -> f64 {
        self.value(key).as_float().expect("validated as float")
    }

    pub fn int(&self, key: &str) -> u64 {
        self.value(key).as_integer().expect("validated as int") as u64
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn str(&self, key: &str) -> &str {
        self.value(key).as_str().expect("validated as string")
    }

    pub fn floats(&self, key: &str) -> Vec<f64> {
        self.value(key).as_array().expect("validated as list").iter().map(|v| v.as_float().expect("validated")).collect()
    }

    pub fn strs(&self, key: &str) -> Vec<String> {
        self.value(key)
            .as_array()
            .expect("validated as list")
            .iter()
            .map(|v| v.as_str().expect("validated").to_string())
            .collect()
    }

    /// Entries under `prefix.` as `(last segment, number)` pairs.
    pub fn float_map(&self, prefix: &str) -> BTreeMap<String, f64> {
        let lead = format!("{prefix}.");
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&lead).map(|rest| (rest.to_string(), v.as_float().expect("validated"))))
            .collect()
    }

    /// A positive finite number.
    pub fn positive(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.float(key);
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(ConfigError::key(key, format!("must be positive, got {v}")))
        }
    }

    /// A strictly positive count.
    pub fn count(&self, key: &str) -> Result<usize, ConfigError> {
        match self.usize(key) {
            0 => Err(ConfigError::key(key, "must be at least 1")),
            n => Ok(n),
        }
    }
}

fn coerce(key: &str, value: &Value, kind: Kind) -> Result<Value, ConfigError> {
    let bad = || ConfigError::key(key, format!("expected {kind}, got `{value}`"));
    let number = |v: &Value| match v {
        Value::Float(f) if f.is_finite() => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    };
    Ok(match kind {
        Kind::Int => match value {
            Value::Integer(i) if *i >= 0 => value.clone(),
            Value::Float(f) if *f >= 0.0 && f.fract() == 0.0 && *f < 9.0e15 => Value::Integer(*f as i64),
            _ => return Err(bad()),
        },
        Kind::Float => Value::Float(number(value).ok_or_else(bad)?),
        Kind::Str => match value {
            Value::String(_) => value.clone(),
            _ => return Err(bad()),
        },
        Kind::FloatList => {
            let items = value.as_array().ok_or_else(bad)?;
            Value::Array(items.iter().map(|v| number(v).map(Value::Float)).collect::<Option<Vec<_>>>().ok_or_else(bad)?)
        }
        Kind::StrList => {
            let items = value.as_array().ok_or_else(bad)?;
            if items.iter().any(|v| !v.is_str()) {
                return Err(bad());
            }
            value.clone()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPECS: &[KeySpec] = &[
        KeySpec::required("dist.h", Kind::Float),
        KeySpec::optional("dist.p", Kind::Float, "1.0"),
        KeySpec::optional("m", Kind::Int, "10"),
        KeySpec::optional("grid", Kind::FloatList, "[0.1, 0.05]"),
        KeySpec::optional("params.*", Kind::Float, "0"),
    ];

    #[test]
    fn tables_and_dotted_keys_agree() {
        let a = RawConfig::parse("[dist]\nh = 0.5\np = 2\n").unwrap();
        let b = RawConfig::parse("dist.h = 0.5\ndist.p = 2\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries().keys().collect::<Vec<_>>(), ["dist.h", "dist.p"]);
    }

    #[test]
    fn defaults_fill_and_ints_widen() {
        let raw = RawConfig::parse("dist.h = 1\nparams.lambda = 2\n").unwrap();
        let cfg = ExperimentConfig::validate(&raw, SPECS).unwrap();
        assert_eq!(cfg.float("dist.h"), 1.0);
        assert_eq!(cfg.float("dist.p"), 1.0);
        assert_eq!(cfg.usize("m"), 10);
        assert_eq!(cfg.floats("grid"), vec![0.1, 0.05]);
        assert_eq!(cfg.float_map("params").get("lambda"), Some(&2.0));
    }

    #[test]
    fn unknown_missing_and_mistyped_keys_named() {
        let unknown = RawConfig::parse("dist.h = 1\ndist.q = 3\n").unwrap();
        let e = ExperimentConfig::validate(&unknown, SPECS).unwrap_err();
        assert_eq!(e.offending_key(), Some("dist.q"));
        let missing = RawConfig::parse("m = 3\n").unwrap();
        assert_eq!(ExperimentConfig::validate(&missing, SPECS).unwrap_err().offending_key(), Some("dist.h"));
        let typed = RawConfig::parse("dist.h = \"x\"\n").unwrap();
        assert_eq!(ExperimentConfig::validate(&typed, SPECS).unwrap_err().offending_key(), Some("dist.h"));
        let nested = RawConfig::parse("dist.h = 1\nparams.a.b = 1\n").unwrap();
        assert_eq!(ExperimentConfig::validate(&nested, SPECS).unwrap_err().offending_key(), Some("params.a.b"));
        let negative = RawConfig::parse("dist.h = 1\nm = -1\n").unwrap();
        assert_eq!(ExperimentConfig::validate(&negative, SPECS).unwrap_err().offending_key(), Some("m"));
    }

    #[test]
    fn overrides_parse_literals() {
        let mut raw = RawConfig::parse("dist.h = 1\n").unwrap();
        raw.apply_override("dist.h=0.25").unwrap();
        raw.apply_override("grid = [0.2, 0.1]").unwrap();
        raw.apply_override("name=lorenz").unwrap();
        assert_eq!(raw.get("dist.h"), Some(&Value::Float(0.25)));
        assert_eq!(raw.get("name"), Some(&Value::String("lorenz".into())));
        assert!(raw.apply_override("novalue").is_err());
        assert!(raw.apply_override("bad key=1").is_err());
        assert!(raw.apply_override("t={a=1}").is_err());
        assert!(raw.apply_override("t=[[1]]").is_err());
        assert_eq!(raw.apply_override("dist=1").unwrap_err().offending_key(), Some("dist"));
        assert!(raw.apply_override("dist.h.x=1").is_err());
        raw.apply_override("dist.hh=1").unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let raw = RawConfig::parse("a.b = 1.5\nc = [1, 2]\nd = \"x\"\n[e]\nf = 3\n").unwrap();
        let again = RawConfig::parse(&raw.to_toml()).unwrap();
        assert_eq!(raw, again);
    }

    #[test]
    fn rejects_nested_arrays() {
        assert!(RawConfig::parse("a = [[1]]\n").is_err());
        assert!(RawConfig::parse("[[x]]\na = 1\n").is_err());
    }
}
