//! Typed values travelling over workflow connections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// The type declared by every endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatumType {
    Boolean,
    Integer,
    Float,
    Text,
    FileRef,
}

impl DatumType {
    /// Whether a value of type `from` may flow into an endpoint of this type.
    ///
    /// Only equal types and the implicit Integer -> Float widening are accepted.
    pub fn accepts(self, from: DatumType) -> bool {
        self == from || (self == DatumType::Float && from == DatumType::Integer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatumType::Boolean => "Boolean",
            DatumType::Integer => "Integer",
            DatumType::Float => "Float",
            DatumType::Text => "Text",
            DatumType::FileRef => "FileRef",
        }
    }

    pub fn is_scalar(self) -> bool {
        self != DatumType::FileRef
    }
}

impl fmt::Display for DatumType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatumType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Boolean" | "boolean" | "bool" => Ok(DatumType::Boolean),
            "Integer" | "integer" | "int" => Ok(DatumType::Integer),
            "Float" | "float" => Ok(DatumType::Float),
            "Text" | "text" => Ok(DatumType::Text),
            "FileRef" | "fileref" | "file" => Ok(DatumType::FileRef),
            other => Err(format!("unknown datum type `{other}`")),
        }
    }
}

/// A file value: the digest of the stored blob plus a suggested filename.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileRef {
    pub digest: String,
    pub size: u64,
    pub filename: String,
}

/// One typed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value")]
pub enum Datum {
    Boolean(bool),
    Integer(i64),
    Float(f64),
    Text(String),
    FileRef(FileRef),
}

impl Datum {
    pub fn datum_type(&self) -> DatumType {
        match self {
            Datum::Boolean(_) => DatumType::Boolean,
            Datum::Integer(_) => DatumType::Integer,
            Datum::Float(_) => DatumType::Float,
            Datum::Text(_) => DatumType::Text,
            Datum::FileRef(_) => DatumType::FileRef,
        }
    }

    /// Converts the value for an endpoint of type `target`, applying the
    /// Integer -> Float widening. Returns `None` for any other mismatch.
    pub fn convert_to(&self, target: DatumType) -> Option<Datum> {
        match (self, target) {
            (Datum::Integer(v), DatumType::Float) => Some(Datum::Float(*v as f64)),
            (d, t) if d.datum_type() == t => Some(d.clone()),
            _ => None,
        }
    }

    /// Reads a bare JSON scalar as a value of type `ty`.
    ///
    /// FileRef values cannot be expressed as scalars and are rejected.
    pub fn from_scalar_json(value: &Value, ty: DatumType) -> Option<Datum> {
        match ty {
            DatumType::Boolean => value.as_bool().map(Datum::Boolean),
            DatumType::Integer => value.as_i64().map(Datum::Integer),
            DatumType::Float => value.as_f64().map(Datum::Float),
            DatumType::Text => value.as_str().map(|s| Datum::Text(s.to_owned())),
            DatumType::FileRef => None,
        }
    }

    /// Infers a datum from a bare JSON scalar (integers stay integers).
    pub fn infer_from_json(value: &Value) -> Option<Datum> {
        match value {
            Value::Bool(b) => Some(Datum::Boolean(*b)),
            Value::Number(n) => n
                .as_i64()
                .map(Datum::Integer)
                .or_else(|| n.as_f64().map(Datum::Float)),
            Value::String(s) => Some(Datum::Text(s.clone())),
            _ => None,
        }
    }

    /// Bare JSON form of a scalar value; `None` for files.
    pub fn to_scalar_json(&self) -> Option<Value> {
        match self {
            Datum::Boolean(b) => Some(Value::Bool(*b)),
            Datum::Integer(i) => Some(Value::from(*i)),
            Datum::Float(f) => serde_json::Number::from_f64(*f).map(Value::Number),
            Datum::Text(s) => Some(Value::String(s.clone())),
            Datum::FileRef(_) => None,
        }
    }

    /// Literal text used when a scalar is substituted into a command line.
    pub fn render_text(&self) -> String {
        match self {
            Datum::Boolean(b) => b.to_string(),
            Datum::Integer(i) => i.to_string(),
            Datum::Float(f) => format!("{f:?}"),
            Datum::Text(s) => s.clone(),
            Datum::FileRef(f) => f.filename.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Datum::Integer(i) => Some(*i as f64),
            Datum::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn file_ref(&self) -> Option<&FileRef> {
        match self {
            Datum::FileRef(f) => Some(f),
            _ => None,
        }
    }
}

impl fmt::Display for Datum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Datum::FileRef(r) => write!(f, "file {} ({}, {} bytes)", r.filename, &r.digest[..r.digest.len().min(12)], r.size),
            Datum::Text(s) => write!(f, "{s:?}"),
            other => f.write_str(&other.render_text()),
        }
    }
}
