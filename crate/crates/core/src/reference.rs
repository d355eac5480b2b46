//! Manual-grounded recommended operating ranges per printer–material pair,
//! aligned field-for-field with the extraction schema, plus the per-pair
//! reference cache (a reference is built once per pair per run and reused).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::schema::{ParameterKey, SchemaViolation, SCHEMA_VERSION};

/// Closed interval `[lower, upper]` in the key's canonical unit.
/// Serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeInterval {
    pub lower: f64,
    pub upper: f64,
}

impl RangeInterval {
    pub fn new(lower: f64, upper: f64) -> Result<Self, String> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(format!("bounds must be finite, got [{lower}, {upper}]"));
        }
        if lower > upper {
            return Err(format!("inverted interval [{lower}, {upper}]"));
        }
        Ok(RangeInterval { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

impl Serialize for RangeInterval {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        (self.lower, self.upper).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RangeInterval {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (lower, upper) = <(f64, f64)>::deserialize(deserializer)?;
        RangeInterval::new(lower, upper).map_err(serde::de::Error::custom)
    }
}

/// Recommended operating envelope for one printer–material pair. Keys with
/// no manual coverage stay null — never a guessed interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRanges {
    pub schema_version: u32,
    pub printer: String,
    pub material: String,
    pub ranges: BTreeMap<ParameterKey, Option<RangeInterval>>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    pub interactions: Vec<String>,
    pub source_docs: Vec<String>,
}

impl ReferenceRanges {
    pub fn empty(printer: &str, material: &str) -> Self {
        ReferenceRanges {
            schema_version: SCHEMA_VERSION,
            printer: printer.to_string(),
            material: material.to_string(),
            ranges: ParameterKey::ALL.iter().map(|k| (*k, None)).collect(),
            notes: Vec::new(),
            warnings: Vec::new(),
            interactions: Vec::new(),
            source_docs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: ParameterKey, lower: f64, upper: f64) {
        self.ranges.insert(key, RangeInterval::new(lower, upper).ok());
    }

    pub fn range(&self, key: ParameterKey) -> Option<RangeInterval> {
        self.ranges.get(&key).and_then(|r| *r)
    }
}

/// Documentation for one printer–material pair: at least one
/// `(identifier, text)` document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocBundle {
    pub printer: String,
    pub material: String,
    pub documents: Vec<(String, String)>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReferenceError {
    #[error("printer and material identifiers must be non-empty")]
    EmptyIdentifier,
    #[error("a documentation bundle needs at least one document")]
    EmptyBundle,
    #[error("cache io at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cached reference at {path}: {detail}")]
    CorruptCache { path: PathBuf, detail: String },
}

impl DocBundle {
    pub fn new(
        printer: &str,
        material: &str,
        documents: Vec<(String, String)>,
    ) -> Result<Self, ReferenceError> {
        if documents.is_empty() {
            return Err(ReferenceError::EmptyBundle);
        }
        Ok(DocBundle {
            printer: printer.to_string(),
            material: material.to_string(),
            documents,
        })
    }
}

/// Map candidate JSON onto the reference schema. Intervals may be given as
/// `[lower, upper]` arrays or `{"lower": .., "upper": ..}` objects; nulls
/// are preserved; degenerate intervals (lower = upper) are accepted and
/// inverted intervals rejected. Unknown keys are routed to notes.
pub fn validate_reference(
    candidate: &serde_json::Value,
) -> Result<ReferenceRanges, Vec<SchemaViolation>> {
    let mut violations = Vec::new();
    let Some(obj) = candidate.as_object() else {
        return Err(vec![SchemaViolation {
            path: "$".to_string(),
            message: "expected a JSON object".to_string(),
        }]);
    };

    let mut out = ReferenceRanges::empty("", "");
    for (name, value) in obj {
        match name.as_str() {
            "printer" => {
                if let Some(s) = value.as_str() {
                    out.printer = s.to_string();
                }
                continue;
            }
            "material" => {
                if let Some(s) = value.as_str() {
                    out.material = s.to_string();
                }
                continue;
            }
            "schema_version" => continue,
            "notes" | "warnings" | "interactions" | "source_docs" => {
                let target = match name.as_str() {
                    "notes" => &mut out.notes,
                    "warnings" => &mut out.warnings,
                    "interactions" => &mut out.interactions,
                    _ => &mut out.source_docs,
                };
                match value {
                    serde_json::Value::Array(items) => {
                        for (i, item) in items.iter().enumerate() {
                            match item.as_str() {
                                Some(s) => target.push(s.to_string()),
                                None => violations.push(SchemaViolation {
                                    path: format!("{name}[{i}]"),
                                    message: "entries must be strings".to_string(),
                                }),
                            }
                        }
                    }
                    serde_json::Value::Null => {}
                    _ => violations.push(SchemaViolation {
                        path: name.clone(),
                        message: "expected an array of strings".to_string(),
                    }),
                }
                continue;
            }
            _ => {}
        }
        let Some(key) = ParameterKey::parse(name) else {
            out.notes.push(format!("{name}: {value}"));
            continue;
        };
        let bounds: Option<(f64, f64)> = match value {
            serde_json::Value::Null => None,
            serde_json::Value::Array(items) if items.len() == 2 => {
                match (items[0].as_f64(), items[1].as_f64()) {
                    (Some(a), Some(b)) => Some((a, b)),
                    _ => {
                        violations.push(SchemaViolation {
                            path: name.clone(),
                            message: "interval entries must be numbers".to_string(),
                        });
                        None
                    }
                }
            }
            serde_json::Value::Object(fields) => {
                match (
                    fields.get("lower").and_then(|v| v.as_f64()),
                    fields.get("upper").and_then(|v| v.as_f64()),
                ) {
                    (Some(a), Some(b)) => Some((a, b)),
                    _ => {
                        violations.push(SchemaViolation {
                            path: name.clone(),
                            message: "expected numeric lower/upper fields".to_string(),
                        });
                        None
                    }
                }
            }
            _ => {
                violations.push(SchemaViolation {
                    path: name.clone(),
                    message: "expected a [lower, upper] interval or null".to_string(),
                });
                None
            }
        };
        if let Some((lower, upper)) = bounds {
            match RangeInterval::new(lower, upper) {
                Ok(interval) => {
                    out.ranges.insert(key, Some(interval));
                }
                Err(msg) => violations.push(SchemaViolation { path: name.clone(), message: msg }),
            }
        }
    }

    if violations.is_empty() {
        Ok(out)
    } else {
        Err(violations)
    }
}

/// Canonical cache identifier for a printer–material pair:
/// case-insensitive, whitespace-normalized, filesystem-safe. Identical
/// pairs map to identical keys so a reference is built once and reused.
pub fn cache_key(printer: &str, material: &str) -> Result<String, ReferenceError> {
    fn normalize(s: &str) -> Option<String> {
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return None;
        }
        let mut out = String::with_capacity(trimmed.len());
        let mut last_dash = false;
        for c in trimmed.to_ascii_lowercase().chars() {
            let mapped = if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
                last_dash = false;
                c
            } else if last_dash {
                continue;
            } else {
                last_dash = true;
                '-'
            };
            out.push(mapped);
        }
        Some(out)
    }
    let p = normalize(printer).ok_or(ReferenceError::EmptyIdentifier)?;
    let m = normalize(material).ok_or(ReferenceError::EmptyIdentifier)?;
    Ok(format!("{p}__{m}"))
}

/// Outcome of a cache lookup that may have had to build the reference.
#[derive(Debug, thiserror::Error)]
pub enum CacheError<E> {
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error("reference build failed: {0}")]
    Build(E),
}

/// Disk- and memory-backed reference cache.
///
/// References are stored as JSON under `dir/<namespace>/<cache_key>.json`
/// with the source document identifiers embedded for audit. Builds are
/// serialized per cache key; reads are safe concurrently. `build_count`
/// tracks how many backend builds actually ran.
pub struct ReferenceCache {
    dir: PathBuf,
    mem: Mutex<HashMap<String, Arc<ReferenceRanges>>>,
    cells: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    builds: AtomicUsize,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReferenceCache {
            dir: dir.into(),
            mem: Mutex::new(HashMap::new()),
            cells: Mutex::new(HashMap::new()),
            builds: AtomicUsize::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Number of builder invocations since construction.
    pub fn build_count(&self) -> usize {
        self.builds.load(Ordering::SeqCst)
    }

    fn disk_path(&self, namespace: &str, key: &str) -> PathBuf {
        self.dir.join(namespace).join(format!("{key}.json"))
    }

    /// Fetch the reference for `(printer, material)` under `namespace`
    /// (typically the reference backend id), building it with `build` on a
    /// miss. At most one build runs per key; concurrent callers for the
    /// same key wait for the winner.
    pub fn get_or_build<E>(
        &self,
        namespace: &str,
        printer: &str,
        material: &str,
        build: impl FnOnce() -> Result<ReferenceRanges, E>,
    ) -> Result<Arc<ReferenceRanges>, CacheError<E>> {
        let key = format!("{namespace}/{}", cache_key(printer, material)?);

        let cell = {
            let mut cells = self.cells.lock().unwrap();
            cells.entry(key.clone()).or_default().clone()
        };
        let _guard = cell.lock().unwrap();

        if let Some(hit) = self.mem.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }

        let path = self.disk_path(namespace, &cache_key(printer, material)?);
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(|source| ReferenceError::CacheIo {
                path: path.clone(),
                source,
            })?;
            let parsed: ReferenceRanges =
                serde_json::from_slice(&bytes).map_err(|e| ReferenceError::CorruptCache {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
            let arc = Arc::new(parsed);
            self.mem.lock().unwrap().insert(key, arc.clone());
            return Ok(arc);
        }

        self.builds.fetch_add(1, Ordering::SeqCst);
        let built = build().map_err(CacheError::Build)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| ReferenceError::CacheIo {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        let json = serde_json::to_string_pretty(&built).expect("reference serializes");
        let tmp = tempfile::NamedTempFile::new_in(path.parent().unwrap()).map_err(|source| {
            ReferenceError::CacheIo { path: path.clone(), source }
        })?;
        std::io::Write::write_all(&mut tmp.as_file(), json.as_bytes()).map_err(|source| {
            ReferenceError::CacheIo { path: path.clone(), source }
        })?;
        tmp.persist(&path).map_err(|e| ReferenceError::CacheIo {
            path: path.clone(),
            source: e.error,
        })?;

        let arc = Arc::new(built);
        self.mem.lock().unwrap().insert(key, arc.clone());
        Ok(arc)
    }
}
