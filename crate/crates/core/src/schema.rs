//! The fixed process-parameter schema: 18 numeric keys plus three
//! categorical keys, with null semantics (absent information is null, never
//! zero), unit normalization into canonical units, and extraction scoring
//! (tolerance accuracy and MAPE).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Version of the closed key set. Bumped only when keys change.
pub const SCHEMA_VERSION: u32 = 1;

/// The closed set of numeric process parameters, in canonical report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterKey {
    NozzleTemperature,
    FirstLayerNozzleTemperature,
    BedTemperature,
    FirstLayerBedTemperature,
    FlowRate,
    LayerHeight,
    FirstLayerHeight,
    LineWidth,
    FirstLayerLineWidth,
    FilamentDiameter,
    NozzleDiameter,
    RetractionDistance,
    RetractionSpeed,
    TravelSpeed,
    PrintSpeed,
    FirstLayerSpeed,
    FanSpeed,
    BrimWidth,
}

/// Physical dimension of a key; determines its canonical unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Celsius,
    Millimeters,
    MillimetersPerSecond,
    Percent,
}

impl Dimension {
    pub fn canonical_unit(&self) -> &'static str {
        match self {
            Dimension::Celsius => "C",
            Dimension::Millimeters => "mm",
            Dimension::MillimetersPerSecond => "mm/s",
            Dimension::Percent => "percent",
        }
    }
}

impl ParameterKey {
    pub const ALL: [ParameterKey; 18] = [
        ParameterKey::NozzleTemperature,
        ParameterKey::FirstLayerNozzleTemperature,
        ParameterKey::BedTemperature,
        ParameterKey::FirstLayerBedTemperature,
        ParameterKey::FlowRate,
        ParameterKey::LayerHeight,
        ParameterKey::FirstLayerHeight,
        ParameterKey::LineWidth,
        ParameterKey::FirstLayerLineWidth,
        ParameterKey::FilamentDiameter,
        ParameterKey::NozzleDiameter,
        ParameterKey::RetractionDistance,
        ParameterKey::RetractionSpeed,
        ParameterKey::TravelSpeed,
        ParameterKey::PrintSpeed,
        ParameterKey::FirstLayerSpeed,
        ParameterKey::FanSpeed,
        ParameterKey::BrimWidth,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParameterKey::NozzleTemperature => "nozzle_temperature",
            ParameterKey::FirstLayerNozzleTemperature => "first_layer_nozzle_temperature",
            ParameterKey::BedTemperature => "bed_temperature",
            ParameterKey::FirstLayerBedTemperature => "first_layer_bed_temperature",
            ParameterKey::FlowRate => "flow_rate",
            ParameterKey::LayerHeight => "layer_height",
            ParameterKey::FirstLayerHeight => "first_layer_height",
            ParameterKey::LineWidth => "line_width",
            ParameterKey::FirstLayerLineWidth => "first_layer_line_width",
            ParameterKey::FilamentDiameter => "filament_diameter",
            ParameterKey::NozzleDiameter => "nozzle_diameter",
            ParameterKey::RetractionDistance => "retraction_distance",
            ParameterKey::RetractionSpeed => "retraction_speed",
            ParameterKey::TravelSpeed => "travel_speed",
            ParameterKey::PrintSpeed => "print_speed",
            ParameterKey::FirstLayerSpeed => "first_layer_speed",
            ParameterKey::FanSpeed => "fan_speed",
            ParameterKey::BrimWidth => "brim_width",
        }
    }

    pub fn parse(s: &str) -> Option<ParameterKey> {
        ParameterKey::ALL.iter().find(|k| k.as_str() == s).copied()
    }

    pub fn dimension(&self) -> Dimension {
        use ParameterKey::*;
        match self {
            NozzleTemperature | FirstLayerNozzleTemperature | BedTemperature
            | FirstLayerBedTemperature => Dimension::Celsius,
            FlowRate | FanSpeed => Dimension::Percent,
            RetractionSpeed | TravelSpeed | PrintSpeed | FirstLayerSpeed => {
                Dimension::MillimetersPerSecond
            }
            _ => Dimension::Millimeters,
        }
    }
}

impl fmt::Display for ParameterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Categorical (non-numeric) keys carried alongside the numeric schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoricalKey {
    PrinterModel,
    MaterialType,
    BedAdhesionType,
}

impl CategoricalKey {
    pub const ALL: [CategoricalKey; 3] = [
        CategoricalKey::PrinterModel,
        CategoricalKey::MaterialType,
        CategoricalKey::BedAdhesionType,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CategoricalKey::PrinterModel => "printer_model",
            CategoricalKey::MaterialType => "material_type",
            CategoricalKey::BedAdhesionType => "bed_adhesion_type",
        }
    }

    pub fn parse(s: &str) -> Option<CategoricalKey> {
        CategoricalKey::ALL.iter().find(|k| k.as_str() == s).copied()
    }
}

/// Unit labels understood anywhere in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitLabel {
    Celsius,
    Millimeters,
    Microns,
    MillimetersPerSecond,
    MillimetersPerMinute,
    Percent,
    Factor,
    Duty255,
}

impl UnitLabel {
    /// Parse a free-form unit string; `None` means the label is outside the
    /// known vocabulary.
    pub fn parse(s: &str) -> Option<UnitLabel> {
        match s.trim().to_ascii_lowercase().as_str() {
            "c" | "°c" | "celsius" | "degc" | "deg_c" => Some(UnitLabel::Celsius),
            "mm" | "millimeter" | "millimeters" => Some(UnitLabel::Millimeters),
            "um" | "µm" | "micron" | "microns" => Some(UnitLabel::Microns),
            "mm/s" | "mms" | "mm_per_s" => Some(UnitLabel::MillimetersPerSecond),
            "mm/min" | "mm/minute" | "mmpm" => Some(UnitLabel::MillimetersPerMinute),
            "%" | "percent" | "pct" => Some(UnitLabel::Percent),
            "factor" | "ratio" | "multiplier" => Some(UnitLabel::Factor),
            "duty" | "duty255" | "pwm" => Some(UnitLabel::Duty255),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            UnitLabel::Celsius => "C",
            UnitLabel::Millimeters => "mm",
            UnitLabel::Microns => "um",
            UnitLabel::MillimetersPerSecond => "mm/s",
            UnitLabel::MillimetersPerMinute => "mm/min",
            UnitLabel::Percent => "percent",
            UnitLabel::Factor => "factor",
            UnitLabel::Duty255 => "duty255",
        }
    }

    /// Convert a value carrying this label into the canonical unit of the
    /// given dimension. `None` when the label does not apply.
    pub fn convert(&self, dim: Dimension, value: f64) -> Option<f64> {
        match (dim, self) {
            (Dimension::Celsius, UnitLabel::Celsius) => Some(value),
            (Dimension::Millimeters, UnitLabel::Millimeters) => Some(value),
            (Dimension::Millimeters, UnitLabel::Microns) => Some(value / 1000.0),
            (Dimension::MillimetersPerSecond, UnitLabel::MillimetersPerSecond) => Some(value),
            (Dimension::MillimetersPerSecond, UnitLabel::MillimetersPerMinute) => {
                Some(value / 60.0)
            }
            (Dimension::Percent, UnitLabel::Percent) => Some(value),
            (Dimension::Percent, UnitLabel::Factor) => Some(value * 100.0),
            (Dimension::Percent, UnitLabel::Duty255) => Some(value * 100.0 / 255.0),
            _ => None,
        }
    }

    fn is_canonical_for(&self, dim: Dimension) -> bool {
        matches!(
            (dim, self),
            (Dimension::Celsius, UnitLabel::Celsius)
                | (Dimension::Millimeters, UnitLabel::Millimeters)
                | (Dimension::MillimetersPerSecond, UnitLabel::MillimetersPerSecond)
                | (Dimension::Percent, UnitLabel::Percent)
        )
    }
}

/// A numeric value with an optional declared unit. Serializes as a bare
/// number once the unit is canonical (i.e. after normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub value: f64,
    pub unit: Option<String>,
}

impl Measurement {
    pub fn canonical(value: f64) -> Self {
        Measurement { value, unit: None }
    }

    pub fn with_unit(value: f64, unit: &str) -> Self {
        Measurement { value, unit: Some(unit.to_string()) }
    }
}

impl Serialize for Measurement {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match &self.unit {
            None => serializer.serialize_f64(self.value),
            Some(unit) => {
                use serde::ser::SerializeMap;
                let mut map = serializer.serialize_map(Some(2))?;
                map.serialize_entry("value", &self.value)?;
                map.serialize_entry("unit", unit)?;
                map.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Measurement {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Annotated { value: f64, unit: Option<String> },
        }
        Ok(match Repr::deserialize(deserializer)? {
            Repr::Number(v) => Measurement { value: v, unit: None },
            Repr::Annotated { value, unit } => Measurement { value, unit },
        })
    }
}

/// One applied unit conversion, recorded for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitConversion {
    pub key: ParameterKey,
    pub from_unit: String,
    pub from_value: f64,
    pub to_value: f64,
}

/// Extractor output mapped onto the closed schema. All 18 numeric keys and
/// all 3 categorical keys are always present; absent information is null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedParameters {
    pub schema_version: u32,
    pub values: BTreeMap<ParameterKey, Option<Measurement>>,
    pub categorical: BTreeMap<CategoricalKey, Option<String>>,
    pub notes: Vec<String>,
    pub source: String,
    pub unit_audit: Vec<UnitConversion>,
}

impl ExtractedParameters {
    /// All-null record attributed to `source`.
    pub fn empty(source: &str) -> Self {
        ExtractedParameters {
            schema_version: SCHEMA_VERSION,
            values: ParameterKey::ALL.iter().map(|k| (*k, None)).collect(),
            categorical: CategoricalKey::ALL.iter().map(|k| (*k, None)).collect(),
            notes: Vec::new(),
            source: source.to_string(),
            unit_audit: Vec::new(),
        }
    }

    pub fn set(&mut self, key: ParameterKey, m: Measurement) {
        self.values.insert(key, Some(m));
    }

    pub fn set_categorical(&mut self, key: CategoricalKey, value: &str) {
        self.categorical.insert(key, Some(value.to_string()));
    }

    /// Numeric value for a key, regardless of any declared unit.
    pub fn numeric(&self, key: ParameterKey) -> Option<f64> {
        self.values.get(&key).and_then(|m| m.as_ref()).map(|m| m.value)
    }

    pub fn categorical_value(&self, key: CategoricalKey) -> Option<&str> {
        self.categorical.get(&key).and_then(|v| v.as_deref())
    }
}

/// A violation found while mapping candidate JSON onto the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaViolation {
    /// JSON path of the offending value.
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn parse_value_string(s: &str) -> Option<(f64, Option<String>)> {
    let s = s.trim();
    if let Some(stripped) = s.strip_suffix('%') {
        let v: f64 = stripped.trim().parse().ok()?;
        return Some((v, Some("%".to_string())));
    }
    if let Ok(v) = s.parse::<f64>() {
        return Some((v, None));
    }
    let (num, unit) = s.split_once(char::is_whitespace)?;
    let v: f64 = num.trim().parse().ok()?;
    let unit = unit.trim();
    if unit.is_empty() {
        return Some((v, None));
    }
    Some((v, Some(unit.to_string())))
}

/// Map candidate JSON onto the closed schema.
///
/// Known numeric keys accept a number, a numeric string (optionally with a
/// unit suffix), an annotated `{"value": .., "unit": ..}` object, or null.
/// Unknown keys are routed to `notes`. On failure every violation carries
/// the offending path.
pub fn validate_extraction(
    candidate: &serde_json::Value,
) -> Result<ExtractedParameters, Vec<SchemaViolation>> {
    let mut violations = Vec::new();
    let Some(obj) = candidate.as_object() else {
        return Err(vec![SchemaViolation {
            path: "$".to_string(),
            message: "expected a JSON object".to_string(),
        }]);
    };

    let mut out = ExtractedParameters::empty("");
    for (name, value) in obj {
        if name == "notes" {
            match value {
                serde_json::Value::Array(items) => {
                    for (i, item) in items.iter().enumerate() {
                        match item.as_str() {
                            Some(s) => out.notes.push(s.to_string()),
                            None => violations.push(SchemaViolation {
                                path: format!("notes[{i}]"),
                                message: "note entries must be strings".to_string(),
                            }),
                        }
                    }
                }
                serde_json::Value::Null => {}
                _ => violations.push(SchemaViolation {
                    path: "notes".to_string(),
                    message: "notes must be an array of strings".to_string(),
                }),
            }
            continue;
        }
        if name == "schema_version" {
            if let Some(v) = value.as_u64() {
                if v != u64::from(SCHEMA_VERSION) {
                    violations.push(SchemaViolation {
                        path: "schema_version".to_string(),
                        message: format!("expected version {SCHEMA_VERSION}, got {v}"),
                    });
                }
            }
            continue;
        }
        if let Some(ck) = CategoricalKey::parse(name) {
            match value {
                serde_json::Value::Null => {}
                serde_json::Value::String(s) => out.set_categorical(ck, s),
                _ => violations.push(SchemaViolation {
                    path: name.clone(),
                    message: "expected a string or null".to_string(),
                }),
            }
            continue;
        }
        let Some(key) = ParameterKey::parse(name) else {
            out.notes.push(format!("{name}: {value}"));
            continue;
        };
        let measurement = match value {
            serde_json::Value::Null => None,
            serde_json::Value::Number(n) => match n.as_f64() {
                Some(v) if v.is_finite() => Some(Measurement::canonical(v)),
                _ => {
                    violations.push(SchemaViolation {
                        path: name.clone(),
                        message: "value must be a finite number".to_string(),
                    });
                    None
                }
            },
            serde_json::Value::String(s) => match parse_value_string(s) {
                Some((v, unit)) if v.is_finite() => Some(Measurement { value: v, unit }),
                _ => {
                    violations.push(SchemaViolation {
                        path: name.clone(),
                        message: format!("cannot interpret \"{s}\" as a numeric value"),
                    });
                    None
                }
            },
            serde_json::Value::Object(fields) => {
                let v = fields.get("value").and_then(|v| v.as_f64());
                let unit = fields.get("unit").and_then(|u| u.as_str()).map(str::to_string);
                match v {
                    Some(v) if v.is_finite() => Some(Measurement { value: v, unit }),
                    _ => {
                        violations.push(SchemaViolation {
                            path: format!("{name}.value"),
                            message: "expected a finite number".to_string(),
                        });
                        None
                    }
                }
            }
            _ => {
                violations.push(SchemaViolation {
                    path: name.clone(),
                    message: "expected a number, string, object, or null".to_string(),
                });
                None
            }
        };
        if let Some(m) = measurement {
            if let Some(unit) = m.unit.as_deref() {
                if UnitLabel::parse(unit).is_none() {
                    violations.push(SchemaViolation {
                        path: format!("{name}.unit"),
                        message: format!("unknown unit \"{unit}\""),
                    });
                    continue;
                }
            }
            out.set(key, m);
        }
    }

    if violations.is_empty() {
        Ok(out)
    } else {
        Err(violations)
    }
}

/// Convert every declared unit into the key's canonical unit.
///
/// Feedrates in mm/min are divided by 60, fan duty 0–255 is scaled to
/// percent, flow factors are scaled to percent. Every applied conversion is
/// appended to `unit_audit`. A value whose declared unit does not apply to
/// its key is nulled and the drop is recorded in `notes`. Idempotent.
pub fn normalize_units(raw: &ExtractedParameters) -> ExtractedParameters {
    let mut out = raw.clone();
    for key in ParameterKey::ALL {
        let Some(Some(m)) = out.values.get(&key).cloned() else { continue };
        let Some(unit_str) = m.unit.clone() else { continue };
        let dim = key.dimension();
        let converted = UnitLabel::parse(&unit_str).and_then(|label| {
            label.convert(dim, m.value).map(|v| (label, v))
        });
        match converted {
            Some((label, v)) => {
                if !label.is_canonical_for(dim) {
                    out.unit_audit.push(UnitConversion {
                        key,
                        from_unit: unit_str,
                        from_value: m.value,
                        to_value: v,
                    });
                }
                out.values.insert(key, Some(Measurement::canonical(v)));
            }
            None => {
                out.notes.push(format!(
                    "{}: cannot interpret unit \"{}\"; value {} dropped",
                    key.as_str(),
                    unit_str,
                    m.value
                ));
                out.values.insert(key, None);
            }
        }
    }
    out
}

/// Per-key tolerance: a relative fraction and an absolute floor in the
/// key's canonical unit. A cell is within tolerance when
/// `|pred - truth| <= max(relative * |truth|, absolute)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub relative: f64,
    pub absolute: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    pub per_key: BTreeMap<ParameterKey, Tolerance>,
}

impl Default for ToleranceSpec {
    /// Relative 2% everywhere, with absolute floors of 0.5 °C, 0.01 mm,
    /// 1 mm/s, and 1 percentage point.
    fn default() -> Self {
        let per_key = ParameterKey::ALL
            .iter()
            .map(|k| {
                let absolute = match k.dimension() {
                    Dimension::Celsius => 0.5,
                    Dimension::Millimeters => 0.01,
                    Dimension::MillimetersPerSecond => 1.0,
                    Dimension::Percent => 1.0,
                };
                (*k, Tolerance { relative: 0.02, absolute })
            })
            .collect();
        ToleranceSpec { per_key }
    }
}

impl ToleranceSpec {
    pub fn for_key(&self, key: ParameterKey) -> Tolerance {
        self.per_key
            .get(&key)
            .copied()
            .unwrap_or(Tolerance { relative: 0.02, absolute: 0.0 })
    }

    pub fn validate(&self) -> Result<(), SchemaViolation> {
        for (key, tol) in &self.per_key {
            if tol.relative < 0.0 || tol.absolute < 0.0 {
                return Err(SchemaViolation {
                    path: key.as_str().to_string(),
                    message: "tolerances must be non-negative".to_string(),
                });
            }
            if tol.relative == 0.0 && tol.absolute == 0.0 {
                return Err(SchemaViolation {
                    path: key.as_str().to_string(),
                    message: "at least one of relative/absolute must be positive".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// The subset of keys whose extraction errors matter most downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalSet {
    pub keys: BTreeSet<ParameterKey>,
}

impl Default for CriticalSet {
    /// Extrusion, thermal, geometric, retraction, cooling, and adhesion
    /// fields.
    fn default() -> Self {
        use ParameterKey::*;
        CriticalSet {
            keys: [
                FlowRate,
                NozzleTemperature,
                FirstLayerNozzleTemperature,
                BedTemperature,
                FirstLayerBedTemperature,
                LayerHeight,
                FirstLayerHeight,
                LineWidth,
                RetractionDistance,
                RetractionSpeed,
                FanSpeed,
                BrimWidth,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl CriticalSet {
    pub fn contains(&self, key: ParameterKey) -> bool {
        self.keys.contains(&key)
    }

    pub fn validate(&self) -> Result<(), SchemaViolation> {
        if self.keys.is_empty() {
            return Err(SchemaViolation {
                path: "critical".to_string(),
                message: "critical set must not be empty".to_string(),
            });
        }
        Ok(())
    }
}

/// Outcome for one scored cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub key: ParameterKey,
    pub truth: f64,
    pub pred: Option<f64>,
    pub within_tolerance: bool,
    /// Absolute percentage error; `None` when truth is zero (excluded from
    /// MAPE). A null prediction contributes the 100% cap.
    pub mape_contribution: Option<f64>,
}

/// Tolerance accuracy and MAPE over one prediction/truth pair of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionScore {
    pub overall_accuracy: f64,
    pub critical_accuracy: Option<f64>,
    pub overall_mape: Option<f64>,
    pub critical_mape: Option<f64>,
    pub cells: Vec<CellScore>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("schema version mismatch: pred v{pred} vs truth v{truth}")]
    VersionMismatch { pred: u32, truth: u32 },
    #[error("truth record has no numeric values to score")]
    NoScoredCells,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Accuracy/MAPE of cells, usable for pooling across samples.
pub fn aggregate_cells(cells: &[CellScore], critical: &CriticalSet) -> ExtractionScore {
    let accuracy = |subset: &[&CellScore]| -> Option<f64> {
        (!subset.is_empty()).then(|| {
            subset.iter().filter(|c| c.within_tolerance).count() as f64 / subset.len() as f64
        })
    };
    let all: Vec<&CellScore> = cells.iter().collect();
    let crit: Vec<&CellScore> = cells.iter().filter(|c| critical.contains(c.key)).collect();
    ExtractionScore {
        overall_accuracy: accuracy(&all).unwrap_or(f64::NAN),
        critical_accuracy: accuracy(&crit),
        overall_mape: mean(all.iter().filter_map(|c| c.mape_contribution)),
        critical_mape: mean(crit.iter().filter_map(|c| c.mape_contribution)),
        cells: cells.to_vec(),
    }
}

/// Score an extraction against ground truth.
///
/// Scored cells are the keys where truth is non-null. Tolerance accuracy is
/// the fraction of scored cells with `|pred - truth| <= max(rel*|truth|,
/// abs)`; MAPE is the mean of `100*|pred - truth|/|truth|` over scored cells
/// with nonzero truth. A null prediction for a non-null truth is incorrect
/// and contributes the 100% cap to MAPE.
pub fn score_extraction(
    pred: &ExtractedParameters,
    truth: &ExtractedParameters,
    tol: &ToleranceSpec,
    critical: &CriticalSet,
) -> Result<ExtractionScore, ScoreError> {
    if pred.schema_version != truth.schema_version {
        return Err(ScoreError::VersionMismatch {
            pred: pred.schema_version,
            truth: truth.schema_version,
        });
    }
    let mut cells = Vec::new();
    for key in ParameterKey::ALL {
        let Some(t) = truth.numeric(key) else { continue };
        let p = pred.numeric(key);
        let tolerance = tol.for_key(key);
        let threshold = (tolerance.relative * t.abs()).max(tolerance.absolute);
        let within = p.is_some_and(|pv| (pv - t).abs() <= threshold);
        let mape = if t == 0.0 {
            None
        } else {
            Some(match p {
                None => 100.0,
                Some(pv) => 100.0 * (pv - t).abs() / t.abs(),
            })
        };
        cells.push(CellScore {
            key,
            truth: t,
            pred: p,
            within_tolerance: within,
            mape_contribution: mape,
        });
    }
    if cells.is_empty() {
        return Err(ScoreError::NoScoredCells);
    }
    Ok(aggregate_cells(&cells, critical))
}
