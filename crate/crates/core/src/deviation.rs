//! The deterministic comparison layer: align extracted values with
//! reference ranges and compute the per-parameter deviation table plus
//! categorical flags consumed by the judge.
//!
//! For a value `v` and range `[lower, upper]` the out-of-band magnitude is
//!
//! ```text
//! deviation = lower - v   if v < lower
//!             0           if lower <= v <= upper
//!             v - upper   if v > upper
//! ```
//!
//! with `normalized = deviation / (upper - lower)` defined only when
//! `upper > lower`. Interval membership is closed at both endpoints and
//! comparisons are exact — no floating-point tolerance — so the table is a
//! byte-stable audit artifact. The table stores measurements and margins,
//! never preassigned defect labels.

use serde::{Deserialize, Serialize};

use crate::reference::ReferenceRanges;
use crate::schema::{CategoricalKey, CriticalSet, ExtractedParameters, ParameterKey, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Below,
    InRange,
    Above,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Below => "below",
            Direction::InRange => "in_range",
            Direction::Above => "above",
        }
    }
}

/// One comparable parameter: value, range, out-of-band magnitude,
/// normalized magnitude (when the band has width), and direction tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub key: ParameterKey,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub deviation: f64,
    pub normalized: Option<f64>,
    pub band_width: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    ValueNull,
    RangeNull,
    BothNull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedKey {
    pub key: ParameterKey,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagName {
    MaterialMismatch,
    PrinterMismatch,
    MissingCriticalParameter,
    AdhesionModeAbsent,
}

/// Non-numeric evidence accompanying the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFlag {
    pub name: FlagName,
    pub detail: String,
}

/// Deterministic per-parameter comparison table. Rows and skipped entries
/// together cover every schema key exactly once, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationTable {
    pub schema_version: u32,
    pub printer: String,
    pub material: String,
    pub rows: Vec<DeviationRow>,
    pub skipped: Vec<SkippedKey>,
    pub flags: Vec<CategoricalFlag>,
}

impl DeviationTable {
    pub fn row(&self, key: ParameterKey) -> Option<&DeviationRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn direction(&self, key: ParameterKey) -> Option<Direction> {
        self.row(key).map(|r| r.direction)
    }

    pub fn has_flag(&self, name: FlagName) -> bool {
        self.flags.iter().any(|f| f.name == name)
    }

    /// Stable JSON with fixed field order, suitable for byte-level diffing.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("deviation table serializes")
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DeviationError {
    #[error("non-finite input: value={value}, lower={lower}, upper={upper}")]
    NonFinite { value: f64, lower: f64, upper: f64 },
    #[error("inverted range: lower {lower} > upper {upper}")]
    InvertedRange { lower: f64, upper: f64 },
    #[error("schema version mismatch: extracted v{extracted} vs reference v{reference}")]
    SchemaVersionMismatch { extracted: u32, reference: u32 },
}

/// Evaluate the piecewise deviation for one value against one range.
/// Returns `(deviation, normalized, direction)`.
pub fn compute_deviation(
    value: f64,
    lower: f64,
    upper: f64,
) -> Result<(f64, Option<f64>, Direction), DeviationError> {
    if !value.is_finite() || !lower.is_finite() || !upper.is_finite() {
        return Err(DeviationError::NonFinite { value, lower, upper });
    }
    if lower > upper {
        return Err(DeviationError::InvertedRange { lower, upper });
    }
    let (deviation, direction) = if value < lower {
        (lower - value, Direction::Below)
    } else if value > upper {
        (value - upper, Direction::Above)
    } else {
        (0.0, Direction::InRange)
    };
    let band_width = upper - lower;
    let normalized = (band_width > 0.0).then(|| deviation / band_width);
    Ok((deviation, normalized, direction))
}

/// Build the full deviation table for an extraction against a reference.
///
/// One row per key that has both a numeric value and a finite range; every
/// other key is listed in `skipped` with its reason. Flags are derived from
/// the same inputs. Ordering follows the schema key order, so identical
/// inputs serialize byte-identically.
pub fn build_deviation_table(
    extracted: &ExtractedParameters,
    reference: &ReferenceRanges,
    critical: &CriticalSet,
) -> Result<DeviationTable, DeviationError> {
    if extracted.schema_version != reference.schema_version {
        return Err(DeviationError::SchemaVersionMismatch {
            extracted: extracted.schema_version,
            reference: reference.schema_version,
        });
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for key in ParameterKey::ALL {
        match (extracted.numeric(key), reference.range(key)) {
            (Some(value), Some(range)) => {
                let (deviation, normalized, direction) =
                    compute_deviation(value, range.lower, range.upper)?;
                rows.push(DeviationRow {
                    key,
                    value,
                    lower: range.lower,
                    upper: range.upper,
                    deviation,
                    normalized,
                    band_width: range.width(),
                    direction,
                });
            }
            (None, Some(_)) => skipped.push(SkippedKey { key, reason: SkipReason::ValueNull }),
            (Some(_), None) => skipped.push(SkippedKey { key, reason: SkipReason::RangeNull }),
            (None, None) => skipped.push(SkippedKey { key, reason: SkipReason::BothNull }),
        }
    }
    let flags = derive_flags(extracted, reference, &reference.printer, &reference.material, critical);
    Ok(DeviationTable {
        schema_version: SCHEMA_VERSION,
        printer: reference.printer.clone(),
        material: reference.material.clone(),
        rows,
        skipped,
        flags,
    })
}

fn identity_matches(extracted: &str, requested: &str) -> bool {
    let a = extracted.trim().to_ascii_lowercase();
    let b = requested.trim().to_ascii_lowercase();
    a == b || a.contains(&b) || b.contains(&a)
}

/// Derive the categorical flags: identifier mismatches, missing critical
/// parameters, and absent bed-adhesion mode. Identifier comparison is
/// case-insensitive and tolerates one identifier containing the other
/// (e.g. "Prusa MK4S" vs "MK4S").
pub fn derive_flags(
    extracted: &ExtractedParameters,
    _reference: &ReferenceRanges,
    requested_printer: &str,
    requested_material: &str,
    critical: &CriticalSet,
) -> Vec<CategoricalFlag> {
    let mut flags = Vec::new();
    if let Some(material) = extracted.categorical_value(CategoricalKey::MaterialType) {
        if !identity_matches(material, requested_material) {
            flags.push(CategoricalFlag {
                name: FlagName::MaterialMismatch,
                detail: format!("extracted \"{material}\", requested \"{requested_material}\""),
            });
        }
    }
    if let Some(printer) = extracted.categorical_value(CategoricalKey::PrinterModel) {
        if !identity_matches(printer, requested_printer) {
            flags.push(CategoricalFlag {
                name: FlagName::PrinterMismatch,
                detail: format!("extracted \"{printer}\", requested \"{requested_printer}\""),
            });
        }
    }
    let missing: Vec<&str> = ParameterKey::ALL
        .iter()
        .filter(|k| critical.contains(**k) && extracted.numeric(**k).is_none())
        .map(|k| k.as_str())
        .collect();
    if !missing.is_empty() {
        flags.push(CategoricalFlag {
            name: FlagName::MissingCriticalParameter,
            detail: missing.join(", "),
        });
    }
    if extracted.categorical_value(CategoricalKey::BedAdhesionType).is_none() {
        flags.push(CategoricalFlag {
            name: FlagName::AdhesionModeAbsent,
            detail: "bed_adhesion_type is null".to_string(),
        });
    }
    flags
}
