//! Deterministic offline stub backends. Each stub is a pure function of the
//! request content: it locates its inputs through the section markers that
//! the prompt templates emit, so identical requests yield identical
//! responses across runs and hosts.

use serde_json::{json, Map, Value};

use crate::deviation::{DeviationTable, Direction};
use crate::gcode::{extract_config_comments, parse_gcode, GcodeDocument};
use crate::label::Label;
use crate::prompts;
use crate::schema::ParameterKey;

use super::{BackendDescriptor, GatewayError, RoleTag, StructuredRequest};

pub(super) fn respond(
    backend: &BackendDescriptor,
    req: &StructuredRequest,
) -> Result<Value, GatewayError> {
    match req.role_tag {
        RoleTag::Extractor => stub_extract(&req.user_content),
        RoleTag::Reference => stub_reference(&req.user_content),
        RoleTag::Judge => stub_judge(&req.user_content),
        RoleTag::Baseline => Ok(json!({
            "label": backend.fixed_label.unwrap_or(Label::ND).as_str(),
        })),
    }
}

fn missing_section(name: &str) -> GatewayError {
    GatewayError::Transport(format!(
        "stub backend could not locate the {name} section in the request content"
    ))
}

/// Slicer config keys mapped onto schema keys. First alias present wins.
/// The third column declares the unit the raw config value carries, if any.
const CONFIG_ALIASES: [(&str, ParameterKey, Option<&str>); 32] = [
    ("temperature", ParameterKey::NozzleTemperature, None),
    ("nozzle_temperature", ParameterKey::NozzleTemperature, None),
    ("first_layer_temperature", ParameterKey::FirstLayerNozzleTemperature, None),
    ("nozzle_temperature_initial_layer", ParameterKey::FirstLayerNozzleTemperature, None),
    ("bed_temperature", ParameterKey::BedTemperature, None),
    ("first_layer_bed_temperature", ParameterKey::FirstLayerBedTemperature, None),
    ("bed_temperature_initial_layer", ParameterKey::FirstLayerBedTemperature, None),
    ("flow_rate", ParameterKey::FlowRate, None),
    ("extrusion_multiplier", ParameterKey::FlowRate, Some("factor")),
    ("print_flow_ratio", ParameterKey::FlowRate, Some("factor")),
    ("layer_height", ParameterKey::LayerHeight, None),
    ("first_layer_height", ParameterKey::FirstLayerHeight, None),
    ("initial_layer_print_height", ParameterKey::FirstLayerHeight, None),
    ("extrusion_width", ParameterKey::LineWidth, None),
    ("line_width", ParameterKey::LineWidth, None),
    ("first_layer_extrusion_width", ParameterKey::FirstLayerLineWidth, None),
    ("initial_layer_line_width", ParameterKey::FirstLayerLineWidth, None),
    ("filament_diameter", ParameterKey::FilamentDiameter, None),
    ("nozzle_diameter", ParameterKey::NozzleDiameter, None),
    ("retract_length", ParameterKey::RetractionDistance, None),
    ("retraction_length", ParameterKey::RetractionDistance, None),
    ("retract_speed", ParameterKey::RetractionSpeed, None),
    ("retraction_speed", ParameterKey::RetractionSpeed, None),
    ("travel_speed", ParameterKey::TravelSpeed, None),
    ("perimeter_speed", ParameterKey::PrintSpeed, None),
    ("print_speed", ParameterKey::PrintSpeed, None),
    ("outer_wall_speed", ParameterKey::PrintSpeed, None),
    ("first_layer_speed", ParameterKey::FirstLayerSpeed, None),
    ("initial_layer_speed", ParameterKey::FirstLayerSpeed, None),
    ("max_fan_speed", ParameterKey::FanSpeed, None),
    ("fan_max_speed", ParameterKey::FanSpeed, None),
    ("brim_width", ParameterKey::BrimWidth, None),
];

fn parse_config_number(raw: &str) -> Option<f64> {
    let cleaned = raw.trim().trim_end_matches('%').trim();
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Heuristic extraction from the program body, used when the slicer config
/// does not state a value. Values are reported with their native units; the
/// normalization stage converts them.
struct CommandEvidence {
    max_travel_feedrate: Option<f64>,
    max_fan_duty: Option<f64>,
    first_hotend_target: Option<f64>,
    last_hotend_target: Option<f64>,
    first_bed_target: Option<f64>,
    last_bed_target: Option<f64>,
}

fn scan_commands(doc: &GcodeDocument) -> CommandEvidence {
    let mut out = CommandEvidence {
        max_travel_feedrate: None,
        max_fan_duty: None,
        first_hotend_target: None,
        last_hotend_target: None,
        first_bed_target: None,
        last_bed_target: None,
    };
    let bump = |slot: &mut Option<f64>, v: f64| {
        if slot.is_none_or(|prev| v > prev) {
            *slot = Some(v);
        }
    };
    for line in &doc.lines {
        let Some(code) = line.code.as_deref() else { continue };
        match code {
            "G0" | "G1" => {
                if line.param('E').is_none() {
                    if let Some(f) = line.param('F') {
                        bump(&mut out.max_travel_feedrate, f);
                    }
                }
            }
            "M106" => {
                if let Some(s) = line.param('S') {
                    bump(&mut out.max_fan_duty, s);
                }
            }
            // Shutdown commands (S0) are not temperature evidence.
            "M104" | "M109" => {
                if let Some(s) = line.param('S').filter(|s| *s > 0.0) {
                    out.first_hotend_target.get_or_insert(s);
                    out.last_hotend_target = Some(s);
                }
            }
            "M140" | "M190" => {
                if let Some(s) = line.param('S').filter(|s| *s > 0.0) {
                    out.first_bed_target.get_or_insert(s);
                    out.last_bed_target = Some(s);
                }
            }
            _ => {}
        }
    }
    out
}

/// Deterministic extractor: maps slicer configuration comments through the
/// alias table, then fills gaps from movement/thermal commands.
fn stub_extract(user_content: &str) -> Result<Value, GatewayError> {
    let gcode = prompts::section(user_content, prompts::GCODE_BEGIN, prompts::GCODE_END)
        .ok_or_else(|| missing_section("gcode"))?;
    let doc = parse_gcode(gcode);
    let config = extract_config_comments(&doc);

    let mut fields = Map::new();
    let mut notes: Vec<String> = Vec::new();

    for (alias, key, declared_unit) in CONFIG_ALIASES {
        if fields.contains_key(key.as_str()) {
            continue;
        }
        let Some(raw) = config.get(alias) else { continue };
        let Some(value) = parse_config_number(raw) else {
            notes.push(format!("config {alias} has non-numeric value \"{raw}\""));
            continue;
        };
        let entry = match declared_unit {
            Some(unit) => json!({"value": value, "unit": unit}),
            None => json!(value),
        };
        fields.insert(key.as_str().to_string(), entry);
    }

    let evidence = scan_commands(&doc);
    if !fields.contains_key("travel_speed") {
        if let Some(f) = evidence.max_travel_feedrate {
            fields.insert("travel_speed".to_string(), json!({"value": f, "unit": "mm/min"}));
            notes.push("travel_speed inferred from the highest feedrate on non-extruding moves".to_string());
        }
    }
    if !fields.contains_key("fan_speed") {
        if let Some(duty) = evidence.max_fan_duty {
            fields.insert("fan_speed".to_string(), json!({"value": duty, "unit": "duty255"}));
            notes.push("fan_speed inferred from the highest M106 duty".to_string());
        }
    }
    if !fields.contains_key("nozzle_temperature") {
        if let Some(t) = evidence.last_hotend_target {
            fields.insert("nozzle_temperature".to_string(), json!(t));
            notes.push("nozzle_temperature inferred from hotend target commands".to_string());
        }
    }
    if !fields.contains_key("first_layer_nozzle_temperature") {
        if let Some(t) = evidence.first_hotend_target {
            fields.insert("first_layer_nozzle_temperature".to_string(), json!(t));
            notes.push("first_layer_nozzle_temperature inferred from the first hotend target".to_string());
        }
    }
    if !fields.contains_key("bed_temperature") {
        if let Some(t) = evidence.last_bed_target {
            fields.insert("bed_temperature".to_string(), json!(t));
            notes.push("bed_temperature inferred from bed target commands".to_string());
        }
    }
    if !fields.contains_key("first_layer_bed_temperature") {
        if let Some(t) = evidence.first_bed_target {
            fields.insert("first_layer_bed_temperature".to_string(), json!(t));
            notes.push("first_layer_bed_temperature inferred from the first bed target".to_string());
        }
    }

    // Null out anything still missing so the payload is explicit.
    for key in ParameterKey::ALL {
        fields.entry(key.as_str().to_string()).or_insert(Value::Null);
    }

    let cat = |aliases: &[&str]| -> Value {
        aliases
            .iter()
            .find_map(|a| config.get(*a))
            .map(|v| json!(v))
            .unwrap_or(Value::Null)
    };
    fields.insert("printer_model".to_string(), cat(&["printer_model", "printer_notes"]));
    fields.insert("material_type".to_string(), cat(&["filament_type", "material_type"]));
    fields.insert("bed_adhesion_type".to_string(), cat(&["brim_type", "bed_adhesion"]));

    if doc.diagnostics.passthrough_lines > 0 {
        notes.push(format!(
            "{} line(s) could not be tokenized as commands",
            doc.diagnostics.passthrough_lines
        ));
    }
    fields.insert("notes".to_string(), json!(notes));
    Ok(Value::Object(fields))
}

/// Deterministic reference builder: reads `- key: low..high` lines and
/// NOTE/WARNING/INTERACTION prefixes from the documents in the request.
fn stub_reference(user_content: &str) -> Result<Value, GatewayError> {
    let printer = prompts::header_value(user_content, "Printer:").unwrap_or("");
    let material = prompts::header_value(user_content, "Material:").unwrap_or("");
    let docs = prompts::section(user_content, prompts::DOCUMENTS_BEGIN, prompts::DOCUMENTS_END)
        .ok_or_else(|| missing_section("documents"))?;

    let mut fields = Map::new();
    let mut notes: Vec<String> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut interactions: Vec<String> = Vec::new();
    let mut any_range = false;

    for line in docs.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("NOTE:") {
            notes.push(rest.trim().to_string());
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("WARNING:") {
            warnings.push(rest.trim().to_string());
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("INTERACTION:") {
            interactions.push(rest.trim().to_string());
            continue;
        }
        let Some(entry) = trimmed.strip_prefix("- ") else { continue };
        let Some((name, value)) = entry.split_once(':') else { continue };
        let Some(key) = ParameterKey::parse(name.trim()) else { continue };
        // "low..high [unit]" — the trailing unit token is informational.
        let value = value.trim();
        let numeric_part = value.split_whitespace().next().unwrap_or(value);
        let Some((low, high)) = numeric_part.split_once("..") else { continue };
        let (Ok(low), Ok(high)) = (low.trim().parse::<f64>(), high.trim().parse::<f64>()) else {
            continue;
        };
        fields.insert(key.as_str().to_string(), json!([low, high]));
        any_range = true;
    }

    if !any_range {
        warnings.push("documentation contains no explicit parameter ranges".to_string());
    }
    for key in ParameterKey::ALL {
        fields.entry(key.as_str().to_string()).or_insert(Value::Null);
    }
    fields.insert("printer".to_string(), json!(printer));
    fields.insert("material".to_string(), json!(material));
    fields.insert("notes".to_string(), json!(notes));
    fields.insert("warnings".to_string(), json!(warnings));
    fields.insert("interactions".to_string(), json!(interactions));
    Ok(Value::Object(fields))
}

/// First-match-wins decision rules over the deviation table. Shared by the
/// stub judge and, in tests, usable as an independent labeling oracle for
/// synthetic programs constructed to satisfy exactly one rule.
pub fn stub_judge_rules(table: &DeviationTable) -> Label {
    rule_verdict(table).0
}

fn rule_verdict(table: &DeviationTable) -> (Label, Vec<ParameterKey>, String) {
    use ParameterKey::*;
    let dir = |k: ParameterKey| table.direction(k);
    let below = |k: ParameterKey| dir(k) == Some(Direction::Below);
    let above = |k: ParameterKey| dir(k) == Some(Direction::Above);
    let in_range = |k: ParameterKey| dir(k) == Some(Direction::InRange);
    let is_abs = table.material.trim().eq_ignore_ascii_case("ABS");

    if below(FlowRate) {
        return (Label::UE, vec![FlowRate], "extrusion flow is below the recommended range".into());
    }
    if above(LayerHeight) && in_range(FlowRate) {
        return (
            Label::UE,
            vec![LayerHeight, FlowRate],
            "layer height exceeds the range without compensating flow".into(),
        );
    }
    if above(FlowRate) {
        return (Label::OE, vec![FlowRate], "extrusion flow is above the recommended range".into());
    }
    if below(FirstLayerBedTemperature) {
        return (
            Label::WP,
            vec![FirstLayerBedTemperature],
            "first-layer bed temperature is below the recommended range".into(),
        );
    }
    if above(FanSpeed) && is_abs {
        return (
            Label::WP,
            vec![FanSpeed],
            "part-cooling fan is above the recommended range for ABS".into(),
        );
    }
    if below(BrimWidth) {
        return (
            Label::WP,
            vec![BrimWidth],
            "brim width is below the recommended range".into(),
        );
    }
    if above(NozzleTemperature) && below(RetractionDistance) {
        return (
            Label::ST,
            vec![NozzleTemperature, RetractionDistance],
            "hot nozzle combined with weak retraction".into(),
        );
    }
    if below(RetractionDistance) && below(TravelSpeed) {
        return (
            Label::ST,
            vec![RetractionDistance, TravelSpeed],
            "weak retraction combined with slow travel".into(),
        );
    }
    (Label::ND, Vec::new(), "all compared parameters are within recommended ranges".into())
}

/// Deterministic judge: applies the rule set to the deviation table in the
/// request and cites the first command line of the shortened program.
fn stub_judge(user_content: &str) -> Result<Value, GatewayError> {
    let table_json =
        prompts::section(user_content, prompts::DEVIATION_BEGIN, prompts::DEVIATION_END)
            .ok_or_else(|| missing_section("deviation table"))?;
    let table: DeviationTable = serde_json::from_str(table_json).map_err(|e| {
        GatewayError::Transport(format!("stub judge could not parse the deviation table: {e}"))
    })?;
    let gcode = prompts::section(user_content, prompts::GCODE_BEGIN, prompts::GCODE_END)
        .ok_or_else(|| missing_section("gcode"))?;

    let (label, used, because) = rule_verdict(&table);
    let out_of_range = table.rows.iter().filter(|r| r.direction != Direction::InRange).count();
    let confidence = match (label, out_of_range) {
        (Label::ND, 0) => 1.0,
        (Label::ND, _) => 0.75,
        _ => 0.9,
    };

    let support_summary = if used.is_empty() {
        because.clone()
    } else {
        let parts: Vec<String> = used
            .iter()
            .filter_map(|k| table.row(*k))
            .map(|r| {
                format!(
                    "{} = {} vs [{}, {}] ({})",
                    r.key.as_str(),
                    r.value,
                    r.lower,
                    r.upper,
                    r.direction.as_str()
                )
            })
            .collect();
        parts.join("; ")
    };

    let citation = gcode
        .lines()
        .enumerate()
        .find(|(_, line)| {
            let t = line.trim();
            !t.is_empty() && !t.starts_with(';')
        })
        .map(|(i, line)| json!({"line": i, "quote": line}));

    Ok(json!({
        "label": label.as_str(),
        "confidence": confidence,
        "support_summary": support_summary,
        "deviations_used": used.iter().map(|k| k.as_str()).collect::<Vec<_>>(),
        "rationale": format!("Rule-based assessment: {because}."),
        "evidence_citations": citation.map(|c| vec![c]).unwrap_or_default(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deviation::{build_deviation_table, DeviationTable};
    use crate::reference::ReferenceRanges;
    use crate::schema::{CriticalSet, ExtractedParameters, Measurement};

    fn table_with(values: &[(ParameterKey, f64, f64, f64)], material: &str) -> DeviationTable {
        let mut extracted = ExtractedParameters::empty("test");
        let mut reference = ReferenceRanges::empty("MK4S", material);
        for (key, v, lo, hi) in values {
            extracted.set(*key, Measurement::canonical(*v));
            reference.set(*key, *lo, *hi);
        }
        build_deviation_table(&extracted, &reference, &CriticalSet::default()).unwrap()
    }

    #[test]
    fn flow_below_is_ue() {
        let table = table_with(&[(ParameterKey::FlowRate, 80.0, 95.0, 105.0)], "PLA");
        assert_eq!(stub_judge_rules(&table), Label::UE);
    }

    #[test]
    fn all_in_range_is_nd() {
        let table = table_with(
            &[
                (ParameterKey::FlowRate, 100.0, 95.0, 105.0),
                (ParameterKey::NozzleTemperature, 215.0, 200.0, 230.0),
            ],
            "PLA",
        );
        assert_eq!(stub_judge_rules(&table), Label::ND);
    }

    #[test]
    fn hot_nozzle_and_weak_retraction_is_st() {
        let table = table_with(
            &[
                (ParameterKey::NozzleTemperature, 245.0, 200.0, 230.0),
                (ParameterKey::RetractionDistance, 0.2, 0.5, 1.2),
                (ParameterKey::FlowRate, 100.0, 95.0, 105.0),
            ],
            "PLA",
        );
        assert_eq!(stub_judge_rules(&table), Label::ST);
    }

    #[test]
    fn fan_above_matters_only_for_abs() {
        let rows = &[(ParameterKey::FanSpeed, 80.0, 0.0, 30.0)];
        assert_eq!(stub_judge_rules(&table_with(rows, "ABS")), Label::WP);
        assert_eq!(stub_judge_rules(&table_with(rows, "PLA")), Label::ND);
    }

    #[test]
    fn layer_height_above_with_flow_in_range_is_ue() {
        let table = table_with(
            &[
                (ParameterKey::LayerHeight, 0.5, 0.1, 0.3),
                (ParameterKey::FlowRate, 100.0, 95.0, 105.0),
            ],
            "PLA",
        );
        assert_eq!(stub_judge_rules(&table), Label::UE);
    }

    #[test]
    fn flow_above_is_oe_even_with_layer_height_above() {
        let table = table_with(
            &[
                (ParameterKey::LayerHeight, 0.5, 0.1, 0.3),
                (ParameterKey::FlowRate, 130.0, 95.0, 105.0),
            ],
            "PLA",
        );
        assert_eq!(stub_judge_rules(&table), Label::OE);
    }
}
