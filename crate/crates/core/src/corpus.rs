//! Synthetic test corpus: 2 printers × 2 materials × 5 classes of G-code
//! programs, plus matching ground-truth parameter files, documentation
//! bundles, a dataset manifest, and a ready-to-run all-stub run config.
//!
//! Each program's parameters are constructed so that exactly one decision
//! rule of the offline judge fires (or none, for ND), making the rule set a
//! labeling oracle over this corpus. All values are chosen so that config
//! rendering, extraction, and unit normalization round-trip exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::eval::ManifestEntry;
use crate::label::Label;
use crate::schema::{CategoricalKey, ExtractedParameters, Measurement, ParameterKey, SCHEMA_VERSION};
use crate::store::{DocsEntry, RunConfig};

pub const PRINTERS: [&str; 2] = ["MK4S", "BMP1"];
pub const MATERIALS: [&str; 2] = ["PLA", "ABS"];

/// Operating window and nominal settings for one printer–material pair.
#[derive(Debug, Clone)]
pub struct PairProfile {
    pub printer: String,
    pub material: String,
    pub ranges: BTreeMap<ParameterKey, Option<(f64, f64)>>,
    pub nominal: BTreeMap<ParameterKey, Option<f64>>,
}

/// Parameters of one synthetic sample, in canonical units.
#[derive(Debug, Clone)]
pub struct SampleSpec {
    pub printer: String,
    pub material: String,
    pub label: Label,
    pub values: BTreeMap<ParameterKey, Option<f64>>,
    pub adhesion: String,
}

impl SampleSpec {
    pub fn sample_id(&self) -> String {
        format!("{}-{}-{}", self.printer, self.material, self.label).to_lowercase()
    }

    pub fn value(&self, key: ParameterKey) -> Option<f64> {
        self.values.get(&key).copied().flatten()
    }
}

/// The operating profile for a supported pair; `None` for unknown pairs.
pub fn pair_profile(printer: &str, material: &str) -> Option<PairProfile> {
    use ParameterKey::*;
    let printer = printer.to_ascii_uppercase();
    let material = material.to_ascii_uppercase();
    let mk4s = printer == "MK4S";
    let bmp1 = printer == "BMP1";
    let pla = material == "PLA";
    let abs = material == "ABS";
    if !(mk4s || bmp1) || !(pla || abs) {
        return None;
    }

    let mut ranges: BTreeMap<ParameterKey, Option<(f64, f64)>> = BTreeMap::new();
    let mut nominal: BTreeMap<ParameterKey, Option<f64>> = BTreeMap::new();
    let mut set = |key: ParameterKey, range: Option<(f64, f64)>, value: Option<f64>| {
        ranges.insert(key, range);
        nominal.insert(key, value);
    };

    match (mk4s, pla) {
        (true, true) => {
            set(NozzleTemperature, Some((200.0, 230.0)), Some(215.0));
            set(FirstLayerNozzleTemperature, Some((210.0, 235.0)), Some(220.0));
            set(BedTemperature, Some((55.0, 65.0)), Some(60.0));
            set(FirstLayerBedTemperature, Some((60.0, 70.0)), Some(65.0));
            set(FlowRate, Some((95.0, 105.0)), Some(100.0));
            set(LayerHeight, Some((0.10, 0.30)), Some(0.2));
            set(FirstLayerHeight, Some((0.15, 0.30)), Some(0.2));
            set(LineWidth, Some((0.40, 0.50)), Some(0.45));
            set(FirstLayerLineWidth, Some((0.40, 0.55)), Some(0.5));
            set(FilamentDiameter, Some((1.73, 1.77)), Some(1.75));
            set(NozzleDiameter, Some((0.40, 0.40)), Some(0.4));
            set(RetractionDistance, Some((0.5, 1.2)), Some(0.8));
            set(RetractionSpeed, Some((25.0, 45.0)), Some(35.0));
            set(TravelSpeed, Some((100.0, 250.0)), Some(180.0));
            set(PrintSpeed, Some((40.0, 200.0)), Some(60.0));
            set(FirstLayerSpeed, Some((15.0, 30.0)), Some(20.0));
            set(FanSpeed, Some((50.0, 100.0)), Some(80.0));
            set(BrimWidth, None, Some(0.0));
        }
        (true, false) => {
            set(NozzleTemperature, Some((230.0, 255.0)), Some(240.0));
            set(FirstLayerNozzleTemperature, Some((235.0, 260.0)), Some(245.0));
            set(BedTemperature, Some((90.0, 110.0)), Some(100.0));
            set(FirstLayerBedTemperature, Some((95.0, 110.0)), Some(105.0));
            set(FlowRate, Some((95.0, 105.0)), Some(100.0));
            set(LayerHeight, Some((0.10, 0.30)), Some(0.2));
            set(FirstLayerHeight, Some((0.15, 0.30)), Some(0.25));
            set(LineWidth, Some((0.40, 0.50)), Some(0.45));
            set(FirstLayerLineWidth, Some((0.40, 0.55)), Some(0.5));
            set(FilamentDiameter, Some((1.73, 1.77)), Some(1.75));
            set(NozzleDiameter, Some((0.40, 0.40)), Some(0.4));
            set(RetractionDistance, Some((0.5, 1.2)), Some(0.8));
            set(RetractionSpeed, Some((25.0, 45.0)), Some(35.0));
            set(TravelSpeed, Some((100.0, 250.0)), Some(180.0));
            set(PrintSpeed, Some((40.0, 150.0)), Some(60.0));
            set(FirstLayerSpeed, Some((15.0, 30.0)), Some(20.0));
            set(FanSpeed, Some((0.0, 30.0)), Some(20.0));
            set(BrimWidth, Some((5.0, 12.0)), Some(8.0));
        }
        (false, true) => {
            set(NozzleTemperature, Some((205.0, 235.0)), Some(220.0));
            set(FirstLayerNozzleTemperature, Some((210.0, 240.0)), Some(225.0));
            set(BedTemperature, Some((50.0, 65.0)), Some(55.0));
            set(FirstLayerBedTemperature, Some((55.0, 65.0)), Some(60.0));
            set(FlowRate, Some((95.0, 105.0)), Some(100.0));
            set(LayerHeight, Some((0.08, 0.28)), Some(0.2));
            set(FirstLayerHeight, Some((0.15, 0.30)), Some(0.25));
            set(LineWidth, Some((0.40, 0.55)), Some(0.42));
            set(FirstLayerLineWidth, None, None);
            set(FilamentDiameter, Some((1.73, 1.77)), Some(1.75));
            set(NozzleDiameter, Some((0.40, 0.40)), Some(0.4));
            set(RetractionDistance, Some((0.4, 1.2)), Some(0.8));
            set(RetractionSpeed, Some((25.0, 50.0)), None);
            set(TravelSpeed, Some((150.0, 350.0)), Some(250.0));
            set(PrintSpeed, Some((50.0, 250.0)), Some(100.0));
            set(FirstLayerSpeed, Some((20.0, 50.0)), Some(30.0));
            set(FanSpeed, Some((60.0, 100.0)), Some(80.0));
            set(BrimWidth, None, Some(5.0));
        }
        (false, false) => {
            set(NozzleTemperature, Some((240.0, 270.0)), Some(255.0));
            set(FirstLayerNozzleTemperature, Some((245.0, 270.0)), Some(260.0));
            set(BedTemperature, Some((85.0, 100.0)), Some(90.0));
            set(FirstLayerBedTemperature, Some((90.0, 100.0)), Some(95.0));
            set(FlowRate, Some((95.0, 105.0)), Some(100.0));
            set(LayerHeight, Some((0.08, 0.28)), Some(0.2));
            set(FirstLayerHeight, Some((0.15, 0.30)), Some(0.25));
            set(LineWidth, Some((0.40, 0.55)), Some(0.42));
            set(FirstLayerLineWidth, None, None);
            set(FilamentDiameter, Some((1.73, 1.77)), Some(1.75));
            set(NozzleDiameter, Some((0.40, 0.40)), Some(0.4));
            set(RetractionDistance, Some((0.4, 1.2)), Some(0.8));
            set(RetractionSpeed, Some((25.0, 50.0)), None);
            set(TravelSpeed, Some((150.0, 350.0)), Some(250.0));
            set(PrintSpeed, Some((50.0, 200.0)), Some(80.0));
            set(FirstLayerSpeed, Some((20.0, 50.0)), Some(30.0));
            set(FanSpeed, Some((0.0, 25.0)), Some(20.0));
            set(BrimWidth, None, Some(8.0));
        }
    }

    Some(PairProfile { printer, material, ranges, nominal })
}

/// Build the parameter set for one (pair, class) sample by perturbing the
/// nominal profile so that exactly the intended judge rule fires.
pub fn sample_for(printer: &str, material: &str, label: Label) -> Option<SampleSpec> {
    use ParameterKey::*;
    let profile = pair_profile(printer, material)?;
    let mut values = profile.nominal.clone();
    let range = |key: ParameterKey| profile.ranges[&key].expect("perturbed keys have ranges");
    let pla = profile.material == "PLA";

    match label {
        Label::ND => {}
        Label::UE => {
            values.insert(FlowRate, Some(75.0));
        }
        Label::OE => {
            values.insert(FlowRate, Some(125.0));
        }
        Label::WP if pla => {
            values.insert(FirstLayerBedTemperature, Some(range(FirstLayerBedTemperature).0 - 15.0));
        }
        Label::WP => {
            values.insert(FanSpeed, Some(80.0));
        }
        Label::ST if pla => {
            values.insert(NozzleTemperature, Some(range(NozzleTemperature).1 + 15.0));
            values.insert(RetractionDistance, Some(0.2));
        }
        Label::ST => {
            values.insert(RetractionDistance, Some(0.2));
            values.insert(TravelSpeed, Some(range(TravelSpeed).0 - 40.0));
        }
    }

    let adhesion = if profile.printer == "MK4S" { "outer_only" } else { "auto_brim" };
    Some(SampleSpec {
        printer: profile.printer,
        material: profile.material,
        label,
        values,
        adhesion: adhesion.to_string(),
    })
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn fan_duty(percent: f64) -> f64 {
    let duty = percent * 255.0 / 100.0;
    debug_assert!(duty.fract() == 0.0, "fan percent {percent} has no exact duty");
    duty
}

/// Synthetic documentation text for a pair, with one `- key: lo..hi` line
/// per covered parameter. The offline reference backend parses exactly this
/// shape.
pub fn docs_text(printer: &str, material: &str) -> Option<String> {
    let profile = pair_profile(printer, material)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} with {} - synthetic operating notes for bench testing.",
        profile.printer, profile.material
    );
    out.push_str("These values are fabricated for offline pipeline tests, not vendor guidance.\n\n");
    out.push_str("Recommended process window (canonical units):\n");
    for key in ParameterKey::ALL {
        if let Some((lo, hi)) = profile.ranges[&key] {
            let unit = key.dimension().canonical_unit();
            let _ = writeln!(out, "- {}: {}..{} {unit}", key.as_str(), fmt_num(lo), fmt_num(hi));
        }
    }
    out.push('\n');
    out.push_str("NOTE: window assembled from bench calibration runs.\n");
    let _ = writeln!(
        out,
        "WARNING: {} adhesion weakens quickly below the first-layer bed window.",
        profile.material
    );
    out.push_str("INTERACTION: higher nozzle temperature typically needs more retraction to control oozing.\n");
    Some(out)
}

/// Render the Prusa-style program: layer-change comments plus a `key = value`
/// footer config block.
fn render_mk4s(sample: &SampleSpec) -> String {
    use ParameterKey::*;
    let v = |key: ParameterKey| sample.value(key).expect("mk4s samples set all values");
    let feed = |speed_mm_s: f64| fmt_num(speed_mm_s * 60.0);
    let layers = 10usize;
    let flh_c = (v(FirstLayerHeight) * 100.0).round() as i64;
    let lh_c = (v(LayerHeight) * 100.0).round() as i64;

    let mut g = String::new();
    g.push_str("; synthetic FFF program (prusa-style), bench corpus\n");
    let _ = writeln!(g, "M862.3 P \"{}\"", sample.printer);
    let _ = writeln!(g, "M104 S{}", fmt_num(v(FirstLayerNozzleTemperature)));
    let _ = writeln!(g, "M140 S{}", fmt_num(v(FirstLayerBedTemperature)));
    g.push_str("G90\nM83\nG28 ; home all\n");
    let _ = writeln!(g, "M109 S{}", fmt_num(v(FirstLayerNozzleTemperature)));
    let _ = writeln!(g, "M190 S{}", fmt_num(v(FirstLayerBedTemperature)));
    g.push_str("G92 E0\nG1 Z2 F720\n");

    for layer in 1..=layers {
        let z = (flh_c + lh_c * (layer as i64 - 1)) as f64 / 100.0;
        g.push_str(";LAYER_CHANGE\n");
        let _ = writeln!(g, ";Z:{}", fmt_num(z));
        if layer == 2 {
            let _ = writeln!(g, "M104 S{}", fmt_num(v(NozzleTemperature)));
            let _ = writeln!(g, "M140 S{}", fmt_num(v(BedTemperature)));
            let _ = writeln!(g, "M106 S{}", fmt_num(fan_duty(v(FanSpeed))));
        }
        let _ = writeln!(g, "G1 Z{} F720", fmt_num(z));
        let _ = writeln!(g, "G1 X10 Y10 F{}", feed(v(TravelSpeed)));
        let speed = if layer == 1 { v(FirstLayerSpeed) } else { v(PrintSpeed) };
        let _ = writeln!(g, "G1 X60 Y10 E1.4 F{}", feed(speed));
        let _ = writeln!(g, "G1 X60 Y60 E1.4 F{}", feed(speed));
        let _ = writeln!(g, "G1 E-{} F{}", fmt_num(v(RetractionDistance)), feed(v(RetractionSpeed)));
    }

    g.push_str("M107\nM104 S0 ; turn off nozzle\nM140 S0 ; turn off bed\nM84\n");
    g.push_str("; prusaslicer_config = begin\n");
    let mut kv = |name: &str, value: String| {
        let _ = writeln!(g, "; {name} = {value}");
    };
    kv("temperature", fmt_num(v(NozzleTemperature)));
    kv("first_layer_temperature", fmt_num(v(FirstLayerNozzleTemperature)));
    kv("bed_temperature", fmt_num(v(BedTemperature)));
    kv("first_layer_bed_temperature", fmt_num(v(FirstLayerBedTemperature)));
    kv("extrusion_multiplier", fmt_num(v(FlowRate) / 100.0));
    kv("layer_height", fmt_num(v(LayerHeight)));
    kv("first_layer_height", fmt_num(v(FirstLayerHeight)));
    kv("extrusion_width", fmt_num(v(LineWidth)));
    kv("first_layer_extrusion_width", fmt_num(v(FirstLayerLineWidth)));
    kv("filament_diameter", fmt_num(v(FilamentDiameter)));
    kv("nozzle_diameter", fmt_num(v(NozzleDiameter)));
    kv("retract_length", fmt_num(v(RetractionDistance)));
    kv("retract_speed", fmt_num(v(RetractionSpeed)));
    kv("travel_speed", fmt_num(v(TravelSpeed)));
    kv("perimeter_speed", fmt_num(v(PrintSpeed)));
    kv("first_layer_speed", fmt_num(v(FirstLayerSpeed)));
    kv("max_fan_speed", fmt_num(v(FanSpeed)));
    kv("brim_width", fmt_num(v(BrimWidth)));
    kv("brim_type", sample.adhesion.clone());
    kv("filament_type", sample.material.clone());
    kv("printer_model", sample.printer.clone());
    g.push_str("; prusaslicer_config = end\n");
    g
}

/// Render the Bambu-style program: header/config blocks up front and
/// `layer num/total_layer_count` markers. Travel speed and fan policy are
/// deliberately absent from the config so extraction must fall back to the
/// movement and fan commands (exercising unit conversion).
fn render_bmp1(sample: &SampleSpec) -> String {
    use ParameterKey::*;
    let v = |key: ParameterKey| sample.value(key).expect("bmp1 samples set rendered values");
    let feed = |speed_mm_s: f64| fmt_num(speed_mm_s * 60.0);
    let layers = 10usize;
    let flh_c = (v(FirstLayerHeight) * 100.0).round() as i64;
    let lh_c = (v(LayerHeight) * 100.0).round() as i64;

    let mut g = String::new();
    g.push_str("; HEADER_BLOCK_START\n");
    g.push_str("; synthetic FFF program (bambu-style), bench corpus\n");
    let _ = writeln!(g, "; printer_model: {}", sample.printer);
    g.push_str("; HEADER_BLOCK_END\n");
    g.push_str("; CONFIG_BLOCK_START\n");
    {
        let mut kv = |name: &str, value: String| {
            let _ = writeln!(g, "; {name} = {value}");
        };
        kv("nozzle_temperature", fmt_num(v(NozzleTemperature)));
        kv("nozzle_temperature_initial_layer", fmt_num(v(FirstLayerNozzleTemperature)));
        kv("bed_temperature", fmt_num(v(BedTemperature)));
        kv("bed_temperature_initial_layer", fmt_num(v(FirstLayerBedTemperature)));
        kv("print_flow_ratio", fmt_num(v(FlowRate) / 100.0));
        kv("layer_height", fmt_num(v(LayerHeight)));
        kv("initial_layer_print_height", fmt_num(v(FirstLayerHeight)));
        kv("line_width", fmt_num(v(LineWidth)));
        kv("filament_diameter", fmt_num(v(FilamentDiameter)));
        kv("nozzle_diameter", fmt_num(v(NozzleDiameter)));
        kv("retraction_length", fmt_num(v(RetractionDistance)));
        kv("outer_wall_speed", fmt_num(v(PrintSpeed)));
        kv("initial_layer_speed", fmt_num(v(FirstLayerSpeed)));
        kv("brim_width", fmt_num(v(BrimWidth)));
        kv("brim_type", sample.adhesion.clone());
        kv("filament_type", sample.material.clone());
    }
    g.push_str("; CONFIG_BLOCK_END\n");

    let _ = writeln!(g, "M104 S{}", fmt_num(v(FirstLayerNozzleTemperature)));
    let _ = writeln!(g, "M140 S{}", fmt_num(v(FirstLayerBedTemperature)));
    g.push_str("G90\nM83\nG28\n");
    let _ = writeln!(g, "M109 S{}", fmt_num(v(FirstLayerNozzleTemperature)));
    let _ = writeln!(g, "M190 S{}", fmt_num(v(FirstLayerBedTemperature)));
    g.push_str("G92 E0\n");

    for layer in 1..=layers {
        let z = (flh_c + lh_c * (layer as i64 - 1)) as f64 / 100.0;
        let _ = writeln!(g, "; layer num/total_layer_count: {layer}/{layers}");
        if layer == 2 {
            let _ = writeln!(g, "M104 S{}", fmt_num(v(NozzleTemperature)));
            let _ = writeln!(g, "M140 S{}", fmt_num(v(BedTemperature)));
            let _ = writeln!(g, "M106 S{}", fmt_num(fan_duty(v(FanSpeed))));
        }
        let _ = writeln!(g, "G1 Z{} F600", fmt_num(z));
        let _ = writeln!(g, "G1 X10 Y10 F{}", feed(v(TravelSpeed)));
        let speed = if layer == 1 { v(FirstLayerSpeed) } else { v(PrintSpeed) };
        let _ = writeln!(g, "G1 X60 Y10 E1.4 F{}", feed(speed));
        let _ = writeln!(g, "G1 X60 Y60 E1.4 F{}", feed(speed));
        let _ = writeln!(g, "G1 E-{} F1800", fmt_num(v(RetractionDistance)));
    }

    g.push_str("M107\nM104 S0\nM140 S0\n");
    g
}

/// Render the program text for a sample.
pub fn render_gcode(sample: &SampleSpec) -> String {
    if sample.printer == "MK4S" {
        render_mk4s(sample)
    } else {
        render_bmp1(sample)
    }
}

/// Ground-truth parameter record for a sample, equal to what a perfect
/// extractor would report after unit normalization.
pub fn truth_parameters(sample: &SampleSpec) -> ExtractedParameters {
    let mut truth = ExtractedParameters {
        schema_version: SCHEMA_VERSION,
        values: sample
            .values
            .iter()
            .map(|(k, v)| (*k, v.map(Measurement::canonical)))
            .collect(),
        categorical: BTreeMap::new(),
        notes: Vec::new(),
        source: "ground-truth".to_string(),
        unit_audit: Vec::new(),
    };
    truth.categorical.insert(CategoricalKey::PrinterModel, Some(sample.printer.clone()));
    truth.categorical.insert(CategoricalKey::MaterialType, Some(sample.material.clone()));
    truth.categorical.insert(CategoricalKey::BedAdhesionType, Some(sample.adhesion.clone()));
    truth
}

/// Everything `generate_corpus` wrote.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub entries: Vec<ManifestEntry>,
    pub manifest_path: std::path::PathBuf,
    pub run_config_path: std::path::PathBuf,
}

/// Write the 20-sample corpus under `dir`: `gcodes/`, `truth/`, `docs/`,
/// `manifest.jsonl`, and an all-stub `run.toml` wired to the docs.
pub fn generate_corpus(dir: &Path) -> std::io::Result<GeneratedCorpus> {
    let gcodes = dir.join("gcodes");
    let truth = dir.join("truth");
    let docs = dir.join("docs");
    for d in [&gcodes, &truth, &docs] {
        std::fs::create_dir_all(d)?;
    }

    let mut entries = Vec::new();
    let mut doc_entries = Vec::new();
    for printer in PRINTERS {
        for material in MATERIALS {
            let doc_name = format!("{}-{}.txt", printer.to_lowercase(), material.to_lowercase());
            std::fs::write(docs.join(&doc_name), docs_text(printer, material).unwrap())?;
            doc_entries.push(DocsEntry {
                printer: printer.to_string(),
                material: material.to_string(),
                paths: vec![std::path::PathBuf::from("docs").join(&doc_name)],
            });
            for label in Label::ALL {
                let sample = sample_for(printer, material, label).unwrap();
                let id = sample.sample_id();
                std::fs::write(gcodes.join(format!("{id}.gcode")), render_gcode(&sample))?;
                let truth_json =
                    serde_json::to_string_pretty(&truth_parameters(&sample)).expect("serializes");
                std::fs::write(truth.join(format!("{id}.json")), truth_json)?;
                entries.push(ManifestEntry {
                    sample_id: id.clone(),
                    gcode_path: std::path::PathBuf::from("gcodes").join(format!("{id}.gcode")),
                    printer: printer.to_string(),
                    material: material.to_string(),
                    true_label: label,
                    truth_params_path: Some(std::path::PathBuf::from("truth").join(format!("{id}.json"))),
                });
            }
        }
    }

    let manifest_path = dir.join("manifest.jsonl");
    crate::eval::DatasetManifest::save(&entries, &manifest_path)
        .map_err(|e| std::io::Error::other(e.to_string()))?;

    let config = RunConfig { docs: doc_entries, ..RunConfig::default() };
    let run_config_path = dir.join("run.toml");
    let toml_text = toml::to_string_pretty(&config).expect("config serializes");
    std::fs::write(&run_config_path, toml_text)?;

    Ok(GeneratedCorpus { entries, manifest_path, run_config_path })
}
