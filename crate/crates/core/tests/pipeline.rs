//! End-to-end pipeline tests over the synthetic corpus with all-stub
//! backends: screening, artifact layout, caching, determinism, re-judging,
//! and baseline isolation.

use std::path::Path;

use gscreen_core::agents::{PromptFamily, Screener};
use gscreen_core::corpus::{generate_corpus, sample_for, truth_parameters};
use gscreen_core::eval::DatasetManifest;
use gscreen_core::gateway::RoleTag;
use gscreen_core::gcode::{parse_gcode, shorten_gcode};
use gscreen_core::label::Label;
use gscreen_core::schema::ParameterKey;
use gscreen_core::store::{RunConfig, StageArtifact};

fn corpus_screener(dir: &Path) -> (Screener, DatasetManifest) {
    let corpus = generate_corpus(dir).unwrap();
    let config = RunConfig::load(&corpus.run_config_path).unwrap();
    let screener = Screener::new(config).unwrap();
    let manifest = DatasetManifest::load(&corpus.manifest_path).unwrap();
    (screener, manifest)
}

#[test]
fn screen_produces_expected_label_and_five_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let run_id = screener.start_run(Some("run-test".to_string())).unwrap();

    let entry = manifest
        .entries
        .iter()
        .find(|e| e.sample_id == "mk4s-pla-ue")
        .unwrap();
    let result = screener
        .screen(&run_id, &entry.sample_id, &entry.gcode_path, &entry.printer, &entry.material)
        .unwrap();
    assert_eq!(result.verdict.label, Label::UE);
    assert_eq!(result.verdict.deviations_used, vec![ParameterKey::FlowRate]);
    assert_eq!(result.artifacts.len(), 5);
    for path in result.artifacts.values() {
        assert!(path.exists(), "missing artifact {}", path.display());
    }
    for stage in StageArtifact::ALL {
        assert!(screener
            .store()
            .artifact_path(&run_id, &entry.sample_id, stage)
            .exists());
    }
    screener.finish_run(&run_id).unwrap();
    let meta = screener.store().read_meta(&run_id).unwrap();
    assert!(meta.finished_at_unix.is_some());
    assert_eq!(meta.prompt_hashes.len(), 5);
}

#[test]
fn stub_extraction_matches_ground_truth_numerically() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("extractor").unwrap();

    for entry in &manifest.entries {
        let text = std::fs::read_to_string(&entry.gcode_path).unwrap();
        let doc = parse_gcode(&text);
        let shortened = shorten_gcode(&doc, &screener.config().policy);
        let extracted = screener.run_extractor(&backend, &shortened).unwrap();
        let sample = sample_for(&entry.printer, &entry.material, entry.true_label).unwrap();
        let truth = truth_parameters(&sample);
        for key in ParameterKey::ALL {
            assert_eq!(
                extracted.numeric(key),
                truth.numeric(key),
                "{} / {}",
                entry.sample_id,
                key.as_str()
            );
        }
    }
}

#[test]
fn frozen_extraction_values_for_fixture_a() {
    // mk4s-pla-nd, literals hand-read from the profile table.
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("extractor").unwrap();
    let entry = manifest.entries.iter().find(|e| e.sample_id == "mk4s-pla-nd").unwrap();
    let text = std::fs::read_to_string(&entry.gcode_path).unwrap();
    let shortened = shorten_gcode(&parse_gcode(&text), &screener.config().policy);
    let extracted = screener.run_extractor(&backend, &shortened).unwrap();

    assert_eq!(extracted.numeric(ParameterKey::NozzleTemperature), Some(215.0));
    assert_eq!(extracted.numeric(ParameterKey::FlowRate), Some(100.0));
    assert_eq!(extracted.numeric(ParameterKey::TravelSpeed), Some(180.0));
    assert_eq!(extracted.numeric(ParameterKey::FanSpeed), Some(80.0));
    assert_eq!(extracted.numeric(ParameterKey::BrimWidth), Some(0.0));
    assert_eq!(extracted.source, "stub");
}

#[test]
fn bmp1_extraction_uses_fallbacks_with_unit_audit() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("extractor").unwrap();
    let entry = manifest.entries.iter().find(|e| e.sample_id == "bmp1-pla-nd").unwrap();
    let text = std::fs::read_to_string(&entry.gcode_path).unwrap();
    let shortened = shorten_gcode(&parse_gcode(&text), &screener.config().policy);
    let extracted = screener.run_extractor(&backend, &shortened).unwrap();

    // Travel comes from F15000 on travel moves, fan from M106 S204.
    assert_eq!(extracted.numeric(ParameterKey::TravelSpeed), Some(250.0));
    assert_eq!(extracted.numeric(ParameterKey::FanSpeed), Some(80.0));
    assert_eq!(extracted.numeric(ParameterKey::RetractionSpeed), None);
    assert_eq!(extracted.numeric(ParameterKey::FirstLayerLineWidth), None);
    let audited: Vec<&str> = extracted.unit_audit.iter().map(|c| c.from_unit.as_str()).collect();
    assert!(audited.contains(&"mm/min"), "audit: {audited:?}");
    assert!(audited.contains(&"duty255"), "audit: {audited:?}");
    assert!(audited.contains(&"factor"), "audit: {audited:?}");
}

#[test]
fn reference_is_cached_once_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, _) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("reference").unwrap();
    let docs = screener.config().doc_bundle("MK4S", "PLA").unwrap();

    let first = screener.run_reference(&backend, &docs).unwrap();
    let calls_after_first = screener.gateway().calls_for_role(RoleTag::Reference);
    let second = screener.run_reference(&backend, &docs).unwrap();
    let calls_after_second = screener.gateway().calls_for_role(RoleTag::Reference);

    assert_eq!(first, second);
    assert_eq!(screener.cache().build_count(), 1);
    assert_eq!(calls_after_first, 1);
    assert_eq!(calls_after_second, 1, "second lookup must not hit the backend");
    assert_eq!(first.source_docs, vec!["mk4s-pla.txt".to_string()]);
    // Range parsed from the docs matches the profile.
    let nozzle = first.range(ParameterKey::NozzleTemperature).unwrap();
    assert_eq!((nozzle.lower, nozzle.upper), (200.0, 230.0));
}

#[test]
fn reference_on_empty_docs_yields_all_null_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, _) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("reference").unwrap();
    let docs = gscreen_core::reference::DocBundle::new(
        "MK4S",
        "PETG",
        vec![("empty.txt".to_string(), "No ranges documented here.".to_string())],
    )
    .unwrap();
    let reference = screener.run_reference(&backend, &docs).unwrap();
    assert!(ParameterKey::ALL.iter().all(|k| reference.range(*k).is_none()));
    assert!(!reference.warnings.is_empty());
}

#[test]
fn screening_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let entry = manifest.entries.iter().find(|e| e.sample_id == "bmp1-abs-st").unwrap();

    let mut artifact_sets = Vec::new();
    for run in ["run-a", "run-b"] {
        let run_id = screener.start_run(Some(run.to_string())).unwrap();
        let result = screener
            .screen(&run_id, &entry.sample_id, &entry.gcode_path, &entry.printer, &entry.material)
            .unwrap();
        assert_eq!(result.verdict.label, Label::ST);
        let mut bytes = Vec::new();
        for stage in StageArtifact::ALL {
            bytes.push(screener.store().load(&run_id, &entry.sample_id, stage).unwrap());
        }
        artifact_sets.push(bytes);
    }
    assert_eq!(artifact_sets[0], artifact_sets[1], "artifacts must be byte-identical");
}

#[test]
fn rejudge_from_persisted_artifacts_reproduces_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let entry = manifest.entries.iter().find(|e| e.sample_id == "mk4s-abs-wp").unwrap();
    let run_id = screener.start_run(None).unwrap();
    let original = screener
        .screen(&run_id, &entry.sample_id, &entry.gcode_path, &entry.printer, &entry.material)
        .unwrap();

    let verdict_path = screener.store().artifact_path(&run_id, &entry.sample_id, StageArtifact::Verdict);
    let original_bytes = std::fs::read(&verdict_path).unwrap();
    std::fs::remove_file(&verdict_path).unwrap();

    let (rejudged, _) = screener.rejudge(&run_id, &entry.sample_id).unwrap();
    assert_eq!(rejudged, original.verdict);

    let mut bytes = serde_json::to_vec_pretty(&rejudged).unwrap();
    bytes.push(b'\n');
    assert_eq!(bytes, original_bytes);
}

#[test]
fn citations_are_verbatim_lines_of_the_shortened_text() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let run_id = screener.start_run(None).unwrap();
    for entry in manifest.entries.iter().take(4) {
        let result = screener
            .screen(&run_id, &entry.sample_id, &entry.gcode_path, &entry.printer, &entry.material)
            .unwrap();
        let shortened = String::from_utf8(
            screener.store().load(&run_id, &entry.sample_id, StageArtifact::Shortened).unwrap(),
        )
        .unwrap();
        let lines: Vec<&str> = shortened.lines().collect();
        assert!(!result.verdict.evidence_citations.is_empty());
        for citation in &result.verdict.evidence_citations {
            assert!(lines[citation.line].contains(&citation.quote));
        }
        assert_eq!(result.diagnostics.dropped_citations, 0);
    }
}

#[test]
fn degenerate_band_row_persists_with_null_normalized() {
    // nozzle_diameter has a zero-width reference range in every profile.
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let entry = manifest.entries.iter().find(|e| e.sample_id == "mk4s-pla-nd").unwrap();
    let run_id = screener.start_run(None).unwrap();
    screener
        .screen(&run_id, &entry.sample_id, &entry.gcode_path, &entry.printer, &entry.material)
        .unwrap();
    let table: gscreen_core::deviation::DeviationTable = serde_json::from_slice(
        &screener.store().load(&run_id, &entry.sample_id, StageArtifact::Deviation).unwrap(),
    )
    .unwrap();
    let row = table.row(ParameterKey::NozzleDiameter).unwrap();
    assert_eq!(row.band_width, 0.0);
    assert_eq!(row.normalized, None);
    assert_eq!(row.deviation, 0.0);
    assert_eq!(row.direction, gscreen_core::deviation::Direction::InRange);
    // The serialized artifact records the null explicitly.
    let raw: serde_json::Value = serde_json::from_slice(
        &screener.store().load(&run_id, &entry.sample_id, StageArtifact::Deviation).unwrap(),
    )
    .unwrap();
    let json_row = raw["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["key"] == "nozzle_diameter")
        .unwrap();
    assert!(json_row["normalized"].is_null());
}

#[test]
fn baseline_is_one_call_and_reads_no_reference_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("baseline").unwrap();
    let entry = &manifest.entries[0];
    let text = std::fs::read_to_string(&entry.gcode_path).unwrap();
    let shortened = shorten_gcode(&parse_gcode(&text), &screener.config().policy);

    let label = screener
        .run_baseline(&backend, &shortened, PromptFamily::Engineered, &entry.printer, &entry.material)
        .unwrap();
    assert_eq!(label, Label::ND); // stub default fixed answer

    let log = screener.gateway().call_log();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].role, RoleTag::Baseline);
    assert_eq!(screener.cache().build_count(), 0);
}

#[test]
fn baseline_prompt_families_produce_different_requests() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("baseline").unwrap();
    let entry = &manifest.entries[0];
    let text = std::fs::read_to_string(&entry.gcode_path).unwrap();
    let shortened = shorten_gcode(&parse_gcode(&text), &screener.config().policy);

    screener
        .run_baseline(&backend, &shortened, PromptFamily::FdmBenchStyle, &entry.printer, &entry.material)
        .unwrap();
    screener
        .run_baseline(&backend, &shortened, PromptFamily::Engineered, &entry.printer, &entry.material)
        .unwrap();
    let log = screener.gateway().call_log();
    assert_eq!(log.len(), 2);
    assert_ne!(log[0].user_content, log[1].user_content);
    assert!(log[1].user_content.contains("three steps"));
}

#[test]
fn fixed_label_stub_baseline_answers_as_configured() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(dir.path()).unwrap();
    let mut config = RunConfig::load(&corpus.run_config_path).unwrap();
    let mut wp_stub = gscreen_core::gateway::BackendDescriptor::stub("always-wp");
    wp_stub.fixed_label = Some(Label::WP);
    config.backends.insert("always-wp".to_string(), wp_stub);
    config.roles.baseline = "always-wp".to_string();
    let screener = Screener::new(config).unwrap();
    let backend = screener.config().role_backend("baseline").unwrap();

    let manifest = DatasetManifest::load(&corpus.manifest_path).unwrap();
    let entry = &manifest.entries[3];
    let text = std::fs::read_to_string(&entry.gcode_path).unwrap();
    let shortened = shorten_gcode(&parse_gcode(&text), &screener.config().policy);
    let label = screener
        .run_baseline(&backend, &shortened, PromptFamily::FdmBenchStyle, &entry.printer, &entry.material)
        .unwrap();
    assert_eq!(label, Label::WP);
}

#[test]
fn extractor_rejects_empty_shortened_text() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, _) = corpus_screener(dir.path());
    let backend = screener.config().role_backend("extractor").unwrap();
    let empty = shorten_gcode(&parse_gcode(""), &Default::default());
    let err = screener.run_extractor(&backend, &empty).unwrap_err();
    assert_eq!(err.stage, gscreen_core::agents::StageName::Extract);
}

#[test]
fn unreadable_path_fails_at_input_stage_before_any_backend_call() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, _) = corpus_screener(dir.path());
    let run_id = screener.start_run(None).unwrap();
    let err = screener
        .screen(&run_id, "ghost", Path::new("/nonexistent/ghost.gcode"), "MK4S", "PLA")
        .unwrap_err();
    assert_eq!(err.stage, gscreen_core::agents::StageName::Input);
    assert!(screener.gateway().call_log().is_empty());
}

#[test]
fn stage_isolation_reference_corruption_only_affects_judge_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (screener, manifest) = corpus_screener(dir.path());
    let entry = manifest.entries.iter().find(|e| e.sample_id == "mk4s-pla-nd").unwrap();
    let run_id = screener.start_run(None).unwrap();
    screener
        .screen(&run_id, &entry.sample_id, &entry.gcode_path, &entry.printer, &entry.material)
        .unwrap();

    let extracted_before =
        screener.store().load(&run_id, &entry.sample_id, StageArtifact::Extracted).unwrap();
    // Swap the persisted deviation table for one that signals UE, then
    // re-judge from artifacts only.
    let deviation_path =
        screener.store().artifact_path(&run_id, &entry.sample_id, StageArtifact::Deviation);
    let mut table: gscreen_core::deviation::DeviationTable =
        serde_json::from_slice(&std::fs::read(&deviation_path).unwrap()).unwrap();
    for row in &mut table.rows {
        if row.key == ParameterKey::FlowRate {
            row.value = 80.0;
            row.deviation = 15.0;
            row.normalized = Some(1.5);
            row.direction = gscreen_core::deviation::Direction::Below;
        }
    }
    std::fs::write(&deviation_path, serde_json::to_vec_pretty(&table).unwrap()).unwrap();

    let (rejudged, _) = screener.rejudge(&run_id, &entry.sample_id).unwrap();
    assert_eq!(rejudged.label, Label::UE);
    let extracted_after =
        screener.store().load(&run_id, &entry.sample_id, StageArtifact::Extracted).unwrap();
    assert_eq!(extracted_before, extracted_after, "upstream artifacts untouched");
}
