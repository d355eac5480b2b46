//! Evaluation-harness integration tests over the synthetic corpus: the
//! reference×judge grid with extraction reuse, the extraction benchmark,
//! and the framework-vs-baseline comparison.

use gscreen_core::agents::{PromptFamily, Screener};
use gscreen_core::corpus::generate_corpus;
use gscreen_core::eval::{
    compare_framework_vs_baseline, run_extraction_benchmark, run_grid, DatasetManifest,
};
use gscreen_core::gateway::{BackendDescriptor, RoleTag};
use gscreen_core::label::Label;
use gscreen_core::schema::{CriticalSet, ToleranceSpec};
use gscreen_core::store::RunConfig;

fn corpus_config(dir: &std::path::Path) -> (RunConfig, DatasetManifest) {
    let corpus = generate_corpus(dir).unwrap();
    let config = RunConfig::load(&corpus.run_config_path).unwrap();
    let manifest = DatasetManifest::load(&corpus.manifest_path).unwrap();
    (config, manifest)
}

#[test]
fn one_by_one_grid_matches_single_screening_report() {
    let dir = tempfile::tempdir().unwrap();
    let (config, manifest) = corpus_config(dir.path());
    let screener = Screener::new(config).unwrap();
    let study = run_grid(&screener, &manifest, &["stub".to_string()], &["stub".to_string()]).unwrap();
    assert_eq!(study.grid.cells_pct, vec![vec![100.0]]);
    assert_eq!(study.grid.overall_avg_pct, 100.0);
    assert_eq!(study.cell_reports[0][0].scored, 20);
    assert_eq!(study.cell_reports[0][0].accuracy, 1.0);
}

#[test]
fn grid_reuses_extraction_across_cells() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, manifest) = corpus_config(dir.path());
    config.backends.insert("stub2".to_string(), BackendDescriptor::stub("stub2"));
    let screener = Screener::new(config).unwrap();

    let backends = vec!["stub".to_string(), "stub2".to_string()];
    let study = run_grid(&screener, &manifest, &backends, &backends).unwrap();
    assert_eq!(study.grid.cells_pct.len(), 2);
    for row in &study.grid.cells_pct {
        assert_eq!(row, &vec![100.0, 100.0]);
    }

    // Extraction once per sample, independent of the 2x2 grid size.
    let extractor_calls = screener.gateway().calls_for_role(RoleTag::Extractor);
    assert_eq!(extractor_calls, manifest.len());
    // One reference build per reference backend per printer-material pair.
    assert_eq!(screener.cache().build_count(), 2 * 4);
    // Judge calls: samples x cells.
    assert_eq!(screener.gateway().calls_for_role(RoleTag::Judge), manifest.len() * 4);
}

#[test]
fn extraction_benchmark_identical_backends_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, manifest) = corpus_config(dir.path());
    config.backends.insert("stub2".to_string(), BackendDescriptor::stub("stub2"));
    let screener = Screener::new(config).unwrap();
    let rows = run_extraction_benchmark(
        &screener,
        &manifest,
        &["stub".to_string(), "stub2".to_string()],
        &ToleranceSpec::default(),
        &CriticalSet::default(),
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].overall_accuracy, rows[1].overall_accuracy);
    assert_eq!(rows[0].overall_mape, rows[1].overall_mape);
    assert_eq!(rows[0].cells, rows[1].cells);
    // 18 MK4S cells and 16 BMP1 cells per sample (two nulls in the BMP1
    // truth), 10 samples each.
    assert_eq!(rows[0].cells, 10 * 18 + 10 * 16);
    let table = gscreen_core::eval::benchmark_text_table(&rows);
    assert!(table.contains("stub2"));
}

#[test]
fn benchmark_requires_ground_truth_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let (config, mut manifest) = corpus_config(dir.path());
    manifest.entries[0].truth_params_path = None;
    let screener = Screener::new(config).unwrap();
    let err = run_extraction_benchmark(
        &screener,
        &manifest,
        &["stub".to_string()],
        &ToleranceSpec::default(),
        &CriticalSet::default(),
    )
    .unwrap_err();
    assert!(matches!(err, gscreen_core::eval::EvalError::MissingTruth(_)));
}

#[test]
fn framework_beats_fixed_answer_baseline_by_hand_computed_margin() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, manifest) = corpus_config(dir.path());
    // Baseline stub that always answers ND.
    let mut nd_stub = BackendDescriptor::stub("always-nd");
    nd_stub.fixed_label = Some(Label::ND);
    config.backends.insert("always-nd".to_string(), nd_stub);
    config.roles.baseline = "always-nd".to_string();

    let framework = Screener::new(config.clone()).unwrap();
    let baseline = Screener::new(config).unwrap();
    let report =
        compare_framework_vs_baseline(&framework, &baseline, &manifest, PromptFamily::Engineered)
            .unwrap();

    // Framework is exact on this corpus; always-ND gets the 4 ND samples
    // out of 20. Delta = 100.0 - 20.0 = 80.0 points.
    assert_eq!(report.framework.accuracy, 1.0);
    assert!((report.baseline.accuracy - 0.2).abs() < 1e-12);
    assert!((report.delta_points - 80.0).abs() < 1e-9);

    // Every printer-material combination: 5 samples, 1 of them ND.
    assert_eq!(report.per_combo.len(), 4);
    for (combo, delta) in &report.per_combo {
        assert_eq!(delta.samples, 5, "{combo}");
        assert!((delta.framework_accuracy_pct - 100.0).abs() < 1e-9);
        assert!((delta.baseline_accuracy_pct - 20.0).abs() < 1e-9);
        assert!((delta.delta_points - 80.0).abs() < 1e-9);
    }

}

#[test]
fn identical_configurations_screen_to_a_zero_delta() {
    // Two screening runs of the same configuration are deterministic, so
    // the accuracy delta between them is exactly zero.
    let dir = tempfile::tempdir().unwrap();
    let (config, manifest) = corpus_config(dir.path());
    let screener = Screener::new(config).unwrap();

    let mut accuracies = Vec::new();
    for run in ["cmp-a", "cmp-b"] {
        let run_id = screener.start_run(Some(run.to_string())).unwrap();
        let outcome = gscreen_core::eval::screen_manifest(&screener, &manifest, &run_id);
        let report = gscreen_core::eval::compute_metrics(&outcome.pairs, &outcome.strata).unwrap();
        accuracies.push(report.accuracy * 100.0);
    }
    assert_eq!(
        gscreen_core::eval::accuracy_delta_points(accuracies[0], accuracies[1]),
        0.0
    );
}
