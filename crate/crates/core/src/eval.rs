//! Evaluation harness: dataset manifests, classification metrics (accuracy,
//! macro-F1, confusion matrix, per-class recall, stratified accuracy), the
//! reference×judge grid study, the extraction benchmark, and the
//! framework-vs-baseline comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{parallel_map, PromptFamily, Screener, StageError};
use crate::gateway::GatewayError;
use crate::gcode::{parse_gcode, shorten_gcode};
use crate::label::Label;
use crate::schema::{aggregate_cells, score_extraction, CellScore, CriticalSet, ExtractedParameters, ToleranceSpec};

/// One dataset record: where the program lives and what it truly is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub gcode_path: PathBuf,
    pub printer: String,
    pub material: String,
    pub true_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_params_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("manifest io at {path}: {source}")]
    ManifestIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {detail}")]
    ManifestParse { line: usize, detail: String },
    #[error("duplicate sample id \"{0}\"")]
    DuplicateSampleId(String),
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("pairs and strata lengths differ: {pairs} vs {strata}")]
    LengthMismatch { pairs: usize, strata: usize },
    #[error("sample \"{0}\" has no ground-truth parameter file")]
    MissingTruth(String),
    #[error(transparent)]
    Stage(#[from] StageError),
}

impl DatasetManifest {
    /// Load a JSON-lines manifest. Relative paths are resolved against the
    /// manifest's directory; sample ids must be unique.
    pub fn load(path: &Path) -> Result<DatasetManifest, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| EvalError::ManifestIo { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| EvalError::ManifestParse { line: i + 1, detail: e.to_string() })?;
            if entry.gcode_path.is_relative() {
                entry.gcode_path = base.join(&entry.gcode_path);
            }
            if let Some(p) = entry.truth_params_path.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if !seen.insert(entry.sample_id.clone()) {
                return Err(EvalError::DuplicateSampleId(entry.sample_id));
            }
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        Ok(DatasetManifest { entries })
    }

    /// Write one JSON record per line.
    pub fn save(entries: &[ManifestEntry], path: &Path) -> Result<(), EvalError> {
        let mut out = String::new();
        for entry in entries {
            out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)
            .map_err(|source| EvalError::ManifestIo { path: path.to_path_buf(), source })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// 5×5 confusion counts; rows are true classes, columns predicted, in the
/// fixed order [ND, UE, OE, WP, ST].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 5]; 5],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: &[(Label, Label)]) -> ConfusionMatrix {
        let mut counts = [[0u64; 5]; 5];
        for (truth, pred) in pairs {
            counts[truth.index()][pred.index()] += 1;
        }
        ConfusionMatrix { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..5).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: Label) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn col_sum(&self, class: Label) -> u64 {
        (0..5).map(|r| self.counts[r][class.index()]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Aligned text table with raw sample counts.
    pub fn text_table(&self) -> String {
        let mut out = String::from("true\\pred");
        for label in Label::ALL {
            let _ = write!(out, "{:>6}", label.as_str());
        }
        out.push('\n');
        for truth in Label::ALL {
            let _ = write!(out, "{:<9}", truth.as_str());
            for pred in Label::ALL {
                let _ = write!(out, "{:>6}", self.counts[truth.index()][pred.index()]);
            }
            out.push('\n');
        }
        out
    }
}

/// Per-sample attributes used for stratified accuracy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleStratum {
    pub printer: String,
    pub material: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumScore {
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
}

/// Full classification report for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scored: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_recall: BTreeMap<Label, Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub strata: BTreeMap<String, StratumScore>,
    pub error_tallies: BTreeMap<String, u64>,
}

/// Compute accuracy, macro-F1, per-class recall, the confusion matrix, and
/// stratified accuracies (by printer, material, and printer×material).
///
/// Per-class recall is null for classes absent from the truth labels, and
/// such classes are excluded from macro averaging; a class with P + R = 0
/// contributes an F1 of zero.
pub fn compute_metrics(
    pairs: &[(Label, Label)],
    strata: &[SampleStratum],
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if pairs.len() != strata.len() {
        return Err(EvalError::LengthMismatch { pairs: pairs.len(), strata: strata.len() });
    }
    let confusion = ConfusionMatrix::from_pairs(pairs);
    let total = confusion.total() as f64;
    let accuracy = confusion.trace() as f64 / total;

    let mut per_class_recall = BTreeMap::new();
    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for class in Label::ALL {
        let row = confusion.row_sum(class);
        let col = confusion.col_sum(class);
        let diag = confusion.counts[class.index()][class.index()] as f64;
        if row == 0 {
            per_class_recall.insert(class, None);
            continue;
        }
        let recall = diag / row as f64;
        per_class_recall.insert(class, Some(recall));
        let precision = if col > 0 { diag / col as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1_sum += f1;
        f1_classes += 1;
    }
    let macro_f1 = f1_sum / f1_classes as f64;

    let mut strata_scores: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for ((truth, pred), stratum) in pairs.iter().zip(strata) {
        let correct = u64::from(truth == pred);
        for key in [
            format!("printer:{}", stratum.printer),
            format!("material:{}", stratum.material),
            format!("combo:{}+{}", stratum.printer, stratum.material),
        ] {
            let slot = strata_scores.entry(key).or_insert((0, 0));
            slot.0 += correct;
            slot.1 += 1;
        }
    }
    let strata_map = strata_scores
        .into_iter()
        .map(|(key, (correct, total))| {
            (key, StratumScore { correct, total, accuracy: correct as f64 / total as f64 })
        })
        .collect();

    Ok(EvalReport {
        scored: pairs.len(),
        accuracy,
        macro_f1,
        per_class_recall,
        confusion,
        strata: strata_map,
        error_tallies: BTreeMap::new(),
    })
}

/// Round half-up to one decimal. Used only for display; reports keep full
/// precision.
pub fn round_half_up_1dp(x: f64) -> f64 {
    debug_assert!(x >= 0.0, "display rounding expects non-negative percentages");
    (x * 10.0 + 0.5).floor() / 10.0
}

/// Format a percentage to one decimal, rounding half up (e.g. 85.833 →
/// "85.8", 81.666 → "81.7").
pub fn fmt_pct_1dp(x: f64) -> String {
    format!("{:.1}", round_half_up_1dp(x))
}

/// Accuracy grid over (reference backend × judge backend) cells, with
/// row-wise, column-wise, and overall averages at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub reference_backends: Vec<String>,
    pub judge_backends: Vec<String>,
    /// `cells_pct[r][j]` is the accuracy (in percent) with reference
    /// backend `r` and judge backend `j`.
    pub cells_pct: Vec<Vec<f64>>,
    pub row_avgs_pct: Vec<f64>,
    pub col_avgs_pct: Vec<f64>,
    pub overall_avg_pct: f64,
}

impl GridReport {
    pub fn from_cells(
        reference_backends: Vec<String>,
        judge_backends: Vec<String>,
        cells_pct: Vec<Vec<f64>>,
    ) -> GridReport {
        let rows = cells_pct.len();
        let cols = cells_pct.first().map_or(0, Vec::len);
        let row_avgs_pct = cells_pct
            .iter()
            .map(|row| row.iter().sum::<f64>() / cols as f64)
            .collect();
        let col_avgs_pct = (0..cols)
            .map(|j| cells_pct.iter().map(|row| row[j]).sum::<f64>() / rows as f64)
            .collect();
        let overall_avg_pct =
            cells_pct.iter().flatten().sum::<f64>() / (rows * cols) as f64;
        GridReport {
            reference_backends,
            judge_backends,
            cells_pct,
            row_avgs_pct,
            col_avgs_pct,
            overall_avg_pct,
        }
    }

    /// Facsimile of the accuracy grid with one-decimal half-up rounding.
    pub fn text_table(&self) -> String {
        let mut out = String::from("reference \\ judge");
        for judge in &self.judge_backends {
            let _ = write!(out, "{judge:>12}");
        }
        let _ = writeln!(out, "{:>12}", "row avg");
        for (r, reference) in self.reference_backends.iter().enumerate() {
            let _ = write!(out, "{reference:<17}");
            for cell in &self.cells_pct[r] {
                let _ = write!(out, "{:>12}", fmt_pct_1dp(*cell));
            }
            let _ = writeln!(out, "{:>12}", fmt_pct_1dp(self.row_avgs_pct[r]));
        }
        let _ = write!(out, "{:<17}", "col avg");
        for avg in &self.col_avgs_pct {
            let _ = write!(out, "{:>12}", fmt_pct_1dp(*avg));
        }
        let _ = writeln!(out, "{:>12}", fmt_pct_1dp(self.overall_avg_pct));
        out
    }
}

fn tally_key(err: &StageError) -> String {
    let kind = err
        .source
        .downcast_ref::<GatewayError>()
        .map(GatewayError::kind_name)
        .unwrap_or("other");
    format!("{}:{}", err.stage.as_str(), kind)
}

/// Outcome of screening a manifest under one configuration.
#[derive(Debug, Clone)]
pub struct ScreeningRunOutcome {
    pub pairs: Vec<(Label, Label)>,
    pub strata: Vec<SampleStratum>,
    pub error_tallies: BTreeMap<String, u64>,
    pub verdicts: Vec<(String, Label)>,
    pub failures: Vec<(String, String)>,
}

/// Screen every manifest entry end to end under `run_id`, in parallel up to
/// the configured concurrency bound. Per-sample failures are tallied, not
/// fatal.
pub fn screen_manifest(
    screener: &Screener,
    manifest: &DatasetManifest,
    run_id: &str,
) -> ScreeningRunOutcome {
    let results = parallel_map(
        screener.config().concurrency,
        manifest.entries.clone(),
        |entry| {
            let outcome = screener.screen(
                run_id,
                &entry.sample_id,
                &entry.gcode_path,
                &entry.printer,
                &entry.material,
            );
            (entry.clone(), outcome)
        },
    );

    let mut outcome = ScreeningRunOutcome {
        pairs: Vec::new(),
        strata: Vec::new(),
        error_tallies: BTreeMap::new(),
        verdicts: Vec::new(),
        failures: Vec::new(),
    };
    for (entry, result) in results {
        match result {
            Ok(screened) => {
                outcome.pairs.push((entry.true_label, screened.verdict.label));
                outcome.strata.push(SampleStratum {
                    printer: entry.printer.clone(),
                    material: entry.material.clone(),
                });
                outcome.verdicts.push((entry.sample_id.clone(), screened.verdict.label));
            }
            Err(err) => {
                *outcome.error_tallies.entry(tally_key(&err)).or_insert(0) += 1;
                outcome.failures.push((entry.sample_id.clone(), err.to_string()));
            }
        }
    }
    outcome
}

/// Grid study output: the accuracy grid plus the full per-cell reports.
#[derive(Debug, Clone, Serialize)]
pub struct GridStudy {
    pub grid: GridReport,
    pub cell_reports: Vec<Vec<EvalReport>>,
}

/// Run the reference×judge grid. Extraction runs once per sample with the
/// configured extractor backend and is reused across every cell; references
/// are cached per (backend, printer, material).
pub fn run_grid(
    screener: &Screener,
    manifest: &DatasetManifest,
    reference_backend_ids: &[String],
    judge_backend_ids: &[String],
) -> Result<GridStudy, EvalError> {
    if manifest.is_empty() || reference_backend_ids.is_empty() || judge_backend_ids.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let extractor_backend = screener
        .config()
        .role_backend("extractor")
        .map_err(|e| StageError::new(crate::agents::StageName::Extract, e))?;

    struct Prepared {
        entry: ManifestEntry,
        shortened: crate::gcode::ShortenedGcode,
        extracted: ExtractedParameters,
    }

    let mut shared_tallies: BTreeMap<String, u64> = BTreeMap::new();
    let prepared: Vec<Prepared> = parallel_map(
        screener.config().concurrency,
        manifest.entries.clone(),
        |entry| -> Result<Prepared, StageError> {
            let text = std::fs::read_to_string(&entry.gcode_path).map_err(|e| {
                StageError::message(
                    crate::agents::StageName::Input,
                    format!("{}: {e}", entry.gcode_path.display()),
                )
            })?;
            let doc = parse_gcode(&text);
            let shortened = shorten_gcode(&doc, &screener.config().policy);
            let extracted = screener.run_extractor(&extractor_backend, &shortened)?;
            Ok(Prepared { entry: entry.clone(), shortened, extracted })
        },
    )
    .into_iter()
    .filter_map(|r| match r {
        Ok(p) => Some(p),
        Err(e) => {
            *shared_tallies.entry(tally_key(&e)).or_insert(0) += 1;
            None
        }
    })
    .collect();

    let mut cells_pct = Vec::with_capacity(reference_backend_ids.len());
    let mut cell_reports = Vec::with_capacity(reference_backend_ids.len());
    for reference_id in reference_backend_ids {
        let reference_backend = screener
            .config()
            .backend(reference_id)
            .map_err(|e| StageError::new(crate::agents::StageName::Reference, e))?;
        let mut row_pct = Vec::with_capacity(judge_backend_ids.len());
        let mut row_reports = Vec::with_capacity(judge_backend_ids.len());
        for judge_id in judge_backend_ids {
            let judge_backend = screener
                .config()
                .backend(judge_id)
                .map_err(|e| StageError::new(crate::agents::StageName::Judge, e))?;
            let mut pairs = Vec::new();
            let mut strata = Vec::new();
            let mut tallies = shared_tallies.clone();
            for sample in &prepared {
                let cell_outcome = (|| -> Result<Label, StageError> {
                    let docs = screener
                        .config()
                        .doc_bundle(&sample.entry.printer, &sample.entry.material)
                        .map_err(|e| StageError::new(crate::agents::StageName::Reference, e))?;
                    let reference = screener.run_reference(&reference_backend, &docs)?;
                    let table = crate::deviation::build_deviation_table(
                        &sample.extracted,
                        &reference,
                        &screener.config().critical,
                    )
                    .map_err(|e| StageError::new(crate::agents::StageName::Compare, e))?;
                    let bundle = crate::agents::EvidenceBundle {
                        sample_id: sample.entry.sample_id.clone(),
                        printer: sample.entry.printer.clone(),
                        material: sample.entry.material.clone(),
                        shortened: sample.shortened.clone(),
                        extracted: sample.extracted.clone(),
                        reference,
                        table,
                    };
                    Ok(screener.run_judge(&judge_backend, &bundle)?.0.label)
                })();
                match cell_outcome {
                    Ok(pred) => {
                        pairs.push((sample.entry.true_label, pred));
                        strata.push(SampleStratum {
                            printer: sample.entry.printer.clone(),
                            material: sample.entry.material.clone(),
                        });
                    }
                    Err(e) => {
                        *tallies.entry(tally_key(&e)).or_insert(0) += 1;
                    }
                }
            }
            let mut report = compute_metrics(&pairs, &strata)?;
            report.error_tallies = tallies;
            row_pct.push(report.accuracy * 100.0);
            row_reports.push(report);
        }
        cells_pct.push(row_pct);
        cell_reports.push(row_reports);
    }

    Ok(GridStudy {
        grid: GridReport::from_cells(
            reference_backend_ids.to_vec(),
            judge_backend_ids.to_vec(),
            cells_pct,
        ),
        cell_reports,
    })
}

/// One extraction-benchmark row, pooled over every scored cell of every
/// sample for one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub backend_id: String,
    pub samples: usize,
    pub cells: usize,
    pub overall_accuracy: f64,
    pub critical_accuracy: Option<f64>,
    pub overall_mape: Option<f64>,
    pub critical_mape: Option<f64>,
}

/// Render benchmark rows as an aligned text table.
pub fn benchmark_text_table(rows: &[BenchmarkRow]) -> String {
    let mut out = format!(
        "{:<16}{:>14}{:>14}{:>14}{:>14}\n",
        "backend", "overall acc", "critical acc", "overall MAPE", "critical MAPE"
    );
    let fmt_opt = |v: Option<f64>, pct: bool| match v {
        Some(v) if pct => format!("{v:.2}%"),
        Some(v) => format!("{v:.3}"),
        None => "n/a".to_string(),
    };
    for row in rows {
        let _ = writeln!(
            out,
            "{:<16}{:>14.3}{:>14}{:>14}{:>14}",
            row.backend_id,
            row.overall_accuracy,
            fmt_opt(row.critical_accuracy, false),
            fmt_opt(row.overall_mape, true),
            fmt_opt(row.critical_mape, true),
        );
    }
    out
}

/// Evaluate one or more extractor backends against manually recorded (here:
/// generated) ground-truth parameter files. Every manifest entry must carry
/// ground truth.
pub fn run_extraction_benchmark(
    screener: &Screener,
    manifest: &DatasetManifest,
    extractor_backend_ids: &[String],
    tol: &ToleranceSpec,
    critical: &CriticalSet,
) -> Result<Vec<BenchmarkRow>, EvalError> {
    if manifest.is_empty() || extractor_backend_ids.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    for entry in &manifest.entries {
        if entry.truth_params_path.is_none() {
            return Err(EvalError::MissingTruth(entry.sample_id.clone()));
        }
    }

    let mut rows = Vec::new();
    for backend_id in extractor_backend_ids {
        let backend = screener
            .config()
            .backend(backend_id)
            .map_err(|e| StageError::new(crate::agents::StageName::Extract, e))?;
        let cell_results = parallel_map(
            screener.config().concurrency,
            manifest.entries.clone(),
            |entry| -> Result<Vec<CellScore>, EvalError> {
                let truth_path = entry.truth_params_path.as_ref().expect("checked above");
                let truth: ExtractedParameters = serde_json::from_slice(
                    &std::fs::read(truth_path).map_err(|source| EvalError::ManifestIo {
                        path: truth_path.clone(),
                        source,
                    })?,
                )
                .map_err(|e| EvalError::ManifestParse { line: 0, detail: e.to_string() })?;
                let text = std::fs::read_to_string(&entry.gcode_path).map_err(|source| {
                    EvalError::ManifestIo { path: entry.gcode_path.clone(), source }
                })?;
                let doc = parse_gcode(&text);
                let shortened = shorten_gcode(&doc, &screener.config().policy);
                let extracted = screener.run_extractor(&backend, &shortened)?;
                let score = score_extraction(&extracted, &truth, tol, critical)
                    .map_err(|e| EvalError::ManifestParse { line: 0, detail: e.to_string() })?;
                Ok(score.cells)
            },
        );
        let mut pooled: Vec<CellScore> = Vec::new();
        let mut samples = 0usize;
        for result in cell_results {
            pooled.extend(result?);
            samples += 1;
        }
        let aggregated = aggregate_cells(&pooled, critical);
        rows.push(BenchmarkRow {
            backend_id: backend_id.clone(),
            samples,
            cells: pooled.len(),
            overall_accuracy: aggregated.overall_accuracy,
            critical_accuracy: aggregated.critical_accuracy,
            overall_mape: aggregated.overall_mape,
            critical_mape: aggregated.critical_mape,
        });
    }
    Ok(rows)
}

/// Per-combination split of a framework/baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboDelta {
    pub framework_accuracy_pct: f64,
    pub baseline_accuracy_pct: f64,
    pub delta_points: f64,
    pub samples: u64,
}

/// Side-by-side framework vs baseline evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub framework: EvalReport,
    pub baseline: EvalReport,
    /// Accuracy difference in percentage points (framework − baseline).
    pub delta_points: f64,
    pub per_combo: BTreeMap<String, ComboDelta>,
    pub framework_run_id: String,
}

/// Accuracy delta in percentage points between two percent-scale scores.
pub fn accuracy_delta_points(framework_pct: f64, baseline_pct: f64) -> f64 {
    framework_pct - baseline_pct
}

/// Run the full framework and the single-model baseline over the same
/// manifest and report both, with the per-combination split.
pub fn compare_framework_vs_baseline(
    framework: &Screener,
    baseline: &Screener,
    manifest: &DatasetManifest,
    family: PromptFamily,
) -> Result<ComparisonReport, EvalError> {
    if manifest.is_empty() {
        return Err(EvalError::EmptyInput);
    }

    let run_id = framework.start_run(None)?;
    let framework_outcome = screen_manifest(framework, manifest, &run_id);
    framework.finish_run(&run_id)?;
    let mut framework_report =
        compute_metrics(&framework_outcome.pairs, &framework_outcome.strata)?;
    framework_report.error_tallies = framework_outcome.error_tallies;

    let baseline_backend = baseline
        .config()
        .role_backend("baseline")
        .map_err(|e| StageError::new(crate::agents::StageName::Judge, e))?;
    let baseline_results = parallel_map(
        baseline.config().concurrency,
        manifest.entries.clone(),
        |entry| -> (ManifestEntry, Result<Label, StageError>) {
            let outcome = (|| {
                let text = std::fs::read_to_string(&entry.gcode_path).map_err(|e| {
                    StageError::message(
                        crate::agents::StageName::Input,
                        format!("{}: {e}", entry.gcode_path.display()),
                    )
                })?;
                let doc = parse_gcode(&text);
                let shortened = shorten_gcode(&doc, &baseline.config().policy);
                baseline.run_baseline(
                    &baseline_backend,
                    &shortened,
                    family,
                    &entry.printer,
                    &entry.material,
                )
            })();
            (entry.clone(), outcome)
        },
    );
    let mut baseline_pairs = Vec::new();
    let mut baseline_strata = Vec::new();
    let mut baseline_tallies = BTreeMap::new();
    for (entry, result) in baseline_results {
        match result {
            Ok(pred) => {
                baseline_pairs.push((entry.true_label, pred));
                baseline_strata.push(SampleStratum {
                    printer: entry.printer.clone(),
                    material: entry.material.clone(),
                });
            }
            Err(e) => {
                *baseline_tallies.entry(tally_key(&e)).or_insert(0) += 1;
            }
        }
    }
    let mut baseline_report = compute_metrics(&baseline_pairs, &baseline_strata)?;
    baseline_report.error_tallies = baseline_tallies;

    let mut per_combo = BTreeMap::new();
    for (key, framework_score) in &framework_report.strata {
        if !key.starts_with("combo:") {
            continue;
        }
        let Some(baseline_score) = baseline_report.strata.get(key) else { continue };
        per_combo.insert(
            key.clone(),
            ComboDelta {
                framework_accuracy_pct: framework_score.accuracy * 100.0,
                baseline_accuracy_pct: baseline_score.accuracy * 100.0,
                delta_points: accuracy_delta_points(
                    framework_score.accuracy * 100.0,
                    baseline_score.accuracy * 100.0,
                ),
                samples: framework_score.total,
            },
        );
    }

    Ok(ComparisonReport {
        delta_points: accuracy_delta_points(
            framework_report.accuracy * 100.0,
            baseline_report.accuracy * 100.0,
        ),
        framework: framework_report,
        baseline: baseline_report,
        per_combo,
        framework_run_id: run_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_strata(n: usize) -> Vec<SampleStratum> {
        (0..n)
            .map(|i| SampleStratum {
                printer: if i % 2 == 0 { "MK4S" } else { "BMP1" }.to_string(),
                material: if i % 4 < 2 { "PLA" } else { "ABS" }.to_string(),
            })
            .collect()
    }

    #[test]
    fn thirty_five_of_forty_is_0_875() {
        let mut pairs = Vec::new();
        for i in 0..40 {
            let truth = Label::ALL[i % 5];
            let pred = if i < 35 { truth } else { Label::ALL[(i + 1) % 5] };
            pairs.push((truth, pred));
        }
        let report = compute_metrics(&pairs, &uniform_strata(40)).unwrap();
        assert!((report.accuracy - 0.875).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_are_all_ones() {
        let pairs: Vec<_> = (0..25).map(|i| (Label::ALL[i % 5], Label::ALL[i % 5])).collect();
        let report = compute_metrics(&pairs, &uniform_strata(25)).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        for class in Label::ALL {
            assert_eq!(report.per_class_recall[&class], Some(1.0));
            assert_eq!(report.confusion.counts[class.index()][class.index()], 5);
        }
    }

    /// Independent brute-force macro-F1 for the fixed 25-pair fixture.
    fn oracle_macro_f1(pairs: &[(Label, Label)]) -> f64 {
        let mut f1s = Vec::new();
        for class in Label::ALL {
            let tp = pairs.iter().filter(|(t, p)| *t == class && *p == class).count() as f64;
            let truth_n = pairs.iter().filter(|(t, _)| *t == class).count() as f64;
            let pred_n = pairs.iter().filter(|(_, p)| *p == class).count() as f64;
            if truth_n == 0.0 {
                continue;
            }
            let r = tp / truth_n;
            let p = if pred_n > 0.0 { tp / pred_n } else { 0.0 };
            f1s.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        }
        f1s.iter().sum::<f64>() / f1s.len() as f64
    }

    #[test]
    fn macro_f1_matches_independent_oracle_on_25_pair_fixture() {
        use Label::*;
        // 5 samples per class with a fixed error pattern.
        let pairs = vec![
            (ND, ND), (ND, ND), (ND, WP), (ND, ST), (ND, ND),
            (UE, UE), (UE, UE), (UE, UE), (UE, OE), (UE, UE),
            (OE, OE), (OE, OE), (OE, OE), (OE, OE), (OE, UE),
            (WP, WP), (WP, WP), (WP, WP), (WP, WP), (WP, WP),
            (ST, ST), (ST, ST), (ST, ND), (ST, ST), (ST, ST),
        ];
        let report = compute_metrics(&pairs, &uniform_strata(25)).unwrap();
        let expected = oracle_macro_f1(&pairs);
        assert!((report.macro_f1 - expected).abs() < 1e-12);
        // Hand-derived: F1s are 2/3 (ND), 0.8 (UE), 0.8 (OE), 10/11 (WP),
        // 0.8 (ST); mean 0.7951515…
        let hand = (2.0 / 3.0 + 0.8 + 0.8 + 10.0 / 11.0 + 0.8) / 5.0;
        assert!((expected - hand).abs() < 1e-12, "oracle value drifted: {expected}");
    }

    #[test]
    fn absent_class_recall_is_null_and_excluded_from_macro() {
        let pairs = vec![(Label::ND, Label::ND), (Label::UE, Label::ND)];
        let report = compute_metrics(&pairs, &uniform_strata(2)).unwrap();
        assert_eq!(report.per_class_recall[&Label::ST], None);
        assert_eq!(report.per_class_recall[&Label::UE], Some(0.0));
        // Classes ND and UE participate: f1(ND)=2*0.5*1/1.5, f1(UE)=0.
        let expected = (2.0 * 0.5 * 1.0 / 1.5) / 2.0;
        assert!((report.macro_f1 - expected).abs() < 1e-12);
    }

    #[test]
    fn trace_over_total_equals_accuracy() {
        let pairs = vec![
            (Label::ND, Label::UE),
            (Label::UE, Label::UE),
            (Label::WP, Label::WP),
        ];
        let report = compute_metrics(&pairs, &uniform_strata(3)).unwrap();
        let cm = &report.confusion;
        assert!((cm.trace() as f64 / cm.total() as f64 - report.accuracy).abs() < 1e-15);
    }

    #[test]
    fn rounding_matches_published_averages() {
        // Row averages.
        assert_eq!(fmt_pct_1dp((75.0 + 80.0 + 85.0) / 3.0), "80.0");
        assert_eq!(fmt_pct_1dp((77.5 + 82.5 + 85.0) / 3.0), "81.7");
        assert_eq!(fmt_pct_1dp((65.0 + 85.0 + 87.5) / 3.0), "79.2");
        // Column averages.
        assert_eq!(fmt_pct_1dp((75.0 + 77.5 + 65.0) / 3.0), "72.5");
        assert_eq!(fmt_pct_1dp((80.0 + 82.5 + 85.0) / 3.0), "82.5");
        assert_eq!(fmt_pct_1dp((85.0 + 85.0 + 87.5) / 3.0), "85.8");
        // Half-up at an exact .x5 boundary.
        assert_eq!(fmt_pct_1dp(79.25), "79.3");
    }

    #[test]
    fn grid_report_computes_row_and_col_averages() {
        let cells = vec![
            vec![75.0, 80.0, 85.0],
            vec![77.5, 82.5, 85.0],
            vec![65.0, 85.0, 87.5],
        ];
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let grid = GridReport::from_cells(ids.clone(), ids, cells);
        let rows: Vec<String> = grid.row_avgs_pct.iter().map(|v| fmt_pct_1dp(*v)).collect();
        let cols: Vec<String> = grid.col_avgs_pct.iter().map(|v| fmt_pct_1dp(*v)).collect();
        assert_eq!(rows, ["80.0", "81.7", "79.2"]);
        assert_eq!(cols, ["72.5", "82.5", "85.8"]);
        assert_eq!(fmt_pct_1dp(grid.overall_avg_pct), "80.3");
        let table = grid.text_table();
        assert!(table.contains("85.8"));
    }

    #[test]
    fn one_by_one_grid_equals_single_cell() {
        let grid = GridReport::from_cells(
            vec!["r".to_string()],
            vec!["j".to_string()],
            vec![vec![87.5]],
        );
        assert_eq!(grid.row_avgs_pct, vec![87.5]);
        assert_eq!(grid.col_avgs_pct, vec![87.5]);
        assert_eq!(grid.overall_avg_pct, 87.5);
    }

    #[test]
    fn delta_points_reproduces_28() {
        assert!((accuracy_delta_points(87.5, 59.5) - 28.0).abs() < 1e-9);
        assert_eq!(accuracy_delta_points(50.0, 50.0), 0.0);
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(matches!(compute_metrics(&[], &[]), Err(EvalError::EmptyInput)));
        let pairs = vec![(Label::ND, Label::ND)];
        assert!(matches!(
            compute_metrics(&pairs, &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn manifest_round_trip_and_duplicate_detection() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                sample_id: "a".to_string(),
                gcode_path: PathBuf::from("gcodes/a.gcode"),
                printer: "MK4S".to_string(),
                material: "PLA".to_string(),
                true_label: Label::ND,
                truth_params_path: None,
            },
            ManifestEntry {
                sample_id: "b".to_string(),
                gcode_path: PathBuf::from("gcodes/b.gcode"),
                printer: "BMP1".to_string(),
                material: "ABS".to_string(),
                true_label: Label::UE,
                truth_params_path: Some(PathBuf::from("truth/b.json")),
            },
        ];
        let path = dir.path().join("manifest.jsonl");
        DatasetManifest::save(&entries, &path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.entries[0].gcode_path.starts_with(dir.path()));
        assert!(loaded.entries[1].truth_params_path.as_ref().unwrap().starts_with(dir.path()));

        let mut dup = entries.clone();
        dup.push(entries[0].clone());
        DatasetManifest::save(&dup, &path).unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(EvalError::DuplicateSampleId(_))
        ));
    }

    #[test]
    fn stratified_accuracies_weight_sum_to_overall() {
        let pairs: Vec<_> = (0..40)
            .map(|i| {
                let truth = Label::ALL[i % 5];
                let pred = if i % 7 == 0 { Label::ALL[(i + 2) % 5] } else { truth };
                (truth, pred)
            })
            .collect();
        let strata = uniform_strata(40);
        let report = compute_metrics(&pairs, &strata).unwrap();
        for prefix in ["printer:", "material:", "combo:"] {
            let (correct, total) = report
                .strata
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .fold((0u64, 0u64), |acc, (_, s)| (acc.0 + s.correct, acc.1 + s.total));
            assert_eq!(total as usize, pairs.len());
            assert!((correct as f64 / total as f64 - report.accuracy).abs() < 1e-12);
        }
    }
}
