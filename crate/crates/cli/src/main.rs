//! gscreen: pre-print screening of FFF machine programs from the command
//! line. Subcommands map one-to-one onto the library pipeline stages plus
//! the evaluation harness; `--json` switches stdout to machine-readable
//! output. Exit codes: 0 success, 1 pipeline failure (stage-tagged on
//! stderr), 2 usage or configuration errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gscreen_core::agents::{PromptFamily, Screener};
use gscreen_core::corpus::generate_corpus;
use gscreen_core::deviation::{build_deviation_table, DeviationTable};
use gscreen_core::eval::{
    benchmark_text_table, compare_framework_vs_baseline, fmt_pct_1dp, run_extraction_benchmark,
    run_grid, DatasetManifest,
};
use gscreen_core::gcode::{parse_gcode, shorten_gcode, LineKind, ShorteningPolicy};
use gscreen_core::reference::ReferenceRanges;
use gscreen_core::schema::ExtractedParameters;
use gscreen_core::store::{ConfigError, DocsEntry, RunConfig};

#[derive(Parser)]
#[command(name = "gscreen", version, about = "Pre-print screening for FFF machine programs")]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Run configuration file (TOML). Defaults to an offline all-stub
    /// configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PairArgs {
    /// Printer identifier (e.g. MK4S).
    #[arg(long)]
    printer: String,
    /// Material identifier (e.g. PLA).
    #[arg(long)]
    material: String,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a program and report its structure.
    Parse { file: PathBuf },
    /// Apply the shortening preprocessor.
    Shorten {
        file: PathBuf,
        /// Initial printed layers to keep.
        #[arg(long, default_value_t = 3)]
        head_layers: usize,
        #[arg(long)]
        no_final_layer: bool,
        #[arg(long)]
        no_config: bool,
        #[arg(long)]
        no_init: bool,
        /// Write the shortened program here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Write the kept-spans sidecar JSON here.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Extract process parameters from a program.
    Extract { file: PathBuf },
    /// Build recommended ranges for a printer-material pair.
    Reference {
        #[command(flatten)]
        pair: PairArgs,
        /// Documentation files; overrides the config's docs for this pair.
        #[arg(long)]
        docs: Vec<PathBuf>,
    },
    /// Compute the deviation table from persisted artifacts.
    Compare {
        #[arg(long)]
        extracted: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Run the judge over persisted stage artifacts.
    Judge {
        #[arg(long)]
        shortened: PathBuf,
        #[arg(long)]
        extracted: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        deviation: PathBuf,
    },
    /// Screen a program end to end and persist the stage artifacts.
    Screen {
        file: PathBuf,
        #[command(flatten)]
        pair: PairArgs,
        /// Use a fixed run id instead of a generated one.
        #[arg(long)]
        run_id: Option<String>,
        /// Documentation files; overrides the config's docs for this pair.
        #[arg(long)]
        docs: Vec<PathBuf>,
    },
    /// Classify with a single-model baseline (no extraction, reference, or
    /// comparison stages).
    Baseline {
        file: PathBuf,
        #[arg(long, default_value = "engineered")]
        family: String,
        #[arg(long, default_value = "")]
        printer: String,
        #[arg(long, default_value = "")]
        material: String,
    },
    /// Extraction benchmark over a manifest with ground truth.
    EvalExtraction {
        #[arg(long)]
        manifest: PathBuf,
        /// Extractor backend ids (comma-separated); defaults to the
        /// configured extractor role.
        #[arg(long, value_delimiter = ',')]
        backends: Vec<String>,
    },
    /// Reference x judge accuracy grid over a manifest.
    EvalGrid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        reference_backends: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        judge_backends: Vec<String>,
    },
    /// Framework vs single-model baseline over a manifest.
    EvalCompare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "engineered")]
        family: String,
    },
    /// Generate the synthetic 20-sample corpus with docs, ground truth,
    /// manifest, and an all-stub run config.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.downcast_ref::<ConfigError>().is_some()
                || err.downcast_ref::<UsageError>().is_some();
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Route a pair's documentation through `--docs` overrides when given.
fn apply_docs_override(config: &mut RunConfig, printer: &str, material: &str, docs: &[PathBuf]) {
    if docs.is_empty() {
        return;
    }
    config.docs.retain(|d| {
        !(d.printer.eq_ignore_ascii_case(printer) && d.material.eq_ignore_ascii_case(material))
    });
    config.docs.push(DocsEntry {
        printer: printer.to_string(),
        material: material.to_string(),
        paths: docs.to_vec(),
    });
}

fn read_program(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("input: {}", path.display()))?;
    String::from_utf8(bytes).map_err(|e| anyhow!("input: {} is not text: {e}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_family(name: &str) -> Result<PromptFamily> {
    PromptFamily::parse(name).ok_or_else(|| {
        anyhow!(UsageError(format!(
            "unknown prompt family \"{name}\" (expected fdm-bench or engineered)"
        )))
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Parse { file } => {
            let text = read_program(&file)?;
            let doc = parse_gcode(&text);
            let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
            for line in &doc.lines {
                let name = match line.kind {
                    LineKind::Command => "command",
                    LineKind::Comment => "comment",
                    LineKind::ConfigComment => "config_comment",
                    LineKind::Blank => "blank",
                };
                *kinds.entry(name).or_insert(0) += 1;
            }
            let summary = serde_json::json!({
                "file": file,
                "line_count": doc.line_count(),
                "kinds": kinds,
                "layer_count": doc.layer_starts.len(),
                "layer_starts": doc.layer_starts.iter().take(10).collect::<Vec<_>>(),
                "config_span": doc.config_span,
                "config_entries": gscreen_core::gcode::extract_config_comments(&doc).len(),
                "diagnostics": doc.diagnostics,
            });
            if cli.json {
                print_json(&summary)?;
            } else {
                println!("{}: {} lines, {} layers", file.display(), doc.line_count(), doc.layer_starts.len());
                println!("kinds: {kinds:?}");
                println!(
                    "config: {} entries, span {:?}",
                    summary["config_entries"], doc.config_span
                );
                println!(
                    "diagnostics: {} passthrough line(s), {} malformed param(s)",
                    doc.diagnostics.passthrough_lines, doc.diagnostics.malformed_params
                );
            }
            Ok(())
        }
        Command::Shorten { file, head_layers, no_final_layer, no_config, no_init, output, sidecar } => {
            let text = read_program(&file)?;
            let doc = parse_gcode(&text);
            let policy = ShorteningPolicy {
                head_layers,
                keep_final_layer: !no_final_layer,
                keep_config: !no_config,
                keep_init: !no_init,
            };
            let short = shorten_gcode(&doc, &policy);
            if let Some(path) = &sidecar {
                std::fs::write(path, serde_json::to_string_pretty(&short.sidecar())?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            match (&output, cli.json) {
                (Some(path), _) => {
                    std::fs::write(path, &short.text)
                        .with_context(|| format!("writing {}", path.display()))?;
                    print_json(&short.sidecar())?;
                }
                (None, true) => {
                    print_json(&serde_json::json!({
                        "sidecar": short.sidecar(),
                        "text": short.text,
                    }))?;
                }
                (None, false) => print!("{}", short.text),
            }
            Ok(())
        }
        Command::Extract { file } => {
            let config = load_config(&cli.config)?;
            let screener = Screener::new(config)?;
            let backend = screener.config().role_backend("extractor")?;
            let text = read_program(&file)?;
            let short = shorten_gcode(&parse_gcode(&text), &screener.config().policy);
            let extracted = screener.run_extractor(&backend, &short)?;
            print_json(&extracted)
        }
        Command::Reference { pair, docs } => {
            let mut config = load_config(&cli.config)?;
            apply_docs_override(&mut config, &pair.printer, &pair.material, &docs);
            let screener = Screener::new(config)?;
            let backend = screener.config().role_backend("reference")?;
            let bundle = screener.config().doc_bundle(&pair.printer, &pair.material)?;
            let reference = screener.run_reference(&backend, &bundle)?;
            print_json(reference.as_ref())
        }
        Command::Compare { extracted, reference } => {
            let config = load_config(&cli.config)?;
            let extracted: ExtractedParameters = read_json(&extracted)?;
            let reference: ReferenceRanges = read_json(&reference)?;
            let table = build_deviation_table(&extracted, &reference, &config.critical)?;
            print_json(&table)
        }
        Command::Judge { shortened, extracted, reference, deviation } => {
            let config = load_config(&cli.config)?;
            let screener = Screener::new(config)?;
            let backend = screener.config().role_backend("judge")?;
            let shortened_text = read_program(&shortened)?;
            let table: DeviationTable = read_json(&deviation)?;
            let bundle = gscreen_core::agents::EvidenceBundle {
                sample_id: shortened.display().to_string(),
                printer: table.printer.clone(),
                material: table.material.clone(),
                shortened: {
                    let doc = parse_gcode(&shortened_text);
                    gscreen_core::gcode::ShortenedGcode {
                        original_line_count: doc.line_count(),
                        kept_line_count: doc.line_count(),
                        text: shortened_text,
                        kept_spans: Vec::new(),
                        degraded: false,
                    }
                },
                extracted: read_json(&extracted)?,
                reference: std::sync::Arc::new(read_json(&reference)?),
                table,
            };
            let (verdict, diagnostics) = screener.run_judge(&backend, &bundle)?;
            if cli.json {
                print_json(&serde_json::json!({"verdict": verdict, "diagnostics": diagnostics}))
            } else {
                print_json(&verdict)
            }
        }
        Command::Screen { file, pair, run_id, docs } => {
            let mut config = load_config(&cli.config)?;
            apply_docs_override(&mut config, &pair.printer, &pair.material, &docs);
            let screener = Screener::new(config)?;
            let run_id = screener.start_run(run_id)?;
            let sample_id = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sample".to_string());
            let result = screener.screen(&run_id, &sample_id, &file, &pair.printer, &pair.material)?;
            screener.finish_run(&run_id)?;
            if cli.json {
                print_json(&result)?;
            } else {
                print_json(&result.verdict)?;
            }
            eprintln!(
                "run {} complete; artifacts under {}",
                run_id,
                screener.store().sample_dir(&run_id, &sample_id).display()
            );
            Ok(())
        }
        Command::Baseline { file, family, printer, material } => {
            let family = parse_family(&family)?;
            let config = load_config(&cli.config)?;
            let screener = Screener::new(config)?;
            let backend = screener.config().role_backend("baseline")?;
            let text = read_program(&file)?;
            let short = shorten_gcode(&parse_gcode(&text), &screener.config().policy);
            let label = screener.run_baseline(&backend, &short, family, &printer, &material)?;
            if cli.json {
                print_json(&serde_json::json!({"label": label}))?;
            } else {
                println!("{label}");
            }
            Ok(())
        }
        Command::EvalExtraction { manifest, backends } => {
            let config = load_config(&cli.config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let screener = Screener::new(config)?;
            let backend_ids = if backends.is_empty() {
                vec![screener.config().roles.extractor.clone()]
            } else {
                backends
            };
            let tolerances = screener.tolerances().clone();
            let critical = screener.config().critical.clone();
            let rows =
                run_extraction_benchmark(&screener, &manifest, &backend_ids, &tolerances, &critical)?;
            if cli.json {
                print_json(&rows)
            } else {
                print!("{}", benchmark_text_table(&rows));
                Ok(())
            }
        }
        Command::EvalGrid { manifest, reference_backends, judge_backends } => {
            let config = load_config(&cli.config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let screener = Screener::new(config)?;
            let default_ids = |role: &str| -> Vec<String> {
                vec![match role {
                    "reference" => screener.config().roles.reference.clone(),
                    _ => screener.config().roles.judge.clone(),
                }]
            };
            let reference_ids = if reference_backends.is_empty() {
                default_ids("reference")
            } else {
                reference_backends
            };
            let judge_ids =
                if judge_backends.is_empty() { default_ids("judge") } else { judge_backends };
            let study = run_grid(&screener, &manifest, &reference_ids, &judge_ids)?;
            if cli.json {
                print_json(&study)?;
            } else {
                print!("{}", study.grid.text_table());
            }
            let failures: u64 = study
                .cell_reports
                .iter()
                .flatten()
                .flat_map(|r| r.error_tallies.values())
                .sum();
            if failures > 0 {
                bail!("{failures} sample evaluation(s) hard-failed across the grid");
            }
            Ok(())
        }
        Command::EvalCompare { manifest, family } => {
            let family = parse_family(&family)?;
            let config = load_config(&cli.config)?;
            let manifest = DatasetManifest::load(&manifest)?;
            let framework = Screener::new(config.clone())?;
            let baseline = Screener::new(config)?;
            let report = compare_framework_vs_baseline(&framework, &baseline, &manifest, family)?;
            if cli.json {
                print_json(&report)?;
            } else {
                println!(
                    "framework accuracy {} vs baseline {} -> delta {} points",
                    fmt_pct_1dp(report.framework.accuracy * 100.0),
                    fmt_pct_1dp(report.baseline.accuracy * 100.0),
                    fmt_pct_1dp(report.delta_points.abs())
                        .trim_start_matches('-'),
                );
                println!("\nframework confusion (run {}):", report.framework_run_id);
                print!("{}", report.framework.confusion.text_table());
                println!("\nper printer-material combination (delta in points):");
                for (combo, delta) in &report.per_combo {
                    println!(
                        "  {combo}: framework {} baseline {} delta {}",
                        fmt_pct_1dp(delta.framework_accuracy_pct),
                        fmt_pct_1dp(delta.baseline_accuracy_pct),
                        fmt_pct_1dp(delta.delta_points)
                    );
                }
            }
            let failures: u64 = report
                .framework
                .error_tallies
                .values()
                .chain(report.baseline.error_tallies.values())
                .sum();
            if failures > 0 {
                bail!("{failures} sample evaluation(s) hard-failed");
            }
            Ok(())
        }
        Command::GenCorpus { out } => {
            let corpus = generate_corpus(&out).context("generating corpus")?;
            if cli.json {
                print_json(&serde_json::json!({
                    "samples": corpus.entries.len(),
                    "manifest": corpus.manifest_path,
                    "run_config": corpus.run_config_path,
                }))?;
            } else {
                println!(
                    "wrote {} samples, manifest {}, run config {}",
                    corpus.entries.len(),
                    corpus.manifest_path.display(),
                    corpus.run_config_path.display()
                );
            }
            Ok(())
        }
    }
}
