//! The three pipeline roles (extractor, reference, judge), the single-model
//! baselines, and the end-to-end screening orchestration.
//!
//! `screen` runs parse → shorten → extract → normalize → reference (cached)
//! → deviation table → judge, persisting all five intermediate artifacts so
//! a failure or a questionable verdict can be traced to the stage that
//! produced it. With all-stub backends the whole pipeline is a
//! deterministic function of (file bytes, printer, material, config).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::deviation::{build_deviation_table, DeviationTable};
use crate::gateway::{
    baseline_output_schema, extraction_output_schema, reference_output_schema,
    verdict_output_schema, Gateway, RoleTag, StructuredRequest,
};
use crate::gcode::{parse_gcode, shorten_gcode, ShortenedGcode};
use crate::label::Label;
use crate::prompts::{self, PromptSet};
use crate::reference::{validate_reference, DocBundle, ReferenceCache, ReferenceRanges};
use crate::schema::{
    normalize_units, validate_extraction, ExtractedParameters, ParameterKey, ToleranceSpec,
};
use crate::store::{ArtifactStore, ConfigError, RunConfig, RunMeta, StageArtifact};

/// Pipeline stages, used to tag failures with their origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Input,
    Parse,
    Shorten,
    Extract,
    Reference,
    Compare,
    Judge,
    Persist,
}

impl StageName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Input => "input",
            StageName::Parse => "parse",
            StageName::Shorten => "shorten",
            StageName::Extract => "extract",
            StageName::Reference => "reference",
            StageName::Compare => "compare",
            StageName::Judge => "judge",
            StageName::Persist => "persist",
        }
    }
}

impl std::fmt::Display for StageName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A failure attributed to the pipeline stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: StageName,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync + 'static>,
}

impl StageError {
    pub fn new(
        stage: StageName,
        source: impl std::error::Error + Send + Sync + 'static,
    ) -> StageError {
        StageError { stage, source: Box::new(source) }
    }

    pub fn message(stage: StageName, message: impl Into<String>) -> StageError {
        StageError { stage, source: message.into().into() }
    }
}

/// Everything the judge sees for one sample.
#[derive(Debug, Clone)]
pub struct EvidenceBundle {
    pub sample_id: String,
    pub printer: String,
    pub material: String,
    pub shortened: ShortenedGcode,
    pub extracted: ExtractedParameters,
    pub reference: Arc<ReferenceRanges>,
    pub table: DeviationTable,
}

/// A verbatim quote from the shortened program, cited by 0-based line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub line: usize,
    pub quote: String,
}

/// The judge's final output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub label: Label,
    pub confidence: f64,
    pub support_summary: String,
    pub deviations_used: Vec<ParameterKey>,
    pub rationale: String,
    pub evidence_citations: Vec<Citation>,
}

/// Counts of judge-output elements dropped during verification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeDiagnostics {
    pub dropped_citations: usize,
    pub dropped_deviation_keys: usize,
}

/// Result of screening one sample: verdict plus artifact locations,
/// per-stage timings, and the backends that served each role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub sample_id: String,
    pub verdict: JudgeVerdict,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub timings_secs: BTreeMap<String, f64>,
    pub backends: BTreeMap<String, String>,
    pub diagnostics: JudgeDiagnostics,
}

/// Which single-model baseline prompt to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    FdmBenchStyle,
    Engineered,
}

impl PromptFamily {
    pub fn parse(s: &str) -> Option<PromptFamily> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fdm_bench" | "fdm_bench_style" => Some(PromptFamily::FdmBenchStyle),
            "engineered" => Some(PromptFamily::Engineered),
            _ => None,
        }
    }
}

fn to_artifact_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    bytes
}

/// The configured pipeline: gateway, prompt set, tolerance table, reference
/// cache, and artifact store. Safe to share across threads; concurrent
/// samples only contend on the reference cache.
pub struct Screener {
    config: RunConfig,
    gateway: Gateway,
    prompts: PromptSet,
    tolerances: ToleranceSpec,
    cache: ReferenceCache,
    store: ArtifactStore,
}

impl Screener {
    pub fn new(config: RunConfig) -> Result<Screener, ConfigError> {
        config.validate()?;
        let prompts = config.resolved_prompts()?;
        let tolerances = config.resolved_tolerances()?;
        let cache = ReferenceCache::new(&config.reference_cache_dir);
        let store = ArtifactStore::new(&config.artifact_root);
        Ok(Screener { config, gateway: Gateway::new(), prompts, tolerances, cache, store })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn cache(&self) -> &ReferenceCache {
        &self.cache
    }

    pub fn tolerances(&self) -> &ToleranceSpec {
        &self.tolerances
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Create a run directory with sealed-in config and prompt hashes.
    pub fn start_run(&self, run_id: Option<String>) -> Result<String, StageError> {
        let run_id = run_id.unwrap_or_else(ArtifactStore::generate_run_id);
        let meta = RunMeta {
            run_id: run_id.clone(),
            created_at_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            finished_at_unix: None,
            config_hash: self.config.config_hash(),
            prompt_hashes: self.prompts.hashes(),
            backend_roles: [
                ("extractor", &self.config.roles.extractor),
                ("reference", &self.config.roles.reference),
                ("judge", &self.config.roles.judge),
                ("baseline", &self.config.roles.baseline),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        self.store
            .begin_run(&meta)
            .map_err(|e| StageError::new(StageName::Persist, e))?;
        Ok(run_id)
    }

    pub fn finish_run(&self, run_id: &str) -> Result<(), StageError> {
        self.store.seal_run(run_id).map_err(|e| StageError::new(StageName::Persist, e))
    }

    /// Run the extractor role on a shortened program and map its output
    /// through schema validation and unit normalization.
    pub fn run_extractor(
        &self,
        backend: &crate::gateway::BackendDescriptor,
        shortened: &ShortenedGcode,
    ) -> Result<ExtractedParameters, StageError> {
        if shortened.text.trim().is_empty() {
            return Err(StageError::message(
                StageName::Extract,
                "shortened program is empty",
            ));
        }
        let request = StructuredRequest {
            system_prompt: self.prompts.extractor.system.clone(),
            user_content: self.prompts.extractor.render(&[("gcode", &shortened.text)]),
            output_schema: extraction_output_schema(),
            role_tag: RoleTag::Extractor,
        };
        let response = self
            .gateway
            .complete_structured(backend, &request)
            .map_err(|e| StageError::new(StageName::Extract, e))?;
        let validated = validate_extraction(&response.payload).map_err(|violations| {
            StageError::message(
                StageName::Extract,
                format!(
                    "extractor output failed schema mapping: {}",
                    violations
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join("; ")
                ),
            )
        })?;
        let mut normalized = normalize_units(&validated);
        normalized.source = backend.id.clone();
        Ok(normalized)
    }

    /// Run the reference role for a documentation bundle, served from the
    /// per-pair cache when available.
    pub fn run_reference(
        &self,
        backend: &crate::gateway::BackendDescriptor,
        docs: &DocBundle,
    ) -> Result<Arc<ReferenceRanges>, StageError> {
        if docs.documents.is_empty() {
            return Err(StageError::message(StageName::Reference, "empty documentation bundle"));
        }
        self.cache
            .get_or_build(&backend.id, &docs.printer, &docs.material, || {
                self.build_reference(backend, docs)
            })
            .map_err(|e| StageError::new(StageName::Reference, e))
    }

    fn build_reference(
        &self,
        backend: &crate::gateway::BackendDescriptor,
        docs: &DocBundle,
    ) -> Result<ReferenceRanges, StageError> {
        let request = StructuredRequest {
            system_prompt: self.prompts.reference.system.clone(),
            user_content: self.prompts.reference.render(&[
                ("printer", &docs.printer),
                ("material", &docs.material),
                ("documents", &prompts::render_documents(&docs.documents)),
            ]),
            output_schema: reference_output_schema(),
            role_tag: RoleTag::Reference,
        };
        let response = self
            .gateway
            .complete_structured(backend, &request)
            .map_err(|e| StageError::new(StageName::Reference, e))?;
        let mut validated = validate_reference(&response.payload).map_err(|violations| {
            StageError::message(
                StageName::Reference,
                format!(
                    "reference output failed schema mapping: {}",
                    violations
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join("; ")
                ),
            )
        })?;
        if validated.printer.is_empty() {
            validated.printer = docs.printer.clone();
        }
        if validated.material.is_empty() {
            validated.material = docs.material.clone();
        }
        validated.source_docs = docs.documents.iter().map(|(id, _)| id.clone()).collect();
        Ok(validated)
    }

    /// Run the judge role over an evidence bundle. Citations that do not
    /// appear verbatim at their cited line and deviation keys without table
    /// rows are dropped and counted in the diagnostics.
    pub fn run_judge(
        &self,
        backend: &crate::gateway::BackendDescriptor,
        bundle: &EvidenceBundle,
    ) -> Result<(JudgeVerdict, JudgeDiagnostics), StageError> {
        let extracted_json = serde_json::to_string_pretty(&bundle.extracted).unwrap();
        let reference_json = serde_json::to_string_pretty(bundle.reference.as_ref()).unwrap();
        let deviation_json = serde_json::to_string_pretty(&bundle.table).unwrap();
        let request = StructuredRequest {
            system_prompt: self.prompts.judge.system.clone(),
            user_content: self.prompts.judge.render(&[
                ("printer", &bundle.printer),
                ("material", &bundle.material),
                ("extracted_json", &extracted_json),
                ("reference_json", &reference_json),
                ("deviation_json", &deviation_json),
                ("gcode", &bundle.shortened.text),
            ]),
            output_schema: verdict_output_schema(),
            role_tag: RoleTag::Judge,
        };
        let response = self
            .gateway
            .complete_structured(backend, &request)
            .map_err(|e| StageError::new(StageName::Judge, e))?;
        parse_verdict(&response.payload, &bundle.table, &bundle.shortened.text)
    }

    /// Screen one file end to end, persisting the five stage artifacts
    /// under `run_id/sample_id`.
    pub fn screen(
        &self,
        run_id: &str,
        sample_id: &str,
        gcode_path: &Path,
        printer: &str,
        material: &str,
    ) -> Result<ScreeningResult, StageError> {
        let mut timings = BTreeMap::new();
        let mut artifacts = BTreeMap::new();
        let mut stopwatch = Stopwatch::new();

        let text = std::fs::read(gcode_path)
            .map_err(|e| StageError::message(StageName::Input, format!("{}: {e}", gcode_path.display())))
            .and_then(|bytes| {
                String::from_utf8(bytes).map_err(|e| {
                    StageError::message(StageName::Input, format!("not valid UTF-8 text: {e}"))
                })
            })?;
        timings.insert("input".to_string(), stopwatch.lap());

        let doc = parse_gcode(&text);
        timings.insert("parse".to_string(), stopwatch.lap());

        let shortened = shorten_gcode(&doc, &self.config.policy);
        timings.insert("shorten".to_string(), stopwatch.lap());
        let path = self
            .store
            .persist(run_id, sample_id, StageArtifact::Shortened, shortened.text.as_bytes())
            .map_err(|e| StageError::new(StageName::Persist, e))?;
        artifacts.insert("shortened".to_string(), path);

        let extractor_backend = self
            .config
            .role_backend("extractor")
            .map_err(|e| StageError::new(StageName::Extract, e))?;
        let extracted = self.run_extractor(&extractor_backend, &shortened)?;
        timings.insert("extract".to_string(), stopwatch.lap());
        let path = self
            .store
            .persist(run_id, sample_id, StageArtifact::Extracted, &to_artifact_bytes(&extracted))
            .map_err(|e| StageError::new(StageName::Persist, e))?;
        artifacts.insert("extracted".to_string(), path);

        let reference_backend = self
            .config
            .role_backend("reference")
            .map_err(|e| StageError::new(StageName::Reference, e))?;
        let docs = self
            .config
            .doc_bundle(printer, material)
            .map_err(|e| StageError::new(StageName::Reference, e))?;
        let reference = self.run_reference(&reference_backend, &docs)?;
        timings.insert("reference".to_string(), stopwatch.lap());
        let path = self
            .store
            .persist(
                run_id,
                sample_id,
                StageArtifact::Reference,
                &to_artifact_bytes(reference.as_ref()),
            )
            .map_err(|e| StageError::new(StageName::Persist, e))?;
        artifacts.insert("reference".to_string(), path);

        let table = build_deviation_table(&extracted, &reference, &self.config.critical)
            .map_err(|e| StageError::new(StageName::Compare, e))?;
        timings.insert("compare".to_string(), stopwatch.lap());
        let path = self
            .store
            .persist(run_id, sample_id, StageArtifact::Deviation, &to_artifact_bytes(&table))
            .map_err(|e| StageError::new(StageName::Persist, e))?;
        artifacts.insert("deviation".to_string(), path);

        let bundle = EvidenceBundle {
            sample_id: sample_id.to_string(),
            printer: printer.to_string(),
            material: material.to_string(),
            shortened,
            extracted,
            reference,
            table,
        };
        let judge_backend = self
            .config
            .role_backend("judge")
            .map_err(|e| StageError::new(StageName::Judge, e))?;
        let (verdict, diagnostics) = self.run_judge(&judge_backend, &bundle)?;
        timings.insert("judge".to_string(), stopwatch.lap());
        let path = self
            .store
            .persist(run_id, sample_id, StageArtifact::Verdict, &to_artifact_bytes(&verdict))
            .map_err(|e| StageError::new(StageName::Persist, e))?;
        artifacts.insert("verdict".to_string(), path);

        Ok(ScreeningResult {
            sample_id: sample_id.to_string(),
            verdict,
            artifacts,
            timings_secs: timings,
            backends: [
                ("extractor".to_string(), extractor_backend.id),
                ("reference".to_string(), reference_backend.id),
                ("judge".to_string(), judge_backend.id),
            ]
            .into_iter()
            .collect(),
            diagnostics,
        })
    }

    /// Re-run only the judge stage from the persisted upstream artifacts of
    /// an earlier screen. Supports audit: corrupting or deleting the verdict
    /// leaves the other stages' inputs untouched.
    pub fn rejudge(
        &self,
        run_id: &str,
        sample_id: &str,
    ) -> Result<(JudgeVerdict, JudgeDiagnostics), StageError> {
        let load = |stage: StageArtifact| -> Result<Vec<u8>, StageError> {
            self.store
                .load(run_id, sample_id, stage)
                .map_err(|e| StageError::new(StageName::Judge, e))
        };
        let shortened_text = String::from_utf8(load(StageArtifact::Shortened)?)
            .map_err(|e| StageError::message(StageName::Judge, e.to_string()))?;
        let extracted: ExtractedParameters = serde_json::from_slice(&load(StageArtifact::Extracted)?)
            .map_err(|e| StageError::message(StageName::Judge, format!("extracted.json: {e}")))?;
        let reference: ReferenceRanges = serde_json::from_slice(&load(StageArtifact::Reference)?)
            .map_err(|e| StageError::message(StageName::Judge, format!("reference.json: {e}")))?;
        let table: DeviationTable = serde_json::from_slice(&load(StageArtifact::Deviation)?)
            .map_err(|e| StageError::message(StageName::Judge, format!("deviation.json: {e}")))?;

        let doc = parse_gcode(&shortened_text);
        let shortened = ShortenedGcode {
            text: shortened_text,
            kept_spans: Vec::new(),
            original_line_count: doc.line_count(),
            kept_line_count: doc.line_count(),
            degraded: false,
        };
        let bundle = EvidenceBundle {
            sample_id: sample_id.to_string(),
            printer: table.printer.clone(),
            material: table.material.clone(),
            shortened,
            extracted,
            reference: Arc::new(reference),
            table,
        };
        let judge_backend = self
            .config
            .role_backend("judge")
            .map_err(|e| StageError::new(StageName::Judge, e))?;
        self.run_judge(&judge_backend, &bundle)
    }

    /// Single-model baseline: one gateway call on the shortened program,
    /// no extractor, reference, or deviation stages.
    pub fn run_baseline(
        &self,
        backend: &crate::gateway::BackendDescriptor,
        shortened: &ShortenedGcode,
        family: PromptFamily,
        printer: &str,
        material: &str,
    ) -> Result<Label, StageError> {
        if shortened.text.trim().is_empty() {
            return Err(StageError::message(StageName::Judge, "shortened program is empty"));
        }
        let template = match family {
            PromptFamily::FdmBenchStyle => &self.prompts.baseline_fdm_bench,
            PromptFamily::Engineered => &self.prompts.baseline_engineered,
        };
        let request = StructuredRequest {
            system_prompt: template.system.clone(),
            user_content: template.render(&[
                ("gcode", &shortened.text),
                ("printer", printer),
                ("material", material),
            ]),
            output_schema: baseline_output_schema(),
            role_tag: RoleTag::Baseline,
        };
        let response = self
            .gateway
            .complete_structured(backend, &request)
            .map_err(|e| StageError::new(StageName::Judge, e))?;
        let label_str = response.payload["label"].as_str().unwrap_or_default();
        Label::parse(label_str).ok_or_else(|| {
            StageError::message(
                StageName::Judge,
                format!("baseline returned a label outside the class set: \"{label_str}\""),
            )
        })
    }
}

/// Parse and verify a judge payload against the deviation table and
/// shortened text it claims to cite.
fn parse_verdict(
    payload: &Value,
    table: &DeviationTable,
    shortened_text: &str,
) -> Result<(JudgeVerdict, JudgeDiagnostics), StageError> {
    #[derive(Deserialize)]
    struct RawCitation {
        line: i64,
        quote: String,
    }
    #[derive(Deserialize)]
    struct RawVerdict {
        label: String,
        confidence: f64,
        #[serde(default)]
        support_summary: String,
        #[serde(default)]
        deviations_used: Vec<String>,
        #[serde(default)]
        rationale: String,
        #[serde(default)]
        evidence_citations: Vec<RawCitation>,
    }

    let raw: RawVerdict = serde_json::from_value(payload.clone())
        .map_err(|e| StageError::message(StageName::Judge, format!("verdict shape: {e}")))?;
    let label = Label::parse(&raw.label).ok_or_else(|| {
        StageError::message(
            StageName::Judge,
            format!("verdict label outside the class set: \"{}\"", raw.label),
        )
    })?;

    let mut diagnostics = JudgeDiagnostics::default();
    let mut deviations_used = Vec::new();
    for name in &raw.deviations_used {
        match ParameterKey::parse(name.trim()) {
            Some(key) if table.row(key).is_some() => deviations_used.push(key),
            _ => diagnostics.dropped_deviation_keys += 1,
        }
    }

    let lines: Vec<&str> = shortened_text.lines().collect();
    let mut citations = Vec::new();
    for c in raw.evidence_citations {
        let verifiable = usize::try_from(c.line)
            .ok()
            .and_then(|idx| lines.get(idx))
            .is_some_and(|line| !c.quote.is_empty() && line.contains(c.quote.as_str()));
        if verifiable {
            citations.push(Citation { line: c.line as usize, quote: c.quote });
        } else {
            diagnostics.dropped_citations += 1;
        }
    }

    Ok((
        JudgeVerdict {
            label,
            confidence: raw.confidence.clamp(0.0, 1.0),
            support_summary: raw.support_summary,
            deviations_used,
            rationale: raw.rationale,
            evidence_citations: citations,
        },
        diagnostics,
    ))
}

struct Stopwatch {
    last: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        Stopwatch { last: Instant::now() }
    }

    fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let elapsed = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        elapsed
    }
}

/// Run `f` over `items` with at most `bound` worker threads. Results come
/// back in input order; aggregation is order-independent.
pub fn parallel_map<T, R, F>(bound: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send + Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let bound = bound.max(1).min(items.len().max(1));
    if bound <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let slots = std::sync::Mutex::new(slots);
    std::thread::scope(|scope| {
        for _ in 0..bound {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let result = f(&items[index]);
                slots.lock().unwrap()[index] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
