//! Prompt templates for the three pipeline roles and the single-model
//! baselines.
//!
//! Templates are versioned files shipped with the artifact (and overridable
//! from a directory at run time); their hashes go into each run's metadata
//! so drift between two runs is detectable. Each file holds a system prompt
//! and a user-content template separated by a `---` line; user templates use
//! `{{name}}` placeholders.
//!
//! The `BEGIN/END` section markers below delimit machine-readable evidence
//! inside rendered prompts. The offline stub backends locate their inputs
//! through these markers, so overriding templates must preserve them.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

pub const GCODE_BEGIN: &str = "----- BEGIN GCODE -----";
pub const GCODE_END: &str = "----- END GCODE -----";
pub const DOCUMENTS_BEGIN: &str = "----- BEGIN DOCUMENTS -----";
pub const DOCUMENTS_END: &str = "----- END DOCUMENTS -----";
pub const EXTRACTED_BEGIN: &str = "----- BEGIN EXTRACTED PARAMETERS JSON -----";
pub const EXTRACTED_END: &str = "----- END EXTRACTED PARAMETERS JSON -----";
pub const REFERENCE_BEGIN: &str = "----- BEGIN REFERENCE RANGES JSON -----";
pub const REFERENCE_END: &str = "----- END REFERENCE RANGES JSON -----";
pub const DEVIATION_BEGIN: &str = "----- BEGIN DEVIATION TABLE JSON -----";
pub const DEVIATION_END: &str = "----- END DEVIATION TABLE JSON -----";

/// One template: system prompt plus user-content template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    fn parse(text: &str) -> PromptTemplate {
        match text.split_once("\n---\n") {
            Some((system, user)) => PromptTemplate {
                system: system.trim().to_string(),
                user: user.to_string(),
            },
            None => PromptTemplate { system: String::new(), user: text.to_string() },
        }
    }

    /// Replace `{{name}}` placeholders in the user template. Single-pass
    /// over the template, so placeholder-like text inside substituted
    /// values is never re-expanded.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let template = &self.user;
        let mut out = String::with_capacity(template.len());
        let mut rest = template.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    let name = &after[..end];
                    match vars.iter().find(|(n, _)| *n == name) {
                        Some((_, value)) => out.push_str(value),
                        None => {
                            out.push_str("{{");
                            out.push_str(name);
                            out.push_str("}}");
                        }
                    }
                    rest = &after[end + 2..];
                }
                None => {
                    out.push_str(&rest[start..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// The full template set used by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub extractor: PromptTemplate,
    pub reference: PromptTemplate,
    pub judge: PromptTemplate,
    pub baseline_fdm_bench: PromptTemplate,
    pub baseline_engineered: PromptTemplate,
}

const FILE_NAMES: [&str; 5] = [
    "extractor.txt",
    "reference.txt",
    "judge.txt",
    "baseline_fdm_bench.txt",
    "baseline_engineered.txt",
];

impl PromptSet {
    /// Templates compiled into the binary.
    pub fn builtin() -> PromptSet {
        PromptSet {
            extractor: PromptTemplate::parse(include_str!("../assets/prompts/extractor.txt")),
            reference: PromptTemplate::parse(include_str!("../assets/prompts/reference.txt")),
            judge: PromptTemplate::parse(include_str!("../assets/prompts/judge.txt")),
            baseline_fdm_bench: PromptTemplate::parse(include_str!(
                "../assets/prompts/baseline_fdm_bench.txt"
            )),
            baseline_engineered: PromptTemplate::parse(include_str!(
                "../assets/prompts/baseline_engineered.txt"
            )),
        }
    }

    /// Load overrides from a directory holding the five template files.
    pub fn load_dir(dir: &Path) -> std::io::Result<PromptSet> {
        let read = |name: &str| -> std::io::Result<PromptTemplate> {
            Ok(PromptTemplate::parse(&std::fs::read_to_string(dir.join(name))?))
        };
        Ok(PromptSet {
            extractor: read(FILE_NAMES[0])?,
            reference: read(FILE_NAMES[1])?,
            judge: read(FILE_NAMES[2])?,
            baseline_fdm_bench: read(FILE_NAMES[3])?,
            baseline_engineered: read(FILE_NAMES[4])?,
        })
    }

    /// SHA-256 per template (system and user content), keyed by role, for
    /// run metadata.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let digest = |t: &PromptTemplate| {
            let mut h = Sha256::new();
            h.update(t.system.as_bytes());
            h.update([0u8]);
            h.update(t.user.as_bytes());
            hex_digest(h)
        };
        [
            ("extractor", &self.extractor),
            ("reference", &self.reference),
            ("judge", &self.judge),
            ("baseline_fdm_bench", &self.baseline_fdm_bench),
            ("baseline_engineered", &self.baseline_engineered),
        ]
        .into_iter()
        .map(|(name, t)| (name.to_string(), digest(t)))
        .collect()
    }
}

/// Finish a SHA-256 and render it as lowercase hex.
pub fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .fold(String::with_capacity(64), |mut acc, b| {
            use std::fmt::Write;
            let _ = write!(acc, "{b:02x}");
            acc
        })
}

/// Extract the text between two section markers, trimming the newline that
/// follows the opening marker and precedes the closing one.
pub fn section<'a>(content: &'a str, begin: &str, end: &str) -> Option<&'a str> {
    let start = content.find(begin)? + begin.len();
    let rest = &content[start..];
    let stop = rest.find(end)?;
    Some(rest[..stop].trim_matches('\n'))
}

/// Wrap each document of a bundle in per-document markers for the
/// reference prompt.
pub fn render_documents(documents: &[(String, String)]) -> String {
    let mut out = String::new();
    for (id, text) in documents {
        out.push_str(&format!("--- document: {id} ---\n{text}\n--- end document: {id} ---\n"));
    }
    out
}

/// Value of a `Key: value` line in rendered prompt content.
pub fn header_value<'a>(content: &'a str, header: &str) -> Option<&'a str> {
    content
        .lines()
        .find_map(|line| line.strip_prefix(header))
        .map(str::trim)
}
