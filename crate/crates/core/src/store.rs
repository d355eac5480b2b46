//! Run configuration and the auditable artifact store.
//!
//! Layout: `root/<run_id>/<sample_id>/{shortened.gcode, extracted.json,
//! reference.json, deviation.json, verdict.json}` plus
//! `root/<run_id>/run_meta.json` (config hash, prompt hashes, timestamps).
//! Writes are atomic (write-temp-then-rename) and stage artifacts are never
//! silently overwritten — a re-run gets a new run id.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{BackendDescriptor, BackendKind};
use crate::gcode::ShorteningPolicy;
use crate::prompts::{hex_digest, PromptSet};
use crate::reference::DocBundle;
use crate::schema::{CriticalSet, ToleranceSpec};

/// The five per-sample stage artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageArtifact {
    Shortened,
    Extracted,
    Reference,
    Deviation,
    Verdict,
}

impl StageArtifact {
    pub const ALL: [StageArtifact; 5] = [
        StageArtifact::Shortened,
        StageArtifact::Extracted,
        StageArtifact::Reference,
        StageArtifact::Deviation,
        StageArtifact::Verdict,
    ];

    pub fn file_name(&self) -> &'static str {
        match self {
            StageArtifact::Shortened => "shortened.gcode",
            StageArtifact::Extracted => "extracted.json",
            StageArtifact::Reference => "reference.json",
            StageArtifact::Deviation => "deviation.json",
            StageArtifact::Verdict => "verdict.json",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact already exists: {0}")]
    AlreadyExists(PathBuf),
    #[error("run already exists: {0}")]
    RunExists(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Run-level metadata, written at run start and sealed at run end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub created_at_unix: u64,
    pub finished_at_unix: Option<u64>,
    pub config_hash: String,
    pub prompt_hashes: BTreeMap<String, String>,
    pub backend_roles: BTreeMap<String, String>,
    pub tool_version: String,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Sortable, collision-resistant id: UTC epoch seconds plus a short
    /// random suffix.
    pub fn generate_run_id() -> String {
        let suffix: u16 = rand::rng().random();
        format!("run-{:010}-{suffix:04x}", unix_now())
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn sample_dir(&self, run_id: &str, sample_id: &str) -> PathBuf {
        self.run_dir(run_id).join(sample_id)
    }

    pub fn artifact_path(&self, run_id: &str, sample_id: &str, stage: StageArtifact) -> PathBuf {
        self.sample_dir(run_id, sample_id).join(stage.file_name())
    }

    /// Create the run directory and write its metadata. Fails if the run id
    /// is already taken.
    pub fn begin_run(&self, meta: &RunMeta) -> Result<(), StoreError> {
        let dir = self.run_dir(&meta.run_id);
        if dir.exists() {
            return Err(StoreError::RunExists(meta.run_id.clone()));
        }
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join("run_meta.json");
        let json = serde_json::to_string_pretty(meta).expect("run meta serializes");
        atomic_write(&path, json.as_bytes(), true)?;
        Ok(())
    }

    /// Seal the run by recording its end timestamp. `run_meta.json` is the
    /// single deliberately rewritable file in a run directory.
    pub fn seal_run(&self, run_id: &str) -> Result<(), StoreError> {
        let path = self.run_dir(run_id).join("run_meta.json");
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let mut meta: RunMeta = serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::Io { path: path.clone(), source: std::io::Error::other(e) })?;
        meta.finished_at_unix = Some(unix_now());
        let json = serde_json::to_string_pretty(&meta).expect("run meta serializes");
        atomic_write(&path, json.as_bytes(), false)
    }

    pub fn read_meta(&self, run_id: &str) -> Result<RunMeta, StoreError> {
        let path = self.run_dir(run_id).join("run_meta.json");
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::Io { path, source: std::io::Error::other(e) })
    }

    /// Persist one stage artifact atomically. Existing artifacts are never
    /// overwritten.
    pub fn persist(
        &self,
        run_id: &str,
        sample_id: &str,
        stage: StageArtifact,
        payload: &[u8],
    ) -> Result<PathBuf, StoreError> {
        let dir = self.sample_dir(run_id, sample_id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(stage.file_name());
        atomic_write(&path, payload, true)?;
        Ok(path)
    }

    pub fn load(
        &self,
        run_id: &str,
        sample_id: &str,
        stage: StageArtifact,
    ) -> Result<Vec<u8>, StoreError> {
        let path = self.artifact_path(run_id, sample_id, stage);
        if !path.exists() {
            return Err(StoreError::MissingArtifact(path));
        }
        std::fs::read(&path).map_err(io_err(&path))
    }
}

/// Write via a temp file in the same directory, then rename. With
/// `noclobber` the rename fails rather than replace an existing file, so an
/// interrupted write never leaves a partial file under the final name.
fn atomic_write(path: &Path, payload: &[u8], noclobber: bool) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(payload).map_err(io_err(path))?;
    if noclobber {
        if path.exists() {
            return Err(StoreError::AlreadyExists(path.to_path_buf()));
        }
        tmp.persist_noclobber(path).map_err(|e| match e.error.kind() {
            std::io::ErrorKind::AlreadyExists => StoreError::AlreadyExists(path.to_path_buf()),
            _ => StoreError::Io { path: path.to_path_buf(), source: e.error },
        })?;
    } else {
        tmp.persist(path)
            .map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e.error })?;
    }
    Ok(())
}

/// Backend ids assigned to each pipeline role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub extractor: String,
    pub reference: String,
    pub judge: String,
    pub baseline: String,
}

impl Default for RoleAssignment {
    fn default() -> Self {
        RoleAssignment {
            extractor: "stub".to_string(),
            reference: "stub".to_string(),
            judge: "stub".to_string(),
            baseline: "stub".to_string(),
        }
    }
}

/// Documentation files for one printer–material pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocsEntry {
    pub printer: String,
    pub material: String,
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("role \"{role}\" references unknown backend \"{backend}\"")]
    UnknownBackend { role: String, backend: String },
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error("invalid backend \"{id}\": {detail}")]
    InvalidBackend { id: String, detail: String },
    #[error("no documentation configured for printer \"{printer}\" and material \"{material}\"")]
    NoDocs { printer: String, material: String },
    #[error("invalid {what}: {detail}")]
    Invalid { what: String, detail: String },
}

/// Everything a run needs: backends, role assignment, shortening policy,
/// tolerances, critical set, documentation sources, and store locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub artifact_root: PathBuf,
    pub reference_cache_dir: PathBuf,
    pub concurrency: usize,
    pub prompt_dir: Option<PathBuf>,
    pub tolerance_path: Option<PathBuf>,
    pub policy: ShorteningPolicy,
    pub critical: CriticalSet,
    pub backends: BTreeMap<String, BackendDescriptor>,
    pub roles: RoleAssignment,
    pub docs: Vec<DocsEntry>,
}

impl Default for RunConfig {
    /// All-stub offline configuration.
    fn default() -> Self {
        let mut backends = BTreeMap::new();
        backends.insert("stub".to_string(), BackendDescriptor::stub("stub"));
        RunConfig {
            artifact_root: PathBuf::from("runs"),
            reference_cache_dir: PathBuf::from("references"),
            concurrency: 4,
            prompt_dir: None,
            tolerance_path: None,
            policy: ShorteningPolicy::default(),
            critical: CriticalSet::default(),
            backends,
            roles: RoleAssignment::default(),
            docs: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Load from a TOML file. Relative paths are resolved against the
    /// config file's directory; referenced paths must exist.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.artifact_root);
        resolve(&mut self.reference_cache_dir);
        if let Some(p) = self.prompt_dir.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.tolerance_path.as_mut() {
            resolve(p);
        }
        for entry in &mut self.docs {
            for p in &mut entry.paths {
                resolve(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (id, backend) in &self.backends {
            let mut b = backend.clone();
            if b.id.is_empty() {
                b.id = id.clone();
            }
            b.validate()
                .map_err(|e| ConfigError::InvalidBackend { id: id.clone(), detail: e.to_string() })?;
        }
        for (role, id) in [
            ("extractor", &self.roles.extractor),
            ("reference", &self.roles.reference),
            ("judge", &self.roles.judge),
            ("baseline", &self.roles.baseline),
        ] {
            if !self.backends.contains_key(id) {
                return Err(ConfigError::UnknownBackend {
                    role: role.to_string(),
                    backend: id.clone(),
                });
            }
        }
        for path in self
            .docs
            .iter()
            .flat_map(|d| d.paths.iter())
            .chain(self.prompt_dir.iter())
            .chain(self.tolerance_path.iter())
        {
            if !path.exists() {
                return Err(ConfigError::MissingPath(path.clone()));
            }
        }
        self.critical
            .validate()
            .map_err(|v| ConfigError::Invalid { what: "critical set".to_string(), detail: v.to_string() })?;
        Ok(())
    }

    /// Backend descriptor by id, with the id field filled in.
    pub fn backend(&self, id: &str) -> Result<BackendDescriptor, ConfigError> {
        let mut b = self
            .backends
            .get(id)
            .cloned()
            .ok_or_else(|| ConfigError::UnknownBackend {
                role: "(direct lookup)".to_string(),
                backend: id.to_string(),
            })?;
        if b.id.is_empty() {
            b.id = id.to_string();
        }
        Ok(b)
    }

    pub fn role_backend(&self, role: &str) -> Result<BackendDescriptor, ConfigError> {
        let id = match role {
            "extractor" => &self.roles.extractor,
            "reference" => &self.roles.reference,
            "judge" => &self.roles.judge,
            "baseline" => &self.roles.baseline,
            other => {
                return Err(ConfigError::UnknownBackend {
                    role: other.to_string(),
                    backend: String::new(),
                })
            }
        };
        self.backend(id)
    }

    /// True when every role is served by a stub backend (fully offline).
    pub fn all_stub(&self) -> bool {
        ["extractor", "reference", "judge", "baseline"].iter().all(|role| {
            self.role_backend(role)
                .map(|b| b.kind == BackendKind::Stub)
                .unwrap_or(false)
        })
    }

    pub fn resolved_tolerances(&self) -> Result<ToleranceSpec, ConfigError> {
        let spec = match &self.tolerance_path {
            None => ToleranceSpec::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| ConfigError::Read { path: path.clone(), source })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
        };
        spec.validate().map_err(|v| ConfigError::Invalid {
            what: "tolerance spec".to_string(),
            detail: v.to_string(),
        })?;
        Ok(spec)
    }

    pub fn resolved_prompts(&self) -> Result<PromptSet, ConfigError> {
        match &self.prompt_dir {
            None => Ok(PromptSet::builtin()),
            Some(dir) => PromptSet::load_dir(dir)
                .map_err(|source| ConfigError::Read { path: dir.clone(), source }),
        }
    }

    /// Documentation bundle for a printer–material pair (case-insensitive
    /// lookup). Reads the files listed in the config.
    pub fn doc_bundle(&self, printer: &str, material: &str) -> Result<DocBundle, ConfigError> {
        let entry = self
            .docs
            .iter()
            .find(|d| {
                d.printer.eq_ignore_ascii_case(printer) && d.material.eq_ignore_ascii_case(material)
            })
            .ok_or_else(|| ConfigError::NoDocs {
                printer: printer.to_string(),
                material: material.to_string(),
            })?;
        let mut documents = Vec::new();
        for path in &entry.paths {
            let text = std::fs::read_to_string(path)
                .map_err(|source| ConfigError::Read { path: path.clone(), source })?;
            let id = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            documents.push((id, text));
        }
        DocBundle::new(printer, material, documents).map_err(|e| ConfigError::Invalid {
            what: "doc bundle".to_string(),
            detail: e.to_string(),
        })
    }

    /// SHA-256 over the canonical JSON form; drift between two runs claimed
    /// identical is detectable from this plus the prompt hashes.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_digest(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persist_round_trips_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        let payload = br#"{"rows": []}"#;
        let path = store.persist("run-1", "s1", StageArtifact::Deviation, payload).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), payload);
        assert_eq!(store.load("run-1", "s1", StageArtifact::Deviation).unwrap(), payload);

        let second = store.persist("run-1", "s1", StageArtifact::Deviation, b"other");
        assert!(matches!(second, Err(StoreError::AlreadyExists(_))));
        // Original content untouched, no temp files left behind.
        assert_eq!(std::fs::read(&path).unwrap(), payload);
        let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .filter_map(Result::ok)
            .filter(|e| e.file_name().to_string_lossy().starts_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn run_meta_begin_and_seal() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        let meta = RunMeta {
            run_id: "run-x".to_string(),
            created_at_unix: 1,
            finished_at_unix: None,
            config_hash: "h".to_string(),
            prompt_hashes: BTreeMap::new(),
            backend_roles: BTreeMap::new(),
            tool_version: "test".to_string(),
        };
        store.begin_run(&meta).unwrap();
        assert!(matches!(store.begin_run(&meta), Err(StoreError::RunExists(_))));
        store.seal_run("run-x").unwrap();
        let sealed = store.read_meta("run-x").unwrap();
        assert!(sealed.finished_at_unix.is_some());
    }

    #[test]
    fn missing_artifact_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        assert!(matches!(
            store.load("nope", "s", StageArtifact::Verdict),
            Err(StoreError::MissingArtifact(_))
        ));
    }

    #[test]
    fn default_config_is_all_stub_and_valid() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert!(config.all_stub());
        assert_eq!(config.role_backend("judge").unwrap().id, "stub");
    }

    #[test]
    fn config_load_resolves_paths_and_validates_roles() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("mk4s-pla.txt"), "- nozzle_temperature: 200..230 C\n")
            .unwrap();
        let toml_text = r#"
            artifact_root = "runs"

            [backends.stub]
            kind = "stub"
            model_name = "stub-offline"

            [roles]
            extractor = "stub"
            reference = "stub"
            judge = "stub"
            baseline = "stub"

            [[docs]]
            printer = "MK4S"
            material = "PLA"
            paths = ["mk4s-pla.txt"]
        "#;
        let path = dir.path().join("run.toml");
        std::fs::write(&path, toml_text).unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert!(config.artifact_root.starts_with(dir.path()));
        let bundle = config.doc_bundle("mk4s", "pla").unwrap();
        assert_eq!(bundle.documents.len(), 1);

        let bad = toml_text.replace("judge = \"stub\"", "judge = \"ghost\"");
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::UnknownBackend { .. })));
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.policy.head_layers = 5;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn missing_doc_path_fails_validation() {
        let mut config = RunConfig::default();
        config.docs.push(DocsEntry {
            printer: "X".to_string(),
            material: "Y".to_string(),
            paths: vec![PathBuf::from("/nonexistent/file.txt")],
        });
        assert!(matches!(config.validate(), Err(ConfigError::MissingPath(_))));
    }
}
