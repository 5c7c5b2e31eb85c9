//! Portable artifacts: save, load and share modules and pipelines.
//!
//! An artifact is a directory holding `manifest.json`, `config.json`,
//! optional `weights.bin` and tokenizer assets. The manifest lists every file
//! with its sha-256 digest; `manifest.sha256` covers the manifest itself.
//! Pipelines reference their modules by artifact name, resolved as sibling
//! directories (locally and in the hub cache).
//!
//! A hub is any HTTP file store serving `GET/PUT {hub_url}/{name}/{relpath}`.

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use once_cell::sync::Lazy;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::generator::{LlmGen, TemplateGen, LLM_MODULE_TYPE, TEMPLATE_MODULE_TYPE};
use crate::linker::{self, EntityLinker};
use crate::module::{Module, ModuleConfig, ModuleError};
use crate::pipeline::{self, Pipeline, PipelineConfig, PipelineError, PipelineModules};
use crate::recommender::{self, RedialRec, SentimentLexicon};
use crate::tensor::{deserialize_weights, serialize_weights};
use crate::tokenization::CompositeTokenizer;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_DIGEST_FILE: &str = "manifest.sha256";
pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact not found: {0}")]
    NotFound(String),
    #[error("digest mismatch for {0}")]
    DigestMismatch(String),
    #[error("unknown module type {0:?}")]
    UnknownModuleType(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("unsafe artifact path {0:?}")]
    UnsafePath(String),
    #[error("hub rejected credentials (HTTP {0})")]
    AuthError(u16),
    #[error("hub transport error: {0}")]
    TransportError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub name: String,
    pub module_type: String,
    pub config: ModuleConfig,
    pub files: Vec<FileDigest>,
}

impl ArtifactManifest {
    pub fn validate(&self) -> Result<(), ArtifactError> {
        check_name(&self.name)?;
        for f in &self.files {
            check_rel_path(&f.path)?;
            if f.path == MANIFEST_FILE || f.path == MANIFEST_DIGEST_FILE {
                return Err(ArtifactError::InvalidManifest(format!("{} lists itself", f.path)));
            }
        }
        if self.module_type != self.config.module_type {
            return Err(ArtifactError::InvalidManifest(format!(
                "module_type {:?} disagrees with config {:?}",
                self.module_type, self.config.module_type
            )));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Artifact names double as directory names and URL segments.
pub fn check_name(name: &str) -> Result<(), ArtifactError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ArtifactError::InvalidManifest(format!("bad artifact name {name:?}")))
    }
}

fn check_rel_path(p: &str) -> Result<(), ArtifactError> {
    let path = Path::new(p);
    let safe = !p.is_empty()
        && !p.contains('\\')
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_)));
    if safe {
        Ok(())
    } else {
        Err(ArtifactError::UnsafePath(p.to_string()))
    }
}

/// A loaded artifact.
#[derive(Debug, Clone)]
pub enum Loaded {
    Module(Arc<dyn Module>),
    Pipeline(Pipeline),
}

impl Loaded {
    pub fn into_module(self) -> Option<Arc<dyn Module>> {
        match self {
            Loaded::Module(m) => Some(m),
            Loaded::Pipeline(_) => None,
        }
    }

    pub fn into_pipeline(self) -> Option<Pipeline> {
        match self {
            Loaded::Pipeline(p) => Some(p),
            Loaded::Module(_) => None,
        }
    }
}

/// What [`save_pretrained`] accepts.
#[derive(Debug, Clone, Copy)]
pub enum Saveable<'a> {
    Module(&'a dyn Module),
    Pipeline(&'a Pipeline),
}

impl<'a> From<&'a dyn Module> for Saveable<'a> {
    fn from(m: &'a dyn Module) -> Self {
        Saveable::Module(m)
    }
}

impl<'a> From<&'a Arc<dyn Module>> for Saveable<'a> {
    fn from(m: &'a Arc<dyn Module>) -> Self {
        Saveable::Module(m.as_ref())
    }
}

impl<'a> From<&'a Pipeline> for Saveable<'a> {
    fn from(p: &'a Pipeline) -> Self {
        Saveable::Pipeline(p)
    }
}

fn write_artifact(
    dir: &Path,
    name: &str,
    config: ModuleConfig,
    mut files: Vec<(String, Vec<u8>)>,
) -> Result<ArtifactManifest, ArtifactError> {
    check_name(name)?;
    let config_bytes = serde_json::to_vec_pretty(&config).expect("config serializes");
    files.push((CONFIG_FILE.into(), config_bytes));
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let manifest = ArtifactManifest {
        name: name.to_string(),
        module_type: config.module_type.clone(),
        config,
        files: files
            .iter()
            .map(|(path, bytes)| FileDigest {
                path: path.clone(),
                sha256: sha256_hex(bytes),
            })
            .collect(),
    };
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    for (path, bytes) in &files {
        let target = dir.join(path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(target, bytes)?;
    }
    let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_DIGEST_FILE), sha256_hex(&manifest_bytes))?;
    fs::write(dir.join(MANIFEST_FILE), manifest_bytes)?;
    Ok(manifest)
}

fn save_module(m: &dyn Module, dir: &Path) -> Result<ArtifactManifest, ArtifactError> {
    let mut files = m.assets();
    if let Some(w) = m.weights() {
        files.push((WEIGHTS_FILE.into(), serialize_weights(&w)));
    }
    write_artifact(dir, m.name(), m.config(), files)
}

/// Writes an artifact to `dir`. For a pipeline, its modules are saved as
/// sibling directories named after each module.
pub fn save_pretrained<'a>(target: impl Into<Saveable<'a>>, dir: impl AsRef<Path>) -> Result<ArtifactManifest, ArtifactError> {
    let dir = dir.as_ref();
    match target.into() {
        Saveable::Module(m) => save_module(m, dir),
        Saveable::Pipeline(p) => {
            let parent = dir.parent().unwrap_or(Path::new("."));
            let mut subs: Vec<&Arc<dyn Module>> = vec![p.rec(), p.gen()];
            subs.extend(p.proc());
            for m in subs {
                if m.name() == p.name() {
                    return Err(ArtifactError::InvalidManifest(format!(
                        "module {:?} shares the pipeline's name",
                        m.name()
                    )));
                }
                save_module(m.as_ref(), &parent.join(m.name()))?;
            }
            write_artifact(dir, p.name(), p.module_config(), Vec::new())
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub hub_url: Option<String>,
    /// Where hub pulls are materialized; defaults to a temp subdirectory.
    pub cache_dir: Option<PathBuf>,
    /// Forces prompted generators onto their template fallback.
    pub offline: bool,
}

impl LoadOptions {
    fn cache_root(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join("crskit-hub-cache"))
    }
}

/// A verified artifact directory handed to loaders.
#[derive(Debug)]
pub struct ArtifactDir<'a> {
    pub root: &'a Path,
    pub manifest: &'a ArtifactManifest,
    pub options: &'a LoadOptions,
}

impl ArtifactDir<'_> {
    pub fn read(&self, rel: &str) -> Result<Vec<u8>, ArtifactError> {
        if !self.manifest.files.iter().any(|f| f.path == rel) {
            return Err(ArtifactError::NotFound(format!("{} in {}", rel, self.manifest.name)));
        }
        Ok(fs::read(self.root.join(rel))?)
    }

    fn tokenizer(&self) -> Result<CompositeTokenizer, ArtifactError> {
        CompositeTokenizer::load(self.root).map_err(|e| ArtifactError::Module(e.into()))
    }
}

pub type Loader = fn(&ArtifactDir<'_>) -> Result<Loaded, ArtifactError>;

static REGISTRY: Lazy<RwLock<HashMap<String, Loader>>> = Lazy::new(|| {
    let builtins: [(&str, Loader); 5] = [
        (recommender::MODULE_TYPE, load_redial_rec),
        (TEMPLATE_MODULE_TYPE, load_template_gen),
        (LLM_MODULE_TYPE, load_llm_gen),
        (linker::MODULE_TYPE, load_linker),
        (pipeline::MODULE_TYPE, load_pipeline),
    ];
    RwLock::new(builtins.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
});

/// Registers (or replaces) the loader for `module_type`.
pub fn register_module_type(module_type: impl Into<String>, loader: Loader) {
    REGISTRY.write().insert(module_type.into(), loader);
}

pub fn registered_module_types() -> Vec<String> {
    let mut types: Vec<String> = REGISTRY.read().keys().cloned().collect();
    types.sort();
    types
}

fn load_redial_rec(a: &ArtifactDir<'_>) -> Result<Loaded, ArtifactError> {
    let lexicon = String::from_utf8(a.read(recommender::LEXICON_FILE)?)
        .map_err(|e| ArtifactError::InvalidManifest(e.to_string()))?;
    let lexicon = SentimentLexicon::from_json(&lexicon).map_err(ModuleError::from)?;
    let weights = deserialize_weights(&a.read(WEIGHTS_FILE)?).map_err(ModuleError::from)?;
    let rec = RedialRec::from_parts(&a.manifest.name, &a.manifest.config, a.tokenizer()?, lexicon, &weights)?;
    Ok(Loaded::Module(Arc::new(rec)))
}

fn load_template_gen(a: &ArtifactDir<'_>) -> Result<Loaded, ArtifactError> {
    let g = TemplateGen::from_config(&a.manifest.name, &a.manifest.config)?;
    Ok(Loaded::Module(Arc::new(g)))
}

fn load_llm_gen(a: &ArtifactDir<'_>) -> Result<Loaded, ArtifactError> {
    let g = LlmGen::from_config(&a.manifest.name, &a.manifest.config)?.offline(a.options.offline);
    Ok(Loaded::Module(Arc::new(g)))
}

fn load_linker(a: &ArtifactDir<'_>) -> Result<Loaded, ArtifactError> {
    let l = EntityLinker::from_config(&a.manifest.name, &a.manifest.config, a.tokenizer()?)?;
    Ok(Loaded::Module(Arc::new(l)))
}

#[derive(Deserialize)]
struct PipelineParams {
    #[serde(flatten)]
    cfg: PipelineConfig,
    modules: PipelineModules,
}

fn pipeline_params(config: &ModuleConfig) -> Result<PipelineParams, ArtifactError> {
    Ok(config.params_as()?)
}

fn load_pipeline(a: &ArtifactDir<'_>) -> Result<Loaded, ArtifactError> {
    let params = pipeline_params(&a.manifest.config)?;
    let parent = a.root.parent().unwrap_or(Path::new("."));
    let sub = |name: &str| -> Result<Arc<dyn Module>, ArtifactError> {
        check_name(name)?;
        load_dir(&parent.join(name), a.options, false)?
            .into_module()
            .ok_or_else(|| ArtifactError::InvalidManifest(format!("{name:?} is not a module")))
    };
    let rec = sub(&params.modules.rec)?;
    let gen = sub(&params.modules.gen)?;
    let proc = params.modules.proc.as_deref().map(sub).transpose()?;
    Ok(Loaded::Pipeline(Pipeline::new(&a.manifest.name, params.cfg, rec, gen, proc)?))
}

/// Reads and verifies the manifest and every listed file.
pub fn verify_dir(dir: &Path) -> Result<ArtifactManifest, ArtifactError> {
    let manifest_bytes = match fs::read(dir.join(MANIFEST_FILE)) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ArtifactError::NotFound(dir.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let recorded = fs::read_to_string(dir.join(MANIFEST_DIGEST_FILE))
        .map_err(|_| ArtifactError::DigestMismatch(MANIFEST_DIGEST_FILE.into()))?;
    if recorded.trim() != sha256_hex(&manifest_bytes) {
        return Err(ArtifactError::DigestMismatch(MANIFEST_FILE.into()));
    }
    let manifest: ArtifactManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| ArtifactError::InvalidManifest(e.to_string()))?;
    manifest.validate()?;
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.path)).map_err(|_| ArtifactError::DigestMismatch(f.path.clone()))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(ArtifactError::DigestMismatch(f.path.clone()));
        }
    }
    let config: ModuleConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?)
        .map_err(|e| ArtifactError::InvalidManifest(format!("config.json: {e}")))?;
    if config != manifest.config {
        return Err(ArtifactError::InvalidManifest("config.json disagrees with manifest".into()));
    }
    Ok(manifest)
}

fn load_dir(dir: &Path, options: &LoadOptions, allow_pipeline: bool) -> Result<Loaded, ArtifactError> {
    let manifest = verify_dir(dir)?;
    if !allow_pipeline && manifest.module_type == pipeline::MODULE_TYPE {
        return Err(ArtifactError::InvalidManifest(format!(
            "pipeline {:?} cannot be nested",
            manifest.name
        )));
    }
    let loader = REGISTRY
        .read()
        .get(&manifest.module_type)
        .copied()
        .ok_or_else(|| ArtifactError::UnknownModuleType(manifest.module_type.clone()))?;
    loader(&ArtifactDir {
        root: dir,
        manifest: &manifest,
        options,
    })
}

/// Loads a local artifact directory.
pub fn load_local(dir: impl AsRef<Path>, options: &LoadOptions) -> Result<Loaded, ArtifactError> {
    load_dir(dir.as_ref(), options, true)
}

/// Loads from a local directory, or pulls `reference` from the hub into the
/// cache first. Digests are checked before anything is instantiated.
pub async fn from_pretrained(reference: &str, options: &LoadOptions) -> Result<Loaded, ArtifactError> {
    let local = Path::new(reference);
    if local.is_dir() {
        return load_local(local, options);
    }
    let Some(hub) = options.hub_url.as_deref() else {
        return Err(ArtifactError::NotFound(reference.to_string()));
    };
    check_name(reference).map_err(|_| ArtifactError::NotFound(reference.to_string()))?;
    let cache = options.cache_root();
    let http = reqwest::Client::new();
    let manifest = pull(&http, hub, reference, &cache).await?;
    if manifest.module_type == pipeline::MODULE_TYPE {
        let m = pipeline_params(&manifest.config)?.modules;
        for name in [Some(m.rec), Some(m.gen), m.proc].into_iter().flatten() {
            check_name(&name)?;
            pull(&http, hub, &name, &cache).await?;
        }
    }
    load_local(cache.join(reference), options)
}

async fn hub_get(http: &reqwest::Client, url: &str) -> Result<Vec<u8>, ArtifactError> {
    let resp = http
        .get(url)
        .send()
        .await
        .map_err(|e| ArtifactError::TransportError(e.to_string()))?;
    match resp.status().as_u16() {
        200..=299 => Ok(resp
            .bytes()
            .await
            .map_err(|e| ArtifactError::TransportError(e.to_string()))?
            .to_vec()),
        404 => Err(ArtifactError::NotFound(url.to_string())),
        s @ (401 | 403) => Err(ArtifactError::AuthError(s)),
        s => Err(ArtifactError::TransportError(format!("GET {url}: HTTP {s}"))),
    }
}

/// Downloads one artifact into `cache/name`, replacing any earlier copy.
async fn pull(http: &reqwest::Client, hub: &str, name: &str, cache: &Path) -> Result<ArtifactManifest, ArtifactError> {
    let base = format!("{}/{}", hub.trim_end_matches('/'), name);
    let manifest_bytes = hub_get(http, &format!("{base}/{MANIFEST_FILE}")).await?;
    let digest = hub_get(http, &format!("{base}/{MANIFEST_DIGEST_FILE}")).await?;
    if String::from_utf8_lossy(&digest).trim() != sha256_hex(&manifest_bytes) {
        return Err(ArtifactError::DigestMismatch(MANIFEST_FILE.into()));
    }
    let manifest: ArtifactManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| ArtifactError::InvalidManifest(e.to_string()))?;
    manifest.validate()?;
    if manifest.name != name {
        return Err(ArtifactError::InvalidManifest(format!(
            "hub entry {name:?} holds artifact {:?}",
            manifest.name
        )));
    }
    let staging = cache.join(format!(".{name}.{}", uuid::Uuid::new_v4().simple()));
    fs::create_dir_all(&staging)?;
    let result = async {
        for f in &manifest.files {
            let bytes = hub_get(http, &format!("{base}/{}", f.path)).await?;
            let target = staging.join(&f.path);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(target, bytes)?;
        }
        fs::write(staging.join(MANIFEST_DIGEST_FILE), &digest)?;
        fs::write(staging.join(MANIFEST_FILE), &manifest_bytes)?;
        let dest = cache.join(name);
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        fs::rename(&staging, &dest)?;
        Ok::<_, ArtifactError>(())
    }
    .await;
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result.map(|_| manifest)
}

async fn push_one(http: &reqwest::Client, dir: &Path, hub: &str, token: &str) -> Result<ArtifactManifest, ArtifactError> {
    let manifest = verify_dir(dir)?;
    let base = format!("{}/{}", hub.trim_end_matches('/'), manifest.name);
    let paths = manifest
        .files
        .iter()
        .map(|f| f.path.as_str())
        .chain([MANIFEST_DIGEST_FILE, MANIFEST_FILE]);
    for rel in paths {
        let body = fs::read(dir.join(rel))?;
        let resp = http
            .put(format!("{base}/{rel}"))
            .bearer_auth(token)
            .body(body)
            .send()
            .await
            .map_err(|e| ArtifactError::TransportError(e.to_string()))?;
        match resp.status().as_u16() {
            200..=299 => {}
            s @ (401 | 403) => return Err(ArtifactError::AuthError(s)),
            s => return Err(ArtifactError::TransportError(format!("PUT {rel}: HTTP {s}"))),
        }
    }
    Ok(manifest)
}

/// Uploads a saved artifact (and, for a pipeline, its sibling module
/// artifacts) and returns the hub reference.
pub async fn push_to_hub(dir: impl AsRef<Path>, hub_url: &str, token: &str) -> Result<String, ArtifactError> {
    let dir = dir.as_ref();
    let manifest = verify_dir(dir)?;
    let http = reqwest::Client::new();
    if manifest.module_type == pipeline::MODULE_TYPE {
        let m = pipeline_params(&manifest.config)?.modules;
        let parent = dir.parent().unwrap_or(Path::new("."));
        for name in [Some(m.rec), Some(m.gen), m.proc].into_iter().flatten() {
            check_name(&name)?;
            push_one(&http, &parent.join(&name), hub_url, token).await?;
        }
    }
    push_one(&http, dir, hub_url, token).await?;
    Ok(manifest.name)
}
