use std::path::{Path, PathBuf};
use std::sync::Arc;

use intentloop_core::bandit::{BanditModel, ContextScheme, PolicyConfig, PolicyKind, SlotPredictorModel};
use intentloop_core::embedding::{EmbeddingProvider, HashEmbedding, HttpEmbedding};
use intentloop_core::nlu::{
    CompletionConfig, CompletionProvider, FewShotExample, FixtureCompletion, HttpCompletion, Nlu,
};
use intentloop_core::retrieval::{FixtureSearch, HttpSearch, LexicalRanker, SearchProvider};
use intentloop_core::session::{Engine, EngineConfig, Providers};
use intentloop_core::simulator::{SimConfig, SimWorld};
use intentloop_core::{Error, IntentOntology, IntentProfile, Result, SharedProfile};
use serde::{Deserialize, Serialize};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Everything needed to stand up the API. Unset providers fall back to
/// offline ones: keyword parsing, hashed embeddings, and either the
/// synthetic web (no ontology file) or an empty fixture search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    /// Allowed browser origins; `*` allows any. Empty disables CORS headers.
    pub cors_origins: Vec<String>,
    pub ontology: Option<PathBuf>,
    /// JSON array of few-shot examples for the language model parser.
    pub examples: Option<PathBuf>,
    pub search_endpoint: Option<String>,
    pub search_key: Option<String>,
    pub search_fixture: Option<PathBuf>,
    pub lm_endpoint: Option<String>,
    pub embedding_endpoint: Option<String>,
    pub embedding_dim: usize,
    pub predictor: Option<PathBuf>,
    pub policy: PolicyKind,
    pub scheme: ContextScheme,
    pub seed: u64,
    pub max_steps: u32,
    pub slate_size: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            port: DEFAULT_PORT,
            data_dir: PathBuf::from("intentloop-data"),
            cors_origins: Vec::new(),
            ontology: None,
            examples: None,
            search_endpoint: None,
            search_key: None,
            search_fixture: None,
            lm_endpoint: None,
            embedding_endpoint: None,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            predictor: None,
            policy: PolicyKind::AdaptiveActiveGreedy,
            scheme: engine.scheme,
            seed: 0,
            max_steps: engine.max_steps,
            slate_size: engine.slate_size,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub(crate) fn profile_path(data_dir: &Path) -> PathBuf {
    data_dir.join("profile.json")
}

pub(crate) fn models_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("models")
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slate_size == 0 {
            return Err(Error::Validation("slate_size must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Validation("embedding_dim must be at least 1".into()));
        }
        if self.search_key.is_some() && self.search_endpoint.is_none() {
            return Err(Error::Validation("a search key needs a search endpoint".into()));
        }
        Ok(())
    }

    /// Builds the engine, restoring the profile and bandit checkpoints kept
    /// under the data directory.
    pub fn build_engine(&self) -> Result<Engine> {
        self.validate()?;
        let (ontology, synthetic_search) = match &self.ontology {
            Some(path) => (IntentOntology::load(path)?, None),
            None => {
                let world = SimWorld::new(SimConfig {
                    seed: self.seed,
                    ..SimConfig::default()
                })?;
                let search: Arc<dyn SearchProvider> = Arc::new(world.search_provider());
                ((*world.ontology).clone(), Some(search))
            }
        };
        let ontology = Arc::new(ontology);

        let search: Arc<dyn SearchProvider> = match (&self.search_endpoint, &self.search_fixture) {
            (Some(endpoint), _) => Arc::new(HttpSearch::new(endpoint.clone(), self.search_key.clone())),
            (None, Some(path)) => Arc::new(FixtureSearch::load(path)?),
            (None, None) => synthetic_search.unwrap_or_else(|| Arc::new(FixtureSearch::new())),
        };
        let embedder: Arc<dyn EmbeddingProvider> = match &self.embedding_endpoint {
            Some(url) => Arc::new(HttpEmbedding::new(url, self.embedding_dim)),
            None => Arc::new(HashEmbedding::new(self.embedding_dim, self.seed)),
        };
        let completion: Arc<dyn CompletionProvider> = match &self.lm_endpoint {
            Some(url) => Arc::new(HttpCompletion::new(url, CompletionConfig::default())),
            None => Arc::new(FixtureCompletion::new()),
        };
        let examples: Vec<FewShotExample> = match &self.examples {
            Some(path) => read_json(path)?,
            None => Vec::new(),
        };
        for ex in &examples {
            ex.validate(&ontology)?;
        }
        let predictor = match &self.predictor {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                Some(Arc::new(SlotPredictorModel::from_json_str(&text)?))
            }
            None => None,
        };
        let providers = Providers {
            nlu: Nlu::new(examples, completion, embedder.clone()),
            embedder,
            search,
            ranker: Arc::new(LexicalRanker),
            predictor,
        };

        let profile = match profile_path(&self.data_dir) {
            p if p.exists() => {
                let profile = IntentProfile::load(&p)?;
                profile.validate(&ontology)?;
                profile
            }
            _ => IntentProfile::new(),
        };
        let config = EngineConfig {
            max_steps: self.max_steps,
            slate_size: self.slate_size,
            scheme: self.scheme,
            ..EngineConfig::default()
        };
        let policy = PolicyConfig::new(self.policy).with_seed(self.seed);
        let engine = Engine::new(ontology, Arc::new(SharedProfile::new(profile)), policy, providers, config);
        self.restore_models(&engine)?;
        Ok(engine)
    }

    fn restore_models(&self, engine: &Engine) -> Result<()> {
        let dir = models_dir(&self.data_dir);
        let Ok(entries) = std::fs::read_dir(&dir) else {
            return Ok(());
        };
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        let registry = engine.registry(self.scheme);
        for path in paths.iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let model = BanditModel::from_checkpoint_json(&text)?;
            if model.kind() != self.policy {
                log::warn!("skipping {}: checkpoint is for {}", path.display(), model.kind());
                continue;
            }
            engine.ontology().require_intent(model.key())?;
            registry.insert(model);
        }
        Ok(())
    }
}
