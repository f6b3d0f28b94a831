//! The interpret/compile contract between the gateway and the planning
//! components, with an in-process and a JSON-over-HTTP transport.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::extract::State;
use axum::routing::{get, post};
use axum::{Json, Router};
use peros_core::director::{recommend, type_answer, RecommendRules, Suggestion};
use peros_core::lexicon::LexiconStore;
use peros_core::watchdog::KernelEvent;
use peros_core::{
    compile, resolve_clarification, ApiRegistry, BackendConfig, DialogueContext, DirectorError, IntentFrame,
    InterpretError, Interpreter, Lexicon, Live, OperationPlan,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "kebab-case")]
pub enum PlannerError {
    #[error("no intent recognized in `{0}`")]
    NoIntent(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed completion: {0}")]
    MalformedCompletion(String),
    #[error("{0}")]
    Director(String),
    #[error("planner state: {0}")]
    State(String),
}

impl From<InterpretError> for PlannerError {
    fn from(e: InterpretError) -> Self {
        match e {
            InterpretError::NoIntent(s) => PlannerError::NoIntent(s),
            InterpretError::BackendUnavailable(s) => PlannerError::BackendUnavailable(s),
            InterpretError::MalformedCompletion(s) => PlannerError::MalformedCompletion(s),
        }
    }
}

impl From<DirectorError> for PlannerError {
    fn from(e: DirectorError) -> Self {
        PlannerError::Director(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reloaded {
    pub registry_version: u64,
    pub grammar_version: u32,
}

/// Interpreter plus director, as seen by the gateway.
pub trait Planner: Send + Sync {
    fn interpret(
        &self,
        request: &str,
        ctx: &DialogueContext,
        backend: &BackendConfig,
    ) -> Result<IntentFrame, PlannerError>;
    fn compile(&self, frame: &IntentFrame, plan_id: &str) -> Result<OperationPlan, PlannerError>;
    /// Types a raw answer and binds it to `slot`.
    fn resolve(
        &self,
        plan: &OperationPlan,
        slot: &str,
        answer: &BTreeMap<String, String>,
    ) -> Result<OperationPlan, PlannerError>;
    fn recommend(&self, events: &[KernelEvent], rules: &RecommendRules) -> Result<Option<Suggestion>, PlannerError>;
    fn registry(&self) -> Result<ApiRegistry, PlannerError>;
    /// Picks up the registry file and, with `grammar`, the newest grammar in
    /// the store. Grammars go live only through a retrain decision.
    fn reload(&self, grammar: bool) -> Result<Reloaded, PlannerError>;
}

/// Reads the registry file, seeding it with the builtin registry.
pub fn load_registry(path: &Path) -> anyhow::Result<ApiRegistry> {
    if path.exists() {
        return ApiRegistry::load(path).with_context(|| format!("loading {}", path.display()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let reg = ApiRegistry::builtin();
    reg.save(path)?;
    Ok(reg)
}

/// Opens the lexicon store, seeding it with grammar v1.
pub fn open_lexicon_store(dir: &Path) -> anyhow::Result<LexiconStore> {
    let store = LexiconStore::new(dir);
    if store.versions().map_or(true, |v| v.is_empty()) {
        store.install_builtin(1)?;
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct LocalPlanner {
    interpreter: Interpreter,
    store: LexiconStore,
    registry_path: PathBuf,
}

impl LocalPlanner {
    pub fn open(cfg: &Config) -> anyhow::Result<Self> {
        let store = open_lexicon_store(&cfg.lexicon_dir())?;
        let lexicon = store.load_latest()?;
        let registry = load_registry(&cfg.registry_path())?;
        Ok(LocalPlanner {
            interpreter: Interpreter::new(Live::new(lexicon), Live::new(registry)),
            store,
            registry_path: cfg.registry_path(),
        })
    }

    pub fn lexicon(&self) -> &Live<Lexicon> {
        self.interpreter.lexicon()
    }

    pub fn store(&self) -> &LexiconStore {
        &self.store
    }
}

impl Planner for LocalPlanner {
    fn interpret(
        &self,
        request: &str,
        ctx: &DialogueContext,
        backend: &BackendConfig,
    ) -> Result<IntentFrame, PlannerError> {
        Ok(self.interpreter.interpret(request, ctx, backend)?)
    }

    fn compile(&self, frame: &IntentFrame, plan_id: &str) -> Result<OperationPlan, PlannerError> {
        let lexicon = self.interpreter.lexicon().get();
        let registry = self.interpreter.registry().get();
        Ok(compile(frame, &lexicon, &registry, plan_id)?)
    }

    fn resolve(
        &self,
        plan: &OperationPlan,
        slot: &str,
        answer: &BTreeMap<String, String>,
    ) -> Result<OperationPlan, PlannerError> {
        let registry = self.interpreter.registry().get();
        let typed = type_answer(plan, &registry, slot, answer)?;
        Ok(resolve_clarification(plan, &registry, slot, &typed)?)
    }

    fn recommend(&self, events: &[KernelEvent], rules: &RecommendRules) -> Result<Option<Suggestion>, PlannerError> {
        let lexicon = self.interpreter.lexicon().get();
        let registry = self.interpreter.registry().get();
        Ok(recommend(events, rules, &lexicon, &registry))
    }

    fn registry(&self) -> Result<ApiRegistry, PlannerError> {
        Ok((*self.interpreter.registry().get()).clone())
    }

    fn reload(&self, grammar: bool) -> Result<Reloaded, PlannerError> {
        let state = |e: &dyn std::fmt::Display| PlannerError::State(e.to_string());
        let registry = ApiRegistry::load(&self.registry_path).map_err(|e| state(&e))?;
        if grammar {
            let lexicon = self.store.load_latest().map_err(|e| state(&e))?;
            self.interpreter.lexicon().replace(lexicon);
        }
        let out = Reloaded {
            registry_version: registry.version(),
            grammar_version: self.interpreter.lexicon().get().version,
        };
        self.interpreter.registry().replace(registry);
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InterpretReq {
    request: String,
    context: DialogueContext,
    backend: BackendConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompileReq {
    frame: IntentFrame,
    plan_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResolveReq {
    plan: OperationPlan,
    slot: String,
    answer: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReloadReq {
    grammar: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecommendReq {
    events: Vec<KernelEvent>,
    rules: RecommendRules,
}

/// Client for a planner component started with `peros component planner`.
#[derive(Debug, Clone)]
pub struct HttpPlanner {
    base: String,
    agent: ureq::Agent,
}

impl HttpPlanner {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(120))).build().into();
        HttpPlanner { base: base.into().trim_end_matches('/').to_string(), agent }
    }

    fn call<B: Serialize, T: DeserializeOwned>(&self, route: &str, body: Option<&B>) -> Result<T, PlannerError> {
        let url = format!("{}/{route}", self.base);
        let down = |e: ureq::Error| PlannerError::BackendUnavailable(format!("planner component at {url}: {e}"));
        let mut resp = match body {
            Some(b) => self.agent.post(&url).send_json(b).map_err(down)?,
            None => self.agent.get(&url).call().map_err(down)?,
        };
        let out: Result<T, PlannerError> = resp.body_mut().read_json().map_err(down)?;
        out
    }
}

impl Planner for HttpPlanner {
    fn interpret(
        &self,
        request: &str,
        ctx: &DialogueContext,
        backend: &BackendConfig,
    ) -> Result<IntentFrame, PlannerError> {
        let req = InterpretReq { request: request.into(), context: ctx.clone(), backend: backend.clone() };
        self.call("interpret", Some(&req))
    }

    fn compile(&self, frame: &IntentFrame, plan_id: &str) -> Result<OperationPlan, PlannerError> {
        self.call("compile", Some(&CompileReq { frame: frame.clone(), plan_id: plan_id.into() }))
    }

    fn resolve(
        &self,
        plan: &OperationPlan,
        slot: &str,
        answer: &BTreeMap<String, String>,
    ) -> Result<OperationPlan, PlannerError> {
        self.call("resolve", Some(&ResolveReq { plan: plan.clone(), slot: slot.into(), answer: answer.clone() }))
    }

    fn recommend(&self, events: &[KernelEvent], rules: &RecommendRules) -> Result<Option<Suggestion>, PlannerError> {
        self.call("recommend", Some(&RecommendReq { events: events.to_vec(), rules: *rules }))
    }

    fn registry(&self) -> Result<ApiRegistry, PlannerError> {
        let raw: serde_json::Value = self.call::<(), _>("registry", None)?;
        ApiRegistry::from_json(&raw.to_string()).map_err(|e| PlannerError::State(e.to_string()))
    }

    fn reload(&self, grammar: bool) -> Result<Reloaded, PlannerError> {
        self.call("reload", Some(&ReloadReq { grammar }))
    }
}

type Shared = State<Arc<LocalPlanner>>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, PlannerError> + Send + 'static,
) -> Json<Result<T, PlannerError>> {
    let out = tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(PlannerError::State(format!("planner task panicked: {e}"))));
    Json(out)
}

async fn interpret_route(State(p): Shared, Json(req): Json<InterpretReq>) -> Json<Result<IntentFrame, PlannerError>> {
    blocking(move || p.interpret(&req.request, &req.context, &req.backend)).await
}

async fn compile_route(State(p): Shared, Json(req): Json<CompileReq>) -> Json<Result<OperationPlan, PlannerError>> {
    blocking(move || p.compile(&req.frame, &req.plan_id)).await
}

async fn resolve_route(State(p): Shared, Json(req): Json<ResolveReq>) -> Json<Result<OperationPlan, PlannerError>> {
    blocking(move || p.resolve(&req.plan, &req.slot, &req.answer)).await
}

async fn recommend_route(
    State(p): Shared,
    Json(req): Json<RecommendReq>,
) -> Json<Result<Option<Suggestion>, PlannerError>> {
    blocking(move || p.recommend(&req.events, &req.rules)).await
}

async fn registry_route(State(p): Shared) -> Json<Result<serde_json::Value, PlannerError>> {
    Json(p.registry().map(|r| serde_json::from_str(&r.to_json()).expect("registry json")))
}

async fn reload_route(State(p): Shared, Json(req): Json<ReloadReq>) -> Json<Result<Reloaded, PlannerError>> {
    blocking(move || p.reload(req.grammar)).await
}

/// Routes served by the standalone planner component.
pub fn component_router(planner: Arc<LocalPlanner>) -> Router {
    Router::new()
        .route("/interpret", post(interpret_route))
        .route("/compile", post(compile_route))
        .route("/resolve", post(resolve_route))
        .route("/recommend", post(recommend_route))
        .route("/registry", get(registry_route))
        .route("/reload", post(reload_route))
        .with_state(planner)
}

#[cfg(test)]
mod tests {
    use std::future::IntoFuture;

    use peros_core::fixture::HAPPYDOG_REQUEST;

    use super::*;

    fn config(dir: &Path) -> Config {
        Config { state_dir: dir.join("state"), sandbox_parent: dir.to_path_buf(), ..Config::default() }
    }

    #[test]
    fn open_seeds_registry_and_lexicon() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let p = LocalPlanner::open(&cfg).unwrap();
        assert!(cfg.registry_path().exists());
        assert_eq!(p.registry().unwrap(), ApiRegistry::builtin());
        assert_eq!(p.lexicon().get().version, 1);
        p.store().install_builtin(2).unwrap();
        assert_eq!(p.reload(false).unwrap().grammar_version, 1);
        let r = p.reload(true).unwrap();
        assert_eq!(r, Reloaded { registry_version: ApiRegistry::builtin().version(), grammar_version: 2 });
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn http_transport_matches_in_process() {
        let dir = tempfile::tempdir().unwrap();
        let local = Arc::new(LocalPlanner::open(&config(dir.path())).unwrap());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(axum::serve(listener, component_router(local.clone())).into_future());
        let remote = HttpPlanner::new(format!("http://{addr}"));
        let local2 = local.clone();
        tokio::task::spawn_blocking(move || {
            let ctx = DialogueContext::new("s");
            let cfg = BackendConfig::default();
            let a = local2.interpret(HAPPYDOG_REQUEST, &ctx, &cfg).unwrap();
            let b = remote.interpret(HAPPYDOG_REQUEST, &ctx, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(local2.compile(&a, "p").unwrap(), remote.compile(&b, "p").unwrap());
            assert_eq!(remote.interpret("   ", &ctx, &cfg), Err(PlannerError::NoIntent("   ".into())));
            assert_eq!(remote.registry().unwrap(), local2.registry().unwrap());
        })
        .await
        .unwrap();
    }

    #[test]
    fn unreachable_component_is_backend_unavailable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let remote = HttpPlanner::new(format!("http://{addr}"));
        assert!(matches!(remote.registry(), Err(PlannerError::BackendUnavailable(_))));
    }
}
