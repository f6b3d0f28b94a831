//! Pipeline quality tracking: gold corpora, accuracy/recall evaluation,
//! a linguistic proxy score and the retraining policy.

mod bleu;
mod retrain;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::linguistic_score;
pub use retrain::{
    reload_grammar, should_retrain, FineTuneJob, JobLedger, LmManager, RetrainDecision, RetrainOutcome, RetrainPolicy,
    RetrainReason, RetrainState,
};

use crate::director::compile;
use crate::interpreter::{BackendConfig, DialogueContext, Interpreter, Speaker};
use crate::lexicon::LexiconError;
use crate::model::{validate_plan, ApiRegistry, Args, OperationPlan, PlanStep, ValidationReport};
use crate::workspace::sha256_hex;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("corpus `{0}` has no examples")]
    EmptyCorpus(String),
    #[error("text has no tokens")]
    EmptyText,
    #[error("corpus `{corpus}` needs registry v{needed}, live registry is v{live}")]
    CorpusAhead { corpus: String, needed: u64, live: u64 },
    #[error("corpus line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no retrain decision to apply")]
    NoRetrainDecision,
    #[error(transparent)]
    GrammarLoad(#[from] LexiconError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One step of a gold or generated plan: an API plus typed arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldStep {
    pub api: String,
    #[serde(default)]
    pub args: Args,
}

impl GoldStep {
    pub fn render(&self) -> String {
        let mut out = self.api.clone();
        for (k, v) in &self.args {
            out.push_str(&format!(" {k}={v}"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldExample {
    pub id: String,
    pub request: String,
    /// Earlier user turns, oldest first.
    #[serde(default)]
    pub context: Vec<String>,
    pub registry_version: u64,
    pub plan: Vec<GoldStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
}

impl GoldExample {
    pub fn to_plan(&self) -> OperationPlan {
        let mut plan = OperationPlan::new(self.id.clone(), self.request.clone(), self.registry_version);
        plan.steps = self
            .plan
            .iter()
            .enumerate()
            .map(|(i, s)| PlanStep {
                index: i + 1,
                api: s.api.clone(),
                args: s.args.clone(),
                depends_on: vec![],
                checkpoint: false,
            })
            .collect();
        plan
    }

    pub fn validate(&self, registry: &ApiRegistry) -> ValidationReport {
        validate_plan(&self.to_plan(), registry)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub id: String,
    pub examples: Vec<GoldExample>,
    /// SHA-256 of the source text, used to reference a corpus snapshot.
    pub digest: String,
}

impl Corpus {
    pub fn from_ndjson(id: &str, text: &str) -> Result<Self, LmError> {
        let examples = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| LmError::Parse { line: i + 1, reason: e.to_string() }))
            .collect::<Result<Vec<GoldExample>, _>>()?;
        Ok(Corpus { id: id.to_string(), examples, digest: sha256_hex(text.as_bytes()) })
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_ndjson(&id, &fs::read_to_string(path)?)
    }

    /// The 100-example corpus over the base registry.
    pub fn builtin_base() -> Self {
        Self::from_ndjson("base", include_str!("../../data/corpus/base.ndjson")).expect("shipped corpus parses")
    }

    /// Examples exercising the three extension operations.
    pub fn builtin_ext() -> Self {
        Self::from_ndjson("ext", include_str!("../../data/corpus/ext.ndjson")).expect("shipped corpus parses")
    }

    pub fn merged(id: &str, parts: &[&Corpus]) -> Self {
        let examples: Vec<GoldExample> = parts.iter().flat_map(|c| c.examples.iter().cloned()).collect();
        let digest = sha256_hex(parts.iter().map(|c| c.digest.as_str()).collect::<Vec<_>>().join("+").as_bytes());
        Corpus { id: id.to_string(), examples, digest }
    }

    pub fn registry_version(&self) -> u64 {
        self.examples.iter().map(|e| e.registry_version).max().unwrap_or(0)
    }

    pub fn gold_steps(&self) -> usize {
        self.examples.iter().map(|e| e.plan.len()).sum()
    }
}

/// Anything that turns a gold example's request into a plan.
pub trait Pipeline {
    fn plan(&self, example: &GoldExample) -> Vec<GoldStep>;
    fn registry_version(&self) -> u64;
}

/// The live interpret-then-compile path.
#[derive(Debug, Clone)]
pub struct InterpreterPipeline {
    pub interpreter: Interpreter,
    pub backend: BackendConfig,
}

impl InterpreterPipeline {
    pub fn new(interpreter: Interpreter, backend: BackendConfig) -> Self {
        InterpreterPipeline { interpreter, backend }
    }
}

impl Pipeline for InterpreterPipeline {
    fn plan(&self, example: &GoldExample) -> Vec<GoldStep> {
        let mut ctx = DialogueContext::new(format!("eval-{}", example.id));
        for turn in &example.context {
            ctx.push(Speaker::User, turn.clone(), None);
        }
        let Ok(frame) = self.interpreter.interpret(&example.request, &ctx, &self.backend) else {
            return vec![];
        };
        let lexicon = self.interpreter.lexicon().get();
        let registry = self.interpreter.registry().get();
        match compile(&frame, &lexicon, &registry, &example.id) {
            Ok(plan) => plan.steps.into_iter().map(|s| GoldStep { api: s.api, args: s.args }).collect(),
            Err(_) => vec![],
        }
    }

    fn registry_version(&self) -> u64 {
        self.interpreter.registry().get().version()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCounts {
    pub gold: usize,
    pub generated: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub registry_version: u64,
    pub examples: usize,
    pub gold_steps: usize,
    pub generated_steps: usize,
    pub matched_steps: usize,
    /// matched / generated; 0 when nothing was generated.
    pub accuracy: f64,
    /// matched / gold.
    pub recall: f64,
    pub exact_match: f64,
    pub per_api: BTreeMap<String, ApiCounts>,
    pub linguistic: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Longest common subsequence of two step lists; returns matched gold indices.
pub fn lcs_matches(gold: &[GoldStep], generated: &[GoldStep]) -> Vec<usize> {
    let (n, m) = (gold.len(), generated.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if gold[i] == generated[j] { dp[i + 1][j + 1] + 1 } else { dp[i + 1][j].max(dp[i][j + 1]) };
        }
    }
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < n && j < m {
        if gold[i] == generated[j] {
            out.push(i);
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn render_plan(steps: &[GoldStep]) -> String {
    steps.iter().map(GoldStep::render).collect::<Vec<_>>().join(" ; ")
}

/// Runs `pipeline` over every example. Deterministic for a deterministic
/// pipeline.
pub fn evaluate(corpus: &Corpus, pipeline: &dyn Pipeline) -> Result<EvalReport, LmError> {
    if corpus.examples.is_empty() {
        return Err(LmError::EmptyCorpus(corpus.id.clone()));
    }
    let live = pipeline.registry_version();
    if corpus.registry_version() > live {
        return Err(LmError::CorpusAhead { corpus: corpus.id.clone(), needed: corpus.registry_version(), live });
    }
    let mut per_api: BTreeMap<String, ApiCounts> = BTreeMap::new();
    let (mut gold_n, mut gen_n, mut matched_n, mut exact, mut ling) = (0, 0, 0, 0, 0.0);
    for ex in &corpus.examples {
        let generated = pipeline.plan(ex);
        let matched = lcs_matches(&ex.plan, &generated);
        for s in &ex.plan {
            per_api.entry(s.api.clone()).or_default().gold += 1;
        }
        for s in &generated {
            per_api.entry(s.api.clone()).or_default().generated += 1;
        }
        for &i in &matched {
            per_api.entry(ex.plan[i].api.clone()).or_default().matched += 1;
        }
        gold_n += ex.plan.len();
        gen_n += generated.len();
        matched_n += matched.len();
        exact += usize::from(generated == ex.plan);
        let reference = ex.reply.clone().unwrap_or_else(|| render_plan(&ex.plan));
        ling += linguistic_score(&render_plan(&generated), &reference).unwrap_or(0.0);
    }
    Ok(EvalReport {
        corpus: corpus.id.clone(),
        registry_version: live,
        examples: corpus.examples.len(),
        gold_steps: gold_n,
        generated_steps: gen_n,
        matched_steps: matched_n,
        accuracy: ratio(matched_n, gen_n),
        recall: ratio(matched_n, gold_n),
        exact_match: ratio(exact, corpus.examples.len()),
        per_api,
        linguistic: ling / corpus.examples.len() as f64,
    })
}

/// Writes `report` as `<dir>/<corpus>-<n>.json` with the next free `n`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<PathBuf, LmError> {
    fs::create_dir_all(dir)?;
    let mut n = 0;
    let path = loop {
        let candidate = dir.join(format!("{}-{n:04}.json", report.corpus));
        if !candidate.exists() {
            break candidate;
        }
        n += 1;
    };
    fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicon;
    use crate::live::Live;
    use crate::model::ArgValue;

    fn gs(api: &str, path: &str) -> GoldStep {
        GoldStep { api: api.into(), args: [("path".to_string(), ArgValue::Path(path.into()))].into() }
    }

    struct Fixed(Vec<GoldStep>);

    impl Pipeline for Fixed {
        fn plan(&self, _: &GoldExample) -> Vec<GoldStep> {
            self.0.clone()
        }
        fn registry_version(&self) -> u64 {
            20
        }
    }

    fn corpus_of(plan: Vec<GoldStep>) -> Corpus {
        Corpus {
            id: "t".into(),
            examples: vec![GoldExample {
                id: "e".into(),
                request: "r".into(),
                context: vec![],
                registry_version: 20,
                plan,
                reply: None,
            }],
            digest: String::new(),
        }
    }

    #[test]
    fn lcs_respects_order() {
        let gold = [gs("a", "1"), gs("b", "2"), gs("c", "3")];
        let gen = [gs("c", "3"), gs("a", "1"), gs("b", "2")];
        assert_eq!(lcs_matches(&gold, &gen), vec![0, 1]);
        assert!(lcs_matches(&gold, &[]).is_empty());
    }

    #[test]
    fn counting_semantics() {
        let corpus = corpus_of(vec![gs("a", "1"), gs("b", "2"), gs("c", "3"), gs("d", "4")]);
        let r = evaluate(&corpus, &Fixed(vec![gs("a", "1"), gs("x", "9"), gs("c", "3")])).unwrap();
        assert_eq!((r.matched_steps, r.generated_steps, r.gold_steps), (2, 3, 4));
        assert_eq!(r.accuracy, 2.0 / 3.0);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.per_api["x"], ApiCounts { gold: 0, generated: 1, matched: 0 });
    }

    #[test]
    fn zero_output_scores_zero() {
        let corpus = corpus_of(vec![gs("a", "1")]);
        let r = evaluate(&corpus, &Fixed(vec![])).unwrap();
        assert_eq!((r.accuracy, r.recall, r.linguistic), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_and_future_corpora_are_rejected() {
        let mut c = corpus_of(vec![]);
        c.examples.clear();
        assert!(matches!(evaluate(&c, &Fixed(vec![])), Err(LmError::EmptyCorpus(_))));
        let mut c = corpus_of(vec![gs("a", "1")]);
        c.examples[0].registry_version = 99;
        assert!(matches!(evaluate(&c, &Fixed(vec![])), Err(LmError::CorpusAhead { .. })));
    }

    #[test]
    fn shipped_corpora_validate_against_their_registries() {
        let base = ApiRegistry::builtin();
        for ex in &Corpus::builtin_base().examples {
            assert!(ex.validate(&base).ok, "{}: {:?}", ex.id, ex.validate(&base));
        }
        let mut ext = base.clone();
        for spec in ApiRegistry::extension_specs() {
            ext.register(spec).unwrap();
        }
        assert_eq!(ext.version(), Corpus::builtin_ext().registry_version());
        for ex in &Corpus::builtin_ext().examples {
            assert!(ex.validate(&ext).ok, "{}", ex.id);
        }
    }

    #[test]
    fn rule_pipeline_is_perfect_on_its_corpus() {
        let interp = Interpreter::new(Live::new(Lexicon::builtin(1)), Live::new(ApiRegistry::builtin()));
        let pipe = InterpreterPipeline::new(interp, BackendConfig::default());
        let corpus = Corpus::builtin_base();
        for ex in &corpus.examples {
            assert_eq!(pipe.plan(ex), ex.plan, "{}: {}", ex.id, ex.request);
        }
        let r = evaluate(&corpus, &pipe).unwrap();
        assert_eq!((r.accuracy, r.recall, r.exact_match, r.linguistic), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn dropping_rm_cached_loses_exactly_its_steps() {
        let corpus = Corpus::builtin_base();
        let gold_rm = corpus.examples.iter().flat_map(|e| &e.plan).filter(|s| s.api == "git.rm_cached").count();
        let mut lex = Lexicon::builtin(1);
        lex.grammar = lex.grammar.without_verb("rm-cached");
        let interp = Interpreter::new(Live::new(lex), Live::new(ApiRegistry::builtin()));
        let r = evaluate(&corpus, &InterpreterPipeline::new(interp, BackendConfig::default())).unwrap();
        assert!(gold_rm > 0);
        assert_eq!(r.matched_steps, corpus.gold_steps() - gold_rm);
        assert_eq!(r.recall, 1.0 - gold_rm as f64 / corpus.gold_steps() as f64);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_api["git.rm_cached"].generated, 0);
    }

    #[test]
    fn registry_growth_degrades_then_reload_recovers() {
        let dir = tempfile::tempdir().unwrap();
        let store = crate::lexicon::LexiconStore::new(dir.path());
        store.install_builtin(1).unwrap();
        let base = ApiRegistry::builtin();
        let live_lex = Live::new(store.load_latest().unwrap());
        let live_reg = Live::new(base.clone());
        let pipe =
            InterpreterPipeline::new(Interpreter::new(live_lex.clone(), live_reg.clone()), BackendConfig::default());
        let mut mgr = LmManager::new(RetrainPolicy::default(), &base);
        let corpus = Corpus::merged("all", &[&Corpus::builtin_base(), &Corpus::builtin_ext()]);

        let mut grown = base.clone();
        for spec in ApiRegistry::extension_specs() {
            grown.register(spec).unwrap();
        }
        live_reg.replace(grown.clone());
        let degraded = evaluate(&corpus, &pipe).unwrap();
        assert!(degraded.recall < 0.9, "{}", degraded.recall);
        mgr.record(degraded);
        let decision = mgr.decide(&grown);
        assert!(decision.retrain);

        store.install_builtin(2).unwrap();
        let out = mgr.apply_rule(&decision, &store, &live_lex, &grown).unwrap();
        assert_eq!(out, RetrainOutcome::GrammarReloaded { version: 2 });
        let recovered = evaluate(&corpus, &pipe).unwrap();
        assert_eq!((recovered.accuracy, recovered.recall), (1.0, 1.0));
        mgr.record(recovered);
        assert!(!mgr.decide(&grown).retrain);
    }

    #[test]
    fn reports_get_sequential_names() {
        let dir = tempfile::tempdir().unwrap();
        let r = evaluate(&corpus_of(vec![gs("a", "1")]), &Fixed(vec![gs("a", "1")])).unwrap();
        let a = write_report(dir.path(), &r).unwrap();
        let b = write_report(dir.path(), &r).unwrap();
        assert!(a.ends_with("t-0000.json") && b.ends_with("t-0001.json"));
    }
}
