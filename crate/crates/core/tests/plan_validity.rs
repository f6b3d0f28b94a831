use std::sync::LazyLock;

use peros_core::director::compile;
use peros_core::interpreter::rule_parse;
use peros_core::lexicon::Lexicon;
use peros_core::lm::Corpus;
use peros_core::model::{validate_plan, ApiRegistry, IntentFrame, Span, Task};
use proptest::prelude::*;

static LEX: LazyLock<Lexicon> = LazyLock::new(|| Lexicon::builtin(2));
static REG: LazyLock<ApiRegistry> = LazyLock::new(extended);

fn extended() -> ApiRegistry {
    let mut reg = ApiRegistry::builtin();
    for spec in ApiRegistry::extension_specs() {
        reg.register(spec).unwrap();
    }
    reg
}

#[test]
fn every_corpus_plan_without_questions_validates() {
    let cases = [
        (Corpus::builtin_base(), Lexicon::builtin(1), ApiRegistry::builtin()),
        (Corpus::builtin_ext(), Lexicon::builtin(2), extended()),
    ];
    let mut checked = 0;
    for (corpus, lex, reg) in &cases {
        for ex in &corpus.examples {
            let frame = rule_parse(&ex.request, &lex.grammar).unwrap();
            let Ok(plan) = compile(&frame, lex, reg, &ex.id) else { continue };
            if plan.clarifications.is_empty() {
                let report = validate_plan(&plan, reg);
                assert!(report.ok, "{}: {report:?}", ex.id);
                checked += 1;
            }
        }
    }
    assert!(checked >= 100, "{checked}");
}

fn frame_strategy(verbs: Vec<String>, keys: Vec<String>) -> impl Strategy<Value = IntentFrame> {
    let values = prop_oneof![
        Just("10 MB".to_string()),
        Just("data/".to_string()),
        Just("*.csv".to_string()),
        Just("weekly".to_string()),
        Just("ssd".to_string()),
        Just("-3".to_string()),
        Just("../escape".to_string()),
        Just("".to_string()),
        "[a-z0-9 ./_*-]{0,12}",
    ];
    let verb = prop_oneof![4 => proptest::sample::select(verbs), 1 => "[a-z-]{1,8}"];
    let key = prop_oneof![4 => proptest::sample::select(keys), 1 => "[a-z_]{1,8}"];
    let task = (verb, proptest::collection::btree_map(key, values, 0..5));
    proptest::collection::vec(task, 1..6).prop_map(|tasks| IntentFrame {
        source: "fuzzed".into(),
        tasks: tasks
            .into_iter()
            .map(|(verb, params)| Task { verb, object: String::new(), params, span: Span::new(0, 6) })
            .collect(),
        ambiguities: vec![],
        residue: vec![],
    })
}

fn vocabulary(lex: &Lexicon) -> (Vec<String>, Vec<String>) {
    let verbs: Vec<String> = lex.mapping.keys().cloned().collect();
    let mut keys: Vec<String> = lex
        .mapping
        .values()
        .flatten()
        .flat_map(|b| b.params.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    keys.push("cwd".into());
    (verbs, keys)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fuzzed_frames_compile_to_valid_plans(frame in {
        let (v, k) = vocabulary(&LEX);
        frame_strategy(v, k)
    }) {
        if let Ok(plan) = compile(&frame, &LEX, &REG, "fuzz") {
            if plan.clarifications.is_empty() {
                let report = validate_plan(&plan, &REG);
                prop_assert!(report.ok, "{:?}", report);
            }
        }
    }
}
