//! Shared inputs for the PerOS benchmarks.

use peros_core::fixture::HAPPYDOG_REQUEST;
use peros_core::interpreter::rule_parse;
use peros_core::lexicon::Lexicon;
use peros_core::{ApiRegistry, IntentFrame};

/// Grammar, registry and the parsed multi-step request.
pub fn happydog_inputs() -> (Lexicon, ApiRegistry, IntentFrame) {
    let lexicon = Lexicon::builtin(1);
    let frame = rule_parse(HAPPYDOG_REQUEST, &lexicon.grammar).expect("request parses");
    (lexicon, ApiRegistry::builtin(), frame)
}

#[cfg(test)]
mod tests {
    #[test]
    fn inputs_compile() {
        let (lex, reg, frame) = super::happydog_inputs();
        let plan = peros_core::compile(&frame, &lex, &reg, "bench").unwrap();
        assert!(plan.steps.len() >= 7);
    }
}
