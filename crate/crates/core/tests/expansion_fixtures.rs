use std::path::Path;

use homodiv_core::expansion::{categorize_dimensions, generate_candidates, ExpansionRequest};
use homodiv_core::lexicon::Category;
use homodiv_core::llm::{RetryPolicy, ScriptedLlm};
use homodiv_core::templates::TemplateSet;
use homodiv_core::Error;

const T0: &str = "A sculptor in his studio";
const T1: &str = "sculptor studio european male elderly chiseling marble";

fn llm() -> ScriptedLlm {
    ScriptedLlm::from_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scripted_expansion.json")).unwrap()
}

fn policy() -> RetryPolicy {
    RetryPolicy { backoff_ms: 0, ..RetryPolicy::default() }
}

#[test]
fn recorded_session_replays_to_the_expected_pool() {
    let llm = llm();
    let templates = TemplateSet::builtin();
    let categorization = categorize_dimensions(T1, &llm, &templates, policy()).unwrap();
    assert_eq!(categorization.groups[&Category::Attributes], ["european", "male", "elderly"]);
    assert_eq!(categorization.groups[&Category::ContextualSettings], ["studio"]);
    assert_eq!(categorization.warnings.len(), 1, "`bronze` is not in t1");

    let req = ExpansionRequest {
        t0: T0.into(),
        t1: T1.into(),
        categorization,
        pool_size: 6,
        preference_context: None,
    };
    let pool = generate_candidates(&req, &llm, &templates, policy()).unwrap();
    let prompts: Vec<&str> = pool.iter().map(|c| c.prompt.as_str()).collect();
    assert_eq!(
        prompts,
        [
            "A female sculptor in her studio",
            "A young asian sculptor in a studio",
            "An african sculptor carving wood in a village",
            "A teenage nonbinary sculptor in a workshop",
            "An elderly indian sculptor painting in a temple",
            "A sculptor and mentor together in a museum",
        ]
    );
    assert_eq!(pool[2].replaced_categories, [Category::Attributes, Category::ContextualSettings, Category::Actions]);
    let calls = llm.calls();
    assert_eq!(calls.len(), 3);
    assert_eq!(calls[2].1["attempt"], 1);
    assert_eq!(calls[2].1["needed"], 3);
}

#[test]
fn unrecorded_request_is_an_explicit_error() {
    let llm = llm();
    let templates = TemplateSet::builtin();
    let categorization = categorize_dimensions(T1, &llm, &templates, policy()).unwrap();
    // a different K changes the instruction, so nothing is recorded for it
    let req = ExpansionRequest {
        t0: T0.into(),
        t1: T1.into(),
        categorization,
        pool_size: 7,
        preference_context: None,
    };
    assert!(matches!(
        generate_candidates(&req, &llm, &templates, policy()),
        Err(Error::MissingFixture { .. })
    ));
}
