//! Golden-file checks for the six prompt templates.
//!
//! Each golden is a full rendered prompt with canonical bindings,
//! generated once (set GOLDEN_REGEN=1 to rewrite) and reviewed. Any
//! drift in the template assets or the substitution logic fails here
//! byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use demorecon_core::templates::{render, TemplateId};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn canonical_bindings(id: TemplateId) -> BTreeMap<String, String> {
    let value = |name: &str| match (id, name) {
        // The worked one-shot prompt doubles as the decompose binding.
        (TemplateId::Decompose, "Prompt") => {
            "I have to pick up my son. Write a short SMS to my supervisor asking for leave. In 20 words. Be polite.".to_string()
        }
        _ => format!("<{}>", name.to_uppercase().replace(' ', "_")),
    };
    id.placeholders()
        .into_iter()
        .map(|name| (name.to_string(), value(name)))
        .collect()
}

#[test]
fn rendered_templates_match_goldens() {
    let regen = std::env::var_os("GOLDEN_REGEN").is_some();
    for id in TemplateId::ALL {
        let rendered = render(id, &canonical_bindings(id)).unwrap();
        let path = golden_dir().join(format!("{}.rendered.txt", id.name()));
        if regen {
            fs::create_dir_all(golden_dir()).unwrap();
            fs::write(&path, &rendered).unwrap();
            continue;
        }
        let golden = fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("missing golden {}: {e}", path.display()));
        assert_eq!(rendered, golden, "template {} drifted from its golden", id.name());
    }
    assert!(!regen, "goldens regenerated; rerun without GOLDEN_REGEN");
}

#[test]
fn template_assets_expose_expected_anchors() {
    let text = |id: TemplateId| id.text();
    assert!(text(TemplateId::FilterSeed).contains("missing important details that were supposed"));
    assert!(text(TemplateId::FilterSeed)
        .contains("If either is true, respond with 'Yes'. If not, respond with 'No'."));
    assert!(text(TemplateId::Decompose).contains("**Extract Facts:**"));
    assert!(text(TemplateId::Decompose).contains("Write a short SMS to my supervisor"));
    assert!(text(TemplateId::ModifyReconstruct)
        .contains("Randomly modify it to a new reasonable one"));
    assert!(text(TemplateId::ModifyReconstruct).contains("reply 'INVALID' for the revised prompt"));
    assert!(text(TemplateId::ResponseWithReference)
        .contains("making changes only to the necessary parts"));
    assert!(text(TemplateId::EvalJudge)
        .contains("**Your Judgement (answer with 'Yes' or 'No' only):**"));
    assert!(text(TemplateId::DetJudge)
        .contains("Does the response generally meet the instructions"));
}

#[test]
fn every_fixture_seed_renders_and_extracts_through_filter() {
    use demorecon_core::scripted::fixture_seeds;
    use demorecon_core::templates::{bindings, extract};
    for seed in fixture_seeds() {
        let rendered = render(
            TemplateId::FilterSeed,
            &bindings([("Prompt", seed.text.as_str())]),
        )
        .unwrap();
        let recovered = extract(TemplateId::FilterSeed, &rendered).unwrap();
        assert_eq!(recovered["Prompt"], seed.text);
    }
}
