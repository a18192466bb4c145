//! Synthesize-then-parse identity for the structured-output parsers.
//!
//! A generator builds well-formed model replies from random item lists
//! with varied numbering, emphasis, and whitespace; parsing must
//! recover the lists exactly. INVALID sentinels are inserted at random
//! positions in the variant-block outputs.

use proptest::prelude::*;

use demorecon_core::parsers::{parse_decomposition, parse_variant_blocks, parse_yes_no};
use demorecon_core::records::Judgement;

/// Item text: printable, single-line, no markdown scaffolding, does
/// not start with list numbering.
fn item() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 ,'()-]{0,38}[a-z.]".prop_map(|s| s.trim().to_string())
}

fn items(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(item(), 1..=max)
}

#[derive(Debug, Clone)]
struct Style {
    bold_headers: bool,
    paren_numbering: bool,
    extracted_spelling: bool,
    extra_blank_lines: bool,
}

fn style() -> impl Strategy<Value = Style> {
    (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()).prop_map(
        |(bold_headers, paren_numbering, extracted_spelling, extra_blank_lines)| Style {
            bold_headers,
            paren_numbering,
            extracted_spelling,
            extra_blank_lines,
        },
    )
}

fn header(style: &Style, name: &str) -> String {
    let spelling = if style.extracted_spelling {
        name.replace("Extract ", "Extracted ")
    } else {
        name.to_string()
    };
    if style.bold_headers {
        format!("**{spelling}:**")
    } else {
        format!("{spelling}:")
    }
}

fn numbered(style: &Style, index: usize, text: &str) -> String {
    if style.paren_numbering {
        format!("{index}) {text}")
    } else {
        format!("{index}. {text}")
    }
}

fn synthesize_decomposition(style: &Style, facts: &[String], subs: &[String]) -> String {
    let blank = if style.extra_blank_lines { "\n\n" } else { "\n" };
    let mut out = String::new();
    out.push_str(&header(style, "Extract Facts"));
    out.push('\n');
    for (i, fact) in facts.iter().enumerate() {
        out.push_str(&numbered(style, i + 1, fact));
        out.push('\n');
    }
    out.push_str(blank);
    out.push_str(&header(style, "Extract Instructions"));
    out.push('\n');
    for (i, sub) in subs.iter().enumerate() {
        out.push_str(&numbered(style, i + 1, sub));
        out.push('\n');
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decomposition_roundtrip(
        style in style(),
        facts in prop::collection::vec(item(), 0..=4),
        subs in items(8),
    ) {
        let text = synthesize_decomposition(&style, &facts, &subs);
        let parsed = parse_decomposition(&text).unwrap();
        prop_assert_eq!(parsed.facts, facts);
        prop_assert_eq!(parsed.subs, subs);
    }
}

fn invalid_spelling() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("INVALID".to_string()),
        Just("invalid".to_string()),
        Just("**INVALID**".to_string()),
        Just("'Invalid'".to_string()),
        Just("Invalid.".to_string()),
    ]
}

#[derive(Debug, Clone)]
enum Revision {
    Prompt(String),
    Invalid(String),
}

fn blocks() -> impl Strategy<Value = Vec<(String, Revision)>> {
    prop::collection::vec(
        (
            item(),
            prop_oneof![
                3 => item().prop_map(Revision::Prompt),
                1 => invalid_spelling().prop_map(Revision::Invalid),
            ],
        ),
        1..=8,
    )
}

fn synthesize_blocks(style: &Style, blocks: &[(String, Revision)]) -> String {
    let mut out = String::new();
    for (i, (modified, revision)) in blocks.iter().enumerate() {
        let n = i + 1;
        let (mod_header, rev_header) = if style.bold_headers {
            (
                format!("**Modified Instructions {n}:**"),
                format!("**Revised Prompt {n}:**"),
            )
        } else {
            (
                format!("Modified Instructions {n}:"),
                format!("Revised Prompt {n}:"),
            )
        };
        let revision_text = match revision {
            Revision::Prompt(p) => p.clone(),
            Revision::Invalid(s) => s.clone(),
        };
        out.push_str(&format!("{mod_header}\n{modified}\n\n{rev_header}\n{revision_text}\n\n"));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn variant_blocks_roundtrip(style in style(), blocks in blocks()) {
        let text = synthesize_blocks(&style, &blocks);
        let parsed = parse_variant_blocks(&text, blocks.len() as u32).unwrap();
        prop_assert_eq!(parsed.len(), blocks.len());
        for (i, (block, (modified, revision))) in parsed.iter().zip(&blocks).enumerate() {
            prop_assert_eq!(block.index as usize, i + 1);
            prop_assert_eq!(&block.modified_sub, modified);
            match revision {
                Revision::Prompt(p) => prop_assert_eq!(block.revised_prompt.as_ref(), Some(p)),
                Revision::Invalid(_) => prop_assert!(block.revised_prompt.is_none()),
            }
        }
    }

    #[test]
    fn yes_no_accepts_decorated_verdicts(
        yes in any::<bool>(),
        emphasis in prop_oneof![Just(""), Just("**"), Just("'")],
        punctuation in prop_oneof![Just(""), Just("."), Just("!")],
        explanation in prop_oneof![
            Just(String::new()),
            "[A-Za-z][A-Za-z ]{0,30}".prop_map(|s| format!(" {s}")),
        ],
    ) {
        let word = if yes { "Yes" } else { "No" };
        // An explanation requires a sentence break before it.
        let text = if explanation.is_empty() {
            format!("{emphasis}{word}{emphasis}{punctuation}")
        } else {
            format!("{emphasis}{word}{emphasis}.{explanation}")
        };
        let expected = if yes { Judgement::Yes } else { Judgement::No };
        prop_assert_eq!(parse_yes_no(&text).unwrap(), expected);
    }
}

// Parsers never invent content: every recovered string occurs
// verbatim in the synthesized input.
proptest! {
    #[test]
    fn parsed_strings_are_substrings_of_input(
        style in style(),
        facts in prop::collection::vec(item(), 0..=3),
        subs in items(5),
    ) {
        let text = synthesize_decomposition(&style, &facts, &subs);
        let parsed = parse_decomposition(&text).unwrap();
        for s in parsed.facts.iter().chain(&parsed.subs) {
            prop_assert!(text.contains(s));
        }
    }
}
