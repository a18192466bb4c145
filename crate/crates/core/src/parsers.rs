//! Parsers for the structured markdown-style outputs the templates
//! elicit: yes/no judgements, decomposition lists, and variant blocks
//! with INVALID sentinels.
//!
//! Header matching is tolerant (bold optional, Extract/Extracted both
//! accepted) because model outputs drift slightly from the one-shot
//! example. Parsers never invent content: every returned string is a
//! contiguous substring of the input after prefix and emphasis
//! stripping, and numbering is taken from the headers so a skipped
//! index stays detectable.

use thiserror::Error;

use crate::records::Judgement;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("ambiguous judgement: {0:?}")]
    AmbiguousJudgement(String),
    #[error("missing section header: {0}")]
    MissingSection(String),
    #[error("instructions section has no numbered items")]
    EmptyInstructions,
    #[error("no variant blocks found")]
    NoBlocksFound,
    #[error("block {index}: 'Modified Instructions' header without a 'Revised Prompt' partner")]
    MismatchedHeaders { index: u32 },
}

const SENTENCE_BREAKS: &[char] = &['.', '!', '?', ';', ':', '\n'];

/// How far header matching bends. Tolerant is the pipeline default;
/// Strict demands the canonical bold headers, the "Extract" spelling,
/// and "N." numbering, and is meant for validating recorded fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    #[default]
    Tolerant,
    Strict,
}

/// Parses a judge reply into Yes/No.
///
/// The verdict is the first alphabetic token; markdown emphasis,
/// quotes and punctuation around it are ignored. Anything after the
/// first sentence break is treated as explanation. The reply is
/// ambiguous when the first token is neither Yes nor No, or when both
/// tokens appear before any sentence break.
pub fn parse_yes_no(text: &str) -> Result<Judgement, ParseError> {
    let first_segment = match text.find(SENTENCE_BREAKS) {
        Some(pos) => &text[..pos],
        None => text,
    };
    let mut tokens = first_segment
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty());
    let Some(first) = tokens.next() else {
        return Err(ParseError::AmbiguousJudgement(snippet(text)));
    };
    let verdict = if first.eq_ignore_ascii_case("yes") {
        Judgement::Yes
    } else if first.eq_ignore_ascii_case("no") {
        Judgement::No
    } else {
        return Err(ParseError::AmbiguousJudgement(snippet(text)));
    };
    for token in tokens {
        let conflicting = match verdict {
            Judgement::Yes => token.eq_ignore_ascii_case("no"),
            Judgement::No => token.eq_ignore_ascii_case("yes"),
        };
        if conflicting {
            return Err(ParseError::AmbiguousJudgement(snippet(text)));
        }
    }
    Ok(verdict)
}

fn snippet(text: &str) -> String {
    let trimmed = text.trim();
    let mut end = trimmed.len().min(60);
    while !trimmed.is_char_boundary(end) {
        end -= 1;
    }
    trimmed[..end].to_string()
}

/// Facts and sub-instructions recovered from a decomposition reply,
/// stripped of their "N." numbering prefixes, order preserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDecomposition {
    pub facts: Vec<String>,
    pub subs: Vec<String>,
}

fn is_header(line: &str, names: &[&str], strictness: Strictness) -> bool {
    match strictness {
        Strictness::Tolerant => {
            let trimmed = line.trim().trim_matches('*').trim();
            names.iter().any(|n| trimmed.eq_ignore_ascii_case(n))
        }
        // Canonical form only: bold, first listed spelling.
        Strictness::Strict => line.trim_end() == format!("**{}**", names[0]),
    }
}

/// Strips a leading "N." or "N)" numbering prefix; returns the item
/// body and the parsed index. Strict mode accepts "N. " only.
fn numbered_item(line: &str, strictness: Strictness) -> Option<(u32, &str)> {
    let trimmed = line.trim_start();
    let digits: &str = trimmed.split(|c: char| !c.is_ascii_digit()).next()?;
    if digits.is_empty() {
        return None;
    }
    let rest = &trimmed[digits.len()..];
    let rest = match strictness {
        Strictness::Tolerant => rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?,
        Strictness::Strict => rest.strip_prefix(". ")?,
    };
    Some((digits.parse().ok()?, rest.trim()))
}

const FACTS_HEADERS: &[&str] = &["Extract Facts:", "Extracted Facts:"];
const INSTRUCTIONS_HEADERS: &[&str] = &["Extract Instructions:", "Extracted Instructions:"];

/// Parses a decomposition reply: a facts section followed by an
/// instructions section, each holding numbered items. Facts may be
/// empty; instructions may not.
pub fn parse_decomposition(text: &str) -> Result<ParsedDecomposition, ParseError> {
    parse_decomposition_with(text, Strictness::Tolerant)
}

pub fn parse_decomposition_with(
    text: &str,
    strictness: Strictness,
) -> Result<ParsedDecomposition, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let facts_at = lines
        .iter()
        .position(|l| is_header(l, FACTS_HEADERS, strictness))
        .ok_or_else(|| ParseError::MissingSection("Extract Facts".into()))?;
    let instructions_at = lines[facts_at + 1..]
        .iter()
        .position(|l| is_header(l, INSTRUCTIONS_HEADERS, strictness))
        .map(|rel| facts_at + 1 + rel)
        .ok_or_else(|| ParseError::MissingSection("Extract Instructions".into()))?;

    let facts = collect_items(&lines[facts_at + 1..instructions_at], strictness);
    let subs = collect_items(&lines[instructions_at + 1..], strictness);
    if subs.is_empty() {
        return Err(ParseError::EmptyInstructions);
    }
    Ok(ParsedDecomposition { facts, subs })
}

fn collect_items(lines: &[&str], strictness: Strictness) -> Vec<String> {
    let mut items: Vec<String> = Vec::new();
    for line in lines {
        if let Some((_, body)) = numbered_item(line, strictness) {
            items.push(body.to_string());
        } else if !line.trim().is_empty() {
            // Continuation of a wrapped item.
            if let Some(last) = items.last_mut() {
                last.push('\n');
                last.push_str(line.trim());
            }
        }
    }
    items
}

/// One "Modified Instructions N / Revised Prompt N" block.
/// `revised_prompt == None` means the model replied with the INVALID
/// sentinel for this revision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVariantBlock {
    pub index: u32,
    pub modified_sub: String,
    pub revised_prompt: Option<String>,
}

fn block_header(line: &str, name: &str, strictness: Strictness) -> Option<u32> {
    if strictness == Strictness::Strict {
        let rest = line
            .trim_end()
            .strip_prefix(&format!("**{name} "))?
            .strip_suffix(":**")?;
        return rest.chars().all(|c| c.is_ascii_digit()).then(|| rest.parse().ok())?;
    }
    let trimmed = line.trim().trim_matches('*').trim();
    let rest = if trimmed.len() >= name.len() && trimmed[..name.len()].eq_ignore_ascii_case(name) {
        &trimmed[name.len()..]
    } else {
        return None;
    };
    let rest = rest.trim_start();
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    let tail = rest[digits.len()..].trim();
    if tail.is_empty() || tail == ":" {
        digits.parse().ok()
    } else {
        None
    }
}

fn is_invalid_sentinel(text: &str) -> bool {
    let stripped: String = text
        .trim()
        .trim_matches(|c: char| matches!(c, '*' | '_' | '`' | '\'' | '"' | '.') || c.is_whitespace())
        .to_string();
    stripped.eq_ignore_ascii_case("invalid")
}

/// Parses the modify/reconstruct reply into variant blocks. Returns
/// one block per matched header pair; fewer than `expected` blocks is
/// left to the caller to report. Blocks whose revised prompt is the
/// INVALID sentinel come back with `revised_prompt == None`.
pub fn parse_variant_blocks(
    text: &str,
    expected: u32,
) -> Result<Vec<ParsedVariantBlock>, ParseError> {
    parse_variant_blocks_with(text, expected, Strictness::Tolerant)
}

pub fn parse_variant_blocks_with(
    text: &str,
    expected: u32,
    strictness: Strictness,
) -> Result<Vec<ParsedVariantBlock>, ParseError> {
    debug_assert!(expected >= 1);
    #[derive(PartialEq)]
    enum Mark {
        Modified(u32),
        Revised(u32),
    }
    let lines: Vec<&str> = text.lines().collect();
    let tolerant_alternatives = strictness == Strictness::Tolerant;
    let mut marks: Vec<(usize, Mark)> = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if let Some(n) = block_header(line, "Modified Instructions", strictness).or_else(|| {
            tolerant_alternatives
                .then(|| block_header(line, "Modified Instruction", strictness))
                .flatten()
        }) {
            marks.push((i, Mark::Modified(n)));
        } else if let Some(n) = block_header(line, "Revised Prompt", strictness).or_else(|| {
            tolerant_alternatives
                .then(|| block_header(line, "Revised Prompts", strictness))
                .flatten()
        }) {
            marks.push((i, Mark::Revised(n)));
        }
    }
    if marks.is_empty() {
        return Err(ParseError::NoBlocksFound);
    }

    let section = |from: usize, to: usize| -> String {
        lines[from..to].join("\n").trim().to_string()
    };

    let mut blocks = Vec::new();
    let mut i = 0;
    while i < marks.len() {
        let (mod_line, index) = match marks[i].1 {
            Mark::Modified(n) => (marks[i].0, n),
            Mark::Revised(n) => return Err(ParseError::MismatchedHeaders { index: n }),
        };
        let Some((rev_line, rev_index)) = marks.get(i + 1).and_then(|(line, mark)| match mark {
            Mark::Revised(n) => Some((*line, *n)),
            Mark::Modified(_) => None,
        }) else {
            return Err(ParseError::MismatchedHeaders { index });
        };
        if rev_index != index {
            return Err(ParseError::MismatchedHeaders { index });
        }
        let prompt_end = marks.get(i + 2).map(|(l, _)| *l).unwrap_or(lines.len());
        let modified_sub = section(mod_line + 1, rev_line);
        let revised = section(rev_line + 1, prompt_end);
        blocks.push(ParsedVariantBlock {
            index,
            modified_sub,
            revised_prompt: if is_invalid_sentinel(&revised) {
                None
            } else {
                Some(revised)
            },
        });
        i += 2;
    }
    if blocks.is_empty() {
        return Err(ParseError::NoBlocksFound);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yes_no_basics() {
        assert_eq!(parse_yes_no("Yes"), Ok(Judgement::Yes));
        assert_eq!(parse_yes_no("no"), Ok(Judgement::No));
        assert_eq!(parse_yes_no("**No.**"), Ok(Judgement::No));
        assert_eq!(parse_yes_no("'Yes'."), Ok(Judgement::Yes));
        assert_eq!(
            parse_yes_no("Yes. The response covers all five sub-instructions."),
            Ok(Judgement::Yes)
        );
        assert_eq!(
            parse_yes_no("No: the word limit is ignored."),
            Ok(Judgement::No)
        );
    }

    #[test]
    fn yes_no_ambiguities() {
        assert!(matches!(
            parse_yes_no("Maybe."),
            Err(ParseError::AmbiguousJudgement(_))
        ));
        assert!(matches!(
            parse_yes_no("Yes or no"),
            Err(ParseError::AmbiguousJudgement(_))
        ));
        assert!(matches!(
            parse_yes_no(""),
            Err(ParseError::AmbiguousJudgement(_))
        ));
        assert!(matches!(
            parse_yes_no("Yesterday"),
            Err(ParseError::AmbiguousJudgement(_))
        ));
    }

    const SMS_DECOMPOSITION: &str = "**Extract Facts:**\n1. The user needs to pick up their son.\n\n**Extract Instructions:**\n1. Write a short SMS.\n2. The SMS is addressed to the user's supervisor.\n3. The request is for leaving (presumably leaving work or another obligation).\n4. The message must be polite.\n5. The message should contain no more than 20 words.";

    #[test]
    fn decomposition_of_the_one_shot_reply() {
        let parsed = parse_decomposition(SMS_DECOMPOSITION).unwrap();
        assert_eq!(parsed.facts, vec!["The user needs to pick up their son."]);
        assert_eq!(parsed.subs.len(), 5);
        assert_eq!(parsed.subs[0], "Write a short SMS.");
        assert_eq!(
            parsed.subs[4],
            "The message should contain no more than 20 words."
        );
    }

    #[test]
    fn decomposition_accepts_plain_extracted_spelling() {
        let text = "Extracted Facts:\n\nExtracted Instructions:\n1) List three rivers.";
        let parsed = parse_decomposition(text).unwrap();
        assert!(parsed.facts.is_empty());
        assert_eq!(parsed.subs, vec!["List three rivers."]);
    }

    #[test]
    fn decomposition_error_paths() {
        assert_eq!(
            parse_decomposition("no headers here"),
            Err(ParseError::MissingSection("Extract Facts".into()))
        );
        assert_eq!(
            parse_decomposition("**Extract Facts:**\n1. A fact."),
            Err(ParseError::MissingSection("Extract Instructions".into()))
        );
        assert_eq!(
            parse_decomposition("**Extract Facts:**\n\n**Extract Instructions:**\n\n"),
            Err(ParseError::EmptyInstructions)
        );
    }

    #[test]
    fn variant_blocks_with_invalid_sentinel() {
        let text = "**Modified Instructions 1:**\nUse a casual tone.\n\n**Revised Prompt 1:**\nWrite a note. Use a casual tone.\n\n**Modified Instructions 2:**\nReply in Morse code only.\n\n**Revised Prompt 2:**\nINVALID\n\n**Modified Instructions 3:**\nAdd a postscript.\n\n**Revised Prompt 3:**\nWrite a note. Add a postscript.";
        let blocks = parse_variant_blocks(text, 3).unwrap();
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[0].index, 1);
        assert_eq!(blocks[0].revised_prompt.as_deref(), Some("Write a note. Use a casual tone."));
        assert_eq!(blocks[1].revised_prompt, None);
        assert_eq!(blocks[2].index, 3);
    }

    #[test]
    fn invalid_sentinel_tolerates_emphasis_and_case() {
        assert!(is_invalid_sentinel("INVALID"));
        assert!(is_invalid_sentinel("**invalid**"));
        assert!(is_invalid_sentinel("'Invalid'."));
        assert!(!is_invalid_sentinel("invalid instructions are listed"));
    }

    #[test]
    fn variant_block_errors() {
        assert_eq!(
            parse_variant_blocks("nothing structured", 2),
            Err(ParseError::NoBlocksFound)
        );
        let orphan = "**Modified Instructions 1:**\nSomething.\n\n**Modified Instructions 2:**\nOther.\n\n**Revised Prompt 2:**\nText.";
        assert_eq!(
            parse_variant_blocks(orphan, 2),
            Err(ParseError::MismatchedHeaders { index: 1 })
        );
    }

    #[test]
    fn strict_mode_rejects_tolerant_only_forms() {
        let plain = "Extracted Facts:\n1) A fact.\n\nExtracted Instructions:\n1) Do it.";
        assert!(parse_decomposition(plain).is_ok());
        assert!(parse_decomposition_with(plain, Strictness::Strict).is_err());

        let canonical = "**Extract Facts:**\n1. A fact.\n\n**Extract Instructions:**\n1. Do it.";
        let parsed = parse_decomposition_with(canonical, Strictness::Strict).unwrap();
        assert_eq!(parsed.subs, vec!["Do it."]);

        let plain_blocks =
            "Modified Instructions 1:\nM.\n\nRevised Prompt 1:\nP.";
        assert!(parse_variant_blocks(plain_blocks, 1).is_ok());
        assert!(parse_variant_blocks_with(plain_blocks, 1, Strictness::Strict).is_err());

        let canonical_blocks =
            "**Modified Instructions 1:**\nM.\n\n**Revised Prompt 1:**\nP.";
        let blocks =
            parse_variant_blocks_with(canonical_blocks, 1, Strictness::Strict).unwrap();
        assert_eq!(blocks[0].revised_prompt.as_deref(), Some("P."));
    }

    #[test]
    fn gap_in_indices_is_preserved() {
        let text = "**Modified Instructions 1:**\nA.\n\n**Revised Prompt 1:**\nP1.\n\n**Modified Instructions 3:**\nC.\n\n**Revised Prompt 3:**\nP3.";
        let blocks = parse_variant_blocks(text, 3).unwrap();
        let indices: Vec<u32> = blocks.iter().map(|b| b.index).collect();
        assert_eq!(indices, vec![1, 3]);
    }
}
