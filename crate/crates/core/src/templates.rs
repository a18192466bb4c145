//! The six prompt templates and their placeholder substitution.
//!
//! Templates live as external text assets under `templates/` (embedded
//! at compile time) so they can be audited character-by-character.
//! Rendering is pure substitution: each `{{ name }}` slot is replaced
//! by its binding and nothing else is transformed, with no trimming or
//! re-wrapping.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing binding for placeholder '{0}'")]
    MissingBinding(String),
    #[error("binding '{0}' does not match any placeholder")]
    UnusedBinding(String),
    #[error("rendered text does not match template {template} near segment {segment}")]
    ExtractionMismatch {
        template: &'static str,
        segment: usize,
    },
}

/// Which prompt template a pipeline LLM call uses. Direct response
/// collection is the one exception: it sends the instruction text as
/// the sole user message with no template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    FilterSeed,
    Decompose,
    ModifyReconstruct,
    ResponseWithReference,
    EvalJudge,
    DetJudge,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::FilterSeed,
        TemplateId::Decompose,
        TemplateId::ModifyReconstruct,
        TemplateId::ResponseWithReference,
        TemplateId::EvalJudge,
        TemplateId::DetJudge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::FilterSeed => "filter_seed",
            TemplateId::Decompose => "decompose",
            TemplateId::ModifyReconstruct => "modify_reconstruct",
            TemplateId::ResponseWithReference => "response_with_reference",
            TemplateId::EvalJudge => "eval_judge",
            TemplateId::DetJudge => "det_judge",
        }
    }

    /// Asset-relative path of the template source.
    pub fn asset_path(self) -> String {
        format!("templates/{}.txt", self.name())
    }

    /// The template text, byte-for-byte as stored on disk.
    pub fn text(self) -> &'static str {
        match self {
            TemplateId::FilterSeed => include_str!("../templates/filter_seed.txt"),
            TemplateId::Decompose => include_str!("../templates/decompose.txt"),
            TemplateId::ModifyReconstruct => include_str!("../templates/modify_reconstruct.txt"),
            TemplateId::ResponseWithReference => {
                include_str!("../templates/response_with_reference.txt")
            }
            TemplateId::EvalJudge => include_str!("../templates/eval_judge.txt"),
            TemplateId::DetJudge => include_str!("../templates/det_judge.txt"),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        segments(self.text())
            .iter()
            .filter_map(|seg| match seg {
                Segment::Placeholder(name) => Some(*name),
                Segment::Literal(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

/// Splits a template into literal runs and `{{ name }}` slots. Names
/// are the brace interior with surrounding whitespace trimmed.
fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        let Some(close_rel) = rest[open + 2..].find("}}") else {
            break;
        };
        let close = open + 2 + close_rel;
        if open > 0 {
            out.push(Segment::Literal(&rest[..open]));
        }
        out.push(Segment::Placeholder(rest[open + 2..close].trim()));
        rest = &rest[close + 2..];
    }
    if !rest.is_empty() {
        out.push(Segment::Literal(rest));
    }
    out
}

/// Renders a template with the given bindings. Every placeholder must
/// be bound and every binding must be used.
pub fn render(id: TemplateId, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let segs = segments(id.text());
    let names: Vec<&str> = segs
        .iter()
        .filter_map(|s| match s {
            Segment::Placeholder(n) => Some(*n),
            _ => None,
        })
        .collect();
    for name in &names {
        if !bindings.contains_key(*name) {
            return Err(TemplateError::MissingBinding((*name).to_string()));
        }
    }
    for key in bindings.keys() {
        if !names.iter().any(|n| n == key) {
            return Err(TemplateError::UnusedBinding(key.clone()));
        }
    }
    let mut out = String::with_capacity(id.text().len());
    for seg in segs {
        match seg {
            Segment::Literal(lit) => out.push_str(lit),
            Segment::Placeholder(name) => out.push_str(&bindings[name]),
        }
    }
    Ok(out)
}

/// Inverse of [`render`]: recovers the bound values from a rendered
/// prompt by matching the template's literal segments left to right.
/// Correct whenever no bound value contains an adjacent literal
/// segment, which holds for all pipeline uses (literals are the bold
/// section headers).
pub fn extract(id: TemplateId, rendered: &str) -> Result<BTreeMap<String, String>, TemplateError> {
    let segs = segments(id.text());
    let mut out = BTreeMap::new();
    let mut pos = 0usize;
    let mut idx = 0usize;
    while idx < segs.len() {
        match &segs[idx] {
            Segment::Literal(lit) => {
                if !rendered[pos..].starts_with(lit) {
                    return Err(TemplateError::ExtractionMismatch {
                        template: id.name(),
                        segment: idx,
                    });
                }
                pos += lit.len();
                idx += 1;
            }
            Segment::Placeholder(name) => {
                let value_end = match segs.get(idx + 1) {
                    Some(Segment::Literal(next)) => {
                        match rendered[pos..].find(next) {
                            Some(rel) => pos + rel,
                            None => {
                                return Err(TemplateError::ExtractionMismatch {
                                    template: id.name(),
                                    segment: idx + 1,
                                })
                            }
                        }
                    }
                    _ => rendered.len(),
                };
                out.insert((*name).to_string(), rendered[pos..value_end].to_string());
                pos = value_end;
                idx += 1;
            }
        }
    }
    if pos != rendered.len() {
        return Err(TemplateError::ExtractionMismatch {
            template: id.name(),
            segment: segs.len(),
        });
    }
    Ok(out)
}

/// Convenience for call sites: builds the binding map from pairs.
pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_inventory() {
        assert_eq!(TemplateId::FilterSeed.placeholders(), vec!["Prompt"]);
        assert_eq!(TemplateId::Decompose.placeholders(), vec!["Prompt"]);
        assert_eq!(
            TemplateId::ModifyReconstruct.placeholders(),
            vec!["Prompt", "Extracted Facts", "Extracted Instructions"]
        );
        assert_eq!(
            TemplateId::ResponseWithReference.placeholders(),
            vec!["Original Prompt", "Original Response", "New Prompt"]
        );
        assert_eq!(TemplateId::EvalJudge.placeholders(), vec!["prompt", "response"]);
        assert_eq!(TemplateId::DetJudge.placeholders(), vec!["Prompt", "Response"]);
    }

    #[test]
    fn decompose_keeps_one_shot_and_ends_with_bound_prompt() {
        let prompt = "I have to pick up my daughter. Write a note. Be brief.";
        let rendered = render(TemplateId::Decompose, &bindings([("Prompt", prompt)])).unwrap();
        assert!(rendered.contains("Write a short SMS to my supervisor asking for leaving."));
        assert!(rendered.contains("5. The message should contain no more than 20 words."));
        assert!(rendered.ends_with(prompt));
    }

    #[test]
    fn empty_bindings_leave_skeleton() {
        let rendered = render(
            TemplateId::EvalJudge,
            &bindings([("prompt", ""), ("response", "")]),
        )
        .unwrap();
        assert!(rendered.contains("**Prompt:**\n\n"));
        assert!(rendered.ends_with("**Your Judgement (answer with 'Yes' or 'No' only):**"));
    }

    #[test]
    fn missing_and_unused_bindings_error() {
        assert_eq!(
            render(TemplateId::FilterSeed, &bindings([])),
            Err(TemplateError::MissingBinding("Prompt".into()))
        );
        assert_eq!(
            render(
                TemplateId::FilterSeed,
                &bindings([("Prompt", "x"), ("Extra", "y")])
            ),
            Err(TemplateError::UnusedBinding("Extra".into()))
        );
    }

    #[test]
    fn extract_inverts_render() {
        for id in TemplateId::ALL {
            let mut bound = BTreeMap::new();
            for (i, name) in id.placeholders().iter().enumerate() {
                bound.insert(name.to_string(), format!("value number {i} for {name}"));
            }
            let rendered = render(id, &bound).unwrap();
            assert_eq!(extract(id, &rendered).unwrap(), bound, "template {}", id.name());
        }
    }
}
