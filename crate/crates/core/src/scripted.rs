//! Deterministic offline chat backend.
//!
//! `ScriptedModel` answers every pipeline prompt from a fixed blueprint
//! corpus: it filters, decomposes, modifies and reconstructs the
//! blueprint seeds with template-compliant replies, and plays judge and
//! candidate personas for the evaluation harness. Replies embed a
//! `RESP:<id8>` marker naming the instruction they answer, which is
//! what the scripted judges compare.
//!
//! The backend exists so the full pipeline can run, be recorded into a
//! replay fixture, and be smoke-tested with zero network access. Which
//! persona answers is selected by the request's model name.

use std::collections::HashMap;

use crate::metrics::EmbeddingProvider;
use crate::provider::{ChatProvider, ChatRequest, ChatResponse, ProviderError};
use crate::records::{content_id, Judgement, SeedInstruction, TokenUsage};
use crate::templates::{self, TemplateId};

/// Model name answered by the faithful pipeline persona.
pub const PIPELINE_MODEL: &str = "scripted-pipeline-1";
/// Model name answered by the judging persona.
pub const JUDGE_MODEL: &str = "scripted-judge-1";
/// Model name answered by the deliberately imperfect candidate persona.
pub const CANDIDATE_MODEL: &str = "scripted-candidate-1";

/// Blueprint of one fixture seed: its sentences, the modification the
/// scripted model applies per sub-instruction (`None` means it replies
/// INVALID for that revision), and which variants the candidate
/// persona answers as if they were the original seed.
pub struct SeedBlueprint {
    pub source: &'static str,
    pub fact: Option<&'static str>,
    pub subs: &'static [&'static str],
    pub mods: &'static [Option<&'static str>],
    pub candidate_flubs: &'static [u32],
    pub filtered_out: bool,
}

impl SeedBlueprint {
    /// Full instruction text: the fact sentence (when present) followed
    /// by the sub-instruction sentences, joined with single spaces.
    pub fn text(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if let Some(fact) = self.fact {
            parts.push(fact);
        }
        parts.extend(self.subs.iter().copied());
        parts.join(" ")
    }

    /// Text of variant `index` (1-based): the seed text with exactly
    /// that sub-instruction sentence replaced. `None` when the
    /// blueprint marks the revision INVALID.
    pub fn variant_text(&self, index: u32) -> Option<String> {
        let j = index as usize - 1;
        let modified = (*self.mods.get(j)?)?;
        Some(self.text().replacen(self.subs[j], modified, 1))
    }
}

/// The 12-seed blueprint corpus behind the shipped replay fixture.
///
/// Composition: three seeds with four sub-instructions and all four
/// revisions valid (the eval-qualifying family), one five-sub seed with
/// an INVALID revision, one four-sub seed disqualified by an INVALID
/// revision, assorted one-to-five-sub seeds, and one underspecified
/// seed the filter drops.
pub const FIXTURE_CORPUS: &[SeedBlueprint] = &[
    SeedBlueprint {
        source: "fixture/letters",
        fact: Some("My cousin collects vintage postcards."),
        subs: &[
            "Write a letter suggesting three rare postcards to hunt for.",
            "Keep the letter under 120 words.",
            "Use a warm tone.",
            "End with a question.",
        ],
        mods: &[
            Some("Write a letter suggesting three postcard fairs to visit."),
            Some("Keep the letter over 200 words."),
            Some("Use a strictly formal tone."),
            Some("End with a proverb."),
        ],
        candidate_flubs: &[2, 4],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/marketing",
        fact: Some("Our bakery launches a rye sourdough on Monday."),
        subs: &[
            "Draft a social media post announcing the launch.",
            "Mention the launch day.",
            "Include exactly two emojis.",
            "Add a closing call to action.",
        ],
        mods: &[
            Some("Draft a radio jingle script announcing the launch."),
            Some("Mention the price instead of the launch day."),
            Some("Include no emojis at all."),
            Some("Add a closing disclaimer."),
        ],
        candidate_flubs: &[1, 3],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/clubs",
        fact: Some("The hiking club meets every Saturday at dawn."),
        subs: &[
            "Compose an invitation email for new members.",
            "List the required gear.",
            "Keep the email friendly.",
            "Sign off as the club secretary.",
        ],
        mods: &[
            Some("Compose a farewell email for departing members."),
            Some("List the optional snacks."),
            Some("Keep the email stern."),
            Some("Sign off as the club treasurer."),
        ],
        candidate_flubs: &[2],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/press",
        fact: Some("A small museum is reopening after renovations."),
        subs: &[
            "Write a press release about the reopening.",
            "Quote the curator once.",
            "Keep it under 150 words.",
            "Use the third person throughout.",
            "End with visiting hours.",
        ],
        mods: &[
            Some("Write an internal memo about the reopening."),
            None,
            Some("Keep it over 300 words."),
            Some("Use the first person throughout."),
            Some("End with ticket prices."),
        ],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/notes",
        fact: Some("My neighbor fixed my fence last week."),
        subs: &[
            "Write a thank-you card.",
            "Offer to return the favor.",
            "Keep it to three sentences.",
            "Avoid mentioning money.",
        ],
        mods: &[
            Some("Write an apology card."),
            Some("Offer to host a dinner instead."),
            None,
            Some("Avoid mentioning the fence."),
        ],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/lists",
        fact: None,
        subs: &["List five palindromic words."],
        mods: &[Some("List five onomatopoeic words.")],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/office",
        fact: Some("The office coffee machine is broken again."),
        subs: &[
            "Write a notice for the kitchen door.",
            "Suggest one alternative nearby.",
        ],
        mods: &[
            Some("Write an email to the facilities team."),
            Some("Suggest two alternatives nearby."),
        ],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/community",
        fact: Some("A local library hosts a poetry night each month."),
        subs: &[
            "Describe the event for a community newsletter.",
            "Mention that entry is free.",
            "Keep the description under 80 words.",
        ],
        mods: &[
            Some("Describe the event for a school bulletin."),
            Some("Mention that seats are limited."),
            Some("Keep the description over 150 words."),
        ],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/product",
        fact: Some("My startup ships reusable water bottles."),
        subs: &[
            "Write a product description for the website.",
            "Highlight the lifetime warranty.",
            "Use a playful tone.",
        ],
        mods: &[
            Some("Write a product description for a print catalog."),
            Some("Highlight the recycled materials."),
            Some("Use a serious tone."),
        ],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/events",
        fact: Some("The annual charity run happens in October."),
        subs: &[
            "Draft a volunteer recruitment flyer.",
            "Include the registration deadline.",
        ],
        mods: &[
            Some("Draft a sponsor recruitment flyer."),
            Some("Include the route map details."),
        ],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/family",
        fact: Some("Grandpa's 90th birthday is next month."),
        subs: &[
            "Plan a short toast for the party.",
            "Mention his garden.",
            "Include one gentle joke.",
            "Keep it under 100 words.",
            "End by raising a glass.",
        ],
        mods: &[
            Some("Plan a short welcome speech for the party."),
            Some("Mention his old workshop."),
            Some("Include one heartfelt memory."),
            Some("Keep it under 40 words."),
            Some("End by announcing the cake."),
        ],
        candidate_flubs: &[],
        filtered_out: false,
    },
    SeedBlueprint {
        source: "fixture/orphaned",
        fact: None,
        subs: &["Summarize the passage above."],
        mods: &[],
        candidate_flubs: &[],
        filtered_out: true,
    },
];

/// The blueprint corpus as candidate seed records, in blueprint order.
pub fn fixture_seeds() -> Vec<SeedInstruction> {
    FIXTURE_CORPUS
        .iter()
        .map(|b| SeedInstruction::new(b.text(), b.source).expect("blueprint text is non-empty"))
        .collect()
}

/// First 8 hex chars of the content id; the marker embedded in
/// scripted responses.
pub fn short_id(text: &str) -> String {
    content_id(text)[..8].to_string()
}

/// Extracts the `RESP:<id8>` marker from a scripted response.
pub fn response_marker(text: &str) -> Option<&str> {
    let rest = text.strip_prefix("RESP:")?;
    let marker = rest.get(..8)?;
    marker
        .chars()
        .all(|c| c.is_ascii_hexdigit())
        .then_some(marker)
}

struct VariantInfo {
    seed_index: usize,
    flubbed: bool,
}

pub struct ScriptedModel {
    seed_index_by_text: HashMap<String, usize>,
    variant_by_text: HashMap<String, VariantInfo>,
}

impl Default for ScriptedModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedModel {
    pub fn new() -> Self {
        let mut seed_index_by_text = HashMap::new();
        let mut variant_by_text = HashMap::new();
        for (i, blueprint) in FIXTURE_CORPUS.iter().enumerate() {
            seed_index_by_text.insert(blueprint.text(), i);
            for index in 1..=blueprint.subs.len() as u32 {
                if let Some(text) = blueprint.variant_text(index) {
                    variant_by_text.insert(
                        text,
                        VariantInfo {
                            seed_index: i,
                            flubbed: blueprint.candidate_flubs.contains(&index),
                        },
                    );
                }
            }
        }
        Self {
            seed_index_by_text,
            variant_by_text,
        }
    }

    fn filter_reply(&self, prompt: &str) -> String {
        let deficient = self
            .seed_index_by_text
            .get(prompt)
            .map(|&i| FIXTURE_CORPUS[i].filtered_out)
            .unwrap_or(false);
        if deficient { "Yes" } else { "No" }.to_string()
    }

    fn decompose_reply(&self, prompt: &str) -> String {
        let (facts, subs): (Vec<String>, Vec<String>) = match self.seed_index_by_text.get(prompt) {
            Some(&i) => {
                let b = &FIXTURE_CORPUS[i];
                (
                    b.fact.iter().map(|f| f.to_string()).collect(),
                    b.subs.iter().map(|s| s.to_string()).collect(),
                )
            }
            // Unknown prompt: treat every sentence as a sub-instruction.
            None => (
                Vec::new(),
                prompt
                    .split_inclusive('.')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect(),
            ),
        };
        let mut out = String::from("**Extract Facts:**\n");
        for (i, fact) in facts.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, fact));
        }
        out.push_str("\n**Extract Instructions:**\n");
        for (i, sub) in subs.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, sub));
        }
        out.trim_end().to_string()
    }

    fn augment_reply(&self, prompt: &str) -> String {
        let Some(&i) = self.seed_index_by_text.get(prompt) else {
            return "I cannot produce variants for this prompt.".to_string();
        };
        let blueprint = &FIXTURE_CORPUS[i];
        let mut out = String::new();
        for (j, modified) in blueprint.mods.iter().enumerate() {
            let index = j + 1;
            let (modified_text, revised) = match modified {
                Some(m) => (
                    m.to_string(),
                    blueprint
                        .variant_text(index as u32)
                        .expect("valid mod has a variant text"),
                ),
                None => (
                    format!("Replace this requirement with something unanswerable ({index})."),
                    "INVALID".to_string(),
                ),
            };
            out.push_str(&format!(
                "**Modified Instructions {index}:**\n{modified_text}\n\n**Revised Prompt {index}:**\n{revised}\n\n"
            ));
        }
        out.trim_end().to_string()
    }

    fn direct_reply(&self, instruction: &str, model: &str) -> String {
        // The candidate persona answers flubbed variants as if it had
        // been given the original seed: the classic miss of a single
        // modified sub-instruction.
        if model == CANDIDATE_MODEL {
            if let Some(info) = self.variant_by_text.get(instruction) {
                if info.flubbed {
                    let seed_text = FIXTURE_CORPUS[info.seed_index].text();
                    return Self::formula_response(&seed_text);
                }
            }
        }
        Self::formula_response(instruction)
    }

    fn formula_response(instruction: &str) -> String {
        format!(
            "RESP:{} Acknowledged. This reply is written to satisfy every requirement of the request: {}",
            short_id(instruction),
            instruction
        )
    }

    fn reference_reply(original_prompt: &str, new_prompt: &str) -> String {
        format!(
            "RESP:{} (minimal revision of RESP:{}) Acknowledged. Only the parts that the new request changes are rewritten: {}",
            short_id(new_prompt),
            short_id(original_prompt),
            new_prompt
        )
    }

    fn eval_judge_reply(prompt: &str, response: &str) -> String {
        let expected = short_id(prompt);
        let verdict = match response_marker(response) {
            Some(marker) if marker == expected => Judgement::Yes,
            _ => Judgement::No,
        };
        verdict.to_string()
    }

    fn det_judge_reply(prompt: &str, response: &str, model: &str) -> String {
        let expected = short_id(prompt);
        let matches = response_marker(response) == Some(expected.as_str());
        let mut verdict = if matches { Judgement::Yes } else { Judgement::No };
        if model == CANDIDATE_MODEL && !matches {
            if let Some(marker) = response_marker(response) {
                if det_flub(&expected, marker) {
                    verdict = Judgement::Yes;
                }
            }
        }
        verdict.to_string()
    }
}

/// Whether the candidate persona mistakes this non-matching pair for a
/// compliant one. Deterministic in the two markers.
fn det_flub(instruction_marker: &str, response_marker: &str) -> bool {
    let a = u32::from_str_radix(&instruction_marker[..2], 16).unwrap_or(0);
    let b = u32::from_str_radix(&response_marker[..2], 16).unwrap_or(0);
    (a ^ b).is_multiple_of(4)
}

impl ChatProvider for ScriptedModel {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        request.validate()?;
        let content = request.last_user_content();
        let text = if let Ok(b) = templates::extract(TemplateId::FilterSeed, content) {
            self.filter_reply(&b["Prompt"])
        } else if let Ok(b) = templates::extract(TemplateId::Decompose, content) {
            self.decompose_reply(&b["Prompt"])
        } else if let Ok(b) = templates::extract(TemplateId::ModifyReconstruct, content) {
            self.augment_reply(&b["Prompt"])
        } else if let Ok(b) = templates::extract(TemplateId::ResponseWithReference, content) {
            Self::reference_reply(&b["Original Prompt"], &b["New Prompt"])
        } else if let Ok(b) = templates::extract(TemplateId::EvalJudge, content) {
            Self::eval_judge_reply(&b["prompt"], &b["response"])
        } else if let Ok(b) = templates::extract(TemplateId::DetJudge, content) {
            Self::det_judge_reply(&b["Prompt"], &b["Response"], &request.model)
        } else {
            self.direct_reply(content, &request.model)
        };
        let usage = TokenUsage {
            prompt_tokens: content.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
        };
        Ok(ChatResponse {
            text,
            usage: Some(usage),
            cached: false,
        })
    }
}

/// Deterministic embedding stub: eight dimensions derived from the
/// text's content hash, each in [0, 1).
pub struct ScriptedEmbedder;

impl EmbeddingProvider for ScriptedEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts
            .iter()
            .map(|t| {
                let id = content_id(t);
                let bytes = hex::decode(&id).expect("content id is hex");
                (0..8)
                    .map(|k| {
                        let hi = bytes[2 * k] as u16;
                        let lo = bytes[2 * k + 1] as u16;
                        f64::from((hi << 8) | lo) / f64::from(u16::MAX)
                    })
                    .collect()
            })
            .collect())
    }
}
