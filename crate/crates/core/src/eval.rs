//! LLM-as-judge evaluation harness.
//!
//! Scores a candidate model two ways: instruction-following accuracy
//! on the eval set (a judge model reads each instruction/response pair
//! and answers Yes or No) and compliance-detection accuracy on the
//! detection set (the candidate itself answers Yes or No per pair and
//! is scored against the labels). Unanswerable and ambiguous items
//! count as failures rather than being dropped, so totals stay fixed
//! and accuracy is conservative.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::parsers;
use crate::pipeline::{is_fatal_provider, LlmContext, PipelineError};
use crate::records::{DetItem, EvalItem, ItemId, Judgement, SeedId};
use crate::templates::{self, TemplateId};

/// One persisted verdict row (verdicts.jsonl).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    pub item_id: ItemId,
    pub verdict: Judgement,
    pub judge_model: String,
}

/// Pass counts for one evaluation. Accuracy is a percentage, reported
/// as null when the total is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub total: u64,
    pub passed: u64,
    pub accuracy: Option<f64>,
}

impl Scoreboard {
    pub fn new(total: u64, passed: u64) -> Self {
        assert!(passed <= total);
        let accuracy =
            (total > 0).then(|| ((passed as f64 / total as f64) * 10_000.0).round() / 100.0);
        Self {
            total,
            passed,
            accuracy,
        }
    }
}

/// A candidate answer per eval item; `None` marks an unanswered item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateAnswer {
    pub item_id: ItemId,
    pub text: Option<String>,
}

/// Greedy candidate responses, one per eval instruction. Transient
/// provider failures leave the item unanswered (it will count as a
/// fail); fatal ones abort.
pub fn generate_candidate_responses(
    items: &[EvalItem],
    candidate: &LlmContext<'_>,
) -> Result<Vec<CandidateAnswer>, PipelineError> {
    let results = parallel(items, candidate.workers, |item| {
        candidate
            .provider
            .chat(&request(candidate, item.instruction.clone()))
    });
    let mut out = Vec::with_capacity(items.len());
    for (item, result) in items.iter().zip(results) {
        let text = match result {
            Ok(response) => Some(response.text),
            Err(e) if is_fatal_provider(&e) => return Err(e.into()),
            Err(e) => {
                log::warn!("eval item {} unanswered: {e}", item.item_id);
                None
            }
        };
        out.push(CandidateAnswer {
            item_id: item.item_id.clone(),
            text,
        });
    }
    Ok(out)
}

fn request(llm: &LlmContext<'_>, content: String) -> crate::provider::ChatRequest {
    let mut request = crate::provider::ChatRequest::user(&llm.model, content, llm.temperature);
    request.max_tokens = llm.max_tokens;
    request
}

fn parallel<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    if items.is_empty() {
        return Vec::new();
    }
    let workers = workers.clamp(1, items.len());
    let cursor = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("filled"))
        .collect()
}

/// Judges each answered item with the judge model; accuracy is the
/// percentage of Yes verdicts over all items. Verdicts are returned
/// sorted by item id.
pub fn judge_eval(
    items: &[EvalItem],
    answers: &[CandidateAnswer],
    judge: &LlmContext<'_>,
) -> Result<(Vec<VerdictRecord>, Scoreboard), PipelineError> {
    let answer_of: BTreeMap<&ItemId, &CandidateAnswer> =
        answers.iter().map(|a| (&a.item_id, a)).collect();
    let work: Vec<(&EvalItem, &str)> = items
        .iter()
        .filter_map(|item| {
            answer_of
                .get(&item.item_id)
                .and_then(|a| a.text.as_deref())
                .map(|text| (item, text))
        })
        .collect();
    let results = parallel(&work, judge.workers, |(item, response)| {
        let prompt = templates::render(
            TemplateId::EvalJudge,
            &templates::bindings([("prompt", item.instruction.as_str()), ("response", response)]),
        )?;
        judge.ask_yes_no(&prompt, &format!("judge {}", item.item_id))
    });
    let mut verdicts = Vec::new();
    let mut passed = 0u64;
    for ((item, _), result) in work.iter().zip(results) {
        match result {
            Ok(verdict) => {
                if verdict == Judgement::Yes {
                    passed += 1;
                }
                verdicts.push(VerdictRecord {
                    item_id: item.item_id.clone(),
                    verdict,
                    judge_model: judge.model.clone(),
                });
            }
            Err(PipelineError::Provider(e)) if is_fatal_provider(&e) => {
                return Err(e.into());
            }
            Err(e) => log::warn!("eval item {} counted as fail: {e}", item.item_id),
        }
    }
    verdicts.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok((verdicts, Scoreboard::new(items.len() as u64, passed)))
}

/// The candidate answers the detection prompt for every pair; accuracy
/// is the fraction whose parsed verdict equals the item label.
pub fn judge_det(
    items: &[DetItem],
    candidate: &LlmContext<'_>,
) -> Result<(Vec<VerdictRecord>, Scoreboard), PipelineError> {
    let results = parallel(items, candidate.workers, |item| {
        let prompt = templates::render(
            TemplateId::DetJudge,
            &templates::bindings([
                ("Prompt", item.instruction.as_str()),
                ("Response", item.response.as_str()),
            ]),
        )?;
        candidate.ask_yes_no(&prompt, &format!("detect {}", item.item_id))
    });
    let mut verdicts = Vec::new();
    let mut passed = 0u64;
    for (item, result) in items.iter().zip(results) {
        match result {
            Ok(verdict) => {
                if verdict == item.label {
                    passed += 1;
                }
                verdicts.push(VerdictRecord {
                    item_id: item.item_id.clone(),
                    verdict,
                    judge_model: candidate.model.clone(),
                });
            }
            Err(PipelineError::Provider(e)) if is_fatal_provider(&e) => {
                return Err(e.into());
            }
            Err(e) => log::warn!("det item {} counted as wrong: {e}", item.item_id),
        }
    }
    verdicts.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok((verdicts, Scoreboard::new(items.len() as u64, passed)))
}

impl LlmContext<'_> {
    fn ask_yes_no(&self, prompt: &str, context: &str) -> Result<Judgement, PipelineError> {
        let request = request(self, prompt.to_string());
        let mut last = None;
        for _ in 0..=self.parse_retry_limit {
            let response = self.provider.chat(&request)?;
            match parsers::parse_yes_no(&response.text) {
                Ok(verdict) => return Ok(verdict),
                Err(e) => last = Some(e),
            }
        }
        Err(PipelineError::Parse {
            context: context.to_string(),
            source: last.expect("at least one attempt"),
        })
    }
}

/// Recomputes the eval scoreboard from persisted verdicts: the total
/// comes from the item file, passes from Yes verdicts.
pub fn recount_eval(items: &[EvalItem], verdicts: &[VerdictRecord]) -> Scoreboard {
    let passed = verdicts.iter().filter(|v| v.verdict == Judgement::Yes).count() as u64;
    Scoreboard::new(items.len() as u64, passed)
}

/// Recomputes the det scoreboard by joining verdicts to labels by
/// item id; items without a verdict count as wrong.
pub fn recount_det(items: &[DetItem], verdicts: &[VerdictRecord]) -> Scoreboard {
    let verdict_of: BTreeMap<&ItemId, Judgement> =
        verdicts.iter().map(|v| (&v.item_id, v.verdict)).collect();
    let passed = items
        .iter()
        .filter(|item| verdict_of.get(&item.item_id) == Some(&item.label))
        .count() as u64;
    Scoreboard::new(items.len() as u64, passed)
}

/// Per-seed pass counts for the eval scoreboard; the rows sum to the
/// global counts.
pub fn per_seed_breakdown(
    items: &[EvalItem],
    verdicts: &[VerdictRecord],
) -> Vec<(SeedId, Scoreboard)> {
    let verdict_of: BTreeMap<&ItemId, Judgement> =
        verdicts.iter().map(|v| (&v.item_id, v.verdict)).collect();
    let mut rows: BTreeMap<&SeedId, (u64, u64)> = BTreeMap::new();
    for item in items {
        let entry = rows.entry(&item.seed_id).or_default();
        entry.0 += 1;
        if verdict_of.get(&item.item_id) == Some(&Judgement::Yes) {
            entry.1 += 1;
        }
    }
    rows.into_iter()
        .map(|(seed, (total, passed))| (seed.clone(), Scoreboard::new(total, passed)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{ChatProvider, ChatRequest, ChatResponse, ProviderError};
    use crate::records::content_id;

    struct AlwaysYes;

    impl ChatProvider for AlwaysYes {
        fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            Ok(ChatResponse {
                text: "Yes".into(),
                usage: None,
                cached: false,
            })
        }
    }

    fn llm(provider: &dyn ChatProvider) -> LlmContext<'_> {
        LlmContext {
            provider,
            model: "judge-test".into(),
            temperature: 0.0,
            max_tokens: None,
            workers: 2,
            parse_retry_limit: 1,
        }
    }

    fn det_family() -> Vec<DetItem> {
        // One family of 4 variants: 16 items, 4 Yes labels.
        let mut items = Vec::new();
        for v in 1..=4u32 {
            for w in 1..=4u32 {
                items.push(DetItem {
                    item_id: ItemId(content_id(&format!("det|s|{v}|{w}"))),
                    instruction: format!("Variant {v}."),
                    response: format!("Answer to variant {w}."),
                    label: if v == w { Judgement::Yes } else { Judgement::No },
                });
            }
        }
        items
    }

    #[test]
    fn always_yes_candidate_scores_25_on_a_balanced_family() {
        let provider = AlwaysYes;
        let (verdicts, board) = judge_det(&det_family(), &llm(&provider)).unwrap();
        assert_eq!(board.total, 16);
        assert_eq!(board.passed, 4);
        assert_eq!(board.accuracy, Some(25.0));
        assert_eq!(verdicts.len(), 16);
        assert!(verdicts.iter().all(|v| v.verdict == Judgement::Yes));
    }

    struct PerfectDetector;

    impl ChatProvider for PerfectDetector {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
            let content = request.last_user_content();
            let bindings =
                crate::templates::extract(TemplateId::DetJudge, content).expect("det prompt");
            // Labels in det_family embed the variant number.
            let v = bindings["Prompt"].replace(|c: char| !c.is_ascii_digit(), "");
            let w = bindings["Response"].replace(|c: char| !c.is_ascii_digit(), "");
            Ok(ChatResponse {
                text: if v == w { "Yes" } else { "No" }.into(),
                usage: None,
                cached: false,
            })
        }
    }

    #[test]
    fn perfect_detector_scores_100() {
        let provider = PerfectDetector;
        let (_, board) = judge_det(&det_family(), &llm(&provider)).unwrap();
        assert_eq!(board.accuracy, Some(100.0));
    }

    #[test]
    fn scoreboard_accuracy_rounds_to_two_decimals() {
        assert_eq!(Scoreboard::new(12, 7).accuracy, Some(58.33));
        assert_eq!(Scoreboard::new(12, 12).accuracy, Some(100.0));
        assert_eq!(Scoreboard::new(0, 0).accuracy, None);
    }

    #[test]
    fn unanswered_items_count_in_total_but_not_passed() {
        let items: Vec<EvalItem> = (0..3)
            .map(|i| EvalItem {
                item_id: ItemId(format!("item{i}")),
                instruction: format!("Instruction {i}."),
                seed_id: SeedId("s".into()),
            })
            .collect();
        let answers = vec![
            CandidateAnswer {
                item_id: items[0].item_id.clone(),
                text: Some("fine".into()),
            },
            CandidateAnswer {
                item_id: items[1].item_id.clone(),
                text: None,
            },
            CandidateAnswer {
                item_id: items[2].item_id.clone(),
                text: Some("fine".into()),
            },
        ];
        let provider = AlwaysYes;
        let (verdicts, board) = judge_eval(&items, &answers, &llm(&provider)).unwrap();
        assert_eq!(board.total, 3);
        assert_eq!(board.passed, 2);
        assert_eq!(verdicts.len(), 2);
        assert_eq!(recount_eval(&items, &verdicts), board);
    }

    #[test]
    fn judging_is_invariant_to_item_order() {
        let items: Vec<EvalItem> = (0..8)
            .map(|i| EvalItem {
                item_id: ItemId(format!("item{i}")),
                instruction: format!("Instruction {i}."),
                seed_id: SeedId("s".into()),
            })
            .collect();
        let answers: Vec<CandidateAnswer> = items
            .iter()
            .map(|item| CandidateAnswer {
                item_id: item.item_id.clone(),
                text: Some(format!("answer to {}", item.item_id)),
            })
            .collect();
        let provider = AlwaysYes;
        let llm = llm(&provider);
        let (verdicts_fwd, board_fwd) = judge_eval(&items, &answers, &llm).unwrap();
        let mut reversed_items = items.clone();
        reversed_items.reverse();
        let mut reversed_answers = answers;
        reversed_answers.reverse();
        let (verdicts_rev, board_rev) =
            judge_eval(&reversed_items, &reversed_answers, &llm).unwrap();
        assert_eq!(board_fwd, board_rev);
        assert_eq!(verdicts_fwd, verdicts_rev, "verdicts merge sorted by item id");
    }

    #[test]
    fn breakdown_sums_to_global_counts() {
        let items: Vec<EvalItem> = (0..6)
            .map(|i| EvalItem {
                item_id: ItemId(format!("item{i}")),
                instruction: format!("Instruction {i}."),
                seed_id: SeedId(format!("seed{}", i % 2)),
            })
            .collect();
        let verdicts: Vec<VerdictRecord> = items
            .iter()
            .take(4)
            .map(|item| VerdictRecord {
                item_id: item.item_id.clone(),
                verdict: Judgement::Yes,
                judge_model: "j".into(),
            })
            .collect();
        let rows = per_seed_breakdown(&items, &verdicts);
        let total: u64 = rows.iter().map(|(_, b)| b.total).sum();
        let passed: u64 = rows.iter().map(|(_, b)| b.passed).sum();
        assert_eq!(total, 6);
        assert_eq!(passed, 4);
        assert_eq!(rows.len(), 2);
    }
}
