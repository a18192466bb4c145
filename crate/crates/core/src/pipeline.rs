//! The augmentation stages: seed filtering, decomposition, variant
//! construction, response collection in two modes, preference-pair
//! assembly, and the eval/detection set builders.
//!
//! Each stage is a pure mapping from input records plus provider
//! replies to output records. Per-item LLM calls run under a bounded
//! worker pool; outputs are sorted by (seed_id, variant_index) before
//! writing, so results do not depend on completion order. Sampling
//! draws from per-seed derived RNG streams, so one seed's pairs do not
//! depend on which other seeds are present.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::parsers::{self, ParseError};
use crate::provider::{ChatProvider, ChatRequest, ProviderError};
use crate::records::{
    content_id, DecomposedInstruction, DetItem, EvalItem, InstructionId, ItemId, Judgement,
    PreferencePair, RecordError, ResponseMode, ResponseRecord, SeedId, SeedInstruction,
    VariantInstruction,
};
use crate::rngutil::{derive_rng, sample_indices};
use crate::templates::{self, TemplateId};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Template(#[from] crate::templates::TemplateError),
    #[error("missing data: {0}")]
    MissingData(String),
}

/// Knobs shared by the sampling stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub max_pairs_per_seed: u32,
    pub eval_sub_count: u32,
    pub eval_seed_cap: Option<u32>,
    pub rng_seed: u64,
    pub parse_retry_limit: u32,
    pub pool_mode: PoolMode,
    pub split_eval_from_train: bool,
}

/// Which instructions participate in the preference-pair pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Ordered pairs over the seed and its valid variants.
    OrderedWithSeed,
    /// Ordered pairs over the valid variants only.
    OrderedVariantsOnly,
}

impl StageConfig {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            max_pairs_per_seed: 5,
            eval_sub_count: 4,
            eval_seed_cap: None,
            rng_seed,
            parse_retry_limit: 1,
            pool_mode: PoolMode::OrderedWithSeed,
            split_eval_from_train: true,
        }
    }
}

/// Everything a stage needs to talk to the model.
pub struct LlmContext<'a> {
    pub provider: &'a dyn ChatProvider,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub workers: usize,
    pub parse_retry_limit: u32,
}

impl LlmContext<'_> {
    fn request(&self, content: String) -> ChatRequest {
        let mut request = ChatRequest::user(&self.model, content, self.temperature);
        request.max_tokens = self.max_tokens;
        request
    }

    /// One call plus up to `parse_retry_limit` re-asks on parse
    /// failure. Provider failures are returned as-is for the caller to
    /// classify.
    fn ask_parsed<T>(
        &self,
        content: &str,
        context: &str,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<T, PipelineError> {
        let request = self.request(content.to_string());
        let mut last = None;
        for _ in 0..=self.parse_retry_limit {
            let response = self.provider.chat(&request)?;
            match parse(&response.text) {
                Ok(value) => return Ok(value),
                Err(e) => last = Some(e),
            }
        }
        Err(PipelineError::Parse {
            context: context.to_string(),
            source: last.expect("at least one attempt runs"),
        })
    }
}

/// Provider failures that no retry or skip can fix: the run is
/// misconfigured or the fixture is incomplete.
pub fn is_fatal_provider(e: &ProviderError) -> bool {
    matches!(
        e,
        ProviderError::ReplayMiss { .. }
            | ProviderError::MissingApiKey
            | ProviderError::Permanent { .. }
            | ProviderError::InvalidRequest(_)
            | ProviderError::BadResponse(_)
            | ProviderError::Io { .. }
    )
}

/// Order-preserving bounded parallel map.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
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
                let result = f(i, &items[i]);
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

fn first_fatal<T>(
    results: Vec<Result<T, PipelineError>>,
) -> Result<Vec<Result<T, PipelineError>>, PipelineError> {
    if let Some(pos) = results.iter().position(|r| {
        matches!(r, Err(PipelineError::Provider(e)) if is_fatal_provider(e))
    }) {
        let mut results = results;
        match results.swap_remove(pos) {
            Err(e) => return Err(e),
            Ok(_) => unreachable!("position matched an Err"),
        }
    }
    Ok(results)
}

/// Keeps the candidates the filter judge clears (a No verdict means
/// the prompt is not deficient). Output order equals input order.
/// Candidates whose judgement stays ambiguous after retries are
/// dropped with a warning.
pub fn filter_seeds(
    candidates: &[SeedInstruction],
    llm: &LlmContext<'_>,
) -> Result<Vec<SeedInstruction>, PipelineError> {
    let verdicts = par_map(candidates, llm.workers, |_, seed| {
        let prompt = templates::render(
            TemplateId::FilterSeed,
            &templates::bindings([("Prompt", seed.text.as_str())]),
        )?;
        llm.ask_parsed(&prompt, &format!("filter {}", seed.seed_id), parsers::parse_yes_no)
    });
    let verdicts = first_fatal(verdicts)?;
    let mut kept = Vec::new();
    for (seed, verdict) in candidates.iter().zip(verdicts) {
        match verdict {
            Ok(Judgement::No) => kept.push(seed.clone()),
            Ok(Judgement::Yes) => {
                log::info!("seed {} filtered out as deficient", seed.seed_id);
            }
            Err(e) => {
                log::warn!("seed {} dropped: {e}", seed.seed_id);
            }
        }
    }
    Ok(kept)
}

/// Decomposes one seed into facts and sub-instructions.
pub fn decompose_seed(
    seed: &SeedInstruction,
    llm: &LlmContext<'_>,
) -> Result<DecomposedInstruction, PipelineError> {
    let prompt = templates::render(
        TemplateId::Decompose,
        &templates::bindings([("Prompt", seed.text.as_str())]),
    )?;
    let parsed = llm.ask_parsed(
        &prompt,
        &format!("decompose {}", seed.seed_id),
        parsers::parse_decomposition,
    )?;
    DecomposedInstruction::new(seed.seed_id.clone(), parsed.facts, parsed.subs)
        .map_err(PipelineError::Record)
}

/// Decomposes every seed; seeds whose reply stays unparseable are
/// excluded from downstream stages with a warning. Output is sorted by
/// seed id.
pub fn decompose_all(
    seeds: &[SeedInstruction],
    llm: &LlmContext<'_>,
) -> Result<Vec<DecomposedInstruction>, PipelineError> {
    let results = par_map(seeds, llm.workers, |_, seed| decompose_seed(seed, llm));
    let results = first_fatal(results)?;
    let mut out = Vec::new();
    for (seed, result) in seeds.iter().zip(results) {
        match result {
            Ok(decomposition) => out.push(decomposition),
            Err(e) => log::warn!("seed {} excluded: {e}", seed.seed_id),
        }
    }
    out.sort_by(|a, b| a.seed_id.cmp(&b.seed_id));
    Ok(out)
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, item)| format!("{}. {}", i + 1, item))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds the variant family for one seed with a single
/// modify-and-reconstruct call. INVALID revisions are stored with
/// `valid == false`; out-of-range or duplicate block indices are
/// dropped with a warning, and an under-complete reply keeps the
/// partial family.
pub fn augment_seed(
    seed: &SeedInstruction,
    decomposition: &DecomposedInstruction,
    llm: &LlmContext<'_>,
) -> Result<Vec<VariantInstruction>, PipelineError> {
    assert_eq!(seed.seed_id, decomposition.seed_id, "decomposition belongs to seed");
    let expected = decomposition.sub_count();
    let facts = numbered(&decomposition.facts);
    let subs = numbered(&decomposition.subs);
    let prompt = templates::render(
        TemplateId::ModifyReconstruct,
        &templates::bindings([
            ("Prompt", seed.text.as_str()),
            ("Extracted Facts", facts.as_str()),
            ("Extracted Instructions", subs.as_str()),
        ]),
    )?;
    let blocks = llm.ask_parsed(&prompt, &format!("augment {}", seed.seed_id), |text| {
        parsers::parse_variant_blocks(text, expected)
    })?;

    let mut seen = BTreeSet::new();
    let mut variants = Vec::new();
    for block in blocks {
        if block.index == 0 || block.index > expected {
            log::warn!(
                "seed {}: block index {} outside 1..={expected}, dropped",
                seed.seed_id,
                block.index
            );
            continue;
        }
        if !seen.insert(block.index) {
            log::warn!("seed {}: duplicate block index {}, dropped", seed.seed_id, block.index);
            continue;
        }
        let valid = block.revised_prompt.is_some();
        variants.push(VariantInstruction {
            seed_id: seed.seed_id.clone(),
            variant_index: block.index,
            modified_sub: block.modified_sub,
            text: block.revised_prompt.unwrap_or_default(),
            valid,
        });
    }
    if (variants.len() as u32) < expected {
        log::warn!(
            "seed {}: {} of {expected} variant blocks recovered",
            seed.seed_id,
            variants.len()
        );
    }
    Ok(variants)
}

/// Augments every decomposed seed; a seed whose reply has no blocks
/// yields zero variants. Output is sorted by (seed_id, variant_index).
pub fn augment_all(
    seeds: &[SeedInstruction],
    decompositions: &[DecomposedInstruction],
    llm: &LlmContext<'_>,
) -> Result<Vec<VariantInstruction>, PipelineError> {
    let by_id: HashMap<&SeedId, &SeedInstruction> =
        seeds.iter().map(|s| (&s.seed_id, s)).collect();
    let work: Vec<(&SeedInstruction, &DecomposedInstruction)> = decompositions
        .iter()
        .filter_map(|d| by_id.get(&d.seed_id).map(|s| (*s, d)))
        .collect();
    let results = par_map(&work, llm.workers, |_, (seed, decomposition)| {
        augment_seed(seed, decomposition, llm)
    });
    let results = first_fatal(results)?;
    let mut out = Vec::new();
    for ((seed, _), result) in work.iter().zip(results) {
        match result {
            Ok(variants) => out.extend(variants),
            Err(e) => log::warn!("seed {} yields zero variants: {e}", seed.seed_id),
        }
    }
    out.sort_by(|a, b| (&a.seed_id, a.variant_index).cmp(&(&b.seed_id, b.variant_index)));
    Ok(out)
}

/// Collects direct responses for every seed and every valid variant:
/// the instruction text goes out as the sole user message. The seed's
/// own response is needed both as reference material and as pair
/// material.
pub fn collect_direct_all(
    seeds: &[SeedInstruction],
    variants: &[VariantInstruction],
    llm: &LlmContext<'_>,
) -> Result<Vec<ResponseRecord>, PipelineError> {
    let mut work: Vec<(InstructionId, &str)> = Vec::new();
    for seed in seeds {
        work.push((InstructionId::Seed(seed.seed_id.clone()), seed.text.as_str()));
    }
    for variant in variants.iter().filter(|v| v.valid) {
        work.push((variant.instruction_id(), variant.text.as_str()));
    }
    collect_mode(&work, ResponseMode::Direct, llm)
}

/// Collects reference-mode responses for valid variants: the model is
/// shown the seed, the seed's direct response, and the variant, and
/// asked to revise only what the variant changes.
pub fn collect_reference_all(
    seeds: &[SeedInstruction],
    variants: &[VariantInstruction],
    direct_responses: &[ResponseRecord],
    llm: &LlmContext<'_>,
) -> Result<Vec<ResponseRecord>, PipelineError> {
    let seed_text: HashMap<&SeedId, &str> =
        seeds.iter().map(|s| (&s.seed_id, s.text.as_str())).collect();
    let seed_response: HashMap<&SeedId, &str> = direct_responses
        .iter()
        .filter(|r| r.variant_index.is_none())
        .map(|r| (&r.seed_id, r.text.as_str()))
        .collect();

    let mut work: Vec<(InstructionId, String)> = Vec::new();
    for variant in variants.iter().filter(|v| v.valid) {
        let (Some(original), Some(response)) = (
            seed_text.get(&variant.seed_id),
            seed_response.get(&variant.seed_id),
        ) else {
            log::warn!(
                "variant {} skipped: no direct seed response to reference",
                variant.instruction_id()
            );
            continue;
        };
        let prompt = templates::render(
            TemplateId::ResponseWithReference,
            &templates::bindings([
                ("Original Prompt", *original),
                ("Original Response", *response),
                ("New Prompt", variant.text.as_str()),
            ]),
        )?;
        work.push((variant.instruction_id(), prompt));
    }
    let borrowed: Vec<(InstructionId, &str)> = work
        .iter()
        .map(|(id, prompt)| (id.clone(), prompt.as_str()))
        .collect();
    collect_mode(&borrowed, ResponseMode::Reference, llm)
}

fn collect_mode(
    work: &[(InstructionId, &str)],
    mode: ResponseMode,
    llm: &LlmContext<'_>,
) -> Result<Vec<ResponseRecord>, PipelineError> {
    let results = par_map(work, llm.workers, |_, (_, prompt)| {
        llm.provider.chat(&llm.request(prompt.to_string()))
    });
    if let Some(pos) = results
        .iter()
        .position(|r| matches!(r, Err(e) if is_fatal_provider(e)))
    {
        let mut results = results;
        return Err(PipelineError::Provider(results.swap_remove(pos).unwrap_err()));
    }
    let mut out = Vec::new();
    for ((id, _), result) in work.iter().zip(results) {
        match result {
            Ok(response) => {
                let (seed_id, variant_index) = match id {
                    InstructionId::Seed(s) => (s.clone(), None),
                    InstructionId::Variant(s, j) => (s.clone(), Some(*j)),
                };
                out.push(ResponseRecord {
                    seed_id,
                    variant_index,
                    mode,
                    text: response.text,
                    usage: response.usage,
                });
            }
            Err(e) => log::warn!("instruction {id} skipped after retries: {e}"),
        }
    }
    out.sort_by(|a, b| (&a.seed_id, a.variant_index).cmp(&(&b.seed_id, b.variant_index)));
    Ok(out)
}

/// Seeds that qualify for the eval set: exactly `eval_sub_count`
/// sub-instructions with all of those variants valid. When
/// `eval_seed_cap` is set, a seeded uniform sample of that many seeds
/// is taken. Sorted by seed id.
pub fn qualifying_eval_seeds(
    decompositions: &[DecomposedInstruction],
    variants: &[VariantInstruction],
    config: &StageConfig,
) -> Vec<SeedId> {
    let mut valid_indices: HashMap<&SeedId, BTreeSet<u32>> = HashMap::new();
    for variant in variants.iter().filter(|v| v.valid) {
        valid_indices
            .entry(&variant.seed_id)
            .or_default()
            .insert(variant.variant_index);
    }
    let want: BTreeSet<u32> = (1..=config.eval_sub_count).collect();
    let mut qualifying: Vec<SeedId> = decompositions
        .iter()
        .filter(|d| d.sub_count() == config.eval_sub_count)
        .filter(|d| valid_indices.get(&d.seed_id) == Some(&want))
        .map(|d| d.seed_id.clone())
        .collect();
    qualifying.sort();
    if let Some(cap) = config.eval_seed_cap {
        let cap = (cap as usize).min(qualifying.len());
        let mut rng = derive_rng(config.rng_seed, "evalcap", "");
        let chosen = sample_indices(&mut rng, qualifying.len(), cap);
        qualifying = chosen.into_iter().map(|i| qualifying[i].clone()).collect();
    }
    qualifying
}

/// The eval set: all variants of the qualifying seeds, originals
/// excluded, so |eval| = eval_sub_count x #qualifying seeds.
pub fn build_eval(
    decompositions: &[DecomposedInstruction],
    variants: &[VariantInstruction],
    config: &StageConfig,
) -> Vec<EvalItem> {
    let qualifying: BTreeSet<SeedId> =
        qualifying_eval_seeds(decompositions, variants, config).into_iter().collect();
    if qualifying.is_empty() {
        log::warn!("no seeds qualify for the eval set");
        return Vec::new();
    }
    let mut items = Vec::new();
    for seed_id in &qualifying {
        let mut family: Vec<&VariantInstruction> = variants
            .iter()
            .filter(|v| v.valid && &v.seed_id == seed_id)
            .collect();
        family.sort_by_key(|v| v.variant_index);
        for variant in family {
            items.push(EvalItem {
                item_id: ItemId(content_id(&format!(
                    "eval|{}|{}|{}",
                    seed_id, variant.variant_index, variant.text
                ))),
                instruction: variant.text.clone(),
                seed_id: seed_id.clone(),
            });
        }
    }
    items
}

/// The detection set: within each qualifying seed's variant family V,
/// every (instruction, response) combination, |V|^2 items of which
/// exactly |V| carry a Yes label.
pub fn build_det(
    decompositions: &[DecomposedInstruction],
    variants: &[VariantInstruction],
    direct_responses: &[ResponseRecord],
    config: &StageConfig,
) -> Vec<DetItem> {
    let qualifying = qualifying_eval_seeds(decompositions, variants, config);
    let response_of: HashMap<InstructionId, &str> = direct_responses
        .iter()
        .map(|r| (r.instruction_id(), r.text.as_str()))
        .collect();
    let mut items = Vec::new();
    for seed_id in &qualifying {
        let mut family: Vec<&VariantInstruction> = variants
            .iter()
            .filter(|v| v.valid && &v.seed_id == seed_id)
            .collect();
        family.sort_by_key(|v| v.variant_index);
        if family
            .iter()
            .any(|v| !response_of.contains_key(&v.instruction_id()))
        {
            log::warn!("seed {seed_id} skipped in det set: missing direct responses");
            continue;
        }
        for v in &family {
            for w in &family {
                items.push(DetItem {
                    item_id: ItemId(content_id(&format!(
                        "det|{}|{}|{}",
                        seed_id, v.variant_index, w.variant_index
                    ))),
                    instruction: v.text.clone(),
                    response: response_of[&w.instruction_id()].to_string(),
                    label: if v.variant_index == w.variant_index {
                        Judgement::Yes
                    } else {
                        Judgement::No
                    },
                });
            }
        }
    }
    items
}

/// One member of a seed's pair pool.
struct FamilyMember<'a> {
    prompt: &'a str,
    response: &'a str,
}

/// Builds preference pairs for one response mode. The candidate pool
/// for a seed is every ordered pair (a, b), a != b, over the family
/// (the seed plus its valid variants under `OrderedWithSeed`), and a
/// seeded uniform sample of at most `max_pairs_per_seed` is kept. The
/// RNG stream depends only on (rng_seed, seed_id), so the direct and
/// reference sets share identical (seed_id, prompt) skeletons.
///
/// In reference mode the variants' reference responses are paired with
/// the seed's direct response (reference mode is defined only for
/// variants). When `split_eval_from_train` is set, seeds feeding the
/// eval set contribute no pairs.
pub fn build_pairs(
    seeds: &[SeedInstruction],
    decompositions: &[DecomposedInstruction],
    variants: &[VariantInstruction],
    direct_responses: &[ResponseRecord],
    reference_responses: &[ResponseRecord],
    mode: ResponseMode,
    config: &StageConfig,
) -> Vec<PreferencePair> {
    let excluded: BTreeSet<SeedId> = if config.split_eval_from_train {
        qualifying_eval_seeds(decompositions, variants, config)
            .into_iter()
            .collect()
    } else {
        BTreeSet::new()
    };

    let direct_of: HashMap<InstructionId, &str> = direct_responses
        .iter()
        .map(|r| (r.instruction_id(), r.text.as_str()))
        .collect();
    let reference_of: HashMap<InstructionId, &str> = reference_responses
        .iter()
        .map(|r| (r.instruction_id(), r.text.as_str()))
        .collect();

    let mut families: BTreeMap<&SeedId, Vec<&VariantInstruction>> = BTreeMap::new();
    for variant in variants.iter().filter(|v| v.valid) {
        families.entry(&variant.seed_id).or_default().push(variant);
    }

    let seed_by_id: HashMap<&SeedId, &SeedInstruction> =
        seeds.iter().map(|s| (&s.seed_id, s)).collect();

    let mut pairs = Vec::new();
    for (seed_id, mut family) in families {
        if excluded.contains(seed_id) {
            continue;
        }
        let Some(seed) = seed_by_id.get(seed_id) else {
            continue;
        };
        family.sort_by_key(|v| v.variant_index);

        let mut members: Vec<FamilyMember<'_>> = Vec::new();
        if config.pool_mode == PoolMode::OrderedWithSeed {
            match direct_of.get(&InstructionId::Seed((*seed_id).clone())) {
                Some(response) => members.push(FamilyMember {
                    prompt: &seed.text,
                    response,
                }),
                None => log::warn!("seed {seed_id} has no direct response; excluded from its pool"),
            }
        }
        for variant in &family {
            let response = match mode {
                ResponseMode::Direct => direct_of.get(&variant.instruction_id()),
                ResponseMode::Reference => reference_of.get(&variant.instruction_id()),
            };
            match response {
                Some(response) => members.push(FamilyMember {
                    prompt: &variant.text,
                    response,
                }),
                None => log::warn!(
                    "variant {} has no {mode} response; excluded from its pool",
                    variant.instruction_id()
                ),
            }
        }
        if members.len() < 2 {
            continue;
        }

        let mut pool: Vec<(usize, usize)> = Vec::new();
        for a in 0..members.len() {
            for b in 0..members.len() {
                if a != b {
                    pool.push((a, b));
                }
            }
        }
        let keep = (config.max_pairs_per_seed as usize).min(pool.len());
        let mut rng = derive_rng(config.rng_seed, "pairs", seed_id.as_str());
        let chosen = sample_indices(&mut rng, pool.len(), keep);
        for pick in chosen {
            let (a, b) = pool[pick];
            pairs.push(PreferencePair {
                seed_id: (*seed_id).clone(),
                prompt: members[a].prompt.to_string(),
                chosen: members[a].response.to_string(),
                rejected: members[b].response.to_string(),
            });
        }
    }
    pairs
}
