//! Run-directory orchestration: stage execution with resume, the lock
//! file, provider stacks, reports, and exports.
//!
//! A run directory holds one dataset build. Stage outputs live under
//! stable names, the manifest tracks per-stage input/output hashes,
//! and a stage re-executes only when its inputs changed or its outputs
//! are missing or stale. Aside from manifest timestamps, two runs with
//! identical (config, seeds, fixture, rng seed) produce byte-identical
//! directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError, EmbeddingMode, ProviderConfig, ProviderMode};
use crate::eval::{self, Scoreboard, VerdictRecord};
use crate::manifest::{file_hash, now_unix_ms, ManifestError, RunManifest, StageEntry, StageStatus};
use crate::metrics::{self, CorpusStats, MetricsError, UniformityReport};
use crate::pipeline::{self, LlmContext, PipelineError};
use crate::provider::{
    CacheProvider, ChatProvider, CountingProvider, FixtureSink, HttpProvider, ProviderError,
    RecordingProvider, ReplayProvider, RetryPolicy,
};
use crate::records::{
    load_records, save_records, DecomposedInstruction, DetItem, EvalItem, PreferenceExample,
    PreferencePair, RecordError, ResponseMode, ResponseRecord, SeedInstruction, SftExample,
    VariantInstruction,
};
use crate::scripted::{ScriptedEmbedder, ScriptedModel};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run directory is locked by another invocation: {path} (remove the file if stale)")]
    Locked { path: PathBuf },
    #[error("{0}")]
    MissingInput(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error class for process exit codes: 2 for data and parse
/// problems, 3 for provider problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Provider,
}

impl RunnerError {
    pub fn class(&self) -> ErrorClass {
        match self {
            RunnerError::Provider(_) => ErrorClass::Provider,
            RunnerError::Pipeline(PipelineError::Provider(_)) => ErrorClass::Provider,
            RunnerError::Metrics(MetricsError::Provider(_)) => ErrorClass::Provider,
            _ => ErrorClass::Data,
        }
    }
}

/// Stages tracked by the run manifest, in run-all order (the last two
/// run only via the evaluate/detect commands).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    FilterSeeds,
    Decompose,
    Augment,
    CollectDirect,
    CollectReference,
    BuildEval,
    BuildDet,
    BuildPairsA,
    BuildPairsR,
    Stats,
    Evaluate,
    Detect,
}

impl StageKind {
    pub const RUN_ALL: [StageKind; 10] = [
        StageKind::FilterSeeds,
        StageKind::Decompose,
        StageKind::Augment,
        StageKind::CollectDirect,
        StageKind::CollectReference,
        StageKind::BuildEval,
        StageKind::BuildDet,
        StageKind::BuildPairsA,
        StageKind::BuildPairsR,
        StageKind::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::FilterSeeds => "filter_seeds",
            StageKind::Decompose => "decompose",
            StageKind::Augment => "augment",
            StageKind::CollectDirect => "collect_direct",
            StageKind::CollectReference => "collect_reference",
            StageKind::BuildEval => "build_eval",
            StageKind::BuildDet => "build_det",
            StageKind::BuildPairsA => "build_pairs_a",
            StageKind::BuildPairsR => "build_pairs_r",
            StageKind::Stats => "stats",
            StageKind::Evaluate => "evaluate",
            StageKind::Detect => "detect",
        }
    }
}

/// Stable file names inside a run directory.
pub mod files {
    pub const SEEDS: &str = "seeds.jsonl";
    pub const DECOMPOSITIONS: &str = "decompositions.jsonl";
    pub const VARIANTS: &str = "variants.jsonl";
    pub const RESPONSES_DIRECT: &str = "responses_direct.jsonl";
    pub const RESPONSES_REFERENCE: &str = "responses_reference.jsonl";
    pub const PAIRS_A: &str = "pairs_a.jsonl";
    pub const PAIRS_R: &str = "pairs_r.jsonl";
    pub const EVAL: &str = "eval.jsonl";
    pub const DET: &str = "det.jsonl";
    pub const STATS: &str = "stats.json";
    pub const VERDICTS_EVAL: &str = "verdicts.jsonl";
    pub const VERDICTS_DET: &str = "verdicts_det.jsonl";
    pub const UNIFORMITY: &str = "uniformity.json";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_MD: &str = "report.md";
    pub const MANIFEST: &str = "manifest.json";
    pub const LOCK: &str = ".run.lock";
}

/// Exclusive hold on a run directory for the life of the value.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, RunnerError> {
        let path = run_dir.join(files::LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(RunnerError::Locked { path })
            }
            Err(source) => Err(RunnerError::Io { path, source }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct ProviderRole {
    provider: Arc<CountingProvider<Box<dyn ChatProvider>>>,
    model: String,
    temperature: f64,
    max_tokens: Option<u32>,
    workers: usize,
    parse_retry_limit: u32,
}

impl ProviderRole {
    fn llm(&self) -> LlmContext<'_> {
        LlmContext {
            provider: &self.provider,
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            workers: self.workers,
            parse_retry_limit: self.parse_retry_limit,
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_dir: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub record: Option<PathBuf>,
}

/// What one stage produced (or why it was skipped).
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
    pub counts: BTreeMap<String, u64>,
}

pub struct Runner {
    config: Config,
    run_dir: PathBuf,
    seeds_input: Option<PathBuf>,
    manifest: RunManifest,
    pipeline_role: ProviderRole,
    judge_role: ProviderRole,
    candidate_role: ProviderRole,
    record_sink: Option<(PathBuf, Arc<FixtureSink>)>,
    _lock: RunLock,
}

impl Runner {
    /// Opens (or creates) a run directory, takes its lock, and loads
    /// or resets the manifest. A changed config hash invalidates every
    /// stage.
    pub fn new(mut config: Config, overrides: Overrides) -> Result<Self, RunnerError> {
        if let Some(replay) = &overrides.replay {
            for provider in [&mut config.provider]
                .into_iter()
                .chain(config.judge_provider.as_mut())
                .chain(config.candidate_provider.as_mut())
            {
                provider.mode = ProviderMode::Replay;
                provider.replay_path = Some(replay.clone());
            }
        }
        let run_dir = overrides
            .run_dir
            .clone()
            .or_else(|| config.paths.run_dir.clone())
            .ok_or(ConfigError::Invalid {
                key: "paths.run_dir",
                detail: "no run directory given (config key or --run-dir flag)".into(),
            })?;
        let seeds_input = overrides.seeds.clone().or_else(|| config.paths.seeds.clone());

        fs::create_dir_all(&run_dir).map_err(|source| RunnerError::Io {
            path: run_dir.clone(),
            source,
        })?;
        let lock = RunLock::acquire(&run_dir)?;

        let config_hash = config.hash();
        let manifest_path = run_dir.join(files::MANIFEST);
        let manifest = match RunManifest::load(&manifest_path) {
            Ok(existing) if existing.config_hash == config_hash => existing,
            Ok(_) => {
                log::warn!("config changed; all stages stale");
                RunManifest::new(config_hash, config.as_json())
            }
            Err(_) => RunManifest::new(config_hash, config.as_json()),
        };

        let record_sink = overrides
            .record
            .as_ref()
            .map(|path| (path.clone(), FixtureSink::new()));
        let sink = record_sink.as_ref().map(|(_, sink)| Arc::clone(sink));

        let stage = config.stage.clone();
        let pipeline_role = build_role(&config.provider, &stage, sink.clone())?;
        let judge_role = build_role(config.judge(), &stage, sink.clone())?;
        let candidate_role = build_role(config.candidate(), &stage, sink)?;

        Ok(Self {
            config,
            run_dir,
            seeds_input,
            manifest,
            pipeline_role,
            judge_role,
            candidate_role,
            record_sink,
            _lock: lock,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn seeds_input(&self) -> Result<&Path, RunnerError> {
        self.seeds_input
            .as_deref()
            .ok_or_else(|| RunnerError::MissingInput(
                "no seed input file given (config key paths.seeds or --seeds flag)".into(),
            ))
    }

    fn stage_inputs(&self, kind: StageKind) -> Result<Vec<PathBuf>, RunnerError> {
        use files::*;
        let p = |name: &str| self.path(name);
        Ok(match kind {
            StageKind::FilterSeeds => vec![self.seeds_input()?.to_path_buf()],
            StageKind::Decompose => vec![p(SEEDS)],
            StageKind::Augment => vec![p(SEEDS), p(DECOMPOSITIONS)],
            StageKind::CollectDirect => vec![p(SEEDS), p(VARIANTS)],
            StageKind::CollectReference => vec![p(SEEDS), p(VARIANTS), p(RESPONSES_DIRECT)],
            StageKind::BuildEval => vec![p(DECOMPOSITIONS), p(VARIANTS)],
            StageKind::BuildDet => vec![p(DECOMPOSITIONS), p(VARIANTS), p(RESPONSES_DIRECT)],
            StageKind::BuildPairsA => {
                vec![p(SEEDS), p(DECOMPOSITIONS), p(VARIANTS), p(RESPONSES_DIRECT)]
            }
            StageKind::BuildPairsR => vec![
                p(SEEDS),
                p(DECOMPOSITIONS),
                p(VARIANTS),
                p(RESPONSES_DIRECT),
                p(RESPONSES_REFERENCE),
            ],
            StageKind::Stats => vec![
                p(SEEDS),
                p(VARIANTS),
                p(EVAL),
                p(DET),
                p(RESPONSES_DIRECT),
                p(RESPONSES_REFERENCE),
                p(PAIRS_A),
                p(PAIRS_R),
            ],
            StageKind::Evaluate => vec![p(EVAL)],
            StageKind::Detect => vec![p(DET)],
        })
    }

    fn hash_inputs(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, RunnerError> {
        let mut hashes = BTreeMap::new();
        for path in paths {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            let hash = file_hash(path).map_err(|_| {
                RunnerError::MissingInput(format!(
                    "stage input {} is missing; run the producing stage first",
                    path.display()
                ))
            })?;
            hashes.insert(name, hash);
        }
        Ok(hashes)
    }

    /// Runs one stage, honoring the resume rule.
    pub fn run_stage(&mut self, kind: StageKind) -> Result<StageReport, RunnerError> {
        let inputs = self.stage_inputs(kind)?;
        let input_hashes = self.hash_inputs(&inputs)?;
        let name = kind.name();
        if self.manifest.is_current(name, &input_hashes, &self.run_dir) {
            let entry = &self.manifest.stages[name];
            return Ok(StageReport {
                stage: name,
                skipped: true,
                outputs: entry
                    .output_hashes
                    .keys()
                    .map(|file| self.path(file))
                    .collect(),
                counts: entry.counts.clone(),
            });
        }

        let started = Instant::now();
        let before = self.pipeline_role.provider.stats();
        let before_judge = self.judge_role.provider.stats();
        let before_candidate = self.candidate_role.provider.stats();

        let executed = self.execute(kind);
        let wall_ms = started.elapsed().as_millis() as u64;

        let (outputs, mut counts) = match executed {
            Ok(result) => result,
            Err(e) => {
                self.manifest.stages.insert(
                    name.to_string(),
                    StageEntry {
                        status: StageStatus::Failed,
                        input_hashes,
                        output_hashes: BTreeMap::new(),
                        counts: BTreeMap::new(),
                        wall_ms,
                        finished_at_unix_ms: now_unix_ms(),
                    },
                );
                self.manifest.save(&self.path(files::MANIFEST))?;
                return Err(e);
            }
        };

        let after: Vec<(u64, u64)> = [
            (self.pipeline_role.provider.stats(), before),
            (self.judge_role.provider.stats(), before_judge),
            (self.candidate_role.provider.stats(), before_candidate),
        ]
        .iter()
        .map(|((req, hit), (req0, hit0))| (req - req0, hit - hit0))
        .collect();
        let requests: u64 = after.iter().map(|(r, _)| r).sum();
        let served_cached: u64 = after.iter().map(|(_, h)| h).sum();
        counts.insert("requests".into(), requests);
        counts.insert("requests_cached".into(), served_cached);

        let mut output_hashes = BTreeMap::new();
        for output in &outputs {
            let file = output
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            output_hashes.insert(file, file_hash(output)?);
        }
        self.manifest.stages.insert(
            name.to_string(),
            StageEntry {
                status: StageStatus::Done,
                input_hashes,
                output_hashes,
                counts: counts.clone(),
                wall_ms,
                finished_at_unix_ms: now_unix_ms(),
            },
        );
        self.manifest.save(&self.path(files::MANIFEST))?;

        Ok(StageReport {
            stage: name,
            skipped: false,
            outputs,
            counts,
        })
    }

    /// All data stages in order.
    pub fn run_all(&mut self) -> Result<Vec<StageReport>, RunnerError> {
        let mut reports = Vec::new();
        for kind in StageKind::RUN_ALL {
            reports.push(self.run_stage(kind)?);
        }
        Ok(reports)
    }

    /// Flushes the record sink, if any. Call once per invocation.
    pub fn finish(&self) -> Result<Option<(PathBuf, usize)>, RunnerError> {
        match &self.record_sink {
            Some((path, sink)) => {
                let written = sink.flush(path)?;
                Ok(Some((path.clone(), written)))
            }
            None => Ok(None),
        }
    }

    fn execute(
        &self,
        kind: StageKind,
    ) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        match kind {
            StageKind::FilterSeeds => self.exec_filter(),
            StageKind::Decompose => self.exec_decompose(),
            StageKind::Augment => self.exec_augment(),
            StageKind::CollectDirect => self.exec_collect_direct(),
            StageKind::CollectReference => self.exec_collect_reference(),
            StageKind::BuildEval => self.exec_build_eval(),
            StageKind::BuildDet => self.exec_build_det(),
            StageKind::BuildPairsA => self.exec_build_pairs(ResponseMode::Direct),
            StageKind::BuildPairsR => self.exec_build_pairs(ResponseMode::Reference),
            StageKind::Stats => self.exec_stats(),
            StageKind::Evaluate => self.exec_evaluate(),
            StageKind::Detect => self.exec_detect(),
        }
    }

    fn exec_filter(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let input = self.seeds_input()?;
        let candidates: Vec<SeedInstruction> = load_records(input)?;
        for (line, seed) in candidates.iter().enumerate() {
            let expected = crate::records::content_id(&seed.text);
            if seed.seed_id.as_str() != expected {
                return Err(RunnerError::Record(RecordError::Malformed {
                    path: input.to_path_buf(),
                    line: line + 1,
                    detail: format!(
                        "seed_id {} does not match content hash {expected}",
                        seed.seed_id
                    ),
                }));
            }
        }
        let kept = pipeline::filter_seeds(&candidates, &self.pipeline_role.llm())?;
        let out = self.path(files::SEEDS);
        let written = save_records(&kept, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([
                ("candidates".into(), candidates.len() as u64),
                ("kept".into(), written as u64),
            ]),
        ))
    }

    fn exec_decompose(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let seeds: Vec<SeedInstruction> = load_records(&self.path(files::SEEDS))?;
        let decompositions = pipeline::decompose_all(&seeds, &self.pipeline_role.llm())?;
        let out = self.path(files::DECOMPOSITIONS);
        let written = save_records(&decompositions, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([
                ("seeds".into(), seeds.len() as u64),
                ("decomposed".into(), written as u64),
            ]),
        ))
    }

    fn exec_augment(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let seeds: Vec<SeedInstruction> = load_records(&self.path(files::SEEDS))?;
        let decompositions: Vec<DecomposedInstruction> =
            load_records(&self.path(files::DECOMPOSITIONS))?;
        let variants = pipeline::augment_all(&seeds, &decompositions, &self.pipeline_role.llm())?;
        let valid = variants.iter().filter(|v| v.valid).count() as u64;
        let out = self.path(files::VARIANTS);
        let written = save_records(&variants, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([
                ("variants".into(), written as u64),
                ("valid".into(), valid),
                ("invalid".into(), written as u64 - valid),
            ]),
        ))
    }

    fn exec_collect_direct(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let seeds: Vec<SeedInstruction> = load_records(&self.path(files::SEEDS))?;
        let variants: Vec<VariantInstruction> = load_records(&self.path(files::VARIANTS))?;
        let responses =
            pipeline::collect_direct_all(&seeds, &variants, &self.pipeline_role.llm())?;
        let out = self.path(files::RESPONSES_DIRECT);
        let written = save_records(&responses, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([("responses".into(), written as u64)]),
        ))
    }

    fn exec_collect_reference(
        &self,
    ) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let seeds: Vec<SeedInstruction> = load_records(&self.path(files::SEEDS))?;
        let variants: Vec<VariantInstruction> = load_records(&self.path(files::VARIANTS))?;
        let direct: Vec<ResponseRecord> = load_records(&self.path(files::RESPONSES_DIRECT))?;
        let responses = pipeline::collect_reference_all(
            &seeds,
            &variants,
            &direct,
            &self.pipeline_role.llm(),
        )?;
        let out = self.path(files::RESPONSES_REFERENCE);
        let written = save_records(&responses, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([("responses".into(), written as u64)]),
        ))
    }

    fn exec_build_eval(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let decompositions: Vec<DecomposedInstruction> =
            load_records(&self.path(files::DECOMPOSITIONS))?;
        let variants: Vec<VariantInstruction> = load_records(&self.path(files::VARIANTS))?;
        let stage = self.config.stage.to_stage_config();
        let items = pipeline::build_eval(&decompositions, &variants, &stage);
        let qualifying = pipeline::qualifying_eval_seeds(&decompositions, &variants, &stage);
        let out = self.path(files::EVAL);
        let written = save_records(&items, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([
                ("items".into(), written as u64),
                ("qualifying_seeds".into(), qualifying.len() as u64),
            ]),
        ))
    }

    fn exec_build_det(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let decompositions: Vec<DecomposedInstruction> =
            load_records(&self.path(files::DECOMPOSITIONS))?;
        let variants: Vec<VariantInstruction> = load_records(&self.path(files::VARIANTS))?;
        let direct: Vec<ResponseRecord> = load_records(&self.path(files::RESPONSES_DIRECT))?;
        let stage = self.config.stage.to_stage_config();
        let items = pipeline::build_det(&decompositions, &variants, &direct, &stage);
        let yes = items
            .iter()
            .filter(|i| i.label == crate::records::Judgement::Yes)
            .count() as u64;
        let out = self.path(files::DET);
        let written = save_records(&items, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([("items".into(), written as u64), ("yes_labels".into(), yes)]),
        ))
    }

    fn exec_build_pairs(
        &self,
        mode: ResponseMode,
    ) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let seeds: Vec<SeedInstruction> = load_records(&self.path(files::SEEDS))?;
        let decompositions: Vec<DecomposedInstruction> =
            load_records(&self.path(files::DECOMPOSITIONS))?;
        let variants: Vec<VariantInstruction> = load_records(&self.path(files::VARIANTS))?;
        let direct: Vec<ResponseRecord> = load_records(&self.path(files::RESPONSES_DIRECT))?;
        let reference: Vec<ResponseRecord> = if mode == ResponseMode::Reference {
            load_records(&self.path(files::RESPONSES_REFERENCE))?
        } else {
            Vec::new()
        };
        let stage = self.config.stage.to_stage_config();
        let pairs = pipeline::build_pairs(
            &seeds,
            &decompositions,
            &variants,
            &direct,
            &reference,
            mode,
            &stage,
        );
        let out = self.path(match mode {
            ResponseMode::Direct => files::PAIRS_A,
            ResponseMode::Reference => files::PAIRS_R,
        });
        let written = save_records(&pairs, &out)?;
        Ok((vec![out], BTreeMap::from([("pairs".into(), written as u64)])))
    }

    fn exec_stats(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let stats = self.load_stats()?;
        let out = self.path(files::STATS);
        write_json(&out, &stats)?;
        Ok((
            vec![out],
            BTreeMap::from([
                ("seeds".into(), stats.seeds.count),
                ("eval".into(), stats.eval.count),
                ("det".into(), stats.det.count),
                ("pairs_a".into(), stats.pairs_a.count),
                ("pairs_r".into(), stats.pairs_r.count),
            ]),
        ))
    }

    /// Recomputes the stats report from the run directory.
    pub fn load_stats(&self) -> Result<CorpusStats, RunnerError> {
        let seeds: Vec<SeedInstruction> = load_records(&self.path(files::SEEDS))?;
        let variants: Vec<VariantInstruction> = load_records(&self.path(files::VARIANTS))?;
        let eval_items: Vec<EvalItem> = load_records(&self.path(files::EVAL))?;
        let det_items: Vec<DetItem> = load_records(&self.path(files::DET))?;
        let direct: Vec<ResponseRecord> = load_records(&self.path(files::RESPONSES_DIRECT))?;
        let reference: Vec<ResponseRecord> =
            load_records(&self.path(files::RESPONSES_REFERENCE))?;
        let pairs_a: Vec<PreferencePair> = load_records(&self.path(files::PAIRS_A))?;
        let pairs_r: Vec<PreferencePair> = load_records(&self.path(files::PAIRS_R))?;
        Ok(metrics::corpus_stats(
            &seeds, &variants, &eval_items, &det_items, &direct, &reference, &pairs_a, &pairs_r,
        ))
    }

    fn exec_evaluate(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let items: Vec<EvalItem> = load_records(&self.path(files::EVAL))?;
        let answers =
            eval::generate_candidate_responses(&items, &self.candidate_role.llm())?;
        let answered = answers.iter().filter(|a| a.text.is_some()).count() as u64;
        let (verdicts, board) = eval::judge_eval(&items, &answers, &self.judge_role.llm())?;
        let out = self.path(files::VERDICTS_EVAL);
        save_records(&verdicts, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([
                ("items".into(), board.total),
                ("answered".into(), answered),
                ("passed".into(), board.passed),
            ]),
        ))
    }

    fn exec_detect(&self) -> Result<(Vec<PathBuf>, BTreeMap<String, u64>), RunnerError> {
        let items: Vec<DetItem> = load_records(&self.path(files::DET))?;
        let (verdicts, board) = eval::judge_det(&items, &self.candidate_role.llm())?;
        let out = self.path(files::VERDICTS_DET);
        save_records(&verdicts, &out)?;
        Ok((
            vec![out],
            BTreeMap::from([
                ("items".into(), board.total),
                ("passed".into(), board.passed),
            ]),
        ))
    }

    /// Computes the dispersion report from the configured embedding
    /// source and writes uniformity.json.
    pub fn uniformity(&self, mode: ResponseMode) -> Result<(PathBuf, UniformityReport), RunnerError> {
        let embedding = self.config.embedding.as_ref().ok_or(ConfigError::Invalid {
            key: "embedding",
            detail: "no [embedding] section configured".into(),
        })?;
        let set = match embedding.mode {
            EmbeddingMode::File => {
                let path = embedding.path.as_ref().expect("validated");
                metrics::load_embeddings_csv(path)?
            }
            EmbeddingMode::Scripted => {
                let records = self.responses_for(mode)?;
                metrics::embed_responses(&records, &ScriptedEmbedder)?
            }
            EmbeddingMode::Endpoint => {
                let records = self.responses_for(mode)?;
                let embedder = crate::provider::HttpEmbedder::from_env(
                    embedding.base_url.clone().expect("validated"),
                    embedding.model.clone().unwrap_or_else(|| "embedding".into()),
                )?;
                metrics::embed_responses(&records, &embedder)?
            }
        };
        let report = metrics::uniformity(&set)?;
        let out = self.path(files::UNIFORMITY);
        write_json(&out, &report)?;
        Ok((out, report))
    }

    /// Embeds responses with the configured backend and exports the
    /// vectors as CSV (for external projection and plotting).
    pub fn export_embeddings(
        &self,
        mode: ResponseMode,
        out: &Path,
    ) -> Result<usize, RunnerError> {
        let embedding = self.config.embedding.as_ref().ok_or(ConfigError::Invalid {
            key: "embedding",
            detail: "no [embedding] section configured".into(),
        })?;
        let set = match embedding.mode {
            EmbeddingMode::File => {
                let path = embedding.path.as_ref().expect("validated");
                metrics::load_embeddings_csv(path)?
            }
            EmbeddingMode::Scripted => {
                metrics::embed_responses(&self.responses_for(mode)?, &ScriptedEmbedder)?
            }
            EmbeddingMode::Endpoint => {
                let embedder = crate::provider::HttpEmbedder::from_env(
                    embedding.base_url.clone().expect("validated"),
                    embedding.model.clone().unwrap_or_else(|| "embedding".into()),
                )?;
                metrics::embed_responses(&self.responses_for(mode)?, &embedder)?
            }
        };
        metrics::save_embeddings_csv(&set, out)?;
        Ok(set.len())
    }

    fn responses_for(&self, mode: ResponseMode) -> Result<Vec<ResponseRecord>, RunnerError> {
        let file = match mode {
            ResponseMode::Direct => files::RESPONSES_DIRECT,
            ResponseMode::Reference => files::RESPONSES_REFERENCE,
        };
        Ok(load_records(&self.path(file))?)
    }

    /// SFT export: (instruction, response) rows for the given mode. In
    /// reference mode the seeds keep their direct responses.
    pub fn export_sft(&self, mode: ResponseMode, out: &Path) -> Result<usize, RunnerError> {
        let seeds: Vec<SeedInstruction> = load_records(&self.path(files::SEEDS))?;
        let variants: Vec<VariantInstruction> = load_records(&self.path(files::VARIANTS))?;
        let direct: Vec<ResponseRecord> = load_records(&self.path(files::RESPONSES_DIRECT))?;
        let text_of: BTreeMap<String, &str> = seeds
            .iter()
            .map(|s| (s.seed_id.to_string(), s.text.as_str()))
            .chain(
                variants
                    .iter()
                    .filter(|v| v.valid)
                    .map(|v| (v.instruction_id().to_string(), v.text.as_str())),
            )
            .collect();
        let mut rows = Vec::new();
        let mut push_all = |records: &[ResponseRecord]| {
            for record in records {
                if let Some(instruction) = text_of.get(&record.instruction_id().to_string()) {
                    rows.push(SftExample {
                        instruction: instruction.to_string(),
                        response: record.text.clone(),
                    });
                }
            }
        };
        match mode {
            ResponseMode::Direct => push_all(&direct),
            ResponseMode::Reference => {
                let reference: Vec<ResponseRecord> =
                    load_records(&self.path(files::RESPONSES_REFERENCE))?;
                let seed_rows: Vec<ResponseRecord> = direct
                    .into_iter()
                    .filter(|r| r.variant_index.is_none())
                    .collect();
                push_all(&seed_rows);
                push_all(&reference);
            }
        }
        rows.sort_by(|a, b| (&a.instruction, &a.response).cmp(&(&b.instruction, &b.response)));
        Ok(save_records(&rows, out)?)
    }

    /// Preference export: the pairs file without seed ids.
    pub fn export_preferences(
        &self,
        mode: ResponseMode,
        out: &Path,
    ) -> Result<usize, RunnerError> {
        let source = match mode {
            ResponseMode::Direct => files::PAIRS_A,
            ResponseMode::Reference => files::PAIRS_R,
        };
        let pairs: Vec<PreferencePair> = load_records(&self.path(source))?;
        let rows: Vec<PreferenceExample> = pairs
            .into_iter()
            .map(|p| PreferenceExample {
                prompt: p.prompt,
                chosen: p.chosen,
                rejected: p.rejected,
            })
            .collect();
        Ok(save_records(&rows, out)?)
    }

    /// Assembles report.json and report.md from persisted files. The
    /// scoreboards are recounted from the verdict files, never cached.
    pub fn report(&self) -> Result<Vec<PathBuf>, RunnerError> {
        let eval_items: Vec<EvalItem> = load_records(&self.path(files::EVAL))?;
        let det_items: Vec<DetItem> = load_records(&self.path(files::DET))?;
        let eval_verdicts: Vec<VerdictRecord> = self
            .load_optional(files::VERDICTS_EVAL)?
            .unwrap_or_default();
        let det_verdicts: Vec<VerdictRecord> =
            self.load_optional(files::VERDICTS_DET)?.unwrap_or_default();
        let stats: Option<CorpusStats> = match fs::read(self.path(files::STATS)) {
            Ok(bytes) => serde_json::from_slice(&bytes).ok(),
            Err(_) => None,
        };

        let eval_board = (!eval_verdicts.is_empty())
            .then(|| eval::recount_eval(&eval_items, &eval_verdicts));
        let det_board =
            (!det_verdicts.is_empty()).then(|| eval::recount_det(&det_items, &det_verdicts));
        let per_seed = eval::per_seed_breakdown(&eval_items, &eval_verdicts);

        let (mut requests, mut served_cached) = (0u64, 0u64);
        for entry in self.manifest.stages.values() {
            requests += entry.counts.get("requests").copied().unwrap_or(0);
            served_cached += entry.counts.get("requests_cached").copied().unwrap_or(0);
        }
        let hit_rate = (requests > 0)
            .then(|| ((served_cached as f64 / requests as f64) * 10_000.0).round() / 100.0);

        #[derive(Serialize)]
        struct PerSeedRow {
            seed_id: String,
            total: u64,
            passed: u64,
        }
        #[derive(Serialize)]
        struct ReportDoc {
            run_id: String,
            config_hash: String,
            pipeline_model: String,
            judge_model: String,
            candidate_model: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            eval: Option<Scoreboard>,
            #[serde(skip_serializing_if = "Option::is_none")]
            det: Option<Scoreboard>,
            per_seed_eval: Vec<PerSeedRow>,
            requests: u64,
            requests_cached: u64,
            #[serde(skip_serializing_if = "Option::is_none")]
            cache_hit_rate_pct: Option<f64>,
            #[serde(skip_serializing_if = "Option::is_none")]
            stats: Option<CorpusStats>,
        }

        let doc = ReportDoc {
            run_id: self.manifest.run_id.clone(),
            config_hash: self.manifest.config_hash.clone(),
            pipeline_model: self.config.provider.model.clone(),
            judge_model: self.config.judge().model.clone(),
            candidate_model: self.config.candidate().model.clone(),
            eval: eval_board.clone(),
            det: det_board.clone(),
            per_seed_eval: per_seed
                .iter()
                .map(|(seed, board)| PerSeedRow {
                    seed_id: seed.to_string(),
                    total: board.total,
                    passed: board.passed,
                })
                .collect(),
            requests,
            requests_cached: served_cached,
            cache_hit_rate_pct: hit_rate,
            stats: stats.clone(),
        };
        let json_path = self.path(files::REPORT_JSON);
        write_json(&json_path, &doc)?;

        let mut md = String::new();
        md.push_str(&format!("# Run {}\n\n", doc.run_id));
        md.push_str(&format!("config hash: `{}`\n\n", doc.config_hash));
        md.push_str("| role | model |\n|---|---|\n");
        md.push_str(&format!("| pipeline | {} |\n", doc.pipeline_model));
        md.push_str(&format!("| judge | {} |\n", doc.judge_model));
        md.push_str(&format!("| candidate | {} |\n\n", doc.candidate_model));
        // One row per scoreboard actually present.
        md.push_str("| task | total | passed | accuracy |\n|---|---|---|---|\n");
        let fmt_board = |name: &str, b: &Scoreboard| {
            format!(
                "| {name} | {} | {} | {} |\n",
                b.total,
                b.passed,
                b.accuracy
                    .map(|a| format!("{a:.2}"))
                    .unwrap_or_else(|| "null".into())
            )
        };
        if let Some(board) = &eval_board {
            md.push_str(&fmt_board("eval", board));
        }
        if let Some(board) = &det_board {
            md.push_str(&fmt_board("det", board));
        }
        if !per_seed.is_empty() {
            md.push_str("\n## Eval by seed\n\n| seed | total | passed |\n|---|---|---|\n");
            for (seed, board) in &per_seed {
                md.push_str(&format!("| {seed} | {} | {} |\n", board.total, board.passed));
            }
        }
        md.push_str(&format!(
            "\nprovider requests: {requests} ({served_cached} cached"
        ));
        if let Some(rate) = hit_rate {
            md.push_str(&format!(", {rate:.2}%"));
        }
        md.push_str(")\n");
        if let Some(stats) = &stats {
            md.push_str("\n## Corpus\n\n```\n");
            md.push_str(&stats.render_table());
            md.push_str("```\n");
        }
        let md_path = self.path(files::REPORT_MD);
        fs::write(&md_path, md).map_err(|source| RunnerError::Io {
            path: md_path.clone(),
            source,
        })?;
        Ok(vec![json_path, md_path])
    }

    fn load_optional<T: serde::de::DeserializeOwned>(
        &self,
        name: &str,
    ) -> Result<Option<Vec<T>>, RunnerError> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(load_records(&path)?))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let tmp = path.with_extension("json.tmp");
    let mut body = serde_json::to_vec_pretty(value).expect("report serializes");
    body.push(b'\n');
    fs::write(&tmp, body).map_err(|source| RunnerError::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn build_role(
    provider: &ProviderConfig,
    stage: &crate::config::StageSection,
    sink: Option<Arc<FixtureSink>>,
) -> Result<ProviderRole, RunnerError> {
    let base: Box<dyn ChatProvider> = match provider.mode {
        ProviderMode::Http => {
            let policy = RetryPolicy {
                max_attempts: provider.retry_max_attempts,
                base_delay_ms: provider.retry_base_delay_ms,
                max_delay_ms: provider.retry_max_delay_ms,
            };
            Box::new(HttpProvider::from_env(
                provider.base_url.clone().expect("validated"),
                policy,
                provider.max_concurrency,
            )?)
        }
        ProviderMode::Replay => {
            let path = provider.replay_path.as_ref().ok_or(ConfigError::Invalid {
                key: "replay_path",
                detail: "required when mode = \"replay\" (or pass --replay)".into(),
            })?;
            Box::new(ReplayProvider::from_path(path).map_err(RunnerError::Record)?)
        }
        ProviderMode::Scripted => Box::new(ScriptedModel::new()),
    };
    let cached: Box<dyn ChatProvider> = match &provider.cache_dir {
        Some(dir) => Box::new(CacheProvider::new(base, dir.clone())?),
        None => base,
    };
    let recorded: Box<dyn ChatProvider> = match sink {
        Some(sink) => Box::new(RecordingProvider::new(cached, sink)),
        None => cached,
    };
    Ok(ProviderRole {
        provider: Arc::new(CountingProvider::new(recorded)),
        model: provider.model.clone(),
        temperature: provider.temperature,
        max_tokens: provider.max_tokens,
        workers: provider.max_concurrency,
        parse_retry_limit: stage.parse_retry_limit,
    })
}
