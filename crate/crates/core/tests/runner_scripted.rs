//! End-to-end runs against the scripted backend: determinism across
//! run directories, record-then-replay equivalence, resume after an
//! interrupted run, and the evaluation harness on the blueprint
//! corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use demorecon_core::config::{
    Config, EmbeddingConfig, EmbeddingMode, PathsSection, ProviderConfig, ProviderMode,
    StageSection,
};
use demorecon_core::records::save_records;
use demorecon_core::runner::{files, Overrides, Runner, StageKind};
use demorecon_core::scripted::{fixture_seeds, CANDIDATE_MODEL, JUDGE_MODEL, PIPELINE_MODEL};

fn provider(mode: ProviderMode, model: &str) -> ProviderConfig {
    ProviderConfig {
        mode,
        base_url: None,
        model: model.to_string(),
        temperature: 0.0,
        max_tokens: None,
        max_concurrency: 4,
        retry_max_attempts: 5,
        retry_base_delay_ms: 1,
        retry_max_delay_ms: 4,
        cache_dir: None,
        replay_path: None,
    }
}

fn scripted_config() -> Config {
    Config {
        provider: provider(ProviderMode::Scripted, PIPELINE_MODEL),
        judge_provider: Some(provider(ProviderMode::Scripted, JUDGE_MODEL)),
        candidate_provider: Some(provider(ProviderMode::Scripted, CANDIDATE_MODEL)),
        embedding: Some(EmbeddingConfig {
            mode: EmbeddingMode::Scripted,
            path: None,
            base_url: None,
            model: None,
        }),
        stage: StageSection {
            max_pairs_per_seed: 5,
            eval_sub_count: 4,
            eval_seed_cap: None,
            rng_seed: 42,
            parse_retry_limit: 1,
            pool_mode: demorecon_core::config::PoolModeConfig::OrderedWithSeed,
            split_eval_from_train: true,
        },
        paths: PathsSection::default(),
    }
}

fn replay_config(fixture: &Path) -> Config {
    let mut config = scripted_config();
    for provider in [&mut config.provider]
        .into_iter()
        .chain(config.judge_provider.as_mut())
        .chain(config.candidate_provider.as_mut())
    {
        provider.mode = ProviderMode::Replay;
        provider.replay_path = Some(fixture.to_path_buf());
    }
    config
}

fn write_seed_file(dir: &Path) -> PathBuf {
    let path = dir.join("seed_candidates.jsonl");
    save_records(&fixture_seeds(), &path).unwrap();
    path
}

fn run_everything(config: Config, run_dir: &Path, seeds: &Path, record: Option<&Path>) {
    let mut runner = Runner::new(
        config,
        Overrides {
            run_dir: Some(run_dir.to_path_buf()),
            seeds: Some(seeds.to_path_buf()),
            replay: None,
            record: record.map(Path::to_path_buf),
        },
    )
    .unwrap();
    runner.run_all().unwrap();
    runner.run_stage(StageKind::Evaluate).unwrap();
    runner.run_stage(StageKind::Detect).unwrap();
    runner.finish().unwrap();
}

/// All files of a run directory except the manifest and lock.
fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == files::MANIFEST || name == files::LOCK {
            continue;
        }
        out.insert(name, fs::read(entry.path()).unwrap());
    }
    out
}

fn manifest_without_timestamps(dir: &Path) -> serde_json::Value {
    let mut doc: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join(files::MANIFEST)).unwrap()).unwrap();
    if let Some(stages) = doc.get_mut("stages").and_then(|s| s.as_object_mut()) {
        for entry in stages.values_mut() {
            entry["wall_ms"] = 0.into();
            entry["finished_at_unix_ms"] = 0.into();
        }
    }
    doc
}

#[test]
fn scripted_run_is_byte_identical_across_run_directories() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = write_seed_file(dir.path());
    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    run_everything(scripted_config(), &run_a, &seeds, None);
    run_everything(scripted_config(), &run_b, &seeds, None);
    assert_eq!(data_files(&run_a), data_files(&run_b));
    assert_eq!(
        manifest_without_timestamps(&run_a),
        manifest_without_timestamps(&run_b)
    );
}

#[test]
fn recorded_fixture_replays_the_whole_pipeline_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = write_seed_file(dir.path());
    let fixture = dir.path().join("replay.jsonl");
    let run_scripted = dir.path().join("run_scripted");
    run_everything(scripted_config(), &run_scripted, &seeds, Some(&fixture));
    assert!(fixture.exists());

    let run_replayed = dir.path().join("run_replayed");
    run_everything(replay_config(&fixture), &run_replayed, &seeds, None);
    assert_eq!(data_files(&run_scripted), data_files(&run_replayed));
}

#[test]
fn fixture_scale_counts_hold() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = write_seed_file(dir.path());
    let run = dir.path().join("run");
    run_everything(scripted_config(), &run, &seeds, None);

    let count = |name: &str| -> usize {
        fs::read_to_string(run.join(name))
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .count()
    };
    assert_eq!(count(files::SEEDS), 11, "one candidate is filtered out");
    assert_eq!(count(files::DECOMPOSITIONS), 11);
    assert_eq!(count(files::VARIANTS), 37, "35 valid + 2 invalid");
    assert_eq!(count(files::RESPONSES_DIRECT), 46, "11 seeds + 35 variants");
    assert_eq!(count(files::RESPONSES_REFERENCE), 35);
    assert_eq!(count(files::EVAL), 12);
    assert_eq!(count(files::DET), 48);
    assert_eq!(count(files::VERDICTS_EVAL), 12);
    assert_eq!(count(files::VERDICTS_DET), 48);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join(files::MANIFEST)).unwrap()).unwrap();
    let stage = |name: &str| manifest["stages"][name]["counts"].clone();
    assert_eq!(stage("evaluate")["items"], 12);
    assert_eq!(stage("evaluate")["passed"], 7, "5 flubbed variants fail");
    assert_eq!(stage("detect")["items"], 48);
    assert_eq!(stage("build_det")["yes_labels"], 12);
}

#[test]
fn interrupted_run_resumes_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = write_seed_file(dir.path());

    // Record a full fixture and a truncated one that stops after the
    // direct-collection stage.
    let full_fixture = dir.path().join("full.jsonl");
    let partial_fixture = dir.path().join("partial.jsonl");
    run_everything(
        scripted_config(),
        &dir.path().join("run_recording"),
        &seeds,
        Some(&full_fixture),
    );
    {
        let mut runner = Runner::new(
            scripted_config(),
            Overrides {
                run_dir: Some(dir.path().join("run_partial_recording")),
                seeds: Some(seeds.clone()),
                replay: None,
                record: Some(partial_fixture.clone()),
            },
        )
        .unwrap();
        for kind in [
            StageKind::FilterSeeds,
            StageKind::Decompose,
            StageKind::Augment,
            StageKind::CollectDirect,
        ] {
            runner.run_stage(kind).unwrap();
        }
        runner.finish().unwrap();
    }

    // Uninterrupted reference run from the full fixture.
    let run_reference = dir.path().join("run_reference");
    run_everything(replay_config(&full_fixture), &run_reference, &seeds, None);

    // Interrupted run: the fixture lacks reference-mode entries, so
    // collect_reference dies with a replay miss mid-run.
    let fixture = dir.path().join("replay.jsonl");
    fs::copy(&partial_fixture, &fixture).unwrap();
    let run_resumed = dir.path().join("run_resumed");
    {
        let mut runner = Runner::new(
            replay_config(&fixture),
            Overrides {
                run_dir: Some(run_resumed.clone()),
                seeds: Some(seeds.clone()),
                replay: None,
                record: None,
            },
        )
        .unwrap();
        let err = runner.run_all().unwrap_err();
        assert!(matches!(
            err,
            demorecon_core::runner::RunnerError::Pipeline(_)
                | demorecon_core::runner::RunnerError::Provider(_)
        ));
    }

    // Completing the fixture and re-running resumes: earlier stages
    // are skipped, the rest execute, outputs match the reference.
    fs::copy(&full_fixture, &fixture).unwrap();
    {
        let mut runner = Runner::new(
            replay_config(&fixture),
            Overrides {
                run_dir: Some(run_resumed.clone()),
                seeds: Some(seeds.clone()),
                replay: None,
                record: None,
            },
        )
        .unwrap();
        let reports = runner.run_all().unwrap();
        let skipped: Vec<&str> = reports
            .iter()
            .filter(|r| r.skipped)
            .map(|r| r.stage)
            .collect();
        assert!(
            skipped.contains(&"filter_seeds")
                && skipped.contains(&"decompose")
                && skipped.contains(&"augment")
                && skipped.contains(&"collect_direct"),
            "completed stages must not re-execute, skipped: {skipped:?}"
        );
        runner.run_stage(StageKind::Evaluate).unwrap();
        runner.run_stage(StageKind::Detect).unwrap();
        runner.finish().unwrap();
    }
    assert_eq!(data_files(&run_reference), data_files(&run_resumed));
}

#[test]
fn detect_scores_the_scripted_candidate_against_the_answer_key() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = write_seed_file(dir.path());
    let run = dir.path().join("run");
    run_everything(scripted_config(), &run, &seeds, None);

    // Independent recount: join verdicts to labels by item id.
    use demorecon_core::eval::{recount_det, VerdictRecord};
    use demorecon_core::records::{load_records, DetItem};
    let items: Vec<DetItem> = load_records(&run.join(files::DET)).unwrap();
    let verdicts: Vec<VerdictRecord> = load_records(&run.join(files::VERDICTS_DET)).unwrap();
    assert_eq!(verdicts.len(), 48, "the scripted candidate answers every pair");
    let board = recount_det(&items, &verdicts);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join(files::MANIFEST)).unwrap()).unwrap();
    assert_eq!(
        manifest["stages"]["detect"]["counts"]["passed"],
        serde_json::json!(board.passed),
        "scoreboard must equal the recount from persisted verdicts"
    );
    // Every Yes-labeled pair is answered correctly by the scripted
    // candidate; only No-labeled pairs are ever flubbed.
    assert!(board.passed >= 12);
    println!("det scoreboard: {}/{} passed", board.passed, board.total);
}

#[test]
fn changed_upstream_inputs_invalidate_done_stages() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = write_seed_file(dir.path());
    let run = dir.path().join("run");

    let open = |seeds: &PathBuf| {
        Runner::new(
            scripted_config(),
            Overrides {
                run_dir: Some(run.clone()),
                seeds: Some(seeds.clone()),
                replay: None,
                record: None,
            },
        )
        .unwrap()
    };
    {
        let mut runner = open(&seeds);
        assert!(!runner.run_stage(StageKind::FilterSeeds).unwrap().skipped);
        assert!(runner.run_stage(StageKind::FilterSeeds).unwrap().skipped);
    }

    // Shrinking the candidate file changes the stage's input hash;
    // the stage must re-execute and the change must cascade.
    let mut fewer = fixture_seeds();
    fewer.truncate(6);
    save_records(&fewer, &seeds).unwrap();
    {
        let mut runner = open(&seeds);
        let report = runner.run_stage(StageKind::FilterSeeds).unwrap();
        assert!(!report.skipped, "changed inputs must re-execute the stage");
        assert_eq!(report.counts["candidates"], 6);
        // Downstream stage sees a new seeds.jsonl hash.
        let report = runner.run_stage(StageKind::Decompose).unwrap();
        assert!(!report.skipped);
    }

    // Tampering with a stage output also forces re-execution.
    {
        let mut runner = open(&seeds);
        std::fs::write(run.join(files::SEEDS), b"tampered\n").unwrap();
        let err = runner.run_stage(StageKind::FilterSeeds);
        // The tampered file no longer hash-matches: stage re-runs and
        // rewrites it.
        let report = err.unwrap();
        assert!(!report.skipped);
    }
}

#[test]
fn locked_run_directory_rejects_a_second_runner() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = write_seed_file(dir.path());
    let run = dir.path().join("run");
    let first = Runner::new(
        scripted_config(),
        Overrides {
            run_dir: Some(run.clone()),
            seeds: Some(seeds.clone()),
            replay: None,
            record: None,
        },
    )
    .unwrap();
    let second = Runner::new(
        scripted_config(),
        Overrides {
            run_dir: Some(run.clone()),
            seeds: Some(seeds),
            replay: None,
            record: None,
        },
    );
    assert!(matches!(
        second,
        Err(demorecon_core::runner::RunnerError::Locked { .. })
    ));
    drop(first);
    assert!(!run.join(files::LOCK).exists(), "lock releases on drop");
}
