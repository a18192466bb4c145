//! Regenerates the bundled offline fixture set under `fixtures/`:
//! the 12-seed candidate corpus, a replay fixture covering every
//! provider exchange of the full pipeline plus both evaluation tasks,
//! and the replay config that ties them together.
//!
//!     cargo run -p demorecon-cli --example gen_fixtures
//!
//! Regeneration is deterministic; the fixture drift test fails if the
//! checked-in files disagree with this generator.

use std::path::{Path, PathBuf};

use demorecon_core::config::{
    Config, EmbeddingConfig, EmbeddingMode, PathsSection, PoolModeConfig, ProviderConfig,
    ProviderMode, StageSection,
};
use demorecon_core::records::save_records;
use demorecon_core::runner::{Overrides, Runner, StageKind};
use demorecon_core::scripted::{fixture_seeds, CANDIDATE_MODEL, JUDGE_MODEL, PIPELINE_MODEL};

pub const FIXTURE_CONFIG_TOML: &str = r#"# Offline replay configuration for the bundled 12-seed fixture corpus.
# All three provider roles replay from the same recorded fixture file;
# embeddings come from the deterministic scripted backend.

[provider]
mode = "replay"
model = "scripted-pipeline-1"
replay_path = "replay.jsonl"

[judge_provider]
mode = "replay"
model = "scripted-judge-1"
replay_path = "replay.jsonl"

[candidate_provider]
mode = "replay"
model = "scripted-candidate-1"
replay_path = "replay.jsonl"

[embedding]
mode = "scripted"

[stage]
rng_seed = 42

[paths]
seeds = "seeds.jsonl"
"#;

fn scripted_provider(model: &str) -> ProviderConfig {
    ProviderConfig {
        mode: ProviderMode::Scripted,
        base_url: None,
        model: model.to_string(),
        temperature: 0.0,
        max_tokens: None,
        max_concurrency: 4,
        retry_max_attempts: 5,
        retry_base_delay_ms: 1_000,
        retry_max_delay_ms: 60_000,
        cache_dir: None,
        replay_path: None,
    }
}

fn recording_config() -> Config {
    Config {
        provider: scripted_provider(PIPELINE_MODEL),
        judge_provider: Some(scripted_provider(JUDGE_MODEL)),
        candidate_provider: Some(scripted_provider(CANDIDATE_MODEL)),
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
            pool_mode: PoolModeConfig::OrderedWithSeed,
            split_eval_from_train: true,
        },
        paths: PathsSection::default(),
    }
}

/// Writes seeds.jsonl, replay.jsonl, and config.toml into `out_dir`.
pub fn generate(out_dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let seeds_path = out_dir.join("seeds.jsonl");
    save_records(&fixture_seeds(), &seeds_path).map_err(std::io::Error::other)?;

    let scratch = tempfile::tempdir()?;
    let mut runner = Runner::new(
        recording_config(),
        Overrides {
            run_dir: Some(scratch.path().join("run")),
            seeds: Some(seeds_path.clone()),
            replay: None,
            record: Some(out_dir.join("replay.jsonl")),
        },
    )
    .map_err(std::io::Error::other)?;
    runner.run_all().map_err(std::io::Error::other)?;
    runner
        .run_stage(StageKind::Evaluate)
        .map_err(std::io::Error::other)?;
    runner
        .run_stage(StageKind::Detect)
        .map_err(std::io::Error::other)?;
    let recorded = runner.finish().map_err(std::io::Error::other)?;

    std::fs::write(out_dir.join("config.toml"), FIXTURE_CONFIG_TOML)?;

    println!("seeds: {}", seeds_path.display());
    if let Some((path, written)) = recorded {
        println!("replay fixture: {} ({written} entries)", path.display());
    }
    println!("config: {}", out_dir.join("config.toml").display());
    Ok(())
}

fn main() -> std::io::Result<()> {
    let out_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    generate(&out_dir)
}
