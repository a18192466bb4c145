//! Embedding ingestion, nearest-neighbor distance statistics, the
//! response-dispersion metric, and corpus statistics.
//!
//! The dispersion number is the population variance of each point's
//! Euclidean distance to its nearest other point (self excluded, since
//! including self degenerates every distance to zero). The production
//! search prunes candidates with the norm lower bound |‖a‖−‖b‖| ≤
//! d(a, b) but recomputes the winning distance with the same canonical
//! kernel as a plain scan, so an exhaustive reference implementation
//! matches it exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::ProviderError;
use crate::records::{
    DetItem, EvalItem, PreferencePair, ResponseMode, ResponseRecord, SeedInstruction,
    VariantInstruction,
};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 points, found {found}")]
    InsufficientPoints { found: usize },
    #[error("{path}: row {row}: {detail}")]
    SchemaError {
        path: PathBuf,
        row: usize,
        detail: String,
    },
    #[error("{path}: row {row}: {detail}")]
    DataError {
        path: PathBuf,
        row: usize,
        detail: String,
    },
    #[error("embedding dimension mismatch: {detail}")]
    DimensionMismatch { detail: String },
    #[error("non-finite embedding component for id {id}")]
    NonFinite { id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Ids and equally sized vectors, one per response.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        assert_eq!(ids.len(), vectors.len(), "ids and vectors must align");
        if let Some(first) = vectors.first() {
            let dim = first.len();
            for (id, v) in ids.iter().zip(&vectors) {
                if v.len() != dim {
                    return Err(MetricsError::DimensionMismatch {
                        detail: format!("id {id} has dim {} but set has dim {dim}", v.len()),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(MetricsError::NonFinite { id: id.clone() });
                }
            }
        }
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(Vec::len).unwrap_or(0)
    }
}

fn euclid_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        total += diff * diff;
    }
    total
}

/// Distance from every point to its nearest other point.
///
/// Candidates are visited in order of norm proximity and pruned once
/// the norm gap alone exceeds the best squared distance; ties need no
/// break because only the minimum value is reported.
pub fn nn_distances(set: &EmbeddingSet) -> Result<Vec<f64>, MetricsError> {
    let q = set.len();
    if q < 2 {
        return Err(MetricsError::InsufficientPoints { found: q });
    }
    let norms: Vec<f64> = set.vectors.iter().map(|v| euclid_sq(v, &vec![0.0; v.len()]).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    let mut rank = vec![0usize; q];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }

    let mut out = vec![0.0; q];
    for i in 0..q {
        let my_rank = rank[i];
        let mut best = f64::INFINITY;
        let mut lo = my_rank;
        let mut hi = my_rank + 1;
        loop {
            let lower_gap = if lo > 0 {
                norms[i] - norms[order[lo - 1]]
            } else {
                f64::INFINITY
            };
            let upper_gap = if hi < q {
                norms[order[hi]] - norms[i]
            } else {
                f64::INFINITY
            };
            let (candidate, gap) = if lower_gap <= upper_gap {
                if lo == 0 {
                    break;
                }
                lo -= 1;
                (order[lo], lower_gap)
            } else {
                hi += 1;
                (order[hi - 1], upper_gap)
            };
            if gap.is_infinite() {
                break;
            }
            if gap * gap >= best && best.is_finite() {
                // Every remaining candidate on both sides is at least
                // this far away in norm alone.
                if lower_gap * lower_gap >= best && upper_gap * upper_gap >= best {
                    break;
                }
                continue;
            }
            if candidate == i {
                continue;
            }
            let d2 = euclid_sq(&set.vectors[i], &set.vectors[candidate]);
            if d2 < best {
                best = d2;
            }
        }
        out[i] = best.sqrt();
    }
    Ok(out)
}

/// Dispersion report: `u` is the population variance of the
/// nearest-neighbor distances, `mu` their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub u: f64,
    pub mu: f64,
    pub distances: Vec<f64>,
}

pub fn uniformity(set: &EmbeddingSet) -> Result<UniformityReport, MetricsError> {
    let distances = nn_distances(set)?;
    // Accumulate over the sorted multiset so the result is exactly
    // invariant to input order.
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let q = sorted.len() as f64;
    let mu = sorted.iter().sum::<f64>() / q;
    let u = sorted.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / q;
    Ok(UniformityReport { u, mu, distances })
}

/// CSV layout: header `id,dim0..dim{D-1}`, then one row per vector.
pub fn save_embeddings_csv(set: &EmbeddingSet, path: &Path) -> Result<(), MetricsError> {
    let mut body = String::from("id");
    for k in 0..set.dim() {
        write!(body, ",dim{k}").unwrap();
    }
    body.push('\n');
    for (id, vector) in set.ids.iter().zip(&set.vectors) {
        body.push_str(id);
        for x in vector {
            write!(body, ",{x}").unwrap();
        }
        body.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| MetricsError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
    }
    fs::write(path, body).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_embeddings_csv(path: &Path) -> Result<EmbeddingSet, MetricsError> {
    let body = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = body.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| MetricsError::SchemaError {
        path: path.to_path_buf(),
        row: 0,
        detail: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"id") {
        return Err(MetricsError::SchemaError {
            path: path.to_path_buf(),
            row: 0,
            detail: "header must start with 'id'".into(),
        });
    }
    let dim = columns.len() - 1;
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(MetricsError::SchemaError {
                path: path.to_path_buf(),
                row: line_no,
                detail: format!("expected {dim} components, found {}", values.len()),
            });
        }
        let mut vector = Vec::with_capacity(dim);
        for value in values {
            let x: f64 = value.parse().map_err(|_| MetricsError::DataError {
                path: path.to_path_buf(),
                row: line_no,
                detail: format!("not a number: {value:?}"),
            })?;
            if !x.is_finite() {
                return Err(MetricsError::DataError {
                    path: path.to_path_buf(),
                    row: line_no,
                    detail: format!("non-finite component: {value:?}"),
                });
            }
            vector.push(x);
        }
        ids.push(id);
        vectors.push(vector);
    }
    EmbeddingSet::new(ids, vectors)
}

/// Embedding backend for endpoint mode and tests.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

/// Embeds response texts; ids are `seed_id` or `seed_id#variant`
/// suffixed with the collection mode.
pub fn embed_responses(
    records: &[ResponseRecord],
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingSet, MetricsError> {
    let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
    let vectors = provider.embed(&texts)?;
    let ids = records
        .iter()
        .map(|r| format!("{}@{}", r.instruction_id(), r.mode))
        .collect();
    EmbeddingSet::new(ids, vectors)
}

/// Counts and token-length averages for one record set. `approx` marks
/// whitespace-token estimates (used whenever provider usage is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub count: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_tokens: Option<f64>,
    pub approx: bool,
}

fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn instruction_stats<'a, I: Iterator<Item = &'a str>>(texts: I) -> SetStats {
    let mut count = 0u64;
    let mut tokens = 0u64;
    for t in texts {
        count += 1;
        tokens += approx_tokens(t);
    }
    SetStats {
        count,
        avg_tokens: (count > 0).then(|| round2(tokens as f64 / count as f64)),
        approx: true,
    }
}

fn response_stats(records: &[&ResponseRecord]) -> SetStats {
    let count = records.len() as u64;
    if count == 0 {
        return SetStats {
            count,
            avg_tokens: None,
            approx: false,
        };
    }
    let all_reported = records.iter().all(|r| r.usage.is_some());
    let tokens: u64 = records
        .iter()
        .map(|r| match (&r.usage, all_reported) {
            (Some(u), true) => u.completion_tokens,
            _ => approx_tokens(&r.text),
        })
        .sum();
    SetStats {
        count,
        avg_tokens: Some(round2(tokens as f64 / count as f64)),
        approx: !all_reported,
    }
}

/// Corpus shape report for one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub seeds: SetStats,
    pub variants_valid: SetStats,
    pub variants_invalid: u64,
    pub eval: SetStats,
    pub det: SetStats,
    pub responses_direct: SetStats,
    pub responses_reference: SetStats,
    pub pairs_a: SetStats,
    pub pairs_r: SetStats,
}

#[allow(clippy::too_many_arguments)]
pub fn corpus_stats(
    seeds: &[SeedInstruction],
    variants: &[VariantInstruction],
    eval_items: &[EvalItem],
    det_items: &[DetItem],
    responses_direct: &[ResponseRecord],
    responses_reference: &[ResponseRecord],
    pairs_a: &[PreferencePair],
    pairs_r: &[PreferencePair],
) -> CorpusStats {
    let valid: Vec<&VariantInstruction> = variants.iter().filter(|v| v.valid).collect();
    debug_assert!(responses_direct.iter().all(|r| r.mode == ResponseMode::Direct));
    CorpusStats {
        seeds: instruction_stats(seeds.iter().map(|s| s.text.as_str())),
        variants_valid: instruction_stats(valid.iter().map(|v| v.text.as_str())),
        variants_invalid: variants.iter().filter(|v| !v.valid).count() as u64,
        eval: instruction_stats(eval_items.iter().map(|e| e.instruction.as_str())),
        det: SetStats {
            count: det_items.len() as u64,
            avg_tokens: None,
            approx: false,
        },
        responses_direct: response_stats(&responses_direct.iter().collect::<Vec<_>>()),
        responses_reference: response_stats(&responses_reference.iter().collect::<Vec<_>>()),
        pairs_a: instruction_stats(pairs_a.iter().map(|p| p.prompt.as_str())),
        pairs_r: instruction_stats(pairs_r.iter().map(|p| p.prompt.as_str())),
    }
}

impl CorpusStats {
    /// Human-readable fixed-width table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, stats: &SetStats| {
            let avg = match stats.avg_tokens {
                Some(a) => format!("{a:.2}{}", if stats.approx { " (approx)" } else { "" }),
                None => "-".to_string(),
            };
            writeln!(out, "{name:<22} {:>8}  {avg}", stats.count).unwrap();
        };
        writeln!(out, "{:<22} {:>8}  avg tokens", "set", "count").unwrap();
        row(&mut out, "seeds", &self.seeds);
        row(&mut out, "variants (valid)", &self.variants_valid);
        writeln!(out, "{:<22} {:>8}", "variants (invalid)", self.variants_invalid).unwrap();
        row(&mut out, "eval", &self.eval);
        row(&mut out, "det", &self.det);
        row(&mut out, "responses (direct)", &self.responses_direct);
        row(&mut out, "responses (reference)", &self.responses_reference);
        row(&mut out, "pairs (direct)", &self.pairs_a);
        row(&mut out, "pairs (reference)", &self.pairs_r);
        out
    }
}
