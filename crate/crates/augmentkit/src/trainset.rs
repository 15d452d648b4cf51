//! Emission of the three training sets.
//!
//! Every emitted example is one (conditioning prefix, target) pair: the
//! system and user prompts form the conditioning text and `output` is the
//! sequence the trainer scores. Files are JSONL with fixed key order
//! (task, system, user, output, source_ids, shuffled).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmenter::ExpansionResult;
use crate::corpus::{manifest_path, InstructionRecord};
use crate::template::{demonstration_blocks, TemplateSet};

/// Default fraction of IRE targets reassigned to a random other pool pair.
pub const DEFAULT_SHUFFLE_FRAC: f64 = 0.15;

#[derive(Debug, thiserror::Error)]
pub enum TrainsetError {
    #[error("IRE pool has {0} pairs; at least 5 are required")]
    PoolTooSmall(usize),
    #[error("pool record {0} has no response")]
    MissingResponse(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "UPPERCASE")]
pub enum TrainTask {
    Ie,
    Ir,
    Ire,
}

/// One supervised fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task: TrainTask,
    #[serde(rename = "system")]
    pub system_prompt: String,
    #[serde(rename = "user")]
    pub user_prompt: String,
    #[serde(rename = "output")]
    pub target_output: String,
    pub source_ids: Vec<String>,
    pub shuffled: bool,
}

/// One example per (source, target) pair of each expansion.
pub fn emit_ie(expansions: &[ExpansionResult], templates: &TemplateSet) -> Vec<TrainingExample> {
    let system = templates
        .get("train_ie")
        .expect("builtin template")
        .system_text
        .clone();
    expansions
        .iter()
        .flat_map(|expansion| {
            expansion.targets.iter().map(|target| TrainingExample {
                task: TrainTask::Ie,
                system_prompt: system.clone(),
                user_prompt: expansion.source_instruction.clone(),
                target_output: target.clone(),
                source_ids: vec![expansion.source_id.clone()],
                shuffled: false,
            })
        })
        .collect()
}

/// One example per (source record, refined text) pair; no filtering here.
pub fn emit_ir(
    pairs: &[(InstructionRecord, String)],
    templates: &TemplateSet,
) -> Vec<TrainingExample> {
    let system = templates
        .get("train_ir")
        .expect("builtin template")
        .system_text
        .clone();
    pairs
        .iter()
        .map(|(source, refined)| TrainingExample {
            task: TrainTask::Ir,
            system_prompt: system.clone(),
            user_prompt: source.instruction.clone(),
            target_output: refined.clone(),
            source_ids: vec![source.id.clone()],
            shuffled: false,
        })
        .collect()
}

fn block(instruction: &str, response: &str) -> String {
    format!("### Instruction:\n{instruction}\n### Response:\n{response}")
}

/// One IRE example per pool pair.
///
/// For each target pair: K drawn uniformly from {1,2,3}; K demonstration
/// pairs drawn uniformly without replacement from the rest of the pool; with
/// probability `shuffle_frac` the target is reassigned to a uniformly drawn
/// *different* pool pair and the example marked `shuffled`. One RNG stream
/// seeded from `rng_seed` drives all draws in pool order, so the emission is
/// deterministic.
pub fn emit_ire(
    pool: &[InstructionRecord],
    rng_seed: u64,
    shuffle_frac: f64,
    templates: &TemplateSet,
) -> Result<Vec<TrainingExample>, TrainsetError> {
    if pool.len() < 5 {
        return Err(TrainsetError::PoolTooSmall(pool.len()));
    }
    let pairs: Vec<(&str, &str)> = pool
        .iter()
        .map(|record| {
            record
                .response
                .as_deref()
                .map(|response| (record.instruction.as_str(), response))
                .ok_or_else(|| TrainsetError::MissingResponse(record.id.clone()))
        })
        .collect::<Result<_, _>>()?;

    let template = templates.get("train_ire").expect("builtin template");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut examples = Vec::with_capacity(pool.len());

    for target_idx in 0..pool.len() {
        let k: usize = rng.gen_range(1..=3);
        // sample K indices from the pool minus the target
        let mut demo_idx: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len() - 1, k)
            .into_iter()
            .map(|raw| if raw >= target_idx { raw + 1 } else { raw })
            .collect();
        demo_idx.sort_unstable();

        let demos: Vec<(String, String)> = demo_idx
            .iter()
            .map(|&i| (pairs[i].0.to_string(), pairs[i].1.to_string()))
            .collect();
        let user_prompt = template
            .render(&[("demonstrations", demonstration_blocks(&demos).as_str())])
            .expect("single placeholder bound")
            .user;

        let shuffled = rng.gen::<f64>() < shuffle_frac;
        let mut source_ids: Vec<String> = Vec::with_capacity(k + 2);
        source_ids.push(pool[target_idx].id.clone());
        source_ids.extend(demo_idx.iter().map(|&i| pool[i].id.clone()));

        let output_idx = if shuffled {
            let raw = rng.gen_range(0..pool.len() - 1);
            let swapped = if raw >= target_idx { raw + 1 } else { raw };
            source_ids.push(pool[swapped].id.clone());
            swapped
        } else {
            target_idx
        };

        examples.push(TrainingExample {
            task: TrainTask::Ire,
            system_prompt: template.system_text.clone(),
            user_prompt,
            target_output: block(pairs[output_idx].0, pairs[output_idx].1),
            source_ids,
            shuffled,
        });
    }
    Ok(examples)
}

/// Summary manifest written next to a training-set file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainsetManifest {
    pub task: TrainTask,
    pub example_count: usize,
    pub k_histogram: BTreeMap<usize, usize>,
    pub shuffled_count: usize,
    pub shuffled_fraction: f64,
    pub config_digest: String,
    pub rng_seed: u64,
    pub created_at: chrono::DateTime<chrono::Utc>,
}

/// Demonstration count of an IRE example, from its user prompt.
fn demo_count(example: &TrainingExample) -> usize {
    example.user_prompt.matches("### Response:").count()
}

pub fn summarize(
    task: TrainTask,
    examples: &[TrainingExample],
    config_digest: &str,
    rng_seed: u64,
) -> TrainsetManifest {
    let mut k_histogram = BTreeMap::new();
    if task == TrainTask::Ire {
        for example in examples {
            *k_histogram.entry(demo_count(example)).or_insert(0) += 1;
        }
    }
    let shuffled_count = examples.iter().filter(|e| e.shuffled).count();
    TrainsetManifest {
        task,
        example_count: examples.len(),
        k_histogram,
        shuffled_count,
        shuffled_fraction: if examples.is_empty() {
            0.0
        } else {
            shuffled_count as f64 / examples.len() as f64
        },
        config_digest: config_digest.to_string(),
        rng_seed,
        created_at: chrono::Utc::now(),
    }
}

/// Write examples as JSONL plus the summary manifest.
pub fn write_training_set(
    examples: &[TrainingExample],
    path: &Path,
    task: TrainTask,
    config_digest: &str,
    rng_seed: u64,
) -> Result<TrainsetManifest, TrainsetError> {
    let io_err = |e: std::io::Error| TrainsetError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    for example in examples {
        let line = serde_json::to_string(example).expect("examples serialize");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    let manifest = summarize(task, examples, config_digest, rng_seed);
    let file = File::create(manifest_path(path)).map_err(io_err)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
        .map_err(|e| TrainsetError::Io {
            path: manifest_path(path),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
    Ok(manifest)
}
