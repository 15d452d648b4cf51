//! Task-type labeling and task-aware rebalancing of the seed pool.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InstructionRecord;
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::template::{TemplateError, TemplateSet};
use crate::util::sha256_hex;

/// Closed taxonomy used when the config does not override it.
pub const DEFAULT_TAXONOMY: &[&str] = &[
    "open_qa",
    "closed_qa",
    "classification",
    "extraction",
    "summarization",
    "rewriting",
    "brainstorming",
    "generation",
    "math",
    "coding",
    "roleplay",
    "chat",
];

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("classifier answered outside the taxonomy: {0:?}")]
    UnrecognizedLabel(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Record counts per task type.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub buckets: BTreeMap<String, usize>,
    pub total: usize,
}

impl TaskDistribution {
    pub fn of(records: &[InstructionRecord]) -> Self {
        let mut buckets = BTreeMap::new();
        for record in records {
            let label = record.task_type.clone().unwrap_or_else(|| "unknown".into());
            *buckets.entry(label).or_insert(0) += 1;
        }
        Self {
            total: records.len(),
            buckets,
        }
    }
}

/// Label one record via the classifier prompt.
///
/// Records arriving with a task type keep it without a gateway call. An
/// out-of-taxonomy answer gets one retry before [`SamplerError::UnrecognizedLabel`].
pub fn classify_task(
    record: &InstructionRecord,
    gateway: &Gateway,
    templates: &TemplateSet,
    taxonomy: &[String],
    model: &str,
) -> Result<String, SamplerError> {
    if let Some(existing) = &record.task_type {
        return Ok(existing.clone());
    }
    let template = templates.get("task_classifier")?;
    let rendered = template.render(&[
        ("taxonomy", taxonomy.join(", ").as_str()),
        ("instruction", record.instruction.as_str()),
    ])?;
    let request = CompletionRequest::from_prompt(&rendered.system, &rendered.user, model, 0.0);
    let mut last = String::new();
    for attempt in 0..2 {
        let mut request = request.clone();
        request.seed = Some(attempt);
        let answer = gateway.complete(&request)?.text;
        let label = answer
            .trim()
            .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '`')
            .to_lowercase();
        if taxonomy.iter().any(|t| t == &label) {
            return Ok(label);
        }
        last = answer;
    }
    Err(SamplerError::UnrecognizedLabel(last))
}

/// Rebalance the pool towards a uniform task distribution.
///
/// Water-filling: buckets at or below the current per-bucket cap contribute
/// everything; the cap is then recomputed over the remaining buckets until the
/// quota is spent. Over-cap buckets are sampled uniformly without replacement.
/// Output preserves the input order and is deterministic given `rng_seed`.
pub fn balance_sample(
    records: &[InstructionRecord],
    target_size: usize,
    rng_seed: u64,
) -> Vec<InstructionRecord> {
    assert!(target_size >= 1, "target_size must be >= 1");
    if target_size >= records.len() {
        return records.to_vec();
    }

    // bucket label -> record indices, in input order
    let mut buckets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (idx, record) in records.iter().enumerate() {
        let label = record.task_type.clone().unwrap_or_else(|| "unknown".into());
        buckets.entry(label).or_default().push(idx);
    }

    let mut quota = target_size;
    let mut remaining: Vec<String> = buckets.keys().cloned().collect();
    let mut allocation: BTreeMap<String, usize> = BTreeMap::new();

    while quota > 0 && !remaining.is_empty() {
        let cap = quota.div_ceil(remaining.len());
        let (under, over): (Vec<String>, Vec<String>) = remaining
            .into_iter()
            .partition(|label| buckets[label].len() <= cap);
        if under.is_empty() {
            // All remaining buckets exceed the cap: split the quota as evenly
            // as possible, extras assigned in a seed-shuffled bucket order.
            let base = quota / over.len();
            let extras = quota % over.len();
            let mut order = over.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            order.shuffle(&mut rng);
            for (rank, label) in order.into_iter().enumerate() {
                allocation.insert(label, base + usize::from(rank < extras));
            }
            quota = 0;
            remaining = Vec::new();
        } else {
            for label in &under {
                let take = buckets[label].len();
                allocation.insert(label.clone(), take);
                quota -= take;
            }
            remaining = over;
        }
    }

    // Draw the allocated count per bucket, each bucket with its own rng stream.
    let mut selected: Vec<usize> = Vec::with_capacity(target_size);
    for (label, indices) in &buckets {
        let take = allocation.get(label).copied().unwrap_or(0);
        if take >= indices.len() {
            selected.extend_from_slice(indices);
        } else {
            let digest = sha256_hex(label.as_bytes());
            let label_seed = u64::from_str_radix(&digest[..16], 16).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ label_seed);
            let chosen = rand::seq::index::sample(&mut rng, indices.len(), take);
            selected.extend(chosen.iter().map(|i| indices[i]));
        }
    }
    selected.sort_unstable();
    selected.into_iter().map(|i| records[i].clone()).collect()
}
