//! Dataset-quality metrics and pairwise LLM-as-judge evaluation.
//!
//! The metric battery reports diversity (mean unique bigrams per
//! instruction), mean token length, complexity (mean IFD: the ratio of the
//! response's conditioned to unconditioned perplexity) and factuality (mean
//! single-answer judge score). Pairwise judging parses
//! `Score of the Assistant 1/2:` lines and aggregates win-lose-tie rates with
//! the all-tie convention mapping to a 50% relative rate.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::augmenter::parse_score;
use crate::corpus::InstructionRecord;
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::template::{TemplateError, TemplateSet};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no score lines found in verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("non-finite perplexity for record {0}")]
    DegenerateScore(String),
    #[error("record {0} has no response")]
    MissingResponse(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Truthfulness,
    Detail,
}

impl Aspect {
    pub fn template_name(&self) -> &'static str {
        match self {
            Aspect::Truthfulness => "judge_truthfulness",
            Aspect::Detail => "judge_detail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerOrder {
    Original,
    Swapped,
}

/// A parsed pairwise verdict. `score_a` always refers to system A: verdicts
/// from a swapped run are de-swapped before storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub aspect: Aspect,
    pub score_a: f64,
    pub score_b: f64,
    pub explanation: String,
    pub order: AnswerOrder,
}

/// One judged item: a single verdict, or both orders when debiased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedItem {
    pub verdicts: Vec<JudgeVerdict>,
}

impl JudgedItem {
    pub fn single(verdict: JudgeVerdict) -> Self {
        Self {
            verdicts: vec![verdict],
        }
    }

    /// Mean scores per side across the verdicts.
    pub fn mean_scores(&self) -> (f64, f64) {
        let n = self.verdicts.len() as f64;
        let a = self.verdicts.iter().map(|v| v.score_a).sum::<f64>() / n;
        let b = self.verdicts.iter().map(|v| v.score_b).sum::<f64>() / n;
        (a, b)
    }
}

fn parse_pair_scores(text: &str) -> Option<(f64, f64)> {
    static RE1: OnceLock<Regex> = OnceLock::new();
    static RE2: OnceLock<Regex> = OnceLock::new();
    let re1 = RE1.get_or_init(|| {
        Regex::new(r"Score of the Assistant 1:\s*([0-9]+(?:\.[0-9]+)?)").unwrap()
    });
    let re2 = RE2.get_or_init(|| {
        Regex::new(r"Score of the Assistant 2:\s*([0-9]+(?:\.[0-9]+)?)").unwrap()
    });
    let first = re1.captures(text)?.get(1)?.as_str().parse().ok()?;
    let second = re2.captures(text)?.get(1)?.as_str().parse().ok()?;
    Some((first, second))
}

#[allow(clippy::too_many_arguments)]
fn judge_once(
    instruction: &str,
    first: &str,
    second: &str,
    aspect: Aspect,
    order: AnswerOrder,
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
) -> Result<JudgeVerdict, EvalError> {
    let template = templates.get(aspect.template_name())?;
    let rendered = template.render(&[("inst", instruction), ("ans1", first), ("ans2", second)])?;
    let mut last = String::new();
    for attempt in 0..2u64 {
        let mut request =
            CompletionRequest::from_prompt(&rendered.system, &rendered.user, model, 0.0);
        request.seed = Some(attempt);
        let text = gateway.complete(&request)?.text;
        if let Some((score_1, score_2)) = parse_pair_scores(&text) {
            // de-swap so score_a always refers to system A
            let (score_a, score_b) = match order {
                AnswerOrder::Original => (score_1, score_2),
                AnswerOrder::Swapped => (score_2, score_1),
            };
            return Ok(JudgeVerdict {
                aspect,
                score_a,
                score_b,
                explanation: text,
                order,
            });
        }
        last = text;
    }
    Err(EvalError::UnparseableVerdict(last))
}

/// Pairwise judgment of two answers under one aspect.
///
/// With `debias` the prompt is run in both answer orders and both de-swapped
/// verdicts are returned, making downstream aggregates order-invariant.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_judge(
    instruction: &str,
    answer_a: &str,
    answer_b: &str,
    aspect: Aspect,
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
    debias: bool,
) -> Result<JudgedItem, EvalError> {
    assert!(!answer_a.is_empty() && !answer_b.is_empty(), "answers must be non-empty");
    let original = judge_once(
        instruction,
        answer_a,
        answer_b,
        aspect,
        AnswerOrder::Original,
        gateway,
        templates,
        model,
    )?;
    if !debias {
        return Ok(JudgedItem::single(original));
    }
    let swapped = judge_once(
        instruction,
        answer_b,
        answer_a,
        aspect,
        AnswerOrder::Swapped,
        gateway,
        templates,
        model,
    )?;
    Ok(JudgedItem {
        verdicts: vec![original, swapped],
    })
}

/// Win-lose-tie aggregate over judged items, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub win_pct: f64,
    pub lose_pct: f64,
    pub tie_pct: f64,
    /// `win% + tie%/2`: all ties map to 50%.
    pub relative_pct: f64,
}

pub fn win_rate(items: &[JudgedItem]) -> WinRate {
    assert!(!items.is_empty(), "win_rate needs at least one item");
    let mut wins = 0usize;
    let mut losses = 0usize;
    let mut ties = 0usize;
    for item in items {
        let (a, b) = item.mean_scores();
        if a > b {
            wins += 1;
        } else if a < b {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = items.len() as f64;
    let win_pct = wins as f64 / n * 100.0;
    let lose_pct = losses as f64 / n * 100.0;
    let tie_pct = ties as f64 / n * 100.0;
    WinRate {
        win_pct,
        lose_pct,
        tie_pct,
        relative_pct: win_pct + tie_pct / 2.0,
    }
}

/// Mean unique bigrams per instruction: lowercase, whitespace tokens,
/// distinct adjacent pairs.
pub fn diversity(records: &[InstructionRecord]) -> f64 {
    assert!(!records.is_empty());
    let total: usize = records
        .iter()
        .map(|record| {
            let tokens: Vec<String> = record
                .instruction
                .to_lowercase()
                .split_whitespace()
                .map(str::to_string)
                .collect();
            tokens
                .windows(2)
                .map(|w| (w[0].clone(), w[1].clone()))
                .collect::<std::collections::HashSet<_>>()
                .len()
        })
        .sum();
    total as f64 / records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    Whitespace,
    Backend,
}

/// Mean token count of the instructions.
pub fn mean_length(
    records: &[InstructionRecord],
    tokenizer: Tokenizer,
    gateway: Option<&Gateway>,
) -> Result<f64, EvalError> {
    assert!(!records.is_empty());
    let mut total = 0usize;
    for record in records {
        total += match tokenizer {
            Tokenizer::Whitespace => record.instruction.split_whitespace().count(),
            Tokenizer::Backend => {
                let gateway = gateway.ok_or(GatewayError::ScoringUnsupported)?;
                gateway.score_logprobs("", &record.instruction)?.len()
            }
        };
    }
    Ok(total as f64 / records.len() as f64)
}

/// IFD of one record: exp(mean NLL of response given instruction) divided by
/// exp(mean NLL of response unconditioned).
pub fn ifd(record: &InstructionRecord, gateway: &Gateway) -> Result<f64, EvalError> {
    let response = record
        .response
        .as_deref()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| EvalError::MissingResponse(record.id.clone()))?;
    let conditioned = gateway.score_logprobs(&record.instruction, response)?;
    let unconditioned = gateway.score_logprobs("", response)?;
    let mean_nll = |scores: &[crate::gateway::TokenLogprob]| {
        -scores.iter().map(|t| t.logprob).sum::<f64>() / scores.len() as f64
    };
    let conditioned_ppl = mean_nll(&conditioned).exp();
    let unconditioned_ppl = mean_nll(&unconditioned).exp();
    let score = conditioned_ppl / unconditioned_ppl;
    if !conditioned_ppl.is_finite() || !unconditioned_ppl.is_finite() || !score.is_finite() {
        return Err(EvalError::DegenerateScore(record.id.clone()));
    }
    Ok(score)
}

/// Single-answer factuality score in [1, 10] via the quality-check judge.
pub fn judge_factuality(
    record: &InstructionRecord,
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
) -> Result<f64, EvalError> {
    let template = templates.get("quality_check")?;
    let rendered = template.render(&[
        ("inst", record.instruction.as_str()),
        ("ans1", record.response.as_deref().unwrap_or_default()),
    ])?;
    let mut last = String::new();
    for attempt in 0..2u64 {
        let mut request =
            CompletionRequest::from_prompt(&rendered.system, &rendered.user, model, 0.0);
        request.seed = Some(attempt);
        let text = gateway.complete(&request)?.text;
        if let Some(score) = parse_score(&text) {
            return Ok(score);
        }
        last = text;
    }
    Err(EvalError::UnparseableVerdict(last))
}

/// Aggregated dataset statistics, column order mirroring the metric battery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub diversity: f64,
    pub mean_length: f64,
    pub complexity: f64,
    pub factuality: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_record: Option<Vec<RecordMetrics>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub unique_bigrams: usize,
    pub token_count: usize,
    pub ifd: f64,
    pub factuality: f64,
}

impl MetricsReport {
    /// Plain-text table, one row per dataset.
    pub fn text_table(&self, label: &str) -> String {
        format!(
            "{:<32} {:>10} {:>10} {:>12} {:>12}\n{:<32} {:>10.2} {:>10.2} {:>12.4} {:>12.2}\n",
            "Dataset", "Diversity", "Length", "Complexity", "Factuality",
            label, self.diversity, self.mean_length, self.complexity, self.factuality,
        )
    }
}

/// Compute the full metric battery over a record set.
pub fn metrics_report(
    records: &[InstructionRecord],
    gateway: &Gateway,
    templates: &TemplateSet,
    judge_model: &str,
    per_record: bool,
) -> Result<MetricsReport, EvalError> {
    assert!(!records.is_empty());
    let mut details = Vec::with_capacity(records.len());
    let mut ifd_sum = 0.0;
    let mut fact_sum = 0.0;
    for record in records {
        let record_ifd = ifd(record, gateway)?;
        let record_fact = judge_factuality(record, gateway, templates, judge_model)?;
        ifd_sum += record_ifd;
        fact_sum += record_fact;
        if per_record {
            let tokens: Vec<String> = record
                .instruction
                .to_lowercase()
                .split_whitespace()
                .map(str::to_string)
                .collect();
            let unique_bigrams = tokens
                .windows(2)
                .map(|w| (w[0].clone(), w[1].clone()))
                .collect::<std::collections::HashSet<_>>()
                .len();
            details.push(RecordMetrics {
                id: record.id.clone(),
                unique_bigrams,
                token_count: record.instruction.split_whitespace().count(),
                ifd: record_ifd,
                factuality: record_fact,
            });
        }
    }
    Ok(MetricsReport {
        diversity: diversity(records),
        mean_length: mean_length(records, Tokenizer::Whitespace, None)?,
        complexity: ifd_sum / records.len() as f64,
        factuality: fact_sum / records.len() as f64,
        n: records.len(),
        per_record: per_record.then_some(details),
    })
}
