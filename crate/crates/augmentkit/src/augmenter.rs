//! LLM-driven augmentation: instruction expansion, instruction refinement,
//! response generation, instruction-response pair generation and quality
//! filtering.
//!
//! Each operation renders its prompt template byte-exactly, validates the
//! backend output against that template's guard rails and retries rejected
//! outputs within a bounded budget.

use regex::Regex;
use std::collections::BTreeSet;
use std::sync::OnceLock;

use crate::corpus::InstructionRecord;
use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::template::{demonstration_blocks, TemplateError, TemplateSet};
use crate::util::normalize_ws;

/// Sampling temperature for augmentation calls (judging uses 0.0).
pub const AUGMENT_TEMPERATURE: f64 = 0.7;

/// Strings that must not appear in an expanded instruction.
pub const DEFAULT_FORBIDDEN: &[&str] = &[
    "#Given Instruction#",
    "#Created Instruction#",
    "given instruction",
    "created instruction",
];

#[derive(Debug, thiserror::Error)]
pub enum AugmenterError {
    #[error("expansion exhausted: filled {filled} of {wanted} slots within the retry budget")]
    ExpansionExhausted { filled: usize, wanted: usize },
    #[error("refinement rejected: {0}")]
    RefinementRejected(String),
    #[error("no score line found in verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error("completion lacks instruction/response block structure: {0:?}")]
    UnparseableContinuation(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Targets expanded from one source instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionResult {
    pub source_id: String,
    pub source_instruction: String,
    pub targets: Vec<String>,
    pub template_name: String,
}

/// Expand one instruction into `n` new ones of the same task type.
///
/// Outputs that echo the template scaffold (any string in `forbidden`) or
/// duplicate the source after normalization are rejected; each slot gets
/// `retry_budget` extra attempts before [`AugmenterError::ExpansionExhausted`].
#[allow(clippy::too_many_arguments)]
pub fn expand_instruction(
    record: &InstructionRecord,
    task_type: &str,
    n: usize,
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
    forbidden: &[String],
    retry_budget: usize,
) -> Result<ExpansionResult, AugmenterError> {
    assert!(n >= 1, "n must be >= 1");
    let template = templates.get("expansion_annotation")?;
    let rendered = template.render(&[
        ("task_type", task_type),
        ("instruction", record.instruction.as_str()),
    ])?;
    let source_norm = normalize_ws(&record.instruction);

    let mut targets = Vec::with_capacity(n);
    for slot in 0..n {
        let mut accepted = None;
        for attempt in 0..=retry_budget {
            let mut request = CompletionRequest::from_prompt(
                &rendered.system,
                &rendered.user,
                model,
                AUGMENT_TEMPERATURE,
            );
            // distinct seeds per slot and attempt so retries can diverge
            request.seed = Some((slot * 1009 + attempt) as u64);
            let text = gateway.complete(&request)?.text.trim().to_string();
            let echoes_scaffold = forbidden.iter().any(|marker| text.contains(marker.as_str()));
            if text.is_empty() || echoes_scaffold || normalize_ws(&text) == source_norm {
                continue;
            }
            accepted = Some(text);
            break;
        }
        match accepted {
            Some(text) => targets.push(text),
            None => {
                return Err(AugmenterError::ExpansionExhausted {
                    filled: targets.len(),
                    wanted: n,
                })
            }
        }
    }
    Ok(ExpansionResult {
        source_id: record.id.clone(),
        source_instruction: record.instruction.clone(),
        targets,
        template_name: template.name.clone(),
    })
}

fn variable_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{\{?([A-Za-z0-9_]+)\}?\}").unwrap())
}

/// Names of `${...}` / `${{...}}` variables occurring in the text.
pub fn template_variables(text: &str) -> BTreeSet<String> {
    variable_regex()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// Refine one instruction via the prompt-engineer template.
///
/// The output must carry every `${...}` variable of the source and must not
/// echo the `##Refined Prompt##` scaffold; one retry, then
/// [`AugmenterError::RefinementRejected`].
pub fn refine_instruction(
    record: &InstructionRecord,
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
) -> Result<String, AugmenterError> {
    let template = templates.get("refinement_annotation")?;
    let rendered = template.render(&[("prompt_to_refine", record.instruction.as_str())])?;
    let source_vars = template_variables(&record.instruction);

    let mut reason = String::new();
    for attempt in 0..2u64 {
        let mut request = CompletionRequest::from_prompt(
            &rendered.system,
            &rendered.user,
            model,
            AUGMENT_TEMPERATURE,
        );
        request.seed = Some(attempt);
        let text = gateway.complete(&request)?.text.trim().to_string();
        if text.contains("##Refined Prompt##") {
            reason = "output echoes the ##Refined Prompt## scaffold".into();
            continue;
        }
        let output_vars = template_variables(&text);
        if let Some(missing) = source_vars.difference(&output_vars).next() {
            reason = format!("output drops source variable ${{{missing}}}");
            continue;
        }
        return Ok(text);
    }
    Err(AugmenterError::RefinementRejected(reason))
}

/// Generate a response for an instruction, with optional few-shot pairs.
pub fn generate_response(
    instruction: &str,
    few_shot: &[(String, String)],
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
) -> Result<String, AugmenterError> {
    let template = templates.get("response_generation")?;
    let demos = demonstration_blocks(few_shot);
    let rendered = template.render(&[
        ("demonstrations", demos.as_str()),
        ("instruction", instruction),
    ])?;
    let request = CompletionRequest::from_prompt(
        &rendered.system,
        &rendered.user,
        model,
        AUGMENT_TEMPERATURE,
    );
    Ok(gateway.complete(&request)?.text)
}

/// First `Score ...: <number>` line in a judge verdict.
pub fn parse_score(text: &str) -> Option<f64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"Score[^:\n]*:\s*([0-9]+(?:\.[0-9]+)?)").unwrap());
    re.captures(text).and_then(|c| c[1].parse().ok())
}

/// 1-10 quality score for one instruction-response pair.
///
/// Parses the first score line of a single-answer judge verdict; one retry,
/// then [`AugmenterError::UnparseableVerdict`].
pub fn score_quality(
    record: &InstructionRecord,
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
) -> Result<(f64, String), AugmenterError> {
    let template = templates.get("quality_check")?;
    let response = record.response.as_deref().unwrap_or_default();
    let rendered = template.render(&[
        ("inst", record.instruction.as_str()),
        ("ans1", response),
    ])?;
    let mut last = String::new();
    for attempt in 0..2u64 {
        let mut request =
            CompletionRequest::from_prompt(&rendered.system, &rendered.user, model, 0.0);
        request.seed = Some(attempt);
        let text = gateway.complete(&request)?.text;
        if let Some(score) = parse_score(&text) {
            return Ok((score, text));
        }
        last = text;
    }
    Err(AugmenterError::UnparseableVerdict(last))
}

/// A record dropped by the quality filter, with its score and verdict text.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub record: InstructionRecord,
    pub score: f64,
    pub verdict: String,
}

/// Keep records scoring at or above `threshold` on the 1-10 quality judge.
pub fn quality_filter(
    records: Vec<InstructionRecord>,
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
    threshold: f64,
) -> Result<(Vec<InstructionRecord>, Vec<Rejection>), AugmenterError> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for record in records {
        let (score, verdict) = score_quality(&record, gateway, templates, model)?;
        if score >= threshold {
            kept.push(record);
        } else {
            rejected.push(Rejection {
                record,
                score,
                verdict,
            });
        }
    }
    Ok((kept, rejected))
}

/// Parse one `### Instruction:` / `### Response:` pair from a completion.
/// When the model emits several pairs, the first is taken.
pub fn parse_continuation(text: &str) -> Option<(String, String)> {
    let trimmed = text.trim();
    let rest = trimmed.strip_prefix("### Instruction:").unwrap_or(trimmed);
    let (instruction, after) = rest.split_once("### Response:")?;
    let instruction = instruction.trim();
    let response = after
        .split("### Instruction:")
        .next()
        .unwrap_or("")
        .trim();
    if instruction.is_empty() || response.is_empty() {
        return None;
    }
    Some((instruction.to_string(), response.to_string()))
}

/// Generate one new (instruction, response) pair from `K` in-context
/// demonstration pairs (1 <= K <= 3).
pub fn ire_generate(
    demonstrations: &[(String, String)],
    gateway: &Gateway,
    templates: &TemplateSet,
    model: &str,
) -> Result<(String, String), AugmenterError> {
    assert!(
        (1..=3).contains(&demonstrations.len()),
        "K must be between 1 and 3"
    );
    let template = templates.get("train_ire")?;
    let demos = demonstration_blocks(demonstrations);
    let rendered = template.render(&[("demonstrations", demos.as_str())])?;
    let mut last = String::new();
    for attempt in 0..2u64 {
        let mut request = CompletionRequest::from_prompt(
            &rendered.system,
            &rendered.user,
            model,
            AUGMENT_TEMPERATURE,
        );
        request.seed = Some(attempt);
        let text = gateway.complete(&request)?.text;
        if let Some(pair) = parse_continuation(&text) {
            return Ok(pair);
        }
        last = text;
    }
    Err(AugmenterError::UnparseableContinuation(last))
}
