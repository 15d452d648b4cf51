//! Stage orchestration: each CLI subcommand maps to one method here.
//!
//! Stages are connected by dataset files. Every stage emits a manifest that
//! accounts for 100% of its input records (kept / transformed / rejected /
//! failed); per-record failures are logged and skipped rather than aborting
//! the run.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmenter::{
    expand_instruction, generate_response, ire_generate, refine_instruction, score_quality,
    AugmenterError, ExpansionResult,
};
use crate::config::{ConfigError, PipelineConfig, ROLE_AUGMENTER, ROLE_JUDGE};
use crate::corpus::{
    dedupe, make_record, read_dataset, write_dataset_with_manifest, CorpusError, DatasetFormat,
    DatasetManifest, Derivation, InstructionRecord, StageAccounting,
};
use crate::evalsuite::{metrics_report, pairwise_judge, win_rate, Aspect, EvalError, JudgedItem, WinRate};
use crate::gateway::{
    par_map, Backend, BackendKind, CompletionRequest, Gateway, OpenAiHttpBackend, ScriptedMock,
};
use crate::sampler::{balance_sample, classify_task, SamplerError};
use crate::template::{TemplateError, TemplateSet};
use crate::trainset::{
    emit_ie, emit_ir, emit_ire, write_training_set, TrainTask, TrainsetError, TrainsetManifest,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Trainset(#[from] TrainsetError),
    #[error(transparent)]
    Augmenter(#[from] AugmenterError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Exit codes: 0 success, 1 stage error, 2 config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub templates: TemplateSet,
    pub gateway: Gateway,
    config_digest: String,
}

impl Pipeline {
    /// Build the backend described by the config.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let backend: Arc<dyn Backend> = match config.backend.kind {
            BackendKind::ScriptedMock => {
                let mock = match &config.backend.mock_fixtures {
                    Some(path) => ScriptedMock::from_fixture_file(
                        path,
                        config.backend.mock_default,
                        config.backend.mock_seed,
                    )
                    .map_err(|e| PipelineError::Io {
                        path: path.clone(),
                        source: e,
                    })?,
                    None => ScriptedMock::default().with_default(config.backend.mock_default),
                };
                Arc::new(mock)
            }
            BackendKind::HttpOpenaiCompatible => {
                let endpoint = config.backend.endpoint.as_deref().ok_or_else(|| {
                    ConfigError::Invalid("http backend requires an endpoint".into())
                })?;
                let api_key = std::env::var(&config.backend.api_key_env).ok();
                Arc::new(OpenAiHttpBackend::new(endpoint, api_key))
            }
        };
        Self::with_backend(config, backend)
    }

    /// Build against an explicit backend (tests inject counting/flaky mocks).
    pub fn with_backend(
        config: PipelineConfig,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let templates = match &config.template_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::builtin(),
        };
        let gateway = Gateway::new(backend, &config.backend);
        let config_digest = config.digest();
        Ok(Self {
            config,
            templates,
            gateway,
            config_digest,
        })
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    fn require_input(&self, path: &Path) -> Result<(), PipelineError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("input file missing: {}", path.display())).into())
        }
    }

    fn manifest(
        &self,
        records: &[InstructionRecord],
        stage: &str,
        accounting: StageAccounting,
    ) -> DatasetManifest {
        debug_assert!(accounting.balances(), "stage {stage} accounting does not balance");
        let mut manifest = DatasetManifest::new(records, stage, &self.config_digest, self.config.rng_seed);
        manifest.accounting = Some(accounting);
        manifest.template_digests = self.templates.digests();
        manifest
    }

    fn workers(&self) -> usize {
        self.gateway.max_in_flight()
    }

    /// Read, deduplicate and canonicalize an input dataset.
    pub fn ingest(
        &self,
        input: &Path,
        format: DatasetFormat,
        output: &Path,
    ) -> Result<DatasetManifest, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, format)?;
        let input_count = records.len();
        let (kept, dropped) = dedupe(records);
        let accounting = StageAccounting {
            input_count,
            kept: kept.len(),
            rejected: dropped,
            ..Default::default()
        };
        Ok(write_dataset_with_manifest(
            &kept,
            output,
            self.manifest(&kept, "ingest", accounting),
        )?)
    }

    /// Label task types and rebalance to `target_size`.
    pub fn sample(
        &self,
        input: &Path,
        output: &Path,
        target_size: usize,
    ) -> Result<DatasetManifest, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, DatasetFormat::PairsJsonl)?;
        let input_count = records.len();
        let labels = par_map(&records, self.workers(), |_, record| {
            let model = self
                .config
                .model_routing
                .model_for(ROLE_JUDGE, &record.language);
            classify_task(record, &self.gateway, &self.templates, &self.config.taxonomy, model)
        });
        let mut labeled = Vec::with_capacity(records.len());
        let mut failed = 0usize;
        for (record, label) in records.into_iter().zip(labels) {
            match label {
                Ok(task) => {
                    let mut record = record;
                    record.task_type = Some(task);
                    labeled.push(record);
                }
                Err(error) => {
                    eprintln!("sample: classification failed for {}: {error}", record.id);
                    failed += 1;
                }
            }
        }
        let selected = balance_sample(&labeled, target_size.max(1), self.config.rng_seed);
        let accounting = StageAccounting {
            input_count,
            kept: selected.len(),
            rejected: labeled.len() - selected.len(),
            failed,
            ..Default::default()
        };
        Ok(write_dataset_with_manifest(
            &selected,
            output,
            self.manifest(&selected, "sample", accounting),
        )?)
    }

    fn augmenter_model<'a>(&'a self, record: &InstructionRecord) -> &'a str {
        self.config
            .model_routing
            .model_for(ROLE_AUGMENTER, &record.language)
    }

    fn print_dry_run(&self, stage: &str, template: &str, bindings: &[(&str, &str)]) -> Result<(), PipelineError> {
        let rendered = self.templates.get(template)?.render(bindings)?;
        let request = CompletionRequest::from_prompt(&rendered.system, &rendered.user, "dry-run", 0.0);
        println!("{stage}\t{}", crate::gateway::prompt_digest(&request));
        Ok(())
    }

    /// Expand every instruction `n` times.
    pub fn expand(
        &self,
        input: &Path,
        output: &Path,
        n: usize,
        dry_run: bool,
    ) -> Result<Option<DatasetManifest>, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, DatasetFormat::PairsJsonl)?;
        if dry_run {
            for record in &records {
                let task = record.task_type.as_deref().unwrap_or("chat");
                self.print_dry_run(
                    "expand",
                    "expansion_annotation",
                    &[("task_type", task), ("instruction", record.instruction.as_str())],
                )?;
            }
            return Ok(None);
        }
        let results: Vec<Result<ExpansionResult, AugmenterError>> =
            par_map(&records, self.workers(), |_, record| {
                let task = record.task_type.as_deref().unwrap_or("chat");
                expand_instruction(
                    record,
                    task,
                    n,
                    &self.gateway,
                    &self.templates,
                    self.augmenter_model(record),
                    &self.config.forbidden_strings,
                    self.config.expansion_retry_budget,
                )
            });
        let mut expanded = Vec::with_capacity(records.len() * n);
        let mut transformed = 0usize;
        let mut failed = 0usize;
        for (record, result) in records.iter().zip(results) {
            match result {
                Ok(expansion) => {
                    transformed += 1;
                    for target in &expansion.targets {
                        expanded.push(make_record(
                            target,
                            None,
                            record.task_type.as_deref(),
                            &record.language,
                            "expand",
                            Some(&record.id),
                            Derivation::Expanded,
                        )?);
                    }
                }
                Err(error) => {
                    eprintln!("expand: {} failed: {error}", record.id);
                    failed += 1;
                }
            }
        }
        let accounting = StageAccounting {
            input_count: records.len(),
            transformed,
            failed,
            ..Default::default()
        };
        Ok(Some(write_dataset_with_manifest(
            &expanded,
            output,
            self.manifest(&expanded, "expand", accounting),
        )?))
    }

    /// Refine every instruction with the prompt-engineer template.
    pub fn refine(
        &self,
        input: &Path,
        output: &Path,
        dry_run: bool,
    ) -> Result<Option<DatasetManifest>, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, DatasetFormat::PairsJsonl)?;
        if dry_run {
            for record in &records {
                self.print_dry_run(
                    "refine",
                    "refinement_annotation",
                    &[("prompt_to_refine", record.instruction.as_str())],
                )?;
            }
            return Ok(None);
        }
        let results = par_map(&records, self.workers(), |_, record| {
            refine_instruction(record, &self.gateway, &self.templates, self.augmenter_model(record))
        });
        let mut refined = Vec::with_capacity(records.len());
        let mut transformed = 0usize;
        let mut rejected = 0usize;
        let mut failed = 0usize;
        for (record, result) in records.iter().zip(results) {
            match result {
                Ok(text) => {
                    transformed += 1;
                    refined.push(make_record(
                        &text,
                        None,
                        record.task_type.as_deref(),
                        &record.language,
                        "refine",
                        Some(&record.id),
                        Derivation::Refined,
                    )?);
                }
                Err(AugmenterError::RefinementRejected(reason)) => {
                    eprintln!("refine: {} rejected: {reason}", record.id);
                    rejected += 1;
                }
                Err(error) => {
                    eprintln!("refine: {} failed: {error}", record.id);
                    failed += 1;
                }
            }
        }
        let accounting = StageAccounting {
            input_count: records.len(),
            transformed,
            rejected,
            failed,
            ..Default::default()
        };
        Ok(Some(write_dataset_with_manifest(
            &refined,
            output,
            self.manifest(&refined, "refine", accounting),
        )?))
    }

    /// Annotate responses for records that lack one.
    pub fn respond(&self, input: &Path, output: &Path) -> Result<DatasetManifest, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, DatasetFormat::PairsJsonl)?;
        let results = par_map(&records, self.workers(), |_, record| {
            if record.response.is_some() {
                return None;
            }
            Some(generate_response(
                &record.instruction,
                &[],
                &self.gateway,
                &self.templates,
                self.augmenter_model(record),
            ))
        });
        let mut out = Vec::with_capacity(records.len());
        let mut kept = 0usize;
        let mut transformed = 0usize;
        let mut failed = 0usize;
        for (record, result) in records.iter().zip(results) {
            match result {
                None => {
                    kept += 1;
                    out.push(record.clone());
                }
                Some(Ok(response)) => {
                    transformed += 1;
                    out.push(make_record(
                        &record.instruction,
                        Some(&response),
                        record.task_type.as_deref(),
                        &record.language,
                        "respond",
                        Some(&record.id),
                        Derivation::ResponseAnnotated,
                    )?);
                }
                Some(Err(error)) => {
                    eprintln!("respond: {} failed: {error}", record.id);
                    failed += 1;
                }
            }
        }
        let accounting = StageAccounting {
            input_count: records.len(),
            kept,
            transformed,
            failed,
            ..Default::default()
        };
        Ok(write_dataset_with_manifest(
            &out,
            output,
            self.manifest(&out, "respond", accounting),
        )?)
    }

    /// Keep records the quality judge scores at or above the threshold.
    /// Rejections go to `<output>.rejects.jsonl` with score and verdict.
    pub fn filter(
        &self,
        input: &Path,
        output: &Path,
        threshold: f64,
    ) -> Result<DatasetManifest, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, DatasetFormat::PairsJsonl)?;
        let results = par_map(&records, self.workers(), |_, record| {
            let model = self.config.model_routing.model_for(ROLE_JUDGE, &record.language);
            score_quality(record, &self.gateway, &self.templates, model)
        });
        let mut kept = Vec::new();
        let mut reject_log = Vec::new();
        let mut failed = 0usize;
        for (record, result) in records.iter().zip(results) {
            match result {
                Ok((score, _)) if score >= threshold => kept.push(record.clone()),
                Ok((score, verdict)) => reject_log.push(serde_json::json!({
                    "id": record.id,
                    "score": score,
                    "verdict": verdict,
                })),
                Err(error) => {
                    eprintln!("filter: {} failed: {error}", record.id);
                    failed += 1;
                }
            }
        }
        let rejects_path = output.with_file_name(format!(
            "{}.rejects.jsonl",
            output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        let log_body = reject_log
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&rejects_path, if log_body.is_empty() { String::new() } else { log_body + "\n" })
            .map_err(|e| PipelineError::Io {
                path: rejects_path.clone(),
                source: e,
            })?;
        let accounting = StageAccounting {
            input_count: records.len(),
            kept: kept.len(),
            rejected: reject_log.len(),
            failed,
            ..Default::default()
        };
        Ok(write_dataset_with_manifest(
            &kept,
            output,
            self.manifest(&kept, "filter", accounting),
        )?)
    }

    /// Generate `count` brand-new pairs, each conditioned on K in-context
    /// demonstration pairs drawn from the input pool.
    pub fn ire(
        &self,
        input: &Path,
        output: &Path,
        count: Option<usize>,
    ) -> Result<DatasetManifest, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, DatasetFormat::PairsJsonl)?;
        let pool: Vec<&InstructionRecord> =
            records.iter().filter(|r| r.response.is_some()).collect();
        let excluded = records.len() - pool.len();
        if pool.is_empty() {
            return Err(ConfigError::Invalid("ire: pool has no (instruction, response) pairs".into()).into());
        }
        let count = count.unwrap_or(pool.len());
        // demo sets drawn up-front from one seeded stream, so concurrency
        // cannot perturb the draws
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        let demo_sets: Vec<Vec<(String, String)>> = (0..count)
            .map(|_| {
                let k = rng.gen_range(1..=3usize.min(pool.len()));
                rand::seq::index::sample(&mut rng, pool.len(), k)
                    .into_iter()
                    .map(|i| {
                        (
                            pool[i].instruction.clone(),
                            pool[i].response.clone().unwrap_or_default(),
                        )
                    })
                    .collect()
            })
            .collect();
        let results = par_map(&demo_sets, self.workers(), |_, demos| {
            let model = self.config.model_routing.model_for(ROLE_AUGMENTER, "en");
            ire_generate(demos, &self.gateway, &self.templates, model)
        });
        let mut generated = Vec::with_capacity(count);
        let mut failed = 0usize;
        for (demos, result) in demo_sets.iter().zip(results) {
            match result {
                Ok((instruction, response)) => {
                    let parent = pool
                        .iter()
                        .find(|r| r.instruction == demos[0].0)
                        .map(|r| r.id.clone())
                        .unwrap_or_default();
                    generated.push(make_record(
                        &instruction,
                        Some(&response),
                        None,
                        "en",
                        "ire",
                        Some(&parent),
                        Derivation::IreGenerated,
                    )?);
                }
                Err(error) => {
                    eprintln!("ire: generation failed: {error}");
                    failed += 1;
                }
            }
        }
        // the pool itself is untouched; failures refer to generation slots
        let accounting = StageAccounting {
            input_count: records.len(),
            kept: pool.len(),
            rejected: excluded,
            failed: 0,
            ..Default::default()
        };
        if failed > 0 {
            eprintln!("ire: {failed} of {count} generation slots failed");
        }
        Ok(write_dataset_with_manifest(
            &generated,
            output,
            self.manifest(&generated, "ire", accounting),
        )?)
    }

    /// Emit one of the three training sets.
    ///
    /// IE and IR need the `sources` dataset the records' `parent_id`s point
    /// into; IRE consumes the input pool directly.
    pub fn emit_train(
        &self,
        task: TrainTask,
        input: &Path,
        sources: Option<&Path>,
        output: &Path,
    ) -> Result<TrainsetManifest, PipelineError> {
        self.require_input(input)?;
        let records = read_dataset(input, DatasetFormat::PairsJsonl)?;
        let examples = match task {
            TrainTask::Ie => {
                let parents = self.load_parents(sources)?;
                let mut grouped: BTreeMap<String, ExpansionResult> = BTreeMap::new();
                for record in &records {
                    let Some(parent_id) = &record.parent_id else { continue };
                    let Some(parent) = parents.get(parent_id) else {
                        eprintln!("emit-train ie: no source record for parent {parent_id}");
                        continue;
                    };
                    grouped
                        .entry(parent_id.clone())
                        .or_insert_with(|| ExpansionResult {
                            source_id: parent.id.clone(),
                            source_instruction: parent.instruction.clone(),
                            targets: Vec::new(),
                            template_name: "expansion_annotation".into(),
                        })
                        .targets
                        .push(record.instruction.clone());
                }
                let expansions: Vec<ExpansionResult> = grouped.into_values().collect();
                emit_ie(&expansions, &self.templates)
            }
            TrainTask::Ir => {
                let parents = self.load_parents(sources)?;
                let mut pairs = Vec::new();
                for record in &records {
                    let Some(parent_id) = &record.parent_id else { continue };
                    let Some(parent) = parents.get(parent_id) else {
                        eprintln!("emit-train ir: no source record for parent {parent_id}");
                        continue;
                    };
                    pairs.push((parent.clone(), record.instruction.clone()));
                }
                emit_ir(&pairs, &self.templates)
            }
            TrainTask::Ire => {
                let pool: Vec<InstructionRecord> = records
                    .into_iter()
                    .filter(|r| r.response.is_some())
                    .collect();
                emit_ire(&pool, self.config.rng_seed, self.config.shuffle_frac, &self.templates)?
            }
        };
        Ok(write_training_set(
            &examples,
            output,
            task,
            &self.config_digest,
            self.config.rng_seed,
        )?)
    }

    fn load_parents(
        &self,
        sources: Option<&Path>,
    ) -> Result<BTreeMap<String, InstructionRecord>, PipelineError> {
        let path = sources.ok_or_else(|| {
            ConfigError::Invalid("emit-train ie/ir requires --sources".into())
        })?;
        self.require_input(path)?;
        let records = read_dataset(path, DatasetFormat::PairsJsonl)?;
        Ok(records.into_iter().map(|r| (r.id.clone(), r)).collect())
    }

    /// Compute the metric battery over records that carry responses.
    pub fn eval(&self, input: &Path, output: &Path) -> Result<crate::evalsuite::MetricsReport, PipelineError> {
        self.require_input(input)?;
        let records: Vec<InstructionRecord> = read_dataset(input, DatasetFormat::PairsJsonl)?
            .into_iter()
            .filter(|r| r.response.as_deref().is_some_and(|resp| !resp.is_empty()))
            .collect();
        if records.is_empty() {
            return Err(ConfigError::Invalid("eval: no records with responses".into()).into());
        }
        let judge_model = self.config.model_routing.model_for(ROLE_JUDGE, "en");
        let report = metrics_report(&records, &self.gateway, &self.templates, judge_model, false)?;
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(output, body).map_err(|e| PipelineError::Io {
            path: output.to_path_buf(),
            source: e,
        })?;
        Ok(report)
    }

    /// Judge answer pairs under one aspect; returns verdicts + win rates.
    pub fn judge(
        &self,
        input: &Path,
        aspect: Aspect,
        output: &Path,
    ) -> Result<JudgeReport, PipelineError> {
        self.require_input(input)?;
        let text = std::fs::read_to_string(input).map_err(|e| PipelineError::Io {
            path: input.to_path_buf(),
            source: e,
        })?;
        let mut items = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: JudgeInput = serde_json::from_str(line).map_err(|e| CorpusError::ParseError {
                path: input.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            items.push(item);
        }
        let judge_model = self.config.model_routing.model_for(ROLE_JUDGE, "en");
        let judged = par_map(&items, self.workers(), |_, item| {
            pairwise_judge(
                &item.instruction,
                &item.answer_a,
                &item.answer_b,
                aspect,
                &self.gateway,
                &self.templates,
                judge_model,
                self.config.judge_debias,
            )
        });
        let mut verdicts = Vec::new();
        let mut failed = 0usize;
        for result in judged {
            match result {
                Ok(item) => verdicts.push(item),
                Err(error) => {
                    eprintln!("judge: item failed: {error}");
                    failed += 1;
                }
            }
        }
        if verdicts.is_empty() {
            return Err(ConfigError::Invalid("judge: every item failed".into()).into());
        }
        let report = JudgeReport {
            aspect,
            rates: win_rate(&verdicts),
            judged: verdicts.len(),
            failed,
            verdicts,
        };
        let body = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(output, body).map_err(|e| PipelineError::Io {
            path: output.to_path_buf(),
            source: e,
        })?;
        Ok(report)
    }
}

#[derive(Debug, Deserialize)]
struct JudgeInput {
    instruction: String,
    answer_a: String,
    answer_b: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgeReport {
    pub aspect: Aspect,
    pub rates: WinRate,
    pub judged: usize,
    pub failed: usize,
    pub verdicts: Vec<JudgedItem>,
}
