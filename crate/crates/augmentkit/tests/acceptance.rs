//! Acceptance suite: eight criteria, one pass/fail line each.
//!
//! Runs entirely offline against the scripted mock. Each criterion is a
//! function returning `Result<(), String>`; the single test at the bottom
//! prints `[PASS]`/`[FAIL]` per criterion and fails if any criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use augmentkit::augmenter::{
    expand_instruction, ire_generate, refine_instruction, AugmenterError, ExpansionResult,
    AUGMENT_TEMPERATURE, DEFAULT_FORBIDDEN,
};
use augmentkit::config::PipelineConfig;
use augmentkit::corpus::{make_record, DatasetFormat, Derivation, InstructionRecord};
use augmentkit::evalsuite::{
    diversity, ifd, mean_length, pairwise_judge, win_rate, Aspect, AnswerOrder, JudgeVerdict,
    JudgedItem, Tokenizer,
};
use augmentkit::gateway::{
    prompt_digest, BackendConfig, CompletionRequest, CountingBackend, FlakyBackend, Gateway,
    MockDefault, ScriptedMock,
};
use augmentkit::pipeline::Pipeline;
use augmentkit::template::{demonstration_blocks, TemplateSet};
use augmentkit::trainset::{emit_ie, emit_ire, TrainTask};
use augmentkit::util::sha256_hex;

#[path = "common/goldens.rs"]
mod goldens;

fn synth_config(seed: u64) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.backend.mock_default = MockDefault::StructuredSynth;
    config.backend.backoff_base_ms = 0;
    config.rng_seed = seed;
    config
}

fn synth_pipeline(seed: u64) -> Pipeline {
    Pipeline::new(synth_config(seed)).expect("mock pipeline builds")
}

fn seed_record(i: usize) -> InstructionRecord {
    make_record(
        &format!("Describe practical scenario {i} and what a careful plan for it looks like."),
        None,
        None,
        "en",
        "seed",
        None,
        Derivation::Seed,
    )
    .unwrap()
}

fn write_seed_file(path: &Path, n: usize, with_responses: bool) {
    let lines: Vec<String> = (0..n)
        .map(|i| {
            let mut obj = serde_json::json!({
                "instruction": format!(
                    "Describe practical scenario {i} and what a careful plan for it looks like."
                ),
            });
            if with_responses {
                obj["response"] =
                    serde_json::json!(format!("A careful plan for scenario {i}: prepare, act, review."));
            }
            obj.to_string()
        })
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn check(condition: bool, message: &str) -> Result<(), String> {
    if condition {
        Ok(())
    } else {
        Err(message.to_string())
    }
}

// --- criterion 1: template goldens -----------------------------------------

fn criterion_1() -> Result<(), String> {
    goldens::check_all_goldens()
}

// --- criterion 2: dataset-shape reproduction at 1/100 scale -----------------

fn criterion_2() -> Result<(), String> {
    let pipeline = synth_pipeline(1);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // 100 seeds -> expand(n=2) -> exactly 200 targets
    let seeds = dir.path().join("seeds.jsonl");
    write_seed_file(&seeds, 100, false);
    let expanded = dir.path().join("expanded.jsonl");
    let manifest = pipeline
        .expand(&seeds, &expanded, 2, false)
        .map_err(|e| e.to_string())?
        .expect("not a dry run");
    check(manifest.record_count == 200, &format!(
        "expected 200 expanded records, got {}", manifest.record_count
    ))?;

    // refine over 360 records -> exactly 360 refined pairs
    let refine_in = dir.path().join("refine_in.jsonl");
    write_seed_file(&refine_in, 360, false);
    let refined = dir.path().join("refined.jsonl");
    let manifest = pipeline
        .refine(&refine_in, &refined, false)
        .map_err(|e| e.to_string())?
        .expect("not a dry run");
    check(manifest.record_count == 360, &format!(
        "expected 360 refined records, got {}", manifest.record_count
    ))?;

    // respond + emit_ire over the 200 expanded -> exactly 200 IRE examples
    let responded = dir.path().join("responded.jsonl");
    let manifest = pipeline
        .respond(&expanded, &responded)
        .map_err(|e| e.to_string())?;
    check(manifest.record_count == 200, &format!(
        "expected 200 responded records, got {}", manifest.record_count
    ))?;
    let ire_out = dir.path().join("train_ire.jsonl");
    let manifest = pipeline
        .emit_train(TrainTask::Ire, &responded, None, &ire_out)
        .map_err(|e| e.to_string())?;
    check(manifest.example_count == 200, &format!(
        "expected 200 IRE examples, got {}", manifest.example_count
    ))
}

// --- criterion 3: loss-equation realization ---------------------------------

fn criterion_3() -> Result<(), String> {
    let templates = TemplateSet::builtin();

    // IE: every example's (user, output) is a (source, target) pair
    let expansions: Vec<ExpansionResult> = (0..20)
        .map(|i| ExpansionResult {
            source_id: format!("src-{i}"),
            source_instruction: format!("source instruction {i}"),
            targets: vec![format!("target {i}a"), format!("target {i}b")],
            template_name: "expansion_annotation".into(),
        })
        .collect();
    let pairs: HashSet<(String, String)> = expansions
        .iter()
        .flat_map(|e| {
            e.targets
                .iter()
                .map(|t| (e.source_instruction.clone(), t.clone()))
        })
        .collect();
    let examples = emit_ie(&expansions, &templates);
    check(examples.len() == pairs.len(), "IE example count mismatch")?;
    for example in &examples {
        check(
            pairs.contains(&(example.user_prompt.clone(), example.target_output.clone())),
            "IE example (user, output) is not a (source, target) pair of its expansion",
        )?;
    }

    // IRE over 1,000 emissions
    let pool: Vec<InstructionRecord> = (0..1000)
        .map(|i| {
            make_record(
                &format!("pool instruction {i}"),
                Some(&format!("pool response {i}")),
                None,
                "en",
                "pool",
                None,
                Derivation::Seed,
            )
            .unwrap()
        })
        .collect();
    let examples = emit_ire(&pool, 0, 0.15, &templates).map_err(|e| e.to_string())?;
    check(examples.len() == 1000, "expected 1,000 IRE examples")?;
    let mut shuffled = 0usize;
    for (idx, example) in examples.iter().enumerate() {
        let k = example.user_prompt.matches("### Response:").count();
        check((1..=3).contains(&k), &format!("IRE example {idx} has K={k}"))?;
        let own_block = format!(
            "### Instruction:\n{}\n### Response:\n{}",
            pool[idx].instruction,
            pool[idx].response.as_deref().unwrap()
        );
        if !example.shuffled {
            check(
                !example.user_prompt.contains(&own_block),
                &format!("IRE example {idx} includes its own unshuffled target as a demonstration"),
            )?;
            check(
                example.target_output == own_block,
                &format!("unshuffled IRE example {idx} does not target its own pair"),
            )?;
        } else {
            shuffled += 1;
            check(
                example.target_output != own_block,
                &format!("shuffled IRE example {idx} still targets its own pair"),
            )?;
        }
    }
    let fraction = shuffled as f64 / 1000.0;
    // 3 * sqrt(0.15 * 0.85 / 1000)
    check((fraction - 0.15).abs() <= 0.0339, &format!(
        "shuffled fraction {fraction} outside 0.15 +/- 0.0339"
    ))
}

// --- criterion 4: metric oracle equivalence ---------------------------------

fn relative_close(a: f64, b: f64, tolerance: f64) -> bool {
    (a - b).abs() <= tolerance * b.abs().max(1.0)
}

fn criterion_4() -> Result<(), String> {
    let gateway = Gateway::new(
        Arc::new(ScriptedMock::default()),
        &BackendConfig {
            backoff_base_ms: 0,
            ..BackendConfig::default()
        },
    );
    let records: Vec<InstructionRecord> = (0..50)
        .map(|i| {
            make_record(
                &format!("alpha beta gamma {i} delta {} epsilon", i % 7),
                Some(&format!("zeta eta {i} theta iota kappa {}", i % 5)),
                None,
                "en",
                "fixture",
                None,
                Derivation::Seed,
            )
            .unwrap()
        })
        .collect();

    // brute-force references, written independently of the library code
    let reference_diversity = {
        let mut total = 0usize;
        for record in &records {
            let lower = record.instruction.to_lowercase();
            let tokens: Vec<&str> = lower.split_whitespace().collect();
            let mut bigrams: Vec<String> = (1..tokens.len())
                .map(|j| format!("{} {}", tokens[j - 1], tokens[j]))
                .collect();
            bigrams.sort();
            bigrams.dedup();
            total += bigrams.len();
        }
        total as f64 / records.len() as f64
    };
    let reference_length = {
        let mut total = 0usize;
        for record in &records {
            total += record.instruction.split_whitespace().count();
        }
        total as f64 / records.len() as f64
    };

    check(
        relative_close(diversity(&records), reference_diversity, 1e-9),
        "diversity deviates from the brute-force reference",
    )?;
    check(
        relative_close(
            mean_length(&records, Tokenizer::Whitespace, None).map_err(|e| e.to_string())?,
            reference_length,
            1e-9,
        ),
        "mean_length deviates from the brute-force reference",
    )?;

    for record in &records {
        let response = record.response.as_deref().unwrap();
        let conditioned = gateway
            .score_logprobs(&record.instruction, response)
            .map_err(|e| e.to_string())?;
        let unconditioned = gateway
            .score_logprobs("", response)
            .map_err(|e| e.to_string())?;
        let nll = |scores: &[augmentkit::gateway::TokenLogprob]| {
            let total: f64 = scores.iter().map(|t| -t.logprob).sum();
            total / scores.len() as f64
        };
        let reference_ifd = (nll(&conditioned) - nll(&unconditioned)).exp();
        let got = ifd(record, &gateway).map_err(|e| e.to_string())?;
        check(
            relative_close(got, reference_ifd, 1e-9),
            "IFD deviates from the brute-force reference",
        )?;
    }

    // scripted case: conditioned [-1, -1], unconditioned [-2, -2] -> e^{-1}
    let record = make_record(
        "scripted instruction",
        Some("two tokens"),
        None,
        "en",
        "fixture",
        None,
        Derivation::Seed,
    )
    .unwrap();
    let mut mock = ScriptedMock::default();
    mock.script_logprobs(&record.instruction, "two tokens", vec![-1.0, -1.0]);
    mock.script_logprobs("", "two tokens", vec![-2.0, -2.0]);
    let gateway = Gateway::new(
        Arc::new(mock),
        &BackendConfig {
            backoff_base_ms: 0,
            ..BackendConfig::default()
        },
    );
    let got = ifd(&record, &gateway).map_err(|e| e.to_string())?;
    check(
        (got - (-1.0f64).exp()).abs() <= 1e-12,
        &format!("scripted IFD case returned {got}, expected e^-1"),
    )
}

// --- criterion 5: win-rate arithmetic ---------------------------------------

fn verdict(score_a: f64, score_b: f64) -> JudgedItem {
    JudgedItem {
        verdicts: vec![JudgeVerdict {
            aspect: Aspect::Truthfulness,
            score_a,
            score_b,
            explanation: String::new(),
            order: AnswerOrder::Original,
        }],
    }
}

fn criterion_5() -> Result<(), String> {
    // 242 wins / 78 losses / 0 ties over 320 -> relative rate 75.625% exactly
    let mut items = Vec::with_capacity(320);
    items.extend((0..242).map(|_| verdict(8.0, 7.0)));
    items.extend((0..78).map(|_| verdict(7.0, 8.0)));
    let rates = win_rate(&items);
    check(rates.win_pct == 75.625, &format!("win_pct {} != 75.625", rates.win_pct))?;
    check(rates.tie_pct == 0.0, "tie_pct should be exactly 0")?;
    check(
        rates.relative_pct == 75.625,
        &format!("relative_pct {} != 75.625", rates.relative_pct),
    )?;

    // all ties -> exactly 50%
    let ties: Vec<JudgedItem> = (0..320).map(|_| verdict(6.0, 6.0)).collect();
    let rates = win_rate(&ties);
    check(rates.relative_pct == 50.0, "all-tie input must report exactly 50%")?;

    // symmetry: mirroring every verdict swaps win/lose and keeps the total
    let mirrored: Vec<JudgedItem> = items
        .iter()
        .map(|item| {
            let v = &item.verdicts[0];
            verdict(v.score_b, v.score_a)
        })
        .collect();
    let forward = win_rate(&items);
    let backward = win_rate(&mirrored);
    check(
        forward.win_pct == backward.lose_pct && forward.lose_pct == backward.win_pct,
        "mirroring verdicts must swap win and lose rates",
    )?;
    check(
        forward.relative_pct + backward.relative_pct == 100.0,
        "relative rates of a mirrored set must sum to 100",
    )?;

    // order-debias: with both orders judged, swapping the answer sides leaves
    // the aggregate unchanged (the synth judge always favors slot 1)
    let gateway = Gateway::new(
        Arc::new(ScriptedMock::default().with_default(MockDefault::StructuredSynth)),
        &BackendConfig {
            backoff_base_ms: 0,
            ..BackendConfig::default()
        },
    );
    let templates = TemplateSet::builtin();
    let ab = pairwise_judge(
        "Which is heavier, a kilogram of iron or of feathers?",
        "They weigh the same.",
        "Iron is heavier.",
        Aspect::Truthfulness,
        &gateway,
        &templates,
        "judge",
        true,
    )
    .map_err(|e| e.to_string())?;
    let ba = pairwise_judge(
        "Which is heavier, a kilogram of iron or of feathers?",
        "Iron is heavier.",
        "They weigh the same.",
        Aspect::Truthfulness,
        &gateway,
        &templates,
        "judge",
        true,
    )
    .map_err(|e| e.to_string())?;
    let rate_ab = win_rate(&[ab]);
    let rate_ba = win_rate(&[ba]);
    check(
        rate_ab.relative_pct == 50.0 && rate_ba.relative_pct == 50.0,
        "debiased judging of a position-biased judge must come out even both ways",
    )
}

// --- criterion 6: determinism ------------------------------------------------

fn run_full_pipeline(dir: &Path, seed: u64) -> Result<Vec<(String, String)>, String> {
    let pipeline = synth_pipeline(seed);
    let seeds = dir.join("seeds.jsonl");
    write_seed_file(&seeds, 60, true);

    let ingested = dir.join("ingested.jsonl");
    pipeline
        .ingest(&seeds, DatasetFormat::PairsJsonl, &ingested)
        .map_err(|e| e.to_string())?;
    let sampled = dir.join("sampled.jsonl");
    pipeline.sample(&ingested, &sampled, 40).map_err(|e| e.to_string())?;
    let expanded = dir.join("expanded.jsonl");
    pipeline
        .expand(&sampled, &expanded, 2, false)
        .map_err(|e| e.to_string())?;
    let refined = dir.join("refined.jsonl");
    pipeline
        .refine(&sampled, &refined, false)
        .map_err(|e| e.to_string())?;
    let responded = dir.join("responded.jsonl");
    pipeline.respond(&expanded, &responded).map_err(|e| e.to_string())?;

    let train_ie = dir.join("train_ie.jsonl");
    pipeline
        .emit_train(TrainTask::Ie, &expanded, Some(&sampled), &train_ie)
        .map_err(|e| e.to_string())?;
    let train_ir = dir.join("train_ir.jsonl");
    pipeline
        .emit_train(TrainTask::Ir, &refined, Some(&sampled), &train_ir)
        .map_err(|e| e.to_string())?;
    let train_ire = dir.join("train_ire.jsonl");
    pipeline
        .emit_train(TrainTask::Ire, &responded, None, &train_ire)
        .map_err(|e| e.to_string())?;
    let report = dir.join("metrics.json");
    pipeline.eval(&responded, &report).map_err(|e| e.to_string())?;

    // hash every dataset, training set and report (manifests carry wall-clock
    // timestamps and are deliberately excluded)
    let mut hashes = Vec::new();
    for path in [
        &ingested, &sampled, &expanded, &refined, &responded, &train_ie, &train_ir, &train_ire,
        &report,
    ] {
        let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        hashes.push((name, sha256_hex(&bytes)));
    }
    Ok(hashes)
}

fn criterion_6() -> Result<(), String> {
    let dir_a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir_b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run_a = run_full_pipeline(dir_a.path(), 42)?;
    let run_b = run_full_pipeline(dir_b.path(), 42)?;
    for ((name_a, hash_a), (_, hash_b)) in run_a.iter().zip(&run_b) {
        check(
            hash_a == hash_b,
            &format!("{name_a} differs between two identically-seeded runs"),
        )?;
    }
    Ok(())
}

// --- criterion 7: fault handling ---------------------------------------------

fn criterion_7() -> Result<(), String> {
    let mut config = synth_config(3);
    config.backend.max_retries = 3;
    config.backend.max_in_flight = 4;

    let counting = Arc::new(CountingBackend::new(FlakyBackend::new(
        ScriptedMock::default().with_default(MockDefault::StructuredSynth),
        0.10,
        7,
    )));
    let pipeline =
        Pipeline::with_backend(config, Arc::new(Arc::clone(&counting))).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = dir.path().join("needs_responses.jsonl");
    write_seed_file(&input, 100, false);
    let output = dir.path().join("responded.jsonl");
    let manifest = pipeline.respond(&input, &output).map_err(|e| e.to_string())?;

    let accounting = manifest.accounting.clone().ok_or("manifest lacks accounting")?;
    check(accounting.input_count == 100, "manifest must see all 100 inputs")?;
    check(
        accounting.balances(),
        "manifest accounting must cover 100% of input records",
    )?;
    check(
        accounting.failed == 0,
        &format!("{} records failed despite the retry budget", accounting.failed),
    )?;
    check(
        counting.max_in_flight_seen() <= 4,
        &format!("in-flight bound exceeded: {}", counting.max_in_flight_seen()),
    )?;
    // 100 requests, each allowed at most max_retries + 1 = 4 attempts
    check(
        counting.calls() <= 400,
        &format!("{} backend calls exceed 100 * (max_retries + 1)", counting.calls()),
    )?;
    check(counting.calls() >= 100, "every record must reach the backend")
}

// --- criterion 8: guard rails -------------------------------------------------

fn criterion_8() -> Result<(), String> {
    let templates = TemplateSet::builtin();
    let config = BackendConfig {
        backoff_base_ms: 0,
        ..BackendConfig::default()
    };

    // refinement output dropping a ${var} is rejected
    let record = make_record(
        "Summarize the following article. ${article}",
        None,
        None,
        "en",
        "seed",
        None,
        Derivation::Seed,
    )
    .unwrap();
    let rendered = templates
        .get("refinement_annotation")
        .unwrap()
        .render(&[("prompt_to_refine", record.instruction.as_str())])
        .unwrap();
    let mut mock = ScriptedMock::default();
    for attempt in 0..2u64 {
        let mut request = CompletionRequest::from_prompt(
            &rendered.system,
            &rendered.user,
            "gpt-4",
            AUGMENT_TEMPERATURE,
        );
        request.seed = Some(attempt);
        mock.script_response(prompt_digest(&request), "Summarize this article carefully.");
    }
    let gateway = Gateway::new(Arc::new(mock), &config);
    match refine_instruction(&record, &gateway, &templates, "gpt-4") {
        Err(AugmenterError::RefinementRejected(reason)) => {
            check(reason.contains("article"), "rejection reason must name the variable")?
        }
        other => return Err(format!("expected RefinementRejected, got {other:?}")),
    }

    // expansion output containing "#Created Instruction#" is rejected
    let record = seed_record(0);
    let rendered = templates
        .get("expansion_annotation")
        .unwrap()
        .render(&[("task_type", "chat"), ("instruction", record.instruction.as_str())])
        .unwrap();
    let mut mock = ScriptedMock::default();
    for attempt in 0..=2usize {
        let mut request = CompletionRequest::from_prompt(
            &rendered.system,
            &rendered.user,
            "gpt-4",
            AUGMENT_TEMPERATURE,
        );
        request.seed = Some(attempt as u64);
        mock.script_response(
            prompt_digest(&request),
            "#Created Instruction#: do the thing again",
        );
    }
    let gateway = Gateway::new(Arc::new(mock), &config);
    let forbidden: Vec<String> = DEFAULT_FORBIDDEN.iter().map(|s| s.to_string()).collect();
    match expand_instruction(&record, "chat", 1, &gateway, &templates, "gpt-4", &forbidden, 2) {
        Err(AugmenterError::ExpansionExhausted { filled: 0, wanted: 1 }) => {}
        other => return Err(format!("expected ExpansionExhausted, got {other:?}")),
    }

    // IRE completions without the block structure raise UnparseableContinuation
    let demos = vec![("Seed I".to_string(), "Seed R".to_string())];
    let rendered = templates
        .get("train_ire")
        .unwrap()
        .render(&[("demonstrations", demonstration_blocks(&demos).as_str())])
        .unwrap();
    let mut mock = ScriptedMock::default();
    for attempt in 0..2u64 {
        let mut request = CompletionRequest::from_prompt(
            &rendered.system,
            &rendered.user,
            "gpt-4",
            AUGMENT_TEMPERATURE,
        );
        request.seed = Some(attempt);
        mock.script_response(prompt_digest(&request), "prose with no blocks at all");
    }
    let gateway = Gateway::new(Arc::new(mock), &config);
    match ire_generate(&demos, &gateway, &templates, "gpt-4") {
        Err(AugmenterError::UnparseableContinuation(_)) => Ok(()),
        other => Err(format!("expected UnparseableContinuation, got {other:?}")),
    }
}

// --- driver -------------------------------------------------------------------

type Criterion = fn() -> Result<(), String>;

#[test]
fn acceptance() {
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 template goldens are byte-identical", criterion_1),
        ("2 dataset shape reproduces at 1/100 scale", criterion_2),
        ("3 IE/IRE emission realizes the loss equations", criterion_3),
        ("4 metrics match brute-force oracles", criterion_4),
        ("5 win-rate arithmetic is exact", criterion_5),
        ("6 identically-seeded runs are hash-identical", criterion_6),
        ("7 faults are retried within bounds and fully accounted", criterion_7),
        ("8 guard rails reject malformed completions", criterion_8),
    ];
    let mut failures = Vec::new();
    for (label, run) in criteria {
        match run() {
            Ok(()) => println!("[PASS] criterion {label}"),
            Err(message) => {
                println!("[FAIL] criterion {label}: {message}");
                failures.push(label);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
