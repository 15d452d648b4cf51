//! Golden-file comparison shared by the golden and acceptance test targets.

use augmentkit::template::TemplateSet;

pub const FIXTURES: &[(&str, &[(&str, &str)])] = &[
    (
        "expansion_annotation",
        &[
            ("task_type", "brainstorming"),
            ("instruction", "List three uses for a paperclip."),
        ],
    ),
    (
        "refinement_annotation",
        &[("prompt_to_refine", "Tell me about climate change.")],
    ),
    (
        "train_ie",
        &[("instruction_to_expand", "List three uses for a paperclip.")],
    ),
    (
        "train_ir",
        &[("instruction_to_refine", "Tell me about climate change.")],
    ),
    (
        "train_ire",
        &[(
            "demonstrations",
            "### Instruction:\nName a prime number.\n### Response:\n7",
        )],
    ),
    (
        "judge_truthfulness",
        &[
            ("inst", "What is the capital of France?"),
            ("ans1", "Paris."),
            ("ans2", "The capital of France is Paris, a city on the Seine."),
        ],
    ),
    (
        "judge_detail",
        &[
            ("inst", "What is the capital of France?"),
            ("ans1", "Paris."),
            ("ans2", "The capital of France is Paris, a city on the Seine."),
        ],
    ),
];

/// Reassemble the rendered prompt in the golden file's framing.
pub fn rendered_as_golden(
    templates: &TemplateSet,
    name: &str,
    bindings: &[(&str, &str)],
) -> String {
    let template = templates.get(name).unwrap();
    let rendered = template.render(bindings).unwrap();
    let mut out = format!(
        "<<<SYSTEM>>>\n{}\n<<<USER>>>\n{}\n",
        rendered.system, rendered.user
    );
    if let Some(output) = &template.output_text {
        out.push_str(&format!("<<<OUTPUT>>>\n{output}\n"));
    }
    out
}

/// Compare every fixture rendering byte-for-byte against its golden file.
pub fn check_all_goldens() -> Result<(), String> {
    let templates = TemplateSet::builtin();
    for (name, bindings) in FIXTURES {
        let got = rendered_as_golden(&templates, name, bindings);
        let path = format!("{}/tests/golden/{name}.golden", env!("CARGO_MANIFEST_DIR"));
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
        if got != want {
            return Err(format!("template {name} deviates from its golden rendering"));
        }
    }
    Ok(())
}
