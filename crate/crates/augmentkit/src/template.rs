//! Prompt templates and their rendering.
//!
//! Templates are plain text assets with `<<<SYSTEM>>>` / `<<<USER>>>` (and
//! optionally `<<<OUTPUT>>>`) section markers. Rendering is pure string
//! substitution of `{placeholder}` slots: no trimming, no re-wrapping, so a
//! rendered prompt is byte-for-byte reproducible and can be pinned by golden
//! files.
//!
//! The built-in set is embedded in the binary; a template directory given in
//! the pipeline config overrides any of them by file name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::util::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template}: unbound required placeholder {{{placeholder}}}")]
    UnboundPlaceholder {
        template: String,
        placeholder: String,
    },
    #[error("template asset {0}: missing <<<SYSTEM>>> or <<<USER>>> section")]
    MalformedAsset(String),
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("failed to read template {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

/// A named prompt template with `{placeholder}` slots.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: String,
    pub system_text: String,
    pub user_text: String,
    /// Expected model-output shape, present only for the training templates.
    pub output_text: Option<String>,
    pub required_placeholders: Vec<String>,
}

impl PromptTemplate {
    /// Parse the `<<<SYSTEM>>>` / `<<<USER>>>` / `<<<OUTPUT>>>` asset format.
    pub fn parse(name: &str, asset: &str, required: &[&str]) -> Result<Self, TemplateError> {
        let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut current: Option<&str> = None;
        for line in asset.lines() {
            match line {
                "<<<SYSTEM>>>" => current = Some("system"),
                "<<<USER>>>" => current = Some("user"),
                "<<<OUTPUT>>>" => current = Some("output"),
                _ => {
                    if let Some(section) = current {
                        sections.entry(section).or_default().push(line);
                    }
                }
            }
        }
        let join = |key: &str| sections.get(key).map(|lines| lines.join("\n"));
        let (system_text, user_text) = match (join("system"), join("user")) {
            (Some(s), Some(u)) => (s, u),
            _ => return Err(TemplateError::MalformedAsset(name.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            system_text,
            user_text,
            output_text: join("output"),
            required_placeholders: required.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Substitute every required placeholder; error if a binding is missing.
    ///
    /// Only the declared placeholders are substituted. Literal braces anywhere
    /// else in the template (e.g. `${{variable_name}}`) pass through untouched.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<RenderedPrompt, TemplateError> {
        let mut user = self.user_text.clone();
        for placeholder in &self.required_placeholders {
            let value = bindings
                .iter()
                .find(|(k, _)| k == placeholder)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::UnboundPlaceholder {
                    template: self.name.clone(),
                    placeholder: placeholder.clone(),
                })?;
            user = user.replace(&format!("{{{placeholder}}}"), value);
        }
        Ok(RenderedPrompt {
            system: self.system_text.clone(),
            user,
        })
    }

    /// Digest over the raw template text, pinned into stage manifests.
    pub fn digest(&self) -> String {
        let mut buf = String::new();
        buf.push_str(&self.system_text);
        buf.push('\x1f');
        buf.push_str(&self.user_text);
        if let Some(out) = &self.output_text {
            buf.push('\x1f');
            buf.push_str(out);
        }
        sha256_hex(buf.as_bytes())
    }
}

/// A rendered (system, user) message pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl fmt::Display for RenderedPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\n---\n{}", self.system, self.user)
    }
}

const BUILTINS: &[(&str, &str, &[&str])] = &[
    (
        "expansion_annotation",
        include_str!("../assets/templates/expansion_annotation.txt"),
        &["task_type", "instruction"],
    ),
    (
        "refinement_annotation",
        include_str!("../assets/templates/refinement_annotation.txt"),
        &["prompt_to_refine"],
    ),
    (
        "train_ie",
        include_str!("../assets/templates/train_ie.txt"),
        &["instruction_to_expand"],
    ),
    (
        "train_ir",
        include_str!("../assets/templates/train_ir.txt"),
        &["instruction_to_refine"],
    ),
    (
        "train_ire",
        include_str!("../assets/templates/train_ire.txt"),
        &["demonstrations"],
    ),
    (
        "judge_truthfulness",
        include_str!("../assets/templates/judge_truthfulness.txt"),
        &["inst", "ans1", "ans2"],
    ),
    (
        "judge_detail",
        include_str!("../assets/templates/judge_detail.txt"),
        &["inst", "ans1", "ans2"],
    ),
    (
        "quality_check",
        include_str!("../assets/templates/quality_check.txt"),
        &["inst", "ans1"],
    ),
    (
        "response_generation",
        include_str!("../assets/templates/response_generation.txt"),
        &["demonstrations", "instruction"],
    ),
    (
        "task_classifier",
        include_str!("../assets/templates/task_classifier.txt"),
        &["taxonomy", "instruction"],
    ),
];

/// Registry of templates, built-ins plus per-file overrides.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTINS
            .iter()
            .map(|(name, asset, required)| {
                let tpl = PromptTemplate::parse(name, asset, required)
                    .expect("built-in template assets are well-formed");
                (name.to_string(), tpl)
            })
            .collect();
        Self { templates }
    }

    /// Built-ins with overrides loaded from `dir` (matched by file stem).
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for (name, _, required) in BUILTINS {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                let asset = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    name: name.to_string(),
                    source: e,
                })?;
                let tpl = PromptTemplate::parse(name, &asset, required)?;
                set.templates.insert(name.to_string(), tpl);
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    /// (name, digest) for every template, for manifest pinning.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(name, tpl)| (name.clone(), tpl.digest()))
            .collect()
    }
}

/// Format `(instruction, response)` pairs as `### Instruction:` /
/// `### Response:` blocks, newline-joined without a trailing newline.
pub fn demonstration_blocks(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(inst, resp)| format!("### Instruction:\n{inst}\n### Response:\n{resp}"))
        .collect::<Vec<_>>()
        .join("\n")
}
