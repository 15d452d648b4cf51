//! augmentkit: batch augmentation of instruction-tuning data.
//!
//! The crate grows a seed corpus three ways — expanding instructions into
//! harder variants, refining rough prompts, and generating brand-new
//! instruction/response pairs from in-context demonstrations — then emits
//! training sets that teach those three skills back to a model, and measures
//! the result with a metric battery and a pairwise judge.
//!
//! Everything runs offline against a deterministic scripted mock by default;
//! point the backend at any OpenAI-compatible HTTP endpoint for real runs.
//!
//! # Rendering a prompt
//!
//! Templates are fixed assets rendered by pure placeholder substitution, so
//! the bytes sent to the model are reproducible:
//!
//! ```
//! use augmentkit::template::TemplateSet;
//!
//! let templates = TemplateSet::builtin();
//! let rendered = templates
//!     .get("expansion_annotation")
//!     .unwrap()
//!     .render(&[("task_type", "open_qa"), ("instruction", "Name three rivers.")])
//!     .unwrap();
//! assert!(rendered.user.contains("Name three rivers."));
//! assert!(rendered.user.trim_end().ends_with("#Created Instruction#:"));
//! ```
//!
//! # Running a stage against the mock
//!
//! A [`pipeline::Pipeline`] wires config, templates and a gateway together.
//! With the scripted mock in structured-synth mode the whole flow works
//! offline:
//!
//! ```
//! use augmentkit::config::PipelineConfig;
//! use augmentkit::gateway::MockDefault;
//! use augmentkit::pipeline::Pipeline;
//! use augmentkit::corpus::DatasetFormat;
//!
//! let dir = tempfile::tempdir().unwrap();
//! let input = dir.path().join("seeds.jsonl");
//! std::fs::write(&input, "{\"instruction\":\"Summarize the plot of Hamlet.\"}\n").unwrap();
//!
//! let mut config = PipelineConfig::default();
//! config.backend.mock_default = MockDefault::StructuredSynth;
//! let pipeline = Pipeline::new(config).unwrap();
//!
//! let out = dir.path().join("expanded.jsonl");
//! let manifest = pipeline.expand(&input, &out, 2, false).unwrap().unwrap();
//! assert_eq!(manifest.record_count, 2);
//! ```
//!
//! # Deterministic sampling
//!
//! Anything random is driven by a seed recorded in the output manifest:
//!
//! ```
//! use augmentkit::corpus::{make_record, Derivation};
//! use augmentkit::sampler::balance_sample;
//!
//! let records: Vec<_> = (0..10)
//!     .map(|i| {
//!         let mut r = make_record(
//!             &format!("instruction {i}"), None, None, "en", "doc", None, Derivation::Seed,
//!         ).unwrap();
//!         r.task_type = Some(if i < 8 { "open_qa".into() } else { "chat".into() });
//!         r
//!     })
//!     .collect();
//! let picked = balance_sample(&records, 4, 7);
//! assert_eq!(picked.len(), 4);
//! assert_eq!(picked, balance_sample(&records, 4, 7));
//! ```

pub mod augmenter;
pub mod config;
pub mod corpus;
pub mod evalsuite;
pub mod gateway;
pub mod pipeline;
pub mod sampler;
pub mod template;
pub mod trainset;
pub mod util;
