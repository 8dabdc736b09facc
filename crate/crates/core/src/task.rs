use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::capability::Capability;
use crate::images::ImageRef;

/// How a predicted answer is compared with the gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerMode {
    MultipleChoice,
    ExactText,
    Numeric { tolerance: f64 },
    ActionSequence,
}

/// One benchmark item: instruction, input images and a gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    pub gold: String,
    pub answer_mode: AnswerMode,
    pub family: String,
    #[serde(default)]
    pub capability_labels: BTreeSet<Capability>,
}

impl TaskInstance {
    /// Text-only task with no capability labels; handy in tests.
    pub fn text(id: &str, instruction: &str, gold: &str, answer_mode: AnswerMode) -> Self {
        Self {
            id: id.to_string(),
            instruction: instruction.to_string(),
            images: Vec::new(),
            gold: gold.to_string(),
            answer_mode,
            family: "misc".to_string(),
            capability_labels: BTreeSet::new(),
        }
    }
}
