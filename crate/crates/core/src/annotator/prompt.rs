//! The two prompts of one window conversation.

use serde::{Deserialize, Serialize};

use super::grid::GridImage;
use super::Window;
use crate::dataset::Instruction;

/// Prompt templates, versioned so they can be swapped through config.
///
/// Placeholders: `{frames}`, `{last_frame}`, `{goal}`, `{actions}` in stage
/// 1; `{n}`, `{last_index}`, `{scale_max}` in stage 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub version: String,
    pub stage1: String,
    pub stage2: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            version: "v1".into(),
            stage1: "The image shows {frames} consecutive frames of an agent in a top-down gridworld, \
arranged left to right and top to bottom. Each frame carries its index (0 to {last_frame}) in \
its bottom-right corner. Frame i is the observation before action i; the last frame shows the \
result of the final action. The white outline marks the agent, the green dots in the top row \
count finished sub-tasks, and the colored bar next to them shows the held object.\n\n\
Task goal: {goal}\n\n\
Actions taken:\n{actions}\n\n\
For each action, describe how the scene changes and whether the action brings the agent \
closer to accomplishing the goal."
                .into(),
            stage2: "Based on your analysis, rate how much each action contributed to accomplishing \
the goal, on a scale from 0 to {scale_max} (0 = no contribution or harmful, {scale_max} = \
directly accomplishes part of the goal). Reply with exactly {n} lines, one per action, each in \
the format \"Action <i>: <score>\" with <i> from 0 to {last_index} and <score> an integer."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub stage1_text: String,
    pub stage2_text: String,
    pub image: GridImage,
    pub expected_scores: usize,
}

pub fn build_prompts(
    window: &Window,
    grid: GridImage,
    goal: &Instruction,
    templates: &PromptTemplates,
    scale_max: u32,
) -> PromptBundle {
    let n = window.len();
    let actions = window
        .actions
        .iter()
        .enumerate()
        .map(|(i, a)| format!("Action {i}: {}", a.name()))
        .collect::<Vec<_>>()
        .join("\n");
    let stage1_text = templates
        .stage1
        .replace("{frames}", &(n + 1).to_string())
        .replace("{last_frame}", &n.to_string())
        .replace("{goal}", &goal.text)
        .replace("{actions}", &actions);
    let stage2_text = templates
        .stage2
        .replace("{n}", &n.to_string())
        .replace("{last_index}", &(n - 1).to_string())
        .replace("{scale_max}", &scale_max.to_string());
    PromptBundle { stage1_text, stage2_text, image: grid, expected_scores: n }
}
