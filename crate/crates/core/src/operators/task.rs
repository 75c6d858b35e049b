use serde::{Deserialize, Serialize};

use crate::model::{count_definitions, TaskKind};

const LANDER_DESCRIPTION: &str = include_str!("../../resources/tasks/lunar_lander_description.txt");
const LANDER_TEMPLATE: &str = include_str!("../../resources/tasks/lunar_lander_template.py");
const RACING_DESCRIPTION: &str = include_str!("../../resources/tasks/car_racing_description.txt");
const RACING_TEMPLATE: &str = include_str!("../../resources/tasks/car_racing_template.py");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { actions: usize },
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

/// What the language model is asked to write, and how the evaluator calls
/// it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub description: String,
    /// Python source with the entry point's signature and docstring; also a
    /// working seed heuristic.
    pub code_template: String,
    pub entry_point: String,
    pub action_space: ActionSpace,
}

impl TaskSpec {
    pub fn builtin(task: TaskKind) -> Self {
        match task {
            TaskKind::LunarLander => TaskSpec {
                task,
                description: LANDER_DESCRIPTION.trim_end().to_string(),
                code_template: LANDER_TEMPLATE.to_string(),
                entry_point: "choose_action".into(),
                action_space: ActionSpace::Discrete { actions: 4 },
            },
            TaskKind::CarRacing => TaskSpec {
                task,
                description: RACING_DESCRIPTION.trim_end().to_string(),
                code_template: RACING_TEMPLATE.to_string(),
                entry_point: "choose_action".into(),
                action_space: ActionSpace::Continuous {
                    low: vec![-1.0, 0.0, 0.0],
                    high: vec![1.0, 1.0, 1.0],
                },
            },
        }
    }

    /// The template must define the entry point exactly once.
    pub fn is_consistent(&self) -> bool {
        count_definitions(&self.code_template, &self.entry_point) == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates_define_entry_point() {
        for task in [TaskKind::LunarLander, TaskKind::CarRacing] {
            let spec = TaskSpec::builtin(task);
            assert!(spec.is_consistent(), "{task}");
            assert!(spec.code_template.contains("import numpy as np"));
        }
    }

    #[test]
    fn lander_template_lists_state_fields() {
        let spec = TaskSpec::builtin(TaskKind::LunarLander);
        assert!(spec.code_template.contains("s[0] - horizontal position (x)"));
        assert!(spec.code_template.contains("def choose_action(s: list, last_action: int, s_pre: list) -> int:"));
        assert_eq!(spec.action_space, ActionSpace::Discrete { actions: 4 });
    }

    #[test]
    fn racing_template_signature() {
        let spec = TaskSpec::builtin(TaskKind::CarRacing);
        assert!(spec
            .code_template
            .contains("def choose_action(observation, car_speed, pre_action, pre_observation):"));
        assert!(spec.description.starts_with("Write a Python function"));
    }
}
