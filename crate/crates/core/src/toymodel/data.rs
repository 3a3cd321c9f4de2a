use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};

/// Rule deciding the label from the visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Label 1 when more than half of the visual tokens come from the upper
    /// half of the visual vocabulary; ties are never generated.
    Majority,
    /// Label 1 when the first visual token id exceeds the last one.
    FirstVsLast,
}

impl Pattern {
    /// Whether reordering visual tokens can change the label.
    pub fn position_sensitive(self) -> bool {
        matches!(self, Pattern::FirstVsLast)
    }

    /// Label for a visual token block, or `None` for an ambiguous block.
    pub fn label(self, visual: &[usize], vocab_visual: usize) -> Option<usize> {
        match self {
            Pattern::Majority => {
                let marked = visual.iter().filter(|&&t| t >= vocab_visual / 2).count();
                let twice = 2 * marked;
                if twice > visual.len() {
                    Some(1)
                } else if twice < visual.len() {
                    Some(0)
                } else {
                    None
                }
            }
            Pattern::FirstVsLast => {
                let (a, b) = (visual[0], visual[visual.len() - 1]);
                (a != b).then_some(usize::from(a > b))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub n_visual: usize,
    pub n_text: usize,
    pub vocab_visual: usize,
    pub vocab_text: usize,
    pub pattern: Pattern,
}

/// One example: token ids per modality and a binary label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub visual: Vec<usize>,
    pub text: Vec<usize>,
    pub label: usize,
}

/// Deterministic dataset for `task`.
///
/// Labels alternate `0, 1, 0, …`, and each sample's visual block is drawn by
/// rejection until the pattern yields the wanted label. Text tokens are drawn
/// independently of the label, so text alone carries no signal.
pub fn gen_synthetic_dataset(task: &SyntheticTask, count: usize) -> Vec<Sample> {
    assert!(task.n_visual >= 2 || task.pattern == Pattern::Majority);
    assert!(task.vocab_visual >= 2 && task.vocab_text >= 1);
    let mut r = rng::stream(task.seed, streams::DATASET);
    (0..count)
        .map(|i| {
            let label = i % 2;
            let visual = loop {
                let v: Vec<usize> = (0..task.n_visual)
                    .map(|_| r.random_range(0..task.vocab_visual))
                    .collect();
                if task.pattern.label(&v, task.vocab_visual) == Some(label) {
                    break v;
                }
            };
            let text = (0..task.n_text)
                .map(|_| r.random_range(0..task.vocab_text))
                .collect();
            Sample {
                visual,
                text,
                label,
            }
        })
        .collect()
}
