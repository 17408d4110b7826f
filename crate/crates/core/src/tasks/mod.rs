//! Synthetic planning tasks with exact verifiers, and their text encoding.
//!
//! Canonical renderings (one line each, no chain of thought):
//!
//! | task      | prompt                 | response                |
//! |-----------|------------------------|-------------------------|
//! | Countdown | `3,5,7>22`             | `3*5+7`                 |
//! | Sudoku    | `12.4|..3.|....|4..1`  | `1234|3412|2143|4321`   |

pub mod countdown;
pub mod dataset;
pub mod sudoku;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

pub use countdown::{gen_countdown, solve_countdown, verify_countdown, CountdownInstance};
pub use dataset::{emit_dataset, read_records, split_counts, write_records, Record};
pub use sudoku::{gen_sudoku, solve_sudoku, verify_sudoku, SudokuInstance};
pub use tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Countdown,
    Sudoku,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Countdown => "countdown",
            TaskKind::Sudoku => "sudoku",
        }
    }

    /// Score `answer` against the problem stated in `prompt`. Never fails:
    /// an unreadable prompt or answer scores false.
    pub fn verify(self, prompt: &str, answer: &str) -> bool {
        match self {
            TaskKind::Countdown => CountdownInstance::from_prompt(prompt)
                .is_some_and(|inst| verify_countdown(&inst, answer)),
            TaskKind::Sudoku => {
                SudokuInstance::from_prompt(prompt).is_some_and(|inst| verify_sudoku(&inst, answer))
            }
        }
    }

    /// Characters a response to this task can contain.
    pub fn response_alphabet(self) -> &'static str {
        match self {
            TaskKind::Countdown => "0123456789+-*/()",
            TaskKind::Sudoku => "1234|",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "countdown" => Ok(TaskKind::Countdown),
            "sudoku" => Ok(TaskKind::Sudoku),
            other => Err(crate::Error::Usage(format!("unknown task `{other}`"))),
        }
    }
}

/// A generated problem that can be written out as a prompt/response pair.
pub trait TaskInstance {
    fn prompt_text(&self) -> String;
    fn response_text(&self) -> String;
    /// Identity used for train/held-out disjointness.
    fn identity(&self) -> String;
    fn verify(&self, answer: &str) -> bool;
}
