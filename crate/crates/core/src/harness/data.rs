//! Fixed-width sequence layout shared by training, evaluation and sampling:
//!
//! ```text
//! [BOS] [PAD .. PAD prompt] [response EOS .. EOS]
//!        prompt_len          response_len
//! ```

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomStream;
use crate::sampler::GenerationTemplate;
use crate::tasks::tokenizer::{BOS, EOS, MASK, PAD};
use crate::tasks::{
    emit_dataset, gen_countdown, gen_sudoku, solve_countdown, Record, TaskInstance, TaskKind,
    Tokenizer,
};

use super::config::{RunConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub prompt_len: usize,
    pub response_len: usize,
}

/// One encoded record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

impl Layout {
    pub fn of(config: &RunConfig) -> Self {
        Self {
            prompt_len: config.data.prompt_len,
            response_len: config.data.response_len,
        }
    }

    pub fn seq_len(&self) -> usize {
        1 + self.prompt_len + self.response_len
    }

    pub fn response_start(&self) -> usize {
        1 + self.prompt_len
    }

    pub fn encode_prompt(&self, tk: &Tokenizer, prompt: &str) -> Result<Vec<u32>> {
        let ids = tk.encode(prompt)?;
        if ids.len() > self.prompt_len {
            return Err(Error::Capacity {
                len: ids.len(),
                limit: self.prompt_len,
            });
        }
        let mut out = vec![PAD; self.prompt_len - ids.len()];
        out.extend(ids);
        Ok(out)
    }

    pub fn encode_response(&self, tk: &Tokenizer, response: &str) -> Result<Vec<u32>> {
        let mut ids = tk.encode(response)?;
        if ids.len() > self.response_len {
            return Err(Error::Capacity {
                len: ids.len(),
                limit: self.response_len,
            });
        }
        ids.resize(self.response_len, EOS);
        Ok(ids)
    }

    pub fn encode(&self, tk: &Tokenizer, record: &Record) -> Result<Example> {
        let wrap = |e: Error| Error::Data(format!("record {:?}: {e}", record.prompt));
        Ok(Example {
            prompt: self.encode_prompt(tk, &record.prompt).map_err(wrap)?,
            response: self.encode_response(tk, &record.response).map_err(wrap)?,
        })
    }

    pub fn sequence(&self, ex: &Example) -> Vec<u32> {
        let mut row = Vec::with_capacity(self.seq_len());
        row.push(BOS);
        row.extend_from_slice(&ex.prompt);
        row.extend_from_slice(&ex.response);
        row
    }

    /// Positions that may never be masked: BOS and padding always, the whole
    /// prompt block when fine-tuning.
    pub fn protection(&self, row: &[u32], mode: TrainMode) -> Vec<bool> {
        row.iter()
            .enumerate()
            .map(|(n, &tok)| {
                n == 0 || tok == PAD || (mode == TrainMode::Sft && n < self.response_start())
            })
            .collect()
    }

    /// Fixed prompt, fully masked response block.
    pub fn template(&self, prompt: &[u32]) -> Result<GenerationTemplate> {
        let mut tokens = vec![BOS];
        tokens.extend_from_slice(prompt);
        let mut fixed = vec![true; tokens.len()];
        tokens.resize(self.seq_len(), MASK);
        fixed.resize(self.seq_len(), false);
        GenerationTemplate::new(tokens, fixed)
    }

    /// Text of the response block, read up to the first EOS.
    pub fn answer(&self, tk: &Tokenizer, row: &[u32]) -> String {
        tk.decode_answer(&row[self.response_start().min(row.len())..])
    }
}

pub fn encode_records(layout: &Layout, tk: &Tokenizer, records: &[Record]) -> Result<Vec<Example>> {
    records.iter().map(|r| layout.encode(tk, r)).collect()
}

/// Generator settings for `gen_data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub task: TaskKind,
    pub count: usize,
    /// Countdown: how many numbers per puzzle.
    pub n_numbers: usize,
    /// Countdown: largest starting number.
    pub value_max: u64,
    /// Sudoku: number of givens.
    pub clue_count: usize,
    pub seed: u64,
}

struct Generated {
    prompt: String,
    response: String,
    identity: String,
}

impl TaskInstance for Generated {
    fn prompt_text(&self) -> String {
        self.prompt.clone()
    }

    fn response_text(&self) -> String {
        self.response.clone()
    }

    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn verify(&self, answer: &str) -> bool {
        answer == self.response
    }
}

/// Generate `count` distinct instances and write them split by `ratios`.
/// Countdown responses are the solver's canonical solution, so each prompt
/// has exactly one training target.
pub fn gen_data(spec: &GenSpec, ratios: &[f64], paths: &[PathBuf]) -> Result<Vec<usize>> {
    let mut rng = RandomStream::new(spec.seed).fork_named("gen_data");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.count);
    let mut attempts = 0usize;
    while out.len() < spec.count {
        attempts += 1;
        if attempts > spec.count.saturating_mul(50) + 1000 {
            return Err(Error::Usage(format!(
                "could only find {} distinct instances of the {} requested",
                out.len(),
                spec.count
            )));
        }
        let g = match spec.task {
            TaskKind::Countdown => {
                let inst = gen_countdown(&mut rng, spec.n_numbers, spec.value_max)?;
                let response = solve_countdown(&inst.numbers, inst.target)
                    .expect("generated countdown instances are solvable");
                Generated {
                    prompt: inst.prompt_text(),
                    response,
                    identity: inst.identity(),
                }
            }
            TaskKind::Sudoku => {
                let inst = gen_sudoku(&mut rng, spec.clue_count)?;
                Generated {
                    prompt: inst.prompt_text(),
                    response: inst.response_text(),
                    identity: inst.identity(),
                }
            }
        };
        if seen.insert(g.identity.clone()) {
            out.push(g);
        }
    }
    emit_dataset(&out, ratios, paths, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::read_records;

    fn layout() -> Layout {
        Layout {
            prompt_len: 8,
            response_len: 6,
        }
    }

    #[test]
    fn encoding_pads_and_fills() {
        let tk = Tokenizer::new();
        let ex = layout()
            .encode(
                &tk,
                &Record {
                    prompt: "3,4>7".into(),
                    response: "3+4".into(),
                },
            )
            .unwrap();
        let row = layout().sequence(&ex);
        assert_eq!(row.len(), 15);
        assert_eq!(&row[..4], &[BOS, PAD, PAD, PAD]);
        assert_eq!(&row[12..], &[EOS; 3]);
        assert_eq!(layout().answer(&tk, &row), "3+4");

        let prot = layout().protection(&row, TrainMode::DiffusionPretrain);
        assert_eq!(prot.iter().filter(|&&p| p).count(), 4);
        let prot = layout().protection(&row, TrainMode::Sft);
        assert_eq!(prot.iter().filter(|&&p| p).count(), 9);

        let long = Record {
            prompt: "123456789".into(),
            response: "1".into(),
        };
        assert!(layout().encode(&tk, &long).is_err());
    }

    #[test]
    fn template_masks_the_response_block() {
        let tk = Tokenizer::new();
        let p = layout().encode_prompt(&tk, "1,2>3").unwrap();
        let t = layout().template(&p).unwrap();
        assert_eq!(t.free_positions(), (9..15).collect::<Vec<_>>());
    }

    #[test]
    fn generated_data_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let paths = vec![
            dir.path().join("train.jsonl"),
            dir.path().join("test.jsonl"),
        ];
        for (task, count) in [(TaskKind::Countdown, 300), (TaskKind::Sudoku, 200)] {
            let spec = GenSpec {
                task,
                count,
                n_numbers: 3,
                value_max: 20,
                clue_count: 8,
                seed: 1,
            };
            let counts = gen_data(&spec, &[0.9, 0.1], &paths).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), count);
            for p in &paths {
                for r in read_records(p).unwrap() {
                    assert!(task.verify(&r.prompt, &r.response), "{r:?}");
                }
            }
        }
    }
}
