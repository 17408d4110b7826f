//! 4x4 Sudoku with 2x2 boxes. Cells hold 1..=4, 0 is blank.

use super::TaskInstance;
use crate::error::{Error, Result};
use crate::numerics::RandomStream;

pub const SIZE: usize = 4;
const BOX: usize = 2;
const CELLS: usize = SIZE * SIZE;

pub type Grid = [u8; CELLS];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SudokuInstance {
    pub givens: Grid,
    pub solution: Grid,
    pub clue_count: usize,
}

/// Rows joined by `|`, blanks as `.`.
pub fn render_grid(g: &Grid) -> String {
    g.chunks(SIZE)
        .map(|row| {
            row.iter()
                .map(|&v| if v == 0 { '.' } else { char::from(b'0' + v) })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("|")
}

/// Inverse of [`render_grid`]; `allow_blank` admits `.` cells.
pub fn parse_grid(text: &str, allow_blank: bool) -> Option<Grid> {
    let rows: Vec<&str> = text.trim().split('|').collect();
    if rows.len() != SIZE {
        return None;
    }
    let mut g = [0u8; CELLS];
    for (r, row) in rows.iter().enumerate() {
        let cells: Vec<char> = row.chars().collect();
        if cells.len() != SIZE {
            return None;
        }
        for (c, ch) in cells.into_iter().enumerate() {
            g[r * SIZE + c] = match ch {
                '1'..='4' => ch as u8 - b'0',
                '.' if allow_blank => 0,
                _ => return None,
            };
        }
    }
    Some(g)
}

fn peers_allow(g: &Grid, cell: usize, v: u8) -> bool {
    let (r, c) = (cell / SIZE, cell % SIZE);
    let (br, bc) = (r / BOX * BOX, c / BOX * BOX);
    (0..SIZE).all(|i| {
        g[r * SIZE + i] != v && g[i * SIZE + c] != v && g[(br + i / BOX) * SIZE + bc + i % BOX] != v
    })
}

/// Every row, column and box of a complete grid holds 1..=4 exactly once.
pub fn is_valid_solution(g: &Grid) -> bool {
    let unit_ok = |cells: [usize; SIZE]| {
        let mut seen = [false; SIZE + 1];
        cells.iter().all(|&i| {
            let v = g[i] as usize;
            (1..=SIZE).contains(&v) && !std::mem::replace(&mut seen[v], true)
        })
    };
    (0..SIZE).all(|k| {
        let row = std::array::from_fn(|i| k * SIZE + i);
        let col = std::array::from_fn(|i| i * SIZE + k);
        let (br, bc) = (k / BOX * BOX, k % BOX * BOX);
        let bx = std::array::from_fn(|i| (br + i / BOX) * SIZE + bc + i % BOX);
        unit_ok(row) && unit_ok(col) && unit_ok(bx)
    })
}

/// All completions of `givens`, up to `limit`, by backtracking.
pub fn solve_sudoku(givens: &Grid, limit: usize) -> Vec<Grid> {
    fn go(g: &mut Grid, out: &mut Vec<Grid>, limit: usize) {
        if out.len() >= limit {
            return;
        }
        let Some(cell) = g.iter().position(|&v| v == 0) else {
            out.push(*g);
            return;
        };
        for v in 1..=SIZE as u8 {
            if peers_allow(g, cell, v) {
                g[cell] = v;
                go(g, out, limit);
                g[cell] = 0;
            }
        }
    }
    let mut g = *givens;
    // givens that already conflict have no completion
    for i in 0..CELLS {
        let v = g[i];
        if v != 0 {
            g[i] = 0;
            if !peers_allow(&g, i, v) {
                return Vec::new();
            }
            g[i] = v;
        }
    }
    let mut out = Vec::new();
    go(&mut g, &mut out, limit);
    out
}

fn random_full_grid(rng: &mut RandomStream) -> Grid {
    fn fill(g: &mut Grid, rng: &mut RandomStream) -> bool {
        let Some(cell) = g.iter().position(|&v| v == 0) else {
            return true;
        };
        let mut values: Vec<u8> = (1..=SIZE as u8).collect();
        rng.shuffle(&mut values);
        for v in values {
            if peers_allow(g, cell, v) {
                g[cell] = v;
                if fill(g, rng) {
                    return true;
                }
                g[cell] = 0;
            }
        }
        false
    }
    let mut g = [0u8; CELLS];
    assert!(
        fill(&mut g, rng),
        "an empty 4x4 grid always has a completion"
    );
    g
}

/// Random full grid by randomized backtracking, then blank all but
/// `clue_count` random cells. At least one solution (the stored one) exists.
pub fn gen_sudoku(rng: &mut RandomStream, clue_count: usize) -> Result<SudokuInstance> {
    if clue_count > CELLS {
        return Err(Error::Usage(format!(
            "clue_count {clue_count} exceeds {CELLS} cells"
        )));
    }
    let solution = random_full_grid(rng);
    let mut givens = solution;
    for cell in rng.sample_indices(CELLS, CELLS - clue_count) {
        givens[cell] = 0;
    }
    Ok(SudokuInstance {
        givens,
        solution,
        clue_count,
    })
}

impl SudokuInstance {
    /// Instance with only givens known; the solution field is left blank.
    pub fn from_prompt(prompt: &str) -> Option<Self> {
        let givens = parse_grid(prompt, true)?;
        Some(Self {
            givens,
            solution: [0; CELLS],
            clue_count: givens.iter().filter(|&&v| v != 0).count(),
        })
    }
}

impl TaskInstance for SudokuInstance {
    fn prompt_text(&self) -> String {
        render_grid(&self.givens)
    }

    fn response_text(&self) -> String {
        render_grid(&self.solution)
    }

    fn identity(&self) -> String {
        format!("sudoku:{}", render_grid(&self.givens))
    }

    fn verify(&self, answer: &str) -> bool {
        verify_sudoku(self, answer)
    }
}

/// True iff `answer` is a complete valid grid agreeing with every given.
pub fn verify_sudoku(instance: &SudokuInstance, answer: &str) -> bool {
    let Some(g) = parse_grid(answer, false) else {
        return false;
    };
    let agrees = instance
        .givens
        .iter()
        .zip(&g)
        .all(|(&given, &v)| given == 0 || given == v);
    agrees && is_valid_solution(&g)
}
