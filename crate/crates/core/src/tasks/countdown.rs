//! Countdown: combine the given numbers with `+ - * /` to hit a target.

use std::collections::HashMap;
use std::fmt;

use super::TaskInstance;
use crate::error::{Error, Result};
use crate::numerics::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            Op::Add | Op::Sub => 1,
            Op::Mul | Op::Div => 2,
        }
    }

    /// Exact integer result, `None` on overflow or inexact division.
    fn apply(self, a: i64, b: i64) -> Option<i64> {
        match self {
            Op::Add => a.checked_add(b),
            Op::Sub => a.checked_sub(b),
            Op::Mul => a.checked_mul(b),
            Op::Div => (b != 0 && a % b == 0).then(|| a / b),
        }
    }
}

#[derive(Debug, Clone)]
enum Expr {
    Num(i64),
    Bin(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Num(_) => 3,
            Expr::Bin(op, _, _) => op.precedence(),
        }
    }
}

impl fmt::Display for Expr {
    // Minimal parentheses for left-associative evaluation.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Bin(op, l, r) => {
                let p = op.precedence();
                if l.precedence() < p {
                    write!(f, "({l})")?;
                } else {
                    write!(f, "{l}")?;
                }
                write!(f, "{}", op.symbol())?;
                let wrap_right =
                    r.precedence() < p || (r.precedence() == p && matches!(op, Op::Sub | Op::Div));
                if wrap_right {
                    write!(f, "({r})")
                } else {
                    write!(f, "{r}")
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountdownInstance {
    pub numbers: Vec<u64>,
    pub target: u64,
    pub oracle_solution: String,
}

impl CountdownInstance {
    /// Parse the numbers and target out of a rendered prompt. The returned
    /// instance has an empty oracle solution.
    pub fn from_prompt(prompt: &str) -> Option<Self> {
        let (nums, target) = prompt.trim().split_once('>')?;
        let numbers = nums
            .split(',')
            .map(|s| s.trim().parse::<u64>().ok().filter(|&n| n > 0))
            .collect::<Option<Vec<_>>>()?;
        let target = target.trim().parse::<u64>().ok()?;
        Some(Self {
            numbers,
            target,
            oracle_solution: String::new(),
        })
    }
}

impl TaskInstance for CountdownInstance {
    fn prompt_text(&self) -> String {
        let nums: Vec<String> = self.numbers.iter().map(u64::to_string).collect();
        format!("{}>{}", nums.join(","), self.target)
    }

    fn response_text(&self) -> String {
        self.oracle_solution.clone()
    }

    fn identity(&self) -> String {
        let mut nums = self.numbers.clone();
        nums.sort_unstable();
        format!("countdown:{nums:?}>{}", self.target)
    }

    fn verify(&self, answer: &str) -> bool {
        verify_countdown(self, answer)
    }
}

/// Sample numbers in `1..=value_max`, combine all of them into a random
/// expression whose every intermediate value is a positive integer, and use
/// its value as the target. Solvable by construction.
pub fn gen_countdown(
    rng: &mut RandomStream,
    n_numbers: usize,
    value_max: u64,
) -> Result<CountdownInstance> {
    if !(1..=6).contains(&n_numbers) {
        return Err(Error::Usage(format!("n_numbers {n_numbers} outside 1..=6")));
    }
    if !(1..=100).contains(&value_max) {
        return Err(Error::Usage(format!(
            "value_max {value_max} outside 1..=100"
        )));
    }
    loop {
        let numbers: Vec<u64> = (0..n_numbers)
            .map(|_| rng.range_inclusive(1, value_max))
            .collect();
        let mut pool: Vec<(i64, Expr)> = numbers
            .iter()
            .map(|&n| (n as i64, Expr::Num(n as i64)))
            .collect();
        let mut ok = true;
        while pool.len() > 1 {
            let i = rng.below(pool.len());
            let (a, ea) = pool.swap_remove(i);
            let j = rng.below(pool.len());
            let (b, eb) = pool.swap_remove(j);
            let op = Op::ALL[rng.below(4)];
            match op.apply(a, b).filter(|&v| v > 0) {
                Some(v) => pool.push((v, Expr::Bin(op, Box::new(ea), Box::new(eb)))),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let (target, expr) = pool.pop().expect("one expression left");
        return Ok(CountdownInstance {
            numbers,
            target: target as u64,
            oracle_solution: expr.to_string(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Token {
    Num(i64),
    Op(Op),
    Open,
    Close,
}

fn lex(text: &str) -> Option<Vec<Token>> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' => {
                chars.next();
            }
            '0'..='9' => {
                let mut v: i64 = 0;
                while let Some(d) = chars.peek().and_then(|c| c.to_digit(10)) {
                    v = v.checked_mul(10)?.checked_add(d as i64)?;
                    chars.next();
                }
                out.push(Token::Num(v));
            }
            '+' | '-' | '*' | '/' => {
                out.push(Token::Op(match c {
                    '+' => Op::Add,
                    '-' => Op::Sub,
                    '*' => Op::Mul,
                    _ => Op::Div,
                }));
                chars.next();
            }
            '(' => {
                out.push(Token::Open);
                chars.next();
            }
            ')' => {
                out.push(Token::Close);
                chars.next();
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Precedence-climbing evaluator that also records every literal it used.
struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    literals: Vec<i64>,
}

impl Parser<'_> {
    fn primary(&mut self) -> Option<i64> {
        match *self.tokens.get(self.pos)? {
            Token::Num(v) => {
                self.pos += 1;
                self.literals.push(v);
                Some(v)
            }
            Token::Open => {
                self.pos += 1;
                let v = self.expr(1)?;
                (self.tokens.get(self.pos) == Some(&Token::Close)).then(|| self.pos += 1)?;
                Some(v)
            }
            _ => None,
        }
    }

    fn expr(&mut self, min_prec: u8) -> Option<i64> {
        let mut lhs = self.primary()?;
        while let Some(&Token::Op(op)) = self.tokens.get(self.pos) {
            if op.precedence() < min_prec {
                break;
            }
            self.pos += 1;
            let rhs = self.expr(op.precedence() + 1)?;
            lhs = op.apply(lhs, rhs)?;
        }
        Some(lhs)
    }
}

/// True iff `answer` is an arithmetic expression over a sub-multiset of the
/// instance's numbers, with exact division, that evaluates to the target.
pub fn verify_countdown(instance: &CountdownInstance, answer: &str) -> bool {
    let Some(tokens) = lex(answer) else {
        return false;
    };
    if tokens.is_empty() {
        return false;
    }
    let mut p = Parser {
        tokens: &tokens,
        pos: 0,
        literals: Vec::new(),
    };
    let Some(value) = p.expr(1) else {
        return false;
    };
    if p.pos != tokens.len() || value != instance.target as i64 {
        return false;
    }
    let mut available: HashMap<i64, usize> = HashMap::new();
    for &n in &instance.numbers {
        *available.entry(n as i64).or_default() += 1;
    }
    p.literals.iter().all(|lit| match available.get_mut(lit) {
        Some(c) if *c > 0 => {
            *c -= 1;
            true
        }
        _ => false,
    })
}

/// Exhaustive search over pairwise combinations (positive integer
/// intermediates, any subset of the numbers). Returns one solution.
pub fn solve_countdown(numbers: &[u64], target: u64) -> Option<String> {
    fn search(pool: &mut Vec<(i64, Expr)>, target: i64) -> Option<Expr> {
        if let Some((_, e)) = pool.iter().find(|(v, _)| *v == target) {
            return Some(e.clone());
        }
        let n = pool.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for op in Op::ALL {
                    let (a, b) = (pool[i].0, pool[j].0);
                    let Some(v) = op.apply(a, b).filter(|&v| v > 0) else {
                        continue;
                    };
                    let expr =
                        Expr::Bin(op, Box::new(pool[i].1.clone()), Box::new(pool[j].1.clone()));
                    let mut next: Vec<(i64, Expr)> = pool
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != i && k != j)
                        .map(|(_, x)| x.clone())
                        .collect();
                    next.push((v, expr));
                    if let Some(found) = search(&mut next, target) {
                        return Some(found);
                    }
                }
            }
        }
        None
    }
    let mut pool: Vec<(i64, Expr)> = numbers
        .iter()
        .map(|&n| (n as i64, Expr::Num(n as i64)))
        .collect();
    search(&mut pool, target as i64).map(|e| e.to_string())
}
