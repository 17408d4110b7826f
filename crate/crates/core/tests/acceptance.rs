//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each.
//! `ACCEPTANCE_ONLY=1,4` selects criteria; `ACCEPTANCE_STRICT=1` makes any
//! failure exit non-zero.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ddlm_core::diffusion::{
    ar_loss, cart_weights_row, diffusion_loss, geometric_pmf, mask_sequence, CartConfig,
    CorruptedBatch, NoiseSchedule,
};
use ddlm_core::harness::{
    compare_init, evaluate_records, gen_data, read_metrics, sweep_quality_speed, train, Checkpoint,
    GenSpec, Layout, Responder, RunConfig, TrainMode,
};
use ddlm_core::model::{
    forward, param_layout, AttentionMode, ModelParams, Transformer, TransformerConfig,
};
use ddlm_core::numerics::{
    backward, compare_gradients, embedding, masked_cross_entropy, no_grad, numeric_gradient, F64x2,
    RandomStream, Real, Tensor,
};
use ddlm_core::par::Execution;
use ddlm_core::sampler::{decode, DecodeConfig, GenerationTemplate, Strategy};
use ddlm_core::tasks::tokenizer::{BOS, MASK, PAD};
use ddlm_core::tasks::{
    gen_countdown, gen_sudoku, read_records, solve_countdown, solve_sudoku, sudoku,
    verify_countdown, verify_sudoku, Record, TaskInstance, TaskKind, Tokenizer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

/// One differentiable test function: a primitive (or the full model loss)
/// contracted with a fixed random projection down to a scalar.
#[derive(Clone)]
struct GradCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    ids: Vec<u32>,
    weights: Vec<f64>,
    proj_seed: u64,
    model: Option<(TransformerConfig, CorruptedBatch, Option<CartConfig>)>,
}

fn project<T: Real>(out: &Tensor<T>, seed: u64) -> ddlm_core::Result<Tensor<T>> {
    let mut rng = RandomStream::new(seed);
    let r: Vec<f64> = (0..out.numel())
        .map(|_| rng.normal() as f32 as f64)
        .collect();
    Ok(out.mul(&Tensor::from_f64(&r, out.shape())?)?.sum())
}

fn eval_case<T: Real>(c: &GradCase, p: &[Tensor<T>]) -> ddlm_core::Result<Tensor<T>> {
    let out = match c.name {
        "matmul" | "matmul_batched" | "matmul_broadcast" => p[0].matmul(&p[1])?,
        "softmax" => p[0].softmax_lastdim()?,
        "rmsnorm" => p[0].rmsnorm(&p[1])?,
        "silu" => p[0].silu(),
        "gelu" => p[0].gelu(),
        "rope" => p[0].rope(10_000.0)?,
        "causal_softmax" => p[0].causal_mask()?.softmax_lastdim()?,
        "embedding" => embedding(&p[0], &c.ids)?,
        "cross_entropy" => return masked_cross_entropy(&p[0], &c.ids, &c.weights),
        "elementwise" => {
            let s = p[0].shape().to_vec();
            let t = p[0].permute(&[2, 0, 1])?.reshape(&[s[2], s[0] * s[1]])?;
            let u = p[1].reshape(&[s[2], s[0] * s[1]])?;
            t.mul(&u)?.add(&t.scale(-0.7))?.add(&u)?
        }
        "model_diffusion" | "model_ar" => {
            let (config, batch, cart) = c.model.as_ref().expect("model case");
            let params = ModelParams::from_tensors(config, p.to_vec())?;
            let logits = forward(&params, config, &batch.xt, config.attention_mode)?;
            return if c.name == "model_ar" {
                ar_loss(&logits, &batch.x0, config.pad_id)
            } else {
                diffusion_loss(
                    &logits,
                    batch,
                    NoiseSchedule::Linear,
                    cart.as_ref(),
                    config.mask_id,
                )
            };
        }
        other => unreachable!("{other}"),
    };
    project(&out, c.proj_seed)
}

fn rand_values(rng: &mut RandomStream, shape: &[usize], scale: f64) -> Vec<f64> {
    (0..shape.iter().product::<usize>())
        .map(|_| (rng.normal() * scale) as f32 as f64)
        .collect()
}

fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = RandomStream::new(seed);
    let mut dim = |lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
    let (m, k, n, b) = (dim(1, 5), dim(1, 6), dim(1, 5), dim(1, 3));
    let (h, l, dh) = (dim(1, 3), dim(2, 6), 2 * dim(1, 3));
    let (r, cdim, v) = (dim(1, 4), dim(2, 7), dim(3, 9));
    let mut rng = RandomStream::new(seed).fork_named("values");
    let case = |name: &'static str, shapes: Vec<Vec<usize>>, rng: &mut RandomStream| {
        let values = shapes.iter().map(|s| rand_values(rng, s, 1.0)).collect();
        GradCase {
            name,
            shapes,
            values,
            ids: Vec::new(),
            weights: Vec::new(),
            proj_seed: rng.next_u64(),
            model: None,
        }
    };
    let mut out = vec![
        case("matmul", vec![vec![m, k], vec![k, n]], &mut rng),
        case(
            "matmul_batched",
            vec![vec![b, m, k], vec![b, k, n]],
            &mut rng,
        ),
        case(
            "matmul_broadcast",
            vec![vec![b, h, m, k], vec![k, n]],
            &mut rng,
        ),
        case("softmax", vec![vec![r, cdim]], &mut rng),
        case("silu", vec![vec![r, cdim]], &mut rng),
        case("gelu", vec![vec![r, cdim]], &mut rng),
        case("rope", vec![vec![b, h, l, dh]], &mut rng),
        case("causal_softmax", vec![vec![h, l, l]], &mut rng),
        case("elementwise", vec![vec![b, m, k], vec![b, m, k]], &mut rng),
    ];
    let mut rms = case("rmsnorm", vec![vec![r, cdim], vec![cdim]], &mut rng);
    rms.values[1]
        .iter_mut()
        .for_each(|g| *g = (1.0 + 0.3 * *g) as f32 as f64);
    out.push(rms);
    let mut emb = case("embedding", vec![vec![v, cdim]], &mut rng);
    emb.ids = (0..l + 2).map(|_| rng.below(v) as u32).collect();
    out.push(emb);
    let mut ce = case("cross_entropy", vec![vec![l, v]], &mut rng);
    ce.ids = (0..l).map(|_| rng.below(v) as u32).collect();
    ce.weights = (0..l)
        .map(|i| if i % 3 == 1 { 0.0 } else { 0.1 + rng.uniform() })
        .collect();
    out.push(ce);

    // full 2-layer model
    for (name, mode) in [
        ("model_diffusion", AttentionMode::Full),
        ("model_ar", AttentionMode::Causal),
    ] {
        let mut config = TransformerConfig::desk(12);
        config.n_layers = 2;
        config.n_heads = 1 + rng.below(2);
        config.d_model = config.n_heads * 2 * (1 + rng.below(2));
        config.d_ff = 4 + rng.below(8);
        config.max_seq_len = 16;
        config.attention_mode = mode;
        let layout = param_layout(&config);
        let shapes: Vec<Vec<usize>> = layout.iter().map(|(_, s)| s.clone()).collect();
        let values = shapes
            .iter()
            .map(|s| {
                let mut vals = rand_values(&mut rng, s, 0.5);
                if s.len() == 1 {
                    vals.iter_mut()
                        .for_each(|g| *g = (1.0 + 0.2 * *g) as f32 as f64);
                }
                vals
            })
            .collect();
        let (bsz, len) = (1 + rng.below(2), 4 + rng.below(5));
        let x0: Vec<Vec<u32>> = (0..bsz)
            .map(|_| {
                let mut row = vec![BOS];
                row.extend((1..len).map(|_| 4 + rng.below(8) as u32));
                row
            })
            .collect();
        let t: Vec<f64> = (0..bsz).map(|_| 0.3 + 0.6 * rng.uniform()).collect();
        let prot: Vec<Vec<bool>> = x0
            .iter()
            .map(|r| (0..r.len()).map(|i| i == 0).collect())
            .collect();
        let mut batch = mask_sequence(&x0, &t, &prot, MASK, &rng.fork(7)).unwrap();
        if mode == AttentionMode::Causal {
            batch.xt = batch.x0.clone();
        } else if batch.masked_count() == 0 {
            batch.xt[0][1] = MASK;
            batch.mask_flags[0][1] = true;
        }
        let cart = (rng.uniform() < 0.5).then(|| CartConfig {
            enabled: true,
            p: 0.2 + 0.6 * rng.uniform(),
            weight_floor: 0.0,
        });
        out.push(GradCase {
            name,
            shapes,
            values,
            ids: Vec::new(),
            weights: Vec::new(),
            proj_seed: 0,
            model: Some((config, batch, cart)),
        });
    }
    out
}

fn params_of<T: Real>(c: &GradCase) -> Vec<Tensor<T>> {
    c.shapes
        .iter()
        .zip(&c.values)
        .map(|(s, v)| {
            Tensor::<f64>::from_f64(v, s)
                .unwrap()
                .cast::<T>()
                .to_parameter()
        })
        .collect()
}

fn analytic<T: Real>(c: &GradCase) -> Vec<Vec<f64>> {
    let params = params_of::<T>(c);
    backward(&eval_case(c, &params).unwrap()).unwrap();
    params
        .iter()
        .map(|p| {
            p.grad().map_or(vec![0.0; p.numel()], |g| {
                g.iter().map(|v| v.as_f64()).collect()
            })
        })
        .collect()
}

/// Backward passes in both precisions against central differences taken in
/// double-double arithmetic, where rounding in the difference quotient is far
/// below the tolerances. Case values are f32-representable, so all three
/// evaluate the same function at the same point.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst32 = (0.0f64, String::new());
    let mut worst64 = (0.0f64, String::new());
    let (mut checks, mut elements, mut over32) = (0usize, 0usize, 0usize);
    // among 32-bit elements over tolerance, the largest |g| / max |g| of its case
    let mut over32_scale = 0.0f64;
    for config in 0..20u64 {
        for case in grad_cases(1000 + config) {
            let reference = numeric_gradient(
                &|p: &[Tensor<F64x2>]| eval_case(&case, p),
                &params_of(&case),
                1e-7,
            )
            .unwrap();
            let a32 = analytic::<f32>(&case);
            let r64 = compare_gradients(&analytic::<f64>(&case), &reference);
            let r32 = compare_gradients(&a32, &reference);
            checks += 1;
            elements += r32.elements;
            let gmax = reference
                .iter()
                .flatten()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, n) in a32.iter().flatten().zip(reference.iter().flatten()) {
                if (a - n).abs() / a.abs().max(n.abs()).max(1e-8) >= 1e-3 {
                    over32 += 1;
                    over32_scale = over32_scale.max(n.abs() / gmax);
                }
            }
            if r64.max_rel_error >= worst64.0 {
                worst64 = (r64.max_rel_error, format!("{} cfg {config}", case.name));
            }
            if r32.max_rel_error >= worst32.0 {
                worst32 = (r32.max_rel_error, format!("{} cfg {config}", case.name));
            }
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst32.0 < 1e-3 && worst64.0 < 1e-5 && elapsed < Duration::from_secs(120),
        format!(
            "{checks} checks, {elements} gradient elements over 20 configs; 64-bit max rel err {:.2e} ({}); \
             32-bit max rel err {:.2e} ({}), {over32} elements at or over 1e-3, all with |g| <= {:.1e} x the case's largest; {:.1}s",
            worst64.0,
            worst64.1,
            worst32.0,
            worst32.1,
            over32_scale,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut config = TransformerConfig::desk(Tokenizer::new().vocab_size());
    config.d_model = 32;
    config.n_layers = 2;
    config.d_ff = 64;
    config.max_seq_len = 8;
    config.attention_mode = AttentionMode::Full;
    let model = Transformer::<f64>::init(config, 11).unwrap();
    let token = Tokenizer::new().encode("7").unwrap()[0];
    let x0 = vec![vec![BOS, token]];
    let prot = vec![vec![true, false]];

    let direct = no_grad(|| {
        let logits = model.forward(&[vec![BOS, MASK]]).unwrap();
        let v = model.config.vocab_size;
        masked_cross_entropy(&logits.reshape(&[2, v]).unwrap(), &[token, 0], &[1.0, 0.0])
            .unwrap()
            .item()
    });

    let draws = 10_000u64;
    let root = RandomStream::new(0).fork_named("monte-carlo");
    let mut total = 0.0;
    for i in 0..draws {
        let draw = root.fork(i);
        let t = draw.fork_named("t").uniform();
        let batch = mask_sequence(&x0, &[t], &prot, MASK, &draw.fork_named("mask")).unwrap();
        let loss = no_grad(|| {
            let logits = model.forward(&batch.xt).unwrap();
            diffusion_loss(&logits, &batch, NoiseSchedule::Linear, None, MASK)
                .unwrap()
                .item()
        });
        total += loss;
    }
    let mean = total / draws as f64;
    let rel = (mean - direct).abs() / direct;
    let elapsed = started.elapsed();
    outcome(
        rel < 0.02 && elapsed < Duration::from_secs(60),
        format!(
            "mean loss {mean:.5} vs direct cross-entropy {direct:.5} over {draws} draws: rel diff {:.2}%; {:.1}s",
            rel * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = RandomStream::new(0).fork_named("cart");
    let mut failures: Vec<String> = Vec::new();
    let mut below_resolution = 0usize;
    let cases = 10_000;
    for case in 0..cases {
        let l = 2 + rng.below(63);
        // p = 1 is excluded: Geo(1, k > 0) = 0, so a distant clean token adds nothing
        let p = loop {
            let p = rng.uniform();
            if p > 0.0 {
                break p;
            }
        };
        let cart = CartConfig {
            enabled: true,
            p,
            weight_floor: 0.0,
        };
        let density = rng.uniform();
        let xt: Vec<u32> = (0..l)
            .map(|_| if rng.uniform() < density { 10 } else { MASK })
            .collect();
        let w = cart_weights_row(&xt, MASK, &cart);

        if w.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            failures.push(format!("case {case}: weight outside [0, 1]"));
        }

        let masked: Vec<usize> = (0..l).filter(|&i| xt[i] == MASK).collect();
        if masked.len() >= 2 {
            let n = masked[rng.below(masked.len())];
            let j = loop {
                let j = masked[rng.below(masked.len())];
                if j != n {
                    break j;
                }
            };
            let mut more = xt.clone();
            more[j] = 10;
            let w2 = cart_weights_row(&more, MASK, &cart)[n];
            let increment = 0.5 * geometric_pmf(p, n.abs_diff(j) as i64 - 1).unwrap();
            if !(w2 > w[n]) {
                if increment < w[n] * f64::EPSILON {
                    below_resolution += 1;
                } else {
                    failures.push(format!(
                        "case {case}: adding clean token at {j} left w[{n}] at {}",
                        w[n]
                    ));
                }
            }
        }

        // one clean token moving away from a masked position
        let n = rng.below(l);
        let mut prev = f64::INFINITY;
        let mut dists: Vec<usize> = (0..l).filter(|&j| j > n).collect();
        if dists.is_empty() {
            dists = (0..n).rev().collect();
        }
        for &j in &dists {
            let mut row = vec![MASK; l];
            row[j] = 10;
            let wj = cart_weights_row(&row, MASK, &cart)[n];
            if wj > prev {
                failures.push(format!("case {case}: weight grew with distance"));
            }
            prev = wj;
        }

        let all_masked = vec![MASK; l];
        if cart_weights_row(&all_masked, MASK, &cart)
            .iter()
            .any(|&w| w != 0.0)
        {
            failures.push(format!("case {case}: fully masked row has nonzero weight"));
        }
    }
    let elapsed = started.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{cases} cases, {} violations{}; {below_resolution} strict-increase checks had an increment below f64 resolution of w; {:.1}s",
            failures.len(),
            failures.first().map_or(String::new(), |f| format!(" (first: {f})")),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let n = 10_000usize;
    let mut x0 = vec![BOS];
    x0.extend((0..n).map(|i| 4 + (i % 50) as u32));
    let prot: Vec<bool> = (0..=n).map(|i| i == 0).collect();
    let root = RandomStream::new(0).fork_named("masking");
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, t) in [0.1, 0.3, 0.7].into_iter().enumerate() {
        let b = mask_sequence(
            &[x0.clone()],
            &[t],
            &[prot.clone()],
            MASK,
            &root.fork(i as u64),
        )
        .unwrap();
        let count = b.mask_flags[0].iter().filter(|&&m| m).count() as f64;
        let sd = (n as f64 * t * (1.0 - t)).sqrt();
        let z = (count - n as f64 * t) / sd;
        pass &= z.abs() <= 3.0 && !b.mask_flags[0][0];
        parts.push(format!("t={t}: {count} masked (z={z:+.2})"));
    }
    let zero = mask_sequence(&[x0.clone()], &[0.0], &[prot.clone()], MASK, &root).unwrap();
    let one = mask_sequence(&[x0.clone()], &[1.0], &[prot.clone()], MASK, &root).unwrap();
    let exact =
        zero.xt[0] == x0 && one.xt[0][0] == BOS && one.xt[0][1..].iter().all(|&t| t == MASK);
    pass &= exact;
    parts.push(format!("t=0/t=1 exact: {exact}"));
    outcome(pass, parts.join(", "))
}

// ---------------------------------------------------------------- 8

/// Exact rational evaluation, written independently of the crate's verifier.
mod reference {
    #[derive(Clone, Copy, Debug, PartialEq)]
    pub struct Q(pub i128, pub i128);

    fn gcd(a: i128, b: i128) -> i128 {
        if b == 0 {
            a.abs()
        } else {
            gcd(b, a % b)
        }
    }

    impl Q {
        fn norm(n: i128, d: i128) -> Q {
            let g = gcd(n, d).max(1);
            let s = if d < 0 { -1 } else { 1 };
            Q(s * n / g, s * d / g)
        }
    }

    pub struct Eval {
        chars: Vec<char>,
        pos: usize,
        pub literals: Vec<i128>,
        pub exact_division: bool,
    }

    impl Eval {
        fn peek(&self) -> Option<char> {
            self.chars.get(self.pos).copied()
        }

        fn expr(&mut self) -> Option<Q> {
            let mut v = self.term()?;
            while let Some(c @ ('+' | '-')) = self.peek() {
                self.pos += 1;
                let r = self.term()?;
                v = if c == '+' {
                    Q::norm(v.0 * r.1 + r.0 * v.1, v.1 * r.1)
                } else {
                    Q::norm(v.0 * r.1 - r.0 * v.1, v.1 * r.1)
                };
            }
            Some(v)
        }

        fn term(&mut self) -> Option<Q> {
            let mut v = self.atom()?;
            while let Some(c @ ('*' | '/')) = self.peek() {
                self.pos += 1;
                let r = self.atom()?;
                v = if c == '*' {
                    Q::norm(v.0 * r.0, v.1 * r.1)
                } else {
                    if r.0 == 0 {
                        return None;
                    }
                    let q = Q::norm(v.0 * r.1, v.1 * r.0);
                    if q.1 != 1 {
                        self.exact_division = false;
                    }
                    q
                };
            }
            Some(v)
        }

        fn atom(&mut self) -> Option<Q> {
            match self.peek()? {
                '(' => {
                    self.pos += 1;
                    let v = self.expr()?;
                    (self.peek()? == ')').then_some(())?;
                    self.pos += 1;
                    Some(v)
                }
                c if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                        self.pos += 1;
                    }
                    let s: String = self.chars[start..self.pos].iter().collect();
                    let n: i128 = s.parse().ok()?;
                    self.literals.push(n);
                    Some(Q(n, 1))
                }
                _ => None,
            }
        }
    }

    /// Whether `answer` is a correct Countdown solution, decided from first
    /// principles: full parse, exact value, every division exact, literals
    /// drawn from the numbers without reuse.
    pub fn countdown_ok(numbers: &[u64], target: u64, answer: &str) -> bool {
        let mut e = Eval {
            chars: answer.chars().filter(|c| *c != ' ').collect(),
            pos: 0,
            literals: Vec::new(),
            exact_division: true,
        };
        let Some(v) = e.expr() else { return false };
        if e.pos != e.chars.len() || !e.exact_division || v != Q(target as i128, 1) {
            return false;
        }
        let mut pool: Vec<i128> = numbers.iter().map(|&n| n as i128).collect();
        e.literals
            .iter()
            .all(|l| match pool.iter().position(|p| p == l) {
                Some(i) => {
                    pool.swap_remove(i);
                    true
                }
                None => false,
            })
    }

    pub fn sudoku_ok(givens: &[u8; 16], answer: &str) -> bool {
        let rows: Vec<&str> = answer.split('|').collect();
        if rows.len() != 4 || rows.iter().any(|r| r.chars().count() != 4) {
            return false;
        }
        let mut g = [0u8; 16];
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                match ch.to_digit(10) {
                    Some(d @ 1..=4) => g[r * 4 + c] = d as u8,
                    _ => return false,
                }
            }
        }
        if givens.iter().zip(&g).any(|(&a, &b)| a != 0 && a != b) {
            return false;
        }
        let unit = |cells: [usize; 4]| {
            let mut s: Vec<u8> = cells.iter().map(|&i| g[i]).collect();
            s.sort_unstable();
            s == [1, 2, 3, 4]
        };
        (0..4).all(|k| {
            let (br, bc) = (k / 2 * 2, k % 2 * 2);
            unit([k * 4, k * 4 + 1, k * 4 + 2, k * 4 + 3])
                && unit([k, 4 + k, 8 + k, 12 + k])
                && unit([
                    br * 4 + bc,
                    br * 4 + bc + 1,
                    (br + 1) * 4 + bc,
                    (br + 1) * 4 + bc + 1,
                ])
        })
    }
}

fn corrupt_text(rng: &mut RandomStream, text: &str, alphabet: &[char]) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    match rng.below(4) {
        0 if !chars.is_empty() => {
            let i = rng.below(chars.len());
            chars[i] = alphabet[rng.below(alphabet.len())];
        }
        1 if chars.len() >= 2 => {
            let (i, j) = (rng.below(chars.len()), rng.below(chars.len()));
            chars.swap(i, j);
        }
        2 if !chars.is_empty() => {
            chars.remove(rng.below(chars.len()));
        }
        _ => {
            let i = rng.below(chars.len() + 1);
            chars.insert(i, alphabet[rng.below(alphabet.len())]);
        }
    }
    chars.into_iter().collect()
}

fn criterion_8() -> Outcome {
    let mut rng = RandomStream::new(0).fork_named("oracles");
    let mut oracle_total = 0usize;
    let mut oracle_ok = 0usize;
    let mut countdowns = Vec::new();
    for i in 0..500 {
        let n = 2 + i % 4;
        let inst = gen_countdown(&mut rng, n, [10, 20, 50, 100][i % 4]).unwrap();
        let solved = solve_countdown(&inst.numbers, inst.target).expect("solvable");
        for answer in [&inst.oracle_solution, &solved] {
            oracle_total += 1;
            oracle_ok += verify_countdown(&inst, answer) as usize;
        }
        countdowns.push(inst);
    }
    let mut sudokus = Vec::new();
    for i in 0..500 {
        let inst = gen_sudoku(&mut rng, 4 + i % 9).unwrap();
        for g in solve_sudoku(&inst.givens, 4).iter().chain([&inst.solution]) {
            oracle_total += 1;
            oracle_ok += verify_sudoku(&inst, &sudoku::render_grid(g)) as usize;
        }
        sudokus.push(inst);
    }

    let cd_alphabet: Vec<char> = TaskKind::Countdown.response_alphabet().chars().collect();
    let sd_alphabet: Vec<char> = TaskKind::Sudoku.response_alphabet().chars().collect();
    let mut fuzz = 0usize;
    let mut rejected = 0usize;
    let mut skipped_still_valid = 0usize;
    let mut kinds = HashMap::new();
    while fuzz < 1000 {
        if fuzz % 2 == 0 {
            let inst = &countdowns[rng.below(countdowns.len())];
            let bad = corrupt_text(&mut rng, &inst.oracle_solution, &cd_alphabet);
            if reference::countdown_ok(&inst.numbers, inst.target, &bad) {
                skipped_still_valid += 1;
                continue;
            }
            *kinds.entry("countdown").or_insert(0) += 1;
            rejected += (!verify_countdown(inst, &bad)) as usize;
        } else {
            let inst = &sudokus[rng.below(sudokus.len())];
            let bad = if rng.below(2) == 0 {
                corrupt_text(&mut rng, &inst.response_text(), &sd_alphabet)
            } else {
                let mut g = inst.solution;
                let i = rng.below(16);
                g[i] = g[i] % 4 + 1;
                sudoku::render_grid(&g)
            };
            if reference::sudoku_ok(&inst.givens, &bad) {
                skipped_still_valid += 1;
                continue;
            }
            *kinds.entry("sudoku").or_insert(0) += 1;
            rejected += (!verify_sudoku(inst, &bad)) as usize;
        }
        fuzz += 1;
    }
    outcome(
        oracle_ok == oracle_total && rejected == fuzz,
        format!(
            "oracle solutions verified {oracle_ok}/{oracle_total}; corrupted rejected {rejected}/{fuzz} ({} countdown, {} sudoku; {skipped_still_valid} mutations still valid and excluded)",
            kinds.get("countdown").unwrap_or(&0),
            kinds.get("sudoku").unwrap_or(&0)
        ),
    )
}

// ---------------------------------------------------------------- 9

fn tiny_run(dir: &Path, data: &Corpus, out: &str) -> RunConfig {
    let mut c = RunConfig::countdown_default(
        TrainMode::DiffusionPretrain,
        data.train.clone(),
        Some(data.valid.clone()),
    );
    c.model.d_model = 32;
    c.model.d_ff = 64;
    c.total_steps = 60;
    c.log_interval = 10;
    c.heldout_size = 32;
    c.optim.warmup_steps = 10;
    c.cart.enabled = true;
    c.seed = 5;
    train(&c, &dir.join(out)).unwrap();
    c
}

fn criterion_9(dir: &Path, data: &Corpus) -> Outcome {
    tiny_run(dir, data, "det_a");
    tiny_run(dir, data, "det_b");
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    let csv_same = read(dir.join("det_a/metrics.csv")) == read(dir.join("det_b/metrics.csv"));
    let ckpt_same = read(dir.join("det_a/final.ckpt")) == read(dir.join("det_b/final.ckpt"));
    let rows = read_metrics(&dir.join("det_a/metrics.csv")).unwrap().len();

    let original = read(dir.join("det_a/final.ckpt"));
    let loaded = Checkpoint::<f32>::load(&dir.join("det_a/final.ckpt")).unwrap();
    loaded.save(&dir.join("resaved.ckpt")).unwrap();
    let resave_same = read(dir.join("resaved.ckpt")) == original;
    outcome(
        csv_same && ckpt_same && resave_same,
        format!(
            "metrics CSVs ({rows} rows) identical: {csv_same}; final checkpoints identical: {ckpt_same}; save->load->save identical: {resave_same}"
        ),
    )
}

// ---------------------------------------------------------------- 5, 6, 7

struct Corpus {
    train: PathBuf,
    valid: PathBuf,
    test: PathBuf,
}

fn make_corpus(dir: &Path) -> Corpus {
    let c = Corpus {
        train: dir.join("train.jsonl"),
        valid: dir.join("valid.jsonl"),
        test: dir.join("test.jsonl"),
    };
    let spec = GenSpec {
        task: TaskKind::Countdown,
        count: 12_000,
        n_numbers: 3,
        value_max: 20,
        clue_count: 0,
        seed: 1,
    };
    gen_data(
        &spec,
        &[0.9, 0.05, 0.05],
        &[c.train.clone(), c.valid.clone(), c.test.clone()],
    )
    .unwrap();
    c
}

const COMPARE_STEPS: u64 = 5000;
const AR_STEPS: u64 = 3000;
const SFT_STEPS: u64 = 3000;

fn base_config(data: &Corpus, mode: TrainMode, steps: u64) -> RunConfig {
    let mut c = RunConfig::countdown_default(mode, data.train.clone(), Some(data.valid.clone()));
    c.total_steps = steps;
    c.log_interval = 100;
    c.seed = 0;
    c.normalized()
}

struct Trained {
    compare: Outcome,
    sft: Checkpoint<f32>,
}

fn train_pipeline(dir: &Path, data: &Corpus) -> Trained {
    let started = Instant::now();
    let ar = train(
        &base_config(data, TrainMode::ArPretrain, AR_STEPS),
        &dir.join("ar"),
    )
    .unwrap();
    let scratch = base_config(data, TrainMode::DiffusionPretrain, COMPARE_STEPS);
    let ar_init = RunConfig {
        init_checkpoint: Some(ar.final_checkpoint.clone()),
        ..scratch.clone()
    };
    let summary = compare_init(&ar_init, &scratch, &dir.join("compare")).unwrap();
    let elapsed = started.elapsed();
    let compare = outcome(
        summary.fraction >= 0.9 && elapsed < Duration::from_secs(3600),
        format!(
            "AR-init loss <= scratch at {}/{} post-warmup log points ({:.1}%); held-out: {}/{}; first logged loss {:.3} vs {:.3}; {:.0}s incl. {AR_STEPS}-step AR pretraining",
            summary.ar_init_wins,
            summary.points,
            summary.fraction * 100.0,
            summary.heldout_wins,
            summary.heldout_points,
            summary.ar_init_first_loss,
            summary.scratch_first_loss,
            elapsed.as_secs_f64()
        ),
    );
    let mut sft = base_config(data, TrainMode::Sft, SFT_STEPS);
    sft.init_checkpoint = Some(dir.join("compare/ar_init/final.ckpt"));
    let out = train(&sft, &dir.join("sft")).unwrap();
    Trained {
        compare,
        sft: Checkpoint::load(&out.final_checkpoint).unwrap(),
    }
}

/// Greedy left-to-right filling, one forward pass per free position.
fn sequential_greedy(model: &Transformer<f32>, template: &GenerationTemplate) -> Vec<u32> {
    let mut x = template.tokens.clone();
    let v = model.config.vocab_size;
    for n in 0..x.len() {
        if template.fixed_flags[n] {
            continue;
        }
        let logits = no_grad(|| model.forward(std::slice::from_ref(&x))).unwrap();
        let row = &logits.data()[(n - 1) * v..n * v];
        let mut best = (u32::MAX, f32::NEG_INFINITY);
        for (id, &z) in row.iter().enumerate() {
            let id = id as u32;
            if id == MASK || id == BOS || id == PAD {
                continue;
            }
            if z > best.1 {
                best = (id, z);
            }
        }
        x[n] = best.0;
    }
    x
}

fn criterion_5(ckpt: &Checkpoint<f32>, data: &Corpus) -> Outcome {
    let model = ckpt.model();
    let layout = Layout::of(&ckpt.meta.run);
    let tk = Tokenizer::new();
    let records = read_records(&data.test).unwrap();
    let mut rng = RandomStream::new(0).fork_named("templates");

    let random_template = |rng: &mut RandomStream| -> GenerationTemplate {
        let rec = &records[rng.below(records.len())];
        let prompt = layout.encode_prompt(&tk, &rec.prompt).unwrap();
        let response = layout.encode_response(&tk, &rec.response).unwrap();
        let mut tokens = vec![BOS];
        tokens.extend(&prompt);
        tokens.extend(&response);
        let mut fixed = vec![true; tokens.len()];
        let keep = rng.uniform() * 0.7;
        let start = layout.response_start();
        for n in start..tokens.len() {
            if rng.uniform() >= keep {
                tokens[n] = MASK;
                fixed[n] = false;
            }
        }
        if fixed[start..].iter().all(|&f| f) {
            tokens[start] = MASK;
            fixed[start] = false;
        }
        GenerationTemplate::new(tokens, fixed).unwrap()
    };

    let mut equal = 0;
    for _ in 0..100 {
        let t = random_template(&mut rng);
        let free = t.free_positions().len();
        let cfg = DecodeConfig {
            steps: free,
            strategy: Strategy::LeftToRight,
            temperature: 0.0,
            seed: rng.next_u64(),
        };
        let out = decode(&model, &t, &cfg).unwrap();
        equal +=
            (out.tokens == sequential_greedy(&model, &t) && out.forward_passes == free) as usize;
    }

    let mut preserved = 0;
    for i in 0..1000 {
        let t = random_template(&mut rng);
        let cfg = DecodeConfig {
            steps: 1 + rng.below(16),
            strategy: Strategy::ALL[i % 4],
            temperature: [0.0, 0.5, 1.0][i % 3],
            seed: rng.next_u64(),
        };
        let out = decode(&model, &t, &cfg).unwrap();
        let fixed_ok =
            |seq: &[u32]| (0..t.len()).all(|n| !t.fixed_flags[n] || seq[n] == t.tokens[n]);
        let ok = fixed_ok(&out.tokens)
            && out.trace.iter().all(|s| fixed_ok(&s.sequence))
            && !out.tokens.contains(&MASK);
        preserved += ok as usize;
    }
    outcome(
        equal == 100 && preserved == 1000,
        format!("greedy-loop equivalence {equal}/100 templates; fixed positions preserved in {preserved}/1000 infilling decodes"),
    )
}

fn criterion_7(ckpt: &Checkpoint<f32>, data: &Corpus) -> Outcome {
    let started = Instant::now();
    let records = read_records(&data.test).unwrap();
    let n = 200;
    let ks = [1usize, 2, 4, 8, 16];
    let seeds = [0u64, 1, 2];
    let results = sweep_quality_speed(
        ckpt,
        &records,
        n,
        &ks,
        &seeds,
        Strategy::MaxConfidence,
        0.0,
        Execution::Parallel,
    )
    .unwrap();

    let passes_exact = results.iter().all(|(row, rep)| {
        rep.passes_per_instance.len() == n && rep.passes_per_instance.iter().all(|&p| p == row.k)
    });
    let mean_at = |k: usize| {
        let rates: Vec<f64> = results
            .iter()
            .filter(|(r, _)| r.k == k)
            .map(|(r, _)| r.solve_rate)
            .collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    };

    let layout = Layout::of(&ckpt.meta.run);
    let subset: &[Record] = &records[..n];
    let mut random_solved = 0usize;
    let random_seeds = 100u64;
    for s in 0..random_seeds {
        let rep = evaluate_records(
            Responder::Random { seed: 1000 + s },
            TaskKind::Countdown,
            &layout,
            subset,
            Execution::Parallel,
        )
        .unwrap();
        random_solved += rep.solved;
    }
    // one-sided 95% Wilson upper bound, so an unlucky zero count is not a free pass
    let draws = (random_seeds as usize * n) as f64;
    let (p_hat, z) = (random_solved as f64 / draws, 1.645f64);
    let baseline = (p_hat
        + z * z / (2.0 * draws)
        + z * (p_hat * (1.0 - p_hat) / draws + z * z / (4.0 * draws * draws)).sqrt())
        / (1.0 + z * z / draws);
    let oracle = evaluate_records(
        Responder::Oracle,
        TaskKind::Countdown,
        &layout,
        subset,
        Execution::Parallel,
    )
    .unwrap()
    .solve_rate;

    let rates: Vec<String> = ks
        .iter()
        .map(|&k| format!("K={k}:{:.3}", mean_at(k)))
        .collect();
    let trend = mean_at(16) >= mean_at(1);
    let above_baseline = ks.iter().all(|&k| mean_at(k) >= 20.0 * baseline);
    outcome(
        passes_exact && trend && above_baseline && oracle == 1.0,
        format!(
            "mean solve rate {}; passes exactly K: {passes_exact}; K=16 >= K=1: {trend}; random solves {random_solved}/{} (95% upper bound {baseline:.5}), all K >= 20x bound: {above_baseline}; oracle self-test {oracle}; {:.0}s",
            rates.join(" "),
            random_seeds as usize * n,
            started.elapsed().as_secs_f64()
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    // `cargo test -- --list` and filtered runs expect no side effects
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));

    let dir = tempfile::tempdir().expect("temp dir");
    let needs_data = [5, 6, 7, 9].into_iter().any(wanted);
    let data = needs_data.then(|| make_corpus(dir.path()));
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut run = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            let o = f();
            println!(
                "criterion {n} [{}] {name}: {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push((n, o));
        }
    };

    run(1, "gradient soundness", &mut criterion_1);
    run(2, "weighted-loss Monte Carlo identity", &mut criterion_2);
    run(3, "CART weight properties", &mut criterion_3);
    run(4, "forward-process statistics", &mut criterion_4);
    run(8, "planning-task oracles", &mut criterion_8);
    if let Some(data) = &data {
        run(9, "determinism and persistence", &mut || {
            criterion_9(dir.path(), data)
        });
        if wanted(5) || wanted(6) || wanted(7) {
            let trained = train_pipeline(dir.path(), data);
            let mut compare = Some(trained.compare);
            run(6, "AR-init vs scratch", &mut || compare.take().unwrap());
            run(5, "sampler oracle equivalence", &mut || {
                criterion_5(&trained.sft, data)
            });
            run(7, "quality-speed sweep", &mut || {
                criterion_7(&trained.sft, data)
            });
        }
    }

    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, o)| !o.pass)
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" (criteria {failed:?})")
        }
    );
    // failures are reported above; they fail the process only when asked to
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
