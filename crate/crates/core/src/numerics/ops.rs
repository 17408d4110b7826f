use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Epsilon inside the RMS normalization square root.
pub const RMSNORM_EPS: f64 = 1e-6;

/// Additive score for disallowed attention edges. Large and finite so the
/// softmax stays well defined.
const MASKED_SCORE: f64 = -1e9;

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn last_dim<T: Real>(op: &str, x: &Tensor<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(Error::Shape(format!(
            "{op}: needs a non-empty last dimension, got {:?}",
            x.shape()
        ))),
    }
}

// c[m,n] += a[m,k] * b[k,n]
fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// da[m,k] += dc[m,n] * b[k,n]^T
fn gemm_nt_acc<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (p, dv) in da_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in dc_row.iter().zip(b_row) {
                acc += x * y;
            }
            *dv += acc;
        }
    }
}

// db[k,n] += a[m,k]^T * dc[m,n]
fn gemm_tn_acc<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dv, &g) in db_row.iter_mut().zip(dc_row) {
                *dv += av * g;
            }
        }
    }
}

/// Batch-broadcast bookkeeping for `matmul`.
struct BatchPlan {
    out_batch: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
    a_identity: bool,
    b_identity: bool,
}

fn plan_batches(a_batch: &[usize], b_batch: &[usize]) -> Option<BatchPlan> {
    let rank = a_batch.len().max(b_batch.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a_batch), pad(b_batch));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        out.push(match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        });
    }
    let count: usize = out.iter().product();
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let mut a_offsets = Vec::with_capacity(count);
    let mut b_offsets = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        a_offsets.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
        b_offsets.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let a_identity = a_offsets.iter().enumerate().all(|(i, &o)| i == o);
    let b_identity = b_offsets.iter().enumerate().all(|(i, &o)| i == o);
    Some(BatchPlan {
        out_batch: out,
        a_offsets,
        b_offsets,
        a_identity,
        b_identity,
    })
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::custom(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::custom(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::custom(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|&g| g * c).collect())]),
        )
        .expect("shape preserved")
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |a, &b| a + b);
        let n = self.numel();
        Tensor::custom(
            "sum",
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
        .expect("scalar")
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        let sig: Vec<T> = self
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let data = self.data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        let x = self.clone();
        Tensor::custom(
            "silu",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(&sig)
                    .map(|((&g, &x), &s)| g * s * (T::one() + x * (T::one() - s)))
                    .collect();
                vec![Some(gx)]
            }),
        )
        .expect("shape preserved")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        let three = T::lit(3.0);
        let inner = move |x: T| c * (x + k * x * x * x);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + inner(x).tanh()))
            .collect();
        let x = self.clone();
        Tensor::custom(
            "gelu",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| {
                        let th = inner(x).tanh();
                        let d_inner = c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + th) + half * x * (T::one() - th * th) * d_inner)
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
        .expect("shape preserved")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape()
            )));
        }
        Tensor::custom(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Shape(format!(
                "permute: {axes:?} is not a permutation of {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
        }
        // input offset for each output element, in output order
        let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            index.push(
                idx.iter()
                    .zip(&gather_strides)
                    .map(|(i, s)| i * s)
                    .sum::<usize>(),
            );
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let src = self.data();
        let data = index.iter().map(|&i| src[i]).collect();
        Tensor::custom(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); n];
                for (o, &i) in index.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::Shape(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }

        // [.., m, k] x [k, n]: fold the batch into the row axis.
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            let mut c = vec![T::zero(); rows * n];
            gemm_acc(self.data(), other.data(), &mut c, rows, k, n);
            let (a, b) = (self.clone(), other.clone());
            return Tensor::custom(
                "matmul",
                c,
                out_shape,
                vec![self.clone(), other.clone()],
                Box::new(move |g| {
                    let da = a.requires_grad().then(|| {
                        let mut da = vec![T::zero(); rows * k];
                        gemm_nt_acc(g, b.data(), &mut da, rows, k, n);
                        da
                    });
                    let db = b.requires_grad().then(|| {
                        let mut db = vec![T::zero(); k * n];
                        gemm_tn_acc(a.data(), g, &mut db, rows, k, n);
                        db
                    });
                    vec![da, db]
                }),
            );
        }

        let plan = plan_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).ok_or_else(mismatch)?;
        let count = plan.a_offsets.len();
        let mut out_shape = plan.out_batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let (mk, kn, mn) = (m * k, k * n, m * n);
        let mut c = vec![T::zero(); count * mn];
        {
            let (ad, bd) = (self.data(), other.data());
            let (ao, bo) = (&plan.a_offsets, &plan.b_offsets);
            par::for_each_chunk_mut(Execution::Parallel, &mut c, mn, |i, chunk| {
                let a = &ad[ao[i] * mk..(ao[i] + 1) * mk];
                let b = &bd[bo[i] * kn..(bo[i] + 1) * kn];
                gemm_acc(a, b, chunk, m, k, n);
            });
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::custom(
            "matmul",
            c,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (ad, bd) = (a.data(), b.data());
                let da = a.requires_grad().then(|| {
                    let mut da = vec![T::zero(); a.numel()];
                    if plan.a_identity {
                        par::for_each_chunk_mut(
                            Execution::Parallel,
                            &mut da,
                            mk.max(1),
                            |i, chunk| {
                                let bo = plan.b_offsets[i];
                                gemm_nt_acc(
                                    &g[i * mn..(i + 1) * mn],
                                    &bd[bo * kn..(bo + 1) * kn],
                                    chunk,
                                    m,
                                    k,
                                    n,
                                );
                            },
                        );
                    } else {
                        for i in 0..count {
                            let (ao, bo) = (plan.a_offsets[i], plan.b_offsets[i]);
                            gemm_nt_acc(
                                &g[i * mn..(i + 1) * mn],
                                &bd[bo * kn..(bo + 1) * kn],
                                &mut da[ao * mk..(ao + 1) * mk],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    da
                });
                let db = b.requires_grad().then(|| {
                    let mut db = vec![T::zero(); b.numel()];
                    if plan.b_identity {
                        par::for_each_chunk_mut(
                            Execution::Parallel,
                            &mut db,
                            kn.max(1),
                            |i, chunk| {
                                let ao = plan.a_offsets[i];
                                gemm_tn_acc(
                                    &ad[ao * mk..(ao + 1) * mk],
                                    &g[i * mn..(i + 1) * mn],
                                    chunk,
                                    m,
                                    k,
                                    n,
                                );
                            },
                        );
                    } else {
                        for i in 0..count {
                            let (ao, bo) = (plan.a_offsets[i], plan.b_offsets[i]);
                            gemm_tn_acc(
                                &ad[ao * mk..(ao + 1) * mk],
                                &g[i * mn..(i + 1) * mn],
                                &mut db[bo * kn..(bo + 1) * kn],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        )
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let d = last_dim("softmax", self)?;
        if let Some(bad) = self.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("softmax: non-finite input {bad}")));
        }
        let mut y = self.to_vec();
        for row in y.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = y.clone();
        Tensor::custom(
            "softmax",
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); out.len()];
                for ((gx, y), g) in gx.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d)) {
                    let dot = y.iter().zip(g).fold(T::zero(), |a, (&y, &g)| a + y * g);
                    for ((o, &y), &g) in gx.iter_mut().zip(y).zip(g) {
                        *o = y * (g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `gain * x / sqrt(mean(x^2) + eps)` over the last axis.
    pub fn rmsnorm(&self, gain: &Tensor<T>) -> Result<Tensor<T>> {
        let d = last_dim("rmsnorm", self)?;
        if gain.shape() != [d] {
            return Err(Error::Shape(format!(
                "rmsnorm: gain {:?} does not match input {:?}",
                gain.shape(),
                self.shape()
            )));
        }
        let eps = T::lit(RMSNORM_EPS);
        let df = T::lit(d as f64);
        let inv: Vec<T> = self
            .data()
            .chunks(d)
            .map(|row| {
                let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / df;
                T::one() / (ms + eps).sqrt()
            })
            .collect();
        let gd = gain.data();
        let mut y = Vec::with_capacity(self.numel());
        for (row, &r) in self.data().chunks(d).zip(&inv) {
            y.extend(row.iter().zip(gd).map(|(&x, &g)| g * x * r));
        }
        let (x, w) = (self.clone(), gain.clone());
        Tensor::custom(
            "rmsnorm",
            y,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone()],
            Box::new(move |g| {
                let wd = w.data();
                let mut gx = vec![T::zero(); x.numel()];
                let mut gw = vec![T::zero(); d];
                for (((row, gr), out), &r) in x
                    .data()
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .zip(&inv)
                {
                    let mut dot = T::zero();
                    for j in 0..d {
                        gw[j] += gr[j] * row[j] * r;
                        dot += gr[j] * wd[j] * row[j];
                    }
                    let coef = r * r * r * dot / df;
                    for j in 0..d {
                        out[j] = r * wd[j] * gr[j] - row[j] * coef;
                    }
                }
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// Mask the strict upper triangle of the trailing `[L, L]` score block so
    /// row `i` only sees columns `j <= i`.
    pub fn causal_mask(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::Shape(format!(
                "causal_mask: needs square trailing axes, got {s:?}"
            )));
        }
        let l = s[s.len() - 1];
        let neg = T::lit(MASKED_SCORE);
        let mut y = self.to_vec();
        for block in y.chunks_mut(l * l) {
            for i in 0..l {
                for j in i + 1..l {
                    block[i * l + j] = neg;
                }
            }
        }
        Tensor::custom(
            "causal_mask",
            y,
            s.to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = g.to_vec();
                for block in gx.chunks_mut(l * l) {
                    for i in 0..l {
                        for j in i + 1..l {
                            block[i * l + j] = T::zero();
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Rotary position encoding over a `[.., L, head_dim]` tensor; position is
    /// the second-to-last axis, rotation pairs are `(i, i + head_dim/2)`.
    pub fn rope(&self, base: f64) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 1] % 2 != 0 {
            return Err(Error::Shape(format!(
                "rope: needs [.., L, even head_dim], got {s:?}"
            )));
        }
        let (l, dh) = (s[s.len() - 2], s[s.len() - 1]);
        let half = dh / 2;
        let mut cos = Vec::with_capacity(l * half);
        let mut sin = Vec::with_capacity(l * half);
        for pos in 0..l {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / dh as f64);
                let angle = pos as f64 * theta;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        let rotate = move |src: &[T], dst: &mut [T], dir: T| {
            for (blk_src, blk_dst) in src.chunks(l * dh).zip(dst.chunks_mut(l * dh)) {
                for pos in 0..l {
                    let row = &blk_src[pos * dh..(pos + 1) * dh];
                    let out = &mut blk_dst[pos * dh..(pos + 1) * dh];
                    for i in 0..half {
                        let (c, sn) = (cos[pos * half + i], dir * sin[pos * half + i]);
                        let (x1, x2) = (row[i], row[i + half]);
                        out[i] = x1 * c - x2 * sn;
                        out[i + half] = x1 * sn + x2 * c;
                    }
                }
            }
        };
        let mut y = vec![T::zero(); self.numel()];
        rotate(self.data(), &mut y, T::one());
        Tensor::custom(
            "rope",
            y,
            s.to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                rotate(g, &mut gx, -T::one());
                vec![Some(gx)]
            }),
        )
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Row gather from `table` ([V, D]) for each id; output is `[ids.len(), D]`.
pub fn embedding<T: Real>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::Shape(format!(
            "embedding: table must be [V, D], got {:?}",
            table.shape()
        )));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
        return Err(Error::Data(format!(
            "embedding: id {bad} outside vocabulary of {v}"
        )));
    }
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        out.extend_from_slice(&td[id * d..(id + 1) * d]);
    }
    let ids = ids.to_vec();
    Tensor::custom(
        "embedding",
        out,
        vec![ids.len(), d],
        vec![table.clone()],
        Box::new(move |g| {
            let mut gt = vec![T::zero(); v * d];
            for (row, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for (acc, &x) in gt[id * d..(id + 1) * d]
                    .iter_mut()
                    .zip(&g[row * d..(row + 1) * d])
                {
                    *acc += x;
                }
            }
            vec![Some(gt)]
        }),
    )
}

/// `sum_n weights[n] * -log softmax(logits[n])[targets[n]]` over rows of a
/// `[N, V]` logit matrix. Rows with zero weight contribute exactly zero and
/// get zero gradient.
pub fn masked_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[u32],
    weights: &[f64],
) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!(
            "masked_cross_entropy: logits must be [N, V], got {:?}",
            logits.shape()
        )));
    }
    let (n, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "masked_cross_entropy: {n} rows but {} targets and {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Data(format!(
            "target id {bad} outside vocabulary of {v}"
        )));
    }
    if let Some(bad) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::Data(format!(
            "loss weight {bad} must be finite and non-negative"
        )));
    }
    let ld = logits.data();
    let mut probs: Vec<(usize, Vec<T>)> = Vec::new();
    let mut total = T::zero();
    for row in 0..n {
        let w = weights[row];
        if w == 0.0 {
            continue;
        }
        let mut p = ld[row * v..(row + 1) * v].to_vec();
        let max = p.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + p.iter().fold(T::zero(), |a, &z| a + (z - max).exp()).ln();
        total += T::lit(w) * (lse - p[targets[row] as usize]);
        softmax_in_place(&mut p);
        probs.push((row, p));
    }
    let targets = targets.to_vec();
    let weights = weights.to_vec();
    Tensor::custom(
        "masked_cross_entropy",
        vec![total],
        Vec::new(),
        vec![logits.clone()],
        Box::new(move |g| {
            let mut gl = vec![T::zero(); n * v];
            for (row, p) in &probs {
                let scale = g[0] * T::lit(weights[*row]);
                let out = &mut gl[row * v..(row + 1) * v];
                for (o, &pv) in out.iter_mut().zip(p) {
                    *o = scale * pv;
                }
                out[targets[*row] as usize] -= scale;
            }
            vec![Some(gl)]
        }),
    )
}
