//! Double-double scalar (about 32 significant digits) used as a reference
//! evaluator for finite-difference gradient checks. Implements the subset of
//! transcendental functions the tensor stack calls; the rest panic rather
//! than silently fall back to `f64` accuracy.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};

use num_traits::{Float, Num, NumCast, One, ToPrimitive, Zero};

use super::real::{DType, Real};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct F64x2 {
    hi: f64,
    lo: f64,
}

const LN2: F64x2 = F64x2 {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl F64x2 {
    pub const fn from_f64(v: f64) -> Self {
        F64x2 { hi: v, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return F64x2 { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        F64x2 { hi, lo }
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        F64x2 {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    fn unsupported(name: &str) -> ! {
        panic!("F64x2::{name} is not implemented at double-double accuracy")
    }

    /// `exp(x) - 1` for small `|x|` by Taylor series.
    fn expm1_small(self) -> Self {
        let mut term = self;
        let mut sum = self;
        for k in 2..40 {
            term = term * self / F64x2::from_f64(k as f64);
            sum += term;
            if term.hi.abs() < 1e-34 * sum.hi.abs() {
                break;
            }
        }
        sum
    }
}

impl PartialEq for F64x2 {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for F64x2 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl fmt::Display for F64x2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.hi + self.lo)
    }
}

impl Add for F64x2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        if !s.is_finite() {
            return F64x2::from_f64(s);
        }
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        F64x2::renorm(s, e + f)
    }
}

impl Neg for F64x2 {
    type Output = Self;
    fn neg(self) -> Self {
        F64x2 {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for F64x2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + -o
    }
}

impl Mul for F64x2 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        if !p.is_finite() {
            return F64x2::from_f64(p);
        }
        F64x2::renorm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for F64x2 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() || o.hi == 0.0 {
            return F64x2::from_f64(q1);
        }
        let r = self - o * F64x2::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * F64x2::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        F64x2 { hi: q1, lo: q2 } + F64x2::from_f64(q3)
    }
}

impl Rem for F64x2 {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        self - (self / o).trunc() * o
    }
}

macro_rules! assign_ops {
    ($($tr:ident $f:ident $op:tt),*) => {
        $(impl $tr for F64x2 {
            fn $f(&mut self, o: Self) {
                *self = *self $op o;
            }
        })*
    };
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Zero for F64x2 {
    fn zero() -> Self {
        F64x2::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for F64x2 {
    fn one() -> Self {
        F64x2::from_f64(1.0)
    }
}

impl Num for F64x2 {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(F64x2::from_f64)
    }
}

impl ToPrimitive for F64x2 {
    fn to_i64(&self) -> Option<i64> {
        self.trunc().hi.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.trunc().hi.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl NumCast for F64x2 {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(F64x2::from_f64)
    }
}

impl Float for F64x2 {
    fn nan() -> Self {
        F64x2::from_f64(f64::NAN)
    }
    fn infinity() -> Self {
        F64x2::from_f64(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        F64x2::from_f64(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        F64x2::from_f64(-0.0)
    }
    fn min_value() -> Self {
        F64x2::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        F64x2::from_f64(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        F64x2::from_f64(f64::MAX)
    }
    fn epsilon() -> Self {
        F64x2::from_f64(4.93038065763132e-32)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            F64x2::renorm(hi, self.lo.floor())
        } else {
            F64x2::from_f64(hi)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        (self + F64x2::from_f64(0.5)).floor()
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        F64x2::from_f64(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        F64x2::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = F64x2::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return F64x2::from_f64(self.hi.sqrt());
        }
        let y = F64x2::from_f64(self.hi.sqrt());
        y + (self - y * y) / (y + y)
    }
    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return F64x2::infinity();
        }
        if self.hi < -745.0 {
            return F64x2::zero();
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * F64x2::from_f64(k)).ldexp(-10);
        // (1 + m)^2 - 1 = m (2 + m), keeping the small part exact
        let mut m = r.expm1_small();
        for _ in 0..10 {
            m = m * (m + F64x2::from_f64(2.0));
        }
        (m + F64x2::one()).ldexp(k as i32)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return F64x2::from_f64(self.hi.ln());
        }
        // one Newton step on exp(y) = x from the f64 estimate
        let y = F64x2::from_f64(self.hi.ln());
        y + self * (-y).exp() - F64x2::one()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / F64x2::from_f64(10.0).ln()
    }
    fn max(self, o: Self) -> Self {
        if self.is_nan() || o > self {
            o
        } else {
            self
        }
    }
    fn min(self, o: Self) -> Self {
        if self.is_nan() || o < self {
            o
        } else {
            self
        }
    }
    fn abs_sub(self, o: Self) -> Self {
        (self - o).max(F64x2::zero())
    }
    fn cbrt(self) -> Self {
        F64x2::unsupported("cbrt")
    }
    fn hypot(self, o: Self) -> Self {
        (self * self + o * o).sqrt()
    }
    fn sin(self) -> Self {
        F64x2::unsupported("sin")
    }
    fn cos(self) -> Self {
        F64x2::unsupported("cos")
    }
    fn tan(self) -> Self {
        F64x2::unsupported("tan")
    }
    fn asin(self) -> Self {
        F64x2::unsupported("asin")
    }
    fn acos(self) -> Self {
        F64x2::unsupported("acos")
    }
    fn atan(self) -> Self {
        F64x2::unsupported("atan")
    }
    fn atan2(self, _: Self) -> Self {
        F64x2::unsupported("atan2")
    }
    fn sin_cos(self) -> (Self, Self) {
        F64x2::unsupported("sin_cos")
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() < 0.5 {
            self.expm1_small()
        } else {
            self.exp() - F64x2::one()
        }
    }
    fn ln_1p(self) -> Self {
        (self + F64x2::one()).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp_m1();
        let f = (-self).exp_m1();
        (e - f) / F64x2::from_f64(2.0)
    }
    fn cosh(self) -> Self {
        (self.exp() + (-self).exp()) / F64x2::from_f64(2.0)
    }
    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return F64x2::from_f64(self.hi.signum());
        }
        let e = (self + self).exp_m1();
        e / (e + F64x2::from_f64(2.0))
    }
    fn asinh(self) -> Self {
        F64x2::unsupported("asinh")
    }
    fn acosh(self) -> Self {
        F64x2::unsupported("acosh")
    }
    fn atanh(self) -> Self {
        F64x2::unsupported("atanh")
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Real for F64x2 {
    const DTYPE: DType = DType::F64x2;

    #[inline]
    fn lit(v: f64) -> Self {
        F64x2::from_f64(v)
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.hi.to_le_bytes());
        out.extend_from_slice(&self.lo.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let hi = f64::from_le_bytes(bytes[..8].try_into().expect("16 bytes"));
        let lo = f64::from_le_bytes(bytes[8..16].try_into().expect("16 bytes"));
        F64x2::renorm(hi, lo)
    }
}
