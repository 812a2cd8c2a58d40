//! Double-double arithmetic: roughly 106 bits of significand, enough to
//! serve as a reference for f64 kernels.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

pub const TWO_PI: Dd = Dd {
    hi: std::f64::consts::TAU,
    lo: 2.449_293_598_294_706_4e-16,
};

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn scale2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = Dd::new(self.hi.sqrt());
        x + (self - x * x) / (x * 2.0)
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * k).scale2(-10);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..30 {
            term = term * r / i as f64;
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale2(k as i32)
    }

    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "ln of non-positive {self:?}");
        let mut x = Dd::new(self.hi.ln());
        for _ in 0..3 {
            x = x + self * (-x).exp() - 1.0;
        }
        x
    }

    pub fn powf(self, e: f64) -> Dd {
        if self.hi == 0.0 {
            return Dd::ZERO;
        }
        (self.ln() * e).exp()
    }

    pub fn max(self, other: Dd) -> Dd {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn total_cmp(&self, other: &Dd) -> Ordering {
        self.hi.total_cmp(&other.hi).then(self.lo.total_cmp(&other.lo))
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Dd) -> Option<Ordering> {
        Some(self.total_cmp(other))
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Dd {
        Dd::new(x)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * q1;
        let q2 = r.hi / b.hi;
        let r = r - b * q2;
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

macro_rules! with_f64 {
    ($($tr:ident $f:ident),*) => {$(
        impl $tr<f64> for Dd {
            type Output = Dd;
            fn $f(self, b: f64) -> Dd {
                $tr::$f(self, Dd::new(b))
            }
        }
    )*};
}
with_f64!(Add add, Sub sub, Mul mul, Div div);

pub fn sum<I: IntoIterator<Item = Dd>>(it: I) -> Dd {
    it.into_iter().fold(Dd::ZERO, |a, b| a + b)
}

pub fn dot(a: &[f64], b: &[Dd]) -> Dd {
    sum(a.iter().zip(b).map(|(&x, &y)| y * x))
}

pub fn logsumexp(v: &[Dd]) -> Dd {
    let m = v.iter().copied().fold(Dd::new(f64::NEG_INFINITY), Dd::max);
    m + sum(v.iter().map(|&x| (x - m).exp())).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_ln_round_trip() {
        for &x in &[0.5, 1.0, 3.0, 10.0, -7.25, 123.0] {
            let e = Dd::new(x).exp();
            let back = e.ln();
            assert!((back - x).to_f64().abs() < 1e-28 * x.abs().max(1.0), "{x}: {back:?}");
        }
        let e1 = Dd::ONE.exp();
        assert!((e1.hi - std::f64::consts::E).abs() <= f64::EPSILON * 3.0);
    }

    #[test]
    fn sqrt_and_div() {
        let two = Dd::new(2.0);
        let r = two.sqrt();
        assert!((r * r - two).to_f64().abs() < 1e-30);
        let third = Dd::ONE / 3.0;
        assert!((third * 3.0 - 1.0).to_f64().abs() < 1e-31);
    }
}
