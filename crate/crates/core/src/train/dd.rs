//! Double-double arithmetic: an unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`,
//! carrying about 106 significant bits. Only what the finite-difference oracle needs.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

/// `ln 2` to double-double precision.
const LN2: Dd = Dd {
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

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    #[inline]
    fn renorm(hi: f64, lo: f64) -> Dd {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn mul_f64(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        Dd::renorm(p, e + self.lo * b)
    }

    pub fn max0(self) -> Dd {
        if self.hi > 0.0 || (self.hi == 0.0 && self.lo > 0.0) {
            self
        } else {
            Dd::ZERO
        }
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn scale_pow2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd {
                hi: f64::INFINITY,
                lo: 0.0,
            };
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        // exp(x) = 2^k exp(r)^1024 with |r| <= ln2 / 2048. Squaring is done on
        // m = exp(r) - 1 as m (m + 2), which keeps m to full relative precision.
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2.mul_f64(k)).scale_pow2(-10);
        let mut term = r;
        let mut m = r;
        for n in 2..=12 {
            term = (term * r) / Dd::from(f64::from(n));
            m = m + term;
        }
        for _ in 0..10 {
            m = m * (m + Dd::from(2.0));
        }
        (m + Dd::ONE).scale_pow2(k as i32)
    }

    /// Natural logarithm of a positive value, by Newton steps on `exp`.
    pub fn ln(self) -> Dd {
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Dd {
        let a = self.abs();
        if a.hi > 40.0 {
            return Dd::from(self.hi.signum());
        }
        let t = (a.mul_f64(-2.0)).exp();
        let v = (Dd::ONE - t) / (Dd::ONE + t);
        if self.hi < 0.0 {
            -v
        } else {
            v
        }
    }
}

/// Compensated accumulator for `init + sum a_i w_i` with double weights `w_i`.
/// The high parts are summed error-free; all rounding residues collect in `c`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DotAcc {
    s: f64,
    c: f64,
}

impl DotAcc {
    pub fn new(init: Dd) -> DotAcc {
        DotAcc { s: init.hi, c: init.lo }
    }

    #[inline]
    pub fn add(&mut self, a: Dd, w: f64) {
        let (p, e) = two_prod(a.hi, w);
        let (s, f) = two_sum(self.s, p);
        self.s = s;
        self.c += f + e + a.lo * w;
    }

    #[inline]
    pub fn add_f64(&mut self, a: f64, w: f64) {
        let (p, e) = two_prod(a, w);
        let (s, f) = two_sum(self.s, p);
        self.s = s;
        self.c += f + e;
    }

    pub fn value(self) -> Dd {
        Dd::renorm(self.s, self.c)
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
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

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::renorm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o.mul_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o.mul_f64(q2);
        let q3 = r.hi / o.hi;
        Dd::from(q1) + Dd::from(q2) + Dd::from(q3)
    }
}
