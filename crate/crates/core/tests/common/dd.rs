//! Double-double arithmetic (about 106 bits of mantissa) for finite-difference
//! reference computations.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
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

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Dd {
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

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = self.hi.sqrt();
        // one Newton step: x + (a - x^2) / (2x)
        let xx = Dd::from_f64(x) * Dd::from_f64(x);
        let corr = (self - xx).hi / (2.0 * x);
        let (s, e) = quick_two_sum(x, corr);
        Dd { hi: s, lo: e }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
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
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, o: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&o.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&o.lo),
            other => other,
        }
    }
}

/// Dense LU with partial pivoting in double-double.
pub struct DdLu {
    n: usize,
    lu: Vec<Dd>,
    perm: Vec<usize>,
}

impl DdLu {
    pub fn new(n: usize, a: &[f64]) -> DdLu {
        let mut lu: Vec<Dd> = a.iter().map(|&x| Dd::from_f64(x)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| {
                    lu[i * n + k]
                        .abs()
                        .partial_cmp(&lu[j * n + k].abs())
                        .unwrap()
                })
                .unwrap();
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let piv = lu[k * n + k];
            assert!(piv.hi != 0.0, "singular");
            for i in k + 1..n {
                let l = lu[i * n + k] / piv;
                lu[i * n + k] = l;
                for c in k + 1..n {
                    lu[i * n + c] = lu[i * n + c] - l * lu[k * n + c];
                }
            }
        }
        DdLu { n, lu, perm }
    }

    pub fn solve(&self, b: &[Dd]) -> Vec<Dd> {
        let n = self.n;
        let mut y: Vec<Dd> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for c in 0..i {
                y[i] = y[i] - self.lu[i * n + c] * y[c];
            }
        }
        for i in (0..n).rev() {
            for c in i + 1..n {
                y[i] = y[i] - self.lu[i * n + c] * y[c];
            }
            y[i] = y[i] / self.lu[i * n + i];
        }
        y
    }
}

/// `‖T(z_k) − z_k‖` after `k` DR steps, evaluated entirely in double-double.
/// `m_plus_i` is the row-major `M + I`, `q` the LCP offset, and the last
/// `m` coordinates are projected onto the nonnegative orthant.
pub struct DdDr {
    lu: DdLu,
    q: Vec<Dd>,
    m: usize,
}

impl DdDr {
    pub fn new(dim: usize, m_plus_i: &[f64], q: &[f64], m: usize) -> DdDr {
        DdDr {
            lu: DdLu::new(dim, m_plus_i),
            q: q.iter().map(|&x| Dd::from_f64(x)).collect(),
            m,
        }
    }

    fn step(&self, z: &[Dd]) -> (Vec<Dd>, Dd) {
        let dim = z.len();
        let rhs: Vec<Dd> = z.iter().zip(&self.q).map(|(&a, &b)| a - b).collect();
        let u = self.lu.solve(&rhs);
        let mut next = Vec::with_capacity(dim);
        let mut sq = Dd::ZERO;
        for j in 0..dim {
            let v = u[j] + u[j] - z[j];
            let ut = if j >= dim - self.m && v < Dd::ZERO {
                Dd::ZERO
            } else {
                v
            };
            let d = ut - u[j];
            sq = sq + d * d;
            next.push(z[j] + d);
        }
        (next, sq.sqrt())
    }

    pub fn loss(&self, z0: &[Dd], k: usize) -> Dd {
        let mut z = z0.to_vec();
        for _ in 0..k {
            z = self.step(&z).0;
        }
        self.step(&z).1
    }
}
