//! Forward-mode dual numbers for small Jacobians of closed-form geometry.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64` and [`Dual`].
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn re(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn re(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// `v + d·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn var(v: f64) -> Self {
        Dual { v, d: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            v: self.v / o.v,
            d: (self.d * o.v - self.v * o.d) / (o.v * o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

impl Real for Dual {
    fn cst(x: f64) -> Self {
        Dual { v: x, d: 0.0 }
    }
    fn re(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        Dual {
            v: self.v.sin(),
            d: self.d * self.v.cos(),
        }
    }
    fn cos(self) -> Self {
        Dual {
            v: self.v.cos(),
            d: -self.d * self.v.sin(),
        }
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: self.d / (2.0 * s) }
    }
}

/// Jacobian `∂f/∂x` (outputs × inputs) by one forward pass per input.
pub fn jacobian(x: &[f64], f: impl Fn(&[Dual]) -> Vec<Dual>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut value = Vec::new();
    let mut jac: Vec<Vec<f64>> = Vec::new();
    for i in 0..x.len() {
        let seeded: Vec<Dual> = x
            .iter()
            .enumerate()
            .map(|(j, &v)| Dual { v, d: if i == j { 1.0 } else { 0.0 } })
            .collect();
        let out = f(&seeded);
        if i == 0 {
            value = out.iter().map(|o| o.v).collect();
            jac = vec![vec![0.0; x.len()]; out.len()];
        }
        for (r, o) in out.iter().enumerate() {
            jac[r][i] = o.d;
        }
    }
    (value, jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<T: Real>(x: &[T]) -> Vec<T> {
        vec![x[0].sin() * x[1].exp() / (x[0] * x[0] + T::cst(1.0)).sqrt(), -x[1].cos() - x[0]]
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let x = [0.7, -0.3];
        let (v, j) = jacobian(&x, f::<Dual>);
        assert_eq!(v, f::<f64>(&x));
        let h = 1e-6;
        for i in 0..2 {
            let (mut p, mut m) = (x, x);
            p[i] += h;
            m[i] -= h;
            let (fp, fm) = (f::<f64>(&p), f::<f64>(&m));
            for r in 0..2 {
                assert!(((fp[r] - fm[r]) / (2.0 * h) - j[r][i]).abs() < 1e-8);
            }
        }
    }
}
