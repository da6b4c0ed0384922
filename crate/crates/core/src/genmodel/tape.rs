//! Reverse-mode differentiation over matrix-valued operations.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! returns the gradient of a scalar node with respect to every node.
//! Geometry losses that are differentiated by hand enter through
//! [`Tape::scalar_fn`], which stores a precomputed input gradient.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a + 1·b` with `b` a single row.
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Exp(usize),
    Sum(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Clamp(usize, f64, f64),
    ScalarFn(usize, DMatrix<f64>),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<DMatrix<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][(0, 0)]
    }

    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = &self.values[row.0];
        assert_eq!(r.nrows(), 1);
        let mut v = self.values[a.0].clone();
        for mut x in v.row_iter_mut() {
            x += r;
        }
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].component_mul(&self.values[b.0]);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.values[a.0].add_scalar(c);
        self.push(v, Op::AddConst(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        self.push(DMatrix::from_element(1, 1, s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.values[parts[0].0].nrows();
        let cols: usize = parts.iter().map(|p| self.values[p.0].ncols()).sum();
        let mut v = DMatrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let x = &self.values[p.0];
            assert_eq!(x.nrows(), rows);
            v.columns_mut(at, x.ncols()).copy_from(x);
            at += x.ncols();
        }
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.values[a.0].columns(start, len).into_owned();
        self.push(v, Op::Slice(a.0, start))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.values[a.0].map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.0, lo, hi))
    }

    /// A scalar `value` depending on `input` with known gradient `grad`.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: DMatrix<f64>) -> Var {
        assert_eq!(grad.shape(), self.values[input.0].shape());
        self.push(DMatrix::from_element(1, 1, value), Op::ScalarFn(input.0, grad))
    }

    /// Gradients of the scalar `out` with respect to every leaf.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.values[out.0].shape(), (1, 1), "backward from a non-scalar");
        let mut g: Vec<Option<DMatrix<f64>>> = vec![None; self.values.len()];
        g[out.0] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(gi) = g[i].take() else { continue };
            let acc = |g: &mut Vec<Option<DMatrix<f64>>>, j: usize, d: DMatrix<f64>| match &mut g[j] {
                Some(x) => *x += d,
                slot => *slot = Some(d),
            };
            match &self.ops[i] {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(&mut g, *a, &gi * self.values[*b].transpose());
                    acc(&mut g, *b, self.values[*a].transpose() * &gi);
                }
                Op::AddRow(a, r) => {
                    let row = DMatrix::from_fn(1, gi.ncols(), |_, c| gi.column(c).sum());
                    acc(&mut g, *r, row);
                    acc(&mut g, *a, gi);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, gi.clone());
                    acc(&mut g, *a, gi);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, -gi.clone());
                    acc(&mut g, *a, gi);
                }
                Op::Mul(a, b) => {
                    let ga = gi.component_mul(&self.values[*b]);
                    let gb = gi.component_mul(&self.values[*a]);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut g, *a, gi * *c),
                Op::AddConst(a) => acc(&mut g, *a, gi),
                Op::Tanh(a) => {
                    let d = gi.zip_map(&self.values[i], |g, y| g * (1.0 - y * y));
                    acc(&mut g, *a, d);
                }
                Op::Exp(a) => {
                    let d = gi.component_mul(&self.values[i]);
                    acc(&mut g, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.values[*a].shape();
                    acc(&mut g, *a, DMatrix::from_element(r, c, gi[(0, 0)]));
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.values[p].ncols();
                        acc(&mut g, p, gi.columns(at, w).into_owned());
                        at += w;
                    }
                }
                Op::Slice(a, start) => {
                    let (r, c) = self.values[*a].shape();
                    let mut d = DMatrix::zeros(r, c);
                    d.columns_mut(*start, gi.ncols()).copy_from(&gi);
                    acc(&mut g, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.values[*a];
                    let d = gi.zip_map(x, |g, x| if x > *lo && x < *hi { g } else { 0.0 });
                    acc(&mut g, *a, d);
                }
                Op::ScalarFn(a, grad) => acc(&mut g, *a, grad * gi[(0, 0)]),
            }
        }
        Gradients(g)
    }
}

pub struct Gradients(Vec<Option<DMatrix<f64>>>);

impl Gradients {
    /// Zero-shaped-like-`like` when `v` does not influence the output.
    pub fn get(&self, v: Var, like: &DMatrix<f64>) -> DMatrix<f64> {
        self.0[v.0].clone().unwrap_or_else(|| DMatrix::zeros(like.nrows(), like.ncols()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Builds a graph touching every op and returns its scalar output.
    fn graph(t: &mut Tape, x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DMatrix<f64>) -> (Var, Var, Var, Var) {
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let h = t.matmul(xv, wv);
        let h = t.add_row(h, bv);
        let a = t.tanh(h);
        let e = t.exp(a);
        let s = t.slice_cols(e, 1, 2);
        let c = t.clamp(h, -0.5, 0.7);
        let cat = t.concat_cols(&[s, c, a]);
        let sq = t.square(cat);
        let m = t.mul(sq, cat);
        let d = t.sub(m, cat);
        let d = t.add(d, sq);
        let d = t.scale(d, 0.3);
        let d = t.add_const(d, 2.0);
        let mean = t.mean(d);
        let xs: f64 = t.value(xv).iter().map(|v| v.sin()).sum();
        let grad = t.value(xv).map(f64::cos);
        let f = t.scalar_fn(xv, xs, grad);
        (t.add(mean, f), xv, wv, bv)
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, w, b) = (rand_mat(4, 3, &mut rng), rand_mat(3, 5, &mut rng), rand_mat(1, 5, &mut rng));
        let mut t = Tape::new();
        let (out, xv, wv, bv) = graph(&mut t, &x, &w, &b);
        let g = t.backward(out);
        let eval = |x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut t = Tape::new();
            let o = graph(&mut t, x, w, b).0;
            t.scalar(o)
        };
        let h = 1e-6;
        for (which, base, var) in [(0, &x, xv), (1, &w, wv), (2, &b, bv)] {
            let an = g.get(var, base);
            for i in 0..base.len() {
                let (mut p, mut m) = (base.clone(), base.clone());
                p[i] += h;
                m[i] -= h;
                let fd = match which {
                    0 => (eval(&p, &w, &b) - eval(&m, &w, &b)) / (2.0 * h),
                    1 => (eval(&x, &p, &b) - eval(&x, &m, &b)) / (2.0 * h),
                    _ => (eval(&x, &w, &p) - eval(&x, &w, &m)) / (2.0 * h),
                };
                assert!((fd - an[i]).abs() < 1e-7 * an[i].abs().max(1.0), "input {which}[{i}]: {fd} vs {}", an[i]);
            }
        }
    }
}
