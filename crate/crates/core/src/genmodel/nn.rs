//! Dense tanh networks and the Adam optimizer.

use nalgebra::DMatrix;
use rand::Rng;

use super::tape::{Gradients, Tape, Var};

/// Affine layer `y = x·W + b` acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: DMatrix<f64>,
    /// `1 × out`
    pub b: DMatrix<f64>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Linear {
            w: DMatrix::from_fn(inputs, outputs, |_, _| rng.random_range(-a..a)),
            b: DMatrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }
}

/// Multilayer perceptron: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Tape handles of one network's parameters, in [`Mlp::params`] order.
pub struct MlpVars(Vec<Var>);

impl Mlp {
    /// `widths = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2);
        Mlp {
            layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Linear::outputs));
        w
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Registers the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars(self.params().into_iter().map(|p| tape.leaf(p.clone())).collect())
    }

    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..=last {
            h = tape.matmul(h, vars.0[2 * i]);
            h = tape.add_row(h, vars.0[2 * i + 1]);
            if i < last {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Tape-free evaluation with identical arithmetic.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = &h * &l.w;
            for mut r in h.row_iter_mut() {
                r += &l.b;
            }
            if i < last {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }

    pub fn grads(&self, g: &Gradients, vars: &MlpVars) -> Vec<DMatrix<f64>> {
        self.params().into_iter().zip(&vars.0).map(|(p, v)| g.get(*v, p)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[&DMatrix<f64>]) -> Self {
        let zeros: Vec<_> = shapes.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut DMatrix<f64>>, grads: &[DMatrix<f64>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn taped_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[5, 7, 7, 3], &mut rng);
        let x = DMatrix::from_fn(4, 5, |r, c| (r as f64 - c as f64) * 0.3);
        let mut t = Tape::new();
        let vars = net.bind(&mut t);
        let xv = t.leaf(x.clone());
        let y = net.forward(&mut t, &vars, xv);
        assert_eq!(t.value(y), &net.apply(&x));
        assert_eq!(net.widths(), vec![5, 7, 7, 3]);
    }

    #[test]
    fn first_adam_step_moves_each_weight_by_lr() {
        let mut p = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let g = DMatrix::from_row_slice(1, 3, &[3.0, -0.1, 1e3]);
        let mut opt = Adam::new(AdamConfig::new(0.01), &[&p]);
        opt.step(vec![&mut p], std::slice::from_ref(&g));
        // The bias-corrected first step is lr·sign(g) up to eps.
        for (x, want) in p.iter().zip([0.99, -1.99, 0.49]) {
            assert!((x - want).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = DMatrix::from_element(2, 2, 5.0);
        let mut opt = Adam::new(AdamConfig::new(0.05), &[&p]);
        for _ in 0..2000 {
            let g = p.clone() * 2.0;
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.amax() < 1e-3);
    }
}
