//! Fully connected ReLU networks with hand-written backprop.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }
}

/// ReLU on every hidden layer, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct Trace {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes` lists every layer width including input and output.
    /// Weights and biases start uniform in `+-1/sqrt(fan_in)`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|s| {
                let bound = 1.0 / (s[0] as f64).sqrt();
                let mut d = Dense::zeros(s[0], s[1]);
                d.w.mapv_inplace(|_| rng.gen_range(-bound..bound));
                d.b.mapv_inplace(|_| rng.gen_range(-bound..bound));
                d
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.ncols())
    }

    /// Width of every layer, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_trace(x).0
    }

    pub fn forward_trace(&self, x: &Array2<f64>) -> (Array2<f64>, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.w) + &l.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = z;
        }
        (h, Trace { inputs })
    }

    /// Gradients of a loss with respect to every parameter and to the input,
    /// given its gradient `g` with respect to the output.
    pub fn backward(&self, trace: &Trace, mut g: Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            grads.push(Dense { w: input.t().dot(&g), b: g.sum_axis(Axis(0)) });
            g = g.dot(&l.w.t());
            if i > 0 {
                // the input of layer i is a ReLU output, zero exactly where inactive
                Zip::from(&mut g).and(input).for_each(|gv, &a| {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
        }
        grads.reverse();
        (Mlp { layers: grads }, g)
    }

    /// `self <- (1 - tau) * self + tau * src`, element by element.
    pub fn polyak(&mut self, src: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&src.layers) {
            Zip::from(&mut t.w).and(&s.w).for_each(|t, &s| *t = (1.0 - tau) * *t + tau * s);
            Zip::from(&mut t.b).and(&s.b).for_each(|t, &s| *t = (1.0 - tau) * *t + tau * s);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Layer, bias flag and flat offset of parameter `k`. Order: per layer,
    /// weights row-major, then biases.
    fn locate(&self, mut k: usize) -> (usize, bool, usize) {
        for (i, l) in self.layers.iter().enumerate() {
            if k < l.w.len() {
                return (i, false, k);
            }
            k -= l.w.len();
            if k < l.b.len() {
                return (i, true, k);
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn param_mut(&mut self, k: usize) -> &mut f64 {
        let (i, bias, j) = self.locate(k);
        let l = &mut self.layers[i];
        if bias {
            &mut l.b[j]
        } else {
            let c = l.w.ncols();
            &mut l.w[[j / c, j % c]]
        }
    }

    pub fn param(&self, k: usize) -> f64 {
        let (i, bias, j) = self.locate(k);
        let l = &self.layers[i];
        if bias {
            l.b[j]
        } else {
            l.w[[j / l.w.ncols(), j % l.w.ncols()]]
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    m: Mlp,
    v: Mlp,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam { lr, t: 0, m: net.zeros_like(), v: net.zeros_like() }
    }

    pub fn step(&mut self, net: &mut Mlp, grad: &Mlp) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let lr = self.lr;
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for (((p, m), v), g) in net.layers.iter_mut().zip(&mut self.m.layers).zip(&mut self.v.layers).zip(&grad.layers)
        {
            Zip::from(&mut p.w).and(&mut m.w).and(&mut v.w).and(&g.w).for_each(|p, m, v, &g| upd(p, m, v, g));
            Zip::from(&mut p.b).and(&mut m.b).and(&mut v.b).and(&g.b).for_each(|p, m, v, &g| upd(p, m, v, g));
        }
    }

    pub(crate) fn moments(&self) -> (&Mlp, &Mlp) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(lr: f64, t: u64, m: Mlp, v: Mlp) -> Self {
        Adam { lr, t, m, v }
    }
}

/// Adam on a single scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarAdam {
    pub lr: f64,
    pub t: u64,
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        ScalarAdam { lr, t: 0, m: 0.0, v: 0.0 }
    }

    pub fn step(&mut self, p: &mut f64, g: f64) {
        self.t += 1;
        self.m = BETA1 * self.m + (1.0 - BETA1) * g;
        self.v = BETA2 * self.v + (1.0 - BETA2) * g * g;
        let mh = self.m / (1.0 - BETA1.powi(self.t as i32));
        let vh = self.v / (1.0 - BETA2.powi(self.t as i32));
        *p -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}
