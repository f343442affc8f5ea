//! Feed-forward policy `π(x; w)`: ReLU hidden layers, affine-tanh output that
//! keeps every control strictly inside its box, reverse-mode gradients and an
//! Adam optimizer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::all_finite;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Parameter-shaped accumulator; also used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Layer::params_mut)
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &Params) {
        for (x, y) in self.iter_mut().zip(other.iter()) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.iter_mut().for_each(|x| *x *= a);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub params: Params,
    u_lb: DVector<f64>,
    u_ub: DVector<f64>,
}

struct Tape {
    /// Inputs of every layer (post-activation of the previous one).
    inputs: Vec<DVector<f64>>,
    tanh: DVector<f64>,
}

impl MlpPolicy {
    /// All-zero weights. `widths = [n_x, w₁, …, w_d, n_u]`.
    pub fn zeros(widths: &[usize], u_lb: &[f64], u_ub: &[f64]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("policy widths {widths:?} need an input, an output and no zero layer")));
        }
        let nu = widths[widths.len() - 1];
        if u_lb.len() != nu || u_ub.len() != nu {
            return Err(Error::Dimension(format!("policy bounds must have {nu} entries")));
        }
        if !all_finite(u_lb) || !all_finite(u_ub) || u_lb.iter().zip(u_ub).any(|(l, u)| l >= u) {
            return Err(Error::Config("policy bounds must be finite with lb < ub".into()));
        }
        Ok(Self {
            params: Params {
                layers: widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            },
            u_lb: DVector::from_column_slice(u_lb),
            u_ub: DVector::from_column_slice(u_ub),
        })
    }

    /// He-uniform hidden layers (`±√(6/fan_in)`), `±√(1/fan_in)` output layer,
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], u_lb: &[f64], u_ub: &[f64], rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(widths, u_lb, u_ub)?;
        let last = p.params.layers.len() - 1;
        for (i, layer) in p.params.layers.iter_mut().enumerate() {
            let fan_in = layer.weight.ncols() as f64;
            let bound = if i == last { (1.0 / fan_in).sqrt() } else { (6.0 / fan_in).sqrt() };
            // Row-major draw order, matching the weights file.
            for r in 0..layer.weight.nrows() {
                for c in 0..layer.weight.ncols() {
                    layer.weight[(r, c)] = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(p)
    }

    pub fn n_x(&self) -> usize {
        self.params.layers[0].weight.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.u_lb.len()
    }

    /// `[n_x, w₁, …, w_d, n_u]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = alloc::vec![self.n_x()];
        w.extend(self.params.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.u_lb
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.u_ub
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_x() {
            return Err(Error::Dimension(format!("policy expects {} inputs, got {}", self.n_x(), x.len())));
        }
        Ok(())
    }

    fn run(&self, x: &[f64]) -> Tape {
        let layers = &self.params.layers;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut a = DVector::from_column_slice(x);
        for layer in &layers[..layers.len() - 1] {
            let mut z = &layer.weight * &a + &layer.bias;
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(core::mem::replace(&mut a, z));
        }
        let out = layers.last().expect("at least one layer");
        let o = &out.weight * &a + &out.bias;
        inputs.push(a);
        Tape {
            inputs,
            tanh: o.map(f64::tanh),
        }
    }

    fn squash(&self, t: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            t.len(),
            (0..t.len()).map(|i| self.u_lb[i] + (self.u_ub[i] - self.u_lb[i]) * 0.5 * (t[i] + 1.0)),
        )
    }

    /// `u = u_lb + (u_ub − u_lb)(tanh(o) + 1)/2`
    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.squash(&self.run(x).tanh))
    }

    /// Mean over the batch of `∇_w π(x; w)ᵀ g` for pairs `(x, g = ∂ℓ/∂u)`.
    pub fn backward<X: AsRef<[f64]>, G: AsRef<[f64]>>(&self, batch: &[(X, G)]) -> Result<Params> {
        if batch.is_empty() {
            return Err(Error::Empty("policy backward batch"));
        }
        let mut grad = self.params.zeros_like();
        for (x, g) in batch {
            self.accumulate(x.as_ref(), g.as_ref(), &mut grad)?;
        }
        grad.scale(1.0 / batch.len() as f64);
        Ok(grad)
    }

    fn accumulate(&self, x: &[f64], upstream: &[f64], grad: &mut Params) -> Result<()> {
        self.check_input(x)?;
        if upstream.len() != self.n_u() {
            return Err(Error::Dimension(format!("upstream gradient has {} entries, expected {}", upstream.len(), self.n_u())));
        }
        let tape = self.run(x);
        let mut delta = DVector::from_iterator(
            self.n_u(),
            (0..self.n_u()).map(|i| upstream[i] * 0.5 * (self.u_ub[i] - self.u_lb[i]) * (1.0 - tape.tanh[i] * tape.tanh[i])),
        );
        let layers = &self.params.layers;
        for k in (0..layers.len()).rev() {
            let a = &tape.inputs[k];
            grad.layers[k].weight.ger(1.0, &delta, a, 1.0);
            grad.layers[k].bias += &delta;
            if k > 0 {
                let mut back = layers[k].weight.tr_mul(&delta);
                // ReLU derivative: the layer input is positive exactly where it was active.
                for (b, ai) in back.iter_mut().zip(a.iter()) {
                    if *ai <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok(())
    }

    /// Text form: a header `mlp v1 <n_x> <d> <w₁..w_d> <n_u> <u_lb…> <u_ub…>`
    /// then, per layer, one line per weight row followed by one bias line.
    pub fn to_text(&self) -> String {
        let widths = self.widths();
        let mut s = String::new();
        let _ = write!(s, "mlp v1 {} {}", widths[0], widths.len() - 2);
        for w in &widths[1..] {
            let _ = write!(s, " {w}");
        }
        for v in self.u_lb.iter().chain(self.u_ub.iter()) {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
        for layer in &self.params.layers {
            for r in 0..layer.weight.nrows() {
                push_row(&mut s, layer.weight.row(r).iter());
            }
            push_row(&mut s, layer.bias.iter());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty weights file"))?;
        let mut tok = header.split_whitespace();
        if tok.next() != Some("mlp") || tok.next() != Some("v1") {
            return Err(parse_err(1, "expected header 'mlp v1'"));
        }
        let mut int = |what: &str| -> Result<usize> {
            tok.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err(1, &format!("missing or invalid {what}")))
        };
        let nx = int("input width")?;
        let depth = int("depth")?;
        let mut widths = alloc::vec![nx];
        for _ in 0..depth {
            widths.push(int("hidden width")?);
        }
        let nu = int("output width")?;
        widths.push(nu);
        let bounds: Vec<f64> = tok
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(1, &format!("invalid bound '{t}'"))))
            .collect::<Result<_>>()?;
        if bounds.len() != 2 * nu {
            return Err(parse_err(1, &format!("expected {} bounds, found {}", 2 * nu, bounds.len())));
        }
        let mut p = Self::zeros(&widths, &bounds[..nu], &bounds[nu..]).map_err(|e| parse_err(1, &format!("{e}")))?;
        let mut last_line = 1;
        let mut row = |expect: usize| -> Result<Vec<f64>> {
            let (n, line) = lines.next().ok_or_else(|| parse_err(last_line + 1, "unexpected end of file"))?;
            last_line = n;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(n, &format!("invalid number '{t}'"))))
                .collect::<Result<_>>()?;
            if vals.len() != expect {
                return Err(parse_err(n, &format!("expected {expect} values, found {}", vals.len())));
            }
            Ok(vals)
        };
        for layer in p.params.layers.iter_mut() {
            let (rows, cols) = layer.weight.shape();
            for r in 0..rows {
                for (c, v) in row(cols)?.into_iter().enumerate() {
                    layer.weight[(r, c)] = v;
                }
            }
            layer.bias = DVector::from_vec(row(rows)?);
        }
        if let Some((n, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(parse_err(n, &format!("trailing content '{}'", extra.trim())));
        }
        Ok(p)
    }
}

fn push_row<'a>(s: &mut String, vals: impl Iterator<Item = &'a f64>) {
    for (i, v) in vals.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:?}");
    }
    s.push('\n');
}

fn parse_err(line: usize, msg: &str) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamState {
    pub fn new(policy: &MlpPolicy, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: policy.params.zeros_like(),
            v: policy.params.zeros_like(),
        }
    }

    pub fn update(&mut self, policy: &mut MlpPolicy, grad: &Params) -> Result<()> {
        if grad.len() != policy.params.len() || self.m.len() != grad.len() {
            return Err(Error::Dimension("adam: gradient and parameter shapes differ".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((w, g), m), v) in policy
            .params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}
