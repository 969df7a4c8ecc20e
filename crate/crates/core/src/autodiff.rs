//! Reverse-mode differentiation over row-batched dense operations.
//!
//! A [`Tape`] records one forward pass. Values are cached on the nodes and
//! [`Tape::backward`] walks them once in reverse. Parameter leaves carry the
//! flat parameter index of the owning model so gradients can be collected
//! even when a parameter is used more than once.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Probabilities are clamped to this before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Negative-side slope of the rectifier. A plain rectifier lets a narrow
/// layer switch off entirely for some inputs, after which nothing upstream
/// of it receives gradient for them.
pub const RELU_LEAK: f64 = 0.01;

/// NaN passes through.
#[inline]
pub fn leaky_relu<T: Real>(v: T) -> T {
    if v < T::zero() {
        v * T::from_f64(RELU_LEAK)
    } else {
        v
    }
}

/// Clamp a probability away from zero before taking its log. NaN passes
/// through so divergence stays visible in the loss.
pub fn floor_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(PROB_FLOOR)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    /// `x[n x in] * w[in x out] + b[out]`
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    /// mean over rows of `-log softmax(logits)[label]`
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    /// scalar loss whose gradient wrt `input` was computed elsewhere
    External { input: Var, grad: Tensor<T> },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, index: usize, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(index), true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if bv.len() != wv.shape()[1] {
            return Err(Error::dim(
                "linear",
                format!("bias {:?} for weight {:?}", bv.shape(), wv.shape()),
            ));
        }
        let mut y = matmul(xv, wv)?;
        let out = bv.len();
        let bias = bv.data().to_vec();
        for row in y.data_mut().chunks_exact_mut(out) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o = *o + bb;
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// Leaky rectifier with negative slope [`RELU_LEAK`].
    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(leaky_relu);
        let rg = self.needs(x);
        self.push(y, Op::Relu(x), rg)
    }

    /// Fused softmax + mean cross-entropy over rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{n} rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let probs = softmax_rows(lv);
        let mut loss = 0f64;
        for (i, &l) in labels.iter().enumerate() {
            loss -= floor_prob(probs.row(i)[l].as_f64()).ln();
        }
        loss /= n as f64;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Attach a scalar loss term `value` whose gradient wrt `input` is `grad`.
    pub fn external_loss(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::dim(
                "external_loss",
                format!("grad {:?} for input {:?}", grad.shape(), self.value(input).shape()),
            ));
        }
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(value), Op::External { input, grad }, rg))
    }

    /// `sum_i w_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms
            .iter()
            .map(|&(t, w)| w * self.scalar(t).as_f64())
            .sum();
        let rg = terms.iter().any(|&(t, _)| self.needs(t));
        self.push(Tensor::scalar(T::from_f64(v)), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Propagate `seed * d loss` back through the recorded ops.
    /// May be called once per tape.
    pub fn backward(&mut self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), seed));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    if self.needs(x) {
                        let dx = matmul_nt(&g, self.value(w))?;
                        accumulate(&mut grads, x, dx);
                    }
                    if self.needs(w) {
                        let dw = matmul_tn(self.value(x), &g)?;
                        accumulate(&mut grads, w, dw);
                    }
                    if self.needs(b) {
                        let out = g.cols();
                        let mut acc = vec![0f64; out];
                        for r in 0..g.rows() {
                            for (a, v) in acc.iter_mut().zip(g.row(r)) {
                                *a += v.as_f64();
                            }
                        }
                        let db = Tensor::from_parts(
                            self.value(b).shape().to_vec(),
                            acc.into_iter().map(T::from_f64).collect(),
                        )?;
                        accumulate(&mut grads, b, db);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| if yv < T::zero() { gv * T::from_f64(RELU_LEAK) } else { gv })
                        .collect();
                    accumulate(&mut grads, x, Tensor::from_parts(g.shape().to_vec(), data)?);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = g.data()[0].as_f64() / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[l] = row[l] - T::one();
                        row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * s));
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::External { input, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *input, grad.map(|v| v * s));
                }
                Op::WeightedSum(terms) => {
                    let s = g.data()[0].as_f64();
                    for &(t, w) in terms.clone().iter() {
                        if self.needs(t) {
                            accumulate(&mut grads, t, Tensor::scalar(T::from_f64(s * w)));
                        }
                    }
                }
            }
        }

        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(idx) = node.op {
                params.push((idx, Var(i)));
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients left on the leaves after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Sum of gradients over every leaf registered with parameter `index`.
    pub fn param(&self, index: usize) -> Option<Tensor<T>> {
        let mut out: Option<Tensor<T>> = None;
        for &(idx, var) in &self.params {
            if idx != index {
                continue;
            }
            if let Some(g) = &self.grads[var.0] {
                match &mut out {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| T::from_f64(v / s)));
    }
    Tensor::from_parts(logits.shape().to_vec(), out).expect("same shape")
}
