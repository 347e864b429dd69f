//! Backbone network, forward pass with additive weight deltas, and its
//! reverse-mode pullback.

use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

/// Affine map `y = W x + b`; `weight` is out × in, `bias` is out × 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let std = 1.0 / (inputs as f64).sqrt();
        Dense {
            weight: Matrix::from_fn(outputs, inputs, |_, _| std * rng.normal()),
            bias: Matrix::zeros(outputs, 1),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Matrix::zeros(outputs, inputs),
            bias: Matrix::zeros(outputs, 1),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// Row-batch application `X Wᵀ + 1 bᵀ`.
    fn apply(&self, x: &Matrix) -> Matrix {
        let mut z = x.dot_t(&self.weight);
        z.add_row_broadcast(&self.bias);
        z
    }
}

impl Params for Dense {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
}

/// Frozen-anchor network: linear input projection, tanh hidden layers, and a
/// classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub input: Dense,
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

impl Backbone {
    pub fn init(
        input_dim: usize,
        width: usize,
        hidden_layers: usize,
        num_classes: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Backbone {
            input: Dense::init(input_dim, width, rng),
            hidden: (0..hidden_layers)
                .map(|_| Dense::init(width, width, rng))
                .collect(),
            head: Dense::init(width, num_classes, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.inputs()
    }

    pub fn width(&self) -> usize {
        self.input.outputs()
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn num_hidden(&self) -> usize {
        self.hidden.len()
    }
}

impl Params for Backbone {
    fn params(&self) -> Vec<&Matrix> {
        let mut out = self.input.params();
        for layer in &self.hidden {
            out.extend(layer.params());
        }
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.input.params_mut();
        for layer in &mut self.hidden {
            out.extend(layer.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = vec!["input.weight".to_string(), "input.bias".to_string()];
        for i in 0..self.hidden.len() {
            out.push(format!("hidden{i}.weight"));
            out.push(format!("hidden{i}.bias"));
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    /// `acts[0]` is the input projection, `acts[ℓ+1]` the output of hidden layer `ℓ`.
    acts: Vec<Matrix>,
    effective: Vec<Matrix>,
    pub logits: Matrix,
}

/// Gradients of a batch loss with respect to the head, each hidden-layer
/// delta, and optionally the backbone body.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub head: Dense,
    /// `∂L/∂ΔW` per hidden layer (equal to the effective-weight gradient).
    pub deltas: Vec<Matrix>,
    pub input: Option<Dense>,
    pub hidden_bias: Option<Vec<Matrix>>,
}

fn check_deltas(backbone: &Backbone, deltas: &[Option<Matrix>]) -> Result<()> {
    if deltas.len() > backbone.num_hidden() {
        return Err(Error::dim(
            "forward",
            format!("{} deltas for {} hidden layers", deltas.len(), backbone.num_hidden()),
        ));
    }
    for (i, d) in deltas.iter().enumerate() {
        if let Some(d) = d {
            if d.shape() != backbone.hidden[i].weight.shape() {
                return Err(Error::dim(
                    "forward",
                    format!("delta {i} is {:?}, layer is {:?}", d.shape(), backbone.hidden[i].weight.shape()),
                ));
            }
        }
    }
    Ok(())
}

/// Runs `x` (one sample per row) through the backbone body with hidden layer
/// `ℓ` using `W_ℓ + deltas[ℓ]`, then through `head`.
pub fn forward(
    backbone: &Backbone,
    head: &Dense,
    deltas: &[Option<Matrix>],
    x: &Matrix,
) -> Result<ForwardCache> {
    if x.cols() != backbone.input_dim() {
        return Err(Error::dim(
            "forward",
            format!("input width {} vs {}", x.cols(), backbone.input_dim()),
        ));
    }
    if head.inputs() != backbone.width() {
        return Err(Error::dim("forward", "head width differs from backbone width"));
    }
    check_deltas(backbone, deltas)?;

    let mut acts = Vec::with_capacity(backbone.num_hidden() + 1);
    let mut effective = Vec::with_capacity(backbone.num_hidden());
    acts.push(backbone.input.apply(x));
    for (l, layer) in backbone.hidden.iter().enumerate() {
        let delta = deltas.get(l).and_then(Option::as_ref);
        let w = match delta {
            Some(d) => layer.weight.add(d),
            None => layer.weight.clone(),
        };
        let mut z = acts[l].dot_t(&w);
        z.add_row_broadcast(&layer.bias);
        acts.push(z.map(f64::tanh));
        effective.push(w);
    }
    let logits = head.apply(acts.last().expect("at least the input projection"));
    Ok(ForwardCache {
        input: x.clone(),
        acts,
        effective,
        logits,
    })
}

/// Pulls `∂L/∂logits` back through the network. With `full = true` the input
/// projection and hidden biases are differentiated too (used for pretraining;
/// hidden weight gradients then live in `deltas`).
pub fn backward(head: &Dense, cache: &ForwardCache, dlogits: &Matrix, full: bool) -> NetGrads {
    let last = cache.acts.last().expect("non-empty");
    let head_grad = Dense {
        weight: dlogits.t_dot(last),
        bias: dlogits.column_sums(),
    };
    let mut dh = dlogits.dot(&head.weight);
    let layers = cache.effective.len();
    let mut deltas = vec![Matrix::zeros(0, 0); layers];
    let mut biases = vec![Matrix::zeros(0, 0); layers];
    for l in (0..layers).rev() {
        let out = &cache.acts[l + 1];
        let dz = dh.zip_with(out, |g, h| g * (1.0 - h * h));
        deltas[l] = dz.t_dot(&cache.acts[l]);
        biases[l] = dz.column_sums();
        dh = dz.dot(&cache.effective[l]);
    }
    let input = full.then(|| Dense {
        weight: dh.t_dot(&cache.input),
        bias: dh.column_sums(),
    });
    NetGrads {
        head: head_grad,
        deltas,
        input,
        hidden_bias: full.then_some(biases),
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits,
/// multiplied by `scale`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize], scale: f64) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if n != labels.len() {
        return Err(Error::dim("cross_entropy", format!("{n} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} with {c} classes")));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + sum.ln();
        loss += log_z - row[labels[i]];
        let g = grad.row_mut(i);
        for j in 0..c {
            g[j] = (row[j] - log_z).exp();
        }
        g[labels[i]] -= 1.0;
    }
    let inv = scale / n as f64;
    Ok((loss / n as f64, grad.scale(inv)))
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Row-wise argmax (first maximum wins).
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
