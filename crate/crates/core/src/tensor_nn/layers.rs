use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{shape_err, Graph, Tensor, TensorError, Var};

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `w · x + b`.
pub fn dense(g: &mut Graph<'_>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let wx = g.matvec(w, x)?;
    g.add(wx, b)
}

/// Inverted-dropout mask: zero with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Row-major `n x n` orthogonal matrix from Gram-Schmidt on Gaussian rows.
pub fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_out * fan_in).map(|_| rng.random_range(-limit..limit)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmActivation {
    Tanh,
    Relu,
}

impl LstmActivation {
    fn apply(self, g: &mut Graph<'_>, x: Var) -> Result<Var, TensorError> {
        match self {
            LstmActivation::Tanh => g.tanh(x),
            LstmActivation::Relu => g.relu(x),
        }
    }
}

impl std::str::FromStr for LstmActivation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(LstmActivation::Tanh),
            "relu" => Ok(LstmActivation::Relu),
            _ => Err(format!("unknown lstm activation {s:?} (expected tanh or relu)")),
        }
    }
}

/// Gate weights over the concatenation `[h_prev, x_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub input: usize,
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_c: Tensor,
    pub w_o: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    /// Orthogonal recurrent block, Glorot input block, forget bias 1.
    pub fn init<R: Rng + ?Sized>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let mut gate = || {
            let rec = orthogonal(hidden, rng);
            let inp = glorot_uniform(hidden, input, rng);
            let mut data = Vec::with_capacity(hidden * (hidden + input));
            for r in 0..hidden {
                data.extend_from_slice(&rec[r * hidden..(r + 1) * hidden]);
                data.extend_from_slice(&inp[r * input..(r + 1) * input]);
            }
            Tensor::matrix(hidden, hidden + input, data).expect("consistent gate shape")
        };
        let (w_f, w_i, w_c, w_o) = (gate(), gate(), gate(), gate());
        let zeros = || Tensor::zeros(vec![hidden]);
        LstmParams {
            hidden,
            input,
            w_f,
            w_i,
            w_c,
            w_o,
            b_f: Tensor::vector(vec![1.0; hidden]).expect("finite"),
            b_i: zeros(),
            b_c: zeros(),
            b_o: zeros(),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = || Tensor::zeros(vec![hidden, hidden + input]);
        let b = || Tensor::zeros(vec![hidden]);
        LstmParams { hidden, input, w_f: w(), w_i: w(), w_c: w(), w_o: w(), b_f: b(), b_i: b(), b_c: b(), b_o: b() }
    }

    pub fn check(&self) -> Result<(), TensorError> {
        let (h, i) = (self.hidden, self.input);
        for w in [&self.w_f, &self.w_i, &self.w_c, &self.w_o] {
            if w.shape() != [h, h + i] {
                return Err(shape_err("lstm", format!("gate weight {:?}, expected [{h}, {}]", w.shape(), h + i)));
            }
        }
        for b in [&self.b_f, &self.b_i, &self.b_c, &self.b_o] {
            if b.shape() != [h] {
                return Err(shape_err("lstm", format!("gate bias {:?}, expected [{h}]", b.shape())));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [&self.w_f, &self.w_i, &self.w_c, &self.w_o, &self.b_f, &self.b_i, &self.b_c, &self.b_o]
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, requires_grad: bool) -> LstmVars {
        let [w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o] = self.tensors().map(|t| g.param(t, requires_grad));
        LstmVars { hidden: self.hidden, w_f, w_i, w_c, w_o, b_f, b_i, b_c, b_o }
    }
}

/// Graph handles of an [`LstmParams`].
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub hidden: usize,
    pub w_f: Var,
    pub w_i: Var,
    pub w_c: Var,
    pub w_o: Var,
    pub b_f: Var,
    pub b_i: Var,
    pub b_c: Var,
    pub b_o: Var,
}

impl LstmVars {
    pub fn all(&self) -> [Var; 8] {
        [self.w_f, self.w_i, self.w_c, self.w_o, self.b_f, self.b_i, self.b_c, self.b_o]
    }
}

/// One LSTM step; returns `(h_t, c_t)`.
///
/// Gates use the logistic sigmoid. `activation` is applied to the candidate
/// state and to the cell state on output.
pub fn lstm_step(
    g: &mut Graph<'_>,
    p: &LstmVars,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    activation: LstmActivation,
) -> Result<(Var, Var), TensorError> {
    let hx = g.concat(&[h_prev, x_t])?;
    let f_pre = dense(g, hx, p.w_f, p.b_f)?;
    let f = g.sigmoid(f_pre)?;
    let i_pre = dense(g, hx, p.w_i, p.b_i)?;
    let i = g.sigmoid(i_pre)?;
    let c_pre = dense(g, hx, p.w_c, p.b_c)?;
    let cand = activation.apply(g, c_pre)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c_t = g.add(keep, write)?;
    let o_pre = dense(g, hx, p.w_o, p.b_o)?;
    let o = g.sigmoid(o_pre)?;
    let c_act = activation.apply(g, c_t)?;
    let h_t = g.mul(o, c_act)?;
    Ok((h_t, c_t))
}

/// Result of [`attention`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Softmax weights over the valid steps, in step order.
    pub weights: Var,
    /// `Some(w_j * x_j)` for valid steps, `None` for masked ones.
    pub outputs: Vec<Option<Var>>,
}

/// Scores each valid step by `score · x_j`, normalizes with a softmax over the
/// valid steps only, and rescales every valid step by its weight.
pub fn attention(
    g: &mut Graph<'_>,
    steps: &[Var],
    mask: &[bool],
    score: Var,
) -> Result<AttentionOutput, TensorError> {
    if steps.len() != mask.len() {
        return Err(shape_err("attention", format!("{} steps, {} mask entries", steps.len(), mask.len())));
    }
    let valid: Vec<usize> = (0..steps.len()).filter(|&j| mask[j]).collect();
    if valid.is_empty() {
        return Err(TensorError::Invalid("attention over an all-masked sequence".into()));
    }
    let scores = valid.iter().map(|&j| g.dot(score, steps[j])).collect::<Result<Vec<_>, _>>()?;
    let stacked = g.stack(&scores)?;
    let weights = g.softmax(stacked)?;
    let mut outputs = vec![None; steps.len()];
    for (k, &j) in valid.iter().enumerate() {
        let w = g.pick(weights, k)?;
        outputs[j] = Some(g.scale_by(steps[j], w)?);
    }
    Ok(AttentionOutput { weights, outputs })
}
