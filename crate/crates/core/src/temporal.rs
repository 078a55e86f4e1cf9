//! LSTM encoding of a perturbed feature sequence with feature-state fusion.
//!
//! Each map `F_t` is reduced to its channel means `x_t`, the LSTM advances
//! `(h, c)`, and the fused encoding is `H_t = relu([h_t ++ x_t] W_p)`.

use rand::Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{domain_err, shape_err, Result};

/// Gate weights act on the row vector `[x_t ++ h_{t-1}]`, so each is
/// `(input_dim + hidden_dim) x hidden_dim`. Gate order: input, forget,
/// candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weights: [Tensor; 4],
    pub biases: [Tensor; 4],
}

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_CANDIDATE: usize = 2;
pub const GATE_OUTPUT: usize = 3;

impl LstmParams {
    /// Uniform weights in `+-1/sqrt(d)`, zero biases except the forget gate at 1.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let shape = [input_dim + hidden_dim, hidden_dim];
        let weights = std::array::from_fn(|_| Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)));
        let mut biases: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[hidden_dim]));
        biases[GATE_FORGET] = Tensor::full(&[hidden_dim], 1.0);
        LstmParams { input_dim, hidden_dim, weights, biases }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_dim,
            hidden_dim,
            weights: std::array::from_fn(|_| Tensor::zeros(&[input_dim + hidden_dim, hidden_dim])),
            biases: std::array::from_fn(|_| Tensor::zeros(&[hidden_dim])),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(&self.biases).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(&mut self.biases).collect()
    }

    pub fn bind(&self, g: &mut Graph) -> LstmVars {
        LstmVars {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            weights: std::array::from_fn(|i| g.leaf(self.weights[i].clone())),
            biases: std::array::from_fn(|i| g.leaf(self.biases[i].clone())),
        }
    }
}

/// [`LstmParams`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

impl LstmVars {
    pub fn vars(&self) -> Vec<Var> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }
}

/// Projection `W_p` of shape `(d + c) x d`, applied to `[h_t ++ x_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub projection: Tensor,
}

impl FusionParams {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((hidden_dim + input_dim) as f64).sqrt();
        FusionParams {
            projection: Tensor::from_fn(&[hidden_dim + input_dim, hidden_dim], |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.leaf(self.projection.clone())
    }
}

/// One LSTM step on length-`c` input and length-`d` states.
pub fn lstm_step(g: &mut Graph, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let (c, d) = (p.input_dim, p.hidden_dim);
    if g.shape(x) != [c] || g.shape(h_prev) != [d] || g.shape(c_prev) != [d] {
        return Err(shape_err!(
            "lstm step expects x:[{c}], h:[{d}], c:[{d}], got {:?}, {:?}, {:?}",
            g.shape(x),
            g.shape(h_prev),
            g.shape(c_prev)
        ));
    }
    let z = g.concat(&[x, h_prev])?;
    let z = g.reshape(z, &[1, c + d])?;
    let mut gate = |i: usize| -> Result<Var> {
        let a = g.matmul(z, p.weights[i])?;
        let a = g.add_bias(a, p.biases[i])?;
        g.reshape(a, &[d])
    };
    let (ai, af, ag, ao) = (gate(GATE_INPUT)?, gate(GATE_FORGET)?, gate(GATE_CANDIDATE)?, gate(GATE_OUTPUT)?);
    let i = g.sigmoid(ai)?;
    let f = g.sigmoid(af)?;
    let cand = g.tanh(ag)?;
    let o = g.sigmoid(ao)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c_t = g.add(keep, write)?;
    let squashed = g.tanh(c_t)?;
    let h_t = g.mul(o, squashed)?;
    Ok((h_t, c_t))
}

/// `relu([h ++ x] W_p)` as a length-`d` vector.
pub fn fuse(g: &mut Graph, h: Var, x: Var, projection: Var) -> Result<Var> {
    let hx = g.concat(&[h, x])?;
    let n = g.value(hx).len();
    let (rows, d) = match g.shape(projection)[..] {
        [r, d] => (r, d),
        ref s => return Err(shape_err!("projection must be rank 2, got {s:?}")),
    };
    if rows != n {
        return Err(shape_err!("projection has {rows} rows but [h ++ x] has {n} entries"));
    }
    let hx = g.reshape(hx, &[1, n])?;
    let y = g.matmul(hx, projection)?;
    let y = g.reshape(y, &[d])?;
    g.relu(y)
}

/// Graph handles of an encoded sequence.
#[derive(Clone, Debug)]
pub struct EncodingVars {
    /// Fused encodings `H_1..H_T`.
    pub steps: Vec<Var>,
    /// LSTM hidden states `h_1..h_T`.
    pub hidden: Vec<Var>,
    pub final_cell: Var,
}

/// Runs the LSTM from zero state over `features` and fuses every step.
pub fn encode_sequence(g: &mut Graph, features: &[Var], lstm: &LstmVars, projection: Var) -> Result<EncodingVars> {
    let Some(&first) = features.first() else {
        return Err(domain_err!("cannot encode an empty feature sequence"));
    };
    let shape = g.shape(first).to_vec();
    if let Some(bad) = features.iter().find(|&&f| g.shape(f) != shape.as_slice()) {
        return Err(shape_err!("feature maps differ in shape: {:?} vs {:?}", shape, g.shape(*bad)));
    }
    let mut h = g.leaf(Tensor::zeros(&[lstm.hidden_dim]));
    let mut c = g.leaf(Tensor::zeros(&[lstm.hidden_dim]));
    let mut steps = Vec::with_capacity(features.len());
    let mut hidden = Vec::with_capacity(features.len());
    for &f in features {
        let x = g.mean_pool_spatial(f)?;
        (h, c) = lstm_step(g, x, h, c, lstm)?;
        steps.push(fuse(g, h, x, projection)?);
        hidden.push(h);
    }
    Ok(EncodingVars { steps, hidden, final_cell: c })
}

/// Concrete values of an encoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEncoding {
    pub steps: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
    pub final_cell: Tensor,
}

impl TemporalEncoding {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn from_vars(g: &Graph, v: &EncodingVars) -> Self {
        TemporalEncoding {
            steps: v.steps.iter().map(|&s| g.value(s).clone()).collect(),
            hidden: v.hidden.iter().map(|&s| g.value(s).clone()).collect(),
            final_cell: g.value(v.final_cell).clone(),
        }
    }
}

/// Tensor-level convenience over [`encode_sequence`].
pub fn encode(features: &[Tensor], lstm: &LstmParams, fusion: &FusionParams) -> Result<TemporalEncoding> {
    let mut g = Graph::new();
    let fs: Vec<Var> = features.iter().map(|f| g.leaf(f.clone())).collect();
    let lv = lstm.bind(&mut g);
    let wp = fusion.bind(&mut g);
    let enc = encode_sequence(&mut g, &fs, &lv, wp)?;
    Ok(TemporalEncoding::from_vars(&g, &enc))
}
