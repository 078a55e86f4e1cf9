//! Proposal-level alignment losses and the toy detection heads.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{domain_err, shape_err, Result};

/// Pooled proposal features with their labels and optional box targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalBatch {
    /// `m x n` feature matrix, one row per proposal.
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// `m x 4` regression targets.
    pub boxes: Option<Tensor>,
}

impl ProposalBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, boxes: Option<Tensor>) -> Result<Self> {
        let m = match features.shape()[..] {
            [m, _] => m,
            ref s => return Err(shape_err!("proposal features must be m x n, got {s:?}")),
        };
        if labels.len() != m {
            return Err(shape_err!("{} labels for {m} proposals", labels.len()));
        }
        if let Some(b) = &boxes {
            if b.shape() != [m, 4] {
                return Err(shape_err!("box targets must be {m} x 4, got {:?}", b.shape()));
            }
        }
        Ok(ProposalBatch { features, labels, boxes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same proposals and labels, different features.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.boxes.clone())
    }

    fn check_paired(&self, other: &ProposalBatch) -> Result<()> {
        self.features.expect_same_shape(&other.features)?;
        if self.labels != other.labels {
            return Err(domain_err!("paired batches carry different labels"));
        }
        Ok(())
    }
}

/// Linear classifier and box regressor over `n`-dimensional proposal features.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyHeadParams {
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
    pub regressor: Tensor,
    pub regressor_bias: Tensor,
}

impl ToyHeadParams {
    pub fn init(feature_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        ToyHeadParams {
            classifier: u(&[feature_dim, num_classes]),
            classifier_bias: Tensor::zeros(&[num_classes]),
            regressor: u(&[feature_dim, 4]),
            regressor_bias: Tensor::zeros(&[4]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.shape()[1]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.classifier, &self.classifier_bias, &self.regressor, &self.regressor_bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.classifier,
            &mut self.classifier_bias,
            &mut self.regressor,
            &mut self.regressor_bias,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            classifier: g.leaf(self.classifier.clone()),
            classifier_bias: g.leaf(self.classifier_bias.clone()),
            regressor: g.leaf(self.regressor.clone()),
            regressor_bias: g.leaf(self.regressor_bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub classifier: Var,
    pub classifier_bias: Var,
    pub regressor: Var,
    pub regressor_bias: Var,
}

impl HeadVars {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.classifier, self.classifier_bias, self.regressor, self.regressor_bias]
    }

    pub fn logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let z = g.matmul(features, self.classifier)?;
        g.add_bias(z, self.classifier_bias)
    }

    pub fn boxes(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let z = g.matmul(features, self.regressor)?;
        g.add_bias(z, self.regressor_bias)
    }
}

/// Alignment weights `lambda1` (intra) and `lambda2` (inter).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(domain_err!("loss weights must be non-negative, got {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_align: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_total: f64,
}

impl LossBundle {
    /// `l_align = lambda1 l_intra + lambda2 l_inter`, `l_total = l_cls + l_reg + l_align`.
    pub fn compose(l_intra: f64, l_inter: f64, l_cls: f64, l_reg: f64, w: LossWeights) -> Self {
        let l_align = w.lambda1 * l_intra + w.lambda2 * l_inter;
        LossBundle {
            l_intra,
            l_inter,
            l_align,
            l_cls,
            l_reg,
            l_total: l_cls + l_reg + l_align,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_intra, self.l_inter, self.l_align, self.l_cls, self.l_reg, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn rows(g: &Graph, p: Var, p_hat: Var) -> Result<usize> {
    if g.shape(p) != g.shape(p_hat) || g.shape(p).len() != 2 {
        return Err(shape_err!(
            "paired proposal features must share an m x n shape, got {:?} and {:?}",
            g.shape(p),
            g.shape(p_hat)
        ));
    }
    Ok(g.shape(p)[0])
}

/// Mean over proposals of the squared L2 distance between paired rows.
pub fn intra_loss(g: &mut Graph, p: Var, p_hat: Var) -> Result<Var> {
    let m = rows(g, p, p_hat)?;
    if m == 0 {
        return Err(domain_err!("no proposals"));
    }
    let d = g.sub(p, p_hat)?;
    let d = g.square(d)?;
    let s = g.sum(d)?;
    g.scale(s, 1.0 / m as f64)
}

/// Mean over `i` of `-log(exp(s_ii) / sum_j exp(s_ij))` with cosine
/// similarities `s_ij = cos(P_i, P_hat_j)`. The sum runs over `j != i`
/// unless `include_positive` is set.
pub fn inter_loss(g: &mut Graph, p: Var, p_hat: Var, include_positive: bool) -> Result<Var> {
    let m = rows(g, p, p_hat)?;
    if m < 2 {
        return Err(domain_err!("inter-class loss needs at least 2 proposals, got {m}"));
    }
    let a = g.row_normalize(p)?;
    let b = g.row_normalize(p_hat)?;
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let lse = g.logsumexp_rows(sim, !include_positive)?;
    let diag = g.gather(sim, (0..m).collect::<Vec<_>>().into())?;
    let per_row = g.sub(lse, diag)?;
    g.mean(per_row)
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(domain_err!("label {l} out of range for {classes} classes")),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy of `features` under the classifier head.
pub fn cross_entropy(g: &mut Graph, features: Var, labels: &Rc<[usize]>, heads: &HeadVars) -> Result<Var> {
    let logits = heads.logits(g, features)?;
    check_labels(labels, g.shape(logits)[1])?;
    let lse = g.logsumexp_rows(logits, false)?;
    let picked = g.gather(logits, labels.clone())?;
    let nll = g.sub(lse, picked)?;
    g.mean(nll)
}

/// Smooth-L1 box loss, summed over the four coordinates and averaged over proposals.
pub fn box_loss(g: &mut Graph, features: Var, targets: &Tensor, heads: &HeadVars) -> Result<Var> {
    let pred = heads.boxes(g, features)?;
    let t = g.leaf(targets.clone());
    let d = g.sub(pred, t)?;
    let l = g.unary(d, crate::diffcore::Unary::SmoothL1)?;
    let s = g.sum(l)?;
    g.scale(s, 1.0 / targets.shape()[0] as f64)
}

/// `(l_cls, l_reg)`, each the average of the loss on the original and on the
/// evolved proposal features. `l_reg` is zero without box targets.
pub fn head_losses(
    g: &mut Graph,
    p: Var,
    p_hat: Var,
    labels: &Rc<[usize]>,
    boxes: Option<&Tensor>,
    heads: &HeadVars,
) -> Result<(Var, Var)> {
    let m = rows(g, p, p_hat)?;
    if labels.len() != m {
        return Err(shape_err!("{} labels for {m} proposals", labels.len()));
    }
    let a = cross_entropy(g, p, labels, heads)?;
    let b = cross_entropy(g, p_hat, labels, heads)?;
    let cls = g.add(a, b)?;
    let cls = g.scale(cls, 0.5)?;
    let reg = match boxes {
        Some(t) => {
            let a = box_loss(g, p, t, heads)?;
            let b = box_loss(g, p_hat, t, heads)?;
            let r = g.add(a, b)?;
            g.scale(r, 0.5)?
        }
        None => g.scalar(0.0),
    };
    Ok((cls, reg))
}

/// Graph handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_intra: Var,
    pub l_inter: Var,
    pub l_align: Var,
    pub l_cls: Var,
    pub l_reg: Var,
    pub l_total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBundle {
        let v = |x: Var| g.value(x).item();
        LossBundle {
            l_intra: v(self.l_intra),
            l_inter: v(self.l_inter),
            l_align: v(self.l_align),
            l_cls: v(self.l_cls),
            l_reg: v(self.l_reg),
            l_total: v(self.l_total),
        }
    }
}

/// Records every loss term for paired proposal features.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    p: Var,
    p_hat: Var,
    labels: &Rc<[usize]>,
    boxes: Option<&Tensor>,
    heads: &HeadVars,
    weights: LossWeights,
    include_positive: bool,
) -> Result<LossVars> {
    weights.validate()?;
    let l_intra = intra_loss(g, p, p_hat)?;
    let l_inter = inter_loss(g, p, p_hat, include_positive)?;
    let (l_cls, l_reg) = head_losses(g, p, p_hat, labels, boxes, heads)?;
    let a = g.scale(l_intra, weights.lambda1)?;
    let b = g.scale(l_inter, weights.lambda2)?;
    let l_align = g.add(a, b)?;
    let base = g.add(l_cls, l_reg)?;
    let l_total = g.add(base, l_align)?;
    Ok(LossVars { l_intra, l_inter, l_align, l_cls, l_reg, l_total })
}

fn with_pair<T>(
    p: &ProposalBatch,
    p_hat: &ProposalBatch,
    f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
    read: impl FnOnce(&Graph, Var) -> T,
) -> Result<T> {
    p.check_paired(p_hat)?;
    let mut g = Graph::new();
    let a = g.leaf(p.features.clone());
    let b = g.leaf(p_hat.features.clone());
    let out = f(&mut g, a, b)?;
    Ok(read(&g, out))
}

/// Tensor-level [`intra_loss`].
pub fn intra(p: &ProposalBatch, p_hat: &ProposalBatch) -> Result<f64> {
    with_pair(p, p_hat, intra_loss, |g, v| g.value(v).item())
}

/// Tensor-level [`inter_loss`].
pub fn inter(p: &ProposalBatch, p_hat: &ProposalBatch, include_positive: bool) -> Result<f64> {
    with_pair(p, p_hat, |g, a, b| inter_loss(g, a, b, include_positive), |g, v| g.value(v).item())
}

/// Tensor-level [`head_losses`].
pub fn heads(p: &ProposalBatch, p_hat: &ProposalBatch, params: &ToyHeadParams) -> Result<(f64, f64)> {
    p.check_paired(p_hat)?;
    let mut g = Graph::new();
    let hv = params.bind(&mut g);
    let a = g.leaf(p.features.clone());
    let b = g.leaf(p_hat.features.clone());
    let labels: Rc<[usize]> = p.labels.clone().into();
    let (c, r) = head_losses(&mut g, a, b, &labels, p.boxes.as_ref(), &hv)?;
    Ok((g.value(c).item(), g.value(r).item()))
}

/// Tensor-level [`total_loss`].
pub fn losses(
    p: &ProposalBatch,
    p_hat: &ProposalBatch,
    params: &ToyHeadParams,
    weights: LossWeights,
    include_positive: bool,
) -> Result<LossBundle> {
    p.check_paired(p_hat)?;
    let mut g = Graph::new();
    let hv = params.bind(&mut g);
    let a = g.leaf(p.features.clone());
    let b = g.leaf(p_hat.features.clone());
    let labels: Rc<[usize]> = p.labels.clone().into();
    let lv = total_loss(&mut g, a, b, &labels, p.boxes.as_ref(), &hv, weights, include_positive)?;
    Ok(lv.values(&g))
}
