use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{HeadVars, ToyHeadParams};
use crate::diffcore::{io, Gradients, Graph, Tensor, Var};
use crate::error::{LtfeError, Result};
use crate::liquid::{FieldVars, KernelState, VectorFieldParams};
use crate::temporal::{FusionParams, LstmParams, LstmVars};

use super::config::{ParamGroup, TrainConfig};

/// Scale of the identity `W_0` starts from.
pub const W0_SCALE: f64 = 0.1;

/// Two conv stages, each `k x k` with bias and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub stage1_kernel: Tensor,
    pub stage1_bias: Tensor,
    pub stage2_kernel: Tensor,
    pub stage2_bias: Tensor,
}

const IMAGE_CHANNELS: usize = 3;
const EXTRACTOR_KERNEL: usize = 3;

impl ExtractorParams {
    /// He-uniform kernels, zero biases.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let k = EXTRACTOR_KERNEL;
        let mut conv = |c_in: usize| {
            let bound = (6.0 / (k * k * c_in) as f64).sqrt();
            Tensor::from_fn(&[k, k, c_in, channels], |_| rng.random_range(-bound..bound))
        };
        ExtractorParams {
            stage1_kernel: conv(IMAGE_CHANNELS),
            stage1_bias: Tensor::zeros(&[channels]),
            stage2_kernel: conv(channels),
            stage2_bias: Tensor::zeros(&[channels]),
        }
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extractor: ExtractorParams,
    pub lstm: LstmParams,
    pub fusion: FusionParams,
    pub field: VectorFieldParams,
    /// Initial kernel `W_0`, `k x k x c x c`.
    pub w0: Tensor,
    pub heads: ToyHeadParams,
}

/// Number of tensors in [`ModelParams::tensors`].
pub const PARAM_TENSORS: usize = 23;

impl ModelParams {
    /// Draws every group from `rng` in a fixed order. The field's output layer
    /// is zero, so a fresh model's kernel stays at `W_0 = 0.1 I`.
    pub fn init(cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let k = cfg.kernel_size;
        let extractor = ExtractorParams::init(c, rng);
        let lstm = LstmParams::init(c, cfg.hidden_dim, rng);
        let fusion = FusionParams::init(c, cfg.hidden_dim, rng);
        let field = VectorFieldParams::init(k * k * c * c, cfg.hidden_dim, cfg.field_hidden, rng);
        let heads = ToyHeadParams::init(c, cfg.classes, rng);
        ModelParams { extractor, lstm, fusion, field, w0: KernelState::identity(k, c, W0_SCALE).into_tensor(), heads }
    }

    /// Flat view in a fixed order, tagged with group and name.
    pub fn named(&self) -> Vec<(ParamGroup, String, &Tensor)> {
        let e = &self.extractor;
        let mut out: Vec<(ParamGroup, String, &Tensor)> = vec![
            (ParamGroup::Extractor, "stage1_kernel".into(), &e.stage1_kernel),
            (ParamGroup::Extractor, "stage1_bias".into(), &e.stage1_bias),
            (ParamGroup::Extractor, "stage2_kernel".into(), &e.stage2_kernel),
            (ParamGroup::Extractor, "stage2_bias".into(), &e.stage2_bias),
        ];
        let gates = ["input", "forget", "candidate", "output"];
        for (i, w) in self.lstm.weights.iter().enumerate() {
            out.push((ParamGroup::Lstm, format!("lstm_{}_weights", gates[i]), w));
        }
        for (i, b) in self.lstm.biases.iter().enumerate() {
            out.push((ParamGroup::Lstm, format!("lstm_{}_bias", gates[i]), b));
        }
        out.push((ParamGroup::Fusion, "projection".into(), &self.fusion.projection));
        let field = ["state_weights", "encoding_weights", "hidden_bias", "output_weights", "output_bias"];
        for (name, t) in field.iter().zip(self.field.tensors()) {
            out.push((ParamGroup::Field, format!("field_{name}"), t));
        }
        out.push((ParamGroup::W0, "w0".into(), &self.w0));
        let heads = ["classifier", "classifier_bias", "regressor", "regressor_bias"];
        for (name, t) in heads.iter().zip(self.heads.tensors()) {
            out.push((ParamGroup::Heads, (*name).into(), t));
        }
        debug_assert_eq!(out.len(), PARAM_TENSORS);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, _, t)| t).collect()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.named().into_iter().map(|(g, _, _)| g).collect()
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let e = &mut self.extractor;
        let mut out: Vec<&mut Tensor> =
            vec![&mut e.stage1_kernel, &mut e.stage1_bias, &mut e.stage2_kernel, &mut e.stage2_bias];
        out.extend(self.lstm.tensors_mut());
        out.push(&mut self.fusion.projection);
        out.extend(self.field.tensors_mut());
        out.push(&mut self.w0);
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| g.leaf(t.clone())).collect();
        ModelVars::from_flat(&vars, self.lstm.input_dim, self.lstm.hidden_dim)
    }
}

/// [`ModelParams`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub extractor: [Var; 4],
    pub lstm: LstmVars,
    pub projection: Var,
    pub field: FieldVars,
    pub w0: Var,
    pub heads: HeadVars,
}

impl ModelVars {
    /// Rebuilds the handles from a flat slice in [`ModelParams::named`] order.
    pub fn from_flat(v: &[Var], input_dim: usize, hidden_dim: usize) -> Self {
        assert_eq!(v.len(), PARAM_TENSORS, "flat parameter list has the wrong length");
        ModelVars {
            extractor: [v[0], v[1], v[2], v[3]],
            lstm: LstmVars {
                input_dim,
                hidden_dim,
                weights: [v[4], v[5], v[6], v[7]],
                biases: [v[8], v[9], v[10], v[11]],
            },
            projection: v[12],
            field: FieldVars {
                state_weights: v[13],
                encoding_weights: v[14],
                hidden_bias: v[15],
                output_weights: v[16],
                output_bias: v[17],
            },
            w0: v[18],
            heads: HeadVars { classifier: v[19], classifier_bias: v[20], regressor: v[21], regressor_bias: v[22] },
        }
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.extractor.to_vec();
        out.extend(self.lstm.vars());
        out.push(self.projection);
        out.extend(self.field.vars());
        out.push(self.w0);
        out.extend(self.heads.vars());
        out
    }
}

/// Parameters plus one momentum buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
}

impl ModelState {
    pub fn new(params: ModelParams) -> Self {
        let velocity = params.tensors().into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        ModelState { params, velocity }
    }

    /// SGD with momentum: `v = mu v + g`, `p -= lr v`, on every group not
    /// frozen in `cfg`. Gradients are first rescaled so their joint L2 norm is
    /// at most `cfg.grad_clip` (when positive). Returns the pre-clip norm.
    pub fn apply_gradients(&mut self, grads: &[Tensor], cfg: &TrainConfig) -> Result<f64> {
        let groups = self.params.groups();
        if grads.len() != groups.len() {
            return Err(LtfeError::Shape(format!("{} gradients for {} parameters", grads.len(), groups.len())));
        }
        let live: Vec<bool> = groups.iter().map(|&g| !cfg.is_frozen(g)).collect();
        let norm = grads
            .iter()
            .zip(&live)
            .filter(|(_, &l)| l)
            .flat_map(|(g, _)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(LtfeError::Numerical(format!("gradient norm is {norm}")));
        }
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { Some(cfg.grad_clip / norm) } else { None };
        let params = self.params.tensors_mut();
        for (((p, v), g), &l) in params.into_iter().zip(&mut self.velocity).zip(grads).zip(&live) {
            if !l {
                continue;
            }
            p.expect_same_shape(g)?;
            let vd = v.data_mut();
            for ((vi, &gi), pi) in vd.iter_mut().zip(g.data()).zip(p.data_mut()) {
                let gi = match scale {
                    Some(s) => gi * s,
                    None => gi,
                };
                *vi = cfg.momentum * *vi + gi;
                *pi -= cfg.lr * *vi;
            }
        }
        Ok(norm)
    }

    /// Gradients of every parameter in flat order.
    pub fn collect_gradients(vars: &ModelVars, grads: &Gradients) -> Vec<Tensor> {
        vars.flat().into_iter().map(|v| grads.wrt(v)).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: TrainConfig,
    /// Parameters in order, followed by their momentum buffers in the same order.
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "ltfe-checkpoint-1";

/// JSON manifest path stored next to a checkpoint.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes the tensors to `path` and the manifest to `path.json`.
pub fn save_checkpoint(state: &ModelState, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (group, name, t) in state.params.named() {
        io::encode(t, &mut bytes)?;
        entries.push(TensorEntry { name, group, shape: t.shape().to_vec() });
    }
    for t in &state.velocity {
        io::encode(t, &mut bytes)?;
    }
    let manifest = Manifest { format: CHECKPOINT_FORMAT.into(), config: cfg.clone(), tensors: entries };
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |source| LtfeError::Io { path: p, source }
    };
    std::fs::write(path, bytes).map_err(io_err(path))?;
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text).map_err(io_err(&mpath))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, TrainConfig)> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|source| LtfeError::Io {
        path: mpath.display().to_string(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| LtfeError::Config(format!("{}: {e}", mpath.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(LtfeError::Config(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let tensors = io::read_all(path)?;
    let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let n = PARAM_TENSORS;
    if tensors.len() != 2 * n || manifest.tensors.len() != n {
        return Err(LtfeError::Config(format!(
            "checkpoint holds {} tensors and lists {}, expected {} and {n}",
            tensors.len(),
            manifest.tensors.len(),
            2 * n
        )));
    }
    for (slot, t) in params.tensors_mut().into_iter().zip(&tensors[..n]) {
        slot.expect_same_shape(t)?;
        *slot = t.clone();
    }
    let state = ModelState { params, velocity: tensors[n..].to_vec() };
    for (p, v) in state.params.tensors().into_iter().zip(&state.velocity) {
        p.expect_same_shape(v)?;
    }
    Ok((state, cfg))
}
