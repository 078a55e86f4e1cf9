use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{box_loss, cross_entropy, total_loss, LossBundle, LossVars};
use crate::diffcore::{Graph, Padding, Rect, Tensor, Var};
use crate::error::{LtfeError, Result};
use crate::liquid::{adjust_feature, horizons, rk4_solve};
use crate::perturb::{evolve_sequence_graph, EvolutionSchedule};
use crate::temporal::encode_sequence;

use super::config::TrainConfig;
use super::model::{ModelParams, ModelState, ModelVars};
use super::scene::{generate_scenes, ToyScene};

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 0,
    Scenes = 1,
    Order = 2,
    Perturbation = 3,
    EvalScenes = 4,
    Shift = 5,
    Inference = 6,
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

fn conv_stage(g: &mut Graph, x: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
    let y = g.conv2d(x, kernel, padding)?;
    let y = g.add_bias(y, bias)?;
    g.relu(y)
}

/// `F_0`: the extractor output at stage `layer_index`.
fn base_feature(g: &mut Graph, mv: &ModelVars, image: Var, cfg: &TrainConfig) -> Result<Var> {
    let [k1, b1, k2, b2] = mv.extractor;
    let f = conv_stage(g, image, k1, b1, cfg.padding)?;
    if cfg.layer_index == 1 {
        Ok(f)
    } else {
        conv_stage(g, f, k2, b2, cfg.padding)
    }
}

/// Runs the extractor stages after the evolved one, then pools proposals.
fn proposal_features(g: &mut Graph, mv: &ModelVars, f: Var, rects: &Rc<[Rect]>, cfg: &TrainConfig) -> Result<Var> {
    let [_, _, k2, b2] = mv.extractor;
    let f = if cfg.layer_index == 1 { conv_stage(g, f, k2, b2, cfg.padding)? } else { f };
    g.roi_mean_pool(f, rects.clone())
}

/// `F_hat` from `F_0` with a `steps`-long perturbation run: only the final
/// encoding's kernel is solved.
fn evolved_feature(
    g: &mut Graph,
    mv: &ModelVars,
    f0: Var,
    schedule: &EvolutionSchedule,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let seq = evolve_sequence_graph(g, f0, schedule, cfg.evolve_options(), rng)?;
    let enc = encode_sequence(g, &seq, &mv.lstm, mv.projection)?;
    let taus = horizons(g, &enc.steps, &cfg.ode)?;
    let last = enc.steps.len() - 1;
    let w = rk4_solve(g, &mv.field, mv.w0, enc.steps[last], taus[last], &cfg.ode)?;
    adjust_feature(g, f0, w, cfg.padding)
}

/// Scene data in graph-ready form.
pub struct SceneBatch {
    pub rects: Rc<[Rect]>,
    pub labels: Rc<[usize]>,
    pub boxes: Tensor,
}

impl SceneBatch {
    pub fn new(scene: &ToyScene) -> Self {
        SceneBatch {
            rects: scene.proposals.clone().into(),
            labels: scene.labels.clone().into(),
            boxes: scene.boxes.clone(),
        }
    }
}

/// Proposal features pooled from `F_0`, as the heads see them without evolution.
pub fn pooled_proposals(state: &ModelState, scene: &ToyScene, cfg: &TrainConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let mv = state.params.bind(&mut g);
    let image = g.leaf(scene.image.clone());
    let f0 = base_feature(&mut g, &mv, image, cfg)?;
    let p = proposal_features(&mut g, &mv, f0, &scene.proposals.clone().into(), cfg)?;
    Ok(g.value(p).clone())
}

/// Records every training loss for one scene.
pub fn training_losses(
    g: &mut Graph,
    mv: &ModelVars,
    image: Var,
    batch: &SceneBatch,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LossVars> {
    let f0 = base_feature(g, mv, image, cfg)?;
    let p = proposal_features(g, mv, f0, &batch.rects, cfg)?;
    if !cfg.evolution {
        let l_cls = cross_entropy(g, p, &batch.labels, &mv.heads)?;
        let l_reg = box_loss(g, p, &batch.boxes, &mv.heads)?;
        let zero = g.scalar(0.0);
        let base = g.add(l_cls, l_reg)?;
        let l_total = g.add(base, zero)?;
        return Ok(LossVars { l_intra: zero, l_inter: zero, l_align: zero, l_cls, l_reg, l_total });
    }
    let f_hat = evolved_feature(g, mv, f0, &cfg.schedule, cfg, rng)?;
    let p_hat = proposal_features(g, mv, f_hat, &batch.rects, cfg)?;
    total_loss(g, p, p_hat, &batch.labels, Some(&batch.boxes), &mv.heads, cfg.weights(), cfg.include_positive)
}

/// One optimizer step on one scene. On error the model is left untouched.
pub fn train_step(state: &mut ModelState, scene: &ToyScene, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<LossBundle> {
    let mut g = Graph::new();
    let mv = state.params.bind(&mut g);
    let image = g.leaf(scene.image.clone());
    let losses = training_losses(&mut g, &mv, image, &SceneBatch::new(scene), cfg, rng)?;
    let bundle = losses.values(&g);
    if !bundle.is_finite() {
        return Err(LtfeError::Numerical(format!("non-finite loss {bundle:?}")));
    }
    let grads = g.backward(losses.l_total)?;
    state.apply_gradients(&ModelState::collect_gradients(&mv, &grads), cfg)?;
    Ok(bundle)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
}

pub const METRICS_HEADER: &str = "epoch,step,l_cls,l_reg,l_intra,l_inter,l_align,l_total";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, l.l_cls, l.l_reg, l.l_intra, l.l_inter, l.l_align, l.l_total
        );
    }
    out
}

/// A step whose loss could not be evaluated; the model was left unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedStep {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
}

pub struct TrainRun {
    pub state: ModelState,
    /// One row per accepted step.
    pub metrics: Vec<MetricRow>,
    pub rejected: Vec<RejectedStep>,
}

/// Fresh model for `cfg.seed`.
pub fn init_model(cfg: &TrainConfig) -> ModelState {
    ModelState::new(ModelParams::init(cfg, &mut stream(cfg.seed, Stream::Init)))
}

/// Source-domain training scenes for `cfg.seed`.
pub fn training_scenes(cfg: &TrainConfig) -> Result<Vec<ToyScene>> {
    let mut rng = stream(cfg.seed, Stream::Scenes);
    generate_scenes(cfg.num_scenes, cfg.scene_size, cfg.proposals, cfg.classes, &mut rng)
}

/// Full training run: `epochs` passes over the scenes in a seeded shuffle.
/// Steps failing with a numerical error are skipped and listed in
/// [`TrainRun::rejected`]; any other error aborts the run.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let mut state = init_model(cfg);
    let scenes = training_scenes(cfg)?;
    let mut order_rng = stream(cfg.seed, Stream::Order);
    let mut noise = stream(cfg.seed, Stream::Perturbation);
    let mut metrics = Vec::with_capacity(cfg.epochs * scenes.len());
    let mut rejected = Vec::new();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for &i in &order {
            step += 1;
            match train_step(&mut state, &scenes[i], cfg, &mut noise) {
                Ok(losses) => metrics.push(MetricRow { epoch, step, losses }),
                Err(LtfeError::Numerical(reason)) => rejected.push(RejectedStep { epoch, step, reason }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrainRun { state, metrics, rejected })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `m x C` softmax scores.
    pub scores: Tensor,
    /// `m x 4` predicted box offsets.
    pub boxes: Tensor,
}

impl Predictions {
    /// Arg-max class per proposal, first on ties.
    pub fn classes(&self) -> Vec<usize> {
        let c = self.scores.shape()[1];
        self.scores
            .data()
            .chunks_exact(c)
            .map(|row| (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b }))
            .collect()
    }
}

/// Proposal scores after an `infer_T`-step perturbation run, using the
/// kernel solved from the final encoding. `infer_T = 0` or a model trained
/// without evolution classifies straight from `F_0`.
pub fn infer(state: &ModelState, scene: &ToyScene, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Predictions> {
    let mut g = Graph::new();
    let mv = state.params.bind(&mut g);
    let image = g.leaf(scene.image.clone());
    let rects: Rc<[Rect]> = scene.proposals.clone().into();
    let f0 = base_feature(&mut g, &mv, image, cfg)?;
    let f = if cfg.evolution && cfg.infer_steps > 0 {
        let schedule = EvolutionSchedule { steps: cfg.infer_steps, ..cfg.schedule };
        evolved_feature(&mut g, &mv, f0, &schedule, cfg, rng)?
    } else {
        f0
    };
    let p = proposal_features(&mut g, &mv, f, &rects, cfg)?;
    let logits = mv.heads.logits(&mut g, p)?;
    let boxes = mv.heads.boxes(&mut g, p)?;
    Ok(Predictions { scores: softmax_rows(g.value(logits)), boxes: g.value(boxes).clone() })
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    let mut data = logits.data().to_vec();
    for row in data.chunks_exact_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - mx).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Proposal classification accuracy on `cfg.eval_scenes` fresh scenes shifted
/// by `knob`. Scenes, shift noise and inference noise depend on `eval_seed` only.
pub fn evaluate(state: &ModelState, cfg: &TrainConfig, knob: f64, eval_seed: u64) -> Result<f64> {
    let mut scene_rng = stream(eval_seed, Stream::EvalScenes);
    let scenes = generate_scenes(cfg.eval_scenes, cfg.scene_size, cfg.proposals, cfg.classes, &mut scene_rng)?;
    let mut shift = stream(eval_seed, Stream::Shift);
    let mut noise = stream(eval_seed, Stream::Inference);
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &scenes {
        let shifted = s.shifted(knob, &mut shift)?;
        let pred = infer(state, &shifted, cfg, &mut noise)?;
        hit += pred.classes().iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        total += s.labels.len();
    }
    Ok(hit as f64 / total as f64)
}

/// `cfg` with evolution disabled.
pub fn baseline_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { evolution: false, ..cfg.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub knob: f64,
    pub seed: u64,
    pub ltfe_accuracy: f64,
    pub baseline_accuracy: f64,
}

/// One trained pair per seed.
pub struct BenchModels<'a> {
    pub seed: u64,
    pub ltfe: &'a ModelState,
    pub baseline: &'a ModelState,
}

/// Accuracy of both models per knob and seed, knob-major.
pub fn benchmark(models: &[BenchModels], cfg: &TrainConfig, knobs: &[f64]) -> Result<Vec<BenchRow>> {
    let base_cfg = baseline_config(cfg);
    let mut rows = Vec::with_capacity(knobs.len() * models.len());
    for &knob in knobs {
        for m in models {
            rows.push(BenchRow {
                knob,
                seed: m.seed,
                ltfe_accuracy: evaluate(m.ltfe, cfg, knob, m.seed)?,
                baseline_accuracy: evaluate(m.baseline, &base_cfg, knob, m.seed)?,
            });
        }
    }
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const BENCH_HEADER: &str = "knob,seed,ltfe_accuracy,baseline_accuracy";

/// Per-cell rows followed by `mean` and `std` rows for each knob.
pub fn benchmark_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    let mut knobs: Vec<f64> = Vec::new();
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.knob, r.seed, r.ltfe_accuracy, r.baseline_accuracy);
        if !knobs.contains(&r.knob) {
            knobs.push(r.knob);
        }
    }
    for k in knobs {
        let cell: Vec<&BenchRow> = rows.iter().filter(|r| r.knob == k).collect();
        let (lm, ls) = mean_std(&cell.iter().map(|r| r.ltfe_accuracy).collect::<Vec<_>>());
        let (bm, bs) = mean_std(&cell.iter().map(|r| r.baseline_accuracy).collect::<Vec<_>>());
        let _ = writeln!(out, "{k},mean,{lm},{bm}");
        let _ = writeln!(out, "{k},std,{ls},{bs}");
    }
    out
}
