//! Central-difference gradient checks for every stage, used by the CLI and
//! the acceptance tests.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{total_loss, HeadVars, LossWeights};
use crate::diffcore::{grad_check, grad_check_per_param, grad_check_sampled, Graph, Padding, Tensor, Var};
use crate::error::{LtfeError, Result};
use crate::liquid::{adjust_feature, horizons, rk4_solve, FieldVars};
use crate::perturb::{evolve_sequence_graph, gaussian_kernel, EvolutionSchedule};
use crate::temporal::{encode_sequence, LstmVars};

use super::config::{ParamGroup, TrainConfig};
use super::model::{ModelParams, ModelVars};
use super::scene::ToyScene;
use super::train::{stream, training_losses, SceneBatch, Stream};

/// Central-difference half-width.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub module: String,
    pub max_rel_error: f64,
}

fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `cfg` shrunk to 6x6 scenes, 2 channels and 2 proposals.
pub fn small_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { scene_size: 6, channels: 2, proposals: 2, hidden_dim: 3, field_hidden: 4, ..cfg.clone() }
}

/// Fresh parameters with every tensor jittered, so no group sits at a point
/// where its gradient vanishes identically (zero field output). Extractor
/// biases are then made positive: a proposal whose units are all dead has no
/// cosine similarity, and fewer units sit on a ReLU kink.
pub fn jittered_params(cfg: &TrainConfig, rng: &mut impl Rng, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(cfg, rng);
    for t in p.tensors_mut() {
        let noise = random(rng, t.shape(), scale);
        *t = t.zip_map(&noise, |a, b| a + b).expect("same shape");
    }
    for b in [&mut p.extractor.stage1_bias, &mut p.extractor.stage2_bias] {
        *b = b.map(|v| v.abs() + 0.1);
    }
    p
}

/// `l_total` of one training step as a function of the flat parameter list.
/// Perturbation noise is redrawn from the same seed on every call.
pub fn training_objective<'a>(
    cfg: &'a TrainConfig,
    scene: &'a ToyScene,
    noise_seed: u64,
) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'a {
    let batch = SceneBatch::new(scene);
    move |g: &mut Graph, v: &[Var]| {
        let mv = ModelVars::from_flat(v, cfg.channels, cfg.hidden_dim);
        let image = g.leaf(scene.image.clone());
        let mut rng = stream(noise_seed, Stream::Perturbation);
        Ok(training_losses(g, &mv, image, &batch, cfg, &mut rng)?.l_total)
    }
}

/// Redraws of a check instance before giving up.
const DRAWS: usize = 32;

/// First scene and parameter draw whose training loss evaluates. A draw can
/// fail when every unit over some proposal is dead, leaving no cosine
/// similarity to take.
fn live_instance(cfg: &TrainConfig, rng: &mut ChaCha8Rng, scale: f64, noise_seed: u64) -> Result<(ToyScene, ModelParams)> {
    for _ in 0..DRAWS {
        let scene = ToyScene::generate(cfg.scene_size, cfg.proposals, cfg.classes, rng)?;
        let params = jittered_params(cfg, rng, scale);
        let mut g = Graph::new();
        let vars: Vec<Var> = params.tensors().into_iter().map(|t| g.leaf(t.clone())).collect();
        let outcome = training_objective(cfg, &scene, noise_seed)(&mut g, &vars).map(|_| ());
        match outcome {
            Ok(()) => return Ok((scene, params)),
            Err(LtfeError::Numerical(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(LtfeError::Numerical(format!("no evaluable check instance in {DRAWS} draws")))
}

/// Exhaustive check of `l_total` on the 6x6x2 instance, reduced to the worst
/// relative error of each parameter group.
pub fn end_to_end_by_group(cfg: &TrainConfig, seed: u64) -> Result<Vec<(ParamGroup, f64)>> {
    let cfg = small_config(cfg);
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (scene, params) = live_instance(&cfg, &mut rng, 0.3, seed)?;
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let per = grad_check_per_param(training_objective(&cfg, &scene, seed), &tensors, EPS)?;
    Ok(by_group(&params, &per))
}

fn by_group(params: &ModelParams, per: &[f64]) -> Vec<(ParamGroup, f64)> {
    let groups = params.groups();
    ParamGroup::ALL
        .iter()
        .map(|&grp| {
            let worst = groups.iter().zip(per).filter(|(g, _)| **g == grp).map(|(_, &e)| e).fold(0.0, f64::max);
            (grp, worst)
        })
        .collect()
}

fn diffcore_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let params = vec![random(rng, &[5, 4, 2], 1.0), random(rng, &[3, 3, 2, 3], 0.5), random(rng, &[3, 2], 1.0)];
    let taps = gaussian_kernel(0.8, Some(2))?.factor;
    let f = move |g: &mut Graph, v: &[Var]| {
        let y = g.conv2d(v[0], v[1], Padding::Circular)?;
        let y = g.blur(y, taps.clone(), Padding::Reflect)?;
        let y = g.tanh(y)?;
        let pooled = g.reshape(y, &[20, 3])?;
        let z = g.matmul(pooled, v[2])?;
        let z = g.logsumexp_rows(z, false)?;
        g.sum(z)
    };
    grad_check(f, &params, EPS)
}

fn perturb_check(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let schedule = EvolutionSchedule { steps: cfg.schedule.steps.min(4), ..cfg.schedule };
    let opts = cfg.evolve_options();
    let weights = random(rng, &[5, 5, 2], 1.0);
    let params = vec![random(rng, &[5, 5, 2], 1.0)];
    let f = move |g: &mut Graph, v: &[Var]| {
        let mut noise = ChaCha8Rng::seed_from_u64(7);
        let seq = evolve_sequence_graph(g, v[0], &schedule, opts, &mut noise)?;
        let w = g.leaf(weights.clone());
        let y = g.mul(*seq.last().expect("non-empty"), w)?;
        let y = g.tanh(y)?;
        g.sum(y)
    };
    grad_check(f, &params, EPS)
}

fn temporal_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, d) = (2, 3);
    let mut params: Vec<Tensor> = (0..4).map(|_| random(rng, &[c + d, d], 0.6)).collect();
    params.extend((0..4).map(|_| random(rng, &[d], 0.5)));
    params.push(random(rng, &[d + c, d], 0.6));
    params.extend((0..3).map(|_| random(rng, &[3, 3, c], 1.0)));
    let f = |g: &mut Graph, v: &[Var]| {
        let lstm = LstmVars { input_dim: c, hidden_dim: d, weights: [v[0], v[1], v[2], v[3]], biases: [v[4], v[5], v[6], v[7]] };
        let enc = encode_sequence(g, &v[9..12], &lstm, v[8])?;
        let parts = [enc.steps[2], enc.hidden[1], enc.final_cell];
        let all = g.concat(&parts)?;
        let sq = g.square(all)?;
        g.sum(sq)
    };
    grad_check(f, &params, EPS)
}

fn liquid_check(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c, d, m) = (2, 3, 4);
    let k = 9 * c * c;
    let ode = cfg.ode;
    let padding = cfg.padding;
    let params = vec![
        random(rng, &[k, m], 0.4),
        random(rng, &[d, m], 0.4),
        random(rng, &[m], 0.4),
        random(rng, &[m, k], 0.4),
        random(rng, &[k], 0.4),
        random(rng, &[3, 3, c, c], 0.3),
        random(rng, &[4, 4, c], 1.0),
        random(rng, &[d], 1.0).map(f64::abs),
        random(rng, &[d], 1.0).map(f64::abs),
    ];
    let f = move |g: &mut Graph, v: &[Var]| {
        let field = FieldVars { state_weights: v[0], encoding_weights: v[1], hidden_bias: v[2], output_weights: v[3], output_bias: v[4] };
        let taus = horizons(g, &v[7..9], &ode)?;
        let (h, tau) = if g.value(taus[0]).item() < 1.0 { (v[7], taus[0]) } else { (v[8], taus[1]) };
        let w = rk4_solve(g, &field, v[5], h, tau, &ode)?;
        let y = adjust_feature(g, v[6], w, padding)?;
        let y = g.tanh(y)?;
        g.sum(y)
    };
    grad_check(f, &params, EPS)
}

fn align_check(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let labels: Rc<[usize]> = vec![0, 2, 1, 1].into();
    let targets = random(rng, &[4, 4], 2.0);
    let weights = LossWeights { lambda1: cfg.lambda1, lambda2: cfg.lambda2 };
    let include = cfg.include_positive;
    let params = vec![
        random(rng, &[4, 5], 1.0),
        random(rng, &[4, 5], 1.0),
        random(rng, &[5, 3], 0.5),
        random(rng, &[3], 0.5),
        random(rng, &[5, 4], 0.5),
        random(rng, &[4], 0.5),
    ];
    let f = move |g: &mut Graph, v: &[Var]| {
        let heads = HeadVars { classifier: v[2], classifier_bias: v[3], regressor: v[4], regressor_bias: v[5] };
        Ok(total_loss(g, v[0], v[1], &labels, Some(&targets), &heads, weights, include)?.l_total)
    };
    grad_check(f, &params, EPS)
}

/// Probes per parameter tensor for the full-size pipeline check.
const PIPELINE_PROBES: usize = 4;

/// Worst relative error per module. Module checks run on small random
/// instances; the pipeline check runs `l_total` at the full size of `cfg`,
/// probing a few coordinates of every parameter tensor.
pub fn gradcheck_suite(cfg: &TrainConfig, seed: u64) -> Result<Vec<CheckReport>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |module: &str, e: f64| out.push(CheckReport { module: module.into(), max_rel_error: e });
    push("diffcore", diffcore_check(&mut rng)?);
    push("perturb", perturb_check(cfg, &mut rng)?);
    push("temporal", temporal_check(&mut rng)?);
    push("liquid", liquid_check(cfg, &mut rng)?);
    push("align", align_check(cfg, &mut rng)?);

    let (scene, params) = live_instance(cfg, &mut rng, 0.1, seed)?;
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let per = grad_check_sampled(training_objective(cfg, &scene, seed), &tensors, EPS, PIPELINE_PROBES, &mut rng)?;
    push("pipeline", per.into_iter().fold(0.0, f64::max));
    Ok(out)
}
