//! Progressive feature perturbation.
//!
//! A feature map is pushed through `T` rounds of Gaussian blur plus scaled,
//! blurred Gaussian noise. Blur strength grows geometrically and noise
//! strength decays exponentially across rounds.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Padding, Tensor, Var};
use crate::error::{domain_err, numerical_err, Result};

/// Smallest blur standard deviation; smaller requests are clamped to it.
pub const SIGMA_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSchedule {
    /// Noise intensity at `t = 0`.
    pub alpha0: f64,
    /// Per-step decay rate of the noise intensity.
    pub lambda: f64,
    /// Blur standard deviation at `t = 0`, in pixels.
    pub sigma0: f64,
    /// Per-step growth factor of the blur standard deviation.
    pub gamma: f64,
    /// Number of perturbation steps.
    #[serde(rename = "T")]
    pub steps: usize,
}

impl Default for EvolutionSchedule {
    fn default() -> Self {
        EvolutionSchedule {
            alpha0: 0.2,
            lambda: 0.2,
            sigma0: 1.0,
            gamma: 1.2,
            steps: 8,
        }
    }
}

impl EvolutionSchedule {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha0, self.lambda, self.sigma0, self.gamma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(domain_err!("schedule constants must be finite: {self:?}"));
        }
        if self.alpha0 < 0.0 || self.lambda < 0.0 || self.sigma0 <= 0.0 || self.gamma < 1.0 {
            return Err(domain_err!(
                "schedule needs alpha0 >= 0, lambda >= 0, sigma0 > 0, gamma >= 1; got {self:?}"
            ));
        }
        if self.steps == 0 {
            return Err(domain_err!("schedule needs T >= 1"));
        }
        Ok(())
    }

    /// Noise intensity `alpha0 * exp(-lambda * t)`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha0 * (-self.lambda * t as f64).exp()
    }

    /// Blur standard deviation `sigma0 * gamma^t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma0 * self.gamma.powi(t as i32)
    }
}

/// `(alpha_t, sigma_t)` for `1 <= t <= T`. Step 0 is the unperturbed map and
/// has no schedule entry.
pub fn schedule_at(s: &EvolutionSchedule, t: usize) -> Result<(f64, f64)> {
    s.validate()?;
    if t == 0 || t > s.steps {
        return Err(domain_err!("step {t} outside 1..={}", s.steps));
    }
    Ok((s.alpha(t), s.sigma(t)))
}

/// Truncated, normalized 2-D Gaussian.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub radius: usize,
    /// `(2r+1) x (2r+1)` weights, row-major, summing to one.
    pub taps: Vec<f64>,
    /// Normalized 1-D factor; the 2-D kernel is its outer product with itself.
    pub factor: Rc<[f64]>,
}

impl GaussianKernel {
    pub fn width(&self) -> usize {
        2 * self.radius + 1
    }

    /// Tap at signed offset `(i, j)` from the center.
    pub fn tap(&self, i: isize, j: isize) -> f64 {
        let r = self.radius as isize;
        self.taps[((i + r) * (2 * r + 1) + (j + r)) as usize]
    }

    pub fn center(&self) -> f64 {
        self.tap(0, 0)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.width(), self.width()], self.taps.clone()).expect("square taps")
    }
}

/// Gaussian kernel with radius `ceil(3 sigma)`, capped at `max_radius` when
/// given, and never below one. `sigma` under [`SIGMA_MIN`] is clamped.
pub fn gaussian_kernel(sigma: f64, max_radius: Option<usize>) -> Result<GaussianKernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(domain_err!("blur sigma must be positive and finite, got {sigma}"));
    }
    let sigma = sigma.max(SIGMA_MIN);
    let mut radius = (3.0 * sigma).ceil() as usize;
    if let Some(cap) = max_radius {
        radius = radius.min(cap);
    }
    let radius = radius.max(1);
    let r = radius as isize;
    let two_var = 2.0 * sigma * sigma;
    // floor at the smallest normal keeps every tap strictly positive near the delta limit
    let weight = |d2: f64| (-d2 / two_var).exp().max(f64::MIN_POSITIVE);

    let mut taps = Vec::with_capacity((2 * radius + 1).pow(2));
    for i in -r..=r {
        for j in -r..=r {
            taps.push(weight((i * i + j * j) as f64));
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let mut factor: Vec<f64> = (-r..=r).map(|i| weight((i * i) as f64)).collect();
    let total: f64 = factor.iter().sum();
    factor.iter_mut().for_each(|t| *t /= total);

    Ok(GaussianKernel {
        sigma,
        radius,
        taps,
        factor: factor.into(),
    })
}

/// Half the smaller spatial side of an `h x w x c` map.
pub fn radius_cap(shape: &[usize]) -> usize {
    shape[0].min(shape[1]) / 2
}

/// Blurs every channel of `x` with `kernel`.
pub fn gaussian_blur(x: &Tensor, kernel: &GaussianKernel, padding: Padding) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let y = g.blur(v, kernel.factor.clone(), padding)?;
    Ok(g.value(y).clone())
}

/// How perturbation strength is distributed over the steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionStrategy {
    /// Per-step schedule values `(alpha_t, sigma_t)`.
    #[default]
    Progressive,
    /// Constant per-step values: mean noise intensity, and the blur whose
    /// `T`-fold repetition has the same total variance as the progressive run.
    EqualStep,
    /// One step at `(alpha_T, sigma_total)` with the progressive run's total
    /// blur variance; later steps repeat that map.
    OneShot,
}

impl std::str::FromStr for InjectionStrategy {
    type Err = crate::LtfeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(Self::Progressive),
            "equal_step" => Ok(Self::EqualStep),
            "one_shot" => Ok(Self::OneShot),
            other => Err(domain_err!("unknown injection strategy {other:?}")),
        }
    }
}

/// What the additive perturbation term is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `alpha_t` times fresh unit Gaussian noise blurred by the step kernel.
    #[default]
    Sampled,
    /// `alpha_t` times the step kernel itself, centered on the map and added
    /// to every channel.
    LiteralKernel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvolveOptions {
    pub strategy: InjectionStrategy,
    pub noise: NoiseMode,
    pub padding: Padding,
}

/// Per-step `(alpha, sigma)` actually applied, and how many leading steps are
/// computed (the rest repeat the last computed map).
fn step_plan(s: &EvolutionSchedule, strategy: InjectionStrategy) -> Vec<(f64, f64)> {
    let n = s.steps;
    let progressive: Vec<(f64, f64)> = (1..=n).map(|t| (s.alpha(t), s.sigma(t))).collect();
    let var_total: f64 = progressive.iter().map(|(_, sg)| sg * sg).sum();
    match strategy {
        InjectionStrategy::Progressive => progressive,
        InjectionStrategy::EqualStep => {
            let alpha = progressive.iter().map(|(a, _)| a).sum::<f64>() / n as f64;
            let sigma = (var_total / n as f64).sqrt();
            vec![(alpha, sigma); n]
        }
        InjectionStrategy::OneShot => vec![(s.alpha(n), var_total.sqrt())],
    }
}

fn literal_kernel_field(kernel: &GaussianKernel, (h, w, c): (usize, usize, usize)) -> Tensor {
    let mut data = vec![0.0; h * w * c];
    let r = kernel.radius as isize;
    let (cy, cx) = ((h / 2) as isize, (w / 2) as isize);
    for i in -r..=r {
        for j in -r..=r {
            let y = (cy + i).rem_euclid(h as isize) as usize;
            let x = (cx + j).rem_euclid(w as isize) as usize;
            for ch in 0..c {
                data[(y * w + x) * c + ch] += kernel.tap(i, j);
            }
        }
    }
    Tensor::new(vec![h, w, c], data).expect("field shape")
}

fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Records the perturbation sequence `F_1..F_T` of `f0` on `g`, so gradients
/// flow from every `F_t` back to `f0`. Noise is a constant of the graph.
pub fn evolve_sequence_graph(
    g: &mut Graph,
    f0: Var,
    s: &EvolutionSchedule,
    opts: EvolveOptions,
    rng: &mut impl Rng,
) -> Result<Vec<Var>> {
    s.validate()?;
    let shape = g.shape(f0).to_vec();
    let dims = g.value(f0).hwc()?;
    if !g.value(f0).is_finite() {
        return Err(numerical_err!("initial feature map is not finite"));
    }
    let cap = radius_cap(&shape);
    let mut out = Vec::with_capacity(s.steps);
    let mut prev = f0;
    for (step, (alpha, sigma)) in step_plan(s, opts.strategy).into_iter().enumerate() {
        let kernel = gaussian_kernel(sigma, Some(cap))?;
        let blurred = g.blur(prev, kernel.factor.clone(), opts.padding)?;
        let additive = match opts.noise {
            NoiseMode::Sampled => {
                let eps = standard_normal(&shape, rng);
                gaussian_blur(&eps, &kernel, opts.padding)?.map(|v| alpha * v)
            }
            NoiseMode::LiteralKernel => literal_kernel_field(&kernel, dims).map(|v| alpha * v),
        };
        let additive = g.leaf(additive);
        let next = g.add(blurred, additive)?;
        if !g.value(next).is_finite() {
            return Err(numerical_err!("perturbation step {} produced non-finite values", step + 1));
        }
        out.push(next);
        prev = next;
    }
    while out.len() < s.steps {
        out.push(prev);
    }
    Ok(out)
}

/// The perturbation sequence `F_1..F_T` of a concrete map.
pub fn evolve_sequence(
    f0: &Tensor,
    s: &EvolutionSchedule,
    opts: EvolveOptions,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let v = g.leaf(f0.clone());
    let seq = evolve_sequence_graph(&mut g, v, s, opts, rng)?;
    Ok(seq.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Summary of one step of a perturbation trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub t: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub mean: f64,
    pub variance: f64,
    pub l2_from_f0: f64,
}

pub fn trajectory_stats(f0: &Tensor, seq: &[Tensor], s: &EvolutionSchedule) -> Vec<StepStats> {
    seq.iter()
        .enumerate()
        .map(|(i, f)| {
            let n = f.len() as f64;
            let mean = f.sum() / n;
            let variance = f.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let l2 = f
                .data()
                .iter()
                .zip(f0.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            StepStats {
                t: i + 1,
                alpha: s.alpha(i + 1),
                sigma: s.sigma(i + 1),
                mean,
                variance,
                l2_from_f0: l2,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LtfeError;

    #[test]
    fn schedule_bounds() {
        let s = EvolutionSchedule::default();
        assert!(matches!(schedule_at(&s, 0), Err(LtfeError::Domain(_))));
        assert!(matches!(schedule_at(&s, 9), Err(LtfeError::Domain(_))));
        let (_, sigma) = schedule_at(&s, 1).unwrap();
        assert!((sigma - 1.2).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules() {
        let base = EvolutionSchedule::default();
        for bad in [
            EvolutionSchedule { steps: 0, ..base },
            EvolutionSchedule { gamma: 0.9, ..base },
            EvolutionSchedule { sigma0: 0.0, ..base },
            EvolutionSchedule { alpha0: -0.1, ..base },
            EvolutionSchedule { lambda: f64::NAN, ..base },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn kernel_rejects_nonpositive_sigma() {
        assert!(matches!(gaussian_kernel(0.0, None), Err(LtfeError::Domain(_))));
        assert!(matches!(gaussian_kernel(-1.0, None), Err(LtfeError::Domain(_))));
    }

    #[test]
    fn radius_rule() {
        assert_eq!(gaussian_kernel(1.0, None).unwrap().radius, 3);
        assert_eq!(gaussian_kernel(1.2, None).unwrap().radius, 4);
        assert_eq!(gaussian_kernel(4.0, Some(5)).unwrap().radius, 5);
        assert_eq!(gaussian_kernel(1e-6, None).unwrap().radius, 1);
    }

    #[test]
    fn one_shot_repeats_the_single_step() {
        let s = EvolutionSchedule::default();
        let plan = step_plan(&s, InjectionStrategy::OneShot);
        assert_eq!(plan.len(), 1);
        let var: f64 = (1..=8).map(|t| s.sigma(t).powi(2)).sum();
        assert!((plan[0].1 - var.sqrt()).abs() < 1e-12);
    }
}
