//! Synthetic detection scenes with a controllable test-time shift.
//!
//! Objects sit one per grid cell. Class is carried by shape only (filled
//! square, ring, horizontal stripes, vertical stripes); colors are random.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Padding, Rect, Tensor};
use crate::error::{domain_err, Result};
use crate::perturb::{gaussian_blur, gaussian_kernel, radius_cap};

use super::config::grid_side;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    /// `h x w x 3` image.
    pub image: Tensor,
    pub proposals: Vec<Rect>,
    pub labels: Vec<usize>,
    /// `m x 4` normalized offsets from proposal to object edges.
    pub boxes: Tensor,
    pub domain_knob: f64,
}

fn paint(pattern: usize, dy: usize, dx: usize, side: usize) -> bool {
    let band = (side / 5).max(1);
    match pattern {
        0 => true,
        1 => dy < band || dx < band || dy + band >= side || dx + band >= side,
        2 => (dy / band) % 2 == 0,
        _ => (dx / band) % 2 == 0,
    }
}

impl ToyScene {
    /// A source-domain scene (`domain_knob = 0`).
    pub fn generate(size: usize, proposals: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if !(2..=4).contains(&classes) {
            return Err(domain_err!("classes must lie in 2..=4, got {classes}"));
        }
        let g = grid_side(proposals);
        let cell = size / g;
        if cell < 2 {
            return Err(domain_err!("{size}px scene cannot hold {proposals} objects"));
        }
        let side = (cell * 5 / 8).max(2);
        let background: f64 = rng.random_range(0.0..0.2);
        let mut data: Vec<f64> = (0..size * size * 3)
            .map(|_| background + 0.03 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut rects = Vec::with_capacity(proposals);
        let mut labels = Vec::with_capacity(proposals);
        let mut boxes = Vec::with_capacity(proposals * 4);
        for k in 0..proposals {
            let (cy, cx) = ((k / g) * cell, (k % g) * cell);
            let slack = cell - side;
            let y0 = cy + rng.random_range(0..=slack);
            let x0 = cx + rng.random_range(0..=slack);
            let label = rng.random_range(0..classes);
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.4..1.0));
            for dy in 0..side {
                for dx in 0..side {
                    if paint(label, dy, dx, side) {
                        let p = ((y0 + dy) * size + x0 + dx) * 3;
                        data[p..p + 3].copy_from_slice(&color);
                    }
                }
            }
            let object = Rect::new(y0, x0, y0 + side, x0 + side);
            let mut jitter = || rng.random_range(-1i64..=1);
            let clamp = |v: i64, lo: usize, hi: usize| v.clamp(lo as i64, hi as i64) as usize;
            let py0 = clamp(y0 as i64 + jitter(), 0, size - 1);
            let px0 = clamp(x0 as i64 + jitter(), 0, size - 1);
            let py1 = clamp((y0 + side) as i64 + jitter(), py0 + 1, size);
            let px1 = clamp((x0 + side) as i64 + jitter(), px0 + 1, size);
            let proposal = Rect::new(py0, px0, py1, px1);
            let (ph, pw) = ((py1 - py0) as f64, (px1 - px0) as f64);
            boxes.extend([
                (object.y0 as f64 - py0 as f64) / ph,
                (object.x0 as f64 - px0 as f64) / pw,
                (object.y1 as f64 - py1 as f64) / ph,
                (object.x1 as f64 - px1 as f64) / pw,
            ]);
            rects.push(proposal);
            labels.push(label);
        }
        Ok(ToyScene {
            image: Tensor::new(vec![size, size, 3], data)?,
            proposals: rects,
            labels,
            boxes: Tensor::new(vec![proposals, 4], boxes)?,
            domain_knob: 0.0,
        })
    }

    /// Blur (`sigma = 2 knob`), additive noise (`std = 0.3 knob`) and
    /// brightness scaling (`1 - 0.4 knob`), in that order. `knob = 0` returns
    /// the scene unchanged without touching `rng`.
    pub fn shifted(&self, knob: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&knob) {
            return Err(domain_err!("domain knob {knob} outside [0, 1]"));
        }
        let mut out = self.clone();
        out.domain_knob = knob;
        if knob == 0.0 {
            return Ok(out);
        }
        let kernel = gaussian_kernel(2.0 * knob, Some(radius_cap(self.image.shape())))?;
        let blurred = gaussian_blur(&self.image, &kernel, Padding::Reflect)?;
        let std = 0.3 * knob;
        let gain = 1.0 - 0.4 * knob;
        out.image = blurred.zip_map(
            &Tensor::from_fn(self.image.shape(), |_| std * rng.sample::<f64, _>(StandardNormal)),
            |v, n| (v + n) * gain,
        )?;
        Ok(out)
    }
}

/// `count` source scenes drawn in sequence from `rng`.
pub fn generate_scenes(
    count: usize,
    size: usize,
    proposals: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ToyScene>> {
    (0..count).map(|_| ToyScene::generate(size, proposals, classes, rng)).collect()
}
