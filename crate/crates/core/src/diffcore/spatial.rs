//! Raw forward and adjoint loops for the spatial operators.
//!
//! All maps are `h x w x c` row-major; convolution kernels are
//! `k x k x c_in x c_out`. Every operator is "same" sized: output spatial
//! extent equals input spatial extent, with out-of-range taps resolved by the
//! padding mode.

use serde::{Deserialize, Serialize};

/// Boundary handling for "same" convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Wrap around (torus). Normalized kernels preserve channel means exactly.
    #[default]
    Circular,
    /// Mirror about the edge sample without repeating it (`dcb|abcd|cba`).
    Reflect,
}

impl Padding {
    /// Maps a possibly out-of-range coordinate into `0..n`.
    #[inline]
    pub fn resolve(self, p: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Padding::Circular => p.rem_euclid(n) as usize,
            Padding::Reflect => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n - 1);
                let m = p.rem_euclid(period);
                (if m >= n { period - m } else { m }) as usize
            }
        }
    }

    fn table(self, n: usize, radius: usize) -> Vec<usize> {
        // index j in 0..n + 2r  ->  source row for coordinate j - r
        (0..n + 2 * radius)
            .map(|j| self.resolve(j as isize - radius as isize, n))
            .collect()
    }
}

/// Half-open rectangle `[y0, y1) x [x0, x1)` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Rect { y0, x0, y1, x1 }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.y0 < self.y1 && self.x0 < self.x1 && self.y1 <= h && self.x1 <= w
    }
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    (h, w, cin): (usize, usize, usize),
    kernel: &[f64],
    k: usize,
    cout: usize,
    padding: Padding,
) -> Vec<f64> {
    let r = k / 2;
    let rows = padding.table(h, r);
    let cols = padding.table(w, r);
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            for dy in 0..k {
                let sy = rows[y + dy];
                for dx in 0..k {
                    let sx = cols[x + dx];
                    let src = &input[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let taps = &kernel[(dy * k + dx) * cin * cout..(dy * k + dx + 1) * cin * cout];
                    for (i, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (acc, &kv) in o.iter_mut().zip(&taps[i * cout..(i + 1) * cout]) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)` given the output gradient.
pub(crate) fn conv2d_backward(
    input: &[f64],
    (h, w, cin): (usize, usize, usize),
    kernel: &[f64],
    k: usize,
    cout: usize,
    padding: Padding,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let r = k / 2;
    let rows = padding.table(h, r);
    let cols = padding.table(w, r);
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for y in 0..h {
        for x in 0..w {
            let g = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for dy in 0..k {
                let sy = rows[y + dy];
                for dx in 0..k {
                    let sx = cols[x + dx];
                    let base = (sy * w + sx) * cin;
                    let tbase = (dy * k + dx) * cin * cout;
                    for i in 0..cin {
                        let v = input[base + i];
                        let taps = &kernel[tbase + i * cout..tbase + (i + 1) * cout];
                        let gtaps = &mut gk[tbase + i * cout..tbase + (i + 1) * cout];
                        let mut acc = 0.0;
                        for ((gt, &kv), &gv) in gtaps.iter_mut().zip(taps).zip(g) {
                            acc += gv * kv;
                            *gt += v * gv;
                        }
                        gin[base + i] += acc;
                    }
                }
            }
        }
    }
    (gin, gk)
}

/// Separable depthwise blur: the same 1-D taps along rows then columns,
/// applied to every channel independently.
pub(crate) fn blur_forward(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    taps: &[f64],
    padding: Padding,
) -> Vec<f64> {
    let r = taps.len() / 2;
    let rows = padding.table(h, r);
    let cols = padding.table(w, r);
    let mut tmp = vec![0.0; input.len()];
    for y in 0..h {
        for x in 0..w {
            let o = &mut tmp[(y * w + x) * c..(y * w + x + 1) * c];
            for (d, &t) in taps.iter().enumerate() {
                let sx = cols[x + d];
                let src = &input[(y * w + sx) * c..(y * w + sx + 1) * c];
                for (acc, &v) in o.iter_mut().zip(src) {
                    *acc += t * v;
                }
            }
        }
    }
    let mut out = vec![0.0; input.len()];
    for y in 0..h {
        for (d, &t) in taps.iter().enumerate() {
            let sy = rows[y + d];
            let src = &tmp[sy * w * c..(sy + 1) * w * c];
            let o = &mut out[y * w * c..(y + 1) * w * c];
            for (acc, &v) in o.iter_mut().zip(src) {
                *acc += t * v;
            }
        }
    }
    out
}

pub(crate) fn blur_backward(
    grad_out: &[f64],
    (h, w, c): (usize, usize, usize),
    taps: &[f64],
    padding: Padding,
) -> Vec<f64> {
    let r = taps.len() / 2;
    let rows = padding.table(h, r);
    let cols = padding.table(w, r);
    // adjoint of the vertical pass
    let mut tmp = vec![0.0; grad_out.len()];
    for y in 0..h {
        let g = &grad_out[y * w * c..(y + 1) * w * c];
        for (d, &t) in taps.iter().enumerate() {
            let sy = rows[y + d];
            let dst = &mut tmp[sy * w * c..(sy + 1) * w * c];
            for (acc, &v) in dst.iter_mut().zip(g) {
                *acc += t * v;
            }
        }
    }
    // adjoint of the horizontal pass
    let mut gin = vec![0.0; grad_out.len()];
    for y in 0..h {
        for x in 0..w {
            let g = &tmp[(y * w + x) * c..(y * w + x + 1) * c];
            for (d, &t) in taps.iter().enumerate() {
                let sx = cols[x + d];
                let dst = &mut gin[(y * w + sx) * c..(y * w + sx + 1) * c];
                for (acc, &v) in dst.iter_mut().zip(g) {
                    *acc += t * v;
                }
            }
        }
    }
    gin
}

pub(crate) fn roi_mean_forward(
    input: &[f64],
    (_h, w, c): (usize, usize, usize),
    rects: &[Rect],
) -> Vec<f64> {
    let mut out = vec![0.0; rects.len() * c];
    for (row, rect) in out.chunks_exact_mut(c).zip(rects) {
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                for (acc, &v) in row.iter_mut().zip(&input[(y * w + x) * c..(y * w + x + 1) * c]) {
                    *acc += v;
                }
            }
        }
        let n = rect.area() as f64;
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

pub(crate) fn roi_mean_backward(
    grad_out: &[f64],
    (h, w, c): (usize, usize, usize),
    rects: &[Rect],
) -> Vec<f64> {
    let mut gin = vec![0.0; h * w * c];
    for (g, rect) in grad_out.chunks_exact(c).zip(rects) {
        let n = rect.area() as f64;
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                for (acc, &v) in gin[(y * w + x) * c..(y * w + x + 1) * c].iter_mut().zip(g) {
                    *acc += v / n;
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let p = Padding::Reflect;
        let got: Vec<usize> = (-3..7).map(|i| p.resolve(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(p.resolve(-5, 1), 0);
    }

    #[test]
    fn circular_indices() {
        let p = Padding::Circular;
        let got: Vec<usize> = (-3..7).map(|i| p.resolve(i, 4)).collect();
        assert_eq!(got, vec![1, 2, 3, 0, 1, 2, 3, 0, 1, 2]);
    }

    #[test]
    fn roi_pool_is_rectangle_mean() {
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = roi_mean_forward(&input, (4, 4, 1), &[Rect::new(1, 1, 3, 3)]);
        assert_eq!(out, vec![(5.0 + 6.0 + 9.0 + 10.0) / 4.0]);
    }
}
