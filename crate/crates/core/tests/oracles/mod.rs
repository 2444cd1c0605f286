//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use gradcore::Tensor;
use pseudoflow::flowsynth::{FlowDraws, FlowField, FlowSpec};

/// Straightforward per-pixel version of the full-mode pipeline: bilinear
/// upsampling from block centers, constant shift, then a 2-D windowed mean
/// normalized by the in-bounds weight.
pub fn naive_field(spec: &FlowSpec, w: usize, h: usize, d: &FlowDraws) -> (Vec<f64>, Vec<f64>) {
    let centers = |len: usize| -> Vec<f64> {
        let n = len.div_ceil(spec.block);
        (0..n)
            .map(|i| {
                let size = spec.block.min(len - i * spec.block);
                (i * spec.block) as f64 + (size as f64 - 1.0) / 2.0
            })
            .collect()
    };
    let (cx, cy) = (centers(w), centers(h));
    // weights of each grid index for coordinate p
    let lerp = |c: &[f64], p: f64| -> Vec<(usize, f64)> {
        if p <= c[0] {
            return vec![(0, 1.0)];
        }
        if p >= *c.last().unwrap() {
            return vec![(c.len() - 1, 1.0)];
        }
        for i in 0..c.len() - 1 {
            if c[i] <= p && p <= c[i + 1] {
                let t = (p - c[i]) / (c[i + 1] - c[i]);
                return vec![(i, 1.0 - t), (i + 1, t)];
            }
        }
        unreachable!()
    };
    let up = |grid: &[f64], shift: f64| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for (iy, wy) in lerp(&cy, y as f64) {
                    for (ix, wx) in lerp(&cx, x as f64) {
                        v += wy * wx * grid[iy * d.grid_w + ix];
                    }
                }
                out[y * w + x] = v + shift;
            }
        }
        out
    };
    let k = spec.filter;
    let tap = |off: i64| -> f64 {
        let o = off.unsigned_abs() as usize;
        if k % 2 == 1 {
            if o <= (k - 1) / 2 { 1.0 } else { 0.0 }
        } else if o < k / 2 {
            1.0
        } else if o == k / 2 {
            0.5
        } else {
            0.0
        }
    };
    let r = k as i64 / 2 + 1;
    let smooth = |p: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                        let wt = tap(yy - y) * tap(xx - x);
                        s += wt * p[yy as usize * w + xx as usize];
                        n += wt;
                    }
                }
                out[y as usize * w + x as usize] = s / n;
            }
        }
        out
    };
    let bound = w.min(h) as f64 / 2.0;
    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(-bound, bound)).collect();
    (
        clamp(smooth(&up(&d.grid_dx, d.shift.0))),
        clamp(smooth(&up(&d.grid_dy, d.shift.1))),
    )
}

/// Clamped bilinear sample of channel `c` of a `CHW` frame at `(x, y)`.
fn sample(img: &[Vec<Vec<f64>>], c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (img[c].len(), img[c][0].len());
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let top = img[c][y0][x0] * (1.0 - tx) + img[c][y0][x1] * tx;
    let bot = img[c][y1][x0] * (1.0 - tx) + img[c][y1][x1] * tx;
    top * (1.0 - ty) + bot * ty
}

fn nested(t: &Tensor<f32>) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    (0..s[0])
        .map(|c| (0..s[1]).map(|y| (0..s[2]).map(|x| t.at(&[c, y, x]) as f64).collect()).collect())
        .collect()
}

/// Loop-by-loop warping error over a clip.
pub fn brute_force(out: &[Tensor<f32>], src: &[Tensor<f32>], flows: &[FlowField], alpha: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in 1..out.len() {
        let (o_prev, o_cur) = (nested(&out[t - 1]), nested(&out[t]));
        let (s_prev, s_cur) = (nested(&src[t - 1]), nested(&src[t]));
        let f = &flows[t - 1];
        let (c, h, w) = (o_cur.len(), o_cur[0].len(), o_cur[0][0].len());
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = f.at(x, y);
                let (sx, sy) = (x as f64 + dx as f64, y as f64 + dy as f64);
                let mut d2 = 0.0;
                for k in 0..s_cur.len() {
                    let d = s_cur[k][y][x] - sample(&s_prev, k, sx, sy);
                    d2 += d * d;
                }
                let m = (-alpha * d2.sqrt()).exp();
                for k in 0..c {
                    total += m * (o_cur[k][y][x] - sample(&o_prev, k, sx, sy)).abs();
                    n += 1;
                }
            }
        }
    }
    total / n as f64
}

pub fn counting_oracle(pred: &[u8], gt: &[u8], n: usize) -> (f64, f64, f64) {
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    let mp = correct as f64 / gt.len() as f64;
    let (mut acc, mut iou, mut present) = (0.0, 0.0, 0usize);
    for c in 0..n as u8 {
        let in_gt = gt.iter().filter(|&&g| g == c).count();
        if in_gt == 0 {
            continue;
        }
        present += 1;
        let tp = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count();
        let union = pred.iter().zip(gt).filter(|(&p, &g)| p == c || g == c).count();
        acc += tp as f64 / in_gt as f64;
        iou += tp as f64 / union as f64;
    }
    (mp, acc / present as f64, iou / present as f64)
}
