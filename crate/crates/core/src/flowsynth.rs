//! Synthetic optical flow and future-frame simulation.
//!
//! A full-mode field is the sum of a coarse random motion grid (one Gaussian
//! sample per block, bilinearly upsampled) and a global Gaussian shift, then
//! smoothed with a large box filter. Warping an image with such a field and
//! adding a little pixel noise gives a plausible "next frame" with a motion
//! that is known exactly.

use std::sync::Arc;

use gradcore::{Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::splitmix64;
use crate::warp::{self, Border};

/// Per-pixel displacement in pixels, stored row-major.
///
/// Backward convention: the value at `p` addresses the source location
/// `p + f(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if dx.len() != n || dy.len() != n {
            return Err(Error::dim(
                "flow field",
                format!("{n} values per axis"),
                format!("{}/{}", dx.len(), dy.len()),
            ));
        }
        Ok(FlowField { width, height, dx, dy })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        FlowField {
            width,
            height,
            dx: vec![dx; width * height],
            dy: vec![dy; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let mut dx = Vec::with_capacity(width * height);
        let mut dy = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                dx.push(a);
                dy.push(b);
            }
        }
        FlowField { width, height, dx, dy }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.dx[i], self.dy[i])
    }

    pub fn max_abs(&self) -> f32 {
        self.dx.iter().chain(&self.dy).fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|&v| v == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// motion grid + global shift, box smoothed
    Full,
    /// global shift only
    TranslationOnly,
    /// isotropic zoom about the image center
    ScalingOnly,
    /// independent full-mode fields for the two domains
    WrongPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSpec {
    pub mode: FlowMode,
    pub sigma_m: f64,
    pub sigma_s: f64,
    pub block: usize,
    pub filter: usize,
    pub scale_sigma: f64,
    pub reference_resolution: usize,
    pub auto_scale: bool,
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec {
            mode: FlowMode::Full,
            sigma_m: 8.0,
            sigma_s: 10.0,
            block: 100,
            filter: 100,
            scale_sigma: 0.05,
            reference_resolution: 256,
            auto_scale: true,
        }
    }
}

impl FlowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || self.filter == 0 {
            return Err(Error::Config("flow block and filter sizes must be >= 1".into()));
        }
        let sigmas = [self.sigma_m, self.sigma_s, self.scale_sigma];
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("flow sigmas must be finite and >= 0".into()));
        }
        if self.reference_resolution == 0 {
            return Err(Error::Config("reference_resolution must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rescale block, filter and the two sigmas from the reference resolution to
/// `min(width, height)`.
pub fn scale_spec(spec: &FlowSpec, width: usize, height: usize) -> FlowSpec {
    if !spec.auto_scale {
        return spec.clone();
    }
    let k = width.min(height) as f64 / spec.reference_resolution as f64;
    let size = |v: usize| ((v as f64 * k).round() as usize).max(1);
    FlowSpec {
        block: size(spec.block),
        filter: size(spec.filter),
        sigma_m: spec.sigma_m * k,
        sigma_s: spec.sigma_s * k,
        ..spec.clone()
    }
}

/// Raw random draws behind one full-mode field, in draw order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraws {
    pub grid_w: usize,
    pub grid_h: usize,
    /// `grid_h x grid_w`, row-major
    pub grid_dx: Vec<f64>,
    pub grid_dy: Vec<f64>,
    pub shift: (f64, f64),
}

impl FlowDraws {
    /// Draw order: grid dx, grid dy (row-major), shift dx, shift dy.
    pub fn sample<R: Rng + ?Sized>(spec: &FlowSpec, width: usize, height: usize, rng: &mut R) -> Self {
        let grid_w = width.div_ceil(spec.block);
        let grid_h = height.div_ceil(spec.block);
        let motion = Normal::new(0.0, spec.sigma_m).expect("sigma_m validated");
        let shift = Normal::new(0.0, spec.sigma_s).expect("sigma_s validated");
        let grid_dx = (0..grid_w * grid_h).map(|_| motion.sample(rng)).collect();
        let grid_dy = (0..grid_w * grid_h).map(|_| motion.sample(rng)).collect();
        let sx = shift.sample(rng);
        let sy = shift.sample(rng);
        FlowDraws {
            grid_w,
            grid_h,
            grid_dx,
            grid_dy,
            shift: (sx, sy),
        }
    }
}

/// Center coordinate of each block along an axis; the last block may be
/// shorter than `block`.
pub fn block_centers(len: usize, block: usize) -> Vec<f64> {
    (0..len.div_ceil(block))
        .map(|i| {
            let start = i * block;
            let end = ((i + 1) * block).min(len);
            (start + end - 1) as f64 / 2.0
        })
        .collect()
}

/// For each pixel on an axis: the lower grid index and interpolation weight
/// toward the next one. Pixels outside the first/last center clamp to them.
fn interp_axis(len: usize, block: usize) -> Vec<(usize, f64)> {
    let centers = block_centers(len, block);
    let last = centers.len() - 1;
    (0..len)
        .map(|p| {
            let p = p as f64;
            if p <= centers[0] {
                return (0, 0.0);
            }
            if p >= centers[last] {
                return (last, 0.0);
            }
            let i = centers.iter().rposition(|&c| c <= p).unwrap();
            (i, (p - centers[i]) / (centers[i + 1] - centers[i]))
        })
        .collect()
}

fn upsample_grid(grid: &[f64], gw: usize, gh: usize, width: usize, height: usize, block: usize) -> Vec<f64> {
    let xs = interp_axis(width, block);
    let ys = interp_axis(height, block);
    let at = |gx: usize, gy: usize| grid[gy.min(gh - 1) * gw + gx.min(gw - 1)];
    let mut out = Vec::with_capacity(width * height);
    for &(iy, ty) in &ys {
        for &(ix, tx) in &xs {
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Box-filter taps for a window of `size`: odd sizes use `size` unit taps,
/// even sizes use `size + 1` taps with half weight at both ends so the
/// window stays centered.
pub fn box_taps(size: usize) -> (usize, f64) {
    if size % 2 == 1 {
        ((size - 1) / 2, 1.0)
    } else {
        (size / 2, 0.5)
    }
}

/// One-dimensional box mean along `len`-element lines of `data`, window
/// clipped to the line and normalized by the in-bounds weight.
fn box_1d(data: &mut [f64], len: usize, stride: usize, lines: usize, line_step: usize, size: usize) {
    let (r, end_w) = box_taps(size);
    let mut prefix = vec![0.0; len + 1];
    let mut line = vec![0.0; len];
    for l in 0..lines {
        let base = l * line_step;
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[base + i * stride];
        }
        for i in 0..len {
            prefix[i + 1] = prefix[i] + line[i];
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(len - 1);
            let mut sum = prefix[hi + 1] - prefix[lo];
            let mut weight = (hi + 1 - lo) as f64;
            if end_w != 1.0 {
                if i >= r {
                    sum -= (1.0 - end_w) * line[i - r];
                    weight -= 1.0 - end_w;
                }
                if i + r < len {
                    sum -= (1.0 - end_w) * line[i + r];
                    weight -= 1.0 - end_w;
                }
            }
            data[base + i * stride] = sum / weight;
        }
    }
}

/// Separable box mean over a `width x height` plane.
pub fn box_filter(plane: &[f64], width: usize, height: usize, size: usize) -> Vec<f64> {
    let mut out = plane.to_vec();
    box_1d(&mut out, width, 1, height, width, size);
    box_1d(&mut out, height, width, width, 1, size);
    out
}

fn finish(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> FlowField {
    let bound = (width.min(height) as f64) / 2.0;
    let conv = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(-bound, bound) as f32).collect();
    FlowField {
        width,
        height,
        dx: conv(dx),
        dy: conv(dy),
    }
}

/// Build a full-mode field from explicit draws.
pub fn full_field_from_draws(spec: &FlowSpec, width: usize, height: usize, draws: &FlowDraws) -> FlowField {
    let mut planes = [(&draws.grid_dx, draws.shift.0), (&draws.grid_dy, draws.shift.1)].map(|(grid, shift)| {
        let mut p = upsample_grid(grid, draws.grid_w, draws.grid_h, width, height, spec.block);
        p.iter_mut().for_each(|v| *v += shift);
        box_filter(&p, width, height, spec.filter)
    });
    let dy = std::mem::take(&mut planes[1]);
    let dx = std::mem::take(&mut planes[0]);
    finish(width, height, dx, dy)
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Config(format!("flow size must be positive, got {width}x{height}")));
    }
    Ok(())
}

fn single_field<R: Rng>(spec: &FlowSpec, width: usize, height: usize, rng: &mut R) -> FlowField {
    match spec.mode {
        FlowMode::Full | FlowMode::WrongPair => {
            let draws = FlowDraws::sample(spec, width, height, rng);
            full_field_from_draws(spec, width, height, &draws)
        }
        FlowMode::TranslationOnly => {
            let shift = Normal::new(0.0, spec.sigma_s).expect("sigma_s validated");
            let sx = shift.sample(rng);
            let sy = shift.sample(rng);
            let n = width * height;
            finish(width, height, vec![sx; n], vec![sy; n])
        }
        FlowMode::ScalingOnly => {
            let s = Normal::new(0.0, spec.scale_sigma).expect("scale_sigma validated").sample(rng);
            let cx = (width as f64 - 1.0) / 2.0;
            let cy = (height as f64 - 1.0) / 2.0;
            let mut dx = Vec::with_capacity(width * height);
            let mut dy = Vec::with_capacity(width * height);
            for y in 0..height {
                for x in 0..width {
                    dx.push(s * (x as f64 - cx));
                    dy.push(s * (y as f64 - cy));
                }
            }
            finish(width, height, dx, dy)
        }
    }
}

/// Draw one synthetic flow field. The spec is used as given; call
/// [`scale_spec`] first to adapt reference-resolution parameters.
///
/// In `WrongPair` mode this returns the first field of the pair.
pub fn synthesize_flow(spec: &FlowSpec, width: usize, height: usize, seed: u64) -> Result<FlowField> {
    spec.validate()?;
    check_size(width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(single_field(spec, width, height, &mut rng))
}

/// Flows applied to images of each domain within one loss evaluation.
///
/// Outside the wrong-pair ablation both handles point at the same field.
#[derive(Clone, Debug)]
pub struct FlowPair {
    pub x_domain: Arc<FlowField>,
    pub y_domain: Arc<FlowField>,
}

impl FlowPair {
    pub fn matched(flow: FlowField) -> Self {
        let f = Arc::new(flow);
        FlowPair {
            x_domain: Arc::clone(&f),
            y_domain: f,
        }
    }

    pub fn is_matched(&self) -> bool {
        Arc::ptr_eq(&self.x_domain, &self.y_domain)
    }
}

pub fn synthesize_flow_pair(spec: &FlowSpec, width: usize, height: usize, seed: u64) -> Result<FlowPair> {
    let first = synthesize_flow(spec, width, height, seed)?;
    if spec.mode != FlowMode::WrongPair {
        return Ok(FlowPair::matched(first));
    }
    let second = synthesize_flow(spec, width, height, splitmix64(seed ^ 0x5752_4f4e_4746_4c57))?;
    Ok(FlowPair {
        x_domain: Arc::new(first),
        y_domain: Arc::new(second),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// fresh noise for every warp
    Independent,
    /// a real frame and its translation share one noise sample
    Shared,
    /// noise only on real-frame simulation, never on translated frames
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub sharing: NoiseSharing,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            enabled: true,
            sigma_low: 0.01,
            sigma_high: 0.02,
            sharing: NoiseSharing::Independent,
        }
    }
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn fixed(sigma: f64) -> Self {
        NoiseSpec {
            enabled: true,
            sigma_low: sigma,
            sigma_high: sigma,
            sharing: NoiseSharing::Independent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.sigma_low && self.sigma_low <= self.sigma_high && self.sigma_high.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigmas must satisfy 0 <= low <= high, got {} and {}",
                self.sigma_low, self.sigma_high
            )));
        }
        Ok(())
    }

    /// One noise tensor: `sigma_n ~ U(low, high)`, then i.i.d. `N(0, sigma_n^2)`.
    /// `None` when noise is disabled.
    pub fn sample<T: Element, R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Option<Tensor<T>> {
        if !self.enabled {
            return None;
        }
        let sigma = if self.sigma_high > self.sigma_low {
            rng.random_range(self.sigma_low..self.sigma_high)
        } else {
            self.sigma_low
        };
        Some(Tensor::randn(shape, sigma, rng))
    }
}

/// `W(x, f) = F(x, f) + noise`, clamped to `[-1, 1]` when noise is added.
///
/// Accepts `CHW` or `NCHW` images. With noise disabled the result is exactly
/// the warp.
pub fn simulate_future_frame<T: Element>(
    image: &Tensor<T>,
    flow: &FlowField,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Tensor<T>> {
    noise.validate()?;
    let warped = warp::backward_warp(image, flow, Border::Clamp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match noise.sample::<T, _>(warped.shape(), &mut rng) {
        None => Ok(warped),
        Some(n) => {
            let (lo, hi) = (-T::one(), T::one());
            Ok(warped.zip_map(&n, |a, b| (a + b).max(lo).min(hi))?)
        }
    }
}
