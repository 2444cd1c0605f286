//! Procedural moving-shapes scenes rendered in two styles: textured video
//! (domain X) and flat label colors (domain Y).

use gradcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::formats::{LabelMap, Palette};
use crate::error::{Error, Result};
use crate::flowsynth::FlowField;

pub const N_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["background", "circle", "rectangle", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames_per_clip: usize,
    /// training clips per domain
    pub train_clips: usize,
    /// validation clips per domain
    pub val_clips: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// object radius range in pixels
    pub min_size: f64,
    pub max_size: f64,
    /// largest per-axis object speed, px/frame
    pub max_speed: i32,
    /// largest per-axis camera drift, px/frame
    pub max_drift: i32,
    /// std of i.i.d. sensor noise on domain X frames
    pub sensor_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            frames_per_clip: 16,
            train_clips: 100,
            val_clips: 8,
            min_objects: 2,
            max_objects: 4,
            min_size: 5.0,
            max_size: 10.0,
            max_speed: 2,
            max_drift: 1,
            sensor_noise: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.width < 4 || self.height < 4 {
            return bad("resolution must be at least 4x4");
        }
        if self.frames_per_clip < 1 {
            return bad("frames_per_clip must be >= 1");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("need 0 < min_size <= max_size");
        }
        if self.max_speed < 0 || self.max_drift < 0 || self.sensor_noise.is_nan() || self.sensor_noise < 0.0 {
            return bad("speeds and noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Rectangle,
    Triangle,
}

impl Shape {
    pub fn class_id(self) -> u8 {
        match self {
            Shape::Circle => 1,
            Shape::Rectangle => 2,
            Shape::Triangle => 3,
        }
    }

    /// Whether offset `(u, v)` from the center lies inside a shape of size `r`.
    fn contains(self, u: f64, v: f64, r: f64, aspect: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= r * r,
            Shape::Rectangle => u.abs() <= r * aspect && v.abs() <= r / aspect,
            Shape::Triangle => {
                // apex up, base at v = r
                if v < -r || v > r {
                    return false;
                }
                let half = r * (v + r) / (2.0 * r);
                u.abs() <= half
            }
        }
    }
}

/// Sum of low-frequency sinusoids per channel.
#[derive(Clone, Debug, PartialEq)]
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    fn sample<R: Rng + ?Sized>(base: [f64; 3], amp: f64, n: usize, max_freq: f64, rng: &mut R) -> Self {
        let waves = (0..n)
            .map(|_| {
                let k = [rng.random_range(-max_freq..max_freq), rng.random_range(-max_freq..max_freq)];
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let a = [
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                ];
                (k, phase, a)
            })
            .collect();
        Texture { base, waves }
    }

    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.base;
        for (k, phase, a) in &self.waves {
            let s = (k[0] * u + k[1] * v + phase).sin();
            for i in 0..3 {
                c[i] += a[i] * s;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Object {
    pub shape: Shape,
    /// center at frame 0, pixel units
    pub center: [f64; 2],
    pub velocity: [i32; 2],
    pub size: f64,
    pub aspect: f64,
    texture: Texture,
}

impl Object {
    fn center_at(&self, t: usize) -> [f64; 2] {
        [
            self.center[0] + (self.velocity[0] * t as i32) as f64,
            self.center[1] + (self.velocity[1] * t as i32) as f64,
        ]
    }
}

/// One clip's worth of analytic motion.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: Vec<Object>,
    /// background drift, px/frame
    pub drift: [i32; 2],
    background: Texture,
    sensor_noise: f64,
}

fn class_tint(shape: Shape) -> [f64; 3] {
    match shape {
        Shape::Circle => [0.7, -0.3, -0.3],
        Shape::Rectangle => [-0.3, 0.6, -0.2],
        Shape::Triangle => [-0.3, -0.2, 0.7],
    }
}

impl Scene {
    pub fn sample<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Self {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let t_last = (cfg.frames_per_clip.max(1) - 1) as i32;
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let objects = (0..n)
            .map(|_| {
                let shape = [Shape::Circle, Shape::Rectangle, Shape::Triangle][rng.random_range(0..3)];
                let size = rng.random_range(cfg.min_size..=cfg.max_size);
                let aspect = if shape == Shape::Rectangle { rng.random_range(0.6..1.6) } else { 1.0 };
                // keep the center inside the frame for the whole clip, so at
                // least half of every object stays visible
                let (vx, cx) = axis_motion(cfg.max_speed, t_last, w, rng);
                let (vy, cy) = axis_motion(cfg.max_speed, t_last, h, rng);
                let tint = class_tint(shape);
                let jitter = |c: f64, r: &mut R| (c + r.random_range(-0.15..0.15)).clamp(-0.9, 0.9);
                let base = [jitter(tint[0], rng), jitter(tint[1], rng), jitter(tint[2], rng)];
                Object {
                    shape,
                    center: [cx, cy],
                    velocity: [vx, vy],
                    size,
                    aspect,
                    texture: Texture::sample(base, 0.08, 2, 0.5, rng),
                }
            })
            .collect();
        let drift = [
            rng.random_range(-cfg.max_drift..=cfg.max_drift),
            rng.random_range(-cfg.max_drift..=cfg.max_drift),
        ];
        let g = rng.random_range(-0.4..0.1);
        let bg_base = [
            g + rng.random_range(-0.1..0.1),
            g + rng.random_range(-0.1..0.1),
            g + rng.random_range(-0.1..0.1),
        ];
        Scene {
            width: cfg.width,
            height: cfg.height,
            frames: cfg.frames_per_clip,
            objects,
            drift,
            background: Texture::sample(bg_base, 0.12, 3, 0.3, rng),
            sensor_noise: cfg.sensor_noise,
        }
    }

    /// A scene with no objects, no drift and a flat background.
    pub fn empty(width: usize, height: usize, frames: usize) -> Self {
        Scene {
            width,
            height,
            frames,
            objects: Vec::new(),
            drift: [0, 0],
            background: Texture {
                base: [0.0; 3],
                waves: Vec::new(),
            },
            sensor_noise: 0.0,
        }
    }

    /// Add an object with a flat texture of the class tint.
    pub fn push_object(&mut self, shape: Shape, center: [f64; 2], velocity: [i32; 2], size: f64) {
        self.objects.push(Object {
            shape,
            center,
            velocity,
            size,
            aspect: 1.0,
            texture: Texture {
                base: class_tint(shape),
                waves: Vec::new(),
            },
        });
    }

    /// Index of the topmost object covering pixel `(x, y)` at frame `t`;
    /// `None` for background.
    pub fn instance_at(&self, t: usize, x: usize, y: usize) -> Option<usize> {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        self.objects.iter().enumerate().rev().find_map(|(i, o)| {
            let c = o.center_at(t);
            o.shape.contains(px - c[0], py - c[1], o.size, o.aspect).then_some(i)
        })
    }

    pub fn instance_map(&self, t: usize) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.instance_at(t, x, y));
            }
        }
        out
    }

    pub fn labels(&self, t: usize) -> LabelMap {
        let ids = self
            .instance_map(t)
            .into_iter()
            .map(|i| i.map_or(0, |i| self.objects[i].shape.class_id()))
            .collect();
        LabelMap::new(self.width, self.height, ids).expect("sized by construction")
    }

    /// Textured domain-X frame `t`, `3xHxW` in `[-1, 1]`.
    pub fn render_x<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0f32; 3 * plane];
        let noise = Normal::new(0.0, self.sensor_noise.max(f64::MIN_POSITIVE)).expect("finite std");
        let inst = self.instance_map(t);
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let c = match inst[y * self.width + x] {
                    Some(i) => {
                        let o = &self.objects[i];
                        let c = o.center_at(t);
                        o.texture.at(px - c[0], py - c[1])
                    }
                    None => {
                        let s = t as f64;
                        self.background
                            .at(px - self.drift[0] as f64 * s, py - self.drift[1] as f64 * s)
                    }
                };
                for k in 0..3 {
                    let n = if self.sensor_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    out[k * plane + y * self.width + x] = (c[k] + n).clamp(-1.0, 1.0) as f32;
                }
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out).expect("sized by construction")
    }

    /// Flat palette domain-Y frame `t`.
    pub fn render_y(&self, t: usize, palette: &Palette) -> Result<Tensor<f32>> {
        palette.encode(&self.labels(t))
    }

    /// Backward flow from frame `t` to `t - 1`: each pixel points to where its
    /// content was one frame earlier.
    pub fn flow(&self, t: usize) -> FlowField {
        let inst = self.instance_map(t);
        let w = self.width;
        FlowField::from_fn(self.width, self.height, |x, y| {
            let v = match inst[y * w + x] {
                Some(i) => self.objects[i].velocity,
                None => self.drift,
            };
            (-(v[0] as f32), -(v[1] as f32))
        })
    }
}

/// Integer speed and start coordinate such that the center stays within
/// `[0, len]` over `t_last` frames.
fn axis_motion<R: Rng + ?Sized>(max_speed: i32, t_last: i32, len: f64, rng: &mut R) -> (i32, f64) {
    let mut v = rng.random_range(-max_speed..=max_speed);
    while (v * t_last).abs() as f64 > 0.8 * len {
        v -= v.signum();
    }
    let travel = (v * t_last) as f64;
    let lo = 0.1 * len - travel.min(0.0);
    let hi = 0.9 * len - travel.max(0.0);
    let c = if hi > lo { rng.random_range(lo..hi) } else { 0.5 * len - 0.5 * travel };
    (v, c.floor() + 0.5)
}
