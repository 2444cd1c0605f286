//! Procedural unpaired two-domain video dataset and its on-disk layout.
//!
//! ```text
//! root/manifest.json
//! root/{domainX|domainY}/{train|val}/clip_%04d/frame_%05d.png
//!                                            /flow_%05d.flo    (val only)
//!                                            /labels_%05d.png  (val only)
//!                                            /manifest.json
//! ```
//! `flow_%05d.flo` at index `t` maps frame `t` back to frame `t - 1`.

mod formats;
mod scene;

use std::fs;
use std::path::{Path, PathBuf};

use gradcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use formats::{
    flo_bytes, flo_from_bytes, flow_to_rgb, from_u8, labels_decode, labels_encode, read_flo, read_labels, read_png, to_u8,
    write_flo, write_labels, write_png, LabelMap, Palette, FLO_MAGIC,
};
pub use scene::{Object, Scene, SceneConfig, Shape, CLASS_NAMES, N_CLASSES};

use crate::error::{Error, Result};
use crate::flowsynth::FlowField;
use crate::seed::{derive_seed, stream};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "domainX")]
    X,
    #[serde(rename = "domainY")]
    Y,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::X => "domainX",
            Domain::Y => "domainY",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// A clip of `3xHxW` frames in `[-1, 1]` with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<Tensor<f32>>,
    /// `gt_flow[t - 1]` maps frame `t` back to frame `t - 1`
    pub gt_flow: Option<Vec<FlowField>>,
    pub labels: Option<Vec<LabelMap>>,
    pub domain: Domain,
    pub clip_id: String,
}

impl VideoSequence {
    pub fn new(domain: Domain, clip_id: impl Into<String>, frames: Vec<Tensor<f32>>) -> Self {
        VideoSequence {
            frames,
            gt_flow: None,
            labels: None,
            domain,
            clip_id: clip_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Ok(());
        };
        let shape = first.shape();
        if shape.len() != 3 {
            return Err(Error::dim("sequence frame", "CHW", format!("{shape:?}")));
        }
        if let Some(bad) = self.frames.iter().find(|f| f.shape() != shape) {
            return Err(Error::dim("sequence frame", format!("{shape:?}"), format!("{:?}", bad.shape())));
        }
        if let Some(f) = &self.gt_flow {
            if f.len() + 1 != self.frames.len() {
                return Err(Error::dim("gt_flow length", self.frames.len() - 1, f.len()));
            }
            if f.iter().any(|f| f.width() != shape[2] || f.height() != shape[1]) {
                return Err(Error::dim("gt_flow size", format!("{}x{}", shape[2], shape[1]), "other"));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.frames.len() {
                return Err(Error::dim("labels length", self.frames.len(), l.len()));
            }
            if l.iter().any(|l| l.width != shape[2] || l.height != shape[1]) {
                return Err(Error::dim("labels size", format!("{}x{}", shape[2], shape[1]), "other"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub version: u32,
    pub domain: Domain,
    pub clip_id: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub count: usize,
    pub has_flow: bool,
    pub has_labels: bool,
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

pub fn flow_name(t: usize) -> String {
    format!("flow_{t:05}.flo")
}

pub fn labels_name(t: usize) -> String {
    format!("labels_{t:05}.png")
}

pub fn clip_dir_name(i: usize) -> String {
    format!("clip_{i:04}")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

/// Write a clip directory: frames, optional flow and labels, manifest.
pub fn write_frames(dir: &Path, seq: &VideoSequence) -> Result<()> {
    seq.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = match seq.frames.first() {
        Some(f) => (f.shape()[0], f.shape()[1], f.shape()[2]),
        None => (0, 0, 0),
    };
    for (t, f) in seq.frames.iter().enumerate() {
        write_png(&dir.join(frame_name(t)), f)?;
    }
    if let Some(flows) = &seq.gt_flow {
        for (i, f) in flows.iter().enumerate() {
            write_flo(&dir.join(flow_name(i + 1)), f)?;
        }
    }
    if let Some(labels) = &seq.labels {
        for (t, l) in labels.iter().enumerate() {
            write_labels(&dir.join(labels_name(t)), l)?;
        }
    }
    let m = ClipManifest {
        version: FORMAT_VERSION,
        domain: seq.domain,
        clip_id: seq.clip_id.clone(),
        width: w,
        height: h,
        channels: c,
        count: seq.frames.len(),
        has_flow: seq.gt_flow.is_some(),
        has_labels: seq.labels.is_some(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

fn require(dir: &Path, name: String, index: usize, count: usize) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingFrame {
            dir: dir.to_path_buf(),
            index,
            count,
        })
    }
}

/// Read a clip directory written by [`write_frames`].
pub fn read_frames(dir: &Path) -> Result<VideoSequence> {
    let mp = dir.join("manifest.json");
    let m: ClipManifest = read_json(&mp)?;
    if m.version != FORMAT_VERSION {
        return Err(Error::format(&mp, format!("unsupported clip format version {}", m.version)));
    }
    let frames = (0..m.count)
        .map(|t| {
            let p = require(dir, frame_name(t), t, m.count)?;
            let f = read_png(&p)?;
            if f.shape() != [m.channels, m.height, m.width] {
                return Err(Error::format(
                    &p,
                    format!("frame {t} is {:?}, manifest says {}x{}x{}", f.shape(), m.channels, m.height, m.width),
                ));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_flow = if m.has_flow {
        Some(
            (1..m.count)
                .map(|t| read_flo(&require(dir, flow_name(t), t, m.count)?))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let labels = if m.has_labels {
        Some(
            (0..m.count)
                .map(|t| read_labels(&require(dir, labels_name(t), t, m.count)?))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let seq = VideoSequence {
        frames,
        gt_flow,
        labels,
        domain: m.domain,
        clip_id: m.clip_id,
    };
    seq.validate()?;
    Ok(seq)
}

fn stream_tag(domain: Domain, split: Split) -> String {
    format!("scene/{}/{}", domain.dir_name(), split.dir_name())
}

/// Render clip `index` of `(domain, split)`. Every `(domain, split)` has its
/// own seed stream, so X and Y training clips never share a scene.
pub fn render_clip(cfg: &SceneConfig, seed: u64, domain: Domain, split: Split, index: usize) -> Result<VideoSequence> {
    cfg.validate()?;
    let mut rng = stream(seed, &stream_tag(domain, split), index as u64);
    let scene = Scene::sample(cfg, &mut rng);
    let clip_id = format!("{}/{}/{}", domain.dir_name(), split.dir_name(), clip_dir_name(index));
    let mut seq = match domain {
        Domain::X => {
            let mut noise = stream(derive_seed(seed, "sensor", index as u64), &stream_tag(domain, split), 0);
            let frames = (0..scene.frames).map(|t| scene.render_x(t, &mut noise)).collect();
            VideoSequence::new(domain, clip_id, frames)
        }
        Domain::Y => {
            let pal = Palette::default();
            let frames = (0..scene.frames)
                .map(|t| scene.render_y(t, &pal))
                .collect::<Result<Vec<_>>>()?;
            VideoSequence::new(domain, clip_id, frames)
        }
    };
    if split == Split::Val {
        seq.gt_flow = Some((1..scene.frames).map(|t| scene.flow(t)).collect());
        seq.labels = Some((0..scene.frames).map(|t| scene.labels(t)).collect());
    }
    Ok(seq)
}

/// All clips of one `(domain, split)`, in memory.
pub fn generate_clips(cfg: &SceneConfig, seed: u64, domain: Domain, split: Split) -> Result<Vec<VideoSequence>> {
    let n = match split {
        Split::Train => cfg.train_clips,
        Split::Val => cfg.val_clips,
    };
    (0..n)
        .into_par_iter()
        .map(|i| render_clip(cfg, seed, domain, split, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub scene: SceneConfig,
    pub classes: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    /// `domain/split -> clip directory names`
    pub clips: std::collections::BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(&root.join("manifest.json"))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::format(root.join("manifest.json"), format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }

    pub fn clip_dirs(&self, root: &Path, domain: Domain, split: Split) -> Vec<PathBuf> {
        let key = format!("{}/{}", domain.dir_name(), split.dir_name());
        self.clips
            .get(&key)
            .map(|v| v.iter().map(|c| split_dir(root, domain, split).join(c)).collect())
            .unwrap_or_default()
    }
}

pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(domain.dir_name()).join(split.dir_name())
}

/// Generate the given splits for both domains under `root`.
pub fn generate_dataset(cfg: &SceneConfig, seed: u64, splits: &[Split], root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut clips = std::collections::BTreeMap::new();
    for &split in splits {
        for domain in [Domain::X, Domain::Y] {
            let n = match split {
                Split::Train => cfg.train_clips,
                Split::Val => cfg.val_clips,
            };
            let dir = split_dir(root, domain, split);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            (0..n).into_par_iter().try_for_each(|i| {
                let seq = render_clip(cfg, seed, domain, split, i)?;
                write_frames(&dir.join(clip_dir_name(i)), &seq)
            })?;
            clips.insert(
                format!("{}/{}", domain.dir_name(), split.dir_name()),
                (0..n).map(clip_dir_name).collect(),
            );
        }
    }
    let m = DatasetManifest {
        version: FORMAT_VERSION,
        seed,
        scene: cfg.clone(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        palette: Palette::default().colors,
        clips,
    };
    write_json(&root.join("manifest.json"), &m)?;
    Ok(m)
}

/// Read every clip of one `(domain, split)` listed in the root manifest.
pub fn load_split(root: &Path, domain: Domain, split: Split) -> Result<Vec<VideoSequence>> {
    let m = DatasetManifest::read(root)?;
    m.clip_dirs(root, domain, split)
        .par_iter()
        .map(|d| read_frames(d))
        .collect()
}
