//! Occlusion-masked warping error and segmentation scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gradcore::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{LabelMap, Palette, VideoSequence};
use crate::error::{Error, Result};
use crate::flowsynth::FlowField;
use crate::warp::{backward_warp, occlusion_mask, Border};

pub const DEFAULT_ALPHA: f64 = 50.0;
/// Warping error is a per-element mean over pairs, pixels and channels.
pub const METRIC_VERSION: &str = "pseudoflow-eval/1 (warping error: per-element mean; seg: fractions)";

/// Mean over `t = 1..K`, pixels and channels of
/// `O_t * |x_t - F(x_{t-1}, f_t)|`, where the mask `O_t` is built from the
/// source frames.
pub fn warping_error(
    translated: &[Tensor<f32>],
    source: &[Tensor<f32>],
    gt_flow: &[FlowField],
    alpha: f64,
) -> Result<f64> {
    if translated.len() != source.len() {
        return Err(Error::dim("warping_error source frames", translated.len(), source.len()));
    }
    if gt_flow.len() + 1 != translated.len() {
        return Err(Error::dim("warping_error flows", translated.len().saturating_sub(1), gt_flow.len()));
    }
    if gt_flow.is_empty() {
        return Err(Error::Config("warping error needs at least two frames".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, flow) in gt_flow.iter().enumerate() {
        let (prev, cur) = (&translated[t], &translated[t + 1]);
        if prev.shape() != cur.shape() || prev.shape().len() != 3 {
            return Err(Error::dim("warping_error frame", format!("{:?}", prev.shape()), format!("{:?}", cur.shape())));
        }
        let mask = occlusion_mask(&source[t], &source[t + 1], flow, alpha)?;
        let (c, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        if mask.width != w || mask.height != h {
            return Err(Error::dim("warping_error mask", format!("{w}x{h}"), format!("{}x{}", mask.width, mask.height)));
        }
        let warped = backward_warp(prev, flow, Border::Clamp)?;
        let (a, b) = (cur.data(), warped.data());
        for ch in 0..c {
            for p in 0..h * w {
                let i = ch * h * w + p;
                total += mask.weights[p] * (a[i] as f64 - b[i] as f64).abs();
            }
        }
        count += c * h * w;
    }
    Ok(total / count as f64)
}

/// `counts[gt * n + pred]`
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::dim(
                "segmentation maps",
                format!("{}x{}", gt.width, gt.height),
                format!("{}x{}", pred.width, pred.height),
            ));
        }
        let n = self.n_classes;
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if p as usize >= n {
                return Err(Error::UnknownClass(p));
            }
            if g as usize >= n {
                return Err(Error::UnknownClass(g));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn row(&self, i: usize) -> u64 {
        (0..self.n_classes).map(|j| self.get(i, j)).sum()
    }

    fn col(&self, j: usize) -> u64 {
        (0..self.n_classes).map(|i| self.get(i, j)).sum()
    }

    /// Per-class `(accuracy, iou)` for classes present in the ground truth.
    pub fn per_class(&self) -> Vec<ClassScore> {
        (0..self.n_classes)
            .map(|i| {
                let (row, col, tp) = (self.row(i), self.col(i), self.get(i, i));
                let present = row > 0;
                ClassScore {
                    class: i,
                    present,
                    accuracy: present.then(|| tp as f64 / row as f64),
                    iou: present.then(|| tp as f64 / (row + col - tp) as f64),
                }
            })
            .collect()
    }

    pub fn scores(&self) -> SegScores {
        let total: u64 = self.counts.iter().sum();
        let diag: u64 = (0..self.n_classes).map(|i| self.get(i, i)).sum();
        let per = self.per_class();
        let present: Vec<&ClassScore> = per.iter().filter(|c| c.present).collect();
        let mean = |f: fn(&ClassScore) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
            }
        };
        SegScores {
            mp: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
            ac: mean(|c| c.accuracy.unwrap()),
            miou: mean(|c| c.iou.unwrap()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub present: bool,
    pub accuracy: Option<f64>,
    pub iou: Option<f64>,
}

/// Mean pixel accuracy, average class accuracy and mean IoU, as fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub mp: f64,
    pub ac: f64,
    pub miou: f64,
}

/// Scores from the global confusion matrix of all map pairs. Classes absent
/// from the ground truth are left out of the AC and mIoU means.
pub fn segmentation_scores(pred: &[LabelMap], gt: &[LabelMap], n_classes: usize) -> Result<SegScores> {
    Ok(confusion(pred, gt, n_classes)?.scores())
}

pub fn confusion(pred: &[LabelMap], gt: &[LabelMap], n_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::dim("segmentation map count", gt.len(), pred.len()));
    }
    let mut m = ConfusionMatrix::new(n_classes);
    for (p, g) in pred.iter().zip(gt) {
        m.add(p, g)?;
    }
    Ok(m)
}

/// A value or the reason it is missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub status: String,
    pub value: Option<f64>,
}

impl Metric {
    pub fn ok(v: f64) -> Self {
        Metric {
            status: "ok".into(),
            value: Some(v),
        }
    }

    pub fn skipped(reason: impl Into<String>) -> Self {
        Metric {
            status: format!("skipped: {}", reason.into()),
            value: None,
        }
    }

    fn mean_of(values: impl Iterator<Item = Option<f64>>, what: &str) -> Self {
        let v: Vec<f64> = values.flatten().collect();
        if v.is_empty() {
            Metric::skipped(format!("no clip has {what}"))
        } else {
            Metric::ok(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    fn csv(&self) -> String {
        self.value.map(|v| format!("{v:.9}")).unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip_id: String,
    pub frames: usize,
    pub warping_error: Metric,
    /// warping error of the untranslated source clip
    pub source_warping_error: Metric,
    pub mp: Metric,
    pub ac: Metric,
    pub miou: Metric,
    #[serde(skip)]
    confusion: Option<ConfusionMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_version: String,
    pub alpha: f64,
    pub config: serde_json::Value,
    pub clips: Vec<ClipEval>,
    /// mean of per-clip warping errors
    pub warping_error: Metric,
    pub source_warping_error: Metric,
    /// pixel accuracy over the global confusion matrix
    pub mp: Metric,
    /// mean of `per_class` accuracies over present classes
    pub ac: Metric,
    /// mean of `per_class` IoUs over present classes
    pub miou: Metric,
    pub per_class: Vec<ClassScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub alpha: f64,
    pub palette: Palette,
    /// echoed into the report
    pub echo: serde_json::Value,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: DEFAULT_ALPHA,
            palette: Palette::default(),
            echo: serde_json::Value::Null,
        }
    }
}

fn eval_clip<F>(translate: &F, clip: &VideoSequence, cfg: &EvalConfig) -> Result<ClipEval>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    clip.validate()?;
    let out: Vec<Tensor<f32>> = clip.frames.iter().map(translate).collect::<Result<_>>()?;
    let (warping_error, source_warping_error) = match &clip.gt_flow {
        Some(f) if clip.len() >= 2 => (
            Metric::ok(warping_error(&out, &clip.frames, f, cfg.alpha)?),
            Metric::ok(warping_error(&clip.frames, &clip.frames, f, cfg.alpha)?),
        ),
        Some(_) => (Metric::skipped("fewer than two frames"), Metric::skipped("fewer than two frames")),
        None => (Metric::skipped("no ground-truth flow"), Metric::skipped("no ground-truth flow")),
    };
    let (mp, ac, miou, confusion) = match &clip.labels {
        Some(gt) => {
            let pred = out.iter().map(|f| cfg.palette.decode(f)).collect::<Result<Vec<_>>>()?;
            let m = self::confusion(&pred, gt, cfg.palette.len())?;
            let s = m.scores();
            (Metric::ok(s.mp), Metric::ok(s.ac), Metric::ok(s.miou), Some(m))
        }
        None => {
            let s = Metric::skipped("no labels");
            (s.clone(), s.clone(), s, None)
        }
    };
    Ok(ClipEval {
        clip_id: clip.clip_id.clone(),
        frames: clip.len(),
        warping_error,
        source_warping_error,
        mp,
        ac,
        miou,
        confusion,
    })
}

/// Translate every clip frame by frame and score it against its ground truth.
pub fn evaluate_run<F>(translate: F, clips: &[VideoSequence], cfg: &EvalConfig) -> Result<EvalReport>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let evals: Vec<ClipEval> = clips
        .par_iter()
        .map(|c| eval_clip(&translate, c, cfg))
        .collect::<Result<_>>()?;
    let mut global: Option<ConfusionMatrix> = None;
    for e in &evals {
        if let Some(m) = &e.confusion {
            global.get_or_insert_with(|| ConfusionMatrix::new(m.n_classes)).merge(m);
        }
    }
    let (mp, ac, miou, per_class) = match &global {
        Some(m) => {
            let s = m.scores();
            (Metric::ok(s.mp), Metric::ok(s.ac), Metric::ok(s.miou), m.per_class())
        }
        None => {
            let s = Metric::skipped("no clip has labels");
            (s.clone(), s.clone(), s, Vec::new())
        }
    };
    Ok(EvalReport {
        metric_version: METRIC_VERSION.into(),
        alpha: cfg.alpha,
        config: cfg.echo.clone(),
        warping_error: Metric::mean_of(evals.iter().map(|e| e.warping_error.value), "ground-truth flow"),
        source_warping_error: Metric::mean_of(evals.iter().map(|e| e.source_warping_error.value), "ground-truth flow"),
        clips: evals,
        mp,
        ac,
        miou,
        per_class,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,frames,warping_error,source_warping_error,mp,ac,miou\n");
        for c in &self.clips {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.clip_id,
                c.frames,
                c.warping_error.csv(),
                c.source_warping_error.csv(),
                c.mp.csv(),
                c.ac.csv(),
                c.miou.csv()
            );
        }
        let frames: usize = self.clips.iter().map(|c| c.frames).sum();
        let _ = writeln!(
            s,
            "aggregate,{frames},{},{},{},{},{}",
            self.warping_error.csv(),
            self.source_warping_error.csv(),
            self.mp.csv(),
            self.ac.csv(),
            self.miou.csv()
        );
        s
    }

    /// Write `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = stem.with_extension("json");
        let s = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, s + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = stem.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
