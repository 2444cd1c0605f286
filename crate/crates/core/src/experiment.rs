//! Ablation presets and paired training/evaluation runs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::VideoSequence;
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_run, EvalConfig};
use crate::flowsynth::FlowMode;
use crate::trainer::{frame_translator, TrainConfig, TrainData, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// adversarial + recycle + spatial (+ cycle as configured)
    Full,
    /// adversarial + cycle only
    Baseline,
    WrongFlow,
    NoNoise,
    TranslationOnly,
    ScalingOnly,
    NoRecycle,
    NoSpatial,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::Baseline,
        Variant::WrongFlow,
        Variant::NoNoise,
        Variant::TranslationOnly,
        Variant::ScalingOnly,
        Variant::NoRecycle,
        Variant::NoSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
            Variant::WrongFlow => "wrong-flow",
            Variant::NoNoise => "no-noise",
            Variant::TranslationOnly => "translation-only",
            Variant::ScalingOnly => "scaling-only",
            Variant::NoRecycle => "no-recycle",
            Variant::NoSpatial => "no-spatial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// `base` with this variant's change applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::Baseline => {
                c.weights.lambda_ur = 0.0;
                c.weights.lambda_us = 0.0;
            }
            Variant::WrongFlow => c.flow.mode = FlowMode::WrongPair,
            Variant::NoNoise => c.noise.enabled = false,
            Variant::TranslationOnly => c.flow.mode = FlowMode::TranslationOnly,
            Variant::ScalingOnly => c.flow.mode = FlowMode::ScalingOnly,
            Variant::NoRecycle => c.weights.lambda_ur = 0.0,
            Variant::NoSpatial => c.weights.lambda_us = 0.0,
        }
        c
    }
}

/// Named groups of variants, each compared against `full`.
pub fn preset(name: &str) -> Result<Vec<Variant>> {
    use Variant::*;
    Ok(match name {
        "wrong-flow" => vec![Full, WrongFlow],
        "no-noise" => vec![Full, NoNoise],
        "flow-modes" => vec![Full, TranslationOnly, ScalingOnly],
        "losses" => vec![Full, Baseline, NoRecycle, NoSpatial],
        "directions" => vec![Full, Baseline, WrongFlow, NoNoise],
        "all" => Variant::ALL.to_vec(),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?} (wrong-flow, no-noise, flow-modes, losses, directions, all)"
            )))
        }
    })
}

/// Video-to-labels defaults: the video domain X is suppressed and the cycle
/// loss is on.
pub fn video_to_labels(mut base: TrainConfig) -> TrainConfig {
    base.flags.suppress_x_domain = true;
    base.flags.suppress_y_domain = false;
    base.weights.lambda_ur = 10.0;
    base.weights.lambda_us = 10.0;
    base.weights.lambda_cyc = 10.0;
    base
}

/// Desk-scale video-to-labels run: width-8 networks, 1200 iterations, a
/// few CPU minutes per run on 64x64 frames.
pub fn desk_reproduction() -> TrainConfig {
    let mut c = video_to_labels(TrainConfig::default());
    c.generator.base_width = 8;
    c.discriminator.base_width = 8;
    c.epochs = 100;
    c.max_iterations = 1200;
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub iterations: u64,
    pub train_seconds: f64,
    pub warping_error: f64,
    pub source_warping_error: f64,
    pub mp: f64,
    pub ac: f64,
    pub miou: f64,
    /// mean of `ur_x + ur_y` over the run, when recorded
    pub mean_ur: Option<f64>,
}

/// Train `variant` from scratch with `seed`, then score `G_Y` on `val`.
pub fn run_variant(
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
    data: &TrainData,
    val: &[VideoSequence],
) -> Result<RunResult> {
    let mut cfg = variant.apply(base);
    cfg.seed = seed;
    let mut trainer = Trainer::new(cfg)?;
    let start = Instant::now();
    let rows = trainer.run(data, |_| {})?;
    let train_seconds = start.elapsed().as_secs_f64();
    let report = evaluate_run(frame_translator(&trainer.models.g_y), val, &EvalConfig::default())?;
    let need = |m: &crate::evalmetrics::Metric, what: &str| {
        m.value
            .ok_or_else(|| Error::Config(format!("validation set gives no {what}: {}", m.status)))
    };
    let urs: Vec<f64> = rows.iter().filter_map(|r| r.losses.ur()).collect();
    Ok(RunResult {
        variant,
        seed,
        iterations: rows.len() as u64,
        train_seconds,
        warping_error: need(&report.warping_error, "warping error")?,
        source_warping_error: need(&report.source_warping_error, "warping error")?,
        mp: need(&report.mp, "segmentation")?,
        ac: need(&report.ac, "segmentation")?,
        miou: need(&report.miou, "segmentation")?,
        mean_ur: (!urs.is_empty()).then(|| urs.iter().sum::<f64>() / urs.len() as f64),
    })
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_warping_error: f64,
    pub median_miou: f64,
    pub median_mp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let mut order: Vec<Variant> = Vec::new();
        for r in &runs {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        let summary = order
            .into_iter()
            .map(|v| {
                let pick = |f: fn(&RunResult) -> f64| {
                    let mut xs: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(f).collect();
                    median(&mut xs)
                };
                VariantSummary {
                    variant: v,
                    median_warping_error: pick(|r| r.warping_error),
                    median_miou: pick(|r| r.miou),
                    median_mp: pick(|r| r.mp),
                }
            })
            .collect();
        AblationReport { runs, summary }
    }

    pub fn get(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

/// Every `(variant, seed)` combination, run one after another.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: &TrainData,
    val: &[VideoSequence],
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let r = run_variant(base, v, seed, data, val)?;
            progress(&r);
            runs.push(r);
        }
    }
    Ok(AblationReport::from_runs(runs))
}
