//! Finite-difference verification of backward rules.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ops::conv::Padding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// base central-difference step; the actual step is `step * (|p| + 1)`
    pub step: f64,
    pub tolerance: f64,
    /// entries probed per input tensor; larger tensors are subsampled
    pub max_entries: usize,
    pub seed: u64,
    /// lower bound on the error denominator, as a fraction of the largest
    /// analytic gradient in the graph; tensors whose true gradient is zero (a
    /// bias feeding a norm) are then judged against the graph's own scale
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: 64,
            seed: 0,
            scale_floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub cases: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

/// Max relative error per checked graph kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub kinds: BTreeMap<String, KindReport>,
}

impl GradReport {
    pub fn new(tolerance: f64) -> Self {
        GradReport {
            tolerance,
            kinds: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn passed(&self) -> bool {
        self.kinds.values().all(|k| k.failures == 0)
    }

    pub fn total_cases(&self) -> usize {
        self.kinds.values().map(|k| k.cases).sum()
    }

    pub fn record(&mut self, kind: &str, rel_error: f64) {
        let entry = self.kinds.entry(kind.to_string()).or_default();
        entry.cases += 1;
        // NaN never compares greater, so count it explicitly.
        if rel_error.is_nan() || rel_error > entry.max_rel_error {
            entry.max_rel_error = rel_error;
        }
        if rel_error.is_nan() || rel_error >= self.tolerance {
            entry.failures += 1;
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        for (kind, k) in other.kinds {
            let entry = self.kinds.entry(kind).or_default();
            entry.cases += k.cases;
            entry.failures += k.failures;
            if k.max_rel_error.is_nan() || k.max_rel_error > entry.max_rel_error {
                entry.max_rel_error = k.max_rel_error;
            }
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (kind, k) in &self.kinds {
            writeln!(
                f,
                "{:<8} {kind:<24} cases={:<4} max_rel_err={:.3e}",
                if k.failures == 0 { "PASS" } else { "FAIL" },
                k.cases,
                k.max_rel_error
            )?;
        }
        Ok(())
    }
}

/// Relative error of two gradient tensors in the max norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_floored(analytic, numeric, 1e-12)
}

pub fn relative_error_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(floor)
    }
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` receives one variable per input and must return a scalar. Returns
/// the worst relative error over all inputs, or `None` when there is nothing
/// to differentiate.
pub fn max_gradient_error<F>(inputs: &[Tensor<f64>], build: &F, cfg: &GradCheckConfig) -> Result<Option<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let r = build(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let global = vars
        .iter()
        .filter_map(|&v| grads.get(v))
        .flat_map(|g| g.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    let floor = (cfg.scale_floor * global).max(1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            let mut p = sample(&mut rng, n, cfg.max_entries).into_vec();
            p.sort_unstable();
            p
        };
        let zeros = Tensor::zeros(input.shape());
        let analytic_full = grads.get(vars[i]).unwrap_or(&zeros);
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let base = input.data()[j];
            let h = cfg.step * (base.abs() + 1.0);
            let mut probe = inputs.to_vec();
            let mut plus = input.data().to_vec();
            plus[j] = base + h;
            probe[i] = Tensor::from_vec(input.shape(), plus)?;
            let fp = eval(&probe)?;
            let mut minus = input.data().to_vec();
            minus[j] = base - h;
            probe[i] = Tensor::from_vec(input.shape(), minus)?;
            let fm = eval(&probe)?;
            numeric.push((fp - fm) / (2.0 * h));
            analytic.push(analytic_full.data()[j]);
        }
        let e = relative_error_floored(&analytic, &numeric, floor);
        if e.is_nan() || e > worst {
            worst = e;
        }
    }
    Ok(Some(worst))
}

/// Run one check and fold its result into `report` under `kind`.
pub fn check_gradients<F>(
    report: &mut GradReport,
    kind: &str,
    inputs: &[Tensor<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<()>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if let Some(err) = max_gradient_error(inputs, &build, cfg)? {
        report.record(kind, err);
    }
    Ok(())
}

/// Reduce `out` to a scalar with a fixed random projection so every output
/// element contributes with a distinct weight.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Random values bounded away from zero by `margin`, so kinked ops are never
/// probed within one finite-difference step of their kink.
pub fn away_from_zero<R: Rng>(shape: &[usize], margin: f64, rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(margin..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Checks every built-in op kind on `cases` random inputs each.
pub fn op_suite(cases: usize, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut report = GradReport::new(cfg.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for case in 0..cases {
        let s = cfg.seed.wrapping_add(case as u64);
        let c = GradCheckConfig {
            seed: s,
            ..cfg.clone()
        };
        let n = rng.random_range(1..3usize);
        let ch = rng.random_range(1..4usize);
        let h = rng.random_range(3..7usize);
        let w = rng.random_range(3..7usize);
        let img = Tensor::randn(&[n, ch, h, w], 1.0, &mut rng);

        // convolution: both pad modes, both strides
        let o = rng.random_range(1..4usize);
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..3usize);
        let pad = match case % 3 {
            0 => Padding::NONE,
            1 => Padding::zero(k / 2),
            _ => Padding::reflect(k / 2),
        };
        let wt = Tensor::randn(&[o, ch, k, k], 0.5, &mut rng);
        let bias = Tensor::randn(&[o], 0.5, &mut rng);
        check_gradients(
            &mut report,
            "conv2d",
            &[img.clone(), wt.clone(), bias.clone()],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(t, y, s)
            },
            &c,
        )?;

        check_gradients(
            &mut report,
            "upsample_nearest",
            std::slice::from_ref(&img),
            |t, v| {
                let y = t.upsample_nearest(v[0], 2)?;
                project(t, y, s)
            },
            &c,
        )?;

        let wt3 = Tensor::randn(&[o, ch, 3, 3], 0.5, &mut rng);
        check_gradients(
            &mut report,
            "upsample_conv",
            &[img.clone(), wt3, bias.clone()],
            |t, v| {
                let y = t.upsample_conv(v[0], 2, v[1], Some(v[2]), Padding::reflect(1))?;
                project(t, y, s)
            },
            &c,
        )?;

        let kinked = away_from_zero(&[n, ch, h, w], 0.05, &mut rng);
        check_gradients(
            &mut report,
            "relu",
            std::slice::from_ref(&kinked),
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, s)
            },
            &c,
        )?;
        check_gradients(
            &mut report,
            "leaky_relu",
            std::slice::from_ref(&kinked),
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                project(t, y, s)
            },
            &c,
        )?;
        // clamp bounds at +-0.5; shift inputs off both kinks
        let clamped = kinked.map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.3 } else { v });
        check_gradients(
            &mut report,
            "clamp",
            std::slice::from_ref(&clamped),
            |t, v| {
                let y = t.clamp(v[0], -0.5, 0.5)?;
                project(t, y, s)
            },
            &c,
        )?;
        check_gradients(
            &mut report,
            "tanh",
            std::slice::from_ref(&img),
            |t, v| {
                let y = t.tanh(v[0])?;
                project(t, y, s)
            },
            &c,
        )?;
        check_gradients(
            &mut report,
            "sigmoid",
            std::slice::from_ref(&img),
            |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, s)
            },
            &c,
        )?;

        let other = Tensor::randn(&[n, ch, h, w], 1.0, &mut rng);
        let scalar = Tensor::randn(&[1], 1.0, &mut rng);
        check_gradients(
            &mut report,
            "add",
            &[img.clone(), other.clone(), scalar.clone()],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.add(y, v[2])?;
                project(t, y, s)
            },
            &c,
        )?;
        check_gradients(
            &mut report,
            "sub",
            &[img.clone(), other.clone(), scalar.clone()],
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                let y = t.sub(v[2], y)?;
                project(t, y, s)
            },
            &c,
        )?;
        check_gradients(
            &mut report,
            "mul",
            &[img.clone(), other.clone(), scalar.clone()],
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.mul(y, v[2])?;
                project(t, y, s)
            },
            &c,
        )?;
        let k = rng.random_range(-2.0..2.0);
        check_gradients(
            &mut report,
            "scale",
            std::slice::from_ref(&img),
            |t, v| {
                let y = t.scale(v[0], k)?;
                project(t, y, s)
            },
            &c,
        )?;
        check_gradients(
            &mut report,
            "add_scalar",
            std::slice::from_ref(&img),
            |t, v| {
                let y = t.add_scalar(v[0], k)?;
                project(t, y, s)
            },
            &c,
        )?;

        let gain = Tensor::randn(&[ch], 1.0, &mut rng);
        let beta = Tensor::randn(&[ch], 1.0, &mut rng);
        check_gradients(
            &mut report,
            "instance_norm",
            &[img.clone(), gain, beta],
            |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, s)
            },
            &c,
        )?;

        check_gradients(&mut report, "mean", std::slice::from_ref(&img), |t, v| t.mean(v[0]), &c)?;
        check_gradients(&mut report, "sum", std::slice::from_ref(&img), |t, v| t.sum(v[0]), &c)?;
        let offset = away_from_zero(&[n, ch, h, w], 0.05, &mut rng);
        let shifted = img.zip_map(&offset, |a, b| a + b)?;
        check_gradients(
            &mut report,
            "l1_distance",
            &[img.clone(), shifted],
            |t, v| t.l1_distance(v[0], v[1]),
            &c,
        )?;
        let target = if case % 2 == 0 { 1.0 } else { 0.0 };
        let logits = img.map(|v| v * 3.0);
        check_gradients(
            &mut report,
            "bce_with_logits",
            std::slice::from_ref(&logits),
            |t, v| t.bce_with_logits(v[0], target),
            &c,
        )?;
    }
    Ok(report)
}
