//! Training objectives.
//!
//! Term naming follows the source frame: `ur_x`/`us_x` start from the X-domain
//! frame `x_t`, `ur_y`/`us_y` from `y_s`. Suppressing a domain drops the terms
//! whose comparison happens in that domain: for X that is `ur_x` (compares
//! simulated X frames) and `us_y` (compares translated Y->X frames).

use std::sync::Arc;

use gradcore::{Element, Padding, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowsynth::{FlowField, FlowPair, NoiseSharing, NoiseSpec};
use crate::models::Translator;
use crate::seed::stream;
use crate::warp::{warp_var, Border};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ur: f64,
    pub lambda_us: f64,
    pub lambda_cyc: f64,
    pub lambda_cont: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ur: 10.0,
            lambda_us: 10.0,
            lambda_cyc: 0.0,
            lambda_cont: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_ur: 0.0,
            lambda_us: 0.0,
            lambda_cyc: 0.0,
            lambda_cont: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ur, self.lambda_us, self.lambda_cyc, self.lambda_cont];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuppressionFlags {
    pub suppress_x_domain: bool,
    pub suppress_y_domain: bool,
}

impl SuppressionFlags {
    pub fn validate(&self) -> Result<()> {
        if self.suppress_x_domain && self.suppress_y_domain {
            return Err(Error::Config("at most one domain may be suppressed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    Minimax,
    #[default]
    Nonsaturating,
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

/// Adversarial loss from patch logits. `d_real` is only read on the
/// discriminator side.
pub fn adversarial_terms<T: Element>(
    tape: &mut Tape<T>,
    d_real: Option<Var>,
    d_fake: Var,
    side: Side,
    form: AdversarialForm,
) -> Result<Var> {
    let one = T::one();
    match side {
        Side::Generator => match form {
            AdversarialForm::Minimax => {
                let b = tape.bce_with_logits(d_fake, T::zero())?;
                Ok(tape.scale(b, -one)?)
            }
            AdversarialForm::Nonsaturating => Ok(tape.bce_with_logits(d_fake, one)?),
            AdversarialForm::LeastSquares => squared_offset(tape, d_fake, one),
        },
        Side::Discriminator => {
            let real = d_real.ok_or_else(|| Error::Config("discriminator loss needs real logits".into()))?;
            let (r, f) = match form {
                AdversarialForm::LeastSquares => (squared_offset(tape, real, one)?, squared_offset(tape, d_fake, T::zero())?),
                _ => (tape.bce_with_logits(real, one)?, tape.bce_with_logits(d_fake, T::zero())?),
            };
            Ok(tape.add(r, f)?)
        }
    }
}

/// `mean((l - target)^2)`
fn squared_offset<T: Element>(tape: &mut Tape<T>, l: Var, target: T) -> Result<Var> {
    let d = tape.add_scalar(l, -target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Which warp a noise sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpRole {
    /// `W(x_t, f)`, the simulated next real X frame
    SimX,
    SimY,
    /// `W(G_Y(x_t), f)`
    WarpXHat,
    WarpYHat,
}

impl WarpRole {
    fn tag(self) -> &'static str {
        match self {
            WarpRole::SimX => "noise/sim_x",
            WarpRole::SimY => "noise/sim_y",
            WarpRole::WarpXHat => "noise/warp_xhat",
            WarpRole::WarpYHat => "noise/warp_yhat",
        }
    }
}

/// Deterministic per-role noise for one iteration.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    pub spec: NoiseSpec,
    pub seed: u64,
}

impl NoiseSource {
    pub fn new(spec: NoiseSpec, seed: u64) -> Self {
        NoiseSource { spec, seed }
    }

    pub fn off() -> Self {
        NoiseSource::new(NoiseSpec::off(), 0)
    }

    pub fn draw<T: Element>(&self, role: WarpRole, shape: &[usize]) -> Option<Tensor<T>> {
        if !self.spec.enabled {
            return None;
        }
        let role = match (self.spec.sharing, role) {
            (NoiseSharing::Off, WarpRole::WarpXHat | WarpRole::WarpYHat) => return None,
            (NoiseSharing::Shared, WarpRole::WarpXHat) => WarpRole::SimX,
            (NoiseSharing::Shared, WarpRole::WarpYHat) => WarpRole::SimY,
            (_, r) => r,
        };
        self.spec.sample(shape, &mut stream(self.seed, role.tag(), 0))
    }
}

/// Both generators, seen as translators.
pub struct Generators<'a, T: Element> {
    /// `Y -> X`
    pub g_x: &'a dyn Translator<T>,
    /// `X -> Y`
    pub g_y: &'a dyn Translator<T>,
}

pub struct Discriminators<'a, T: Element> {
    pub d_x: &'a dyn Translator<T>,
    pub d_y: &'a dyn Translator<T>,
}

/// Memoized intermediate quantities shared by the consistency losses.
pub struct Pipeline<'a, T: Element> {
    gens: &'a Generators<'a, T>,
    pub x: Var,
    pub y: Var,
    flows: FlowPair,
    noise: &'a NoiseSource,
    x_hat: Option<Var>,
    y_hat: Option<Var>,
    sim_x: Option<Var>,
    sim_y: Option<Var>,
    warp_x_hat: Option<Var>,
    warp_y_hat: Option<Var>,
}

impl<'a, T: Element> Pipeline<'a, T> {
    pub fn new(gens: &'a Generators<'a, T>, x: Var, y: Var, flows: &FlowPair, noise: &'a NoiseSource) -> Self {
        Pipeline {
            gens,
            x,
            y,
            flows: flows.clone(),
            noise,
            x_hat: None,
            y_hat: None,
            sim_x: None,
            sim_y: None,
            warp_x_hat: None,
            warp_y_hat: None,
        }
    }

    pub fn flows(&self) -> &FlowPair {
        &self.flows
    }

    /// `G_Y(x_t)`
    pub fn x_hat(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        if let Some(v) = self.x_hat {
            return Ok(v);
        }
        let v = self.gens.g_y.translate(tape, self.x)?;
        self.x_hat = Some(v);
        Ok(v)
    }

    /// `G_X(y_s)`
    pub fn y_hat(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        if let Some(v) = self.y_hat {
            return Ok(v);
        }
        let v = self.gens.g_x.translate(tape, self.y)?;
        self.y_hat = Some(v);
        Ok(v)
    }

    fn simulate(&self, tape: &mut Tape<T>, v: Var, flow: &Arc<FlowField>, role: WarpRole) -> Result<Var> {
        let warped = warp_var(tape, v, flow, Border::Clamp)?;
        let shape = tape.value(warped).shape().to_vec();
        match self.noise.draw::<T>(role, &shape) {
            None => Ok(warped),
            Some(n) => {
                let n = tape.constant(n);
                let s = tape.add(warped, n)?;
                Ok(tape.clamp(s, -T::one(), T::one())?)
            }
        }
    }

    /// `W(x_t, f)`
    pub fn sim_x(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        if let Some(v) = self.sim_x {
            return Ok(v);
        }
        let f = self.flows.x_domain.clone();
        let v = self.simulate(tape, self.x, &f, WarpRole::SimX)?;
        self.sim_x = Some(v);
        Ok(v)
    }

    pub fn sim_y(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        if let Some(v) = self.sim_y {
            return Ok(v);
        }
        let f = self.flows.y_domain.clone();
        let v = self.simulate(tape, self.y, &f, WarpRole::SimY)?;
        self.sim_y = Some(v);
        Ok(v)
    }

    /// `W(G_Y(x_t), f)`; the translated frame lives in Y, so it takes the Y-domain flow.
    pub fn warp_x_hat(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        if let Some(v) = self.warp_x_hat {
            return Ok(v);
        }
        let xh = self.x_hat(tape)?;
        let f = self.flows.y_domain.clone();
        let v = self.simulate(tape, xh, &f, WarpRole::WarpXHat)?;
        self.warp_x_hat = Some(v);
        Ok(v)
    }

    pub fn warp_y_hat(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        if let Some(v) = self.warp_y_hat {
            return Ok(v);
        }
        let yh = self.y_hat(tape)?;
        let f = self.flows.x_domain.clone();
        let v = self.simulate(tape, yh, &f, WarpRole::WarpYHat)?;
        self.warp_y_hat = Some(v);
        Ok(v)
    }

    /// `L1(W(x_t), G_X(W(G_Y(x_t))))`
    pub fn recycle_x(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        let sim = self.sim_x(tape)?;
        let w = self.warp_x_hat(tape)?;
        let back = self.gens.g_x.translate(tape, w)?;
        Ok(tape.l1_distance(sim, back)?)
    }

    pub fn recycle_y(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        let sim = self.sim_y(tape)?;
        let w = self.warp_y_hat(tape)?;
        let back = self.gens.g_y.translate(tape, w)?;
        Ok(tape.l1_distance(sim, back)?)
    }

    /// `L1(G_Y(W(x_t)), W(G_Y(x_t)))`
    pub fn spatial_x(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        let sim = self.sim_x(tape)?;
        let t = self.gens.g_y.translate(tape, sim)?;
        let w = self.warp_x_hat(tape)?;
        Ok(tape.l1_distance(t, w)?)
    }

    pub fn spatial_y(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        let sim = self.sim_y(tape)?;
        let t = self.gens.g_x.translate(tape, sim)?;
        let w = self.warp_y_hat(tape)?;
        Ok(tape.l1_distance(t, w)?)
    }

    /// `L1(G_X(G_Y(x)), x) + L1(G_Y(G_X(y)), y)`
    pub fn cycle(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        let xh = self.x_hat(tape)?;
        let xr = self.gens.g_x.translate(tape, xh)?;
        let a = tape.l1_distance(xr, self.x)?;
        let yh = self.y_hat(tape)?;
        let yr = self.gens.g_y.translate(tape, yh)?;
        let b = tape.l1_distance(yr, self.y)?;
        Ok(tape.add(a, b)?)
    }

    pub fn content(&mut self, tape: &mut Tape<T>) -> Result<Var> {
        let xh = self.x_hat(tape)?;
        let a = content_loss(tape, self.x, xh)?;
        let yh = self.y_hat(tape)?;
        let b = content_loss(tape, self.y, yh)?;
        Ok(tape.add(a, b)?)
    }
}

/// A pair of optional per-side terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct SideTerms {
    pub x: Option<Var>,
    pub y: Option<Var>,
}

impl SideTerms {
    pub fn sum<T: Element>(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        Ok(match (self.x, self.y) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (a, b) => a.or(b),
        })
    }
}

fn check_pair<T: Element>(tape: &Tape<T>, x: Var, y: Var) -> Result<()> {
    let (sx, sy) = (tape.value(x).shape(), tape.value(y).shape());
    if sx.len() != 4 || sx[0] != sy[0] || sx[2..] != sy[2..] {
        return Err(Error::dim("domain batches", format!("{sx:?} (same N, H, W)"), format!("{sy:?}")));
    }
    Ok(())
}

/// Recycle loss for one pair of batches.
pub fn unsupervised_recycle_loss<T: Element>(
    tape: &mut Tape<T>,
    gens: &Generators<'_, T>,
    x: Var,
    y: Var,
    flows: &FlowPair,
    noise: &NoiseSource,
    flags: SuppressionFlags,
) -> Result<SideTerms> {
    check_pair(tape, x, y)?;
    let mut p = Pipeline::new(gens, x, y, flows, noise);
    recycle_terms(tape, &mut p, flags)
}

/// Spatial (commutation) loss for one pair of batches.
pub fn unsupervised_spatial_loss<T: Element>(
    tape: &mut Tape<T>,
    gens: &Generators<'_, T>,
    x: Var,
    y: Var,
    flows: &FlowPair,
    noise: &NoiseSource,
    flags: SuppressionFlags,
) -> Result<SideTerms> {
    check_pair(tape, x, y)?;
    let mut p = Pipeline::new(gens, x, y, flows, noise);
    spatial_terms(tape, &mut p, flags)
}

pub fn cycle_loss<T: Element>(tape: &mut Tape<T>, gens: &Generators<'_, T>, x: Var, y: Var) -> Result<Var> {
    let noise = NoiseSource::off();
    let (h, w) = (tape.value(x).shape()[2], tape.value(x).shape()[3]);
    let mut p = Pipeline::new(gens, x, y, &FlowPair::matched(FlowField::zeros(w, h)), &noise);
    p.cycle(tape)
}

fn recycle_terms<T: Element>(tape: &mut Tape<T>, p: &mut Pipeline<'_, T>, flags: SuppressionFlags) -> Result<SideTerms> {
    Ok(SideTerms {
        x: if flags.suppress_x_domain { None } else { Some(p.recycle_x(tape)?) },
        y: if flags.suppress_y_domain { None } else { Some(p.recycle_y(tape)?) },
    })
}

fn spatial_terms<T: Element>(tape: &mut Tape<T>, p: &mut Pipeline<'_, T>, flags: SuppressionFlags) -> Result<SideTerms> {
    Ok(SideTerms {
        x: if flags.suppress_y_domain { None } else { Some(p.spatial_x(tape)?) },
        y: if flags.suppress_x_domain { None } else { Some(p.spatial_y(tape)?) },
    })
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const BLUR_SIZE: usize = 5;
pub const BLUR_SIGMA: f64 = 2.0;

fn gaussian_kernel() -> Vec<f64> {
    let r = (BLUR_SIZE / 2) as f64;
    let g: Vec<f64> = (0..BLUR_SIZE)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp())
        .collect();
    let mut k: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Blurred luma of a 1- or 3-channel batch.
pub fn blurred_luma<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
    let luma = match c {
        1 => x,
        3 => {
            let w = Tensor::from_vec(&[1, 3, 1, 1], LUMA.iter().map(|&v| T::from_f64_lossy(v)).collect())?;
            let w = tape.constant(w);
            tape.conv2d(x, w, None, 1, Padding::NONE)?
        }
        _ => return Err(Error::dim("blurred_luma", "1 or 3 channels", c)),
    };
    let k = Tensor::from_vec(
        &[1, 1, BLUR_SIZE, BLUR_SIZE],
        gaussian_kernel().into_iter().map(T::from_f64_lossy).collect(),
    )?;
    let k = tape.constant(k);
    Ok(tape.conv2d(luma, k, None, 1, Padding::reflect(BLUR_SIZE / 2))?)
}

/// Content-preservation proxy: L1 between blurred luma of an image and of
/// its translation.
pub fn content_loss<T: Element>(tape: &mut Tape<T>, x: Var, gx: Var) -> Result<Var> {
    let a = blurred_luma(tape, x)?;
    let b = blurred_luma(tape, gx)?;
    Ok(tape.l1_distance(a, b)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub flags: SuppressionFlags,
    pub form: AdversarialForm,
}

/// Scalar values of one generator objective evaluation. Absent terms were
/// not computed (zero weight or suppressed).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: Option<f64>,
    pub ur_x: Option<f64>,
    pub ur_y: Option<f64>,
    pub us_x: Option<f64>,
    pub us_y: Option<f64>,
    pub cyc: Option<f64>,
    pub cont: Option<f64>,
    pub total: f64,
    pub d_x: Option<f64>,
    pub d_y: Option<f64>,
}

fn add_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a + b),
        (a, b) => a.or(b),
    }
}

impl LossBreakdown {
    pub fn ur(&self) -> Option<f64> {
        add_opt(self.ur_x, self.ur_y)
    }

    pub fn us(&self) -> Option<f64> {
        add_opt(self.us_x, self.us_y)
    }

    /// Recompute the weighted sum from the terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.adv.unwrap_or(0.0)
            + w.lambda_ur * self.ur().unwrap_or(0.0)
            + w.lambda_us * self.us().unwrap_or(0.0)
            + w.lambda_cyc * self.cyc.unwrap_or(0.0)
            + w.lambda_cont * self.cont.unwrap_or(0.0)
    }

    pub const CSV_HEADER: &'static str = "adv,ur_x,ur_y,us_x,us_y,cyc,cont,total,d_x,d_y";

    pub fn csv_fields(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.9e}")).unwrap_or_default();
        [
            f(self.adv),
            f(self.ur_x),
            f(self.ur_y),
            f(self.us_x),
            f(self.us_y),
            f(self.cyc),
            f(self.cont),
            format!("{:.9e}", self.total),
            f(self.d_x),
            f(self.d_y),
        ]
        .join(",")
    }
}

/// Generator objective on a tape, plus its breakdown.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// translated batches `(G_Y(x), G_X(y))`, for the discriminator step
    pub fakes: (Var, Var),
}

/// Assemble `adv + l_ur*L_ur + l_us*L_us + l_cyc*L_cyc + l_cont*L_cont`.
///
/// `spatial_flows` normally is the same pair as `recycle_flows`; passing a
/// different pair redraws the flow for the spatial family. `discs` may be
/// `None` to drop the adversarial term.
#[allow(clippy::too_many_arguments)]
pub fn total_objective<T: Element>(
    tape: &mut Tape<T>,
    gens: &Generators<'_, T>,
    discs: Option<&Discriminators<'_, T>>,
    x: Var,
    y: Var,
    recycle_flows: &FlowPair,
    spatial_flows: &FlowPair,
    noise: &NoiseSource,
    cfg: &ObjectiveConfig,
) -> Result<Objective> {
    cfg.weights.validate()?;
    cfg.flags.validate()?;
    check_pair(tape, x, y)?;
    let w = cfg.weights;
    let mut p = Pipeline::new(gens, x, y, recycle_flows, noise);
    let shared = Arc::ptr_eq(&recycle_flows.x_domain, &spatial_flows.x_domain)
        && Arc::ptr_eq(&recycle_flows.y_domain, &spatial_flows.y_domain);
    let mut b = LossBreakdown::default();
    let mut parts: Vec<(f64, Var)> = Vec::new();

    let x_hat = p.x_hat(tape)?;
    let y_hat = p.y_hat(tape)?;
    if let Some(d) = discs {
        let fy = d.d_y.translate(tape, x_hat)?;
        let fx = d.d_x.translate(tape, y_hat)?;
        let a = adversarial_terms(tape, None, fy, Side::Generator, cfg.form)?;
        let c = adversarial_terms(tape, None, fx, Side::Generator, cfg.form)?;
        let adv = tape.add(a, c)?;
        b.adv = Some(scalar(tape, adv));
        parts.push((1.0, adv));
    }
    if w.lambda_ur > 0.0 {
        let t = recycle_terms(tape, &mut p, cfg.flags)?;
        b.ur_x = t.x.map(|v| scalar(tape, v));
        b.ur_y = t.y.map(|v| scalar(tape, v));
        if let Some(s) = t.sum(tape)? {
            parts.push((w.lambda_ur, s));
        }
    }
    if w.lambda_us > 0.0 {
        let t = if shared {
            spatial_terms(tape, &mut p, cfg.flags)?
        } else {
            let mut q = Pipeline::new(gens, x, y, spatial_flows, noise);
            q.x_hat = Some(x_hat);
            q.y_hat = Some(y_hat);
            spatial_terms(tape, &mut q, cfg.flags)?
        };
        b.us_x = t.x.map(|v| scalar(tape, v));
        b.us_y = t.y.map(|v| scalar(tape, v));
        if let Some(s) = t.sum(tape)? {
            parts.push((w.lambda_us, s));
        }
    }
    if w.lambda_cyc > 0.0 {
        let c = p.cycle(tape)?;
        b.cyc = Some(scalar(tape, c));
        parts.push((w.lambda_cyc, c));
    }
    if w.lambda_cont > 0.0 {
        let c = p.content(tape)?;
        b.cont = Some(scalar(tape, c));
        parts.push((w.lambda_cont, c));
    }

    let mut total: Option<Var> = None;
    for (k, v) in parts {
        let term = if k == 1.0 { v } else { tape.scale(v, T::from_f64_lossy(k))? };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    b.total = scalar(tape, total);
    Ok(Objective {
        total,
        breakdown: b,
        fakes: (x_hat, y_hat),
    })
}

fn scalar<T: Element>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64_lossy()
}
