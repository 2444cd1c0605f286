use std::sync::Arc;

use gradcore::gradcheck::{max_gradient_error, GradCheckConfig};
use gradcore::{GradError, Tape, Tensor, Var};
use pseudoflow::flowsynth::{scale_spec, synthesize_flow, synthesize_flow_pair, FlowField, FlowMode, FlowPair, FlowSpec, NoiseSpec};
use pseudoflow::losses::{
    content_loss, cycle_loss, total_objective, unsupervised_recycle_loss, unsupervised_spatial_loss, Discriminators,
    Generators, LossWeights, NoiseSource, ObjectiveConfig, Pipeline, SuppressionFlags,
};
use pseudoflow::models::{build_generator, GeneratorConfig, Network, Translator};
use pseudoflow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn identity(_: &mut Tape<f64>, x: Var) -> Result<Var> {
    Ok(x)
}

fn batch(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(&[1, c, h, w], -0.9, 0.9, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_flow(w: usize, h: usize, seed: u64) -> FlowPair {
    FlowPair::matched(synthesize_flow(&scale_spec(&FlowSpec::default(), w, h), w, h, seed).unwrap())
}

fn val(t: &Tape<f64>, v: Option<Var>) -> f64 {
    t.value(v.unwrap()).item()
}

fn g(e: pseudoflow::Error) -> GradError {
    GradError::Format(e.to_string())
}

#[test]
fn identity_generators_give_zero_consistency_losses() {
    let gens = Generators { g_x: &identity, g_y: &identity };
    let mut t = Tape::new();
    let xy = batch(3, 12, 12, 0);
    let x = t.constant(xy.clone());
    let y = t.constant(xy);
    let flows = random_flow(12, 12, 1);
    let noise = NoiseSource::off();
    let ur = unsupervised_recycle_loss(&mut t, &gens, x, y, &flows, &noise, SuppressionFlags::default()).unwrap();
    let us = unsupervised_spatial_loss(&mut t, &gens, x, y, &flows, &noise, SuppressionFlags::default()).unwrap();
    let cyc = cycle_loss(&mut t, &gens, x, y).unwrap();
    for v in [ur.x, ur.y, us.x, us.y, Some(cyc)] {
        assert_eq!(val(&t, v), 0.0);
    }
}

#[test]
fn scale_pair_recycles_exactly() {
    let gy = |t: &mut Tape<f64>, x: Var| -> Result<Var> { Ok(t.scale(x, 2.0)?) };
    let gx = |t: &mut Tape<f64>, x: Var| -> Result<Var> { Ok(t.scale(x, 0.5)?) };
    let gens = Generators { g_x: &gx, g_y: &gy };
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![0.1, -0.3, 0.7, 0.25]).unwrap());
    let y = t.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, 0.0, -0.2, 0.9]).unwrap());
    let flows = FlowPair::matched(FlowField::zeros(2, 2));
    let ur = unsupervised_recycle_loss(&mut t, &gens, x, y, &flows, &NoiseSource::off(), SuppressionFlags::default()).unwrap();
    assert_eq!(val(&t, ur.x), 0.0);
}

#[test]
fn pointwise_linear_generator_commutes_with_warp() {
    let gy = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
        let s = t.scale(x, 0.7)?;
        Ok(t.add_scalar(s, 0.1)?)
    };
    let gens = Generators { g_x: &identity, g_y: &gy };
    for seed in 0..5 {
        let mut t = Tape::new();
        let x = t.constant(batch(3, 20, 24, seed));
        let y = t.constant(batch(3, 20, 24, seed + 50));
        let flows = random_flow(24, 20, seed);
        let us = unsupervised_spatial_loss(&mut t, &gens, x, y, &flows, &NoiseSource::off(), SuppressionFlags::default()).unwrap();
        assert!(val(&t, us.x) <= 1e-6);
    }
}

#[test]
fn zero_flow_makes_spatial_loss_vanish_for_any_generator() {
    let net = build_generator(&GeneratorConfig { base_width: 4, n_resblocks: 1, ..GeneratorConfig::desk() }, 0)
        .unwrap()
        .cast::<f64>();
    let net2 = build_generator(&GeneratorConfig { base_width: 4, n_resblocks: 1, ..GeneratorConfig::desk() }, 1)
        .unwrap()
        .cast::<f64>();
    let mut t = Tape::new();
    let bx = net.bind(&mut t, true);
    let by = net2.bind(&mut t, true);
    let gens = Generators { g_x: &bx, g_y: &by };
    let x = t.constant(batch(3, 16, 16, 3));
    let y = t.constant(batch(3, 16, 16, 4));
    let flows = FlowPair::matched(FlowField::zeros(16, 16));
    let us = unsupervised_spatial_loss(&mut t, &gens, x, y, &flows, &NoiseSource::off(), SuppressionFlags::default()).unwrap();
    assert_eq!(val(&t, us.x), 0.0);
    assert_eq!(val(&t, us.y), 0.0);
}

#[test]
fn cycle_loss_hand_cases() {
    let plus = |t: &mut Tape<f64>, x: Var| -> Result<Var> { Ok(t.add_scalar(x, 0.3)?) };
    let minus = |t: &mut Tape<f64>, x: Var| -> Result<Var> { Ok(t.add_scalar(x, -0.3)?) };
    let mut t = Tape::new();
    let x = t.constant(batch(3, 4, 4, 0));
    let y = t.constant(batch(3, 4, 4, 1));
    let c = cycle_loss(&mut t, &Generators { g_x: &minus, g_y: &plus }, x, y).unwrap();
    assert!(t.value(c).item() < 1e-15);

    let shift = |t: &mut Tape<f64>, x: Var| -> Result<Var> { Ok(t.add_scalar(x, 0.2)?) };
    let z = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let c = cycle_loss(&mut t, &Generators { g_x: &identity, g_y: &shift }, z, z).unwrap();
    // 0.2 from each direction
    assert!((t.value(c).item() - 0.4).abs() < 1e-12);
}

#[test]
fn content_loss_hand_cases() {
    let mut t = Tape::new();
    let xs = batch(3, 8, 8, 2);
    let x = t.constant(xs.clone());
    let same = content_loss(&mut t, x, x).unwrap();
    assert_eq!(t.value(same).item(), 0.0);
    let brighter = t.constant(xs.map(|v| v + 0.1));
    let c = content_loss(&mut t, x, brighter).unwrap();
    assert!((t.value(c).item() - 0.1).abs() < 1e-9);
    // orthogonal to the luma weights (0.299, 0.587, 0.114)
    let d = [0.587 * 0.2, -0.299 * 0.2, 0.0];
    let hw = 64;
    let chroma: Vec<f64> = xs.data().iter().enumerate().map(|(i, v)| v + d[i / hw]).collect();
    let chroma = t.constant(Tensor::from_vec(xs.shape(), chroma).unwrap());
    let c = content_loss(&mut t, x, chroma).unwrap();
    assert!(t.value(c).item() < 1e-12);
}

fn zero_logits(t: &mut Tape<f64>, x: Var) -> Result<Var> {
    let s = t.scale(x, 0.0)?;
    Ok(t.mean(s)?)
}

fn objective_setup(weights: LossWeights, flags: SuppressionFlags) -> (pseudoflow::losses::LossBreakdown, f64) {
    let gy = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
        let s = t.scale(x, 0.8)?;
        Ok(t.tanh(s)?)
    };
    let gx = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
        let s = t.mul(x, x)?;
        Ok(t.add_scalar(s, -0.2)?)
    };
    let gens = Generators { g_x: &gx, g_y: &gy };
    let discs = Discriminators { d_x: &zero_logits, d_y: &zero_logits };
    let mut t = Tape::new();
    let x = t.constant(batch(3, 16, 16, 7));
    let y = t.constant(batch(3, 16, 16, 8));
    let flows = random_flow(16, 16, 9);
    let noise = NoiseSource::new(NoiseSpec::default(), 3);
    let cfg = ObjectiveConfig { weights, flags, ..Default::default() };
    let obj = total_objective(&mut t, &gens, Some(&discs), x, y, &flows, &flows, &noise, &cfg).unwrap();
    let total = t.value(obj.total).item();
    (obj.breakdown, total)
}

#[test]
fn zero_weights_leave_only_the_adversarial_term() {
    let (b, total) = objective_setup(LossWeights::zero(), SuppressionFlags::default());
    assert_eq!(Some(total), b.adv);
    assert!(b.ur_x.is_none() && b.ur_y.is_none() && b.us_x.is_none() && b.us_y.is_none());
    assert!(b.cyc.is_none() && b.cont.is_none());
    assert!((total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn weighted_total_is_the_dot_product() {
    let w = LossWeights { lambda_ur: 10.0, lambda_us: 10.0, lambda_cyc: 0.0, lambda_cont: 0.0 };
    let (b, total) = objective_setup(w, SuppressionFlags::default());
    let want = b.adv.unwrap() + 10.0 * b.ur().unwrap() + 10.0 * b.us().unwrap();
    assert!((total - want).abs() < 1e-6);
    assert!((b.total - b.weighted_total(&w)).abs() < 1e-6);
    let w = LossWeights { lambda_ur: 1.5, lambda_us: 2.0, lambda_cyc: 3.0, lambda_cont: 0.5 };
    let (b, total) = objective_setup(w, SuppressionFlags::default());
    assert!((total - b.weighted_total(&w)).abs() < 1e-6);
    for v in [b.ur_x, b.ur_y, b.us_x, b.us_y, b.cyc, b.cont] {
        assert!(v.unwrap() >= 0.0);
    }
}

#[test]
fn suppression_removes_one_term_per_family() {
    let w = LossWeights::default();
    let (b, _) = objective_setup(w, SuppressionFlags { suppress_x_domain: true, suppress_y_domain: false });
    assert!(b.ur_x.is_none() && b.ur_y.is_some());
    assert!(b.us_x.is_some() && b.us_y.is_none());
    let (b, _) = objective_setup(w, SuppressionFlags { suppress_x_domain: false, suppress_y_domain: true });
    assert!(b.ur_x.is_some() && b.ur_y.is_none());
    assert!(b.us_x.is_none() && b.us_y.is_some());
}

#[test]
fn matched_flow_is_one_instance() {
    let pair = synthesize_flow_pair(&scale_spec(&FlowSpec::default(), 8, 8), 8, 8, 0).unwrap();
    assert!(Arc::ptr_eq(&pair.x_domain, &pair.y_domain));
    let gens = Generators::<f64> { g_x: &identity, g_y: &identity };
    let mut t = Tape::new();
    let x = t.constant(batch(1, 8, 8, 0));
    let noise = NoiseSource::off();
    let p = Pipeline::new(&gens, x, x, &pair, &noise);
    assert!(Arc::ptr_eq(&p.flows().x_domain, &pair.x_domain));
    assert!(p.flows().is_matched());
    let wrong = FlowSpec { mode: FlowMode::WrongPair, ..scale_spec(&FlowSpec::default(), 8, 8) };
    assert!(!synthesize_flow_pair(&wrong, 8, 8, 0).unwrap().is_matched());
}

#[test]
fn domain_shape_mismatch_is_rejected() {
    let gens = Generators::<f64> { g_x: &identity, g_y: &identity };
    let mut t = Tape::new();
    let x = t.constant(batch(3, 8, 8, 0));
    let y = t.constant(batch(3, 8, 12, 0));
    let flows = random_flow(8, 8, 0);
    assert!(unsupervised_recycle_loss(&mut t, &gens, x, y, &flows, &NoiseSource::off(), SuppressionFlags::default()).is_err());
}

fn toy(seed: u64) -> Network<f64> {
    let cfg = GeneratorConfig { in_channels: 3, out_channels: 3, base_width: 2, n_downsample: 1, n_resblocks: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_generator(&cfg, seed)
        .unwrap()
        .map_params(|_, p| {
            let n = Tensor::<f32>::randn(p.shape(), 0.3, &mut rng);
            p.zip_map(&n, |a, b| a * 10.0 + b).unwrap()
        })
        .unwrap()
        .cast()
}




// Large enough to sit above rounding of an O(10) objective, small enough to
// rarely straddle a ReLU or L1 kink.
const STEP: f64 = 3e-6;

/// Finite-difference check of a loss with respect to every generator parameter.
fn check_loss(which: &str, seed: u64) -> f64 {
    let (nx, ny) = (toy(seed), toy(seed + 1));
    let n = nx.params().len();
    let xs = batch(3, 8, 8, seed + 2);
    let ys = batch(3, 8, 8, seed + 3);
    let flows = FlowPair::matched(
        synthesize_flow(&FlowSpec { block: 3, filter: 3, sigma_m: 1.5, sigma_s: 1.0, ..FlowSpec::default() }, 8, 8, seed).unwrap(),
    );
    // noise is additive, but the clamp after it would add kinks
    let noise = NoiseSource::off();
    let mut inputs: Vec<Tensor<f64>> = nx.params().to_vec();
    inputs.extend(ny.params().iter().cloned());
    let which = which.to_string();
    max_gradient_error(
        &inputs,
        &|t: &mut Tape<f64>, v: &[Var]| {
            let bx = nx.with_vars(&v[..n]).map_err(g)?;
            let by = ny.with_vars(&v[n..]).map_err(g)?;
            let gens = Generators { g_x: &bx, g_y: &by };
            let x = t.constant(xs.clone());
            let y = t.constant(ys.clone());
            let flags = SuppressionFlags::default();
            let out = match which.as_str() {
                "recycle" => unsupervised_recycle_loss(t, &gens, x, y, &flows, &noise, flags).map_err(g)?.sum(t).map_err(g)?.unwrap(),
                "spatial" => unsupervised_spatial_loss(t, &gens, x, y, &flows, &noise, flags).map_err(g)?.sum(t).map_err(g)?.unwrap(),
                "cycle" => cycle_loss(t, &gens, x, y).map_err(g)?,
                "content" => {
                    let xh = by.translate(t, x).map_err(g)?;
                    content_loss(t, x, xh).map_err(g)?
                }
                _ => {
                    let cfg = ObjectiveConfig {
                        weights: LossWeights { lambda_ur: 10.0, lambda_us: 10.0, lambda_cyc: 10.0, lambda_cont: 1.0 },
                        ..Default::default()
                    };
                    total_objective(t, &gens, None, x, y, &flows, &flows, &noise, &cfg).map_err(g)?.total
                }
            };
            Ok(out)
        },
        &GradCheckConfig { max_entries: 16, step: STEP, ..GradCheckConfig::default() },
    )
    .unwrap()
    .unwrap()
}

#[test]
fn loss_gradients_match_finite_differences() {
    for which in ["recycle", "spatial", "cycle", "content", "total"] {
        let err = check_loss(which, 11);
        assert!(err < 1e-4, "{which}: {err}");
    }
}
