//! Finite-difference checks beyond the primitive ops: the warp and a small
//! residual generator.

use std::sync::Arc;

use gradcore::gradcheck::{check_gradients, op_suite, project, GradCheckConfig, GradReport};
use gradcore::{GradError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flowsynth::FlowField;
use crate::models::{build_generator, GeneratorConfig, Network, Translator};
use crate::warp::{warp_var, Border};

/// Two channels, width 2, one downsample, two residual blocks.
pub fn toy_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        in_channels: 2,
        out_channels: 2,
        base_width: 2,
        n_downsample: 1,
        n_resblocks: 2,
    }
}

/// A toy generator in f64 with parameters well away from the init scale, so
/// norm gains and biases carry real gradient.
pub fn toy_generator(seed: u64) -> Result<Network<f64>> {
    let net = build_generator(&toy_generator_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = net.map_params(|_, p| {
        let noise = Tensor::<f32>::randn(p.shape(), 0.3, &mut rng);
        p.zip_map(&noise, |a, b| a * 10.0 + b).expect("same shape")
    })?;
    Ok(net.cast())
}

fn grad_err(e: crate::Error) -> GradError {
    match e {
        crate::Error::Grad(g) => g,
        e => GradError::Format(e.to_string()),
    }
}

/// Primitive ops, the warp and the toy generator, `cases` random cases each.
pub fn gradient_suite(cases: usize, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut report = op_suite(cases, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for case in 0..cases {
        let s = cfg.seed.wrapping_add(case as u64);
        let c = GradCheckConfig { seed: s, ..cfg.clone() };

        let (h, w) = (rng.random_range(3..8usize), rng.random_range(3..8usize));
        let img = Tensor::<f64>::randn(&[1, rng.random_range(1..4), h, w], 1.0, &mut rng);
        let dx = (0..h * w).map(|_| rng.random_range(-2.5f32..2.5)).collect();
        let dy = (0..h * w).map(|_| rng.random_range(-2.5f32..2.5)).collect();
        let flow = Arc::new(FlowField::new(w, h, dx, dy)?);
        let border = if case % 2 == 0 { Border::Clamp } else { Border::Zero };
        check_gradients(
            &mut report,
            "backward_warp",
            &[img],
            |t, v| {
                let y = warp_var(t, v[0], &flow, border).map_err(grad_err)?;
                project(t, y, s)
            },
            &c,
        )?;

        let net = toy_generator(s)?;
        let x = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(net.params().iter().cloned());
        let small = GradCheckConfig { max_entries: 6, ..c };
        check_gradients(
            &mut report,
            "generator_2res",
            &inputs,
            |t, v| {
                let bound = net.with_vars(&v[1..]).map_err(grad_err)?;
                let y = bound.translate(t, v[0]).map_err(grad_err)?;
                project(t, y, s)
            },
            &small,
        )?;
    }
    Ok(report)
}
