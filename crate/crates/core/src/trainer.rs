//! Alternating generator/discriminator optimization and sequence translation.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gradcore::{Checkpoint, GradError, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_split, Domain, Split, VideoSequence};
use crate::error::{Error, Result};
use crate::flowsynth::{scale_spec, synthesize_flow_pair, FlowSpec, NoiseSpec};
use crate::losses::{
    adversarial_terms, total_objective, AdversarialForm, Discriminators, Generators, LossBreakdown, LossWeights,
    NoiseSource, ObjectiveConfig, Side, SuppressionFlags,
};
use crate::models::{DiscriminatorConfig, GeneratorConfig, Network, NetworkConfig, Translator};
use crate::seed::{derive_seed, stream};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPaths {
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    /// stop after this many iterations in total; 0 means no cap
    pub max_iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adversarial: AdversarialForm,
    /// draw a second flow for the spatial loss family
    pub redraw_flow_per_loss: bool,
    pub update_discriminators: bool,
    /// iterations between checkpoints; 0 writes only the final one
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub flags: SuppressionFlags,
    pub flow: FlowSpec,
    pub noise: NoiseSpec,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub paths: TrainPaths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 2,
            max_iterations: 0,
            batch: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adversarial: AdversarialForm::default(),
            redraw_flow_per_loss: false,
            update_discriminators: true,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            flags: SuppressionFlags::default(),
            flow: FlowSpec::default(),
            noise: NoiseSpec::default(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            paths: TrainPaths::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        self.weights.validate()?;
        self.flags.validate()?;
        self.flow.validate()?;
        self.noise.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            flags: self.flags,
            form: self.adversarial,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_params(params: &[Tensor<f32>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero. A
/// non-finite gradient aborts before anything is modified.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Option<Tensor<f32>>],
    names: &[String],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || names.len() != params.len() {
        return Err(Error::dim("adam_step", params.len(), grads.len()));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Dimension {
                    what: "adam_step gradient",
                    expected: format!("{name}: {:?}", p.shape()),
                    got: format!("{:?}", g.shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else {
            // zero gradient: moments decay, the update is m_hat / (sqrt(v_hat) + eps)
            let m = state.m[i].map(|m| (cfg.beta1 * m as f64) as f32);
            let v = state.v[i].map(|v| (cfg.beta2 * v as f64) as f32);
            *p = adam_apply(p, &m, &v, bc1, bc2, cfg);
            state.m[i] = m;
            state.v[i] = v;
            continue;
        };
        let m = state.m[i]
            .zip_map(g, |m, g| (cfg.beta1 * m as f64 + (1.0 - cfg.beta1) * g as f64) as f32)
            .expect("shapes checked");
        let v = state.v[i]
            .zip_map(g, |v, g| (cfg.beta2 * v as f64 + (1.0 - cfg.beta2) * (g as f64).powi(2)) as f32)
            .expect("shapes checked");
        *p = adam_apply(p, &m, &v, bc1, bc2, cfg);
        state.m[i] = m;
        state.v[i] = v;
    }
    Ok(())
}

fn adam_apply(p: &Tensor<f32>, m: &Tensor<f32>, v: &Tensor<f32>, bc1: f64, bc2: f64, cfg: &AdamConfig) -> Tensor<f32> {
    let out: Vec<f32> = p
        .data()
        .iter()
        .zip(m.data().iter().zip(v.data()))
        .map(|(&p, (&m, &v))| {
            let mh = m as f64 / bc1;
            let vh = v as f64 / bc2;
            (p as f64 - cfg.lr * mh / (vh.sqrt() + cfg.eps)) as f32
        })
        .collect();
    Tensor::from_vec(p.shape(), out).expect("same shape")
}

/// The four networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    /// `Y -> X`
    pub g_x: Network<f32>,
    /// `X -> Y`
    pub g_y: Network<f32>,
    pub d_x: Network<f32>,
    pub d_y: Network<f32>,
}

const NET_NAMES: [&str; 4] = ["g_x", "g_y", "d_x", "d_y"];

impl Models {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let s = |n: &str| derive_seed(cfg.seed, "init", crate::seed::fnv1a(n));
        Ok(Models {
            g_x: crate::models::build_generator(&cfg.generator, s("g_x"))?,
            g_y: crate::models::build_generator(&cfg.generator, s("g_y"))?,
            d_x: crate::models::build_discriminator(&cfg.discriminator, s("d_x"))?,
            d_y: crate::models::build_discriminator(&cfg.discriminator, s("d_y"))?,
        })
    }

    fn nets(&self) -> [&Network<f32>; 4] {
        [&self.g_x, &self.g_y, &self.d_x, &self.d_y]
    }

    fn nets_mut(&mut self) -> [&mut Network<f32>; 4] {
        [&mut self.g_x, &mut self.g_y, &mut self.d_x, &mut self.d_y]
    }
}

/// Frames of both training domains, flattened in clip order.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub x: Vec<Tensor<f32>>,
    pub y: Vec<Tensor<f32>>,
}

impl TrainData {
    pub fn from_clips(x: &[VideoSequence], y: &[VideoSequence]) -> Self {
        let flat = |c: &[VideoSequence]| c.iter().flat_map(|s| s.frames.iter().cloned()).collect();
        TrainData { x: flat(x), y: flat(y) }
    }

    /// Only the train split is ever read here.
    pub fn load(root: &Path) -> Result<Self> {
        let x = load_split(root, Domain::X, Split::Train)?;
        let y = load_split(root, Domain::Y, Split::Train)?;
        Ok(Self::from_clips(&x, &y))
    }

    fn check(&self, cfg: &TrainConfig) -> Result<(usize, usize)> {
        let shape = match self.x.first().or(self.y.first()) {
            Some(f) => f.shape().to_vec(),
            None => return Ok((0, 0)),
        };
        for f in self.x.iter().chain(&self.y) {
            if f.shape().len() != 3 || f.shape()[1..] != shape[1..] {
                return Err(Error::dim("training frame", format!("{shape:?}"), format!("{:?}", f.shape())));
            }
        }
        let want = [cfg.generator.in_channels, cfg.generator.out_channels];
        if self.x.first().is_some_and(|f| f.shape()[0] != want[0]) || self.y.first().is_some_and(|f| f.shape()[0] != want[1]) {
            return Err(Error::dim("training channels", format!("{want:?}"), format!("{shape:?}")));
        }
        Ok((shape[2], shape[1]))
    }

    /// Iterations per epoch: one pass over the smaller domain.
    pub fn iterations_per_epoch(&self, batch: usize) -> u64 {
        (self.x.len().min(self.y.len()) / batch) as u64
    }

    /// Batches for global iteration `it`. The smaller domain is walked in a
    /// per-epoch shuffled order; the other is sampled uniformly and
    /// independently, so no pairing between domains exists.
    pub fn batch(&self, seed: u64, it: u64, batch: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let per_epoch = self.iterations_per_epoch(batch);
        if per_epoch == 0 {
            return Err(Error::Config("not enough frames for one batch".into()));
        }
        let (epoch, offset) = (it / per_epoch, (it % per_epoch) as usize);
        let x_walks = self.x.len() <= self.y.len();
        let (walk, other) = if x_walks { (&self.x, &self.y) } else { (&self.y, &self.x) };
        let mut order: Vec<usize> = (0..walk.len()).collect();
        order.shuffle(&mut stream(seed, "epoch", epoch));
        let mut pick = stream(seed, "pair", it);
        let a: Vec<Tensor<f32>> = order[offset * batch..(offset + 1) * batch]
            .iter()
            .map(|&i| walk[i].clone())
            .collect();
        let b: Vec<Tensor<f32>> = (0..batch)
            .map(|_| other[pick.random_range(0..other.len())].clone())
            .collect();
        let stack = |v: Vec<Tensor<f32>>| -> Result<Tensor<f32>> {
            let v: Vec<Tensor<f32>> = v
                .into_iter()
                .map(|t| {
                    let mut s = vec![1];
                    s.extend_from_slice(t.shape());
                    t.reshape(&s)
                })
                .collect::<std::result::Result<_, _>>()?;
            Ok(Tensor::cat0(&v)?)
        };
        let (a, b) = (stack(a)?, stack(b)?);
        Ok(if x_walks { (a, b) } else { (b, a) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub seed: u64,
    pub losses: LossBreakdown,
}

impl LogRow {
    pub fn header() -> String {
        format!("iteration,seed,{}", LossBreakdown::CSV_HEADER)
    }

    pub fn csv(&self) -> String {
        format!("{},{},{}", self.iteration, self.seed, self.losses.csv_fields())
    }
}

fn non_finite(e: Error, iteration: u64, last: &Option<PathBuf>) -> Error {
    match e {
        Error::Grad(GradError::NonFinite { .. }) => Error::NonFiniteLoss {
            iteration,
            last_checkpoint: last.clone(),
        },
        e => e,
    }
}

/// Networks, optimizer state and progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub models: Models,
    /// in `g_x, g_y, d_x, d_y` order
    pub opt: [OptimizerState; 4],
    pub iteration: u64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let models = Models::init(&cfg)?;
        let opt = models.nets().map(|n| OptimizerState::for_params(n.params()));
        Ok(Trainer {
            cfg,
            models,
            opt,
            iteration: 0,
            last_checkpoint: None,
        })
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.cfg.lr, self.cfg.beta1, self.cfg.beta2)
    }

    pub fn iteration_seed(&self, it: u64) -> u64 {
        derive_seed(self.cfg.seed, "iter", it)
    }

    /// One G step with frozen discriminators, then one D step on detached
    /// fakes. `x` and `y` are `NCHW` batches.
    pub fn step(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<LossBreakdown> {
        let it = self.iteration;
        let b = self.step_inner(x, y).map_err(|e| non_finite(e, it, &self.last_checkpoint))?;
        if !b.total.is_finite() || b.d_x.is_some_and(|v| !v.is_finite()) || b.d_y.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        self.iteration += 1;
        Ok(b)
    }

    fn step_inner(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<LossBreakdown> {
        let seed = self.iteration_seed(self.iteration);
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let spec = scale_spec(&self.cfg.flow, w, h);
        let flows = synthesize_flow_pair(&spec, w, h, derive_seed(seed, "flow", 0))?;
        let spatial_flows = if self.cfg.redraw_flow_per_loss {
            synthesize_flow_pair(&spec, w, h, derive_seed(seed, "flow", 1))?
        } else {
            flows.clone()
        };
        let noise = NoiseSource::new(self.cfg.noise.clone(), derive_seed(seed, "noise", 0));
        let adam = self.adam();

        // generator step, discriminators frozen
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let gx = self.models.g_x.bind(&mut tape, true);
        let gy = self.models.g_y.bind(&mut tape, true);
        let dx = self.models.d_x.bind(&mut tape, false);
        let dy = self.models.d_y.bind(&mut tape, false);
        let gens = Generators { g_x: &gx, g_y: &gy };
        let discs = Discriminators { d_x: &dx, d_y: &dy };
        let obj = total_objective(
            &mut tape,
            &gens,
            Some(&discs),
            xv,
            yv,
            &flows,
            &spatial_flows,
            &noise,
            &self.cfg.objective(),
        )?;
        let mut breakdown = obj.breakdown;
        let mut grads = tape.backward(obj.total)?;
        let gx_grads: Vec<_> = gx.params().iter().map(|&v| grads.take(v)).collect();
        let gy_grads: Vec<_> = gy.params().iter().map(|&v| grads.take(v)).collect();
        let fake_y = tape.value(obj.fakes.0).clone();
        let fake_x = tape.value(obj.fakes.1).clone();
        drop(tape);
        update(&mut self.models.g_x, &gx_grads, &mut self.opt[0], &adam)?;
        update(&mut self.models.g_y, &gy_grads, &mut self.opt[1], &adam)?;

        if !self.cfg.update_discriminators {
            return Ok(breakdown);
        }
        // discriminator step on detached fakes
        let mut tape = Tape::new();
        let real_x = tape.constant(x.clone());
        let real_y = tape.constant(y.clone());
        let fake_x = tape.constant(fake_x);
        let fake_y = tape.constant(fake_y);
        let dx = self.models.d_x.bind(&mut tape, true);
        let dy = self.models.d_y.bind(&mut tape, true);
        let form = self.cfg.adversarial;
        let (rx, fx) = (dx.translate(&mut tape, real_x)?, dx.translate(&mut tape, fake_x)?);
        let lx = adversarial_terms(&mut tape, Some(rx), fx, Side::Discriminator, form)?;
        let (ry, fy) = (dy.translate(&mut tape, real_y)?, dy.translate(&mut tape, fake_y)?);
        let ly = adversarial_terms(&mut tape, Some(ry), fy, Side::Discriminator, form)?;
        let total = tape.add(lx, ly)?;
        breakdown.d_x = Some(tape.value(lx).item() as f64);
        breakdown.d_y = Some(tape.value(ly).item() as f64);
        let mut grads = tape.backward(total)?;
        let allowed: HashSet<Var> = dx.params().iter().chain(dy.params()).copied().collect();
        assert!(
            grads.vars().all(|v| allowed.contains(&v)),
            "discriminator step produced gradients outside the discriminators"
        );
        let dx_grads: Vec<_> = dx.params().iter().map(|&v| grads.take(v)).collect();
        let dy_grads: Vec<_> = dy.params().iter().map(|&v| grads.take(v)).collect();
        drop(tape);
        update(&mut self.models.d_x, &dx_grads, &mut self.opt[2], &adam)?;
        update(&mut self.models.d_y, &dy_grads, &mut self.opt[3], &adam)?;
        Ok(breakdown)
    }

    /// Total iteration count implied by the config and the data.
    pub fn planned_iterations(&self, data: &TrainData) -> u64 {
        let n = self.cfg.epochs * data.iterations_per_epoch(self.cfg.batch);
        if self.cfg.max_iterations > 0 {
            n.min(self.cfg.max_iterations)
        } else {
            n
        }
    }

    /// Train from the current iteration to the planned end, writing the log
    /// and checkpoints configured in `paths`.
    pub fn run(&mut self, data: &TrainData, mut on_iter: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        data.check(&self.cfg)?;
        let end = self.planned_iterations(data);
        let mut log = self.open_log()?;
        let mut rows = Vec::new();
        while self.iteration < end {
            let it = self.iteration;
            let (x, y) = data.batch(self.cfg.seed, it, self.cfg.batch)?;
            let losses = self.step(&x, &y)?;
            let row = LogRow {
                iteration: it,
                seed: self.iteration_seed(it),
                losses,
            };
            if let Some((path, w)) = &mut log {
                writeln!(w, "{}", row.csv()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            on_iter(&row);
            rows.push(row);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < end {
                if let Some(dir) = self.cfg.paths.checkpoint_dir.clone() {
                    self.save_checkpoint(&dir.join(format!("iter_{:08}.ckpt", self.iteration)))?;
                }
            }
        }
        if let Some((path, mut w)) = log {
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        if let Some(dir) = self.cfg.paths.checkpoint_dir.clone() {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(rows)
    }

    fn open_log(&self) -> Result<Option<(PathBuf, BufWriter<File>)>> {
        let Some(path) = self.cfg.paths.log.clone() else {
            return Ok(None);
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let fresh = self.iteration == 0 || !path.exists();
        let file = if fresh {
            File::create(&path)
        } else {
            OpenOptions::new().append(true).open(&path)
        }
        .map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        if fresh {
            writeln!(w, "{}", LogRow::header()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Some((path, w)))
    }

    /// Networks, optimizer moments, iteration and config in one file.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let nets: serde_json::Map<String, serde_json::Value> = NET_NAMES
            .iter()
            .zip(self.models.nets())
            .map(|(n, net)| (n.to_string(), serde_json::to_value(net.config()).expect("config serializes")))
            .collect();
        let mut ck = Checkpoint::new(serde_json::json!({
            "format": "pseudoflow-train",
            "iteration": self.iteration,
            "steps": self.opt.iter().map(|o| o.step).collect::<Vec<_>>(),
            "networks": nets,
            "config": self.cfg,
        }));
        for ((name, net), opt) in NET_NAMES.iter().zip(self.models.nets()).zip(&self.opt) {
            net.write_into(&mut ck, name);
            for ((pn, m), v) in net.names().iter().zip(&opt.m).zip(&opt.v) {
                ck.push(format!("adam/{name}/m/{pn}"), m.clone());
                ck.push(format!("adam/{name}/v/{pn}"), v.clone());
            }
        }
        ck.save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let meta = &ck.meta;
        if meta["format"] != "pseudoflow-train" {
            return Err(Error::format(path, "not a training checkpoint"));
        }
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::format(path, format!("config: {e}")))?;
        let iteration = meta["iteration"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "missing iteration"))?;
        let steps: Vec<u64> = serde_json::from_value(meta["steps"].clone())
            .map_err(|e| Error::format(path, format!("steps: {e}")))?;
        if steps.len() != 4 {
            return Err(Error::format(path, "expected four optimizer states"));
        }
        let mut models = Models::init(&cfg)?;
        let mut opt = models.nets().map(|n| OptimizerState::for_params(n.params()));
        for (i, (name, net)) in NET_NAMES.iter().zip(models.nets_mut()).enumerate() {
            let config: NetworkConfig = serde_json::from_value(meta["networks"][*name].clone())
                .map_err(|e| Error::format(path, format!("network {name}: {e}")))?;
            *net = Network::read_from(&config, &ck, name)?;
            let get = |k: String| ck.get(&k).cloned().ok_or_else(|| Error::format(path, format!("missing {k}")));
            opt[i] = OptimizerState {
                m: net.names().iter().map(|pn| get(format!("adam/{name}/m/{pn}"))).collect::<Result<_>>()?,
                v: net.names().iter().map(|pn| get(format!("adam/{name}/v/{pn}"))).collect::<Result<_>>()?,
                step: steps[i],
            };
        }
        Ok(Trainer {
            cfg,
            models,
            opt,
            iteration,
            last_checkpoint: Some(path.to_path_buf()),
        })
    }
}

fn update(net: &mut Network<f32>, grads: &[Option<Tensor<f32>>], opt: &mut OptimizerState, adam: &AdamConfig) -> Result<()> {
    let mut params = net.params().to_vec();
    adam_step(&mut params, grads, net.names(), opt, adam)?;
    net.set_params(params)
}

/// Train a fresh model on `data`.
pub fn train(cfg: TrainConfig, data: &TrainData) -> Result<(Trainer, Vec<LogRow>)> {
    let mut t = Trainer::new(cfg)?;
    let rows = t.run(data, |_| {})?;
    Ok((t, rows))
}

/// Translate every frame independently.
pub fn translate_sequence<F>(translate: F, seq: &VideoSequence) -> Result<VideoSequence>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    seq.validate()?;
    let frames = seq.frames.par_iter().map(&translate).collect::<Result<Vec<_>>>()?;
    Ok(VideoSequence {
        frames,
        gt_flow: seq.gt_flow.clone(),
        labels: seq.labels.clone(),
        domain: match seq.domain {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        },
        clip_id: seq.clip_id.clone(),
    })
}

/// Per-frame translation through a network: `CHW -> CHW`.
pub fn frame_translator(net: &Network<f32>) -> impl Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync + '_ {
    move |f: &Tensor<f32>| {
        let s = f.shape();
        if s.len() != 3 {
            return Err(Error::dim("frame", "CHW", format!("{s:?}")));
        }
        let out = net.apply(&f.reshape(&[1, s[0], s[1], s[2]])?)?;
        let o = out.shape().to_vec();
        Ok(out.reshape(&o[1..])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_minus_lr() {
        let mut p = vec![Tensor::from_vec(&[1], vec![1.0f32]).unwrap()];
        let g = vec![Some(Tensor::from_vec(&[1], vec![1.0f32]).unwrap())];
        let mut st = OptimizerState::for_params(&p);
        let cfg = AdamConfig::new(2e-4, 0.5, 0.999);
        adam_step(&mut p, &g, &["w".into()], &mut st, &cfg).unwrap();
        assert!((p[0].data()[0] as f64 - (1.0 - 2e-4)).abs() < 1e-7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Tensor::from_vec(&[2], vec![0.5f32, -3.0]).unwrap()];
        let before = p.clone();
        let mut st = OptimizerState::for_params(&p);
        let g = vec![Some(Tensor::zeros(&[2]))];
        adam_step(&mut p, &g, &["w".into()], &mut st, &AdamConfig::new(1e-3, 0.9, 0.999)).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_nan_names_parameter() {
        let mut p = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let mut st = OptimizerState::for_params(&p);
        let g = vec![None, Some(Tensor::from_vec(&[1], vec![f32::NAN]).unwrap())];
        let e = adam_step(&mut p, &g, &["a".into(), "b".into()], &mut st, &AdamConfig::new(1e-3, 0.9, 0.999));
        assert!(matches!(e, Err(Error::NonFiniteGradient { param }) if param == "b"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus_key = 1").is_err());
        assert!(TrainConfig::from_toml("lr = 0.0").is_err());
    }
}
