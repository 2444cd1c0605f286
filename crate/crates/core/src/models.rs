//! Generators and PatchGAN discriminators.

use std::path::Path;

use gradcore::{Checkpoint, Element, Padding, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_downsample: usize,
    pub n_resblocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// CPU-sized default.
    pub fn desk() -> Self {
        GeneratorConfig {
            in_channels: 3,
            out_channels: 3,
            base_width: 16,
            n_downsample: 2,
            n_resblocks: 3,
        }
    }

    /// Full-size architecture: width 64, two stride-2 convs, six resblocks.
    pub fn full() -> Self {
        GeneratorConfig {
            base_width: 64,
            n_resblocks: 6,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_downsample < 1 || self.n_resblocks < 1 {
            return Err(Error::Config("generator needs n_downsample >= 1 and n_resblocks >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// stride-2 4x4 convs
    pub n_strided: usize,
    /// stride-1 4x4 convs between the strided stack and the logit head
    pub n_stride1: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            base_width: 16,
            n_strided: 3,
            n_stride1: 0,
        }
    }

    /// 70x70 PatchGAN.
    pub fn full() -> Self {
        DiscriminatorConfig {
            in_channels: 3,
            base_width: 64,
            n_strided: 3,
            n_stride1: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_strided < 1 || self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("discriminator needs n_strided >= 1 and positive widths".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NetworkConfig {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        stride: usize,
        pad: Padding,
    },
    UpConv {
        weight: usize,
        bias: usize,
        pad: Padding,
    },
    Norm {
        gain: usize,
        bias: usize,
    },
    Relu,
    LeakyRelu,
    Tanh,
    Residual(Vec<Layer>),
}

/// Layer list plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Element = f32> {
    config: NetworkConfig,
    layers: Vec<Layer>,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv_params(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> (usize, usize) {
        let w = Tensor::randn(&[cout, cin, k, k], INIT_STD, self.rng);
        let w = self.param(format!("{name}.weight"), w);
        let b = self.param(format!("{name}.bias"), Tensor::zeros(&[cout]));
        (w, b)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: Padding) -> Layer {
        let (weight, bias) = self.conv_params(name, cin, cout, k);
        Layer::Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Layer {
        let gain = self.param(format!("{name}.gain"), Tensor::ones(&[c]));
        let bias = self.param(format!("{name}.bias"), Tensor::zeros(&[c]));
        Layer::Norm { gain, bias }
    }
}

/// `stem -> downsample x n -> resblocks -> upsample x n -> head -> tanh`
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Network<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        names: Vec::new(),
        params: Vec::new(),
    };
    let w = cfg.base_width;
    let mut layers = vec![
        b.conv("stem", cfg.in_channels, w, 7, 1, Padding::reflect(3)),
        b.norm("stem.norm", w),
        Layer::Relu,
    ];
    let mut c = w;
    for i in 0..cfg.n_downsample {
        let name = format!("down{i}");
        layers.push(b.conv(&name, c, c * 2, 3, 2, Padding::zero(1)));
        layers.push(b.norm(&format!("{name}.norm"), c * 2));
        layers.push(Layer::Relu);
        c *= 2;
    }
    for i in 0..cfg.n_resblocks {
        let name = format!("res{i}");
        layers.push(Layer::Residual(vec![
            b.conv(&format!("{name}.conv0"), c, c, 3, 1, Padding::reflect(1)),
            b.norm(&format!("{name}.norm0"), c),
            Layer::Relu,
            b.conv(&format!("{name}.conv1"), c, c, 3, 1, Padding::reflect(1)),
            b.norm(&format!("{name}.norm1"), c),
        ]));
    }
    for i in 0..cfg.n_downsample {
        let name = format!("up{i}");
        let (weight, bias) = b.conv_params(&name, c, c / 2, 3);
        layers.push(Layer::UpConv {
            weight,
            bias,
            pad: Padding::reflect(1),
        });
        layers.push(b.norm(&format!("{name}.norm"), c / 2));
        layers.push(Layer::Relu);
        c /= 2;
    }
    layers.push(b.conv("head", c, cfg.out_channels, 7, 1, Padding::reflect(3)));
    layers.push(Layer::Tanh);
    let (names, params) = (b.names, b.params);
    Ok(Network {
        config: NetworkConfig::Generator(cfg.clone()),
        layers,
        names,
        params,
    })
}

/// Stride-2 4x4 conv stack with leaky ReLU and instance norm after the first
/// layer, ending in a one-channel patch logit map.
pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Network<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        rng: &mut rng,
        names: Vec::new(),
        params: Vec::new(),
    };
    let cap = cfg.base_width * 8;
    let mut layers = vec![
        b.conv("conv0", cfg.in_channels, cfg.base_width, 4, 2, Padding::zero(1)),
        Layer::LeakyRelu,
    ];
    let mut c = cfg.base_width;
    let total = cfg.n_strided + cfg.n_stride1;
    for i in 1..total {
        let stride = if i < cfg.n_strided { 2 } else { 1 };
        let next = (c * 2).min(cap);
        let name = format!("conv{i}");
        layers.push(b.conv(&name, c, next, 4, stride, Padding::zero(1)));
        layers.push(b.norm(&format!("{name}.norm"), next));
        layers.push(Layer::LeakyRelu);
        c = next;
    }
    layers.push(b.conv("head", c, 1, 4, 1, Padding::zero(1)));
    let (names, params) = (b.names, b.params);
    Ok(Network {
        config: NetworkConfig::Discriminator(cfg.clone()),
        layers,
        names,
        params,
    })
}

/// Anything that maps an image batch to an image batch on a tape.
pub trait Translator<T: Element> {
    fn translate(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

impl<T: Element, F> Translator<T> for F
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    fn translate(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// A network whose parameters live on a particular tape.
pub struct Bound<'n, T: Element> {
    net: &'n Network<T>,
    params: Vec<Var>,
}

impl<T: Element> Bound<'_, T> {
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

impl<T: Element> Translator<T> for Bound<'_, T> {
    fn translate(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.net.run(tape, &self.params, x)
    }
}

impl<T: Element> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replace all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim("set_params", self.params.len(), params.len()));
        }
        for ((old, new), name) in self.params.iter().zip(&params).zip(&self.names) {
            if old.shape() != new.shape() {
                return Err(Error::Dimension {
                    what: "set_params",
                    expected: format!("{name}: {:?}", old.shape()),
                    got: format!("{:?}", new.shape()),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn map_params(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Result<Self> {
        let mut out = self.clone();
        let params = self.names.iter().zip(&self.params).map(|(n, p)| f(n, p)).collect();
        out.set_params(params)?;
        Ok(out)
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layers: self.layers.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Register parameters on `tape`, as leaves when `trainable`, otherwise
    /// as constants (gradients still flow through to the input).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound<'_, T> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        Bound { net: self, params }
    }

    /// Run with caller-provided parameter variables, in [`Network::names`] order.
    pub fn with_vars(&self, params: &[Var]) -> Result<Bound<'_, T>> {
        if params.len() != self.params.len() {
            return Err(Error::dim("with_vars", self.params.len(), params.len()));
        }
        Ok(Bound {
            net: self,
            params: params.to_vec(),
        })
    }

    fn in_channels(&self) -> usize {
        match &self.config {
            NetworkConfig::Generator(g) => g.in_channels,
            NetworkConfig::Discriminator(d) => d.in_channels,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::dim("network input", "NCHW", format!("{shape:?}")));
        };
        if c != self.in_channels() {
            return Err(Error::dim("network input", format!("{} channels", self.in_channels()), c));
        }
        if let NetworkConfig::Generator(g) = &self.config {
            let m = 1usize << g.n_downsample;
            if h % m != 0 || w % m != 0 || h / m < 2 || w / m < 2 {
                return Err(Error::dim(
                    "generator input",
                    format!("H and W divisible by {m} with at least {} pixels", 2 * m),
                    format!("{h}x{w}"),
                ));
            }
        }
        Ok(())
    }

    fn run(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        run_layers(&self.layers, tape, p, x)
    }

    /// Forward with constant parameters on a caller tape.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        bound.translate(tape, x)
    }

    /// Inference on a plain tensor.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Receptive field in input pixels of one output element.
    pub fn receptive_field(&self) -> usize {
        fn walk(layers: &[Layer], params: &[Vec<usize>], rf: &mut usize, jump: &mut usize) {
            for l in layers {
                match l {
                    Layer::Conv { weight, stride, .. } => {
                        *rf += (params[*weight][2] - 1) * *jump;
                        *jump *= stride;
                    }
                    Layer::UpConv { weight, .. } => {
                        // nearest upsampling halves the input step
                        *rf += (params[*weight][2] - 1) * *jump / 2;
                    }
                    Layer::Residual(inner) => walk(inner, params, rf, jump),
                    _ => {}
                }
            }
        }
        let shapes: Vec<Vec<usize>> = self.params.iter().map(|p| p.shape().to_vec()).collect();
        let (mut rf, mut jump) = (1, 1);
        walk(&self.layers, &shapes, &mut rf, &mut jump);
        rf
    }
}

fn run_layers<T: Element>(layers: &[Layer], tape: &mut Tape<T>, p: &[Var], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                pad,
            } => tape.conv2d(x, p[*weight], Some(p[*bias]), *stride, *pad)?,
            Layer::UpConv { weight, bias, pad } => tape.upsample_conv(x, 2, p[*weight], Some(p[*bias]), *pad)?,
            Layer::Norm { gain, bias } => tape.instance_norm(x, p[*gain], p[*bias], T::from_f64_lossy(NORM_EPS))?,
            Layer::Relu => tape.relu(x)?,
            Layer::LeakyRelu => tape.leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE))?,
            Layer::Tanh => tape.tanh(x)?,
            Layer::Residual(inner) => {
                let y = run_layers(inner, tape, p, x)?;
                tape.add(x, y)?
            }
        };
    }
    Ok(x)
}

impl Network<f32> {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        match config {
            NetworkConfig::Generator(g) => build_generator(g, seed),
            NetworkConfig::Discriminator(d) => build_discriminator(d, seed),
        }
    }

    /// Append parameters to `ck` as `prefix/name`.
    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        for (n, p) in self.names.iter().zip(&self.params) {
            ck.push(format!("{prefix}/{n}"), p.clone());
        }
    }

    /// Rebuild from `config` and take parameters `prefix/name` from `ck`.
    pub fn read_from(config: &NetworkConfig, ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut net = Self::build(config, 0)?;
        let params = net
            .names
            .iter()
            .map(|n| {
                ck.get(&format!("{prefix}/{n}"))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {prefix}/{n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "format": "pseudoflow-network",
            "network": self.config,
        }));
        self.write_into(&mut ck, "net");
        Ok(ck.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path)?;
        let config: NetworkConfig = serde_json::from_value(ck.meta["network"].clone())
            .map_err(|e| Error::format(path, format!("network config: {e}")))?;
        Self::read_from(&config, &ck, "net")
    }
}
