//! U-shaped de-raining network with the prototype unit between encoder and
//! decoder.
//!
//! Encoder stage `l` (width `base · 2^l`): conv3×3 → ReLU → conv3×3 → ReLU,
//! the activation is kept as a skip, then 2×2 max-pool. A bottleneck
//! conv3×3 → ReLU follows the last stage. Decoder stage `l`: stride-2
//! transposed conv3×3, concatenation with skip `l`, conv3×3 → ReLU. A final
//! conv3×3 with no activation predicts the rain layer `R̂`, and the
//! de-rained image is `clamp(X - R̂, [-1, 1])`.
//!
//! With [`Placement::Bottleneck`] the prototype unit runs on the bottleneck
//! features. With [`Placement::FullRes`] the whole U-net body runs first and
//! a conv3×3 → ReLU maps the full-resolution decoder output to the unit's
//! channel count; only the output conv follows the unit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, mismatch, Result};
use crate::numerics::{Activation, Graph, Tensor, Var};
use crate::rspu::{self, AttentionBank, BankVars, RspuOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    FullRes,
    Bottleneck,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::FullRes => "full_res",
            Placement::Bottleneck => "bottleneck",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full_res" => Some(Placement::FullRes),
            "bottleneck" => Some(Placement::Bottleneck),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    /// Number of pooling stages.
    pub depth: usize,
    /// Channel count C seen by the prototype unit.
    pub rspu_channels: usize,
    /// Number of prototypes M.
    pub prototype_count: usize,
    pub placement: Placement,
    pub seed: u64,
}

impl ModelConfig {
    /// 32×32 inputs, C = 16, M = 4, two pooling stages.
    pub fn desk() -> Self {
        Self {
            height: 32,
            width: 32,
            base_channels: 8,
            depth: 2,
            rspu_channels: 16,
            prototype_count: 4,
            placement: Placement::Bottleneck,
            seed: 0,
        }
    }

    /// 256×256 full-resolution features, C = 128, M = 20.
    pub fn paper() -> Self {
        Self {
            height: 256,
            width: 256,
            base_channels: 32,
            depth: 2,
            rspu_channels: 128,
            prototype_count: 20,
            placement: Placement::FullRes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "model_config";
        let unit = 1usize.checked_shl(self.depth as u32).unwrap_or(0);
        if unit == 0 || self.height == 0 || self.width == 0 || !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit) {
            return Err(invalid(
                OP,
                format!(
                    "input {}x{} is not divisible by 2^{}",
                    self.height, self.width, self.depth
                ),
            ));
        }
        if self.base_channels == 0 || self.rspu_channels == 0 {
            return Err(invalid(OP, "channel counts must be positive"));
        }
        if self.prototype_count < 2 {
            return Err(invalid(OP, "at least two prototypes are required"));
        }
        Ok(())
    }

    fn stage_width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Resolution of the features the prototype unit sees.
    pub fn feature_size(&self) -> (usize, usize) {
        match self.placement {
            Placement::FullRes => (self.height, self.width),
            Placement::Bottleneck => (self.height >> self.depth, self.width >> self.depth),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSlot {
    kernel: usize,
    bias: usize,
}

/// Positions of each layer's tensors in the flat parameter list.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    encoder: Vec<[ConvSlot; 2]>,
    bottleneck: ConvSlot,
    /// Deepest stage first.
    decoder: Vec<(usize, ConvSlot)>,
    feature: Option<ConvSlot>,
    head: ConvSlot,
    bank_weights: usize,
    bank_bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    He { fan_in: f64 },
    Zero,
    Attention { channels: usize },
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Spec {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, zero: bool) -> ConvSlot {
        let init = if zero {
            Init::Zero
        } else {
            Init::He {
                fan_in: (9 * cin) as f64,
            }
        };
        ConvSlot {
            kernel: self.push(format!("{name}.weight"), vec![3, 3, cin, cout], init),
            bias: self.push(format!("{name}.bias"), vec![cout], Init::Zero),
        }
    }
}

fn plan(cfg: &ModelConfig) -> (Layout, Spec) {
    let mut spec = Spec {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let d = cfg.depth;
    let mut encoder = Vec::with_capacity(d);
    let mut ch = 3;
    for l in 0..d {
        let w = cfg.stage_width(l);
        let a = spec.conv(&format!("enc{l}.conv_a"), ch, w, false);
        let b = spec.conv(&format!("enc{l}.conv_b"), w, w, false);
        encoder.push([a, b]);
        ch = w;
    }
    let bottleneck_out = match cfg.placement {
        Placement::FullRes if d > 0 => cfg.stage_width(d),
        _ => cfg.rspu_channels,
    };
    let bottleneck = spec.conv("bottleneck", ch, bottleneck_out, false);
    ch = bottleneck_out;
    let mut decoder = Vec::with_capacity(d);
    for l in (0..d).rev() {
        let w = cfg.stage_width(l);
        let up = spec.push(
            format!("dec{l}.up.weight"),
            vec![3, 3, w, ch],
            Init::He {
                fan_in: (9 * ch) as f64 / 4.0,
            },
        );
        let conv = spec.conv(&format!("dec{l}.conv"), 2 * w, w, false);
        decoder.push((up, conv));
        ch = w;
    }
    let feature = match cfg.placement {
        Placement::FullRes if d > 0 => {
            let f = spec.conv("feature", ch, cfg.rspu_channels, false);
            ch = cfg.rspu_channels;
            Some(f)
        }
        _ => None,
    };
    let head = spec.conv("head", ch, 3, true);
    let m = cfg.prototype_count;
    let c = cfg.rspu_channels;
    let bank_weights = spec.push("rspu.attn.weight".into(), vec![c, m], Init::Attention { channels: c });
    let bank_bias = spec.push("rspu.attn.bias".into(), vec![m], Init::Zero);
    let layout = Layout {
        encoder,
        bottleneck,
        decoder,
        feature,
        head,
        bank_weights,
        bank_bias,
    };
    (layout, spec)
}

/// Network parameters plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct DerainModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Model parameters recorded on a graph, in [`DerainModel::names`] order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vars: Vec<Var>,
}

/// Result of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DerainOutput {
    /// De-rained image, `[H, W, 3]` in `[-1, 1]`.
    pub y_hat: Var,
    /// Predicted rain layer, `[H, W, 3]`.
    pub r_hat: Var,
    /// Encoding fed to the prototype unit.
    pub features: Var,
    pub rspu: RspuOutput,
}

impl DerainModel {
    /// Fresh model: He-normal kernels, zero biases, zero output layer, and
    /// attention heads with variance 1/C. Fully determined by `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, spec) = plan(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::with_capacity(spec.shapes.len());
        for (shape, init) in spec.shapes.iter().zip(&spec.inits) {
            let t = match *init {
                Init::Zero => Tensor::zeros(shape),
                Init::He { fan_in } => {
                    let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("positive std");
                    Tensor::from_fn(shape, |_| normal.sample(&mut rng))?
                }
                Init::Attention { channels } => AttentionBank::init(channels, shape[1], &mut rng).weights,
            };
            params.push(t);
        }
        Ok(Self {
            config: *cfg,
            names: spec.names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the layout `cfg` implies.
    pub fn from_parameters(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let (layout, spec) = plan(cfg);
        if named.len() != spec.names.len() {
            return Err(invalid(
                "from_parameters",
                format!("expected {} tensors, got {}", spec.names.len(), named.len()),
            ));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(spec.names.iter().zip(&spec.shapes)) {
            if &name != want_name {
                return Err(invalid(
                    "from_parameters",
                    format!("expected tensor {want_name}, found {name}"),
                ));
            }
            if t.shape() != want_shape.as_slice() {
                return Err(mismatch("from_parameters", want_shape, t.shape()));
            }
            params.push(t);
        }
        Ok(Self {
            config: *cfg,
            names: spec.names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bank(&self) -> AttentionBank {
        AttentionBank {
            weights: self.params[self.layout.bank_weights].clone(),
            bias: self.params[self.layout.bank_bias].clone(),
        }
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            vars: self.params.iter().map(|p| g.param(p.clone())).collect(),
        }
    }

    /// Records the parameters as constants, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            vars: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    fn conv(g: &mut Graph, b: &BoundModel, slot: ConvSlot, x: Var, relu: bool) -> Result<Var> {
        let y = g.conv2d(x, b.vars[slot.kernel], Some(b.vars[slot.bias]), 1, 1)?;
        if relu {
            g.activation(y, Activation::Relu)
        } else {
            Ok(y)
        }
    }

    fn decoder_stages(&self, g: &mut Graph, b: &BoundModel, mut h: Var, skips: &[Var]) -> Result<Var> {
        if skips.len() != self.layout.decoder.len() {
            return Err(invalid(
                "decode",
                format!("expected {} skips, got {}", self.layout.decoder.len(), skips.len()),
            ));
        }
        for (&(up, conv), &skip) in self.layout.decoder.iter().zip(skips.iter().rev()) {
            let u = g.conv_transpose2d(h, b.vars[up])?;
            if g.shape(u) != g.shape(skip) {
                return Err(mismatch("decode", g.shape(skip), g.shape(u)));
            }
            let cat = g.concat_last(u, skip)?;
            h = Self::conv(g, b, conv, cat, true)?;
        }
        Ok(h)
    }

    /// Runs everything up to the prototype unit. Returns the unit's input
    /// features and the skip activations still needed by [`Self::decode`].
    pub fn encode(&self, g: &mut Graph, b: &BoundModel, x: Var) -> Result<(Var, Vec<Var>)> {
        let want = [self.config.height, self.config.width, 3];
        if g.shape(x) != want {
            return Err(mismatch("encode", &want, g.shape(x)));
        }
        let mut h = x;
        let mut skips = Vec::with_capacity(self.layout.encoder.len());
        for &[a, c] in &self.layout.encoder {
            h = Self::conv(g, b, a, h, true)?;
            h = Self::conv(g, b, c, h, true)?;
            skips.push(h);
            h = g.maxpool2d(h)?;
        }
        h = Self::conv(g, b, self.layout.bottleneck, h, true)?;
        match self.config.placement {
            Placement::Bottleneck => Ok((h, skips)),
            Placement::FullRes => {
                h = self.decoder_stages(g, b, h, &skips)?;
                if let Some(f) = self.layout.feature {
                    h = Self::conv(g, b, f, h, true)?;
                }
                Ok((h, Vec::new()))
            }
        }
    }

    /// Maps the fused encoding to the predicted rain layer `R̂`.
    pub fn decode(&self, g: &mut Graph, b: &BoundModel, fused: Var, skips: &[Var]) -> Result<Var> {
        let h = match self.config.placement {
            Placement::Bottleneck => self.decoder_stages(g, b, fused, skips)?,
            Placement::FullRes => fused,
        };
        Self::conv(g, b, self.layout.head, h, false)
    }

    pub fn bank_vars(&self, b: &BoundModel) -> BankVars {
        BankVars {
            weights: b.vars[self.layout.bank_weights],
            bias: b.vars[self.layout.bank_bias],
        }
    }

    /// `R̂ = decode(rspu(encode(X)))`, `Ŷ = clamp(X - R̂, [-1, 1])`.
    pub fn derain(&self, g: &mut Graph, b: &BoundModel, x: Var) -> Result<DerainOutput> {
        let (features, skips) = self.encode(g, b, x)?;
        let unit = rspu::rspu_forward(g, features, self.bank_vars(b))?;
        let r_hat = self.decode(g, b, unit.fused, &skips)?;
        let raw = g.sub(x, r_hat)?;
        let y_hat = g.activation(raw, Activation::ClampUnit)?;
        Ok(DerainOutput {
            y_hat,
            r_hat,
            features,
            rspu: unit,
        })
    }

    /// Inference on a normalised `[H, W, 3]` image; returns `(Ŷ, R̂)`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let out = self.derain(&mut g, &b, xv)?;
        Ok((g.value(out.y_hat).clone(), g.value(out.r_hat).clone()))
    }
}
