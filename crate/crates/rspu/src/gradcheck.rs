//! Finite-difference verification of every graph operator, the prototype
//! unit, the losses and one end-to-end training objective.
//!
//! Each check seeds its own inputs, projects the output onto a fixed random
//! direction and compares reverse-mode gradients with central differences
//! under the error `|a - b| / max(1, |b|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rspu_core::data::{gen_scene, mix_seed, RainParams, RainPreset};
use rspu_core::losses::{self, LossConfig};
use rspu_core::model::{DerainModel, ModelConfig};
use rspu_core::numerics::{Activation, Reduction};
use rspu_core::rspu::{rspu_forward, BankVars};
use rspu_core::train::{pair_objective, Dataset, TrainingPair};
use rspu_core::{Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-6;
pub const ELEMENTARY_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Elementary,
    Composite,
}

impl Kind {
    pub fn tolerance(self) -> f64 {
        match self {
            Self::Elementary => ELEMENTARY_TOLERANCE,
            Self::Composite => COMPOSITE_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub kind: Kind,
    pub max_error: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.max_error < self.kind.tolerance()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub seed: u64,
    /// Spatial extents used for image-shaped operator inputs.
    pub sizes: Vec<usize>,
    /// Name of a check whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: vec![4, 6],
            corrupt: None,
        }
    }
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

struct Ctx {
    rng: ChaCha8Rng,
    corrupt: bool,
}

impl Ctx {
    fn normal(&mut self, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            scale * z
        }).expect("finite samples")
    }

    /// Uniform in `±span` with magnitude at least `gap`.
    fn away_from_zero(&mut self, shape: &[usize], span: f64, gap: f64) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let m = self.rng.random_range(gap..span);
            if self.rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .expect("finite samples")
    }

    /// Distinct values on a grid of spacing `0.05` in random order.
    fn distinct(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
        for i in (1..n).rev() {
            values.swap(i, self.rng.random_range(0..=i));
        }
        Tensor::new(shape, values).expect("finite grid")
    }

    /// Rows whose largest entry leads the runner-up by at least `0.1`.
    fn peaked_rows(&mut self, rows: usize, cols: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let top = self.rng.random_range(0..cols);
            data.extend((0..cols).map(|c| {
                let base = self.rng.random_range(0.0..0.4);
                if c == top {
                    base + 0.6
                } else {
                    base
                }
            }));
        }
        Tensor::new(&[rows, cols], data).expect("finite rows")
    }

    /// Compares gradients of `sum(build(inputs) * W)` for a random `W`.
    fn check(&mut self, inputs: Vec<Tensor>, build: &Build) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let direction = self.normal(g.shape(out), 1.0);

        let objective = |xs: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            Ok(g.value(out).data().iter().zip(direction.data()).map(|(a, b)| a * b).sum())
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = g.constant(direction.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum_all(prod)?;
        g.backward(loss)?;
        let mut grads: Vec<Tensor> = vars
            .iter()
            .zip(&inputs)
            .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        self.corrupt_first(&mut grads);

        let mut worst = 0.0f64;
        let mut probe = inputs.clone();
        for (i, grad) in grads.iter().enumerate() {
            for k in 0..inputs[i].len() {
                let x0 = inputs[i].data()[k];
                probe[i].data_mut()[k] = x0 + STEP;
                let up = objective(&probe)?;
                probe[i].data_mut()[k] = x0 - STEP;
                let down = objective(&probe)?;
                probe[i].data_mut()[k] = x0;
                worst = worst.max(relative_error(grad.data()[k], (up - down) / (2.0 * STEP)));
            }
        }
        Ok(worst)
    }

    fn corrupt_first(&self, grads: &mut [Tensor]) {
        if self.corrupt {
            if let Some(v) = grads.first_mut().and_then(|g| g.data_mut().first_mut()) {
                *v += 1.0;
            }
        }
    }
}

pub fn relative_error(autodiff: f64, reference: f64) -> f64 {
    (autodiff - reference).abs() / reference.abs().max(1.0)
}

struct Check {
    name: &'static str,
    kind: Kind,
    run: fn(&mut Ctx, usize) -> Result<f64>,
}

macro_rules! check {
    ($name:literal, $kind:ident, |$ctx:ident, $s:ident| $body:expr) => {
        Check {
            name: $name,
            kind: Kind::$kind,
            run: |$ctx: &mut Ctx, $s: usize| $body,
        }
    };
}

fn unary(ctx: &mut Ctx, x: Tensor, kind: Activation) -> Result<f64> {
    ctx.check(vec![x], &move |g, v| g.activation(v[0], kind))
}

fn checks() -> Vec<Check> {
    vec![
        check!("conv2d", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s, s, 2], 1.0), c.normal(&[3, 3, 2, 3], 0.5), c.normal(&[3], 0.5)];
            c.check(inputs, &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))
        }),
        check!("conv2d_strided", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s + 1, s, 2], 1.0), c.normal(&[3, 3, 2, 2], 0.5)];
            c.check(inputs, &|g, v| g.conv2d(v[0], v[1], None, 2, 0))
        }),
        check!("conv_transpose2d", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s / 2, s / 2, 3], 1.0), c.normal(&[3, 3, 2, 3], 0.5)];
            c.check(inputs, &|g, v| g.conv_transpose2d(v[0], v[1]))
        }),
        check!("maxpool2d", Elementary, |c, s| {
            let x = c.distinct(&[s, s, 2]);
            c.check(vec![x], &|g, v| g.maxpool2d(v[0]))
        }),
        check!("relu", Elementary, |c, s| {
            let x = c.away_from_zero(&[s, 3], 2.0, 0.05);
            unary(c, x, Activation::Relu)
        }),
        check!("sigmoid", Elementary, |c, s| {
            let x = c.normal(&[s, 3], 3.0);
            unary(c, x, Activation::Sigmoid)
        }),
        check!("softplus", Elementary, |c, s| {
            let x = c.normal(&[s, 3], 3.0);
            unary(c, x, Activation::Softplus)
        }),
        check!("clamp_unit", Elementary, |c, s| {
            let x = Tensor::from_fn(&[s, 3], |_| {
                let m = c.rng.random_range(0.0..0.9) + if c.rng.random_bool(0.5) { 0.0 } else { 1.1 };
                if c.rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })?;
            unary(c, x, Activation::ClampUnit)
        }),
        check!("abs", Elementary, |c, s| {
            let x = c.away_from_zero(&[s, 3], 2.0, 0.05);
            unary(c, x, Activation::Abs)
        }),
        check!("softmax", Elementary, |c, s| {
            let x = c.normal(&[s, 2, 4], 2.0);
            c.check(vec![x], &|g, v| g.softmax_axis(v[0], 2))
        }),
        check!("reduce_sum", Elementary, |c, s| {
            let x = c.normal(&[s, 3, 2], 1.0);
            c.check(vec![x], &|g, v| g.reduce(v[0], Reduction::Sum, &[0, 2]))
        }),
        check!("reduce_mean", Elementary, |c, s| {
            let x = c.normal(&[s, 3, 2], 1.0);
            c.check(vec![x], &|g, v| g.reduce(v[0], Reduction::Mean, &[1]))
        }),
        check!("add", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s, 3], 1.0), c.normal(&[s, 3], 1.0)];
            c.check(inputs, &|g, v| g.add(v[0], v[1]))
        }),
        check!("sub", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s, 3], 1.0), c.normal(&[], 1.0)];
            c.check(inputs, &|g, v| g.sub(v[0], v[1]))
        }),
        check!("mul", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s, 3], 1.0), c.normal(&[s, 3], 1.0)];
            c.check(inputs, &|g, v| g.mul(v[0], v[1]))
        }),
        check!("div", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s, 3], 1.0), c.away_from_zero(&[s, 3], 2.0, 0.5)];
            c.check(inputs, &|g, v| g.div(v[0], v[1]))
        }),
        check!("scale", Elementary, |c, s| {
            let x = c.normal(&[s, 3], 1.0);
            c.check(vec![x], &|g, v| g.scale(v[0], -0.7))
        }),
        check!("add_scalar", Elementary, |c, s| {
            let x = c.normal(&[s, 3], 1.0);
            c.check(vec![x], &|g, v| g.add_scalar(v[0], 0.3))
        }),
        check!("vector_l2", Elementary, |c, s| {
            let x = c.away_from_zero(&[s, 4], 1.0, 0.1);
            c.check(vec![x], &|g, v| g.vector_l2(v[0], 1))
        }),
        check!("matmul", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s, 3], 1.0), c.normal(&[3, 2], 1.0)];
            c.check(inputs, &|g, v| g.matmul(v[0], v[1]))
        }),
        check!("transpose", Elementary, |c, s| {
            let x = c.normal(&[s, 3], 1.0);
            c.check(vec![x], &|g, v| g.transpose(v[0]))
        }),
        check!("reshape", Elementary, |c, s| {
            let x = c.normal(&[s, 2, 3], 1.0);
            c.check(vec![x], &move |g, v| g.reshape(v[0], &[s * 2, 3]))
        }),
        check!("concat_last", Elementary, |c, s| {
            let inputs = vec![c.normal(&[s, 2, 3], 1.0), c.normal(&[s, 2, 1], 1.0)];
            c.check(inputs, &|g, v| g.concat_last(v[0], v[1]))
        }),
        check!("gather_rows", Elementary, |c, s| {
            let x = c.normal(&[s, 3], 1.0);
            let idx: Vec<usize> = (0..s + 2).map(|i| (i * 7) % s).collect();
            c.check(vec![x], &move |g, v| g.gather_rows(v[0], &idx))
        }),
        check!("broadcast_rows", Elementary, |c, s| {
            let x = c.normal(&[3], 1.0);
            c.check(vec![x], &move |g, v| g.broadcast_rows(v[0], s))
        }),
        check!("rspu_forward", Composite, |c, s| {
            let inputs = vec![c.normal(&[s, s, 4], 1.0), c.normal(&[4, 3], 0.5), c.normal(&[3], 0.5)];
            c.check(inputs, &|g, v| {
                let out = rspu_forward(g, v[0], BankVars { weights: v[1], bias: v[2] })?;
                Ok(out.fused)
            })
        }),
        check!("cohesion_loss", Composite, |c, s| {
            let inputs = vec![c.normal(&[s * 2, 3], 1.0), c.normal(&[4, 3], 1.0), c.peaked_rows(s * 2, 4)];
            c.check(inputs, &|g, v| losses::cohesion_loss(g, v[0], v[1], v[2]))
        }),
        check!("divergence_loss", Composite, |c, s| {
            let p = c.normal(&[s, 3], 0.4);
            c.check(vec![p], &|g, v| losses::divergence_loss(g, v[0], 1.0))
        }),
        check!("feature_prototype_loss", Composite, |c, s| {
            let inputs = vec![c.normal(&[s, s, 3], 1.0), c.normal(&[3, 3], 0.4), c.peaked_rows(s * s, 3)];
            c.check(inputs, &|g, v| {
                Ok(losses::feature_prototype_loss(g, v[0], v[1], v[2], &LossConfig::default())?.0)
            })
        }),
        check!("background_consistency", Composite, |c, s| {
            let inputs = vec![c.normal(&[s, s, 3], 1.0), c.normal(&[s, s, 3], 1.0)];
            c.check(inputs, &|g, v| losses::background_consistency(g, v[0], v[1]))
        }),
        check!("cross_consistency", Composite, |c, s| {
            let inputs = vec![c.normal(&[s, s, 3], 1.0), c.normal(&[s, s, 3], 1.0)];
            c.check(inputs, &|g, v| losses::cross_consistency(g, v[0], v[1]))
        }),
        check!("self_consistency", Composite, |c, s| {
            let inputs = vec![c.normal(&[s, s, 3], 1.0), c.normal(&[s, s, 3], 1.0), c.normal(&[s, s, 3], 1.0)];
            c.check(inputs, &|g, v| losses::self_consistency(g, v[0], v[1], v[2]))
        }),
        check!("total_loss_e2e", Composite, |c, _s| total_loss_e2e(c)),
    ]
}

pub fn check_names() -> Vec<&'static str> {
    checks().iter().map(|c| c.name).collect()
}

/// 16×16 desk model with a random output layer, checked on three sampled
/// coordinates of every parameter tensor.
fn total_loss_e2e(ctx: &mut Ctx) -> Result<f64> {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        ..ModelConfig::desk()
    };
    let mut model = DerainModel::build(&cfg)?;
    for (name, p) in model.names().to_vec().into_iter().zip(model.parameters_mut()) {
        if name.starts_with("head") {
            *p = ctx.normal(p.shape(), 0.05);
        }
    }
    let scene = gen_scene(mix_seed(ctx.rng.random(), 1), 16, 2, &RainParams::preset(RainPreset::Heavy, 16))?;
    let dataset = Dataset::from_scenes(&[scene])?;
    let pair = TrainingPair { scene: 0, w: 0, v: 1 };
    let loss_cfg = LossConfig::default();
    let mut grads = pair_objective(&model, &dataset, pair, &loss_cfg)?.grads;
    ctx.corrupt_first(&mut grads);

    let mut worst = 0.0f64;
    for (i, grad) in grads.iter().enumerate() {
        let mut coords = vec![0];
        coords.extend((0..2).map(|_| ctx.rng.random_range(0..grad.len())));
        for k in coords {
            let x0 = model.parameters()[i].data()[k];
            let mut eval = |x: f64| -> Result<f64> {
                model.parameters_mut()[i].data_mut()[k] = x;
                Ok(pair_objective(&model, &dataset, pair, &loss_cfg)?.report.total)
            };
            let fd = (eval(x0 + STEP)? - eval(x0 - STEP)?) / (2.0 * STEP);
            model.parameters_mut()[i].data_mut()[k] = x0;
            worst = worst.max(relative_error(grad.data()[k], fd));
        }
    }
    Ok(worst)
}

/// Runs every check over every size; the reported error is the worst one.
pub fn run(opts: &Options) -> Result<Vec<Outcome>> {
    checks()
        .into_iter()
        .enumerate()
        .map(|(i, check)| {
            let mut ctx = Ctx {
                rng: ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, i as u64)),
                corrupt: opts.corrupt.as_deref() == Some(check.name),
            };
            let sizes: &[usize] = if check.name == "total_loss_e2e" { &opts.sizes[..1] } else { &opts.sizes };
            let mut worst = 0.0f64;
            for &s in sizes {
                worst = worst.max((check.run)(&mut ctx, s)?);
            }
            Ok(Outcome {
                name: check.name,
                kind: check.kind,
                max_error: worst,
            })
        })
        .collect()
}
