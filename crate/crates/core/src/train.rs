//! Pair sampling, the per-pair objective, Adam and the training loop.
//!
//! Every step draws its batch from a ChaCha8 stream keyed by `(seed, step)`,
//! so the optimizer step counter is the only state needed to resume.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{normalize, TimeLapseScene};
use crate::error::{invalid, mismatch, Error, Result};
use crate::losses::{self, LossConfig, LossReport, LossTerms};
use crate::model::{DerainModel, ModelConfig};
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            steps: 0,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::paper(),
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// Small model, batch 4, 2000 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            steps: 2000,
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "train_config";
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid(OP, "learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid(OP, "batch size must be positive"));
        }
        if self.log_every == 0 {
            return Err(invalid(OP, "log interval must be positive"));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// Adam moments for every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn check(&self, params: &[Tensor]) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(invalid(
                "adam",
                format!("{} parameters but {}/{} moment buffers", params.len(), self.m.len(), self.v.len()),
            ));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(mismatch("adam", p.shape(), m.shape()));
            }
        }
        Ok(())
    }

    /// One bias-corrected update of every parameter.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        self.check(params)?;
        if grads.len() != params.len() {
            return Err(invalid("adam", format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adam_update(p, g, &mut self.m[i], &mut self.v[i], self.step, lr, (self.beta1, self.beta2, self.eps))?;
        }
        Ok(())
    }
}

/// Standard Adam recurrence for one tensor; `step` counts from 1.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(mismatch("adam_update", param.shape(), grad.shape()));
    }
    let c1 = 1.0 - libm::pow(beta1, step as f64);
    let c2 = 1.0 - libm::pow(beta2, step as f64);
    let (pd, md, vd) = (param.data_mut(), m.data_mut(), v.data_mut());
    for (k, &gk) in grad.data().iter().enumerate() {
        md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
        vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
        let m_hat = md[k] / c1;
        let v_hat = vd[k] / c2;
        pd[k] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
    }
    Ok(())
}

/// Normalised frames of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrames {
    pub id: String,
    pub frames: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub scenes: Vec<SceneFrames>,
}

impl Dataset {
    pub fn from_scenes(scenes: &[TimeLapseScene]) -> Result<Self> {
        let scenes = scenes
            .iter()
            .map(|s| {
                Ok(SceneFrames {
                    id: s.scene_id.clone(),
                    frames: s.frames.iter().map(normalize).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(invalid("dataset", "no scenes"));
        }
        if let Some(s) = self.scenes.iter().find(|s| s.frames.len() < 2) {
            return Err(invalid("dataset", format!("scene {} has {} frames, need at least 2", s.id, s.frames.len())));
        }
        Ok(())
    }
}

/// Two distinct frames `w != v` of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub scene: usize,
    pub w: usize,
    pub v: usize,
}

pub fn sample_pair(dataset: &Dataset, rng: &mut impl Rng) -> Result<TrainingPair> {
    if dataset.is_empty() {
        return Err(invalid("sample_pair", "no scenes"));
    }
    let scene = rng.random_range(0..dataset.len());
    let t = dataset.scenes[scene].frames.len();
    if t < 2 {
        return Err(invalid("sample_pair", format!("scene {} has {} frames", dataset.scenes[scene].id, t)));
    }
    let w = rng.random_range(0..t);
    let v = (w + rng.random_range(1..t)) % t;
    Ok(TrainingPair { scene, w, v })
}

/// The pairs of step `step`, drawn from stream `step` of the seed.
pub fn batch_pairs(dataset: &Dataset, seed: u64, step: u64, batch_size: usize) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch_size).map(|_| sample_pair(dataset, &mut rng)).collect()
}

/// Loss report and parameter gradients of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
}

/// Objective of one pair: de-rain both frames, `L_b` between the two
/// estimates, `L_c` over both cross directions, `L_s` and `L_fea` averaged
/// over the two frames.
pub fn pair_objective(
    model: &DerainModel,
    dataset: &Dataset,
    pair: TrainingPair,
    cfg: &LossConfig,
) -> Result<PairResult> {
    let frames = &dataset.scenes[pair.scene].frames;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let xw = g.constant(frames[pair.w].clone());
    let xv = g.constant(frames[pair.v].clone());
    let ow = model.derain(&mut g, &bound, xw)?;
    let ov = model.derain(&mut g, &bound, xv)?;

    let b = losses::background_consistency(&mut g, ow.y_hat, ov.y_hat)?;
    let cw = losses::cross_consistency(&mut g, xw, ov.y_hat)?;
    let cv = losses::cross_consistency(&mut g, xv, ow.y_hat)?;
    let sw = losses::self_consistency(&mut g, xw, ow.y_hat, ow.r_hat)?;
    let sv = losses::self_consistency(&mut g, xv, ov.y_hat, ov.r_hat)?;
    let (fw, cohw, divw) =
        losses::feature_prototype_loss(&mut g, ow.features, ow.rspu.prototypes, ow.rspu.relevance, cfg)?;
    let (fv, cohv, divv) =
        losses::feature_prototype_loss(&mut g, ov.features, ov.rspu.prototypes, ov.rspu.relevance, cfg)?;

    let mut half_sum = |a, b| -> Result<_> {
        let s = g.add(a, b)?;
        g.scale(s, 0.5)
    };
    let terms = LossTerms {
        b,
        c: half_sum(cw, cv)?,
        s: half_sum(sw, sv)?,
        fea: half_sum(fw, fv)?,
        coh: half_sum(cohw, cohv)?,
        div: half_sum(divw, divv)?,
    };
    let (total, report) = losses::total_loss(&mut g, &terms, cfg)?;
    if !report.is_finite() {
        return Err(Error::NonFinite { op: "pair_objective" });
    }
    g.backward(total)?;
    let grads = bound
        .vars
        .iter()
        .zip(model.parameters())
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(PairResult { report, grads })
}

/// Averages per-pair results in the given order and applies one update.
pub fn apply_batch(
    model: &mut DerainModel,
    opt: &mut AdamState,
    results: &[PairResult],
    lr: f64,
) -> Result<LossReport> {
    let Some(first) = results.first() else {
        return Err(invalid("apply_batch", "empty batch"));
    };
    let scale = 1.0 / results.len() as f64;
    let mut grads: Vec<Tensor> = first.grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for r in results {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
    let reports: Vec<LossReport> = results.iter().map(|r| r.report).collect();
    opt.update(model.parameters_mut(), &grads, lr)?;
    Ok(LossReport::mean(&reports))
}

/// Model, optimizer and configuration of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DerainModel,
    pub optimizer: AdamState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DerainModel::build(&config.model)?;
        let optimizer = AdamState::new(model.parameters());
        Ok(Self {
            config,
            model,
            optimizer,
        })
    }

    /// Continues from a saved model and optimizer state.
    pub fn resume(config: TrainConfig, model: DerainModel, optimizer: AdamState) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(invalid("resume", "checkpoint model configuration differs from the run's"));
        }
        optimizer.check(model.parameters())?;
        Ok(Self {
            config,
            model,
            optimizer,
        })
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    pub fn next_pairs(&self, dataset: &Dataset) -> Result<Vec<TrainingPair>> {
        batch_pairs(dataset, self.config.seed, self.optimizer.step, self.config.batch_size)
    }

    /// One step with the pair objectives evaluated sequentially.
    pub fn step(&mut self, dataset: &Dataset) -> Result<LossReport> {
        self.step_with(dataset, |model, pairs, cfg| {
            pairs.iter().map(|&p| pair_objective(model, dataset, p, cfg)).collect()
        })
    }

    /// One step with a caller-supplied evaluator, which must return results
    /// in the order of `pairs`.
    pub fn step_with<F>(&mut self, dataset: &Dataset, evaluate: F) -> Result<LossReport>
    where
        F: FnOnce(&DerainModel, &[TrainingPair], &LossConfig) -> Result<Vec<PairResult>>,
    {
        let pairs = self.next_pairs(dataset)?;
        let results = evaluate(&self.model, &pairs, &self.config.loss)?;
        if results.len() != pairs.len() {
            return Err(invalid("train_step", format!("{} pairs but {} results", pairs.len(), results.len())));
        }
        apply_batch(&mut self.model, &mut self.optimizer, &results, self.config.learning_rate)
    }

    /// Steps until `config.steps` are done, calling `after_step` with each
    /// report.
    pub fn run<H>(&mut self, dataset: &Dataset, mut after_step: H) -> Result<()>
    where
        H: FnMut(&Trainer, &LossReport) -> Result<()>,
    {
        dataset.validate()?;
        while self.optimizer.step < self.config.steps {
            let report = self.step(dataset)?;
            after_step(self, &report)?;
        }
        Ok(())
    }
}

/// Trains from scratch and returns the model with every step's report.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(DerainModel, Vec<LossReport>)> {
    let mut trainer = Trainer::new(*config)?;
    let mut history = Vec::with_capacity(config.steps as usize);
    trainer.run(dataset, |_, r| {
        history.push(*r);
        Ok(())
    })?;
    Ok((trainer.model, history))
}

/// Mean of `f(report)` over a window of the history.
pub fn window_mean(history: &[LossReport], range: core::ops::Range<usize>, f: impl Fn(&LossReport) -> f64) -> f64 {
    let slice = &history[range];
    slice.iter().map(f).sum::<f64>() / slice.len().max(1) as f64
}
