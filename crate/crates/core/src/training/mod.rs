//! Stage-0 denoiser pretraining, the two-stage contrastive-reconstruction
//! schedule (projector alignment, then encoder enhancement), the end-to-end
//! variant, and the naive joint-loss baseline with gradient-conflict logging.

mod dcr;
mod naive;
mod pretrain;
mod runlog;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use dcr::{dcr_batch_loss, heldout_dcr_loss, train_end_to_end, train_stage1, train_stage2};
pub use naive::{conflict_summary, naive_step_gradients, train_naive, NaiveGradients};
pub use pretrain::{pretrain_denoiser, recon_mse};
pub use runlog::{EvalRecord, Record, RunLog, StepRecord};

use crate::autodiff::Tensor;
use crate::datasets::{augment_with, batches, AugmentConfig, Dataset};
use crate::diffusion::{DiffusionSchedule, ScheduleConfig};
use crate::encoder::Projector;
use crate::error::{invalid, Error, Result};
use crate::losses::{LossWeights, PositiveMode, DEFAULT_TAU};
use crate::model::{stream_rng, tags, Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSteps {
    pub stage0: usize,
    pub stage1: usize,
    pub stage2: usize,
    /// Budget of the naive and end-to-end runs; `stage1 + stage2` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint: Option<usize>,
}

impl Default for StageSteps {
    fn default() -> Self {
        Self {
            stage0: 3000,
            stage1: 1500,
            stage2: 1500,
            joint: None,
        }
    }
}

impl StageSteps {
    pub fn joint_steps(&self) -> usize {
        self.joint.unwrap_or(self.stage1 + self.stage2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub stage0: f64,
    pub stage1: f64,
    pub stage2: f64,
    pub naive: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            stage0: 1e-3,
            stage1: 1e-4,
            stage2: 1e-5,
            naive: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: StageSteps,
    pub lr: LearningRates,
    pub weight_decay: f64,
    pub tau: f64,
    pub loss_weights: LossWeights,
    pub positive_mode: PositiveMode,
    /// Whether the naive baseline updates the projector along with the encoder.
    pub naive_trains_projector: bool,
    /// Every `holdout_every`-th image is kept out of training.
    pub holdout_every: usize,
    /// Held-out metrics are logged every this many steps (and at each stage's
    /// first and last step); 0 logs only the endpoints.
    pub eval_every: usize,
    pub diffusion: ScheduleConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            steps: StageSteps::default(),
            lr: LearningRates::default(),
            weight_decay: 0.01,
            tau: DEFAULT_TAU,
            loss_weights: LossWeights::default(),
            positive_mode: PositiveMode::default(),
            naive_trains_projector: true,
            holdout_every: 8,
            eval_every: 0,
            diffusion: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid(format!(
                "batch_size {} leaves no negatives; need at least 2",
                self.batch_size
            )));
        }
        let lr = self.lr;
        for (name, v) in [("stage0", lr.stage0), ("stage1", lr.stage1), ("stage2", lr.stage2), ("naive", lr.naive)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("learning rate for {name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.holdout_every < 2 {
            return Err(invalid("holdout_every must be at least 2"));
        }
        self.loss_weights.validate()?;
        self.diffusion.build()?;
        Ok(())
    }
}

/// Training stages, each with its own random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage0,
    Stage1,
    Stage2,
    Naive,
    EndToEnd,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage0 => "stage0",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Naive => "naive",
            Stage::EndToEnd => "end_to_end",
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            Stage::Stage0 => tags::STAGE0,
            Stage::Stage1 => tags::STAGE1,
            Stage::Stage2 => tags::STAGE2,
            Stage::Naive => tags::NAIVE,
            Stage::EndToEnd => tags::END_TO_END,
        }
    }
}

/// `⟨a, b⟩ / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn gradient_conflict(g_con: &[f64], g_rec: &[f64]) -> Result<f64> {
    if g_con.len() != g_rec.len() {
        return Err(Error::Shape {
            op: "gradient_conflict",
            shapes: vec![vec![g_con.len()], vec![g_rec.len()]],
        });
    }
    let dot: f64 = g_con.iter().zip(g_rec).map(|(a, b)| a * b).sum();
    let na = g_con.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = g_rec.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("gradient conflict undefined for a zero gradient"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Endless sequence of seeded mini-batches, one fresh permutation per epoch.
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let first = batches(n, batch_size, seed, 0)?;
        Ok(Self {
            n,
            batch_size,
            seed,
            epoch: 0,
            pending: first.into_iter(),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if let Some(b) = self.pending.next() {
                return b;
            }
            self.epoch += 1;
            self.pending = batches(self.n, self.batch_size, self.seed, self.epoch)
                .expect("validated at construction")
                .into_iter();
        }
    }
}

/// Everything drawn at random for one mini-batch: per-item step, noise and
/// augmented view, plus the resulting noised images.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x0: Tensor,
    pub aug: Tensor,
    pub x_t: Tensor,
    pub eps: Tensor,
    pub ts: Vec<usize>,
    pub labels: Vec<usize>,
}

impl TrainBatch {
    /// For each index in order: `t ~ U{1..T}`, `ε ~ N(0, I)`, `x⁺ = a(x)`,
    /// then `x_t = √ᾱ_t x + √(1−ᾱ_t) ε`.
    pub fn draw<R: Rng>(
        data: &Dataset,
        indices: &[usize],
        sched: &DiffusionSchedule,
        augment: &AugmentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = data.dims.len();
        let n = indices.len();
        let (mut aug, mut x_t, mut eps) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        let mut ts = Vec::with_capacity(n);
        for &i in indices {
            let im = &data.images[i];
            let t = rng.gen_range(1..=sched.steps);
            let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let a = augment_with(im, data.dims, augment, rng);
            x_t.extend(sched.forward_noise(&im.pixels, t, &e)?);
            aug.extend(a.pixels);
            eps.extend(e);
            ts.push(t);
        }
        Ok(Self {
            x0: data.matrix(indices),
            aug: Tensor::new(vec![n, d], aug)?,
            x_t: Tensor::new(vec![n, d], x_t)?,
            eps: Tensor::new(vec![n, d], eps)?,
            ts,
            labels: indices.iter().map(|&i| data.images[i].label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    /// `[x0; aug]` stacked to `[2n, D]`.
    pub fn both_views(&self) -> Tensor {
        let mut data = self.x0.data().to_vec();
        data.extend_from_slice(self.aug.data());
        Tensor::new(vec![2 * self.len(), self.x0.shape()[1]], data).expect("matching views")
    }
}

/// Fixed held-out batch (first `batch_size` items of a seeded permutation)
/// with its own seeded draws, identical across stages and runs.
pub fn heldout_batch(cfg: &TrainConfig, heldout: &Dataset, sched: &DiffusionSchedule) -> Result<TrainBatch> {
    let size = cfg.batch_size.min(heldout.len());
    if size < 2 {
        return Err(invalid(format!("held-out set has {} images; need at least 2", heldout.len())));
    }
    let idx = batches(heldout.len(), size, cfg.seed, u64::MAX)?.remove(0);
    TrainBatch::draw(heldout, &idx, sched, &cfg.augment, &mut stream_rng(cfg.seed, tags::EVAL))
}

/// Model after Stage 0: random encoder, the reference projector trained with
/// the denoiser, and the trained denoiser.
pub fn initial_model(cfg: &TrainConfig, data: &Dataset) -> Model {
    Model::new(data.dims, cfg.diffusion.steps, &cfg.model, cfg.seed)
}

/// Freshly initialized projector used to start Stage 1 and the baselines.
pub fn fresh_projector(cfg: &TrainConfig) -> Projector {
    Projector::new(
        cfg.model.encoder.d_z,
        &cfg.model.projector,
        &mut stream_rng(cfg.seed, tags::PROJECTOR_INIT),
    )
}

/// Snapshots of the two-stage pipeline.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub stage0: Model,
    pub stage1: Model,
    pub stage2: Model,
}

fn check_inputs(cfg: &TrainConfig, train: &Dataset) -> Result<DiffusionSchedule> {
    cfg.validate()?;
    cfg.augment.validate(train.dims)?;
    if cfg.batch_size > train.len() {
        return Err(invalid(format!(
            "batch_size {} exceeds training set size {}",
            cfg.batch_size,
            train.len()
        )));
    }
    cfg.diffusion.build()
}

/// Stage 0 from a fresh model.
pub fn run_stage0(cfg: &TrainConfig, train: &Dataset, heldout: &Dataset, log: &mut RunLog) -> Result<Model> {
    let sched = check_inputs(cfg, train)?;
    let mut model = initial_model(cfg, train);
    let (den, reference) = pretrain_denoiser(cfg, train, heldout, &sched, &model.encoder, log)?;
    model.denoiser = den;
    model.projector = reference;
    Ok(model)
}

/// Stage 1 then Stage 2 starting from a Stage-0 model (projector reinitialized).
pub fn run_two_stage(cfg: &TrainConfig, train: &Dataset, heldout: &Dataset, stage0: &Model, log: &mut RunLog) -> Result<(Model, Model)> {
    let sched = check_inputs(cfg, train)?;
    let mut m = stage0.clone();
    m.projector = fresh_projector(cfg);
    train_stage1(cfg, train, heldout, &sched, &m.denoiser, &m.encoder, &mut m.projector, log)?;
    let s1 = m.clone();
    train_stage2(cfg, train, heldout, &sched, &m.denoiser, &mut m.encoder, &m.projector, log)?;
    Ok((s1, m))
}

pub fn run_dcr(cfg: &TrainConfig, train: &Dataset, heldout: &Dataset, log: &mut RunLog) -> Result<PipelineOutput> {
    let stage0 = run_stage0(cfg, train, heldout, log)?;
    let (stage1, stage2) = run_two_stage(cfg, train, heldout, &stage0, log)?;
    Ok(PipelineOutput { stage0, stage1, stage2 })
}

/// Naive joint-loss run from a Stage-0 model (projector reinitialized).
pub fn run_naive_from(cfg: &TrainConfig, train: &Dataset, heldout: &Dataset, stage0: &Model, log: &mut RunLog) -> Result<Model> {
    let sched = check_inputs(cfg, train)?;
    let mut m = stage0.clone();
    m.projector = fresh_projector(cfg);
    train_naive(cfg, train, heldout, &sched, &m.denoiser, &mut m.encoder, &mut m.projector, log)?;
    Ok(m)
}

/// End-to-end contrastive-reconstruction run from a Stage-0 model.
pub fn run_end_to_end_from(cfg: &TrainConfig, train: &Dataset, heldout: &Dataset, stage0: &Model, log: &mut RunLog) -> Result<Model> {
    let sched = check_inputs(cfg, train)?;
    let mut m = stage0.clone();
    m.projector = fresh_projector(cfg);
    train_end_to_end(cfg, train, heldout, &sched, &m.denoiser, &mut m.encoder, &mut m.projector, log)?;
    Ok(m)
}

fn should_eval(cfg: &TrainConfig, step: usize, total: usize) -> bool {
    step == 0 || step == total || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every))
}
