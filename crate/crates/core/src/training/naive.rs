use std::collections::BTreeMap;

use super::{
    gradient_conflict, heldout_batch, recon_mse, should_eval, BatchStream, EvalRecord, Record, RunLog, Stage, StepRecord, TrainBatch,
    TrainConfig,
};
use crate::autodiff::{Graph, Tensor};
use crate::datasets::Dataset;
use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::encoder::{Encoder, Projector};
use crate::error::{Error, Result};
use crate::losses::{info_nce_graph, joint_loss, positive_groups};
use crate::model::step_rng;
use crate::nn::Module;
use crate::optim::AdamW;

/// One naive step's measurements and the combined update direction.
#[derive(Clone, Debug)]
pub struct NaiveGradients {
    pub l_con: f64,
    pub l_rec: f64,
    /// `∂L_con/∂z` on the clean-view rows, flattened.
    pub g_con: Vec<f64>,
    /// `∂L_rec/∂z` on the same rows.
    pub g_rec: Vec<f64>,
    pub cos: f64,
    /// `λ_con ∂L_con/∂θ + λ_rec ∂L_rec/∂θ` per encoder parameter.
    pub encoder: Vec<Tensor>,
    /// Same for the projector (it only sees `L_rec`).
    pub projector: Vec<Tensor>,
}

/// `L_con` is InfoNCE on the encoder features of both views; `L_rec` is the
/// noise-prediction MSE conditioned on the clean view. The two losses are
/// differentiated in separate passes so their feature gradients can be
/// compared before they are combined.
pub fn naive_step_gradients(
    cfg: &TrainConfig,
    encoder: &Encoder,
    projector: &Projector,
    denoiser: &Denoiser,
    batch: &TrainBatch,
) -> Result<NaiveGradients> {
    let n = batch.len();
    let mut g = Graph::new();
    let be = encoder.bind(&mut g, true);
    let bp = projector.bind(&mut g, true);
    let bd = denoiser.bind(&mut g, false);
    let x = g.constant(batch.both_views());
    let z = encoder.forward(&mut g, &be.ids, x)?;
    let groups = positive_groups(cfg.positive_mode, &batch.labels);
    let l_con = info_nce_graph(&mut g, z, &groups, cfg.tau)?;
    let clean: Vec<usize> = (0..n).collect();
    let z0 = g.gather_rows(z, &clean)?;
    let c = projector.forward(&mut g, &bp.ids, z0)?;
    let xt = g.constant(batch.x_t.clone());
    let te = g.constant(denoiser.time_embeddings(&batch.ts)?);
    let pred = denoiser.forward(&mut g, &bd.ids, xt, te, c)?;
    let target = g.constant(batch.eps.clone());
    let l_rec = g.mse(pred, target)?;
    let rows = n * encoder.d_z();

    g.backward(l_con)?;
    let g_con = g.grad_tensor(z).data()[..rows].to_vec();
    let enc_con = be.grads(&g);
    g.zero_grad();
    g.backward(l_rec)?;
    let g_rec = g.grad_tensor(z).data()[..rows].to_vec();
    let enc_rec = be.grads(&g);
    let proj_rec = bp.grads(&g);

    let w = cfg.loss_weights;
    let combine = |a: &Tensor, b: &Tensor| {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| w.lambda_con * x + w.lambda_rec * y).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    let encoder_grads = enc_con.iter().zip(&enc_rec).map(|(a, b)| combine(a, b)).collect::<Result<_>>()?;
    let projector_grads = proj_rec
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| w.lambda_rec * v).collect()))
        .collect::<Result<_>>()?;
    Ok(NaiveGradients {
        l_con: g.value(l_con).item()?,
        l_rec: g.value(l_rec).item()?,
        cos: gradient_conflict(&g_con, &g_rec)?,
        g_con,
        g_rec,
        encoder: encoder_grads,
        projector: projector_grads,
    })
}

/// Joint-loss baseline: `λ_con L_con + λ_rec L_rec` on encoder (and, if
/// configured, projector) with the denoiser frozen, recording the feature
/// gradient cosine every step before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_naive(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    sched: &DiffusionSchedule,
    denoiser: &Denoiser,
    encoder: &mut Encoder,
    projector: &mut Projector,
    log: &mut RunLog,
) -> Result<()> {
    let stage = Stage::Naive;
    let total = cfg.steps.joint_steps();
    let mut opt_e = AdamW::new(&encoder.params().iter().map(|p| p.1).collect::<Vec<_>>(), cfg.weight_decay);
    let mut opt_p = AdamW::new(&projector.params().iter().map(|p| p.1).collect::<Vec<_>>(), cfg.weight_decay);
    let eval = heldout_batch(cfg, heldout, sched)?;
    log_eval(log, 0, recon_mse(encoder, projector, denoiser, &eval)?)?;
    let mut stream = BatchStream::new(train.len(), cfg.batch_size, cfg.seed ^ stage.tag())?;
    let mut cosines = Vec::with_capacity(total);
    for step in 1..=total {
        let idx = stream.next_batch();
        let mut rng = step_rng(cfg.seed, stage.tag(), step as u64);
        let batch = TrainBatch::draw(train, &idx, sched, &cfg.augment, &mut rng)?;
        let ng = naive_step_gradients(cfg, encoder, projector, denoiser, &batch)?;
        let loss = joint_loss(ng.l_con, ng.l_rec, &cfg.loss_weights);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: stage.name().into(),
                step,
                loss,
            });
        }
        let names = encoder.param_names();
        opt_e.step(&mut encoder.params_mut(), &names, &ng.encoder, cfg.lr.naive)?;
        if cfg.naive_trains_projector {
            let names = projector.param_names();
            opt_p.step(&mut projector.params_mut(), &names, &ng.projector, cfg.lr.naive)?;
        }
        cosines.push(ng.cos);
        log.push(Record::Step(StepRecord {
            stage: stage.name().into(),
            step,
            loss,
            l_con: Some(ng.l_con),
            l_rec: Some(ng.l_rec),
            grad_cos: Some(ng.cos),
            timesteps: batch.ts.clone(),
        }))?;
        if step % 100 == 0 || step == total {
            log::info!("naive step {step}/{total} l_con {:.5} l_rec {:.5} cos {:.4}", ng.l_con, ng.l_rec, ng.cos);
        }
        if should_eval(cfg, step, total) {
            log_eval(log, step, recon_mse(encoder, projector, denoiser, &eval)?)?;
        }
    }
    log.push(Record::Summary {
        stage: stage.name().into(),
        metrics: conflict_summary(&cosines),
    })
}

/// Fractions of negative cosines over the whole run and over its last half.
pub fn conflict_summary(cosines: &[f64]) -> BTreeMap<String, f64> {
    let frac = |c: &[f64]| {
        if c.is_empty() {
            0.0
        } else {
            c.iter().filter(|&&v| v < 0.0).count() as f64 / c.len() as f64
        }
    };
    let half = &cosines[cosines.len() / 2..];
    [
        ("negative_cos_fraction".to_string(), frac(cosines)),
        ("negative_cos_fraction_last_half".to_string(), frac(half)),
        ("steps".to_string(), cosines.len() as f64),
    ]
    .into()
}

fn log_eval(log: &mut RunLog, step: usize, mse: f64) -> Result<()> {
    log.push(Record::Eval(EvalRecord {
        stage: Stage::Naive.name().into(),
        step,
        metrics: [("heldout_recon_mse".to_string(), mse)].into(),
    }))
}
