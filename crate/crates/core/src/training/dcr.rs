use std::collections::BTreeMap;

use super::{heldout_batch, should_eval, BatchStream, EvalRecord, Record, RunLog, Stage, StepRecord, TrainBatch, TrainConfig};
use crate::autodiff::{Graph, NodeId};
use crate::datasets::Dataset;
use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::encoder::{Encoder, Projector};
use crate::error::{Error, Result};
use crate::losses::dcr_from_sims;
use crate::model::step_rng;
use crate::nn::{Bound, Module};
use crate::optim::AdamW;

/// Mean contrastive-reconstruction loss of a batch, built in `g`.
///
/// For anchor `i` every prediction reuses the anchor's `x_t` and `t`:
/// `ε̂_i` under its own condition, `ε̂₊` under the augmented view's condition,
/// and one negative per other image `j` under that image's condition. The
/// positives are `ε̂₊` and the drawn noise `ε_gt`.
#[allow(clippy::too_many_arguments)]
pub fn dcr_batch_loss(
    g: &mut Graph,
    encoder: &Encoder,
    be: &Bound,
    projector: &Projector,
    bp: &Bound,
    denoiser: &Denoiser,
    bd: &Bound,
    batch: &TrainBatch,
    tau: f64,
) -> Result<NodeId> {
    let n = batch.len();
    let x = g.constant(batch.both_views());
    let z = encoder.forward(g, &be.ids, x)?;
    let c = projector.forward(g, &bp.ids, z)?;
    let xt = g.constant(batch.x_t.clone());
    let te = g.constant(denoiser.time_embeddings(&batch.ts)?);
    // rows i·(n+1) + j: condition of image j (j < n), then the augmented view
    let mut pairs = Vec::with_capacity(n * (n + 1));
    for i in 0..n {
        pairs.extend((0..n).map(|j| (i, j)));
        pairs.push((i, n + i));
    }
    let preds = denoiser.forward_pairs(g, &bd.ids, xt, te, c, &pairs)?;
    let gt = g.constant(batch.eps.clone());
    let all = g.concat(&[preds, gt], 0)?;
    let w = n + 1;
    let mut anchors = Vec::with_capacity(n * w);
    let mut cands = Vec::with_capacity(n * w);
    for i in 0..n {
        anchors.extend(std::iter::repeat_n(i * w + i, w));
        cands.push(i * w + n);
        cands.push(n * w + i);
        cands.extend((0..n).filter(|&j| j != i).map(|j| i * w + j));
    }
    let a = g.gather_rows(all, &anchors)?;
    let b = g.gather_rows(all, &cands)?;
    let sims = g.cosine(a, b)?;
    let sims = g.reshape(sims, &[n, w])?;
    dcr_from_sims(g, sims, tau)
}

/// Loss on a fixed batch with every component frozen.
pub fn heldout_dcr_loss(encoder: &Encoder, projector: &Projector, denoiser: &Denoiser, batch: &TrainBatch, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let be = encoder.bind(&mut g, false);
    let bp = projector.bind(&mut g, false);
    let bd = denoiser.bind(&mut g, false);
    let l = dcr_batch_loss(&mut g, encoder, &be, projector, &bp, denoiser, &bd, batch, tau)?;
    g.value(l).item()
}

struct Plan {
    stage: Stage,
    steps: usize,
    lr_encoder: Option<f64>,
    lr_projector: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn dcr_loop(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    sched: &DiffusionSchedule,
    denoiser: &Denoiser,
    encoder: &mut Encoder,
    projector: &mut Projector,
    plan: Plan,
    log: &mut RunLog,
) -> Result<()> {
    let stage = plan.stage;
    let params = |m: &dyn Module| AdamW::new(&m.params().iter().map(|p| p.1).collect::<Vec<_>>(), cfg.weight_decay);
    let mut opt_e = params(encoder);
    let mut opt_p = params(projector);
    let eval = heldout_batch(cfg, heldout, sched)?;
    let log_eval = |log: &mut RunLog, step: usize, e: &Encoder, p: &Projector| -> Result<()> {
        let v = heldout_dcr_loss(e, p, denoiser, &eval, cfg.tau)?;
        let metrics: BTreeMap<String, f64> = [("heldout_dcr".to_string(), v)].into();
        log.push(Record::Eval(EvalRecord {
            stage: stage.name().into(),
            step,
            metrics,
        }))
    };
    log_eval(log, 0, encoder, projector)?;
    let mut stream = BatchStream::new(train.len(), cfg.batch_size, cfg.seed ^ stage.tag())?;
    for step in 1..=plan.steps {
        let idx = stream.next_batch();
        let mut rng = step_rng(cfg.seed, stage.tag(), step as u64);
        let batch = TrainBatch::draw(train, &idx, sched, &cfg.augment, &mut rng)?;
        let mut g = Graph::new();
        let be = encoder.bind(&mut g, plan.lr_encoder.is_some());
        let bp = projector.bind(&mut g, plan.lr_projector.is_some());
        let bd = denoiser.bind(&mut g, false);
        let loss = dcr_batch_loss(&mut g, encoder, &be, projector, &bp, denoiser, &bd, &batch, cfg.tau)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Diverged {
                stage: stage.name().into(),
                step,
                loss: lv,
            });
        }
        g.backward(loss)?;
        if let Some(lr) = plan.lr_encoder {
            let names = encoder.param_names();
            opt_e.step(&mut encoder.params_mut(), &names, &be.grads(&g), lr)?;
        }
        if let Some(lr) = plan.lr_projector {
            let names = projector.param_names();
            opt_p.step(&mut projector.params_mut(), &names, &bp.grads(&g), lr)?;
        }
        log.push(Record::Step(StepRecord {
            stage: stage.name().into(),
            step,
            loss: lv,
            l_con: None,
            l_rec: None,
            grad_cos: None,
            timesteps: batch.ts.clone(),
        }))?;
        if step % 100 == 0 || step == plan.steps {
            log::info!("{} step {step}/{} loss {lv:.5}", stage.name(), plan.steps);
        }
        if should_eval(cfg, step, plan.steps) {
            log_eval(log, step, encoder, projector)?;
        }
    }
    Ok(())
}

/// Projector alignment: encoder and denoiser frozen, projector trained.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    sched: &DiffusionSchedule,
    denoiser: &Denoiser,
    encoder: &Encoder,
    projector: &mut Projector,
    log: &mut RunLog,
) -> Result<()> {
    let mut enc = encoder.clone();
    let plan = Plan {
        stage: Stage::Stage1,
        steps: cfg.steps.stage1,
        lr_encoder: None,
        lr_projector: Some(cfg.lr.stage1),
    };
    dcr_loop(cfg, train, heldout, sched, denoiser, &mut enc, projector, plan, log)
}

/// Encoder enhancement: projector and denoiser frozen, encoder trained.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    sched: &DiffusionSchedule,
    denoiser: &Denoiser,
    encoder: &mut Encoder,
    projector: &Projector,
    log: &mut RunLog,
) -> Result<()> {
    let mut proj = projector.clone();
    let plan = Plan {
        stage: Stage::Stage2,
        steps: cfg.steps.stage2,
        lr_encoder: Some(cfg.lr.stage2),
        lr_projector: None,
    };
    dcr_loop(cfg, train, heldout, sched, denoiser, encoder, &mut proj, plan, log)
}

/// Encoder and projector trained together for the joint budget, each at its
/// two-stage learning rate.
#[allow(clippy::too_many_arguments)]
pub fn train_end_to_end(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    sched: &DiffusionSchedule,
    denoiser: &Denoiser,
    encoder: &mut Encoder,
    projector: &mut Projector,
    log: &mut RunLog,
) -> Result<()> {
    let plan = Plan {
        stage: Stage::EndToEnd,
        steps: cfg.steps.joint_steps(),
        lr_encoder: Some(cfg.lr.stage2),
        lr_projector: Some(cfg.lr.stage1),
    };
    dcr_loop(cfg, train, heldout, sched, denoiser, encoder, projector, plan, log)
}
