use std::collections::BTreeMap;

use super::{heldout_batch, should_eval, BatchStream, EvalRecord, Record, RunLog, Stage, StepRecord, TrainBatch, TrainConfig};
use crate::autodiff::Graph;
use crate::datasets::Dataset;
use crate::diffusion::{Denoiser, DiffusionSchedule};
use crate::encoder::{Encoder, Projector};
use crate::error::{invalid, Error, Result};
use crate::model::{step_rng, stream_rng, tags};
use crate::nn::Module;
use crate::optim::AdamW;

/// Per-element mean squared noise-prediction error on a batch, with the
/// condition computed from the clean images.
pub fn recon_mse(encoder: &Encoder, projector: &Projector, denoiser: &Denoiser, batch: &TrainBatch) -> Result<f64> {
    let z = encoder.encode(&batch.x0)?;
    let c = projector.project(&z)?;
    let pred = denoiser.predict_noise(&batch.x_t, &c, &batch.ts)?;
    crate::losses::reconstruction_loss(pred.data(), batch.eps.data())
}

/// Trains the denoiser with plain noise-prediction MSE, conditioned through
/// the frozen (random) encoder and a reference projector trained alongside.
/// Returns `(denoiser, reference projector)`.
pub fn pretrain_denoiser(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    sched: &DiffusionSchedule,
    encoder: &Encoder,
    log: &mut RunLog,
) -> Result<(Denoiser, Projector)> {
    let total = cfg.steps.stage0;
    if total == 0 {
        return Err(invalid("stage0 needs at least one step"));
    }
    let d = train.dims.len();
    let mut den = Denoiser::new(
        d,
        cfg.model.projector.d_c,
        sched.steps,
        &cfg.model.denoiser,
        &mut stream_rng(cfg.seed, tags::DENOISER_INIT),
    );
    let mut proj = Projector::new(
        encoder.d_z(),
        &cfg.model.projector,
        &mut stream_rng(cfg.seed, tags::REFERENCE_PROJECTOR_INIT),
    );
    let mut opt_d = AdamW::new(&den.params().iter().map(|p| p.1).collect::<Vec<_>>(), cfg.weight_decay);
    let mut opt_p = AdamW::new(&proj.params().iter().map(|p| p.1).collect::<Vec<_>>(), cfg.weight_decay);
    let eval = heldout_batch(cfg, heldout, sched)?;
    let mut stream = BatchStream::new(train.len(), cfg.batch_size, cfg.seed ^ Stage::Stage0.tag())?;
    let stage = Stage::Stage0;
    log_eval(log, stage, 0, recon_mse(encoder, &proj, &den, &eval)?)?;
    for step in 1..=total {
        let idx = stream.next_batch();
        let mut rng = step_rng(cfg.seed, stage.tag(), step as u64);
        let batch = TrainBatch::draw(train, &idx, sched, &cfg.augment, &mut rng)?;
        let mut g = Graph::new();
        let be = encoder.bind(&mut g, false);
        let bp = proj.bind(&mut g, true);
        let bd = den.bind(&mut g, true);
        let x = g.constant(batch.x0.clone());
        let z = encoder.forward(&mut g, &be.ids, x)?;
        let c = proj.forward(&mut g, &bp.ids, z)?;
        let xt = g.constant(batch.x_t.clone());
        let te = g.constant(den.time_embeddings(&batch.ts)?);
        let pred = den.forward(&mut g, &bd.ids, xt, te, c)?;
        let target = g.constant(batch.eps.clone());
        let loss = g.mse(pred, target)?;
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Diverged {
                stage: stage.name().into(),
                step,
                loss: lv,
            });
        }
        g.backward(loss)?;
        let names = den.param_names();
        opt_d.step(&mut den.params_mut(), &names, &bd.grads(&g), cfg.lr.stage0)?;
        let names = proj.param_names();
        opt_p.step(&mut proj.params_mut(), &names, &bp.grads(&g), cfg.lr.stage0)?;
        log.push(Record::Step(StepRecord {
            stage: stage.name().into(),
            step,
            loss: lv,
            l_con: None,
            l_rec: None,
            grad_cos: None,
            timesteps: batch.ts.clone(),
        }))?;
        if step % 100 == 0 || step == total {
            log::info!("stage0 step {step}/{total} mse {lv:.5}");
        }
        if should_eval(cfg, step, total) {
            log_eval(log, stage, step, recon_mse(encoder, &proj, &den, &eval)?)?;
        }
    }
    Ok((den, proj))
}

fn log_eval(log: &mut RunLog, stage: Stage, step: usize, mse: f64) -> Result<()> {
    let metrics: BTreeMap<String, f64> = [("heldout_recon_mse".to_string(), mse)].into();
    log.push(Record::Eval(EvalRecord {
        stage: stage.name().into(),
        step,
        metrics,
    }))
}
