use dcr_core::autodiff::Graph;
use dcr_core::datasets::{generate_synthetic, Dataset};
use dcr_core::diffusion::{DenoiserConfig, ScheduleConfig};
use dcr_core::encoder::{EncoderConfig, ProjectorConfig};
use dcr_core::losses::{info_nce_graph, positive_groups, LossWeights};
use dcr_core::model::{CheckpointMeta, ModelConfig};
use dcr_core::nn::Module;
use dcr_core::training::*;

fn tiny() -> (TrainConfig, Dataset, Dataset) {
    let data = generate_synthetic(4, 16, 8, 8, 5).unwrap();
    let (train, held) = data.split_holdout(4).unwrap();
    let mut cfg = TrainConfig {
        seed: 11,
        batch_size: 6,
        diffusion: ScheduleConfig { steps: 20, ..Default::default() },
        model: ModelConfig {
            encoder: EncoderConfig { hidden: 24, hidden_layers: 1, d_z: 8 },
            projector: ProjectorConfig { d_c: 8, ..Default::default() },
            denoiser: DenoiserConfig { hidden: 32, time_dim: 8 },
        },
        ..Default::default()
    };
    cfg.steps = StageSteps { stage0: 40, stage1: 8, stage2: 8, joint: None };
    cfg.lr.stage1 = 1e-3;
    cfg.lr.stage2 = 1e-3;
    (cfg, train, held)
}

#[test]
fn stages_leave_frozen_parts_untouched() {
    let (cfg, train, held) = tiny();
    let sched = cfg.diffusion.build().unwrap();
    let mut log = RunLog::in_memory();
    let s0 = run_stage0(&cfg, &train, &held, &mut log).unwrap();
    let fresh = initial_model(&cfg, &train);
    assert_eq!(s0.encoder.param_bytes(), fresh.encoder.param_bytes());

    let mut m = s0.clone();
    m.projector = fresh_projector(&cfg);
    let (enc, den, proj) = (m.encoder.param_bytes(), m.denoiser.param_bytes(), m.projector.param_bytes());
    train_stage1(&cfg, &train, &held, &sched, &m.denoiser, &m.encoder, &mut m.projector, &mut log).unwrap();
    assert_eq!(m.encoder.param_bytes(), enc);
    assert_eq!(m.denoiser.param_bytes(), den);
    assert_ne!(m.projector.param_bytes(), proj);

    let proj = m.projector.param_bytes();
    train_stage2(&cfg, &train, &held, &sched, &m.denoiser, &mut m.encoder, &m.projector, &mut log).unwrap();
    assert_eq!(m.projector.param_bytes(), proj);
    assert_eq!(m.denoiser.param_bytes(), den);
    assert_ne!(m.encoder.param_bytes(), enc);

    let nv = run_naive_from(&cfg, &train, &held, &s0, &mut log).unwrap();
    assert_eq!(nv.denoiser.param_bytes(), den);
    let mut frozen_proj = cfg.clone();
    frozen_proj.naive_trains_projector = false;
    let nv = run_naive_from(&frozen_proj, &train, &held, &s0, &mut log).unwrap();
    assert_eq!(nv.projector.param_bytes(), fresh_projector(&cfg).param_bytes());
}

#[test]
fn pipeline_is_bit_reproducible() {
    let (cfg, train, held) = tiny();
    let run = || {
        let mut log = RunLog::in_memory();
        let out = run_dcr(&cfg, &train, &held, &mut log).unwrap();
        let bytes: Vec<Vec<u8>> = [&out.stage0, &out.stage1, &out.stage2]
            .iter()
            .map(|m| {
                let meta = CheckpointMeta {
                    stage: "x".into(),
                    dims: train.dims,
                    diffusion_steps: cfg.diffusion.steps,
                    model: cfg.model,
                };
                m.to_checkpoint(meta).to_bytes().unwrap()
            })
            .collect();
        (log.records().to_vec(), bytes)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed += 1;
    let mut log = RunLog::in_memory();
    run_dcr(&other, &train, &held, &mut log).unwrap();
    assert_ne!(log.records(), &a.0[..]);
}

#[test]
fn pretraining_lowers_heldout_error() {
    let (mut cfg, train, held) = tiny();
    cfg.steps.stage0 = 400;
    let mut log = RunLog::in_memory();
    run_stage0(&cfg, &train, &held, &mut log).unwrap();
    let evals: Vec<f64> = log.evals().map(|e| e.metrics["heldout_recon_mse"]).collect();
    assert!(evals.last().unwrap() < &evals[0], "{evals:?}");
}

#[test]
fn projector_alignment_lowers_heldout_loss() {
    let (mut cfg, train, held) = tiny();
    cfg.steps.stage1 = 60;
    let mut log = RunLog::in_memory();
    let s0 = run_stage0(&cfg, &train, &held, &mut log).unwrap();
    let mut log = RunLog::in_memory();
    run_two_stage(&cfg, &train, &held, &s0, &mut log).unwrap();
    let s1: Vec<f64> = log.evals().filter(|e| e.stage == "stage1").map(|e| e.metrics["heldout_dcr"]).collect();
    assert!(s1.last().unwrap() < &s1[0], "{s1:?}");
}

fn naive_batch(cfg: &TrainConfig, train: &Dataset) -> TrainBatch {
    let sched = cfg.diffusion.build().unwrap();
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    let mut rng = dcr_core::model::step_rng(3, 13, 1);
    TrainBatch::draw(train, &idx, &sched, &cfg.augment, &mut rng).unwrap()
}

#[test]
fn contrastive_only_weights_give_the_pure_contrastive_update() {
    let (mut cfg, train, _) = tiny();
    cfg.loss_weights = LossWeights { lambda_con: 1.0, lambda_rec: 0.0 };
    let m = initial_model(&cfg, &train);
    let batch = naive_batch(&cfg, &train);
    let ng = naive_step_gradients(&cfg, &m.encoder, &m.projector, &m.denoiser, &batch).unwrap();

    let mut g = Graph::new();
    let be = m.encoder.bind(&mut g, true);
    let x = g.constant(batch.both_views());
    let z = m.encoder.forward(&mut g, &be.ids, x).unwrap();
    let groups = positive_groups(cfg.positive_mode, &batch.labels);
    let l = info_nce_graph(&mut g, z, &groups, cfg.tau).unwrap();
    g.backward(l).unwrap();
    assert_eq!(ng.encoder, be.grads(&g));
    assert!(ng.projector.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn measuring_conflict_does_not_change_the_update() {
    let (mut cfg, train, _) = tiny();
    cfg.loss_weights = LossWeights { lambda_con: 0.7, lambda_rec: 1.3 };
    let m = initial_model(&cfg, &train);
    let batch = naive_batch(&cfg, &train);
    let ng = naive_step_gradients(&cfg, &m.encoder, &m.projector, &m.denoiser, &batch).unwrap();
    assert!((-1.0..=1.0).contains(&ng.cos));

    // one backward pass through the summed objective
    let mut g = Graph::new();
    let be = m.encoder.bind(&mut g, true);
    let bp = m.projector.bind(&mut g, true);
    let bd = m.denoiser.bind(&mut g, false);
    let x = g.constant(batch.both_views());
    let z = m.encoder.forward(&mut g, &be.ids, x).unwrap();
    let groups = positive_groups(cfg.positive_mode, &batch.labels);
    let lc = info_nce_graph(&mut g, z, &groups, cfg.tau).unwrap();
    let clean: Vec<usize> = (0..batch.len()).collect();
    let z0 = g.gather_rows(z, &clean).unwrap();
    let c = m.projector.forward(&mut g, &bp.ids, z0).unwrap();
    let xt = g.constant(batch.x_t.clone());
    let te = g.constant(m.denoiser.time_embeddings(&batch.ts).unwrap());
    let pred = m.denoiser.forward(&mut g, &bd.ids, xt, te, c).unwrap();
    let eps = g.constant(batch.eps.clone());
    let lr = g.mse(pred, eps).unwrap();
    let a = g.scale(lc, 0.7).unwrap();
    let b = g.scale(lr, 1.3).unwrap();
    let total = g.add(a, b).unwrap();
    g.backward(total).unwrap();
    for (x, y) in ng.encoder.iter().chain(&ng.projector).zip(be.grads(&g).iter().chain(&bp.grads(&g))) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{p} vs {q}");
        }
    }
}

#[test]
fn naive_run_logs_a_cosine_every_step() {
    let (mut cfg, train, held) = tiny();
    cfg.steps.joint = Some(30);
    let mut log = RunLog::in_memory();
    let s0 = run_stage0(&cfg, &train, &held, &mut log).unwrap();
    let mut log = RunLog::in_memory();
    run_naive_from(&cfg, &train, &held, &s0, &mut log).unwrap();
    let steps: Vec<&StepRecord> = log.steps().collect();
    assert_eq!(steps.len(), 30);
    assert!(steps.iter().all(|s| s.grad_cos.is_some_and(|c| (-1.0..=1.0).contains(&c))));
    let Some(Record::Summary { metrics, .. }) = log.records().last() else { panic!("no summary") };
    let negative = steps.iter().filter(|s| s.grad_cos.unwrap() < 0.0).count() as f64 / 30.0;
    assert_eq!(metrics["negative_cos_fraction"], negative);
}

#[test]
fn end_to_end_trains_both_groups() {
    let (cfg, train, held) = tiny();
    let mut log = RunLog::in_memory();
    let s0 = run_stage0(&cfg, &train, &held, &mut log).unwrap();
    let e2e = run_end_to_end_from(&cfg, &train, &held, &s0, &mut log).unwrap();
    assert_ne!(e2e.encoder.param_bytes(), s0.encoder.param_bytes());
    assert_ne!(e2e.projector.param_bytes(), fresh_projector(&cfg).param_bytes());
    assert_eq!(e2e.denoiser.param_bytes(), s0.denoiser.param_bytes());
    assert_eq!(log.steps().filter(|s| s.stage == "end_to_end").count(), cfg.steps.joint_steps());
}

#[test]
fn oversized_batch_is_rejected() {
    let (mut cfg, train, held) = tiny();
    cfg.batch_size = train.len() + 1;
    let mut log = RunLog::in_memory();
    assert!(run_stage0(&cfg, &train, &held, &mut log).is_err());
    assert!(log.records().is_empty());
}
