use std::fs;
use std::path::{Path, PathBuf};

use dcr_core::datasets::{write_idx, Dataset, ImageDims};
use dcr_core::evaluation::{evaluate_encoder, lemma1_sweep, sandwich_sweep, theorem1_sweep, EvalSummary};
use dcr_core::model::{Checkpoint, CheckpointMeta, Model};
use dcr_core::training::{
    initial_model, run_end_to_end_from, run_naive_from, run_stage0, run_two_stage, Record, RunLog, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{DataSource, RunConfig};
use crate::plot::{render_svg, series_tsv, ConflictSeries};
use crate::rundir::{create_run_dir, lock_output_dir};
use crate::{invalid, runtime, Failure, Mode};

/// Tolerance on the variance identity.
pub const LEMMA1_TOL: f64 = 1e-9;

pub const EVAL_COLUMNS: [&str; 6] = ["nmi", "acc", "ari", "s_inner", "s_inter", "recon_mse"];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{what} {} not found", path.display())))
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn dims_str(d: ImageDims) -> String {
    format!("{}x{}x{}", d.height, d.width, d.channels)
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(invalid("gen-data needs `data.source = \"synthetic\"`"));
    };
    cfg.validate()?;
    let data = cfg.load_data()?;
    let _lock = lock_output_dir(&cfg.out)?;
    let (images, labels) = (cfg.out.join("images.idx"), cfg.out.join("labels.idx"));
    write_idx(&data, &images, &labels)?;
    let manifest = json!({
        "generator": "synthetic",
        "spec": spec,
        "seed": spec.seed,
        "images": "images.idx",
        "labels": "labels.idx",
        "count": data.len(),
        "num_classes": data.num_classes,
        "dims": data.dims,
    });
    write(&cfg.out.join("manifest.json"), format!("{:#}\n", manifest))?;
    log::info!("wrote {} images of {} classes to {}", data.len(), data.num_classes, cfg.out.display());
    Ok(())
}

fn save(dir: &Path, stage: &str, model: &Model, dims: ImageDims, t: &TrainConfig) -> Result<(), Failure> {
    let meta = CheckpointMeta {
        stage: stage.into(),
        dims,
        diffusion_steps: t.diffusion.steps,
        model: t.model,
    };
    let path = dir.join(format!("{stage}.ckpt"));
    model.to_checkpoint(meta).save(&path)?;
    log::info!("saved {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct HeaderConfig<'a> {
    data: &'a DataSource,
    train: &'a TrainConfig,
}

/// Runs `mode` and returns the run directory.
pub fn train(cfg: &RunConfig, mode: Mode) -> Result<PathBuf, Failure> {
    cfg.validate()?;
    let t = &cfg.train;
    let data = cfg.load_data()?;
    let (train, held) = data.split_holdout(t.holdout_every)?;
    t.augment.validate(train.dims)?;
    if t.batch_size > train.len() {
        return Err(invalid(format!(
            "batch_size {} exceeds the training split ({} images)",
            t.batch_size,
            train.len()
        )));
    }
    let (dir, _lock) = create_run_dir(&cfg.out, t.seed)?;
    log::info!("run directory {}", dir.display());
    write(&dir.join("config.toml"), cfg.to_toml())?;
    let mut log = RunLog::create(&dir.join("runlog.jsonl"))?;
    let mode_name = match mode {
        Mode::Dcr => "dcr",
        Mode::Naive => "naive",
        Mode::EndToEnd => "end_to_end",
    };
    let config = serde_json::to_value(HeaderConfig { data: &cfg.data, train: t }).map_err(|e| runtime(e.to_string()))?;
    log.push(Record::Header {
        mode: mode_name.into(),
        seed: t.seed,
        config,
    })?;
    let stage0 = run_stage0(t, &train, &held, &mut log)?;
    save(&dir, "stage0", &stage0, train.dims, t)?;
    match mode {
        Mode::Dcr => {
            let (s1, s2) = run_two_stage(t, &train, &held, &stage0, &mut log)?;
            save(&dir, "stage1", &s1, train.dims, t)?;
            save(&dir, "stage2", &s2, train.dims, t)?;
        }
        Mode::Naive => {
            let m = run_naive_from(t, &train, &held, &stage0, &mut log)?;
            save(&dir, "naive", &m, train.dims, t)?;
        }
        Mode::EndToEnd => {
            let m = run_end_to_end_from(t, &train, &held, &stage0, &mut log)?;
            save(&dir, "end_to_end", &m, train.dims, t)?;
        }
    }
    Ok(dir)
}

/// Loads a checkpoint and checks it against the dataset and schedule.
fn load_model(path: &Path, data: &Dataset, t: &TrainConfig) -> Result<(Model, CheckpointMeta), Failure> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.dims != data.dims {
        return Err(invalid(format!(
            "checkpoint {} was trained on {} images ({} values) but the dataset has {} images ({} values)",
            path.display(),
            dims_str(ck.meta.dims),
            ck.meta.dims.len(),
            dims_str(data.dims),
            data.dims.len()
        )));
    }
    if ck.meta.diffusion_steps != t.diffusion.steps {
        return Err(invalid(format!(
            "checkpoint {} uses {} diffusion steps but the config has {}",
            path.display(),
            ck.meta.diffusion_steps,
            t.diffusion.steps
        )));
    }
    Ok((Model::from_checkpoint(&ck)?, ck.meta))
}

pub fn eval_csv(s: &EvalSummary) -> String {
    format!(
        "{}\n{},{},{},{},{},{}\n",
        EVAL_COLUMNS.join(","),
        s.nmi,
        s.acc,
        s.ari,
        s.s_inner,
        s.s_inter,
        s.recon_mse
    )
}

/// Metrics of a checkpoint on the held-out split; reports go to `out` or
/// next to the checkpoint.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<EvalSummary, Failure> {
    require_file(checkpoint, "checkpoint")?;
    cfg.validate()?;
    let t = &cfg.train;
    let data = cfg.load_data()?;
    let (model, meta) = load_model(checkpoint, &data, t)?;
    let (_, held) = data.split_holdout(t.holdout_every)?;
    let sched = t.diffusion.build()?;
    let summary = evaluate_encoder(&model.encoder, &model.projector, &model.denoiser, &held, &sched, t.seed)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| parent_dir(checkpoint));
    let _lock = lock_output_dir(&dir)?;
    let csv = eval_csv(&summary);
    write(&dir.join("eval.csv"), &csv)?;
    let record = json!({
        "checkpoint": checkpoint,
        "stage": meta.stage,
        "split": "heldout",
        "images": held.len(),
        "seed": t.seed,
        "metrics": summary,
    });
    write(&dir.join("eval.jsonl"), format!("{record}\n"))?;
    print!("{csv}");
    Ok(summary)
}

/// Runs the three sweeps; any violation is an error listing the instances.
pub fn verify(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(p) = checkpoint {
        require_file(p, "checkpoint")?;
    }
    cfg.validate()?;
    let t = &cfg.train;
    let v = &cfg.verify;
    let data = cfg.load_data()?;
    let model = match checkpoint {
        Some(p) => load_model(p, &data, t)?.0,
        None => initial_model(t, &data),
    };
    let sched = t.diffusion.build()?;
    let mut violations = Vec::new();

    let lemma = lemma1_sweep(v.lemma1_sets, v.lemma1_max_n, v.lemma1_dim, t.seed)?;
    let lemma_pass = lemma.max_abs_diff < LEMMA1_TOL;
    println!(
        "variance identity: {} sets, max |lhs - rhs| = {:.3e} (n = {}, dim = {}) {}",
        lemma.sets,
        lemma.max_abs_diff,
        lemma.worst.0,
        lemma.worst.1,
        if lemma_pass { "ok" } else { "VIOLATED" }
    );
    if !lemma_pass {
        violations.push(format!("variance identity: max |lhs - rhs| = {:e}", lemma.max_abs_diff));
    }

    let t1 = theorem1_sweep(&model, &data, &sched, v.theorem1_batches, v.theorem1_batch_size, t.seed)?;
    println!("scatter transfer: {} batches", t1.batches.len());
    println!("  batch     t  size classes            m            L        kappa          eta  inner_margin  inter_margin");
    for b in &t1.batches {
        println!(
            "  {:>5} {:>5} {:>5} {:>7} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e} {:>13.4e} {:>13.4e}{}",
            b.index,
            b.t,
            b.size,
            b.classes,
            b.m,
            b.l,
            b.kappa,
            b.eta,
            b.inner_margin,
            b.inter_margin,
            if b.pass { "" } else { "  VIOLATED" }
        );
        if !b.pass {
            violations.push(format!(
                "scatter transfer batch {}: inner margin {:e}, inter margin {:e}",
                b.index, b.inner_margin, b.inter_margin
            ));
        }
    }

    let sw = sandwich_sweep(v.sandwich_instances, t.seed)?;
    println!(
        "sandwich: {} instances ({} draws rejected), {} violations, min lower margin {:.3e}, min upper margin {:.3e}",
        sw.checked,
        sw.rejected,
        sw.violations.len(),
        sw.min_lower_margin,
        sw.min_upper_margin
    );
    for (i, c) in &sw.violations {
        violations.push(format!(
            "sandwich instance {i}: lower {} <= loss {} <= upper {} fails",
            c.lower, c.loss, c.upper
        ));
    }

    let dir = match (out, checkpoint) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(p)) => parent_dir(p),
        (None, None) => cfg.out.clone(),
    };
    let _lock = lock_output_dir(&dir)?;
    let report = json!({
        "lemma1": { "report": lemma, "tolerance": LEMMA1_TOL, "pass": lemma_pass },
        "theorem1": t1,
        "sandwich": sw,
        "violations": violations,
    });
    write(&dir.join("verify.json"), format!("{:#}\n", report))?;
    if violations.is_empty() {
        println!("no violations");
        Ok(())
    } else {
        Err(Failure::Violations(format!(
            "{} violation(s):\n{}",
            violations.len(),
            violations.join("\n")
        )))
    }
}

/// Writes `l_con.tsv`, `l_rec.tsv`, `grad_cos.tsv` and `conflict.svg`.
pub fn plot(runlog: &Path, out: Option<&Path>) -> Result<(), Failure> {
    require_file(runlog, "run log")?;
    let text = fs::read_to_string(runlog).map_err(|e| invalid(format!("reading {}: {e}", runlog.display())))?;
    let records = RunLog::parse(&text).map_err(|e| invalid(format!("{}: {e}", runlog.display())))?;
    let series = ConflictSeries::from_records(&records);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| parent_dir(runlog));
    let _lock = lock_output_dir(&dir)?;
    for (name, s) in series.panels() {
        write(&dir.join(format!("{name}.tsv")), series_tsv(s))?;
    }
    write(&dir.join("conflict.svg"), render_svg(&series))?;
    println!(
        "{} points per series written to {}",
        series.grad_cos.len().max(series.l_con.len()),
        dir.display()
    );
    Ok(())
}
