use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use dcr_cli::RunConfig;
use dcr_core::training::{Record, RunLog};

const SMALL: &str = r#"
[data]
source = "synthetic"
classes = 4
per_class = 16
height = 8
width = 8

[train]
batch_size = 6

[train.steps]
stage0 = 20
stage1 = 6
stage2 = 6

[train.diffusion]
steps = 20

[train.model.encoder]
hidden = 32

[verify]
lemma1_sets = 5
lemma1_max_n = 60
theorem1_batches = 3
theorem1_batch_size = 8
sandwich_instances = 40
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(env.path("small.toml"), SMALL).unwrap();
        env
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn dcr(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_dcr"))
            .args(args)
            .current_dir(self.dir.path())
            .env("DCR_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.dcr(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Trains and returns the run directory printed on the last stdout line.
    fn train(&self, mode: &str, extra: &[&str]) -> PathBuf {
        let mut args = vec!["--config", "small.toml", "train", "--mode", mode];
        args.extend_from_slice(extra);
        let out = self.ok(&args);
        self.dir.path().join(out.lines().last().unwrap())
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_data_writes_files_deterministically() {
    let env = Env::new();
    env.ok(&["--config", "small.toml", "--out", "a", "gen-data"]);
    env.ok(&["--config", "small.toml", "--out", "b", "gen-data"]);
    for f in ["images.idx", "labels.idx", "manifest.json"] {
        let (a, b) = (fs::read(env.path("a").join(f)).unwrap(), fs::read(env.path("b").join(f)).unwrap());
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(env.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["count"], 64);

    // the written files train like the generator's output
    let cfg = SMALL.replace(
        "source = \"synthetic\"\nclasses = 4\nper_class = 16\nheight = 8\nwidth = 8",
        "source = \"idx\"\nimages = \"a/images.idx\"\nlabels = \"a/labels.idx\"",
    );
    fs::write(env.path("idx.toml"), cfg).unwrap();
    env.ok(&["--config", "idx.toml", "train", "--mode", "naive"]);
}

#[test]
fn single_class_dataset_is_rejected() {
    let env = Env::new();
    fs::write(env.path("one.toml"), SMALL.replace("classes = 4", "classes = 1")).unwrap();
    let out = env.dcr(&["--config", "one.toml", "--out", "d", "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("at least 2 classes"));
    assert!(!env.path("d").exists());
}

#[test]
fn bad_inputs_use_the_validation_code() {
    let env = Env::new();
    assert_eq!(code(&env.dcr(&["--config", "missing.toml", "show-config"])), 2);
    assert_eq!(code(&env.dcr(&["train", "--mode", "sideways"])), 2);
    fs::write(env.path("typo.toml"), "[train]\nbatchsize = 3\n").unwrap();
    assert_eq!(code(&env.dcr(&["--config", "typo.toml", "show-config"])), 2);
    fs::write(env.path("idx.toml"), "[data]\nsource = \"idx\"\nimages = \"nope\"\nlabels = \"nope\"\n").unwrap();
    let out = env.dcr(&["--config", "idx.toml", "train", "--mode", "dcr"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not found"));
    assert!(!env.path("runs").exists());
}

#[test]
fn flags_override_the_config_file() {
    let env = Env::new();
    let text = env.ok(&["--config", "small.toml", "--seed", "9", "--out", "elsewhere", "show-config"]);
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(cfg.train.seed, 9);
    assert_eq!(cfg.out, PathBuf::from("elsewhere"));
    assert_eq!(cfg.train.batch_size, 6);
    // printed config is itself a fixed point
    fs::write(env.path("again.toml"), &text).unwrap();
    assert_eq!(env.ok(&["--config", "again.toml", "show-config"]), text);
}

#[test]
fn dcr_mode_writes_three_checkpoints_and_a_log() {
    let env = Env::new();
    let run = env.train("dcr", &["--seed", "4"]);
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("seed4"));
    for f in ["stage0.ckpt", "stage1.ckpt", "stage2.ckpt", "config.toml", "runlog.jsonl"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert!(!run.join(".lock").exists());
    let records = RunLog::read(&run.join("runlog.jsonl")).unwrap();
    let Record::Header { mode, seed, .. } = &records[0] else { panic!("no header") };
    assert_eq!((mode.as_str(), *seed), ("dcr", 4));
    let stored = RunConfig::parse(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(stored.train.seed, 4);
}

#[test]
fn naive_mode_logs_the_conflict_cosine() {
    let env = Env::new();
    let run = env.train("naive", &[]);
    assert!(run.join("naive.ckpt").is_file());
    let log = RunLog::from_records(RunLog::read(&run.join("runlog.jsonl")).unwrap());
    let naive: Vec<_> = log.steps().filter(|s| s.stage == "naive").collect();
    assert_eq!(naive.len(), 12);
    assert!(naive.iter().all(|s| s.grad_cos.is_some() && s.l_con.is_some() && s.l_rec.is_some()));
}

#[test]
fn divergence_exits_with_runtime_code_after_flushing() {
    let env = Env::new();
    fs::write(env.path("hot.toml"), SMALL.replace("[train.steps]", "[train.lr]\nstage0 = 1e300\n\n[train.steps]")).unwrap();
    let out = env.dcr(&["--config", "hot.toml", "train", "--mode", "dcr"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let run = fs::read_dir(env.path("runs")).unwrap().next().unwrap().unwrap().path();
    let records = RunLog::read(&run.join("runlog.jsonl")).unwrap();
    assert!(matches!(records[0], Record::Header { .. }));
    assert!(!run.join("stage1.ckpt").exists());
}

#[test]
fn killed_run_leaves_a_parseable_log() {
    let env = Env::new();
    fs::write(env.path("long.toml"), SMALL.replace("stage0 = 20", "stage0 = 1000000")).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dcr"))
        .args(["--config", "long.toml", "train", "--mode", "dcr"])
        .current_dir(env.dir.path())
        .env("DCR_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let log_path = loop {
        let found = fs::read_dir(env.path("runs"))
            .ok()
            .and_then(|mut d| d.next())
            .map(|e| e.unwrap().path().join("runlog.jsonl"));
        if let Some(p) = found {
            if fs::read_to_string(&p).map(|t| t.lines().count() > 50).unwrap_or(false) {
                break p;
            }
        }
        assert!(start.elapsed() < Duration::from_secs(60), "training never produced a log");
        std::thread::sleep(Duration::from_millis(20));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    let records = RunLog::read(&log_path).unwrap();
    assert!(records.len() > 50);
    assert!(matches!(records[0], Record::Header { .. }));
    // a record cut off mid-write is dropped, not an error
    let mut text = fs::read_to_string(&log_path).unwrap();
    text.push_str("{\"kind\":\"step\",\"stage\":\"sta");
    assert_eq!(RunLog::parse(&text).unwrap().len(), records.len());
}

fn dcr_run(env: &Env) -> PathBuf {
    env.train("dcr", &[])
}

#[test]
fn eval_reports_are_deterministic_with_fixed_columns() {
    let env = Env::new();
    let run = dcr_run(&env);
    let ckpt = run.join("stage2.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let first = env.ok(&["--config", "small.toml", "eval", "--checkpoint", ckpt]);
    let csv = fs::read_to_string(run.join("eval.csv")).unwrap();
    let jsonl = fs::read_to_string(run.join("eval.jsonl")).unwrap();
    let second = env.ok(&["--config", "small.toml", "eval", "--checkpoint", ckpt]);
    assert_eq!(first, second);
    assert_eq!(csv, fs::read_to_string(run.join("eval.csv")).unwrap());
    assert_eq!(jsonl, fs::read_to_string(run.join("eval.jsonl")).unwrap());

    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "nmi,acc,ari,s_inner,s_inter,recon_mse");
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 6);
    assert!(values.iter().all(|v| v.is_finite()));
    let rec: serde_json::Value = serde_json::from_str(jsonl.trim()).unwrap();
    assert_eq!(rec["metrics"]["nmi"].as_f64().unwrap(), values[0]);
    assert_eq!(rec["stage"], "stage2");

    // --out redirects the report
    env.ok(&["--config", "small.toml", "--out", "reports", "eval", "--checkpoint", ckpt]);
    assert_eq!(fs::read_to_string(env.path("reports/eval.csv")).unwrap(), csv);
}

#[test]
fn eval_rejects_missing_and_mismatched_checkpoints() {
    let env = Env::new();
    let out = env.dcr(&["--config", "small.toml", "eval", "--checkpoint", "nope.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.ckpt"));

    let run = dcr_run(&env);
    fs::write(env.path("wide.toml"), SMALL.replace("width = 8", "width = 10")).unwrap();
    let ckpt = run.join("stage1.ckpt");
    let out = env.dcr(&["--config", "wide.toml", "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("8x8x1") && msg.contains("8x10x1"), "{msg}");

    fs::write(env.path("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = env.dcr(&["--config", "small.toml", "eval", "--checkpoint", "junk.ckpt"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn locked_output_dir_is_refused() {
    let env = Env::new();
    let run = dcr_run(&env);
    fs::write(run.join(".lock"), "1").unwrap();
    let out = env.dcr(&["--config", "small.toml", "eval", "--checkpoint", run.join("stage2.ckpt").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn verify_passes_on_a_fresh_model_and_reports_constants() {
    let env = Env::new();
    let stdout = env.ok(&["--config", "small.toml", "--out", "v", "verify"]);
    assert!(stdout.contains("no violations"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(env.path("v/verify.json")).unwrap()).unwrap();
    assert!(report["lemma1"]["report"]["max_abs_diff"].as_f64().unwrap() < 1e-9);
    let batches = report["theorem1"]["batches"].as_array().unwrap();
    assert_eq!(batches.len(), 3);
    for b in batches {
        for k in ["m", "l", "kappa", "eta"] {
            assert!(b[k].as_f64().unwrap() > 0.0, "{k}");
        }
    }
    assert_eq!(report["sandwich"]["checked"], 40);
    assert!(report["violations"].as_array().unwrap().is_empty());
}

#[test]
fn verify_accepts_a_trained_checkpoint() {
    let env = Env::new();
    let run = dcr_run(&env);
    env.ok(&["--config", "small.toml", "verify", "--checkpoint", run.join("stage2.ckpt").to_str().unwrap()]);
    assert!(run.join("verify.json").is_file());
}

fn read_series(p: &Path) -> Vec<(usize, f64)> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| {
            let (s, v) = l.split_once('\t').unwrap();
            (s.parse().unwrap(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn plot_emits_three_series_and_a_chart() {
    let env = Env::new();
    let run = env.train("naive", &[]);
    env.ok(&["plot", "--runlog", run.join("runlog.jsonl").to_str().unwrap()]);
    for f in ["l_con.tsv", "l_rec.tsv", "grad_cos.tsv"] {
        assert_eq!(read_series(&run.join(f)).len(), 12, "{f}");
    }
    assert!(read_series(&run.join("grad_cos.tsv")).iter().all(|(_, c)| (-1.0..=1.0).contains(c)));
    let svg = fs::read_to_string(run.join("conflict.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn plot_of_empty_log_gives_empty_series() {
    let env = Env::new();
    fs::write(env.path("empty.jsonl"), "").unwrap();
    env.ok(&["--out", "p", "plot", "--runlog", "empty.jsonl"]);
    for f in ["l_con.tsv", "l_rec.tsv", "grad_cos.tsv"] {
        assert_eq!(fs::read_to_string(env.path("p").join(f)).unwrap(), "");
    }
    assert!(env.path("p/conflict.svg").is_file());
}

#[test]
fn plot_of_corrupt_log_names_the_line() {
    let env = Env::new();
    let good = r#"{"kind":"step","stage":"naive","step":1,"loss":1.0,"l_con":1.0,"l_rec":0.5,"grad_cos":-0.2,"timesteps":[3]}"#;
    fs::write(env.path("bad.jsonl"), format!("{good}\nnot json\n{good}\n")).unwrap();
    let out = env.dcr(&["--out", "p", "plot", "--runlog", "bad.jsonl"]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}
