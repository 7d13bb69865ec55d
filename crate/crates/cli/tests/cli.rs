use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
corpus.num_train = 24
corpus.heldout_per_speaker = 2
corpus.num_speakers = 2
corpus.max_len = 6
model.num_layers = 2
model.width = 8
model.heads = 2
model.text_tap = 1
model.speech_tap = 2
train.total_updates = 6
train.warmup_updates = 2
train.batch_size = 3
train.eval_every = 3
sampler.nfe_steps = 2
";

fn adma(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adma"))
        .current_dir(dir)
        .env_remove("ADMA_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn adma")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    d
}

#[test]
fn ctc_oracle_agrees_with_enumeration() {
    let d = workdir();
    let o = adma(d.path(), &["ctc-oracle", "--max-T", "6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("instances "));
    assert_eq!(code(&adma(d.path(), &["ctc-oracle", "--max-T", "0"])), 1);
    assert_eq!(code(&adma(d.path(), &["ctc-oracle", "--max-T", "40"])), 1);
}

#[test]
fn gradcheck_tiny_passes() {
    let d = workdir();
    let o = adma(d.path(), &["gradcheck", "--profile", "tiny"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 8, "{out}");
    assert_eq!(code(&adma(d.path(), &["gradcheck", "--profile", "huge"])), 1);
}

#[test]
fn usage_errors_exit_one() {
    let d = workdir();
    assert_eq!(code(&adma(d.path(), &["frobnicate"])), 1);
    assert_eq!(code(&adma(d.path(), &[])), 1);
    assert_eq!(code(&adma(d.path(), &["train", "--arm", "sideways"])), 1);
    assert_eq!(code(&adma(d.path(), &["--help"])), 0);
    assert_eq!(code(&adma(d.path(), &["sweep", "--axis", "nope"])), 1);
}

#[test]
fn invalid_config_exits_one() {
    let d = workdir();
    let o = adma(d.path(), &["--config", "tiny.cfg", "--set", "model.width=7", "train"]);
    assert_eq!(code(&o), 1);
    fs::write(d.path().join("bad.cfg"), "train.lr_peak = fast\n").unwrap();
    assert_eq!(code(&adma(d.path(), &["--config", "bad.cfg", "train"])), 1);
    fs::write(d.path().join("typo.cfg"), "trian.seed = 1\n").unwrap();
    assert_eq!(code(&adma(d.path(), &["--config", "typo.cfg", "train"])), 1);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let d = workdir();
    assert_eq!(code(&adma(d.path(), &["eval", "--checkpoint", "nope.bin"])), 2);
}

#[test]
fn training_is_reproducible_from_flag_and_env() {
    let d = workdir();
    let p = d.path();
    for (dir, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let o = adma(p, &["--config", "tiny.cfg", "--seed", seed, "--out", dir, "train"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = Command::new(env!("CARGO_BIN_EXE_adma"))
        .current_dir(p)
        .env("ADMA_SEED", "5")
        .args(["--config", "tiny.cfg", "--out", "e", "train"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let read = |d: &str| fs::read(p.join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(read("a"), read("e"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(
        fs::read(p.join("a/checkpoint.bin")).unwrap(),
        fs::read(p.join("b/checkpoint.bin")).unwrap()
    );
    let csv = String::from_utf8(read("a")).unwrap();
    assert!(csv.starts_with("step,l_cfm,l_text,l_speech,l_total,lr,proxy_ser,proxy_sim,wall_ms\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let d = workdir();
    let p = d.path();
    let o = adma(p, &["--config", "tiny.cfg", "--out", "r", "train", "--checkpoint-every", "3"]);
    assert_eq!(code(&o), 0);
    let csv = fs::read(p.join("r/metrics.csv")).unwrap();
    let ckpt = fs::read(p.join("r/checkpoint.bin")).unwrap();
    let o = adma(p, &["--out", "r", "train", "--resume", "r/checkpoint_000003.bin"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(p.join("r/metrics.csv")).unwrap(), csv);
    assert_eq!(fs::read(p.join("r/checkpoint.bin")).unwrap(), ckpt);
}

#[test]
fn paired_arms_feed_plotdata() {
    let d = workdir();
    let p = d.path();
    let o = adma(p, &["--config", "tiny.cfg", "--out", "x", "train", "--arm", "both"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("step,baseline_ser,adma_ser,baseline_sim,adma_sim\n"));
    for f in ["baseline.csv", "adma.csv", "comparison.csv", "baseline_masks.txt", "adma_masks.txt"] {
        assert!(p.join("x").join(f).exists(), "{f}");
    }
    assert_eq!(code(&adma(p, &["--out", "x", "plotdata"])), 0);
    let plot = fs::read_to_string(p.join("x/plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 7);
    assert_eq!(fs::read(p.join("x/baseline_masks.txt")).unwrap(), fs::read(p.join("x/adma_masks.txt")).unwrap());
    assert_eq!(code(&adma(p, &["--out", "nowhere", "plotdata"])), 2);
}

#[test]
fn sample_and_eval_use_the_checkpoint() {
    let d = workdir();
    let p = d.path();
    assert_eq!(code(&adma(p, &["--config", "tiny.cfg", "--out", "m", "train"])), 0);
    let o = adma(p, &["--out", "s", "sample", "--checkpoint", "m/checkpoint.bin", "--pair", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("s/sample_0001.bin").exists());
    let o = adma(p, &["sample", "--checkpoint", "m/checkpoint.bin", "--pair", "99"]);
    assert_eq!(code(&o), 1);
    let a = adma(p, &["--out", "ev", "eval", "--checkpoint", "m/checkpoint.bin"]);
    let b = adma(p, &["eval", "--checkpoint", "m/checkpoint.bin"]);
    assert_eq!(code(&a), 0);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(fs::read_to_string(p.join("ev/eval.csv")).unwrap(), stdout(&a));
}

#[test]
fn ground_truth_scores_zero_errors() {
    let d = workdir();
    let o = adma(d.path(), &["--config", "tiny.cfg", "eval", "--ground-truth"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "0");
    assert!(row[1].parse::<f64>().unwrap() > 0.99);
}

#[test]
fn corpus_gen_and_sweep_write_outputs() {
    let d = workdir();
    let p = d.path();
    let o = adma(p, &["--config", "tiny.cfg", "--out", "cg", "corpus", "gen", "--targets"]);
    assert_eq!(code(&o), 0);
    assert!(p.join("cg/bank.cfg").exists() && p.join("cg/targets").exists());
    let o = adma(p, &["--config", "tiny.cfg", "--out", "t", "train", "--corpus", "cg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = adma(
        p,
        &["--config", "tiny.cfg", "--out", "sw", "sweep", "--axis", "loss_variant", "--values", "neg_cos,l1"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(p.join("sw/sweep_loss_variant.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.contains(",ok,")));
}
