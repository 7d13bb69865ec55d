//! `adma`: corpus generation, training, sampling, evaluation, sweeps and
//! numerical self-checks.
//!
//! Exit codes: 0 success, 1 validation failure or usage error, 2 runtime
//! failure.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use adma_core::checkpoint::Checkpoint;
use adma_core::config::Config;
use adma_core::corpus::{decode_features, write_matrix_record, Corpus};
use adma_core::eval::{
    edit_distance, eval_items, evaluate, evaluate_ground_truth, plotdata, run_sweep, score_item, sweep_csv, EvalReport,
    SweepAxis, SweepSpec,
};
use adma_core::flow_matching::integrate;
use adma_core::gradsuite::{gradient_suite, Profile};
use adma_core::speech_alignment::{extract_targets, save_targets, FrozenExtractor};
use adma_core::text_alignment::ctc_oracle_sweep;
use adma_core::trainer::{load_model, run_experiment, ExperimentConfig, Trainer, METRICS_HEADER};
use rand::SeedableRng;

const ORACLE_TOL: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "adma", version, about = "Dual-modality-aligned flow matching at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed override: training seed for `train`/`sweep`, corpus seed for
    /// `corpus gen`, sampling seed for `sample`/`eval`, instance seed for
    /// `ctc-oracle`. Falls back to ADMA_SEED.
    #[arg(long, global = true, env = "ADMA_SEED", value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic corpus tools.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Train one run, or the baseline and aligned runs side by side.
    Train {
        #[arg(long, value_enum, default_value_t = Arm::Adma)]
        arm: Arm,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Read the corpus from a `corpus gen` directory instead of
        /// regenerating it from the config.
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Also write a checkpoint every N updates.
        #[arg(long, value_name = "N", default_value_t = 0)]
        checkpoint_every: u64,
    },
    /// Infill one held-out pair with a trained checkpoint.
    Sample {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Index of the prompt/target pair.
        #[arg(long, default_value_t = 0)]
        pair: usize,
    },
    /// Proxy SER/SIM of a checkpoint (EMA weights) on the held-out split.
    Eval {
        #[arg(long, value_name = "PATH", required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Score the real target features instead of generated ones.
        #[arg(long, conflicts_with = "checkpoint")]
        ground_truth: bool,
    },
    /// Train one run per value of an axis with shared seeds.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Finite-difference check of every loss on a small profile.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        profile: String,
    },
    /// Compare the CTC recursion with exhaustive enumeration.
    CtcOracle {
        #[arg(long = "max-T", default_value_t = 6)]
        max_t: usize,
        /// Instances per (T, K, U) cell.
        #[arg(long, default_value_t = 7)]
        reps: usize,
    },
    /// Join two metrics CSVs on step for convergence plots.
    Plotdata {
        #[arg(long, value_name = "PATH")]
        baseline: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        adma: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusAction {
    /// Generate and export the corpus.
    Gen {
        /// Also export frozen-extractor targets for the training split.
        #[arg(long)]
        targets: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Arm {
    Adma,
    Baseline,
    Both,
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: adma_core::Error| e.to_string())
}

/// A check that ran to completion and failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<adma_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn out_dir(common: &Common, default: &str) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn apply_overrides(cfg: &mut Config, overrides: &[String]) -> anyhow::Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| adma_core::Error::Config(format!("override `{o}` must be KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(())
}

/// Config file, then `--set`, then the seed into `seed_key`.
fn load_config(common: &Common, seed_key: &str) -> anyhow::Result<ExperimentConfig> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = Config::parse(&text)?;
    apply_overrides(&mut cfg, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set(seed_key, seed);
    }
    Ok(ExperimentConfig::from_config(&cfg)?)
}

/// Config stored in a checkpoint, with `--set` and the sampling seed applied.
fn checkpoint_config(common: &Common, ckpt: &Checkpoint) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = Config::parse(&ckpt.config_text)?;
    apply_overrides(&mut cfg, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set("eval.seed", seed);
    }
    Ok(ExperimentConfig::from_config(&cfg)?)
}

fn load_corpus(cfg: &ExperimentConfig, dir: Option<&Path>) -> anyhow::Result<Arc<Corpus>> {
    let corpus = match dir {
        Some(d) => {
            let c = Corpus::import(d).with_context(|| format!("importing corpus from {}", d.display()))?;
            if c.cfg != cfg.corpus {
                return Err(adma_core::Error::Config(format!(
                    "corpus in {} was generated with different corpus.* settings",
                    d.display()
                ))
                .into());
            }
            c
        }
        None => Corpus::generate(&cfg.corpus)?,
    };
    Ok(Arc::new(corpus))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Corpus {
            action: CorpusAction::Gen { targets },
        } => corpus_gen(common, *targets),
        Command::Train {
            arm,
            resume,
            corpus,
            checkpoint_every,
        } => train(common, *arm, resume.as_deref(), corpus.as_deref(), *checkpoint_every),
        Command::Sample { checkpoint, pair } => sample(common, checkpoint, *pair),
        Command::Eval {
            checkpoint,
            ground_truth,
        } => eval(common, checkpoint.as_deref(), *ground_truth),
        Command::Sweep { axis, values } => sweep(common, *axis, values),
        Command::Gradcheck { profile } => gradcheck(profile),
        Command::CtcOracle { max_t, reps } => ctc_oracle(*max_t, *reps, common.seed.unwrap_or(0)),
        Command::Plotdata { baseline, adma } => plot(common, baseline.as_deref(), adma.as_deref()),
    }
}

fn corpus_gen(common: &Common, targets: bool) -> anyhow::Result<()> {
    let cfg = load_config(common, "corpus.seed")?;
    let dir = out_dir(common, "corpus")?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    corpus.export(&dir)?;
    if targets {
        let ex = FrozenExtractor::new(cfg.corpus.feature_dim, &cfg.speech)?;
        let t = corpus
            .train
            .iter()
            .map(|u| extract_targets(&ex, &u.features, cfg.speech.selection))
            .collect::<adma_core::Result<Vec<_>>>()?;
        save_targets(&dir.join("targets"), &cfg.corpus, &t)?;
    }
    println!(
        "wrote {} training and {} held-out utterances to {}",
        corpus.train.len(),
        corpus.heldout.len(),
        dir.display()
    );
    Ok(())
}

fn log_row(name: &str, r: &adma_core::trainer::TrainRunRecord) {
    if let Some(e) = &r.eval {
        log::info!(
            "{name} step {}: l_total {:.4} proxy_ser {:.4} proxy_sim {:.4}",
            r.losses.step,
            r.losses.l_total,
            e.proxy_ser,
            e.proxy_sim
        );
    }
}

fn train(
    common: &Common,
    arm: Arm,
    resume: Option<&Path>,
    corpus_dir: Option<&Path>,
    checkpoint_every: u64,
) -> anyhow::Result<()> {
    let dir = out_dir(common, "run")?;
    if arm == Arm::Both {
        if resume.is_some() {
            bail!(adma_core::Error::Config("--resume applies to a single arm".into()));
        }
        let adma = load_config(common, "train.seed")?;
        let mut base = adma.clone();
        base.train = base.train.baseline();
        let corpus = load_corpus(&adma, corpus_dir)?;
        let report = run_experiment(corpus, &base, &adma, Some(&dir))?;
        print!("{}", report.summary());
        return Ok(());
    }
    let (mut trainer, mut kept) = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            // `--set` may extend the run; the seed is part of the saved state.
            let mut raw = Config::parse(&ckpt.config_text)?;
            apply_overrides(&mut raw, &common.overrides)?;
            let cfg = ExperimentConfig::from_config(&raw)?;
            ckpt.config_text = cfg.to_text();
            let corpus = load_corpus(&cfg, corpus_dir)?;
            let t = Trainer::from_checkpoint(&ckpt, corpus)?;
            // Keep earlier rows up to the checkpoint so the CSV stays whole.
            let prev = fs::read_to_string(dir.join("metrics.csv")).unwrap_or_default();
            let kept: Vec<String> = prev
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= t.step()))
                .map(str::to_string)
                .collect();
            (t, kept)
        }
        None => {
            let mut cfg = load_config(common, "train.seed")?;
            if arm == Arm::Baseline {
                cfg.train = cfg.train.baseline();
            }
            let corpus = load_corpus(&cfg, corpus_dir)?;
            (Trainer::new(cfg, corpus)?, Vec::new())
        }
    };
    fs::write(dir.join("config.cfg"), trainer.cfg.to_text())?;
    let mut csv = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
    writeln!(csv, "{METRICS_HEADER}")?;
    for l in kept.drain(..) {
        writeln!(csv, "{l}")?;
    }
    let name = if trainer.cfg.train.enable_text || trainer.cfg.train.enable_speech { "adma" } else { "baseline" };
    let total = trainer.cfg.train.total_updates;
    let start = Instant::now();
    while trainer.step() < total {
        let losses = trainer.train_step()?;
        let tc = &trainer.cfg.train;
        let due = tc.eval_every > 0 && (losses.step % tc.eval_every == 0 || losses.step == total);
        let rec = adma_core::trainer::TrainRunRecord {
            lr: adma_core::trainer::lr_schedule(losses.step, tc),
            losses,
            eval: if due { Some(trainer.evaluate()?) } else { None },
            wall_ms: tc.wall_clock.then(|| start.elapsed().as_secs_f64() * 1000.0),
        };
        writeln!(csv, "{}", rec.csv_row())?;
        log_row(name, &rec);
        if due {
            csv.flush()?;
        }
        if checkpoint_every > 0 && losses.step % checkpoint_every == 0 {
            trainer.save(&dir.join(format!("checkpoint_{:06}.bin", losses.step)))?;
        }
    }
    csv.flush()?;
    trainer.save(&dir.join("checkpoint.bin"))?;
    println!("{name}: {} updates, outputs in {}", trainer.step(), dir.display());
    Ok(())
}

fn sample(common: &Common, path: &Path, pair: usize) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = checkpoint_config(common, &ckpt)?;
    let (_, model, params) = load_model(&ckpt)?;
    let corpus = load_corpus(&cfg, None)?;
    let items = eval_items(&corpus, &cfg.eval)?;
    let item = items.get(pair).ok_or_else(|| {
        adma_core::Error::InvalidArgument(format!("pair {pair} out of range (0..{})", items.len()))
    })?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    rng.set_stream(pair as u64);
    let x = integrate(&model, &params, &item.masked, &item.mask, &item.padded_tokens, &cfg.sampler, &mut rng)?;
    let (edits, sim) = score_item(&corpus, item, &x)?;
    let p = item.prompt_tokens.len() * cfg.corpus.frames_per_token;
    let region = x.slice_cols(p, x.cols() - p)?;
    let (decoded, speaker) = decode_features(&corpus.bank, &region)?;
    debug_assert_eq!(edits, edit_distance(&decoded, &item.target_tokens));
    let dir = out_dir(common, "sample")?;
    let file = dir.join(format!("sample_{pair:04}.bin"));
    let mut w = BufWriter::new(fs::File::create(&file)?);
    write_matrix_record(&mut w, &cfg.corpus, &item.padded_tokens, &x)?;
    w.flush()?;
    println!("speaker {} (decoded {speaker})", item.speaker);
    println!("target  {:?}", item.target_tokens);
    println!("decoded {decoded:?}");
    println!("edits {edits} sim {sim:.6}");
    println!("features written to {}", file.display());
    Ok(())
}

fn report_csv(r: &EvalReport) -> String {
    format!(
        "proxy_ser,proxy_sim,num_utterances,solver,nfe_steps,sway\n{},{},{},{},{},{}\n",
        r.proxy_ser, r.proxy_sim, r.num_utterances, r.sampler.solver, r.sampler.nfe_steps, r.sampler.sway
    )
}

fn eval(common: &Common, path: Option<&Path>, ground_truth: bool) -> anyhow::Result<()> {
    let report = if ground_truth {
        let cfg = load_config(common, "eval.seed")?;
        let corpus = load_corpus(&cfg, None)?;
        evaluate_ground_truth(&corpus, &cfg.eval)?
    } else {
        let path = path.ok_or_else(|| anyhow!("--checkpoint is required"))?;
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let cfg = checkpoint_config(common, &ckpt)?;
        let (_, model, params) = load_model(&ckpt)?;
        let corpus = load_corpus(&cfg, None)?;
        evaluate(&model, &params, &corpus, &cfg.sampler, &cfg.eval)?
    };
    let csv = report_csv(&report);
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn sweep(common: &Common, axis: SweepAxis, values: &[String]) -> anyhow::Result<()> {
    let base = load_config(common, "train.seed")?;
    let mut spec = SweepSpec::with_defaults(axis, base);
    if !values.is_empty() {
        spec.values = values.to_vec();
    }
    let corpus = load_corpus(&spec.base, None)?;
    let rows = run_sweep(&spec, corpus);
    let csv = sweep_csv(axis, &rows);
    let dir = out_dir(common, "sweep")?;
    fs::write(dir.join(format!("sweep_{}.csv", axis.name())), &csv)?;
    print!("{csv}");
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} sweep rows failed", rows.len());
    }
    Ok(())
}

fn gradcheck(profile: &str) -> anyhow::Result<()> {
    let profile: Profile = profile.parse()?;
    let results = gradient_suite(profile)?;
    let mut failed = 0;
    for (name, r) in &results {
        let worst = r.worst().map(|e| e.name.as_str()).unwrap_or("-");
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{} {name}: max rel error {:.3e} (worst {worst}, tol {:e})",
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_error(),
            r.tol
        );
    }
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} gradient check(s) failed")).into());
    }
    Ok(())
}

fn ctc_oracle(max_t: usize, reps: usize, seed: u64) -> anyhow::Result<()> {
    if max_t == 0 || max_t > 11 {
        bail!(adma_core::Error::InvalidArgument(format!(
            "--max-T must lie in 1..=11 (brute force grows as 4^T), got {max_t}"
        )));
    }
    let s = ctc_oracle_sweep(max_t, reps, seed)?;
    println!(
        "instances {} (feasible {}), max |dp - brute force| = {:e}",
        s.instances, s.feasible, s.max_abs_diff
    );
    if !s.passed(ORACLE_TOL) {
        return Err(CheckFailed(format!(
            "oracle mismatch: max diff {:e}, {} feasibility disagreements",
            s.max_abs_diff, s.feasibility_mismatches
        ))
        .into());
    }
    Ok(())
}

fn plot(common: &Common, baseline: Option<&Path>, adma: Option<&Path>) -> anyhow::Result<()> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let b = baseline.map(Path::to_path_buf).unwrap_or_else(|| dir.join("baseline.csv"));
    let a = adma.map(Path::to_path_buf).unwrap_or_else(|| dir.join("adma.csv"));
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let csv = plotdata(&read(&b)?, &read(&a)?)?;
    fs::create_dir_all(&dir)?;
    let out = dir.join("plot.csv");
    fs::write(&out, &csv)?;
    println!("wrote {}", out.display());
    Ok(())
}
