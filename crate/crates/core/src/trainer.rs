//! Joint optimisation of the flow-matching objective and the two alignment
//! losses, with AdamW, a warmup/linear-decay schedule, EMA weights,
//! checkpoints and the paired baseline-vs-aligned experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{float, parse_value, render, unknown_key, Config, Section};
use crate::corpus::{apply_mask, sample_mask, Corpus, CorpusConfig, TemporalMask};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::flow_matching::{cfm_loss, make_flow_sample, FlowSample, SamplerConfig};
use crate::model::{Backbone, ModelConfig, ModelInput};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::speech_alignment::{extract_targets, speech_align_loss, AlignProjector, FrozenExtractor, SpeechAlignConfig};
use crate::text_alignment::{strip_fillers, text_align_loss, CtcHead};

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_text: f64,
    pub lambda_speech: f64,
    pub enable_text: bool,
    pub enable_speech: bool,
    pub lr_peak: f64,
    pub warmup_updates: u64,
    pub total_updates: u64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub mask_min: f64,
    pub mask_max: f64,
    /// Restrict the flow-matching loss to masked frames.
    pub cfm_masked_only: bool,
    /// Evaluate every this many updates (and at the last one); 0 disables.
    pub eval_every: u64,
    /// Record wall-clock milliseconds in the metrics CSV. Off by default so
    /// that same-seed runs produce identical files.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_text: 0.1,
            lambda_speech: 1.0,
            enable_text: true,
            enable_speech: true,
            lr_peak: 7.5e-4,
            warmup_updates: 500,
            total_updates: 5000,
            batch_size: 16,
            ema_decay: 0.999,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            mask_min: 0.7,
            mask_max: 1.0,
            cfm_masked_only: true,
            eval_every: 500,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lambda_text >= 0.0 && self.lambda_speech >= 0.0) {
            return bad("train.lambda_text and train.lambda_speech must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("train.ema_decay must lie in [0, 1)");
        }
        if self.warmup_updates > self.total_updates {
            return bad("train.warmup_updates must not exceed train.total_updates");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.lr_peak >= 0.0) {
            return bad("train.lr_peak must be non-negative");
        }
        if !(0.0 < self.mask_min && self.mask_min <= self.mask_max && self.mask_max <= 1.0) {
            return bad("train mask range must satisfy 0 < mask_min <= mask_max <= 1");
        }
        Ok(())
    }

    /// Flow-matching loss only.
    pub fn baseline(&self) -> Self {
        Self {
            enable_text: false,
            enable_speech: false,
            ..self.clone()
        }
    }
}

impl Section for TrainConfig {
    const PREFIX: &'static str = "train";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = Self::PREFIX;
        match key {
            "lambda_text" => self.lambda_text = parse_value(p, key, value)?,
            "lambda_speech" => self.lambda_speech = parse_value(p, key, value)?,
            "enable_text" => self.enable_text = parse_value(p, key, value)?,
            "enable_speech" => self.enable_speech = parse_value(p, key, value)?,
            "lr_peak" => self.lr_peak = parse_value(p, key, value)?,
            "warmup_updates" => self.warmup_updates = parse_value(p, key, value)?,
            "total_updates" => self.total_updates = parse_value(p, key, value)?,
            "batch_size" => self.batch_size = parse_value(p, key, value)?,
            "ema_decay" => self.ema_decay = parse_value(p, key, value)?,
            "seed" => self.seed = parse_value(p, key, value)?,
            "beta1" => self.beta1 = parse_value(p, key, value)?,
            "beta2" => self.beta2 = parse_value(p, key, value)?,
            "adam_eps" => self.adam_eps = parse_value(p, key, value)?,
            "weight_decay" => self.weight_decay = parse_value(p, key, value)?,
            "clip_norm" => self.clip_norm = parse_value(p, key, value)?,
            "mask_min" => self.mask_min = parse_value(p, key, value)?,
            "mask_max" => self.mask_max = parse_value(p, key, value)?,
            "cfm_masked_only" => self.cfm_masked_only = parse_value(p, key, value)?,
            "eval_every" => self.eval_every = parse_value(p, key, value)?,
            "wall_clock" => self.wall_clock = parse_value(p, key, value)?,
            _ => return Err(unknown_key(p, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda_text", float(self.lambda_text)),
            ("lambda_speech", float(self.lambda_speech)),
            ("enable_text", self.enable_text.to_string()),
            ("enable_speech", self.enable_speech.to_string()),
            ("lr_peak", float(self.lr_peak)),
            ("warmup_updates", self.warmup_updates.to_string()),
            ("total_updates", self.total_updates.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("ema_decay", float(self.ema_decay)),
            ("seed", self.seed.to_string()),
            ("beta1", float(self.beta1)),
            ("beta2", float(self.beta2)),
            ("adam_eps", float(self.adam_eps)),
            ("weight_decay", float(self.weight_decay)),
            ("clip_norm", float(self.clip_norm)),
            ("mask_min", float(self.mask_min)),
            ("mask_max", float(self.mask_max)),
            ("cfm_masked_only", self.cfm_masked_only.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
        ]
    }
}

/// Every configurable section of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub speech: SpeechAlignConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub const SECTIONS: [&'static str; 6] = ["corpus", "model", "train", "speech", "sampler", "eval"];

    pub fn from_config(c: &Config) -> Result<Self> {
        c.check_prefixes(&Self::SECTIONS)?;
        let mut out = Self {
            corpus: c.section()?,
            model: c.section()?,
            train: c.section()?,
            speech: c.section()?,
            sampler: c.section()?,
            eval: c.section()?,
        };
        out.sync();
        out.validate()?;
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_config(&Config::parse(text)?)
    }

    /// Derives the model's vocabulary and feature width from the corpus.
    pub fn sync(&mut self) {
        self.model.vocab = self.corpus.vocab_size + 1;
        self.model.feature_dim = self.corpus.feature_dim;
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.model.vocab != self.corpus.vocab_size + 1 || self.model.feature_dim != self.corpus.feature_dim {
            return Err(Error::Config("model vocabulary/feature width disagree with the corpus".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        [
            render(&self.corpus),
            render(&self.model),
            render(&self.train),
            render(&self.speech),
            render(&self.sampler),
            render(&self.eval),
        ]
        .concat()
    }
}

/// Per-step batch-mean losses. Disabled terms are 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_cfm: f64,
    pub l_text: f64,
    pub l_speech: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// `l_cfm + λ_text·l_text + λ_speech·l_speech`.
    pub fn compose(step: u64, l_cfm: f64, l_text: f64, l_speech: f64, lambda_text: f64, lambda_speech: f64) -> Self {
        Self {
            step,
            l_cfm,
            l_text,
            l_speech,
            l_total: l_cfm + lambda_text * l_text + lambda_speech * l_speech,
        }
    }
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunRecord {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub eval: Option<EvalReport>,
    pub wall_ms: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,l_cfm,l_text,l_speech,l_total,lr,proxy_ser,proxy_sim,wall_ms";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl TrainRunRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            l.step,
            l.l_cfm,
            l.l_text,
            l.l_speech,
            l.l_total,
            self.lr,
            opt(self.eval.as_ref().map(|e| e.proxy_ser)),
            opt(self.eval.as_ref().map(|e| e.proxy_sim)),
            opt(self.wall_ms),
        )
    }
}

pub fn metrics_csv(records: &[TrainRunRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Linear warmup from 0 to `lr_peak`, then linear decay to 0 at
/// `total_updates`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_updates, cfg.total_updates);
    if step < w {
        cfg.lr_peak * step as f64 / w as f64
    } else if step >= t {
        if t == w { cfg.lr_peak * (step == t) as u8 as f64 } else { 0.0 }
    } else {
        cfg.lr_peak * (t - step) as f64 / (t - w) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One AdamW step with bias-corrected moments and decoupled decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw_update(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("optimizer state does not match the parameter list"));
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::shape("adamw_update", p.shape(), state.m[i].shape()));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *x -= lr * (mh / (vh.sqrt() + hp.eps) + hp.weight_decay * *x);
        }
    }
    Ok(())
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::invalid("EMA and parameter lists differ in length"));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        if e.shape() != p.shape() {
            return Err(Error::shape("ema_update", e.shape(), p.shape()));
        }
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Scales `grads` in place so that their global L2 norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let s = max / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// The random draws for one batch item, in draw order.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemDraw {
    pub utterance: usize,
    pub mask: TemporalMask,
    pub sample: FlowSample,
}

struct ItemResult {
    l_cfm: f64,
    l_text: f64,
    l_speech: f64,
    grads: Vec<Option<Vec<f64>>>,
}

/// Model, heads, frozen extractor, optimizer and data stream of one run.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    corpus: Arc<Corpus>,
    pub model: Backbone,
    pub ctc: CtcHead,
    pub proj: AlignProjector,
    pub extractor: FrozenExtractor,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam: AdamState,
    step: u64,
    rng: ChaCha8Rng,
    targets: Vec<Tensor>,
    mask_log: Vec<(usize, TemporalMask)>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, corpus: Arc<Corpus>) -> Result<Self> {
        let mut cfg = cfg;
        cfg.sync();
        cfg.validate()?;
        if corpus.cfg != cfg.corpus {
            return Err(Error::Config("corpus does not match corpus.* settings".into()));
        }
        if corpus.train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let mut init = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        init.set_stream(STREAM_INIT);
        let mut params = ParamStore::new();
        let model = Backbone::new(cfg.model.clone(), &mut params, &mut init)?;
        let ctc = CtcHead::new(&mut params, cfg.model.width, cfg.corpus.vocab_size, &mut init);
        let proj = AlignProjector::new(&mut params, cfg.model.width, cfg.speech.extractor_dim, &mut init);
        let extractor = FrozenExtractor::new(cfg.corpus.feature_dim, &cfg.speech)?;
        let targets = if cfg.train.enable_speech {
            corpus
                .train
                .par_iter()
                .map(|u| extract_targets(&extractor, &u.features, cfg.speech.selection))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(STREAM_DATA);
        Ok(Self {
            ema: params.clone(),
            adam: AdamState::zeros_like(params.tensors()),
            cfg,
            corpus,
            model,
            ctc,
            proj,
            extractor,
            params,
            step: 0,
            rng,
            targets,
            mask_log: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    /// `(utterance index, mask)` of the first ten batch items drawn.
    pub fn mask_log(&self) -> &[(usize, TemporalMask)] {
        &self.mask_log
    }

    /// Draws a batch. The order of draws per item (utterance, mask, noise,
    /// flow step) is fixed and independent of which losses are enabled.
    pub fn draw_batch(&mut self) -> Result<Vec<ItemDraw>> {
        let tc = &self.cfg.train;
        (0..tc.batch_size)
            .map(|_| {
                let utterance = self.rng.gen_range(0..self.corpus.train.len());
                let x1 = &self.corpus.train[utterance].features;
                let mask = sample_mask(x1.cols(), (tc.mask_min, tc.mask_max), &mut self.rng)?;
                let sample = make_flow_sample(x1, &mut self.rng)?;
                Ok(ItemDraw { utterance, mask, sample })
            })
            .collect()
    }

    fn item(&self, draw: &ItemDraw) -> Result<ItemResult> {
        let tc = &self.cfg.train;
        let utt = &self.corpus.train[draw.utterance];
        let x_m = apply_mask(&utt.features, &draw.mask)?;
        let mut taps = Vec::new();
        if tc.enable_text {
            taps.push(self.cfg.model.text_tap);
        }
        if tc.enable_speech {
            taps.push(self.cfg.model.speech_tap);
        }
        let mut g = Graph::new();
        let input = ModelInput {
            noisy: &draw.sample.psi,
            masked: &x_m,
            padded_tokens: &utt.padded_tokens,
        };
        let out = self.model.forward(&mut g, &self.params, input, draw.sample.t, &taps)?;
        let cfm = cfm_loss(&mut g, out.v, &draw.sample, &draw.mask, tc.cfm_masked_only)?;
        let mut total = cfm;
        let mut l_text = 0.0;
        let mut l_speech = 0.0;
        if tc.enable_text {
            let target = strip_fillers(&utt.padded_tokens, self.cfg.corpus.filler_id());
            let h = out.hidden[&self.cfg.model.text_tap];
            let lt = text_align_loss(&mut g, &self.params, &self.ctc, h, &target)?;
            l_text = g.scalar(lt);
            let w = g.scale(lt, tc.lambda_text)?;
            total = g.add(total, w)?;
        }
        if tc.enable_speech {
            let h = out.hidden[&self.cfg.model.speech_tap];
            let target = &self.targets[draw.utterance];
            let ls = speech_align_loss(&mut g, &self.params, &self.proj, h, target, self.cfg.speech.variant)?;
            l_speech = g.scalar(ls);
            let w = g.scale(ls, tc.lambda_speech)?;
            total = g.add(total, w)?;
        }
        let l_cfm = g.scalar(cfm);
        let total = g.scale(total, 1.0 / tc.batch_size as f64)?;
        g.backward(total)?;
        let grads = self
            .params
            .ids()
            .map(|id| g.param_grad(id).map(<[f64]>::to_vec))
            .collect();
        Ok(ItemResult {
            l_cfm,
            l_text,
            l_speech,
            grads,
        })
    }

    /// One optimisation step: draw a batch, compute the enabled losses,
    /// back-propagate their weighted sum, clip, apply AdamW and update EMA.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let step = self.step + 1;
        let draws = self.draw_batch()?;
        for d in &draws {
            if self.mask_log.len() < 10 {
                self.mask_log.push((d.utterance, d.mask.clone()));
            }
        }
        let results: Vec<Result<ItemResult>> = draws.par_iter().map(|d| self.item(d)).collect();
        let b = self.cfg.train.batch_size as f64;
        let mut sums = (0.0, 0.0, 0.0);
        let mut grads: Vec<Vec<f64>> = self.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        for r in results {
            let r = r?;
            for (term, v) in [("cfm", r.l_cfm), ("text", r.l_text), ("speech", r.l_speech)] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { term, step, value: v });
                }
            }
            sums.0 += r.l_cfm;
            sums.1 += r.l_text;
            sums.2 += r.l_speech;
            for (acc, g) in grads.iter_mut().zip(r.grads) {
                if let Some(g) = g {
                    acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
                }
            }
        }
        let tc = &self.cfg.train;
        let losses = LossBreakdown::compose(
            step,
            sums.0 / b,
            sums.1 / b,
            sums.2 / b,
            if tc.enable_text { tc.lambda_text } else { 0.0 },
            if tc.enable_speech { tc.lambda_speech } else { 0.0 },
        );
        if !grads.iter().flatten().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteLoss { term: "gradient", step, value: f64::NAN });
        }
        clip_global_norm(&mut grads, tc.clip_norm);
        let lr = lr_schedule(step, tc);
        let hp = AdamWParams {
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.adam_eps,
            weight_decay: tc.weight_decay,
        };
        let decay = tc.ema_decay;
        adamw_update(self.params.tensors_mut(), &grads, &mut self.adam, lr, &hp)?;
        ema_update(self.ema.tensors_mut(), self.params.tensors(), decay)?;
        self.step = step;
        Ok(losses)
    }

    /// Proxy metrics of the EMA weights on the held-out split.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.model, &self.ema, &self.corpus, &self.cfg.sampler, &self.cfg.eval)
    }

    /// Trains until `total_updates`, evaluating every `eval_every` updates
    /// and at the end. `on_record` sees each row as it is produced.
    pub fn run(&mut self, mut on_record: impl FnMut(&TrainRunRecord) -> Result<()>) -> Result<Vec<TrainRunRecord>> {
        let mut records = Vec::new();
        let start = Instant::now();
        while self.step < self.cfg.train.total_updates {
            let losses = self.train_step()?;
            let tc = &self.cfg.train;
            let due = tc.eval_every > 0 && (losses.step % tc.eval_every == 0 || losses.step == tc.total_updates);
            let eval = if due { Some(self.evaluate()?) } else { None };
            let rec = TrainRunRecord {
                lr: lr_schedule(losses.step, tc),
                losses,
                eval,
                wall_ms: tc.wall_clock.then(|| start.elapsed().as_secs_f64() * 1000.0),
            };
            on_record(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    /// Parameters, EMA, optimizer moments and data-stream position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (_, name, t) in self.params.iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for (prefix, list) in [("ema/", self.ema.tensors()), ("adam_m/", &self.adam.m[..]), ("adam_v/", &self.adam.v[..])] {
            for (id, t) in self.params.ids().zip(list) {
                tensors.push((format!("{prefix}{}", self.params.name(id)), t.clone()));
            }
        }
        Checkpoint {
            config_text: self.cfg.to_text(),
            tensors,
            state: Some(TrainState {
                step: self.step,
                adam_t: self.adam.t,
                rng_seed: self.rng.get_seed(),
                rng_stream: self.rng.get_stream(),
                rng_word_pos: self.rng.get_word_pos(),
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output.
    pub fn from_checkpoint(ckpt: &Checkpoint, corpus: Arc<Corpus>) -> Result<Self> {
        let cfg = ExperimentConfig::parse(&ckpt.config_text)?;
        let mut t = Self::new(cfg, corpus)?;
        let state = ckpt
            .state
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint carries no training state".into()))?;
        let ids: Vec<_> = t.params.ids().collect();
        for id in ids {
            let name = t.params.name(id).to_string();
            let fetch = |key: String| -> Result<Tensor> {
                let v = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing `{key}`")))?;
                if v.shape() != t.params.get(id).shape() {
                    return Err(Error::shape("load checkpoint", v.shape(), t.params.get(id).shape()));
                }
                Ok(v.clone())
            };
            let p = fetch(name.clone())?;
            let e = fetch(format!("ema/{name}"))?;
            let m = fetch(format!("adam_m/{name}"))?;
            let v = fetch(format!("adam_v/{name}"))?;
            *t.params.get_mut(id) = p;
            *t.ema.get_mut(id) = e;
            t.adam.m[id.index()] = m;
            t.adam.v[id.index()] = v;
        }
        t.adam.t = state.adam_t;
        t.step = state.step;
        t.rng = ChaCha8Rng::from_seed(state.rng_seed);
        t.rng.set_stream(state.rng_stream);
        t.rng.set_word_pos(state.rng_word_pos);
        Ok(t)
    }

    pub fn load(path: &Path, corpus: Arc<Corpus>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, corpus)
    }
}

/// Loads the model from a checkpoint, preferring EMA weights when present.
pub fn load_model(ckpt: &Checkpoint) -> Result<(ExperimentConfig, Backbone, ParamStore)> {
    let cfg = ExperimentConfig::parse(&ckpt.config_text)?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Backbone::new(cfg.model.clone(), &mut params, &mut rng)?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let t = ckpt
            .get(&format!("ema/{name}"))
            .or_else(|| ckpt.get(&name))
            .ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
        if t.shape() != params.get(id).shape() {
            return Err(Error::shape("load_model", t.shape(), params.get(id).shape()));
        }
        *params.get_mut(id) = t.clone();
    }
    Ok((cfg, model, params))
}

/// Paired run output: metrics for both arms and the eval-step comparison.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub baseline: Vec<TrainRunRecord>,
    pub adma: Vec<TrainRunRecord>,
    pub baseline_masks: Vec<(usize, TemporalMask)>,
    pub adma_masks: Vec<(usize, TemporalMask)>,
}

/// `(step, baseline, aligned)` eval reports at steps where both evaluated.
pub type ComparisonRow = (u64, EvalReport, EvalReport);

impl ExperimentReport {
    pub fn comparison(&self) -> Vec<ComparisonRow> {
        paired_evals(&self.baseline, &self.adma)
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("step,baseline_ser,adma_ser,baseline_sim,adma_sim\n");
        for (step, b, a) in self.comparison() {
            let _ = writeln!(s, "{step},{},{},{},{}", b.proxy_ser, a.proxy_ser, b.proxy_sim, a.proxy_sim);
        }
        s
    }
}

pub fn paired_evals(baseline: &[TrainRunRecord], adma: &[TrainRunRecord]) -> Vec<ComparisonRow> {
    baseline
        .iter()
        .filter_map(|b| {
            let be = b.eval.clone()?;
            let a = adma.iter().find(|a| a.losses.step == b.losses.step)?;
            Some((b.losses.step, be, a.eval.clone()?))
        })
        .collect()
}

fn mask_lines(masks: &[(usize, TemporalMask)]) -> String {
    let mut s = String::new();
    for (u, m) in masks {
        let bits: String = m.bits().iter().map(|&b| if b { '1' } else { '0' }).collect();
        let _ = writeln!(s, "{u} {bits}");
    }
    s
}

/// Trains the flow-matching-only baseline and the aligned model under the
/// same corpus, seeds and budget. With `out`, writes `baseline.csv`,
/// `adma.csv`, `comparison.csv` and the first ten masks of each run.
pub fn run_experiment(
    corpus: Arc<Corpus>,
    cfg_baseline: &ExperimentConfig,
    cfg_adma: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    let (b, a) = (&cfg_baseline.train, &cfg_adma.train);
    if b.seed != a.seed
        || b.total_updates != a.total_updates
        || b.batch_size != a.batch_size
        || cfg_baseline.model != cfg_adma.model
        || cfg_baseline.corpus != cfg_adma.corpus
    {
        return Err(Error::Config(
            "baseline and aligned runs must share seed, budget, model and corpus".into(),
        ));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut arms = Vec::new();
    for (name, cfg) in [("baseline", cfg_baseline), ("adma", cfg_adma)] {
        let mut t = Trainer::new(cfg.clone(), corpus.clone())?;
        let records = t.run(|r| {
            log::debug!("{name} {}", r.csv_row());
            Ok(())
        })?;
        if let Some(dir) = out {
            fs::write(dir.join(format!("{name}.csv")), metrics_csv(&records))?;
            fs::write(dir.join(format!("{name}_masks.txt")), mask_lines(t.mask_log()))?;
        }
        arms.push((records, t.mask_log().to_vec()));
    }
    let (adma, adma_masks) = arms.pop().expect("two arms");
    let (baseline, baseline_masks) = arms.pop().expect("two arms");
    let report = ExperimentReport {
        baseline,
        adma,
        baseline_masks,
        adma_masks,
    };
    if let Some(dir) = out {
        fs::write(dir.join("comparison.csv"), report.summary())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            corpus: CorpusConfig {
                num_train: 24,
                heldout_per_speaker: 2,
                num_speakers: 2,
                max_len: 6,
                ..CorpusConfig::default()
            },
            model: ModelConfig {
                num_layers: 2,
                width: 8,
                heads: 2,
                text_tap: 1,
                speech_tap: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                total_updates: 6,
                warmup_updates: 2,
                batch_size: 3,
                eval_every: 3,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig { nfe_steps: 2, ..SamplerConfig::default() },
            ..ExperimentConfig::default()
        };
        c.sync();
        c
    }

    fn trainer(cfg: &ExperimentConfig) -> Trainer {
        let corpus = Arc::new(Corpus::generate(&cfg.corpus).unwrap());
        Trainer::new(cfg.clone(), corpus).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig { warmup_updates: 500, total_updates: 5000, lr_peak: 7.5e-4, ..TrainConfig::default() };
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(500, &c), 7.5e-4);
        assert_abs_diff_eq!(lr_schedule(2750, &c), 7.5e-4 / 2.0, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_schedule(250, &c), 7.5e-4 / 2.0, epsilon = 1e-18);
        assert_eq!(lr_schedule(5000, &c), 0.0);
        assert_eq!(lr_schedule(6000, &c), 0.0);
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -3.0]).unwrap()];
        let mut s = AdamState::zeros_like(&p);
        let hp = AdamWParams { weight_decay: 0.0, ..AdamWParams::default() };
        adamw_update(&mut p, &[vec![0.0, 0.0]], &mut s, 0.1, &hp).unwrap();
        assert_eq!(p[0].data(), &[1.0, -3.0]);
        assert!(adamw_update(&mut p, &[vec![0.0, 0.0]], &mut s, -0.1, &hp).is_err());
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut p = vec![Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap()];
        let mut s = AdamState::zeros_like(&p);
        let hp = AdamWParams { weight_decay: 0.0, ..AdamWParams::default() };
        adamw_update(&mut p, &[vec![0.3, -2.0, 1e-3]], &mut s, 0.01, &hp).unwrap();
        assert_abs_diff_eq!(p[0].data()[0], -0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p[0].data()[1], 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p[0].data()[2], -0.01, epsilon = 1e-7);
    }

    #[test]
    fn adamw_minimises_parabola() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::zeros_like(&p);
        let hp = AdamWParams::default();
        let mut reached = None;
        for k in 0..2000 {
            let g = 2.0 * p[0].item();
            adamw_update(&mut p, &[vec![g]], &mut s, 0.01, &hp).unwrap();
            if p[0].item().abs() < 1e-3 && reached.is_none() {
                reached = Some(k);
            }
        }
        assert!(reached.is_some(), "final {}", p[0].item());
        assert!(p[0].item().abs() < 1e-2);
    }

    #[test]
    fn ema_examples() {
        let p = vec![Tensor::scalar(1.0)];
        let mut e = vec![Tensor::scalar(0.0)];
        ema_update(&mut e, &p, 0.5).unwrap();
        ema_update(&mut e, &p, 0.5).unwrap();
        assert_eq!(e[0].item(), 0.75);
        let mut e = vec![Tensor::scalar(-4.0)];
        ema_update(&mut e, &p, 0.0).unwrap();
        assert_eq!(e[0].item(), 1.0);
        let mut e = vec![Tensor::scalar(0.0)];
        let mut gap = 1.0;
        for _ in 0..5 {
            ema_update(&mut e, &p, 0.9).unwrap();
            let ng = 1.0 - e[0].item();
            assert_abs_diff_eq!(ng, gap * 0.9, epsilon = 1e-15);
            gap = ng;
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert_abs_diff_eq!(g[0][0], 0.6, epsilon = 1e-15);
        let mut g = vec![vec![0.3]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0][0], 0.3);
    }

    #[test]
    fn composition_arithmetic() {
        let l = LossBreakdown::compose(1, 1.0, 2.0, 3.0, 0.1, 1.0);
        assert_abs_diff_eq!(l.l_total, 4.2, epsilon = 1e-12);
        let l = LossBreakdown::compose(1, 1.25, 2.0, 3.0, 0.0, 0.0);
        assert_eq!(l.l_total, 1.25);
    }

    #[test]
    fn config_round_trip() {
        let c = tiny_config();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::parse("train.nope = 1").is_err());
        assert!(ExperimentConfig::parse("other.x = 1").is_err());
        assert!(ExperimentConfig::parse("model.text_tap = 9").is_err());
        let d = ExperimentConfig::parse("").unwrap();
        assert_eq!(d.train.lambda_text, 0.1);
        assert_eq!(d.train.lambda_speech, 1.0);
    }

    #[test]
    fn zero_lambdas_give_cfm_total_and_match_disabled() {
        let mut c = tiny_config();
        c.train.lambda_text = 0.0;
        c.train.lambda_speech = 0.0;
        let mut t0 = trainer(&c);
        let mut d = c.clone();
        d.train.enable_text = false;
        d.train.enable_speech = false;
        let mut t1 = trainer(&d);
        for _ in 0..3 {
            let a = t0.train_step().unwrap();
            let b = t1.train_step().unwrap();
            assert_eq!(a.l_total, a.l_cfm);
            assert_eq!(a.l_cfm.to_bits(), b.l_cfm.to_bits());
            assert!(a.l_text > 0.0 && b.l_text == 0.0);
        }
        assert_eq!(t0.params, t1.params);
    }

    #[test]
    fn logged_total_is_weighted_sum() {
        let c = tiny_config();
        let mut t = trainer(&c);
        for _ in 0..3 {
            let l = t.train_step().unwrap();
            let expect = l.l_cfm + 0.1 * l.l_text + 1.0 * l.l_speech;
            assert!((l.l_total - expect).abs() <= 1e-12);
            assert!(l.l_text > 0.0 && l.l_speech != 0.0);
        }
    }

    #[test]
    fn seeds_make_runs_identical() {
        let c = tiny_config();
        let mut a = trainer(&c);
        let mut b = trainer(&c);
        let ra = a.run(|_| Ok(())).unwrap();
        let rb = b.run(|_| Ok(())).unwrap();
        assert_eq!(metrics_csv(&ra), metrics_csv(&rb));
        assert_eq!(ra.len(), 6);
        assert!(ra[2].eval.is_some() && ra[5].eval.is_some() && ra[0].eval.is_none());
    }

    #[test]
    fn baseline_and_aligned_share_draws() {
        let c = tiny_config();
        let mut a = trainer(&c);
        let mut base = c.clone();
        base.train = base.train.baseline();
        let mut b = trainer(&base);
        for _ in 0..4 {
            assert_eq!(a.draw_batch().unwrap(), b.draw_batch().unwrap());
        }
        let a = trainer(&c);
        let b = trainer(&base);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn checkpoint_resume_is_bitwise() {
        let c = tiny_config();
        let mut full = trainer(&c);
        let mut half = trainer(&c);
        for _ in 0..3 {
            full.train_step().unwrap();
            half.train_step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        half.save(&path).unwrap();
        let mut resumed = Trainer::load(&path, half.corpus.clone()).unwrap();
        assert_eq!(resumed.step(), 3);
        for _ in 0..2 {
            let a = full.train_step().unwrap();
            let b = resumed.train_step().unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(full.params, resumed.params);
        assert_eq!(full.ema, resumed.ema);
        let (_, _, ema) = load_model(&full.checkpoint()).unwrap();
        assert_eq!(ema.tensors(), &full.ema.tensors()[..ema.len()]);
    }

    #[test]
    fn extractor_is_untouched_and_ema_is_separate() {
        let c = tiny_config();
        let mut t = trainer(&c);
        let before = t.extractor.clone();
        let p0 = t.params.clone();
        t.train_step().unwrap();
        assert_eq!(t.extractor, before);
        assert_ne!(t.params, p0);
        assert_ne!(t.ema, t.params);
    }

    #[test]
    fn experiment_writes_paired_outputs() {
        let c = tiny_config();
        let mut base = c.clone();
        base.train = base.train.baseline();
        let corpus = Arc::new(Corpus::generate(&c.corpus).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let r = run_experiment(corpus.clone(), &base, &c, Some(dir.path())).unwrap();
        assert_eq!(r.baseline_masks, r.adma_masks);
        assert_eq!(r.baseline_masks.len(), 10);
        assert_eq!(r.comparison().len(), 2);
        for f in ["baseline.csv", "adma.csv", "comparison.csv", "baseline_masks.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let mut other = c.clone();
        other.train.seed = 9;
        assert!(run_experiment(corpus, &base, &other, None).is_err());
    }
}
