//! Proxy metrics on the held-out split, tap/variant sweeps and paired
//! plot data.
//!
//! Cross-sentence protocol: for every speaker with at least two held-out
//! utterances `u_0..u_{n-1}`, pair `i` uses `u_i` as the prompt and the
//! tokens of `u_{(i+1) mod n}` as the generation target. The target is cut
//! to `max_target_tokens`; the prompt contributes its first
//! `max(1, floor(prompt_ratio · T_target))` tokens of audio. The masked span
//! covers exactly the target frames.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{float, parse_value, unknown_key, Section};
use crate::corpus::{decode_features, estimate_offset, pad_tokens, Corpus, TemporalMask};
use crate::error::{Error, Result};
use crate::flow_matching::{integrate, SamplerConfig};
use crate::model::Backbone;
use crate::numerics::{ParamStore, Tensor};
use crate::speech_alignment::LossVariant;
use crate::trainer::{ExperimentConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub max_target_tokens: usize,
    pub prompt_ratio: f64,
    /// Seed of the sampling noise; pair `i` uses stream `i`.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_target_tokens: 9,
            prompt_ratio: 0.4,
            seed: 0,
        }
    }
}

impl Section for EvalConfig {
    const PREFIX: &'static str = "eval";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = Self::PREFIX;
        match key {
            "max_target_tokens" => self.max_target_tokens = parse_value(p, key, value)?,
            "prompt_ratio" => self.prompt_ratio = parse_value(p, key, value)?,
            "seed" => self.seed = parse_value(p, key, value)?,
            _ => return Err(unknown_key(p, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("max_target_tokens", self.max_target_tokens.to_string()),
            ("prompt_ratio", float(self.prompt_ratio)),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Total edit distance over total target length.
    pub proxy_ser: f64,
    /// Mean cosine between recovered speaker offsets of generated and
    /// prompt regions.
    pub proxy_sim: f64,
    pub num_utterances: usize,
    pub sampler: SamplerConfig,
}

/// One prompt/target pair, ready for infilling.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub speaker: usize,
    /// Prompt audio followed by zeros in the target region.
    pub masked: Tensor,
    pub mask: TemporalMask,
    pub padded_tokens: Vec<usize>,
    pub prompt_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    /// Ground-truth features of the target utterance, cut to the target.
    pub reference: Tensor,
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn cut_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    x.slice_cols(start, len)
}

/// Builds the cross-sentence pairs. Speakers with fewer than two held-out
/// utterances are skipped with a warning.
pub fn eval_items(corpus: &Corpus, cfg: &EvalConfig) -> Result<Vec<EvalItem>> {
    if cfg.max_target_tokens == 0 || !(cfg.prompt_ratio >= 0.0) {
        return Err(Error::Config("eval.max_target_tokens must be positive and eval.prompt_ratio non-negative".into()));
    }
    let d = corpus.cfg.frames_per_token;
    let f = corpus.cfg.feature_dim;
    let filler = corpus.cfg.filler_id();
    let mut items = Vec::new();
    for s in 0..corpus.cfg.num_speakers {
        let utts: Vec<_> = corpus.heldout.iter().filter(|u| u.speaker_id == s).collect();
        if utts.len() < 2 {
            log::warn!("speaker {s} has {} held-out utterance(s); skipped", utts.len());
            continue;
        }
        for i in 0..utts.len() {
            let (a, b) = (utts[i], utts[(i + 1) % utts.len()]);
            let tb = b.tokens.len().min(cfg.max_target_tokens);
            let p = ((cfg.prompt_ratio * tb as f64).floor() as usize).clamp(1, a.tokens.len());
            let n = (p + tb) * d;
            let mut masked = Tensor::zeros(&[f, n]);
            for ch in 0..f {
                for j in 0..p * d {
                    masked.set(ch, j, a.features.at(ch, j));
                }
            }
            let prompt_tokens = a.tokens[..p].to_vec();
            let target_tokens = b.tokens[..tb].to_vec();
            let tokens = [prompt_tokens.clone(), target_tokens.clone()].concat();
            items.push(EvalItem {
                speaker: s,
                masked,
                mask: TemporalMask::span(n, p * d, n),
                padded_tokens: pad_tokens(&tokens, n, filler),
                prompt_tokens,
                target_tokens,
                reference: cut_cols(&b.features, 0, tb * d)?,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::Config("no speaker has two held-out utterances to pair".into()));
    }
    Ok(items)
}

/// Scores generated `[F×N]` features of one item: `(edits, sim)`.
pub fn score_item(corpus: &Corpus, item: &EvalItem, generated: &Tensor) -> Result<(usize, f64)> {
    let d = corpus.cfg.frames_per_token;
    let p = item.prompt_tokens.len() * d;
    let region = cut_cols(generated, p, generated.cols() - p)?;
    let (decoded, _) = decode_features(&corpus.bank, &region)?;
    let edits = edit_distance(&decoded, &item.target_tokens);
    let gen_offset = estimate_offset(&corpus.bank, &region, &decoded)?;
    let prompt = cut_cols(&item.masked, 0, p)?;
    let prompt_offset = estimate_offset(&corpus.bank, &prompt, &item.prompt_tokens)?;
    Ok((edits, cosine(&gen_offset, &prompt_offset)))
}

/// Runs `generate` on every pair in parallel and aggregates in pair order.
pub fn evaluate_with<G>(corpus: &Corpus, sampler: &SamplerConfig, cfg: &EvalConfig, generate: G) -> Result<EvalReport>
where
    G: Fn(&EvalItem, &mut ChaCha8Rng) -> Result<Tensor> + Sync,
{
    let items = eval_items(corpus, cfg)?;
    let scores = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let x = generate(item, &mut rng)?;
            score_item(corpus, item, &x)
        })
        .collect::<Result<Vec<_>>>()?;
    let edits: usize = scores.iter().map(|s| s.0).sum();
    let total: usize = items.iter().map(|i| i.target_tokens.len()).sum();
    let sim = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
    Ok(EvalReport {
        proxy_ser: edits as f64 / total as f64,
        proxy_sim: sim,
        num_utterances: items.len(),
        sampler: sampler.clone(),
    })
}

/// Infills every pair with the model under `params` (pass EMA weights).
pub fn evaluate(
    model: &Backbone,
    params: &ParamStore,
    corpus: &Corpus,
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_with(corpus, sampler, cfg, |item, rng| {
        integrate(model, params, &item.masked, &item.mask, &item.padded_tokens, sampler, rng)
    })
}

/// Metrics of the ground-truth target features pasted into the gap.
pub fn evaluate_ground_truth(corpus: &Corpus, cfg: &EvalConfig) -> Result<EvalReport> {
    evaluate_with(corpus, &SamplerConfig::default(), cfg, |item, _| {
        let p = item.prompt_tokens.len() * corpus.cfg.frames_per_token;
        let mut x = item.masked.clone();
        for ch in 0..x.rows() {
            for j in 0..item.reference.cols() {
                x.set(ch, p + j, item.reference.at(ch, j));
            }
        }
        Ok(x)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    TextTap,
    SpeechTap,
    DualTaps,
    LossVariant,
    TargetSelection,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] = [
        SweepAxis::TextTap,
        SweepAxis::SpeechTap,
        SweepAxis::DualTaps,
        SweepAxis::LossVariant,
        SweepAxis::TargetSelection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TextTap => "text_tap",
            SweepAxis::SpeechTap => "speech_tap",
            SweepAxis::DualTaps => "dual_taps",
            SweepAxis::LossVariant => "loss_variant",
            SweepAxis::TargetSelection => "target_selection",
        }
    }

    /// Default values for a backbone with `num_layers` blocks. Tap sweeps
    /// use every second layer; the dual sweep includes `(L/2, L−1)`.
    pub fn default_values(self, num_layers: usize) -> Vec<String> {
        let l = num_layers;
        match self {
            SweepAxis::TextTap | SweepAxis::SpeechTap => (1..=l / 2).map(|i| (2 * i).to_string()).collect(),
            SweepAxis::DualTaps => {
                let mut v = vec![(l / 2, l.saturating_sub(1)), (l / 4, l / 2), (l / 2, l / 2), (l.saturating_sub(1), l / 2)];
                v.retain(|&(a, b)| a >= 1 && b >= 1);
                v.dedup();
                v.iter().map(|(a, b)| format!("{a}:{b}")).collect()
            }
            SweepAxis::LossVariant => LossVariant::ALL.iter().map(|v| v.to_string()).collect(),
            SweepAxis::TargetSelection => vec!["last".into(), "avg".into()],
        }
    }

    /// Applies one axis value to a copy of `base`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        let tap = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad tap index `{v}`")))
        };
        match self {
            SweepAxis::TextTap => c.model.text_tap = tap(value)?,
            SweepAxis::SpeechTap => c.model.speech_tap = tap(value)?,
            SweepAxis::DualTaps => {
                let (a, b) = value
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("dual_taps value `{value}` must be `text:speech`")))?;
                c.model.text_tap = tap(a)?;
                c.model.speech_tap = tap(b)?;
            }
            SweepAxis::LossVariant => c.speech.variant = value.parse()?,
            SweepAxis::TargetSelection => c.speech.selection = value.parse()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn with_defaults(axis: SweepAxis, base: ExperimentConfig) -> Self {
        Self {
            values: axis.default_values(base.model.num_layers),
            axis,
            base,
        }
    }

    /// Fully resolved per-row configs; invalid values become errors.
    pub fn row_configs(&self) -> Vec<Result<ExperimentConfig>> {
        self.values.iter().map(|v| self.axis.apply(&self.base, v)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    pub result: std::result::Result<EvalReport, String>,
}

pub const SWEEP_HEADER: &str = "axis,value,status,proxy_ser,proxy_sim,num_utterances,error";

/// Trains one run from `cfg` on `corpus` and evaluates its final EMA weights.
pub fn run_single(cfg: &ExperimentConfig, corpus: Arc<Corpus>) -> Result<EvalReport> {
    let mut t = Trainer::new(cfg.clone(), corpus)?;
    while t.step() < cfg.train.total_updates {
        t.train_step()?;
    }
    t.evaluate()
}

/// Trains one run per axis value with identical seeds. Failures are
/// recorded in their row and the sweep continues.
pub fn run_sweep(spec: &SweepSpec, corpus: Arc<Corpus>) -> Vec<SweepRow> {
    spec.values
        .iter()
        .zip(spec.row_configs())
        .map(|(value, cfg)| {
            let result = cfg
                .and_then(|c| run_single(&c, corpus.clone()))
                .map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::warn!("sweep row {}={value} failed: {e}", spec.axis.name());
            }
            SweepRow {
                value: value.clone(),
                result,
            }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = match &r.result {
            Ok(e) => writeln!(
                out,
                "{},{},ok,{},{},{},",
                axis.name(),
                csv_field(&r.value),
                e.proxy_ser,
                e.proxy_sim,
                e.num_utterances
            ),
            Err(msg) => writeln!(out, "{},{},failed,,,,{}", axis.name(), csv_field(&r.value), csv_field(msg)),
        };
    }
    out
}

/// One parsed metrics row; absent eval fields are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub l_cfm: f64,
    pub l_total: f64,
    pub proxy_ser: Option<f64>,
    pub proxy_sim: Option<f64>,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(crate::trainer::METRICS_HEADER) {
        return Err(Error::Format("metrics CSV header mismatch".into()));
    }
    let bad = |n: usize| Error::Format(format!("malformed metrics CSV line {n}"));
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(i + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad(i + 2))?,
                l_cfm: num(f[1])?,
                l_total: num(f[4])?,
                proxy_ser: opt(f[6])?,
                proxy_sim: opt(f[7])?,
            })
        })
        .collect()
}

pub const PLOT_HEADER: &str = "step,baseline_l_cfm,adma_l_cfm,baseline_ser,adma_ser,baseline_sim,adma_sim";

/// Joins two metrics CSVs on step for convergence plots. Every step present
/// in both is emitted; eval columns are empty between eval points.
pub fn plotdata(baseline_csv: &str, adma_csv: &str) -> Result<String> {
    let b = parse_metrics_csv(baseline_csv)?;
    let a = parse_metrics_csv(adma_csv)?;
    let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = format!("{PLOT_HEADER}\n");
    for rb in &b {
        if let Some(ra) = a.iter().find(|r| r.step == rb.step) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                rb.step,
                rb.l_cfm,
                ra.l_cfm,
                o(rb.proxy_ser),
                o(ra.proxy_ser),
                o(rb.proxy_sim),
                o(ra.proxy_sim)
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::corpus::CorpusConfig;
    use crate::model::ModelConfig;

    fn small_corpus(noise: f64) -> Corpus {
        Corpus::generate(&CorpusConfig {
            num_train: 8,
            num_speakers: 3,
            heldout_per_speaker: 3,
            noise_std: noise,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&['a', 'b', 'c'], &['a', 'c']), 1);
        assert_eq!(edit_distance(&['a', 'b'], &['b', 'a']), 2);
        assert_eq!(edit_distance::<u8>(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
    }

    #[test]
    fn pairs_cover_every_speaker() {
        let c = small_corpus(0.05);
        let items = eval_items(&c, &EvalConfig::default()).unwrap();
        assert_eq!(items.len(), 9);
        for it in &items {
            assert!(it.target_tokens.len() <= 9);
            assert!(!it.prompt_tokens.is_empty());
            let n = it.masked.cols();
            assert_eq!(it.mask.count(), it.target_tokens.len() * 4);
            assert!(it.mask.is_masked(n - 1) && !it.mask.is_masked(0));
            assert_eq!(it.padded_tokens.len(), n);
        }
    }

    #[test]
    fn lonely_speakers_are_skipped() {
        let mut c = small_corpus(0.05);
        c.heldout.retain(|u| u.speaker_id != 1);
        let first = c.heldout.iter().position(|u| u.speaker_id == 2).unwrap();
        c.heldout.drain(first..first + 2);
        let items = eval_items(&c, &EvalConfig::default()).unwrap();
        assert!(items.iter().all(|i| i.speaker == 0));
        c.heldout.retain(|u| u.speaker_id != 0);
        assert!(eval_items(&c, &EvalConfig::default()).is_err());
    }

    #[test]
    fn ground_truth_scores_perfectly_without_noise() {
        let c = small_corpus(0.0);
        let r = evaluate_ground_truth(&c, &EvalConfig::default()).unwrap();
        assert_eq!(r.proxy_ser, 0.0);
        assert!((r.proxy_sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn copying_the_prompt_offset_gives_unit_similarity() {
        let c = small_corpus(0.0);
        let items = eval_items(&c, &EvalConfig::default()).unwrap();
        let it = &items[0];
        let d = 4;
        let p = it.prompt_tokens.len() * d;
        let mut x = it.masked.clone();
        let off = c.bank.offset(it.speaker).to_vec();
        for (b, &tok) in it.target_tokens.iter().enumerate() {
            let tpl = c.bank.template(tok);
            for ch in 0..x.rows() {
                for j in 0..d {
                    x.set(ch, p + b * d + j, tpl[ch * d + j] + off[ch]);
                }
            }
        }
        let (edits, sim) = score_item(&c, it, &x).unwrap();
        assert_eq!(edits, 0);
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let c = small_corpus(0.05);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mc = ModelConfig {
            vocab: 13,
            feature_dim: 16,
            ..ModelConfig::tiny()
        };
        let model = Backbone::new(mc, &mut store, &mut rng).unwrap();
        let before = store.clone();
        let sampler = SamplerConfig { nfe_steps: 2, ..SamplerConfig::default() };
        let r = evaluate(&model, &store, &c, &sampler, &EvalConfig::default()).unwrap();
        assert_eq!(store, before);
        assert!(r.proxy_ser > 0.5, "{}", r.proxy_ser);
        let again = evaluate(&model, &store, &c, &sampler, &EvalConfig::default()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn sweep_defaults() {
        let base = ExperimentConfig::default();
        assert_eq!(SweepAxis::TextTap.default_values(8), ["2", "4", "6", "8"]);
        assert!(SweepAxis::DualTaps.default_values(8).contains(&"4:7".to_string()));
        assert_eq!(SweepAxis::LossVariant.default_values(8), ["neg_cos", "l1", "logsig_cos"]);
        let spec = SweepSpec::with_defaults(SweepAxis::TextTap, base.clone());
        let cfgs: Vec<_> = spec.row_configs().into_iter().map(Result::unwrap).collect();
        assert_eq!(cfgs.len(), 4);
        assert!(cfgs.iter().all(|c| c.train.seed == base.train.seed && c.corpus == base.corpus));
        assert!(SweepAxis::TextTap.apply(&base, "9").is_err());
        assert_eq!("dual_taps".parse::<SweepAxis>().unwrap(), SweepAxis::DualTaps);
    }

    #[test]
    fn sweep_marks_failed_rows_and_reproduces() {
        let mut base = ExperimentConfig {
            corpus: CorpusConfig {
                num_train: 6,
                num_speakers: 2,
                heldout_per_speaker: 2,
                max_len: 5,
                ..CorpusConfig::default()
            },
            model: ModelConfig::tiny(),
            ..ExperimentConfig::default()
        };
        base.train.total_updates = 2;
        base.train.warmup_updates = 1;
        base.train.batch_size = 2;
        base.sampler.nfe_steps = 2;
        base.sync();
        let corpus = Arc::new(Corpus::generate(&base.corpus).unwrap());
        let spec = SweepSpec {
            axis: SweepAxis::TextTap,
            values: vec!["1".into(), "5".into(), "2".into()],
            base,
        };
        let rows = run_sweep(&spec, corpus.clone());
        assert!(rows[0].result.is_ok() && rows[1].result.is_err() && rows[2].result.is_ok());
        let csv = sweep_csv(spec.axis, &rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("text_tap,5,failed"));
        let again = run_sweep(&SweepSpec { values: vec!["2".into()], ..spec }, corpus);
        assert_eq!(again[0].result, rows[2].result);
    }

    #[test]
    fn plotdata_joins_on_step() {
        let h = crate::trainer::METRICS_HEADER;
        let b = format!("{h}\n1,2,0,0,2,0.1,,,\n2,1.5,0,0,1.5,0.1,0.5,0.9,\n");
        let a = format!("{h}\n1,2.5,1,1,3.6,0.1,,,\n2,1,1,1,2.1,0.1,0.25,0.95,\n");
        let p = plotdata(&b, &a).unwrap();
        let lines: Vec<_> = p.lines().collect();
        assert_eq!(lines[0], PLOT_HEADER);
        assert_eq!(lines[1], "1,2,2.5,,,,");
        assert_eq!(lines[2], "2,1.5,1,0.5,0.25,0.9,0.95");
        assert!(plotdata("nope", &a).is_err());
    }
}
