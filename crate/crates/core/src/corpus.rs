//! Synthetic paired text/feature corpus.
//!
//! Every content token `k < K` owns a fixed `F×d` template; an utterance is
//! the concatenation of its tokens' templates, shifted per channel by the
//! speaker's offset vector, plus optional Gaussian noise. Decoding is exact
//! nearest-template search, so intelligibility and speaker fidelity of any
//! feature matrix can be scored against ground truth.
//!
//! # Binary record layout
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//!
//! ```text
//! magic      5 bytes  "ADMA1"
//! K F d S    4 × u32
//! T          u32      number of tokens
//! tokens     T × u32
//! features   F × (T·d) f64, row-major (channel-major)
//! ```
//!
//! A corpus directory holds `bank.cfg` (the generating configuration),
//! and `train/` and `heldout/` subdirectories, each with one
//! `utt_NNNNNN.bin` record per utterance and a `manifest.csv` with header
//! `id,speaker,length` (length in tokens).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{float, parse_value, render, unknown_key, Section};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RECORD_MAGIC: &[u8; 5] = b"ADMA1";

const BANK_RETRIES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Content vocabulary size `K`; id `K` is the filler token.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub num_speakers: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_std: f64,
    /// Standard deviation of the per-speaker offset vectors.
    pub offset_std: f64,
    pub num_train: usize,
    pub heldout_per_speaker: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            feature_dim: 16,
            frames_per_token: 4,
            num_speakers: 8,
            min_len: 4,
            max_len: 12,
            noise_std: 0.05,
            offset_std: 0.5,
            num_train: 1024,
            heldout_per_speaker: 4,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("corpus.vocab_size must be at least 2");
        }
        if self.feature_dim < 4 {
            return bad("corpus.feature_dim must be at least 4");
        }
        if self.frames_per_token < 1 {
            return bad("corpus.frames_per_token must be at least 1");
        }
        if self.num_speakers < 1 {
            return bad("corpus.num_speakers must be at least 1");
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad("corpus length range must satisfy 1 <= min_len <= max_len");
        }
        if !(self.noise_std >= 0.0) || !(self.offset_std >= 0.0) {
            return bad("corpus noise/offset std must be non-negative");
        }
        Ok(())
    }

    pub fn filler_id(&self) -> usize {
        self.vocab_size
    }
}

/// Per-symbol templates and per-speaker channel offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerBank {
    vocab_size: usize,
    feature_dim: usize,
    frames_per_token: usize,
    /// `[K × (F·d)]`, each row an `F×d` block in channel-major order.
    templates: Tensor,
    /// `[S × F]`
    offsets: Tensor,
}

impl SpeakerBank {
    pub fn from_parts(templates: Tensor, offsets: Tensor, frames_per_token: usize) -> Result<Self> {
        let k = templates.rows();
        let f = offsets.cols();
        if templates.shape().len() != 2
            || offsets.shape().len() != 2
            || templates.cols() != f * frames_per_token
        {
            return Err(Error::shape(
                "SpeakerBank::from_parts",
                templates.shape(),
                offsets.shape(),
            ));
        }
        Ok(Self {
            vocab_size: k,
            feature_dim: f,
            frames_per_token,
            templates,
            offsets,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn frames_per_token(&self) -> usize {
        self.frames_per_token
    }

    pub fn num_speakers(&self) -> usize {
        self.offsets.rows()
    }

    pub fn template(&self, token: usize) -> &[f64] {
        self.templates.row(token)
    }

    pub fn offset(&self, speaker: usize) -> &[f64] {
        self.offsets.row(speaker)
    }

    pub fn templates(&self) -> &Tensor {
        &self.templates
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn min_template_distance(&self) -> f64 {
        let k = self.vocab_size;
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let d = l2(self.template(a), self.template(b));
                best = best.min(d);
            }
        }
        best
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Draws templates and offsets from the seeded generator, redrawing the
/// template set until every pair is separated by more than
/// `4·noise_std·sqrt(F·d)`.
pub fn build_bank(cfg: &CorpusConfig) -> Result<SpeakerBank> {
    cfg.validate()?;
    let (k, f, d) = (cfg.vocab_size, cfg.feature_dim, cfg.frames_per_token);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let margin = 4.0 * cfg.noise_std * ((f * d) as f64).sqrt();
    let offsets = Tensor::randn(&[cfg.num_speakers, f], cfg.offset_std, &mut rng);
    for _ in 0..BANK_RETRIES {
        let templates = Tensor::randn(&[k, f * d], 1.0, &mut rng);
        let bank = SpeakerBank::from_parts(templates, offsets.clone(), d)?;
        if bank.min_template_distance() > margin {
            return Ok(bank);
        }
    }
    Err(Error::Degenerate(format!(
        "no template set with pairwise distance > {margin:.4} after {BANK_RETRIES} draws \
         (K={k}, F={f}, d={d})"
    )))
}

/// Contiguous temporal mask; `true` marks a frame to be generated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalMask(Vec<bool>);

impl TemporalMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    /// Frames `start..end` masked.
    pub fn span(n: usize, start: usize, end: usize) -> Self {
        Self((0..n).map(|i| i >= start && i < end).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn is_masked(&self, frame: usize) -> bool {
        self.0[frame]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_contiguous(&self) -> bool {
        let first = self.0.iter().position(|&b| b);
        let last = self.0.iter().rposition(|&b| b);
        match (first, last) {
            (Some(a), Some(b)) => self.0[a..=b].iter().all(|&x| x),
            _ => true,
        }
    }

    /// The `F×N` 0/1 matrix obtained by broadcasting over channels.
    pub fn to_feature_mask(&self, feature_dim: usize) -> Tensor {
        let n = self.0.len();
        let mut t = Tensor::zeros(&[feature_dim, n]);
        for f in 0..feature_dim {
            for (i, &b) in self.0.iter().enumerate() {
                if b {
                    t.set(f, i, 1.0);
                }
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    /// Clean features `x1`, `[F × N]` with `N = tokens.len() · d`.
    pub features: Tensor,
    pub speaker_id: usize,
    /// `tokens` followed by the filler id up to length `N`.
    pub padded_tokens: Vec<usize>,
    pub mask: TemporalMask,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.cols()
    }
}

pub fn pad_tokens(tokens: &[usize], num_frames: usize, filler: usize) -> Vec<usize> {
    let mut out = tokens.to_vec();
    out.resize(num_frames.max(tokens.len()), filler);
    out
}

/// Tiles templates and offset for `tokens`; noise is added from `seed`.
/// The stored mask is empty.
pub fn synthesize(
    bank: &SpeakerBank,
    tokens: &[usize],
    speaker_id: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Utterance> {
    let (k, f, d) = (bank.vocab_size, bank.feature_dim, bank.frames_per_token);
    if let Some(&t) = tokens.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("token {t} out of range (K = {k})")));
    }
    if speaker_id >= bank.num_speakers() {
        return Err(Error::invalid(format!(
            "speaker {speaker_id} out of range (S = {})",
            bank.num_speakers()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("utterance needs at least one token"));
    }
    let n = tokens.len() * d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::zeros(&[f, n]);
    let offset = bank.offset(speaker_id);
    for (t, &tok) in tokens.iter().enumerate() {
        let tpl = bank.template(tok);
        for ch in 0..f {
            for j in 0..d {
                let v = tpl[ch * d + j] + offset[ch];
                x.set(ch, t * d + j, v);
            }
        }
    }
    if noise_std > 0.0 {
        for v in x.data_mut() {
            *v += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Utterance {
        tokens: tokens.to_vec(),
        features: x,
        speaker_id,
        padded_tokens: pad_tokens(tokens, n, k),
        mask: TemporalMask::none(n),
    })
}

/// A single masked span of `round(r·N)` frames (at least one), `r` uniform
/// in `ratio_range`, starting at a uniform position.
pub fn sample_mask<R: Rng + ?Sized>(
    n: usize,
    ratio_range: (f64, f64),
    rng: &mut R,
) -> Result<TemporalMask> {
    let (lo, hi) = ratio_range;
    if n == 0 {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "mask ratio range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
        )));
    }
    let r = lo + (hi - lo) * rng.gen::<f64>();
    let len = ((r * n as f64).round() as usize).clamp(1, n);
    let start = rng.gen_range(0..=n - len);
    Ok(TemporalMask::span(n, start, start + len))
}

/// `x_m = (1 − m) ⊙ x1` with the temporal mask broadcast over channels.
pub fn apply_mask(x1: &Tensor, mask: &TemporalMask) -> Result<Tensor> {
    if x1.shape().len() != 2 || x1.cols() != mask.len() {
        return Err(Error::shape("apply_mask", x1.shape(), &[mask.len()]));
    }
    let n = mask.len();
    let mut out = x1.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.is_masked(i % n) {
            *v = 0.0;
        }
    }
    Ok(out)
}

fn block_distance2(x: &Tensor, block: usize, d: usize, tpl: &[f64], offset: &[f64]) -> f64 {
    let f = x.rows();
    let mut acc = 0.0;
    for ch in 0..f {
        for j in 0..d {
            let r = x.at(ch, block * d + j) - tpl[ch * d + j] - offset[ch];
            acc += r * r;
        }
    }
    acc
}

/// Nearest-template decoding under the best-fitting speaker offset.
///
/// The speaker is the one whose offset minimises the summed per-block
/// nearest-template residual; ties in both searches go to the lowest index.
pub fn decode_features(bank: &SpeakerBank, x: &Tensor) -> Result<(Vec<usize>, usize)> {
    let d = bank.frames_per_token;
    if x.shape().len() != 2 || x.rows() != bank.feature_dim {
        return Err(Error::shape(
            "decode_features",
            x.shape(),
            &[bank.feature_dim],
        ));
    }
    let n = x.cols();
    if !n.is_multiple_of(d) {
        return Err(Error::invalid(format!(
            "frame count {n} is not a multiple of frames_per_token {d}"
        )));
    }
    let blocks = n / d;
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for s in 0..bank.num_speakers() {
        let offset = bank.offset(s);
        let mut total = 0.0;
        let mut toks = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let mut arg = 0;
            let mut min = f64::INFINITY;
            for k in 0..bank.vocab_size {
                let dist = block_distance2(x, b, d, bank.template(k), offset);
                if dist < min {
                    min = dist;
                    arg = k;
                }
            }
            total += min;
            toks.push(arg);
        }
        if best.as_ref().is_none_or(|(t, _, _)| total < *t) {
            best = Some((total, s, toks));
        }
    }
    let (_, s, toks) = best.expect("bank has at least one speaker");
    Ok((toks, s))
}

/// Per-channel mean of `x` minus the tiled templates of `tokens`: the
/// least-squares estimate of the speaker offset.
pub fn estimate_offset(bank: &SpeakerBank, x: &Tensor, tokens: &[usize]) -> Result<Vec<f64>> {
    let d = bank.frames_per_token;
    if x.cols() != tokens.len() * d || x.rows() != bank.feature_dim {
        return Err(Error::shape(
            "estimate_offset",
            x.shape(),
            &[bank.feature_dim, tokens.len() * d],
        ));
    }
    let n = x.cols() as f64;
    let mut out = vec![0.0; bank.feature_dim];
    for (ch, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (b, &tok) in tokens.iter().enumerate() {
            let tpl = bank.template(tok);
            for j in 0..d {
                acc += x.at(ch, b * d + j) - tpl[ch * d + j];
            }
        }
        *o = acc / n;
    }
    Ok(out)
}

/// The generated corpus: bank plus training and held-out utterances.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub cfg: CorpusConfig,
    pub bank: SpeakerBank,
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
}

impl Corpus {
    /// Pure function of `cfg` (including its seed).
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        let bank = build_bank(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let draw = |speaker: usize, rng: &mut ChaCha8Rng| -> Result<Utterance> {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
            let noise_seed = rng.gen::<u64>();
            let mut utt = synthesize(&bank, &tokens, speaker, cfg.noise_std, noise_seed)?;
            utt.mask = sample_mask(utt.num_frames(), (0.7, 1.0), rng)?;
            Ok(utt)
        };
        let train = (0..cfg.num_train)
            .map(|i| draw(i % cfg.num_speakers, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut heldout = Vec::with_capacity(cfg.num_speakers * cfg.heldout_per_speaker);
        for s in 0..cfg.num_speakers {
            for _ in 0..cfg.heldout_per_speaker {
                heldout.push(draw(s, &mut rng)?);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            bank,
            train,
            heldout,
        })
    }

    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bank.cfg"), render(&self.cfg))?;
        for (name, split) in [("train", &self.train), ("heldout", &self.heldout)] {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            let mut manifest = String::from("id,speaker,length\n");
            for (i, utt) in split.iter().enumerate() {
                let id = format!("utt_{i:06}");
                let mut w = BufWriter::new(fs::File::create(sub.join(format!("{id}.bin")))?);
                write_record(&mut w, &self.cfg, utt)?;
                w.flush()?;
                manifest.push_str(&format!("{id},{},{}\n", utt.speaker_id, utt.tokens.len()));
            }
            fs::write(sub.join("manifest.csv"), manifest)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Corpus::export`]. The bank is rebuilt
    /// from `bank.cfg`; per-utterance masks are not stored and come back empty.
    pub fn import(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("bank.cfg"))?;
        let cfg = crate::config::Config::parse(&text)?.corpus()?;
        let bank = build_bank(&cfg)?;
        let mut splits = Vec::new();
        for name in ["train", "heldout"] {
            let sub = dir.join(name);
            let manifest = fs::read_to_string(sub.join("manifest.csv"))?;
            let mut utts = Vec::new();
            for line in manifest.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 3 {
                    return Err(Error::Format(format!("bad manifest line: {line}")));
                }
                let speaker: usize = cols[1]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad speaker in: {line}")))?;
                let mut r = fs::File::open(sub.join(format!("{}.bin", cols[0])))?;
                let (tokens, features) = read_record(&mut r, &cfg)?;
                let n = features.cols();
                utts.push(Utterance {
                    padded_tokens: pad_tokens(&tokens, n, cfg.filler_id()),
                    tokens,
                    features,
                    speaker_id: speaker,
                    mask: TemporalMask::none(n),
                });
            }
            splits.push(utts);
        }
        let heldout = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            cfg,
            bank,
            train,
            heldout,
        })
    }
}

impl Section for CorpusConfig {
    const PREFIX: &'static str = "corpus";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = Self::PREFIX;
        match key {
            "vocab_size" => self.vocab_size = parse_value(p, key, value)?,
            "feature_dim" => self.feature_dim = parse_value(p, key, value)?,
            "frames_per_token" => self.frames_per_token = parse_value(p, key, value)?,
            "num_speakers" => self.num_speakers = parse_value(p, key, value)?,
            "min_len" => self.min_len = parse_value(p, key, value)?,
            "max_len" => self.max_len = parse_value(p, key, value)?,
            "noise_std" => self.noise_std = parse_value(p, key, value)?,
            "offset_std" => self.offset_std = parse_value(p, key, value)?,
            "num_train" => self.num_train = parse_value(p, key, value)?,
            "heldout_per_speaker" => self.heldout_per_speaker = parse_value(p, key, value)?,
            "seed" => self.seed = parse_value(p, key, value)?,
            _ => return Err(unknown_key(p, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("frames_per_token", self.frames_per_token.to_string()),
            ("num_speakers", self.num_speakers.to_string()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("noise_std", float(self.noise_std)),
            ("offset_std", float(self.offset_std)),
            ("num_train", self.num_train.to_string()),
            ("heldout_per_speaker", self.heldout_per_speaker.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_header<W: Write>(w: &mut W, cfg: &CorpusConfig, tokens: &[usize]) -> Result<()> {
    w.write_all(RECORD_MAGIC)?;
    for v in [
        cfg.vocab_size,
        cfg.feature_dim,
        cfg.frames_per_token,
        cfg.num_speakers,
    ] {
        write_u32(w, v)?;
    }
    write_u32(w, tokens.len())?;
    for &t in tokens {
        write_u32(w, t)?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, cfg: &CorpusConfig) -> Result<Vec<usize>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != RECORD_MAGIC {
        return Err(Error::Format("bad record magic".into()));
    }
    let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?, read_u32(r)?];
    let want = [
        cfg.vocab_size,
        cfg.feature_dim,
        cfg.frames_per_token,
        cfg.num_speakers,
    ];
    if dims != want {
        return Err(Error::Format(format!(
            "record header K/F/d/S {dims:?} does not match configuration {want:?}"
        )));
    }
    let t = read_u32(r)?;
    (0..t).map(|_| read_u32(r)).collect()
}

pub fn write_record<W: Write>(w: &mut W, cfg: &CorpusConfig, utt: &Utterance) -> Result<()> {
    write_header(w, cfg, &utt.tokens)?;
    for v in utt.features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record<R: Read>(r: &mut R, cfg: &CorpusConfig) -> Result<(Vec<usize>, Tensor)> {
    let tokens = read_header(r, cfg)?;
    let n = tokens.len() * cfg.frames_per_token;
    let data = (0..cfg.feature_dim * n)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((tokens, Tensor::new(&[cfg.feature_dim, n], data)?))
}

/// Same header as an utterance record followed by `u32 rows, u32 cols` and a
/// row-major `f64` matrix (used to cache alignment targets).
pub fn write_matrix_record<W: Write>(
    w: &mut W,
    cfg: &CorpusConfig,
    tokens: &[usize],
    m: &Tensor,
) -> Result<()> {
    write_header(w, cfg, tokens)?;
    write_u32(w, m.rows())?;
    write_u32(w, m.cols())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix_record<R: Read>(r: &mut R, cfg: &CorpusConfig) -> Result<(Vec<usize>, Tensor)> {
    let tokens = read_header(r, cfg)?;
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    let data = (0..rows * cols)
        .map(|_| read_f64(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((tokens, Tensor::new(&[rows, cols], data)?))
}
