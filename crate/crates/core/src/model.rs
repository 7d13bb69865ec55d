//! Diffusion-transformer backbone for masked feature infilling.
//!
//! Per frame, the noisy features, the masked clean features and the
//! refined text embedding are concatenated and projected to the model width.
//! A stack of pre-norm transformer blocks follows, each modulated by the
//! flow-step embedding through adaptive layer-norm scale and shift, and a
//! final projection produces the vector field. Hidden states after selected
//! blocks are returned for the alignment losses.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{float, parse_value, unknown_key, Section};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub text_refine_layers: usize,
    /// Content vocabulary plus the filler id.
    pub vocab: usize,
    pub feature_dim: usize,
    /// 1-based block index whose output feeds the text alignment loss.
    pub text_tap: usize,
    /// 1-based block index whose output feeds the speech alignment loss.
    pub speech_tap: usize,
    pub ff_mult: usize,
    pub text_conv_kernel: usize,
    /// Multiplier applied to `t` before the sinusoidal time features.
    pub time_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            width: 64,
            heads: 4,
            text_refine_layers: 2,
            vocab: 13,
            feature_dim: 16,
            text_tap: 4,
            speech_tap: 7,
            ff_mult: 2,
            text_conv_kernel: 7,
            time_scale: 100.0,
        }
    }
}

impl ModelConfig {
    /// The small profile used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            width: 8,
            heads: 2,
            text_tap: 1,
            speech_tap: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.width == 0 || self.heads == 0 {
            return bad("model.num_layers, model.width and model.heads must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "model.width {} is not divisible by model.heads {}",
                self.width, self.heads
            ));
        }
        if !self.width.is_multiple_of(2) {
            return bad("model.width must be even".into());
        }
        for (name, tap) in [("text_tap", self.text_tap), ("speech_tap", self.speech_tap)] {
            if tap < 1 || tap > self.num_layers {
                return bad(format!(
                    "model.{name} = {tap} outside 1..={}",
                    self.num_layers
                ));
            }
        }
        if self.text_conv_kernel.is_multiple_of(2) {
            return bad("model.text_conv_kernel must be odd".into());
        }
        if self.vocab < 2 || self.feature_dim == 0 || self.ff_mult == 0 {
            return bad("model.vocab, model.feature_dim and model.ff_mult must be positive".into());
        }
        Ok(())
    }
}

/// `model.vocab` and `model.feature_dim` follow the corpus and are not keys.
impl Section for ModelConfig {
    const PREFIX: &'static str = "model";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = Self::PREFIX;
        match key {
            "num_layers" => self.num_layers = parse_value(p, key, value)?,
            "width" => self.width = parse_value(p, key, value)?,
            "heads" => self.heads = parse_value(p, key, value)?,
            "text_refine_layers" => self.text_refine_layers = parse_value(p, key, value)?,
            "text_tap" => self.text_tap = parse_value(p, key, value)?,
            "speech_tap" => self.speech_tap = parse_value(p, key, value)?,
            "ff_mult" => self.ff_mult = parse_value(p, key, value)?,
            "text_conv_kernel" => self.text_conv_kernel = parse_value(p, key, value)?,
            "time_scale" => self.time_scale = parse_value(p, key, value)?,
            _ => return Err(unknown_key(p, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_layers", self.num_layers.to_string()),
            ("width", self.width.to_string()),
            ("heads", self.heads.to_string()),
            ("text_refine_layers", self.text_refine_layers.to_string()),
            ("text_tap", self.text_tap.to_string()),
            ("speech_tap", self.speech_tap.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
            ("text_conv_kernel", self.text_conv_kernel.to_string()),
            ("time_scale", float(self.time_scale)),
        ]
    }
}

struct TextBlock {
    dw: ParamId,
    dw_b: ParamId,
    pw1: ParamId,
    pw1_b: ParamId,
    pw2: ParamId,
    pw2_b: ParamId,
}

struct Block {
    ada_w: ParamId,
    ada_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    attn_out_w: ParamId,
    attn_out_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Parameter handles of the backbone; the values live in a [`ParamStore`].
pub struct Backbone {
    cfg: ModelConfig,
    text_embed: ParamId,
    text_blocks: Vec<TextBlock>,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<Block>,
    final_ada_w: ParamId,
    final_ada_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Model inputs for one utterance, features in `[F×N]` layout.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub noisy: &'a Tensor,
    pub masked: &'a Tensor,
    pub padded_tokens: &'a [usize],
}

pub struct ModelOutput {
    /// Predicted vector field, `[F×N]`.
    pub v: Var,
    /// `[N×D]` block outputs keyed by 1-based block index.
    pub hidden: BTreeMap<usize, Var>,
    /// Per block and head, the `[N×N]` attention weights.
    pub attention: Vec<Var>,
}

fn sinusoid_positions(n: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut t = Tensor::zeros(&[n, dim]);
    for p in 0..n {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            t.set(p, i, (p as f64 * freq).sin());
            t.set(p, half + i, (p as f64 * freq).cos());
        }
    }
    t
}

impl Backbone {
    /// Registers freshly initialised parameters under `model.` in `store`.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let f = cfg.feature_dim;
        let h = cfg.ff_mult * d;
        let mut w = |name: String, shape: &[usize]| {
            store.add(format!("model.{name}"), Tensor::trunc_normal(shape, INIT_STD, rng))
        };
        let text_embed = w("text_embed".into(), &[cfg.vocab, d]);
        let mut text_raw = Vec::new();
        for i in 0..cfg.text_refine_layers {
            text_raw.push((
                w(format!("text{i}.dw"), &[cfg.text_conv_kernel, d]),
                w(format!("text{i}.pw1"), &[d, h]),
                w(format!("text{i}.pw2"), &[h, d]),
            ));
        }
        let time_w1 = w("time.w1".into(), &[d, d]);
        let time_w2 = w("time.w2".into(), &[d, d]);
        let in_w = w("in.w".into(), &[2 * f + d, d]);
        let mut block_raw = Vec::new();
        for i in 0..cfg.num_layers {
            block_raw.push((
                w(format!("block{i}.ada_w"), &[d, 4 * d]),
                w(format!("block{i}.qkv_w"), &[d, 3 * d]),
                w(format!("block{i}.attn_out_w"), &[d, d]),
                w(format!("block{i}.ff1_w"), &[d, h]),
                w(format!("block{i}.ff2_w"), &[h, d]),
            ));
        }
        let final_ada_w = w("final.ada_w".into(), &[d, 2 * d]);

        let mut z = |name: String, shape: &[usize]| store.add(format!("model.{name}"), Tensor::zeros(shape));
        let text_blocks = text_raw
            .into_iter()
            .enumerate()
            .map(|(i, (dw, pw1, pw2))| TextBlock {
                dw,
                dw_b: z(format!("text{i}.dw_b"), &[d]),
                pw1,
                pw1_b: z(format!("text{i}.pw1_b"), &[h]),
                pw2,
                pw2_b: z(format!("text{i}.pw2_b"), &[d]),
            })
            .collect();
        let time_b1 = z("time.b1".into(), &[d]);
        let time_b2 = z("time.b2".into(), &[d]);
        let in_b = z("in.b".into(), &[d]);
        let blocks = block_raw
            .into_iter()
            .enumerate()
            .map(|(i, (ada_w, qkv_w, attn_out_w, ff1_w, ff2_w))| Block {
                ada_w,
                ada_b: z(format!("block{i}.ada_b"), &[4 * d]),
                qkv_w,
                qkv_b: z(format!("block{i}.qkv_b"), &[3 * d]),
                attn_out_w,
                attn_out_b: z(format!("block{i}.attn_out_b"), &[d]),
                ff1_w,
                ff1_b: z(format!("block{i}.ff1_b"), &[h]),
                ff2_w,
                ff2_b: z(format!("block{i}.ff2_b"), &[d]),
            })
            .collect();
        let final_ada_b = z("final.ada_b".into(), &[2 * d]);
        let out_w = z("out.w".into(), &[d, f]);
        let out_b = z("out.b".into(), &[f]);
        Ok(Self {
            cfg,
            text_embed,
            text_blocks,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            in_w,
            in_b,
            blocks,
            final_ada_w,
            final_ada_b,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Learned lookup plus fixed sinusoidal positions, refined by depthwise
    /// convolution / pointwise MLP residual blocks. `[N×D]`.
    pub fn embed_text<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        padded_tokens: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = padded_tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.cfg.vocab
            )));
        }
        let table = g.param(store, self.text_embed);
        let emb = g.gather(table, padded_tokens)?;
        let pos = g.constant(sinusoid_positions(padded_tokens.len(), self.cfg.width));
        let mut x = g.add(emb, pos)?;
        for blk in &self.text_blocks {
            let dw = g.param(store, blk.dw);
            let dw_b = g.param(store, blk.dw_b);
            let pw1 = g.param(store, blk.pw1);
            let pw1_b = g.param(store, blk.pw1_b);
            let pw2 = g.param(store, blk.pw2);
            let pw2_b = g.param(store, blk.pw2_b);
            let y = g.depthwise_conv1d(x, dw)?;
            let y = g.add(y, dw_b)?;
            let y = g.layer_norm(y, LN_EPS)?;
            let y = g.linear(y, pw1, Some(pw1_b))?;
            let y = g.gelu(y)?;
            let y = g.linear(y, pw2, Some(pw2_b))?;
            x = g.add(x, y)?;
        }
        Ok(x)
    }

    /// Sinusoidal features of `time_scale·t` followed by a two-layer MLP. `[1×D]`.
    pub fn embed_time<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, t: Var) -> Result<Var> {
        let tv = g.scalar(t);
        if !(0.0..=1.0).contains(&tv) {
            return Err(Error::Domain {
                op: "embed_time",
                detail: format!("flow step {tv} outside [0, 1]"),
            });
        }
        let half = self.cfg.width / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|i| self.cfg.time_scale * (-(10_000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        let freqs = g.constant(Tensor::new(&[1, half], freqs)?);
        let phase = g.mul(freqs, t)?;
        let s = g.sin(phase)?;
        let c = g.cos(phase)?;
        let feats = g.concat_cols(&[s, c])?;
        let w1 = g.param(store, self.time_w1);
        let b1 = g.param(store, self.time_b1);
        let w2 = g.param(store, self.time_w2);
        let b2 = g.param(store, self.time_b2);
        let h = g.linear(feats, w1, Some(b1))?;
        let h = g.gelu(h)?;
        g.linear(h, w2, Some(b2))
    }

    fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let s1 = g.offset(scale, 1.0)?;
        let y = g.mul(n, s1)?;
        g.add(y, shift)
    }

    fn block<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        blk: &Block,
        x: Var,
        cond: Var,
        attention: &mut Vec<Var>,
    ) -> Result<Var> {
        let d = self.cfg.width;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let ada_w = g.param(store, blk.ada_w);
        let ada_b = g.param(store, blk.ada_b);
        let m = g.linear(cond, ada_w, Some(ada_b))?;
        let shift1 = g.slice_cols(m, 0, d)?;
        let scale1 = g.slice_cols(m, d, d)?;
        let shift2 = g.slice_cols(m, 2 * d, d)?;
        let scale2 = g.slice_cols(m, 3 * d, d)?;

        let h = Self::modulate(g, x, shift1, scale1)?;
        let qkv_w = g.param(store, blk.qkv_w);
        let qkv_b = g.param(store, blk.qkv_b);
        let qkv = g.linear(h, qkv_w, Some(qkv_b))?;
        let mut head_out = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(qkv, hd * dh, dh)?;
            let k = g.slice_cols(qkv, d + hd * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + hd * dh, dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let p = g.softmax(scores)?;
            attention.push(p);
            head_out.push(g.matmul(p, v)?);
        }
        let att = if heads == 1 {
            head_out[0]
        } else {
            g.concat_cols(&head_out)?
        };
        let ow = g.param(store, blk.attn_out_w);
        let ob = g.param(store, blk.attn_out_b);
        let att = g.linear(att, ow, Some(ob))?;
        let x = g.add(x, att)?;

        let h = Self::modulate(g, x, shift2, scale2)?;
        let w1 = g.param(store, blk.ff1_w);
        let b1 = g.param(store, blk.ff1_b);
        let w2 = g.param(store, blk.ff2_w);
        let b2 = g.param(store, blk.ff2_b);
        let h = g.linear(h, w1, Some(b1))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, w2, Some(b2))?;
        g.add(x, h)
    }

    /// Runs the backbone with a constant flow step.
    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        input: ModelInput<'_>,
        t: f64,
        taps: &[usize],
    ) -> Result<ModelOutput> {
        let t = g.constant(Tensor::scalar(t));
        self.forward_with_time(g, store, input, t, taps)
    }

    /// Runs the backbone with the flow step supplied as a graph node, so
    /// gradients with respect to `t` are available.
    pub fn forward_with_time<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        input: ModelInput<'_>,
        t: Var,
        taps: &[usize],
    ) -> Result<ModelOutput> {
        let f = self.cfg.feature_dim;
        let n = input.padded_tokens.len();
        for x in [input.noisy, input.masked] {
            if x.shape() != [f, n] {
                return Err(Error::shape("Backbone::forward", x.shape(), &[f, n]));
            }
        }
        if let Some(&bad) = taps.iter().find(|&&i| i < 1 || i > self.cfg.num_layers) {
            return Err(Error::invalid(format!(
                "tap index {bad} outside 1..={}",
                self.cfg.num_layers
            )));
        }

        let noisy = g.constant(input.noisy.transpose()?);
        let masked = g.constant(input.masked.transpose()?);
        let text = self.embed_text(g, store, input.padded_tokens)?;
        let temb = self.embed_time(g, store, t)?;
        let cond = g.gelu(temb)?;

        let cat = g.concat_cols(&[noisy, masked, text])?;
        let in_w = g.param(store, self.in_w);
        let in_b = g.param(store, self.in_b);
        let mut x = g.linear(cat, in_w, Some(in_b))?;

        let mut hidden = BTreeMap::new();
        let mut attention = Vec::with_capacity(self.cfg.num_layers * self.cfg.heads);
        for (i, blk) in self.blocks.iter().enumerate() {
            x = self.block(g, store, blk, x, cond, &mut attention)?;
            if taps.contains(&(i + 1)) {
                hidden.insert(i + 1, x);
            }
        }

        let d = self.cfg.width;
        let fw = g.param(store, self.final_ada_w);
        let fb = g.param(store, self.final_ada_b);
        let m = g.linear(cond, fw, Some(fb))?;
        let shift = g.slice_cols(m, 0, d)?;
        let scale = g.slice_cols(m, d, d)?;
        let h = Self::modulate(g, x, shift, scale)?;
        let ow = g.param(store, self.out_w);
        let ob = g.param(store, self.out_b);
        let v = g.linear(h, ow, Some(ob))?;
        let v = g.transpose(v)?;
        Ok(ModelOutput {
            v,
            hidden,
            attention,
        })
    }

    /// Forward-only vector field evaluation, `[F×N]`.
    pub fn predict(
        &self,
        store: &ParamStore,
        input: ModelInput<'_>,
        t: f64,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, input, t, &[])?;
        Ok(g.tensor(out.v))
    }

    /// Independent forward passes over a batch; item `i` of the result depends
    /// only on item `i` of the input.
    pub fn predict_batch(
        &self,
        store: &ParamStore,
        inputs: &[(ModelInput<'_>, f64)],
    ) -> Result<Vec<Tensor>> {
        inputs
            .iter()
            .map(|&(inp, t)| self.predict(store, inp, t))
            .collect()
    }
}

/// Replaces every parameter whose name matches `filter` with fresh normal
/// draws; used to move zero-initialised tensors off zero for gradient checks.
pub fn randomize_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    std: f64,
    rng: &mut R,
    filter: impl Fn(&str) -> bool,
) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if filter(store.name(id)) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, std, rng);
        }
    }
}
