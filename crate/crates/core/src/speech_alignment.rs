//! Representation alignment against a frozen feature extractor.
//!
//! The tapped hidden state is resampled to the extractor's frame rate,
//! projected by a 1-D convolution and compared frame-wise with the
//! extractor's features of the clean utterance.

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_value, unknown_key, Section};
use crate::corpus::{read_matrix_record, write_matrix_record, CorpusConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Guard added to cosine denominators.
pub const COS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// `−mean cos`
    NegCos,
    /// mean absolute error
    L1,
    /// `−mean log σ(cos)`
    LogSigCos,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [Self::NegCos, Self::L1, Self::LogSigCos];
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_cos" => Ok(Self::NegCos),
            "l1" => Ok(Self::L1),
            "logsig_cos" => Ok(Self::LogSigCos),
            _ => Err(Error::Config(format!("unknown speech loss variant `{s}`"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NegCos => "neg_cos",
            Self::L1 => "l1",
            Self::LogSigCos => "logsig_cos",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSelection {
    Last,
    Avg,
}

impl FromStr for TargetSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "avg" => Ok(Self::Avg),
            _ => Err(Error::Config(format!("unknown target selection `{s}`"))),
        }
    }
}

impl fmt::Display for TargetSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Last => "last",
            Self::Avg => "avg",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechAlignConfig {
    pub variant: LossVariant,
    pub selection: TargetSelection,
    /// Number of extractor layers `J`.
    pub extractor_layers: usize,
    /// Extractor feature width `D_f`.
    pub extractor_dim: usize,
    /// Temporal down-sampling of the first extractor layer.
    pub extractor_stride: usize,
    pub extractor_seed: u64,
}

impl Default for SpeechAlignConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::NegCos,
            selection: TargetSelection::Last,
            extractor_layers: 3,
            extractor_dim: 32,
            extractor_stride: 2,
            extractor_seed: 1234,
        }
    }
}

impl Section for SpeechAlignConfig {
    const PREFIX: &'static str = "speech";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = Self::PREFIX;
        match key {
            "loss_variant" => self.variant = value.parse()?,
            "target_selection" => self.selection = value.parse()?,
            "extractor_layers" => self.extractor_layers = parse_value(p, key, value)?,
            "extractor_dim" => self.extractor_dim = parse_value(p, key, value)?,
            "extractor_stride" => self.extractor_stride = parse_value(p, key, value)?,
            "extractor_seed" => self.extractor_seed = parse_value(p, key, value)?,
            _ => return Err(unknown_key(p, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("loss_variant", self.variant.to_string()),
            ("target_selection", self.selection.to_string()),
            ("extractor_layers", self.extractor_layers.to_string()),
            ("extractor_dim", self.extractor_dim.to_string()),
            ("extractor_stride", self.extractor_stride.to_string()),
            ("extractor_seed", self.extractor_seed.to_string()),
        ]
    }
}

const EXTRACTOR_KERNEL: usize = 3;

/// Stack of kernel-3 convolutions with GELU. The first layer averages
/// non-overlapping windows of `stride` frames; all layers share width `D_f`.
/// Parameters are plain tensors that never enter a gradient graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenExtractor {
    weights: ParamStore,
    stride: usize,
    dim: usize,
}

impl FrozenExtractor {
    pub fn new(in_dim: usize, cfg: &SpeechAlignConfig) -> Result<Self> {
        if cfg.extractor_layers == 0 || cfg.extractor_dim == 0 || cfg.extractor_stride == 0 {
            return Err(Error::Config(
                "speech.extractor_layers, extractor_dim and extractor_stride must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.extractor_seed);
        let mut weights = ParamStore::new();
        let mut cin = in_dim;
        for j in 0..cfg.extractor_layers {
            let std = (2.0 / (EXTRACTOR_KERNEL * cin) as f64).sqrt();
            let w = Tensor::randn(&[EXTRACTOR_KERNEL * cin, cfg.extractor_dim], std, &mut rng);
            let b = Tensor::randn(&[cfg.extractor_dim], 0.1, &mut rng);
            weights.add(format!("extractor.layer{j}.w"), w);
            weights.add(format!("extractor.layer{j}.b"), b);
            cin = cfg.extractor_dim;
        }
        Ok(Self {
            weights,
            stride: cfg.extractor_stride,
            dim: cfg.extractor_dim,
        })
    }

    /// Builds an extractor from explicit `(w, b)` pairs.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>, stride: usize) -> Result<Self> {
        let dim = layers
            .first()
            .map(|(w, _)| w.cols())
            .ok_or_else(|| Error::invalid("extractor needs at least one layer"))?;
        let mut weights = ParamStore::new();
        for (j, (w, b)) in layers.into_iter().enumerate() {
            if w.cols() != dim || b.numel() != dim || w.rows() % EXTRACTOR_KERNEL != 0 {
                return Err(Error::shape("FrozenExtractor", w.shape(), b.shape()));
            }
            weights.add(format!("extractor.layer{j}.w"), w);
            weights.add(format!("extractor.layer{j}.b"), b);
        }
        Ok(Self { weights, stride, dim })
    }

    pub fn params(&self) -> &ParamStore {
        &self.weights
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn output_len(&self, n: usize) -> usize {
        n / self.stride
    }

    /// Every layer's `[N_f×D_f]` output for `[F×N]` input features.
    pub fn layer_outputs(&self, x1: &Tensor) -> Result<Vec<Tensor>> {
        let n = x1.cols();
        let nf = self.output_len(n);
        if nf == 0 {
            return Err(Error::invalid(format!(
                "{n} frames is too short for extractor stride {}",
                self.stride
            )));
        }
        let mut g = Graph::new();
        let mut h = g.constant(x1.transpose()?);
        let mut outs = Vec::with_capacity(self.num_layers());
        for j in 0..self.num_layers() {
            let w = g.constant(self.weights.tensors()[2 * j].clone());
            let b = g.constant(self.weights.tensors()[2 * j + 1].clone());
            let y = g.conv1d(h, w, EXTRACTOR_KERNEL)?;
            let y = g.add(y, b)?;
            let mut y = g.gelu(y)?;
            if j == 0 && self.stride > 1 {
                let pool = g_pool(&mut g, n, self.stride);
                y = g.matmul(pool, y)?;
            }
            outs.push(g.tensor(y));
            h = y;
        }
        Ok(outs)
    }
}

fn g_pool(g: &mut Graph<'_>, n: usize, stride: usize) -> Var {
    let nf = n / stride;
    let mut p = Tensor::zeros(&[nf, n]);
    for i in 0..nf {
        for k in 0..stride {
            p.set(i, i * stride + k, 1.0 / stride as f64);
        }
    }
    g.constant(p)
}

/// Alignment targets of the clean features: the last layer's output, or the
/// mean over layers.
pub fn extract_targets(
    f: &FrozenExtractor,
    x1: &Tensor,
    selection: TargetSelection,
) -> Result<Tensor> {
    let mut outs = f.layer_outputs(x1)?;
    match selection {
        TargetSelection::Last => Ok(outs.pop().expect("at least one layer")),
        TargetSelection::Avg => {
            // Running mean: exact when every layer agrees.
            let mut acc = outs[0].clone();
            for (k, o) in outs.iter().enumerate().skip(1) {
                let w = 1.0 / (k + 1) as f64;
                acc = acc.zip_map(o, |m, x| m + (x - m) * w)?;
            }
            Ok(acc)
        }
    }
}

/// `[N_f×N]` linear-interpolation matrix with endpoint alignment: row `j`
/// samples input coordinate `j·(N−1)/(N_f−1)`; with `N_f = 1` the midpoint.
pub fn interp_matrix(n: usize, nf: usize) -> Result<Tensor> {
    if n < 2 || nf == 0 {
        return Err(Error::invalid(format!(
            "interpolation needs N >= 2 and N_f >= 1, got N = {n}, N_f = {nf}"
        )));
    }
    let mut m = Tensor::zeros(&[nf, n]);
    for j in 0..nf {
        let c = if nf == 1 {
            (n - 1) as f64 / 2.0
        } else {
            j as f64 * (n - 1) as f64 / (nf - 1) as f64
        };
        let lo = (c.floor() as usize).min(n - 1);
        let frac = c - lo as f64;
        if frac == 0.0 {
            m.set(j, lo, 1.0);
        } else {
            m.set(j, lo, 1.0 - frac);
            m.set(j, lo + 1, frac);
        }
    }
    Ok(m)
}

/// Resamples an `[N×D]` node to `[N_f×D]`.
pub fn interp_linear(g: &mut Graph<'_>, h: Var, nf: usize) -> Result<Var> {
    let n = g.shape(h)[0];
    if nf == n {
        return Ok(h);
    }
    let m = g.constant(interp_matrix(n, nf)?);
    g.matmul(m, h)
}

/// Interpolation followed by a kernel-3 convolution from `D_h` to `D_f`.
pub struct AlignProjector {
    pub w: ParamId,
    pub b: ParamId,
}

impl AlignProjector {
    /// Registers `speech_proj.w` / `speech_proj.b` in `store`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = store.add("speech_proj.w", Tensor::trunc_normal(&[3 * width, out_dim], 0.02, rng));
        let b = store.add("speech_proj.b", Tensor::zeros(&[out_dim]));
        Self { w, b }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, hidden: Var, nf: usize) -> Result<Var> {
        let h = interp_linear(g, hidden, nf)?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv1d(h, w, 3)?;
        g.add(y, b)
    }
}

/// Frame-wise comparison of projected features `h` with `target`.
/// `eps = None` disables the cosine guard (zero-norm frames then fail).
pub fn align_loss(
    g: &mut Graph<'_>,
    h: Var,
    target: &Tensor,
    variant: LossVariant,
    eps: Option<f64>,
) -> Result<Var> {
    if g.shape(h) != target.shape() {
        return Err(Error::shape("speech_align_loss", g.shape(h), target.shape()));
    }
    let t = g.constant(target.clone());
    match variant {
        LossVariant::NegCos => {
            let c = g.row_cosine(h, t, eps)?;
            let m = g.mean(c)?;
            g.scale(m, -1.0)
        }
        LossVariant::LogSigCos => {
            let c = g.row_cosine(h, t, eps)?;
            let ls = g.log_sigmoid(c)?;
            let m = g.mean(ls)?;
            g.scale(m, -1.0)
        }
        LossVariant::L1 => {
            let d = g.sub(h, t)?;
            let a = g.abs(d)?;
            g.mean(a)
        }
    }
}

/// Projects the tapped hidden state and applies [`align_loss`] with the
/// default cosine guard.
pub fn speech_align_loss<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    proj: &AlignProjector,
    hidden: Var,
    target: &Tensor,
    variant: LossVariant,
) -> Result<Var> {
    let h = proj.forward(g, store, hidden, target.rows())?;
    align_loss(g, h, target, variant, Some(COS_EPS))
}

/// Writes per-utterance targets as matrix records (`utt_NNNNNN.bin`).
pub fn save_targets(dir: &Path, cfg: &CorpusConfig, targets: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, t) in targets.iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("utt_{i:06}.bin")))?);
        write_matrix_record(&mut w, cfg, &[], t)?;
    }
    Ok(())
}

pub fn load_targets(dir: &Path, cfg: &CorpusConfig, count: usize) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|i| {
            let mut r = BufReader::new(fs::File::open(dir.join(format!("utt_{i:06}.bin")))?);
            Ok(read_matrix_record(&mut r, cfg)?.1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{grad_check, log_sigmoid};

    fn col(vals: &[f64]) -> Tensor {
        Tensor::new(&[vals.len(), 1], vals.to_vec()).unwrap()
    }

    fn interp(h: &Tensor, nf: usize) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(h.clone());
        let o = interp_linear(&mut g, v, nf).unwrap();
        g.tensor(o)
    }

    #[test]
    fn interp_examples() {
        let h = col(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(interp(&h, 2).data(), &[0.0, 3.0]);
        assert_eq!(interp(&h, 3).data(), &[0.0, 1.5, 3.0]);
        assert_eq!(interp(&h, 1).data(), &[1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Tensor::randn(&[7, 3], 1.0, &mut rng);
        assert_eq!(interp(&r, 7), r);
        let m = interp_matrix(7, 7).unwrap();
        assert_eq!(m, Tensor::eye(7));
        assert_eq!(r.clone(), m.matmul(&r).unwrap());
        assert!(interp_matrix(1, 1).is_err());
    }

    #[test]
    fn extractor_shapes_and_selection() {
        let cfg = SpeechAlignConfig::default();
        let f = FrozenExtractor::new(16, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[16, 40], 1.0, &mut rng);
        let last = extract_targets(&f, &x, TargetSelection::Last).unwrap();
        assert_eq!(last.shape(), &[20, 32]);
        let avg = extract_targets(&f, &x, TargetSelection::Avg).unwrap();
        assert_eq!(avg.shape(), &[20, 32]);
        assert_ne!(last, avg);
        assert!(extract_targets(&f, &Tensor::zeros(&[16, 1]), TargetSelection::Last).is_err());
        assert_eq!(FrozenExtractor::new(16, &cfg).unwrap(), f);
    }

    #[test]
    fn single_layer_last_equals_avg() {
        let cfg = SpeechAlignConfig { extractor_layers: 1, ..SpeechAlignConfig::default() };
        let f = FrozenExtractor::new(16, &cfg).unwrap();
        let x = Tensor::randn(&[16, 12], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(
            extract_targets(&f, &x, TargetSelection::Last).unwrap(),
            extract_targets(&f, &x, TargetSelection::Avg).unwrap()
        );
    }

    #[test]
    fn identical_layers_average_to_last() {
        // Layers that map their input to a constant give identical outputs.
        let dim = 4;
        let mut layers = Vec::new();
        for j in 0..3 {
            let cin = if j == 0 { 6 } else { dim };
            layers.push((Tensor::zeros(&[3 * cin, dim]), Tensor::new(&[dim], vec![0.5, -1.0, 2.0, 0.0]).unwrap()));
        }
        let f = FrozenExtractor::from_layers(layers, 2).unwrap();
        let x = Tensor::randn(&[6, 10], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(
            extract_targets(&f, &x, TargetSelection::Last).unwrap(),
            extract_targets(&f, &x, TargetSelection::Avg).unwrap()
        );
    }

    fn loss_of(h: &Tensor, t: &Tensor, v: LossVariant) -> f64 {
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        let l = align_loss(&mut g, hv, t, v, Some(COS_EPS)).unwrap();
        g.scalar(l)
    }

    #[test]
    fn variant_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, -1.0, 3.0]]).unwrap();
        assert_abs_diff_eq!(loss_of(&t, &t, LossVariant::NegCos), -1.0, epsilon = 1e-12);
        let neg = t.map(|x| -x);
        assert_abs_diff_eq!(loss_of(&neg, &t, LossVariant::NegCos), 1.0, epsilon = 1e-12);
        let orth = Tensor::from_rows(&[vec![2.0, -1.0, 5.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(loss_of(&orth, &t, LossVariant::NegCos), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(loss_of(&orth, &t, LossVariant::LogSigCos), -(0.5f64).ln(), epsilon = 1e-12);
        assert_eq!(loss_of(&t, &t, LossVariant::L1), 0.0);
        assert_abs_diff_eq!(loss_of(&t, &t, LossVariant::LogSigCos), -log_sigmoid(1.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_frame_needs_guard() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let h = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let hv = g.input(h.clone());
        assert!(align_loss(&mut g, hv, &t, LossVariant::NegCos, None).is_err());
        assert!(align_loss(&mut g, hv, &t, LossVariant::NegCos, Some(COS_EPS)).is_ok());
    }

    proptest! {
        #[test]
        fn variant_bounds(seed in any::<u64>(), n in 1usize..6, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Tensor::randn(&[n, d], 1.0, &mut rng);
            let t = Tensor::randn(&[n, d], 1.0, &mut rng);
            let nc = loss_of(&h, &t, LossVariant::NegCos);
            prop_assert!((-1.0..=1.0).contains(&nc));
            prop_assert!(loss_of(&h, &t, LossVariant::L1) >= 0.0);
            prop_assert!(loss_of(&h, &t, LossVariant::LogSigCos) >= -log_sigmoid(1.0) - 1e-12);
        }

        #[test]
        fn cosine_is_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let t = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let a = loss_of(&h, &t, LossVariant::NegCos);
            let b = loss_of(&h.map(|x| c * x), &t, LossVariant::NegCos);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_gradients_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let proj = AlignProjector::new(&mut store, 8, 6, &mut rng);
        crate::model::randomize_params(&mut store, 0.3, &mut rng, |_| true);
        store.add("hidden", Tensor::randn(&[8, 8], 1.0, &mut rng));
        let target = Tensor::randn(&[4, 6], 1.0, &mut rng);
        for v in LossVariant::ALL {
            let report = grad_check(
                |g, s| {
                    let h = g.param(s, s.find("hidden").unwrap());
                    speech_align_loss(g, s, &proj, h, &target, v)
                },
                &store,
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{v}: {:?}", report.worst());
        }
    }

    #[test]
    fn targets_round_trip_through_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ts = vec![Tensor::randn(&[5, 32], 1.0, &mut rng), Tensor::randn(&[3, 32], 1.0, &mut rng)];
        save_targets(dir.path(), &cfg, &ts).unwrap();
        assert_eq!(load_targets(dir.path(), &cfg, 2).unwrap(), ts);
    }

    #[test]
    fn config_section_round_trip() {
        let c = SpeechAlignConfig {
            variant: LossVariant::LogSigCos,
            selection: TargetSelection::Avg,
            ..SpeechAlignConfig::default()
        };
        let text = crate::config::render(&c);
        let back: SpeechAlignConfig = crate::config::Config::parse(&text).unwrap().section().unwrap();
        assert_eq!(back, c);
        assert!(crate::config::Config::parse("speech.loss_variant = cos").unwrap().section::<SpeechAlignConfig>().is_err());
    }
}
