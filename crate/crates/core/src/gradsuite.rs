//! Finite-difference checks of every training loss against the backbone.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::TemporalMask;
use crate::error::{Error, Result};
use crate::flow_matching::{cfm_loss, FlowSample};
use crate::model::{randomize_params, Backbone, ModelConfig, ModelInput};
use crate::numerics::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::speech_alignment::{
    extract_targets, speech_align_loss, AlignProjector, FrozenExtractor, LossVariant, SpeechAlignConfig, TargetSelection,
};
use crate::text_alignment::{text_align_loss, CtcHead};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// L = 2, D = 8, N = 8.
    Tiny,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            _ => Err(Error::invalid(format!("unknown gradcheck profile `{s}` (expected `tiny`)"))),
        }
    }
}

struct Item {
    sample: FlowSample,
    masked: Tensor,
    tokens: Vec<usize>,
    target: Vec<usize>,
    speech: Tensor,
}

struct Fixture {
    model: Backbone,
    head: CtcHead,
    proj: AlignProjector,
    store: ParamStore,
    mask: TemporalMask,
    items: Vec<Item>,
}

const VOCAB: usize = 3;
const FEATURES: usize = 4;
const FRAMES: usize = 8;

fn fixture() -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = ModelConfig {
        vocab: VOCAB + 1,
        feature_dim: FEATURES,
        ..ModelConfig::tiny()
    };
    let mut store = ParamStore::new();
    let model = Backbone::new(cfg.clone(), &mut store, &mut rng)?;
    let head = CtcHead::new(&mut store, cfg.width, VOCAB, &mut rng);
    let scfg = SpeechAlignConfig {
        extractor_layers: 2,
        extractor_dim: 4,
        ..SpeechAlignConfig::default()
    };
    let proj = AlignProjector::new(&mut store, cfg.width, scfg.extractor_dim, &mut rng);
    // Zero-initialised output layers would hide most of the network.
    randomize_params(&mut store, 0.3, &mut rng, |_| true);
    let extractor = FrozenExtractor::new(FEATURES, &scfg)?;
    let mask = TemporalMask::span(FRAMES, 2, 7);
    let token_sets = [vec![0, 1, 1, 2], vec![2, 0, 1, 0]];
    let items = token_sets
        .iter()
        .map(|toks| {
            let x1 = Tensor::randn(&[FEATURES, FRAMES], 1.0, &mut rng);
            let x0 = Tensor::randn(&[FEATURES, FRAMES], 1.0, &mut rng);
            let masked = crate::corpus::apply_mask(&x1, &mask)?;
            let speech = extract_targets(&extractor, &x1, TargetSelection::Avg)?;
            let mut padded = toks.clone();
            padded.resize(FRAMES, VOCAB);
            Ok(Item {
                sample: FlowSample::new(x0, x1, 0.37)?,
                masked,
                tokens: padded,
                target: toks.clone(),
                speech,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture {
        model,
        head,
        proj,
        store,
        mask,
        items,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Term {
    Cfm { masked_only: bool },
    Text,
    Speech(LossVariant),
    Total,
}

fn item_loss<'p>(fx: &Fixture, g: &mut Graph<'p>, s: &'p ParamStore, item: &Item, term: Term) -> Result<Var> {
    let taps = [fx.model.config().text_tap, fx.model.config().speech_tap];
    let input = ModelInput {
        noisy: &item.sample.psi,
        masked: &item.masked,
        padded_tokens: &item.tokens,
    };
    let out = fx.model.forward(g, s, input, item.sample.t, &taps)?;
    let cfm = |g: &mut Graph<'p>, masked_only| cfm_loss(g, out.v, &item.sample, &fx.mask, masked_only);
    let text = |g: &mut Graph<'p>| text_align_loss(g, s, &fx.head, out.hidden[&taps[0]], &item.target);
    let speech =
        |g: &mut Graph<'p>, v| speech_align_loss(g, s, &fx.proj, out.hidden[&taps[1]], &item.speech, v);
    match term {
        Term::Cfm { masked_only } => cfm(g, masked_only),
        Term::Text => text(g),
        Term::Speech(v) => speech(g, v),
        Term::Total => {
            let a = cfm(g, true)?;
            let b = text(g)?;
            let c = speech(g, LossVariant::NegCos)?;
            let b = g.scale(b, 0.1)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        }
    }
}

fn check(fx: &Fixture, term: Term, batch: usize) -> Result<GradCheckReport> {
    grad_check(
        |g, s| {
            let mut acc: Option<Var> = None;
            for item in &fx.items[..batch] {
                let l = item_loss(fx, g, s, item, term)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            g.scale(acc.expect("non-empty batch"), 1.0 / batch as f64)
        },
        &fx.store,
        EPS,
        TOL,
    )
}

/// Runs every check of `profile`; each entry covers all parameters.
pub fn gradient_suite(profile: Profile) -> Result<Vec<(String, GradCheckReport)>> {
    let Profile::Tiny = profile;
    let fx = fixture()?;
    let mut cases = vec![
        ("l_cfm/masked".to_string(), Term::Cfm { masked_only: true }, 1),
        ("l_cfm/all_frames".to_string(), Term::Cfm { masked_only: false }, 1),
        ("l_text/per_utterance".to_string(), Term::Text, 1),
        ("l_text/batch_mean".to_string(), Term::Text, 2),
    ];
    for v in LossVariant::ALL {
        cases.push((format!("l_speech/{v}"), Term::Speech(v), 1));
    }
    cases.push(("l_total/batch_mean".to_string(), Term::Total, 2));
    cases
        .into_iter()
        .map(|(name, term, batch)| Ok((name, check(&fx, term, batch)?)))
        .collect()
}
