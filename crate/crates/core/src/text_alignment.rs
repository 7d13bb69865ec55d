//! CTC supervision of an intermediate hidden state.
//!
//! Class layout: content ids `0..K`, blank `K`. The filler token shares the
//! id `K` in the input vocabulary but is stripped from targets, so it never
//! appears as a CTC label.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{log_add, CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

const ROW_NORM_TOL: f64 = 1e-10;
const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Linear projection from the model width to `K + 1` CTC classes.
pub struct CtcHead {
    pub w: ParamId,
    pub b: ParamId,
    num_classes: usize,
}

impl CtcHead {
    /// Registers `text_head.w` / `text_head.b` in `store`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let c = vocab_size + 1;
        let w = store.add("text_head.w", Tensor::trunc_normal(&[width, c], 0.02, rng));
        let b = store.add("text_head.b", Tensor::zeros(&[c]));
        Self {
            w,
            b,
            num_classes: c,
        }
    }

    pub fn blank(&self) -> usize {
        self.num_classes - 1
    }

    /// `[N×(K+1)]` log-probabilities for an `[N×D]` hidden state.
    pub fn log_probs<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, hidden: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let logits = g.linear(hidden, w, Some(b))?;
        g.log_softmax(logits, 1)
    }
}

/// A CTC problem: `[T×(K+1)]` log-probability rows and a content target.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcInstance {
    pub log_probs: Tensor,
    pub target: Vec<usize>,
}

impl CtcInstance {
    pub fn new(log_probs: Tensor, target: Vec<usize>) -> Result<Self> {
        if log_probs.shape().len() != 2 || log_probs.cols() < 2 {
            return Err(Error::invalid(format!(
                "CTC log-probs must be T×(K+1) with K >= 1, got {:?}",
                log_probs.shape()
            )));
        }
        for t in 0..log_probs.rows() {
            let lse = crate::numerics::log_sum_exp(log_probs.row(t));
            if !((lse).abs() <= ROW_NORM_TOL) {
                return Err(Error::invalid(format!(
                    "row {t} of CTC log-probs is not normalised (log-sum-exp {lse})"
                )));
            }
        }
        check_target(&target, log_probs.cols() - 1)?;
        Ok(Self { log_probs, target })
    }

    pub fn blank(&self) -> usize {
        self.log_probs.cols() - 1
    }
}

fn check_target(target: &[usize], blank: usize) -> Result<()> {
    match target.iter().find(|&&y| y >= blank) {
        Some(&y) => Err(Error::invalid(format!(
            "CTC target label {y} collides with or exceeds the blank id {blank}"
        ))),
        None => Ok(()),
    }
}

/// Negative log-likelihood, or `+inf` with `feasible == false` when no
/// alignment of the target fits in `T` frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    pub value: f64,
    pub feasible: bool,
}

/// Minimum number of frames that can emit `target`: one per label plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Log-space forward (`alpha`) table, `[T × S]` row-major; entries include
/// the emission at their own frame.
fn forward_table(lp: &[f64], t_len: usize, c: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut a = vec![f64::NEG_INFINITY; t_len * s_len];
    a[0] = lp[ext[0]];
    if s_len > 1 {
        a[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &a[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if s >= 2 && ext[s] != ext[s - 2] {
                acc = log_add(acc, prev[s - 2]);
            }
            a[t * s_len + s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp[t * c + ext[s]]
            };
        }
    }
    a
}

/// Log-space backward (`beta`) table, same layout and emission convention.
fn backward_table(lp: &[f64], t_len: usize, c: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut b = vec![f64::NEG_INFINITY; t_len * s_len];
    let last = (t_len - 1) * s_len;
    b[last + s_len - 1] = lp[(t_len - 1) * c + ext[s_len - 1]];
    if s_len > 1 {
        b[last + s_len - 2] = lp[(t_len - 1) * c + ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &b[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != ext[s + 2] {
                acc = log_add(acc, next[s + 2]);
            }
            b[t * s_len + s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + lp[t * c + ext[s]]
            };
        }
    }
    b
}

fn total_log_prob(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let row = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        log_add(row[s_len - 1], row[s_len - 2])
    } else {
        row[0]
    }
}

fn ctc_raw(lp: &[f64], t_len: usize, c: usize, target: &[usize]) -> CtcLoss {
    if min_frames(target) > t_len {
        return CtcLoss {
            value: f64::INFINITY,
            feasible: false,
        };
    }
    let ext = extended(target, c - 1);
    let alpha = forward_table(lp, t_len, c, &ext);
    let lp_total = total_log_prob(&alpha, t_len, ext.len());
    CtcLoss {
        value: -lp_total,
        feasible: lp_total > f64::NEG_INFINITY,
    }
}

/// `−log p(target | log_probs)` by the forward recursion over the
/// blank-interleaved target.
pub fn ctc_loss(instance: &CtcInstance) -> CtcLoss {
    let lp = &instance.log_probs;
    ctc_raw(lp.data(), lp.rows(), lp.cols(), &instance.target)
}

struct CtcBackward {
    /// `∂(−log p)/∂log_probs`, computed alongside the forward value.
    grad: Vec<f64>,
}

impl CustomOp for CtcBackward {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = grad_out[0];
        vec![Some(self.grad.iter().map(|x| x * g).collect())]
    }
}

/// Graph version of [`ctc_loss`] on a `[T×(K+1)]` log-probability node.
///
/// Rows are not re-checked for normalisation here, so gradients can be
/// probed at arbitrary points. An infeasible target is a domain error.
pub fn ctc_loss_node(g: &mut Graph<'_>, log_probs: Var, target: &[usize]) -> Result<Var> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::shape("ctc_loss", &shape, &[]));
    }
    let (t_len, c) = (shape[0], shape[1]);
    check_target(target, c - 1)?;
    let lp = g.value(log_probs);
    let loss = ctc_raw(lp, t_len, c, target);
    if !loss.feasible {
        return Err(Error::Domain {
            op: "ctc_loss",
            detail: format!(
                "target of length {} needs at least {} frames, got {t_len}",
                target.len(),
                min_frames(target)
            ),
        });
    }
    let ext = extended(target, c - 1);
    let s_len = ext.len();
    let alpha = forward_table(lp, t_len, c, &ext);
    let beta = backward_table(lp, t_len, c, &ext);
    let log_p = -loss.value;
    let mut grad = vec![0.0; t_len * c];
    let mut acc = vec![f64::NEG_INFINITY; c];
    for t in 0..t_len {
        acc.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
        for (s, &k) in ext.iter().enumerate() {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            acc[k] = log_add(acc[k], ab);
        }
        for k in 0..c {
            if acc[k] > f64::NEG_INFINITY {
                // α and β both carry frame t's emission; divide one out.
                grad[t * c + k] = -(acc[k] - lp[t * c + k] - log_p).exp();
            }
        }
    }
    g.custom(
        &[log_probs],
        vec![1],
        vec![loss.value],
        Box::new(CtcBackward { grad }),
    )
}

/// Applies the collapse rule: merge repeats, then drop blanks.
pub fn ctc_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive oracle: sums the probability of every label sequence of
/// length `T` whose collapse equals the target.
pub fn ctc_brute_force(instance: &CtcInstance) -> Result<CtcLoss> {
    let lp = &instance.log_probs;
    let (t_len, c) = (lp.rows(), lp.cols());
    let count = (c as u128)
        .checked_pow(t_len as u32)
        .unwrap_or(u128::MAX);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(count));
    }
    let blank = c - 1;
    let mut path = vec![0usize; t_len];
    let mut total = f64::NEG_INFINITY;
    for _ in 0..count {
        if ctc_collapse(&path, blank) == instance.target {
            let lpp: f64 = path.iter().enumerate().map(|(t, &k)| lp.at(t, k)).sum();
            total = log_add(total, lpp);
        }
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < c {
                break;
            }
            *slot = 0;
        }
    }
    Ok(CtcLoss {
        value: -total,
        feasible: total > f64::NEG_INFINITY,
    })
}

/// Drops every occurrence of the filler id.
pub fn strip_fillers(tokens: &[usize], filler: usize) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != filler).collect()
}

/// CTC loss of the head applied to an `[N×D]` tapped hidden state.
pub fn text_align_loss<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    head: &CtcHead,
    hidden: Var,
    target_tokens: &[usize],
) -> Result<Var> {
    let lp = head.log_probs(g, store, hidden)?;
    ctc_loss_node(g, lp, target_tokens)
}

/// Per-frame argmax (lowest index on ties), collapse repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let c = log_probs.cols();
    let path: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut arg = 0;
            for k in 1..c {
                if row[k] > row[arg] {
                    arg = k;
                }
            }
            arg
        })
        .collect();
    ctc_collapse(&path, c - 1)
}

/// Result of comparing [`ctc_loss`] with [`ctc_brute_force`] on random
/// instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub instances: usize,
    pub feasible: usize,
    /// Largest |DP − brute force| over feasible instances.
    pub max_abs_diff: f64,
    /// Instances where the two disagree on feasibility.
    pub feasibility_mismatches: usize,
}

impl OracleSummary {
    pub fn passed(&self, tol: f64) -> bool {
        self.feasibility_mismatches == 0 && self.max_abs_diff < tol
    }
}

/// Draws `reps` instances for every `T ∈ 1..=max_t`, `K ∈ 1..=3`,
/// `U ∈ 0..=3` (random logits, std 2) and compares both computations.
pub fn ctc_oracle_sweep(max_t: usize, reps: usize, seed: u64) -> Result<OracleSummary> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleSummary {
        instances: 0,
        feasible: 0,
        max_abs_diff: 0.0,
        feasibility_mismatches: 0,
    };
    for t in 1..=max_t {
        for k in 1..=3usize {
            for u in 0..=3usize {
                for _ in 0..reps {
                    let logits = Tensor::randn(&[t, k + 1], 2.0, &mut rng);
                    let target = (0..u).map(|_| rng.gen_range(0..k)).collect();
                    let inst = CtcInstance::new(logits.log_softmax(1)?, target)?;
                    let dp = ctc_loss(&inst);
                    let bf = ctc_brute_force(&inst)?;
                    out.instances += 1;
                    if dp.feasible != bf.feasible {
                        out.feasibility_mismatches += 1;
                    } else if dp.feasible {
                        out.feasible += 1;
                        out.max_abs_diff = out.max_abs_diff.max((dp.value - bf.value).abs());
                    }
                }
            }
        }
    }
    Ok(out)
}
