//! Optimal-transport conditional flow matching: the linear noise-to-data
//! path, its regression loss, sway-warped time grids and fixed-step ODE
//! solvers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::{float, parse_value, unknown_key, Section};
use crate::corpus::TemporalMask;
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelInput};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// One point on the path `ψ_t = (1 − t)·x0 + t·x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub psi: Tensor,
    /// `x1 − x0`, independent of `t`.
    pub target: Tensor,
}

impl FlowSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                op: "FlowSample::new",
                detail: format!("t = {t} outside [0, 1]"),
            });
        }
        let psi = x0.zip_map(&x1, |a, b| (1.0 - t) * a + t * b)?;
        let target = x1.zip_map(&x0, |b, a| b - a)?;
        Ok(Self {
            x0,
            x1,
            t,
            psi,
            target,
        })
    }
}

/// Draws `x0 ~ N(0, I)` and then `t ~ U[0, 1)`.
pub fn make_flow_sample<R: Rng + ?Sized>(x1: &Tensor, rng: &mut R) -> Result<FlowSample> {
    let x0 = Tensor::randn(x1.shape(), 1.0, rng);
    let t = rng.gen::<f64>();
    FlowSample::new(x0, x1.clone(), t)
}

/// Mean squared error between `v_pred` (`[F×N]`) and the path target.
///
/// With `masked_only` the mean runs over the masked frames (all channels);
/// otherwise over every entry.
pub fn cfm_loss(
    g: &mut Graph<'_>,
    v_pred: Var,
    sample: &FlowSample,
    mask: &TemporalMask,
    masked_only: bool,
) -> Result<Var> {
    let shape = sample.target.shape();
    if g.shape(v_pred) != shape {
        return Err(Error::shape("cfm_loss", g.shape(v_pred), shape));
    }
    let (f, n) = (shape[0], shape[1]);
    if mask.len() != n {
        return Err(Error::shape("cfm_loss", &[mask.len()], &[n]));
    }
    let target = g.constant(sample.target.clone());
    let diff = g.sub(v_pred, target)?;
    let sq = g.mul(diff, diff)?;
    if !masked_only {
        return g.mean(sq);
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::invalid("cfm_loss over an empty mask"));
    }
    let w = 1.0 / (count * f) as f64;
    let weights = mask.to_feature_mask(f).map(|m| m * w);
    let weights = g.constant(weights);
    let wsq = g.mul(sq, weights)?;
    g.sum(wsq)
}

/// `t = u + s·(cos(πu/2) − 1 + u)`.
pub fn sway_sample(u: f64, s: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) || !(-1.0..=1.0).contains(&s) {
        return Err(Error::Domain {
            op: "sway_sample",
            detail: format!("u = {u}, s = {s}; need u in [0, 1] and s in [-1, 1]"),
        });
    }
    Ok(u + s * ((std::f64::consts::FRAC_PI_2 * u).cos() - 1.0 + u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Euler,
    Midpoint,
}

impl FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Self::Euler),
            "midpoint" => Ok(Self::Midpoint),
            _ => Err(Error::Config(format!("unknown solver `{s}`"))),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Midpoint => "midpoint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub nfe_steps: usize,
    pub sway: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Euler,
            nfe_steps: 32,
            sway: -1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe_steps == 0 {
            return Err(Error::Config("sampler.nfe_steps must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.sway) {
            return Err(Error::Config("sampler.sway must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    /// Sway-warped grid `t_0 = 0 < … < t_steps = 1`.
    pub fn time_grid(&self) -> Result<Vec<f64>> {
        self.validate()?;
        (0..=self.nfe_steps)
            .map(|k| sway_sample(k as f64 / self.nfe_steps as f64, self.sway))
            .collect()
    }
}

impl Section for SamplerConfig {
    const PREFIX: &'static str = "sampler";

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = Self::PREFIX;
        match key {
            "solver" => self.solver = value.parse()?,
            "nfe_steps" => self.nfe_steps = parse_value(p, key, value)?,
            "sway" => self.sway = parse_value(p, key, value)?,
            _ => return Err(unknown_key(p, key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("solver", self.solver.to_string()),
            ("nfe_steps", self.nfe_steps.to_string()),
            ("sway", float(self.sway)),
        ]
    }
}

/// A time-dependent vector field `v(x, t)`.
pub trait VectorField {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VectorField for F {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

fn axpy(x: &Tensor, a: f64, v: &Tensor) -> Result<Tensor> {
    x.zip_map(v, |xi, vi| xi + a * vi)
}

/// Integrates `dx/dt = v(x, t)` from `x` along `grid`.
pub fn solve<V: VectorField + ?Sized>(
    field: &V,
    mut x: Tensor,
    grid: &[f64],
    solver: Solver,
) -> Result<Tensor> {
    for (k, w) in grid.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        let v = field.eval(&x, t)?;
        x = match solver {
            Solver::Euler => axpy(&x, dt, &v)?,
            Solver::Midpoint => {
                let mid = axpy(&x, dt / 2.0, &v)?;
                let vm = field.eval(&mid, t + dt / 2.0)?;
                axpy(&x, dt, &vm)?
            }
        };
        if !x.all_finite() {
            return Err(Error::NonFiniteTrajectory { step: k });
        }
    }
    Ok(x)
}

/// Fills the masked frames of `x_m` by integrating the model's vector field
/// from Gaussian noise; unmasked frames are copied from `x_m`.
pub fn integrate<R: Rng + ?Sized>(
    model: &Backbone,
    params: &ParamStore,
    x_m: &Tensor,
    mask: &TemporalMask,
    padded_tokens: &[usize],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let grid = cfg.time_grid()?;
    if mask.len() != x_m.cols() {
        return Err(Error::shape("integrate", &[mask.len()], x_m.shape()));
    }
    let x0 = Tensor::randn(x_m.shape(), 1.0, rng);
    let field = |x: &Tensor, t: f64| {
        let input = ModelInput {
            noisy: x,
            masked: x_m,
            padded_tokens,
        };
        model.predict(params, input, t)
    };
    let mut x = solve(&field, x0, &grid, cfg.solver)?;
    let n = x.cols();
    for f in 0..x.rows() {
        for j in (0..n).filter(|&j| !mask.is_masked(j)) {
            x.set(f, j, x_m.at(f, j));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::apply_mask;
    use crate::model::{randomize_params, ModelConfig};

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn path_endpoints_and_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let x1 = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let s0 = FlowSample::new(x0.clone(), x1.clone(), 0.0).unwrap();
        assert_eq!(s0.psi, x0);
        let s1 = FlowSample::new(x0.clone(), x1.clone(), 1.0).unwrap();
        assert_eq!(s1.psi, x1);
        let diff = x1.zip_map(&x0, |a, b| a - b).unwrap();
        assert_eq!(s0.target, diff);
        assert_eq!(s1.target, diff);
        assert!(FlowSample::new(x0, x1, 1.5).is_err());
    }

    #[test]
    fn path_hand_arithmetic() {
        let s = FlowSample::new(Tensor::scalar(0.0), Tensor::scalar(2.0), 0.5).unwrap();
        assert_eq!(s.psi.item(), 1.0);
        assert_eq!(s.target.item(), 2.0);
    }

    #[test]
    fn make_flow_sample_is_seeded() {
        let x1 = Tensor::ones(&[2, 4]);
        let a = make_flow_sample(&x1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_flow_sample(&x1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!((0.0..1.0).contains(&a.t));
    }

    fn sample() -> FlowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let x1 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        FlowSample::new(x0, x1, 0.3).unwrap()
    }

    #[test]
    fn cfm_loss_zero_at_target() {
        let s = sample();
        for masked in [true, false] {
            let mut g = Graph::new();
            let v = g.input(s.target.clone());
            let l = cfm_loss(&mut g, v, &s, &TemporalMask::span(6, 2, 5), masked).unwrap();
            assert_eq!(g.scalar(l), 0.0);
        }
    }

    #[test]
    fn cfm_loss_constant_offset() {
        let s = sample();
        let mut g = Graph::new();
        let v = g.input(s.target.map(|x| x + 1.0));
        let l = cfm_loss(&mut g, v, &s, &TemporalMask::all(6), true).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cfm_loss_gradient_is_masked_residual() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vp = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let mask = TemporalMask::span(6, 1, 4);
        let mut g = Graph::new();
        let v = g.input(vp.clone());
        let l = cfm_loss(&mut g, v, &s, &mask, true).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(v).unwrap();
        let count = (3 * 3) as f64;
        for f in 0..3 {
            for j in 0..6 {
                let expect = if mask.is_masked(j) {
                    2.0 * (vp.at(f, j) - s.target.at(f, j)) / count
                } else {
                    0.0
                };
                assert_abs_diff_eq!(grad[f * 6 + j], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn cfm_loss_rejects_empty_mask() {
        let s = sample();
        let mut g = Graph::new();
        let v = g.input(s.target.clone());
        assert!(cfm_loss(&mut g, v, &s, &TemporalMask::none(6), true).is_err());
        assert!(cfm_loss(&mut g, v, &s, &TemporalMask::none(6), false).is_ok());
        assert!(cfm_loss(&mut g, v, &s, &TemporalMask::none(5), false).is_err());
    }

    #[test]
    fn sway_examples() {
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            assert_eq!(sway_sample(u, 0.0).unwrap(), u);
        }
        for s in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            assert_abs_diff_eq!(sway_sample(0.0, s).unwrap(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sway_sample(1.0, s).unwrap(), 1.0, epsilon = 1e-12);
        }
        let expect = 0.5 - ((std::f64::consts::FRAC_PI_4).cos() - 0.5);
        assert_abs_diff_eq!(sway_sample(0.5, -1.0).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(sway_sample(0.5, -1.0).unwrap(), 0.292893, epsilon = 1e-6);
        assert!(sway_sample(1.1, 0.0).is_err());
        assert!(sway_sample(0.5, -1.5).is_err());
    }

    #[test]
    fn sway_shifts_mass_toward_small_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sway_sample(rng.gen::<f64>(), -1.0).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!(mean < 0.45, "{mean}");
    }

    proptest! {
        #[test]
        fn sway_is_monotone_and_bounded(s in -1.0f64..=1.0) {
            let mut prev = sway_sample(0.0, s).unwrap();
            for i in 1..=1000 {
                let t = sway_sample(i as f64 / 1000.0, s).unwrap();
                prop_assert!(t >= prev);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&t));
                prev = t;
            }
        }
    }

    #[test]
    fn constant_field_euler_is_exact() {
        let c = t2(&[vec![0.5, -1.25], vec![2.0, 0.125]]);
        let x0 = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let field = |_: &Tensor, _: f64| Ok(c.clone());
        for steps in [1, 3, 7, 32] {
            for sway in [0.0, -1.0] {
                let cfg = SamplerConfig { solver: Solver::Euler, nfe_steps: steps, sway };
                let x = solve(&field, x0.clone(), &cfg.time_grid().unwrap(), Solver::Euler).unwrap();
                for (a, (b, cc)) in x.data().iter().zip(x0.data().iter().zip(c.data())) {
                    assert_abs_diff_eq!(*a, b + cc, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_step_euler_is_one_full_step() {
        let x0 = t2(&[vec![1.0, -2.0]]);
        let field = |x: &Tensor, t: f64| Ok(x.map(|v| v * v + t));
        let x = solve(&field, x0.clone(), &[0.0, 1.0], Solver::Euler).unwrap();
        assert_eq!(x, t2(&[vec![2.0, 2.0]]));
    }

    fn order(solver: Solver) -> f64 {
        let x0 = t2(&[vec![1.0, -0.5, 2.0]]);
        let field = |x: &Tensor, _: f64| Ok(x.clone());
        let err = |steps: usize| {
            let cfg = SamplerConfig { solver, nfe_steps: steps, sway: 0.0 };
            let x = solve(&field, x0.clone(), &cfg.time_grid().unwrap(), solver).unwrap();
            x.data()
                .iter()
                .zip(x0.data())
                .map(|(a, b)| (a - std::f64::consts::E * b).abs())
                .fold(0.0, f64::max)
        };
        (err(64) / err(128)).log2()
    }

    #[test]
    fn solver_orders() {
        let e = order(Solver::Euler);
        let m = order(Solver::Midpoint);
        assert!((0.9..=1.1).contains(&e), "{e}");
        assert!((1.9..=2.1).contains(&m), "{m}");
    }

    #[test]
    fn trajectory_blowup_names_step() {
        let field = |x: &Tensor, t: f64| Ok(if t > 0.4 { x.map(|_| f64::NAN) } else { x.clone() });
        let err = solve(&field, Tensor::ones(&[1, 2]), &[0.0, 0.25, 0.5, 0.75, 1.0], Solver::Euler)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteTrajectory { step: 2 }), "{err}");
    }

    #[test]
    fn integrate_preserves_prompt() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let m = Backbone::new(cfg.clone(), &mut store, &mut rng).unwrap();
        randomize_params(&mut store, 0.2, &mut rng, |_| true);
        let x1 = Tensor::randn(&[cfg.feature_dim, 12], 1.0, &mut rng);
        let mask = TemporalMask::span(12, 4, 12);
        let xm = apply_mask(&x1, &mask).unwrap();
        let toks = vec![1, 2, 3, 12, 12, 12, 12, 12, 12, 12, 12, 12];
        let sc = SamplerConfig { nfe_steps: 4, ..SamplerConfig::default() };
        let out = integrate(&m, &store, &xm, &mask, &toks, &sc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let again = integrate(&m, &store, &xm, &mask, &toks, &sc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(out, again);
        for f in 0..cfg.feature_dim {
            for j in 0..4 {
                assert_eq!(out.at(f, j), xm.at(f, j));
            }
        }
        let mid = SamplerConfig { solver: Solver::Midpoint, ..sc };
        assert!(integrate(&m, &store, &xm, &mask, &toks, &mid, &mut rng).is_ok());
        let bad = SamplerConfig { nfe_steps: 0, ..SamplerConfig::default() };
        assert!(integrate(&m, &store, &xm, &mask, &toks, &bad, &mut rng).is_err());
    }
}
