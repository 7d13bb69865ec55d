//! Central finite-difference verification of graph gradients.

use crate::error::{Error, Result};

use super::{Graph, ParamStore, Var};

/// Comparison for one named input tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max_i |g_ad[i] - g_fd[i]|`
    pub max_abs_err: f64,
    /// `max(max_i |g_ad[i]|, max_i |g_fd[i]|, 1e-8)`
    pub scale: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub value: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if g.shape(out).iter().product::<usize>() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok(g.scalar(out))
}

/// Checks reverse-mode gradients of a scalar function of every tensor in
/// `inputs` against central differences with step `eps`.
///
/// The function is evaluated twice at the unperturbed point first; differing
/// results are reported as [`Error::NonDeterministic`].
pub fn grad_check<F>(f: F, inputs: &ParamStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!(
            "eps must lie in (0, 1e-2], got {eps}"
        )));
    }

    let (value, analytic) = {
        let mut g = Graph::new();
        let out = f(&mut g, inputs)?;
        g.backward(out)?;
        let grads: Vec<Vec<f64>> = inputs
            .iter()
            .map(|(id, _, t)| {
                g.param_grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        (g.scalar(out), grads)
    };
    let again = evaluate(&f, inputs)?;
    if again.to_bits() != value.to_bits() {
        return Err(Error::NonDeterministic {
            first: value,
            second: again,
        });
    }

    let mut probe = inputs.clone();
    let mut entries = Vec::with_capacity(inputs.len());
    for (pi, id) in inputs.ids().enumerate() {
        let mut max_abs_err: f64 = 0.0;
        let mut max_ad: f64 = 0.0;
        let mut max_fd: f64 = 0.0;
        for k in 0..inputs.get(id).numel() {
            let orig = inputs.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[pi][k];
            max_abs_err = max_abs_err.max((ad - fd).abs());
            max_ad = max_ad.max(ad.abs());
            max_fd = max_fd.max(fd.abs());
        }
        let scale = max_ad.max(max_fd).max(1e-8);
        entries.push(GradCheckEntry {
            name: inputs.name(id).to_string(),
            max_abs_err,
            scale,
            rel_error: max_abs_err / scale,
        });
    }
    Ok(GradCheckReport {
        eps,
        tol,
        value,
        entries,
    })
}
