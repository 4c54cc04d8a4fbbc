use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Precision, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many (seeded, random) elements per parameter.
    pub max_elements_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over checked elements)`.
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gradients smaller than this in both estimates agree; central differences
/// cannot resolve them from rounding noise.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABSOLUTE_FLOOR {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

/// Compares reverse-mode gradients of `f` against central differences for each tensor in `params`.
pub fn grad_check<F>(f: F, params: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new(Precision::F64);
    let ids = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(&format!("param{i}"), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    grad_check_params(
        &store,
        |g, s| {
            let vars = ids.iter().map(|id| g.param(s, *id)).collect::<Result<Vec<_>>>()?;
            f(g, &vars)
        },
        &GradCheckOptions::default(),
    )
}

/// Gradient check over every trainable tensor of a parameter store.
pub fn grad_check_params<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if store.precision() != Precision::F64 {
        return Err(Error::arg("gradient checks require 64-bit parameters"));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    g.backward(root)?;
    let grads = g.param_grads(store);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids().filter(|id| store.is_trainable(*id)) {
        let n = store.get(id).len();
        let picks: Vec<usize> = match opts.max_elements_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for e in picks {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(id).map_or(0.0, |g| g[e]);
            worst = worst.max(relative_error(analytic, numeric));
        }
        report.entries.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.5]).unwrap();
        let report = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                g.sum(sq)
            },
            &[x],
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-7, "{report:?}");
    }

    #[test]
    fn zero_parameters_give_empty_report() {
        let report = grad_check(|g, _| g.constant(Tensor::scalar(1.0)), &[]).unwrap();
        assert!(report.is_empty());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::scalar(700.0);
        let res = grad_check(
            |g, p| {
                let e = g.exp(p[0])?;
                let e2 = g.mul(e, e)?;
                g.sum(e2)
            },
            &[x],
        );
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
