//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+εe) − f(θ−εe)) / 2ε` on up to `max_coords` coordinates of every
/// trainable parameter. The error per coordinate is
/// `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
///
/// `f` must be deterministic: it is re-evaluated for every perturbation.
pub fn grad_check<F>(
    params: &ParameterSet<f64>,
    f: F,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let eval = |p: &ParameterSet<f64>| -> Result<f64> {
        let mut g = Graph::train(p, None);
        let out = f(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::train(params, None);
        let out = f(&mut g)?;
        if !g.scalar(out).is_finite() {
            return Err(Error::NonFinite("objective at the base point".into()));
        }
        g.backward(out)?
    };

    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get(id);
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((p.name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
