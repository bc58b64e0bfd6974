//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// The coordinate behind `max_rel_err`, for diagnosing failures.
    pub worst: Option<WorstCoordinate>,
}

#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare analytic gradients against central finite differences
/// (f(θ+ε) − f(θ−ε)) / 2ε on up to `max_coords` parameter coordinates,
/// sampled without replacement across every parameter the loss touches.
///
/// Central differencing evaluates the loss to roughly machine precision,
/// so its estimate carries an irreducible absolute noise of about
/// ε_machine·|f| / step. Each coordinate's discrepancy is therefore
/// measured net of that allowance (with a 32× safety factor):
/// rel = max(0, |a − n| − 32·ε_machine·max(1, |f|)/step) / max(|a|, |n|, 1e-8).
/// A gradient smaller than the allowance is below what any finite-difference
/// oracle at this step can resolve; real defects remain visible because they
/// scale with the gradients they corrupt. The step must lie in
/// [1e-7, 1e-3]; parameters are restored bit-exactly afterwards.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    eps: f64,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let f0 = tape.value_scalar(loss)?;
    let noise_allowance = 32.0 * f64::EPSILON * f0.abs().max(1.0) / eps;
    tape.backward(loss)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = store
        .ids()
        .filter_map(|id| tape.param_grad(id).map(|g| (id, g.to_vec())))
        .collect();
    let coords: Vec<(ParamId, usize)> = analytic
        .iter()
        .flat_map(|(id, g)| (0..g.len()).map(move |i| (*id, i)))
        .collect();
    if coords.is_empty() {
        return Err(Error::Numerical(
            "loss does not depend on any parameter".into(),
        ));
    }
    let chosen: Vec<(ParamId, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        sample(rng, coords.len(), max_coords)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(store, &mut t)?;
        let v = t.value_scalar(l)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference probe loss".into(),
            });
        }
        Ok(v)
    };

    let mut max_rel_err: f64 = 0.0;
    let mut worst: Option<WorstCoordinate> = None;
    for &(pid, ci) in &chosen {
        let orig = store.get(pid).values()[ci];
        store.get_mut(pid).values_mut()[ci] = orig + eps;
        let plus = eval(store);
        store.get_mut(pid).values_mut()[ci] = orig - eps;
        let minus = eval(store);
        store.get_mut(pid).values_mut()[ci] = orig;
        let (plus, minus) = (plus?, minus?);
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic
            .iter()
            .find(|(id, _)| *id == pid)
            .map(|(_, g)| g[ci])
            .expect("chosen coordinate comes from analytic set");
        let excess = ((a - numeric).abs() - noise_allowance).max(0.0);
        let rel = excess / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = Some(WorstCoordinate {
                param: store.name(pid).to_string(),
                index: ci,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(GradCheckReport {
        checked: chosen.len(),
        max_rel_err,
        worst,
    })
}
