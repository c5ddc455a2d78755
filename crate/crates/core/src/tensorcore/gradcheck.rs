//! Central finite-difference checks against the tape's analytic gradients.
//!
//! Losses containing stop-gradients are checked as functions of the
//! parameters with every detached value held at its base-point value; build
//! the perturbed graphs with [`Graph::replaying`](crate::tensorcore::Graph::replaying).

use crate::error::Result;
use crate::rng::Rng;
use crate::tensorcore::{ParamId, ParamStore, Tensor};

/// Outcome of comparing one parameter entry.
#[derive(Debug, Clone, Copy)]
pub struct EntryCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl EntryCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Central difference `(f(p+h) - f(p-h)) / 2h` for one entry.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    step: f64,
    loss: &mut impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = store.value(id).data()[index];
    store.value_mut(id).data_mut()[index] = orig + step;
    let plus = loss(store);
    store.value_mut(id).data_mut()[index] = orig - step;
    let minus = loss(store);
    store.value_mut(id).data_mut()[index] = orig;
    Ok((plus? - minus?) / (2.0 * step))
}

/// Fourth-order central stencil
/// `(-f(p+2h) + 8 f(p+h) - 8 f(p-h) + f(p-2h)) / 12h`.
pub fn five_point_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    step: f64,
    loss: &mut impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = store.value(id).data()[index];
    let mut at = |k: f64| {
        store.value_mut(id).data_mut()[index] = orig + k * step;
        loss(store)
    };
    let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
    store.value_mut(id).data_mut()[index] = orig;
    Ok((8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * step))
}

/// Compares analytic gradients with five-point differences on up to
/// `per_param` randomly chosen entries of every trainable parameter.
pub fn check_params(
    store: &mut ParamStore,
    analytic: &[Tensor],
    step: f64,
    per_param: usize,
    rng: &mut Rng,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<EntryCheck>> {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut out = Vec::new();
    for id in ids {
        let n = store.value(id).numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.below(n)).collect()
        };
        for index in picks {
            let numeric = five_point_difference(store, id, index, step, &mut loss)?;
            out.push(EntryCheck {
                param: id,
                index,
                analytic: analytic[id.index()].data()[index],
                numeric,
            });
        }
    }
    Ok(out)
}
