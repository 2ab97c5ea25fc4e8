//! Central finite-difference checking of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, 1e-7)`; the floor absorbs finite-difference
    /// round-off on entries whose true gradient is zero.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-7);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// `(f(p + eps) - f(p - eps)) / 2 eps` for one scalar entry.
pub fn numeric_partial(
    params: &Params,
    name: &str,
    index: usize,
    eps: f64,
    loss: &impl Fn(&Params) -> f64,
) -> f64 {
    let mut probe = params.clone();
    let base = probe.get(name).expect("unknown parameter").data()[index];
    probe.get_mut(name).unwrap().data_mut()[index] = base + eps;
    let up = loss(&probe);
    probe.get_mut(name).unwrap().data_mut()[index] = base - eps;
    let down = loss(&probe);
    (up - down) / (2.0 * eps)
}

/// Compare `analytic` against central differences at `samples` positions drawn
/// uniformly (without replacement) from all entries of `params` accepted by
/// `include`. Entries missing from `analytic` are treated as zero gradient.
pub fn check_gradients(
    params: &Params,
    analytic: &BTreeMap<String, Tensor>,
    samples: usize,
    seed: u64,
    eps: f64,
    include: impl Fn(&str) -> bool,
    loss: impl Fn(&Params) -> f64,
) -> Vec<GradSample> {
    let positions: Vec<(String, usize)> = params
        .iter()
        .filter(|(name, _)| include(name))
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, positions.len(), samples.min(positions.len()));
    let mut picked: Vec<usize> = picked.into_iter().collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|p| {
            let (name, index) = &positions[p];
            let a = analytic.get(name).map_or(0.0, |g| g.data()[*index]);
            GradSample {
                name: name.clone(),
                index: *index,
                analytic: a,
                numeric: numeric_partial(params, name, *index, eps, &loss),
            }
        })
        .collect()
}

pub fn max_rel_error(samples: &[GradSample]) -> f64 {
    samples.iter().map(GradSample::rel_error).fold(0.0, f64::max)
}
