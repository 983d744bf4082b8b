//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::AutodiffError;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Tensors with more coordinates than this are checked on a seeded random subsample.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Gradients smaller than this are compared in absolute rather than relative terms.
    pub abs_floor: f64,
    /// A coordinate whose forward and backward one-sided differences disagree by
    /// more than this (relative) straddles a kink (relu, max, hinge) and is skipped.
    pub kink_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, max_coords_per_param: 64, seed: 0, abs_floor: 1e-6, kink_tolerance: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_nondifferentiable: usize,
}

/// Compares the analytic gradient of the loss built by `build` against central
/// differences for every trainable parameter coordinate (or a subsample of it).
///
/// Parameter values are restored before returning.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    mut build: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, AutodiffError>,
{
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    let base = graph.scalar_value(loss);
    graph.backward(loss, store)?;
    drop(graph);
    let analytic: Vec<_> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let v = build(&mut g, store)?;
        let value = g.scalar_value(v);
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite("gradient_check loss"));
        }
        Ok(value)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report =
        GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0, skipped_nondifferentiable: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let coords: Vec<usize> = if n <= config.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, config.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for coord in coords {
            let original = store.get(id).value.data()[coord];
            store.get_mut(id).value.data_mut()[coord] = original + config.eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[coord] = original - config.eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[coord] = original;
            let (plus, minus) = (plus?, minus?);

            let central = (plus - minus) / (2.0 * config.eps);
            let forward = (plus - base) / config.eps;
            let backward = (base - minus) / config.eps;
            if (forward - backward).abs() > config.kink_tolerance * central.abs().max(1.0) {
                report.skipped_nondifferentiable += 1;
                continue;
            }
            let a = analytic[id.index()].data()[coord];
            let denom = a.abs().max(central.abs()).max(config.abs_floor);
            let rel = (a - central).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((store.get(id).name.clone(), coord));
            }
        }
    }
    Ok(report)
}
