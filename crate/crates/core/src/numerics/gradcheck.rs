//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index;

use super::param::{ParamId, ParamStore};
use super::rng::seeded;
use super::tape::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Check only this many uniformly sampled trainable coordinates.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            samples: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checks: Vec<CoordinateCheck>,
    /// Kink margin of the unperturbed forward pass.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares gradients of the scalar built by `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` over the trainable parameters of `store`.
///
/// `f` receives a fresh inference-mode graph for every evaluation.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut graph = Graph::new(false, 0);
    let root = f(&mut graph, store)?;
    let base = graph.value(root).data()[0];
    if !base.is_finite() {
        return Err(Error::Numerical(format!("objective is not finite: {base}")));
    }
    let kink_margin = graph.kink_margin();
    store.zero_grad();
    graph.backward(root)?.accumulate_into(&graph, store);

    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect();
    let selected: Vec<(ParamId, usize)> = match config.samples {
        Some(n) if n < coords.len() => {
            let mut rng = seeded(config.seed);
            let mut picks = index::sample(&mut rng, coords.len(), n).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let h = config.step;
    let mut checks = Vec::with_capacity(selected.len());
    for (id, i) in selected {
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map_or(0.0, |g| g.data()[i]);
        let original = store.get(id).value.data()[i];
        let mut eval = |store: &mut ParamStore<f64>, v: f64| -> Result<f64> {
            store.get_mut(id).value.data_mut()[i] = v;
            let mut g = Graph::new(false, 0);
            let root = f(&mut g, store)?;
            Ok(g.value(root).data()[0])
        };
        let plus = eval(store, original + h)?;
        let minus = eval(store, original - h)?;
        store.get_mut(id).value.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let name = &store.get(id).name;
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {name}[{i}]: analytic {analytic}, numeric {numeric}"
            )));
        }
        checks.push(CoordinateCheck {
            param: name.clone(),
            index: i,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        checks,
        kink_margin,
    })
}
