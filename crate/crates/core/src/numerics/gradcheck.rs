//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::graph::{Graph, NodeId};
use super::tensor::TensorMap;
use super::NumericsError;
use crate::scalar::Scalar;

/// Which leaf table a checked leaf lives in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Leaf {
    Param(String),
    Input(String),
}

impl Leaf {
    pub fn name(&self) -> &str {
        match self {
            Leaf::Param(n) | Leaf::Input(n) => n,
        }
    }
}

/// Per-leaf comparison of analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub components: usize,
}

/// Options for [`gradient_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Gradient magnitudes below this are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            floor: 1e-6,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward gradients of the scalar `output` against central
/// differences `(f(x + e) - f(x - e)) / 2e` for every scalar component of
/// every requested leaf. Components are evaluated in parallel.
pub fn gradient_check<T: Scalar>(
    graph: &Graph<T>,
    params: &TensorMap<T>,
    inputs: &TensorMap<T>,
    output: NodeId,
    leaves: &[Leaf],
    options: GradCheckOptions,
) -> Result<BTreeMap<String, LeafReport>, NumericsError> {
    if !(1e-7..=1e-3).contains(&options.epsilon) {
        return Err(NumericsError::BadEpsilon(options.epsilon));
    }
    let base = graph.forward_eval(params, inputs)?;
    let grads = graph.backward(&base, output)?;
    let eps = T::lit(options.epsilon);

    let mut reports = BTreeMap::new();
    for leaf in leaves {
        let (table, analytic) = match leaf {
            Leaf::Param(n) => (params, grads.params.get(n)),
            Leaf::Input(n) => (inputs, grads.inputs.get(n)),
        };
        let analytic = analytic.ok_or_else(|| NumericsError::Unbound {
            kind: "leaf",
            name: leaf.name().to_string(),
        })?;
        let n = table[leaf.name()].len();

        let id = graph
            .leaf_id(leaf.name(), matches!(leaf, Leaf::Param(_)))
            .ok_or_else(|| NumericsError::Unbound {
                kind: "leaf",
                name: leaf.name().to_string(),
            })?;
        let dirty = graph.downstream(id);
        let original = &table[leaf.name()];

        // only nodes downstream of the leaf are recomputed
        let numeric: Vec<Result<f64, NumericsError>> = (0..n)
            .into_par_iter()
            .map_init(
                || original.clone(),
                |t, i| {
                    let orig = t.data()[i];
                    t.data_mut()[i] = orig + eps;
                    let plus = graph.reevaluate(&base, id, t, &dirty, output);
                    t.data_mut()[i] = orig - eps;
                    let minus = graph.reevaluate(&base, id, t, &dirty, output);
                    t.data_mut()[i] = orig;
                    if !plus.is_finite() || !minus.is_finite() {
                        return Err(NumericsError::NonFinite {
                            context: format!("perturbed loss at {}[{i}]", leaf.name()),
                        });
                    }
                    Ok(((plus - minus) / (eps + eps)).to_f64_lossy())
                },
            )
            .collect();

        let mut report = LeafReport {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            components: n,
        };
        for (i, num) in numeric.into_iter().enumerate() {
            let num = num?;
            let a = analytic.data()[i].to_f64_lossy();
            report.max_abs_error = report.max_abs_error.max((a - num).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, num, options.floor));
        }
        reports.insert(leaf.name().to_string(), report);
    }
    Ok(reports)
}

/// Every parameter leaf of `graph`.
pub fn all_params<T: Scalar>(graph: &Graph<T>) -> Vec<Leaf> {
    graph.param_names().into_iter().map(Leaf::Param).collect()
}
