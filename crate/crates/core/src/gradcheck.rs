//! Central-difference validation of graph adjoints.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::RealTensor;

/// `(f(h) − f(−h)) / 2h` where `f` evaluates the function at an offset.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Builds a scalar-valued graph from parameter tensors, returning the
/// parameter handles (one per input tensor, in order) and the root.
pub trait GraphBuilder: Fn(&mut Graph, &[RealTensor]) -> Result<(Vec<Var>, Var)> {}
impl<F> GraphBuilder for F where F: Fn(&mut Graph, &[RealTensor]) -> Result<(Vec<Var>, Var)> {}

/// Max relative error between the graph gradient and central differences
/// over the listed `(tensor, element)` entries.
pub fn grad_check_entries(
    build: impl GraphBuilder,
    params: &[RealTensor],
    entries: &[(usize, usize)],
    h: f64,
) -> Result<f64> {
    grad_check_entries_on(Graph::new, build, params, entries, h)
}

/// As [`grad_check_entries`], with the analytic pass on a graph from
/// `new_graph`.
pub fn grad_check_entries_on(
    new_graph: impl Fn() -> Graph,
    build: impl GraphBuilder,
    params: &[RealTensor],
    entries: &[(usize, usize)],
    h: f64,
) -> Result<f64> {
    let mut g = new_graph();
    let (vars, root) = build(&mut g, params)?;
    let grads = g.backward(root)?;
    let mut worst = 0.0f64;
    for &(pi, j) in entries {
        let analytic = grads.get(vars[pi]).map_or(0.0, |t| t.data()[j]);
        let eval = |off: f64| -> Result<f64> {
            let mut p = params.to_vec();
            p[pi].data_mut()[j] += off;
            let mut g = Graph::new();
            let (_, root) = build(&mut g, &p)?;
            Ok(g.scalar(root))
        };
        let plus = eval(h)?;
        let minus = eval(-h)?;
        worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

/// Max relative error over every parameter element.
pub fn grad_check(build: impl GraphBuilder, params: &[RealTensor], h: f64) -> Result<f64> {
    let entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_entries(build, params, &entries, h)
}
