use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all checked elements,
    /// `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// Input index and flat element index where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
    pub tolerance: f64,
}

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences, element by element, over every input.
///
/// `build` is invoked with leaves entered in input order and must return a
/// scalar var. `step` must lie in `(0, 1e-3]`; differences use `(f(x+h) -
/// f(x-h)) / 2h`. Gradients are checked for every input regardless of its
/// `requires_grad` flag.
pub fn grad_check<F>(
    mut build: F,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::config(format!(
            "grad_check step must be in (0, 1e-3], got {}",
            step
        )));
    }
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(Error::config("grad_check tolerance must be positive"));
    }

    // Analytic pass: every input participates in differentiation.
    let mut tracked: Vec<Tensor> = inputs.to_vec();
    for t in &mut tracked {
        t.set_requires_grad(true);
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = tracked
        .iter()
        .map(|t| graph.leaf(t))
        .collect::<Result<_>>()?;
    let loss = build(&mut graph, &vars)?;
    if graph.value(loss).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar loss, got shape {:?}",
            graph.shape(loss)
        )));
    }
    let pass = graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            pass.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    // Numeric pass: forward evaluations only.
    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed
            .iter()
            .map(|t| g.leaf(t))
            .collect::<Result<_>>()?;
        let l = build(&mut g, &vs)?;
        Ok(g.value(l)[0])
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for t in &mut work {
        t.set_requires_grad(false);
    }
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for ti in 0..work.len() {
        for e in 0..work[ti].len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::numeric("grad_check finite difference"));
            }
            let rel = (analytic[ti][e] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((ti, e));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst,
        pass: max_rel_error <= tolerance,
        tolerance,
    })
}
