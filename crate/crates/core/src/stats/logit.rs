use serde::Serialize;

use crate::error::{Error, Result};

/// Maximum-likelihood logistic regression fit with Wald tests.
///
/// Coefficients are ordered intercept first, then one per feature column.
/// When `separation` is set the likelihood has no finite maximizer; the
/// coefficient estimates are the last iterate and no standard errors, z
/// values, or p-values are reported.
#[derive(Debug, Clone, Serialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub standard_errors: Option<Vec<f64>>,
    pub z_values: Option<Vec<f64>>,
    /// Two-sided Wald p-values.
    pub p_values: Option<Vec<f64>>,
    pub converged: bool,
    pub separation: bool,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 100;
const GRADIENT_TOLERANCE: f64 = 1e-10;
/// Coefficient magnitude beyond which the fit is treated as diverging
/// (odds ratios above e^30 have no data support at this scale).
const DIVERGENCE_BOUND: f64 = 30.0;

/// Fit `P(y=1 | x) = sigmoid(b0 + x . b)` by Newton-Raphson on the
/// log-likelihood. `rows` are feature vectors of equal length (the intercept
/// is added internally); `outcomes` are the binary responses.
pub fn logistic_fit(rows: &[Vec<f64>], outcomes: &[bool]) -> Result<LogisticFit> {
    let n = rows.len();
    if n != outcomes.len() {
        return Err(Error::dim(
            "logistic_fit",
            format!("{} rows vs {} outcomes", n, outcomes.len()),
        ));
    }
    if n == 0 {
        return Err(Error::data("logistic_fit requires at least one row"));
    }
    let p = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
        return Err(Error::dim(
            "logistic_fit",
            format!("row {} has {} features, expected {}", i, r.len(), p),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::contract("logistic_fit features must be finite"));
    }
    let d = p + 1;
    if n <= d {
        return Err(Error::data(format!(
            "logistic_fit needs more rows ({}) than coefficients ({})",
            n, d
        )));
    }
    if outcomes.iter().all(|y| *y) || outcomes.iter().all(|y| !*y) {
        return Err(Error::data("outcomes must contain both classes"));
    }
    for j in 0..p {
        let first = rows[0][j];
        if rows.iter().all(|r| r[j] == first) {
            return Err(Error::data(format!(
                "feature column {} is constant; drop it or add variation",
                j
            )));
        }
    }

    // Design matrix with intercept column.
    let x = |i: usize, j: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            rows[i][j - 1]
        }
    };

    let mut beta = vec![0.0; d];
    let mut iterations = 0;
    let mut converged = false;
    let mut separation = false;
    let mut hessian = vec![0.0; d * d];
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut grad = vec![0.0; d];
        for h in hessian.iter_mut() {
            *h = 0.0;
        }
        for i in 0..n {
            let mut eta = 0.0;
            for j in 0..d {
                eta += x(i, j) * beta[j];
            }
            let mu = sigmoid(eta);
            let w = mu * (1.0 - mu);
            let resid = if outcomes[i] { 1.0 - mu } else { -mu };
            for j in 0..d {
                grad[j] += x(i, j) * resid;
                for l in j..d {
                    hessian[j * d + l] += w * x(i, j) * x(i, l);
                }
            }
        }
        for j in 0..d {
            for l in 0..j {
                hessian[j * d + l] = hessian[l * d + j];
            }
        }

        let grad_max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_max <= GRADIENT_TOLERANCE {
            converged = true;
            break;
        }

        let delta = match cholesky_solve(&hessian, &grad, d) {
            Some(delta) => delta,
            None => {
                if iterations == 1 {
                    // At beta = 0 the Hessian is XtX/4; singularity there
                    // means collinear columns, not separation.
                    return Err(Error::data(
                        "logistic_fit design matrix is rank deficient (collinear features)",
                    ));
                }
                // Weights collapsed: fitted probabilities at 0/1.
                separation = true;
                break;
            }
        };
        for j in 0..d {
            beta[j] += delta[j];
        }
        if beta.iter().any(|b| b.abs() > DIVERGENCE_BOUND) {
            separation = true;
            break;
        }
    }
    if !converged && !separation {
        // Newton converges quadratically whenever a finite MLE exists, so
        // exhausting the iteration budget means the optimum is at infinity.
        separation = true;
    }

    if separation {
        return Ok(LogisticFit {
            coefficients: beta,
            standard_errors: None,
            z_values: None,
            p_values: None,
            converged: false,
            separation: true,
            iterations,
        });
    }

    // Wald statistics from the inverse observed information.
    let cov = match invert_spd(&hessian, d) {
        Some(cov) => cov,
        None => {
            return Err(Error::numeric(
                "logistic_fit information matrix inversion",
            ))
        }
    };
    let se: Vec<f64> = (0..d).map(|j| cov[j * d + j].sqrt()).collect();
    if se.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::numeric("logistic_fit standard errors"));
    }
    let z: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let pvals: Vec<f64> = z.iter().map(|z| 2.0 * (1.0 - normal_cdf(z.abs()))).collect();
    Ok(LogisticFit {
        coefficients: beta,
        standard_errors: Some(se),
        z_values: Some(z),
        p_values: Some(pvals),
        converged,
        separation: false,
        iterations,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solve `A x = b` for symmetric positive-definite `A` (row-major, d x d).
/// Returns `None` when a pivot falls below tolerance.
fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, d)?;
    // Forward substitution L y = b, then back substitution L^T x = y.
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i * d + j] * y[j];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for j in i + 1..d {
            s -= l[j * d + i] * x[j];
        }
        x[i] = s / l[i * d + i];
    }
    Some(x)
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 1e-12 * (1.0 + a[i * d + i].abs()) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn invert_spd(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; d * d];
    for col in 0..d {
        let mut e = vec![0.0; d];
        e[col] = 1.0;
        let x = cholesky_solve(a, &e, d)?;
        for row in 0..d {
            inv[row * d + col] = x[row];
        }
    }
    Some(inv)
}

/// Standard normal CDF via `erfc`; absolute error below 1e-7, which is
/// ample for Wald p-values.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (rational approximation; |error| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}
