use nalgebra::{DMatrix, SVD};

use super::{check_nonempty, column_means, Completion, CompletionConfig, CompletionMethod};
use crate::domain::PerformanceMatrix;
use crate::error::{Error, Result};

/// Iterative soft-thresholded SVD. Missing entries start at their column
/// mean; each sweep shrinks the singular values by `lambda`, keeps at most
/// `rank` components and restores the observed entries. Output is clamped to
/// `[0, 1]`.
pub fn soft_impute(m: &PerformanceMatrix, cfg: &CompletionConfig) -> Result<PerformanceMatrix> {
    soft_impute_with_stats(m, cfg).map(|c| c.matrix)
}

pub(crate) fn soft_impute_with_stats(
    m: &PerformanceMatrix,
    cfg: &CompletionConfig,
) -> Result<Completion> {
    cfg.validate()?;
    if cfg.method != CompletionMethod::SoftImpute {
        return Err(Error::invalid("soft_impute needs method = soft_impute"));
    }
    check_nonempty(m)?;
    let (n, p) = (m.n_items(), m.n_cases());
    if m.is_fully_observed() {
        return Ok(Completion {
            matrix: m.clone(),
            converged: true,
            iterations: 0,
        });
    }
    let means = column_means(m)?;
    let mut x = DMatrix::<f64>::from_fn(n, p, |i, j| m.get(i, j).unwrap_or(means[j]));

    let lambda = match cfg.lambda {
        Some(l) => l,
        None => {
            let sv = SVD::new(x.clone(), false, false).singular_values;
            0.1 * sv.iter().copied().fold(0.0, f64::max)
        }
    };
    let rank = cfg.rank.min(n).min(p);

    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let svd = SVD::new(x.clone(), true, true);
        let u = svd.u.as_ref().expect("requested U");
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let mut next = DMatrix::<f64>::zeros(n, p);
        for k in 0..rank.min(svd.singular_values.len()) {
            let s = (svd.singular_values[k] - lambda).max(0.0);
            if s == 0.0 {
                continue;
            }
            next += (u.column(k) * v_t.row(k)) * s;
        }
        for i in 0..n {
            for j in 0..p {
                if let Some(v) = m.get(i, j) {
                    next[(i, j)] = v;
                }
            }
        }
        let change = (&next - &x).norm_squared() / x.norm_squared().max(1e-300);
        x = next;
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut out = m.clone();
    for i in 0..n {
        for j in 0..p {
            if m.get(i, j).is_none() {
                out.set(i, j, Some(x[(i, j)].clamp(0.0, 1.0)));
            }
        }
    }
    Ok(Completion {
        matrix: out,
        converged,
        iterations,
    })
}
