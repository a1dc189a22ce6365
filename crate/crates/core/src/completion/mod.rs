//! Imputation of missing performance entries.
//!
//! Two methods share one configuration: a low-rank Gaussian copula fitted by
//! expectation-maximisation, and iterative soft-thresholded SVD.

mod copula;
mod marginal;
mod soft_impute;

use serde::{Deserialize, Serialize};

use crate::domain::PerformanceMatrix;
use crate::error::{Error, Result};

pub use copula::{fit_copula, impute, CopulaModel};
pub use marginal::{fit_marginal, Marginal};
pub use soft_impute::soft_impute;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionMethod {
    Copula,
    SoftImpute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub method: CompletionMethod,
    /// Latent rank; capped at `min(n_items, n_cases)` of the matrix being fitted.
    pub rank: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Singular-value threshold for soft impute. `None` picks 0.1 × the
    /// largest singular value of the mean-filled matrix.
    pub lambda: Option<f64>,
    pub rng_seed: u64,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            method: CompletionMethod::Copula,
            rank: 10,
            max_iterations: 200,
            tolerance: 1e-4,
            lambda: None,
            rng_seed: 0,
        }
    }
}

impl CompletionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("completion rank must be at least 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if let Some(l) = self.lambda {
            if l.is_nan() || l < 0.0 {
                return Err(Error::invalid("lambda must be non-negative"));
            }
        }
        Ok(())
    }
}

/// A fully observed matrix plus fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub matrix: PerformanceMatrix,
    pub converged: bool,
    pub iterations: usize,
}

/// Runs the configured method end to end.
pub fn complete(m: &PerformanceMatrix, cfg: &CompletionConfig) -> Result<Completion> {
    match cfg.method {
        CompletionMethod::Copula => {
            let model = fit_copula(m, cfg)?;
            Ok(Completion {
                matrix: impute(m, &model)?,
                converged: model.converged,
                iterations: model.iterations,
            })
        }
        CompletionMethod::SoftImpute => soft_impute::soft_impute_with_stats(m, cfg),
    }
}

/// Per-column observed means; columns with fewer than two observations get
/// the mean over all observed entries.
pub(crate) fn column_means(m: &PerformanceMatrix) -> Result<Vec<f64>> {
    let pooled: Vec<f64> = m.rows().iter().flatten().filter_map(|v| *v).collect();
    if pooled.is_empty() {
        return Err(Error::invalid("matrix has no observed entries"));
    }
    let global = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok((0..m.n_cases())
        .map(|j| {
            let obs = m.observed_in_column(j);
            if obs.len() < 2 {
                global
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            }
        })
        .collect())
}

pub(crate) fn check_nonempty(m: &PerformanceMatrix) -> Result<()> {
    if m.n_items() == 0 || m.n_cases() == 0 {
        Err(Error::EmptyMatrix)
    } else {
        Ok(())
    }
}
