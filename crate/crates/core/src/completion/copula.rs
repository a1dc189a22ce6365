//! Low-rank Gaussian copula imputation.
//!
//! Every observed entry is mapped to a latent standard-normal score through
//! its column's empirical marginal. Treating items as observations and cases
//! as variables, the latent rows follow `z_i = W t_i + e_i` with
//! `t_i ~ N(0, I_d)` and `e_i ~ N(0, sigma^2 I)`, so the latent matrix is
//! `Z = G H^T` plus isotropic noise, with `H = W` and `G` the posterior means of
//! the `t_i`. `W` and `sigma^2` are fitted by EM on the observed latents; the
//! missing latents are integrated out exactly. Imputation maps the
//! conditional latent mean back through `Phi` and the column quantile.

use nalgebra::{DMatrix, DVector, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as NormalDist};
use statrs::distribution::{ContinuousCDF, Normal};

use super::marginal::{fit_marginal, Marginal};
use super::{check_nonempty, CompletionConfig, CompletionMethod};
use crate::domain::PerformanceMatrix;
use crate::error::{Error, Result};

const MIN_NOISE: f64 = 1e-6;
// keeps Phi^-1 finite when a marginal is evaluated at an extreme
const LATENT_CLIP: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct CopulaModel {
    pub item_ids: Vec<String>,
    pub case_ids: Vec<String>,
    /// One marginal per case column.
    pub marginals: Vec<Marginal>,
    /// Columns that had fewer than two observations and use the pooled marginal.
    pub pooled_columns: Vec<bool>,
    /// Item factors, n_items × rank (posterior means of the latent scores).
    pub item_factors: DMatrix<f64>,
    /// Case loadings, n_cases × rank.
    pub case_factors: DMatrix<f64>,
    pub noise_variance: f64,
    pub rank: usize,
    pub converged: bool,
    pub iterations: usize,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn to_latent(n: &Normal, marginal: &Marginal, v: f64) -> f64 {
    n.inverse_cdf(marginal.cdf(v)).clamp(-LATENT_CLIP, LATENT_CLIP)
}

/// Column marginals, falling back to the pooled marginal for columns with
/// fewer than two observations.
fn fit_marginals(m: &PerformanceMatrix) -> Result<(Vec<Marginal>, Vec<bool>)> {
    let pooled_values: Vec<f64> = m.rows().iter().flatten().filter_map(|v| *v).collect();
    let pooled = fit_marginal(&pooled_values).ok();
    let mut marginals = Vec::with_capacity(m.n_cases());
    let mut flags = Vec::with_capacity(m.n_cases());
    for j in 0..m.n_cases() {
        match fit_marginal(&m.observed_in_column(j)) {
            Ok(marg) => {
                marginals.push(marg);
                flags.push(false);
            }
            Err(Error::UnderObserved(_)) => {
                let p = pooled.clone().ok_or_else(|| {
                    Error::invalid("fewer than two observed entries in the whole matrix")
                })?;
                marginals.push(p);
                flags.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((marginals, flags))
}

/// Observed latent entries of every row as (column, value) pairs.
fn latent_rows(m: &PerformanceMatrix, marginals: &[Marginal]) -> Vec<Vec<(usize, f64)>> {
    let n = std_normal();
    m.rows()
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter_map(|(j, v)| v.map(|x| (j, to_latent(&n, &marginals[j], x))))
                .collect()
        })
        .collect()
}

/// Posterior of the latent score of one row: mean and second moment.
struct RowPosterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn row_posterior(w: &DMatrix<f64>, sigma2: f64, obs: &[(usize, f64)]) -> RowPosterior {
    let d = w.ncols();
    let mut precision = DMatrix::<f64>::identity(d, d) * sigma2;
    let mut rhs = DVector::<f64>::zeros(d);
    for &(j, z) in obs {
        let wj = w.row(j);
        for a in 0..d {
            rhs[a] += wj[a] * z;
            for b in 0..d {
                precision[(a, b)] += wj[a] * wj[b];
            }
        }
    }
    let inv = match precision.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => precision
            .pseudo_inverse(1e-12)
            .unwrap_or_else(|_| DMatrix::identity(d, d)),
    };
    RowPosterior {
        mean: &inv * rhs,
        cov: inv * sigma2,
    }
}

fn init_loadings(
    latent: &[Vec<(usize, f64)>],
    n_items: usize,
    n_cases: usize,
    d: usize,
    seed: u64,
) -> (DMatrix<f64>, f64) {
    let mut z = DMatrix::<f64>::zeros(n_items, n_cases);
    let mut n_obs = 0usize;
    for (i, row) in latent.iter().enumerate() {
        for &(j, v) in row {
            z[(i, j)] = v;
            n_obs += 1;
        }
    }
    let svd = SVD::new(z.clone(), false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let scale = 1.0 / (n_items as f64).sqrt();
    let mut w = DMatrix::<f64>::zeros(n_cases, d);
    let mut explained = 0.0;
    for k in 0..d.min(svd.singular_values.len()) {
        let s = svd.singular_values[k];
        explained += s * s;
        for j in 0..n_cases {
            w[(j, k)] = v_t[(k, j)] * s * scale;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = NormalDist::new(0.0, 1e-2).expect("valid sd");
    for v in w.iter_mut() {
        *v += jitter.sample(&mut rng);
    }
    let total = z.norm_squared();
    let resid = if n_obs > 0 {
        ((total - explained) / n_obs as f64).max(0.0)
    } else {
        1.0
    };
    (w, resid.max(1e-2))
}

/// Fits the copula model to the observed entries of `m`.
pub fn fit_copula(m: &PerformanceMatrix, cfg: &CompletionConfig) -> Result<CopulaModel> {
    cfg.validate()?;
    if cfg.method != CompletionMethod::Copula {
        return Err(Error::invalid("fit_copula needs method = copula"));
    }
    check_nonempty(m)?;
    let (n_items, n_cases) = (m.n_items(), m.n_cases());
    let (marginals, pooled_columns) = fit_marginals(m)?;
    let latent = latent_rows(m, &marginals);
    let d = cfg.rank.min(n_items).min(n_cases);

    let (mut w, mut sigma2) = init_loadings(&latent, n_items, n_cases, d, cfg.rng_seed);
    let mut converged = false;
    let mut iterations = 0;
    let total = (n_items * n_cases) as f64;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let posts: Vec<RowPosterior> = latent
            .iter()
            .map(|obs| row_posterior(&w, sigma2, obs))
            .collect();

        // sum_i E[z_i t_i^T] and sum_i E[t_i t_i^T]
        let mut zt = DMatrix::<f64>::zeros(n_cases, d);
        let mut tt = DMatrix::<f64>::zeros(d, d);
        let mut observed = vec![false; n_cases];
        for (obs, post) in latent.iter().zip(&posts) {
            let ett = &post.cov + &post.mean * post.mean.transpose();
            observed.iter_mut().for_each(|o| *o = false);
            for &(j, z) in obs {
                observed[j] = true;
                for a in 0..d {
                    zt[(j, a)] += z * post.mean[a];
                }
            }
            let w_ett = &w * &ett;
            for j in (0..n_cases).filter(|&j| !observed[j]) {
                for a in 0..d {
                    zt[(j, a)] += w_ett[(j, a)];
                }
            }
            tt += ett;
        }
        let tt_inv = match tt.clone().cholesky() {
            Some(ch) => ch.inverse(),
            None => tt.pseudo_inverse(1e-12).map_err(Error::invalid)?,
        };
        let w_new = &zt * tt_inv;

        let mut sq = 0.0;
        for (obs, post) in latent.iter().zip(&posts) {
            let ett = &post.cov + &post.mean * post.mean.transpose();
            observed.iter_mut().for_each(|o| *o = false);
            for &(j, z) in obs {
                observed[j] = true;
                let wj = w_new.row(j).transpose();
                let r = z - wj.dot(&post.mean);
                sq += r * r + (wj.transpose() * &post.cov * &wj)[(0, 0)];
            }
            for j in (0..n_cases).filter(|&j| !observed[j]) {
                let delta = (w.row(j) - w_new.row(j)).transpose();
                sq += (delta.transpose() * &ett * &delta)[(0, 0)] + sigma2;
            }
        }
        let sigma2_new = (sq / total).max(MIN_NOISE);

        let w_change = (&w_new - &w).norm() / w.norm().max(1e-12);
        let s_change = (sigma2_new - sigma2).abs() / sigma2.max(1e-12);
        w = w_new;
        sigma2 = sigma2_new;
        if !(w.iter().all(|x| x.is_finite()) && sigma2.is_finite()) {
            return Err(Error::invalid("copula EM diverged"));
        }
        if w_change < cfg.tolerance && s_change < cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut item_factors = DMatrix::<f64>::zeros(n_items, d);
    for (i, obs) in latent.iter().enumerate() {
        let post = row_posterior(&w, sigma2, obs);
        item_factors.set_row(i, &post.mean.transpose());
    }
    if !converged {
        log::debug!("copula EM stopped after {iterations} iterations without converging");
    }

    Ok(CopulaModel {
        item_ids: m.item_ids().to_vec(),
        case_ids: m.case_ids().to_vec(),
        marginals,
        pooled_columns,
        item_factors,
        case_factors: w,
        noise_variance: sigma2,
        rank: d,
        converged,
        iterations,
    })
}

impl CopulaModel {
    /// Conditional latent means `E[z_ij | observed z_i]` for every entry.
    pub fn latent_mean(&self, m: &PerformanceMatrix) -> Result<DMatrix<f64>> {
        self.check_identity(m)?;
        let latent = latent_rows(m, &self.marginals);
        let mut out = DMatrix::<f64>::zeros(m.n_items(), m.n_cases());
        for (i, obs) in latent.iter().enumerate() {
            let post = row_posterior(&self.case_factors, self.noise_variance, obs);
            let zi = &self.case_factors * &post.mean;
            out.set_row(i, &zi.transpose());
        }
        Ok(out)
    }

    fn check_identity(&self, m: &PerformanceMatrix) -> Result<()> {
        if m.item_ids() != self.item_ids.as_slice() || m.case_ids() != self.case_ids.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "model fitted on {}×{} matrix with different ids than the {}×{} input",
                self.item_ids.len(),
                self.case_ids.len(),
                m.n_items(),
                m.n_cases()
            )));
        }
        Ok(())
    }
}

/// Fills every missing entry of `m` with `F_j^-1(Phi(z_hat_ij))`; observed
/// entries are copied unchanged.
pub fn impute(m: &PerformanceMatrix, model: &CopulaModel) -> Result<PerformanceMatrix> {
    let zhat = model.latent_mean(m)?;
    let n = std_normal();
    let mut out = m.clone();
    for i in 0..m.n_items() {
        for j in 0..m.n_cases() {
            if m.get(i, j).is_none() {
                let v = model.marginals[j].quantile(n.cdf(zhat[(i, j)]));
                out.set(i, j, Some(v.clamp(0.0, 1.0)));
            }
        }
    }
    Ok(out)
}
