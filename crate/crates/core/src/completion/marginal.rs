use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical marginal of one column.
///
/// `cdf` uses average ranks for ties and divides by `n + 1`, so images stay
/// inside the open interval `(0, 1)`. `quantile` interpolates linearly
/// between the distinct observed values placed at their CDF images and
/// clamps to the observed range outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    sorted: Vec<f64>,
    /// Distinct observed values with their CDF images, both ascending.
    knots: Vec<(f64, f64)>,
}

impl Marginal {
    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    pub fn cdf(&self, v: f64) -> f64 {
        let below = self.sorted.partition_point(|x| *x < v);
        let upto = self.sorted.partition_point(|x| *x <= v);
        let ties = upto - below;
        // average rank of the tie block; half a rank past `below` for unseen values
        let rank = below as f64 + (ties as f64 + 1.0) / 2.0;
        rank / (self.sorted.len() as f64 + 1.0)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if u.is_nan() {
            return self.sorted[self.sorted.len() / 2];
        }
        if u <= first.1 {
            return first.0;
        }
        if u >= last.1 {
            return last.0;
        }
        let hi = self.knots.partition_point(|k| k.1 < u);
        let (v0, u0) = self.knots[hi - 1];
        let (v1, u1) = self.knots[hi];
        if u1 == u0 {
            return v1;
        }
        v0 + (v1 - v0) * (u - u0) / (u1 - u0)
    }

    fn from_sorted(sorted: Vec<f64>) -> Self {
        let mut m = Self {
            sorted,
            knots: Vec::new(),
        };
        let mut knots: Vec<(f64, f64)> = Vec::new();
        for &v in &m.sorted {
            if knots.last().is_none_or(|k| k.0 != v) {
                knots.push((v, 0.0));
            }
        }
        for k in knots.iter_mut() {
            k.1 = m.cdf(k.0);
        }
        m.knots = knots;
        m
    }
}

/// Fits the empirical marginal of a column's observed values.
pub fn fit_marginal(column: &[f64]) -> Result<Marginal> {
    if column.len() < 2 {
        return Err(Error::UnderObserved(column.len()));
    }
    if column.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in column"));
    }
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Marginal::from_sorted(sorted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cdf_uses_scaled_rank() {
        let m = fit_marginal(&[0.2, 0.4, 0.6, 0.8]).unwrap();
        assert!((m.cdf(0.4) - 0.4).abs() < 1e-15);
        assert!((m.cdf(0.8) - 0.8).abs() < 1e-15);
        assert!(m.cdf(-1.0) > 0.0);
        assert!(m.cdf(5.0) < 1.0);
    }

    #[test]
    fn ties_share_one_image() {
        let m = fit_marginal(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(m.cdf(0.5), 0.5);
        let z = fit_marginal(&[0.0, 0.0, 0.3, 0.9]).unwrap();
        // zeros hold ranks 1 and 2, average 1.5
        assert!((z.cdf(0.0) - 1.5 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn quantile_round_trips_observed_values() {
        let vals = [0.11, 0.93, 0.4, 0.57, 0.02];
        let m = fit_marginal(&vals).unwrap();
        for v in vals {
            assert_eq!(m.quantile(m.cdf(v)), v);
        }
        assert_eq!(m.quantile(0.0), 0.02);
        assert_eq!(m.quantile(1.0), 0.93);
    }

    #[test]
    fn point_mass_quantile_is_constant() {
        let m = fit_marginal(&[0.7, 0.7]).unwrap();
        for u in [0.01, 0.3, 0.5, 0.9] {
            assert_eq!(m.quantile(u), 0.7);
        }
    }

    #[test]
    fn under_observed_column_is_flagged() {
        assert!(matches!(fit_marginal(&[0.3]), Err(Error::UnderObserved(1))));
        assert!(matches!(fit_marginal(&[]), Err(Error::UnderObserved(0))));
    }

    proptest! {
        #[test]
        fn cdf_monotone_and_interior(vals in prop::collection::vec(0.0f64..1.0, 2..30), a in -0.5f64..1.5, b in -0.5f64..1.5) {
            let m = fit_marginal(&vals).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(m.cdf(lo) <= m.cdf(hi));
            prop_assert!(m.cdf(lo) > 0.0 && m.cdf(hi) < 1.0);
            prop_assert!(m.quantile(m.cdf(lo).min(0.5)) <= m.quantile(m.cdf(hi).max(0.5)));
        }
    }
}
