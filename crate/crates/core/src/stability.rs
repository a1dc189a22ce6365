//! Detection of zigzag ("staggering") solution profiles and zeroing of the
//! performance of unstable case–item pairs.

use serde::{Deserialize, Serialize};

use crate::domain::PerformanceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaggerConfig {
    pub min_changes: usize,
    /// Minimum swing as a fraction of the profile's range.
    pub amplitude_fraction: f64,
}

impl Default for StaggerConfig {
    fn default() -> Self {
        Self {
            min_changes: 5,
            amplitude_fraction: 0.01,
        }
    }
}

/// A spatial solution profile, e.g. cell-centre values along a line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub values: Vec<f64>,
}

impl Profile {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// A directional change at `t` needs successive differences `t` and `t+1`
/// of strictly opposite sign, both larger in magnitude than
/// `amplitude_fraction × range`. The profile is flagged when at least
/// `min_changes` such changes occur back to back.
pub fn detect_staggering(p: &Profile, cfg: &StaggerConfig) -> Result<bool> {
    let v = &p.values;
    if v.len() < 2 {
        return Err(Error::invalid("profile needs at least 2 values"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("profile contains non-finite values"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range == 0.0 {
        return Ok(false);
    }
    let floor = cfg.amplitude_fraction * range;
    let diffs: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    let mut run = 0usize;
    for w in diffs.windows(2) {
        let (a, b) = (w[0], w[1]);
        let opposite = (a > 0.0 && b < 0.0) || (a < 0.0 && b > 0.0);
        if opposite && a.abs() > floor && b.abs() > floor {
            run += 1;
            if run >= cfg.min_changes {
                return Ok(true);
            }
        } else {
            run = 0;
        }
    }
    Ok(false)
}

/// Sets every flagged observed entry to 0. `flags` lists (item, case) ids.
pub fn apply_stability_zeroing(
    m: &PerformanceMatrix,
    flags: &[(String, String)],
) -> Result<PerformanceMatrix> {
    let mut out = m.clone();
    for (item, case) in flags {
        let i = m
            .item_index(item)
            .ok_or_else(|| Error::UnknownItem(item.clone()))?;
        let j = m
            .case_index(case)
            .ok_or_else(|| Error::UnknownCase(case.clone()))?;
        if m.get(i, j).is_none() {
            return Err(Error::invalid(format!(
                "stability flag on missing entry ({item}, {case})"
            )));
        }
        out.set(i, j, Some(0.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::ids;
    use proptest::prelude::*;

    fn flag(v: &[f64]) -> bool {
        detect_staggering(&Profile::new(v.to_vec()), &StaggerConfig::default()).unwrap()
    }

    #[test]
    fn monotone_profile_is_stable() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64).sqrt()).collect();
        assert!(!flag(&v));
    }

    #[test]
    fn full_range_alternation_is_flagged() {
        // 7 differences, 6 consecutive changes
        assert!(flag(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn four_changes_are_not_enough() {
        // 0,1,0,1,0,1 has 5 diffs and 4 changes, then a flat tail
        assert!(!flag(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]));
        // exactly 5 changes is enough
        assert!(flag(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn small_swings_and_flat_steps_break_runs() {
        // swings of 0.5% of the range never count
        let mut v = vec![0.0, 1.0];
        for i in 0..20 {
            v.push(if i % 2 == 0 { 0.995 } else { 1.0 });
        }
        assert!(!flag(&v));
        // zero difference in the middle splits 3 + 3
        assert!(!flag(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn constant_and_short_profiles() {
        assert!(!flag(&[0.4; 10]));
        assert!(detect_staggering(&Profile::new(vec![1.0]), &StaggerConfig::default()).is_err());
    }

    #[test]
    fn zeroing_rules() {
        let m = PerformanceMatrix::new(
            ids("i", 2),
            ids("c", 2),
            vec![vec![Some(0.73), None], vec![Some(0.0), Some(0.4)]],
        )
        .unwrap();
        assert_eq!(apply_stability_zeroing(&m, &[]).unwrap(), m);
        let f = vec![("i00".to_string(), "c00".to_string()), ("i01".to_string(), "c00".to_string())];
        let z = apply_stability_zeroing(&m, &f).unwrap();
        assert_eq!(z.get(0, 0), Some(0.0));
        assert_eq!(z.get(1, 0), Some(0.0));
        assert_eq!(z.get(1, 1), Some(0.4));
        assert_eq!(apply_stability_zeroing(&z, &f).unwrap(), z);
        let bad = vec![("i00".to_string(), "c01".to_string())];
        assert!(apply_stability_zeroing(&m, &bad).is_err());
    }

    proptest! {
        #[test]
        fn zeroing_only_decreases(vals in prop::collection::vec(0.0f64..=1.0, 6), mask in prop::collection::vec(any::<bool>(), 6)) {
            let rows = vec![vals[..3].iter().map(|v| Some(*v)).collect(), vals[3..].iter().map(|v| Some(*v)).collect()];
            let m = PerformanceMatrix::new(ids("i", 2), ids("c", 3), rows).unwrap();
            let flags: Vec<(String, String)> = (0..6).filter(|k| mask[*k]).map(|k| (format!("i{:02}", k / 3), format!("c{:02}", k % 3))).collect();
            let z = apply_stability_zeroing(&m, &flags).unwrap();
            for i in 0..2 { for j in 0..3 {
                prop_assert!(z.get(i, j).unwrap() <= m.get(i, j).unwrap());
            }}
            prop_assert_eq!(apply_stability_zeroing(&z, &flags).unwrap(), z);
        }
    }
}
