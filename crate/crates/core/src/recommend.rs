//! Hybrid recommendation for a query case and the case-independent baselines
//! it is compared against.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ExperimentMap, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::eval::experiment_balanced_mean;
use crate::features::{nearest_neighbors, CaseFeatureTable, CaseFeatures, DistanceMetric, FeatureSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResult {
    pub query_case_id: String,
    pub neighbor_ids: Vec<String>,
    /// Score per item, in matrix item order.
    pub scores: Vec<(String, f64)>,
    /// All items by score descending, ties by item id.
    pub ranking: Vec<String>,
}

impl RecommendationResult {
    pub fn top(&self) -> &str {
        &self.ranking[0]
    }

    pub fn score_of(&self, item: &str) -> Option<f64> {
        self.scores.iter().find(|(i, _)| i == item).map(|(_, s)| *s)
    }
}

/// Item ids sorted by score descending, ties by id.
pub(crate) fn rank_by_score(scores: &[(String, f64)]) -> Vec<String> {
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| i.clone()).collect()
}

/// Averages, per item, the neighbours' observed entries in `history`, falling
/// back to `completed` where `history` is missing.
pub fn score_items(
    query_case_id: &str,
    neighbor_ids: &[String],
    history: &PerformanceMatrix,
    completed: &PerformanceMatrix,
) -> Result<RecommendationResult> {
    if neighbor_ids.is_empty() {
        return Err(Error::invalid("no neighbours to aggregate"));
    }
    if history.item_ids() != completed.item_ids() {
        return Err(Error::ShapeMismatch(
            "history and completed matrices list different items".into(),
        ));
    }
    // summation order is fixed by case id so the neighbour order cannot matter
    let mut sorted: Vec<&String> = neighbor_ids.iter().collect();
    sorted.sort();
    let mut cols = Vec::with_capacity(sorted.len());
    for id in sorted {
        let h = history.case_index(id);
        let c = completed.case_index(id);
        if h.is_none() && c.is_none() {
            return Err(Error::UnknownCase(id.clone()));
        }
        cols.push((id, h, c));
    }
    let n = cols.len() as f64;
    let mut scores = Vec::with_capacity(history.n_items());
    for (i, item) in history.item_ids().iter().enumerate() {
        let mut sum = 0.0;
        for (id, h, c) in &cols {
            let v = h
                .and_then(|j| history.get(i, j))
                .or_else(|| c.and_then(|j| completed.get(i, j)))
                .ok_or_else(|| {
                    Error::invalid(format!("no observed or imputed value for ({item}, {id})"))
                })?;
            sum += v;
        }
        scores.push((item.clone(), sum / n));
    }
    let ranking = rank_by_score(&scores);
    Ok(RecommendationResult {
        query_case_id: query_case_id.to_string(),
        neighbor_ids: neighbor_ids.to_vec(),
        scores,
        ranking,
    })
}

/// Ranks all items for `q` by averaging the (observed, else imputed)
/// performances of its `k` nearest historical cases in feature space.
pub fn hybrid_recommend(
    q: &CaseFeatures,
    history: &PerformanceMatrix,
    history_features: &CaseFeatureTable,
    completed: &PerformanceMatrix,
    k: usize,
    metric: DistanceMetric,
    schema: &FeatureSchema,
) -> Result<RecommendationResult> {
    if history.n_cases() == 0 {
        return Err(Error::invalid("empty history"));
    }
    let candidates =
        history_features.select(history.case_ids().iter().map(String::as_str))?;
    let neighbours = nearest_neighbors(q, &candidates, k, metric, schema)?;
    let ids: Vec<String> = neighbours.into_iter().map(|(id, _)| id).collect();
    score_items(&q.case_id, &ids, history, completed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityMode {
    /// Mean per experiment, then mean across experiments.
    #[default]
    ExperimentBalanced,
    /// Mean over all observed entries of the item.
    Flat,
}

/// Popularity score of every item with at least one observation, ranked.
pub fn popularity_ranking(
    observed: &PerformanceMatrix,
    em: &ExperimentMap,
    mode: PopularityMode,
) -> Result<Vec<(String, f64)>> {
    if observed.observed_count() == 0 {
        return Err(Error::invalid("no observations to rank popularity"));
    }
    let mut scores = Vec::with_capacity(observed.n_items());
    let mut unseen = Vec::new();
    for (i, item) in observed.item_ids().iter().enumerate() {
        let vals: Vec<(String, f64)> = observed
            .case_ids()
            .iter()
            .enumerate()
            .filter_map(|(j, c)| observed.get(i, j).map(|v| (c.clone(), v)))
            .collect();
        if vals.is_empty() {
            unseen.push(item.clone());
            continue;
        }
        let s = match mode {
            PopularityMode::ExperimentBalanced => experiment_balanced_mean(&vals, em)?,
            PopularityMode::Flat => vals.iter().map(|(_, v)| v).sum::<f64>() / vals.len() as f64,
        };
        scores.push((item.clone(), s));
    }
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    unseen.sort();
    scores.extend(unseen.into_iter().map(|i| (i, f64::NEG_INFINITY)));
    Ok(scores)
}

/// Item with the highest experiment-balanced mean observed performance.
pub fn popularity_item(observed: &PerformanceMatrix, em: &ExperimentMap) -> Result<String> {
    Ok(popularity_ranking(observed, em, PopularityMode::ExperimentBalanced)?.remove(0).0)
}

/// Popularity computed on a completed matrix.
pub fn mc_popularity_item(completed: &PerformanceMatrix, em: &ExperimentMap) -> Result<String> {
    if !completed.is_fully_observed() {
        return Err(Error::invalid("completed matrix still has missing entries"));
    }
    popularity_item(completed, em)
}

/// The configured reference item, checked against the matrix.
pub fn reference_item(configured: Option<&str>, m: &PerformanceMatrix) -> Result<String> {
    let id = configured.ok_or(Error::NoReference)?;
    if m.item_index(id).is_none() {
        return Err(Error::UnknownItem(id.to_string()));
    }
    Ok(id.to_string())
}

/// `list_length` distinct item indices in uniformly random order.
pub fn random_recommendation(n_items: usize, list_length: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if list_length == 0 || list_length > n_items {
        return Err(Error::invalid(format!(
            "list length {list_length} must lie in 1..={n_items}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut idx: Vec<usize> = (0..n_items).collect();
    let (head, _) = idx.partial_shuffle(&mut rng, list_length);
    Ok(head.to_vec())
}

/// Exact `E[RR@k]` for one case with `relevant` relevant items out of
/// `n_items` under a uniformly random ranking.
pub fn expected_random_rr_case(relevant: usize, n_items: usize, k: usize) -> Result<f64> {
    if relevant > n_items {
        return Err(Error::invalid("more relevant items than items"));
    }
    if relevant == 0 || k == 0 {
        return Ok(0.0);
    }
    let (n, r) = (n_items as f64, relevant as f64);
    let mut none_before = 1.0;
    let mut expected = 0.0;
    for pos in 1..=k.min(n_items - relevant + 1) {
        let t = (pos - 1) as f64;
        let first_here = none_before * r / (n - t);
        expected += first_here / pos as f64;
        none_before *= (n - r - t) / (n - t);
    }
    Ok(expected)
}

/// Experiment-balanced expectation of RR@k under random rankings, from the
/// number of relevant items of each case.
pub fn expected_random_rr(
    relevance_counts: &[(String, usize)],
    n_items: usize,
    k: usize,
    em: &ExperimentMap,
) -> Result<f64> {
    let per_case = relevance_counts
        .iter()
        .map(|(c, r)| Ok((c.clone(), expected_random_rr_case(*r, n_items, k)?)))
        .collect::<Result<Vec<_>>>()?;
    experiment_balanced_mean(&per_case, em)
}

/// Expected regret of picking one item uniformly at random, per case.
pub fn expected_random_regret(column: &[(String, f64)]) -> f64 {
    let best = column.iter().map(|(_, p)| *p).fold(f64::NEG_INFINITY, f64::max);
    column.iter().map(|(_, p)| best - p).sum::<f64>() / column.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{relevant_items, rr_at_k};
    use crate::testutil::ids;
    use proptest::prelude::*;
    use rand::Rng;

    fn one_feature_schema() -> FeatureSchema {
        FeatureSchema {
            categorical: vec![],
            continuous: vec![crate::features::ContinuousFeature {
                name: "x".into(),
                min: 0.0,
                max: 1.0,
            }],
        }
    }

    fn table(xs: &[(&str, f64)]) -> CaseFeatureTable {
        CaseFeatureTable::new(
            xs.iter()
                .map(|(id, x)| CaseFeatures::new(*id).with_continuous("x", *x))
                .collect(),
        )
    }

    #[test]
    fn single_neighbour_scores_are_its_column() {
        let hist = PerformanceMatrix::from_dense(
            ids("i", 3),
            vec!["a".into(), "b".into()],
            vec![vec![0.2, 0.9], vec![0.7, 0.1], vec![0.4, 0.5]],
        )
        .unwrap();
        let feats = table(&[("a", 0.1), ("b", 0.9)]);
        let q = CaseFeatures::new("q").with_continuous("x", 0.15);
        let r = hybrid_recommend(&q, &hist, &feats, &hist, 1, DistanceMetric::Euclidean, &one_feature_schema())
            .unwrap();
        assert_eq!(r.neighbor_ids, vec!["a".to_string()]);
        assert_eq!(r.scores[1], ("i01".to_string(), 0.7));
        assert_eq!(r.top(), "i01");
        assert_eq!(r.ranking.len(), 3);
    }

    #[test]
    fn two_neighbours_average() {
        let hist = PerformanceMatrix::new(
            ids("i", 1),
            vec!["a".into(), "b".into()],
            vec![vec![Some(0.4), None]],
        )
        .unwrap();
        let completed =
            PerformanceMatrix::from_dense(ids("i", 1), vec!["a".into(), "b".into()], vec![vec![0.1, 0.6]])
                .unwrap();
        let r = score_items("q", &["a".into(), "b".into()], &hist, &completed).unwrap();
        // observed 0.4 wins over imputed 0.1 for `a`
        assert!((r.scores[0].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hybrid_errors() {
        let hist = PerformanceMatrix::new(ids("i", 1), vec![], vec![vec![]]).unwrap();
        let q = CaseFeatures::new("q").with_continuous("x", 0.1);
        assert!(hybrid_recommend(&q, &hist, &table(&[]), &hist, 1, DistanceMetric::Gower, &one_feature_schema()).is_err());
        let hist = PerformanceMatrix::from_dense(ids("i", 1), vec!["a".into()], vec![vec![0.3]]).unwrap();
        assert!(hybrid_recommend(&q, &hist, &table(&[("a", 0.1)]), &hist, 0, DistanceMetric::Gower, &one_feature_schema()).is_err());
    }

    #[test]
    fn two_cluster_queries_get_their_cluster_best() {
        // cluster A near x=0.1 prefers item 0, cluster B near x=0.9 prefers item 2
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut feats = Vec::new();
        let mut cols = Vec::new();
        for c in 0..20 {
            let in_a = c % 2 == 0;
            let x = if in_a { 0.1 } else { 0.9 } + rng.random_range(-0.05..0.05);
            feats.push(CaseFeatures::new(format!("c{c:02}")).with_continuous("x", x));
            let best = if in_a { 0 } else { 2 };
            cols.push((0..4).map(|i| if i == best { 0.9 } else { rng.random_range(0.1..0.6) }).collect::<Vec<f64>>());
        }
        let rows: Vec<Vec<f64>> = (0..4).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let m = PerformanceMatrix::from_dense(ids("i", 4), feats.iter().map(|f| f.case_id.clone()).collect(), rows).unwrap();
        let table = CaseFeatureTable::new(feats.clone());
        for (c, f) in feats.iter().enumerate() {
            // leave the query out of the history
            let keep: Vec<usize> = (0..20).filter(|&j| j != c).collect();
            let hist = m.select_cases(&keep);
            let r = hybrid_recommend(f, &hist, &table, &hist, 3, DistanceMetric::Euclidean, &one_feature_schema()).unwrap();
            // brute-force oracle: the query's own ground-truth argmax
            let own = m.column(c);
            let argmax = (0..4).max_by(|&a, &b| own[a].unwrap().total_cmp(&own[b].unwrap())).unwrap();
            assert_eq!(r.top(), m.item_ids()[argmax]);
        }
    }

    #[test]
    fn popularity_prefers_dominant_item() {
        let m = PerformanceMatrix::from_dense(
            vec!["A".into(), "B".into()],
            ids("c", 3),
            vec![vec![0.9; 3], vec![0.5; 3]],
        )
        .unwrap();
        let em = ExperimentMap::from_pairs([("c00", "e1"), ("c01", "e1"), ("c02", "e2")]).unwrap();
        assert_eq!(popularity_item(&m, &em).unwrap(), "A");
    }

    #[test]
    fn popularity_single_experiment_item() {
        let m = PerformanceMatrix::new(
            vec!["A".into(), "B".into()],
            ids("c", 2),
            vec![vec![Some(0.6), None], vec![Some(0.2), Some(0.9)]],
        )
        .unwrap();
        let em = ExperimentMap::from_pairs([("c00", "e1"), ("c01", "e2")]).unwrap();
        let ranking = popularity_ranking(&m, &em, PopularityMode::ExperimentBalanced).unwrap();
        assert_eq!(ranking[0], ("A".to_string(), 0.6));
        assert!((ranking[1].1 - 0.55).abs() < 1e-15);
    }

    #[test]
    fn popularity_is_experiment_balanced() {
        // experiments of sizes 1, 1 and 10; X wins the two small ones,
        // Y wins every case of the large one
        let mut case_ids = vec!["s1".to_string(), "s2".to_string()];
        let mut pairs = vec![("s1".to_string(), "E1".to_string()), ("s2".to_string(), "E2".to_string())];
        for i in 0..10 {
            case_ids.push(format!("l{i}"));
            pairs.push((format!("l{i}"), "E3".to_string()));
        }
        let mut x = vec![0.9, 0.9];
        let mut y = vec![0.3, 0.3];
        x.extend([0.4; 10]);
        y.extend([0.7; 10]);
        let m = PerformanceMatrix::from_dense(vec!["X".into(), "Y".into()], case_ids, vec![x, y]).unwrap();
        let em = ExperimentMap::from_pairs(pairs).unwrap();
        // two-level: X = (0.9 + 0.9 + 0.4)/3 = 0.7333, Y = (0.3 + 0.3 + 0.7)/3 = 0.4333
        assert_eq!(popularity_item(&m, &em).unwrap(), "X");
        // flat: X = (1.8 + 4.0)/12 = 0.4833, Y = (0.6 + 7.0)/12 = 0.6333
        let flat = popularity_ranking(&m, &em, PopularityMode::Flat).unwrap();
        assert_eq!(flat[0].0, "Y");
    }

    #[test]
    fn popularity_needs_observations() {
        let m = PerformanceMatrix::new(ids("i", 1), ids("c", 1), vec![vec![None]]).unwrap();
        let em = ExperimentMap::from_pairs([("c00", "e")]).unwrap();
        assert!(popularity_item(&m, &em).is_err());
    }

    #[test]
    fn mc_popularity_cases() {
        let full = PerformanceMatrix::from_dense(
            vec!["A".into(), "B".into()],
            ids("c", 2),
            vec![vec![0.6, 0.4], vec![0.5, 0.7]],
        )
        .unwrap();
        let em = ExperimentMap::from_pairs([("c00", "e1"), ("c01", "e2")]).unwrap();
        assert_eq!(mc_popularity_item(&full, &em).unwrap(), popularity_item(&full, &em).unwrap());

        // B observed only where it is weak; imputation lifts it above A
        let sparse = PerformanceMatrix::new(
            vec!["A".into(), "B".into()],
            ids("c", 2),
            vec![vec![Some(0.6), Some(0.6)], vec![Some(0.5), None]],
        )
        .unwrap();
        let completed = PerformanceMatrix::from_dense(
            vec!["A".into(), "B".into()],
            ids("c", 2),
            vec![vec![0.6, 0.6], vec![0.5, 0.9]],
        )
        .unwrap();
        assert_eq!(popularity_item(&sparse, &em).unwrap(), "A");
        assert_eq!(mc_popularity_item(&completed, &em).unwrap(), "B");
        assert!(mc_popularity_item(&sparse, &em).is_err());

        let uniform = PerformanceMatrix::from_dense(
            vec!["Z".into(), "M".into(), "B".into()],
            ids("c", 2),
            vec![vec![0.5; 2]; 3],
        )
        .unwrap();
        assert_eq!(mc_popularity_item(&uniform, &em).unwrap(), "B");
    }

    #[test]
    fn reference_item_lookup() {
        let m = PerformanceMatrix::from_dense(
            vec!["ITEM_042".into(), "ITEM_007".into()],
            ids("c", 1),
            vec![vec![0.1], vec![0.2]],
        )
        .unwrap();
        assert_eq!(reference_item(Some("ITEM_042"), &m).unwrap(), "ITEM_042");
        assert!(matches!(reference_item(Some("ITEM_999"), &m), Err(Error::UnknownItem(_))));
        let err = reference_item(None, &m).unwrap_err();
        assert_eq!(err.to_string(), "no reference item configured");
    }

    #[test]
    fn random_lists() {
        let mut p = random_recommendation(7, 7, 3).unwrap();
        assert_eq!(p, random_recommendation(7, 7, 3).unwrap());
        p.sort();
        assert_eq!(p, (0..7).collect::<Vec<_>>());
        assert!(random_recommendation(3, 4, 0).is_err());
        assert!(random_recommendation(3, 0, 0).is_err());
    }

    #[test]
    fn random_rr_monte_carlo() {
        // one relevant item out of 100
        let items = ids("i", 100);
        let col: Vec<(String, f64)> = items
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), if i == 17 { 0.9 } else { 0.1 }))
            .collect();
        let rel = relevant_items("c", &col, 0.05).unwrap();
        let draws = 100_000;
        let mut total = 0.0;
        for seed in 0..draws {
            let pick = random_recommendation(100, 1, seed).unwrap();
            total += rr_at_k(&[items[pick[0]].clone()], &rel, 1).unwrap();
        }
        let mean = total / draws as f64;
        assert!((mean - 0.01).abs() < 0.002, "mean {mean}");
        assert!((expected_random_rr_case(1, 100, 1).unwrap() - 0.01).abs() < 1e-15);
    }

    fn enumerate_rr(relevant: usize, n: usize, k: usize) -> f64 {
        // every permutation of n items; items 0..relevant are relevant
        fn perms(v: &mut Vec<usize>, l: usize, out: &mut Vec<Vec<usize>>) {
            if l == v.len() {
                out.push(v.clone());
                return;
            }
            for i in l..v.len() {
                v.swap(l, i);
                perms(v, l + 1, out);
                v.swap(l, i);
            }
        }
        let mut all = Vec::new();
        perms(&mut (0..n).collect(), 0, &mut all);
        let total: f64 = all
            .iter()
            .map(|p| {
                p.iter()
                    .take(k)
                    .position(|&x| x < relevant)
                    .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
            })
            .sum();
        total / all.len() as f64
    }

    #[test]
    fn expected_random_rr_matches_enumeration() {
        assert_eq!(expected_random_rr_case(1, 1, 1).unwrap(), 1.0);
        for n in [3, 5] {
            assert!((expected_random_rr_case(n, n, 2).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!((expected_random_rr_case(2, 4, 2).unwrap() - enumerate_rr(2, 4, 2)).abs() < 1e-12);
        let em = ExperimentMap::from_pairs([("a", "E"), ("b", "E"), ("c", "F")]).unwrap();
        let counts = vec![("a".to_string(), 1), ("b".to_string(), 2), ("c".to_string(), 4)];
        let got = expected_random_rr(&counts, 4, 3, &em).unwrap();
        let want = ((enumerate_rr(1, 4, 3) + enumerate_rr(2, 4, 3)) / 2.0 + 1.0) / 2.0;
        assert!((got - want).abs() < 1e-12);
        assert!(expected_random_rr_case(5, 4, 1).is_err());
    }

    proptest! {
        #[test]
        fn neighbour_order_and_monotonicity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cases = ids("c", 5);
            let rows: Vec<Vec<Option<f64>>> = (0..4)
                .map(|_| (0..5).map(|_| if rng.random_bool(0.5) { Some(rng.random_range(0.0..0.9)) } else { None }).collect())
                .collect();
            let hist = PerformanceMatrix::new(ids("i", 4), cases.clone(), rows).unwrap();
            let completed = PerformanceMatrix::from_dense(
                ids("i", 4), cases.clone(),
                (0..4).map(|_| (0..5).map(|_| rng.random_range(0.0..0.9)).collect()).collect(),
            ).unwrap();
            let mut nb = vec![cases[0].clone(), cases[3].clone(), cases[4].clone()];
            let base = score_items("q", &nb, &hist, &completed).unwrap();
            nb.reverse();
            let rev = score_items("q", &nb, &hist, &completed).unwrap();
            prop_assert_eq!(&base.scores, &rev.scores);
            prop_assert_eq!(&base.ranking, &rev.ranking);

            // raising one neighbour entry raises only that item's score
            let mut bumped = completed.clone();
            let mut hist2 = hist.clone();
            let v = hist.get(2, 3).or(completed.get(2, 3)).unwrap();
            hist2.set(2, 3, Some(v + 0.05));
            bumped.set(2, 3, Some(v + 0.05));
            let up = score_items("q", &nb, &hist2, &bumped).unwrap();
            for i in 0..4 {
                if i == 2 {
                    prop_assert!(up.scores[i].1 > base.scores[i].1);
                } else {
                    prop_assert_eq!(up.scores[i].1, base.scores[i].1);
                }
            }
        }

        #[test]
        fn constant_shift_keeps_argmax(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(0.0..0.5)).collect()).collect();
            let shifted: Vec<Vec<f64>> = vals.iter().map(|r| r.iter().map(|v| v + 0.5).collect()).collect();
            let m = PerformanceMatrix::from_dense(ids("i", 5), ids("c", 4), vals).unwrap();
            let s = PerformanceMatrix::from_dense(ids("i", 5), ids("c", 4), shifted).unwrap();
            let em = ExperimentMap::from_pairs([("c00", "a"), ("c01", "a"), ("c02", "b"), ("c03", "c")]).unwrap();
            prop_assert_eq!(popularity_item(&m, &em).unwrap(), popularity_item(&s, &em).unwrap());
            prop_assert_eq!(mc_popularity_item(&m, &em).unwrap(), mc_popularity_item(&s, &em).unwrap());
            let nb = vec!["c01".to_string(), "c02".to_string()];
            prop_assert_eq!(score_items("q", &nb, &m, &m).unwrap().ranking, score_items("q", &nb, &s, &s).unwrap().ranking);
        }
    }
}
