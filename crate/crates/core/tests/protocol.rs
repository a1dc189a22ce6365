use std::collections::BTreeMap;

use coldrec::completion::CompletionConfig;
use coldrec::io::DatasetBundle;
use coldrec::protocol::{run_nested_cv, CVConfig, CVReport, HyperGrid, Method};
use coldrec::synth::{generate_synthetic, SynthConfig};
use coldrec::{DistanceMetric, ExperimentMap, PerformanceMatrix};

fn bundle(noise_sd: f64) -> DatasetBundle {
    generate_synthetic(&SynthConfig {
        n_items: 8,
        n_cases: 16,
        n_experiments: 4,
        noise_sd,
        rng_seed: 12,
        ..SynthConfig::default()
    })
    .unwrap()
    .bundle
}

fn cfg(sparsity: f64) -> CVConfig {
    CVConfig {
        sparsity_levels: vec![sparsity],
        n_realisations: 2,
        rng_seed: 21,
        completion: CompletionConfig {
            rank: 2,
            ..CompletionConfig::default()
        },
        grid: HyperGrid {
            metrics: DistanceMetric::ALL.to_vec(),
            k_values: vec![1, 2, 3, 5, 10],
        },
        ..CVConfig::default()
    }
}

fn run(b: &DatasetBundle, m: &PerformanceMatrix, em: &ExperimentMap, c: &CVConfig) -> CVReport {
    run_nested_cv(m, &b.features, &b.schema, em, b.reference_item.as_deref(), c).unwrap()
}

#[test]
fn selection_ignores_test_column_values() {
    let b = bundle(0.05);
    let test = "exp_02";
    let scrambled_cases: Vec<usize> = b
        .experiments
        .cases_of(test)
        .iter()
        .map(|c| b.matrix.case_index(c).unwrap())
        .collect();
    let rows = b
        .matrix
        .rows()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, v)| {
                    if scrambled_cases.contains(&j) {
                        Some(((i * 7 + j * 3) % 11) as f64 / 10.0)
                    } else {
                        *v
                    }
                })
                .collect()
        })
        .collect();
    let scrambled = PerformanceMatrix::new(b.matrix.item_ids().to_vec(), b.matrix.case_ids().to_vec(), rows).unwrap();
    let c = cfg(0.5);
    let a = run(&b, &b.matrix, &b.experiments, &c);
    let s = run(&b, &scrambled, &b.experiments, &c);
    let pick = |r: &CVReport| -> Vec<_> {
        r.cells
            .iter()
            .filter(|x| x.test_experiment == test)
            .map(|x| (x.chosen_metric, x.chosen_k, x.val_mrr3))
            .collect()
    };
    assert_eq!(pick(&a), pick(&s));
}

#[test]
fn aggregates_do_not_depend_on_experiment_order() {
    let b = bundle(0.05);
    let mut order = b.experiments.experiment_ids().to_vec();
    order.reverse();
    let reversed = ExperimentMap::new(b.experiments.assignments().clone(), Some(order)).unwrap();
    let c = cfg(0.25);
    let a = run(&b, &b.matrix, &b.experiments, &c);
    let r = run(&b, &b.matrix, &reversed, &c);
    assert_eq!(a.aggregates, r.aggregates);
    let by_exp = |rep: &CVReport| -> BTreeMap<String, _> {
        rep.experiments.iter().map(|e| (e.test_experiment.clone(), e.clone())).collect()
    };
    assert_eq!(by_exp(&a), by_exp(&r));
}

#[test]
fn noiseless_clusters_are_learnable_at_zero_sparsity() {
    let b = bundle(0.0);
    let rep = run(&b, &b.matrix, &b.experiments, &cfg(0.0));
    let rs = rep
        .aggregates
        .iter()
        .find(|a| a.method == Method::Rs)
        .unwrap();
    assert_eq!(rs.mrr1.unwrap().mean, 1.0);
    for c in &rep.cells {
        assert_eq!(c.score(Method::Oracle).unwrap().regret, 0.0);
    }
}
