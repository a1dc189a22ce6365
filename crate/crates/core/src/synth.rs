//! Synthetic bundles with known structure.
//!
//! Experiments are grouped into clusters. Case features separate the
//! clusters, and each cluster has a designated best item. The ground truth is
//! a per-column logistic squash of a rank-`latent_rank` factor model plus
//! Gaussian noise, so marginals are bounded and non-Gaussian.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ExperimentMap, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::features::{
    CaseFeatureTable, CaseFeatures, CategoricalFeature, ContinuousFeature, FeatureSchema,
};
use crate::io::DatasetBundle;
use crate::protocol::sparsify;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_cases: usize,
    pub n_experiments: usize,
    pub n_clusters: usize,
    pub latent_rank: usize,
    pub noise_sd: f64,
    /// Spread of cluster centres along each continuous feature, in (0, 1].
    pub cluster_separation: f64,
    pub n_categorical: usize,
    pub n_continuous: usize,
    /// When set, a sparsified copy of the ground truth at this level is also produced.
    pub sparsity_preview: Option<f64>,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 12,
            n_cases: 24,
            n_experiments: 6,
            n_clusters: 2,
            latent_rank: 2,
            noise_sd: 0.05,
            cluster_separation: 0.8,
            n_categorical: 3,
            n_continuous: 2,
            sparsity_preview: None,
            rng_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_items", self.n_items),
            ("n_cases", self.n_cases),
            ("n_experiments", self.n_experiments),
            ("n_clusters", self.n_clusters),
            ("latent_rank", self.latent_rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.n_categorical + self.n_continuous == 0 {
            return Err(Error::invalid("need at least one case feature"));
        }
        if self.n_experiments > self.n_cases {
            return Err(Error::invalid("more experiments than cases"));
        }
        if self.n_clusters > self.n_experiments {
            return Err(Error::invalid("more clusters than experiments"));
        }
        if self.n_clusters > 2 * self.latent_rank {
            return Err(Error::invalid(
                "at most 2 × latent_rank clusters can have distinct best items",
            ));
        }
        if self.n_items < self.n_clusters + 1 {
            return Err(Error::invalid(
                "need one item per cluster plus a reference item",
            ));
        }
        if self.noise_sd.is_nan() || self.noise_sd < 0.0 {
            return Err(Error::invalid("noise_sd must be non-negative"));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation <= 1.0) {
            return Err(Error::invalid("cluster_separation must lie in (0, 1]"));
        }
        if let Some(s) = self.sparsity_preview {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::invalid("sparsity_preview must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Generator output: the bundle plus the structure it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Case id → cluster index.
    pub case_cluster: BTreeMap<String, usize>,
    /// Designated best item of each cluster.
    pub cluster_best_items: Vec<String>,
    /// Per-column logistic slopes.
    pub column_slopes: Vec<f64>,
    /// Latent matrix before the squash, items × cases.
    pub latent: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub bundle: DatasetBundle,
    pub truth: SyntheticTruth,
    pub preview: Option<PerformanceMatrix>,
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(2)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let r = cfg.latent_rank;
    let c_n = cfg.n_clusters;

    let item_ids: Vec<String> = (0..cfg.n_items)
        .map(|i| format!("item_{i:0w$}", w = width(cfg.n_items)))
        .collect();
    let case_ids: Vec<String> = (0..cfg.n_cases)
        .map(|c| format!("case_{c:0w$}", w = width(cfg.n_cases)))
        .collect();
    let exp_ids: Vec<String> = (0..cfg.n_experiments)
        .map(|e| format!("exp_{e:0w$}", w = width(cfg.n_experiments)))
        .collect();

    let case_exp: Vec<usize> = (0..cfg.n_cases)
        .map(|c| c * cfg.n_experiments / cfg.n_cases)
        .collect();
    let exp_cluster = |e: usize| e % c_n;
    let case_cluster: Vec<usize> = case_exp.iter().map(|&e| exp_cluster(e)).collect();

    // cluster prototypes: +e_a, -e_a, +e_b, ...
    let prototypes: Vec<Vec<f64>> = (0..c_n)
        .map(|k| {
            let mut p = vec![0.0; r];
            p[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
            p
        })
        .collect();

    let exp_jitter = Normal::new(0.0, 0.05).expect("valid sd");
    let case_jitter = Normal::new(0.0, 0.02).expect("valid sd");
    let exp_offsets: Vec<Vec<f64>> = (0..cfg.n_experiments)
        .map(|_| (0..r).map(|_| f64::clamp(exp_jitter.sample(&mut rng), -0.1, 0.1)).collect())
        .collect();
    let case_factors: Vec<Vec<f64>> = (0..cfg.n_cases)
        .map(|c| {
            (0..r)
                .map(|a| {
                    prototypes[case_cluster[c]][a]
                        + exp_offsets[case_exp[c]][a]
                        + f64::clamp(case_jitter.sample(&mut rng), -0.05, 0.05)
                })
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    order.shuffle(&mut rng);
    let best_items: Vec<usize> = order[..c_n].to_vec();
    let reference = order[c_n];

    let item_dist = Normal::new(0.0, 0.5 / (r as f64).sqrt()).expect("valid sd");
    let mut item_factors: Vec<Vec<f64>> = (0..cfg.n_items)
        .map(|_| (0..r).map(|_| item_dist.sample(&mut rng)).collect())
        .collect();
    let max_norm = item_factors
        .iter()
        .map(|u| u.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let case_norm_bound = 1.0 + 0.15 * (r as f64).sqrt();
    let boost = 2.0 * max_norm * case_norm_bound + 1.0;
    for (k, &b) in best_items.iter().enumerate() {
        item_factors[b] = prototypes[k].iter().map(|x| x * boost).collect();
    }
    item_factors[reference] = vec![0.0; r];

    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let slopes: Vec<f64> = (0..cfg.n_cases).map(|_| rng.random_range(0.6..1.4)).collect();
    let mut latent = vec![vec![0.0; cfg.n_cases]; cfg.n_items];
    let mut rows = vec![vec![0.0; cfg.n_cases]; cfg.n_items];
    for i in 0..cfg.n_items {
        for c in 0..cfg.n_cases {
            let mut z: f64 = item_factors[i]
                .iter()
                .zip(&case_factors[c])
                .map(|(a, b)| a * b)
                .sum();
            if cfg.noise_sd > 0.0 {
                z += noise.sample(&mut rng);
            }
            latent[i][c] = z;
            rows[i][c] = logistic(slopes[c] * z);
        }
    }
    let matrix = PerformanceMatrix::from_dense(item_ids.clone(), case_ids.clone(), rows)?;

    // features
    let n_opts = c_n.max(2);
    let informative = cfg.n_categorical - cfg.n_categorical / 3;
    let categorical: Vec<CategoricalFeature> = (0..cfg.n_categorical)
        .map(|f| CategoricalFeature {
            name: format!("cat_{f}"),
            options: (0..n_opts).map(|o| format!("opt{o}")).collect(),
        })
        .collect();
    let continuous: Vec<ContinuousFeature> = (0..cfg.n_continuous)
        .map(|f| ContinuousFeature {
            name: format!("cont_{f}"),
            min: 0.0,
            max: 10.0 * (f + 1) as f64,
        })
        .collect();
    let schema = FeatureSchema {
        categorical,
        continuous,
    };
    let exp_noise_options: Vec<Vec<usize>> = (0..cfg.n_experiments)
        .map(|_| (0..cfg.n_categorical).map(|_| rng.random_range(0..n_opts)).collect())
        .collect();
    let cluster_rank: Vec<Vec<usize>> = (0..cfg.n_continuous)
        .map(|_| {
            let mut p: Vec<usize> = (0..c_n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let exp_shift: Vec<Vec<f64>> = (0..cfg.n_experiments)
        .map(|_| (0..cfg.n_continuous).map(|_| rng.random_range(-0.05..0.05)).collect())
        .collect();
    let mut cases = Vec::with_capacity(cfg.n_cases);
    for c in 0..cfg.n_cases {
        let (e, k) = (case_exp[c], case_cluster[c]);
        let mut f = CaseFeatures::new(case_ids[c].clone());
        for (fi, cat) in schema.categorical.iter().enumerate() {
            let o = if fi < informative {
                (k + fi) % n_opts
            } else {
                exp_noise_options[e][fi]
            };
            f = f.with_categorical(&cat.name, &cat.options[o]);
        }
        for (fi, cont) in schema.continuous.iter().enumerate() {
            let centre = if c_n > 1 {
                0.5 + cfg.cluster_separation * (cluster_rank[fi][k] as f64 / (c_n - 1) as f64 - 0.5)
            } else {
                0.5
            };
            let unit = (centre + exp_shift[e][fi] + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
            f = f.with_continuous(&cont.name, cont.min + unit * (cont.max - cont.min));
        }
        cases.push(f);
    }

    let experiments = ExperimentMap::new(
        case_ids
            .iter()
            .zip(&case_exp)
            .map(|(c, &e)| (c.clone(), exp_ids[e].clone()))
            .collect(),
        Some(exp_ids.clone()),
    )?;

    let preview = match cfg.sparsity_preview {
        Some(s) => Some(sparsify(&matrix, s, cfg.rng_seed ^ 0x5eed)?),
        None => None,
    };

    let bundle = DatasetBundle::new(
        matrix,
        CaseFeatureTable::new(cases),
        schema,
        experiments,
        Some(item_ids[reference].clone()),
    )?;
    Ok(SyntheticBundle {
        bundle,
        truth: SyntheticTruth {
            case_cluster: case_ids.iter().cloned().zip(case_cluster).collect(),
            cluster_best_items: best_items.iter().map(|&b| item_ids[b].clone()).collect(),
            column_slopes: slopes,
            latent,
        },
        preview,
    })
}
