// Oracles shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cohortfl::cohort::{self, SiteDataset};
use cohortfl::evaluation::{summarize, ConfusionMatrix};
use cohortfl::federation::{self, FederationConfig, TrainSettings, Weighting};
use cohortfl::nn::{self, Activation, AdamConfig, Matrix, ModelSpec, ParameterVector, ShapeIndex, TensorShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest relative error between the analytic gradient and central
/// differences over `models` random small networks.
pub fn gradient_max_rel_error(models: usize, seed: u64) -> f64 {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for m in 0..models {
        let depth = rng.random_range(0..=2);
        let spec = ModelSpec {
            input_dim: rng.random_range(1..=5),
            hidden_dims: (0..depth).map(|_| rng.random_range(1..=6)).collect(),
            num_classes: rng.random_range(2..=4),
            activation: if m % 2 == 0 { Activation::Tanh } else { Activation::Relu },
        };
        let mut params = nn::init_model(&spec, rng.random()).unwrap();
        // biases start at zero; move them so ReLU units are not all on a kink
        for v in params.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let rows = rng.random_range(1..=6);
        let data: Vec<f64> = (0..rows * spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Matrix::from_vec(rows, spec.input_dim, data).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..spec.num_classes)).collect();

        let grad = nn::backward(&params, &spec, &x, &labels).unwrap();
        let loss_at = |p: &ParameterVector| {
            let logits = nn::forward(p, &spec, &x).unwrap();
            nn::cross_entropy(&logits, &labels).unwrap().0
        };
        for j in 0..params.len() {
            let mut plus = params.clone();
            plus.values_mut()[j] += h;
            let mut minus = params.clone();
            minus.values_mut()[j] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = grad.values[j];
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    worst
}

fn flat(values: Vec<f64>) -> ParameterVector {
    let shape = ShapeIndex {
        tensors: vec![TensorShape {
            name: "w".into(),
            offset: 0,
            rows: values.len(),
            cols: 1,
        }],
    };
    ParameterVector::new(values, shape).unwrap()
}

/// Worst deviation of `aggregate_weighted` from a per-coordinate
/// brute-force average, and whether every output coordinate stayed
/// inside the range of its inputs.
pub fn aggregation_oracle(cases: usize, seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut convex = true;
    for _ in 0..cases {
        let k = rng.random_range(1..=6);
        let len = rng.random_range(1..=40);
        let models: Vec<ParameterVector> =
            (0..k).map(|_| flat((0..len).map(|_| rng.random_range(-5.0..5.0)).collect())).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..100.0)).collect();
        let pairs: Vec<(&ParameterVector, f64)> = models.iter().zip(&weights).map(|(m, &w)| (m, w)).collect();
        let got = federation::aggregate_weighted(&pairs).unwrap();

        let total: f64 = weights.iter().sum();
        for j in 0..len {
            let mut expected = 0.0;
            for (m, w) in models.iter().zip(&weights) {
                expected += w * m.values()[j];
            }
            expected /= total;
            worst = worst.max((got.values()[j] - expected).abs());
            let lo = models.iter().map(|m| m.values()[j]).fold(f64::INFINITY, f64::min);
            let hi = models.iter().map(|m| m.values()[j]).fold(f64::NEG_INFINITY, f64::max);
            convex &= got.values()[j] >= lo && got.values()[j] <= hi;
        }
        // identical models are a fixed point
        let same: Vec<(&ParameterVector, f64)> = weights.iter().map(|&w| (&models[0], w)).collect();
        convex &= federation::aggregate_weighted(&same).unwrap() == models[0];
    }
    (worst, convex)
}

/// One round of one-epoch FedAvg with every site active against a
/// one-epoch siloed run, on a single site of the default cohort.
pub fn degenerate_federation_matches_siloed(seed: u64) -> bool {
    let sites = cohort::generate_cohort(&cohort::PaperAnalog::default().build(seed)).unwrap();
    let site: Vec<SiteDataset> = sites.into_iter().filter(|s| s.site_id == "site05").collect();
    let spec = ModelSpec::default();
    let adam = AdamConfig::default();
    let config = FederationConfig {
        rounds: 1,
        local_epochs: 1,
        client_fraction: 1.0,
        batch_size: 32,
        seed,
        weighting: Weighting::ByTrainSize,
        adam,
    };
    let fed = federation::run_fedavg(&config, &site, &spec).unwrap();
    let settings = TrainSettings {
        epochs: 1,
        batch_size: 32,
        adam,
    };
    let silo = federation::run_siloed(&site, &spec, &settings, seed, None).unwrap();
    let a: Vec<u64> = fed.params.values().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = silo["site05"].values().iter().map(|v| v.to_bits()).collect();
    a == b
}

pub struct MetricCase {
    pub name: &'static str,
    /// Per-site confusion matrices, rows are true classes.
    pub sites: Vec<(&'static str, Vec<Vec<u64>>)>,
    pub wavg: f64,
    pub avg: f64,
    pub macro_f1: f64,
}

/// Constructed cohorts whose WAVG, AVG and macro-F1 were worked out by
/// hand. Accuracies and holdout sizes come from the matrices.
pub fn metric_cases() -> Vec<MetricCase> {
    let z = || vec![0, 0, 0];
    vec![
        MetricCase {
            name: "sizes 100/300, acc 0.5/0.9",
            sites: vec![
                ("a", vec![vec![50, 50, 0], z(), z()]),
                ("b", vec![z(), vec![0, 270, 30], z()]),
            ],
            wavg: 0.8,
            avg: 0.7,
            macro_f1: 143.0 / 279.0,
        },
        MetricCase {
            name: "single perfect site",
            sites: vec![("a", vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 5]])],
            wavg: 1.0,
            avg: 1.0,
            macro_f1: 1.0,
        },
        MetricCase {
            name: "equal sizes",
            sites: vec![
                ("a", vec![vec![4, 0, 0], vec![0, 4, 2], z()]),
                ("b", vec![z(), vec![3, 2, 0], vec![0, 0, 5]]),
            ],
            wavg: 0.75,
            avg: 0.75,
            macro_f1: (8.0 / 11.0 + 12.0 / 17.0 + 5.0 / 6.0) / 3.0,
        },
        MetricCase {
            name: "all wrong",
            sites: vec![("a", vec![vec![0, 2, 0], vec![0, 0, 2], vec![2, 0, 0]])],
            wavg: 0.0,
            avg: 0.0,
            macro_f1: 0.0,
        },
        MetricCase {
            name: "sizes 10/30/60",
            sites: vec![
                ("a", vec![vec![10, 0, 0], z(), z()]),
                ("b", vec![z(), vec![0, 15, 15], z()]),
                ("c", vec![z(), z(), vec![45, 0, 15]]),
            ],
            wavg: 0.4,
            avg: 1.75 / 3.0,
            macro_f1: 17.0 / 39.0,
        },
        MetricCase {
            name: "predicted class absent from truth",
            sites: vec![("a", vec![vec![1, 0, 1], vec![0, 2, 0], z()])],
            wavg: 0.75,
            avg: 0.75,
            macro_f1: 5.0 / 9.0,
        },
        MetricCase {
            name: "small perfect site, large failed site",
            sites: vec![
                ("a", vec![vec![1, 0, 0], z(), z()]),
                ("b", vec![z(), vec![0, 0, 3], z()]),
            ],
            wavg: 0.25,
            avg: 0.5,
            macro_f1: 1.0 / 3.0,
        },
        MetricCase {
            name: "four equal sites",
            sites: vec![
                ("a", vec![vec![5, 20, 0], z(), z()]),
                ("b", vec![vec![10, 15, 0], z(), z()]),
                ("c", vec![vec![15, 10, 0], z(), z()]),
                ("d", vec![vec![20, 5, 0], z(), z()]),
            ],
            wavg: 0.5,
            avg: 0.5,
            macro_f1: 2.0 / 9.0,
        },
        MetricCase {
            name: "sizes 6/2",
            sites: vec![
                ("b", vec![z(), vec![0, 1, 0], vec![0, 1, 0]]),
                ("a", vec![vec![6, 0, 0], z(), z()]),
            ],
            wavg: 7.0 / 8.0,
            avg: 0.75,
            macro_f1: 5.0 / 9.0,
        },
        MetricCase {
            name: "sizes 100/300, acc 0.9/0.5",
            sites: vec![
                ("a", vec![vec![90, 10, 0], z(), z()]),
                ("b", vec![vec![150, 0, 0], z(), vec![150, 0, 0]]),
            ],
            wavg: 0.6,
            avg: 0.7,
            macro_f1: 0.25,
        },
    ]
}

/// Largest deviation between `summarize` and the hand values over all
/// cases, with the name of the worst case.
pub fn metric_case_errors() -> Vec<(&'static str, f64)> {
    metric_cases()
        .into_iter()
        .map(|case| {
            let mut acc = BTreeMap::new();
            let mut sizes = BTreeMap::new();
            let mut confusions = BTreeMap::new();
            for (id, rows) in &case.sites {
                let c = ConfusionMatrix::from_counts(rows);
                acc.insert(id.to_string(), c.accuracy());
                sizes.insert(id.to_string(), c.total() as usize);
                confusions.insert(id.to_string(), c);
            }
            let r = summarize(&acc, &sizes, &confusions).unwrap();
            let err = (r.wavg - case.wavg)
                .abs()
                .max((r.avg - case.avg).abs())
                .max((r.macro_f1 - case.macro_f1).abs());
            (case.name, err)
        })
        .collect()
}
