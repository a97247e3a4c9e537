//! Generated datasets for tests, gradient checks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FeatureInfo, FeatureKind, FeatureSchema, RawSplit, RawTargets, Task, TabularDataset};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn numeric_schema(name: &str, task: Task, features: &[String], classes: Vec<String>) -> FeatureSchema {
    FeatureSchema {
        name: name.into(),
        task,
        target: "y".into(),
        features: features
            .iter()
            .map(|n| FeatureInfo {
                name: n.clone(),
                kind: FeatureKind::Numerical,
            })
            .collect(),
        classes,
    }
}

fn generate(
    rows: [usize; 3],
    n_features: usize,
    seed: u64,
    mut target: impl FnMut(&[f64], &mut ChaCha8Rng) -> f64,
) -> [RawSplit; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.map(|n| {
        let mut numerical = Vec::with_capacity(n * n_features);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..n_features).map(|_| normal(&mut rng)).collect();
            ys.push(target(&x, &mut rng));
            numerical.extend(x);
        }
        RawSplit {
            rows: n,
            numerical,
            categorical: Vec::new(),
            targets: RawTargets::Values(ys),
        }
    })
}

/// Six standard-normal features with `y = x1·x2 + x3·x4 + 0.05·ε`; features
/// `x5`, `x6` are noise.
pub fn pairwise_interactions(rows: [usize; 3], seed: u64) -> TabularDataset {
    let names: Vec<String> = (1..=6).map(|i| format!("x{i}")).collect();
    let [train, val, test] = generate(rows, 6, seed, |x, rng| x[0] * x[1] + x[2] * x[3] + 0.05 * normal(rng));
    TabularDataset {
        schema: numeric_schema("pairwise_interactions", Task::Regression, &names, Vec::new()),
        train,
        val,
        test,
    }
}

pub const CALIFORNIA_FEATURES: [&str; 8] = [
    "MedInc",
    "HouseAge",
    "AveRooms",
    "AveBedrms",
    "Population",
    "AveOccup",
    "Latitude",
    "Longitude",
];

/// Regression data with the California-housing column layout (8 numerical
/// features, same names). Values are generated, not real housing data.
pub fn california_like(rows: [usize; 3], seed: u64) -> TabularDataset {
    let names: Vec<String> = CALIFORNIA_FEATURES.iter().map(|s| s.to_string()).collect();
    let [train, val, test] = generate(rows, 8, seed, |x, rng| {
        2.0 + 0.8 * x[0] + 0.3 * x[0] * x[5] - 0.2 * x[6] * x[7] + 0.1 * x[1] + 0.1 * normal(rng)
    });
    TabularDataset {
        schema: numeric_schema("california_like", Task::Regression, &names, Vec::new()),
        train,
        val,
        test,
    }
}

/// Mixed numerical/categorical data for any task. Targets depend on a few
/// feature interactions so models have something to learn.
pub fn mixed(
    task: Task,
    n_numerical: usize,
    cardinalities: &[usize],
    n_classes: usize,
    rows: [usize; 3],
    seed: u64,
) -> TabularDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features: Vec<FeatureInfo> = (0..n_numerical)
        .map(|i| FeatureInfo {
            name: format!("num{i}"),
            kind: FeatureKind::Numerical,
        })
        .collect();
    features.extend(cardinalities.iter().enumerate().map(|(i, &c)| FeatureInfo {
        name: format!("cat{i}"),
        kind: FeatureKind::Categorical {
            vocab: (0..c).map(|v| format!("c{i}_{v}")).collect(),
        },
    }));
    let classes = if task.is_classification() {
        (0..n_classes).map(|c| c.to_string()).collect()
    } else {
        Vec::new()
    };
    let splits = rows.map(|n| {
        let mut numerical = Vec::with_capacity(n * n_numerical);
        let mut categorical = Vec::with_capacity(n * cardinalities.len());
        let mut score = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..n_numerical).map(|_| normal(&mut rng)).collect();
            let c: Vec<usize> = cardinalities.iter().map(|&k| rng.gen_range(0..k)).collect();
            let mut s = 0.0;
            if n_numerical >= 2 {
                s += x[0] * x[1];
            }
            if let Some(&x0) = x.first() {
                s += 0.5 * x0;
            }
            for (i, &ci) in c.iter().enumerate() {
                s += if ci % 2 == 0 { 0.5 } else { -0.5 } * (i as f64 + 1.0) / cardinalities.len() as f64;
            }
            s += 0.1 * normal(&mut rng);
            score.push(s);
            numerical.extend(x);
            categorical.extend(c);
        }
        let targets = if task.is_classification() {
            let k = n_classes.max(2) as f64;
            RawTargets::Classes(
                score
                    .iter()
                    .map(|&s| {
                        // logistic squashing into equal-width class bins
                        let p = 1.0 / (1.0 + (-1.5 * s).exp());
                        ((p * k) as usize).min(n_classes.max(2) - 1)
                    })
                    .collect(),
            )
        } else {
            RawTargets::Values(score)
        };
        RawSplit {
            rows: n,
            numerical,
            categorical,
            targets,
        }
    });
    let [train, val, test] = splits;
    TabularDataset {
        schema: FeatureSchema {
            name: "mixed".into(),
            task,
            target: "y".into(),
            features,
            classes,
        },
        train,
        val,
        test,
    }
}
