//! Accuracy profiles (AMP / FM / WLP) and the agnostic-mixture bound check.
//!
//! Conventions that are easy to get wrong, pinned here:
//! - AMP is weighted by per-client *test* sizes;
//! - FM is the *population* variance (divide by K) of the *unweighted* a_k;
//! - WLP is the minimum a_k;
//! - agnostic MP with the test-size weights equals AMP.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::losses::argmax_rows;
use crate::models::Classifier;
use crate::rng::stream;

pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyProfile {
    pub per_client_acc: Vec<f64>,
    pub test_sizes: Vec<usize>,
}

impl AccuracyProfile {
    pub fn new(per_client_acc: Vec<f64>, test_sizes: Vec<usize>) -> Result<Self> {
        let p = AccuracyProfile { per_client_acc, test_sizes };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_client_acc.is_empty() {
            return Err(Error::config("empty accuracy profile"));
        }
        if self.per_client_acc.len() != self.test_sizes.len() {
            return Err(Error::config("profile accuracy/size length mismatch"));
        }
        if self.per_client_acc.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::config("accuracies must lie in [0,1]"));
        }
        if self.test_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("test sizes must be positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.per_client_acc.len()
    }
}

/// Test-size-weighted mean accuracy.
pub fn amp(p: &AccuracyProfile) -> f64 {
    let total: usize = p.test_sizes.iter().sum();
    p.per_client_acc
        .iter()
        .zip(&p.test_sizes)
        .map(|(&a, &s)| a * s as f64)
        .sum::<f64>()
        / total as f64
}

/// Population variance (÷K) of the unweighted per-client accuracies.
pub fn fm(p: &AccuracyProfile) -> f64 {
    let k = p.k() as f64;
    let mean = p.per_client_acc.iter().sum::<f64>() / k;
    p.per_client_acc.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / k
}

/// Worst-case local performance: min over a_k.
pub fn wlp(p: &AccuracyProfile) -> f64 {
    p.per_client_acc.iter().cloned().fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights(pub Vec<f64>);

impl MixtureWeights {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.0.len() != k {
            return Err(Error::config("mixture length != K"));
        }
        if self.0.iter().any(|&v| v < 0.0) {
            return Err(Error::config("mixture weights must be non-negative"));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture weights sum to {s}, not 1")));
        }
        Ok(())
    }

    pub fn uniform(k: usize) -> Self {
        MixtureWeights(vec![1.0 / k as f64; k])
    }
}

/// Mixture-weighted accuracy MP = Σ p̂_k a_k.
pub fn agnostic_mp(p: &AccuracyProfile, mix: &MixtureWeights) -> Result<f64> {
    mix.validate(p.k())?;
    Ok(p.per_client_acc.iter().zip(&mix.0).map(|(&a, &w)| a * w).sum())
}

/// Uniform simplex sample: K Exp(1) draws, normalized (Dirichlet(1,…,1)).
pub fn sample_mixture(k: usize, rng: &mut impl rand::Rng) -> MixtureWeights {
    let mut draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    if s <= f64::MIN_POSITIVE {
        return MixtureWeights::uniform(k);
    }
    for d in &mut draws {
        *d /= s;
    }
    MixtureWeights(draws)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub num_mixtures: usize,
    pub min_observed_mp: f64,
    pub amp: f64,
    pub wlp: f64,
    /// min MP ≥ WLP − 1e-12 over every sampled mixture
    pub holds: bool,
}

/// Sample `num_mixtures` simplex points and verify MP ≥ WLP − 1e-12 on each.
pub fn check_afl_bounds(
    profile: &AccuracyProfile,
    num_mixtures: usize,
    seed: u64,
) -> Result<BoundsReport> {
    profile.validate()?;
    if num_mixtures == 0 {
        return Err(Error::config("num_mixtures must be >= 1"));
    }
    let w = wlp(profile);
    let mut rng = stream(seed, "mixtures", &[]);
    let mut min_mp = f64::INFINITY;
    let mut holds = true;
    for _ in 0..num_mixtures {
        let mix = sample_mixture(profile.k(), &mut rng);
        let mp = agnostic_mp(profile, &mix)?;
        min_mp = min_mp.min(mp);
        if mp < w - 1e-12 {
            holds = false;
        }
    }
    Ok(BoundsReport {
        num_mixtures,
        min_observed_mp: min_mp,
        amp: amp(profile),
        wlp: w,
        holds,
    })
}

/// Evaluate a classifier on every client's local *test* shard.
pub fn evaluate_profile(
    clf: &mut Classifier,
    ds: &Dataset,
    shards: &[ClientShard],
) -> Result<AccuracyProfile> {
    let mut accs = Vec::with_capacity(shards.len());
    let mut sizes = Vec::with_capacity(shards.len());
    for (k, shard) in shards.iter().enumerate() {
        if shard.test.is_empty() {
            return Err(Error::config(format!("client {k} has an empty test set")));
        }
        accs.push(accuracy_on(clf, ds, &shard.test));
        sizes.push(shard.test.len());
    }
    AccuracyProfile::new(accs, sizes)
}

/// Fraction of `idx` samples whose argmax prediction matches the label.
pub fn accuracy_on(clf: &mut Classifier, ds: &Dataset, idx: &[usize]) -> f64 {
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk);
        let (logits, _) = clf.forward(&x, false);
        let pred = argmax_rows(&logits);
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    correct as f64 / idx.len() as f64
}

/// Mean cross-entropy of the classifier on `idx` (used by q-FFL's F_k).
pub fn mean_ce_on(clf: &mut Classifier, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk);
        let (logits, _) = clf.forward(&x, false);
        total += crate::losses::loss_student_ce(&logits, &y)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::models::{ClassifierArch, ModelWeights};
    use approx::assert_abs_diff_eq;

    fn prof(a: &[f64]) -> AccuracyProfile {
        AccuracyProfile::new(a.to_vec(), vec![10; a.len()]).unwrap()
    }

    #[test]
    fn table_metric_oracles() {
        // three models from the worked example: (AMP, FM, WLP)
        let w1 = prof(&[0.6, 0.7, 0.8]);
        assert_abs_diff_eq!(amp(&w1), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(fm(&w1), 0.006666666666666667, epsilon = 1e-12);
        assert_abs_diff_eq!(wlp(&w1), 0.6, epsilon = 1e-12);

        let w2 = prof(&[0.65, 0.65, 0.8]);
        assert_abs_diff_eq!(amp(&w2), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(fm(&w2), 0.005, epsilon = 1e-12);
        assert_abs_diff_eq!(wlp(&w2), 0.65, epsilon = 1e-12);

        let w3 = prof(&[0.7, 0.8, 0.9]);
        assert_abs_diff_eq!(amp(&w3), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(fm(&w3), 0.006666666666666667, epsilon = 1e-12);
        assert_abs_diff_eq!(wlp(&w3), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn amp_weights_by_test_size() {
        let p = AccuracyProfile::new(vec![0.5, 0.9], vec![10, 30]).unwrap();
        assert_abs_diff_eq!(amp(&p), 0.8, epsilon = 1e-12);
        // constant profile → that constant
        let c = AccuracyProfile::new(vec![0.42, 0.42], vec![5, 50]).unwrap();
        assert_abs_diff_eq!(amp(&c), 0.42, epsilon = 1e-12);
    }

    #[test]
    fn fm_permutation_invariant_and_zero_when_equal() {
        let a = prof(&[0.6, 0.7, 0.8]);
        let b = prof(&[0.8, 0.6, 0.7]);
        assert_abs_diff_eq!(fm(&a), fm(&b), epsilon = 1e-15);
        assert_abs_diff_eq!(fm(&prof(&[0.5, 0.5, 0.5])), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn agnostic_mp_oracles() {
        let p = prof(&[0.6, 0.7, 0.8]);
        let mix = MixtureWeights(vec![0.2, 0.3, 0.5]);
        assert_abs_diff_eq!(agnostic_mp(&p, &mix).unwrap(), 0.73, epsilon = 1e-12);
        // one-hot vertex
        let hot = MixtureWeights(vec![0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(agnostic_mp(&p, &hot).unwrap(), 0.7, epsilon = 1e-12);
        // uniform = unweighted mean
        let uni = MixtureWeights::uniform(3);
        assert_abs_diff_eq!(agnostic_mp(&p, &uni).unwrap(), 0.7, epsilon = 1e-12);
        // amp consistency: p̂ from test sizes
        let sized = AccuracyProfile::new(vec![0.5, 0.9], vec![10, 30]).unwrap();
        let mix_sz = MixtureWeights(vec![0.25, 0.75]);
        assert_abs_diff_eq!(
            agnostic_mp(&sized, &mix_sz).unwrap(),
            amp(&sized),
            epsilon = 1e-12
        );
        // invalid mixtures rejected
        assert!(agnostic_mp(&p, &MixtureWeights(vec![0.5, 0.5])).is_err());
        assert!(agnostic_mp(&p, &MixtureWeights(vec![0.5, 0.6, -0.1])).is_err());
        assert!(agnostic_mp(&p, &MixtureWeights(vec![0.5, 0.3, 0.3])).is_err());
    }

    #[test]
    fn bounds_hold_on_random_profiles() {
        use rand::Rng;
        let mut rng = stream(77, "test", &[]);
        for t in 0..10 {
            let k = rng.random_range(2..12);
            let accs: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = AccuracyProfile::new(accs, vec![7; k]).unwrap();
            let rep = check_afl_bounds(&p, 500, t).unwrap();
            assert!(rep.holds);
            assert!(rep.min_observed_mp >= rep.wlp - 1e-12);
            assert!(rep.amp <= 1.0 && rep.min_observed_mp <= 1.0);
        }
        // all-equal profile: MP is exactly WLP for any mixture
        let eq = prof(&[0.55, 0.55, 0.55]);
        let rep = check_afl_bounds(&eq, 200, 3).unwrap();
        assert_abs_diff_eq!(rep.min_observed_mp, 0.55, epsilon = 1e-12);
    }

    #[test]
    fn mixtures_are_simplex_points() {
        let mut rng = stream(78, "test", &[]);
        for _ in 0..200 {
            let m = sample_mixture(6, &mut rng);
            m.validate(6).unwrap();
        }
    }

    #[test]
    fn profile_validation_rejects_garbage() {
        assert!(AccuracyProfile::new(vec![], vec![]).is_err());
        assert!(AccuracyProfile::new(vec![0.5], vec![]).is_err());
        assert!(AccuracyProfile::new(vec![1.5], vec![3]).is_err());
        assert!(AccuracyProfile::new(vec![0.5], vec![0]).is_err());
    }

    #[test]
    fn evaluate_profile_matches_per_sample_loop() {
        let ds = synthetic_blobs(200, 8, 4, 1.0, 21);
        let arch = ClassifierArch::TinyMlp { input_dim: 8, hidden: 6, num_classes: 4 };
        let mut clf = Classifier::init(arch, 5).unwrap();
        let spec = crate::data::PartitionSpec {
            k: 4,
            alpha: 1.0,
            seed: 2,
            train_fraction: 0.8,
            subsample_fraction: 1.0,
        };
        let part = crate::data::dirichlet_partition(&ds.labels, 4, &spec).unwrap();
        let profile = evaluate_profile(&mut clf, &ds, &part.shards).unwrap();

        // brute-force per-sample oracle
        for (k, shard) in part.shards.iter().enumerate() {
            let mut correct = 0;
            for &i in &shard.test {
                let (x, y) = ds.batch(&[i]);
                let (logits, _) = clf.forward(&x, false);
                if argmax_rows(&logits)[0] == y[0] {
                    correct += 1;
                }
            }
            let want = correct as f64 / shard.test.len() as f64;
            assert_abs_diff_eq!(profile.per_client_acc[k], want, epsilon = 1e-15);
            assert_eq!(profile.test_sizes[k], shard.test.len());
        }
    }

    #[test]
    fn constant_classifier_profile_extremes() {
        // zero weights → always predicts class 0
        let ds = synthetic_blobs(120, 4, 3, 0.5, 9);
        let arch = ClassifierArch::TinyMlp { input_dim: 4, hidden: 5, num_classes: 3 };
        let mut clf = Classifier::init(arch, 1).unwrap();
        let zeros = clf.weights().zeros_like();
        clf.set_weights(&zeros).unwrap();

        // one shard with only class 0, one without any class 0
        let only0: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.labels[i] == 0).take(10).collect();
        let no0: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] != 0).take(10).collect();
        let shards = vec![
            crate::data::ClientShard { train: vec![], test: only0 },
            crate::data::ClientShard { train: vec![], test: no0 },
        ];
        let p = evaluate_profile(&mut clf, &ds, &shards).unwrap();
        assert_abs_diff_eq!(p.per_client_acc[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.per_client_acc[1], 0.0, epsilon = 1e-15);

        // empty test set is a validation error
        let bad = vec![crate::data::ClientShard { train: vec![], test: vec![] }];
        assert!(evaluate_profile(&mut clf, &ds, &bad).is_err());
    }

    #[test]
    fn perfect_classifier_scores_one_everywhere() {
        // input = scaled one-hot of the label; identity weights → perfect
        let c = 3usize;
        let n = 60usize;
        let mut images = ndarray::Array2::zeros((n, c));
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % c;
            images[(i, y)] = 1.0;
            labels.push(y as u8);
        }
        let ds = crate::data::Dataset {
            name: "onehot".into(),
            images,
            labels,
            input: crate::models::ImageShape::new(1, 1, c),
            num_classes: c,
        };
        let arch = ClassifierArch::TinyMlp { input_dim: c, hidden: c, num_classes: c };
        let mut clf = Classifier::init(arch, 1).unwrap();
        let mut w: ModelWeights = clf.weights().zeros_like();
        for (name, t) in w.entries.iter_mut() {
            if name.ends_with(".w") {
                for i in 0..c {
                    t[[i, i]] = 1.0;
                }
            }
        }
        clf.set_weights(&w).unwrap();
        let shards: Vec<crate::data::ClientShard> = (0..3)
            .map(|k| crate::data::ClientShard {
                train: vec![],
                test: (0..n).filter(|i| i % 3 == k).collect(),
            })
            .collect();
        let p = evaluate_profile(&mut clf, &ds, &shards).unwrap();
        assert!(p.per_client_acc.iter().all(|&a| a == 1.0));
    }
}
