//! Epoch index plans, including class balancing via up-/down-sampling:
//! minority classes are drawn with replacement, majority classes are
//! subsampled without replacement.

use super::Dataset;
use crate::config::SamplerPolicy;
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One epoch worth of sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerPlan {
    pub epoch_indices: Vec<usize>,
    pub policy: SamplerPolicy,
}

pub fn balance_sampler(
    dataset: &Dataset,
    policy: SamplerPolicy,
    seed: u64,
) -> Result<SamplerPlan> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot sample from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epoch_indices = match policy {
        SamplerPolicy::None => {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            idx.shuffle(&mut rng);
            idx
        }
        SamplerPolicy::Balance => {
            let k = dataset.num_classes();
            let n = dataset.len();
            // per-class quotas summing to n, remainder to the first classes
            let base = n / k;
            let rem = n % k;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, s) in dataset.samples.iter().enumerate() {
                by_class[s.label].push(i);
            }
            let mut plan = Vec::with_capacity(n);
            for (class, members) in by_class.iter().enumerate() {
                let quota = base + usize::from(class < rem);
                if members.is_empty() {
                    if quota > 0 {
                        return Err(Error::Data(format!(
                            "class `{}` has no samples to balance from",
                            dataset.class_names[class]
                        )));
                    }
                    continue;
                }
                if members.len() >= quota {
                    // over-represented: subsample without replacement
                    let mut pool = members.clone();
                    pool.shuffle(&mut rng);
                    plan.extend_from_slice(&pool[..quota]);
                } else {
                    // under-represented: every member once, rest with
                    // replacement
                    plan.extend_from_slice(members);
                    for _ in 0..(quota - members.len()) {
                        plan.push(members[rng.gen_range(0..members.len())]);
                    }
                }
            }
            plan.shuffle(&mut rng);
            plan
        }
    };
    Ok(SamplerPlan {
        epoch_indices,
        policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageSample, SplitTag};
    use ndarray::Array3;

    fn dataset_with_counts(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                samples.push(ImageSample {
                    pixels: Array3::zeros((2, 2, 3)),
                    label,
                    path: None,
                });
            }
        }
        Dataset {
            samples,
            class_names: (0..counts.len()).map(|c| format!("c{c}")).collect(),
            split_tag: SplitTag::Train,
        }
    }

    fn class_histogram(ds: &Dataset, plan: &SamplerPlan) -> Vec<usize> {
        let mut h = vec![0usize; ds.num_classes()];
        for &i in &plan.epoch_indices {
            h[ds.samples[i].label] += 1;
        }
        h
    }

    #[test]
    fn skewed_counts_balance_within_one() {
        let ds = dataset_with_counts(&[100, 10]);
        let plan = balance_sampler(&ds, SamplerPolicy::Balance, 3).unwrap();
        assert_eq!(plan.epoch_indices.len(), 110);
        let h = class_histogram(&ds, &plan);
        assert!(h[0].abs_diff(h[1]) <= 1, "{h:?}");
    }

    #[test]
    fn equal_counts_stay_a_bounded_permutation() {
        let ds = dataset_with_counts(&[50, 50]);
        let plan = balance_sampler(&ds, SamplerPolicy::Balance, 1).unwrap();
        let mut occurrences = vec![0usize; ds.len()];
        for &i in &plan.epoch_indices {
            occurrences[i] += 1;
        }
        let cap = plan.epoch_indices.len().div_ceil(50);
        assert!(occurrences.iter().all(|&o| o <= cap));
    }

    #[test]
    fn none_policy_is_a_seeded_permutation() {
        let ds = dataset_with_counts(&[7, 5]);
        let a = balance_sampler(&ds, SamplerPolicy::None, 9).unwrap();
        let b = balance_sampler(&ds, SamplerPolicy::None, 9).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.epoch_indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn empty_class_under_balance_names_the_class() {
        let ds = dataset_with_counts(&[5, 0, 5]);
        let err = balance_sampler(&ds, SamplerPolicy::Balance, 0).unwrap_err();
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn empty_dataset_errors() {
        let ds = dataset_with_counts(&[]);
        assert!(balance_sampler(&ds, SamplerPolicy::None, 0).is_err());
    }
}
