use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{Dataset, TaskError};

/// Label-skewed split across `num_clients` clients.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

/// Sample indices per client. Shards are disjoint, cover `0..labels.len()`, are non-empty and
/// sorted ascending.
///
/// For every class the share going to each client is drawn from `Dirichlet(α·1_K)`. Empty shards
/// are repaired by moving the last index of the currently largest shard.
pub fn dirichlet_partition_indices(
    labels: &[usize],
    num_classes: usize,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>, TaskError> {
    let k = spec.num_clients;
    if k == 0 {
        return Err(TaskError::ZeroDimension);
    }
    if k > labels.len() {
        return Err(TaskError::TooManyClients {
            clients: k,
            samples: labels.len(),
        });
    }
    if !(spec.dirichlet_alpha > 0.0) || !spec.dirichlet_alpha.is_finite() {
        return Err(TaskError::DirichletAlpha(spec.dirichlet_alpha));
    }
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0)
        .map_err(|_| TaskError::DirichletAlpha(spec.dirichlet_alpha))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..num_classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            props.iter_mut().for_each(|p| *p = 1.0 / k as f64);
        }
        let n_c = members.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == k {
                n_c
            } else {
                ((cum * n_c as f64).round() as usize).clamp(start, n_c)
            };
            shards[client].extend_from_slice(&members[start..end]);
            start = end;
        }
    }

    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..k)
            .max_by_key(|&i| (shards[i].len(), std::cmp::Reverse(i)))
            .expect("at least one client");
        shards[largest].sort_unstable();
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }
    for s in shards.iter_mut() {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Splits `d` into per-client datasets using [`dirichlet_partition_indices`].
pub fn dirichlet_partition(d: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, TaskError> {
    dirichlet_partition_indices(&d.labels, d.num_classes, spec)?
        .iter()
        .map(|idx| d.subset(idx))
        .collect()
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_synthetic, SyntheticSpec};

    fn dataset(classes: usize, n: usize, seed: u64) -> Dataset {
        make_synthetic(&SyntheticSpec::new(classes, 2, n, 0.0, seed)).unwrap()
    }

    fn mean_tv(alpha: f64, classes: usize) -> f64 {
        let mut acc = 0.0;
        for seed in 0..20 {
            let d = dataset(classes, 8000, 1000 + seed);
            let global = d.label_distribution();
            let spec = PartitionSpec {
                num_clients: 8,
                dirichlet_alpha: alpha,
                seed,
            };
            let shards = dirichlet_partition(&d, &spec).unwrap();
            acc += shards
                .iter()
                .map(|s| total_variation(&s.label_distribution(), &global))
                .sum::<f64>()
                / shards.len() as f64;
        }
        acc / 20.0
    }

    #[test]
    fn single_client_gets_everything() {
        let d = dataset(3, 40, 1);
        let spec = PartitionSpec {
            num_clients: 1,
            dirichlet_alpha: 0.5,
            seed: 3,
        };
        assert_eq!(dirichlet_partition(&d, &spec).unwrap(), vec![d]);
    }

    #[test]
    fn too_many_clients() {
        let d = dataset(2, 3, 1);
        let spec = PartitionSpec {
            num_clients: 4,
            dirichlet_alpha: 1.0,
            seed: 0,
        };
        assert!(matches!(
            dirichlet_partition(&d, &spec),
            Err(TaskError::TooManyClients { .. })
        ));
    }

    #[test]
    fn near_iid_partition_tracks_global_labels() {
        assert!(mean_tv(10.0, 2) <= 0.1);
    }

    #[test]
    fn skewed_partition_diverges_more() {
        assert!(mean_tv(0.1, 2) > mean_tv(10.0, 2));
    }

    #[test]
    fn partition_repairs_empty_shards() {
        let d = dataset(2, 12, 4);
        for seed in 0..50 {
            let spec = PartitionSpec {
                num_clients: 12,
                dirichlet_alpha: 0.05,
                seed,
            };
            let shards = dirichlet_partition_indices(&d.labels, 2, &spec).unwrap();
            assert!(shards.iter().all(|s| !s.is_empty()));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn shards_are_disjoint_and_complete(
                n in 1usize..200,
                k in 1usize..10,
                classes in 1usize..5,
                alpha in 0.05f64..20.0,
                seed: u64,
            ) {
                prop_assume!(k <= n);
                let d = dataset(classes, n, seed);
                let spec = PartitionSpec { num_clients: k, dirichlet_alpha: alpha, seed };
                let shards = dirichlet_partition_indices(&d.labels, classes, &spec).unwrap();
                prop_assert_eq!(shards.len(), k);
                let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
                prop_assert_eq!(all.len(), n);
                all.sort_unstable();
                all.dedup();
                prop_assert_eq!(all.len(), n);
                prop_assert!(shards.iter().all(|s| !s.is_empty()));
            }
        }
    }
}
