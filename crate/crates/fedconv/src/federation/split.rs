//! Dataset splitting and non-IID client partitioning.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};

/// Split ratios: server train, server test, client pool train, client pool test.
pub const SPLIT_RATIOS: [f64; 4] = [0.05, 0.20, 0.70, 0.05];

/// Index lists of the four disjoint stratified splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub server_train: Vec<usize>,
    pub server_test: Vec<usize>,
    pub client_train: Vec<usize>,
    pub client_test: Vec<usize>,
}

/// Allocate `n` items over the split ratios with a floor of one per split,
/// distributing the remainder by largest fractional part.
fn allocate(n: usize) -> [usize; 4] {
    let mut counts = [1usize; 4];
    let mut remaining = n - 4;
    let targets: Vec<f64> = SPLIT_RATIOS.iter().map(|r| r * n as f64).collect();
    // integer part beyond the floor of 1
    let mut fracs: Vec<(usize, f64)> = Vec::new();
    for i in 0..4 {
        let want = (targets[i].max(1.0) - 1.0).max(0.0);
        let whole = (want.floor() as usize).min(remaining);
        counts[i] += whole;
        remaining -= whole;
        fracs.push((i, want - want.floor()));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut k = 0;
    while remaining > 0 {
        counts[fracs[k % 4].0] += 1;
        remaining -= 1;
        k += 1;
    }
    counts
}

/// Disjoint stratified splits at 5/20/70/5 percent, deterministic in `seed`.
pub fn split_indices(dataset: &Dataset, seed: u64) -> Result<SplitIndices> {
    let classes = dataset.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_from(seed, "split");
    let mut out = SplitIndices {
        server_train: Vec::new(),
        server_test: Vec::new(),
        client_train: Vec::new(),
        client_test: Vec::new(),
    };
    for (c, indices) in by_class.iter_mut().enumerate() {
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 4 {
            return Err(Error::Config(format!(
                "class {c} has only {} samples; stratified 5/20/70/5 split needs at least 4",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let counts = allocate(indices.len());
        let mut cursor = 0;
        let buckets = [
            &mut out.server_train,
            &mut out.server_test,
            &mut out.client_train,
            &mut out.client_test,
        ];
        for (bucket, &count) in buckets.into_iter().zip(&counts) {
            bucket.extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    Ok(out)
}

/// Materialized datasets for the four splits.
pub struct DatasetSplits {
    pub server_train: Dataset,
    pub server_test: Dataset,
    pub client_train: Dataset,
    pub client_test: Dataset,
}

/// Split a dataset into the four stratified parts.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> Result<DatasetSplits> {
    let idx = split_indices(dataset, seed)?;
    Ok(DatasetSplits {
        server_train: dataset.subset(&idx.server_train)?,
        server_test: dataset.subset(&idx.server_test)?,
        client_train: dataset.subset(&idx.client_train)?,
        client_test: dataset.subset(&idx.client_test)?,
    })
}

/// Per-class client proportions drawn from a symmetric Dirichlet.
pub fn dirichlet_proportions(
    n_classes: usize,
    n_clients: usize,
    alpha: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<f64>>> {
    if alpha <= 0.0 {
        return Err(Error::Config("alpha must be positive".into()));
    }
    if n_clients == 1 {
        return Ok(vec![vec![1.0]; n_classes]);
    }
    // Dirichlet(alpha, ..., alpha) as normalized independent Gamma(alpha, 1)
    // draws; degenerate all-zero draws (possible underflow at tiny alpha)
    // are redrawn.
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("gamma: {e}")))?;
    let mut out = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let row = loop {
            let draw: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
            let sum: f64 = draw.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                break draw.iter().map(|x| x / sum).collect::<Vec<f64>>();
            }
        };
        out.push(row);
    }
    Ok(out)
}

/// Deal a pool's samples to clients following per-class proportions.
/// Returns per-client index lists into the pool (disjoint, exhaustive).
pub fn apply_proportions(
    pool: &Dataset,
    proportions: &[Vec<f64>],
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<usize>> {
    let n_clients = proportions.first().map(|p| p.len()).unwrap_or(1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.class_count()];
    for (i, &l) in pool.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut partitions: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (c, indices) in by_class.iter_mut().enumerate() {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(rng);
        let n = indices.len();
        // largest-remainder allocation of n over the client proportions
        let mut counts: Vec<usize> = proportions[c]
            .iter()
            .map(|p| (p * n as f64).floor() as usize)
            .collect();
        let assigned: usize = counts.iter().sum();
        let mut fracs: Vec<(usize, f64)> = proportions[c]
            .iter()
            .enumerate()
            .map(|(j, p)| (j, p * n as f64 - (p * n as f64).floor()))
            .collect();
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..n - assigned {
            counts[fracs[k % n_clients].0] += 1;
        }
        let mut cursor = 0;
        for (j, &count) in counts.iter().enumerate() {
            partitions[j].extend_from_slice(&indices[cursor..cursor + count]);
            cursor += count;
        }
    }
    partitions
}

/// Partition a client pool with Dirichlet(alpha) class proportions. Draws
/// are resampled until every client holds at least one sample.
pub fn partition_dirichlet(
    pool: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if n_clients > pool.len() {
        return Err(Error::Config(format!(
            "{n_clients} clients cannot share {} samples",
            pool.len()
        )));
    }
    let mut rng = rng_from(seed, "partition");
    for _ in 0..200 {
        let props = dirichlet_proportions(pool.class_count(), n_clients, alpha, &mut rng)?;
        let parts = apply_proportions(pool, &props, &mut rng);
        if parts.iter().all(|p| !p.is_empty()) {
            return Ok(parts);
        }
    }
    Err(Error::Config(format!(
        "could not give every one of {n_clients} clients a sample after 200 draws (alpha={alpha})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    fn balanced(n_per_class: usize, classes: usize) -> Dataset {
        gen_synthetic(classes, n_per_class, &[4], 5.0, 7).unwrap()
    }

    #[test]
    fn thousand_samples_split_50_200_700_50() {
        let d = balanced(100, 10);
        let idx = split_indices(&d, 1).unwrap();
        assert_eq!(idx.server_train.len(), 50);
        assert_eq!(idx.server_test.len(), 200);
        assert_eq!(idx.client_train.len(), 700);
        assert_eq!(idx.client_test.len(), 50);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let d = balanced(25, 7);
        let idx = split_indices(&d, 3).unwrap();
        let mut all: Vec<usize> = idx
            .server_train
            .iter()
            .chain(&idx.server_test)
            .chain(&idx.client_train)
            .chain(&idx.client_test)
            .copied()
            .collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..d.len()).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn same_seed_same_indices() {
        let d = balanced(30, 5);
        assert_eq!(split_indices(&d, 9).unwrap(), split_indices(&d, 9).unwrap());
        assert_ne!(split_indices(&d, 9).unwrap(), split_indices(&d, 10).unwrap());
    }

    #[test]
    fn tiny_classes_rejected() {
        let d = gen_synthetic(3, 3, &[4], 5.0, 1).unwrap();
        assert!(matches!(split_indices(&d, 1), Err(Error::Config(_))));
    }

    #[test]
    fn single_client_gets_whole_pool() {
        let d = balanced(10, 4);
        let parts = partition_dirichlet(&d, 1, 0.5, 3).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), d.len());
    }

    #[test]
    fn partitions_are_disjoint_exhaustive_and_nonempty() {
        let d = balanced(40, 10);
        let parts = partition_dirichlet(&d, 8, 0.1, 5).unwrap();
        assert_eq!(parts.len(), 8);
        assert!(parts.iter().all(|p| !p.is_empty()));
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
    }

    #[test]
    fn large_alpha_is_nearly_uniform() {
        let d = balanced(100, 10);
        let parts = partition_dirichlet(&d, 5, 10_000.0, 5).unwrap();
        let share = 1.0 / 5.0;
        for p in &parts {
            // per-class histogram within 5 percentage points of uniform
            let mut counts = vec![0usize; 10];
            for &i in p {
                counts[d.labels()[i]] += 1;
            }
            for (c, &count) in counts.iter().enumerate() {
                let frac = count as f64 / 100.0;
                assert!(
                    (frac - share).abs() < 0.05,
                    "class {c}: {frac} vs uniform {share}"
                );
            }
        }
    }

    #[test]
    fn small_alpha_concentrates_mass() {
        // at alpha=0.05 most clients should be dominated by few classes;
        // verified empirically over 20 seeds
        let d = balanced(100, 10);
        let mut skewed_runs = 0;
        for seed in 0..20 {
            let parts = partition_dirichlet(&d, 10, 0.05, seed).unwrap();
            let any_dominated = parts.iter().any(|p| {
                let mut counts = vec![0usize; 10];
                for &i in p {
                    counts[d.labels()[i]] += 1;
                }
                let max = *counts.iter().max().unwrap();
                !p.is_empty() && max as f64 / p.len() as f64 > 0.5
            });
            if any_dominated {
                skewed_runs += 1;
            }
        }
        assert!(
            skewed_runs >= 15,
            "only {skewed_runs}/20 seeds showed a dominated client"
        );
    }

    #[test]
    fn more_clients_than_samples_rejected() {
        let d = balanced(4, 2);
        assert!(partition_dirichlet(&d, 100, 1.0, 1).is_err());
    }
}
