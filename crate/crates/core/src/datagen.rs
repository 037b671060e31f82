//! Synthetic multi-semantic datasets with known cluster structure.
//!
//! Every true cluster owns a categorical prior over the flattened
//! `(subject, object, predicate)` cells drawn from a symmetric Dirichlet with
//! concentration `separation`. Small values give peaked, nearly disjoint
//! priors and therefore well separated clusters.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::sample_dirichlet;
use crate::seed;
use crate::semantics::{AnnotationRecord, ClusterAssignment, Triplet, PSG_DIMS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataGenError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("holdout fraction {0} leaves one side of the split empty")]
    EmptySplit(f64),
}

type Result<T> = std::result::Result<T, DataGenError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_true_clusters: usize,
    pub samples_per_cluster: usize,
    pub dims: [usize; 3],
    /// Inclusive `[min, max]` number of relations per sample.
    pub relations_per_sample: [usize; 2],
    pub separation: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// PSG-shaped spec: 13 x 13 x 7 cells, 10 to 20 relations per sample.
    pub fn psg_like(n_true_clusters: usize, samples_per_cluster: usize, separation: f64, seed: u64) -> Self {
        Self {
            n_true_clusters,
            samples_per_cluster,
            dims: PSG_DIMS,
            relations_per_sample: [10, 20],
            separation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataGenError::Spec(m.to_string()));
        if self.n_true_clusters == 0 || self.samples_per_cluster == 0 {
            return bad("cluster and sample counts must be >= 1");
        }
        if self.dims.contains(&0) {
            return bad("degenerate dims");
        }
        let [lo, hi] = self.relations_per_sample;
        if lo == 0 || lo > hi {
            return bad("relations_per_sample must satisfy 1 <= min <= max");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        Ok(())
    }

    fn cells(&self) -> usize {
        self.dims.iter().product()
    }
}

fn cell_triplet(cell: usize, dims: [usize; 3]) -> Triplet {
    let p = cell % dims[2];
    let o = (cell / dims[2]) % dims[1];
    let s = cell / (dims[1] * dims[2]);
    Triplet::new(s, o, p)
}

/// Records in cluster-major order with ids `syn000000, syn000001, ...`, and
/// their true cluster labels.
pub fn generate(spec: &GeneratorSpec) -> Result<(Vec<AnnotationRecord>, ClusterAssignment)> {
    spec.validate()?;
    let alpha = vec![spec.separation; spec.cells()];
    let [lo, hi] = spec.relations_per_sample;
    let mut records = Vec::with_capacity(spec.n_true_clusters * spec.samples_per_cluster);
    let mut labels = Vec::with_capacity(records.capacity());
    for k in 0..spec.n_true_clusters {
        let mut rng = seed::rng(spec.seed, &[k as u64]);
        let prior = sample_dirichlet(&alpha, &mut rng);
        let cells = WeightedIndex::new(&prior).expect("prior has positive mass");
        for _ in 0..spec.samples_per_cluster {
            let count = rng.random_range(lo..=hi);
            let relations = (0..count)
                .map(|_| cell_triplet(cells.sample(&mut rng), spec.dims))
                .collect();
            let id = format!("syn{:06}", records.len());
            records.push(AnnotationRecord::with_relations(id, relations));
            labels.push(k);
        }
    }
    let truth = ClusterAssignment::from_labels(
        spec.n_true_clusters,
        records.iter().map(|r| r.sample_id.clone()),
        &labels,
    )
    .expect("generated ids are unique");
    Ok((records, truth))
}

/// A stratified train/test split of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Testbed {
    pub train: Vec<AnnotationRecord>,
    pub test: Vec<AnnotationRecord>,
    /// True clusters of every generated sample, train and test.
    pub truth: ClusterAssignment,
}

/// Generates `spec` and holds out `round(fraction * size)` samples of every
/// true cluster as test scenes.
pub fn make_testbed(spec: &GeneratorSpec, holdout_fraction: f64, seed: u64) -> Result<Testbed> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(DataGenError::EmptySplit(holdout_fraction));
    }
    let (records, truth) = generate(spec)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, chunk) in records.chunks(spec.samples_per_cluster).enumerate() {
        let mut order: Vec<usize> = (0..chunk.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[k as u64]));
        let n_test = (holdout_fraction * chunk.len() as f64).round() as usize;
        let mut is_test = vec![false; chunk.len()];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for (rec, t) in chunk.iter().zip(is_test) {
            if t { &mut test } else { &mut train }.push(rec.clone());
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(DataGenError::EmptySplit(holdout_fraction));
    }
    Ok(Testbed { train, test, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn single_cluster_labels() {
        let (records, truth) = generate(&GeneratorSpec::psg_like(1, 20, 0.1, 3)).unwrap();
        assert_eq!(records.len(), 20);
        assert!(truth.iter().all(|(_, c)| c == 0));
    }

    #[test]
    fn indices_within_dims_and_deterministic() {
        let spec = GeneratorSpec {
            dims: [4, 5, 3],
            ..GeneratorSpec::psg_like(3, 30, 0.5, 11)
        };
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        for r in &a {
            r.validate(Some(spec.dims)).unwrap();
            assert!((10..=20).contains(&r.relations.len()));
        }
        let other = generate(&GeneratorSpec { seed: 12, ..spec }).unwrap().0;
        assert_ne!(a, other);
    }

    #[test]
    fn cell_decoding_is_row_major() {
        let dims = [13, 13, 7];
        assert_eq!(cell_triplet(0, dims), Triplet::new(0, 0, 0));
        assert_eq!(cell_triplet((2 * 13 + 5) * 7 + 1, dims), Triplet::new(2, 5, 1));
        assert_eq!(cell_triplet(1182, dims), Triplet::new(12, 12, 6));
    }

    #[test]
    fn invalid_specs() {
        let base = GeneratorSpec::psg_like(2, 5, 0.1, 0);
        for spec in [
            GeneratorSpec { n_true_clusters: 0, ..base.clone() },
            GeneratorSpec { dims: [0, 13, 7], ..base.clone() },
            GeneratorSpec { relations_per_sample: [4, 2], ..base.clone() },
            GeneratorSpec { separation: 0.0, ..base.clone() },
        ] {
            assert!(generate(&spec).is_err());
        }
    }

    #[test]
    fn testbed_split_is_stratified() {
        let spec = GeneratorSpec::psg_like(3, 10, 0.2, 1);
        let bed = make_testbed(&spec, 0.5, 7).unwrap();
        assert_eq!(bed.train.len(), 15);
        assert_eq!(bed.test.len(), 15);
        for k in 0..3 {
            let n = bed.test.iter().filter(|r| bed.truth.get(&r.sample_id) == Some(k)).count();
            assert_eq!(n, 5);
        }
        let train: BTreeSet<_> = bed.train.iter().map(|r| &r.sample_id).collect();
        let test: BTreeSet<_> = bed.test.iter().map(|r| &r.sample_id).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 30);
    }

    #[test]
    fn testbed_share_within_one_sample() {
        let spec = GeneratorSpec::psg_like(4, 13, 0.2, 1);
        let bed = make_testbed(&spec, 0.3, 2).unwrap();
        for k in 0..4 {
            let n = bed.test.iter().filter(|r| bed.truth.get(&r.sample_id) == Some(k)).count();
            assert!((n as f64 - 0.3 * 13.0).abs() <= 1.0);
        }
    }

    #[test]
    fn testbed_rejects_degenerate_fraction() {
        let spec = GeneratorSpec::psg_like(2, 3, 0.2, 1);
        assert!(make_testbed(&spec, 0.0, 0).is_err());
        assert!(make_testbed(&spec, 1.0, 0).is_err());
        assert_eq!(make_testbed(&spec, 0.01, 0), Err(DataGenError::EmptySplit(0.01)));
    }
}
