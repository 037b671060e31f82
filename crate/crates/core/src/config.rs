//! Experiment configuration: one JSON document describing every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorSpec;
use crate::flcore::{AggregatorSpec, RoundConfig};
use crate::partition::{PartitionSpec, PartitionStrategy};
use crate::seed;
use crate::semantics::{KMeansParams, PSG_DIMS};
use crate::trainer::LocalTrainConfig;
use crate::{io, Error, Result};

const GENERATOR_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const KMEANS_STREAM: u64 = 3;
const BALANCE_STREAM: u64 = 4;
const PARTITION_STREAM: u64 = 5;
const ROUNDS_STREAM: u64 = 6;

fn default_relations() -> [usize; 2] {
    [10, 20]
}

fn default_dims() -> [usize; 3] {
    PSG_DIMS
}

fn default_holdout() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_iters() -> usize {
    300
}

fn default_restarts() -> usize {
    10
}

fn default_tol() -> f64 {
    1e-6
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Synthetic data with known clusters, split into train and test scenes.
    Generator {
        n_true_clusters: usize,
        samples_per_cluster: usize,
        separation: f64,
        #[serde(default = "default_relations")]
        relations_per_sample: [usize; 2],
        #[serde(default = "default_dims")]
        dims: [usize; 3],
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
    },
    /// Annotation files. Without a category map, labels are taken as
    /// super-classes of the given `dims`.
    Files {
        annotations: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_annotations: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        category_map: Option<PathBuf>,
        #[serde(default = "default_dims")]
        dims: [usize; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub n_clusters: usize,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_restarts")]
    pub n_init: usize,
    /// Overrides the seed derived from the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub strategy: PartitionStrategy,
    pub n_clients: usize,
    #[serde(default)]
    pub allow_empty_clients: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub clients_per_round: usize,
    pub total_rounds: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub clustering: ClusteringConfig,
    #[serde(default = "default_true")]
    pub balance: bool,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    pub aggregator: AggregatorSpec,
    #[serde(default)]
    pub local: LocalTrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Fail on selected clients without data instead of skipping them.
    #[serde(default)]
    pub strict: bool,
}

impl ExperimentConfig {
    /// Parses, resolves paths relative to the file's directory, checks that
    /// referenced files exist and validates every field.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.check_files()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Files {
            annotations,
            test_annotations,
            category_map,
            ..
        } = &mut self.dataset
        {
            fix(annotations);
            test_annotations.iter_mut().for_each(fix);
            category_map.iter_mut().for_each(fix);
        }
        self.output_dir.iter_mut().for_each(fix);
    }

    fn check_files(&self) -> Result<()> {
        if let DatasetSource::Files {
            annotations,
            test_annotations,
            category_map,
            ..
        } = &self.dataset
        {
            let files = [
                ("dataset.annotations", Some(annotations)),
                ("dataset.test_annotations", test_annotations.as_ref()),
                ("dataset.category_map", category_map.as_ref()),
            ];
            for (field, path) in files {
                if let Some(p) = path.filter(|p| !p.is_file()) {
                    return Err(Error::config(field, format!("file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Checks every nested invariant, reporting the offending field path.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| Err(Error::config(field, reason));
        match &self.dataset {
            DatasetSource::Generator {
                holdout_fraction, ..
            } => {
                if let Err(e) = self.generator_spec().expect("generator source").validate() {
                    return fail("dataset", e.to_string());
                }
                if !(*holdout_fraction > 0.0 && *holdout_fraction < 1.0) {
                    return fail("dataset.holdout_fraction", format!("must be in (0, 1), got {holdout_fraction}"));
                }
            }
            DatasetSource::Files { dims, .. } => {
                if dims.contains(&0) || dims[0] != dims[1] {
                    return fail("dataset.dims", format!("invalid dims {dims:?}"));
                }
            }
        }

        let c = &self.clustering;
        if c.n_clusters == 0 {
            return fail("clustering.n_clusters", "must be >= 1".into());
        }
        if c.max_iters == 0 {
            return fail("clustering.max_iters", "must be >= 1".into());
        }
        if !(c.tol >= 0.0 && c.tol.is_finite()) {
            return fail("clustering.tol", format!("must be >= 0, got {}", c.tol));
        }
        if c.n_init == 0 {
            return fail("clustering.n_init", "must be >= 1".into());
        }

        let p = &self.partition;
        if p.n_clients == 0 {
            return fail("partition.n_clients", "must be >= 1".into());
        }
        match &p.strategy {
            PartitionStrategy::Random => {}
            PartitionStrategy::Shard { p: shards, .. } => {
                if *shards == 0 || *shards > c.n_clusters {
                    return fail(
                        "partition.strategy.p",
                        format!("must be in [1, {}], got {shards}", c.n_clusters),
                    );
                }
            }
            PartitionStrategy::Dirichlet { alpha } => {
                if alpha.len() != 1 && alpha.len() != c.n_clusters {
                    return fail(
                        "partition.strategy.alpha",
                        format!("needs 1 or {} entries, got {}", c.n_clusters, alpha.len()),
                    );
                }
                if alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                    return fail("partition.strategy.alpha", "entries must be positive".into());
                }
            }
        }

        let f = &self.federation;
        if f.clients_per_round == 0 || f.clients_per_round > p.n_clients {
            return fail(
                "federation.clients_per_round",
                format!("must be in [1, {}], got {}", p.n_clients, f.clients_per_round),
            );
        }
        if f.total_rounds == 0 {
            return fail("federation.total_rounds", "must be >= 1".into());
        }
        if f.eval_every == 0 {
            return fail("federation.eval_every", "must be >= 1".into());
        }
        if let Err(e) = self.aggregator.validate() {
            return fail("aggregator", e.to_string());
        }
        if let Err((field, reason)) = self.local.check() {
            return fail(&format!("local.{field}"), reason);
        }
        Ok(())
    }

    /// Category dims of the training data.
    pub fn dims(&self) -> [usize; 3] {
        match &self.dataset {
            DatasetSource::Generator { dims, .. } | DatasetSource::Files { dims, .. } => *dims,
        }
    }

    pub fn generator_spec(&self) -> Option<GeneratorSpec> {
        match &self.dataset {
            DatasetSource::Generator {
                n_true_clusters,
                samples_per_cluster,
                separation,
                relations_per_sample,
                dims,
                ..
            } => Some(GeneratorSpec {
                n_true_clusters: *n_true_clusters,
                samples_per_cluster: *samples_per_cluster,
                dims: *dims,
                relations_per_sample: *relations_per_sample,
                separation: *separation,
                seed: seed::derive(self.seed, &[GENERATOR_STREAM]),
            }),
            DatasetSource::Files { .. } => None,
        }
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, &[SPLIT_STREAM])
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        let c = &self.clustering;
        KMeansParams {
            n_clusters: c.n_clusters,
            seed: c.seed.unwrap_or_else(|| seed::derive(self.seed, &[KMEANS_STREAM])),
            max_iters: c.max_iters,
            tol: c.tol,
            n_init: c.n_init,
        }
    }

    pub fn balance_seed(&self) -> u64 {
        seed::derive(self.seed, &[BALANCE_STREAM])
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        PartitionSpec {
            strategy: p.strategy.clone(),
            n_clients: p.n_clients,
            seed: p.seed.unwrap_or_else(|| seed::derive(self.seed, &[PARTITION_STREAM])),
            allow_empty_clients: p.allow_empty_clients,
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            total_clients: self.partition.n_clients,
            clients_per_round: self.federation.clients_per_round,
            total_rounds: self.federation.total_rounds,
            eval_every: self.federation.eval_every,
            master_seed: seed::derive(self.seed, &[ROUNDS_STREAM]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::tempdir;

    const BASE: &str = r#"{
        "seed": 7,
        "dataset": {"source": "generator", "n_true_clusters": 3, "samples_per_cluster": 20, "separation": 0.1},
        "clustering": {"n_clusters": 3},
        "partition": {"strategy": {"kind": "shard", "p": 1}, "n_clients": 6},
        "federation": {"clients_per_round": 2, "total_rounds": 3},
        "aggregator": {"kind": "fedavg"}
    }"#;

    fn base() -> serde_json::Value {
        serde_json::from_str(BASE).unwrap()
    }

    fn field_of(v: serde_json::Value) -> String {
        match ExperimentConfig::from_json(&v.to_string()).unwrap_err() {
            Error::Config { field, .. } => field,
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(BASE).unwrap();
        assert!(cfg.balance);
        assert_eq!(cfg.local, LocalTrainConfig::default());
        assert_eq!(cfg.federation.eval_every, 1);
        assert_eq!(cfg.kmeans_params().max_iters, 300);
        assert_eq!(cfg.dims(), PSG_DIMS);
        assert_eq!(cfg.round_config().total_clients, 6);
    }

    #[test]
    fn field_paths_in_errors() {
        let mut v = base();
        v["federation"]["clients_per_round"] = 7.into();
        assert_eq!(field_of(v), "federation.clients_per_round");
        let mut v = base();
        v["partition"]["strategy"]["p"] = 4.into();
        assert_eq!(field_of(v), "partition.strategy.p");
        let mut v = base();
        v["local"] = serde_json::json!({"momentum": 1.5});
        assert_eq!(field_of(v), "local.momentum");
        let mut v = base();
        v["aggregator"] = serde_json::json!({"kind": "fedavgm", "beta": 2.0});
        assert_eq!(field_of(v), "aggregator");
    }

    #[test]
    fn malformed_and_unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json("{").is_err());
        let mut v = base();
        v["typo"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn stage_seeds_follow_master() {
        let a = ExperimentConfig::from_json(BASE).unwrap();
        let mut b = a.clone();
        b.seed = 8;
        assert_ne!(a.kmeans_params().seed, b.kmeans_params().seed);
        assert_ne!(a.partition_spec().seed, b.partition_spec().seed);
        assert_ne!(a.kmeans_params().seed, a.partition_spec().seed);
        let mut v = base();
        v["clustering"]["seed"] = 99.into();
        assert_eq!(ExperimentConfig::from_json(&v.to_string()).unwrap().kmeans_params().seed, 99);
    }

    #[test]
    fn load_resolves_and_checks_files() {
        let dir = tempdir().unwrap();
        let mut v = base();
        v["dataset"] = serde_json::json!({"source": "files", "annotations": "train.jsonl"});
        let path = dir.path().join("cfg.json");
        fs::write(&path, v.to_string()).unwrap();
        match ExperimentConfig::load(&path).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "dataset.annotations"),
            e => panic!("{e}"),
        }
        fs::write(dir.path().join("train.jsonl"), "").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        match cfg.dataset {
            DatasetSource::Files { annotations, .. } => assert_eq!(annotations, dir.path().join("train.jsonl")),
            _ => unreachable!(),
        }
    }
}
