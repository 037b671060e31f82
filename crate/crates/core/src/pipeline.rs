//! Stage drivers shared by the command-line tool and the test suites.

use rayon::prelude::*;
use serde::Serialize;
use tracing::info;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::datagen::make_testbed;
use crate::flcore::{build_client_data, EvalSet, Simulation, SimulationOutcome};
use crate::metrics::adjusted_rand_index;
use crate::partition::{self, PartitionPlan};
use crate::semantics::{
    balance_clusters, build_attribute_tensor, build_category_tensor, kmeans_fit, AnnotationRecord, CategoryMap,
    CategoryTensor, ClusterAssignment, ClusterModel,
};
use crate::{io, Error, Result};

/// Training and test records in super-class space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: [usize; 3],
    pub train: Vec<AnnotationRecord>,
    pub test: Vec<AnnotationRecord>,
    /// Known cluster labels, for generated data.
    pub truth: Option<ClusterAssignment>,
}

impl Dataset {
    pub fn is_attribute_mode(&self) -> bool {
        self.train.first().is_some_and(AnnotationRecord::is_attribute_mode)
    }
}

fn load_mapped(path: &std::path::Path, map: Option<&CategoryMap>, dims: [usize; 3]) -> Result<Vec<AnnotationRecord>> {
    match map {
        None => io::load_annotations(path, Some(dims)),
        Some(map) => io::load_annotations(path, None)?
            .iter()
            .map(|r| {
                if r.is_attribute_mode() {
                    Ok(r.clone())
                } else {
                    Ok(map.map_record(r)?)
                }
            })
            .collect(),
    }
}

/// Generates or loads the records named by the config.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Generator {
            holdout_fraction, ..
        } => {
            let spec = cfg.generator_spec().expect("generator source");
            let bed = make_testbed(&spec, *holdout_fraction, cfg.split_seed())?;
            Ok(Dataset {
                dims: spec.dims,
                train: bed.train,
                test: bed.test,
                truth: Some(bed.truth),
            })
        }
        DatasetSource::Files {
            annotations,
            test_annotations,
            category_map,
            dims,
        } => {
            let map = category_map.as_deref().map(io::load_category_map).transpose()?;
            let dims = map.as_ref().map_or(*dims, CategoryMap::dims);
            let train = load_mapped(annotations, map.as_ref(), dims)?;
            if train.is_empty() {
                return Err(Error::config("dataset.annotations", "no records"));
            }
            let attribute_mode = train[0].is_attribute_mode();
            if train.iter().any(|r| r.is_attribute_mode() != attribute_mode) {
                return Err(Error::config(
                    "dataset.annotations",
                    "mixes relation and attribute records",
                ));
            }
            let test = match test_annotations {
                Some(p) => load_mapped(p, map.as_ref(), dims)?,
                None => Vec::new(),
            };
            Ok(Dataset {
                dims,
                train,
                test,
                truth: None,
            })
        }
    }
}

/// Category tensors of the training records, in record order.
pub fn tensors(data: &Dataset) -> Result<Vec<CategoryTensor>> {
    if data.is_attribute_mode() {
        let count = data.train[0].attributes.as_ref().map_or(0, Vec::len);
        Ok(data
            .train
            .par_iter()
            .map(|r| build_attribute_tensor(r, count))
            .collect::<std::result::Result<_, _>>()?)
    } else {
        let map = CategoryMap::identity(data.dims)?;
        Ok(data
            .train
            .par_iter()
            .map(|r| build_category_tensor(r, &map))
            .collect::<std::result::Result<_, _>>()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub model: ClusterModel,
    pub assignment: ClusterAssignment,
}

/// Fit diagnostics written next to the assignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub n_clusters: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    pub sizes: Vec<usize>,
    /// Agreement with known labels, when the data has them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

impl Clustering {
    pub fn summary(&self, truth: Option<&ClusterAssignment>) -> Result<ClusterSummary> {
        let ari = match truth {
            None => None,
            Some(truth) => {
                let (mut found, mut expected) = (Vec::new(), Vec::new());
                for (id, c) in self.assignment.iter() {
                    if let Some(t) = truth.get(id) {
                        found.push(c);
                        expected.push(t);
                    }
                }
                Some(adjusted_rand_index(&expected, &found)?)
            }
        };
        Ok(ClusterSummary {
            n_clusters: self.assignment.n_clusters(),
            inertia: self.model.inertia,
            iterations: self.model.iterations,
            converged: self.model.converged,
            sizes: self.assignment.sizes(),
            ari,
        })
    }
}

/// K-means over the training records' category tensors.
pub fn cluster(cfg: &ExperimentConfig, data: &Dataset) -> Result<Clustering> {
    let tensors = tensors(data)?;
    let (model, labels) = kmeans_fit(&tensors, &cfg.kmeans_params())?;
    info!(
        inertia = model.inertia,
        iterations = model.iterations,
        converged = model.converged,
        "clustering done"
    );
    let assignment = ClusterAssignment::from_labels(
        model.n_clusters(),
        data.train.iter().map(|r| r.sample_id.clone()),
        &labels,
    )?;
    Ok(Clustering { model, assignment })
}

/// Optionally balances the clusters, then partitions them across clients.
/// Returns the assignment the plan was built from.
pub fn partition(cfg: &ExperimentConfig, assignment: &ClusterAssignment) -> Result<(ClusterAssignment, PartitionPlan)> {
    let used = if cfg.balance {
        balance_clusters(assignment, cfg.balance_seed())?
    } else {
        assignment.clone()
    };
    let plan = partition::partition(&used, &cfg.partition_spec())?;
    info!(clients = plan.n_clients(), samples = plan.total_samples(), "partition done");
    Ok((used, plan))
}

/// Runs the federated rounds on a plan.
pub fn simulate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    plan: &PartitionPlan,
    record_wall_time: bool,
) -> Result<SimulationOutcome> {
    if data.is_attribute_mode() {
        return Err(Error::Pipeline(
            "simulation needs relation annotations, the dataset has attributes".into(),
        ));
    }
    if data.test.is_empty() {
        return Err(Error::config(
            "dataset.test_annotations",
            "simulation needs held-out scenes",
        ));
    }
    if plan.n_clients() != cfg.partition.n_clients {
        return Err(Error::Pipeline(format!(
            "plan has {} clients, config declares {}",
            plan.n_clients(),
            cfg.partition.n_clients
        )));
    }
    let clients = build_client_data(plan, &data.train, data.dims)?;
    let eval = EvalSet::new(&data.test, data.dims)?;
    let sim = Simulation {
        clients: &clients,
        eval: &eval,
        rounds: cfg.round_config(),
        aggregator: cfg.aggregator,
        local: cfg.local,
        strict: cfg.strict,
        record_wall_time,
    };
    Ok(sim.run()?)
}
