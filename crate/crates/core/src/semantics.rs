//! Category tensors and semantic cluster discovery.
//!
//! Each sample's label set is flattened into a tensor with one axis per label
//! vocabulary (subject, object and predicate super-classes for relation data,
//! or a single attribute axis). K-means over those tensors yields the semantic
//! clusters that drive partitioning, and [`balance_clusters`] downsamples every
//! cluster to the size of the smallest one.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Super-class dimensions of the PSG proof of concept: 13 object/subject
/// categories and 7 predicate categories.
pub const PSG_DIMS: [usize; 3] = [13, 13, 7];

/// Number of binary attributes per CelebA sample.
pub const CELEBA_ATTRIBUTES: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticsError {
    #[error("unmapped {vocabulary} label {label}")]
    UnmappedLabel { vocabulary: &'static str, label: usize },
    #[error("invalid record `{sample_id}`: {reason}")]
    InvalidRecord { sample_id: String, reason: String },
    #[error("invalid attribute value {value} in record `{sample_id}` (expected -1 or +1)")]
    InvalidAttribute { sample_id: String, value: i8 },
    #[error("record `{sample_id}`: {axis} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        sample_id: String,
        axis: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot form {clusters} clusters from {samples} samples")]
    TooFewSamples { clusters: usize, samples: usize },
    #[error("cluster {0} is empty, cannot balance")]
    EmptyCluster(usize),
    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),
    #[error("cluster index {index} out of range for {n_clusters} clusters")]
    ClusterOutOfRange { index: usize, n_clusters: usize },
    #[error("invalid category map: {0}")]
    InvalidCategoryMap(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

type Result<T> = std::result::Result<T, SemanticsError>;

/// A (subject, object, predicate) relation. Serialized as `[s, o, p]`.
///
/// The derived ordering is lexicographic over the three indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Triplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

impl Triplet {
    pub const fn new(subject: usize, object: usize, predicate: usize) -> Self {
        Self {
            subject,
            object,
            predicate,
        }
    }

    /// Returns the first axis name whose index is out of `dims`, with its bound.
    fn out_of_range(&self, dims: [usize; 3]) -> Option<(&'static str, usize, usize)> {
        [
            ("subject", self.subject, dims[0]),
            ("object", self.object, dims[1]),
            ("predicate", self.predicate, dims[2]),
        ]
        .into_iter()
        .find(|&(_, i, bound)| i >= bound)
    }
}

impl From<[usize; 3]> for Triplet {
    fn from([s, o, p]: [usize; 3]) -> Self {
        Self::new(s, o, p)
    }
}

impl From<Triplet> for [usize; 3] {
    fn from(t: Triplet) -> Self {
        [t.subject, t.object, t.predicate]
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.object, self.predicate)
    }
}

/// One sample's multi-semantic label set.
///
/// Relation-mode records carry `relations`; attribute-mode (CelebA) records
/// carry `attributes` with values in {-1, +1}. Exactly one of the two is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<Triplet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<i8>>,
}

impl AnnotationRecord {
    pub fn with_relations(sample_id: impl Into<String>, relations: Vec<Triplet>) -> Self {
        Self {
            sample_id: sample_id.into(),
            relations,
            attributes: None,
        }
    }

    pub fn with_attributes(sample_id: impl Into<String>, attributes: Vec<i8>) -> Self {
        Self {
            sample_id: sample_id.into(),
            relations: Vec::new(),
            attributes: Some(attributes),
        }
    }

    pub fn is_attribute_mode(&self) -> bool {
        self.attributes.is_some()
    }

    /// Checks the record's structural invariants, and relation indices against
    /// `bounds` when given.
    pub fn validate(&self, bounds: Option<[usize; 3]>) -> Result<()> {
        let invalid = |reason: &str| SemanticsError::InvalidRecord {
            sample_id: self.sample_id.clone(),
            reason: reason.to_string(),
        };
        if self.sample_id.is_empty() {
            return Err(invalid("empty sample_id"));
        }
        match (&self.attributes, self.relations.is_empty()) {
            (Some(_), false) => return Err(invalid("both relations and attributes are set")),
            (Some(attrs), true) => {
                if attrs.is_empty() {
                    return Err(invalid("empty attribute list"));
                }
                if let Some(&value) = attrs.iter().find(|&&v| v != 1 && v != -1) {
                    return Err(SemanticsError::InvalidAttribute {
                        sample_id: self.sample_id.clone(),
                        value,
                    });
                }
            }
            (None, true) => return Err(invalid("no relations")),
            (None, false) => {
                if let Some(dims) = bounds {
                    for t in &self.relations {
                        if let Some((axis, index, bound)) = t.out_of_range(dims) {
                            return Err(SemanticsError::IndexOutOfRange {
                                sample_id: self.sample_id.clone(),
                                axis,
                                index,
                                bound,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawCategoryMap {
    object_map: BTreeMap<usize, usize>,
    predicate_map: BTreeMap<usize, usize>,
    dims: Vec<usize>,
}

/// Fine-grained label to super-class mapping for the object/subject and
/// predicate vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCategoryMap", into = "RawCategoryMap")]
pub struct CategoryMap {
    object_map: BTreeMap<usize, usize>,
    predicate_map: BTreeMap<usize, usize>,
    dims: [usize; 3],
}

impl CategoryMap {
    /// Builds a validated map. `dims` is `[objects, objects, predicates]`.
    pub fn new(
        object_map: BTreeMap<usize, usize>,
        predicate_map: BTreeMap<usize, usize>,
        dims: [usize; 3],
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(SemanticsError::InvalidCategoryMap(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if dims[0] != dims[1] {
            return Err(SemanticsError::InvalidCategoryMap(format!(
                "subject and object axes share a vocabulary, got dims {dims:?}"
            )));
        }
        check_dense("object_map", &object_map, dims[0])?;
        check_dense("predicate_map", &predicate_map, dims[2])?;
        Ok(Self {
            object_map,
            predicate_map,
            dims,
        })
    }

    /// The map in which every fine label is its own super-class.
    pub fn identity(dims: [usize; 3]) -> Result<Self> {
        let ident = |n: usize| (0..n).map(|i| (i, i)).collect::<BTreeMap<_, _>>();
        Self::new(ident(dims[0]), ident(dims[2]), dims)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn map_triplet(&self, t: Triplet) -> Result<Triplet> {
        let obj = |label: usize| {
            self.object_map
                .get(&label)
                .copied()
                .ok_or(SemanticsError::UnmappedLabel {
                    vocabulary: "object",
                    label,
                })
        };
        let predicate =
            self.predicate_map
                .get(&t.predicate)
                .copied()
                .ok_or(SemanticsError::UnmappedLabel {
                    vocabulary: "predicate",
                    label: t.predicate,
                })?;
        Ok(Triplet::new(obj(t.subject)?, obj(t.object)?, predicate))
    }

    /// Maps every relation of a relation-mode record to super-classes.
    pub fn map_record(&self, record: &AnnotationRecord) -> Result<AnnotationRecord> {
        let relations = record
            .relations
            .iter()
            .map(|&t| self.map_triplet(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(AnnotationRecord {
            sample_id: record.sample_id.clone(),
            relations,
            attributes: record.attributes.clone(),
        })
    }
}

fn check_dense(name: &str, map: &BTreeMap<usize, usize>, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (&fine, &sup) in map {
        if sup >= n {
            return Err(SemanticsError::InvalidCategoryMap(format!(
                "{name}: fine label {fine} maps to super-class {sup}, outside [0, {n})"
            )));
        }
        seen[sup] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(SemanticsError::InvalidCategoryMap(format!(
            "{name}: super-class indices are not dense, {missing} is never used"
        )));
    }
    Ok(())
}

impl TryFrom<RawCategoryMap> for CategoryMap {
    type Error = SemanticsError;

    fn try_from(raw: RawCategoryMap) -> Result<Self> {
        let dims: [usize; 3] = raw.dims.as_slice().try_into().map_err(|_| {
            SemanticsError::InvalidCategoryMap(format!(
                "dims must have three entries, got {:?}",
                raw.dims
            ))
        })?;
        Self::new(raw.object_map, raw.predicate_map, dims)
    }
}

impl From<CategoryMap> for RawCategoryMap {
    fn from(m: CategoryMap) -> Self {
        Self {
            object_map: m.object_map,
            predicate_map: m.predicate_map,
            dims: m.dims.to_vec(),
        }
    }
}

/// A per-sample tensor stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl CategoryTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || expected != values.len() {
            return Err(SemanticsError::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SemanticsError::InvalidParameter(
                "tensor values must be finite".into(),
            ));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            values: vec![0.0; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.dims.len() {
            return None;
        }
        index
            .iter()
            .zip(&self.dims)
            .try_fold(0, |acc, (&i, &d)| (i < d).then_some(acc * d + i))
    }

    /// Value at a multi-index, `None` if the index is out of bounds.
    pub fn get(&self, index: &[usize]) -> Option<f64> {
        self.offset(index).map(|o| self.values[o])
    }

    /// Copy scaled to unit L1 norm; an all-zero tensor is returned as is.
    pub fn l1_normalized(&self) -> Self {
        let norm: f64 = self.values.iter().map(|v| v.abs()).sum();
        let mut out = self.clone();
        if norm > 0.0 {
            out.values.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

/// Counts each relation's super-class triplet into a `dims[0] x dims[1] x dims[2]` tensor.
pub fn build_category_tensor(record: &AnnotationRecord, map: &CategoryMap) -> Result<CategoryTensor> {
    if record.relations.is_empty() {
        return Err(SemanticsError::InvalidRecord {
            sample_id: record.sample_id.clone(),
            reason: "no relations".into(),
        });
    }
    let dims = map.dims();
    let mut tensor = CategoryTensor::zeros(dims.to_vec());
    for &t in &record.relations {
        let s = map.map_triplet(t)?;
        let cell = (s.subject * dims[1] + s.object) * dims[2] + s.predicate;
        tensor.values[cell] += 1.0;
    }
    Ok(tensor)
}

/// Copies a ±1 attribute vector verbatim into a one-axis tensor.
pub fn build_attribute_tensor(
    record: &AnnotationRecord,
    attribute_count: usize,
) -> Result<CategoryTensor> {
    let attrs = record
        .attributes
        .as_ref()
        .ok_or_else(|| SemanticsError::InvalidRecord {
            sample_id: record.sample_id.clone(),
            reason: "not an attribute record".into(),
        })?;
    if attrs.len() != attribute_count {
        return Err(SemanticsError::DimensionMismatch {
            expected: attribute_count,
            found: attrs.len(),
        });
    }
    if let Some(&value) = attrs.iter().find(|&&v| v != 1 && v != -1) {
        return Err(SemanticsError::InvalidAttribute {
            sample_id: record.sample_id.clone(),
            value,
        });
    }
    CategoryTensor::new(
        vec![attribute_count],
        attrs.iter().map(|&v| f64::from(v)).collect(),
    )
}

/// Mapping from sample id to cluster index in `[0, n_clusters)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    n_clusters: usize,
    labels: BTreeMap<String, usize>,
}

impl ClusterAssignment {
    pub fn new(n_clusters: usize, labels: BTreeMap<String, usize>) -> Result<Self> {
        if let Some(&index) = labels.values().find(|&&c| c >= n_clusters) {
            return Err(SemanticsError::ClusterOutOfRange { index, n_clusters });
        }
        Ok(Self { n_clusters, labels })
    }

    /// Pairs ids with positional labels, rejecting duplicate ids.
    pub fn from_labels<I, S>(n_clusters: usize, ids: I, labels: &[usize]) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        let mut count = 0;
        for (id, &label) in ids.into_iter().zip(labels) {
            let id = id.into();
            if map.contains_key(&id) {
                return Err(SemanticsError::DuplicateSampleId(id));
            }
            map.insert(id, label);
            count += 1;
        }
        if count != labels.len() {
            return Err(SemanticsError::DimensionMismatch {
                expected: labels.len(),
                found: count,
            });
        }
        Self::new(n_clusters, map)
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<usize> {
        self.labels.get(sample_id).copied()
    }

    /// `(sample_id, cluster)` pairs in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.labels.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.labels.keys().cloned().collect()
    }

    /// Member ids of every cluster, each list in ascending id order.
    pub fn members(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (id, &c) in &self.labels {
            out[c].push(id.clone());
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &c in self.labels.values() {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Downsamples every cluster, uniformly without replacement, to the size of
/// the smallest cluster.
pub fn balance_clusters(assignment: &ClusterAssignment, seed: u64) -> Result<ClusterAssignment> {
    let members = assignment.members();
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(SemanticsError::EmptyCluster(k));
    }
    let m = members.iter().map(Vec::len).min().unwrap_or(0);
    let mut labels = BTreeMap::new();
    for (k, ids) in members.iter().enumerate() {
        let mut rng = seed::rng(seed, &[k as u64]);
        for i in index::sample(&mut rng, ids.len(), m) {
            labels.insert(ids[i].clone(), k);
        }
    }
    ClusterAssignment::new(assignment.n_clusters, labels)
}

/// K-means settings. Defaults: 300 iterations, tolerance 1e-6 on the largest
/// centroid displacement, ten k-means++ restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub n_clusters: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-inertia run is kept.
    pub n_init: usize,
}

impl KMeansParams {
    pub fn new(n_clusters: usize, seed: u64) -> Self {
        Self {
            n_clusters,
            seed,
            max_iters: 300,
            tol: 1e-6,
            n_init: 10,
        }
    }
}

/// Fitted centroids and fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Final within-cluster sum of squared distances.
    pub inertia: f64,
    /// Lloyd iterations performed.
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every assignment step, ending with the final inertia.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Index of the nearest centroid to `tensor`, lowest index on exact ties.
pub fn kmeans_assign(model: &ClusterModel, tensor: &CategoryTensor) -> Result<usize> {
    if tensor.len() != model.dim() {
        return Err(SemanticsError::DimensionMismatch {
            expected: model.dim(),
            found: tensor.len(),
        });
    }
    Ok(nearest(&model.centroids, tensor.values()).0)
}

/// Lloyd's algorithm with k-means++ seeding on flattened tensors.
///
/// Returns the model and the cluster index of every input tensor, in input
/// order. Deterministic for a fixed seed regardless of thread count.
pub fn kmeans_fit(
    tensors: &[CategoryTensor],
    params: &KMeansParams,
) -> Result<(ClusterModel, Vec<usize>)> {
    let n = params.n_clusters;
    if n == 0 {
        return Err(SemanticsError::InvalidParameter("n_clusters must be >= 1".into()));
    }
    if n > tensors.len() {
        return Err(SemanticsError::TooFewSamples {
            clusters: n,
            samples: tensors.len(),
        });
    }
    if !(params.tol >= 0.0) {
        return Err(SemanticsError::InvalidParameter("tol must be >= 0".into()));
    }
    let dims = tensors[0].dims();
    if let Some(t) = tensors.iter().find(|t| t.dims() != dims) {
        return Err(SemanticsError::DimensionMismatch {
            expected: tensors[0].len(),
            found: t.len(),
        });
    }
    let points: Vec<&[f64]> = tensors.iter().map(CategoryTensor::values).collect();

    let mut best: Option<(ClusterModel, Vec<usize>)> = None;
    for init in 0..params.n_init.max(1) {
        let mut rng = seed::rng(params.seed, &[init as u64]);
        let centroids = kmeans_plus_plus(&points, n, &mut rng);
        let run = lloyd(&points, centroids, params.max_iters, params.tol);
        if best.as_ref().is_none_or(|(b, _)| run.0.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one initialization"))
}

fn kmeans_plus_plus(points: &[&[f64]], n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, points[chosen[0]]))
        .collect();
    while chosen.len() < n {
        let total: f64 = min_d.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // All remaining points coincide with a centroid.
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_iter()
        .map(|p| nearest(centroids, p))
        .collect::<Vec<_>>()
        .into_iter()
        .unzip()
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Returns whether anything changed.
fn repair_empty(
    points: &[&[f64]],
    labels: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [Vec<f64>],
) -> bool {
    let mut counts = vec![0usize; centroids.len()];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut changed = false;
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut far: Option<(usize, f64)> = None;
        for (i, (&l, &d)) in labels.iter().zip(dists.iter()).enumerate() {
            if counts[l] > 1 && d > 0.0 && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        counts[labels[i]] -= 1;
        counts[empty] += 1;
        labels[i] = empty;
        dists[i] = 0.0;
        centroids[empty] = points[i].to_vec();
        changed = true;
    }
    changed
}

fn lloyd(
    points: &[&[f64]],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
    tol: f64,
) -> (ClusterModel, Vec<usize>) {
    let n = centroids.len();
    let dim = centroids[0].len();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iters {
        let (mut labels, mut dists) = assign_all(points, &centroids);
        repair_empty(points, &mut labels, &mut dists, &mut centroids);
        trace.push(dists.iter().sum::<f64>());

        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0usize; n];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut shift = 0.0f64;
        for ((c, s), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count == 0 {
                continue;
            }
            let mean: Vec<f64> = s.into_iter().map(|v| v / count as f64).collect();
            shift = shift.max(sq_dist(c, &mean).sqrt());
            *c = mean;
        }
        iterations += 1;
        if shift < tol {
            converged = true;
            break;
        }
    }

    let (mut labels, mut dists) = assign_all(points, &centroids);
    for _ in 0..n {
        if !repair_empty(points, &mut labels, &mut dists, &mut centroids) {
            break;
        }
        (labels, dists) = assign_all(points, &centroids);
    }
    let inertia = dists.iter().sum::<f64>();
    trace.push(inertia);
    (
        ClusterModel {
            centroids,
            inertia,
            iterations,
            converged,
            inertia_trace: trace,
        },
        labels,
    )
}
