//! Client partitioning with controllable semantic heterogeneity.
//!
//! Three strategies distribute cluster-labeled samples to `U` clients:
//! a uniform random split, a shard split where each client draws from `p`
//! clusters, and a Dirichlet split where each client's cluster mix follows
//! `Dir(alpha)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::semantics::ClusterAssignment;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("invalid partition config: {0}")]
    Config(String),
    #[error("{samples} samples cannot be split across {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },
    #[error("cluster {0} is selected by no client")]
    UnselectedCluster(usize),
    #[error("client {0} received no samples")]
    EmptyClient(usize),
    #[error("sample `{0}` is missing from the cluster assignment")]
    UnknownSample(String),
    #[error("sample `{0}` is assigned to more than one client")]
    DuplicateSample(String),
}

type Result<T> = std::result::Result<T, PartitionError>;

/// How samples are distributed to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionStrategy {
    Random,
    /// Each client draws from `p` clusters. With `size_weighted`, the number
    /// of clients selecting a cluster is proportional to the cluster's size
    /// instead of equal across clusters.
    Shard {
        p: usize,
        #[serde(default)]
        size_weighted: bool,
    },
    /// Per-client cluster proportions drawn from `Dir(alpha)`. A single value
    /// is broadcast to a symmetric concentration vector.
    Dirichlet { alpha: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub n_clients: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_empty_clients: bool,
}

impl PartitionSpec {
    pub fn new(strategy: PartitionStrategy, n_clients: usize, seed: u64) -> Self {
        Self {
            strategy,
            n_clients,
            seed,
            allow_empty_clients: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    spec: PartitionSpec,
    clients: BTreeMap<usize, Vec<String>>,
}

/// Client id to sample ids, with the spec that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanFile", into = "PlanFile")]
pub struct PartitionPlan {
    spec: PartitionSpec,
    clients: Vec<Vec<String>>,
}

impl PartitionPlan {
    /// Builds a plan, checking that client lists are pairwise disjoint and,
    /// unless the spec allows it, non-empty.
    pub fn new(spec: PartitionSpec, clients: Vec<Vec<String>>) -> Result<Self> {
        if clients.len() != spec.n_clients {
            return Err(PartitionError::Config(format!(
                "plan has {} clients, spec declares {}",
                clients.len(),
                spec.n_clients
            )));
        }
        let mut seen = BTreeSet::new();
        for (u, ids) in clients.iter().enumerate() {
            if ids.is_empty() && !spec.allow_empty_clients {
                return Err(PartitionError::EmptyClient(u));
            }
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(PartitionError::DuplicateSample(id.clone()));
                }
            }
        }
        Ok(Self { spec, clients })
    }

    pub fn spec(&self) -> &PartitionSpec {
        &self.spec
    }

    pub fn clients(&self) -> &[Vec<String>] {
        &self.clients
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> Option<&[String]> {
        self.clients.get(id).map(Vec::as_slice)
    }

    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }
}

impl TryFrom<PlanFile> for PartitionPlan {
    type Error = PartitionError;

    fn try_from(f: PlanFile) -> Result<Self> {
        let n = f.spec.n_clients;
        if f.clients.keys().any(|&k| k >= n) || f.clients.len() != n {
            return Err(PartitionError::Config(format!(
                "client ids must be exactly 0..{n}"
            )));
        }
        Self::new(f.spec, f.clients.into_values().collect())
    }
}

impl From<PartitionPlan> for PlanFile {
    fn from(p: PartitionPlan) -> Self {
        Self {
            spec: p.spec,
            clients: p.clients.into_iter().enumerate().collect(),
        }
    }
}

/// Dispatches on the spec's strategy.
pub fn partition(assignment: &ClusterAssignment, spec: &PartitionSpec) -> Result<PartitionPlan> {
    let clients = match &spec.strategy {
        PartitionStrategy::Random => {
            random_split(&assignment.sample_ids(), spec.n_clients, spec.seed)?
        }
        PartitionStrategy::Shard { p, size_weighted } => {
            shard_split(assignment, spec.n_clients, *p, *size_weighted, spec.seed)?
        }
        PartitionStrategy::Dirichlet { alpha } => {
            dirichlet_split(assignment, spec.n_clients, alpha, spec.seed)?
        }
    };
    PartitionPlan::new(spec.clone(), clients)
}

/// Uniform shuffle followed by a contiguous split; sizes differ by at most one.
pub fn partition_random(sample_ids: &[String], n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    let clients = random_split(sample_ids, n_clients, seed)?;
    PartitionPlan::new(
        PartitionSpec::new(PartitionStrategy::Random, n_clients, seed),
        clients,
    )
}

/// Shard split with an equal number of selecting clients per cluster.
pub fn partition_shard(
    assignment: &ClusterAssignment,
    n_clients: usize,
    p: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    partition(
        assignment,
        &PartitionSpec::new(
            PartitionStrategy::Shard {
                p,
                size_weighted: false,
            },
            n_clients,
            seed,
        ),
    )
}

pub fn partition_dirichlet(
    assignment: &ClusterAssignment,
    n_clients: usize,
    alpha: &[f64],
    seed: u64,
) -> Result<PartitionPlan> {
    partition(
        assignment,
        &PartitionSpec::new(
            PartitionStrategy::Dirichlet {
                alpha: alpha.to_vec(),
            },
            n_clients,
            seed,
        ),
    )
}

fn check_clients(n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(PartitionError::Config("n_clients must be >= 1".into()));
    }
    Ok(())
}

/// Sizes `total / parts` with the remainder spread over the first parts.
fn even_sizes(total: usize, parts: usize) -> impl Iterator<Item = usize> {
    let (base, rem) = (total / parts, total % parts);
    (0..parts).map(move |i| base + usize::from(i < rem))
}

fn random_split(sample_ids: &[String], n_clients: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    check_clients(n_clients)?;
    if sample_ids.len() < n_clients {
        return Err(PartitionError::TooFewSamples {
            samples: sample_ids.len(),
            clients: n_clients,
        });
    }
    let mut ids = sample_ids.to_vec();
    ids.shuffle(&mut seed::rng(seed, &[0]));
    let mut rest = ids.as_slice();
    Ok(even_sizes(rest.len(), n_clients)
        .map(|size| {
            let (head, tail) = rest.split_at(size);
            rest = tail;
            head.to_vec()
        })
        .collect())
}

/// Largest-remainder apportionment of `total` units by `weights`.
/// Ties in the fractional part go to the lowest index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Number of clients selecting each cluster, summing to `n_clients * p`,
/// each in `[0, n_clients]`.
fn selector_counts(
    sizes: &[usize],
    n_clients: usize,
    p: usize,
    size_weighted: bool,
    cluster_order: &[usize],
) -> Vec<usize> {
    let n = sizes.len();
    let slots = n_clients * p;
    if !size_weighted {
        let mut counts = vec![0; n];
        for (&k, c) in cluster_order.iter().zip(even_sizes(slots, n)) {
            counts[k] = c;
        }
        return counts;
    }
    // Proportional to size, capped at `n_clients`, at least one per cluster.
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let mut counts = largest_remainder(slots, &weights);
    let mut overflow = 0;
    for c in counts.iter_mut() {
        if *c > n_clients {
            overflow += *c - n_clients;
            *c = n_clients;
        }
    }
    let mut by_size: Vec<usize> = (0..n).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    while overflow > 0 {
        let k = *by_size
            .iter()
            .find(|&&k| counts[k] < n_clients)
            .expect("capacity n * U >= U * p");
        counts[k] += 1;
        overflow -= 1;
    }
    if slots >= n {
        while let Some(k) = counts.iter().position(|&c| c == 0) {
            let donor = (0..n)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("at least one cluster");
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    counts
}

fn shard_split(
    assignment: &ClusterAssignment,
    n_clients: usize,
    p: usize,
    size_weighted: bool,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    check_clients(n_clients)?;
    let n = assignment.n_clusters();
    if p == 0 || p > n {
        return Err(PartitionError::Config(format!(
            "shard p must be in [1, {n}], got {p}"
        )));
    }
    let members = assignment.members();
    let sizes: Vec<usize> = members.iter().map(Vec::len).collect();

    let mut cluster_order: Vec<usize> = (0..n).collect();
    cluster_order.shuffle(&mut seed::rng(seed, &[1]));
    let counts = selector_counts(&sizes, n_clients, p, size_weighted, &cluster_order);
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(PartitionError::UnselectedCluster(k));
    }

    // Deal the cluster slots column-wise: every cluster occupies a contiguous
    // run of at most `n_clients` slots, so a client never gets a cluster twice.
    let slots: Vec<usize> = cluster_order
        .iter()
        .flat_map(|&k| std::iter::repeat_n(k, counts[k]))
        .collect();
    let mut client_order: Vec<usize> = (0..n_clients).collect();
    client_order.shuffle(&mut seed::rng(seed, &[2]));
    let mut selectors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (pos, &client) in client_order.iter().enumerate() {
        for j in 0..p {
            selectors[slots[j * n_clients + pos]].push(client);
        }
    }

    let mut clients: Vec<Vec<String>> = vec![Vec::new(); n_clients];
    for (k, (ids, sel)) in members.iter().zip(selectors.iter_mut()).enumerate() {
        sel.sort_unstable();
        let mut pool = ids.clone();
        pool.shuffle(&mut seed::rng(seed, &[3, k as u64]));
        let mut rest = pool.as_slice();
        for (&client, size) in sel.iter().zip(even_sizes(pool.len(), sel.len())) {
            let (head, tail) = rest.split_at(size);
            clients[client].extend_from_slice(head);
            rest = tail;
        }
    }
    Ok(clients)
}

fn resolve_alpha(alpha: &[f64], n: usize) -> Result<Vec<f64>> {
    let alpha = match alpha.len() {
        1 => vec![alpha[0]; n],
        len if len == n => alpha.to_vec(),
        len => {
            return Err(PartitionError::Config(format!(
                "alpha has {len} entries for {n} clusters"
            )))
        }
    };
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(PartitionError::Config(format!(
            "every alpha must be positive and finite, got {a}"
        )));
    }
    Ok(alpha)
}

/// One draw from `Dir(alpha)` via normalized independent Gamma variates.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("alpha validated").sample(rng))
        .collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|d| *d /= sum);
    } else {
        // Every Gamma variate underflowed: fall back to the alpha -> 0 limit.
        let hot = rng.random_range(0..draws.len());
        draws = (0..draws.len()).map(|i| f64::from(u8::from(i == hot))).collect();
    }
    draws
}

/// Cluster proportions drawn for every client of a Dirichlet partition,
/// exactly as [`partition_dirichlet`] draws them.
pub fn dirichlet_proportions(
    alpha: &[f64],
    n_clusters: usize,
    n_clients: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let alpha = resolve_alpha(alpha, n_clusters)?;
    Ok((0..n_clients)
        .map(|u| sample_dirichlet(&alpha, &mut seed::rng(seed, &[4, u as u64])))
        .collect())
}

fn dirichlet_split(
    assignment: &ClusterAssignment,
    n_clients: usize,
    alpha: &[f64],
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    check_clients(n_clients)?;
    let n = assignment.n_clusters();
    let proportions = dirichlet_proportions(alpha, n, n_clients, seed)?;
    let total = assignment.len();
    if total < n_clients {
        return Err(PartitionError::TooFewSamples {
            samples: total,
            clients: n_clients,
        });
    }

    let mut pools = assignment.members();
    for (k, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut seed::rng(seed, &[3, k as u64]));
    }
    let mut cursor = vec![0usize; n];

    let mut clients = Vec::with_capacity(n_clients);
    for (p, quota) in proportions.iter().zip(even_sizes(total, n_clients)) {
        let mut ids = Vec::with_capacity(quota);
        let mut need = quota;
        while need > 0 {
            let avail: Vec<usize> = (0..n).map(|k| pools[k].len() - cursor[k]).collect();
            let active: Vec<usize> = (0..n).filter(|&k| avail[k] > 0).collect();
            if active.is_empty() {
                break;
            }
            // Renormalize over clusters that still have samples.
            let mut weights: Vec<f64> = active.iter().map(|&k| p[k]).collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                weights = active.iter().map(|&k| avail[k] as f64).collect();
            }
            let shares = largest_remainder(need, &weights);
            for (&k, share) in active.iter().zip(shares) {
                let take = share.min(avail[k]);
                ids.extend_from_slice(&pools[k][cursor[k]..cursor[k] + take]);
                cursor[k] += take;
                need -= take;
            }
        }
        clients.push(ids);
    }
    Ok(clients)
}

/// Cluster composition of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientHeterogeneity {
    pub client_id: usize,
    pub histogram: Vec<usize>,
    /// Shannon entropy of the cluster proportions, in nats.
    pub entropy: f64,
    pub max_proportion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityReport {
    pub clients: Vec<ClientHeterogeneity>,
    pub mean_entropy: f64,
    pub mean_max_proportion: f64,
    pub median_max_proportion: f64,
    /// Distinct assigned samples.
    pub covered: usize,
    /// Samples in the cluster assignment.
    pub total: usize,
}

impl HeterogeneityReport {
    pub fn full_coverage(&self) -> bool {
        self.covered == self.total
    }

    /// CSV with columns `client_id, cluster_0..cluster_{n-1}, entropy, max_proportion`.
    pub fn to_csv(&self) -> String {
        let n = self.clients.first().map_or(0, |c| c.histogram.len());
        let mut out = String::from("client_id");
        for k in 0..n {
            let _ = write!(out, ",cluster_{k}");
        }
        out.push_str(",entropy,max_proportion\n");
        for c in &self.clients {
            let _ = write!(out, "{}", c.client_id);
            for h in &c.histogram {
                let _ = write!(out, ",{h}");
            }
            let _ = writeln!(out, ",{},{}", c.entropy, c.max_proportion);
        }
        out
    }
}

pub fn heterogeneity_report(
    plan: &PartitionPlan,
    assignment: &ClusterAssignment,
) -> Result<HeterogeneityReport> {
    let n = assignment.n_clusters();
    let mut clients = Vec::with_capacity(plan.n_clients());
    let mut covered = BTreeSet::new();
    for (client_id, ids) in plan.clients().iter().enumerate() {
        let mut histogram = vec![0usize; n];
        for id in ids {
            let k = assignment
                .get(id)
                .ok_or_else(|| PartitionError::UnknownSample(id.clone()))?;
            histogram[k] += 1;
            covered.insert(id.as_str());
        }
        let size = ids.len() as f64;
        let (entropy, max_proportion) = if ids.is_empty() {
            (0.0, 0.0)
        } else {
            let entropy = histogram
                .iter()
                .filter(|&&h| h > 0)
                .map(|&h| {
                    let q = h as f64 / size;
                    -q * q.ln()
                })
                .sum::<f64>();
            let max = *histogram.iter().max().unwrap() as f64 / size;
            (entropy, max)
        };
        clients.push(ClientHeterogeneity {
            client_id,
            histogram,
            entropy,
            max_proportion,
        });
    }
    let count = clients.len().max(1) as f64;
    let mean_entropy = clients.iter().map(|c| c.entropy).sum::<f64>() / count;
    let mean_max_proportion = clients.iter().map(|c| c.max_proportion).sum::<f64>() / count;
    let mut maxes: Vec<f64> = clients.iter().map(|c| c.max_proportion).collect();
    maxes.sort_by(f64::total_cmp);
    let median_max_proportion = match maxes.len() {
        0 => 0.0,
        len if len % 2 == 1 => maxes[len / 2],
        len => 0.5 * (maxes[len / 2 - 1] + maxes[len / 2]),
    };
    Ok(HeterogeneityReport {
        clients,
        mean_entropy,
        mean_max_proportion,
        median_max_proportion,
        covered: covered.len(),
        total: assignment.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    fn clustered(sizes: &[usize]) -> ClusterAssignment {
        let mut labels = BTreeMap::new();
        for (k, &s) in sizes.iter().enumerate() {
            for i in 0..s {
                labels.insert(format!("c{k}-{i:05}"), k);
            }
        }
        ClusterAssignment::new(sizes.len(), labels).unwrap()
    }

    fn sizes_of(plan: &PartitionPlan) -> Vec<usize> {
        plan.clients().iter().map(Vec::len).collect()
    }

    #[test]
    fn random_even_and_remainder() {
        let plan = partition_random(&ids(10), 5, 1).unwrap();
        assert_eq!(sizes_of(&plan), vec![2; 5]);
        let plan = partition_random(&ids(11), 5, 1).unwrap();
        let mut s = sizes_of(&plan);
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert!(matches!(
            partition_random(&ids(3), 5, 1),
            Err(PartitionError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn shard_small_cases() {
        let a = clustered(&[4, 4]);
        let plan = partition_shard(&a, 4, 1, 7).unwrap();
        let report = heterogeneity_report(&plan, &a).unwrap();
        for c in &report.clients {
            assert_eq!(c.histogram.iter().sum::<usize>(), 2);
            assert_eq!(c.max_proportion, 1.0);
            assert_eq!(c.entropy, 0.0);
        }
        let per_cluster: Vec<usize> = (0..2)
            .map(|k| report.clients.iter().filter(|c| c.histogram[k] > 0).count())
            .collect();
        assert_eq!(per_cluster, vec![2, 2]);

        let plan = partition_shard(&a, 4, 2, 7).unwrap();
        let report = heterogeneity_report(&plan, &a).unwrap();
        assert!(report.clients.iter().all(|c| c.histogram == vec![1, 1]));
    }

    #[test]
    fn shard_full_scale_iid() {
        let a = clustered(&[2200; 5]);
        let plan = partition_shard(&a, 100, 5, 3).unwrap();
        let report = heterogeneity_report(&plan, &a).unwrap();
        assert!(report.clients.iter().all(|c| c.histogram == vec![22; 5]));
        assert_eq!(sizes_of(&plan), vec![110; 100]);
    }

    #[test]
    fn shard_p1_twenty_clients_per_cluster() {
        let a = clustered(&[2200; 5]);
        let plan = partition_shard(&a, 100, 1, 3).unwrap();
        let report = heterogeneity_report(&plan, &a).unwrap();
        for k in 0..5 {
            let served = report.clients.iter().filter(|c| c.histogram[k] > 0).count();
            assert_eq!(served, 20);
        }
        assert!(report.full_coverage());
    }

    #[test]
    fn shard_remainder_goes_to_lowest_clients() {
        let a = clustered(&[5]);
        let plan = partition_shard(&a, 2, 1, 0).unwrap();
        assert_eq!(sizes_of(&plan), vec![3, 2]);
    }

    #[test]
    fn shard_errors() {
        let a = clustered(&[4, 4, 4]);
        assert!(matches!(partition_shard(&a, 4, 4, 0), Err(PartitionError::Config(_))));
        assert!(matches!(partition_shard(&a, 4, 0, 0), Err(PartitionError::Config(_))));
        // Two clients with one cluster each cannot cover three clusters.
        assert!(matches!(
            partition_shard(&a, 2, 1, 0),
            Err(PartitionError::UnselectedCluster(_))
        ));
    }

    #[test]
    fn size_weighted_shard_follows_cluster_size() {
        let a = clustered(&[100, 300, 600]);
        let spec = PartitionSpec::new(
            PartitionStrategy::Shard {
                p: 1,
                size_weighted: true,
            },
            10,
            4,
        );
        let plan = partition(&a, &spec).unwrap();
        let report = heterogeneity_report(&plan, &a).unwrap();
        let served: Vec<usize> = (0..3)
            .map(|k| report.clients.iter().filter(|c| c.histogram[k] > 0).count())
            .collect();
        assert_eq!(served, vec![1, 3, 6]);
        assert!(report.full_coverage());
    }

    #[test]
    fn dirichlet_proportions_on_simplex() {
        for alpha in [0.05, 0.2, 1.0, 10.0, 1000.0] {
            let props = dirichlet_proportions(&[alpha], 5, 50, 9).unwrap();
            for p in props {
                assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn dirichlet_rejects_bad_alpha() {
        let a = clustered(&[10, 10]);
        for bad in [vec![0.0], vec![-1.0, 1.0], vec![1.0, 1.0, 1.0], vec![f64::NAN]] {
            assert!(matches!(
                partition_dirichlet(&a, 2, &bad, 0),
                Err(PartitionError::Config(_))
            ));
        }
    }

    #[test]
    fn dirichlet_equal_quotas_and_exhaustion() {
        let a = clustered(&[30, 7, 3]);
        let plan = partition_dirichlet(&a, 7, &[0.3], 5).unwrap();
        let mut sizes = sizes_of(&plan);
        assert_eq!(sizes.iter().sum::<usize>(), 40);
        sizes.truncate(5);
        assert_eq!(sizes, vec![6; 5]);
        let report = heterogeneity_report(&plan, &a).unwrap();
        assert!(report.full_coverage());
    }

    fn mean_abs_dev_from_uniform(report: &HeterogeneityReport, n: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for c in &report.clients {
            let size = c.histogram.iter().sum::<usize>() as f64;
            for &h in &c.histogram {
                total += (h as f64 / size - 1.0 / n as f64).abs();
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn dirichlet_large_alpha_is_near_iid() {
        let a = clustered(&[2200; 5]);
        let devs: Vec<f64> = (0..5)
            .map(|seed| {
                let plan = partition_dirichlet(&a, 100, &[1000.0], seed).unwrap();
                mean_abs_dev_from_uniform(&heterogeneity_report(&plan, &a).unwrap(), 5)
            })
            .collect();
        let mean = devs.iter().sum::<f64>() / 5.0;
        assert!(mean < 0.03, "{devs:?}");
    }

    #[test]
    fn dirichlet_small_alpha_is_skewed() {
        let a = clustered(&[2200; 5]);
        let medians: Vec<f64> = (0..5)
            .map(|seed| {
                let plan = partition_dirichlet(&a, 100, &[0.2], seed).unwrap();
                heterogeneity_report(&plan, &a).unwrap().median_max_proportion
            })
            .collect();
        let mean = medians.iter().sum::<f64>() / 5.0;
        assert!(mean >= 0.6, "{medians:?}");
    }

    #[test]
    fn random_plan_tracks_global_proportions() {
        let a = clustered(&[3000, 2000, 1000]);
        let plan = partition(&a, &PartitionSpec::new(PartitionStrategy::Random, 4, 2)).unwrap();
        let report = heterogeneity_report(&plan, &a).unwrap();
        let global = [0.5, 1.0 / 3.0, 1.0 / 6.0];
        for c in &report.clients {
            let size = c.histogram.iter().sum::<usize>() as f64;
            for (h, g) in c.histogram.iter().zip(global) {
                assert!((*h as f64 / size - g).abs() < 0.05);
            }
        }
    }

    #[test]
    fn report_rejects_unknown_sample() {
        let a = clustered(&[2]);
        let plan = partition_random(&["zz".to_string()], 1, 0).unwrap();
        assert_eq!(
            heterogeneity_report(&plan, &a).unwrap_err(),
            PartitionError::UnknownSample("zz".into())
        );
    }

    #[test]
    fn plan_json_round_trip() {
        let a = clustered(&[6, 6]);
        let plan = partition_shard(&a, 12, 1, 1).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains(r#""clients":{"0":["#));
        let back: PartitionPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
        let dup = r#"{"spec":{"strategy":{"kind":"random"},"n_clients":2,"seed":0},"clients":{"0":["a"],"1":["a"]}}"#;
        assert!(serde_json::from_str::<PartitionPlan>(dup).is_err());
    }

    fn arb_strategy() -> impl Strategy<Value = PartitionStrategy> {
        prop_oneof![
            Just(PartitionStrategy::Random),
            (1usize..=4).prop_map(|p| PartitionStrategy::Shard { p, size_weighted: false }),
            (1usize..=4).prop_map(|p| PartitionStrategy::Shard { p, size_weighted: true }),
            (0.05f64..20.0).prop_map(|a| PartitionStrategy::Dirichlet { alpha: vec![a] }),
        ]
    }

    proptest! {
        #[test]
        fn plans_are_disjoint_and_deterministic(
            sizes in prop::collection::vec(5usize..40, 4),
            strategy in arb_strategy(),
            n_clients in 1usize..12,
            seed in any::<u64>(),
        ) {
            let a = clustered(&sizes);
            let mut spec = PartitionSpec::new(strategy, n_clients, seed);
            spec.allow_empty_clients = true;
            let plan = match partition(&a, &spec) {
                Ok(plan) => plan,
                Err(PartitionError::UnselectedCluster(_)) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            let mut seen = BTreeSet::new();
            for ids in plan.clients() {
                for id in ids {
                    prop_assert!(a.get(id).is_some());
                    prop_assert!(seen.insert(id.clone()));
                }
            }
            prop_assert_eq!(seen.len(), a.len());
            prop_assert_eq!(partition(&a, &spec).unwrap(), plan);
        }

        #[test]
        fn random_split_covers_input(n in 1usize..200, clients in 1usize..20, seed in any::<u64>()) {
            prop_assume!(n >= clients);
            let input = ids(n);
            let plan = partition_random(&input, clients, seed).unwrap();
            let mut all: Vec<String> = plan.clients().concat();
            all.sort();
            prop_assert_eq!(all, input);
            let s = sizes_of(&plan);
            prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        }
    }
}
