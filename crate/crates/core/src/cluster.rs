//! Group detection from a relation matrix by spectral clustering.
//!
//! The affinity graph is built from `R`, its symmetric normalized Laplacian is
//! diagonalized with a cyclic Jacobi solver, the cluster count is read off the
//! largest eigengap, and the row-normalized spectral embedding is partitioned
//! with k-means. Clusters of one subject become singletons.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor2;

/// Disjoint cover of subjects `0..n` by groups (size >= 2) and singletons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    n: usize,
    groups: Vec<BTreeSet<usize>>,
    singletons: BTreeSet<usize>,
}

impl Partition {
    pub fn all_singletons(n: usize) -> Self {
        Self {
            n,
            groups: Vec::new(),
            singletons: (0..n).collect(),
        }
    }

    /// Builds a partition from (possibly one-member) groups; subjects not
    /// mentioned become singletons. Group order is preserved.
    pub fn from_groups(n: usize, groups: Vec<BTreeSet<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::with_capacity(groups.len());
        for g in groups {
            if g.is_empty() {
                return Err(Error::invalid("empty group in partition"));
            }
            for &m in &g {
                if m >= n {
                    return Err(Error::invalid(format!("member {m} outside 0..{n}")));
                }
                if !seen.insert(m) {
                    return Err(Error::invalid(format!("subject {m} is in two groups")));
                }
            }
            if g.len() >= 2 {
                kept.push(g);
            }
        }
        let grouped: BTreeSet<usize> = kept.iter().flatten().copied().collect();
        let singletons = (0..n).filter(|i| !grouped.contains(i)).collect();
        Ok(Self {
            n,
            groups: kept,
            singletons,
        })
    }

    /// Partition induced by a cluster label per subject.
    pub fn from_labels(labels: &[usize]) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut clusters = vec![BTreeSet::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            clusters[l].insert(i);
        }
        let groups = clusters.into_iter().filter(|c| !c.is_empty()).collect();
        Self::from_groups(labels.len(), groups)
            .expect("labels form a partition")
            .canonical()
    }

    /// Same partition with groups ordered by their smallest member.
    pub fn canonical(mut self) -> Self {
        self.groups.sort_by_key(|g| *g.iter().next().unwrap());
        self
    }

    pub fn num_subjects(&self) -> usize {
        self.n
    }

    pub fn groups(&self) -> &[BTreeSet<usize>] {
        &self.groups
    }

    pub fn singletons(&self) -> &BTreeSet<usize> {
        &self.singletons
    }

    /// Binary co-membership matrix with unit diagonal.
    pub fn to_relation(&self) -> Tensor2 {
        let mut r = Tensor2::identity(self.n);
        for g in &self.groups {
            for &u in g {
                for &v in g {
                    r[(u, v)] = 1.0;
                }
            }
        }
        r
    }

    /// Relabels subjects: subject `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let groups = self
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| perm[i]).collect())
            .collect();
        Self::from_groups(self.n, groups)
            .expect("permutation")
            .canonical()
    }
}

pub fn partition_to_relation(p: &Partition) -> Tensor2 {
    p.to_relation()
}

/// How the clustering graph is derived from the relation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "param")]
pub enum AffinityMode {
    /// `R` as given.
    Raw,
    /// Off-diagonal entries `<= threshold` are dropped.
    Threshold(f64),
    /// Self-tuning local scaling on `1 - R` with the k-th neighbor scale.
    LocalScaling(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Upper bound on the cluster count; `None` means the number of subjects.
    pub k_max: Option<usize>,
    pub affinity: AffinityMode,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_max: None,
            affinity: AffinityMode::Threshold(0.5),
            seed: 0,
            max_iter: 100,
        }
    }
}

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn symmetric_eigen(m: &Tensor2) -> Result<(Vec<f64>, Tensor2)> {
    let n = m.rows();
    if m.asymmetry()? > 1e-9 {
        return Err(Error::invalid("symmetric_eigen: input is not symmetric"));
    }
    let mut a = m.clone();
    let mut v = Tensor2::identity(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off < JACOBI_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Tensor2::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, col)] = v[(r, src)];
        }
    }
    Ok((values, vectors))
}

fn affinity(r: &Tensor2, mode: AffinityMode) -> Tensor2 {
    let n = r.rows();
    match mode {
        AffinityMode::Raw => r.clone(),
        AffinityMode::Threshold(t) => {
            let mut a = r.clone();
            for i in 0..n {
                for j in 0..n {
                    if i != j && a[(i, j)] <= t {
                        a[(i, j)] = 0.0;
                    }
                }
            }
            a
        }
        AffinityMode::LocalScaling(k) => {
            let dist = |i: usize, j: usize| (1.0 - r[(i, j)]).max(0.0);
            let k = k.clamp(1, n.saturating_sub(1).max(1));
            let sigma: Vec<f64> = (0..n)
                .map(|i| {
                    let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(i, j)).collect();
                    d.sort_by(f64::total_cmp);
                    d.get(k - 1).copied().unwrap_or(1.0).max(1e-6)
                })
                .collect();
            let mut a = Tensor2::identity(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        a[(i, j)] = (-dist(i, j).powi(2) / (sigma[i] * sigma[j])).exp();
                    }
                }
            }
            a
        }
    }
}

/// `I - D^{-1/2} A D^{-1/2}`; rows with zero degree contribute nothing.
fn normalized_laplacian(a: &Tensor2) -> Tensor2 {
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row(i).iter().sum();
            if d > 1e-12 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Tensor2::identity(n);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] -= inv_sqrt[i] * a[(i, j)] * inv_sqrt[j];
        }
    }
    l
}

/// Number of clusters at the largest eigengap among the first `k_max`
/// eigenvalues (ties go to the smaller count). A fully disconnected graph
/// (every eigenvalue zero) yields one cluster per subject.
pub fn eigengap_count(eigenvalues: &[f64], k_max: usize) -> usize {
    let n = eigenvalues.len();
    if n <= 1 {
        return n;
    }
    if eigenvalues[n - 1] < 1e-9 {
        return n.min(k_max.max(1));
    }
    let upper = k_max.clamp(1, n - 1);
    let mut best = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 1..=upper {
        let gap = eigenvalues[k] - eigenvalues[k - 1];
        if gap > best_gap + 1e-12 {
            best_gap = gap;
            best = k;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with farthest-point seeding. Returns a label per row.
pub fn kmeans(points: &Tensor2, k: usize, seed: u64, max_iter: usize) -> Vec<usize> {
    let n = points.rows();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    while centers.len() < k {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..n {
            let d = centers
                .iter()
                .map(|c| sq_dist(points.row(i), c))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        centers.push(points.row(best.0).to_vec());
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(p, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    };
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centers)).collect();
    for _ in 0..max_iter {
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for (j, x) in center.iter_mut().enumerate() {
                *x = members.iter().map(|&i| points[(i, j)]).sum::<f64>() / members.len() as f64;
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

/// Partitions subjects using the relation matrix `r` (symmetric, values in
/// `[0, 1]`, unit diagonal).
pub fn cluster_groups(r: &Tensor2, cfg: &ClusterConfig) -> Result<Partition> {
    let n = r.rows();
    if n == 0 {
        return Err(Error::invalid("cluster_groups: empty relation matrix"));
    }
    if !r.all_finite() {
        return Err(Error::invalid("cluster_groups: non-finite relation matrix"));
    }
    if r.asymmetry()? > 1e-9 {
        return Err(Error::invalid(
            "cluster_groups: relation matrix is not symmetric",
        ));
    }
    let k_max = cfg.k_max.unwrap_or(n);
    if k_max == 0 || k_max > n {
        return Err(Error::invalid(format!("k_max {k_max} outside 1..={n}")));
    }
    if n == 1 {
        return Ok(Partition::all_singletons(1));
    }
    let a = affinity(r, cfg.affinity);
    let (values, vectors) = symmetric_eigen(&normalized_laplacian(&a))?;
    let k = eigengap_count(&values, k_max);
    if k >= n {
        return Ok(Partition::all_singletons(n));
    }

    let mut embedding = Tensor2::zeros(n, k);
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|c| vectors[(i, c)]).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (c, x) in row.into_iter().enumerate() {
            embedding[(i, c)] = if norm > 1e-12 { x / norm } else { 0.0 };
        }
    }
    let labels = kmeans(&embedding, k, cfg.seed, cfg.max_iter);
    Ok(Partition::from_labels(&labels))
}
