//! Client cohorting.
//!
//! The parameter-based pipeline embeds each client's flattened round-1 model
//! into a low-dimensional space and clusters there:
//!
//! ```text
//! updates -> parameter matrix -> PCA projection -> RBF adjacency
//!         -> normalized Laplacian -> spectral embedding -> k-means
//! ```
//!
//! Clients never ship anything beyond the parameters they already upload,
//! which is the point: cohorting costs the edge nothing.
//!
//! Two baselines live here as well: grouping by metadata equality
//! ([`primary_cohort`]) and clustering per-feature statistical moments of
//! the local data ([`moment_cohort`]).

use crate::aggregation::ClientUpdateSet;
use crate::data::{ClientDataset, MetaInfo, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::linalg::{self, euclidean_distance, kmeans, sym_eig, top_k_pairs, EigResult, Matrix};
use crate::ClientId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Parameters of the spectral cohorting pipeline.
///
/// `sigma` and `k_cohorts` set to `None` select the automatic rules: the
/// median-distance bandwidth and the eigengap cohort count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    /// PCA components kept from the parameter matrix.
    pub n: usize,
    /// Spectral components kept from the Laplacian.
    pub q: usize,
    /// RBF bandwidth; `None` derives it from the median pairwise distance.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Number of cohorts; `None` picks the largest Laplacian eigengap.
    #[serde(default)]
    pub k_cohorts: Option<usize>,
    pub seed: u64,
    /// Square the distance in the kernel exponent instead of the default
    /// plain distance.
    #[serde(default)]
    pub squared_kernel: bool,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n: 5,
            q: 2,
            sigma: None,
            k_cohorts: None,
            seed: 0,
            squared_kernel: false,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.q == 0 {
            return Err(Error::config("cohort n and q must be >= 1"));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::config("cohort sigma must be positive"));
            }
        }
        if self.k_cohorts == Some(0) {
            return Err(Error::config("k_cohorts must be >= 1"));
        }
        Ok(())
    }
}

/// A partition of clients into cohorts `0..num_cohorts`, every cohort
/// non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortAssignment {
    labels: BTreeMap<ClientId, usize>,
    num_cohorts: usize,
}

impl CohortAssignment {
    pub fn from_labels(labels: BTreeMap<ClientId, usize>) -> Result<CohortAssignment> {
        if labels.is_empty() {
            return Err(Error::contract("cohort assignment must cover >= 1 client"));
        }
        let num_cohorts = labels.values().max().unwrap() + 1;
        for j in 0..num_cohorts {
            if !labels.values().any(|&l| l == j) {
                return Err(Error::contract(format!("cohort {j} is empty")));
            }
        }
        Ok(CohortAssignment {
            labels,
            num_cohorts,
        })
    }

    /// One cohort holding every listed client.
    pub fn single(clients: impl IntoIterator<Item = ClientId>) -> Result<CohortAssignment> {
        Self::from_labels(clients.into_iter().map(|c| (c, 0)).collect())
    }

    pub fn num_cohorts(&self) -> usize {
        self.num_cohorts
    }

    pub fn num_clients(&self) -> usize {
        self.labels.len()
    }

    pub fn cohort_of(&self, client: ClientId) -> Option<usize> {
        self.labels.get(&client).copied()
    }

    /// Members of cohort `j`, ascending client id.
    pub fn members(&self, j: usize) -> Vec<ClientId> {
        self.labels
            .iter()
            .filter(|(_, &l)| l == j)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn labels(&self) -> &BTreeMap<ClientId, usize> {
        &self.labels
    }

    /// Labels in ascending client-id order, for scoring against a planted
    /// partition.
    pub fn label_vec(&self) -> Vec<usize> {
        self.labels.values().copied().collect()
    }
}

/// Stacks flattened client parameters as rows, ascending client id.
pub fn build_param_matrix(updates: &ClientUpdateSet) -> Result<Matrix> {
    if updates.len() < 2 {
        return Err(Error::contract(
            "parameter cohorting needs at least 2 clients",
        ));
    }
    let rows: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| crate::model::flatten(&u.params))
        .collect();
    Matrix::from_rows(&rows)
}

/// Rows scaled to unit Euclidean norm; zero rows pass through unchanged.
fn row_normalize(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let norm = linalg::l2_norm(x.row(i));
        if norm > 0.0 {
            for j in 0..x.cols() {
                out.set(i, j, x.get(i, j) / norm);
            }
        }
    }
    out
}

/// Projects the parameter matrix onto its top-`n` principal directions.
///
/// The projection basis comes from the eigenvectors of `X_n^T X_n` where
/// `X_n` is the row-normalized parameter matrix; the projection itself is
/// `Y = X Z`. When the parameter dimension exceeds the client count the
/// eigenproblem is solved on the small Gram matrix `X_n X_n^T` and converted
/// back, which is exact for the leading components; components beyond the
/// numerical rank come out as zero columns. Columns of `Z` are sign
/// canonicalized, so `Y` is reproducible.
pub fn pca_project(x: &Matrix, n: usize) -> Result<Matrix> {
    let (k, d) = (x.rows(), x.cols());
    if k < 2 {
        return Err(Error::contract("pca_project needs at least 2 rows"));
    }
    if n == 0 || n > k.min(d) {
        return Err(Error::contract(format!(
            "pca components must satisfy 1 <= n <= min(rows, cols) = {}, got {n}",
            k.min(d)
        )));
    }
    let xn = row_normalize(x);

    let mut z = if d <= k {
        // Primal: eigenvectors of the d x d covariance-like matrix.
        let c = xn.transpose().matmul(&xn)?;
        let e = sym_eig(&c)?;
        let (_, z) = top_k_pairs(&e, n)?;
        z
    } else {
        // Dual: eigenvectors of the k x k Gram matrix, converted back via
        // z_i = X_n^T u_i / sqrt(lambda_i).
        let g = xn.matmul(&xn.transpose())?;
        let e = sym_eig(&g)?;
        let scale = e.values[0].abs().max(1.0);
        let mut z = Matrix::zeros(d, n);
        for i in 0..n {
            let lambda = e.values[i];
            if lambda <= 1e-12 * scale {
                // Beyond the numerical rank; the component is a zero column
                // (degenerate but well-defined, matching the rank-1 case).
                continue;
            }
            let inv_sqrt = 1.0 / lambda.sqrt();
            for row in 0..d {
                let mut sum = 0.0;
                for kk in 0..k {
                    sum += xn.get(kk, row) * e.vectors.get(kk, i);
                }
                z.set(row, i, sum * inv_sqrt);
            }
        }
        z
    };
    linalg::canonicalize_columns(&mut z);
    x.matmul(&z)
}

/// RBF adjacency over the rows of `y`: `A_ij = exp(-dist / (2 sigma^2))`
/// for `i != j` and `A_ii = 0`. The exponent uses the plain Euclidean
/// distance by default; `squared_kernel` switches to the squared variant.
pub fn build_adjacency(y: &Matrix, sigma: f64, squared_kernel: bool) -> Result<Matrix> {
    if !(sigma > 0.0) {
        return Err(Error::contract("adjacency sigma must be positive"));
    }
    let k = y.rows();
    let denom = 2.0 * sigma * sigma;
    let mut a = Matrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let dist = euclidean_distance(y.row(i), y.row(j));
            let exponent = if squared_kernel { dist * dist } else { dist };
            let w = (-exponent / denom).exp();
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    Ok(a)
}

/// Symmetric normalized Laplacian `D^{-1/2} A D^{-1/2}`.
pub fn normalized_laplacian(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::contract("adjacency must be square"));
    }
    if a.max_asymmetry() > 1e-9 {
        return Err(Error::contract("adjacency must be symmetric"));
    }
    let k = a.rows();
    let mut d_inv_sqrt = vec![0.0; k];
    for i in 0..k {
        if a.get(i, i) != 0.0 {
            return Err(Error::contract("adjacency diagonal must be zero"));
        }
        let degree: f64 = a.row(i).iter().sum();
        if a.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::contract("adjacency must be non-negative"));
        }
        if degree <= 0.0 {
            return Err(Error::DegenerateGraph(format!(
                "vertex {i} is isolated (zero degree)"
            )));
        }
        d_inv_sqrt[i] = 1.0 / degree.sqrt();
    }
    let mut l = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            l.set(i, j, a.get(i, j) * d_inv_sqrt[i] * d_inv_sqrt[j]);
        }
    }
    Ok(l)
}

/// Row-normalized top-`q` eigenvector embedding of the Laplacian.
pub fn spectral_embed(l: &Matrix, q: usize) -> Result<Matrix> {
    let e = sym_eig(l)?;
    embed_from_eig(&e, q)
}

/// Same as [`spectral_embed`] for an already-computed decomposition.
pub fn embed_from_eig(e: &EigResult, q: usize) -> Result<Matrix> {
    if q == 0 || q > e.dim() {
        return Err(Error::contract(format!(
            "spectral q must satisfy 1 <= q <= {}, got {q}",
            e.dim()
        )));
    }
    let (_, s) = top_k_pairs(e, q)?;
    let mut p = Matrix::zeros(s.rows(), q);
    for i in 0..s.rows() {
        let norm = linalg::l2_norm(s.row(i));
        if norm < 1e-12 {
            return Err(Error::DegenerateEmbedding(format!(
                "embedding row {i} has zero norm"
            )));
        }
        for j in 0..q {
            p.set(i, j, s.get(i, j) / norm);
        }
    }
    Ok(p)
}

/// Median of pairwise row distances, the automatic kernel scale.
fn median_pairwise_distance(y: &Matrix) -> f64 {
    let k = y.rows();
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            dists.push(euclidean_distance(y.row(i), y.row(j)));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    if m == 0 {
        return 0.0;
    }
    if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    }
}

/// Bandwidth from the median distance, scaled so that the kernel exponent
/// becomes `dist / median` (or `dist^2 / median^2` for the squared kernel).
/// Either way the similarity graph is invariant to a common rescaling of
/// the embedded points.
fn auto_sigma(median: f64, squared_kernel: bool) -> f64 {
    if median <= 0.0 {
        // All embeddings coincide; any bandwidth gives the complete graph.
        return 1.0;
    }
    if squared_kernel {
        median / std::f64::consts::SQRT_2
    } else {
        (median / 2.0).sqrt()
    }
}

/// Largest-eigengap cohort count over the descending Laplacian spectrum,
/// capped at `ceil(K / 2)`.
fn eigengap_k(values: &[f64], cap: usize) -> usize {
    if values.len() < 2 {
        return 1;
    }
    let kmax = cap.clamp(1, values.len() - 1);
    let mut best_k = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 1..=kmax {
        let gap = values[k - 1] - values[k];
        if gap > best_gap {
            best_gap = gap;
            best_k = k;
        }
    }
    best_k
}

/// Full parameter-based cohorting pipeline.
///
/// `n` and `q` are clamped to what the update set supports (`n` to
/// `min(K, d)`, `q` to `K`), so one configuration works across fleet sizes.
pub fn cohort(updates: &ClientUpdateSet, cfg: &CohortConfig) -> Result<CohortAssignment> {
    cfg.validate()?;
    let ids = updates.client_ids();
    let k_clients = ids.len();

    let x = build_param_matrix(updates)?;
    let n_eff = cfg.n.min(k_clients).min(x.cols());
    let y = pca_project(&x, n_eff)?;

    let sigma = match cfg.sigma {
        Some(s) => s,
        None => auto_sigma(median_pairwise_distance(&y), cfg.squared_kernel),
    };
    let a = build_adjacency(&y, sigma, cfg.squared_kernel)?;
    for i in 0..k_clients {
        if a.row(i).iter().sum::<f64>() <= 0.0 {
            return Err(Error::DegenerateGraph(format!(
                "client {} is isolated in the similarity graph (sigma {sigma:.3e} too small)",
                ids[i]
            )));
        }
    }
    let l = normalized_laplacian(&a)?;
    let e = sym_eig(&l)?;

    let k_cohorts = match cfg.k_cohorts {
        Some(k) => {
            if k > k_clients {
                return Err(Error::contract(format!(
                    "k_cohorts {k} exceeds client count {k_clients}"
                )));
            }
            k
        }
        None => eigengap_k(&e.values, k_clients.div_ceil(2)),
    };
    let q_eff = cfg.q.min(k_clients);
    let p = embed_from_eig(&e, q_eff)?;

    let labels = kmeans(&p, k_cohorts, cfg.seed)?;
    CohortAssignment::from_labels(ids.into_iter().zip(labels).collect())
}

/// Groups clients by exact equality of the selected metadata fields.
/// Cohort indices follow the sorted order of the metadata tuples.
pub fn primary_cohort(
    meta: &BTreeMap<ClientId, MetaInfo>,
    keys: &[String],
) -> Result<CohortAssignment> {
    if keys.is_empty() {
        return Err(Error::contract("primary cohorting needs at least one key"));
    }
    let mut tuples: BTreeMap<ClientId, Vec<String>> = BTreeMap::new();
    for (&client, info) in meta {
        let mut tuple = Vec::with_capacity(keys.len());
        for key in keys {
            let value = info.field(key).ok_or_else(|| {
                Error::contract(format!("client {client} has no metadata field {key:?}"))
            })?;
            tuple.push(value);
        }
        tuples.insert(client, tuple);
    }
    let mut distinct: Vec<&Vec<String>> = tuples.values().collect();
    distinct.sort();
    distinct.dedup();
    let index_of = |t: &Vec<String>| distinct.binary_search(&t).expect("tuple present");
    let labels = tuples
        .iter()
        .map(|(&c, t)| (c, index_of(t)))
        .collect();
    CohortAssignment::from_labels(labels)
}

/// First four standardized moments per feature for one client:
/// `(mean, variance, skewness, kurtosis)` per sensor, concatenated.
///
/// Mean and variance are de-normalized through the dataset's training
/// statistics; skewness and kurtosis are affine-invariant so they come
/// straight from the normalized training windows. Zero-variance features
/// report skewness and kurtosis of 0.
pub fn moment_vector(ds: &ClientDataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(NUM_FEATURES * 4);
    for f in 0..NUM_FEATURES {
        let values: Vec<f64> = ds
            .train()
            .iter()
            .flat_map(|w| w.x.iter().skip(f).step_by(NUM_FEATURES).copied())
            .collect();
        let n = values.len() as f64;
        let mean_z: f64 = values.iter().sum::<f64>() / n;
        let m2: f64 = values.iter().map(|v| (v - mean_z).powi(2)).sum::<f64>() / n;
        let m3: f64 = values.iter().map(|v| (v - mean_z).powi(3)).sum::<f64>() / n;
        let m4: f64 = values.iter().map(|v| (v - mean_z).powi(4)).sum::<f64>() / n;
        let (skew, kurt) = if m2 < 1e-12 {
            (0.0, 0.0)
        } else {
            (m3 / m2.powf(1.5), m4 / (m2 * m2))
        };
        out.push(ds.stats.mean[f]);
        out.push(ds.stats.std[f] * ds.stats.std[f]);
        out.push(skew);
        out.push(kurt);
    }
    out
}

/// Moment-sharing baseline: clusters clients on their raw per-feature
/// moment vectors with k-means.
pub fn moment_cohort(
    datasets: &[&ClientDataset],
    k: usize,
    seed: u64,
) -> Result<CohortAssignment> {
    if datasets.is_empty() {
        return Err(Error::contract("moment cohorting needs clients"));
    }
    let rows: Vec<Vec<f64>> = datasets.iter().map(|d| moment_vector(d)).collect();
    let m = Matrix::from_rows(&rows)?;
    let labels = kmeans(&m, k, seed)?;
    let map = datasets
        .iter()
        .map(|d| d.machine_id)
        .zip(labels)
        .collect();
    CohortAssignment::from_labels(map)
}
