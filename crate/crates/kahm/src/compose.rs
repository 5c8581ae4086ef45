//! Conditionally deep and wide compositions.
//!
//! A deep composition holds L machines fit on the *same* data at subspace
//! dimensions n, n-1, …, n-L+1; the nesting happens only at evaluation time,
//! where layer l applies its machine to the output of layer l-1 and the
//! layer with the smallest distance to the query wins. A wide composition
//! runs one deep composition per k-means cluster and picks the closest
//! branch.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::dataset::{default_branch_count, kmeans, DataMatrix, Partition};
use crate::error::{KahmError, Result};
use crate::machine::{fit_kahm_with_encoding, pca_basis, KahmModel};

/// Nested composition of machines on one dataset.
#[derive(Debug, Clone)]
pub struct DeepKahm {
    layers: Vec<KahmModel>,
}

/// Fit L machines on `y` at dimensions n, n-1, …, n-L+1.
///
/// The PCA basis is computed once and sliced per layer; this is bit-identical
/// to fitting each layer independently.
pub fn fit_deep(y: &DataMatrix, n: usize, layers: usize) -> Result<DeepKahm> {
    if layers == 0 {
        return Err(KahmError::invalid("need at least one layer"));
    }
    if layers > n {
        return Err(KahmError::invalid(format!(
            "layer count {layers} exceeds subspace dimension {n}"
        )));
    }
    if n > y.n_cols() {
        return Err(KahmError::invalid(format!(
            "subspace dimension {n} exceeds ambient dimension {}",
            y.n_cols()
        )));
    }
    if y.n_rows() < 2 {
        return Err(KahmError::invalid("need at least 2 rows to fit"));
    }
    if let Some((first, second)) = y.find_duplicate_rows() {
        return Err(KahmError::DuplicateRows { first, second });
    }
    let basis = pca_basis(y);
    let fitted: Vec<Result<KahmModel>> = (0..layers)
        .into_par_iter()
        .map(|l| {
            let dim = n - l;
            fit_kahm_with_encoding(y, basis.rows(0, dim).into_owned())
        })
        .collect();
    let mut models = Vec::with_capacity(layers);
    for m in fitted {
        models.push(m?);
    }
    Ok(DeepKahm { layers: models })
}

impl DeepKahm {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[KahmModel] {
        &self.layers
    }

    pub fn top_dim(&self) -> usize {
        self.layers[0].subspace_dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.layers[0].ambient_dim()
    }

    pub fn training_data(&self) -> &DataMatrix {
        self.layers[0].training_data()
    }

    pub(crate) fn from_layers(layers: Vec<KahmModel>) -> Result<Self> {
        if layers.is_empty() {
            return Err(KahmError::invalid("need at least one layer"));
        }
        Ok(DeepKahm { layers })
    }

    /// Evaluate every cumulative composition and return the winning layer
    /// (1-based, ties to the smallest index) with its output.
    ///
    /// A layer that fails to evaluate counts as +∞ distance; since the
    /// composition is cumulative, failure at layer l disables layers ≥ l.
    pub fn evaluate(&self, y: &DVector<f64>) -> Result<(usize, DVector<f64>)> {
        let mut best: Option<(usize, f64, DVector<f64>)> = None;
        let mut current = y.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer.evaluate(&current) {
                Ok(out) => {
                    let d = (y - &out).norm();
                    if best.as_ref().is_none_or(|(_, bd, _)| d < *bd) {
                        best = Some((idx + 1, d, out.clone()));
                    }
                    current = out;
                }
                Err(_) => break,
            }
        }
        match best {
            Some((l_hat, _, out)) => Ok((l_hat, out)),
            None => Err(KahmError::EvaluationUnderflow),
        }
    }

    /// Γ_D(y) = min over layers of ‖y - 𝓜_l(y)‖.
    pub fn distance(&self, y: &DVector<f64>) -> Result<f64> {
        let (_, out) = self.evaluate(y)?;
        Ok((y - out).norm())
    }
}

/// Parallel composition of deep machines over a k-means partition.
#[derive(Debug, Clone)]
pub struct WideKahm {
    branches: Vec<DeepKahm>,
    partition: Partition,
}

/// Dedupe rows (stable first occurrence), cluster into S subsets, and fit one
/// deep composition per cluster. `branches` defaults to ⌈N/1000⌉. Clusters
/// with fewer than 2 distinct rows are merged into the nearest surviving
/// cluster.
pub fn fit_wide(
    y: &DataMatrix,
    n: usize,
    layers: usize,
    branches: Option<usize>,
    seed: u64,
) -> Result<WideKahm> {
    let distinct = y.distinct_row_indices();
    if distinct.len() < 2 {
        return Err(KahmError::invalid(
            "need at least 2 distinct rows to fit a wide composition",
        ));
    }
    let deduped = y.select_rows(&distinct)?;
    let s = branches.unwrap_or_else(|| default_branch_count(deduped.n_rows()));
    if s > deduped.n_rows() {
        return Err(KahmError::invalid(format!(
            "branch count {s} exceeds {} distinct rows",
            deduped.n_rows()
        )));
    }
    let partition = kmeans(&deduped, s, seed)?;
    let partition = merge_small_clusters(&deduped, partition)?;

    let fitted: Vec<Result<DeepKahm>> = (1..=partition.cluster_count)
        .into_par_iter()
        .map(|c| {
            let rows = partition.cluster_rows(c);
            let cluster = deduped.select_rows(&rows)?;
            fit_deep(&cluster, n, layers)
        })
        .collect();
    let mut branches = Vec::with_capacity(partition.cluster_count);
    for b in fitted {
        branches.push(b?);
    }
    Ok(WideKahm { branches, partition })
}

/// Reassign the members of every cluster of size < 2 to the nearest (by
/// centroid) cluster of size ≥ 2, then renumber contiguously.
fn merge_small_clusters(data: &DataMatrix, partition: Partition) -> Result<Partition> {
    let s = partition.cluster_count;
    let mut counts = vec![0usize; s + 1];
    for &a in &partition.assignments {
        counts[a] += 1;
    }
    let keep: Vec<usize> = (1..=s).filter(|&c| counts[c] >= 2).collect();
    if keep.is_empty() {
        return Err(KahmError::invalid(
            "every cluster has fewer than 2 rows; lower the branch count",
        ));
    }
    if keep.len() == s {
        return Ok(partition);
    }

    let p = data.n_cols();
    let mut centroids = vec![vec![0.0; p]; s + 1];
    for (i, &a) in partition.assignments.iter().enumerate() {
        for (j, slot) in centroids[a].iter_mut().enumerate() {
            *slot += data.inner()[(i, j)];
        }
    }
    for c in 1..=s {
        if counts[c] > 0 {
            for v in centroids[c].iter_mut() {
                *v /= counts[c] as f64;
            }
        }
    }

    let renumber: std::collections::BTreeMap<usize, usize> =
        keep.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
    let assignments = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if counts[a] >= 2 {
                renumber[&a]
            } else {
                // Nearest surviving cluster by centroid distance.
                let row = data.inner().row(i);
                let nearest = keep
                    .iter()
                    .min_by(|&&x, &&z| {
                        let dx: f64 = row
                            .iter()
                            .zip(&centroids[x])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        let dz: f64 = row
                            .iter()
                            .zip(&centroids[z])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        dx.partial_cmp(&dz).unwrap().then(x.cmp(&z))
                    })
                    .expect("keep is non-empty");
                renumber[nearest]
            }
        })
        .collect();
    Ok(Partition { assignments, cluster_count: keep.len() })
}

impl WideKahm {
    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[DeepKahm] {
        &self.branches
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn ambient_dim(&self) -> usize {
        self.branches[0].ambient_dim()
    }

    pub(crate) fn from_parts(branches: Vec<DeepKahm>, partition: Partition) -> Result<Self> {
        if branches.is_empty() {
            return Err(KahmError::invalid("need at least one branch"));
        }
        Ok(WideKahm { branches, partition })
    }

    /// (ŝ, 𝓦(y)): the closest branch (1-based, ties to the smallest index)
    /// and its image of the query.
    pub fn evaluate(&self, y: &DVector<f64>) -> Result<(usize, DVector<f64>)> {
        let evals: Vec<Option<(f64, DVector<f64>)>> = self
            .branches
            .par_iter()
            .map(|b| {
                b.evaluate(y)
                    .ok()
                    .map(|(_, out)| ((y - &out).norm(), out))
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in evals.iter().enumerate() {
            if let Some((d, _)) = e {
                if best.is_none_or(|(_, bd)| *d < bd) {
                    best = Some((i, *d));
                }
            }
        }
        match best {
            Some((i, _)) => {
                let (_, out) = evals.into_iter().nth(i).flatten().expect("present");
                Ok((i + 1, out))
            }
            None => Err(KahmError::EvaluationUnderflow),
        }
    }

    /// (ŝ, Γ_W(y)) = the branch minimizing ‖y - 𝓓_s(y)‖ and that minimum.
    pub fn distance(&self, y: &DVector<f64>) -> Result<(usize, f64)> {
        let (s_hat, out) = self.evaluate(y)?;
        Ok((s_hat, (y - out).norm()))
    }
}
