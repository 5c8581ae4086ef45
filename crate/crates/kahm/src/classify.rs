//! Distance-based classifiers, class-matching scores, and the
//! membership-inference score.
//!
//! A classifier holds one wide composition per class and labels a point with
//! the class whose composition is nearest. The membership-inference score is
//! the L2 distance between the distributions of min-class distances on
//! training and test points, estimated from samples by least-squares
//! density-difference fitting with Gaussian bases.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::compose::{fit_wide, WideKahm};
use crate::dataset::{default_branch_count, LabeledDataset};
use crate::error::{KahmError, Result};
use crate::fabricate::fabricate_big;
use crate::privacy::{privatize_matrix, PrivacySpec};
use crate::seed::derive_seed;

/// How the training data of a classifier was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    Plain,
    DpNoisy(PrivacySpec),
    DpFabricated(PrivacySpec),
}

/// Which differentially private pipeline to train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpMode {
    /// Noise-added data straight from the mechanism.
    Noisy,
    /// Noise-added data smoothed into fabricated data.
    Fabricated,
}

/// One wide composition per class.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub class_models: Vec<WideKahm>,
    pub class_names: Vec<String>,
    pub subspace_dim: usize,
    pub layers: usize,
    /// Branch count actually used per class.
    pub branch_counts: Vec<usize>,
    pub provenance: Provenance,
}

/// Fit a plain classifier: one wide composition per class.
///
/// `branches` overrides the default per-class rule S_c = ⌈N_c/1000⌉.
pub fn fit_classifier(
    data: &LabeledDataset,
    n: usize,
    layers: usize,
    branches: Option<usize>,
    seed: u64,
) -> Result<ClassifierModel> {
    let class_matrices: Vec<(String, crate::dataset::DataMatrix)> = (1..=data.class_count())
        .map(|c| {
            let m = data.class_matrix(c).map_err(|_| {
                KahmError::ClassTooSmall(data.class_names[c - 1].clone())
            })?;
            Ok((data.class_names[c - 1].clone(), m))
        })
        .collect::<Result<_>>()?;
    fit_from_class_matrices(class_matrices, n, layers, branches, seed, Provenance::Plain)
}

fn fit_from_class_matrices(
    class_matrices: Vec<(String, crate::dataset::DataMatrix)>,
    n: usize,
    layers: usize,
    branches: Option<usize>,
    seed: u64,
    provenance: Provenance,
) -> Result<ClassifierModel> {
    if class_matrices.len() < 2 {
        return Err(KahmError::invalid(
            "classification needs at least 2 classes",
        ));
    }
    for (name, m) in &class_matrices {
        if m.distinct_row_indices().len() < 2 {
            return Err(KahmError::ClassTooSmall(name.clone()));
        }
    }
    let fitted: Vec<Result<WideKahm>> = class_matrices
        .par_iter()
        .enumerate()
        .map(|(idx, (_, m))| {
            fit_wide(m, n, layers, branches, derive_seed(seed, "class-fit", idx as u64 + 1))
        })
        .collect();
    let mut class_models = Vec::with_capacity(class_matrices.len());
    for f in fitted {
        class_models.push(f?);
    }
    let branch_counts = class_models.iter().map(|w| w.branch_count()).collect();
    Ok(ClassifierModel {
        class_models,
        class_names: class_matrices.into_iter().map(|(n, _)| n).collect(),
        subspace_dim: n,
        layers,
        branch_counts,
        provenance,
    })
}

/// Train on privatized or fabricated class matrices.
pub fn fit_dp_classifier(
    data: &LabeledDataset,
    spec: &PrivacySpec,
    n: usize,
    layers: usize,
    mode: DpMode,
    seed: u64,
) -> Result<ClassifierModel> {
    spec.validate()?;
    let prepared: Vec<Result<(String, crate::dataset::DataMatrix)>> = (1..=data.class_count())
        .into_par_iter()
        .map(|c| {
            let name = data.class_names[c - 1].clone();
            let raw = data
                .class_matrix(c)
                .map_err(|_| KahmError::ClassTooSmall(name.clone()))?;
            let class_spec = spec.with_seed(derive_seed(spec.seed, "class-dp", c as u64));
            let transformed = match mode {
                DpMode::Noisy => privatize_matrix(&raw, &class_spec)?,
                DpMode::Fabricated => fabricate_big(&raw, n, &class_spec)?,
            };
            Ok((name, transformed))
        })
        .collect();
    let mut class_matrices = Vec::with_capacity(data.class_count());
    for p in prepared {
        class_matrices.push(p?);
    }
    let provenance = match mode {
        DpMode::Noisy => Provenance::DpNoisy(*spec),
        DpMode::Fabricated => Provenance::DpFabricated(*spec),
    };
    fit_from_class_matrices(class_matrices, n, layers, None, seed, provenance)
}

impl ClassifierModel {
    pub fn class_count(&self) -> usize {
        self.class_models.len()
    }

    /// Per-class distances Γ_c(y); a class whose composition fails to
    /// evaluate contributes +∞.
    pub fn class_distances(&self, y: &DVector<f64>) -> Vec<f64> {
        self.class_models
            .iter()
            .map(|w| w.distance(y).map(|(_, g)| g).unwrap_or(f64::INFINITY))
            .collect()
    }

    /// (label, per-class Γ). Label is the argmin class, ties to the smaller
    /// index.
    pub fn predict(&self, y: &DVector<f64>) -> Result<(usize, Vec<f64>)> {
        let gammas = self.class_distances(y);
        let mut best = 0usize;
        for c in 1..gammas.len() {
            if gammas[c] < gammas[best] {
                best = c;
            }
        }
        if gammas[best].is_infinite() {
            return Err(KahmError::EvaluationUnderflow);
        }
        Ok((best + 1, gammas))
    }

    /// ms_c(y) = exp(-Γ_c² / Σ_c' Γ_c'²), all ones when every Γ is zero.
    pub fn matching_scores(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        let gammas = self.class_distances(y);
        let total: f64 = gammas.iter().map(|g| g * g).sum();
        if total == 0.0 {
            return Ok(vec![1.0; gammas.len()]);
        }
        if !total.is_finite() {
            return Err(KahmError::EvaluationUnderflow);
        }
        Ok(gammas.iter().map(|g| (-(g * g) / total).exp()).collect())
    }

    /// Fraction of correctly predicted rows.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.data.n_rows() == 0 {
            return Err(KahmError::invalid("empty dataset"));
        }
        let hits: usize = (0..data.data.n_rows())
            .into_par_iter()
            .map(|i| {
                let (label, _) = self.predict(&data.data.row(i)).unwrap_or((0, Vec::new()));
                usize::from(label == data.labels[i])
            })
            .sum();
        Ok(hits as f64 / data.data.n_rows() as f64)
    }

    /// Per-class recall, indexed by class-1.
    pub fn per_class_accuracy(&self, data: &LabeledDataset) -> Result<Vec<f64>> {
        let mut hit = vec![0usize; self.class_count()];
        let mut total = vec![0usize; self.class_count()];
        let predictions: Vec<usize> = (0..data.data.n_rows())
            .into_par_iter()
            .map(|i| self.predict(&data.data.row(i)).map(|(l, _)| l).unwrap_or(0))
            .collect();
        for (i, &pred) in predictions.iter().enumerate() {
            let truth = data.labels[i];
            total[truth - 1] += 1;
            if pred == truth {
                hit[truth - 1] += 1;
            }
        }
        Ok(hit
            .iter()
            .zip(&total)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect())
    }

    /// Confusion matrix: entry (i, j) counts rows of true class i+1
    /// predicted as class j+1.
    pub fn confusion(&self, data: &LabeledDataset) -> Result<Vec<Vec<usize>>> {
        let c = self.class_count();
        let mut counts = vec![vec![0usize; c]; c];
        for i in 0..data.data.n_rows() {
            if let Ok((pred, _)) = self.predict(&data.data.row(i)) {
                counts[data.labels[i] - 1][pred - 1] += 1;
            }
        }
        Ok(counts)
    }

    /// Default branch count a class of the given size would get.
    pub fn default_branches(class_size: usize) -> usize {
        default_branch_count(class_size)
    }
}

/// Hyperparameters selected for the density-difference estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsddConfig {
    pub sigma: f64,
    pub ridge: f64,
    pub centers: usize,
}

const LSDD_MAX_CENTERS: usize = 300;
const LSDD_SIGMA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
const LSDD_RIDGE_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
const LSDD_FOLDS: usize = 5;

/// Least-squares density-difference estimate of ∫(f_a - f_b)² between the
/// sample sets, clamped at zero. Symmetric in its arguments.
pub fn lsdd(samples_a: &[f64], samples_b: &[f64], seed: u64) -> Result<f64> {
    lsdd_with_config(samples_a, samples_b, seed).map(|(v, _)| v)
}

pub fn lsdd_with_config(
    samples_a: &[f64],
    samples_b: &[f64],
    seed: u64,
) -> Result<(f64, LsddConfig)> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(KahmError::invalid("both sample sets must be non-empty"));
    }
    if samples_a.iter().chain(samples_b).any(|v| !v.is_finite()) {
        return Err(KahmError::invalid("non-finite sample"));
    }

    let centers = pick_centers(samples_a, samples_b);
    let spread = centers.last().unwrap() - centers.first().unwrap();
    if spread == 0.0 {
        // Both sets concentrated on a single value: no density difference
        // can be resolved.
        return Ok((0.0, LsddConfig { sigma: 1.0, ridge: LSDD_RIDGE_GRID[0], centers: 1 }));
    }
    let sigma0 = median_pairwise_distance(&centers).max(spread * 1e-6);

    // Deterministic fold assignment: each set is shuffled by the same seed
    // and dealt round-robin, which keeps the estimate symmetric under
    // swapping the inputs.
    let folds_a = fold_ids(samples_a.len(), seed);
    let folds_b = fold_ids(samples_b.len(), seed);

    let mut best: Option<(f64, LsddConfig)> = None;
    for &sm in &LSDD_SIGMA_GRID {
        let sigma = sm * sigma0;
        let h = basis_gram(&centers, sigma);
        for &ridge in &LSDD_RIDGE_GRID {
            let mut score_sum = 0.0;
            let mut folds_used = 0;
            for fold in 0..LSDD_FOLDS {
                let (a_tr, a_te): (Vec<f64>, Vec<f64>) = split_fold(samples_a, &folds_a, fold);
                let (b_tr, b_te): (Vec<f64>, Vec<f64>) = split_fold(samples_b, &folds_b, fold);
                if a_tr.is_empty() || b_tr.is_empty() || a_te.is_empty() || b_te.is_empty() {
                    continue;
                }
                let h_tr = mean_diff(&centers, sigma, &a_tr, &b_tr);
                let theta = solve_ridge(&h, ridge, &h_tr)?;
                let h_te = mean_diff(&centers, sigma, &a_te, &b_te);
                // Out-of-sample squared-loss criterion θᵀHθ - 2θᵀh.
                let score = (theta.transpose() * &h * &theta)[(0, 0)]
                    - 2.0 * theta.dot(&h_te);
                score_sum += score;
                folds_used += 1;
            }
            if folds_used == 0 {
                continue;
            }
            let score = score_sum / folds_used as f64;
            let cfg = LsddConfig { sigma, ridge, centers: centers.len() };
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, cfg));
            }
        }
    }
    let (_, cfg) = best.unwrap_or((
        0.0,
        LsddConfig { sigma: sigma0, ridge: LSDD_RIDGE_GRID[2], centers: centers.len() },
    ));

    let h = basis_gram(&centers, cfg.sigma);
    let hv = mean_diff(&centers, cfg.sigma, samples_a, samples_b);
    let theta = solve_ridge(&h, cfg.ridge, &hv)?;
    let estimate = 2.0 * theta.dot(&hv) - (theta.transpose() * &h * &theta)[(0, 0)];
    Ok((estimate.max(0.0), cfg))
}

/// Up to 300 basis centers: the sorted pooled samples, thinned evenly.
fn pick_centers(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut pooled: Vec<f64> = a.iter().chain(b).cloned().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pooled.dedup();
    if pooled.len() <= LSDD_MAX_CENTERS {
        return pooled;
    }
    let step = (pooled.len() - 1) as f64 / (LSDD_MAX_CENTERS - 1) as f64;
    (0..LSDD_MAX_CENTERS)
        .map(|i| pooled[(i as f64 * step).round() as usize])
        .collect()
}

fn median_pairwise_distance(centers: &[f64]) -> f64 {
    let mut dists = Vec::with_capacity(centers.len() * (centers.len() - 1) / 2);
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            dists.push((centers[i] - centers[j]).abs());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    dists[dists.len() / 2]
}

/// H_{bb'} = ∫ φ_b φ_b' = σ√π · exp(-(c_b - c_b')²/(4σ²)).
fn basis_gram(centers: &[f64], sigma: f64) -> DMatrix<f64> {
    let m = centers.len();
    let scale = sigma * std::f64::consts::PI.sqrt();
    DMatrix::from_fn(m, m, |i, j| {
        let d = centers[i] - centers[j];
        scale * (-d * d / (4.0 * sigma * sigma)).exp()
    })
}

/// h_b = mean_a φ_b - mean_b φ_b.
fn mean_diff(centers: &[f64], sigma: f64, a: &[f64], b: &[f64]) -> DVector<f64> {
    let phi = |set: &[f64], c: f64| -> f64 {
        set.iter()
            .map(|&r| (-(r - c) * (r - c) / (2.0 * sigma * sigma)).exp())
            .sum::<f64>()
            / set.len() as f64
    };
    DVector::from_fn(centers.len(), |b_idx, _| {
        phi(a, centers[b_idx]) - phi(b, centers[b_idx])
    })
}

fn solve_ridge(h: &DMatrix<f64>, ridge: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let mut a = h.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let chol = Cholesky::new(a)
        .ok_or_else(|| KahmError::Factorization("ridge system not positive definite".into()))?;
    Ok(chol.solve(rhs))
}

fn fold_ids(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lsdd-folds", len as u64));
    order.shuffle(&mut rng);
    let mut ids = vec![0usize; len];
    for (pos, &idx) in order.iter().enumerate() {
        ids[idx] = pos % LSDD_FOLDS;
    }
    ids
}

fn split_fold(samples: &[f64], folds: &[usize], fold: usize) -> (Vec<f64>, Vec<f64>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &v) in samples.iter().enumerate() {
        if folds[i] == fold {
            test.push(v);
        } else {
            train.push(v);
        }
    }
    (train, test)
}

/// Membership-inference report.
#[derive(Debug, Clone)]
pub struct MisReport {
    /// L2 distance between min-class-distance densities, clamped at 0.
    pub mis: f64,
    pub train_distances: Vec<f64>,
    pub test_distances: Vec<f64>,
    pub estimator_config: LsddConfig,
}

/// Score how separable training rows are from test rows using only the
/// classifier's min-class distance values.
pub fn membership_inference_score(
    model: &ClassifierModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    seed: u64,
) -> Result<MisReport> {
    let min_distance = |ds: &LabeledDataset| -> Vec<f64> {
        (0..ds.data.n_rows())
            .into_par_iter()
            .map(|i| {
                model
                    .class_distances(&ds.data.row(i))
                    .into_iter()
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let train_distances = min_distance(train);
    let test_distances = min_distance(test);
    if train_distances.iter().chain(&test_distances).any(|v| !v.is_finite()) {
        return Err(KahmError::EvaluationUnderflow);
    }
    let (mis, cfg) = lsdd_with_config(&train_distances, &test_distances, seed)?;
    Ok(MisReport { mis, train_distances, test_distances, estimator_config: cfg })
}

/// Fraction of correct predictions of a plain classifier on a dataset.
pub fn accuracy(model: &ClassifierModel, data: &LabeledDataset) -> Result<f64> {
    model.accuracy(data)
}

/// Area under the ROC curve of the class-c matching score as a one-vs-rest
/// detector, computed by sweeping the threshold over every observed score
/// (equivalently, the Mann-Whitney rank statistic with tie correction).
pub fn matching_score_auc(
    model: &ClassifierModel,
    data: &LabeledDataset,
    class: usize,
) -> Result<f64> {
    if class == 0 || class > model.class_count() {
        return Err(KahmError::invalid(format!("class {class} out of range")));
    }
    let scores: Vec<(f64, bool)> = (0..data.data.n_rows())
        .into_par_iter()
        .map(|i| {
            let s = model.matching_scores(&data.data.row(i)).map(|v| v[class - 1]);
            s.map(|s| (s, data.labels[i] == class))
        })
        .collect::<Result<_>>()?;
    let positives = scores.iter().filter(|(_, pos)| *pos).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(KahmError::invalid("need both positive and negative rows"));
    }
    let mut sorted = scores;
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Sum of positive ranks, averaging ranks across ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &sorted[i..j] {
            if item.1 {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DataMatrix;
    use crate::synth::gaussian_blobs;

    fn three_blob_dataset(per: usize, seed: u64) -> LabeledDataset {
        gaussian_blobs(
            &[vec![0.0, 0.0], vec![6.0, 0.0], vec![3.0, 5.0]],
            per,
            0.45,
            seed,
        )
    }

    #[test]
    fn classifier_separates_blobs() {
        let train = three_blob_dataset(60, 1);
        let test = three_blob_dataset(60, 2);
        let model = fit_classifier(&train, 2, 2, None, 7).unwrap();
        let acc = model.accuracy(&test).unwrap();
        assert!(acc > 0.97, "accuracy {acc}");
    }

    #[test]
    fn single_class_rejected() {
        let data = DataMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let ds = LabeledDataset::unlabeled(data);
        assert!(fit_classifier(&ds, 1, 1, None, 0).is_err());
    }

    #[test]
    fn tiny_class_named_in_error() {
        let data = DataMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let ds = LabeledDataset::new(data, vec![1, 1, 2], vec!["big".into(), "tiny".into()])
            .unwrap();
        match fit_classifier(&ds, 1, 1, None, 0) {
            Err(KahmError::ClassTooSmall(name)) => assert_eq!(name, "tiny"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn default_branches_follow_class_sizes() {
        let train = three_blob_dataset(40, 3);
        let model = fit_classifier(&train, 2, 1, None, 5).unwrap();
        for (c, &b) in model.branch_counts.iter().enumerate() {
            let n_c = train.class_rows(c + 1).len();
            assert_eq!(b, default_branch_count(n_c));
        }
    }

    #[test]
    fn predict_training_point_recovers_class() {
        let train = three_blob_dataset(50, 11);
        let model = fit_classifier(&train, 2, 2, None, 3).unwrap();
        for i in (0..train.data.n_rows()).step_by(17) {
            let (label, gammas) = model.predict(&train.data.row(i)).unwrap();
            assert_eq!(label, train.labels[i]);
            assert_eq!(gammas.len(), 3);
        }
    }

    #[test]
    fn argmin_label_invariant_under_monotone_rescaling() {
        let train = three_blob_dataset(40, 13);
        let model = fit_classifier(&train, 2, 1, None, 3).unwrap();
        let probe = train.data.row(5);
        let (label, gammas) = model.predict(&probe).unwrap();
        let rescaled: Vec<f64> = gammas.iter().map(|g| (3.0 * g).exp()).collect();
        let mut best = 0;
        for c in 1..rescaled.len() {
            if rescaled[c] < rescaled[best] {
                best = c;
            }
        }
        assert_eq!(best + 1, label);
    }

    #[test]
    fn matching_scores_symmetric_case() {
        // Equal distances → both scores exp(-1/C); bounded in [e⁻¹, 1].
        let train = three_blob_dataset(40, 17);
        let model = fit_classifier(&train, 2, 1, None, 9).unwrap();
        let probe = DVector::from_vec(vec![3.0, 1.5]);
        let scores = model.matching_scores(&probe).unwrap();
        for &s in &scores {
            assert!(s >= (-1.0f64).exp() - 1e-12 && s <= 1.0);
        }
        let gammas = model.class_distances(&probe);
        let total: f64 = gammas.iter().map(|g| g * g).sum();
        for (s, g) in scores.iter().zip(&gammas) {
            assert!((s - (-(g * g) / total).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_unconstructible() {
        // A zero-row dataset cannot exist, so an "accuracy on empty data"
        // call errors at construction time.
        let train = three_blob_dataset(30, 19);
        let model = fit_classifier(&train, 2, 1, None, 1).unwrap();
        assert!(train.select(&[]).is_err());
        assert!(model.accuracy(&train).is_ok());
    }

    #[test]
    fn lsdd_identical_sets_is_zero() {
        let samples: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.377).sin() * 2.0).collect();
        let v = lsdd(&samples, &samples.clone(), 3).unwrap();
        assert!(v <= 0.01, "lsdd {v}");
    }

    #[test]
    fn lsdd_separated_gaussians_matches_closed_form() {
        // a ~ N(0,1), b ~ N(4,1): ∫(f-g)² = (1/√π)(1 - e⁻⁴).
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
        use rand_distr::Distribution;
        let a: Vec<f64> = (0..2000).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| normal.sample(&mut rng) + 4.0).collect();
        let expected = (1.0 / std::f64::consts::PI.sqrt()) * (1.0 - (-4.0f64).exp());
        let v = lsdd(&a, &b, 5).unwrap();
        assert!((v - expected).abs() < 0.05, "lsdd {v} vs {expected}");
    }

    #[test]
    fn lsdd_symmetric_under_swap() {
        let a: Vec<f64> = (0..400).map(|i| (i as f64 * 0.13).sin()).collect();
        let b: Vec<f64> = (0..500).map(|i| (i as f64 * 0.29).cos() * 1.5).collect();
        let ab = lsdd(&a, &b, 11).unwrap();
        let ba = lsdd(&b, &a, 11).unwrap();
        assert!((ab - ba).abs() <= 1e-9, "{ab} vs {ba}");
    }

    #[test]
    fn lsdd_degenerate_identical_values() {
        let a = vec![2.0; 50];
        let b = vec![2.0; 70];
        assert_eq!(lsdd(&a, &b, 0).unwrap(), 0.0);
    }

    #[test]
    fn mis_identical_split_is_zero() {
        let train = three_blob_dataset(40, 23);
        let model = fit_classifier(&train, 2, 1, None, 2).unwrap();
        let report = membership_inference_score(&model, &train, &train, 6).unwrap();
        assert!(report.mis <= 0.01, "mis {}", report.mis);
        assert_eq!(report.train_distances, report.test_distances);
    }

    #[test]
    fn matching_score_auc_detects_class_membership() {
        let train = three_blob_dataset(60, 37);
        let test = three_blob_dataset(60, 39);
        let model = fit_classifier(&train, 2, 1, None, 5).unwrap();
        for class in 1..=3 {
            let auc = matching_score_auc(&model, &test, class).unwrap();
            assert!(auc > 0.99, "class {class}: AUC {auc}");
        }
        // Brute-force oracle on a small cross-class subset: count correctly
        // ordered (positive, negative) score pairs directly.
        let idx: Vec<usize> = (0..test.data.n_rows()).step_by(4).collect();
        let sub = test.select(&idx).unwrap();
        let auc = matching_score_auc(&model, &sub, 1).unwrap();
        let scores: Vec<(f64, bool)> = (0..sub.data.n_rows())
            .map(|i| {
                let s = model.matching_scores(&sub.data.row(i)).unwrap()[0];
                (s, sub.labels[i] == 1)
            })
            .collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (sp, pos) in scores.iter().filter(|(_, p)| *p) {
            for (sn, _) in scores.iter().filter(|(_, p)| !*p) {
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
                let _ = pos;
            }
        }
        assert!((auc - wins / pairs).abs() < 1e-12, "{auc} vs {}", wins / pairs);
    }

    #[test]
    fn random_labels_score_at_chance_level() {
        // Two "classes" drawn from the same distribution: accuracy on fresh
        // points sits at the binomial chance level.
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pool = crate::synth::standard_normal_matrix(200, 2, 7);
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(1..=2)).collect();
        let train = LabeledDataset::new(pool, labels, vec!["1".into(), "2".into()]).unwrap();
        let model = fit_classifier(&train, 2, 1, None, 5).unwrap();

        let probes = crate::synth::standard_normal_matrix(1000, 2, 13);
        let probe_labels: Vec<usize> = (0..1000).map(|_| rng.random_range(1..=2)).collect();
        let test =
            LabeledDataset::new(probes, probe_labels, vec!["1".into(), "2".into()]).unwrap();
        let acc = model.accuracy(&test).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "chance-level accuracy {acc}");
    }

    #[test]
    fn dp_modes_in_vanishing_noise_limit() {
        let train = three_blob_dataset(50, 29);
        let test = three_blob_dataset(50, 31);
        let plain = fit_classifier(&train, 2, 1, None, 4).unwrap();
        let spec = PrivacySpec::new(1e6, 1e-6, 2.0, 12).unwrap();
        let noisy = fit_dp_classifier(&train, &spec, 2, 1, DpMode::Noisy, 4).unwrap();
        let fabricated = fit_dp_classifier(&train, &spec, 2, 1, DpMode::Fabricated, 4).unwrap();
        let pa = plain.accuracy(&test).unwrap();
        let na = noisy.accuracy(&test).unwrap();
        let fa = fabricated.accuracy(&test).unwrap();
        assert!((pa - na).abs() < 0.05, "plain {pa} vs noisy {na}");
        assert!((pa - fa).abs() < 0.05, "plain {pa} vs fabricated {fa}");
        assert!(matches!(noisy.provenance, Provenance::DpNoisy(_)));
        assert!(matches!(fabricated.provenance, Provenance::DpFabricated(_)));
    }
}
