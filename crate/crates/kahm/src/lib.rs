//! Kernel affine hull machines.
//!
//! A kernel affine hull machine (KAHM) maps an arbitrary point to an affine
//! combination of training samples, with barycentric weights obtained from
//! regularized least-squares approximations of indicator functions in a
//! reproducing kernel Hilbert space. The distance between a point and its
//! image is a proxy for the distance between the point and the training set,
//! which is what everything else here is built on:
//!
//! * [`kernel`] — Gaussian kernels, Gram matrices, regularized least squares,
//!   and the fixed-point scheme that picks the regularization parameter.
//! * [`machine`] — fitting and evaluating a single KAHM, with boundedness
//!   certificates.
//! * [`compose`] — conditionally deep (nested) and wide (parallel, clustered)
//!   compositions.
//! * [`classify`] — distance-based classifiers, class-matching scores, and a
//!   membership-inference score backed by least-squares density-difference
//!   estimation.
//! * [`privacy`] — the optimal (ε,δ)-differentially-private noise mechanism
//!   via inverse transform sampling.
//! * [`fabricate`](mod@fabricate) — data smoothing and differentially private data
//!   fabrication with a modeling-error budget.
//! * [`federated`] — distance-only aggregation of party-local classifiers
//!   into a global classifier, plus scenario simulation.
//! * [`dataset`] — CSV/IDX ingestion, min-max normalization, and k-means
//!   partitioning.

pub mod classify;
pub mod compose;
pub mod dataset;
pub mod error;
pub mod fabricate;
pub mod federated;
pub mod kernel;
pub mod machine;
pub mod privacy;
pub mod seed;
pub mod serialize;
pub mod synth;

pub use classify::{
    accuracy, fit_classifier, fit_dp_classifier, lsdd, lsdd_with_config, matching_score_auc,
    membership_inference_score, ClassifierModel, DpMode, LsddConfig, MisReport, Provenance,
};
pub use compose::{fit_deep, fit_wide, DeepKahm, WideKahm};
pub use dataset::{
    default_branch_count, kmeans, kmeans_objective, kmeans_with_objectives, load_csv, load_idx,
    normalize_minmax, DataMatrix, LabelColumn, LabeledDataset, Partition,
};
pub use error::{KahmError, Result};
pub use fabricate::{
    fabricate, fabricate_big, fabricate_big_with_report, modeling_error, smooth, smooth_step,
    FabricationResult, SmootherTrace, SubsetReport, DEFAULT_STEP_CAP,
};
pub use federated::{
    aggregate_distance_table, combine_kahms, read_distance_table, simulate_scenario,
    simulate_scenario_with_global, write_distance_table, DistanceRecord, GlobalClassifier, Party,
    Scenario, ScenarioMetrics,
};
pub use kernel::{
    find_lambda_star, gaussian_kernel, kernel_matrix, mse_map, rls_solve, FixedPointResult,
    KernelMatrix, KernelShape,
};
pub use machine::{fit_kahm, pca_encoding, BoundCertificate, KahmModel, SolveOp};
pub use privacy::{inverse_cdf, privatize_matrix, sample_noise, PrivacySpec};
pub use serialize::{
    load_classifier, load_kahm, load_wide, save_classifier, save_kahm, save_wide,
};
