//! Dataset ingestion, normalization, and partitioning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::bufread::GzDecoder;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{KahmError, Result};

/// N×p matrix of row samples — the universal data carrier.
///
/// Invariants: N ≥ 1, p ≥ 1, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    inner: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(inner: DMatrix<f64>) -> Result<Self> {
        if inner.nrows() == 0 || inner.ncols() == 0 {
            return Err(KahmError::invalid("data matrix must be at least 1×1"));
        }
        if inner.iter().any(|v| !v.is_finite()) {
            return Err(KahmError::invalid("data matrix contains non-finite entries"));
        }
        Ok(DataMatrix { inner })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(KahmError::invalid("no rows"));
        }
        let p = rows[0].len();
        if rows.iter().any(|r| r.len() != p) {
            return Err(KahmError::DimensionMismatch("ragged rows".into()));
        }
        let inner = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        Self::new(inner)
    }

    pub fn n_rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.inner.row(i).transpose()
    }

    pub fn inner(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.inner
    }

    /// Frobenius norm squared.
    pub fn frob_sq(&self) -> f64 {
        self.inner.iter().map(|v| v * v).sum()
    }

    /// Select a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(KahmError::invalid("empty row selection"));
        }
        let inner = DMatrix::from_fn(idx.len(), self.n_cols(), |i, j| self.inner[(idx[i], j)]);
        Self::new(inner)
    }

    /// Indices of the first occurrence of each distinct row, in order.
    pub fn distinct_row_indices(&self) -> Vec<usize> {
        let mut seen: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
        let mut keep = Vec::new();
        for i in 0..self.n_rows() {
            let key: Vec<u64> = (0..self.n_cols())
                .map(|j| canonical_bits(self.inner[(i, j)]))
                .collect();
            if let std::collections::hash_map::Entry::Vacant(slot) = seen.entry(key) {
                slot.insert(i);
                keep.push(i);
            }
        }
        keep
    }

    /// First pair of identical rows, if any.
    pub fn find_duplicate_rows(&self) -> Option<(usize, usize)> {
        let mut seen: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
        for i in 0..self.n_rows() {
            let key: Vec<u64> = (0..self.n_cols())
                .map(|j| canonical_bits(self.inner[(i, j)]))
                .collect();
            if let Some(&first) = seen.get(&key) {
                return Some((first, i));
            }
            seen.insert(key, i);
        }
        None
    }
}

// 0.0 and -0.0 compare equal; give them one bit pattern.
pub(crate) fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0.0f64.to_bits()
    } else {
        v.to_bits()
    }
}

/// A [`DataMatrix`] with per-row class indices in 1..=C.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub data: DataMatrix,
    /// One class index per row, each in 1..=C.
    pub labels: Vec<usize>,
    /// Original label text per class, index c-1.
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(data: DataMatrix, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if c == 0 {
            return Err(KahmError::invalid("class count must be at least 1"));
        }
        if labels.len() != data.n_rows() {
            return Err(KahmError::DimensionMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                data.n_rows()
            )));
        }
        if labels.iter().any(|&l| l == 0 || l > c) {
            return Err(KahmError::invalid("label outside 1..=C"));
        }
        Ok(LabeledDataset { data, labels, class_names })
    }

    /// Wrap an unlabeled matrix as a single pseudo-class.
    pub fn unlabeled(data: DataMatrix) -> Self {
        let labels = vec![1; data.n_rows()];
        LabeledDataset { data, labels, class_names: vec!["_all".into()] }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Row indices belonging to class c (1-based), in order.
    pub fn class_rows(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == c).then_some(i))
            .collect()
    }

    /// Data matrix of one class.
    pub fn class_matrix(&self, c: usize) -> Result<DataMatrix> {
        self.data.select_rows(&self.class_rows(c))
    }

    pub fn select(&self, idx: &[usize]) -> Result<LabeledDataset> {
        let data = self.data.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(data, labels, self.class_names.clone())
    }
}

/// Per-row cluster assignment in 1..=S, every cluster non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<usize>,
    pub cluster_count: usize,
}

impl Partition {
    pub fn cluster_rows(&self, s: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == s).then_some(i))
            .collect()
    }
}

/// Which column of a CSV file holds the class label.
#[derive(Debug, Clone)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

/// Parse a CSV file of numeric rows, optionally taking one column as labels.
///
/// A header row is detected automatically: if any non-label cell of the first
/// row fails to parse as a number, the row is treated as a header. Label
/// selection by name requires a header. Labels are remapped to contiguous
/// class indices 1..=C (numeric-aware sort of the distinct label strings);
/// the original strings are kept in `class_names`.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<LabelColumn>) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_csv(&text, label_column)
}

pub(crate) fn parse_csv(text: &str, label_column: Option<LabelColumn>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut records: Vec<csv::StringRecord> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| KahmError::Parse { line: 0, col: 0, msg: e.to_string() })?;
        // csv yields one empty field for blank trailing lines; skip those.
        if rec.len() == 1 && rec.get(0).is_some_and(|c| c.is_empty()) {
            continue;
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(KahmError::Parse { line: 1, col: 1, msg: "empty file".into() });
    }

    let width = records[0].len();
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != width {
            return Err(KahmError::Parse {
                line: i + 1,
                col: rec.len().min(width) + 1,
                msg: format!("ragged row: expected {} fields, found {}", width, rec.len()),
            });
        }
    }

    // Resolve the label column; selection by name forces header mode.
    let (label_idx, header): (Option<usize>, Option<&csv::StringRecord>) = match &label_column {
        Some(LabelColumn::Name(name)) => {
            let hdr = &records[0];
            let idx = hdr.iter().position(|c| c == name).ok_or_else(|| KahmError::Parse {
                line: 1,
                col: 1,
                msg: format!("no column named {name:?} in header"),
            })?;
            (Some(idx), Some(hdr))
        }
        Some(LabelColumn::Index(i)) => {
            if *i >= width {
                return Err(KahmError::invalid(format!(
                    "label column {i} out of range for {width} columns"
                )));
            }
            (Some(*i), None)
        }
        None => (None, None),
    };

    // Header auto-detection when not already decided.
    let has_header = match header {
        Some(_) => true,
        None => records[0]
            .iter()
            .enumerate()
            .any(|(j, cell)| Some(j) != label_idx && cell.parse::<f64>().is_err()),
    };
    let data_start = usize::from(has_header);
    if records.len() <= data_start {
        return Err(KahmError::Parse { line: 1, col: 1, msg: "no data rows".into() });
    }

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(records.len() - data_start);
    let mut raw_labels: Vec<String> = Vec::new();
    for (ri, rec) in records.iter().enumerate().skip(data_start) {
        let mut row = Vec::with_capacity(width - usize::from(label_idx.is_some()));
        for (j, cell) in rec.iter().enumerate() {
            if Some(j) == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| KahmError::Parse {
                line: ri + 1,
                col: j + 1,
                msg: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(KahmError::Parse {
                    line: ri + 1,
                    col: j + 1,
                    msg: format!("non-finite value {cell:?}"),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }

    let data = DataMatrix::from_rows(&rows)?;
    match label_idx {
        None => Ok(LabeledDataset::unlabeled(data)),
        Some(_) => {
            let (labels, class_names) = remap_labels(&raw_labels);
            LabeledDataset::new(data, labels, class_names)
        }
    }
}

/// Map raw label strings to contiguous 1..=C. Distinct labels are sorted
/// numerically when they all parse as numbers, lexicographically otherwise.
fn remap_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut distinct: Vec<String> = raw.to_vec();
    distinct.sort();
    distinct.dedup();
    let all_numeric = distinct.iter().all(|s| s.parse::<f64>().is_ok());
    if all_numeric {
        distinct.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .partial_cmp(&b.parse::<f64>().unwrap())
                .unwrap()
        });
    }
    let index: BTreeMap<&str, usize> = distinct
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i + 1))
        .collect();
    let labels = raw.iter().map(|s| index[s.as_str()]).collect();
    (labels, distinct)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (MNIST binary layout, big-endian).
///
/// Each image is flattened row-major and divided by 255, so entries lie in
/// `[0,1]`. Gzip-compressed files are handled transparently by extension.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut images = idx_reader(images_path.as_ref())?;
    let magic = read_u32_be(&mut images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(KahmError::invalid(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut images)? as usize;
    let rows = read_u32_be(&mut images)? as usize;
    let cols = read_u32_be(&mut images)? as usize;
    let p = rows * cols;
    if count == 0 || p == 0 {
        return Err(KahmError::invalid("empty IDX image file"));
    }
    let mut pixels = vec![0u8; count * p];
    images.read_exact(&mut pixels)?;

    let mut labels_file = idx_reader(labels_path.as_ref())?;
    let magic = read_u32_be(&mut labels_file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(KahmError::invalid(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32_be(&mut labels_file)? as usize;
    if label_count != count {
        return Err(KahmError::DimensionMismatch(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let mut raw = vec![0u8; count];
    labels_file.read_exact(&mut raw)?;

    let inner = DMatrix::from_fn(count, p, |i, j| f64::from(pixels[i * p + j]) / 255.0);
    let data = DataMatrix::new(inner)?;
    let strings: Vec<String> = raw.iter().map(|d| d.to_string()).collect();
    let (labels, class_names) = remap_labels(&strings);
    LabeledDataset::new(data, labels, class_names)
}

fn idx_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let buf = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Affine map of every dimension onto [-1, 1]. Constant dimensions map to 0.
pub fn normalize_minmax(data: &DataMatrix) -> DataMatrix {
    let m = data.inner();
    let (n, p) = (m.nrows(), m.ncols());
    let mut out = DMatrix::zeros(n, p);
    for j in 0..p {
        let col = m.column(j);
        let lo = col.min();
        let hi = col.max();
        if hi > lo {
            for i in 0..n {
                out[(i, j)] = (2.0 * (m[(i, j)] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    DataMatrix { inner: out }
}

/// S = ⌈N/1000⌉, the default branch/subset count for N samples.
pub fn default_branch_count(n: usize) -> usize {
    n.div_ceil(1000)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Deterministic given the seed. Empty clusters are repaired by reseeding
/// from the point farthest from its centroid. At most 100 iterations;
/// converges when assignments stop changing.
pub fn kmeans(data: &DataMatrix, s: usize, seed: u64) -> Result<Partition> {
    kmeans_with_objectives(data, s, seed).map(|(p, _)| p)
}

/// [`kmeans`] plus the objective value recorded after every Lloyd iteration.
pub fn kmeans_with_objectives(
    data: &DataMatrix,
    s: usize,
    seed: u64,
) -> Result<(Partition, Vec<f64>)> {
    let n = data.n_rows();
    if s == 0 || s > n {
        return Err(KahmError::invalid(format!(
            "cluster count {s} out of range for {n} rows"
        )));
    }
    if s == 1 {
        let part = Partition { assignments: vec![1; n], cluster_count: 1 };
        let obj = kmeans_objective(data, &part);
        return Ok((part, vec![obj]));
    }

    let m = data.inner();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(m, s, &mut rng);
    let mut assignments: Option<Vec<usize>> = None;
    let mut objectives = Vec::new();

    for _ in 0..100 {
        // Assignment step (ties go to the smallest cluster index).
        let mut assign: Vec<usize> = {
            let cref = &centroids;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut best = 0usize;
                    let mut best_d = f64::INFINITY;
                    for (k, c) in cref.iter().enumerate() {
                        let d = sq_dist(m, i, c);
                        if d < best_d {
                            best_d = d;
                            best = k;
                        }
                    }
                    best
                })
                .collect()
        };

        // Repair empty clusters: move the globally farthest point out.
        loop {
            let mut counts = vec![0usize; s];
            for &a in &assign {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let far = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(m, a, &centroids[assign[a]]);
                    let db = sq_dist(m, b, &centroids[assign[b]]);
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .ok_or_else(|| KahmError::invalid("cannot repair empty cluster"))?;
            centroids[empty] = m.row(far).transpose();
            assign[far] = empty;
        }

        // Update step.
        let p = m.ncols();
        let mut sums = vec![DVector::<f64>::zeros(p); s];
        let mut counts = vec![0usize; s];
        for i in 0..n {
            sums[assign[i]] += m.row(i).transpose();
            counts[assign[i]] += 1;
        }
        for k in 0..s {
            if counts[k] > 0 {
                centroids[k] = &sums[k] / counts[k] as f64;
            }
        }

        objectives.push(
            (0..n)
                .map(|i| sq_dist(m, i, &centroids[assign[i]]))
                .sum(),
        );

        let converged = assignments.as_ref() == Some(&assign);
        assignments = Some(assign);
        if converged {
            break;
        }
    }

    let assignments = assignments.expect("at least one iteration ran");
    Ok((
        Partition {
            assignments: assignments.iter().map(|&a| a + 1).collect(),
            cluster_count: s,
        },
        objectives,
    ))
}

fn sq_dist(m: &DMatrix<f64>, i: usize, c: &DVector<f64>) -> f64 {
    (0..m.ncols()).map(|j| (m[(i, j)] - c[j]) * (m[(i, j)] - c[j])).sum()
}

fn kmeanspp_init(m: &DMatrix<f64>, s: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = m.nrows();
    let first = rng.random_range(0..n);
    let mut centroids = vec![m.row(first).transpose()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(m, i, &centroids[0])).collect();
    while centroids.len() < s {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining points coincide with a centroid.
            rng.random_range(0..n)
        };
        let c = m.row(pick).transpose();
        for (i, slot) in d2.iter_mut().enumerate() {
            let d = sq_dist(m, i, &c);
            if d < *slot {
                *slot = d;
            }
        }
        centroids.push(c);
    }
    centroids
}

/// Sum of squared distances of every row to its cluster's mean.
pub fn kmeans_objective(data: &DataMatrix, partition: &Partition) -> f64 {
    let m = data.inner();
    let p = m.ncols();
    let s = partition.cluster_count;
    let mut sums = vec![DVector::<f64>::zeros(p); s];
    let mut counts = vec![0usize; s];
    for (i, &a) in partition.assignments.iter().enumerate() {
        sums[a - 1] += m.row(i).transpose();
        counts[a - 1] += 1;
    }
    let centroids: Vec<DVector<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(sum, &c)| sum / (c.max(1) as f64))
        .collect();
    partition
        .assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(m, i, &centroids[a - 1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_plain_parse() {
        let ds = parse_csv("1,2\n3,4\n5,6", None).unwrap();
        assert_eq!(ds.data.n_rows(), 3);
        assert_eq!(ds.data.n_cols(), 2);
        assert_eq!(ds.data.inner()[(2, 1)], 6.0);
    }

    #[test]
    fn csv_label_column() {
        let ds = parse_csv("1,2,a\n3,4,b", Some(LabelColumn::Index(2))).unwrap();
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.labels, vec![1, 2]);
        assert_eq!(ds.class_names, vec!["a", "b"]);
        assert_eq!(ds.data.n_cols(), 2);
    }

    #[test]
    fn csv_ragged_row_errors() {
        let err = parse_csv("1,2\n3", None).unwrap_err();
        match err {
            KahmError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_empty_errors() {
        assert!(parse_csv("", None).is_err());
    }

    #[test]
    fn csv_header_detected() {
        let ds = parse_csv("x,y,label\n1,2,a\n3,4,b", Some(LabelColumn::Name("label".into()))).unwrap();
        assert_eq!(ds.data.n_rows(), 2);
        assert_eq!(ds.labels, vec![1, 2]);
    }

    #[test]
    fn csv_non_numeric_cell_position() {
        let err = parse_csv("1,2\n3,oops", None).unwrap_err();
        match err {
            KahmError::Parse { line, col, .. } => {
                assert_eq!((line, col), (2, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn numeric_labels_sort_numerically() {
        let ds = parse_csv("1,10\n2,2\n3,10", Some(LabelColumn::Index(1))).unwrap();
        assert_eq!(ds.class_names, vec!["2", "10"]);
        assert_eq!(ds.labels, vec![2, 1, 2]);
    }

    #[test]
    fn normalize_maps_endpoints() {
        let d = DataMatrix::from_rows(&[vec![0.0], vec![5.0], vec![10.0]]).unwrap();
        let out = normalize_minmax(&d);
        assert_eq!(out.inner()[(0, 0)], -1.0);
        assert_eq!(out.inner()[(1, 0)], 0.0);
        assert_eq!(out.inner()[(2, 0)], 1.0);
    }

    #[test]
    fn normalize_constant_dimension_is_zero() {
        let d = DataMatrix::from_rows(&[vec![3.0], vec![3.0], vec![3.0]]).unwrap();
        let out = normalize_minmax(&d);
        assert!(out.inner().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_identity_on_already_normalized() {
        let d = DataMatrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let out = normalize_minmax(&d);
        assert_eq!(out.inner()[(0, 0)], -1.0);
        assert_eq!(out.inner()[(1, 0)], 1.0);
    }

    #[test]
    fn kmeans_single_cluster() {
        let d = DataMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let part = kmeans(&d, 1, 0).unwrap();
        assert_eq!(part.assignments, vec![1, 1, 1]);
    }

    #[test]
    fn kmeans_each_row_own_cluster() {
        let d = DataMatrix::from_rows(&[vec![0.0], vec![10.0], vec![20.0]]).unwrap();
        let part = kmeans(&d, 3, 7).unwrap();
        let mut sorted = part.assignments.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 2, 3]);
    }

    #[test]
    fn kmeans_too_many_clusters_errors() {
        let d = DataMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(kmeans(&d, 3, 0).is_err());
    }

    #[test]
    fn kmeans_recovers_optimal_two_partition() {
        let mut rows = Vec::new();
        for i in 0..4 {
            rows.push(vec![0.0 + 0.01 * i as f64, 0.0]);
            rows.push(vec![10.0 + 0.01 * i as f64, 10.0]);
        }
        let d = DataMatrix::from_rows(&rows).unwrap();

        // Brute-force oracle: enumerate every 2-partition of the 8 points
        // (fixing point 0's side) and find the objective minimizer.
        let mut best_mask = 0u32;
        let mut best_obj = f64::INFINITY;
        for mask in 0..(1u32 << 7) {
            let assignments: Vec<usize> = (0..8)
                .map(|i| if i == 0 { 1 } else { 1 + ((mask >> (i - 1)) & 1) as usize })
                .collect();
            if !assignments.contains(&2) {
                continue;
            }
            let part = Partition { assignments, cluster_count: 2 };
            let obj = kmeans_objective(&d, &part);
            if obj < best_obj {
                best_obj = obj;
                best_mask = mask;
            }
        }
        let oracle: Vec<usize> = (0..8)
            .map(|i| if i == 0 { 1 } else { 1 + ((best_mask >> (i - 1)) & 1) as usize })
            .collect();

        let part = kmeans(&d, 2, 42).unwrap();
        // Compare up to cluster relabeling.
        let flipped: Vec<usize> = part.assignments.iter().map(|&a| 3 - a).collect();
        assert!(
            part.assignments == oracle || flipped == oracle,
            "kmeans {:?} vs oracle {oracle:?}",
            part.assignments
        );
        assert!((kmeans_objective(&d, &part) - best_obj).abs() < 1e-9);
    }

    #[test]
    fn kmeans_deterministic() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i % 7) as f64, (i % 11) as f64, (i * 13 % 17) as f64])
            .collect();
        let d = DataMatrix::from_rows(&rows).unwrap();
        let a = kmeans(&d, 4, 9).unwrap();
        let b = kmeans(&d, 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn branch_count_ceiling() {
        assert_eq!(default_branch_count(1000), 1);
        assert_eq!(default_branch_count(1001), 2);
        assert_eq!(default_branch_count(2500), 3);
        assert_eq!(default_branch_count(1), 1);
    }

    #[test]
    fn distinct_rows_stable_first_occurrence() {
        let d = DataMatrix::from_rows(&[vec![1.0], vec![2.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(d.distinct_row_indices(), vec![0, 1, 3]);
        assert_eq!(d.find_duplicate_rows(), Some((0, 2)));
    }

    fn write_idx_pair(
        dir: &std::path::Path,
        images: &[Vec<u8>],
        dims: (u32, u32),
        labels: &[u8],
        image_magic: u32,
        label_magic: u32,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("images-idx3-ubyte");
        let lab_path = dir.join("labels-idx1-ubyte");
        let mut img = Vec::new();
        img.extend_from_slice(&image_magic.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&dims.0.to_be_bytes());
        img.extend_from_slice(&dims.1.to_be_bytes());
        for image in images {
            img.extend_from_slice(image);
        }
        std::fs::write(&img_path, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&label_magic.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        std::fs::write(&lab_path, lab).unwrap();
        (img_path, lab_path)
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("kahm_idx_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn idx_zero_image_gives_zero_row() {
        let dir = temp_dir("zero");
        let (img, lab) = write_idx_pair(
            &dir,
            &[vec![0u8; 4], vec![255u8; 4]],
            (2, 2),
            &[0, 1],
            0x0000_0803,
            0x0000_0801,
        );
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.data.n_rows(), 2);
        assert_eq!(ds.data.n_cols(), 4);
        assert!(ds.data.row(0).iter().all(|&v| v == 0.0));
        assert!(ds.data.row(1).iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels, vec![1, 2]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_count_mismatch_errors() {
        let dir = temp_dir("mismatch");
        let (img, lab) = write_idx_pair(
            &dir,
            &[vec![1u8; 4], vec![2u8; 4]],
            (2, 2),
            &[0, 1, 2],
            0x0000_0803,
            0x0000_0801,
        );
        assert!(matches!(load_idx(&img, &lab), Err(KahmError::DimensionMismatch(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_bad_magic_errors() {
        let dir = temp_dir("magic");
        let (img, lab) =
            write_idx_pair(&dir, &[vec![1u8; 4]], (2, 2), &[0], 0x0000_0804, 0x0000_0801);
        assert!(load_idx(&img, &lab).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
