//! Versioned binary model format.
//!
//! Layout: magic `KAHM`, format version (u32 LE), a kind tag, then nested
//! records. Matrices are u64 LE dimensions followed by row-major f64 LE
//! data. Round-trips are bit-exact; derived caches (kernel factorization,
//! Gram matrix) are rebuilt deterministically on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::classify::{ClassifierModel, Provenance};
use crate::compose::{DeepKahm, WideKahm};
use crate::dataset::{DataMatrix, Partition};
use crate::error::{KahmError, Result};
use crate::machine::{KahmModel, SolveOp};
use crate::privacy::PrivacySpec;

const MAGIC: &[u8; 4] = b"KAHM";
const VERSION: u32 = 1;

const KIND_KAHM: u8 = 1;
const KIND_WIDE: u8 = 2;
const KIND_CLASSIFIER: u8 = 3;

const SOLVE_INVERSE: u8 = 0;
const SOLVE_FACTOR: u8 = 1;

const PROV_PLAIN: u8 = 0;
const PROV_NOISY: u8 = 1;
const PROV_FABRICATED: u8 = 2;

pub fn save_kahm(model: &KahmModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_KAHM)?;
    write_kahm(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_kahm(path: impl AsRef<Path>) -> Result<KahmModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, KIND_KAHM)?;
    read_kahm(&mut r)
}

pub fn save_wide(model: &WideKahm, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, KIND_WIDE)?;
    write_wide(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_wide(path: impl AsRef<Path>) -> Result<WideKahm> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, KIND_WIDE)?;
    read_wide(&mut r)
}

pub fn save_classifier(model: &ClassifierModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_classifier_to(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_classifier_from(&mut r)
}

/// Serialize a classifier to any writer (used to check bit-exactness).
pub fn write_classifier_to(model: &ClassifierModel, w: &mut impl Write) -> Result<()> {
    write_header(w, KIND_CLASSIFIER)?;
    write_u64(w, model.class_models.len() as u64)?;
    for name in &model.class_names {
        write_string(w, name)?;
    }
    write_u64(w, model.subspace_dim as u64)?;
    write_u64(w, model.layers as u64)?;
    for &b in &model.branch_counts {
        write_u64(w, b as u64)?;
    }
    write_provenance(w, &model.provenance)?;
    for wide in &model.class_models {
        write_wide(w, wide)?;
    }
    Ok(())
}

pub fn read_classifier_from(r: &mut impl Read) -> Result<ClassifierModel> {
    read_header(r, KIND_CLASSIFIER)?;
    let c = read_u64(r)? as usize;
    if c < 2 {
        return Err(KahmError::Serialize("classifier with fewer than 2 classes".into()));
    }
    let mut class_names = Vec::with_capacity(c);
    for _ in 0..c {
        class_names.push(read_string(r)?);
    }
    let subspace_dim = read_u64(r)? as usize;
    let layers = read_u64(r)? as usize;
    let mut branch_counts = Vec::with_capacity(c);
    for _ in 0..c {
        branch_counts.push(read_u64(r)? as usize);
    }
    let provenance = read_provenance(r)?;
    let mut class_models = Vec::with_capacity(c);
    for _ in 0..c {
        class_models.push(read_wide(r)?);
    }
    Ok(ClassifierModel {
        class_models,
        class_names,
        subspace_dim,
        layers,
        branch_counts,
        provenance,
    })
}

fn write_header(w: &mut impl Write, kind: u8) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    Ok(())
}

fn read_header(r: &mut impl Read, expected_kind: u8) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(KahmError::Serialize("bad magic; not a model file".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(KahmError::Serialize(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    if kind[0] != expected_kind {
        return Err(KahmError::Serialize(format!(
            "model kind {} does not match expected {expected_kind}",
            kind[0]
        )));
    }
    Ok(())
}

fn write_kahm(w: &mut impl Write, model: &KahmModel) -> Result<()> {
    write_f64(w, model.lambda_star())?;
    let (tag, op_matrix): (u8, &DMatrix<f64>) = match model.solve_op() {
        SolveOp::Inverse(m) => (SOLVE_INVERSE, m),
        SolveOp::Factor(l) => (SOLVE_FACTOR, l),
    };
    w.write_all(&[tag])?;
    write_matrix(w, model.training_data().inner())?;
    write_matrix(w, model.encoding())?;
    write_matrix(w, model.shape().theta())?;
    write_matrix(w, op_matrix)?;
    Ok(())
}

fn read_kahm(r: &mut impl Read) -> Result<KahmModel> {
    let lambda_star = read_f64(r)?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let y = read_matrix(r)?;
    let encoding = read_matrix(r)?;
    let theta = read_matrix(r)?;
    let op_matrix = read_matrix(r)?;
    let solve_op = match tag[0] {
        SOLVE_INVERSE => SolveOp::Inverse(op_matrix),
        SOLVE_FACTOR => SolveOp::Factor(op_matrix),
        other => return Err(KahmError::Serialize(format!("unknown solve tag {other}"))),
    };
    KahmModel::rebuild(DataMatrix::new(y)?, encoding, theta, lambda_star, solve_op)
}

fn write_deep(w: &mut impl Write, deep: &DeepKahm) -> Result<()> {
    write_u64(w, deep.layer_count() as u64)?;
    for layer in deep.layers() {
        write_kahm(w, layer)?;
    }
    Ok(())
}

fn read_deep(r: &mut impl Read) -> Result<DeepKahm> {
    let l = read_u64(r)? as usize;
    if l == 0 {
        return Err(KahmError::Serialize("deep model with zero layers".into()));
    }
    let mut layers = Vec::with_capacity(l);
    for _ in 0..l {
        layers.push(read_kahm(r)?);
    }
    DeepKahm::from_layers(layers)
}

fn write_wide(w: &mut impl Write, wide: &WideKahm) -> Result<()> {
    write_u64(w, wide.branch_count() as u64)?;
    let partition = wide.partition();
    write_u64(w, partition.assignments.len() as u64)?;
    for &a in &partition.assignments {
        write_u64(w, a as u64)?;
    }
    for branch in wide.branches() {
        write_deep(w, branch)?;
    }
    Ok(())
}

fn read_wide(r: &mut impl Read) -> Result<WideKahm> {
    let s = read_u64(r)? as usize;
    let len = read_u64(r)? as usize;
    let mut assignments = Vec::with_capacity(len);
    for _ in 0..len {
        assignments.push(read_u64(r)? as usize);
    }
    let partition = Partition { assignments, cluster_count: s };
    let mut branches = Vec::with_capacity(s);
    for _ in 0..s {
        branches.push(read_deep(r)?);
    }
    WideKahm::from_parts(branches, partition)
}

fn write_provenance(w: &mut impl Write, p: &Provenance) -> Result<()> {
    match p {
        Provenance::Plain => w.write_all(&[PROV_PLAIN])?,
        Provenance::DpNoisy(spec) => {
            w.write_all(&[PROV_NOISY])?;
            write_spec(w, spec)?;
        }
        Provenance::DpFabricated(spec) => {
            w.write_all(&[PROV_FABRICATED])?;
            write_spec(w, spec)?;
        }
    }
    Ok(())
}

fn read_provenance(r: &mut impl Read) -> Result<Provenance> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    Ok(match tag[0] {
        PROV_PLAIN => Provenance::Plain,
        PROV_NOISY => Provenance::DpNoisy(read_spec(r)?),
        PROV_FABRICATED => Provenance::DpFabricated(read_spec(r)?),
        other => return Err(KahmError::Serialize(format!("unknown provenance tag {other}"))),
    })
}

fn write_spec(w: &mut impl Write, spec: &PrivacySpec) -> Result<()> {
    write_f64(w, spec.epsilon)?;
    write_f64(w, spec.delta)?;
    write_f64(w, spec.d)?;
    write_u64(w, spec.seed)?;
    Ok(())
}

fn read_spec(r: &mut impl Read) -> Result<PrivacySpec> {
    let epsilon = read_f64(r)?;
    let delta = read_f64(r)?;
    let d = read_f64(r)?;
    let seed = read_u64(r)?;
    PrivacySpec::new(epsilon, delta, d, seed)
}

fn write_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    write_u64(w, m.nrows() as u64)?;
    write_u64(w, m.ncols() as u64)?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write_f64(w, m[(i, j)])?;
        }
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<DMatrix<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 32) {
        return Err(KahmError::Serialize(format!("implausible matrix shape {rows}×{cols}")));
    }
    let mut data = vec![0.0f64; rows * cols];
    for v in data.iter_mut() {
        *v = read_f64(r)?;
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| data[i * cols + j]))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > (1 << 20) {
        return Err(KahmError::Serialize("implausible string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| KahmError::Serialize(e.to_string()))
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
