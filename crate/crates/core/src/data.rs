//! Original and synthetic datasets: generators, invariants, and the on-disk
//! bundle format (a `manifest.json` plus one CSV per matrix).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HcdcError, Result};
use crate::filters::cyclic_shift;
use crate::linalg::{gaussian, seeded_rng, Mat};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "hcdc-bundle";
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Graph,
    CyclicSignal,
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Original data `(A, X, Y, splits)`. Targets are always an `n x K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub adjacency: Mat,
    pub features: Mat,
    pub targets: Mat,
    pub split_train: Vec<usize>,
    pub split_val: Vec<usize>,
    pub split_test: Vec<usize>,
    pub kind: DatasetKind,
}

impl GraphDataset {
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.targets.ncols()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.split_train,
            Split::Val => &self.split_val,
            Split::Test => &self.split_test,
        }
    }

    /// Checks every invariant; train and val must be nonempty.
    pub fn validate(&self) -> Result<()> {
        self.validate_inner(true)
    }

    /// Same as [`validate`](Self::validate) but tolerates an empty val split
    /// (condensed training sets carry no validation nodes).
    pub fn validate_allow_empty_val(&self) -> Result<()> {
        self.validate_inner(false)
    }

    fn validate_inner(&self, require_val: bool) -> Result<()> {
        let n = self.n();
        if self.adjacency.nrows() != n || self.adjacency.ncols() != n {
            return Err(HcdcError::InvalidDataset(format!(
                "adjacency is {}x{}, expected {n}x{n}",
                self.adjacency.nrows(),
                self.adjacency.ncols()
            )));
        }
        if self.targets.nrows() != n {
            return Err(HcdcError::InvalidDataset(format!(
                "targets have {} rows, features have {n}",
                self.targets.nrows()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let a = self.adjacency[(i, j)];
                if !(a >= 0.0) {
                    return Err(HcdcError::InvalidDataset(format!(
                        "adjacency entry ({i},{j}) = {a} is negative or NaN"
                    )));
                }
                if (a - self.adjacency[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(HcdcError::InvalidDataset(format!(
                        "adjacency not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        if self.split_train.is_empty() {
            return Err(HcdcError::EmptySplit("train"));
        }
        if require_val && self.split_val.is_empty() {
            return Err(HcdcError::EmptySplit("val"));
        }
        let mut seen = BTreeSet::new();
        for &i in self
            .split_train
            .iter()
            .chain(&self.split_val)
            .chain(&self.split_test)
        {
            if i >= n {
                return Err(HcdcError::InvalidDataset(format!(
                    "split index {i} out of range for n = {n}"
                )));
            }
            if !seen.insert(i) {
                return Err(HcdcError::InvalidDataset(format!(
                    "index {i} appears in more than one split position"
                )));
            }
        }
        Ok(())
    }

    /// Row-argmax class labels when the targets are one-hot, `None` otherwise.
    pub fn class_labels(&self) -> Option<Vec<usize>> {
        one_hot_labels(&self.targets)
    }
}

pub fn one_hot_labels(targets: &Mat) -> Option<Vec<usize>> {
    if targets.ncols() < 2 {
        return None;
    }
    let mut labels = Vec::with_capacity(targets.nrows());
    for r in 0..targets.nrows() {
        let row = targets.row(r);
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return None;
        }
        labels.push(row.iter().position(|v| *v == 1.0).unwrap());
    }
    Some(labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Learnable {
    pub adjacency: bool,
    pub features: bool,
    pub targets: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub config_hash: String,
}

/// Condensed data `S = (A', X', Y', splits)`; the test split is always empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub data: GraphDataset,
    pub identity_adjacency: bool,
    pub learnable: Learnable,
    pub provenance: Option<Provenance>,
}

impl SyntheticDataset {
    pub fn c(&self) -> usize {
        self.data.n()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate_allow_empty_val()?;
        if !self.data.split_test.is_empty() {
            return Err(HcdcError::InvalidDataset(
                "synthetic datasets have no test split".into(),
            ));
        }
        if self.data.split_train.len() + self.data.split_val.len() != self.c() {
            return Err(HcdcError::InvalidDataset(
                "synthetic train and val splits must cover every node".into(),
            ));
        }
        if self.identity_adjacency && self.data.adjacency != Mat::identity(self.c(), self.c()) {
            return Err(HcdcError::InvalidDataset(
                "identity flag set but adjacency differs from I".into(),
            ));
        }
        Ok(())
    }

    /// Full invariant check including `c < n` for the paired original.
    pub fn validate_against(&self, original: &GraphDataset) -> Result<()> {
        self.validate()?;
        if self.c() >= original.n() {
            return Err(HcdcError::InvalidDataset(format!(
                "condensed size {} is not below original size {}",
                self.c(),
                original.n()
            )));
        }
        if self.data.d() != original.d() || self.data.outputs() != original.outputs() {
            return Err(HcdcError::InvalidDataset(
                "feature or target width differs from the original".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub n: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub d: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Shuffled 60/20/20 split; train and val get at least one index each.
fn standard_splits(n: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = (n * 6 / 10).max(1).min(n);
    let n_val = (n * 2 / 10).max(1).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

/// Planted-partition graph with block-mean features and one-hot targets.
pub fn gen_sbm(cfg: &SbmConfig) -> Result<GraphDataset> {
    let SbmConfig {
        n,
        blocks,
        p_in,
        p_out,
        d,
        noise,
        seed,
    } = *cfg;
    if !(0.0 <= p_out && p_out < p_in && p_in <= 1.0) {
        return Err(HcdcError::InvalidArgument(format!(
            "need 0 <= p_out < p_in <= 1, got p_in = {p_in}, p_out = {p_out}"
        )));
    }
    if blocks == 0 || n == 0 || n % blocks != 0 {
        return Err(HcdcError::InvalidArgument(format!(
            "blocks = {blocks} must divide n = {n}"
        )));
    }
    if d == 0 || !(noise >= 0.0) {
        return Err(HcdcError::InvalidArgument("d must be positive and noise >= 0".into()));
    }
    let mut rng = seeded_rng(seed);
    let size = n / blocks;
    let block = |i: usize| i / size;

    let mut adjacency = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block(i) == block(j) { p_in } else { p_out };
            let u: f64 = rng.random();
            if u < p {
                adjacency[(i, j)] = 1.0;
                adjacency[(j, i)] = 1.0;
            }
        }
    }
    let means = gaussian(&mut rng, blocks, d, 1.0);
    let jitter = gaussian(&mut rng, n, d, noise);
    let features = Mat::from_fn(n, d, |i, j| means[(block(i), j)] + jitter[(i, j)]);
    let targets = Mat::from_fn(n, blocks, |i, k| if block(i) == k { 1.0 } else { 0.0 });
    let (split_train, split_val, split_test) = standard_splits(n, &mut rng);
    let ds = GraphDataset {
        adjacency,
        features,
        targets,
        split_train,
        split_val,
        split_test,
        kind: DatasetKind::Graph,
    };
    ds.validate()?;
    Ok(ds)
}

/// Undirected cycle adjacency `P + P^T` (entries clipped to 1).
pub fn cycle_adjacency(n: usize) -> Mat {
    Mat::from_fn(n, n, |i, j| {
        if n > 1 && i != j && ((i + 1) % n == j || (j + 1) % n == i) {
            1.0
        } else {
            0.0
        }
    })
}

/// Cyclic 1-D signal `y = (sum_k kernel_k P^k) X w_true + noise` with
/// `k = -K..=K` and a kernel of length `2K + 1`.
pub fn gen_cyclic_signal(n: usize, d: usize, kernel: &[f64], noise: f64, seed: u64) -> Result<GraphDataset> {
    if kernel.len().is_multiple_of(2) {
        return Err(HcdcError::InvalidArgument(
            "kernel length must be odd (2K+1)".into(),
        ));
    }
    if kernel.len() > n {
        return Err(HcdcError::InvalidArgument(format!(
            "kernel of length {} is longer than the signal (n = {n})",
            kernel.len()
        )));
    }
    if d == 0 || !(noise >= 0.0) {
        return Err(HcdcError::InvalidArgument("d must be positive and noise >= 0".into()));
    }
    let half = (kernel.len() / 2) as i64;
    let mut rng = seeded_rng(seed);
    let features = gaussian(&mut rng, n, d, 1.0);
    let w_true = gaussian(&mut rng, d, 1, 1.0);
    let base = &features * &w_true;
    let mut targets = Mat::zeros(n, 1);
    for (j, coef) in kernel.iter().enumerate() {
        let shift = cyclic_shift(n, j as i64 - half)?;
        targets += (&shift * &base) * *coef;
    }
    targets += gaussian(&mut rng, n, 1, noise);
    let (split_train, split_val, split_test) = standard_splits(n, &mut rng);
    let ds = GraphDataset {
        adjacency: cycle_adjacency(n),
        features,
        targets,
        split_train,
        split_val,
        split_test,
        kind: DatasetKind::CyclicSignal,
    };
    ds.validate()?;
    Ok(ds)
}

/// The weight vector drawn by [`gen_cyclic_signal`] for a given seed.
pub fn cyclic_signal_weights(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = seeded_rng(seed);
    let _ = gaussian(&mut rng, n, d, 1.0);
    gaussian(&mut rng, d, 1, 1.0)
}

/// Sample `count` indices from `pool`, balanced across `labels` when given.
/// Each class receives `count / classes` picks, with the remainder going to
/// the lowest class ids.
pub fn sample_balanced(
    pool: &[usize],
    labels: Option<&[usize]>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if count > pool.len() {
        return Err(HcdcError::InvalidArgument(format!(
            "cannot sample {count} nodes from a pool of {}",
            pool.len()
        )));
    }
    let Some(labels) = labels else {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        p.truncate(count);
        return Ok(p);
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in pool {
        by_class[labels[i]].push(i);
    }
    let mut out = Vec::with_capacity(count);
    for (k, members) in by_class.iter_mut().enumerate() {
        let want = count / classes + usize::from(k < count % classes);
        if members.len() < want {
            return Err(HcdcError::InvalidArgument(format!(
                "class {k} has {} candidates, {want} needed for a balanced sample",
                members.len()
            )));
        }
        members.shuffle(rng);
        out.extend_from_slice(&members[..want]);
    }
    Ok(out)
}

/// Induced sub-dataset on `train` followed by `val` nodes of `ds`.
pub fn induced_subset(ds: &GraphDataset, train: &[usize], val: &[usize]) -> GraphDataset {
    let nodes: Vec<usize> = train.iter().chain(val).copied().collect();
    let c = nodes.len();
    GraphDataset {
        adjacency: Mat::from_fn(c, c, |i, j| ds.adjacency[(nodes[i], nodes[j])]),
        features: Mat::from_fn(c, ds.d(), |i, j| ds.features[(nodes[i], j)]),
        targets: Mat::from_fn(c, ds.outputs(), |i, j| ds.targets[(nodes[i], j)]),
        split_train: (0..train.len()).collect(),
        split_val: (train.len()..c).collect(),
        split_test: Vec::new(),
        kind: ds.kind,
    }
}

// ---------------------------------------------------------------------------
// Bundle I/O
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFiles {
    adjacency: String,
    features: String,
    targets: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticMeta {
    identity_adjacency: bool,
    learnable: Learnable,
    provenance: Option<Provenance>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    kind: DatasetKind,
    dtype: String,
    n: usize,
    d: usize,
    k: usize,
    split_train: Vec<usize>,
    split_val: Vec<usize>,
    split_test: Vec<usize>,
    files: ManifestFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticMeta>,
}

fn write_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| HcdcError::Csv {
            path: path.into(),
            message: e.to_string(),
        })?;
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])).collect();
        w.write_record(&row).map_err(|e| HcdcError::Csv {
            path: path.into(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| HcdcError::io(path, e))
}

fn read_csv(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let name = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| HcdcError::Csv {
            path: path.into(),
            message: e.to_string(),
        })?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut count = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HcdcError::Csv {
            path: path.into(),
            message: e.to_string(),
        })?;
        if rec.len() != cols {
            return Err(HcdcError::DimensionMismatch {
                file: name,
                expected: format!("{cols} columns"),
                actual: format!("{} columns in row {count}", rec.len()),
            });
        }
        for cell in rec.iter() {
            let v: f64 = cell.trim().parse().map_err(|_| HcdcError::Csv {
                path: path.into(),
                message: format!("unparseable cell `{cell}` in row {count}"),
            })?;
            data.push(v);
        }
        count += 1;
    }
    if count != rows {
        return Err(HcdcError::DimensionMismatch {
            file: name,
            expected: format!("{rows} rows"),
            actual: format!("{count} rows"),
        });
    }
    Ok(Mat::from_row_slice(rows, cols, &data))
}

fn write_bundle(ds: &GraphDataset, dir: &Path, synthetic: Option<SyntheticMeta>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HcdcError::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        kind: ds.kind,
        dtype: "f64".into(),
        n: ds.n(),
        d: ds.d(),
        k: ds.outputs(),
        split_train: ds.split_train.clone(),
        split_val: ds.split_val.clone(),
        split_test: ds.split_test.clone(),
        files: ManifestFiles {
            adjacency: "adjacency.csv".into(),
            features: "features.csv".into(),
            targets: "targets.csv".into(),
        },
        synthetic,
    };
    write_csv(&dir.join(&manifest.files.adjacency), &ds.adjacency)?;
    write_csv(&dir.join(&manifest.files.features), &ds.features)?;
    write_csv(&dir.join(&manifest.files.targets), &ds.targets)?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| HcdcError::io(path, e))
}

fn read_bundle(dir: &Path) -> Result<(GraphDataset, Option<SyntheticMeta>)> {
    let path: PathBuf = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(HcdcError::MissingManifest(dir.into()));
    }
    let text = fs::read_to_string(&path).map_err(|e| HcdcError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| HcdcError::BadManifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format != FORMAT || manifest.dtype != "f64" {
        return Err(HcdcError::BadManifest {
            path,
            message: format!(
                "unsupported format `{}` / dtype `{}`",
                manifest.format, manifest.dtype
            ),
        });
    }
    let (n, d, k) = (manifest.n, manifest.d, manifest.k);
    let ds = GraphDataset {
        adjacency: read_csv(&dir.join(&manifest.files.adjacency), n, n)?,
        features: read_csv(&dir.join(&manifest.files.features), n, d)?,
        targets: read_csv(&dir.join(&manifest.files.targets), n, k)?,
        split_train: manifest.split_train,
        split_val: manifest.split_val,
        split_test: manifest.split_test,
        kind: manifest.kind,
    };
    Ok((ds, manifest.synthetic))
}

pub fn save_dataset(ds: &GraphDataset, dir: impl AsRef<Path>) -> Result<()> {
    write_bundle(ds, dir.as_ref(), None)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    let (ds, _) = read_bundle(dir.as_ref())?;
    ds.validate()?;
    Ok(ds)
}

pub fn save_synthetic(s: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<()> {
    let meta = SyntheticMeta {
        identity_adjacency: s.identity_adjacency,
        learnable: s.learnable,
        provenance: s.provenance.clone(),
    };
    write_bundle(&s.data, dir.as_ref(), Some(meta))
}

pub fn load_synthetic(dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let dir = dir.as_ref();
    let (data, meta) = read_bundle(dir)?;
    let meta = meta.ok_or_else(|| HcdcError::BadManifest {
        path: dir.join(MANIFEST),
        message: "bundle has no `synthetic` section".into(),
    })?;
    let s = SyntheticDataset {
        data,
        identity_adjacency: meta.identity_adjacency,
        learnable: meta.learnable,
        provenance: meta.provenance,
    };
    s.validate()?;
    Ok(s)
}
