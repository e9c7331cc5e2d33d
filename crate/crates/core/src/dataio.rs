//! Dataset loading, category-wise splits, synthetic task families,
//! standardization and the PCA baseline embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A labeled collection of instances; one loaded dataset plays the role of
/// one task collection.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Original label string for each contiguous id.
    pub label_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, x: Tensor, y: Vec<usize>, label_names: Vec<String>) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(Error::Contract(format!(
                "features {:?} do not match {} labels",
                x.shape(),
                y.len()
            )));
        }
        let ds = LabeledDataset { name: name.into(), x, y, label_names };
        for rows in ds.category_rows() {
            if rows.is_empty() {
                return Err(Error::Contract("every category must have at least one instance".into()));
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn n_categories(&self) -> usize {
        self.label_names.len()
    }

    /// Row ids per contiguous category id.
    pub fn category_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_categories()];
        for (i, &c) in self.y.iter().enumerate() {
            rows[c].push(i);
        }
        rows
    }

    pub fn subset(&self, rows: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.dim());
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            data.extend_from_slice(self.x.row(i));
            labels.push(self.y[i]);
        }
        // remap to contiguous ids preserving first-appearance order
        let mut mapping: BTreeMap<usize, usize> = BTreeMap::new();
        let mut names = Vec::new();
        let mut remapped = Vec::with_capacity(labels.len());
        for &old in &labels {
            let next = mapping.len();
            let id = *mapping.entry(old).or_insert(next);
            if id == names.len() {
                names.push(self.label_names[old].clone());
            }
            remapped.push(id);
        }
        LabeledDataset::new(name, Tensor::matrix(rows.len(), self.dim(), data)?, remapped, names)
    }
}

// ---- CSV ---------------------------------------------------------------

/// Load a labeled CSV: header row, numeric feature columns, one column
/// named "label". Labels map to contiguous ids in order of first
/// appearance; row order is preserved.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let name = path.as_ref().file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let text = std::fs::read_to_string(&path)?;
    parse_csv(&text, name, true).map(|(ds, _)| ds)
}

/// Load features only; a "label" column, when present, is skipped.
pub fn load_features_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let text = std::fs::read_to_string(&path)?;
    let (ds, _) = parse_csv(&text, String::new(), false)?;
    Ok(ds.x)
}

fn parse_csv(text: &str, name: String, require_label: bool) -> Result<(LabeledDataset, usize)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, detail: "empty file".into() })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = columns.iter().position(|&c| c == "label");
    if require_label && label_col.is_none() {
        return Err(Error::Parse { line: 1, detail: "missing required column \"label\"".into() });
    }
    let feature_cols: Vec<usize> =
        (0..columns.len()).filter(|i| Some(*i) != label_col).collect();
    if feature_cols.is_empty() {
        return Err(Error::Parse { line: 1, detail: "no feature columns".into() });
    }

    let mut data = Vec::new();
    let mut labels_raw: Vec<String> = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("expected {} cells, found {}", columns.len(), cells.len()),
            });
        }
        for &c in &feature_cols {
            let v: f64 = cells[c].parse().map_err(|_| Error::Parse {
                line: lineno,
                detail: format!("non-numeric feature cell {:?} in column {:?}", cells[c], columns[c]),
            })?;
            data.push(v);
        }
        if let Some(lc) = label_col {
            labels_raw.push(cells[lc].to_string());
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse { line: 1, detail: "no data rows".into() });
    }

    let d = feature_cols.len();
    let x = Tensor::matrix(n, d, data)?;
    let (y, label_names) = if label_col.is_some() {
        let mut mapping: BTreeMap<String, usize> = BTreeMap::new();
        let mut names = Vec::new();
        let mut y = Vec::with_capacity(n);
        for raw in labels_raw {
            let next = mapping.len();
            let id = *mapping.entry(raw.clone()).or_insert(next);
            if id == names.len() {
                names.push(raw);
            }
            y.push(id);
        }
        (y, names)
    } else {
        (vec![0; n], vec!["0".to_string()])
    };
    Ok((LabeledDataset { name, x, y, label_names }, d))
}

pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let d = ds.dim();
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("f{},", j));
    }
    out.push_str("label\n");
    for i in 0..ds.n() {
        for &v in ds.x.row(i) {
            out.push_str(&format!("{}", FmtFloat(v)));
            out.push(',');
        }
        out.push_str(&ds.label_names[ds.y[i]]);
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_csv_string(ds))?;
    Ok(())
}

/// Prints floats with enough digits (17 significant) to round-trip exactly.
struct FmtFloat(f64);

impl std::fmt::Display for FmtFloat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0 == self.0.trunc() && self.0.abs() < 1e15 {
            write!(f, "{:.1}", self.0)
        } else {
            write!(f, "{:.16e}", self.0)
        }
    }
}

// ---- category splits ------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.6, validation_fraction: 0.2, test_fraction: 0.2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    /// category name -> split name
    pub manifest: BTreeMap<String, String>,
}

/// Category-wise split: categories are shuffled by seed and partitioned by
/// count with remainders going to train; no category spans splits.
pub fn split_by_category(ds: &LabeledDataset, spec: &SplitSpec) -> Result<DatasetSplits> {
    let fr = [spec.train_fraction, spec.validation_fraction, spec.test_fraction];
    if fr.iter().any(|&f| f <= 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {:?} must be positive and sum to 1", fr)));
    }
    let k = ds.n_categories();
    if k < 5 {
        return Err(Error::Contract(format!(
            "split_by_category requires at least 5 categories, got {}",
            k
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    let mut rng = crate::rng::seeded(spec.seed);
    order.shuffle(&mut rng);

    let n_val = (spec.validation_fraction * k as f64).floor() as usize;
    let n_test = (spec.test_fraction * k as f64).floor() as usize;
    let n_train = k - n_val - n_test;

    let rows_by_cat = ds.category_rows();
    let mut manifest = BTreeMap::new();
    let mut collect = |cats: &[usize], split: &str| -> Vec<usize> {
        let mut rows = Vec::new();
        for &c in cats {
            manifest.insert(ds.label_names[c].clone(), split.to_string());
            rows.extend_from_slice(&rows_by_cat[c]);
        }
        rows.sort_unstable();
        rows
    };
    let train_rows = collect(&order[..n_train], "train");
    let val_rows = collect(&order[n_train..n_train + n_val], "validation");
    let test_rows = collect(&order[n_train + n_val..], "test");

    Ok(DatasetSplits {
        train: ds.subset(&train_rows, format!("{}-train", ds.name))?,
        validation: ds.subset(&val_rows, format!("{}-validation", ds.name))?,
        test: ds.subset(&test_rows, format!("{}-test", ds.name))?,
        manifest,
    })
}

// ---- synthetic families -----------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticFamily {
    Blobs,
    ScrambledBlobs,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub family: SyntheticFamily,
    pub categories: usize,
    pub per_category: usize,
    pub ambient_dim: usize,
    /// Minimum pairwise distance between category means, in units of the
    /// unit within-category standard deviation.
    pub separation: f64,
    pub scramble_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            family: SyntheticFamily::Blobs,
            categories: 10,
            per_category: 20,
            ambient_dim: 4,
            separation: 10.0,
            scramble_seed: 0,
        }
    }
}

const MEAN_REJECTION_LIMIT: usize = 100_000;
/// Hypercube side in separation units is capped; scale is arbitrary once
/// features are standardized, and a bounded box keeps the rejection
/// sampler honest about genuinely infeasible packings.
const MAX_SIDE_FACTOR: f64 = 32.0;
/// Radius the blob cloud is scaled to before the cubic scrambling map.
const SCRAMBLE_RADIUS: f64 = 3.0;

/// Blobs: category means rejected-sampled in a hypercube at pairwise
/// distance >= separation, unit-variance Gaussian instances around them.
/// Scrambled blobs push the same cloud through a fixed invertible map
/// (rotation, elementwise cubic, rotation) so raw Euclidean clustering
/// degrades while an encoder can learn to undo it.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    if !(spec.separation > 0.0) || spec.ambient_dim < 2 {
        return Err(Error::Config(
            "synthetic spec requires separation > 0 and ambient_dim >= 2".into(),
        ));
    }
    if spec.categories == 0 || spec.per_category == 0 {
        return Err(Error::Config("categories and per_category must be >= 1".into()));
    }
    let mut rng = crate::rng::seeded(seed);
    let d = spec.ambient_dim;
    let factor = ((spec.categories as f64).powf(1.0 / d as f64) * 2.0).min(MAX_SIDE_FACTOR);
    let side = spec.separation * factor;
    let means = place_means(&mut rng, spec.categories, d, side, spec.separation)?;

    let n = spec.categories * spec.per_category;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_category {
            let row: Vec<f64> = mean
                .iter()
                .map(|&m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            rows.push(row);
            y.push(c);
        }
    }

    if spec.family == SyntheticFamily::ScrambledBlobs {
        scramble_in_place(&mut rows, d, spec.scramble_seed);
    }

    let label_names = (0..spec.categories).map(|c| format!("c{}", c)).collect();
    let x = Tensor::from_rows(&rows)?;
    LabeledDataset::new(format!("{:?}", spec.family).to_lowercase(), x, y, label_names)
}

fn place_means(
    rng: &mut ChaCha8Rng,
    categories: usize,
    d: usize,
    side: f64,
    separation: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(categories);
    let mut attempts = 0usize;
    while means.len() < categories {
        attempts += 1;
        if attempts > MEAN_REJECTION_LIMIT {
            return Err(Error::Infeasible(format!(
                "could not place {} means at separation {} within {} attempts",
                categories, separation, MEAN_REJECTION_LIMIT
            )));
        }
        let candidate: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * side).collect();
        let ok = means.iter().all(|m| {
            let d2: f64 = m.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= separation
        });
        if ok {
            means.push(candidate);
        }
    }
    Ok(means)
}

fn scramble_in_place(rows: &mut [Vec<f64>], d: usize, scramble_seed: u64) {
    // center and scale to a fixed radius so the cubic acts across its
    // curved range
    let n = rows.len() as f64;
    let mut center = vec![0.0; d];
    for row in rows.iter() {
        for (c, &v) in center.iter_mut().zip(row) {
            *c += v / n;
        }
    }
    let mut rms = 0.0;
    for row in rows.iter() {
        for (c, &v) in center.iter().zip(row) {
            rms += (v - c) * (v - c);
        }
    }
    rms = (rms / n).sqrt();
    let scale = SCRAMBLE_RADIUS / rms.max(1e-12);

    let q1 = random_rotation(d, scramble_seed.wrapping_add(1));
    let q2 = random_rotation(d, scramble_seed.wrapping_add(2));
    for row in rows.iter_mut() {
        let centered: Vec<f64> =
            row.iter().zip(&center).map(|(&v, &c)| (v - c) * scale).collect();
        let r1 = mat_vec(&q1, &centered);
        let cubed: Vec<f64> = r1.iter().map(|&v| v * v * v).collect();
        *row = mat_vec(&q2, &cubed);
    }
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(&a, &b)| a * b).sum()).collect()
}

/// Haar-ish random rotation from the QR factorization of a Gaussian matrix.
fn random_rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = crate::rng::seeded(seed);
    let gauss = nalgebra::DMatrix::from_fn(d, d, |_, _| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    (0..d).map(|i| (0..d).map(|j| q[(i, j)]).collect()).collect()
}

// ---- standardization ---------------------------------------------------------

/// Per-feature affine transform fitted on the training split only.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(Error::Contract("standardize requires N >= 2".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (s, (&v, &m)) in var.iter_mut().zip(x.row(i).iter().zip(&mean)) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let std = var.into_iter().map(f64::sqrt).collect();
        Ok(Standardizer { mean, std })
    }

    /// Zero-variance features map to 0.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = (x.rows(), x.cols());
        if d != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("{} features, transform fitted on {}", d, self.mean.len()),
            ));
        }
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for ((&v, &m), &s) in x.row(i).iter().zip(&self.mean).zip(&self.std) {
                data.push(if s > 0.0 { (v - m) / s } else { 0.0 });
            }
        }
        Tensor::matrix(n, d, data)
    }
}

// ---- PCA baseline --------------------------------------------------------------

/// Principal directions of the centered training matrix.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// dims x D projection rows, ordered by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &Tensor, dims: usize) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if dims == 0 || dims > n.min(d) {
            return Err(Error::Contract(format!(
                "pca dims {} must be in [1, min(N={}, D={})]",
                dims, n, d
            )));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let row = x.row(i);
            for a in 0..d {
                let va = row[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += va * (row[b] - mean[b]);
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());

        let mut components = Vec::with_capacity(dims);
        let mut explained = Vec::with_capacity(dims);
        for &idx in order.iter().take(dims) {
            let col = eig.eigenvectors.column(idx);
            let mut v: Vec<f64> = col.iter().copied().collect();
            // deterministic sign: largest-magnitude entry positive
            let lead = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            if v[lead] < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
            components.push(v);
            explained.push(eig.eigenvalues[idx].max(0.0));
        }
        Ok(Pca { mean, components, explained_variance: explained })
    }

    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = (x.rows(), x.cols());
        if d != self.mean.len() {
            return Err(Error::shape(
                "pca_project",
                format!("{} features, projection fitted on {}", d, self.mean.len()),
            ));
        }
        let dims = self.components.len();
        let mut data = Vec::with_capacity(n * dims);
        for i in 0..n {
            let row = x.row(i);
            for comp in &self.components {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += (row[j] - self.mean[j]) * comp[j];
                }
                data.push(acc);
            }
        }
        Tensor::matrix(n, dims, data)
    }

    /// Reconstruct from the projected coordinates (for subspace tests).
    pub fn reconstruct(&self, proj: &Tensor) -> Result<Tensor> {
        let n = proj.rows();
        let d = self.mean.len();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for (c, comp) in self.components.iter().enumerate() {
                let w = proj.get2(i, c);
                for j in 0..d {
                    data[i * d + j] += w * comp[j];
                }
            }
            for j in 0..d {
                data[i * d + j] += self.mean[j];
            }
        }
        Tensor::matrix(n, d, data)
    }
}
