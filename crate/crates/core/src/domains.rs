//! Synthetic multi-domain datasets and the sampling utilities built on them.
//!
//! Domains of the same family differ only by a known transformation
//! (a rotation for the moons family, a translation for the Gaussian family),
//! so the amount of domain shift is under the caller's control.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seeding::stream_rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A labelled minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[LabeledBatch]) -> Result<LabeledBatch> {
        let xs: Vec<&Matrix> = parts.iter().map(|b| &b.x).collect();
        Ok(LabeledBatch {
            x: Matrix::vstack(&xs)?,
            y: parts.iter().flat_map(|b| b.y.iter().copied()).collect(),
        })
    }
}

/// Labelled samples of one domain. `indices` records each row's position in
/// the generator output so that subsets can be checked for overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    x: Matrix,
    y: Vec<usize>,
    num_classes: usize,
    domain_tag: String,
    split: Split,
    indices: Vec<usize>,
}

/// The same rows as a [`DomainDataset`] with the labels removed.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledView {
    x: Matrix,
    domain_tag: String,
    split: Split,
    indices: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        x: Matrix,
        y: Vec<usize>,
        num_classes: usize,
        domain_tag: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        let indices = (0..y.len()).collect();
        Self::with_indices(x, y, num_classes, domain_tag, split, indices)
    }

    pub fn with_indices(
        x: Matrix,
        y: Vec<usize>,
        num_classes: usize,
        domain_tag: impl Into<String>,
        split: Split,
        indices: Vec<usize>,
    ) -> Result<Self> {
        ensure!(
            x.rows() == y.len() && indices.len() == y.len(),
            "dataset has {} rows, {} labels and {} indices",
            x.rows(),
            y.len(),
            indices.len()
        );
        ensure!(
            num_classes >= 2,
            "need at least 2 classes, got {num_classes}"
        );
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        ensure!(x.is_finite(), "dataset contains non-finite inputs");
        Ok(DomainDataset {
            x,
            y,
            num_classes,
            domain_tag: domain_tag.into(),
            split,
            indices,
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn unlabeled(&self) -> UnlabeledView {
        UnlabeledView {
            x: self.x.clone(),
            domain_tag: self.domain_tag.clone(),
            split: self.split,
            indices: self.indices.clone(),
        }
    }

    /// Rows at the given positions (positions into this dataset, not provenance ids).
    pub fn batch(&self, rows: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    pub fn as_batch(&self) -> LabeledBatch {
        LabeledBatch {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }

    fn subset(&self, rows: &[usize]) -> DomainDataset {
        DomainDataset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            num_classes: self.num_classes,
            domain_tag: self.domain_tag.clone(),
            split: self.split,
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        }
    }

    /// True when both datasets contain a common sample of the same generated split.
    pub fn overlaps(&self, other_tag: &str, other_split: Split, other_indices: &[usize]) -> bool {
        if self.domain_tag != other_tag || self.split != other_split {
            return false;
        }
        let mine: BTreeSet<_> = self.indices.iter().collect();
        other_indices.iter().any(|i| mine.contains(i))
    }

    /// Writes `x1..xd, y, domain_tag, split` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(path, &self.x, Some(&self.y), &self.domain_tag, self.split)
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<DomainDataset> {
        let rows = read_csv_rows(path)?;
        let y = rows
            .labels
            .into_iter()
            .map(|l| {
                l.ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    detail: "row without a label in a labelled dataset".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DomainDataset::new(rows.x, y, num_classes, rows.tag, rows.split)
    }
}

impl UnlabeledView {
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn batch(&self, rows: &[usize]) -> Matrix {
        self.x.select_rows(rows)
    }

    /// Same columns as the labelled form with an empty `y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(path, &self.x, None, &self.domain_tag, self.split)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv_rows(
    path: &Path,
    x: &Matrix,
    y: Option<&[usize]>,
    tag: &str,
    split: Split,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=x.cols()).map(|i| format!("x{i}")).collect();
    header.extend(["y".into(), "domain_tag".into(), "split".into()]);
    w.write_record(&header)?;
    for r in 0..x.rows() {
        let mut rec: Vec<String> = x.row(r).iter().map(|&v| fmt_f64(v)).collect();
        rec.push(y.map(|y| y[r].to_string()).unwrap_or_default());
        rec.push(tag.to_string());
        rec.push(split.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct CsvRows {
    x: Matrix,
    labels: Vec<Option<usize>>,
    tag: String,
    split: Split,
}

fn read_csv_rows(path: &Path) -> Result<CsvRows> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with('x')).count();
    let expected: Vec<String> = (1..=d)
        .map(|i| format!("x{i}"))
        .chain(["y".into(), "domain_tag".into(), "split".into()])
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut tag = None;
    let mut split = None;
    for rec in r.records() {
        let rec = rec?;
        for v in rec.iter().take(d) {
            data.push(
                v.parse::<f64>()
                    .map_err(|e| bad(format!("bad number {v:?}: {e}")))?,
            );
        }
        let y = &rec[d];
        labels.push(if y.is_empty() {
            None
        } else {
            Some(
                y.parse()
                    .map_err(|e| bad(format!("bad label {y:?}: {e}")))?,
            )
        });
        let row_tag = rec[d + 1].to_string();
        let row_split = match &rec[d + 2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("bad split {other:?}"))),
        };
        if tag.get_or_insert_with(|| row_tag.clone()) != &row_tag
            || *split.get_or_insert(row_split) != row_split
        {
            return Err(bad("mixed domain tags or splits in one file".into()));
        }
    }
    let n = labels.len();
    Ok(CsvRows {
        x: Matrix::from_vec(n, d, data)?,
        labels,
        tag: tag.unwrap_or_default(),
        split: split.unwrap_or(Split::Train),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoonsSpec {
    pub rotation_deg: f64,
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Two interleaved half circles with Gaussian noise, rotated about the origin.
///
/// Class 0 lies on `(cos t, sin t)` and class 1 on `(1 - cos t, 0.5 - sin t)`
/// for `t` uniform on `[0, pi]`. Train and test draw from disjoint substreams
/// of `spec.seed`.
pub fn gen_rotated_moons(spec: &MoonsSpec, split: Split) -> Result<DomainDataset> {
    ensure!(
        spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite(),
        "noise_sigma must be >= 0, got {}",
        spec.noise_sigma
    );
    let mut rng = stream_rng(spec.seed, split.stream());
    let n = spec.n_per_class;
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();
    let mut data = Vec::with_capacity(4 * n);
    let mut y = Vec::with_capacity(2 * n);
    for class in 0..2usize {
        for _ in 0..n {
            let t = rng.random_range(0.0..=PI);
            let (px, py) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let ex: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            let (px, py) = (px + spec.noise_sigma * ex, py + spec.noise_sigma * ey);
            data.push(cos * px - sin * py);
            data.push(sin * px + cos * py);
            y.push(class);
        }
    }
    let x = Matrix::from_vec(2 * n, 2, data)?;
    DomainDataset::new(x, y, 2, format!("moons-{}", spec.rotation_deg), split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussShiftSpec {
    pub class_means: Vec<Vec<f64>>,
    pub domain_offset: Vec<f64>,
    pub cov_scale: f64,
    pub n_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub tag: Option<String>,
}

/// Class-conditional isotropic Gaussians `N(mean_k + offset, cov_scale * I)`.
pub fn gen_gaussian_shift(spec: &GaussShiftSpec, split: Split) -> Result<DomainDataset> {
    let k = spec.class_means.len();
    ensure!(k >= 2, "need at least 2 class means, got {k}");
    let d = spec.domain_offset.len();
    ensure!(
        spec.class_means.iter().all(|m| m.len() == d),
        "class means must all have dimension {d}"
    );
    ensure!(
        spec.cov_scale > 0.0 && spec.cov_scale.is_finite(),
        "cov_scale must be > 0, got {}",
        spec.cov_scale
    );
    for a in 0..k {
        for b in a + 1..k {
            ensure!(
                spec.class_means[a] != spec.class_means[b],
                "class means {a} and {b} coincide"
            );
        }
    }
    let mut rng = stream_rng(spec.seed, split.stream());
    let noise = Normal::new(0.0, spec.cov_scale.sqrt()).expect("positive std");
    let mut data = Vec::with_capacity(k * spec.n_per_class * d);
    let mut y = Vec::with_capacity(k * spec.n_per_class);
    for (class, mean) in spec.class_means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for (m, o) in mean.iter().zip(&spec.domain_offset) {
                data.push(m + o + noise.sample(&mut rng));
            }
            y.push(class);
        }
    }
    let tag = spec
        .tag
        .clone()
        .unwrap_or_else(|| format!("gauss-{:?}", spec.domain_offset));
    DomainDataset::new(Matrix::from_vec(y.len(), d, data)?, y, k, tag, split)
}

/// Meta-train / meta-test partition of a list of source domains, by position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaSplit {
    pub meta_train: Vec<usize>,
    pub meta_test: usize,
}

impl MetaSplit {
    pub fn meta_test_labeled<'a>(&self, domains: &'a [DomainDataset]) -> &'a DomainDataset {
        &domains[self.meta_test]
    }

    pub fn meta_test_unlabeled(&self, domains: &[DomainDataset]) -> UnlabeledView {
        domains[self.meta_test].unlabeled()
    }

    pub fn meta_train_domains<'a>(&self, domains: &'a [DomainDataset]) -> Vec<&'a DomainDataset> {
        self.meta_train.iter().map(|&i| &domains[i]).collect()
    }
}

/// Picks one domain uniformly as meta-test; the rest are meta-train.
pub fn sample_meta_split<R: Rng + ?Sized>(
    domains: &[DomainDataset],
    rng: &mut R,
) -> Result<MetaSplit> {
    ensure!(
        domains.len() >= 2,
        "a meta split needs at least 2 source domains, got {}",
        domains.len()
    );
    let meta_test = rng.random_range(0..domains.len());
    Ok(MetaSplit {
        meta_train: (0..domains.len()).filter(|&i| i != meta_test).collect(),
        meta_test,
    })
}

/// Labels exactly `k` random samples per class and returns the rest unlabelled.
pub fn select_kshot<R: Rng + ?Sized>(
    dataset: &DomainDataset,
    k: usize,
    rng: &mut R,
) -> Result<(DomainDataset, UnlabeledView)> {
    ensure!(k >= 1, "k-shot selection needs k >= 1");
    let mut chosen = Vec::new();
    for class in 0..dataset.num_classes {
        let mut rows: Vec<usize> = (0..dataset.len())
            .filter(|&r| dataset.y[r] == class)
            .collect();
        ensure!(
            rows.len() >= k,
            "class {class} has {} samples, fewer than k = {k}",
            rows.len()
        );
        rows.shuffle(rng);
        chosen.extend_from_slice(&rows[..k]);
    }
    chosen.sort_unstable();
    let picked: BTreeSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..dataset.len()).filter(|r| !picked.contains(r)).collect();
    Ok((dataset.subset(&chosen), dataset.subset(&rest).unlabeled()))
}

/// Endless epoch-based minibatch index stream: each epoch is a fresh
/// permutation cut into `batch_size` chunks, and the short tail is dropped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

pub fn batch_iter(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<BatchStream> {
    ensure!(batch_size >= 1, "batch_size must be >= 1");
    ensure!(
        batch_size <= n,
        "batch_size {batch_size} exceeds dataset size {n}"
    );
    Ok(BatchStream {
        order: (0..n).collect(),
        batch_size,
        cursor: n,
        rng,
    })
}

impl BatchStream {
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
