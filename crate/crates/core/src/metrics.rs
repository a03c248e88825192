//! Evaluation and feature-space diagnostics.
//!
//! Every diagnostic classifies feature cells by ground truth downsampled to
//! the feature grid, and treats a `[D,h,w]` feature tensor as `h*w` vectors.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

pub const SPARSITY_TAU: f64 = 1e-4;
pub const HISTOGRAM_BINS: usize = 20;
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.05;
pub const DEFAULT_SAMPLE_CAP: usize = 2000;

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(shape_mismatch("confusion matrix", &[num_classes * num_classes], &[counts.len()]));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one prediction; ignored ground-truth pixels are skipped.
    pub fn add(&mut self, truth: &LabelMap, pred: &LabelMap) -> Result<()> {
        if truth.height() != pred.height() || truth.width() != pred.width() {
            return Err(shape_mismatch(
                "confusion matrix",
                &[truth.height(), truth.width()],
                &[pred.height(), pred.width()],
            ));
        }
        for (&t, &p) in truth.labels().iter().zip(pred.labels()) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.num_classes || p >= self.num_classes {
                return Err(invalid("confusion matrix", "label outside class range"));
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_mismatch("confusion matrix", &[self.num_classes], &[other.num_classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// `TP / (TP + FP + FN)` per class; the mean skips undefined classes.
pub fn iou(cm: &ConfusionMatrix) -> IouReport {
    let n = cm.num_classes();
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..n).filter(|&k| k != c).map(|k| cm.get(c, k)).sum();
            let fp: u64 = (0..n).filter(|&k| k != c).map(|k| cm.get(k, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    IouReport { per_class, miou }
}

/// Feature vectors of one image grouped by class.
fn vectors_by_class(features: &Tensor, labels: &LabelMap, num_classes: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let s = features.shape();
    if s.len() != 3 || s[1] != labels.height() || s[2] != labels.width() {
        return Err(shape_mismatch("feature diagnostics", s, &[labels.height(), labels.width()]));
    }
    let (d, plane) = (s[0], s[1] * s[2]);
    let data = features.data();
    let mut groups = vec![Vec::new(); num_classes];
    for (cell, &l) in labels.labels().iter().enumerate() {
        if l == IGNORE_LABEL || l as usize >= num_classes {
            continue;
        }
        groups[l as usize].push((0..d).map(|c| data[c * plane + cell]).collect());
    }
    Ok(groups)
}

fn check_pairs(features: &[Tensor], labels: &[LabelMap]) -> Result<()> {
    if features.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    if features.len() != labels.len() {
        return Err(shape_mismatch("feature diagnostics", &[features.len()], &[labels.len()]));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Class-pair cosine similarity averaged over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub num_classes: usize,
    /// Row-major; `None` marks pairs never co-present in any image.
    pub values: Vec<Option<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, j: usize, k: usize) -> Option<f64> {
        self.values[j * self.num_classes + k]
    }

    /// Mean of the defined diagonal entries.
    pub fn mean_intra(&self) -> Option<f64> {
        let diag: Vec<f64> = (0..self.num_classes).filter_map(|j| self.get(j, j)).collect();
        (!diag.is_empty()).then(|| diag.iter().sum::<f64>() / diag.len() as f64)
    }
}

/// Per image: the mean cosine similarity over every cross-class pair of
/// feature vectors, and over every within-class pair excluding self-pairs.
/// The final entry averages the per-image values over images where the pair
/// is defined. Zero-norm vectors are skipped.
pub fn similarity_matrix(features: &[Tensor], labels: &[LabelMap], num_classes: usize) -> Result<SimilarityMatrix> {
    check_pairs(features, labels)?;
    let n = num_classes;
    let mut sums = vec![0.0; n * n];
    let mut hits = vec![0usize; n * n];
    for (f, l) in features.iter().zip(labels) {
        let groups = vectors_by_class(f, l, n)?;
        let d = f.shape()[0];
        // sum of unit vectors per class; pair means follow from dot products
        let mut unit_sum = vec![vec![0.0; d]; n];
        let mut count = vec![0usize; n];
        for (j, group) in groups.iter().enumerate() {
            for v in group {
                let nv = norm(v);
                if nv == 0.0 {
                    continue;
                }
                for (acc, x) in unit_sum[j].iter_mut().zip(v) {
                    *acc += x / nv;
                }
                count[j] += 1;
            }
        }
        for j in 0..n {
            for k in j..n {
                let value = if j == k {
                    if count[j] < 2 {
                        continue;
                    }
                    let s2: f64 = unit_sum[j].iter().map(|x| x * x).sum();
                    (s2 - count[j] as f64) / (count[j] * (count[j] - 1)) as f64
                } else {
                    if count[j] == 0 || count[k] == 0 {
                        continue;
                    }
                    let dot: f64 = unit_sum[j].iter().zip(&unit_sum[k]).map(|(a, b)| a * b).sum();
                    dot / (count[j] * count[k]) as f64
                };
                sums[j * n + k] += value;
                hits[j * n + k] += 1;
            }
        }
    }
    let mut values = vec![None; n * n];
    for j in 0..n {
        for k in j..n {
            if hits[j * n + k] > 0 {
                let v = sums[j * n + k] / hits[j * n + k] as f64;
                values[j * n + k] = Some(v);
                values[k * n + j] = Some(v);
            }
        }
    }
    Ok(SimilarityMatrix { num_classes: n, values })
}

/// Divides a vector by its largest entry; `None` for all-zero vectors.
fn max_normalized(v: &[f64]) -> Option<Vec<f64>> {
    let peak = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (peak > 0.0).then(|| v.iter().map(|x| x / peak).collect())
}

/// Fraction of max-normalized channels within `tau` of 0 or 1, averaged per
/// class within each image and then over the images containing the class.
pub fn sparsity_scores(features: &[Tensor], labels: &[LabelMap], num_classes: usize, tau: f64) -> Result<Vec<Option<f64>>> {
    check_pairs(features, labels)?;
    let mut sums = vec![0.0; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (f, l) in features.iter().zip(labels) {
        for (j, group) in vectors_by_class(f, l, num_classes)?.iter().enumerate() {
            let scores: Vec<f64> = group
                .iter()
                .filter_map(|v| max_normalized(v))
                .map(|v| v.iter().filter(|&&x| x < tau || x > 1.0 - tau).count() as f64 / v.len() as f64)
                .collect();
            if !scores.is_empty() {
                sums[j] += scores.iter().sum::<f64>() / scores.len() as f64;
                hits[j] += 1;
            }
        }
    }
    Ok((0..num_classes).map(|j| (hits[j] > 0).then(|| sums[j] / hits[j] as f64)).collect())
}

/// Counts of max-normalized activations in 20 bins of width 0.05 over
/// [0,1]; 1.0 falls in the last bin and all-zero vectors count as zeros.
pub fn activation_histogram(features: &[Tensor]) -> Result<[u64; HISTOGRAM_BINS]> {
    let mut bins = [0u64; HISTOGRAM_BINS];
    for f in features {
        let s = f.shape();
        if s.len() != 3 {
            return Err(invalid("activation_histogram", "expects [D,h,w] features"));
        }
        let (d, plane) = (s[0], s[1] * s[2]);
        let data = f.data();
        for cell in 0..plane {
            let v: Vec<f64> = (0..d).map(|c| data[c * plane + cell]).collect();
            let normalized = max_normalized(&v).unwrap_or_else(|| vec![0.0; d]);
            for x in normalized {
                let bin = ((x / HISTOGRAM_BIN_WIDTH) as usize).min(HISTOGRAM_BINS - 1);
                bins[bin] += 1;
            }
        }
    }
    Ok(bins)
}

/// `a - b` bin by bin.
pub fn histogram_difference(a: &[u64; HISTOGRAM_BINS], b: &[u64; HISTOGRAM_BINS]) -> [i64; HISTOGRAM_BINS] {
    let mut out = [0i64; HISTOGRAM_BINS];
    for i in 0..HISTOGRAM_BINS {
        out[i] = a[i] as i64 - b[i] as i64;
    }
    out
}

/// Mean L1 distances measured with ground-truth centroids per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterStats {
    /// Feature to own-class centroid.
    pub intra: f64,
    /// Between centroids of distinct present classes.
    pub inter: f64,
}

pub fn cluster_stats(features: &[Tensor], labels: &[LabelMap], num_classes: usize) -> Result<ClusterStats> {
    check_pairs(features, labels)?;
    let (mut intra, mut inter) = (0.0, 0.0);
    let (mut intra_images, mut inter_images) = (0usize, 0usize);
    for (f, l) in features.iter().zip(labels) {
        let groups = vectors_by_class(f, l, num_classes)?;
        let d = f.shape()[0];
        let centroids: Vec<Option<Vec<f64>>> = groups
            .iter()
            .map(|g| {
                (!g.is_empty()).then(|| {
                    let mut c = vec![0.0; d];
                    for v in g {
                        for (a, x) in c.iter_mut().zip(v) {
                            *a += x;
                        }
                    }
                    c.iter_mut().for_each(|a| *a /= g.len() as f64);
                    c
                })
            })
            .collect();
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum::<f64>();
        let (mut total, mut n) = (0.0, 0usize);
        for (g, c) in groups.iter().zip(&centroids) {
            if let Some(c) = c {
                for v in g {
                    total += l1(v, c);
                    n += 1;
                }
            }
        }
        if n > 0 {
            intra += total / n as f64;
            intra_images += 1;
        }
        let present: Vec<&Vec<f64>> = centroids.iter().flatten().collect();
        let (mut pair_total, mut pairs) = (0.0, 0usize);
        for (a, ca) in present.iter().enumerate() {
            for (b, cb) in present.iter().enumerate() {
                if a != b {
                    pair_total += l1(ca, cb);
                    pairs += 1;
                }
            }
        }
        if pairs > 0 {
            inter += pair_total / pairs as f64;
            inter_images += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(ClusterStats {
        intra: mean(intra, intra_images),
        inter: mean(inter, inter_images),
    })
}

/// A point of the 2-D projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub class: u8,
}

/// Collects the feature vectors of an evaluation set as rows.
pub fn feature_rows(features: &[Tensor], labels: &[LabelMap]) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
    check_pairs(features, labels)?;
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        let s = f.shape();
        if s.len() != 3 || s[1] != l.height() || s[2] != l.width() {
            return Err(shape_mismatch("feature rows", s, &[l.height(), l.width()]));
        }
        let (d, plane) = (s[0], s[1] * s[2]);
        for (cell, &c) in l.labels().iter().enumerate() {
            if c == IGNORE_LABEL {
                continue;
            }
            rows.push((0..d).map(|k| f.data()[k * plane + cell]).collect());
            classes.push(c);
        }
    }
    Ok((rows, classes))
}

/// Principal axes of a set of rows, with their variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Eigenvalues of the (1/N) covariance, descending.
    pub variances: Vec<f64>,
    /// Unit eigenvectors matching `variances`; each has its largest-magnitude
    /// loading positive.
    pub axes: Vec<Vec<f64>>,
}

pub fn pca(rows: &[Vec<f64>]) -> Result<Pca> {
    if rows.len() < 2 {
        return Err(Error::EmptyInput("pca needs at least two rows"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(invalid("pca", "rows must share a positive dimension"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for a in 0..d {
            let xa = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += xa * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= n;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let (values, vectors) = symmetric_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    let axes = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = (0..d).map(|r| vectors[r * d + i]).collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if libm::fabs(x) > libm::fabs(m) { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(Pca {
        mean,
        variances: order.iter().map(|&i| values[i].max(0.0)).collect(),
        axes,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric `d x d` matrix. Returns
/// eigenvalues and the eigenvector matrix (eigenvectors in columns).
fn symmetric_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p * d + q] * a[p * d + q])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Projects rows on their top two principal axes after a seeded uniform
/// subsample of at most `sample_cap` rows. When the data has rank below two
/// the second coordinate is zero.
pub fn project2d(rows: &[Vec<f64>], classes: &[u8], sample_cap: usize, seed: u64) -> Result<Vec<ProjectedPoint>> {
    if rows.len() != classes.len() {
        return Err(shape_mismatch("project2d", &[rows.len()], &[classes.len()]));
    }
    if rows.len() < 2 {
        return Err(Error::EmptyInput("project2d needs at least two feature vectors"));
    }
    let mut picked: Vec<usize> = if rows.len() > sample_cap.max(2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, rows.len(), sample_cap.max(2)).into_vec()
    } else {
        (0..rows.len()).collect()
    };
    picked.sort_unstable();
    let subset: Vec<Vec<f64>> = picked.iter().map(|&i| rows[i].clone()).collect();
    let p = pca(&subset)?;
    let top = p.variances.first().copied().unwrap_or(0.0);
    let second_defined = p.variances.len() > 1 && p.variances[1] > 1e-12 * top.max(f64::MIN_POSITIVE);
    let zero = vec![0.0; p.mean.len()];
    let axis_y = if second_defined { &p.axes[1] } else { &zero };
    Ok(picked
        .iter()
        .zip(&subset)
        .map(|(&i, r)| {
            let centered: Vec<f64> = r.iter().zip(&p.mean).map(|(x, m)| x - m).collect();
            let dot = |a: &[f64]| centered.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            ProjectedPoint {
                x: if top > 0.0 { dot(&p.axes[0]) } else { 0.0 },
                y: dot(axis_y),
                class: classes[i],
            }
        })
        .collect())
}
