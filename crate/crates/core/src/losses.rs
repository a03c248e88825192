//! The adaptation objective stack.
//!
//! Every loss is recorded on a [`Graph`] so a single backward pass yields the
//! gradient of the weighted total. Features enter as `[D,h,w]` encoder
//! outputs and are stacked into an `[N,D]` matrix, one row per spatial cell,
//! over both domains at once.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::labels::{argmax_classes, LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Target of the sparsity objective for every normalized channel.
pub const SPARSITY_RHO: f64 = 0.5;
/// Exponent of the image-wise class balancing in the max-squares loss.
pub const MAX_SQUARES_ALPHA: f64 = 0.5;
pub const MAX_SQUARES_WEIGHT_CLIP: (f64, f64) = (0.1, 10.0);
/// Keeps the L2 distance differentiable when two vectors coincide.
const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cl: f64,
    pub lambda_or: f64,
    pub lambda_sp: f64,
    pub lambda_em: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cl: 0.003,
            lambda_or: 1.0,
            lambda_sp: 0.005,
            lambda_em: 1.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_cl: 0.0,
        lambda_or: 0.0,
        lambda_sp: 0.0,
        lambda_em: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cl, self.lambda_or, self.lambda_sp, self.lambda_em];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Scalar values of every term and of both weighted totals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub cl: f64,
    pub or_: f64,
    pub sp: f64,
    pub em: f64,
    pub total_prime: f64,
    pub total: f64,
}

impl LossReport {
    /// Assembles the totals from component values.
    pub fn assemble(ce: f64, cl: f64, or_: f64, sp: f64, em: f64, w: &LossWeights) -> Self {
        let total_prime = ce + w.lambda_cl * cl + w.lambda_or * or_ + w.lambda_sp * sp;
        LossReport {
            ce,
            cl,
            or_,
            sp,
            em,
            total_prime,
            total: total_prime + w.lambda_em * em,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.cl, self.or_, self.sp, self.em, self.total_prime, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Class assignment of every feature cell of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelGrid {
    pub labels: LabelMap,
    pub domain: Domain,
}

/// Predicted classes at feature resolution: per-pixel argmax (ties to the
/// lowest class) followed by a nearest downsample to `h x w`.
pub fn pseudo_labels(seg_logits: &Tensor, h: usize, w: usize, domain: Domain) -> Result<PseudoLabelGrid> {
    let full = argmax_classes(seg_logits)?;
    Ok(PseudoLabelGrid {
        labels: full.downsample(h, w)?,
        domain,
    })
}

/// Feature vectors of several images stacked as rows of an `[N,D]` matrix,
/// with the class of each row. Cells labelled [`IGNORE_LABEL`] are dropped.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub matrix: Var,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl FeatureBatch {
    pub fn stack(graph: &mut Graph, features: &[Var], grids: &[&PseudoLabelGrid]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyInput("feature list"));
        }
        if features.len() != grids.len() {
            return Err(shape_mismatch("feature batch", &[features.len()], &[grids.len()]));
        }
        let dim = graph.shape(features[0])[0];
        let mut flat = Vec::with_capacity(features.len());
        let mut all_labels = Vec::new();
        for (&f, grid) in features.iter().zip(grids) {
            let s = graph.shape(f).to_vec();
            if s.len() != 3 || s[0] != dim {
                return Err(shape_mismatch("feature batch", &[dim], &s));
            }
            if grid.labels.height() != s[1] || grid.labels.width() != s[2] {
                return Err(shape_mismatch(
                    "feature batch",
                    &[s[1], s[2]],
                    &[grid.labels.height(), grid.labels.width()],
                ));
            }
            flat.push(graph.reshape(f, &[dim, s[1] * s[2]])?);
            all_labels.extend(grid.labels.labels().iter().copied());
        }
        let joined = if flat.len() == 1 { flat[0] } else { graph.concat(&flat, 1)? };
        let mut matrix = graph.transpose(joined)?;
        let keep: Vec<usize> = (0..all_labels.len()).filter(|&i| all_labels[i] != IGNORE_LABEL).collect();
        if keep.is_empty() {
            return Err(Error::EmptyInput("feature batch (all cells ignored)"));
        }
        if keep.len() != all_labels.len() {
            matrix = graph.select_rows(matrix, &keep)?;
        }
        let labels = keep.iter().map(|&i| all_labels[i] as usize).collect();
        Ok(FeatureBatch { matrix, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-class mean feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// `[|C|, D]`; rows of absent classes are zero.
    pub centroids: Tensor,
    pub counts: Vec<usize>,
    pub present: Vec<bool>,
}

impl CentroidSet {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&j| self.present[j]).collect()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let d = self.centroids.shape()[1];
        &self.centroids.data()[j * d..(j + 1) * d]
    }
}

/// Centroids recorded on a graph.
#[derive(Debug, Clone)]
pub struct Centroids {
    pub set: CentroidSet,
    pub var: Var,
}

/// Mean feature vector of every class over the whole batch. With `detach`
/// the centroids are recorded as constants and no gradient flows through
/// them.
pub fn compute_centroids(graph: &mut Graph, batch: &FeatureBatch, num_classes: usize, detach: bool) -> Result<Centroids> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("feature batch"));
    }
    let n = batch.len();
    let mut counts = vec![0usize; num_classes];
    for &l in &batch.labels {
        if l >= num_classes {
            return Err(invalid("compute_centroids", "label outside class range"));
        }
        counts[l] += 1;
    }
    let mut assign = vec![0.0; num_classes * n];
    for (i, &l) in batch.labels.iter().enumerate() {
        assign[l * n + i] = 1.0 / counts[l] as f64;
    }
    let assign = graph.constant(Tensor::new(&[num_classes, n], assign)?);
    let mut var = graph.matmul(assign, batch.matrix)?;
    if detach {
        let value = graph.value(var).clone();
        var = graph.constant(value);
    }
    let set = CentroidSet {
        centroids: graph.value(var).clone(),
        present: counts.iter().map(|&c| c > 0).collect(),
        counts,
    };
    Ok(Centroids { set, var })
}

fn zero_scalar(graph: &mut Graph) -> Var {
    graph.constant(Tensor::scalar(0.0))
}

/// Row-wise distance between two `[R,D]` matrices, summed over rows.
fn summed_distance(graph: &mut Graph, a: Var, b: Var, distance: Distance) -> Result<Var> {
    let diff = graph.sub(a, b)?;
    match distance {
        Distance::L1 => {
            let abs = graph.abs(diff);
            Ok(graph.sum(abs))
        }
        Distance::L2 => {
            let sq = graph.square(diff);
            let per_row = graph.sum_axis(sq, 1)?;
            let per_row = graph.add_scalar(per_row, L2_EPS);
            let norms = graph.pow(per_row, 0.5);
            Ok(graph.sum(norms))
        }
    }
}

/// Clustering objective: mean distance of each feature to its class
/// centroid, minus the mean distance over ordered pairs of distinct present
/// classes.
pub fn clustering_loss(graph: &mut Graph, batch: &FeatureBatch, centroids: &Centroids, distance: Distance) -> Result<Var> {
    let own = graph.select_rows(centroids.var, &batch.labels)?;
    let attract = summed_distance(graph, batch.matrix, own, distance)?;
    let attract = graph.mul_scalar(attract, 1.0 / batch.len() as f64);

    let present = centroids.set.present_classes();
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for &j in &present {
        for &k in &present {
            if j != k {
                left.push(j);
                right.push(k);
            }
        }
    }
    if left.is_empty() {
        return Ok(attract);
    }
    let a = graph.select_rows(centroids.var, &left)?;
    let b = graph.select_rows(centroids.var, &right)?;
    let repel = summed_distance(graph, a, b, distance)?;
    let repel = graph.mul_scalar(repel, 1.0 / left.len() as f64);
    graph.sub(attract, repel)
}

/// Orthogonality objective: mean entropy of the softmax, over present
/// classes, of each feature's dot products with the centroids. Zero when
/// fewer than two classes are present.
pub fn orthogonality_loss(graph: &mut Graph, batch: &FeatureBatch, centroids: &Centroids) -> Result<Var> {
    let present = centroids.set.present_classes();
    if present.len() < 2 {
        return Ok(zero_scalar(graph));
    }
    let c = graph.select_rows(centroids.var, &present)?;
    let ct = graph.transpose(c)?;
    let dots = graph.matmul(batch.matrix, ct)?;
    let log_p = graph.log_softmax(dots, 1)?;
    let p = graph.exp(log_p);
    let plogp = graph.mul(p, log_p)?;
    let total = graph.sum(plogp);
    Ok(graph.mul_scalar(total, -1.0 / batch.len() as f64))
}

/// Sparsity objective: `-sum_j ||c_j / max(c_j) - rho||^2` over present
/// classes with a non-zero centroid.
pub fn sparsity_loss(graph: &mut Graph, centroids: &Centroids) -> Result<Var> {
    let set = &centroids.set;
    let rows: Vec<usize> = set
        .present_classes()
        .into_iter()
        .filter(|&j| set.row(j).iter().any(|&v| v > 0.0))
        .collect();
    if rows.is_empty() {
        return Ok(zero_scalar(graph));
    }
    let dim = set.centroids.shape()[1];
    let c = graph.select_rows(centroids.var, &rows)?;
    let peak = graph.max_axis(c, 1)?;
    let peak = graph.expand_cols(peak, dim)?;
    let normalized = graph.div(c, peak)?;
    let shifted = graph.add_scalar(normalized, -SPARSITY_RHO);
    let sq = graph.square(shifted);
    let total = graph.sum(sq);
    Ok(graph.neg(total))
}

/// Image-wise class-balanced maximum-squares loss on target logits
/// `[C,H,W]`: `-(1/2N) sum_c w_c sum_pixels p_c^2` with
/// `w_c = clip((N/|C| / n_c)^alpha)` and `n_c` the soft class count.
pub fn max_squares_loss(graph: &mut Graph, logits: Var) -> Result<Var> {
    let s = graph.shape(logits).to_vec();
    if s.len() != 3 {
        return Err(invalid("max_squares_loss", "expects [C,H,W] logits"));
    }
    let (c, n) = (s[0], s[1] * s[2]);
    let p = graph.softmax(logits, 0)?;
    let p = graph.reshape(p, &[c, n])?;
    let soft_count = graph.sum_axis(p, 1)?;
    let mean_count = n as f64 / c as f64;
    let w = graph.pow(soft_count, -MAX_SQUARES_ALPHA);
    let w = graph.mul_scalar(w, libm::pow(mean_count, MAX_SQUARES_ALPHA));
    let (lo, hi) = MAX_SQUARES_WEIGHT_CLIP;
    let w = graph.clamp(w, lo, hi);
    let sq = graph.square(p);
    let sq = graph.sum_axis(sq, 1)?;
    let weighted = graph.mul(w, sq)?;
    let total = graph.sum(weighted);
    Ok(graph.mul_scalar(total, -1.0 / (2.0 * n as f64)))
}

/// Mean negative log-likelihood of the labelled class over non-ignored
/// pixels.
pub fn cross_entropy(graph: &mut Graph, logits: Var, labels: &LabelMap) -> Result<Var> {
    let s = graph.shape(logits).to_vec();
    if s.len() != 3 {
        return Err(invalid("cross_entropy", "expects [C,H,W] logits"));
    }
    if labels.height() != s[1] || labels.width() != s[2] {
        return Err(shape_mismatch("cross_entropy", &s[1..], &[labels.height(), labels.width()]));
    }
    let (c, n) = (s[0], s[1] * s[2]);
    let mut picks = Vec::with_capacity(n);
    for (pixel, &l) in labels.labels().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize >= c {
            return Err(invalid("cross_entropy", "label outside class range"));
        }
        picks.push(l as usize * n + pixel);
    }
    if picks.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let m = picks.len();
    let log_p = graph.log_softmax(logits, 0)?;
    let picked = graph.take(log_p, picks, &[m])?;
    let total = graph.sum(picked);
    Ok(graph.mul_scalar(total, -1.0 / m as f64))
}

/// Switches of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveFlags {
    pub include_em: bool,
    /// Cluster source features by their ground truth instead of predictions.
    pub source_gt_clusters: bool,
    pub detach_centroids: bool,
    pub distance: Distance,
}

impl Default for ObjectiveFlags {
    fn default() -> Self {
        ObjectiveFlags {
            include_em: true,
            source_gt_clusters: false,
            detach_centroids: false,
            distance: Distance::L1,
        }
    }
}

/// Encoder features and logits of one image, recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct DomainForward {
    pub features: Var,
    pub logits: Var,
}

/// Every term of the objective, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ce: Var,
    pub cl: Var,
    pub or_: Var,
    pub sp: Var,
    pub em: Var,
}

/// Result of [`total_loss`]: the report, the differentiable total, and the
/// pseudo-labels used for clustering.
#[derive(Debug, Clone)]
pub struct Objective {
    pub report: LossReport,
    /// Effective weights (`lambda_em` is zero unless `include_em`).
    pub weights: LossWeights,
    pub terms: LossTerms,
    pub total: Var,
    pub source_grid: PseudoLabelGrid,
    pub target_grid: PseudoLabelGrid,
}

/// Full objective for one source/target pair: cross-entropy on the source,
/// clustering, orthogonality and sparsity over the joint features with joint
/// centroids, and max-squares on the target.
///
/// Terms whose weight is zero are still evaluated for the report but are
/// left out of the differentiable total, so they contribute no gradient.
pub fn total_loss(
    graph: &mut Graph,
    source: DomainForward,
    source_labels: &LabelMap,
    target: DomainForward,
    weights: &LossWeights,
    flags: &ObjectiveFlags,
) -> Result<Objective> {
    weights.validate()?;
    let fs = graph.shape(source.features).to_vec();
    let num_classes = graph.shape(source.logits)[0];
    let (h, w) = (fs[1], fs[2]);

    let source_grid = if flags.source_gt_clusters {
        PseudoLabelGrid {
            labels: source_labels.downsample(h, w)?,
            domain: Domain::Source,
        }
    } else {
        pseudo_labels(graph.value(source.logits), h, w, Domain::Source)?
    };
    let target_grid = pseudo_labels(graph.value(target.logits), h, w, Domain::Target)?;

    let ce = cross_entropy(graph, source.logits, source_labels)?;
    let batch = FeatureBatch::stack(graph, &[source.features, target.features], &[&source_grid, &target_grid])?;
    let centroids = compute_centroids(graph, &batch, num_classes, flags.detach_centroids)?;
    let cl = clustering_loss(graph, &batch, &centroids, flags.distance)?;
    let or_ = orthogonality_loss(graph, &batch, &centroids)?;
    let sp = sparsity_loss(graph, &centroids)?;
    let em = max_squares_loss(graph, target.logits)?;

    let mut eff = *weights;
    if !flags.include_em {
        eff.lambda_em = 0.0;
    }
    let value = |g: &Graph, v: Var| g.value(v).item();
    let report = LossReport::assemble(
        value(graph, ce),
        value(graph, cl),
        value(graph, or_),
        value(graph, sp),
        value(graph, em),
        &eff,
    );

    let mut total = ce;
    for (lambda, term) in [
        (eff.lambda_cl, cl),
        (eff.lambda_or, or_),
        (eff.lambda_sp, sp),
        (eff.lambda_em, em),
    ] {
        if lambda != 0.0 {
            let scaled = graph.mul_scalar(term, lambda);
            total = graph.add(total, scaled)?;
        }
    }

    Ok(Objective {
        report,
        weights: eff,
        terms: LossTerms { ce, cl, or_, sp, em },
        total,
        source_grid,
        target_grid,
    })
}
