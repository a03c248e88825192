//! Central finite-difference verification of every differentiable primitive
//! and every loss.
//!
//! Each check records a scalar function on a fresh graph, takes its autodiff
//! gradient, and compares it with the central differences
//! `(f(x + eps) - f(x - eps)) / (2 eps)`. The error of one input is
//! `||autodiff - numeric|| / (||numeric|| + 1e-8)` in the Euclidean norm, and a
//! check reports the largest error over its inputs.
//!
//! Inputs are drawn away from the kinks of the non-smooth primitives (abs,
//! relu, max, clamp) by more than `eps`, so a central difference never
//! straddles one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::labels::LabelMap;
use crate::losses::{
    clustering_loss, compute_centroids, cross_entropy, max_squares_loss, orthogonality_loss, sparsity_loss, Distance,
    Domain, FeatureBatch, PseudoLabelGrid,
};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Forward<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn evaluate(f: &Forward<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Autodiff gradients of `f` with respect to each input.
pub fn analytic_gradients(f: &Forward<'_>, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("leaf requires grad"))
        .collect())
}

/// Central-difference gradients of `f` with respect to each input.
pub fn numeric_gradients(f: &Forward<'_>, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for (k, slot) in grad.iter_mut().enumerate() {
            let x = inputs[i].data()[k];
            work[i].data_mut()[k] = x + eps;
            let plus = evaluate(f, &work)?;
            work[i].data_mut()[k] = x - eps;
            let minus = evaluate(f, &work)?;
            work[i].data_mut()[k] = x;
            *slot = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::new(inputs[i].shape(), grad)?);
    }
    Ok(out)
}

/// Largest norm-wise relative error between two gradient lists, taken per
/// tensor.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let (mut diff, mut norm) = (0.0, 0.0);
            for (&x, &y) in a.data().iter().zip(n.data()) {
                diff += (x - y) * (x - y);
                norm += y * y;
            }
            let err = libm::sqrt(diff) / (libm::sqrt(norm) + DENOM_FLOOR);
            if err.is_nan() {
                f64::INFINITY
            } else {
                err
            }
        })
        .fold(0.0, f64::max)
}

/// Compares autodiff and finite differences for one scalar function.
pub fn check(name: &str, inputs: &[Tensor], f: &Forward<'_>, eps: f64, tolerance: f64) -> Result<CheckResult> {
    let analytic = analytic_gradients(f, inputs)?;
    let numeric = numeric_gradients(f, inputs, eps)?;
    Ok(result(name, max_relative_error(&analytic, &numeric), tolerance))
}

fn result(name: &str, err: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        max_rel_error: err,
        passed: err < tolerance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Scales one autodiff gradient by 1.01 so the harness must fail.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            inject_fault: false,
        }
    }
}

fn uniform(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

/// Values in `[-hi, -margin] U [margin, hi]`.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize], margin: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// A shuffled grid of distinct values spaced `step` apart plus jitter, so
/// every max has a clear winner.
fn distinct(rng: &mut StreamRng, shape: &[usize], step: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step + rng.gen_range(0.0..step * 0.2)).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("positive shape")
}

/// Scalar reduction `sum(out * w)` with fixed random `w`, exposing the whole
/// Jacobian of `out` to the check.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng::indexed_stream(seed, "gradcheck.projection", g.shape(out).iter().product::<usize>() as u64);
    let w = uniform(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn labels_with_all_classes(rng: &mut StreamRng, h: usize, w: usize, classes: usize) -> LabelMap {
    let mut labels: Vec<u8> = (0..h * w).map(|i| (i % classes) as u8).collect();
    labels.shuffle(rng);
    LabelMap::new(h, w, labels).expect("sized by construction")
}

/// Smallest gap between any feature and its class centroid and between any
/// two centroids, per channel; L1 kinks sit where these vanish.
fn l1_kink_margin(features: &[Tensor], grids: &[LabelMap], classes: usize) -> f64 {
    let d = features[0].shape()[0];
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    let mut rows = Vec::new();
    for (f, l) in features.iter().zip(grids) {
        let plane = l.height() * l.width();
        for (cell, &c) in l.labels().iter().enumerate() {
            let v: Vec<f64> = (0..d).map(|k| f.data()[k * plane + cell]).collect();
            for k in 0..d {
                sums[c as usize][k] += v[k];
            }
            counts[c as usize] += 1;
            rows.push((c as usize, v));
        }
    }
    let cents: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|x| x / n.max(1) as f64).collect())
        .collect();
    let mut margin = f64::INFINITY;
    for (c, v) in &rows {
        for k in 0..d {
            margin = margin.min(libm::fabs(v[k] - cents[*c][k]));
        }
    }
    for a in 0..classes {
        for b in 0..classes {
            if a != b && counts[a] > 0 && counts[b] > 0 {
                for k in 0..d {
                    margin = margin.min(libm::fabs(cents[a][k] - cents[b][k]));
                }
            }
        }
    }
    margin
}

fn centroid_peak_gap(features: &[Tensor], grids: &[LabelMap], classes: usize) -> f64 {
    let d = features[0].shape()[0];
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (f, l) in features.iter().zip(grids) {
        let plane = l.height() * l.width();
        for (cell, &c) in l.labels().iter().enumerate() {
            for k in 0..d {
                sums[c as usize][k] += f.data()[k * plane + cell];
            }
            counts[c as usize] += 1;
        }
    }
    let mut gap = f64::INFINITY;
    for (s, &n) in sums.iter().zip(&counts) {
        if n == 0 {
            continue;
        }
        let mut sorted: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        gap = gap.min(sorted[0] - sorted[1]);
    }
    gap
}

/// Two-domain micro feature batch (`D = 6`, 4x4 grids, 3 classes) drawn so
/// that central differences stay clear of every L1 and max kink.
fn loss_fixture(rng: &mut StreamRng, eps: f64) -> (Vec<Tensor>, Vec<LabelMap>) {
    let classes = 3;
    loop {
        let feats: Vec<Tensor> = (0..2).map(|_| uniform(rng, &[6, 4, 4], 0.05, 1.5)).collect();
        let grids: Vec<LabelMap> = (0..2).map(|_| labels_with_all_classes(rng, 4, 4, classes)).collect();
        if l1_kink_margin(&feats, &grids, classes) > 10.0 * eps && centroid_peak_gap(&feats, &grids, classes) > 10.0 * eps {
            return (feats, grids);
        }
    }
}

fn grids_of(labels: &[LabelMap]) -> Vec<PseudoLabelGrid> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| PseudoLabelGrid {
            labels: l.clone(),
            domain: if i == 0 { Domain::Source } else { Domain::Target },
        })
        .collect()
}

fn batch_of(g: &mut Graph, vars: &[Var], grids: &[PseudoLabelGrid]) -> Result<FeatureBatch> {
    let refs: Vec<&PseudoLabelGrid> = grids.iter().collect();
    FeatureBatch::stack(g, vars, &refs)
}

/// Runs every primitive and loss check for one seed.
pub fn run_suite(seed: u64, opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(seed, "gradcheck");
    let eps = opts.eps;
    let margin = 10.0 * eps;
    let mut cases: Vec<(String, Vec<Tensor>, alloc::boxed::Box<Forward<'static>>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            cases.push(($name.into(), $inputs, alloc::boxed::Box::new($f)));
        };
    }

    let a = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let pos = uniform(&mut rng, &[4, 5], 0.5, 2.0);
    case!("add", vec![a.clone(), b.clone()], move |g, v| {
        let o = g.add(v[0], v[1])?;
        project(g, o, seed)
    });
    case!("sub", vec![a.clone(), b.clone()], move |g, v| {
        let o = g.sub(v[0], v[1])?;
        project(g, o, seed)
    });
    case!("mul", vec![a.clone(), b.clone()], move |g, v| {
        let o = g.mul(v[0], v[1])?;
        project(g, o, seed)
    });
    case!("div", vec![a.clone(), pos.clone()], move |g, v| {
        let o = g.div(v[0], v[1])?;
        project(g, o, seed)
    });
    case!("add_scalar", vec![a.clone()], move |g, v| {
        let o = g.add_scalar(v[0], 0.7);
        project(g, o, seed)
    });
    case!("mul_scalar", vec![a.clone()], move |g, v| {
        let o = g.mul_scalar(v[0], -1.3);
        project(g, o, seed)
    });
    case!("exp", vec![a.clone()], move |g, v| {
        let o = g.exp(v[0]);
        project(g, o, seed)
    });
    case!("log", vec![pos.clone()], move |g, v| {
        let o = g.log(v[0]);
        project(g, o, seed)
    });
    case!("abs", vec![away_from_zero(&mut rng, &[4, 5], margin, 1.0)], move |g, v| {
        let o = g.abs(v[0]);
        project(g, o, seed)
    });
    case!("pow", vec![pos.clone()], move |g, v| {
        let o = g.pow(v[0], -0.5);
        project(g, o, seed)
    });
    case!("square", vec![a.clone()], move |g, v| {
        let o = g.square(v[0]);
        project(g, o, seed)
    });
    case!("relu", vec![away_from_zero(&mut rng, &[4, 5], margin, 1.0)], move |g, v| {
        let o = g.relu(v[0]);
        project(g, o, seed)
    });
    let clamp_in = {
        // keep every value clear of both bounds (-0.5, 0.5)
        let t = away_from_zero(&mut rng, &[4, 5], margin, 1.0);
        t.map(|x| if libm::fabs(libm::fabs(x) - 0.5) < margin { x + 3.0 * margin } else { x })
    };
    case!("clamp", vec![clamp_in], move |g, v| {
        let o = g.clamp(v[0], -0.5, 0.5);
        project(g, o, seed)
    });
    case!("sum", vec![a.clone()], move |g, v| {
        let o = g.sum(v[0]);
        let o = g.mul_scalar(o, 0.3);
        Ok(g.square(o))
    });
    case!("mean", vec![a.clone()], move |g, v| {
        let o = g.mean(v[0]);
        Ok(g.square(o))
    });
    let cube = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    case!("sum_axis", vec![cube.clone()], move |g, v| {
        let o = g.sum_axis(v[0], 1)?;
        project(g, o, seed)
    });
    case!("mean_axis", vec![cube.clone()], move |g, v| {
        let o = g.mean_axis(v[0], 2)?;
        project(g, o, seed)
    });
    case!("max_axis", vec![distinct(&mut rng, &[3, 5], 0.1)], move |g, v| {
        let o = g.max_axis(v[0], 1)?;
        project(g, o, seed)
    });
    let m1 = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let m2 = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    case!("matmul", vec![m1.clone(), m2], move |g, v| {
        let o = g.matmul(v[0], v[1])?;
        project(g, o, seed)
    });
    case!("transpose", vec![m1.clone()], move |g, v| {
        let o = g.transpose(v[0])?;
        project(g, o, seed)
    });
    case!("reshape", vec![m1.clone()], move |g, v| {
        let o = g.reshape(v[0], &[2, 6])?;
        project(g, o, seed)
    });
    let logits = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    case!("softmax", vec![logits.clone()], move |g, v| {
        let o = g.softmax(v[0], 0)?;
        project(g, o, seed)
    });
    case!("log_softmax", vec![logits.clone()], move |g, v| {
        let o = g.log_softmax(v[0], 1)?;
        project(g, o, seed)
    });
    let img = uniform(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let ker = uniform(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
    case!("conv2d", vec![img.clone(), ker.clone()], move |g, v| {
        let o = g.conv2d(v[0], v[1], 1, 1)?;
        project(g, o, seed)
    });
    case!("conv2d_strided", vec![img.clone(), ker], move |g, v| {
        let o = g.conv2d(v[0], v[1], 2, 0)?;
        project(g, o, seed)
    });
    case!("channel_bias", vec![img.clone(), uniform(&mut rng, &[2], -1.0, 1.0)], move |g, v| {
        let o = g.channel_bias(v[0], v[1])?;
        project(g, o, seed)
    });
    case!("max_pool2", vec![distinct(&mut rng, &[2, 4, 4], 0.1)], move |g, v| {
        let o = g.max_pool2(v[0])?;
        project(g, o, seed)
    });
    let small = uniform(&mut rng, &[2, 2, 3], -1.0, 1.0);
    case!("upsample_nearest", vec![small.clone()], move |g, v| {
        let o = g.upsample_nearest(v[0], 2)?;
        project(g, o, seed)
    });
    case!("downsample_nearest", vec![uniform(&mut rng, &[2, 4, 6], -1.0, 1.0)], move |g, v| {
        let o = g.downsample_nearest(v[0], 2)?;
        project(g, o, seed)
    });
    case!("concat", vec![m1.clone(), uniform(&mut rng, &[3, 2], -1.0, 1.0)], move |g, v| {
        let o = g.concat(&[v[0], v[1]], 1)?;
        project(g, o, seed)
    });
    case!("take", vec![m1.clone()], move |g, v| {
        let o = g.take(v[0], vec![0, 5, 5, 11, 3], &[5])?;
        project(g, o, seed)
    });
    case!("select_rows", vec![m1.clone()], move |g, v| {
        let o = g.select_rows(v[0], &[2, 0, 2])?;
        project(g, o, seed)
    });
    case!("expand_cols", vec![uniform(&mut rng, &[3], -1.0, 1.0)], move |g, v| {
        let o = g.expand_cols(v[0], 4)?;
        project(g, o, seed)
    });

    // losses on a two-domain micro batch
    let (feats, label_maps) = loss_fixture(&mut rng, eps);
    let grids = grids_of(&label_maps);
    let classes = 3;
    {
        let grids = grids.clone();
        case!("centroids", feats.clone(), move |g, v| {
            let batch = batch_of(g, v, &grids)?;
            let c = compute_centroids(g, &batch, classes, false)?;
            project(g, c.var, seed)
        });
    }
    {
        let grids = grids.clone();
        case!("clustering_loss", feats.clone(), move |g, v| {
            let batch = batch_of(g, v, &grids)?;
            let c = compute_centroids(g, &batch, classes, false)?;
            clustering_loss(g, &batch, &c, Distance::L1)
        });
    }
    {
        let grids = grids.clone();
        case!("clustering_loss_l2", feats.clone(), move |g, v| {
            let batch = batch_of(g, v, &grids)?;
            let c = compute_centroids(g, &batch, classes, false)?;
            clustering_loss(g, &batch, &c, Distance::L2)
        });
    }
    {
        let grids = grids.clone();
        // scaled down so the softmax over dot products is not saturated
        let scaled: Vec<Tensor> = feats.iter().map(|t| t.map(|x| x * 0.5)).collect();
        case!("orthogonality_loss", scaled, move |g, v| {
            let batch = batch_of(g, v, &grids)?;
            let c = compute_centroids(g, &batch, classes, false)?;
            orthogonality_loss(g, &batch, &c)
        });
    }
    {
        let grids = grids.clone();
        case!("sparsity_loss", feats.clone(), move |g, v| {
            let batch = batch_of(g, v, &grids)?;
            let c = compute_centroids(g, &batch, classes, false)?;
            sparsity_loss(g, &c)
        });
    }
    let seg_logits = uniform(&mut rng, &[3, 4, 4], -2.0, 2.0);
    case!("max_squares_loss", vec![seg_logits.clone()], move |g, v| max_squares_loss(g, v[0]));
    let ce_labels = {
        let mut l = labels_with_all_classes(&mut rng, 4, 4, 3);
        l.labels_mut()[5] = crate::labels::IGNORE_LABEL;
        l
    };
    case!("cross_entropy", vec![seg_logits.clone()], move |g, v| cross_entropy(g, v[0], &ce_labels));
    {
        let grids = grids.clone();
        let scaled: Vec<Tensor> = feats.iter().map(|t| t.map(|x| x * 0.5)).collect();
        case!("weighted_total", scaled, move |g, v| {
            let batch = batch_of(g, v, &grids)?;
            let c = compute_centroids(g, &batch, classes, false)?;
            let cl = clustering_loss(g, &batch, &c, Distance::L1)?;
            let or_ = orthogonality_loss(g, &batch, &c)?;
            let sp = sparsity_loss(g, &c)?;
            let cl = g.mul_scalar(cl, 0.1);
            let or_ = g.mul_scalar(or_, 0.1);
            let sp = g.mul_scalar(sp, 0.05);
            let t = g.add(cl, or_)?;
            g.add(t, sp)
        });
    }

    let mut results = Vec::with_capacity(cases.len());
    for (k, (name, inputs, f)) in cases.iter().enumerate() {
        let mut analytic = analytic_gradients(f.as_ref(), inputs)?;
        if opts.inject_fault && k == 0 {
            for t in &mut analytic {
                t.data_mut().iter_mut().for_each(|x| *x *= 1.01);
            }
        }
        let numeric = numeric_gradients(f.as_ref(), inputs, eps)?;
        results.push(result(name, max_relative_error(&analytic, &numeric), opts.tolerance));
    }
    Ok(results)
}
