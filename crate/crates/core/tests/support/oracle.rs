//! Every loss and metric against a naive loop reference on seeded
//! micro-instances. Each check returns the first mismatch as an error.

macro_rules! ensure {
    ($c:expr) => {
        if !$c {
            return Err(format!("{} does not hold", stringify!($c)));
        }
    };
    ($c:expr, $($m:tt)+) => {
        if !$c {
            return Err(format!($($m)+));
        }
    };
}

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {
        if $a != $b {
            return Err(format!("{:?} != {:?}", $a, $b));
        }
    };
    ($a:expr, $b:expr, $($m:tt)+) => {
        if $a != $b {
            return Err(format!($($m)+));
        }
    };
}

use rand::Rng;
use udafeat_core::graph::Graph;
use udafeat_core::labels::{argmax_classes, LabelMap, IGNORE_LABEL};
use udafeat_core::losses::{
    clustering_loss, compute_centroids, cross_entropy, max_squares_loss, orthogonality_loss, pseudo_labels,
    sparsity_loss, total_loss, Distance, Domain, DomainForward, FeatureBatch, LossWeights, ObjectiveFlags,
    PseudoLabelGrid,
};
use udafeat_core::metrics::{
    activation_histogram, iou, similarity_matrix, sparsity_scores, ConfusionMatrix, HISTOGRAM_BINS, SPARSITY_TAU,
};
use udafeat_core::rng::{indexed_stream, StreamRng};
use udafeat_core::Tensor;

pub const INSTANCES: u64 = 60;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Feature tensor `[D,h,w]` with a share of exact zeros, like ReLU output.
fn relu_features(rng: &mut StreamRng, d: usize, h: usize, w: usize) -> Tensor {
    let data = (0..d * h * w).map(|_| rng.gen_range(-0.5..2.0f64).max(0.0)).collect();
    Tensor::new(&[d, h, w], data).unwrap()
}

fn random_labels(rng: &mut StreamRng, h: usize, w: usize, classes: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes) as u8).collect()).unwrap()
}

struct Instance {
    classes: usize,
    features: Vec<Tensor>,
    labels: Vec<LabelMap>,
}

impl Instance {
    fn draw(seed: u64) -> Self {
        let mut rng = indexed_stream(0x0AC1E, "oracle.instance", seed);
        let classes = rng.gen_range(2..=5);
        let d = rng.gen_range(2..=8);
        let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        // one image per domain, so at most 2*16 feature vectors
        let features = (0..2).map(|_| relu_features(&mut rng, d, h, w)).collect();
        let labels = (0..2).map(|_| random_labels(&mut rng, h, w, classes)).collect();
        Instance {
            classes,
            features,
            labels,
        }
    }

    /// Feature rows and labels in source-then-target, row-major order.
    fn rows(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (f, l) in self.features.iter().zip(&self.labels) {
            let s = f.shape();
            let plane = s[1] * s[2];
            for cell in 0..plane {
                rows.push((0..s[0]).map(|k| f.data()[k * plane + cell]).collect());
                labels.push(l.labels()[cell] as usize);
            }
        }
        (rows, labels)
    }

    fn grids(&self) -> Vec<PseudoLabelGrid> {
        self.labels
            .iter()
            .zip([Domain::Source, Domain::Target])
            .map(|(l, domain)| PseudoLabelGrid {
                labels: l.clone(),
                domain,
            })
            .collect()
    }
}

fn oracle_centroids(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = rows[0].len();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0; classes];
    for (r, &l) in rows.iter().zip(labels) {
        for k in 0..d {
            sums[l][k] += r[k];
        }
        counts[l] += 1;
    }
    for j in 0..classes {
        if counts[j] > 0 {
            for k in 0..d {
                sums[j][k] /= counts[j] as f64;
            }
        }
    }
    (sums, counts)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn oracle_clustering(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let (c, counts) = oracle_centroids(rows, labels, classes);
    let mut attract = 0.0;
    for (r, &l) in rows.iter().zip(labels) {
        attract += l1(r, &c[l]);
    }
    attract /= rows.len() as f64;
    let mut repel = 0.0;
    let mut pairs = 0;
    for j in 0..classes {
        for k in 0..classes {
            if j != k && counts[j] > 0 && counts[k] > 0 {
                repel += l1(&c[j], &c[k]);
                pairs += 1;
            }
        }
    }
    if pairs > 0 {
        attract - repel / pairs as f64
    } else {
        attract
    }
}

fn oracle_orthogonality(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let (c, counts) = oracle_centroids(rows, labels, classes);
    let present: Vec<usize> = (0..classes).filter(|&j| counts[j] > 0).collect();
    if present.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in rows {
        let dots: Vec<f64> = present
            .iter()
            .map(|&j| r.iter().zip(&c[j]).map(|(a, b)| a * b).sum())
            .collect();
        let m = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = dots.iter().map(|x| (x - m).exp()).sum();
        for x in &dots {
            let p = (x - m).exp() / z;
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / rows.len() as f64
}

fn oracle_sparsity(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> f64 {
    let (c, counts) = oracle_centroids(rows, labels, classes);
    let mut loss = 0.0;
    for j in 0..classes {
        let peak = c[j].iter().copied().fold(0.0, f64::max);
        if counts[j] == 0 || peak == 0.0 {
            continue;
        }
        for x in &c[j] {
            loss -= (x / peak - 0.5).powi(2);
        }
    }
    loss
}

fn random_logits(rng: &mut StreamRng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

fn pixel_probs(logits: &Tensor, pixel: usize) -> Vec<f64> {
    let s = logits.shape();
    let n = s[1] * s[2];
    let z: Vec<f64> = (0..s[0]).map(|c| logits.data()[c * n + pixel]).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

fn oracle_max_squares(logits: &Tensor) -> f64 {
    let s = logits.shape();
    let (c, n) = (s[0], s[1] * s[2]);
    let probs: Vec<Vec<f64>> = (0..n).map(|i| pixel_probs(logits, i)).collect();
    let mean_count = n as f64 / c as f64;
    let mut loss = 0.0;
    for k in 0..c {
        let soft: f64 = probs.iter().map(|p| p[k]).sum();
        let w = (mean_count / soft).powf(0.5).clamp(0.1, 10.0);
        for p in &probs {
            loss += w * p[k] * p[k];
        }
    }
    -loss / (2.0 * n as f64)
}

fn oracle_cross_entropy(logits: &Tensor, labels: &LabelMap) -> f64 {
    let mut total = 0.0;
    let mut m = 0;
    for (pixel, &l) in labels.labels().iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        total -= pixel_probs(logits, pixel)[l as usize].ln();
        m += 1;
    }
    total / m as f64
}

fn eval_loss<F>(inst: &Instance, f: F) -> f64
where
    F: Fn(&mut Graph, &FeatureBatch, &udafeat_core::losses::Centroids) -> udafeat_core::Result<udafeat_core::Var>,
{
    let mut g = Graph::new();
    let vars: Vec<_> = inst.features.iter().map(|t| g.constant(t.clone())).collect();
    let grids = inst.grids();
    let refs: Vec<&PseudoLabelGrid> = grids.iter().collect();
    let batch = FeatureBatch::stack(&mut g, &vars, &refs).unwrap();
    let c = compute_centroids(&mut g, &batch, inst.classes, false).unwrap();
    let out = f(&mut g, &batch, &c).unwrap();
    g.value(out).item()
}

pub fn centroids_match_double_loop() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let inst = Instance::draw(seed);
        let (rows, labels) = inst.rows();
        let (expected, counts) = oracle_centroids(&rows, &labels, inst.classes);
        let mut g = Graph::new();
        let vars: Vec<_> = inst.features.iter().map(|t| g.constant(t.clone())).collect();
        let grids = inst.grids();
        let refs: Vec<&PseudoLabelGrid> = grids.iter().collect();
        let batch = FeatureBatch::stack(&mut g, &vars, &refs).unwrap();
        let c = compute_centroids(&mut g, &batch, inst.classes, false).unwrap();
        ensure_eq!(c.set.counts, counts);
        ensure_eq!(c.set.counts.iter().sum::<usize>(), rows.len());
        for j in 0..inst.classes {
            ensure_eq!(c.set.present[j], counts[j] > 0);
            for (a, b) in c.set.row(j).iter().zip(&expected[j]) {
                ensure!(close(*a, *b, 1e-12), "seed {seed} class {j}: {a} vs {b}");
                ensure!(*a >= 0.0);
            }
        }
        ensure_eq!(g.value(c.var).data(), c.set.centroids.data());
    }
    Ok(())
}

pub fn clustering_matches_double_sum() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let inst = Instance::draw(seed);
        let (rows, labels) = inst.rows();
        let got = eval_loss(&inst, |g, b, c| clustering_loss(g, b, c, Distance::L1));
        let want = oracle_clustering(&rows, &labels, inst.classes);
        ensure!(close(got, want, 1e-12), "seed {seed}: {got} vs {want}");
    }
    Ok(())
}

pub fn orthogonality_matches_direct_entropy() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let inst = Instance::draw(seed);
        let (rows, labels) = inst.rows();
        let got = eval_loss(&inst, orthogonality_loss);
        let want = oracle_orthogonality(&rows, &labels, inst.classes);
        ensure!(close(got, want, 1e-12), "seed {seed}: {got} vs {want}");
        let present = (0..inst.classes).filter(|j| labels.contains(j)).count();
        ensure!(got >= -1e-15 && got <= (present as f64).ln() + 1e-12);
    }
    Ok(())
}

pub fn sparsity_matches_direct_sum() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let inst = Instance::draw(seed);
        let (rows, labels) = inst.rows();
        let got = eval_loss(&inst, |g, _, c| sparsity_loss(g, c));
        let want = oracle_sparsity(&rows, &labels, inst.classes);
        ensure!(close(got, want, 1e-12), "seed {seed}: {got} vs {want}");
    }
    Ok(())
}

pub fn max_squares_matches_pixel_loop() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = indexed_stream(1, "oracle.logits", seed);
        let c = rng.gen_range(2..=5);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let logits = random_logits(&mut rng, c, h, w);
        let mut g = Graph::new();
        let v = g.constant(logits.clone());
        let l = max_squares_loss(&mut g, v).unwrap();
        let (got, want) = (g.value(l).item(), oracle_max_squares(&logits));
        ensure!(close(got, want, 1e-12), "seed {seed}: {got} vs {want}");
    }
    Ok(())
}

pub fn cross_entropy_matches_pixel_loop() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = indexed_stream(2, "oracle.logits", seed);
        let c = rng.gen_range(2..=5);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let logits = random_logits(&mut rng, c, h, w);
        let mut labels = random_labels(&mut rng, h, w, c);
        let keep = rng.gen_range(0..h * w);
        for (i, l) in labels.labels_mut().iter_mut().enumerate() {
            if i != keep && rng.gen_bool(0.2) {
                *l = IGNORE_LABEL;
            }
        }
        let mut g = Graph::new();
        let v = g.constant(logits.clone());
        let l = cross_entropy(&mut g, v, &labels).unwrap();
        let (got, want) = (g.value(l).item(), oracle_cross_entropy(&logits, &labels));
        ensure!(close(got, want, 1e-12), "seed {seed}: {got} vs {want}");
    }
    Ok(())
}

pub fn pseudo_labels_match_argmax_then_sample() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = indexed_stream(3, "oracle.logits", seed);
        let c = rng.gen_range(2..=5);
        let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let f = rng.gen_range(1..=3);
        // coarse values so that ties occur
        let data = (0..c * h * f * w * f).map(|_| rng.gen_range(0..3) as f64).collect();
        let logits = Tensor::new(&[c, h * f, w * f], data).unwrap();
        let grid = pseudo_labels(&logits, h, w, Domain::Target).unwrap();
        let n = h * f * w * f;
        for y in 0..h {
            for x in 0..w {
                let pixel = (y * f) * (w * f) + x * f;
                let mut best = 0;
                for k in 1..c {
                    if logits.data()[k * n + pixel] > logits.data()[best * n + pixel] {
                        best = k;
                    }
                }
                ensure_eq!(grid.labels.get(y, x) as usize, best, "seed {seed}");
            }
        }
    }
    Ok(())
}

pub fn total_loss_recomposes_components() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = indexed_stream(4, "oracle.total", seed);
        let c = rng.gen_range(2..=5);
        let mut g = Graph::new();
        let mk = |g: &mut Graph, rng: &mut StreamRng| DomainForward {
            features: g.constant(relu_features(rng, 4, 2, 2)),
            logits: g.constant(random_logits(rng, c, 4, 4)),
        };
        let src = mk(&mut g, &mut rng);
        let tgt = mk(&mut g, &mut rng);
        let labels = random_labels(&mut rng, 4, 4, c);
        let w = LossWeights {
            lambda_cl: 0.1,
            lambda_or: 0.1,
            lambda_sp: 0.1,
            lambda_em: 0.1,
        };
        let obj = total_loss(&mut g, src, &labels, tgt, &w, &ObjectiveFlags::default()).unwrap();
        let r = obj.report;
        let value = |v| g.value(v).item();
        let (ce, cl, or_, sp, em) = (
            value(obj.terms.ce),
            value(obj.terms.cl),
            value(obj.terms.or_),
            value(obj.terms.sp),
            value(obj.terms.em),
        );
        ensure_eq!((r.ce, r.cl, r.or_, r.sp, r.em), (ce, cl, or_, sp, em));
        let prime = ce + 0.1 * cl + 0.1 * or_ + 0.1 * sp;
        ensure!(close(r.total_prime, prime, 1e-12));
        ensure!(close(r.total, prime + 0.1 * em, 1e-12));
        ensure!(close(g.value(obj.total).item(), r.total, 1e-12));

        let src_logits = g.value(src.logits).clone();
        let argmax = argmax_classes(&src_logits).unwrap();
        ensure_eq!(obj.source_grid.labels, argmax.downsample(2, 2).unwrap());
    }
    Ok(())
}

fn oracle_iou(truth: &[LabelMap], pred: &[LabelMap], classes: usize) -> (Vec<Option<f64>>, f64) {
    let mut per = Vec::new();
    for c in 0..classes as u8 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (t, p) in truth.iter().zip(pred) {
            for (&a, &b) in t.labels().iter().zip(p.labels()) {
                if a == IGNORE_LABEL {
                    continue;
                }
                match (a == c, b == c) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
        }
        let denom = tp + fp + fn_;
        per.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    (per, miou)
}

pub fn iou_matches_pixel_counts() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let mut rng = indexed_stream(5, "oracle.iou", seed);
        let c = rng.gen_range(2..=5);
        let images = rng.gen_range(1..=3);
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..images {
            let mut t = random_labels(&mut rng, 4, 4, c);
            t.labels_mut()[0] = IGNORE_LABEL;
            truth.push(t);
            pred.push(random_labels(&mut rng, 4, 4, c));
        }
        let mut cm = ConfusionMatrix::new(c);
        for (t, p) in truth.iter().zip(&pred) {
            cm.add(t, p).unwrap();
        }
        ensure_eq!(cm.total(), (images * 15) as u64);
        let got = iou(&cm);
        let (per, miou) = oracle_iou(&truth, &pred, c);
        for (a, b) in got.per_class.iter().zip(&per) {
            match (a, b) {
                (Some(a), Some(b)) => ensure!(close(*a, *b, 1e-9)),
                (None, None) => {}
                _ => return Err(format!("seed {seed}: validity differs")),
            }
        }
        ensure!(close(got.miou, miou, 1e-9));
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn image_rows(f: &Tensor, l: &LabelMap) -> Vec<(usize, Vec<f64>)> {
    let s = f.shape();
    let plane = s[1] * s[2];
    (0..plane)
        .map(|cell| {
            (
                l.labels()[cell] as usize,
                (0..s[0]).map(|k| f.data()[k * plane + cell]).collect(),
            )
        })
        .collect()
}

fn oracle_similarity(features: &[Tensor], labels: &[LabelMap], classes: usize) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; classes * classes];
    let mut hits = vec![0; classes * classes];
    for (f, l) in features.iter().zip(labels) {
        let rows: Vec<(usize, Vec<f64>)> = image_rows(f, l)
            .into_iter()
            .filter(|(_, v)| v.iter().any(|&x| x != 0.0))
            .collect();
        for j in 0..classes {
            for k in 0..classes {
                let mut total = 0.0;
                let mut pairs = 0;
                for (a, (ca, va)) in rows.iter().enumerate() {
                    for (b, (cb, vb)) in rows.iter().enumerate() {
                        if *ca == j && *cb == k && a != b {
                            total += cosine(va, vb);
                            pairs += 1;
                        }
                    }
                }
                if pairs > 0 {
                    sums[j * classes + k] += total / pairs as f64;
                    hits[j * classes + k] += 1;
                }
            }
        }
    }
    (0..classes * classes)
        .map(|i| (hits[i] > 0).then(|| sums[i] / hits[i] as f64))
        .collect()
}

pub fn similarity_matches_pairwise_loop() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let inst = Instance::draw(seed);
        let got = similarity_matrix(&inst.features, &inst.labels, inst.classes).unwrap();
        let want = oracle_similarity(&inst.features, &inst.labels, inst.classes);
        for (i, (a, b)) in got.values.iter().zip(&want).enumerate() {
            match (a, b) {
                (Some(a), Some(b)) => ensure!(close(*a, *b, 1e-12), "seed {seed} entry {i}: {a} vs {b}"),
                (None, None) => {}
                _ => return Err(format!("seed {seed} entry {i}: validity differs")),
            }
        }
    }
    Ok(())
}

fn oracle_sparsity_scores(features: &[Tensor], labels: &[LabelMap], classes: usize) -> Vec<Option<f64>> {
    let mut sums = vec![0.0; classes];
    let mut hits = vec![0; classes];
    for (f, l) in features.iter().zip(labels) {
        for j in 0..classes {
            let mut total = 0.0;
            let mut vectors = 0;
            for (c, v) in image_rows(f, l) {
                let peak = v.iter().copied().fold(0.0, f64::max);
                if c != j || peak == 0.0 {
                    continue;
                }
                let close_to_end = v
                    .iter()
                    .filter(|&&x| x / peak < SPARSITY_TAU || x / peak > 1.0 - SPARSITY_TAU)
                    .count();
                total += close_to_end as f64 / v.len() as f64;
                vectors += 1;
            }
            if vectors > 0 {
                sums[j] += total / vectors as f64;
                hits[j] += 1;
            }
        }
    }
    (0..classes).map(|j| (hits[j] > 0).then(|| sums[j] / hits[j] as f64)).collect()
}

pub fn sparsity_scores_match_direct_count() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let inst = Instance::draw(seed);
        let got = sparsity_scores(&inst.features, &inst.labels, inst.classes, SPARSITY_TAU).unwrap();
        let want = oracle_sparsity_scores(&inst.features, &inst.labels, inst.classes);
        for (a, b) in got.iter().zip(&want) {
            match (a, b) {
                (Some(a), Some(b)) => ensure!(close(*a, *b, 1e-12), "seed {seed}: {a} vs {b}"),
                (None, None) => {}
                _ => return Err(format!("seed {seed}: validity differs")),
            }
        }
    }
    Ok(())
}

pub fn histogram_matches_counting_pass() -> Result<(), String> {
    for seed in 0..INSTANCES {
        let inst = Instance::draw(seed);
        let got = activation_histogram(&inst.features).unwrap();
        let mut want = [0u64; HISTOGRAM_BINS];
        let mut channels = 0;
        for (f, l) in inst.features.iter().zip(&inst.labels) {
            for (_, v) in image_rows(f, l) {
                let peak = v.iter().copied().fold(0.0, f64::max);
                for x in &v {
                    let y = if peak > 0.0 { x / peak } else { 0.0 };
                    let mut bin = 0;
                    while bin + 1 < HISTOGRAM_BINS && y >= (bin + 1) as f64 * 0.05 {
                        bin += 1;
                    }
                    want[bin] += 1;
                    channels += 1;
                }
            }
        }
        ensure_eq!(got, want, "seed {seed}");
        ensure_eq!(got.iter().sum::<u64>(), channels);
    }
    Ok(())
}

/// Every check, by name.
pub const CHECKS: &[(&str, fn() -> Result<(), String>)] = &[
    ("centroids_match_double_loop", centroids_match_double_loop),
    ("clustering_matches_double_sum", clustering_matches_double_sum),
    ("orthogonality_matches_direct_entropy", orthogonality_matches_direct_entropy),
    ("sparsity_matches_direct_sum", sparsity_matches_direct_sum),
    ("max_squares_matches_pixel_loop", max_squares_matches_pixel_loop),
    ("cross_entropy_matches_pixel_loop", cross_entropy_matches_pixel_loop),
    ("pseudo_labels_match_argmax_then_sample", pseudo_labels_match_argmax_then_sample),
    ("total_loss_recomposes_components", total_loss_recomposes_components),
    ("iou_matches_pixel_counts", iou_matches_pixel_counts),
    ("similarity_matches_pairwise_loop", similarity_matches_pairwise_loop),
    ("sparsity_scores_match_direct_count", sparsity_scores_match_direct_count),
    ("histogram_matches_counting_pass", histogram_matches_counting_pass),
];
