//! CSV outputs: the training metric log and the diagnostic tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use udafeat_core::metrics::{
    histogram_difference, IouReport, ProjectedPoint, SimilarityMatrix, HISTOGRAM_BINS, HISTOGRAM_BIN_WIDTH,
};
use udafeat_core::synth::CLASS_NAMES;
use udafeat_core::trainer::{Phase, StepLog};

use crate::error::{io_err, Result};

pub const METRIC_LOG_HEADER: &str = "step,lr,ce,cl,or,sp,em,total_prime,total,val_miou";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn class_name(j: usize) -> String {
    CLASS_NAMES.get(j).map_or_else(|| j.to_string(), |s| (*s).to_string())
}

/// One metric-log row. Warm-up rows leave the adaptation terms blank.
pub fn metric_row(log: &StepLog) -> String {
    let r = &log.report;
    let adapt = log.phase == Phase::Adapt;
    let term = |v: f64| if adapt { v.to_string() } else { String::new() };
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        log.step,
        log.lr,
        r.ce,
        term(r.cl),
        term(r.or_),
        term(r.sp),
        term(r.em),
        r.total_prime,
        r.total,
        opt(log.val_miou)
    )
}

/// A parsed metric-log row; blank cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub cl: Option<f64>,
    pub or_: Option<f64>,
    pub sp: Option<f64>,
    pub em: Option<f64>,
    pub total_prime: f64,
    pub total: f64,
    pub val_miou: Option<f64>,
}

/// Parses a metric log written by [`metric_row`].
pub fn parse_metric_log(text: &str) -> std::result::Result<Vec<MetricRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(METRIC_LOG_HEADER) {
        return Err("missing metric log header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 10 {
                return Err(format!("row {}: expected 10 cells", i + 1));
            }
            let num = |k: usize| cells[k].parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1));
            let maybe = |k: usize| if cells[k].is_empty() { Ok(None) } else { num(k).map(Some) };
            Ok(MetricRow {
                step: cells[0].parse().map_err(|e| format!("row {}: {e}", i + 1))?,
                lr: num(1)?,
                ce: num(2)?,
                cl: maybe(3)?,
                or_: maybe(4)?,
                sp: maybe(5)?,
                em: maybe(6)?,
                total_prime: num(7)?,
                total: num(8)?,
                val_miou: maybe(9)?,
            })
        })
        .collect()
}

pub fn iou_csv(report: &IouReport) -> String {
    let mut s = String::from("class,iou\n");
    for (j, v) in report.per_class.iter().enumerate() {
        let _ = writeln!(s, "{},{}", class_name(j), opt(*v));
    }
    let _ = writeln!(s, "mIoU,{}", report.miou);
    s
}

/// Square matrix with class names on both axes; invalid cells blank.
pub fn similarity_csv(m: &SimilarityMatrix) -> String {
    let n = m.num_classes;
    let mut s = String::from("class");
    for k in 0..n {
        let _ = write!(s, ",{}", class_name(k));
    }
    s.push('\n');
    for j in 0..n {
        s.push_str(&class_name(j));
        for k in 0..n {
            let _ = write!(s, ",{}", opt(m.get(j, k)));
        }
        s.push('\n');
    }
    s
}

pub fn sparsity_csv(scores: &[Option<f64>]) -> String {
    let mut s = String::from("class,score\n");
    for (j, v) in scores.iter().enumerate() {
        let _ = writeln!(s, "{},{}", class_name(j), opt(*v));
    }
    s
}

fn bin_edges(b: usize) -> (f64, f64) {
    (b as f64 * HISTOGRAM_BIN_WIDTH, (b + 1) as f64 * HISTOGRAM_BIN_WIDTH)
}

pub fn histogram_csv(counts: &[u64; HISTOGRAM_BINS]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (b, c) in counts.iter().enumerate() {
        let (lo, hi) = bin_edges(b);
        let _ = writeln!(s, "{lo},{hi},{c}");
    }
    s
}

pub fn projection_csv(points: &[ProjectedPoint]) -> String {
    let mut s = String::from("x,y,class\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.x, p.y, p.class);
    }
    s
}

/// Per-pair similarity of two runs and their difference `a - b`.
pub fn similarity_comparison_csv(a: &SimilarityMatrix, b: &SimilarityMatrix) -> String {
    let mut s = String::from("class_a,class_b,similarity_a,similarity_b,delta\n");
    for j in 0..a.num_classes {
        for k in 0..a.num_classes {
            let (x, y) = (a.get(j, k), b.get(j, k));
            let d = x.zip(y).map(|(x, y)| x - y);
            let _ = writeln!(s, "{},{},{},{},{}", class_name(j), class_name(k), opt(x), opt(y), opt(d));
        }
    }
    s
}

/// Per-class intra-class similarity and sparsity score of two runs with
/// differences `a - b`.
pub fn class_comparison_csv(
    sim_a: &SimilarityMatrix,
    sim_b: &SimilarityMatrix,
    sp_a: &[Option<f64>],
    sp_b: &[Option<f64>],
) -> String {
    let mut s = String::from("class,intra_similarity_a,intra_similarity_b,intra_similarity_delta,sparsity_a,sparsity_b,sparsity_delta\n");
    for j in 0..sim_a.num_classes {
        let (ia, ib) = (sim_a.get(j, j), sim_b.get(j, j));
        let (sa, sb) = (sp_a[j], sp_b[j]);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            class_name(j),
            opt(ia),
            opt(ib),
            opt(ia.zip(ib).map(|(x, y)| x - y)),
            opt(sa),
            opt(sb),
            opt(sa.zip(sb).map(|(x, y)| x - y))
        );
    }
    s
}

pub fn histogram_comparison_csv(a: &[u64; HISTOGRAM_BINS], b: &[u64; HISTOGRAM_BINS]) -> String {
    let diff = histogram_difference(a, b);
    let mut s = String::from("bin_lo,bin_hi,count_a,count_b,difference\n");
    for k in 0..HISTOGRAM_BINS {
        let (lo, hi) = bin_edges(k);
        let _ = writeln!(s, "{lo},{hi},{},{},{}", a[k], b[k], diff[k]);
    }
    s
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}
