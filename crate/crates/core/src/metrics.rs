//! Evaluation metrics and split-level reports.

use alloc::vec::Vec;
use core::fmt;

use crate::exec::Executor;
use crate::policy::{sample_rollout, Decoding, PolicyError, PolicyParams};
use crate::raster::Raster;
use crate::reward::{detection_scores, match_points, panoptic_scores, toy_segment, DetectionScores, PanopticScores, SegmenterConfig};
use crate::scene::{Point, Scene};

/// Detection F1, precision and recall; the same computation as the
/// detection reward.
pub fn detection_f1(pred: &[Point], gt: &[Point], r_thresh: f64) -> DetectionScores {
    detection_scores(&match_points(pred, gt, r_thresh))
}

/// PQ with its DQ / SQ factors (IoU > 0.5 matching). SQ is 0 when nothing
/// matches.
pub fn panoptic_quality(pred: &[Raster], gt: &[Raster]) -> PanopticScores {
    panoptic_scores(pred, gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricError {
    /// Predicted masks `a` and `b` share at least one pixel.
    OverlappingPredictions {
        a: usize,
        b: usize,
    },
    ShapeMismatch,
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::OverlappingPredictions { a, b } => write!(f, "predicted masks {a} and {b} overlap"),
            MetricError::ShapeMismatch => f.write_str("masks differ in shape"),
        }
    }
}

impl core::error::Error for MetricError {}

/// Aggregated Jaccard index.
///
/// Ground-truth instances are visited in order; each takes the unused
/// prediction with the highest IoU (lowest index on ties, none if every
/// remaining IoU is 0). Unused predictions add their area to the
/// denominator. Both sides empty scores 1.
pub fn aji(pred: &[Raster], gt: &[Raster]) -> Result<f64, MetricError> {
    let shape = pred.first().or(gt.first());
    if let Some(s) = shape {
        if pred.iter().chain(gt).any(|m| !m.same_shape(s)) {
            return Err(MetricError::ShapeMismatch);
        }
    }
    for a in 0..pred.len() {
        for b in a + 1..pred.len() {
            if pred[a].intersection(&pred[b]) > 0 {
                return Err(MetricError::OverlappingPredictions { a, b });
            }
        }
    }
    let mut used = alloc::vec![false; pred.len()];
    let (mut inter, mut union) = (0usize, 0usize);
    for g in gt {
        let mut best: Option<(usize, f64)> = None;
        for (k, p) in pred.iter().enumerate() {
            if used[k] {
                continue;
            }
            let iou = p.iou(g);
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        match best {
            Some((k, _)) => {
                used[k] = true;
                inter += pred[k].intersection(g);
                union += pred[k].union(g);
            }
            None => union += g.count(),
        }
    }
    union += pred.iter().zip(&used).filter(|(_, u)| !**u).map(|(p, _)| p.count()).sum::<usize>();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub r_thresh: f64,
    pub segmenter: SegmenterConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { r_thresh: 6.0, segmenter: SegmenterConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene: usize,
    pub format_ok: bool,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub aji: f64,
    pub n_pred: usize,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// Unweighted means over scenes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub aji: f64,
    pub scenes: usize,
    pub format_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Matching rule used for PQ.
    pub iou_threshold: f64,
    pub records: Vec<SceneRecord>,
    pub aggregate: Aggregate,
}

/// Scores one scene. `None` marks a format failure, which scores 0 on every
/// metric.
pub fn score_scene(index: usize, scene: &Scene, pred: Option<&[Point]>, cfg: &EvalConfig) -> SceneRecord {
    let gt_pts = scene.centroids();
    let Some(pts) = pred else {
        return SceneRecord {
            scene: index,
            format_ok: false,
            f1: 0.0,
            precision: 0.0,
            recall: 0.0,
            pq: 0.0,
            dq: 0.0,
            sq: 0.0,
            aji: 0.0,
            n_pred: 0,
            n_gt: gt_pts.len(),
            tp: 0,
            fp: 0,
            fn_count: gt_pts.len(),
        };
    };
    let m = match_points(pts, &gt_pts, cfg.r_thresh);
    let det = detection_scores(&m);
    let masks = toy_segment(pts, scene, &cfg.segmenter);
    let gt_masks = scene.masks();
    let pan = panoptic_scores(&masks, &gt_masks);
    let aji = aji(&masks, &gt_masks).expect("segmenter masks are disjoint and share the scene shape");
    SceneRecord {
        scene: index,
        format_ok: true,
        f1: det.f1,
        precision: det.precision,
        recall: det.recall,
        pq: pan.pq,
        dq: pan.dq,
        sq: pan.sq,
        aji,
        n_pred: pts.len(),
        n_gt: gt_pts.len(),
        tp: m.tp(),
        fp: m.fp(),
        fn_count: m.fn_count(),
    }
}

pub fn aggregate(records: &[SceneRecord]) -> Aggregate {
    let n = records.len();
    if n == 0 {
        return Aggregate::default();
    }
    let mean = |f: fn(&SceneRecord) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
    Aggregate {
        f1: mean(|r| r.f1),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        pq: mean(|r| r.pq),
        dq: mean(|r| r.dq),
        sq: mean(|r| r.sq),
        aji: mean(|r| r.aji),
        scenes: n,
        format_failures: records.iter().filter(|r| !r.format_ok).count(),
    }
}

/// Report for precomputed predictions (one entry per scene).
pub fn evaluate_predictions(scenes: &[Scene], predictions: &[Option<Vec<Point>>], cfg: &EvalConfig) -> EvalReport {
    let records: Vec<SceneRecord> = scenes.iter().zip(predictions).enumerate().map(|(i, (s, p))| score_scene(i, s, p.as_deref(), cfg)).collect();
    EvalReport { config: *cfg, iou_threshold: 0.5, aggregate: aggregate(&records), records }
}

/// Greedy decoding on every scene followed by the full metric suite.
pub fn evaluate_split<E: Executor>(params: &PolicyParams, scenes: &[Scene], cfg: &EvalConfig, exec: &E) -> Result<EvalReport, PolicyError> {
    let records = exec.map_indexed(scenes.len(), &|i| {
        let r = sample_rollout(params, &scenes[i], Decoding::Greedy, 0)?;
        let pts = r.parsed.as_ref().ok().map(|d| d.points.as_slice());
        Ok(score_scene(i, &scenes[i], pts, cfg))
    });
    let records = records.into_iter().collect::<Result<Vec<_>, PolicyError>>()?;
    Ok(EvalReport { config: *cfg, iou_threshold: 0.5, aggregate: aggregate(&records), records })
}
