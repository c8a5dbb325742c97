//! Rollout rewards.
//!
//! The distribution-matching reward is the F1 score of a minimum-cost
//! one-to-one matching between predicted and ground-truth centroids, with a
//! pair counted as a true positive when its distance is within the
//! threshold. The task-guided reward prompts a toy segmenter with the
//! predicted points and scores the resulting instance masks with PQ.

use alloc::vec;
use alloc::vec::Vec;

use crate::policy::Rollout;
use crate::raster::Raster;
use crate::scene::{Point, Scene};
use crate::tokenizer::{FormatError, ParsedDetections};

/// A min-cost partial bijection of size `min(n_pred, n_gt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(pred, gt, distance)` sorted by prediction index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub n_pred: usize,
    pub n_gt: usize,
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize, f64)>,
    pub tp_pred: Vec<usize>,
    pub fp_pred: Vec<usize>,
    pub fn_gt: Vec<usize>,
    pub threshold: f64,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.tp_pred.len()
    }

    pub fn fp(&self) -> usize {
        self.fp_pred.len()
    }

    pub fn fn_count(&self) -> usize {
        self.fn_gt.len()
    }

    pub fn is_tp(&self, pred: usize) -> bool {
        self.tp_pred.binary_search(&pred).is_ok()
    }
}

/// Solves the rectangular assignment problem for `cost` (`rows <= cols`)
/// with row/column potentials. Returns the column of each row.
fn solve_rect(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    // 1-based indexing; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum total cost of matching `min(rows, cols)` pairs among the given
/// row and column subsets.
fn min_cost(dist: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    // the solver wants the shorter side as rows
    let sub: Vec<Vec<f64>> =
        if rows.len() <= cols.len() { rows.iter().map(|&r| cols.iter().map(|&c| dist[r][c]).collect()).collect() } else { cols.iter().map(|&c| rows.iter().map(|&r| dist[r][c]).collect()).collect() };
    let asg = solve_rect(&sub);
    asg.iter().enumerate().map(|(i, &j)| sub[i][j]).sum()
}

/// Minimum-cost matching over Euclidean distances.
///
/// Among assignments whose cost equals the optimum (within a relative
/// tolerance of 1e-9), the one that is lexicographically smallest in
/// prediction order is returned: each prediction takes the lowest gt index
/// that still admits an optimal completion, and is left unmatched only when
/// no gt does.
pub fn hungarian_match(pred: &[Point], gt: &[Point]) -> Assignment {
    let (n, m) = (pred.len(), gt.len());
    let dist: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| p.distance(g)).collect()).collect();
    let size = n.min(m);
    if size == 0 {
        return Assignment { pairs: Vec::new(), n_pred: n, n_gt: m, total_cost: 0.0 };
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let optimum = min_cost(&dist, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + optimum);

    let mut pairs = Vec::with_capacity(size);
    let mut free_cols = all_cols;
    let mut spent = 0.0;
    for i in 0..n {
        if pairs.len() == size {
            break;
        }
        let rest: Vec<usize> = (i + 1..n).collect();
        for (ci, &j) in free_cols.iter().enumerate() {
            let mut cols = free_cols.clone();
            cols.remove(ci);
            if pairs.len() + 1 + rest.len().min(cols.len()) < size {
                continue;
            }
            let total = spent + dist[i][j] + min_cost(&dist, &rest, &cols);
            if total <= optimum + tol {
                pairs.push((i, j, dist[i][j]));
                spent += dist[i][j];
                free_cols.remove(ci);
                break;
            }
        }
        // no feasible column: row i stays unmatched (only possible when n > m)
    }
    let total_cost = pairs.iter().map(|p| p.2).sum();
    Assignment { pairs, n_pred: n, n_gt: m, total_cost }
}

/// Splits an assignment into TP / FP / FN at distance threshold `r`.
pub fn classify_matches(assignment: &Assignment, r: f64) -> MatchResult {
    let mut tp_pred = Vec::new();
    let mut gt_hit = vec![false; assignment.n_gt];
    for &(i, j, d) in &assignment.pairs {
        if d <= r {
            tp_pred.push(i);
            gt_hit[j] = true;
        }
    }
    tp_pred.sort_unstable();
    let fp_pred = (0..assignment.n_pred).filter(|i| tp_pred.binary_search(i).is_err()).collect();
    let fn_gt = (0..assignment.n_gt).filter(|&j| !gt_hit[j]).collect();
    MatchResult { pairs: assignment.pairs.clone(), tp_pred, fp_pred, fn_gt, threshold: r, n_pred: assignment.n_pred, n_gt: assignment.n_gt }
}

pub fn match_points(pred: &[Point], gt: &[Point], r: f64) -> MatchResult {
    classify_matches(&hungarian_match(pred, gt), r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision, recall and F1. Both sides empty scores 1 everywhere; an
/// empty side facing a non-empty one scores 0.
pub fn detection_scores(m: &MatchResult) -> DetectionScores {
    if m.n_pred == 0 && m.n_gt == 0 {
        return DetectionScores { f1: 1.0, precision: 1.0, recall: 1.0 };
    }
    let tp = m.tp() as f64;
    let precision = if m.n_pred > 0 { tp / (tp + m.fp() as f64) } else { 0.0 };
    let recall = if m.n_gt > 0 { tp / (tp + m.fn_count() as f64) } else { 0.0 };
    let f1 = if m.tp() == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    DetectionScores { f1, precision, recall }
}

/// Distribution-matching reward (detection F1).
pub fn dm_reward(m: &MatchResult) -> f64 {
    detection_scores(m).f1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmenterConfig {
    /// Intensity level at or above which a pixel is foreground.
    pub threshold: f64,
    /// Foreground pixels farther than this from every prompt stay unassigned.
    pub max_radius: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { threshold: 0.4, max_radius: 8.0 }
    }
}

/// Point-prompted segmentation: thresholded foreground pixels go to the
/// nearest prompt within `max_radius` (lower index on ties). Masks are
/// pairwise disjoint and may be empty.
pub fn toy_segment(points: &[Point], scene: &Scene, cfg: &SegmenterConfig) -> Vec<Raster> {
    let (w, h) = (scene.width, scene.height);
    let mut masks = vec![Raster::new(w, h); points.len()];
    if points.is_empty() {
        return masks;
    }
    let cap2 = cfg.max_radius * cfg.max_radius;
    for y in 0..h {
        for x in 0..w {
            if scene.intensity[y * w + x] < cfg.threshold {
                continue;
            }
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best: Option<(usize, f64)> = None;
            for (i, p) in points.iter().enumerate() {
                let d2 = (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
                if d2 <= cap2 && best.is_none_or(|(_, b)| d2 < b) {
                    best = Some((i, d2));
                }
            }
            if let Some((i, _)) = best {
                masks[i].set(x, y, true);
            }
        }
    }
    masks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanopticScores {
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// Panoptic quality over instance masks. Empty masks are not segments and
/// are ignored; pairs match when IoU > 0.5.
pub fn panoptic_scores(pred: &[Raster], gt: &[Raster]) -> PanopticScores {
    let pred: Vec<&Raster> = pred.iter().filter(|m| !m.is_empty()).collect();
    let gt: Vec<&Raster> = gt.iter().filter(|m| !m.is_empty()).collect();
    if pred.is_empty() && gt.is_empty() {
        return PanopticScores { pq: 1.0, dq: 1.0, sq: 1.0, tp: 0, fp: 0, fn_count: 0 };
    }
    let mut iou_sum = 0.0;
    let mut tp = 0;
    let mut pred_used = vec![false; pred.len()];
    for g in &gt {
        for (k, p) in pred.iter().enumerate() {
            if pred_used[k] {
                continue;
            }
            let iou = p.iou(g);
            if iou > 0.5 {
                pred_used[k] = true;
                iou_sum += iou;
                tp += 1;
                break;
            }
        }
    }
    let fp = pred.len() - tp;
    let fn_count = gt.len() - tp;
    let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_count as f64);
    let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
    PanopticScores { pq: dq * sq, dq, sq, tp, fp, fn_count }
}

pub fn pq_reward(pred: &[Raster], gt: &[Raster]) -> f64 {
    panoptic_scores(pred, gt).pq
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    /// Distance threshold in pixels for a true positive.
    pub r_thresh: f64,
    pub gamma: f64,
    pub use_pq: bool,
    pub segmenter: SegmenterConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { r_thresh: 6.0, gamma: 0.0, use_pq: false, segmenter: SegmenterConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub r_dm: f64,
    pub r_pq: f64,
    pub gamma: f64,
    pub r_total: f64,
    pub format_ok: bool,
    /// Whether the segmenter ran for this rollout.
    pub segmenter_called: bool,
}

/// Scores a parsed rollout; format failures get an all-zero breakdown.
pub fn score_parsed(parsed: &Result<ParsedDetections, FormatError>, scene: &Scene, cfg: &RewardConfig) -> (RewardBreakdown, Option<MatchResult>) {
    let det = match parsed {
        Ok(d) => d,
        Err(_) => {
            let zero = RewardBreakdown { r_dm: 0.0, r_pq: 0.0, gamma: cfg.gamma, r_total: 0.0, format_ok: false, segmenter_called: false };
            return (zero, None);
        }
    };
    let m = match_points(&det.points, &scene.centroids(), cfg.r_thresh);
    let r_dm = dm_reward(&m);
    let (r_pq, called) = if cfg.use_pq && cfg.gamma != 0.0 {
        let masks = toy_segment(&det.points, scene, &cfg.segmenter);
        (pq_reward(&masks, &scene.masks()), true)
    } else {
        (0.0, false)
    };
    let r_total = r_dm + cfg.gamma * r_pq;
    (RewardBreakdown { r_dm, r_pq, gamma: cfg.gamma, r_total, format_ok: true, segmenter_called: called }, Some(m))
}

pub fn rollout_reward(rollout: &Rollout, scene: &Scene, cfg: &RewardConfig) -> (RewardBreakdown, Option<MatchResult>) {
    score_parsed(&rollout.parsed, scene, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections of the smaller side.
    fn brute_min(pred: &[Point], gt: &[Point]) -> f64 {
        fn rec(i: usize, small: &[Point], large: &[Point], used: &mut Vec<bool>) -> f64 {
            if i == small.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..large.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(small[i].distance(&large[j]) + rec(i + 1, small, large, used));
                    used[j] = false;
                }
            }
            best
        }
        let (small, large) = if pred.len() <= gt.len() { (pred, gt) } else { (gt, pred) };
        rec(0, small, large, &mut vec![false; large.len()])
    }

    fn random_points(rng: &mut ChaCha8Rng, count: core::ops::Range<usize>) -> Vec<Point> {
        let n = rng.gen_range(count);
        (0..n).map(|_| Point::new(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect()
    }

    #[test]
    fn identity_and_empty() {
        let pts = vec![Point::new(1.0, 2.0), Point::new(30.0, 5.0), Point::new(12.0, 40.0)];
        let a = hungarian_match(&pts, &pts);
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(a.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2)]);
        assert!(hungarian_match(&[], &pts[..2]).pairs.is_empty());
        assert!(hungarian_match(&pts, &[]).pairs.is_empty());
    }

    #[test]
    fn matches_exhaustive_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let pred = random_points(&mut rng, 0..8);
            let gt = random_points(&mut rng, 0..8);
            let a = hungarian_match(&pred, &gt);
            assert_eq!(a.pairs.len(), pred.len().min(gt.len()));
            assert!((a.total_cost - brute_min(&pred, &gt)).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        // two predictions equidistant from two gts: both assignments cost the same
        let pred = vec![Point::new(10.0, 10.0), Point::new(20.0, 10.0)];
        let gt = vec![Point::new(15.0, 5.0), Point::new(15.0, 15.0)];
        let a = hungarian_match(&pred, &gt);
        assert_eq!((a.pairs[0].0, a.pairs[0].1), (0, 0));
        assert_eq!((a.pairs[1].0, a.pairs[1].1), (1, 1));
        // surplus predictions at identical positions: the lower index is matched
        let pred = vec![Point::new(5.0, 5.0), Point::new(5.0, 5.0)];
        let a = hungarian_match(&pred, &[Point::new(6.0, 5.0)]);
        assert_eq!(a.pairs, vec![(0, 0, 1.0)]);
    }

    #[test]
    fn classification_examples() {
        let g = [Point::new(20.0, 20.0)];
        let m = match_points(&[Point::new(20.0, 20.0)], &g, 6.0);
        assert_eq!((m.tp(), m.fp(), m.fn_count()), (1, 0, 0));
        let m = match_points(&[Point::new(30.0, 20.0)], &g, 6.0);
        assert_eq!((m.tp(), m.fp(), m.fn_count()), (0, 1, 1));
        let gt = [Point::new(10.0, 10.0), Point::new(40.0, 40.0)];
        let pred = [Point::new(11.0, 10.0), Point::new(60.0, 5.0), Point::new(41.0, 42.0)];
        let m = match_points(&pred, &gt, 6.0);
        assert_eq!((m.tp(), m.fp(), m.fn_count()), (2, 1, 0));
        assert_eq!(m.fp_pred, vec![1]);
    }

    #[test]
    fn f1_conventions() {
        let gt = [Point::new(10.0, 10.0), Point::new(40.0, 40.0)];
        let m = match_points(&[Point::new(10.0, 10.0)], &gt, 6.0);
        let s = detection_scores(&m);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dm_reward(&match_points(&[], &[], 6.0)), 1.0);
        assert_eq!(dm_reward(&match_points(&[], &[gt[0], gt[1], gt[0]], 6.0)), 0.0);
        assert_eq!(dm_reward(&match_points(&gt, &[], 6.0)), 0.0);
    }

    #[test]
    fn reward_is_permutation_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let gt = random_points(&mut rng, 0..7);
            let mut pred: Vec<Point> = gt.iter().map(|p| Point::new(p.x + rng.gen_range(-8.0..8.0), p.y + rng.gen_range(-8.0..8.0))).collect();
            pred.extend(random_points(&mut rng, 0..3));
            let r = dm_reward(&match_points(&pred, &gt, 6.0));
            assert!((0.0..=1.0).contains(&r));
            pred.reverse();
            assert_eq!(r, dm_reward(&match_points(&pred, &gt, 6.0)));
            let m = match_points(&pred, &gt, 6.0);
            assert_eq!(r == 1.0, m.tp() == pred.len() && m.tp() == gt.len());
        }
    }

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Raster {
        let mut r = Raster::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                r.set(x, y, true);
            }
        }
        r
    }

    #[test]
    fn pq_examples() {
        let g = rect(20, 20, 0, 0, 10, 10);
        let p = rect(20, 20, 0, 0, 6, 10);
        assert_eq!(pq_reward(core::slice::from_ref(&g), core::slice::from_ref(&g)), 1.0);
        let s = panoptic_scores(&[p], core::slice::from_ref(&g));
        assert!((s.pq - 0.6).abs() < 1e-12);
        assert_eq!((s.dq, s.tp), (1.0, 1));
        assert_eq!(pq_reward(&[Raster::new(20, 20)], &[g]), 0.0);
        assert_eq!(pq_reward(&[], &[]), 1.0);
    }

    #[test]
    fn toy_segment_recovers_discs() {
        let cfg = SceneConfig::default();
        for seed in 0..30 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let masks = toy_segment(&scene.centroids(), &scene, &SegmenterConfig::default());
            for (m, inst) in masks.iter().zip(&scene.instances) {
                assert!(m.iou(&inst.mask) >= 0.9, "seed {seed}: {}", m.iou(&inst.mask));
            }
        }
    }

    #[test]
    fn toy_segment_background_and_duplicates() {
        let scene = generate_scene(&SceneConfig { count_min: 1, count_max: 1, ..SceneConfig::default() }, 2).unwrap();
        let c = scene.instances[0].centroid;
        let far = Point::new(if c.x < 32.0 { 63.0 } else { 0.5 }, if c.y < 32.0 { 63.0 } else { 0.5 });
        assert!(toy_segment(&[far], &scene, &SegmenterConfig::default())[0].is_empty());
        let masks = toy_segment(&[c, c], &scene, &SegmenterConfig::default());
        assert_eq!(masks[0].intersection(&masks[1]), 0);
        assert!(masks[1].is_empty());
        assert!(masks[0].iou(&scene.instances[0].mask) >= 0.9);
    }

    #[test]
    fn toy_segment_masks_disjoint_within_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seg = SegmenterConfig::default();
        let scene = generate_scene(&SceneConfig::default(), 21).unwrap();
        let pts = random_points(&mut rng, 12..13);
        let masks = toy_segment(&pts, &scene, &seg);
        for (i, a) in masks.iter().enumerate() {
            for b in &masks[i + 1..] {
                assert_eq!(a.intersection(b), 0);
            }
            for y in 0..64 {
                for x in 0..64 {
                    if a.get(x, y) {
                        assert!(scene.intensity_at(x, y) >= seg.threshold);
                    }
                }
            }
        }
    }

    #[test]
    fn perfect_points_with_pq_bonus() {
        let scene = generate_scene(&SceneConfig::default(), 5).unwrap();
        let vocab = crate::tokenizer::Vocabulary::new(64, 0).unwrap();
        let seq = crate::tokenizer::encode_points(&scene.centroids(), 64, 64, &vocab).unwrap();
        let parsed = crate::tokenizer::parse_sequence(&seq, 64, 64, &vocab);
        let cfg0 = RewardConfig::default();
        let (b, _) = score_parsed(&parsed, &scene, &cfg0);
        assert_eq!(b.r_total, 1.0);
        assert!(!b.segmenter_called);
        let cfg = RewardConfig { gamma: 0.5, use_pq: true, ..cfg0 };
        let (b, _) = score_parsed(&parsed, &scene, &cfg);
        let masks = toy_segment(&parsed.as_ref().unwrap().points, &scene, &cfg.segmenter);
        let p = pq_reward(&masks, &scene.masks());
        assert!(p > 0.0);
        assert_eq!(b.r_total, 1.0 + 0.5 * p);
        let bad: Result<ParsedDetections, FormatError> = Err(FormatError { index: 0, kind: crate::tokenizer::Violation::MissingBos });
        let (b, m) = score_parsed(&bad, &scene, &cfg);
        assert_eq!((b.r_total, b.format_ok, m.is_none()), (0.0, false, true));
    }
}
