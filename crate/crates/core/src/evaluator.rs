//! COCO-style detection metrics on whole-image detections.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetIndex;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const SMALL_MAX_AREA: f64 = 1024.0;
pub const MEDIUM_MAX_AREA: f64 = 9216.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_dets_per_image: usize,
    /// Restricts ground truth and detections to these category ids.
    pub class_subset: Option<Vec<u64>>,
    pub confusion_confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + i as f64 * 0.05).collect(),
            max_dets_per_image: 2000,
            class_subset: None,
            confusion_confidence: 0.60,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("at least one IoU threshold is required".into()));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("IoU thresholds must be strictly increasing".into()));
        }
        if self.max_dets_per_image == 0 {
            return Err(Error::Config("max_dets_per_image must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confusion_confidence) {
            return Err(Error::Config("confusion_confidence must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Half-open ground-truth area range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange { lo: 0.0, hi: f64::INFINITY };
    pub const SMALL: AreaRange = AreaRange { lo: 0.0, hi: SMALL_MAX_AREA };
    pub const MEDIUM: AreaRange = AreaRange { lo: SMALL_MAX_AREA, hi: MEDIUM_MAX_AREA };
    pub const LARGE: AreaRange = AreaRange { lo: MEDIUM_MAX_AREA, hi: f64::INFINITY };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Neither TP nor FP: matched to, or sized like, out-of-range truth.
    Ignored,
}

/// Result of matching one image's detections of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Considered detections in score order.
    pub scores: Vec<f64>,
    pub outcomes: Vec<Outcome>,
    /// Per ground-truth box, in input order: index of the matched detection.
    pub gt_match: Vec<Option<usize>>,
    pub gt_ignored: Vec<bool>,
}

impl Matching {
    pub fn num_gt(&self) -> usize {
        self.gt_ignored.iter().filter(|i| !**i).count()
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.outcomes.iter().filter(|o| **o == outcome).count()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_match
            .iter()
            .zip(&self.gt_ignored)
            .filter(|(m, ig)| m.is_none() && !**ig)
            .count()
    }
}

/// Greedy COCO matching. Detections are taken in descending score order
/// (stable on ties) and truncated to `max_dets`; each claims the unmatched
/// truth box with the highest IoU at or above `iou_t`, preferring in-range
/// truth over out-of-range truth.
pub fn match_detections(
    gt: &[BBox],
    dets: &[(BBox, f64)],
    iou_t: f64,
    range: AreaRange,
    max_dets: usize,
) -> Matching {
    let gt_ignored: Vec<bool> = gt.iter().map(|g| !range.contains(g.area())).collect();
    // In-range truth first, input order otherwise.
    let mut gt_order: Vec<usize> = (0..gt.len()).collect();
    gt_order.sort_by_key(|&g| gt_ignored[g]);

    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    det_order.truncate(max_dets);

    let mut gt_match = vec![None; gt.len()];
    let mut scores = Vec::with_capacity(det_order.len());
    let mut outcomes = Vec::with_capacity(det_order.len());
    for (k, &d) in det_order.iter().enumerate() {
        let (dbox, score) = dets[d];
        let mut best: Option<usize> = None;
        let mut best_iou = iou_t.min(1.0 - 1e-10);
        for &g in &gt_order {
            if gt_match[g].is_some() {
                continue;
            }
            if let Some(m) = best {
                if !gt_ignored[m] && gt_ignored[g] {
                    break;
                }
            }
            let v = iou(&dbox, &gt[g]);
            if v < best_iou {
                continue;
            }
            best_iou = v;
            best = Some(g);
        }
        let outcome = match best {
            Some(g) => {
                gt_match[g] = Some(k);
                if gt_ignored[g] {
                    Outcome::Ignored
                } else {
                    Outcome::TruePositive
                }
            }
            None if !range.contains(dbox.area()) => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
        scores.push(score);
        outcomes.push(outcome);
    }
    Matching {
        scores,
        outcomes,
        gt_match,
        gt_ignored,
    }
}

/// Recall sample points 0.00, 0.01, ..., 1.00.
fn recall_points() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| if i == 100 { 1.0 } else { i as f64 * 0.01 })
}

/// 101-point interpolated AP over the matchings of one class at one
/// threshold, taken image by image. `None` when the class has neither
/// in-range truth nor counted detections.
pub fn average_precision(matchings: &[Matching]) -> Option<f64> {
    let num_gt: usize = matchings.iter().map(Matching::num_gt).sum();
    let mut ranked: Vec<(f64, bool)> = matchings
        .iter()
        .flat_map(|m| m.scores.iter().zip(&m.outcomes))
        .filter(|(_, o)| **o != Outcome::Ignored)
        .map(|(s, o)| (*s, *o == Outcome::TruePositive))
        .collect();
    if num_gt == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &ranked {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let total: f64 = recall_points()
        .map(|r| {
            let i = recall.partition_point(|&v| v < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub category_id: u64,
    pub name: String,
    pub gt_count: usize,
    pub det_count: usize,
    pub ap_50_95: Option<f64>,
    pub ap_50: Option<f64>,
    /// Counts at IoU 0.5 over all considered detections.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Class names in row order, then "background" and "missed".
    pub labels: Vec<String>,
    pub category_ids: Vec<u64>,
    pub confidence: f64,
    /// `cells[true][predicted]`.
    pub cells: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn background(&self) -> usize {
        self.category_ids.len()
    }

    pub fn missed(&self) -> usize {
        self.category_ids.len() + 1
    }

    pub fn off_diagonal_total(&self) -> u64 {
        let k = self.category_ids.len();
        (0..k)
            .flat_map(|r| (0..k).map(move |c| (r, c)))
            .filter(|(r, c)| r != c)
            .map(|(r, c)| self.cells[r][c])
            .sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.cells
            .iter()
            .enumerate()
            .all(|(r, row)| row.iter().enumerate().all(|(c, v)| r == c || *v == 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_50_95: Option<f64>,
    pub map_50: Option<f64>,
    pub map_50_small: Option<f64>,
    pub map_50_medium: Option<f64>,
    pub map_50_large: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    pub class_subset: Option<Vec<u64>>,
    pub per_class: Vec<ClassEval>,
    pub confusion: ConfusionMatrix,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

impl EvalReport {
    pub fn class(&self, category_id: u64) -> Option<&ClassEval> {
        self.per_class.iter().find(|c| c.category_id == category_id)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>8} {:>8} {:>8} {:>8}", "mAP@0.5:0.95", "mAP@0.5", "Small", "Medium", "Large");
        let _ = writeln!(
            s,
            "{:<14} {:>8} {:>8} {:>8} {:>8}",
            fmt_metric(self.map_50_95),
            fmt_metric(self.map_50),
            fmt_metric(self.map_50_small),
            fmt_metric(self.map_50_medium),
            fmt_metric(self.map_50_large)
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>6} {:>8} {:>8} {:>6} {:>6} {:>6}",
            "class", "gt", "dets", "AP", "AP50", "TP", "FP", "FN"
        );
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<28} {:>6} {:>6} {:>8} {:>8} {:>6} {:>6} {:>6}",
                c.name,
                c.gt_count,
                c.det_count,
                fmt_metric(c.ap_50_95),
                fmt_metric(c.ap_50),
                c.tp,
                c.fp,
                c.fn_
            );
        }
        s
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Detections grouped by (image, category), checked against the dataset.
fn index_detections(
    gt: &DatasetIndex,
    dets: &[Detection],
) -> Result<HashMap<(u64, u64), Vec<(BBox, f64)>>> {
    let images: BTreeSet<u64> = gt.images.iter().map(|i| i.image_id).collect();
    let mut out: HashMap<(u64, u64), Vec<(BBox, f64)>> = HashMap::new();
    for d in dets {
        let image_id = d
            .image_id
            .ok_or_else(|| Error::Structural("detection is not in whole-image coordinates".into()))?;
        if !images.contains(&image_id) {
            return Err(Error::Structural(format!("detection references unknown image {image_id}")));
        }
        if !gt.categories.contains(d.category_id) {
            return Err(Error::Structural(format!(
                "detection references unknown category {}",
                d.category_id
            )));
        }
        out.entry((image_id, d.category_id)).or_default().push((d.bbox, d.score));
    }
    Ok(out)
}

struct ClassTask<'a> {
    image_ids: &'a [u64],
    gt: &'a HashMap<(u64, u64), Vec<BBox>>,
    dets: &'a HashMap<(u64, u64), Vec<(BBox, f64)>>,
    max_dets: usize,
}

impl ClassTask<'_> {
    fn matchings(&self, class: u64, iou_t: f64, range: AreaRange) -> Vec<Matching> {
        self.image_ids
            .iter()
            .filter_map(|&img| {
                let g = self.gt.get(&(img, class)).map(Vec::as_slice).unwrap_or(&[]);
                let d = self.dets.get(&(img, class)).map(Vec::as_slice).unwrap_or(&[]);
                (!g.is_empty() || !d.is_empty()).then(|| match_detections(g, d, iou_t, range, self.max_dets))
            })
            .collect()
    }

    fn ap(&self, class: u64, iou_t: f64, range: AreaRange) -> Option<f64> {
        average_precision(&self.matchings(class, iou_t, range))
    }
}

/// Full COCO-style report: mAP over the configured thresholds, mAP at 0.5
/// overall and per size bucket, per-class figures and the confusion matrix.
pub fn coco_map(gt: &DatasetIndex, dets: &[Detection], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let classes: Vec<u64> = match &cfg.class_subset {
        Some(subset) => {
            for c in subset {
                if !gt.categories.contains(*c) {
                    return Err(Error::Config(format!("class subset names unknown category {c}")));
                }
            }
            gt.categories.ids().into_iter().filter(|c| subset.contains(c)).collect()
        }
        None => gt.categories.ids(),
    };
    let wanted: BTreeSet<u64> = classes.iter().copied().collect();
    let det_index = index_detections(gt, dets)?;
    let det_index: HashMap<(u64, u64), Vec<(BBox, f64)>> =
        det_index.into_iter().filter(|((_, c), _)| wanted.contains(c)).collect();
    let mut gt_index: HashMap<(u64, u64), Vec<BBox>> = HashMap::new();
    for a in gt.annotations.iter().filter(|a| wanted.contains(&a.category_id)) {
        gt_index.entry((a.image_id, a.category_id)).or_default().push(a.bbox);
    }
    let mut image_ids: Vec<u64> = gt.images.iter().map(|i| i.image_id).collect();
    image_ids.sort_unstable();
    let task = ClassTask {
        image_ids: &image_ids,
        gt: &gt_index,
        dets: &det_index,
        max_dets: cfg.max_dets_per_image,
    };

    struct PerClass {
        eval: ClassEval,
        per_threshold: Vec<Option<f64>>,
        buckets: [Option<f64>; 3],
    }
    let per_class: Vec<PerClass> = classes
        .par_iter()
        .map(|&class| {
            let per_threshold: Vec<Option<f64>> =
                cfg.iou_thresholds.iter().map(|&t| task.ap(class, t, AreaRange::ALL)).collect();
            let at_50 = task.matchings(class, 0.5, AreaRange::ALL);
            let buckets = [AreaRange::SMALL, AreaRange::MEDIUM, AreaRange::LARGE].map(|r| task.ap(class, 0.5, r));
            let name = gt.categories.get(class).map(|c| c.name.clone()).unwrap_or_default();
            let eval = ClassEval {
                category_id: class,
                name,
                gt_count: at_50.iter().map(Matching::num_gt).sum(),
                det_count: image_ids
                    .iter()
                    .filter_map(|&i| det_index.get(&(i, class)))
                    .map(Vec::len)
                    .sum(),
                ap_50_95: mean(per_threshold.iter().copied()),
                ap_50: average_precision(&at_50),
                tp: at_50.iter().map(|m| m.count(Outcome::TruePositive)).sum(),
                fp: at_50.iter().map(|m| m.count(Outcome::FalsePositive)).sum(),
                fn_: at_50.iter().map(Matching::false_negatives).sum(),
            };
            PerClass {
                eval,
                per_threshold,
                buckets,
            }
        })
        .collect();

    let confusion = confusion_matrix(gt, dets, cfg)?;
    Ok(EvalReport {
        map_50_95: mean(per_class.iter().flat_map(|p| p.per_threshold.iter().copied())),
        map_50: mean(per_class.iter().map(|p| p.eval.ap_50)),
        map_50_small: mean(per_class.iter().map(|p| p.buckets[0])),
        map_50_medium: mean(per_class.iter().map(|p| p.buckets[1])),
        map_50_large: mean(per_class.iter().map(|p| p.buckets[2])),
        iou_thresholds: cfg.iou_thresholds.clone(),
        class_subset: cfg.class_subset.clone(),
        per_class: per_class.into_iter().map(|p| p.eval).collect(),
        confusion,
    })
}

/// Confusion matrix at `cfg.confusion_confidence`: class-agnostic greedy
/// matching at IoU 0.5, rows ordered by descending truth abundance.
pub fn confusion_matrix(gt: &DatasetIndex, dets: &[Detection], cfg: &EvalConfig) -> Result<ConfusionMatrix> {
    let wanted: Option<BTreeSet<u64>> = cfg.class_subset.as_ref().map(|s| s.iter().copied().collect());
    let keep = |c: u64| wanted.as_ref().is_none_or(|w| w.contains(&c));
    let mut abundance: BTreeMap<u64, usize> = gt.categories.ids().into_iter().filter(|c| keep(*c)).map(|c| (c, 0)).collect();
    for a in &gt.annotations {
        if let Some(n) = abundance.get_mut(&a.category_id) {
            *n += 1;
        }
    }
    let mut order: Vec<(u64, usize)> = abundance.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let category_ids: Vec<u64> = order.iter().map(|(c, _)| *c).collect();
    let pos: HashMap<u64, usize> = category_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let k = category_ids.len();
    let (background, missed) = (k, k + 1);
    let mut cells = vec![vec![0u64; k + 2]; k + 2];

    index_detections(gt, dets)?;
    let mut gt_by_image: BTreeMap<u64, Vec<(BBox, usize)>> = BTreeMap::new();
    for a in &gt.annotations {
        if let Some(&row) = pos.get(&a.category_id) {
            gt_by_image.entry(a.image_id).or_default().push((a.bbox, row));
        }
    }
    let mut det_by_image: BTreeMap<u64, Vec<(BBox, f64, usize)>> = BTreeMap::new();
    for d in dets {
        if d.score < cfg.confusion_confidence {
            continue;
        }
        if let Some(&col) = pos.get(&d.category_id) {
            det_by_image
                .entry(d.image_id.expect("checked above"))
                .or_default()
                .push((d.bbox, d.score, col));
        }
    }
    for img in &gt.images {
        let truth = gt_by_image.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let mut found: Vec<(BBox, f64, usize)> = det_by_image.remove(&img.image_id).unwrap_or_default();
        found.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut taken = vec![false; truth.len()];
        for (dbox, _, col) in &found {
            let mut best: Option<(usize, f64)> = None;
            for (g, (gbox, _)) in truth.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(dbox, gbox);
                if v >= 0.5 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    cells[truth[g].1][*col] += 1;
                }
                None => cells[background][*col] += 1,
            }
        }
        for (g, (_, row)) in truth.iter().enumerate() {
            if !taken[g] {
                cells[*row][missed] += 1;
            }
        }
    }
    let mut labels: Vec<String> = category_ids
        .iter()
        .map(|c| gt.categories.get(*c).map(|c| c.name.clone()).unwrap_or_default())
        .collect();
    labels.push("background".into());
    labels.push("missed".into());
    Ok(ConfusionMatrix {
        labels,
        category_ids,
        confidence: cfg.confusion_confidence,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, Category, CategoryTable, ImageRecord};
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn det(image: u64, class: u64, b: BBox, score: f64) -> Detection {
        let mut d = Detection::new(b, class, score);
        d.image_id = Some(image);
        d
    }

    fn dataset(gt: &[(u64, u64, BBox)]) -> DatasetIndex {
        let cats = CategoryTable::new(vec![Category::new(1, "a", true), Category::new(2, "b", false)]).unwrap();
        let images = vec![ImageRecord::new(1, "1.png", 1000, 1000), ImageRecord::new(2, "2.png", 1000, 1000)];
        let anns = gt
            .iter()
            .enumerate()
            .map(|(i, (img, c, b))| Annotation::new(i as u64 + 1, *img, *c, *b))
            .collect();
        DatasetIndex::new(images, anns, cats).unwrap()
    }

    fn ap_of(gt: &[BBox], dets: &[(BBox, f64)], t: f64) -> Option<f64> {
        average_precision(&[match_detections(gt, dets, t, AreaRange::ALL, 2000)])
    }

    #[test]
    fn matching_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[g], &[(bx(0.0, 0.0, 10.0, 9.0), 0.5)], 0.5, AreaRange::ALL, 10);
        assert_eq!(m.outcomes, vec![Outcome::TruePositive]);

        let m = match_detections(&[g], &[(bx(0.0, 0.0, 10.0, 9.5), 0.3), (g, 0.8)], 0.5, AreaRange::ALL, 10);
        assert_eq!(m.scores, vec![0.8, 0.3]);
        assert_eq!(m.outcomes, vec![Outcome::TruePositive, Outcome::FalsePositive]);

        // IoU 0.49 sits strictly below the threshold.
        let m = match_detections(&[g], &[(bx(0.0, 0.0, 4.9, 10.0), 0.9)], 0.5, AreaRange::ALL, 10);
        assert_eq!((m.count(Outcome::FalsePositive), m.false_negatives()), (1, 1));
        // Exactly at the threshold matches.
        let m = match_detections(&[g], &[(bx(0.0, 0.0, 5.0, 10.0), 0.9)], 0.5, AreaRange::ALL, 10);
        assert_eq!(m.count(Outcome::TruePositive), 1);
    }

    #[test]
    fn matching_prefers_highest_iou() {
        let g1 = bx(0.0, 0.0, 10.0, 10.0);
        let g2 = bx(2.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[g1, g2], &[(bx(2.0, 0.0, 10.0, 10.0), 0.9)], 0.5, AreaRange::ALL, 10);
        assert_eq!(m.gt_match, vec![None, Some(0)]);
    }

    #[test]
    fn max_dets_truncates_lowest_scores() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let m = match_detections(&[g], &[(g, 0.1), (bx(50.0, 0.0, 5.0, 5.0), 0.9)], 0.5, AreaRange::ALL, 1);
        assert_eq!(m.outcomes, vec![Outcome::FalsePositive]);
    }

    #[test]
    fn ap_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let far = bx(100.0, 100.0, 10.0, 10.0);
        assert_eq!(ap_of(&[g], &[(g, 0.9)], 0.5), Some(1.0));
        assert_eq!(ap_of(&[g], &[(far, 0.9), (g, 0.8)], 0.5), Some(0.5));
        assert_eq!(ap_of(&[g], &[], 0.5), Some(0.0));
        assert_eq!(ap_of(&[], &[], 0.5), None);
        assert_eq!(ap_of(&[], &[(g, 0.3)], 0.5), Some(0.0));
        // Half recall at full precision covers 51 of the 101 sample points.
        assert_eq!(ap_of(&[g, far], &[(g, 0.9)], 0.5), Some(51.0 / 101.0));
    }

    #[test]
    fn size_bucket_ignores_out_of_range_matches() {
        let small = bx(0.0, 0.0, 20.0, 20.0);
        let large = bx(100.0, 100.0, 200.0, 200.0);
        let tiny_fp = bx(500.0, 500.0, 5.0, 5.0);
        let big_fp = bx(700.0, 700.0, 150.0, 150.0);
        let dets = [(large, 0.95), (big_fp, 0.9), (small, 0.8), (tiny_fp, 0.1)];
        let m = match_detections(&[small, large], &dets, 0.5, AreaRange::SMALL, 100);
        assert_eq!(
            m.outcomes,
            vec![Outcome::Ignored, Outcome::Ignored, Outcome::TruePositive, Outcome::FalsePositive]
        );
        assert_eq!(m.num_gt(), 1);
        assert_eq!(average_precision(&[m]), Some(1.0));
    }

    /// Two images, two classes, six truth boxes. Class a is found exactly;
    /// class b alternates a false positive above each true positive, so its
    /// precision envelope is 0.5 everywhere. Every IoU is 0 or 1, so every
    /// threshold agrees.
    fn six_box_fixture() -> (DatasetIndex, Vec<Detection>) {
        let a = [(1, bx(10.0, 10.0, 40.0, 40.0)), (1, bx(300.0, 10.0, 60.0, 30.0)), (2, bx(10.0, 500.0, 120.0, 120.0))];
        let b = [(1, bx(600.0, 600.0, 20.0, 20.0)), (2, bx(100.0, 100.0, 40.0, 40.0)), (2, bx(700.0, 100.0, 80.0, 80.0))];
        let gt: Vec<(u64, u64, BBox)> = a
            .iter()
            .map(|(i, b)| (*i, 1, *b))
            .chain(b.iter().map(|(i, bb)| (*i, 2, *bb)))
            .collect();
        let mut dets: Vec<Detection> = a.iter().map(|(i, b)| det(*i, 1, *b, 0.7)).collect();
        for (k, (img, gb)) in b.iter().enumerate() {
            let hi = 0.9 - 0.2 * k as f64;
            dets.push(det(*img, 2, bx(900.0, 900.0 - 30.0 * k as f64, 10.0, 10.0), hi));
            dets.push(det(*img, 2, *gb, hi - 0.1));
        }
        (dataset(&gt), dets)
    }

    #[test]
    fn six_box_fixture_scores_three_quarters() {
        let (ds, dets) = six_box_fixture();
        let report = coco_map(&ds, &dets, &EvalConfig::default()).unwrap();
        assert!((report.map_50_95.unwrap() - 0.75).abs() < 1e-12);
        assert!((report.map_50.unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(report.class(1).unwrap().ap_50, Some(1.0));
        assert_eq!(report.class(2).unwrap().ap_50, Some(0.5));
        let b = report.class(2).unwrap();
        assert_eq!((b.tp, b.fp, b.fn_, b.gt_count, b.det_count), (3, 3, 0, 3, 6));
        // Class subset mode evaluates class a alone.
        let subset = EvalConfig {
            class_subset: Some(vec![1]),
            ..EvalConfig::default()
        };
        let r = coco_map(&ds, &dets, &subset).unwrap();
        assert_eq!(r.map_50_95, Some(1.0));
        assert_eq!(r.per_class.len(), 1);
    }

    #[test]
    fn empty_detections_score_zero() {
        let (ds, _) = six_box_fixture();
        let r = coco_map(&ds, &[], &EvalConfig::default()).unwrap();
        assert_eq!(r.map_50_95, Some(0.0));
        assert_eq!(r.map_50, Some(0.0));
        let missed = r.confusion.missed();
        assert_eq!(r.confusion.cells.iter().map(|row| row[missed]).sum::<u64>(), 6);
    }

    #[test]
    fn identity_detections_score_one_and_diagonal() {
        let (ds, _) = six_box_fixture();
        let dets: Vec<Detection> = ds.annotations.iter().map(|a| det(a.image_id, a.category_id, a.bbox, 1.0)).collect();
        let r = coco_map(&ds, &dets, &EvalConfig::default()).unwrap();
        for v in [r.map_50_95, r.map_50, r.map_50_small, r.map_50_medium, r.map_50_large] {
            assert_eq!(v, Some(1.0));
        }
        assert!(r.confusion.is_diagonal());
        assert_eq!(r.confusion.cells[0][0] + r.confusion.cells[1][1], 6);
    }

    #[test]
    fn unknown_references_are_structural() {
        let (ds, _) = six_box_fixture();
        let bad_image = det(9, 1, bx(0.0, 0.0, 1.0, 1.0), 0.5);
        assert!(matches!(coco_map(&ds, &[bad_image], &EvalConfig::default()), Err(Error::Structural(_))));
        let bad_class = det(1, 7, bx(0.0, 0.0, 1.0, 1.0), 0.5);
        assert!(matches!(coco_map(&ds, &[bad_class], &EvalConfig::default()), Err(Error::Structural(_))));
    }

    #[test]
    fn confusion_examples() {
        let gt = [
            (1, 1, bx(0.0, 0.0, 50.0, 50.0)),
            (1, 2, bx(100.0, 0.0, 50.0, 50.0)),
            (2, 2, bx(0.0, 0.0, 50.0, 50.0)),
        ];
        let ds = dataset(&gt);
        // Swapped labels everywhere.
        let swapped: Vec<Detection> = gt.iter().map(|(i, c, b)| det(*i, 3 - c, *b, 0.9)).collect();
        let m = confusion_matrix(&ds, &swapped, &EvalConfig::default()).unwrap();
        // Class b is more abundant and comes first.
        assert_eq!(m.category_ids, vec![2, 1]);
        assert_eq!(m.labels, vec!["b", "a", "background", "missed"]);
        assert_eq!(m.cells[0][1], 2);
        assert_eq!(m.cells[1][0], 1);
        assert_eq!(m.off_diagonal_total(), 3);

        // Everything below the operating point: all truth is missed.
        let low: Vec<Detection> = gt.iter().map(|(i, c, b)| det(*i, *c, *b, 0.59)).collect();
        let m = confusion_matrix(&ds, &low, &EvalConfig::default()).unwrap();
        assert_eq!(m.cells[0][m.missed()], 2);
        assert_eq!(m.cells[1][m.missed()], 1);
        // Exactly at the operating point counts.
        let at: Vec<Detection> = gt.iter().map(|(i, c, b)| det(*i, *c, *b, 0.60)).collect();
        assert!(confusion_matrix(&ds, &at, &EvalConfig::default()).unwrap().is_diagonal());

        let stray = vec![det(2, 1, bx(500.0, 500.0, 10.0, 10.0), 0.99)];
        let m = confusion_matrix(&ds, &stray, &EvalConfig::default()).unwrap();
        assert_eq!(m.cells[m.background()][1], 1);
    }

    #[test]
    fn config_validation() {
        let mut c = EvalConfig::default();
        assert!(c.validate().is_ok());
        c.iou_thresholds = vec![0.5, 0.5];
        assert!(c.validate().is_err());
        c.iou_thresholds = vec![0.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn report_table_mentions_every_class() {
        let (ds, dets) = six_box_fixture();
        let t = coco_map(&ds, &dets, &EvalConfig::default()).unwrap().to_table();
        assert!(t.contains("mAP@0.5:0.95") && t.contains("0.750"));
        assert!(t.lines().any(|l| l.starts_with("a ")) && t.lines().any(|l| l.starts_with("b ")));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<BBox>, Vec<(BBox, f64)>)> {
        let b = (0u32..40, 0u32..40, 1u32..20, 1u32..20).prop_map(|(x, y, w, h)| bx(x as f64, y as f64, w as f64, h as f64));
        (
            prop::collection::vec(b.clone(), 0..6),
            prop::collection::vec((b, 0u32..1000), 0..10)
                .prop_map(|v| v.into_iter().map(|(b, s)| (b, s as f64 / 1000.0)).collect()),
        )
    }

    proptest! {
        #[test]
        fn ap_is_bounded_and_counts_balance((gt, dets) in arb_case(), step in 0u32..10) {
            let t = 0.5 + step as f64 * 0.05;
            let m = match_detections(&gt, &dets, t, AreaRange::ALL, 2000);
            prop_assert_eq!(m.count(Outcome::TruePositive) + m.false_negatives(), gt.len());
            prop_assert_eq!(m.count(Outcome::TruePositive) + m.count(Outcome::FalsePositive), dets.len());
            if let Some(ap) = average_precision(&[m]) {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }

        #[test]
        fn ap_depends_only_on_rank((gt, dets) in arb_case()) {
            // Distinct scores keep the ranking unambiguous under the transform.
            let mut dets = dets;
            for (i, d) in dets.iter_mut().enumerate() {
                d.1 = (i as f64 + 1.0) / 20.0;
            }
            let squashed: Vec<(BBox, f64)> = dets.iter().map(|(b, s)| (*b, s.powi(3) * 0.5)).collect();
            prop_assert_eq!(ap_of(&gt, &dets, 0.5), ap_of(&gt, &squashed, 0.5));
        }

        #[test]
        fn size_buckets_partition_truth((gt, dets) in arb_case()) {
            let n: usize = [AreaRange::SMALL, AreaRange::MEDIUM, AreaRange::LARGE]
                .iter()
                .map(|r| match_detections(&gt, &dets, 0.5, *r, 2000).num_gt())
                .sum();
            prop_assert_eq!(n, gt.len());
        }

        #[test]
        fn duplicate_of_tp_never_raises_ap((gt, dets) in arb_case(), pick in any::<prop::sample::Index>()) {
            prop_assume!(!dets.is_empty());
            let base = ap_of(&gt, &dets, 0.5);
            let mut more = dets.clone();
            let i = pick.index(dets.len());
            more.insert(i + 1, dets[i]);
            let dup = ap_of(&gt, &more, 0.5);
            if let (Some(a), Some(b)) = (base, dup) {
                prop_assert!(b <= a + 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_of_tp_strictly_lowers_ap_when_a_later_tp_exists() {
        let g1 = bx(0.0, 0.0, 10.0, 10.0);
        let g2 = bx(50.0, 0.0, 10.0, 10.0);
        let base = ap_of(&[g1, g2], &[(g1, 0.9), (g2, 0.8)], 0.5).unwrap();
        let dup = ap_of(&[g1, g2], &[(g1, 0.9), (g1, 0.9), (g2, 0.8)], 0.5).unwrap();
        assert_eq!(base, 1.0);
        assert!(dup < base);
    }
}
