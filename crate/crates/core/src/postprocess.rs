//! Reprojection of patch detections and duplicate resolution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, union_box};
use crate::slicer::PatchManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Nmm,
    Nms,
    None,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nmm" => Ok(MergeMode::Nmm),
            "nms" => Ok(MergeMode::Nms),
            "none" => Ok(MergeMode::None),
            other => Err(Error::Config(format!("unknown postprocess mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub mode: MergeMode,
    pub iou_threshold: f64,
    pub class_agnostic: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            mode: MergeMode::Nmm,
            iou_threshold: 0.20,
            class_agnostic: false,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold {} must lie in (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Maps patch-local detections onto their parent image. Boxes are clamped to
/// the parent bounds; a box falling entirely outside is dropped.
pub fn reproject(dets: &[Detection], manifest: &PatchManifest) -> Result<Vec<Detection>> {
    let lookup = manifest.lookup();
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let Some(patch_id) = d.patch_id else {
            return Err(Error::Structural("detection has no patch_id to reproject".into()));
        };
        let entry = lookup
            .get(&patch_id)
            .ok_or_else(|| Error::Structural(format!("detection references unknown patch {patch_id}")))?;
        let moved = d.bbox.translate(entry.origin_x as f64, entry.origin_y as f64)?;
        let Some(clamped) = moved.intersection(&entry.parent_bounds()) else {
            log::warn!("detection in patch {patch_id} lies outside its parent image, dropped");
            continue;
        };
        out.push(Detection {
            patch_id: None,
            image_id: Some(entry.parent_image_id),
            category_id: d.category_id,
            bbox: clamped,
            score: d.score,
        });
    }
    Ok(out)
}

fn group_key(d: &Detection, class_agnostic: bool) -> (Option<u64>, Option<u64>) {
    (d.image_id, (!class_agnostic).then_some(d.category_id))
}

fn partition(dets: &[Detection], class_agnostic: bool) -> BTreeMap<(Option<u64>, Option<u64>), Vec<Detection>> {
    let mut groups: BTreeMap<_, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        groups.entry(group_key(d, class_agnostic)).or_default().push(d.clone());
    }
    groups
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Index pairs whose IoU meets `threshold`, found with a sweep over x.
fn linked_pairs(dets: &[Detection], threshold: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[a].bbox.x().total_cmp(&dets[b].bbox.x()));
    let mut pairs = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        let right = dets[i].bbox.x2();
        for &j in &order[k + 1..] {
            if dets[j].bbox.x() >= right {
                break;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) >= threshold {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// One merging round: every cluster of detections chained together by
/// pairwise IoU at or above the threshold becomes its hull, scored with the
/// cluster's best score and labelled by its best-ranked member.
fn merge_round(dets: &[Detection], threshold: f64) -> (Vec<Detection>, bool) {
    let mut parent: Vec<usize> = (0..dets.len()).collect();
    let pairs = linked_pairs(dets, threshold);
    if pairs.is_empty() {
        return (dets.to_vec(), false);
    }
    for (a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..dets.len() {
        let r = find(&mut parent, i);
        clusters.entry(r).or_default().push(i);
    }
    let merged = clusters
        .into_values()
        .map(|members| {
            let anchor = members
                .iter()
                .copied()
                .min_by(|&a, &b| dets[a].rank_cmp(&dets[b]))
                .expect("clusters are non-empty");
            let mut out = dets[anchor].clone();
            for &m in &members {
                out.bbox = union_box(&out.bbox, &dets[m].bbox);
            }
            out
        })
        .collect();
    (merged, true)
}

/// Non-maximum merging. Detections are grouped per image and class (per
/// image only when `class_agnostic`); linked clusters are replaced by their
/// hull and the merge repeats on the hulls until no pair in a group meets the
/// threshold, so the result is a fixed point. Output is ordered by score.
pub fn nmm_merge(dets: &[Detection], cfg: &PostprocessConfig) -> Vec<Detection> {
    let mut out = Vec::with_capacity(dets.len());
    for (_, mut group) in partition(dets, cfg.class_agnostic) {
        loop {
            let (next, changed) = merge_round(&group, cfg.iou_threshold);
            group = next;
            if !changed {
                break;
            }
        }
        out.extend(group);
    }
    out.sort_by(|a, b| a.rank_cmp(b));
    out
}

/// Greedy non-maximum suppression per image and class. Survivors are the
/// original detections.
pub fn nms_suppress(dets: &[Detection], cfg: &PostprocessConfig) -> Vec<Detection> {
    let mut out = Vec::with_capacity(dets.len());
    for (_, mut group) in partition(dets, cfg.class_agnostic) {
        group.sort_by(|a, b| a.rank_cmp(b));
        let mut kept: Vec<Detection> = Vec::new();
        for d in group {
            if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < cfg.iou_threshold) {
                kept.push(d);
            }
        }
        out.extend(kept);
    }
    out.sort_by(|a, b| a.rank_cmp(b));
    out
}

pub fn apply_mode(dets: &[Detection], cfg: &PostprocessConfig) -> Vec<Detection> {
    match cfg.mode {
        MergeMode::Nmm => nmm_merge(dets, cfg),
        MergeMode::Nms => nms_suppress(dets, cfg),
        MergeMode::None => dets.to_vec(),
    }
}

/// Reprojects, groups by parent image and resolves duplicates. Every image in
/// the manifest gets an entry, possibly empty.
pub fn postprocess_pipeline(
    dets: &[Detection],
    manifest: &PatchManifest,
    cfg: &PostprocessConfig,
) -> Result<BTreeMap<u64, Vec<Detection>>> {
    cfg.validate()?;
    let reprojected = reproject(dets, manifest)?;
    let mut per_image: BTreeMap<u64, Vec<Detection>> =
        manifest.entries.iter().map(|e| (e.parent_image_id, Vec::new())).collect();
    for d in reprojected {
        per_image.entry(d.image_id.expect("set by reproject")).or_default().push(d);
    }
    Ok(per_image
        .into_iter()
        .map(|(id, d)| (id, apply_mode(&d, cfg)))
        .collect())
}
