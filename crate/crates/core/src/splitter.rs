//! Train / validation / test assignment of whole images.
//!
//! Targets are fractions of the annotation count, not of the image count.
//! Images are placed greedily, largest first, into the split with the largest
//! remaining annotation deficit. A split that already holds more than its
//! share of the image's environmental stratum has its score reduced by
//! `stratum_penalty` times its deficit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, EnvMetadata, Substrate};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub target_fractions: [f64; 3],
    pub depth_bins: Vec<f64>,
    pub inclination_bins: Vec<f64>,
    /// Fraction of the deficit removed when a split over-represents a stratum.
    pub stratum_penalty: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            target_fractions: [0.6871, 0.1893, 0.1236],
            depth_bins: vec![400.0, 500.0, 1000.0, 2500.0],
            inclination_bins: vec![0.0, 10.0, 45.0, 90.0],
            stratum_penalty: 0.25,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        let sum: f64 = self.target_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        for (name, edges) in [("depth", &self.depth_bins), ("inclination", &self.inclination_bins)] {
            if edges.len() < 2 {
                return Err(Error::Config(format!("{name} bins need at least two edges")));
            }
            if edges.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config(format!("{name} bin edges must be strictly increasing")));
            }
        }
        if !(0.0..=1.0).contains(&self.stratum_penalty) {
            return Err(Error::Config("stratum_penalty must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub substrate: Substrate,
    pub depth_bin: usize,
    pub inclination_bin: usize,
}

/// Index of the bin containing `value`; values on an edge belong to the
/// higher bin. Out-of-range values are clamped and flagged.
fn bin_index(value: f64, edges: &[f64]) -> (usize, bool) {
    let bins = edges.len() - 1;
    if value < edges[0] {
        return (0, true);
    }
    if value > edges[bins] {
        return (bins - 1, true);
    }
    let above = edges.partition_point(|&e| e <= value);
    (above.saturating_sub(1).min(bins - 1), false)
}

pub fn stratum_key(meta: &EnvMetadata, spec: &SplitSpec) -> StratumKey {
    let (depth_bin, depth_clamped) = bin_index(meta.depth_m, &spec.depth_bins);
    let (inclination_bin, incl_clamped) = bin_index(meta.inclination_deg, &spec.inclination_bins);
    if depth_clamped {
        log::warn!("depth {} m outside bin edges; clamped to bin {depth_bin}", meta.depth_m);
    }
    if incl_clamped {
        log::warn!(
            "inclination {} deg outside bin edges; clamped to bin {inclination_bin}",
            meta.inclination_deg
        );
    }
    StratumKey {
        substrate: meta.substrate,
        depth_bin,
        inclination_bin,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumOccupancy {
    /// `None` for images without environment metadata.
    pub stratum: Option<StratumKey>,
    pub images: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<u64, Split>,
    pub achieved_fractions: [f64; 3],
    pub strata: Vec<StratumOccupancy>,
}

impl SplitAssignment {
    pub fn images_in(&self, split: Split) -> BTreeSet<u64> {
        self.assignments
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SplitFile {
            train: self.images_in(Split::Train).into_iter().collect(),
            val: self.images_in(Split::Val).into_iter().collect(),
            test: self.images_in(Split::Test).into_iter().collect(),
            achieved_fractions: self.achieved_fractions,
            strata: self.strata.clone(),
        };
        crate::io::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: SplitFile = crate::io::read_json(path)?;
        let mut assignments = BTreeMap::new();
        for (split, ids) in [(Split::Train, file.train), (Split::Val, file.val), (Split::Test, file.test)] {
            for id in ids {
                if assignments.insert(id, split).is_some() {
                    return Err(Error::Structural(format!("image {id} assigned to more than one split")));
                }
            }
        }
        Ok(Self {
            assignments,
            achieved_fractions: file.achieved_fractions,
            strata: file.strata,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<u64>,
    val: Vec<u64>,
    test: Vec<u64>,
    achieved_fractions: [f64; 3],
    #[serde(default)]
    strata: Vec<StratumOccupancy>,
}

fn annotation_counts(ds: &DatasetIndex) -> BTreeMap<u64, usize> {
    let mut counts: BTreeMap<u64, usize> = ds.images.iter().map(|i| (i.image_id, 0)).collect();
    for ann in &ds.annotations {
        *counts.entry(ann.image_id).or_default() += 1;
    }
    counts
}

fn achieved(counts: &BTreeMap<u64, usize>, assignments: &BTreeMap<u64, Split>) -> [f64; 3] {
    let mut per = [0usize; 3];
    for (id, split) in assignments {
        per[split.index()] += counts.get(id).copied().unwrap_or(0);
    }
    let total: usize = per.iter().sum();
    if total == 0 {
        return [0.0; 3];
    }
    per.map(|c| c as f64 / total as f64)
}

fn occupancy(
    strata: &BTreeMap<u64, Option<StratumKey>>,
    assignments: &BTreeMap<u64, Split>,
) -> Vec<StratumOccupancy> {
    let mut table: BTreeMap<Option<StratumKey>, [usize; 3]> = BTreeMap::new();
    for (id, split) in assignments {
        table.entry(strata[id]).or_default()[split.index()] += 1;
    }
    table
        .into_iter()
        .map(|(stratum, images)| StratumOccupancy { stratum, images })
        .collect()
}

/// Greedy annotation-balanced, stratum-aware split of whole images.
pub fn stratified_split(ds: &DatasetIndex, spec: &SplitSpec) -> Result<SplitAssignment> {
    spec.validate()?;
    if ds.images.len() < Split::ALL.len() {
        return Err(Error::Infeasible(format!(
            "{} images cannot fill {} splits",
            ds.images.len(),
            Split::ALL.len()
        )));
    }
    let counts = annotation_counts(ds);
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::Infeasible("dataset has no annotations".into()));
    }
    let strata: BTreeMap<u64, Option<StratumKey>> = ds
        .images
        .iter()
        .map(|i| (i.image_id, i.metadata.as_ref().map(|m| stratum_key(m, spec))))
        .collect();

    // Seeded split priority, only consulted on exact score ties.
    let mut priority = [0usize, 1, 2];
    priority.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut rank = [0usize; 3];
    for (r, &s) in priority.iter().enumerate() {
        rank[s] = r;
    }

    let mut order: Vec<(u64, usize)> = counts.iter().map(|(&id, &c)| (id, c)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut assigned = [0usize; 3];
    let mut images_in = [0usize; 3];
    let mut stratum_load: BTreeMap<Option<StratumKey>, [usize; 3]> = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    for (pos, &(image_id, count)) in order.iter().enumerate() {
        let remaining = order.len() - pos;
        let empty: Vec<usize> = (0..3).filter(|&s| images_in[s] == 0).collect();
        let candidates: Vec<usize> = if remaining <= empty.len() { empty } else { vec![0, 1, 2] };

        let key = strata[&image_id];
        let load = stratum_load.get(&key).copied().unwrap_or_default();
        let load_total: usize = load.iter().sum();
        let score = |s: usize| {
            let deficit = spec.target_fractions[s] * total as f64 - assigned[s] as f64;
            let over = load_total > 0 && load[s] as f64 / load_total as f64 > spec.target_fractions[s];
            if over {
                deficit - spec.stratum_penalty * deficit.abs()
            } else {
                deficit
            }
        };
        let best = candidates
            .iter()
            .copied()
            .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(rank[b].cmp(&rank[a])))
            .expect("at least one candidate split");
        assigned[best] += count;
        images_in[best] += 1;
        stratum_load.entry(key).or_default()[best] += count;
        assignments.insert(image_id, Split::ALL[best]);
    }

    Ok(SplitAssignment {
        achieved_fractions: achieved(&counts, &assignments),
        strata: occupancy(&strata, &assignments),
        assignments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassPresence {
    pub category_id: u64,
    pub name: String,
    pub annotations: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub achieved_fractions: [f64; 3],
    pub annotations: [usize; 3],
    pub images: [usize; 3],
    pub classes: Vec<ClassPresence>,
    pub strata: Vec<StratumOccupancy>,
    pub warnings: Vec<String>,
}

/// Recomputes fractions and per-class / per-stratum tables for an assignment.
/// Classes that have annotations but none in train are flagged.
pub fn validate_split(ds: &DatasetIndex, a: &SplitAssignment, spec: &SplitSpec) -> Result<SplitReport> {
    for img in &ds.images {
        if !a.assignments.contains_key(&img.image_id) {
            return Err(Error::Structural(format!("image {} is not assigned to a split", img.image_id)));
        }
    }
    let counts = annotation_counts(ds);
    let mut annotations = [0usize; 3];
    let mut images = [0usize; 3];
    for img in &ds.images {
        let s = a.assignments[&img.image_id].index();
        images[s] += 1;
        annotations[s] += counts[&img.image_id];
    }
    let mut per_class: BTreeMap<u64, [usize; 3]> =
        ds.categories.ids().into_iter().map(|id| (id, [0; 3])).collect();
    for ann in &ds.annotations {
        per_class.entry(ann.category_id).or_default()[a.assignments[&ann.image_id].index()] += 1;
    }
    let mut warnings = Vec::new();
    let classes = per_class
        .into_iter()
        .map(|(id, n)| {
            let name = ds
                .categories
                .get(id)
                .map(|c| c.name.clone())
                .unwrap_or_else(|| format!("category_{id}"));
            if n.iter().sum::<usize>() > 0 && n[Split::Train.index()] == 0 {
                warnings.push(format!("class {name} has no training annotations"));
            }
            ClassPresence {
                category_id: id,
                name,
                annotations: n,
            }
        })
        .collect();
    let strata: BTreeMap<u64, Option<StratumKey>> = ds
        .images
        .iter()
        .map(|i| (i.image_id, i.metadata.as_ref().map(|m| stratum_key(m, spec))))
        .collect();
    let scoped: BTreeMap<u64, Split> = ds.images.iter().map(|i| (i.image_id, a.assignments[&i.image_id])).collect();
    Ok(SplitReport {
        achieved_fractions: achieved(&counts, &scoped),
        annotations,
        images,
        classes,
        strata: occupancy(&strata, &scoped),
        warnings,
    })
}
