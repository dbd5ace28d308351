//! COCO-format dataset model.
//!
//! Images carry three extension fields (`substrate`, `depth_m`,
//! `inclination_deg`) describing the capture environment. Fields this crate
//! does not understand are kept in `extra` maps and written back unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Substrate {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvMetadata {
    pub substrate: Substrate,
    pub depth_m: f64,
    pub inclination_deg: f64,
}

impl EnvMetadata {
    pub fn new(substrate: Substrate, depth_m: f64, inclination_deg: f64) -> Result<Self> {
        if !(0.0..=11_000.0).contains(&depth_m) {
            return Err(Error::Structural(format!("depth {depth_m} m outside [0, 11000]")));
        }
        if !(0.0..=90.0).contains(&inclination_deg) {
            return Err(Error::Structural(format!(
                "inclination {inclination_deg} deg outside [0, 90]"
            )));
        }
        Ok(Self {
            substrate,
            depth_m,
            inclination_deg,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(rename = "id")]
    pub image_id: u64,
    #[serde(rename = "file_name", default)]
    pub file_path: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten, with = "env_fields")]
    pub metadata: Option<EnvMetadata>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ImageRecord {
    pub fn new(image_id: u64, file_path: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id,
            file_path: file_path.into(),
            width,
            height,
            metadata: None,
            extra: Map::new(),
        }
    }

    pub fn with_metadata(mut self, metadata: EnvMetadata) -> Self {
        self.metadata = Some(metadata);
        self
    }

    /// The full image as a box anchored at the origin.
    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
            .expect("image dimensions are validated positive")
    }
}

mod env_fields {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wire {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        substrate: Option<Substrate>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth_m: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inclination_deg: Option<f64>,
    }

    pub fn serialize<S: Serializer>(
        meta: &Option<EnvMetadata>,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let wire = match meta {
            Some(m) => Wire {
                substrate: Some(m.substrate),
                depth_m: Some(m.depth_m),
                inclination_deg: Some(m.inclination_deg),
            },
            None => Wire {
                substrate: None,
                depth_m: None,
                inclination_deg: None,
            },
        };
        wire.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Option<EnvMetadata>, D::Error> {
        let wire = Wire::deserialize(deserializer)?;
        match (wire.substrate, wire.depth_m, wire.inclination_deg) {
            (Some(s), Some(d), Some(i)) => EnvMetadata::new(s, d, i)
                .map(Some)
                .map_err(serde::de::Error::custom),
            (None, None, None) => Ok(None),
            _ => Err(serde::de::Error::custom(
                "substrate, depth_m and inclination_deg must be given together",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    /// Id of the whole-image annotation a patch annotation was cut from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<u64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Annotation {
    pub fn new(id: u64, image_id: u64, category_id: u64, bbox: BBox) -> Self {
        Self {
            id,
            image_id,
            category_id,
            bbox,
            source_id: None,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    /// Member of the reduced evaluation subset (the ten most abundant classes for WSBD).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub eval_subset: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Category {
    pub fn new(id: u64, name: impl Into<String>, eval_subset: bool) -> Self {
        Self {
            id,
            name: name.into(),
            eval_subset,
            extra: Map::new(),
        }
    }
}

const WSBD_CLASSES: [(&str, bool); 25] = [
    ("actiniarian", false),
    ("alcyonium", false),
    ("anthomastus", false),
    ("ascidian_cnemidocarpa_verrucosa", false),
    ("ascidian_distaplia", false),
    ("ascidian_pyura_bouvetensis", false),
    ("asteroidia", false),
    ("astrochlamys", true),
    ("benthic_fish", false),
    ("bryozoan", false),
    ("crinoid", false),
    ("crustaceans", true),
    ("cucumber", true),
    ("cup_coral", true),
    ("demosponges", true),
    ("echinoid", false),
    ("glass_sponge", true),
    ("gorgonian", true),
    ("hydroid_solitary", false),
    ("ophiosabine", true),
    ("ophiuroid_5_arms", true),
    ("pencil_urchin", false),
    ("pycnogonid", false),
    ("stylasterids", true),
    ("worm_tubes", false),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryTable {
    entries: Vec<Category>,
}

impl CategoryTable {
    /// Validates that ids and names are unique.
    pub fn new(entries: Vec<Category>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for c in &entries {
            if !ids.insert(c.id) {
                return Err(Error::Structural(format!("duplicate category id {}", c.id)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Structural(format!("duplicate category name {}", c.name)));
            }
        }
        Ok(Self { entries })
    }

    /// The 25-class benthic morphotype schema, ids 1..=25 in alphabetical order.
    pub fn wsbd() -> Self {
        let entries = WSBD_CLASSES
            .iter()
            .enumerate()
            .map(|(i, (name, top))| Category::new(i as u64 + 1, *name, *top))
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|c| c.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Category> {
        self.entries.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.get(id).is_some()
    }

    pub fn subset_ids(&self) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|c| c.eval_subset)
            .map(|c| c.id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<WireAnnotation>,
    #[serde(default)]
    categories: Vec<Category>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// Annotation as written to disk, with the derived `area` field.
#[derive(Serialize, Deserialize)]
struct WireAnnotation {
    #[serde(flatten)]
    inner: Annotation,
    #[serde(default)]
    area: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: CategoryTable,
    /// Top-level document fields other than the three arrays.
    pub extra: Map<String, Value>,
}

impl DatasetIndex {
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<Annotation>,
        categories: CategoryTable,
    ) -> Result<Self> {
        let ds = Self {
            images,
            annotations,
            categories,
            extra: Map::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks referential integrity and that every box fits inside its image.
    pub fn validate(&self) -> Result<()> {
        let mut dims = HashMap::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Structural(format!("image {} has zero size", img.image_id)));
            }
            if dims.insert(img.image_id, img).is_some() {
                return Err(Error::Structural(format!("duplicate image id {}", img.image_id)));
            }
        }
        let mut seen = HashSet::new();
        for ann in &self.annotations {
            if !seen.insert(ann.id) {
                return Err(Error::Structural(format!("duplicate annotation id {}", ann.id)));
            }
            let img = dims.get(&ann.image_id).ok_or_else(|| {
                Error::Structural(format!(
                    "annotation {} references unknown image {}",
                    ann.id, ann.image_id
                ))
            })?;
            if !self.categories.contains(ann.category_id) {
                return Err(Error::Structural(format!(
                    "annotation {} references unknown category {}",
                    ann.id, ann.category_id
                )));
            }
            if !inside(&ann.bbox, img.width, img.height) {
                return Err(Error::Structural(format!(
                    "annotation {} box {:?} exceeds image {} bounds {}x{}",
                    ann.id,
                    ann.bbox.to_array(),
                    img.image_id,
                    img.width,
                    img.height
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, String> {
        let file: CocoFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let categories = CategoryTable::new(file.categories).map_err(|e| e.to_string())?;
        Ok(Self {
            images: file.images,
            annotations: file.annotations.into_iter().map(|a| a.inner).collect(),
            categories,
            extra: file.extra,
        })
    }

    pub fn to_json_string(&self) -> String {
        let file = CocoFile {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|a| WireAnnotation {
                    inner: a.clone(),
                    area: Some(a.bbox.area()),
                })
                .collect(),
            categories: self.categories.entries.clone(),
            extra: self.extra.clone(),
        };
        serde_json::to_string_pretty(&file).expect("dataset serialization cannot fail")
    }

    /// Reads and validates a COCO dataset file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds = Self::from_json_str(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        ds.validate()
            .map_err(|e| e.context(path.display().to_string()))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_json_string())
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Annotations grouped by image id, each list in file order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> =
            self.images.iter().map(|i| (i.image_id, Vec::new())).collect();
        for ann in &self.annotations {
            map.entry(ann.image_id).or_default().push(ann);
        }
        map
    }

    /// Restriction to the given images, keeping categories and document fields.
    pub fn subset(&self, image_ids: &BTreeSet<u64>) -> Self {
        Self {
            images: self
                .images
                .iter()
                .filter(|i| image_ids.contains(&i.image_id))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| image_ids.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            extra: self.extra.clone(),
        }
    }
}

pub(crate) fn inside(b: &BBox, width: u32, height: u32) -> bool {
    const EPS: f64 = 1e-6;
    b.x2() <= width as f64 + EPS && b.y2() <= height as f64 + EPS
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub category_id: u64,
    pub name: String,
    pub count: usize,
    pub min_area: f64,
    pub max_area: f64,
    pub mean_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub classes: Vec<ClassSummary>,
    pub total_count: usize,
    pub total_images: usize,
}

impl DatasetReport {
    pub fn class(&self, name: &str) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>10}  {:>10}  {:>10}\n",
            "class", "count", "min_area", "max_area", "avg_area"
        );
        for c in &self.classes {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>10.0}  {:>10.0}  {:>10.0}\n",
                c.name, c.count, c.min_area, c.max_area, c.mean_area
            ));
        }
        out.push_str(&format!("{:<width$}  {:>8}\n", "total", self.total_count));
        out
    }
}

/// Per-class annotation count and box-area summary.
pub fn dataset_report(ds: &DatasetIndex) -> Result<DatasetReport> {
    let mut acc: BTreeMap<u64, (usize, f64, f64, f64)> = ds
        .categories
        .entries()
        .iter()
        .map(|c| (c.id, (0, f64::INFINITY, 0.0, 0.0)))
        .collect();
    for ann in &ds.annotations {
        let entry = acc.get_mut(&ann.category_id).ok_or_else(|| {
            Error::Structural(format!(
                "annotation {} references unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        let area = ann.bbox.area();
        entry.0 += 1;
        entry.1 = entry.1.min(area);
        entry.2 = entry.2.max(area);
        entry.3 += area;
    }
    let classes = ds
        .categories
        .entries()
        .iter()
        .map(|c| {
            let (count, min, max, sum) = acc[&c.id];
            ClassSummary {
                category_id: c.id,
                name: c.name.clone(),
                count,
                min_area: if count == 0 { 0.0 } else { min },
                max_area: max,
                mean_area: if count == 0 { 0.0 } else { sum / count as f64 },
            }
        })
        .collect();
    Ok(DatasetReport {
        classes,
        total_count: ds.annotations.len(),
        total_images: ds.images.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn wsbd_schema_shape() {
        let t = CategoryTable::wsbd();
        assert_eq!(t.len(), 25);
        assert_eq!(t.subset_ids().len(), 10);
        assert_eq!(t.ids(), (1..=25).collect::<Vec<_>>());
        let subset: Vec<_> = t
            .entries()
            .iter()
            .filter(|c| c.eval_subset)
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(
            subset,
            [
                "astrochlamys",
                "crustaceans",
                "cucumber",
                "cup_coral",
                "demosponges",
                "glass_sponge",
                "gorgonian",
                "ophiosabine",
                "ophiuroid_5_arms",
                "stylasterids"
            ]
        );
    }

    #[test]
    fn category_table_rejects_duplicates() {
        assert!(CategoryTable::new(vec![Category::new(1, "a", false), Category::new(1, "b", false)]).is_err());
        assert!(CategoryTable::new(vec![Category::new(1, "a", false), Category::new(2, "a", false)]).is_err());
    }

    #[test]
    fn report_empty_and_single() {
        let cats = CategoryTable::new(vec![Category::new(1, "a", false), Category::new(2, "b", false)]).unwrap();
        let empty = DatasetIndex::new(vec![ImageRecord::new(1, "a.png", 100, 100)], vec![], cats.clone()).unwrap();
        let r = dataset_report(&empty).unwrap();
        assert_eq!(r.total_count, 0);
        assert!(r.classes.iter().all(|c| c.count == 0));

        let one = DatasetIndex::new(
            vec![ImageRecord::new(1, "a.png", 100, 100)],
            vec![Annotation::new(1, 1, 1, bx(0.0, 0.0, 10.0, 10.0))],
            cats,
        )
        .unwrap();
        let r = dataset_report(&one).unwrap();
        let c = &r.classes[0];
        assert_eq!((c.count, c.min_area, c.max_area, c.mean_area), (1, 100.0, 100.0, 100.0));
        assert_eq!(r.classes[1].count, 0);
    }

    #[test]
    fn report_rejects_unknown_category() {
        let ds = DatasetIndex {
            images: vec![ImageRecord::new(1, "a.png", 100, 100)],
            annotations: vec![Annotation::new(1, 1, 99, bx(0.0, 0.0, 10.0, 10.0))],
            categories: CategoryTable::wsbd(),
            extra: Map::new(),
        };
        assert!(matches!(dataset_report(&ds), Err(Error::Structural(_))));
    }

    #[test]
    fn validation_catches_integrity_errors() {
        let cats = CategoryTable::wsbd();
        let img = vec![ImageRecord::new(1, "a.png", 100, 100)];
        let out_of_bounds = vec![Annotation::new(1, 1, 1, bx(95.0, 0.0, 10.0, 10.0))];
        assert!(DatasetIndex::new(img.clone(), out_of_bounds, cats.clone()).is_err());
        let dangling = vec![Annotation::new(1, 7, 1, bx(0.0, 0.0, 10.0, 10.0))];
        assert!(DatasetIndex::new(img.clone(), dangling, cats.clone()).is_err());
        let dup = vec![
            Annotation::new(1, 1, 1, bx(0.0, 0.0, 10.0, 10.0)),
            Annotation::new(1, 1, 1, bx(0.0, 0.0, 10.0, 10.0)),
        ];
        assert!(DatasetIndex::new(img, dup, cats).is_err());
    }

    #[test]
    fn coco_round_trip_preserves_unknown_fields() {
        let text = r#"{
            "info": {"description": "x"},
            "images": [{"id": 3, "file_name": "a.png", "width": 50, "height": 40,
                        "substrate": "hard", "depth_m": 421.0, "inclination_deg": 5,
                        "camera": "ofobs"}],
            "annotations": [{"id": 1, "image_id": 3, "category_id": 2, "bbox": [1.5, 2, 10, 10],
                             "area": 100, "iscrowd": 0}],
            "categories": [{"id": 2, "name": "cup_coral", "supercategory": "coral"}]
        }"#;
        let ds = DatasetIndex::from_json_str(text).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.images[0].metadata.unwrap().substrate, Substrate::Hard);
        assert_eq!(ds.images[0].extra["camera"], "ofobs");
        assert_eq!(ds.annotations[0].extra["iscrowd"], 0);
        assert!(ds.extra.contains_key("info"));
        let again = DatasetIndex::from_json_str(&ds.to_json_string()).unwrap();
        assert_eq!(again, ds);
        let v: Value = serde_json::from_str(&ds.to_json_string()).unwrap();
        assert_eq!(v["annotations"][0]["area"], 100.0);
        assert_eq!(v["categories"][0]["supercategory"], "coral");
    }

    #[test]
    fn partial_metadata_is_rejected() {
        let text = r#"{"images": [{"id": 1, "file_name": "a", "width": 5, "height": 5, "depth_m": 3}],
                       "annotations": [], "categories": []}"#;
        assert!(DatasetIndex::from_json_str(text).is_err());
    }
}
